use clap::{Parser, Subcommand};
use resim_core::encoder::load_checkpoint;
use resim_core::gradcheck::{self, CheckModule};
use resim_core::pooling::{prroi_pool, roi_align};
use resim_core::trainer::{restore, smooth};
use resim_core::{
    eval_retrieval, train, Dataset, Error, FolderDataset, Level, PoolMethod, Region, Result, RunConfig,
    SyntheticDataset, Tensor,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "resim", version, about = "Region-aligned contrastive pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write metrics.csv and checkpoint.bin to --out.
    Pretrain {
        /// key=value config file; defaults apply to missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Region retrieval probe on a checkpoint.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of .ppm images, or "synthetic" for held-out procedural images
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 256)]
        num_pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Finite-difference gradient checks; exits nonzero if any check fails.
    CheckGradients {
        #[arg(long, default_value = "all")]
        module: CheckModule,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Pool one region of a text feature map and print the vector.
    Pool {
        /// Text file: "C H W" followed by C*H*W values in CHW order
        #[arg(long)]
        feature_map: PathBuf,
        /// t,l,b,r in feature-map coordinates
        #[arg(long)]
        region: String,
        #[arg(long, default_value = "prroi")]
        method: PoolMethod,
        /// Samples per axis for align
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
    /// Write a synthetic dataset as .ppm files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        canvas: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pretrain(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let data = cfg.data.open(cfg.train.seed)?;
    let report = train(&cfg, data.as_ref(), Some(out))?;
    let h = &report.history;
    let rs: Vec<f64> = h.iter().map(|m| m.rs_infonce).collect();
    let s = smooth(&rs, 32);
    if let (Some(first), Some(last)) = (s.first(), s.last()) {
        let base = h.iter().map(|m| m.rs_baseline).sum::<f64>() / h.len() as f64;
        println!(
            "steps={} rs_infonce_start={first:.4} rs_infonce_end={last:.4} uniform_baseline={base:.4}",
            h.len()
        );
    }
    println!("wrote {} and {}", out.join("metrics.csv").display(), out.join("checkpoint.bin").display());
    Ok(())
}

fn eval(ckpt: &Path, data: &str, num_pairs: usize, seed: u64) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (cfg, enc) = restore(&ck)?;
    let dataset: Box<dyn Dataset> = if data == "synthetic" {
        Box::new(SyntheticDataset::new(num_pairs.max(1), cfg.data.canvas_size, cfg.train.seed ^ 0xE7A1))
    } else {
        Box::new(FolderDataset::open(Path::new(data))?)
    };
    let r = eval_retrieval(&enc, &ck.query, &cfg, dataset.as_ref(), num_pairs, seed)?;
    println!("{r}");
    Ok(())
}

fn check_gradients(module: CheckModule, seed: u64) -> Result<bool> {
    let reports = gradcheck::run(module, seed)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<28} max_rel_err={:.3e} tolerance={:.0e} checked={} {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn read_feature_map(path: &Path) -> Result<Tensor<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut nums = text.split_whitespace();
    let mut dim = || -> Result<usize> {
        nums.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("feature map must start with \"C H W\"".into()))
    };
    let (c, h, w) = (dim()?, dim()?, dim()?);
    let values = nums
        .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad feature value '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != c * h * w {
        return Err(Error::Config(format!("expected {} values for {c}x{h}x{w}, found {}", c * h * w, values.len())));
    }
    Tensor::from_vec(&[1, c, h, w], values)
}

fn parse_region(s: &str) -> Result<Region> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad region '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    let [t, l, b, r] = v[..] else {
        return Err(Error::Config(format!("region needs 4 values t,l,b,r, got '{s}'")));
    };
    Region::new(t, l, b, r)
}

fn pool(feature_map: &Path, region: &str, method: PoolMethod, samples: usize) -> Result<()> {
    let fm = read_feature_map(feature_map)?;
    let u = parse_region(region)?;
    let pooled = match method {
        PoolMethod::Precise => prroi_pool(&fm, &u, Level::C4)?,
        PoolMethod::Align { .. } => roi_align(&fm, &u, samples, Level::C4)?,
    };
    let v: Vec<String> = pooled.vector.iter().map(|x| format!("{x:.10}")).collect();
    println!("{}", v.join(" "));
    Ok(())
}

fn gen_data(seed: u64, count: usize, canvas: usize, out: &Path) -> Result<()> {
    let files = SyntheticDataset::new(count, canvas, seed).write_to(out)?;
    println!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out } => pretrain(config.as_deref(), &out),
        Command::EvalRetrieval {
            ckpt,
            data,
            num_pairs,
            seed,
        } => eval(&ckpt, &data, num_pairs, seed),
        Command::CheckGradients { module, seed } => match check_gradients(module, seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error kind=gradient_check message=one or more gradient checks exceeded tolerance");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Pool {
            feature_map,
            region,
            method,
            samples,
        } => pool(&feature_map, &region, method, samples),
        Command::GenData {
            seed,
            count,
            canvas,
            out,
        } => gen_data(seed, count, canvas, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
