use std::path::Path;
use std::process::{Command, Output};

fn resim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resim")).args(args).output().expect("spawn resim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_map(path: &Path, c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) {
    let mut s = format!("{c} {h} {w}\n");
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                s.push_str(&format!("{} ", f(k, i, j)));
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn pool_constant_map_returns_the_constant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fm.txt");
    write_map(&p, 2, 5, 6, |k, _, _| if k == 0 { 2.5 } else { -1.0 });
    for method in ["prroi", "align"] {
        let o = resim(&["pool", "--feature-map", p.to_str().unwrap(), "--region", "0.6,1.1,3.7,4.9", "--method", method]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Vec<f64> = stdout(&o).split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 2);
        assert!((v[0] - 2.5).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9, "{v:?}");
    }
}

#[test]
fn pool_linear_map_returns_value_at_center() {
    // the bilinear interpolant of a linear ramp is the ramp itself
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fm.txt");
    write_map(&p, 1, 8, 8, |_, i, j| 0.5 * i as f64 + 0.25 * j as f64);
    let o = resim(&["pool", "--feature-map", p.to_str().unwrap(), "--region", "1,2,5,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    // center (y, x) = (3, 3) in continuous coordinates, cell centers at +0.5
    assert!((v - (0.5 * 2.5 + 0.25 * 2.5)).abs() < 1e-9, "{v}");
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fm.txt");
    write_map(&p, 1, 3, 3, |_, _, _| 1.0);
    let o = resim(&["pool", "--feature-map", p.to_str().unwrap(), "--region", "2,2,1,3"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=invalid_region message="), "{err}");

    let o = resim(&["eval-retrieval", "--ckpt", dir.path().join("missing.bin").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=io "), "{}", stderr(&o));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "not_a_key = 3\n").unwrap();
    let o = resim(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error kind=config "), "{}", stderr(&o));
}

#[test]
fn check_gradients_for_pooling_and_losses() {
    for module in ["pooling", "losses"] {
        let o = resim(&["check-gradients", "--module", module]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.lines().count() >= 3);
        assert!(out.lines().all(|l| l.contains("max_rel_err=") && l.ends_with("ok")), "{out}");
    }
}

#[test]
fn gen_data_then_pretrain_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("images");
    let o = resim(&["gen-data", "--seed", "3", "--count", "16", "--canvas", "80", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 16);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# small run\nepochs = 1\nbatch_size = 8\nstage_channels = 4,8,8,16,16\nregion_head_channels = 8\nfpn_channels = 8\nimage_embed_dim = 8\nqueue_size = 64\ndata = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = resim(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(run.join("checkpoint.bin").exists());

    let ckpt = run.join("checkpoint.bin");
    let o = resim(&["eval-retrieval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--num-pairs", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("top1_acc=") && out.contains("chance="), "{out}");
    let o = resim(&["eval-retrieval", "--ckpt", ckpt.to_str().unwrap(), "--num-pairs", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn pretrain_with_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = resim(&["pretrain", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("checkpoint.bin").exists());
}
