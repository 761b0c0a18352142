//! Raw loops behind the differentiable ops. Plain direct convolution; each
//! output element is accumulated in a fixed order so results are reproducible.

use super::Scalar;

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output columns `ow` whose input column `ow*stride + kw - pad` lies in `[0, w)`.
#[inline]
fn valid_cols(w: usize, ow_len: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(stride) };
    // largest ow with ow*stride + kw - pad <= w - 1
    let hi = if w + pad > kw {
        ((w - 1 + pad - kw) / stride + 1).min(ow_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.co * d.oh * d.ow];
    let (hw, ohw, kk) = (d.h * d.w, d.oh * d.ow, d.k * d.k);
    for n in 0..d.n {
        for oc in 0..d.co {
            let o = &mut out[(n * d.co + oc) * ohw..(n * d.co + oc + 1) * ohw];
            for ic in 0..d.ci {
                let xs = &x[(n * d.ci + ic) * hw..(n * d.ci + ic + 1) * hw];
                let ws = &wt[(oc * d.ci + ic) * kk..(oc * d.ci + ic + 1) * kk];
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wv = ws[kh * d.k + kw];
                        let (c0, c1) = valid_cols(d.w, d.ow, kw, d.stride, d.pad);
                        if c0 >= c1 {
                            continue;
                        }
                        for oh in 0..d.oh {
                            let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                            if ih < 0 || ih as usize >= d.h {
                                continue;
                            }
                            let xrow = &xs[ih as usize * d.w..(ih as usize + 1) * d.w];
                            let orow = &mut o[oh * d.ow..(oh + 1) * d.ow];
                            let base = c0 * d.stride + kw - d.pad;
                            if d.stride == 1 {
                                for (ov, &xv) in orow[c0..c1].iter_mut().zip(&xrow[base..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (t, ov) in orow[c0..c1].iter_mut().enumerate() {
                                    *ov += wv * xrow[base + t * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (hw, ohw, kk) = (d.h * d.w, d.oh * d.ow, d.k * d.k);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); wt.len()]);
    for n in 0..d.n {
        for oc in 0..d.co {
            let g = &dy[(n * d.co + oc) * ohw..(n * d.co + oc + 1) * ohw];
            for ic in 0..d.ci {
                let xs = &x[(n * d.ci + ic) * hw..(n * d.ci + ic + 1) * hw];
                let wbase = (oc * d.ci + ic) * kk;
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let (c0, c1) = valid_cols(d.w, d.ow, kw, d.stride, d.pad);
                        if c0 >= c1 {
                            continue;
                        }
                        let wv = wt[wbase + kh * d.k + kw];
                        let mut acc = T::zero();
                        for oh in 0..d.oh {
                            let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                            if ih < 0 || ih as usize >= d.h {
                                continue;
                            }
                            let row = ih as usize * d.w;
                            let grow = &g[oh * d.ow..(oh + 1) * d.ow];
                            let base = row + c0 * d.stride + kw - d.pad;
                            if need_dw {
                                if d.stride == 1 {
                                    for (&gv, &xv) in grow[c0..c1].iter().zip(&xs[base..]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (t, &gv) in grow[c0..c1].iter().enumerate() {
                                        acc += gv * xs[base + t * d.stride];
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxs = &mut dx[(n * d.ci + ic) * hw..(n * d.ci + ic + 1) * hw];
                                if d.stride == 1 {
                                    for (dv, &gv) in dxs[base..].iter_mut().zip(&grow[c0..c1]) {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for (t, &gv) in grow[c0..c1].iter().enumerate() {
                                        dxs[base + t * d.stride] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wbase + kh * d.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) fn avg_pool_forward<T: Scalar>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    k: usize,
    s: usize,
) -> (Vec<T>, usize, usize) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let xs = &x[p * h * w..(p + 1) * h * w];
        let os = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for a in 0..k {
                    let row = (i * s + a) * w + j * s;
                    for &v in &xs[row..row + k] {
                        acc += v;
                    }
                }
                os[i * ow + j] = acc * inv;
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    dy: &[T],
    [n, c, h, w]: [usize; 4],
    k: usize,
    s: usize,
) -> Vec<T> {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let inv = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let gs = &dy[p * oh * ow..(p + 1) * oh * ow];
        let ds = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = gs[i * ow + j] * inv;
                for a in 0..k {
                    let row = (i * s + a) * w + j * s;
                    for v in &mut ds[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// `out = a * b^T` for `a: n x c`, `b: m x c`.
pub(crate) fn matmul_t<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ar = &a[i * c..(i + 1) * c];
        for j in 0..m {
            let br = &b[j * c..(j + 1) * c];
            out[i * m + j] = dot(ar, br);
        }
    }
    out
}

/// `out = a * b` for `a: n x m`, `b: m x c`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..m {
            let av = a[i * m + j];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[j * c..(j + 1) * c]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out = a^T * b` for `a: n x m`, `b: n x c`, giving `m x c`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * c];
    for i in 0..n {
        let brow = &b[i * c..(i + 1) * c];
        for j in 0..m {
            let av = a[i * m + j];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[j * c..(j + 1) * c].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
