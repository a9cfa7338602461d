//! Forward and backward math for every primitive.
//!
//! All loops are single-threaded with a fixed iteration order, so every
//! kernel is bit-deterministic. Convolution goes through im2col and a
//! shared matmul core.

use super::{same_shape, Scalar, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// matmul core
// ---------------------------------------------------------------------

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s = s + a[j] * b[j];
    }
    s
}

/// a (m,k) * b (k,n) -> (m,n)
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
    c
}

/// a (m,k) * bt' (k,n) where bt is stored (n,k) -> (m,n)
pub(crate) fn mm_nt<S: Scalar>(a: &[S], bt: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &bt[j * k..(j + 1) * k]);
        }
    }
    c
}

/// at' (m,k) * b (k,n) where at is stored (k,m) -> (m,n)
pub(crate) fn mm_tn<S: Scalar>(at: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(at[p * m + i], brow, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

// ---------------------------------------------------------------------
// conv2d (stride 1, symmetric zero padding)
// ---------------------------------------------------------------------

fn conv_out_side(side: usize, ksize: usize, pad: usize) -> Result<usize> {
    (side + 2 * pad + 1).checked_sub(ksize).filter(|&o| o > 0).ok_or_else(|| {
        Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel {ksize} too large for side {side} with pad {pad}"),
        }
    })
}

/// Scatters x (ci,h,w) into columns (ci*kh*kw, ho*wo).
fn im2col<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), ci * kh * kw * ho * wo);
    for v in cols.iter_mut() {
        *v = S::zero();
    }
    for c in 0..ci {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // valid ox satisfy 0 <= ox + kx - pad < w
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let src = iy * w + ox_lo + kx - pad;
                    let dst = row + oy * wo + ox_lo;
                    let len = ox_hi - ox_lo;
                    cols[dst..dst + len].copy_from_slice(&xc[src..src + len]);
                }
            }
        }
    }
}

/// Accumulates columns (ci*kh*kw, ho*wo) back into dx (ci,h,w).
fn col2im<S: Scalar>(
    cols: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    for c in 0..ci {
        let xc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let src = row + oy * wo + ox_lo;
                    let dst = iy * w + ox_lo + kx - pad;
                    for i in 0..ox_hi - ox_lo {
                        xc[dst + i] = xc[dst + i] + cols[src + i];
                    }
                }
            }
        }
    }
}

fn conv2d_shapes<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {ci} channels, kernel expects {wci}"),
        });
    }
    if b.shape() != [co] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias shape {:?}, expected [{co}]", b.shape()),
        });
    }
    let ho = conv_out_side(h, kh, pad)?;
    let wo = conv_out_side(wd, kw, pad)?;
    Ok((n, ci, h, wd, co, kh, kw, ho, wo))
}

pub(crate) fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, ci, h, wd, co, kh, kw, ho, wo) = conv2d_shapes(x, w, b, pad)?;
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![S::zero(); n * co * ho * wo];
    let plane = ho * wo;
    if kh == 1 && kw == 1 && pad == 0 {
        for bi in 0..n {
            let xb = &xs[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let ob = mm_nn(ws, xb, co, ci, plane);
            out[bi * co * plane..(bi + 1) * co * plane].copy_from_slice(&ob);
        }
    } else {
        let rows = ci * kh * kw;
        let mut cols = vec![S::zero(); rows * plane];
        for bi in 0..n {
            let xb = &xs[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            im2col(xb, ci, h, wd, kh, kw, pad, ho, wo, &mut cols);
            let ob = mm_nn(ws, &cols, co, rows, plane);
            out[bi * co * plane..(bi + 1) * co * plane].copy_from_slice(&ob);
        }
    }
    for bi in 0..n {
        for c in 0..co {
            let o = (bi * co + c) * plane;
            let bias = bs[c];
            for v in &mut out[o..o + plane] {
                *v = *v + bias;
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
    grad: &Tensor<S>,
    need: (bool, bool, bool),
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>, Option<Tensor<S>>)> {
    let (n, ci, h, wd, co, kh, kw, ho, wo) = conv2d_shapes(x, w, b, pad)?;
    let plane = ho * wo;
    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();
    let rows = ci * kh * kw;
    let mut dw = vec![S::zero(); if need.1 { co * rows } else { 0 }];
    let mut dx = vec![S::zero(); if need.0 { n * ci * h * wd } else { 0 }];
    let mut db = vec![S::zero(); if need.2 { co } else { 0 }];
    let one_by_one = kh == 1 && kw == 1 && pad == 0;
    let needs_cols = !one_by_one && (need.0 || need.1);
    let mut cols = if needs_cols { vec![S::zero(); rows * plane] } else { Vec::new() };
    for bi in 0..n {
        let gb = &gs[bi * co * plane..(bi + 1) * co * plane];
        let xb = &xs[bi * ci * h * wd..(bi + 1) * ci * h * wd];
        if one_by_one {
            if need.1 {
                let dwb = mm_nt(gb, xb, co, plane, ci);
                for (a, v) in dw.iter_mut().zip(dwb) {
                    *a = *a + v;
                }
            }
            if need.0 {
                let dxb = mm_tn(ws, gb, ci, co, plane);
                dx[bi * ci * h * wd..(bi + 1) * ci * h * wd].copy_from_slice(&dxb);
            }
        } else {
            if needs_cols {
                im2col(xb, ci, h, wd, kh, kw, pad, ho, wo, &mut cols);
            }
            if need.1 {
                let dwb = mm_nt(gb, &cols, co, plane, rows);
                for (a, v) in dw.iter_mut().zip(dwb) {
                    *a = *a + v;
                }
            }
            if need.0 {
                let dcols = mm_tn(ws, gb, rows, co, plane);
                col2im(
                    &dcols,
                    ci,
                    h,
                    wd,
                    kh,
                    kw,
                    pad,
                    ho,
                    wo,
                    &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                );
            }
        }
        if need.2 {
            for c in 0..co {
                let mut s = S::zero();
                for &v in &gb[c * plane..(c + 1) * plane] {
                    s = s + v;
                }
                db[c] = db[c] + s;
            }
        }
    }
    Ok((
        if need.0 { Some(Tensor::from_vec(x.shape(), dx)?) } else { None },
        if need.1 { Some(Tensor::from_vec(w.shape(), dw)?) } else { None },
        if need.2 { Some(Tensor::from_vec(b.shape(), db)?) } else { None },
    ))
}

// ---------------------------------------------------------------------
// linear / matmul
// ---------------------------------------------------------------------

fn linear_shapes<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    let (n, i) = x.dims2()?;
    let (o, wi) = w.dims2()?;
    if wi != i || b.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!(
                "x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        });
    }
    Ok((n, i, o))
}

pub(crate) fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, i, o) = linear_shapes(x, w, b)?;
    let mut out = mm_nt(x.data(), w.data(), n, i, o);
    let bs = b.data();
    for r in 0..n {
        for c in 0..o {
            out[r * o + c] = out[r * o + c] + bs[c];
        }
    }
    Tensor::from_vec(&[n, o], out)
}

pub(crate) fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, i, o) = linear_shapes(x, w, b)?;
    let gs = grad.data();
    let dx = mm_nn(gs, w.data(), n, o, i);
    let dw = mm_tn(gs, x.data(), o, n, i);
    let mut db = vec![S::zero(); o];
    for r in 0..n {
        for c in 0..o {
            db[c] = db[c] + gs[r * o + c];
        }
    }
    Ok((
        Tensor::from_vec(&[n, i], dx)?,
        Tensor::from_vec(&[o, i], dw)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if kb != k {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    Tensor::from_vec(&[m, n], mm_nn(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let da = mm_nt(grad.data(), b.data(), m, n, k);
    let db = mm_tn(a.data(), grad.data(), k, m, n);
    Ok((Tensor::from_vec(&[m, k], da)?, Tensor::from_vec(&[k, n], db)?))
}

// ---------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------

fn group_norm_shapes<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            detail: format!("gamma {:?}, beta {:?}, channels {c}", gamma.shape(), beta.shape()),
        });
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidAttr {
            op: "group_norm",
            detail: format!("{groups} groups do not divide {c} channels"),
        });
    }
    Ok((n, c, h, w))
}

pub(crate) fn group_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: f64,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = group_norm_shapes(x, gamma, beta, groups)?;
    let gs = c / groups;
    let plane = h * w;
    let m = gs * plane;
    let xs = x.data();
    let ga = gamma.data();
    let be = beta.data();
    let mut out = vec![S::zero(); xs.len()];
    let inv_m = S::from_f64(1.0 / m as f64);
    let epss = S::from_f64(eps);
    for bi in 0..n {
        for g in 0..groups {
            let base = (bi * c + g * gs) * plane;
            let chunk = &xs[base..base + m];
            let mut s = S::zero();
            let mut s2 = S::zero();
            for &v in chunk {
                s = s + v;
                s2 = s2 + v * v;
            }
            let mean = s * inv_m;
            let var = s2 * inv_m - mean * mean;
            let inv = (var + epss).sqrt().recip();
            for cc in 0..gs {
                let ch = g * gs + cc;
                let o = base + cc * plane;
                let (sc, sh) = (ga[ch], be[ch]);
                for j in 0..plane {
                    out[o + j] = (xs[o + j] - mean) * inv * sc + sh;
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: f64,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = group_norm_shapes(x, gamma, beta, groups)?;
    let gs = c / groups;
    let plane = h * w;
    let m = gs * plane;
    let xs = x.data();
    let ga = gamma.data();
    let gr = grad.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let inv_m = S::from_f64(1.0 / m as f64);
    let epss = S::from_f64(eps);
    for bi in 0..n {
        for g in 0..groups {
            let base = (bi * c + g * gs) * plane;
            let chunk = &xs[base..base + m];
            let mut s = S::zero();
            let mut s2 = S::zero();
            for &v in chunk {
                s = s + v;
                s2 = s2 + v * v;
            }
            let mean = s * inv_m;
            let var = s2 * inv_m - mean * mean;
            let inv = (var + epss).sqrt().recip();
            // first pass: per-channel reductions and group sums
            let mut sum_gh = S::zero();
            let mut sum_gh_xh = S::zero();
            for cc in 0..gs {
                let ch = g * gs + cc;
                let o = base + cc * plane;
                let mut dg = S::zero();
                let mut db = S::zero();
                for j in 0..plane {
                    let xh = (xs[o + j] - mean) * inv;
                    let gv = gr[o + j];
                    dg = dg + gv * xh;
                    db = db + gv;
                    let ghat = gv * ga[ch];
                    sum_gh = sum_gh + ghat;
                    sum_gh_xh = sum_gh_xh + ghat * xh;
                }
                dgamma[ch] = dgamma[ch] + dg;
                dbeta[ch] = dbeta[ch] + db;
            }
            let mean_gh = sum_gh * inv_m;
            let mean_gh_xh = sum_gh_xh * inv_m;
            for cc in 0..gs {
                let ch = g * gs + cc;
                let o = base + cc * plane;
                for j in 0..plane {
                    let xh = (xs[o + j] - mean) * inv;
                    let ghat = gr[o + j] * ga[ch];
                    dx[o + j] = inv * (ghat - mean_gh - xh * mean_gh_xh);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

// ---------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------

pub(crate) fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v / (S::one() + (-v).exp()))
}

pub(crate) fn silu_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let sig = S::one() / (S::one() + (-v).exp());
            g * sig * (S::one() + v * (S::one() - sig))
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("silu_backward shape")
}

pub(crate) fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("add", a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("mul", a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn ln<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.ln())
}

pub(crate) fn clamp_min<S: Scalar>(x: &Tensor<S>, min: f64) -> Tensor<S> {
    let m = S::from_f64(min);
    x.map(|v| if v < m { m } else { v })
}

// ---------------------------------------------------------------------
// scale_shift: per-(batch, channel) affine over spatial dims
// ---------------------------------------------------------------------

fn scale_shift_shapes<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [n, c] || shift.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "scale_shift",
            detail: format!(
                "x {:?} wants scale/shift [{n}, {c}], got {:?} / {:?}",
                x.shape(),
                scale.shape(),
                shift.shape()
            ),
        });
    }
    Ok((n, c, h * w))
}

pub(crate) fn scale_shift<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, plane) = scale_shift_shapes(x, scale, shift)?;
    let xs = x.data();
    let sc = scale.data();
    let sh = shift.data();
    let mut out = vec![S::zero(); xs.len()];
    for i in 0..n * c {
        let s = S::one() + sc[i];
        let t = sh[i];
        let o = i * plane;
        for j in 0..plane {
            out[o + j] = xs[o + j] * s + t;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) fn scale_shift_backward<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, plane) = scale_shift_shapes(x, scale, shift)?;
    let xs = x.data();
    let sc = scale.data();
    let gs = grad.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dscale = vec![S::zero(); n * c];
    let mut dshift = vec![S::zero(); n * c];
    for i in 0..n * c {
        let s = S::one() + sc[i];
        let o = i * plane;
        let mut ds = S::zero();
        let mut dt = S::zero();
        for j in 0..plane {
            let g = gs[o + j];
            dx[o + j] = g * s;
            ds = ds + g * xs[o + j];
            dt = dt + g;
        }
        dscale[i] = ds;
        dshift[i] = dt;
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(scale.shape(), dscale)?,
        Tensor::from_vec(shift.shape(), dshift)?,
    ))
}

// ---------------------------------------------------------------------
// concat / pooling / upsampling
// ---------------------------------------------------------------------

pub(crate) fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c1, h, w) = a.dims4()?;
    let (nb, c2, hb, wb) = b.dims4()?;
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let plane = h * w;
    let mut out = vec![S::zero(); n * (c1 + c2) * plane];
    for bi in 0..n {
        let dst = bi * (c1 + c2) * plane;
        out[dst..dst + c1 * plane]
            .copy_from_slice(&a.data()[bi * c1 * plane..(bi + 1) * c1 * plane]);
        out[dst + c1 * plane..dst + (c1 + c2) * plane]
            .copy_from_slice(&b.data()[bi * c2 * plane..(bi + 1) * c2 * plane]);
    }
    Tensor::from_vec(&[n, c1 + c2, h, w], out)
}

pub(crate) fn concat_channels_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, c1, h, w) = a.dims4()?;
    let (_, c2, _, _) = b.dims4()?;
    let plane = h * w;
    let mut da = vec![S::zero(); n * c1 * plane];
    let mut db = vec![S::zero(); n * c2 * plane];
    for bi in 0..n {
        let src = bi * (c1 + c2) * plane;
        da[bi * c1 * plane..(bi + 1) * c1 * plane]
            .copy_from_slice(&grad.data()[src..src + c1 * plane]);
        db[bi * c2 * plane..(bi + 1) * c2 * plane]
            .copy_from_slice(&grad.data()[src + c1 * plane..src + (c1 + c2) * plane]);
    }
    Ok((Tensor::from_vec(a.shape(), da)?, Tensor::from_vec(b.shape(), db)?))
}

pub(crate) fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "avg_pool2",
            detail: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let quarter = S::from_f64(0.25);
    let mut out = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let xo = p * h * w;
        let oo = p * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let t = xo + 2 * i * w + 2 * j;
                out[oo + i * wo + j] =
                    (xs[t] + xs[t + 1] + xs[t + w] + xs[t + w + 1]) * quarter;
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let gs = grad.data();
    let quarter = S::from_f64(0.25);
    let mut dx = vec![S::zero(); n * c * h * w];
    for p in 0..n * c {
        let xo = p * h * w;
        let oo = p * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let g = gs[oo + i * wo + j] * quarter;
                let t = xo + 2 * i * w + 2 * j;
                dx[t] = g;
                dx[t + 1] = g;
                dx[t + w] = g;
                dx[t + w + 1] = g;
            }
        }
    }
    Tensor::from_vec(x.shape(), dx)
}

pub(crate) fn upsample_nearest2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let xo = p * h * w;
        let oo = p * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                out[oo + i * wo + j] = xs[xo + (i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub(crate) fn upsample_nearest2_backward<S: Scalar>(
    x: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let (_, wo) = (2 * h, 2 * w);
    let gs = grad.data();
    let mut dx = vec![S::zero(); n * c * h * w];
    for p in 0..n * c {
        let xo = p * h * w;
        let oo = p * 4 * h * w;
        for i in 0..2 * h {
            for j in 0..2 * w {
                let t = xo + (i / 2) * w + j / 2;
                dx[t] = dx[t] + gs[oo + i * wo + j];
            }
        }
    }
    Tensor::from_vec(x.shape(), dx)
}

// ---------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------

/// Sums all elements (`per_batch = false`, output `[1]`) or each leading
/// slice (`per_batch = true`, output `[batch]`).
pub(crate) fn reduce<S: Scalar>(x: &Tensor<S>, per_batch: bool, mean: bool) -> Result<Tensor<S>> {
    let xs = x.data();
    if per_batch {
        let batch = x.shape()[0];
        let per = xs.len() / batch;
        let inv = S::from_f64(1.0 / per as f64);
        let mut out = vec![S::zero(); batch];
        for (b, o) in out.iter_mut().enumerate() {
            let mut s = S::zero();
            for &v in &xs[b * per..(b + 1) * per] {
                s = s + v;
            }
            *o = if mean { s * inv } else { s };
        }
        Tensor::from_vec(&[batch], out)
    } else {
        let mut s = S::zero();
        for &v in xs {
            s = s + v;
        }
        if mean {
            s = s * S::from_f64(1.0 / xs.len() as f64);
        }
        Ok(Tensor::scalar(s))
    }
}

pub(crate) fn reduce_backward<S: Scalar>(
    x: &Tensor<S>,
    per_batch: bool,
    mean: bool,
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let n = x.numel();
    let mut dx = vec![S::zero(); n];
    if per_batch {
        let batch = x.shape()[0];
        let per = n / batch;
        let scale = if mean { S::from_f64(1.0 / per as f64) } else { S::one() };
        for b in 0..batch {
            let g = grad.data()[b] * scale;
            for v in &mut dx[b * per..(b + 1) * per] {
                *v = g;
            }
        }
    } else {
        let scale = if mean { S::from_f64(1.0 / n as f64) } else { S::one() };
        let g = grad.data()[0] * scale;
        for v in &mut dx {
            *v = g;
        }
    }
    Tensor::from_vec(x.shape(), dx)
}
