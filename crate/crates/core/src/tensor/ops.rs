//! Differentiable tensor operations.
//!
//! Every op validates shapes up front, computes its result eagerly, checks
//! the result for non-finite values and records a backward rule on the tape
//! when any input participates in the gradient flow.

use super::{kernels, BackFn, Scratch, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::RngState;
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

fn same_tape(tape: &Tape, tensors: &[&Tensor], op: &str) -> Result<()> {
    for t in tensors {
        tape.check_owns(t, op)?;
    }
    Ok(())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what} must be 2-d, got shape {s:?}"))),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::dim(format!("{what} must be 3-d, got shape {s:?}"))),
    }
}

/// Last dimension and the product of the leading ones.
fn last_dim(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().expect("shapes are never empty");
    (t.numel() / last, last)
}

fn needs(a: &Tensor, b: &Tensor) -> bool {
    a.requires_grad() || b.requires_grad()
}

/// `a[m,k] * b[k,n]`.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[a, b], "matmul")?;
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: lhs {:?} vs rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_nn(a.values(), b.values(), &mut out, m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(da) = scratch.target(&ac) {
            kernels::matmul_nt(d, bc.values(), da, m, n, k);
        }
        if let Some(db) = scratch.target(&bc) {
            kernels::matmul_tn(ac.values(), d, db, m, k, n);
        }
    });
    tape.emit("matmul", vec![m, n], out, needs(a, b), Some(back))
}

/// `a[m,k] * b[n,k]^T`, i.e. a matmul with the second operand transposed.
pub fn matmul_nt(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[a, b], "matmul_nt")?;
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, k2) = dims2(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt inner dimensions disagree: lhs {:?} vs rhs (transposed) {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_nt(a.values(), b.values(), &mut out, m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(da) = scratch.target(&ac) {
            kernels::matmul_nn(d, bc.values(), da, m, n, k);
        }
        if let Some(db) = scratch.target(&bc) {
            kernels::matmul_tn(d, ac.values(), db, m, n, k);
        }
    });
    tape.emit("matmul_nt", vec![m, n], out, needs(a, b), Some(back))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[a, b], "add")?;
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "add shapes disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        scratch.accumulate_into(&ac, d);
        scratch.accumulate_into(&bc, d);
    });
    tape.emit("add", a.shape().to_vec(), out, needs(a, b), Some(back))
}

/// Elementwise product of two same-shape tensors.
pub fn hadamard(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[a, b], "hadamard")?;
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "hadamard shapes disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(da) = scratch.target(&ac) {
            for ((o, dv), bv) in da.iter_mut().zip(d).zip(bc.values()) {
                *o += dv * bv;
            }
        }
        if let Some(db) = scratch.target(&bc) {
            for ((o, dv), av) in db.iter_mut().zip(d).zip(ac.values()) {
                *o += dv * av;
            }
        }
    });
    tape.emit("hadamard", a.shape().to_vec(), out, needs(a, b), Some(back))
}

/// Elementwise `mul * x + add`.
pub fn affine(tape: &Tape, x: &Tensor, mul: f64, add: f64) -> Result<Tensor> {
    same_tape(tape, &[x], "affine")?;
    if !mul.is_finite() || !add.is_finite() {
        return Err(Error::config("affine coefficients must be finite"));
    }
    let out = x.values().iter().map(|v| mul * v + add).collect();
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for (o, dv) in dx.iter_mut().zip(d) {
                *o += mul * dv;
            }
        }
    });
    tape.emit("affine", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Elementwise exponential.
pub fn exp(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x], "exp")?;
    let out: Vec<f64> = x.values().iter().map(|v| fmath::exp(*v)).collect();
    let xc = x.clone();
    let saved = out.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for ((o, dv), y) in dx.iter_mut().zip(d).zip(&saved) {
                *o += dv * y;
            }
        }
    });
    tape.emit("exp", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Elementwise rectifier. Subgradient 0 at the kink.
pub fn relu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x], "relu")?;
    let out = x.values().iter().map(|v| v.max(0.0)).collect();
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for ((o, dv), xv) in dx.iter_mut().zip(d).zip(xc.values()) {
                if *xv > 0.0 {
                    *o += dv;
                }
            }
        }
    });
    tape.emit("relu", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Elementwise `x^gamma` for a nonnegative constant exponent.
///
/// `gamma == 0` yields constant ones (no gradient). At `x == 0` with
/// `gamma < 1` the derivative is clamped to 0 to keep gradients finite.
pub fn pow_const(tape: &Tape, x: &Tensor, gamma: f64) -> Result<Tensor> {
    same_tape(tape, &[x], "pow_const")?;
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::config(format!(
            "pow_const exponent must be a nonnegative finite value, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return tape.constant(x.shape(), vec![1.0; x.numel()]);
    }
    let out: Vec<f64> = x.values().iter().map(|v| fmath::powf(*v, gamma)).collect();
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for ((o, dv), xv) in dx.iter_mut().zip(d).zip(xc.values()) {
                let slope = if *xv == 0.0 && gamma < 1.0 {
                    0.0
                } else {
                    gamma * fmath::powf(*xv, gamma - 1.0)
                };
                *o += dv * slope;
            }
        }
    });
    tape.emit("pow_const", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x], "sum_all")?;
    let total: f64 = x.values().iter().sum();
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for o in dx.iter_mut() {
                *o += d[0];
            }
        }
    });
    tape.emit("sum_all", vec![1], vec![total], x.requires_grad(), Some(back))
}

/// Softmax over the last dimension, with max-subtraction for overflow
/// safety. Each slice along the last axis sums to 1.
pub fn softmax_last(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x], "softmax")?;
    let (rows, cols) = last_dim(x);
    let mut out = x.values().to_vec();
    for r in 0..rows {
        fmath::softmax_row(&mut out[r * cols..(r + 1) * cols]);
    }
    let xc = x.clone();
    let saved = out.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for r in 0..rows {
                let y = &saved[r * cols..(r + 1) * cols];
                let dr = &d[r * cols..(r + 1) * cols];
                let inner: f64 = y.iter().zip(dr).map(|(yi, di)| yi * di).sum();
                let o = &mut dx[r * cols..(r + 1) * cols];
                for ((oi, yi), di) in o.iter_mut().zip(y).zip(dr) {
                    *oi += yi * (di - inner);
                }
            }
        }
    });
    tape.emit("softmax", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x], "log_softmax")?;
    let (rows, cols) = last_dim(x);
    let mut out = x.values().to_vec();
    for r in 0..rows {
        fmath::log_softmax_row(&mut out[r * cols..(r + 1) * cols]);
    }
    let xc = x.clone();
    let saved = out.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for r in 0..rows {
                let y = &saved[r * cols..(r + 1) * cols];
                let dr = &d[r * cols..(r + 1) * cols];
                let dsum: f64 = dr.iter().sum();
                let o = &mut dx[r * cols..(r + 1) * cols];
                for ((oi, yi), di) in o.iter_mut().zip(y).zip(dr) {
                    *oi += di - fmath::exp(*yi) * dsum;
                }
            }
        }
    });
    tape.emit("log_softmax", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Concatenate along the last dimension. All other dimensions must agree.
pub fn concat_last(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::dim("concat_last of zero parts"));
    }
    same_tape(tape, parts, "concat_last")?;
    let lead_shape = &parts[0].shape()[..parts[0].shape().len() - 1];
    for p in parts {
        let ls = &p.shape()[..p.shape().len() - 1];
        if ls != lead_shape {
            return Err(Error::dim(format!(
                "concat_last leading dimensions disagree: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| last_dim(p).1).collect();
    let lead: usize = lead_shape.iter().product::<usize>().max(1);
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; lead * total];
    let mut offset = 0;
    for (p, w) in parts.iter().zip(&widths) {
        for r in 0..lead {
            out[r * total + offset..r * total + offset + w]
                .copy_from_slice(&p.values()[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let mut shape = lead_shape.to_vec();
    shape.push(total);
    let rg = parts.iter().any(|p| p.requires_grad());
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        let mut offset = 0;
        for (p, w) in owned.iter().zip(&widths) {
            if let Some(dp) = scratch.target(p) {
                for r in 0..lead {
                    let src = &d[r * total + offset..r * total + offset + w];
                    for (o, s) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            offset += w;
        }
    });
    tape.emit("concat_last", shape, out, rg, Some(back))
}

/// Stack 2-d tensors with equal widths along the row dimension.
pub fn concat_rows(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::dim("concat_rows of zero parts"));
    }
    same_tape(tape, parts, "concat_rows")?;
    let (_, width) = dims2(parts[0], "concat_rows part")?;
    let mut rows = 0;
    for p in parts {
        let (r, w) = dims2(p, "concat_rows part")?;
        if w != width {
            return Err(Error::dim(format!(
                "concat_rows widths disagree: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        rows += r;
    }
    // Row-major layout makes row stacking a plain value concatenation.
    let mut out = Vec::with_capacity(rows * width);
    for p in parts {
        out.extend_from_slice(p.values());
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        let mut offset = 0;
        for p in &owned {
            let n = p.numel();
            scratch.accumulate_into(p, &d[offset..offset + n]);
            offset += n;
        }
    });
    tape.emit("concat_rows", vec![rows, width], out, rg, Some(back))
}

/// Columns `[start, start + len)` of the last dimension.
pub fn slice_last(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    same_tape(tape, &[x], "slice_last")?;
    let (lead, width) = last_dim(x);
    if len == 0 || start + len > width {
        return Err(Error::dim(format!(
            "slice_last [{start}, {}) out of range for last dimension {width}",
            start + len
        )));
    }
    let mut out = vec![0.0; lead * len];
    for r in 0..lead {
        out[r * len..(r + 1) * len]
            .copy_from_slice(&x.values()[r * width + start..r * width + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for r in 0..lead {
                let dst = &mut dx[r * width + start..r * width + start + len];
                for (o, s) in dst.iter_mut().zip(&d[r * len..(r + 1) * len]) {
                    *o += s;
                }
            }
        }
    });
    tape.emit("slice_last", shape, out, x.requires_grad(), Some(back))
}

/// Inverted dropout: in training mode each element is zeroed independently
/// with probability `rate` and survivors are scaled by `1/(1-rate)`, so
/// evaluation mode is the exact identity (the input tensor is returned
/// unchanged and no RNG draws are consumed; likewise for `rate == 0`).
pub fn dropout(
    tape: &Tape,
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut RngState,
) -> Result<Tensor> {
    same_tape(tape, &[x], "dropout")?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
        .collect();
    let out = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for ((o, dv), m) in dx.iter_mut().zip(d).zip(&mask) {
                *o += dv * m;
            }
        }
    });
    tape.emit("dropout", x.shape().to_vec(), out, x.requires_grad(), Some(back))
}

/// Layer normalization over the last dimension with learned gain and bias.
///
/// Uses the population variance (divide by the width) and adds `eps` under
/// the square root, so a constant slice maps to zero before the affine.
pub fn layer_norm(
    tape: &Tape,
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    same_tape(tape, &[x, gain, bias], "layer_norm")?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let (rows, cols) = last_dim(x);
    if gain.shape() != [cols] || bias.shape() != [cols] {
        return Err(Error::dim(format!(
            "layer_norm gain/bias must have shape [{cols}], got {:?} and {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xr = &x.values()[r * cols..(r + 1) * cols];
        let (mean, inv_std) = row_stats(xr, eps);
        let o = &mut out[r * cols..(r + 1) * cols];
        for ((oi, xi), (g, b)) in o
            .iter_mut()
            .zip(xr)
            .zip(gain.values().iter().zip(bias.values()))
        {
            *oi = (xi - mean) * inv_std * g + b;
        }
    }
    let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        let gv = gc.values();
        for r in 0..rows {
            let xr = &xc.values()[r * cols..(r + 1) * cols];
            let dr = &d[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_stats(xr, eps);
            // dgain / dbias
            if let Some(dg) = scratch.target(&gc) {
                for ((o, di), xi) in dg.iter_mut().zip(dr).zip(xr) {
                    *o += di * (xi - mean) * inv_std;
                }
            }
            if let Some(db) = scratch.target(&bc) {
                for (o, di) in db.iter_mut().zip(dr) {
                    *o += di;
                }
            }
            if let Some(dx) = scratch.target(&xc) {
                // dxhat = d * gain; dx = s*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                let n = cols as f64;
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for ((di, gi), xi) in dr.iter().zip(gv).zip(xr) {
                    let dxh = di * gi;
                    let xh = (xi - mean) * inv_std;
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                m1 /= n;
                m2 /= n;
                let o = &mut dx[r * cols..(r + 1) * cols];
                for ((oi, (di, gi)), xi) in o.iter_mut().zip(dr.iter().zip(gv)).zip(xr) {
                    let dxh = di * gi;
                    let xh = (xi - mean) * inv_std;
                    *oi += inv_std * (dxh - m1 - xh * m2);
                }
            }
        }
    });
    let rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    tape.emit("layer_norm", x.shape().to_vec(), out, rg, Some(back))
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / fmath::sqrt(var + eps))
}

/// Broadcast-add a `[n]` row vector to every row of an `[m,n]` matrix.
pub fn add_row(tape: &Tape, x: &Tensor, row: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x, row], "add_row")?;
    let (m, n) = dims2(x, "add_row lhs")?;
    if row.shape() != [n] {
        return Err(Error::dim(format!(
            "add_row rhs must have shape [{n}], got {:?}",
            row.shape()
        )));
    }
    let mut out = x.values().to_vec();
    for r in 0..m {
        for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(row.values()) {
            *o += b;
        }
    }
    let (xc, rc) = (x.clone(), row.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        scratch.accumulate_into(&xc, d);
        if let Some(dr) = scratch.target(&rc) {
            for r in 0..m {
                for (o, dv) in dr.iter_mut().zip(&d[r * n..(r + 1) * n]) {
                    *o += dv;
                }
            }
        }
    });
    tape.emit("add_row", vec![m, n], out, needs(x, row), Some(back))
}

/// Reinterpret the value layout under a new shape with the same element
/// count (row-major order is preserved).
pub fn reshape(tape: &Tape, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    same_tape(tape, &[x], "reshape")?;
    let numel: usize = new_shape.iter().product();
    if new_shape.is_empty() || new_shape.contains(&0) || numel != x.numel() {
        return Err(Error::dim(format!(
            "reshape from {:?} to {:?} changes the element count",
            x.shape(),
            new_shape
        )));
    }
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        scratch.accumulate_into(&xc, d);
    });
    tape.emit(
        "reshape",
        new_shape.to_vec(),
        x.values().to_vec(),
        x.requires_grad(),
        Some(back),
    )
}

/// 2-d convolution with stride 1 and zero "same" padding.
///
/// `x: [h, w, c_in]`, `kernel: [kh, kw, c_in, c_out]` (odd `kh`, `kw`),
/// `bias: [c_out]`, output `[h, w, c_out]`.
pub fn conv2d_same(tape: &Tape, x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    same_tape(tape, &[x, kernel, bias], "conv2d_same")?;
    let (h, w, cin) = dims3(x, "conv2d_same input")?;
    let (kh, kw, kcin, cout) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => {
            return Err(Error::dim(format!(
                "conv2d_same kernel must be 4-d, got shape {s:?}"
            )))
        }
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!(
            "conv2d_same kernel sides must be odd, got [{kh}, {kw}]"
        )));
    }
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d_same channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv2d_same bias must have shape [{cout}], got {:?}",
            bias.shape()
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(bias.values());
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ph || sy - ph >= h {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx + dx;
                    if sx < pw || sx - pw >= w {
                        continue;
                    }
                    let px = &x.values()[((sy - ph) * w + (sx - pw)) * cin..][..cin];
                    let kslab = &kernel.values()[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for (i, xi) in px.iter().enumerate() {
                        let krow = &kslab[i * cout..(i + 1) * cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += xi * kv;
                        }
                    }
                }
            }
        }
    }
    let (xc, kc, bc) = (x.clone(), kernel.clone(), bias.clone());
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(db) = scratch.target(&bc) {
            for pix in 0..h * w {
                for (o, dv) in db.iter_mut().zip(&d[pix * cout..(pix + 1) * cout]) {
                    *o += dv;
                }
            }
        }
        // Walk output positions exactly like the forward pass; route the
        // output gradient to the kernel and input patches.
        let want_dk = kc.requires_grad();
        let want_dx = xc.requires_grad();
        if !want_dk && !want_dx {
            return;
        }
        let mut dk_buf = if want_dk { vec![0.0; kc.numel()] } else { Vec::new() };
        let mut dx_buf = if want_dx { vec![0.0; xc.numel()] } else { Vec::new() };
        for y in 0..h {
            for xx in 0..w {
                let dr = &d[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for dy in 0..kh {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    for dx in 0..kw {
                        let sx = xx + dx;
                        if sx < pw || sx - pw >= w {
                            continue;
                        }
                        let src = ((sy - ph) * w + (sx - pw)) * cin;
                        let px = &xc.values()[src..src + cin];
                        let kbase = (dy * kw + dx) * cin * cout;
                        for i in 0..cin {
                            let krow = &kc.values()[kbase + i * cout..kbase + (i + 1) * cout];
                            if want_dk {
                                let dkrow = &mut dk_buf[kbase + i * cout..kbase + (i + 1) * cout];
                                for (o, dv) in dkrow.iter_mut().zip(dr) {
                                    *o += px[i] * dv;
                                }
                            }
                            if want_dx {
                                let mut acc = 0.0;
                                for (kv, dv) in krow.iter().zip(dr) {
                                    acc += kv * dv;
                                }
                                dx_buf[src + i] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_dk {
            scratch.accumulate_into(&kc, &dk_buf);
        }
        if want_dx {
            scratch.accumulate_into(&xc, &dx_buf);
        }
    });
    let rg = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    tape.emit("conv2d_same", vec![h, w, cout], out, rg, Some(back))
}

/// Non-overlapping average pooling over `window x window` blocks.
/// Both spatial sides must be divisible by the window.
pub fn avg_pool2d(tape: &Tape, x: &Tensor, window: usize) -> Result<Tensor> {
    same_tape(tape, &[x], "avg_pool2d")?;
    let (h, w, c) = dims3(x, "avg_pool2d input")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "avg_pool2d window {window} must divide spatial dimensions of {:?}",
            x.shape()
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for by in 0..window {
                for bx in 0..window {
                    let src = ((y * window + by) * w + (xx * window + bx)) * c;
                    for (ov, xv) in o.iter_mut().zip(&x.values()[src..src + c]) {
                        *ov += xv * norm;
                    }
                }
            }
        }
    }
    let xc = x.clone();
    let back: BackFn = Box::new(move |d, scratch: &mut Scratch| {
        if let Some(dx) = scratch.target(&xc) {
            for y in 0..oh {
                for xx in 0..ow {
                    let dr = &d[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                    for by in 0..window {
                        for bx in 0..window {
                            let dst = ((y * window + by) * w + (xx * window + bx)) * c;
                            for (o, dv) in dx[dst..dst + c].iter_mut().zip(dr) {
                                *o += dv * norm;
                            }
                        }
                    }
                }
            }
        }
    });
    tape.emit("avg_pool2d", vec![oh, ow, c], out, x.requires_grad(), Some(back))
}
