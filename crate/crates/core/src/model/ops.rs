//! Normalization, activation and rotary position kernels.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_t, Tensor};

thread_local! {
    static NORM_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`rms_norm_rows`] invocations on the current thread.
pub fn norm_calls() -> u64 {
    NORM_CALLS.with(Cell::get)
}

/// `x_i / sqrt(mean(x²) + eps) · gain_i`
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(Error::dim("rms_norm", &[x.len()], &[gain.len()]));
    }
    let mut sum_sq = 0.0f64;
    for &v in x {
        sum_sq += v as f64 * v as f64;
    }
    let inv = 1.0 / (sum_sq / x.len() as f64 + eps as f64).sqrt();
    Ok(x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v as f64 * inv * g as f64) as f32)
        .collect())
}

/// Row-wise [`rms_norm`] over a `[T, d]` tensor.
pub fn rms_norm_rows(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    NORM_CALLS.with(|c| c.set(c.get() + 1));
    let (rows, cols) = x.dims2()?;
    if gain.len() != cols {
        return Err(Error::dim("rms_norm_rows", x.shape(), gain.shape()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        out.extend(rms_norm(x.row(i), gain.data(), eps)?);
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `(silu(x·W1ᵀ) ⊙ x·Vᵀ)·W2ᵀ` with `gate`, `up` stored `[d_ff, d_model]` and
/// `down` stored `[d_model, d_ff]`.
pub fn swiglu_mlp(x: &Tensor, gate: &Tensor, up: &Tensor, down: &Tensor) -> Result<Tensor> {
    let g = matmul_t(x, gate)?;
    let u = matmul_t(x, up)?;
    if g.shape() != u.shape() {
        return Err(Error::dim("swiglu_mlp", g.shape(), u.shape()));
    }
    let hidden: Vec<f32> = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&a, &b)| silu(a) * b)
        .collect();
    matmul_t(&Tensor::from_vec(g.shape(), hidden)?, down)
}

/// Rotation frequency of pair `i` for a head of width `d_head`.
pub fn rope_frequency(i: usize, d_head: usize, base: f32) -> f64 {
    (base as f64).powf(-2.0 * i as f64 / d_head as f64)
}

/// Rotate every `(x[2i], x[2i+1])` pair of each head in `row` by `position · θ_i`.
///
/// `row` holds `row.len() / d_head` heads back to back.
pub fn rope_in_place(row: &mut [f32], d_head: usize, position: usize, base: f32) -> Result<()> {
    if !d_head.is_multiple_of(2) || d_head == 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head width, got {d_head}"
        )));
    }
    if !row.len().is_multiple_of(d_head) {
        return Err(Error::dim("rope", &[row.len()], &[d_head]));
    }
    let half = d_head / 2;
    for i in 0..half {
        let angle = position as f64 * rope_frequency(i, d_head, base);
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        for head in row.chunks_exact_mut(d_head) {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Rotary embedding of a `[heads, d_head]` tensor at absolute position `position`.
pub fn rope_apply(x: &Tensor, position: usize, base: f32) -> Result<Tensor> {
    let (_, d_head) = x.dims2()?;
    let mut out = x.clone();
    rope_in_place(out.data_mut(), d_head, position, base)?;
    Ok(out)
}
