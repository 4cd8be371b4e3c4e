//! Causal attention with grouped key/value heads and an optional sliding window.
//!
//! Queries are `[Tq, H·d_head]`, keys and values `[Tk, G·d_head]`. Every row
//! carries an absolute position; masking is decided on positions alone so
//! the same kernels serve full-sequence passes and cached decoding.

use crate::error::{Error, Result};
use crate::tensor::{dot_wide, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

/// Key/value head serving query head `h`: contiguous groups of `H / G`
/// query heads share one key/value head.
pub fn kv_group_index(h: usize, n_heads: usize, n_kv_heads: usize) -> Result<usize> {
    if h >= n_heads {
        return Err(Error::Usage(format!(
            "query head {h} out of range for {n_heads} heads"
        )));
    }
    if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
        return Err(Error::Config(format!(
            "{n_heads} query heads cannot be split into {n_kv_heads} groups"
        )));
    }
    Ok(h * n_kv_heads / n_heads)
}

/// Whether a query at absolute position `i` may attend to the key at `j`.
///
/// Causal, and with a window `W` restricted to `j ∈ [i - W + 1, i]`.
pub fn swa_allowed(i: usize, j: usize, window: Option<usize>) -> bool {
    if j > i {
        return false;
    }
    match window {
        Some(w) => i - j < w,
        None => true,
    }
}

/// Absolute positions of the query and key rows plus the window.
#[derive(Debug, Clone, Copy)]
pub struct PositionMask<'a> {
    pub query_positions: &'a [usize],
    pub key_positions: &'a [usize],
    pub window: Option<usize>,
}

impl PositionMask<'_> {
    pub fn allows(&self, qi: usize, kj: usize) -> bool {
        swa_allowed(
            self.query_positions[qi],
            self.key_positions[kj],
            self.window,
        )
    }
}

fn check_shapes(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: HeadLayout,
    mask: &PositionMask,
) -> Result<(usize, usize)> {
    let (tq, qw) = q.dims2()?;
    let (tk, kw) = k.dims2()?;
    if layout.n_kv_heads == 0 || !layout.n_heads.is_multiple_of(layout.n_kv_heads) {
        return Err(Error::Config(format!(
            "{} query heads cannot be split into {} groups",
            layout.n_heads, layout.n_kv_heads
        )));
    }
    if qw != layout.q_width() {
        return Err(Error::dim(
            "attention (queries)",
            q.shape(),
            &[tq, layout.q_width()],
        ));
    }
    if kw != layout.kv_width() {
        return Err(Error::dim(
            "attention (keys)",
            k.shape(),
            &[tk, layout.kv_width()],
        ));
    }
    if v.shape() != k.shape() {
        return Err(Error::dim("attention (values)", v.shape(), k.shape()));
    }
    if mask.query_positions.len() != tq || mask.key_positions.len() != tk {
        return Err(Error::dim(
            "attention (positions)",
            &[mask.query_positions.len(), mask.key_positions.len()],
            &[tq, tk],
        ));
    }
    Ok((tq, tk))
}

fn no_keys(position: usize) -> Error {
    Error::Usage(format!("query at position {position} has no visible keys"))
}

/// Reference attention: materializes each query's score row, then softmaxes it.
///
/// Scores, probabilities and the weighted sum are carried in f64; only the
/// output is rounded to f32.
pub fn attention_ref(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: HeadLayout,
    mask: &PositionMask,
) -> Result<Tensor> {
    let (tq, tk) = check_shapes(q, k, v, layout, mask)?;
    let dh = layout.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut acc = vec![0.0f64; dh];
    let mut out = Tensor::zeros(&[tq, layout.q_width()]);
    let mut visible = Vec::with_capacity(tk);
    let mut scores = Vec::with_capacity(tk);
    for i in 0..tq {
        visible.clear();
        visible.extend((0..tk).filter(|&j| mask.allows(i, j)));
        if visible.is_empty() {
            return Err(no_keys(mask.query_positions[i]));
        }
        for h in 0..layout.n_heads {
            let g = kv_group_index(h, layout.n_heads, layout.n_kv_heads)?;
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            scores.clear();
            scores.extend(
                visible
                    .iter()
                    .map(|&j| dot_wide(qh, &k.row(j)[g * dh..(g + 1) * dh]) * scale),
            );
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            acc.fill(0.0);
            for (&j, &p) in visible.iter().zip(&scores) {
                for (a, &x) in acc.iter_mut().zip(&v.row(j)[g * dh..(g + 1) * dh]) {
                    *a += p / sum * x as f64;
                }
            }
            let oh = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (o, a) in oh.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// Streaming attention: one pass over the keys with a running maximum, a
/// running normalizer and a rescaled accumulator. No score row is stored.
/// The running state is f64, like the reference kernel's.
pub fn attention_online(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: HeadLayout,
    mask: &PositionMask,
) -> Result<Tensor> {
    let (tq, tk) = check_shapes(q, k, v, layout, mask)?;
    let dh = layout.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[tq, layout.q_width()]);
    let mut acc = vec![0.0f64; dh];
    for i in 0..tq {
        for h in 0..layout.n_heads {
            let g = kv_group_index(h, layout.n_heads, layout.n_kv_heads)?;
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            let mut running_max = f64::NEG_INFINITY;
            let mut normalizer = 0.0f64;
            acc.fill(0.0);
            for j in (0..tk).filter(|&j| mask.allows(i, j)) {
                let s = dot_wide(qh, &k.row(j)[g * dh..(g + 1) * dh]) * scale;
                let new_max = running_max.max(s);
                // exp(-inf) is 0, so the first key needs no special case
                let correction = (running_max - new_max).exp();
                let p = (s - new_max).exp();
                normalizer = normalizer * correction + p;
                for (a, &x) in acc.iter_mut().zip(&v.row(j)[g * dh..(g + 1) * dh]) {
                    *a = *a * correction + p * x as f64;
                }
                running_max = new_max;
            }
            if normalizer == 0.0 {
                return Err(no_keys(mask.query_positions[i]));
            }
            let oh = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (o, a) in oh.iter_mut().zip(&acc) {
                *o = (a / normalizer) as f32;
            }
        }
    }
    Ok(out)
}

/// Which attention kernel a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionKernel {
    Reference,
    #[default]
    Online,
}

impl AttentionKernel {
    pub fn run(
        self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        layout: HeadLayout,
        mask: &PositionMask,
    ) -> Result<Tensor> {
        match self {
            AttentionKernel::Reference => attention_ref(q, k, v, layout, mask),
            AttentionKernel::Online => attention_online(q, k, v, layout, mask),
        }
    }
}
