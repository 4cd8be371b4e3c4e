//! f64 forward and reverse pass of the model for adapter training.
//!
//! The base weights are copied into f64 once and never receive gradients;
//! the backward pass only accumulates into the adapter matrices. Every
//! layer type has a hand-written backward function.

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, Proj, TargetPath};
use crate::model::ops::rope_frequency;
use crate::model::{BlockStyle, Model, ModelConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Row-major f64 matrix stored `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn from_tensor(t: &Tensor) -> Mat {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => panic!("unexpected rank {}", other.len()),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `y[t, out] = x[t, in] · wᵀ`
fn linear(x: &[f64], t: usize, w: &Mat) -> Vec<f64> {
    let mut y = vec![0.0; t * w.rows];
    for r in 0..t {
        let xr = &x[r * w.cols..(r + 1) * w.cols];
        for o in 0..w.rows {
            y[r * w.rows + o] = dot(xr, w.row(o));
        }
    }
    y
}

/// `dx[t, in] += dy[t, out] · w`
fn linear_back(dy: &[f64], t: usize, w: &Mat, dx: &mut [f64]) {
    for r in 0..t {
        let dyr = &dy[r * w.rows..(r + 1) * w.rows];
        let dxr = &mut dx[r * w.cols..(r + 1) * w.cols];
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                for (d, &wv) in dxr.iter_mut().zip(w.row(o)) {
                    *d += g * wv;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One adapter in f64: `[rank, d_in]` A and `[d_out, rank]` B.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub path: TargetPath,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub alpha: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdapterParams {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn zeros_like(&self) -> AdapterParams {
        AdapterParams {
            a: vec![0.0; self.a.len()],
            b: vec![0.0; self.b.len()],
            ..self.clone()
        }
    }
}

/// Trainable adapter parameters (or their gradients) for a whole model,
/// ordered by target path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParamSet {
    pub entries: Vec<AdapterParams>,
}

impl AdapterParamSet {
    pub fn from_set(set: &AdapterSet) -> AdapterParamSet {
        let entries = set
            .adapters
            .iter()
            .map(|(path, ad)| AdapterParams {
                path: *path,
                rank: ad.rank(),
                d_in: ad.d_in(),
                d_out: ad.d_out(),
                alpha: ad.alpha as f64,
                a: ad.a.data().iter().map(|&v| v as f64).collect(),
                b: ad.b.data().iter().map(|&v| v as f64).collect(),
            })
            .collect();
        AdapterParamSet { entries }
    }

    /// Round back to f32 adapters.
    pub fn to_set(&self, dropout: f32) -> Result<AdapterSet> {
        let to_tensor = |shape: &[usize], v: &[f64]| {
            Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect())
        };
        let adapters = self
            .entries
            .iter()
            .map(|e| {
                Ok((
                    e.path,
                    LoraAdapter {
                        a: to_tensor(&[e.rank, e.d_in], &e.a)?,
                        b: to_tensor(&[e.d_out, e.rank], &e.b)?,
                        alpha: e.alpha as f32,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(AdapterSet { dropout, adapters })
    }

    pub fn zeros_like(&self) -> AdapterParamSet {
        AdapterParamSet {
            entries: self.entries.iter().map(AdapterParams::zeros_like).collect(),
        }
    }

    pub fn get(&self, path: TargetPath) -> Option<&AdapterParams> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.a.len() + e.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters flattened: per entry, A then B.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for e in &self.entries {
            out.extend_from_slice(&e.a);
            out.extend_from_slice(&e.b);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut at = 0;
        for e in &mut self.entries {
            let na = e.a.len();
            e.a.copy_from_slice(&flat[at..at + na]);
            at += na;
            let nb = e.b.len();
            e.b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    fn add_assign(&mut self, other: &AdapterParamSet) {
        for (e, o) in self.entries.iter_mut().zip(&other.entries) {
            e.a.iter_mut().zip(&o.a).for_each(|(x, y)| *x += y);
            e.b.iter_mut().zip(&o.b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.a.iter_mut().for_each(|x| *x *= s);
            e.b.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn index_of(&self, path: TargetPath) -> Option<usize> {
        self.entries.iter().position(|e| e.path == path)
    }
}

#[derive(Debug, Clone)]
struct TrainLayer {
    attn_norm: Vec<f64>,
    mlp_norm: Option<Vec<f64>>,
    proj: [Mat; 4],
    gate: Mat,
    up: Mat,
    down: Mat,
}

/// f64 copy of a model's frozen base weights.
#[derive(Debug, Clone)]
pub struct TrainModel {
    pub config: ModelConfig,
    embedding: Mat,
    layers: Vec<TrainLayer>,
    final_norm: Vec<f64>,
    output: Mat,
}

impl TrainModel {
    pub fn from_model(model: &Model) -> TrainModel {
        let w = &model.weights;
        let vec64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        TrainModel {
            config: model.config.clone(),
            embedding: Mat::from_tensor(&w.embedding),
            layers: w
                .layers
                .iter()
                .map(|l| TrainLayer {
                    attn_norm: vec64(&l.attn_norm),
                    mlp_norm: l.mlp_norm.as_ref().map(vec64),
                    proj: Proj::ALL.map(|p| Mat::from_tensor(l.proj(p))),
                    gate: Mat::from_tensor(&l.gate),
                    up: Mat::from_tensor(&l.up),
                    down: Mat::from_tensor(&l.down),
                })
                .collect(),
            final_norm: vec64(&w.final_norm),
            output: Mat::from_tensor(&w.output),
        }
    }
}

/// A token sequence with an optional next-token target per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    /// `targets[t]` is the token expected after `tokens[t]`; `None` is excluded from the loss.
    pub targets: Vec<Option<u32>>,
}

impl TrainSequence {
    /// Next-token targets for every position but the last.
    pub fn causal(tokens: &[u32]) -> TrainSequence {
        let n = tokens.len();
        let mut targets: Vec<Option<u32>> = tokens[1..].iter().copied().map(Some).collect();
        targets.push(None);
        TrainSequence {
            tokens: tokens[..n].to_vec(),
            targets,
        }
    }

    fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Inverted-dropout settings for one forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut SeededRng,
}

struct LinTrace {
    /// Adapter input after dropout.
    dropped: Vec<f64>,
    /// Per-element dropout multiplier (0 or 1/(1-p)); empty when dropout is off.
    mask: Vec<f64>,
    /// `dropped · Aᵀ`, `[t, rank]`.
    low: Vec<f64>,
}

fn lora_linear(
    x: &[f64],
    t: usize,
    w: &Mat,
    adapter: Option<&AdapterParams>,
    dropout: &mut Option<Dropout<'_>>,
) -> (Vec<f64>, Option<LinTrace>) {
    let mut y = linear(x, t, w);
    let Some(ad) = adapter else {
        return (y, None);
    };
    let (dropped, mask) = match dropout {
        Some(d) => {
            let keep = 1.0 / (1.0 - d.rate);
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if d.rng.next_f64() < d.rate { 0.0 } else { keep })
                .collect();
            (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), mask)
        }
        None => (x.to_vec(), Vec::new()),
    };
    let r = ad.rank;
    let mut low = vec![0.0; t * r];
    for row in 0..t {
        let xr = &dropped[row * ad.d_in..(row + 1) * ad.d_in];
        for k in 0..r {
            low[row * r + k] = dot(xr, &ad.a[k * ad.d_in..(k + 1) * ad.d_in]);
        }
    }
    let c = ad.scaling();
    for row in 0..t {
        let lr = &low[row * r..(row + 1) * r];
        for o in 0..ad.d_out {
            y[row * ad.d_out + o] += c * dot(lr, &ad.b[o * r..(o + 1) * r]);
        }
    }
    (y, Some(LinTrace { dropped, mask, low }))
}

/// Backward of [`lora_linear`]: accumulates adapter gradients and `dx`.
fn lora_linear_back(
    dy: &[f64],
    t: usize,
    w: &Mat,
    adapter: Option<(&AdapterParams, &mut AdapterParams)>,
    trace: Option<&LinTrace>,
    dx: &mut [f64],
) {
    linear_back(dy, t, w, dx);
    let (Some((ad, grad)), Some(tr)) = (adapter, trace) else {
        return;
    };
    let (r, d_in, d_out) = (ad.rank, ad.d_in, ad.d_out);
    let c = ad.scaling();
    let mut dlow = vec![0.0; t * r];
    for row in 0..t {
        let dyr = &dy[row * d_out..(row + 1) * d_out];
        let lr = &tr.low[row * r..(row + 1) * r];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in 0..r {
                grad.b[o * r + k] += c * g * lr[k];
                dlow[row * r + k] += c * g * ad.b[o * r + k];
            }
        }
    }
    for row in 0..t {
        let xr = &tr.dropped[row * d_in..(row + 1) * d_in];
        for k in 0..r {
            let g = dlow[row * r + k];
            if g == 0.0 {
                continue;
            }
            let arow = &ad.a[k * d_in..(k + 1) * d_in];
            let ga = &mut grad.a[k * d_in..(k + 1) * d_in];
            for i in 0..d_in {
                ga[i] += g * xr[i];
                let m = if tr.mask.is_empty() {
                    1.0
                } else {
                    tr.mask[row * d_in + i]
                };
                dx[row * d_in + i] += g * arow[i] * m;
            }
        }
    }
}

/// Row-wise RMSNorm; returns the output and each row's `1 / rms`.
fn rms_forward(x: &[f64], d: usize, gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let t = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; t];
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        inv[r] = 1.0 / (ms + eps).sqrt();
        for i in 0..d {
            y[r * d + i] = xr[i] * inv[r] * gain[i];
        }
    }
    (y, inv)
}

/// `dx += ∂(rms_norm)/∂x · dy`
fn rms_back(x: &[f64], d: usize, gain: &[f64], inv: &[f64], dy: &[f64], dx: &mut [f64]) {
    for (r, &s) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let proj: f64 = (0..d).map(|i| dyr[i] * gain[i] * xr[i]).sum();
        let coef = proj * s * s * s / d as f64;
        for i in 0..d {
            dx[r * d + i] += dyr[i] * gain[i] * s - xr[i] * coef;
        }
    }
}

/// Rotate each head's pairs by `sign · position · θ_i` in place.
fn rope_rows(x: &mut [f64], t: usize, d_head: usize, base: f32, sign: f64) {
    let width = x.len() / t;
    for pos in 0..t {
        let row = &mut x[pos * width..(pos + 1) * width];
        for i in 0..d_head / 2 {
            let angle = sign * pos as f64 * rope_frequency(i, d_head, base);
            let (sin, cos) = angle.sin_cos();
            for head in row.chunks_exact_mut(d_head) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

struct MlpTrace {
    input: Vec<f64>,
    gate_pre: Vec<f64>,
    up: Vec<f64>,
}

fn mlp_forward(layer: &TrainLayer, x: &[f64], t: usize) -> (Vec<f64>, MlpTrace) {
    let gate_pre = linear(x, t, &layer.gate);
    let up = linear(x, t, &layer.up);
    let hidden: Vec<f64> = gate_pre
        .iter()
        .zip(&up)
        .map(|(&g, &u)| g * sigmoid(g) * u)
        .collect();
    let out = linear(&hidden, t, &layer.down);
    (
        out,
        MlpTrace {
            input: x.to_vec(),
            gate_pre,
            up,
        },
    )
}

fn mlp_back(layer: &TrainLayer, tr: &MlpTrace, t: usize, dout: &[f64], dx: &mut [f64]) {
    let mut dhidden = vec![0.0; tr.gate_pre.len()];
    linear_back(dout, t, &layer.down, &mut dhidden);
    let mut dgate = vec![0.0; dhidden.len()];
    let mut dup = vec![0.0; dhidden.len()];
    for i in 0..dhidden.len() {
        let g = tr.gate_pre[i];
        let s = sigmoid(g);
        let silu = g * s;
        dup[i] = dhidden[i] * silu;
        dgate[i] = dhidden[i] * tr.up[i] * s * (1.0 + g * (1.0 - s));
    }
    debug_assert_eq!(dx.len(), tr.input.len());
    linear_back(&dgate, t, &layer.gate, dx);
    linear_back(&dup, t, &layer.up, dx);
}

struct AttnTrace {
    /// Post-rotation queries `[t, H·dh]`.
    q: Vec<f64>,
    /// Post-rotation keys `[t, G·dh]`.
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights `[H, t, t]`, zero where masked.
    probs: Vec<f64>,
    lin: [Option<LinTrace>; 4],
}

fn attn_forward(
    cfg: &ModelConfig,
    layer: &TrainLayer,
    adapters: [Option<&AdapterParams>; 4],
    n: &[f64],
    t: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> (Vec<f64>, AttnTrace) {
    let (h_count, g_count, dh) = (cfg.n_heads, cfg.n_kv_heads, cfg.d_head());
    let (mut q, tq) = lora_linear(n, t, &layer.proj[0], adapters[0], dropout);
    let (mut k, tk) = lora_linear(n, t, &layer.proj[1], adapters[1], dropout);
    let (v, tv) = lora_linear(n, t, &layer.proj[2], adapters[2], dropout);
    rope_rows(&mut q, t, dh, cfg.rope_base, 1.0);
    rope_rows(&mut k, t, dh, cfg.rope_base, 1.0);
    let qw = h_count * dh;
    let kw = g_count * dh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; h_count * t * t];
    let mut o = vec![0.0; t * qw];
    for h in 0..h_count {
        let g = h * g_count / h_count;
        for i in 0..t {
            let qi = &q[i * qw + h * dh..i * qw + (h + 1) * dh];
            let visible: Vec<usize> = (0..=i)
                .filter(|&j| crate::model::swa_allowed(i, j, cfg.window))
                .collect();
            let scores: Vec<f64> = visible
                .iter()
                .map(|&j| dot(qi, &k[j * kw + g * dh..j * kw + (g + 1) * dh]) * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (&j, e) in visible.iter().zip(&exps) {
                let p = e / sum;
                probs[(h * t + i) * t + j] = p;
                let vj = &v[j * kw + g * dh..j * kw + (g + 1) * dh];
                for (oo, &vv) in o[i * qw + h * dh..i * qw + (h + 1) * dh].iter_mut().zip(vj) {
                    *oo += p * vv;
                }
            }
        }
    }
    let (out, to) = lora_linear(&o, t, &layer.proj[3], adapters[3], dropout);
    (
        out,
        AttnTrace {
            q,
            k,
            v,
            probs,
            lin: [tq, tk, tv, to],
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn attn_back(
    cfg: &ModelConfig,
    layer: &TrainLayer,
    adapters: [Option<&AdapterParams>; 4],
    grads: &mut [Option<&mut AdapterParams>; 4],
    n: &[f64],
    tr: &AttnTrace,
    t: usize,
    dout: &[f64],
    dn: &mut [f64],
) {
    let (h_count, g_count, dh) = (cfg.n_heads, cfg.n_kv_heads, cfg.d_head());
    let qw = h_count * dh;
    let kw = g_count * dh;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut d_o = vec![0.0; t * qw];
    lora_linear_back(
        dout,
        t,
        &layer.proj[3],
        adapters[3].zip(grads[3].as_deref_mut()),
        tr.lin[3].as_ref(),
        &mut d_o,
    );

    let mut dq = vec![0.0; t * qw];
    let mut dk = vec![0.0; t * kw];
    let mut dv = vec![0.0; t * kw];
    for h in 0..h_count {
        let g = h * g_count / h_count;
        for i in 0..t {
            let doi = &d_o[i * qw + h * dh..i * qw + (h + 1) * dh];
            let row = &tr.probs[(h * t + i) * t..(h * t + i + 1) * t];
            let dp: Vec<f64> = (0..=i)
                .map(|j| {
                    if row[j] == 0.0 {
                        0.0
                    } else {
                        dot(doi, &tr.v[j * kw + g * dh..j * kw + (g + 1) * dh])
                    }
                })
                .collect();
            let weighted: f64 = (0..=i).map(|j| row[j] * dp[j]).sum();
            for j in 0..=i {
                let p = row[j];
                if p == 0.0 {
                    continue;
                }
                for e in 0..dh {
                    dv[j * kw + g * dh + e] += p * doi[e];
                }
                let ds = p * (dp[j] - weighted) * scale;
                for e in 0..dh {
                    dq[i * qw + h * dh + e] += ds * tr.k[j * kw + g * dh + e];
                    dk[j * kw + g * dh + e] += ds * tr.q[i * qw + h * dh + e];
                }
            }
        }
    }
    // rotations are orthogonal: the adjoint is the inverse rotation
    rope_rows(&mut dq, t, dh, cfg.rope_base, -1.0);
    rope_rows(&mut dk, t, dh, cfg.rope_base, -1.0);
    for (idx, dy) in [(0, &dq), (1, &dk), (2, &dv)] {
        lora_linear_back(
            dy,
            t,
            &layer.proj[idx],
            adapters[idx].zip(grads[idx].as_deref_mut()),
            tr.lin[idx].as_ref(),
            dn,
        );
    }
    debug_assert_eq!(dn.len(), n.len());
}

enum LayerTrace {
    Sequential {
        x: Vec<f64>,
        n1: Vec<f64>,
        inv1: Vec<f64>,
        attn: AttnTrace,
        h: Vec<f64>,
        inv2: Vec<f64>,
        mlp: MlpTrace,
    },
    Parallel {
        x: Vec<f64>,
        n: Vec<f64>,
        inv: Vec<f64>,
        attn: AttnTrace,
        mlp: MlpTrace,
    },
}

struct ForwardTrace {
    layers: Vec<LayerTrace>,
    hidden: Vec<f64>,
    inv_final: Vec<f64>,
    logits: Vec<f64>,
}

fn layer_adapters(params: &AdapterParamSet, layer: usize) -> [Option<&AdapterParams>; 4] {
    Proj::ALL.map(|proj| params.get(TargetPath { layer, proj }))
}

fn forward(
    model: &TrainModel,
    params: &AdapterParamSet,
    tokens: &[u32],
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let (d, t) = (cfg.d_model, tokens.len());
    if t == 0 {
        return Err(Error::Usage("empty training sequence".into()));
    }
    let eps = cfg.norm_eps as f64;
    let mut x = Vec::with_capacity(t * d);
    for &tok in tokens {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "token id {tok} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        x.extend_from_slice(model.embedding.row(tok as usize));
    }
    let mut traces = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let adapters = layer_adapters(params, li);
        let (n1, inv1) = rms_forward(&x, d, &layer.attn_norm, eps);
        let (a, attn) = attn_forward(cfg, layer, adapters, &n1, t, &mut dropout);
        match (cfg.block_style, &layer.mlp_norm) {
            (BlockStyle::Sequential, Some(g2)) => {
                let h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
                let (n2, inv2) = rms_forward(&h, d, g2, eps);
                let (m, mlp) = mlp_forward(layer, &n2, t);
                let out = h.iter().zip(&m).map(|(p, q)| p + q).collect();
                traces.push(LayerTrace::Sequential {
                    x: std::mem::replace(&mut x, out),
                    n1,
                    inv1,
                    attn,
                    h,
                    inv2,
                    mlp,
                });
            }
            (BlockStyle::Parallel, _) => {
                let (m, mlp) = mlp_forward(layer, &n1, t);
                let out = x
                    .iter()
                    .zip(&a)
                    .zip(&m)
                    .map(|((p, q), r)| p + q + r)
                    .collect();
                traces.push(LayerTrace::Parallel {
                    x: std::mem::replace(&mut x, out),
                    n: n1,
                    inv: inv1,
                    attn,
                    mlp,
                });
            }
            (BlockStyle::Sequential, None) => {
                return Err(Error::Config(format!("layer {li} lacks an MLP norm")));
            }
        }
    }
    let (normed, inv_final) = rms_forward(&x, d, &model.final_norm, eps);
    let logits = linear(&normed, t, &model.output);
    Ok(ForwardTrace {
        layers: traces,
        hidden: x,
        inv_final,
        logits,
    })
}

/// f64 logits `[t, vocab]` for a token sequence.
pub fn sequence_logits(
    model: &TrainModel,
    params: &AdapterParamSet,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    Ok(forward(model, params, tokens, None)?.logits)
}

/// f64 hidden state after the last block, `[t, d_model]`.
pub fn sequence_hidden(
    model: &TrainModel,
    params: &AdapterParamSet,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    Ok(forward(model, params, tokens, None)?.hidden)
}

/// Mean negative log-likelihood over targeted positions, and `∂loss/∂logits`.
fn masked_nll(logits: &[f64], vocab: usize, targets: &[Option<u32>]) -> Result<(f64, Vec<f64>)> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::Data("sequence has no targeted positions".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        if target as usize >= vocab {
            return Err(Error::Data(format!(
                "target {target} outside vocabulary of {vocab}"
            )));
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[target as usize];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() / count as f64;
        }
        g[target as usize] -= 1.0 / count as f64;
    }
    Ok((loss / count as f64, grad))
}

/// Loss of one sequence, evaluated without dropout.
pub fn sequence_loss(
    model: &TrainModel,
    params: &AdapterParamSet,
    seq: &TrainSequence,
) -> Result<f64> {
    check_sequence(seq)?;
    let tr = forward(model, params, &seq.tokens, None)?;
    Ok(masked_nll(&tr.logits, model.config.vocab_size, &seq.targets)?.0)
}

fn check_sequence(seq: &TrainSequence) -> Result<()> {
    if seq.tokens.len() != seq.targets.len() {
        return Err(Error::dim(
            "train sequence",
            &[seq.tokens.len()],
            &[seq.targets.len()],
        ));
    }
    if seq.target_count() == 0 {
        return Err(Error::Data("sequence has no targeted positions".into()));
    }
    Ok(())
}

/// Loss of one sequence and its gradient with respect to every adapter parameter.
pub fn sequence_loss_and_grads(
    model: &TrainModel,
    params: &AdapterParamSet,
    seq: &TrainSequence,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, AdapterParamSet)> {
    check_sequence(seq)?;
    let cfg = &model.config;
    let (d, t, vocab) = (cfg.d_model, seq.tokens.len(), cfg.vocab_size);
    let tr = forward(model, params, &seq.tokens, dropout)?;
    let (loss, dlogits) = masked_nll(&tr.logits, vocab, &seq.targets)?;
    let mut grads = params.zeros_like();

    let mut dnormed = vec![0.0; t * d];
    linear_back(&dlogits, t, &model.output, &mut dnormed);
    let mut dx = vec![0.0; t * d];
    rms_back(
        &tr.hidden,
        d,
        &model.final_norm,
        &tr.inv_final,
        &dnormed,
        &mut dx,
    );

    for (li, (layer, trace)) in model.layers.iter().zip(&tr.layers).enumerate().rev() {
        let adapters = layer_adapters(params, li);
        let slots: [Option<usize>; 4] =
            Proj::ALL.map(|proj| grads.index_of(TargetPath { layer: li, proj }));
        let mut slot_refs = split_slots(&mut grads.entries, slots);
        let dout = dx;
        match trace {
            LayerTrace::Sequential {
                x,
                n1,
                inv1,
                attn,
                h,
                inv2,
                mlp,
            } => {
                let mut dh = dout.clone();
                let mut dn2 = vec![0.0; t * d];
                mlp_back(layer, mlp, t, &dout, &mut dn2);
                let g2 = layer
                    .mlp_norm
                    .as_ref()
                    .expect("sequential layer has an MLP norm");
                rms_back(h, d, g2, inv2, &dn2, &mut dh);
                let mut dn1 = vec![0.0; t * d];
                attn_back(
                    cfg,
                    layer,
                    adapters,
                    &mut slot_refs,
                    n1,
                    attn,
                    t,
                    &dh,
                    &mut dn1,
                );
                let mut dxi = dh;
                rms_back(x, d, &layer.attn_norm, inv1, &dn1, &mut dxi);
                dx = dxi;
            }
            LayerTrace::Parallel {
                x,
                n,
                inv,
                attn,
                mlp,
            } => {
                let mut dn = vec![0.0; t * d];
                mlp_back(layer, mlp, t, &dout, &mut dn);
                attn_back(
                    cfg,
                    layer,
                    adapters,
                    &mut slot_refs,
                    n,
                    attn,
                    t,
                    &dout,
                    &mut dn,
                );
                let mut dxi = dout;
                rms_back(x, d, &layer.attn_norm, inv, &dn, &mut dxi);
                dx = dxi;
            }
        }
    }
    Ok((loss, grads))
}

/// Disjoint mutable references to up to four entries of `entries`.
fn split_slots(
    entries: &mut [AdapterParams],
    slots: [Option<usize>; 4],
) -> [Option<&mut AdapterParams>; 4] {
    let mut out: [Option<&mut AdapterParams>; 4] = [None, None, None, None];
    for (i, e) in entries.iter_mut().enumerate() {
        if let Some(k) = slots.iter().position(|s| *s == Some(i)) {
            out[k] = Some(e);
        }
    }
    out
}

/// Mean loss and mean gradient over a batch. Sequences are processed in
/// parallel; the reduction runs in batch order so results do not depend
/// on scheduling.
pub fn batch_loss_and_grads(
    model: &TrainModel,
    params: &AdapterParamSet,
    batch: &[TrainSequence],
    dropout: Option<(f64, &SeededRng)>,
) -> Result<(f64, AdapterParamSet)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if params.entries.is_empty() {
        return Err(Error::Usage("no adapters attached".into()));
    }
    let results: Vec<Result<(f64, AdapterParamSet)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let mut rng = rng.fork(i as u64);
                sequence_loss_and_grads(
                    model,
                    params,
                    seq,
                    Some(Dropout {
                        rate,
                        rng: &mut rng,
                    }),
                )
            }
            _ => sequence_loss_and_grads(model, params, seq, None),
        })
        .collect();
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Gradients of the mean batch loss with respect to every attached adapter
/// matrix. Base weights are read but never differentiated.
pub fn lora_grads(model: &Model, batch: &[TrainSequence]) -> Result<(f64, AdapterParamSet)> {
    let set = model
        .adapters()
        .ok_or_else(|| Error::Usage("no adapters attached".into()))?;
    let params = AdapterParamSet::from_set(set);
    batch_loss_and_grads(&TrainModel::from_model(model), &params, batch, None)
}

/// `mean over positions of -log softmax(logits)[target]`, accumulated in f64.
pub fn loss_next_token(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (t, vocab) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::dim(
            "loss_next_token",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let l64: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let targets: Vec<Option<u32>> = targets.iter().copied().map(Some).collect();
    Ok(masked_nll(&l64, vocab, &targets)?.0)
}
