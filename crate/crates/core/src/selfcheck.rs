//! Quick property suites run by `ttl selfcheck`.
//!
//! Each suite builds small random inputs, compares two independent routes
//! to the same quantity and reports the worst discrepancy.

use crate::error::{Error, Result};
use crate::eval::{metrics_from_confusion, template, ConfusionMatrix};
use crate::lora::{grad, AdapterSet, LoraConfig, Proj};
use crate::model::ops::rope_in_place;
use crate::model::{
    attention_online, attention_ref, BlockStyle, DecodeSession, HeadLayout, PositionMask,
};
use crate::rng::{gaussian_fill, SeededRng};
use crate::tensor::Tensor;
use crate::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

pub const SUITES: &[(&str, Check)] = &[
    ("gqa", gqa),
    ("swa", swa),
    ("online-softmax", online_softmax),
    ("rope", rope),
    ("lora", lora),
    ("lora-grad", lora_grad),
    ("metrics", metrics),
    ("templates", templates),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

/// Runs one suite by name, or every suite when `name` is `None`.
pub fn run(name: Option<&str>) -> Result<Vec<SuiteOutcome>> {
    let selected: Vec<_> = match name {
        None => SUITES.iter().collect(),
        Some(n) => {
            let s = SUITES.iter().find(|(k, _)| *k == n).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown suite {n:?}; known: {}",
                    suite_names().join(", ")
                ))
            })?;
            vec![s]
        }
    };
    selected
        .into_iter()
        .map(|(name, check)| {
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Ok(SuiteOutcome {
                name,
                passed,
                detail,
            })
        })
        .collect()
}

fn verdict(worst: f64, tol: f64) -> (bool, String) {
    (
        worst <= tol,
        format!("max deviation {worst:.3e} (tolerance {tol:.0e})"),
    )
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Grouped heads against the same computation with each key/value head
/// copied out to its query heads.
fn gqa() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(11);
    let mut worst = 0.0f32;
    for (h, g) in [(4, 1), (4, 2), (6, 3), (4, 4)] {
        let (t, dh) = (9, 8);
        let q = gaussian_fill(&mut rng, &[t, h * dh], 0.0, 1.0);
        let k = gaussian_fill(&mut rng, &[t, g * dh], 0.0, 1.0);
        let v = gaussian_fill(&mut rng, &[t, g * dh], 0.0, 1.0);
        let expand = |x: &Tensor| -> Result<Tensor> {
            let mut data = Vec::with_capacity(t * h * dh);
            for r in 0..t {
                for head in 0..h {
                    let src = head * g / h;
                    data.extend_from_slice(&x.row(r)[src * dh..(src + 1) * dh]);
                }
            }
            Tensor::from_vec(&[t, h * dh], data)
        };
        let p = positions(t);
        let mask = PositionMask {
            query_positions: &p,
            key_positions: &p,
            window: None,
        };
        let grouped = attention_ref(
            &q,
            &k,
            &v,
            HeadLayout {
                n_heads: h,
                n_kv_heads: g,
                d_head: dh,
            },
            &mask,
        )?;
        let full = attention_ref(
            &q,
            &expand(&k)?,
            &expand(&v)?,
            HeadLayout {
                n_heads: h,
                n_kv_heads: h,
                d_head: dh,
            },
            &mask,
        )?;
        worst = worst.max(grouped.max_abs_diff(&full)?);
    }
    Ok(verdict(worst as f64, 1e-6))
}

/// Rolling cache against an unbounded cache under the same window mask,
/// and a window covering the whole sequence against full attention.
fn swa() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        window: Some(4),
        seed: 3,
        ..ModelConfig::default()
    };
    let m = Model::init(cfg.clone())?;
    let prompt: Vec<u32> = (0..10).map(|i| 3 + (i * 37) % 250).collect();
    let rolling = DecodeSession::new(&m).greedy_trace(&prompt, 12, None)?;
    let unbounded = DecodeSession::with_cache_capacity(&m, None).greedy_trace(&prompt, 12, None)?;
    if rolling.tokens != unbounded.tokens {
        return Ok((
            false,
            "rolling and unbounded caches decoded different tokens".into(),
        ));
    }
    let mut worst = 0.0f32;
    for (a, b) in rolling.step_logits.iter().zip(&unbounded.step_logits) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    let wide = Model::init(ModelConfig {
        window: Some(prompt.len()),
        ..cfg.clone()
    })?;
    let full = Model::init(ModelConfig {
        window: None,
        ..cfg
    })?;
    let a = DecodeSession::with_cache_capacity(&wide, None).forward_logits(&prompt)?;
    let b = DecodeSession::new(&full).forward_logits(&prompt)?;
    worst = worst.max(a.max_abs_diff(&b)?);
    Ok(verdict(worst as f64, 1e-5))
}

fn online_softmax() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(5);
    let mut worst = 0.0f32;
    for case in 0..40 {
        let g = 1 + rng.below(2);
        let h = g * (1 + rng.below(3));
        let dh = 2 * (1 + rng.below(4));
        let t = 1 + rng.below(12);
        let window = if case % 2 == 0 {
            None
        } else {
            Some(1 + rng.below(5))
        };
        let scale = if case == 0 { 3e3 } else { 1.0 };
        let q = gaussian_fill(&mut rng, &[t, h * dh], 0.0, scale);
        let k = gaussian_fill(&mut rng, &[t, g * dh], 0.0, 1.0);
        let v = gaussian_fill(&mut rng, &[t, g * dh], 0.0, 1.0);
        let p = positions(t);
        let mask = PositionMask {
            query_positions: &p,
            key_positions: &p,
            window,
        };
        let layout = HeadLayout {
            n_heads: h,
            n_kv_heads: g,
            d_head: dh,
        };
        let a = attention_ref(&q, &k, &v, layout, &mask)?;
        let b = attention_online(&q, &k, &v, layout, &mask)?;
        if !b.all_finite() {
            return Ok((false, format!("non-finite output in case {case}")));
        }
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(verdict(worst as f64, 1e-5))
}

fn rope() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(8);
    let d = 16;
    let mut worst_rel = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..50 {
        let q = gaussian_fill(&mut rng, &[d], 0.0, 1.0).into_data();
        let k = gaussian_fill(&mut rng, &[d], 0.0, 1.0).into_data();
        let (m, n, s) = (rng.below(64), rng.below(64), rng.below(64));
        let rotated_dot = |pq: usize, pk: usize| -> Result<f64> {
            let (mut a, mut b) = (q.clone(), k.clone());
            rope_in_place(&mut a, d, pq, 10000.0)?;
            rope_in_place(&mut b, d, pk, 10000.0)?;
            Ok(a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum())
        };
        worst_rel = worst_rel.max((rotated_dot(m, n)? - rotated_dot(m + s, n + s)?).abs());
        let mut r = q.clone();
        rope_in_place(&mut r, d, m, 10000.0)?;
        let norm = |x: &[f32]| x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((norm(&r) - norm(&q)).abs() / norm(&q));
    }
    let (ok_rel, _) = verdict(worst_rel, 1e-5);
    let (ok_norm, _) = verdict(worst_norm, 1e-6);
    Ok((
        ok_rel && ok_norm,
        format!("shift {worst_rel:.3e} (tolerance 1e-5), norm {worst_norm:.3e} (tolerance 1e-6)"),
    ))
}

/// Fresh adapters leave logits untouched; merged weights agree with the
/// adapter path.
fn lora() -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    for seed in 0..5u64 {
        let mut m = Model::init(ModelConfig {
            seed,
            ..ModelConfig::default()
        })?;
        let tokens: Vec<u32> = (0..7)
            .map(|i| 3 + ((seed as u32 + 1) * 31 * i) % 250)
            .collect();
        let base = DecodeSession::new(&m).forward_logits(&tokens)?;
        let mut cfg = LoraConfig::with_rank(4);
        cfg.seed = seed;
        cfg.targets = Proj::ALL.to_vec();
        let mut set = AdapterSet::init(&m.config, &cfg)?;
        m.attach_adapters(set.clone())?;
        if DecodeSession::new(&m).forward_logits(&tokens)? != base {
            return Ok((false, "fresh adapters changed the logits".into()));
        }
        let mut rng = SeededRng::new(seed + 100);
        for ad in set.adapters.values_mut() {
            ad.b = gaussian_fill(&mut rng, ad.b.shape(), 0.0, 0.05);
        }
        m.attach_adapters(set)?;
        let adapted = DecodeSession::new(&m).forward_logits(&tokens)?;
        m.merge_adapters()?;
        let merged = DecodeSession::new(&m).forward_logits(&tokens)?;
        worst = worst.max(adapted.max_abs_diff(&merged)?);
    }
    Ok(verdict(worst as f64, 1e-5))
}

fn lora_grad() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for style in [BlockStyle::Sequential, BlockStyle::Parallel] {
        let m = Model::init(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 24,
            window: Some(4),
            block_style: style,
            seed: 21,
            ..ModelConfig::default()
        })?;
        let mut cfg = LoraConfig::with_rank(2);
        cfg.targets = Proj::ALL.to_vec();
        cfg.dropout = 0.0;
        let mut set = AdapterSet::init(&m.config, &cfg)?;
        let mut rng = SeededRng::new(4);
        for ad in set.adapters.values_mut() {
            ad.b = gaussian_fill(&mut rng, ad.b.shape(), 0.0, 0.02);
        }
        let tm = grad::TrainModel::from_model(&m);
        let params = grad::AdapterParamSet::from_set(&set);
        let seq = grad::TrainSequence::causal(&[1, 40, 77, 12, 99, 5, 61]);
        let (_, g) = grad::sequence_loss_and_grads(&tm, &params, &seq, None)?;
        let flat = params.flatten();
        let g = g.flatten();
        let mut probe = params.clone();
        let h = 1e-3;
        for i in (0..flat.len()).step_by(7) {
            let mut p = flat.clone();
            p[i] += h;
            probe.unflatten(&p);
            let up = grad::sequence_loss(&tm, &probe, &seq)?;
            p[i] -= 2.0 * h;
            probe.unflatten(&p);
            let down = grad::sequence_loss(&tm, &probe, &seq)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(verdict(worst, 1e-3))
}

fn metrics() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(17);
    for trial in 0..200 {
        let k = 2 + rng.below(5);
        let labels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        let mut pairs = Vec::new();
        let mut m = ConfusionMatrix::new(&labels);
        for _ in 0..1 + rng.below(60) {
            let gold = rng.below(k);
            let pred = rng.below(k + 1);
            pairs.push((gold, pred));
            m.counts[gold][pred] += 1;
        }
        let r = metrics_from_confusion(&m)?;
        let n = pairs.len() as f64;
        let acc = pairs.iter().filter(|(g, p)| g == p).count() as f64 / n;
        if r.accuracy != acc {
            return Ok((false, format!("accuracy mismatch in trial {trial}")));
        }
        for c in 0..k {
            let tp = pairs.iter().filter(|&&(g, p)| g == c && p == c).count();
            let fp = pairs.iter().filter(|&&(g, p)| g != c && p == c).count();
            let fn_ = pairs.iter().filter(|&&(g, p)| g == c && p != c).count();
            let f1 = if tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            if r.per_class[c].f1 != f1 {
                return Ok((false, format!("F1 mismatch for class {c} in trial {trial}")));
            }
        }
    }
    Ok((true, "200 random matrices match counting".into()))
}

fn templates() -> Result<(bool, String)> {
    use sha2::{Digest, Sha256};
    let pins = [
        (
            "tweetsent3",
            "dec227c3272ccfe161f0529e831a32739152c2c6e77355402a37c6c452276c75",
        ),
        (
            "agnews4",
            "b4648c65633a0e7a640af28dda7bedbbfd876b5d8e34ed924f8bef58b48a3a6d",
        ),
    ];
    for (id, pin) in pins {
        let hex: String = Sha256::digest(template(id)?.body.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        if hex != pin {
            return Ok((false, format!("{id} checksum {hex} differs from pin")));
        }
    }
    Ok((true, "canonical template checksums match".into()))
}
