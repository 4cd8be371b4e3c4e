use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Container, ADAPTER_MAGIC};
use crate::model::ModelConfig;
use crate::rng::{gaussian_fill, SeededRng};
use crate::tensor::{matmul, matmul_t, scale, Tensor};

/// Attention projection that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Wq, Proj::Wk, Proj::Wv, Proj::Wo];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Wq => "wq",
            Proj::Wk => "wk",
            Proj::Wv => "wv",
            Proj::Wo => "wo",
        }
    }

    /// `(d_in, d_out)` of this projection under `config`.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_model;
        match self {
            Proj::Wq => (d, d),
            Proj::Wk | Proj::Wv => (d, config.d_kv()),
            Proj::Wo => (d, d),
        }
    }
}

impl FromStr for Proj {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Proj::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown projection {s:?}")))
    }
}

/// Location of an adapted matrix, rendered as `layers.{layer}.attn.{proj}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TargetPath {
    pub layer: usize,
    pub proj: Proj,
}

impl fmt::Display for TargetPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.attn.{}", self.layer, self.proj.name())
    }
}

impl FromStr for TargetPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad target path {s:?}"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, proj) = rest.split_once(".attn.").ok_or_else(bad)?;
        Ok(TargetPath {
            layer: layer.parse().map_err(|_| bad())?,
            proj: proj.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<Proj>,
    pub seed: u64,
    /// Standard deviation of the Gaussian used for `A`.
    pub init_std: f32,
}

impl LoraConfig {
    /// Rank has no default; alpha, dropout and targets follow the usual recipe.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec![Proj::Wq, Proj::Wv],
            seed: 0,
            init_std: 0.02,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("no LoRA targets".into()));
        }
        for p in &self.targets {
            let (d_in, d_out) = p.dims(model);
            if self.rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, d_out) = {} for {}",
                    self.rank,
                    d_in.min(d_out),
                    p.name()
                )));
            }
        }
        Ok(())
    }
}

/// Low-rank update `(alpha / r) · B · A` for a `[d_out, d_in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r, d_in]`
    pub a: Tensor,
    /// `[d_out, r]`
    pub b: Tensor,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn check(&self, w: &Tensor) -> Result<()> {
        let (d_out, d_in) = w.dims2()?;
        let (r, a_in) = self.a.dims2()?;
        let (b_out, r2) = self.b.dims2()?;
        if a_in != d_in || b_out != d_out || r != r2 {
            return Err(Error::dim("lora", w.shape(), &[b_out, r, r2, a_in]));
        }
        Ok(())
    }
}

/// Fresh adapter: `A ~ N(0, init_std²)` from `rng`, `B = 0`.
pub fn lora_init(
    cfg: &LoraConfig,
    d_in: usize,
    d_out: usize,
    rng: &mut SeededRng,
) -> Result<LoraAdapter> {
    if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {} invalid for a {d_out}x{d_in} matrix",
            cfg.rank
        )));
    }
    Ok(LoraAdapter {
        a: gaussian_fill(rng, &[cfg.rank, d_in], 0.0, cfg.init_std),
        b: Tensor::zeros(&[d_out, cfg.rank]),
        alpha: cfg.alpha,
    })
}

/// Whether the adapter branch applies dropout.
pub enum LoraMode<'a> {
    Eval,
    /// Inverted dropout on the adapter input.
    Train {
        rate: f32,
        rng: &'a mut SeededRng,
    },
}

/// `x·Wᵀ + (alpha/r)·(drop(x)·Aᵀ)·Bᵀ`
pub fn lora_forward(
    x: &Tensor,
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
    mode: LoraMode<'_>,
) -> Result<Tensor> {
    let base = matmul_t(x, w)?;
    let Some(ad) = adapter else {
        return Ok(base);
    };
    ad.check(w)?;
    let dropped;
    let input = match mode {
        LoraMode::Eval => x,
        LoraMode::Train { rate, rng } => {
            let keep = 1.0 / (1.0 - rate);
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    if rng.next_f64() < rate as f64 {
                        0.0
                    } else {
                        v * keep
                    }
                })
                .collect();
            dropped = Tensor::from_vec(x.shape(), data)?;
            &dropped
        }
    };
    let low = matmul_t(input, &ad.a)?;
    let delta = matmul_t(&low, &ad.b)?;
    let c = ad.scaling();
    let data = base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&y, &d)| y + c * d)
        .collect();
    Tensor::from_vec(base.shape(), data)
}

/// `W + (alpha/r)·B·A`
pub fn lora_merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(w)?;
    let delta = scale(&matmul(&adapter.b, &adapter.a)?, adapter.scaling());
    crate::tensor::add(w, &delta)
}

/// Adapters for a whole model, keyed by target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub dropout: f32,
    pub adapters: BTreeMap<TargetPath, LoraAdapter>,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    dropout: f32,
    targets: Vec<TargetMeta>,
}

#[derive(Serialize, Deserialize)]
struct TargetMeta {
    path: String,
    rank: usize,
    alpha: f32,
}

impl AdapterSet {
    /// One fresh adapter per (layer, target), drawn from a single seeded
    /// stream in `(layer, proj)` order.
    pub fn init(model: &ModelConfig, cfg: &LoraConfig) -> Result<AdapterSet> {
        cfg.validate(model)?;
        let mut rng = SeededRng::new(cfg.seed);
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        let mut adapters = BTreeMap::new();
        for layer in 0..model.n_layers {
            for &proj in &targets {
                let (d_in, d_out) = proj.dims(model);
                adapters.insert(
                    TargetPath { layer, proj },
                    lora_init(cfg, d_in, d_out, &mut rng)?,
                );
            }
        }
        Ok(AdapterSet {
            dropout: cfg.dropout,
            adapters,
        })
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::param_count).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::with_capacity(2 * self.adapters.len());
        let mut targets = Vec::with_capacity(self.adapters.len());
        for (path, ad) in &self.adapters {
            tensors.push((format!("{path}.lora_a"), ad.a.clone()));
            tensors.push((format!("{path}.lora_b"), ad.b.clone()));
            targets.push(TargetMeta {
                path: path.to_string(),
                rank: ad.rank(),
                alpha: ad.alpha,
            });
        }
        let meta = AdapterMeta {
            dropout: self.dropout,
            targets,
        };
        Container {
            magic: ADAPTER_MAGIC,
            tensors,
            meta: serde_json::to_vec(&meta).expect("adapter metadata serializes"),
        }
    }

    pub fn from_container(mut c: Container) -> Result<AdapterSet> {
        let meta: AdapterMeta = serde_json::from_slice(&c.meta)
            .map_err(|e| Error::Format(format!("adapter metadata: {e}")))?;
        let mut adapters = BTreeMap::new();
        for t in meta.targets {
            let path: TargetPath = t.path.parse()?;
            let ad = LoraAdapter {
                a: c.take_tensor(&format!("{path}.lora_a"))?,
                b: c.take_tensor(&format!("{path}.lora_b"))?,
                alpha: t.alpha,
            };
            if ad.rank() != t.rank || ad.b.shape().get(1) != Some(&t.rank) {
                return Err(Error::Format(format!(
                    "{path}: stored rank {} does not match tensors",
                    t.rank
                )));
            }
            adapters.insert(path, ad);
        }
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::Format(format!(
                "unexpected tensor {name} in adapter file"
            )));
        }
        Ok(AdapterSet {
            dropout: meta.dropout,
            adapters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<AdapterSet> {
        Self::from_container(Container::read(path, ADAPTER_MAGIC)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_adapter(rng: &mut SeededRng, r: usize, d_in: usize, d_out: usize) -> LoraAdapter {
        LoraAdapter {
            a: gaussian_fill(rng, &[r, d_in], 0.0, 0.3),
            b: gaussian_fill(rng, &[d_out, r], 0.0, 0.3),
            alpha: 32.0,
        }
    }

    #[test]
    fn init_rules() {
        let cfg = LoraConfig::with_rank(8);
        let ad = lora_init(&cfg, 32, 16, &mut SeededRng::new(1)).unwrap();
        assert_eq!(ad.a.shape(), &[8, 32]);
        assert_eq!(ad.b.shape(), &[16, 8]);
        assert!(ad.b.data().iter().all(|&v| v == 0.0));
        let again = lora_init(&cfg, 32, 16, &mut SeededRng::new(1)).unwrap();
        assert_eq!(ad, again);
        assert!(matches!(
            lora_init(&LoraConfig::with_rank(17), 32, 16, &mut SeededRng::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scaling_is_alpha_over_rank() {
        let ad = lora_init(&LoraConfig::with_rank(8), 32, 32, &mut SeededRng::new(0)).unwrap();
        assert_eq!(ad.scaling(), 4.0);
    }

    #[test]
    fn zero_b_leaves_projection_unchanged() {
        let mut rng = SeededRng::new(2);
        let w = gaussian_fill(&mut rng, &[6, 5], 0.0, 1.0);
        let x = gaussian_fill(&mut rng, &[3, 5], 0.0, 1.0);
        let ad = lora_init(&LoraConfig::with_rank(2), 5, 6, &mut rng).unwrap();
        let y = lora_forward(&x, &w, Some(&ad), LoraMode::Eval).unwrap();
        assert_eq!(y, matmul_t(&x, &w).unwrap());
    }

    #[test]
    fn forward_matches_dense_merge_in_f64() {
        let mut rng = SeededRng::new(3);
        let (d_in, d_out, r) = (7, 5, 3);
        let w = gaussian_fill(&mut rng, &[d_out, d_in], 0.0, 1.0);
        let x = gaussian_fill(&mut rng, &[4, d_in], 0.0, 1.0);
        let ad = random_adapter(&mut rng, r, d_in, d_out);
        let y = lora_forward(&x, &w, Some(&ad), LoraMode::Eval).unwrap();
        let c = 32.0 / r as f64;
        for t in 0..4 {
            for o in 0..d_out {
                let mut expect = 0.0f64;
                for i in 0..d_in {
                    let ba: f64 = (0..r)
                        .map(|k| ad.b.row(o)[k] as f64 * ad.a.row(k)[i] as f64)
                        .sum();
                    expect += x.row(t)[i] as f64 * (w.row(o)[i] as f64 + c * ba);
                }
                assert!((y.row(t)[o] as f64 - expect).abs() < 1e-5, "{t},{o}");
            }
        }
        let merged = lora_merge(&w, &ad).unwrap();
        let ym = matmul_t(&x, &merged).unwrap();
        assert!(ym.max_abs_diff(&y).unwrap() < 1e-5);
    }

    #[test]
    fn zero_adapter_merge_is_identity() {
        let mut rng = SeededRng::new(4);
        let w = gaussian_fill(&mut rng, &[4, 4], 0.0, 1.0);
        let ad = lora_init(&LoraConfig::with_rank(2), 4, 4, &mut rng).unwrap();
        assert_eq!(lora_merge(&w, &ad).unwrap(), w);
    }

    #[test]
    fn train_mode_dropout_is_inverted() {
        let mut rng = SeededRng::new(5);
        let w = Tensor::zeros(&[1, 4]);
        let ad = LoraAdapter {
            a: Tensor::full(&[1, 4], 1.0),
            b: Tensor::full(&[1, 1], 1.0),
            alpha: 1.0,
        };
        let x = Tensor::full(&[20_000, 4], 1.0);
        let y = lora_forward(
            &x,
            &w,
            Some(&ad),
            LoraMode::Train {
                rate: 0.05,
                rng: &mut rng,
            },
        )
        .unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        // E[sum of 4 inverted-dropout ones] = 4
        assert!((mean - 4.0).abs() < 0.02, "{mean}");
        let eval = lora_forward(&x, &w, Some(&ad), LoraMode::Eval).unwrap();
        assert!(eval.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = SeededRng::new(6);
        let w = Tensor::zeros(&[4, 4]);
        let ad = random_adapter(&mut rng, 2, 3, 4);
        assert!(lora_forward(&Tensor::zeros(&[1, 4]), &w, Some(&ad), LoraMode::Eval).is_err());
        assert!(lora_merge(&w, &ad).is_err());
    }

    #[test]
    fn target_path_text_form() {
        let p = TargetPath {
            layer: 3,
            proj: Proj::Wv,
        };
        assert_eq!(p.to_string(), "layers.3.attn.wv");
        assert_eq!("layers.3.attn.wv".parse::<TargetPath>().unwrap(), p);
        assert!("layers.x.attn.wv".parse::<TargetPath>().is_err());
        assert!("layers.1.mlp.gate".parse::<TargetPath>().is_err());
    }

    #[test]
    fn adapter_file_round_trip() {
        let model = ModelConfig::default();
        let mut cfg = LoraConfig::with_rank(4);
        cfg.targets = Proj::ALL.to_vec();
        let mut set = AdapterSet::init(&model, &cfg).unwrap();
        // non-zero B so that both tensors carry information
        let mut rng = SeededRng::new(9);
        for ad in set.adapters.values_mut() {
            ad.b = gaussian_fill(&mut rng, ad.b.shape(), 0.0, 0.1);
        }
        let bytes = set.to_container().encode();
        assert_eq!(&bytes[..4], b"TTLA");
        let back =
            AdapterSet::from_container(Container::decode(&bytes, ADAPTER_MAGIC).unwrap()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn config_validation() {
        let model = ModelConfig::default();
        let mut cfg = LoraConfig::with_rank(1);
        assert!(cfg.validate(&model).is_ok());
        cfg.dropout = 1.0;
        assert!(cfg.validate(&model).is_err());
        cfg.dropout = 0.0;
        cfg.rank = 0;
        assert!(cfg.validate(&model).is_err());
        cfg.rank = 17; // d_kv = 16 for the default model
        assert!(cfg.validate(&model).is_err());
    }
}
