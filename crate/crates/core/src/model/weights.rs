use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{Container, WEIGHTS_MAGIC};
use crate::lora::{lora_forward, lora_merge, AdapterSet, LoraMode, Proj, TargetPath};
use crate::model::config::{BlockStyle, ModelConfig};
use crate::rng::{gaussian_fill, SeededRng};
use crate::tensor::Tensor;

/// Standard deviation of every projection matrix and of the embedding table.
pub const INIT_STD: f32 = 0.02;
/// Standard deviation of the output projection.
pub const OUTPUT_INIT_STD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Gain of the norm in front of attention (the only norm in parallel blocks).
    pub attn_norm: Tensor,
    /// Gain of the norm in front of the MLP; sequential blocks only.
    pub mlp_norm: Option<Tensor>,
    /// `[d_model, d_model]`, stored `[out, in]` like every projection.
    pub wq: Tensor,
    /// `[d_kv, d_model]`
    pub wk: Tensor,
    /// `[d_kv, d_model]`
    pub wv: Tensor,
    /// `[d_model, d_model]`
    pub wo: Tensor,
    /// `[d_ff, d_model]`
    pub gate: Tensor,
    /// `[d_ff, d_model]`
    pub up: Tensor,
    /// `[d_model, d_ff]`
    pub down: Tensor,
}

impl LayerWeights {
    pub fn proj(&self, p: Proj) -> &Tensor {
        match p {
            Proj::Wq => &self.wq,
            Proj::Wk => &self.wk,
            Proj::Wv => &self.wv,
            Proj::Wo => &self.wo,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Tensor {
        match p {
            Proj::Wq => &mut self.wq,
            Proj::Wk => &mut self.wk,
            Proj::Wv => &mut self.wv,
            Proj::Wo => &mut self.wo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab, d_model]`
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `[vocab, d_model]`
    pub output: Tensor,
}

/// Configuration, frozen base weights and optionally attached adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
    adapters: Option<AdapterSet>,
}

impl Model {
    /// Seeded Gaussian initialization; norm gains start at one.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let (d, d_kv, f, v) = (
            config.d_model,
            config.d_kv(),
            config.d_ff,
            config.vocab_size,
        );
        let embedding = gaussian_fill(&mut rng, &[v, d], 0.0, INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full(&[d], 1.0),
                mlp_norm: (config.block_style == BlockStyle::Sequential)
                    .then(|| Tensor::full(&[d], 1.0)),
                wq: gaussian_fill(&mut rng, &[d, d], 0.0, INIT_STD),
                wk: gaussian_fill(&mut rng, &[d_kv, d], 0.0, INIT_STD),
                wv: gaussian_fill(&mut rng, &[d_kv, d], 0.0, INIT_STD),
                wo: gaussian_fill(&mut rng, &[d, d], 0.0, INIT_STD),
                gate: gaussian_fill(&mut rng, &[f, d], 0.0, INIT_STD),
                up: gaussian_fill(&mut rng, &[f, d], 0.0, INIT_STD),
                down: gaussian_fill(&mut rng, &[d, f], 0.0, INIT_STD),
            })
            .collect();
        let output = gaussian_fill(&mut rng, &[v, d], 0.0, OUTPUT_INIT_STD);
        let model = Model {
            weights: Weights {
                embedding,
                layers,
                final_norm: Tensor::full(&[d], 1.0),
                output,
            },
            config,
            adapters: None,
        };
        model.audit()?;
        Ok(model)
    }

    pub fn from_parts(config: ModelConfig, weights: Weights) -> Result<Model> {
        config.validate()?;
        let model = Model {
            config,
            weights,
            adapters: None,
        };
        model.audit()?;
        Ok(model)
    }

    /// Expected shape of every named tensor, in file order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, d_kv, f, v) = (
            config.d_model,
            config.d_kv(),
            config.d_ff,
            config.vocab_size,
        );
        let mut out = vec![("tok_embeddings".to_string(), vec![v, d])];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![d]));
            if config.block_style == BlockStyle::Sequential {
                out.push((format!("layers.{l}.mlp_norm"), vec![d]));
            }
            out.push((format!("layers.{l}.attn.wq"), vec![d, d]));
            out.push((format!("layers.{l}.attn.wk"), vec![d_kv, d]));
            out.push((format!("layers.{l}.attn.wv"), vec![d_kv, d]));
            out.push((format!("layers.{l}.attn.wo"), vec![d, d]));
            out.push((format!("layers.{l}.mlp.gate"), vec![f, d]));
            out.push((format!("layers.{l}.mlp.up"), vec![f, d]));
            out.push((format!("layers.{l}.mlp.down"), vec![d, f]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("output".to_string(), vec![v, d]));
        out
    }

    /// Base tensors by name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let w = &self.weights;
        let mut out = vec![("tok_embeddings".to_string(), &w.embedding)];
        for (l, lw) in w.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &lw.attn_norm));
            if let Some(n) = &lw.mlp_norm {
                out.push((format!("layers.{l}.mlp_norm"), n));
            }
            for p in Proj::ALL {
                out.push((format!("layers.{l}.attn.{}", p.name()), lw.proj(p)));
            }
            out.push((format!("layers.{l}.mlp.gate"), &lw.gate));
            out.push((format!("layers.{l}.mlp.up"), &lw.up));
            out.push((format!("layers.{l}.mlp.down"), &lw.down));
        }
        out.push(("final_norm".to_string(), &w.final_norm));
        out.push(("output".to_string(), &w.output));
        out
    }

    /// Every tensor has the shape the configuration implies.
    pub fn audit(&self) -> Result<()> {
        if self.weights.layers.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "{} layers of weights for n_layers = {}",
                self.weights.layers.len(),
                self.config.n_layers
            )));
        }
        let expected = Self::expected_shapes(&self.config);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, t)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != t.shape() {
                return Err(Error::dim("weight audit", es, t.shape()));
            }
        }
        if let Some(set) = &self.adapters {
            self.check_adapters(set)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    fn check_adapters(&self, set: &AdapterSet) -> Result<()> {
        for (path, ad) in &set.adapters {
            if path.layer >= self.config.n_layers {
                return Err(Error::Config(format!(
                    "adapter target {path} has no such layer"
                )));
            }
            let (d_in, d_out) = path.proj.dims(&self.config);
            if ad.d_in() != d_in || ad.d_out() != d_out || ad.b.shape()[1] != ad.rank() {
                return Err(Error::dim(
                    "adapter",
                    &[d_out, d_in],
                    &[ad.d_out(), ad.d_in()],
                ));
            }
        }
        Ok(())
    }

    /// Attach adapters, replacing (and returning) any previously attached set.
    pub fn attach_adapters(&mut self, set: AdapterSet) -> Result<Option<AdapterSet>> {
        self.check_adapters(&set)?;
        Ok(self.adapters.replace(set))
    }

    pub fn detach_adapters(&mut self) -> Option<AdapterSet> {
        self.adapters.take()
    }

    /// Fold the attached adapters into the base weights and drop them.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let set = self
            .adapters
            .take()
            .ok_or_else(|| Error::Usage("no adapters attached".into()))?;
        for (path, ad) in &set.adapters {
            let w = self.weights.layers[path.layer].proj_mut(path.proj);
            *w = lora_merge(w, ad)?;
        }
        Ok(())
    }

    /// `x·Wᵀ` for an attention projection, through its adapter when one is attached.
    pub fn project(&self, layer: usize, proj: Proj, x: &Tensor) -> Result<Tensor> {
        let w = self.weights.layers[layer].proj(proj);
        let adapter = self
            .adapters
            .as_ref()
            .and_then(|s| s.adapters.get(&TargetPath { layer, proj }));
        lora_forward(x, w, adapter, LoraMode::Eval)
    }

    /// Base weights and configuration as a `TTLM` container.
    pub fn to_container(&self) -> Container {
        Container {
            magic: WEIGHTS_MAGIC,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            meta: serde_json::to_vec(&self.config).expect("config serializes"),
        }
    }

    pub fn from_container(mut c: Container) -> Result<Model> {
        let config: ModelConfig = serde_json::from_slice(&c.meta)
            .map_err(|e| Error::Format(format!("model config block: {e}")))?;
        config.validate()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        let embedding = c.take_tensor("tok_embeddings")?;
        for l in 0..config.n_layers {
            let mut take = |suffix: &str| c.take_tensor(&format!("layers.{l}.{suffix}"));
            layers.push(LayerWeights {
                attn_norm: take("attn_norm")?,
                mlp_norm: match config.block_style {
                    BlockStyle::Sequential => Some(take("mlp_norm")?),
                    BlockStyle::Parallel => None,
                },
                wq: take("attn.wq")?,
                wk: take("attn.wk")?,
                wv: take("attn.wv")?,
                wo: take("attn.wo")?,
                gate: take("mlp.gate")?,
                up: take("mlp.up")?,
                down: take("mlp.down")?,
            });
        }
        let weights = Weights {
            embedding,
            layers,
            final_norm: c.take_tensor("final_norm")?,
            output: c.take_tensor("output")?,
        };
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Model::from_parts(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_container(Container::read(path, WEIGHTS_MAGIC)?)
    }

    /// SHA-256 of the serialized base weights, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = self.to_container().encode();
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
