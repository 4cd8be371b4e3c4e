//! Adam and the instruction fine-tuning loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::grad::{
    batch_loss_and_grads, sequence_loss, AdapterParamSet, TrainModel, TrainSequence,
};
use crate::lora::{AdapterSet, LoraConfig};
use crate::model::tokenizer::{tokenize, BOS, EOS};
use crate::model::Model;
use crate::rng::SeededRng;

/// Text placed between instruction and response.
pub const SEPARATOR: &str = "\n### Resposta:\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 200,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub response: String,
}

impl InstructionExample {
    /// `BOS instruction SEPARATOR response EOS`, with targets only where the
    /// next token belongs to the response (including the closing EOS).
    pub fn to_sequence(&self) -> Result<TrainSequence> {
        if self.instruction.is_empty() || self.response.is_empty() {
            return Err(Error::Data(
                "instruction and response must both be non-empty".into(),
            ));
        }
        let mut stream = vec![BOS];
        stream.extend(tokenize(&self.instruction));
        stream.extend(tokenize(SEPARATOR));
        let response_start = stream.len();
        stream.extend(tokenize(&self.response));
        stream.push(EOS);
        let n = stream.len() - 1;
        let targets = (0..n)
            .map(|t| (t + 1 >= response_start).then_some(stream[t + 1]))
            .collect();
        stream.truncate(n);
        Ok(TrainSequence {
            tokens: stream,
            targets,
        })
    }
}

/// Reads one `{"instruction": .., "response": ..}` object per line.
pub fn load_instructions(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_instructions(&text)
}

pub fn parse_instructions(text: &str) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.instruction.is_empty() || ex.response.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty instruction or response".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub adapters: AdapterSet,
    /// Mean training loss of each step's batch, with dropout active.
    pub losses: Vec<f64>,
}

/// Mean response-token loss over the whole dataset in eval mode.
pub fn dataset_loss(
    model: &Model,
    adapters: Option<&AdapterSet>,
    dataset: &[InstructionExample],
) -> Result<f64> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let tm = TrainModel::from_model(model);
    let params = adapters
        .map(AdapterParamSet::from_set)
        .unwrap_or(AdapterParamSet {
            entries: Vec::new(),
        });
    let seqs = dataset
        .iter()
        .map(|e| e.to_sequence())
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<Result<f64>> = seqs
        .par_iter()
        .map(|s| sequence_loss(&tm, &params, s))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seqs.len() as f64)
}

/// Trains a fresh adapter set on `dataset`. The model's base weights are
/// read only.
pub fn finetune(
    model: &Model,
    lora: &LoraConfig,
    dataset: &[InstructionExample],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    if dataset.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    cfg.validate()?;
    let init = AdapterSet::init(&model.config, lora)?;
    let seqs = dataset
        .iter()
        .map(|e| e.to_sequence())
        .collect::<Result<Vec<_>>>()?;
    let tm = TrainModel::from_model(model);
    let mut params = AdapterParamSet::from_set(&init);
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());

    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                rng.shuffle(&mut order);
                order.reverse();
            }
            batch.push(seqs[order.pop().expect("refilled above")].clone());
        }
        let dropout_rng = SeededRng::new(cfg.seed).fork(1 + step as u64);
        let (loss, grads) = batch_loss_and_grads(
            &tm,
            &params,
            &batch,
            Some((f64::from(lora.dropout), &dropout_rng)),
        )?;
        adam_step(&mut flat, &grads.flatten(), &mut state, cfg)?;
        params.unflatten(&flat);
        losses.push(loss);
    }
    Ok(FinetuneOutcome {
        adapters: params.to_set(lora.dropout)?,
        losses,
    })
}
