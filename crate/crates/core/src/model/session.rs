use crate::error::{Error, Result};
use crate::lora::Proj;
use crate::model::attention::{AttentionKernel, HeadLayout, PositionMask};
use crate::model::cache::KvCache;
use crate::model::config::BlockStyle;
use crate::model::ops::{rms_norm_rows, rope_in_place, swiglu_mlp};
use crate::model::weights::Model;
use crate::tensor::{add, argmax, matmul_t, Tensor};

fn concat_rows(a: Option<&Tensor>, b: &Tensor) -> Result<Tensor> {
    match a {
        None => Ok(b.clone()),
        Some(a) => {
            let (ra, ca) = a.dims2()?;
            let (rb, cb) = b.dims2()?;
            if ca != cb {
                return Err(Error::dim("concat_rows", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::from_vec(&[ra + rb, ca], data)
        }
    }
}

/// Attention sub-layer over normalized input `n` whose rows sit at `positions`.
///
/// Keys already in the cache are combined with the new keys before the
/// kernel runs; the new keys are written back afterwards, so a rolling
/// buffer never loses an entry a query in this batch still needs.
fn attention_sublayer(
    model: &Model,
    layer: usize,
    n: &Tensor,
    positions: &[usize],
    cache: &mut KvCache,
    kernel: AttentionKernel,
) -> Result<Tensor> {
    let cfg = &model.config;
    let dh = cfg.d_head();
    let mut q = model.project(layer, Proj::Wq, n)?;
    let mut k = model.project(layer, Proj::Wk, n)?;
    let v = model.project(layer, Proj::Wv, n)?;
    for (t, &pos) in positions.iter().enumerate() {
        rope_in_place(q.row_mut(t), dh, pos, cfg.rope_base)?;
        rope_in_place(k.row_mut(t), dh, pos, cfg.rope_base)?;
    }
    let past = cache.view(layer)?;
    let keys = concat_rows(past.keys.as_ref(), &k)?;
    let values = concat_rows(past.values.as_ref(), &v)?;
    let mut key_positions = past.positions;
    key_positions.extend_from_slice(positions);
    let layout = HeadLayout {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        d_head: dh,
    };
    let mask = PositionMask {
        query_positions: positions,
        key_positions: &key_positions,
        window: cfg.window,
    };
    let attended = kernel.run(&q, &keys, &values, layout, &mask)?;
    for (t, &pos) in positions.iter().enumerate() {
        cache.write(layer, pos, k.row(t), v.row(t))?;
    }
    model.project(layer, Proj::Wo, &attended)
}

/// One decoder block.
///
/// Sequential: `h = x + attn(norm(x)); out = h + mlp(norm(h))`.
/// Parallel: `n = norm(x); out = x + attn(n) + mlp(n)`.
pub fn block_forward(
    model: &Model,
    layer: usize,
    x: &Tensor,
    positions: &[usize],
    cache: &mut KvCache,
    kernel: AttentionKernel,
) -> Result<Tensor> {
    let cfg = &model.config;
    let lw = &model.weights.layers[layer];
    let (_, cols) = x.dims2()?;
    if cols != cfg.d_model {
        return Err(Error::dim(
            "block_forward",
            x.shape(),
            &[x.shape()[0], cfg.d_model],
        ));
    }
    let n = rms_norm_rows(x, &lw.attn_norm, cfg.norm_eps)?;
    let attn = attention_sublayer(model, layer, &n, positions, cache, kernel)?;
    match cfg.block_style {
        BlockStyle::Sequential => {
            let h = add(x, &attn)?;
            let gain = lw
                .mlp_norm
                .as_ref()
                .ok_or_else(|| Error::Config(format!("layer {layer} lacks an MLP norm")))?;
            let n2 = rms_norm_rows(&h, gain, cfg.norm_eps)?;
            add(&h, &swiglu_mlp(&n2, &lw.gate, &lw.up, &lw.down)?)
        }
        BlockStyle::Parallel => {
            let mlp = swiglu_mlp(&n, &lw.gate, &lw.up, &lw.down)?;
            add(&add(x, &attn)?, &mlp)
        }
    }
}

/// Tokens produced by [`DecodeSession::greedy_trace`] with the logits that chose each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Next-token logits seen before each decision, including the one that hit the stop token.
    pub step_logits: Vec<Vec<f32>>,
}

/// A single-owner decoding context over shared model weights.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model,
    cache: KvCache,
    tokens: Vec<u32>,
    generated: Vec<u32>,
    kernel: AttentionKernel,
}

impl<'m> DecodeSession<'m> {
    /// Session whose cache is a rolling buffer of the model's window
    /// (unbounded for full causal models).
    pub fn new(model: &'m Model) -> Self {
        Self::with_cache_capacity(model, model.config.window)
    }

    /// Session with an explicit cache capacity; `None` keeps every position
    /// while the attention mask still honours the window.
    pub fn with_cache_capacity(model: &'m Model, capacity: Option<usize>) -> Self {
        let cfg = &model.config;
        Self {
            model,
            cache: KvCache::new(cfg.n_layers, cfg.d_kv(), capacity),
            tokens: Vec::new(),
            generated: Vec::new(),
            kernel: AttentionKernel::default(),
        }
    }

    pub fn with_kernel(mut self, kernel: AttentionKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Every token consumed or generated so far.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens produced by greedy decoding in this session.
    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    pub fn position(&self) -> usize {
        self.cache.next_position()
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let vocab = self.model.config.vocab_size;
        let d = self.model.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= vocab {
                return Err(Error::Data(format!(
                    "token id {t} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(self.model.weights.embedding.row(t as usize));
        }
        Tensor::from_vec(&[tokens.len(), d], data)
    }

    /// Run `new_tokens` through every block and return the last block's output.
    pub fn forward_hidden(&mut self, new_tokens: &[u32]) -> Result<Tensor> {
        if new_tokens.is_empty() {
            return Err(Error::Usage("forward pass needs at least one token".into()));
        }
        let mut x = self.embed(new_tokens)?;
        let start = self.position();
        let positions: Vec<usize> = (start..start + new_tokens.len()).collect();
        for layer in 0..self.model.config.n_layers {
            x = block_forward(
                self.model,
                layer,
                &x,
                &positions,
                &mut self.cache,
                self.kernel,
            )?;
        }
        self.tokens.extend_from_slice(new_tokens);
        Ok(x)
    }

    /// Logits `[len(new_tokens), vocab]`; the cache advances past the new tokens.
    pub fn forward_logits(&mut self, new_tokens: &[u32]) -> Result<Tensor> {
        let h = self.forward_hidden(new_tokens)?;
        let w = &self.model.weights;
        let n = rms_norm_rows(&h, &w.final_norm, self.model.config.norm_eps)?;
        matmul_t(&n, &w.output)
    }

    /// Feed the prompt in window-sized chunks (one chunk without a window)
    /// and return the logits of its last position.
    pub fn prefill_chunked(&mut self, prompt: &[u32]) -> Result<Vec<f32>> {
        if prompt.is_empty() {
            return Err(Error::Usage("cannot prefill an empty prompt".into()));
        }
        let chunk = self.model.config.window.unwrap_or(prompt.len());
        let mut last = None;
        for piece in prompt.chunks(chunk) {
            last = Some(self.forward_logits(piece)?);
        }
        let logits = last.expect("prompt is non-empty");
        let rows = logits.shape()[0];
        Ok(logits.row(rows - 1).to_vec())
    }

    /// Greedy decoding that also records the logits behind every choice.
    pub fn greedy_trace(
        &mut self,
        prompt: &[u32],
        max_new: usize,
        stop_token: Option<u32>,
    ) -> Result<Generation> {
        let mut logits = self.prefill_chunked(prompt)?;
        let mut out = Generation {
            tokens: Vec::new(),
            step_logits: Vec::new(),
        };
        while out.tokens.len() < max_new {
            let next = argmax(&logits)? as u32;
            out.step_logits.push(std::mem::take(&mut logits));
            if Some(next) == stop_token {
                break;
            }
            out.tokens.push(next);
            self.generated.push(next);
            logits = self.forward_logits(&[next])?.row(0).to_vec();
        }
        Ok(out)
    }

    /// Append the argmax token until `stop_token` appears or `max_new` tokens exist.
    pub fn greedy_decode(
        &mut self,
        prompt: &[u32],
        max_new: usize,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        Ok(self.greedy_trace(prompt, max_new, stop_token)?.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::ops::norm_calls;
    use crate::model::tokenizer::VOCAB_SIZE;

    fn tiny(window: Option<usize>, style: BlockStyle) -> Model {
        Model::init(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 24,
            window,
            block_style: style,
            seed: 17,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = tiny(None, BlockStyle::Sequential);
        let toks = [1u32, 50, 60, 70];
        let a = DecodeSession::new(&m).forward_logits(&toks).unwrap();
        let b = DecodeSession::new(&m).forward_logits(&toks).unwrap();
        assert_eq!(a.shape(), &[4, VOCAB_SIZE]);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_vocab_token() {
        let m = tiny(None, BlockStyle::Sequential);
        let err = DecodeSession::new(&m)
            .forward_logits(&[VOCAB_SIZE as u32])
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn zero_sublayers_are_residual_identity() {
        for style in [BlockStyle::Sequential, BlockStyle::Parallel] {
            let mut m = tiny(None, style);
            for lw in &mut m.weights.layers {
                for p in Proj::ALL {
                    let shape = lw.proj(p).shape().to_vec();
                    *lw.proj_mut(p) = Tensor::zeros(&shape);
                }
                lw.down = Tensor::zeros(lw.down.shape());
            }
            let x =
                crate::rng::gaussian_fill(&mut crate::rng::SeededRng::new(1), &[3, 16], 0.0, 1.0);
            let mut cache = KvCache::new(2, m.config.d_kv(), None);
            let y = block_forward(
                &m,
                0,
                &x,
                &[0, 1, 2],
                &mut cache,
                AttentionKernel::Reference,
            )
            .unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn norm_count_per_block() {
        for (style, expected) in [(BlockStyle::Sequential, 2), (BlockStyle::Parallel, 1)] {
            let m = tiny(None, style);
            let x = Tensor::full(&[2, 16], 0.5);
            let mut cache = KvCache::new(2, m.config.d_kv(), None);
            let before = norm_calls();
            block_forward(&m, 0, &x, &[0, 1], &mut cache, AttentionKernel::Online).unwrap();
            assert_eq!(norm_calls() - before, expected);
        }
    }

    #[test]
    fn rigged_model_repeats_favourite() {
        // constant hidden state, output row 7 aligned with it, every other row zero
        let mut m = tiny(None, BlockStyle::Sequential);
        m.weights.output = Tensor::zeros(&[VOCAB_SIZE, 16]);
        m.weights.embedding = Tensor::full(&[VOCAB_SIZE, 16], 1.0);
        for lw in &mut m.weights.layers {
            lw.wo = Tensor::zeros(lw.wo.shape());
            lw.down = Tensor::zeros(lw.down.shape());
        }
        m.weights.output.row_mut(7).fill(1.0);
        let out = DecodeSession::new(&m)
            .greedy_decode(&[1, 50], 5, None)
            .unwrap();
        assert_eq!(out, vec![7; 5]);
        // and stops immediately when 7 is the stop token
        let out = DecodeSession::new(&m)
            .greedy_decode(&[1, 50], 5, Some(7))
            .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_respects_bound_and_position() {
        let m = tiny(Some(4), BlockStyle::Parallel);
        for max_new in [0, 1, 6] {
            let mut s = DecodeSession::new(&m);
            let out = s.greedy_decode(&[1, 40, 41], max_new, None).unwrap();
            assert!(out.len() <= max_new);
            assert_eq!(s.generated(), out.as_slice());
            assert_eq!(s.position(), 3 + out.len());
            assert_eq!(s.tokens().len(), s.position());
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        let m = tiny(Some(4), BlockStyle::Sequential);
        assert!(matches!(
            DecodeSession::new(&m).prefill_chunked(&[]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn short_prompt_single_chunk_matches_one_shot() {
        let m = tiny(Some(8), BlockStyle::Sequential);
        let prompt = [1u32, 9, 10, 11, 12];
        let a = DecodeSession::new(&m).prefill_chunked(&prompt).unwrap();
        let full = DecodeSession::new(&m).forward_logits(&prompt).unwrap();
        assert_eq!(a.as_slice(), full.row(4));
    }
}
