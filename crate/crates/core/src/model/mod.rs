//! Decoder-only toy transformer: RMSNorm, SwiGLU, rotary embeddings,
//! grouped-query and sliding-window attention, a rolling KV cache and
//! greedy decoding.

pub mod attention;
pub mod cache;
pub mod config;
pub mod ops;
pub mod session;
pub mod tokenizer;
pub mod weights;

pub use attention::{
    attention_online, attention_ref, kv_group_index, swa_allowed, AttentionKernel, HeadLayout,
    PositionMask,
};
pub use cache::{CacheView, KvCache};
pub use config::{BlockStyle, ModelConfig};
pub use ops::{rms_norm, rms_norm_rows, rope_apply, silu, swiglu_mlp};
pub use session::{block_forward, DecodeSession, Generation};
pub use tokenizer::{detokenize, tokenize};
pub use weights::{LayerWeights, Model, Weights};
