//! Low-rank adapters on the attention projections, and their training.

mod adapter;
pub mod grad;

pub use adapter::{
    lora_forward, lora_init, lora_merge, AdapterSet, LoraAdapter, LoraConfig, LoraMode, Proj,
    TargetPath,
};
pub use grad::{
    batch_loss_and_grads, lora_grads, loss_next_token, sequence_logits, sequence_loss,
    sequence_loss_and_grads, AdapterParamSet, AdapterParams, Dropout, TrainModel, TrainSequence,
};
pub mod train;

pub use train::{
    adam_step, dataset_loss, finetune, load_instructions, parse_instructions, AdamState,
    FinetuneOutcome, InstructionExample, TrainConfig, SEPARATOR,
};
