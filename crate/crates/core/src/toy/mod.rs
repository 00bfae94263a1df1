//! Desk-scale distillation between two tiny models with different tokenizers.

pub mod data;
pub mod model;
pub mod tokenizer;
pub mod train;

pub use data::{copy_task, synth_cot_pair, Sample};
pub use model::{Forward, ToyLM, Upstream};
pub use tokenizer::{char_tokenize, ToyTokenizer, TokenizerKind};
pub use train::{
    objective_grad_check, pretrain_teacher, run, train_run, train_run_with, Ablation, EpochRecord, StepRecord, Teacher,
    TrainConfig, TrainingLog,
};
