//! Trainable-subset selection, the fine-tuning loop, control adherence,
//! and low-rank adapters.

pub mod adherence;
pub mod lora;
pub mod selector;
pub mod train;

pub use adherence::{adherence, adherence_each, binarize, iou, otsu_threshold};
pub use lora::{lora_attach, lora_detach, LoraAdapter, LoraAttachment, LoraTarget};
pub use selector::{resolve_selector, ParamSelector, Selection};
pub use train::{
    evaluate_adherence, gaussian, item_rng, pretrain_backbone, sample_images, train,
    trainable_names, ConvergenceTrace, EvalRecord, PretrainConfig, TrainConfig, TrainOutcome,
};
