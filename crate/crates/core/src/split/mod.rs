//! Prototype splitting: duplicate a channel, train the original/duplicate
//! kernel pair on two labeled concepts plus a reference set, then
//! re-initialize and fine-tune the affected head rows.

mod adam;
mod concepts;
mod head;
mod loss;
mod session;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use concepts::{
    build_reference_set, concepts_from_labels, default_reference_size, ConceptLabel, ConceptSets,
    ReferenceSet,
};
pub use head::{
    duplicate_kernel, duplicate_prototype, extend_head, positive_weight_stats,
    reinit_and_finetune_head, FinetuneParams, HeadInit,
};
pub use loss::{
    l_act, l_deact, split_loss, split_loss_gradient, ChannelPair, Membership, PatchGradient,
};
pub use session::{
    full_set_loss, per_concept_accuracy, run_split, run_split_with_progress, ConceptAccuracy,
    Evaluation, History, Progress, Sampling, SessionStatus, SplitHyperparams, SplitResult,
    SplitSession,
};
