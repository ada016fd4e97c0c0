//! Joint training of the speech and text branches on a synthetic paired
//! task, and quality evaluation under simultaneous decoding.

mod data;
mod evaluate;
mod loss;
mod optim;
mod trainer;

pub use data::{generate_dataset, pair_swap, target_for, Dataset, PairedExample, SyntheticTaskSpec};
pub use evaluate::{corpus_bleu, evaluate_quality, token_accuracy, Branch, EvalOutput, QualityReport};
pub use loss::{joint_loss, Ablation, JointLoss, LossTerms, LossWeights, TermMask};
pub use optim::{clip_grad_norm, grad_norm, inverse_sqrt_lr, Adam, AdamConfig};
pub use trainer::{example_gradient, train, train_phase, LogRecord, TrainConfig, TrainOutcome};
