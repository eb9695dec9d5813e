//! Synthetic lab for fine-tuning embedding encoders without forgetting.
//!
//! A small MLP encoder is pretrained on several synthetic domains, then
//! fine-tuned on a held-out fine-grained domain while two regularizers hold
//! it near the pretrained model: an L2 penalty on parameter drift and an
//! embedding distillation term on generic-domain inputs. The [`harness`]
//! module runs grid searches, sweeps and baselines over that loop.

pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use data::{generate_universe, SyntheticUniverse, TargetEmbeddingCache, Teacher, UniverseConfig};
pub use encoder::{forward, Activation, EncoderConfig, ParameterVector};
pub use error::{Error, Result};
pub use harness::{evaluate_suite, grid_search, report, sweep, ExperimentConfig, Lab};
pub use losses::{domain_loss, embed_reg_loss, param_reg_loss, total_loss, Prototypes, RegWeights};
pub use metrics::{composite_score, map_at_k, recall_at_1_paired, RetrievalSplit};
pub use trainer::{finetune, pretrain, wise_ft, FinetuneConfig, OptimizerConfig, TargetSource};
