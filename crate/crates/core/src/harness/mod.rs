//! Configuration, metrics, experiment orchestration and file formats.

pub mod ablation;
pub mod bundle;
pub mod config;
pub mod io;
pub mod kb;
pub mod metrics;

pub use ablation::{run_ablation, AblationTable, ABLATION_ROWS};
pub use bundle::DiffusionBundle;
pub use config::{AblationFlags, ExperimentConfig};
pub use kb::KnowledgeBase;
pub use metrics::{eval_frechet_proxy, eval_label_consistency, eval_pose_pck, MetricReport};
