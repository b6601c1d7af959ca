//! Self-binarizing training: constrained weights, the sharpening schedule,
//! Adam, per-channel alpha and weight histograms.

pub mod adam;
pub mod alpha;
pub mod hist;
pub mod schedule;
pub mod train;
pub mod weights;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use alpha::{alpha_chain_backward, alpha_optimal, AlphaFit, AlphaScale};
pub use hist::{histogram_snapshot, HistogramPair};
pub use schedule::NuSchedule;
pub use train::{train, EpochMetrics, TrainConfig, TrainOutcome};
pub use weights::{BinarizeMode, ConstrainedWeights, WeightView};
