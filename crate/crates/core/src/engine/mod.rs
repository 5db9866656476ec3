//! The compression driver: relaxation of a trained model into mixtures,
//! their initialization, blockwise joint training with a growing cost
//! penalty, and extraction of concrete sub-models.

mod compress;
mod mixture;
mod train;

pub use compress::{darc_compress, min_feasible_cost, CompressReport, DarcSchedule, Outcome, Snapshot};
pub use mixture::{init_darc, relax, select_submodel, InitOptions, MixtureLayer};
pub use train::{fit, mean_loss, train_epochs, EpochRecord, LogCollector, Observer, Phase, Sgd, StepConfig};
