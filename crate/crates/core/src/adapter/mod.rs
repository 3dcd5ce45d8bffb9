//! Cross-attention adapter that refines the frozen VLM's visual tokens
//! using the class prototypes as keys and values.

mod model;
mod train;

pub use model::{
    adapt_tape, autoreg_loss, autoreg_loss_tape, rec_loss, rec_loss_tape, AdapterParams,
    AdapterVars,
};
pub use train::{scene_example, train_adapter, AdapterLogRow, AdapterTrainParams, TrainedAdapter};
