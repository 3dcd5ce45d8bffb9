//! Multi-modal class embeddings: projection heads for visual and text
//! features, the contrastive alignment and prototype losses, and the
//! EMA-updated class table.

mod heads;
mod losses;
mod table;
mod train;

pub use heads::{Mlp, ProjectionHeads};
pub use losses::{align_loss, align_loss_tape, class_loss, class_loss_tape, EmbeddingBatch};
pub use table::{class_means, init_class_embeddings, ClassArtifacts, ClassEmbeddingTable};
pub use train::{
    check_prototype_gate, crop_features, fit_class_embeddings, nearest_prototype, prototype_gate,
    text_features, train_class_embeddings, write_log_csv, EmbeddingLogRow, EmbeddingParams, Phase,
    PrototypeGateReport, TrainedEmbeddings, GATE_ACCURACY_MIN, GATE_RARE_RECALL_MIN,
};
