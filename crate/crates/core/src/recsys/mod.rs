//! Job recommendation over encoded documents.
//!
//! The base recommender squashes a CV/JD match score into a
//! probability: either an MLP over the concatenated embeddings or a
//! plain dot product. The enhanced variant additionally folds in the
//! mean-pooled embeddings of JDs *generated for that seeker*, which is
//! where the generative pipeline feeds the discriminative one.
//! Training minimises binary cross-entropy against interaction labels
//! and early-stops on validation AUC.

pub mod model;
pub mod train;

pub use model::{fuse_generated, PredictorKind, RecExample, RecModel, RecModelConfig};
pub use train::{
    mean_rec_loss, rec_auc, rec_loss, rec_loss_graph, rec_probabilities, train_rec,
    RecEpochStats, RecReport, RecTrainConfig,
};
