//! Training stages one and two: supervised fine-tuning of the
//! generator and pairwise reward-model training.

pub mod rmt;
pub mod sft;

pub use rmt::{
    pairwise_accuracy, rmt_loss, train_reward, RmtConfig, RmtReport,
};
pub use sft::{mean_sft_loss, sft_loss, train_sft, SftConfig, SftReport};
