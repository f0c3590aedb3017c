//! Contrastive pretraining of the patch encoder.

mod augment;
mod encoder;
mod loss;
mod pretrain;

pub use augment::{augment_pair, AugmentationConfig, RgbImage};
pub use encoder::{EncoderConfig, EncoderParams};
pub use loss::{nt_xent_loss, nt_xent_value};
pub use pretrain::{
    batch_loss, embed_patches, load_encoder, prepare_patches, pretrain_encoder, save_encoder, PretrainConfig,
    PretrainLogEntry, ENCODER_KIND,
};
