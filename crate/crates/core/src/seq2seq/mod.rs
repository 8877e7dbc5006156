//! Multi-encoder / multi-decoder LSTM model trained on partial training paths.

mod config;
mod embed;
mod model;
mod network;
mod schedule;
mod train;

pub use config::{DecoderConfig, EncoderConfig, EncoderVariant, ModelConfig};
pub use embed::{combine_avg, decode_nll, encode, encode_batch, encode_corpus, DecodeNll, SentenceEmbedding};
pub use model::{
    checkpoint_bytes, checkpoint_from_bytes, init_model, load_checkpoint, save_checkpoint, Bridge,
    DecoderParams, EncoderParams, ModelGrads, ModelParams,
};
pub use network::{decoder_pass, encoder_backward, encoder_forward, DecodeOutput, EncoderTape};
pub use schedule::{sample_path, validate_schedule, ExposureReport, PathSchedule, TrainingPath};
pub use train::{
    dev_perplexity, dev_similarity_error, path_loss, run_training, run_training_with,
    train_minibatch, EpochLog, LrSchedule, PathLoss, StepOptions, StepOutput, TrainConfig,
    TrainReport,
};

#[cfg(test)]
mod tests;
