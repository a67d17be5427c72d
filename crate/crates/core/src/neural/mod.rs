//! BiLSTM-CRF multi-task model for intent classification and BIO tagging,
//! with hand-written exact gradients.

pub mod crf;
mod io;
pub(crate) mod lstm;
mod matrix;
mod model;
mod optim;
mod params;

pub use io::{
    decode_model, encode_model, load_model, load_pretrained_embeddings, save_model, vocab_hash,
    FORMAT_VERSION,
};
pub use matrix::{argmax, cross_entropy, entropy, kl_divergence, log_softmax, log_sum_exp, softmax, Matrix};
pub use model::{
    backward, evaluate, evaluate_with, forward_encoded, input_gradient, loss_terms, predict_encoded,
    supervised_loss, Encoded, ForwardOptions, ForwardTrace, LossSpec, Model, ModelVocab,
    Prediction, SoftLabel, Upstream, UNK,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Cell, LinearRef, ModelDims, ModelParams, View};
pub(crate) use matrix::{gemv_acc, gemv_t_acc, outer_acc};
