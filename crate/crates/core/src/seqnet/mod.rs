//! Masked recurrent and attention layers and the models built from them.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod rnn;

pub use attention::{encoder_block_forward, mha_forward, EncoderBlock, MultiHeadAttention};
pub use layers::{dropout_forward, Activation, Dense, LayerNorm};
pub use lstm::{lstm_forward, LstmLayer};
pub use model::{
    model_backward, model_forward, predict, Architecture, Body, ForwardCache, Gradients, LstmBlockSpec, ModelConfig,
    ModelParams, Pooling,
};
pub use rnn::{rnn_cell_forward, RnnCellParams};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, random_problem, DEFAULT_STEP};
