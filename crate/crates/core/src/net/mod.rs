//! Deep bidirectional LSTM with a CTC softmax output layer.

mod alphabet;
pub mod linalg;
mod lstm;
mod model;
mod train;

pub use alphabet::{LabelAlphabet, DEFAULT_SYMBOLS};
pub use lstm::{backward_pass, bptt_gradients, forward, forward_pass, lstm_cell_step, CellParams, ForwardPass};
pub use model::{DblstmModel, DirLayout, Layout, PosteriorSequence, Topology};
pub use train::{
    evaluate_cer, lr_schedule, recognize, sgd_step, train, EpochRecord, SgdState, TrainConfig, TrainOutcome,
    TrainSample,
};
