//! Model assembly, training, gradient verification and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

pub use model::{
    backward_example, forward, forward_example, loss_and_grads, predict_probs, Encoded, ExampleCache, Featurizer,
    ModelConfig,
};
pub use params::{ModelParams, ModelShape};
pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, TensorReport};
pub use train::{
    train, train_with_observer, write_history, EpochRecord, EpochView, Prediction, Resources, TrainConfig, TrainOutcome,
    TrainedModel,
};
pub use checkpoint::{check_compatible, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
