//! BKNet: the Bussgang gain learned by a recurrent network and applied in
//! the reduced-observation recursion.

pub mod bptt;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod train;

pub use bptt::{backward_through_time, loss_sequence, BpttOptions, SequenceGradient};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{default_grad_check, gain_gradient_check, grad_check, random_point_network, toy_problem, GradCheckReport, ToySpec};
pub use layers::{Gradients, GruCell, Parameters};
pub use network::{bknet_step, run_bknet, BknetState, FeatureScale, Features, GainNetwork, GainShape, Hidden, NetworkConfig};
pub use train::{adam_update, evaluate_bknet, train, write_loss_curve, AdamState, EpochRecord, TrainConfig, TrainOutcome, TrainingData};
