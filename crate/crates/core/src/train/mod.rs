//! Training orchestration for every method, from plain supervised runs to
//! pretraining followed by adversarial feature-map transfer.

mod config;
mod discriminator;
mod evaluate;
mod experiment;

pub use config::{Method, TrainConfig};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use evaluate::{argmax_rows, evaluate, predict};
pub use experiment::{network_for, run_experiment, Cursor, Outcome, TeacherSignals, Trainer};
