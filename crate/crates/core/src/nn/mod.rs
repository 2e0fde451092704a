//! Layer stacks, parameter initialization and the SGD optimizer.

mod network;
mod sgd;
mod spec;

pub use network::{activate, init_param, record_forward, Bound, Network, NetworkState, Param, ParamGrads};
pub use sgd::Sgd;
pub use spec::{ActShape, Activation, Layer, NetworkSpec, ParamSlot, Part};
