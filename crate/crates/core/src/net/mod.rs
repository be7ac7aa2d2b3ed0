//! Feed-forward networks: specification, parameters, forward pass,
//! Jacobians and reference training.

mod batch;
mod forward;
mod jacobian;
mod loss;
pub(crate) mod model;
mod norm;
mod params;
mod spec;
mod train;

pub use batch::{argmax_rows, flatten_rows, unflatten_rows, Batch, SplitTag};
pub use forward::{forward, forward_at};
pub use jacobian::{
    jacobian_connectivity, jacobian_params, linearized_predict, JacobianMatrix, JacobianOperator,
    NetworkJacobian, Space, DENSE_JACOBIAN_LIMIT,
};
pub use loss::{
    loss_and_gradient, squared_loss, squared_loss_classification, squared_loss_classification_grad,
    squared_loss_grad,
};
pub use model::StatsMode;
pub use norm::{LayerStats, NormState, DEFAULT_EPSILON};
pub use params::{init_params, read_f64_le, write_f64_le, LayerBlocks, ParamIndex, ParamLayout, ParamVector, Role};
pub use spec::{Activation, InitScheme, NetworkSpec};
pub use train::{estimate_norm_stats, train_sgd, TrainConfig};
