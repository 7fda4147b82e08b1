//! Forward and hand-written backward passes for every network primitive.
//!
//! All tensors use the (B, D, H, W, C) layout from [`crate::tensor`].

mod activation;
mod conv;
mod dense;
mod groupnorm;
mod loss;
mod pool;

pub use activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub use conv::{conv3d_backward, conv3d_forward, ConvSpec};
pub use dense::{dense_backward, dense_forward, global_avg_pool, global_avg_pool_backward};
pub use groupnorm::{
    DEFAULT_EPSILON,
    default_groups, groupnorm_backward, groupnorm_forward, GroupNormCache, GroupNormSpec,
};
pub use loss::{bce_loss, BceOutput, PROB_CLAMP};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolCache, PoolSpec};

use crate::tensor::{Scalar, Tensor};

/// Gradients produced by one layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub params: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn take_param(&mut self, name: &str) -> Option<Tensor<T>> {
        let pos = self.params.iter().position(|(n, _)| *n == name)?;
        Some(self.params.swap_remove(pos).1)
    }
}

/// Split a 5-D activation shape into (batch, spatial voxels, channels).
pub(crate) fn bvc(dims: &[usize]) -> (usize, usize, usize) {
    (dims[0], dims[1] * dims[2] * dims[3], dims[4])
}

pub(crate) fn expect_rank<T: Scalar>(x: &Tensor<T>, rank: usize, what: &str) -> crate::Result<()> {
    if x.rank() != rank {
        return Err(crate::Error::shape(format!(
            "{what} expects a rank-{rank} tensor, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}
