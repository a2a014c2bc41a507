//! Forward/backward kernels. Every backward takes the forward's saved
//! values explicitly; there is no tape.

pub mod activation;
pub mod conv;
pub mod gemm;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu_backward, relu_forward, relu_inplace};
pub use conv::{conv2d_backward, conv2d_backward_opt, conv2d_forward, ConvGrads};
pub use gemm::gemm;
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{smooth_l1, smooth_l1_value, softmax, softmax_cross_entropy};
pub use pool::{maxpool2_backward, maxpool2_forward};
