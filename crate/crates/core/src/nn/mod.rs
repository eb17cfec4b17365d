//! Dense tensors and the fixed layer set with explicit backward passes.
//!
//! Convolutions use the cross-correlation convention (no kernel flip) with zero padding.

mod archive;
mod conv;
mod gradcheck;
mod init;
mod linear;
mod optim;
mod softmax;
mod tensor;

pub use archive::{
    decode_archive, decode_tensor, encode_archive, encode_tensor, read_archive, read_tensor,
    write_archive, write_tensor,
    NamedTensor, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use conv::{
    conv3d, conv3d_backward, conv_output_len, deconv3d, deconv3d_backward, deconv_output_len,
    Conv3dParams, ConvGrads,
};
pub use gradcheck::{finite_diff_check, relative_error};
pub use init::ParamInit;
pub use linear::{linear, linear_backward, LinearGrads};
pub use optim::{adamw_step, AdamW, MomentState, OptimizerConfig};
pub use softmax::{softmax, softmax_backward};
pub use tensor::{Real, Tensor};
