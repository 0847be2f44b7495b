//! Parameters, layers and differentiable ops shared by encoders and heads.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod ssm;

pub use attention::{SelfAttention, TransformerBlock};
pub use gradcheck::{check_gradients, GradCheck};
pub use layers::{BatchNorm1d, Conv1d, Ctx, LayerNorm, Linear, Mode};
pub use params::{Buffer, Init, Param, ParamGroup, ParamStore};
pub use ssm::{long_conv, S4dKernel, SsmBlock};
