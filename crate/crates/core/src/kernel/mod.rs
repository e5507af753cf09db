//! Dense NCHW tensors, a reverse-mode tape, and the primitives the search
//! space is built from.

mod gradcheck;
mod loss;
mod optim;
mod params;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_gradcheck;
pub use loss::{backprop_loss, softmax_cross_entropy};
pub use optim::{cosine_lr, sgd_cosine_step};
pub use params::{Init, ParamId, ParamRole, ParamSlot, ParamStore};
pub use primitive::{alloc_primitive, apply_primitive, BnParams, ConvStage, OpParams, PrimitiveKind};
pub use tape::{ConvSpec, Gradients, Mode, ReluMark, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Shape4, Tensor};
