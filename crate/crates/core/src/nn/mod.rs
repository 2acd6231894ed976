//! Parameter storage and the small layers shared by every unit.

mod batchnorm;
mod linear;
mod params;

pub use batchnorm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use linear::Linear;
pub use params::{uniform_fan_in, Bound, BufferId, Ctx, Mode, Param, ParamId, ParamStore};
