//! SCSE recalibration, the residual shared/specific fusion module and the
//! FPN segmentation decoder.

mod fpn;
mod fusion;
mod scse;

pub use fpn::FpnDecoder;
pub use fusion::FusionModule;
pub use scse::Scse;
