//! Dense networks and the optimizer: MLP, spectral operator, Adam, and the
//! forward-mode scalar types they are generic over.

pub mod adam;
pub mod mlp;
pub mod real;
pub mod snapshot;
pub mod spectral;

pub use adam::AdamState;
pub use mlp::{Activation, MlpParams};
pub use real::{Dual, Dual2, Real};
pub use spectral::SpectralOperatorParams;
