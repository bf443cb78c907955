//! Numerical forward operators for the three experiment families, each with
//! parameter sensitivities (forward mode, few parameters) and closure-network
//! adjoints (reverse mode, many parameters).

pub mod burgers;
pub mod darcy;
pub mod mass_damper;
pub mod observe;

pub use burgers::{rk4_burgers_solve, BurgersSpec};
pub use darcy::{darcy_fixed_point, fem_assemble, DarcySpec};
pub use mass_damper::{leapfrog_solve, MassDamperSpec};
pub use observe::{observe, ObservationLayout};
