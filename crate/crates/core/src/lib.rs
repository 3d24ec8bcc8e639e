//! Numerical laboratory for intersection local times of independent
//! lattice random walks.
//!
//! - [`walk`]: step laws, path sampling, local-time fields
//! - [`intersection`]: `I_n`, `J_n`, profiles, smoothed intersections
//! - [`moments`]: exact moments by convolution and enumeration, block
//!   moment inequality checks
//! - [`ground_state`]: radial ground states, the Gagliardo–Nirenberg
//!   constant and the derived rate constants
//! - [`bounds`]: resolvent integrals and closed-form bounds
//! - [`lab`]: Monte Carlo experiments and emitters

pub mod bounds;
pub mod ground_state;
pub mod intersection;
pub mod lab;
pub mod moments;
pub mod quadrature;
pub mod walk;
