//! Numerical core for computing KAM invariant tori of Gevrey and analytic
//! near-integrable Hamiltonians.
//!
//! The crate is `no_std` with `alloc`; every transcendental function goes
//! through [`libm`] so results do not depend on the platform math library.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod approx;
pub mod diophantine;
pub mod fourier;
pub mod gevrey;
pub mod kam;
pub mod math;
pub mod model;
pub mod normal_form;
pub mod whitney;
