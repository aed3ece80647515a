//! Deterministic numeric infrastructure: the seeded RNG every stage draws
//! from, a dense symmetric eigensolver for the spectral diagnostics, and the
//! finite-difference gradient oracle the objective tests are checked against.

pub mod eigen;
pub mod gradcheck;
pub mod rng;
