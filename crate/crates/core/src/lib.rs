//! Electric-field tomography above a coplanar-waveguide chip from Rydberg
//! Stark spectroscopy: forward simulation of fields and spectra, and the
//! inversions back to stray-field vectors, surface charges, compensation
//! potentials and microwave amplitude maps.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod electrostatics;
pub mod grid;
pub mod lm;
pub mod microwave;
pub mod reconstruction;
pub mod seed;
pub mod spectroscopy;
pub mod stark;
