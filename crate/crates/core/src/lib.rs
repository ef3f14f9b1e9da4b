//! Electron ptychography toolkit: experiment geometry and sampling checks,
//! multislice forward simulation, loss functions with analytic gradients,
//! a conjugate-gradient reconstruction engine, scan generation and file I/O.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fields;
pub mod forward;
pub mod geometry;
pub mod grad;
pub mod io;
pub mod loss;
pub mod optimizer;
pub mod scan;

pub use error::{ErrorKind, Result, RopError};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/forward.md")]
    mod forward {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/scans.md")]
    mod scans {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
