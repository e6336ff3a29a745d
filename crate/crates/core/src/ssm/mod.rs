//! State-space sequence kernels.
//!
//! Continuous system `h' = A h + B x`, `y = C h + D x`, discretised with a
//! zero-order hold over timestep `Δ`:
//!
//! ```text
//! A_bar = exp(ΔA)
//! B_bar = (ΔA)^-1 (exp(ΔA) - I) ΔB
//! ```
//!
//! The discrete system runs either as a left-to-right recurrence
//! ([`scan_recurrent`]) or as a causal convolution with the kernel
//! `K[j] = C A_bar^j B_bar` ([`compute_kernel`], [`apply_conv`]). Both paths
//! add the `D x` skip term, so they agree exactly up to rounding.
//!
//! [`SsmBlock`] wraps the kernel into the sequence layer used by the
//! tri-plane fusion block.

mod blob;
mod block;
mod discretize;
mod params;
mod scan;

pub use blob::{BLOB_HEADER_LEN, SSM_MAGIC};
pub(crate) use blob::{ByteReader, ByteWriter};
pub use block::{BlockConfig, SsmBlock};
pub use discretize::{discretize, zoh_scalar, SERIES_THRESHOLD};
pub use params::{ConvKernel, DiscreteSsm, SsmParams, StateMatrix};
pub use scan::{apply_conv, compute_kernel, scan_input_jacobian, scan_recurrent};
