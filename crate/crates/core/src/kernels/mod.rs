//! Empirical tangent kernels, their spectra and traces.

mod gram;
mod lanczos;
mod trace;

pub use gram::{empirical_ctk, empirical_ntk, masked_kernel, KernelKind, KernelMatrix};
pub use lanczos::{
    dense_spectrum, lanczos_spectrum, EigenSpectrum, KernelOperator, SpectrumMethod, SymmetricOperator,
};
pub use trace::{
    connectivity_sharpness_exact, connectivity_sharpness_hutchinson, fisher_trace, hutchinson_trace, FisherLoss,
    TraceEstimate, DEFAULT_PROBES,
};
