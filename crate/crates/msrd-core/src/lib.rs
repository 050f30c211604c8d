//! Core library for a two-species stochastic reaction-diffusion model on the
//! periodic unit interval, split into N sites.
//!
//! One species (C) is abundant and diffusive, rescaled by a density parameter
//! mu; the other (D) is discrete and immobile. Reactions are classified by
//! speed and by which species they touch. The crate provides:
//!
//! * [`model`]: network definitions, polynomial rates, correlation kernels,
//!   the smoothing cutoff, validation, and the network file format,
//! * [`grid`]: periodic step functions, projection, discrete gradients and
//!   Laplacian, the spectral basis, and the discrete heat semigroup,
//! * [`debit`]: drift fields and jump-amplitude fields entering the
//!   semimartingale decomposition of the site process,
//! * [`ssa`]: the exact event-by-event stochastic simulator,
//! * [`limit`]: the deterministic reaction-diffusion limit solver,
//! * [`lln`]: ensemble experiments measuring convergence of the stochastic
//!   process to the deterministic limit, and martingale diagnostics.

pub mod debit;
pub mod grid;
pub mod limit;
pub mod lln;
pub mod model;
pub mod ssa;
