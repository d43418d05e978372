//! Desk-scale laboratory for diffusion-model inversion.
//!
//! A trained noise predictor is replaced by the exact posterior-mean noise of
//! a finite labeled dataset ([`oracle`]), which makes DDIM sampling, DDIM
//! inversion, null-text inversion and negative-prompt inversion computable
//! without any learned weights. The [`harness`] module drives seeded
//! experiments and writes CSV files.

pub mod dynamics;
pub mod editing;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod oracle;
pub mod schedule;

pub use dynamics::{Latent, Trajectory};
pub use error::{Error, Result};
pub use oracle::{Embedding, OracleDataset};
pub use schedule::{NoiseSchedule, SigmaSchedule, StepPlan};
