//! Tabular policies, exact dual-KL objectives, the DAR trainer and the
//! comparison baselines on small enumerable alignment tasks.

pub mod baselines;
pub mod dar;
pub mod envs;
pub mod error;
pub mod numeric;
pub mod oracle;
pub mod policy;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
