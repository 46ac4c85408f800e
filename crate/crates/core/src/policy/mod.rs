//! Exact policies over enumerable response spaces.

mod dist;
mod prompts;
mod snapshot;
mod space;
mod tabular;

pub use dist::{interpolated_log_weights, interpolated_reference, kl_divergence, Distribution, InterpolatedReference};
pub(crate) use dist::{check_alpha, check_same_len};
pub use prompts::PromptSet;
pub use snapshot::PolicySnapshot;
pub use space::{enumerate_responses, response_count, ResponseSpace, SequenceMode, Token, DEFAULT_ENUMERATION_CAP};
pub use tabular::{Parametrization, PolicyEval, TabularPolicy};
