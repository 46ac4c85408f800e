//! Comparison algorithms on the same tasks, sampler and trace schema as DAR.

mod bon;
mod dao;
mod group;
mod ppo;

pub use bon::{bon_iter_sft_step, bon_select, iter_sft_train, iter_sft_train_observed, BonSelection, BonStep};
pub use dao::{
    dao_is_exact, dao_is_objective, dao_reinforce_exact_grad, dao_reinforce_grad, dao_train, dao_train_observed,
    DaoStyle,
};
pub use group::{grpo_advantage, group_pg_train, group_pg_train_observed, rloo_advantage, GroupEstimator, GRPO_STD_FLOOR};
pub use ppo::{
    dual_mix_shaped_rewards, dual_shaped_rewards, kl_penalty_and_grad, ppo_clip_surrogate, ppo_surrogate, ppo_train,
    ppo_train_observed, reference_kl_penalty_and_grad, shaped_token_rewards, PPOConfig, PpoVariant, ShapedReward,
    SurrogateStats, TokenSample,
};
