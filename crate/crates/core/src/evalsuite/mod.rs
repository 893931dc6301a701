//! Metrics, rollouts and the ablation harness.

mod ablation;
mod metrics;
mod rollout;
mod stats;
mod strip;

pub use ablation::{
    run_ablation, summarize, AblationArm, AblationGrid, AblationReport, ArmRun, ArmSummary, ARM_FIELDS,
    ORDERING_ALPHA,
};
pub use metrics::{action_errors, psnr, ssim, ActionErrors, PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use rollout::{
    coarse_pairs, load_covar, load_refiner, refiner_gain, rollout_success, sha256_hex, CovarPolicy, EvalReport,
    ExpertPolicy, Generated, Policy, RefinerReport, ZeroPolicy,
};
pub use stats::{config_diff, rank_sum_greater, sign_test, u_statistic};
pub use strip::{frame_strip, save_strip, GEN_COLOR, GT_COLOR};
