//! Synthetic benchmark: fixture robot, scenes, Monte-Carlo cross-validation and error metrics.

mod fixture;
mod mcv;
mod metrics;
mod scene;
mod select;

pub use fixture::{synthetic_arm, write_synthetic_arm};
pub use mcv::{
    draw_subsets, merge_reports, run_mcv, summary_json, write_summary_csv, write_trials_csv, ErrorReport, FitSizeSummary, InitStrategy,
    McvProtocol, McvSettings, Method, TrialDraw, TrialResult, QUANTILE_METHOD,
};
pub use metrics::{
    kinematic_chain_deviation, median, perturb_pose, quantile, tool_centre_deviation, tool_centre_reprojection,
};
pub use scene::{
    camera_inside_robot, default_rig, generate_scene, render_masks, visibility, CameraPlacement, ConfigSampler,
    SyntheticScene, MAX_ATTEMPTS, MIN_CONFIG_DISTANCE, MIN_VISIBILITY,
};
pub use select::select_diverse_configs;
