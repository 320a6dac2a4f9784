//! Closed-loop benchmark harness, generation-quality metrics, long-horizon
//! scaling study, and ablation arms.

mod ablate;
mod agent;
mod frechet;
mod metrics;
mod proxy;
mod study;

pub use ablate::{ablation_suite, Arm, ArmReport};
pub use agent::{ConstantThrottleAgent, ModelAgent, RandomWaypointAgent};
pub use frechet::{fit_gaussian, frechet_feature_distance, frechet_gaussian, GaussianFit};
pub use metrics::{
    aggregate_run, infraction_score, infraction_score_from_log, penalty, run_closed_loop,
    score_route, MetricsReport, RouteResult, RunAggregate,
};
pub use proxy::{train_and_save_proxy, ProxyNets};
pub use study::{
    generated_video, long_horizon_study, paired_bootstrap_fvd_gap, prepare_study_scenarios,
    GenQualityReport, HorizonFeatures, RolloutMode, StudyOutput, StudyScenario,
};
