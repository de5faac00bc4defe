//! Block-level cache: cached-step selection for the control module and
//! interval plans for the generative module.

mod plan;
mod schedule;
mod similarity;

pub use plan::{BlockRole, CachePlan, Decision};
pub use schedule::{
    build_control_plan, build_generative_plan, build_uniform_plan, effective_interval,
    CoarseCacheConfig, ControlLatter,
};
pub use similarity::{calibrate, control_similarity, select_tau_c, Calibration, SimilarityMatrix};
