//! Plan builders for the control module (cached step plus latter-half
//! discard) and the generative module (two-phase interval schedule), and
//! the single-interval baseline.

use serde::{Deserialize, Serialize};

use super::plan::{BlockRole, CachePlan, Decision};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseCacheConfig {
    pub theta: f64,
    pub n_base: usize,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
}

impl Default for CoarseCacheConfig {
    fn default() -> Self {
        Self {
            theta: 0.9,
            n_base: 5,
            lambda_intra: 0.4,
            lambda_inter: 0.6,
        }
    }
}

impl CoarseCacheConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::validation("coarse.theta", "must lie in [0, 1]"));
        }
        if self.n_base == 0 {
            return Err(Error::validation("coarse.n_base", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda_intra) {
            return Err(Error::validation(
                "coarse.lambda_intra",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_inter) {
            return Err(Error::validation(
                "coarse.lambda_inter",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn n_intra(&self) -> usize {
        effective_interval(self.n_base, self.lambda_intra)
    }

    pub fn n_inter(&self) -> usize {
        effective_interval(self.n_base, self.lambda_inter)
    }
}

/// What the control module does after the first half of the steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlLatter {
    /// No control computation and no injection.
    #[default]
    Skip,
    /// Keep injecting the cached step's output.
    Reuse,
}

/// `round_half_up(n_base · lambda)`, at least 1. `lambda = 0` disables caching.
pub fn effective_interval(n_base: usize, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 1;
    }
    ((n_base as f64 * lambda + 0.5).floor() as usize).max(1)
}

/// Control plan: compute through `tau_c`, reuse it until the half-way
/// step, then skip (or keep reusing) for the rest of the horizon.
pub fn build_control_plan(
    t_control: usize,
    tau_c: usize,
    latter: ControlLatter,
) -> Result<CachePlan> {
    let half = t_control / 2;
    if tau_c < 1 || tau_c > half {
        return Err(Error::validation(
            "tau_c",
            format!("cached step {tau_c} outside [1, {half}]"),
        ));
    }
    let mut plan = CachePlan::new(t_control);
    for step in 1..=t_control {
        let d = if step <= tau_c {
            Decision::Compute
        } else if step <= half || latter == ControlLatter::Reuse {
            Decision::Reuse(tau_c)
        } else {
            Decision::Skip
        };
        for role in BlockRole::CONTROL {
            plan.set(step, role, d);
        }
    }
    Ok(plan)
}

/// Marks `role` as computing at `anchor, anchor + interval, ...` within
/// `[anchor, last]`, reusing the most recent compute in between.
fn fill_strided(
    plan: &mut CachePlan,
    role: BlockRole,
    anchor: usize,
    last: usize,
    interval: usize,
) {
    let mut latest = anchor;
    for step in anchor..=last {
        if (step - anchor).is_multiple_of(interval) {
            latest = step;
            plan.set(step, role, Decision::Compute);
        } else {
            plan.set(step, role, Decision::Reuse(latest));
        }
    }
}

/// Two-phase generative plan. The former phase `[1, half-1]` refreshes the
/// encoder every `N` steps and mid/decoder every `N_intra` steps; the
/// latter phase `[half, T]` re-anchors all three roles at `half` with
/// interval `N_inter`.
pub fn build_generative_plan(t_generative: usize, cfg: &CoarseCacheConfig) -> CachePlan {
    let half = t_generative / 2;
    let mut plan = CachePlan::new(t_generative);
    if half >= 2 {
        let former_end = half - 1;
        fill_strided(&mut plan, BlockRole::GenEncoder, 1, former_end, cfg.n_base);
        fill_strided(&mut plan, BlockRole::GenMid, 1, former_end, cfg.n_intra());
        fill_strided(
            &mut plan,
            BlockRole::GenDecoder,
            1,
            former_end,
            cfg.n_intra(),
        );
    }
    let latter_start = half.max(1);
    for role in BlockRole::GENERATIVE {
        fill_strided(&mut plan, role, latter_start, t_generative, cfg.n_inter());
    }
    plan
}

/// Single-interval baseline: every generative role refreshes every `n`
/// steps from step 1; control roles always compute.
pub fn build_uniform_plan(t: usize, n: usize) -> Result<CachePlan> {
    if n == 0 {
        return Err(Error::validation(
            "mode",
            "uniform interval must be at least 1",
        ));
    }
    let mut plan = CachePlan::all_compute(t, &BlockRole::CONTROL);
    for role in BlockRole::GENERATIVE {
        fill_strided(&mut plan, role, 1, t, n);
    }
    Ok(plan)
}
