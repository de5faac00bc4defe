//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hgc::coarse::{BlockRole, CachePlan, ControlLatter, Decision};
use hgc::fine::FineCacheConfig;
use hgc::pipeline::{Branch, PipelineConfig};

/// `round_half_up(n * k / 5)` with integer arithmetic, floored at 1.
pub fn interval(n: usize, k_fifths: usize) -> usize {
    ((2 * n * k_fifths + 5) / 10).max(1)
}

fn decisions_from_compute_steps(t: usize, computed: &[usize]) -> Vec<Decision> {
    (1..=t)
        .map(|s| {
            if computed.contains(&s) {
                Decision::Compute
            } else {
                let src = computed
                    .iter()
                    .copied()
                    .filter(|&c| c < s)
                    .max()
                    .expect("step 1 computes");
                Decision::Reuse(src)
            }
        })
        .collect()
}

/// Generative plan from the phase rules, with `λ = k / 5`.
pub fn enumerate_generative(t: usize, n: usize, k_intra: usize, k_inter: usize) -> CachePlan {
    let half = t / 2;
    let n_intra = interval(n, k_intra);
    let n_inter = interval(n, k_inter);
    let mut plan = CachePlan::new(t);
    for role in BlockRole::GENERATIVE {
        let former_stride = if role == BlockRole::GenEncoder {
            n
        } else {
            n_intra
        };
        let mut computed = Vec::new();
        let mut s = 1;
        while s < half {
            computed.push(s);
            s += former_stride;
        }
        let mut s = half;
        while s <= t {
            computed.push(s);
            s += n_inter;
        }
        for (i, d) in decisions_from_compute_steps(t, &computed)
            .into_iter()
            .enumerate()
        {
            plan.set(i + 1, role, d);
        }
    }
    plan
}

pub fn enumerate_uniform(t: usize, n: usize, roles: &[BlockRole]) -> CachePlan {
    let computed: Vec<usize> = (1..=t).filter(|s| (s - 1) % n == 0).collect();
    let mut plan = CachePlan::new(t);
    for &role in roles {
        for (i, d) in decisions_from_compute_steps(t, &computed)
            .into_iter()
            .enumerate()
        {
            plan.set(i + 1, role, d);
        }
    }
    plan
}

pub fn enumerate_control(t: usize, tau: usize, latter: ControlLatter) -> CachePlan {
    let half = t / 2;
    let mut plan = CachePlan::new(t);
    for role in BlockRole::CONTROL {
        for s in 1..=t {
            let d = if s <= tau {
                Decision::Compute
            } else if s <= half || latter == ControlLatter::Reuse {
                Decision::Reuse(tau)
            } else {
                Decision::Skip
            };
            plan.set(s, role, d);
        }
    }
    plan
}

/// First `i` whose every later entry exceeds `theta`, scanning `a[i][j]`
/// for all `j > i`; the last row is vacuously accepted.
pub fn scan_tau(a: &[Vec<f64>], theta: f64) -> usize {
    let half = a.len();
    for (i, row) in a.iter().enumerate() {
        let mut ok = true;
        for v in row {
            if *v <= theta {
                ok = false;
            }
        }
        if ok {
            return i + 1;
        }
    }
    half
}

/// Per-block matmul counts at a given geometry.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub d: u64,
    pub l: u64,
    pub p: u64,
    pub dp: u64,
}

impl Dims {
    pub fn of(cfg: &PipelineConfig) -> Self {
        Dims {
            d: cfg.d_model as u64,
            l: cfg.latent_tokens as u64,
            p: cfg.prompt_tokens as u64,
            dp: cfg.d_prompt as u64,
        }
    }

    /// q, k, v projections, scores and weighted values.
    pub fn attention(&self) -> u64 {
        let Dims { d, l, p, dp } = *self;
        l * d * d + 2 * p * dp * d + 2 * l * p * d
    }

    /// Input projection plus the two MLP layers.
    pub fn dense(&self, role: BlockRole) -> u64 {
        let Dims { d, l, .. } = *self;
        let d_in = if role == BlockRole::GenDecoder {
            2 * d
        } else {
            d
        };
        l * d_in * d + 2 * l * d * 4 * d
    }

    pub fn block(&self, role: BlockRole) -> u64 {
        self.dense(role) + self.attention()
    }
}

/// Expected ledger keyed by `(step, role, branch)` for the given plans and
/// attention-cache settings.
pub fn expected_ledger(
    cfg: &PipelineConfig,
    control: &CachePlan,
    generative: &CachePlan,
    fine: &FineCacheConfig,
) -> BTreeMap<(usize, BlockRole, Branch), u64> {
    let dims = Dims::of(cfg);
    let gate = fine.gate_step.unwrap_or(cfg.t_generative / 2);
    let mut out = BTreeMap::new();
    for step in 1..=cfg.t_generative {
        if step <= cfg.t_control {
            for role in BlockRole::CONTROL {
                if control.get(step, role) == Some(Decision::Compute) {
                    let attn = if fine.enabled_control && step > 1 {
                        0
                    } else {
                        dims.attention()
                    };
                    out.insert((step, role, Branch::Prompt), dims.dense(role) + attn);
                }
            }
        }
        let single = fine.enabled_generative && step > gate;
        let branches: &[Branch] = if single {
            &[Branch::Single]
        } else {
            &[Branch::Prompt, Branch::Null]
        };
        for role in BlockRole::GENERATIVE {
            if generative.get(step, role) != Some(Decision::Compute) {
                continue;
            }
            for &b in branches {
                let attn = if single { 0 } else { dims.attention() };
                out.insert((step, role, b), dims.dense(role) + attn);
            }
        }
    }
    out
}

pub fn expected_total(
    cfg: &PipelineConfig,
    control: &CachePlan,
    generative: &CachePlan,
    fine: &FineCacheConfig,
) -> u64 {
    expected_ledger(cfg, control, generative, fine)
        .values()
        .sum()
}
