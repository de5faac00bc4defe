//! Plan-driven denoising loop.

use std::collections::BTreeMap;

use super::{guided_prediction, Branch, ControlOutput, LatentState, Ledger, Pipeline};
use crate::coarse::{BlockRole, CachePlan, Decision};
use crate::error::{Error, Result};
use crate::fine::{AttnCache, BranchMode, FineCacheConfig};
use crate::tensor::Tensor;

/// A reused block output and the step it came from.
#[derive(Debug, Clone)]
pub struct ReuseRecord {
    pub step: usize,
    pub role: BlockRole,
    pub branch: Branch,
    pub source: usize,
    pub tensor: Tensor,
}

/// Attention tensor consumed by a computed block.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub step: usize,
    pub role: BlockRole,
    pub branch: Branch,
    pub tensor: Tensor,
}

/// Optional instrumentation of a run.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    /// Computed block outputs keyed by `(step, role, storage branch)`.
    pub stored: BTreeMap<(usize, BlockRole, Branch), Tensor>,
    pub reused: Vec<ReuseRecord>,
    pub attention: Vec<AttnRecord>,
    /// Fused generative attention, captured when first created.
    pub fused: BTreeMap<BlockRole, Tensor>,
    /// Control outputs injected at each step (`None` when skipped).
    pub control: Vec<Option<ControlOutput>>,
}

#[derive(Debug, Clone)]
pub struct Denoised {
    /// Latent after each step `1..=T`.
    pub trajectory: Vec<LatentState>,
    pub ledger: Ledger,
}

impl Denoised {
    pub fn final_state(&self) -> &LatentState {
        self.trajectory.last().expect("at least one step")
    }
}

/// Post-gate single-branch steps read and write the prompt branch slot.
fn storage_branch(branch: Branch) -> Branch {
    match branch {
        Branch::Single => Branch::Prompt,
        b => b,
    }
}

fn check_roles(plan: &CachePlan, roles: &[BlockRole], horizon: usize, which: &str) -> Result<()> {
    plan.validate()?;
    if plan.horizon() != horizon {
        return Err(Error::PlanIntegrity(format!(
            "{which} plan horizon {} does not match {horizon} steps",
            plan.horizon()
        )));
    }
    for &role in roles {
        if plan.get(1, role).is_none() {
            return Err(Error::PlanIntegrity(format!(
                "{which} plan has no entries for {role}"
            )));
        }
    }
    Ok(())
}

type Store = BTreeMap<(BlockRole, Branch, usize), Tensor>;

fn lookup(
    store: &Store,
    role: BlockRole,
    branch: Branch,
    step: usize,
    source: usize,
) -> Result<&Tensor> {
    store.get(&(role, branch, source)).ok_or_else(|| {
        Error::PlanIntegrity(format!(
            "step {step} role {role} ({branch}) reuses step {source}, which has no stored output"
        ))
    })
}

/// Executes `T^G` steps. Control roles follow `control_plan` (over `T^C`
/// steps) and generative roles follow `gen_plan`: `Compute` runs and
/// stores the block output, `Reuse(s)` substitutes the output stored at
/// step `s`, `Skip` injects no control.
pub fn run_denoise(
    pipeline: &Pipeline,
    control_plan: &CachePlan,
    gen_plan: &CachePlan,
    fine: &FineCacheConfig,
    mut trace: Option<&mut RunTrace>,
) -> Result<Denoised> {
    let cfg = pipeline.config();
    check_roles(control_plan, &BlockRole::CONTROL, cfg.t_control, "control")?;
    check_roles(
        gen_plan,
        &BlockRole::GENERATIVE,
        cfg.t_generative,
        "generative",
    )?;
    fine.validate(cfg.t_generative)?;

    let hooks_on = !fine.is_disabled();
    let mut cache = AttnCache::new(fine.clone(), cfg.t_generative);
    let mut ledger = Ledger::new();
    let mut ctrl_store: Store = BTreeMap::new();
    let mut gen_store: Store = BTreeMap::new();
    let mut state = pipeline.initial_state();
    let mut trajectory = Vec::with_capacity(cfg.t_generative);

    for step in 1..=cfg.t_generative {
        // control module
        let ctrl = if step <= cfg.t_control {
            let decisions =
                BlockRole::CONTROL.map(|r| control_plan.get(step, r).expect("validated"));
            if decisions[0] == Decision::Skip {
                None
            } else {
                let mut reused: [Option<&Tensor>; 2] = [None, None];
                for (idx, role) in BlockRole::CONTROL.into_iter().enumerate() {
                    if let Decision::Reuse(src) = decisions[idx] {
                        let t = lookup(&ctrl_store, role, Branch::Prompt, step, src)?;
                        if let Some(tr) = trace.as_deref_mut() {
                            tr.reused.push(ReuseRecord {
                                step,
                                role,
                                branch: Branch::Prompt,
                                source: src,
                                tensor: t.clone(),
                            });
                        }
                        reused[idx] = Some(t);
                    }
                }
                let x_cond = pipeline.control_input(&state.x)?;
                let hook = hooks_on.then_some(&mut cache);
                let (out, attn) =
                    pipeline.control_pass(&x_cond, step, &mut ledger, hook, reused)?;
                let computed = [
                    (BlockRole::CtrlEncoder, &out.enc),
                    (BlockRole::CtrlMid, &out.mid),
                ];
                for (idx, (role, tensor)) in computed.into_iter().enumerate() {
                    if decisions[idx] != Decision::Compute {
                        continue;
                    }
                    ctrl_store.insert((role, Branch::Prompt, step), tensor.clone());
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.stored
                            .insert((step, role, Branch::Prompt), tensor.clone());
                        if let Some(a) = &attn[idx] {
                            tr.attention.push(AttnRecord {
                                step,
                                role,
                                branch: Branch::Prompt,
                                tensor: a.clone(),
                            });
                        }
                    }
                }
                Some(out)
            }
        } else {
            None
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.control.push(ctrl.clone());
        }

        // generative module
        let mode = cache.mode(step);
        let decisions = BlockRole::GENERATIVE.map(|r| gen_plan.get(step, r).expect("validated"));
        let mut predictions = Vec::with_capacity(2);
        for &branch in mode.branches() {
            let slot = storage_branch(branch);
            let mut reused: [Option<&Tensor>; 3] = [None, None, None];
            for (idx, role) in BlockRole::GENERATIVE.into_iter().enumerate() {
                if let Decision::Reuse(src) = decisions[idx] {
                    let t = lookup(&gen_store, role, slot, step, src)?;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.reused.push(ReuseRecord {
                            step,
                            role,
                            branch: slot,
                            source: src,
                            tensor: t.clone(),
                        });
                    }
                    reused[idx] = Some(t);
                }
            }
            let hook = hooks_on.then_some(&mut cache);
            let pass = pipeline.generative_pass(
                &state.x,
                ctrl.as_ref(),
                step,
                branch,
                &mut ledger,
                hook,
                reused,
            )?;
            for (idx, role) in BlockRole::GENERATIVE.into_iter().enumerate() {
                if decisions[idx] != Decision::Compute {
                    continue;
                }
                gen_store.insert((role, slot, step), pass.outputs[idx].clone());
                if let Some(tr) = trace.as_deref_mut() {
                    tr.stored
                        .insert((step, role, slot), pass.outputs[idx].clone());
                    if let Some(a) = &pass.attn[idx] {
                        tr.attention.push(AttnRecord {
                            step,
                            role,
                            branch,
                            tensor: a.clone(),
                        });
                    }
                    if let Some(f) = cache.fused(role) {
                        tr.fused.entry(role).or_insert_with(|| f.clone());
                    }
                }
            }
            let [_, _, dec] = pass.outputs;
            predictions.push(dec);
        }
        let prediction = match mode {
            BranchMode::Dual => {
                guided_prediction(&predictions[0], &predictions[1], cfg.guidance_scale)?
            }
            BranchMode::Single => predictions.pop().expect("one branch"),
        };
        state = pipeline.apply_update(&state, &prediction)?;
        trajectory.push(state.clone());
    }

    Ok(Denoised { trajectory, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::{
        build_control_plan, build_generative_plan, CoarseCacheConfig, ControlLatter,
    };
    use crate::pipeline::PipelineConfig;

    fn pipeline() -> Pipeline {
        Pipeline::new(PipelineConfig::default()).unwrap()
    }

    fn full_plans() -> (CachePlan, CachePlan) {
        (
            CachePlan::all_compute(20, &BlockRole::CONTROL),
            CachePlan::all_compute(20, &BlockRole::GENERATIVE),
        )
    }

    #[test]
    fn all_compute_matches_step_loop() {
        let p = pipeline();
        let (cp, gp) = full_plans();
        let run = run_denoise(&p, &cp, &gp, &FineCacheConfig::disabled(), None).unwrap();
        let mut state = p.initial_state();
        let mut ledger = Ledger::new();
        for step in 1..=20 {
            let ctrl = p
                .control_step(&p.control_input(&state.x).unwrap(), step, &mut ledger)
                .unwrap();
            state = p
                .generative_step(&state, Some(&ctrl), &mut ledger, None)
                .unwrap();
            assert!(state.x.bit_eq(&run.trajectory[step - 1].x));
        }
        assert_eq!(ledger, run.ledger);
        assert_eq!(run.trajectory.len(), 20);
    }

    #[test]
    fn reuse_substitutes_source_step_output() {
        let p = pipeline();
        let (cp, mut gp) = full_plans();
        gp.set(4, BlockRole::GenEncoder, Decision::Reuse(3));
        let mut trace = RunTrace::default();
        run_denoise(&p, &cp, &gp, &FineCacheConfig::disabled(), Some(&mut trace)).unwrap();
        assert_eq!(trace.reused.len(), 2);
        for r in &trace.reused {
            assert_eq!((r.step, r.source, r.role), (4, 3, BlockRole::GenEncoder));
            assert!(r
                .tensor
                .bit_eq(&trace.stored[&(3, BlockRole::GenEncoder, r.branch)]));
        }
        assert!(!trace
            .stored
            .contains_key(&(4, BlockRole::GenEncoder, Branch::Prompt)));
    }

    #[test]
    fn rejects_broken_plans() {
        let p = pipeline();
        let (cp, mut gp) = full_plans();
        gp.set(5, BlockRole::GenMid, Decision::Reuse(7));
        let err = run_denoise(&p, &cp, &gp, &FineCacheConfig::disabled(), None).unwrap_err();
        assert!(matches!(err, Error::PlanIntegrity(_)));

        let short = CachePlan::all_compute(10, &BlockRole::GENERATIVE);
        assert!(run_denoise(&p, &cp, &short, &FineCacheConfig::disabled(), None).is_err());

        let ctrl_only = CachePlan::all_compute(20, &BlockRole::CONTROL);
        assert!(run_denoise(&p, &cp, &ctrl_only, &FineCacheConfig::disabled(), None).is_err());
    }

    #[test]
    fn hgc_plans_cost_less() {
        let p = pipeline();
        let (cp, gp) = full_plans();
        let base = run_denoise(&p, &cp, &gp, &FineCacheConfig::disabled(), None).unwrap();
        let cp = build_control_plan(20, 6, ControlLatter::Skip).unwrap();
        let gp = build_generative_plan(20, &CoarseCacheConfig::default());
        let mut trace = RunTrace::default();
        let run = run_denoise(&p, &cp, &gp, &FineCacheConfig::default(), Some(&mut trace)).unwrap();
        assert!(run.ledger.total() < base.ledger.total());
        assert_eq!(
            run.ledger.total(),
            run.ledger.entries().values().sum::<u64>()
        );
        assert!(trace.control[10..].iter().all(Option::is_none));
        assert_eq!(trace.fused.len(), 3);
    }
}
