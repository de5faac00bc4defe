//! Prompt-level cache: step-1 cross-attention reuse in the control module,
//! and gate-step fusion of prompt / null-prompt attention in the
//! generative module, after which the generator runs a single branch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coarse::BlockRole;
use crate::error::{Error, Result};
use crate::pipeline::Branch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineCacheConfig {
    pub enabled_control: bool,
    pub enabled_generative: bool,
    /// `None` resolves to half the generative horizon.
    #[serde(default)]
    pub gate_step: Option<usize>,
}

impl Default for FineCacheConfig {
    fn default() -> Self {
        Self {
            enabled_control: true,
            enabled_generative: true,
            gate_step: None,
        }
    }
}

impl FineCacheConfig {
    pub fn disabled() -> Self {
        Self {
            enabled_control: false,
            enabled_generative: false,
            gate_step: None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        !self.enabled_control && !self.enabled_generative
    }

    pub fn resolved_gate(&self, t_generative: usize) -> usize {
        self.gate_step.unwrap_or(t_generative / 2)
    }

    pub fn validate(&self, t_generative: usize) -> Result<()> {
        let gate = self.resolved_gate(t_generative);
        if gate < 1 || gate > t_generative {
            return Err(Error::validation(
                "fine.gate_step",
                format!("gate step {gate} outside [1, {t_generative}]"),
            ));
        }
        Ok(())
    }
}

/// Whether a generative step runs both guidance branches or one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Dual,
    Single,
}

impl BranchMode {
    pub fn branches(self) -> &'static [Branch] {
        match self {
            BranchMode::Dual => &[Branch::Prompt, Branch::Null],
            BranchMode::Single => &[Branch::Single],
        }
    }
}

pub fn branch_mode(step: usize, config: &FineCacheConfig, t_generative: usize) -> BranchMode {
    if config.enabled_generative && step > config.resolved_gate(t_generative) {
        BranchMode::Single
    } else {
        BranchMode::Dual
    }
}

/// Elementwise mean of the prompt and null-prompt attention maps.
pub fn gate_fuse(f_p: &Tensor, f_np: &Tensor) -> Result<Tensor> {
    f_p.add(f_np)?.scale(0.5)
}

/// Cross-attention maps held for one denoising run.
#[derive(Debug, Clone)]
pub struct AttnCache {
    config: FineCacheConfig,
    gate: usize,
    control: BTreeMap<BlockRole, Tensor>,
    // latest map computed at or before the gate, with its step
    pending: BTreeMap<(BlockRole, Branch), (usize, Tensor)>,
    fused: BTreeMap<BlockRole, Tensor>,
}

impl AttnCache {
    pub fn new(config: FineCacheConfig, t_generative: usize) -> Self {
        let gate = config.resolved_gate(t_generative);
        Self {
            config,
            gate,
            control: BTreeMap::new(),
            pending: BTreeMap::new(),
            fused: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &FineCacheConfig {
        &self.config
    }

    pub fn gate_step(&self) -> usize {
        self.gate
    }

    pub fn mode(&self, step: usize) -> BranchMode {
        if self.config.enabled_generative && step > self.gate {
            BranchMode::Single
        } else {
            BranchMode::Dual
        }
    }

    pub fn control_map(&self, site: BlockRole) -> Option<&Tensor> {
        self.control.get(&site)
    }

    pub fn fused(&self, site: BlockRole) -> Option<&Tensor> {
        self.fused.get(&site)
    }

    /// Control-module attention: computed at step 1, replayed afterwards.
    pub fn control_attn_hook(
        &mut self,
        site: BlockRole,
        step: usize,
        compute: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        if !self.config.enabled_control {
            return compute();
        }
        if step == 1 {
            let map = compute()?;
            self.control.insert(site, map.clone());
            return Ok(map);
        }
        self.control.get(&site).cloned().ok_or_else(|| {
            Error::CacheOrder(format!(
                "control attention for {site} requested at step {step} before step 1 was computed"
            ))
        })
    }

    /// Generative-module attention. Up to the gate both branches compute;
    /// at the gate their maps are fused; afterwards the fused map is
    /// returned without computing.
    pub fn generative_attn_hook(
        &mut self,
        site: BlockRole,
        step: usize,
        branch: Branch,
        compute: impl FnOnce() -> Result<Tensor>,
    ) -> Result<Tensor> {
        if !self.config.enabled_generative {
            return compute();
        }
        if step <= self.gate {
            let map = compute()?;
            self.pending.insert((site, branch), (step, map.clone()));
            if step == self.gate {
                self.try_fuse(site, Some(step))?;
            }
            return Ok(map);
        }
        if !self.fused.contains_key(&site) {
            // site was not computed at the gate: fuse its latest pre-gate pair
            self.try_fuse(site, None)?;
        }
        self.fused.get(&site).cloned().ok_or_else(|| {
            Error::CacheOrder(format!(
                "no fused attention for {site} at step {step} (gate {})",
                self.gate
            ))
        })
    }

    fn try_fuse(&mut self, site: BlockRole, at: Option<usize>) -> Result<()> {
        let prompt = self.pending.get(&(site, Branch::Prompt));
        let null = self.pending.get(&(site, Branch::Null));
        if let (Some((sp, fp)), Some((sn, fnp))) = (prompt, null) {
            if sp == sn && at.is_none_or(|s| s == *sp) {
                let fused = gate_fuse(fp, fnp)?;
                self.fused.insert(site, fused);
            }
        }
        Ok(())
    }
}
