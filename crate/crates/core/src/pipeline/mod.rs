//! Miniature controllable denoising pipeline.
//!
//! A control module (encoder + mid block) reads the current latent plus a
//! fixed condition and produces features that are added into the
//! generative module's encoder and mid outputs. The generative module
//! (encoder, mid, decoder over the channel concatenation of the injected
//! encoder skip and mid output) runs under classifier-free guidance with a
//! prompt branch and an all-zero null-prompt branch.

mod block;
mod denoise;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use block::{cross_attention, run_block, run_block_with, BlockWeights};
pub use denoise::{run_denoise, AttnRecord, Denoised, ReuseRecord, RunTrace};

use crate::coarse::BlockRole;
use crate::error::{Error, Result};
use crate::fine::{AttnCache, BranchMode};
use crate::tensor::{MacCounter, Rng, Tensor};

/// Range for the condition image, prompt embedding and initial latent.
const INPUT_RANGE: (f64, f64) = (-1.0, 1.0);

/// Guidance branch a computation belongs to. `Single` is the one-pass
/// mode used once prompt and null-prompt attention have been fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Prompt,
    Null,
    Single,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Prompt => "prompt",
            Branch::Null => "null",
            Branch::Single => "single",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// MAC ledger key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteTag {
    pub step: usize,
    pub role: BlockRole,
    pub branch: Branch,
}

impl SiteTag {
    pub fn new(step: usize, role: BlockRole, branch: Branch) -> Self {
        Self { step, role, branch }
    }
}

pub type Ledger = MacCounter<SiteTag>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub t_control: usize,
    pub t_generative: usize,
    pub d_model: usize,
    pub latent_tokens: usize,
    pub prompt_tokens: usize,
    pub d_prompt: usize,
    pub guidance_scale: f64,
    /// `None` resolves to `1 / t_generative`.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_control: 20,
            t_generative: 20,
            d_model: 16,
            latent_tokens: 8,
            prompt_tokens: 4,
            d_prompt: 16,
            guidance_scale: 7.5,
            step_size: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn eta(&self) -> f64 {
        self.step_size.unwrap_or(1.0 / self.t_generative as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pipeline.t_control", self.t_control),
            ("pipeline.t_generative", self.t_generative),
            ("pipeline.d_model", self.d_model),
            ("pipeline.latent_tokens", self.latent_tokens),
            ("pipeline.prompt_tokens", self.prompt_tokens),
            ("pipeline.d_prompt", self.d_prompt),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::validation(path, "must be positive"));
            }
        }
        if self.t_control < 2 {
            return Err(Error::validation(
                "pipeline.t_control",
                "need at least 2 control steps",
            ));
        }
        if self.t_generative < 2 {
            return Err(Error::validation(
                "pipeline.t_generative",
                "need at least 2 generative steps",
            ));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::validation(
                "pipeline.guidance_scale",
                "must be finite and >= 0",
            ));
        }
        if let Some(eta) = self.step_size {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::validation(
                    "pipeline.step_size",
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    /// Number of completed steps.
    pub step: usize,
}

/// Control features for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub enc: Tensor,
    pub mid: Tensor,
    pub source_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage(pub Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub p: Tensor,
    pub p_null: Tensor,
}

impl PromptEmbedding {
    pub fn for_branch(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Null => &self.p_null,
            Branch::Prompt | Branch::Single => &self.p,
        }
    }
}

/// `ŷ_null + g·(ŷ_p − ŷ_null)`.
pub fn guided_prediction(
    pred_prompt: &Tensor,
    pred_null: &Tensor,
    guidance_scale: f64,
) -> Result<Tensor> {
    pred_null.add(&pred_prompt.sub(pred_null)?.scale(guidance_scale)?)
}

/// Block outputs of one generative branch pass, before control injection.
#[derive(Debug, Clone)]
pub(crate) struct BranchPass {
    pub outputs: [Tensor; 3],
    pub attn: [Option<Tensor>; 3],
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    blocks: Vec<BlockWeights>,
    condition: ConditionImage,
    prompt: PromptEmbedding,
    initial_latent: Tensor,
}

impl Pipeline {
    /// Draws all parameters from one SplitMix64 stream: the five blocks in
    /// role order, then condition, prompt and initial latent.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let d = config.d_model;
        let blocks = BlockRole::ALL
            .iter()
            .map(|&role| {
                let d_in = if role == BlockRole::GenDecoder {
                    2 * d
                } else {
                    d
                };
                BlockWeights::draw(&mut rng, d_in, d, config.d_prompt)
            })
            .collect::<Result<Vec<_>>>()?;
        let (lo, hi) = INPUT_RANGE;
        let condition = ConditionImage(Tensor::uniform(
            &[config.latent_tokens, d],
            &mut rng,
            lo,
            hi,
        )?);
        let p = Tensor::uniform(&[config.prompt_tokens, config.d_prompt], &mut rng, lo, hi)?;
        let prompt = PromptEmbedding {
            p_null: Tensor::zeros(p.shape()),
            p,
        };
        let initial_latent = Tensor::uniform(&[config.latent_tokens, d], &mut rng, lo, hi)?;
        Ok(Self {
            config,
            blocks,
            condition,
            prompt,
            initial_latent,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn weights(&self, role: BlockRole) -> &BlockWeights {
        &self.blocks[role as usize]
    }

    pub fn condition(&self) -> &ConditionImage {
        &self.condition
    }

    pub fn prompt(&self) -> &PromptEmbedding {
        &self.prompt
    }

    pub fn initial_state(&self) -> LatentState {
        LatentState {
            x: self.initial_latent.clone(),
            step: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(BlockWeights::param_count).sum()
    }

    /// Control input: current latent plus the condition image.
    pub fn control_input(&self, latent: &Tensor) -> Result<Tensor> {
        latent.add(&self.condition.0)
    }

    /// Uncached control features for step `step`.
    pub fn control_step(
        &self,
        x_cond: &Tensor,
        step: usize,
        counter: &mut Ledger,
    ) -> Result<ControlOutput> {
        let (out, _) = self.control_pass(x_cond, step, counter, None, [None, None])?;
        Ok(out)
    }

    /// Control pass with optional reused encoder/mid outputs and attention hooks.
    pub(crate) fn control_pass(
        &self,
        x_cond: &Tensor,
        step: usize,
        counter: &mut Ledger,
        mut cache: Option<&mut AttnCache>,
        reused: [Option<&Tensor>; 2],
    ) -> Result<(ControlOutput, [Option<Tensor>; 2])> {
        let p = &self.prompt.p;
        let mut attn: [Option<Tensor>; 2] = [None, None];
        let mut outs: Vec<Tensor> = Vec::with_capacity(2);
        for (idx, role) in BlockRole::CONTROL.into_iter().enumerate() {
            let input = if idx == 0 { x_cond } else { &outs[0] };
            let out = match reused[idx] {
                Some(t) => t.clone(),
                None => {
                    let tag = SiteTag::new(step, role, Branch::Prompt);
                    let w = self.weights(role);
                    let (out, a) = run_block_with(input, w, counter, tag, |h, c| {
                        match cache.as_deref_mut() {
                            Some(cache) => cache
                                .control_attn_hook(role, step, || cross_attention(h, p, w, c, tag)),
                            None => cross_attention(h, p, w, c, tag),
                        }
                    })?;
                    attn[idx] = Some(a);
                    out
                }
            };
            outs.push(out);
        }
        let mid = outs.pop().expect("two control outputs");
        let enc = outs.pop().expect("two control outputs");
        Ok((
            ControlOutput {
                enc,
                mid,
                source_step: step,
            },
            attn,
        ))
    }

    /// One generative branch: encoder, control-injected mid, decoder over
    /// `[enc + ctrl.enc ; mid + ctrl.mid]`. Reused roles skip computation.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn generative_pass(
        &self,
        x: &Tensor,
        ctrl: Option<&ControlOutput>,
        step: usize,
        branch: Branch,
        counter: &mut Ledger,
        mut cache: Option<&mut AttnCache>,
        reused: [Option<&Tensor>; 3],
    ) -> Result<BranchPass> {
        let prompt = self.prompt.for_branch(branch);
        let mut attn: [Option<Tensor>; 3] = [None, None, None];
        let mut outputs: Vec<Tensor> = Vec::with_capacity(3);
        let mut enc_injected: Option<Tensor> = None;
        let mut input = x.clone();
        for (idx, role) in BlockRole::GENERATIVE.into_iter().enumerate() {
            let out = match reused[idx] {
                Some(t) => t.clone(),
                None => {
                    let tag = SiteTag::new(step, role, branch);
                    let w = self.weights(role);
                    let (out, a) = run_block_with(&input, w, counter, tag, |h, c| {
                        match cache.as_deref_mut() {
                            Some(cache) => cache.generative_attn_hook(role, step, branch, || {
                                cross_attention(h, prompt, w, c, tag)
                            }),
                            None => cross_attention(h, prompt, w, c, tag),
                        }
                    })?;
                    attn[idx] = Some(a);
                    out
                }
            };
            match role {
                BlockRole::GenEncoder => {
                    let injected = match ctrl {
                        Some(c) => out.add(&c.enc)?,
                        None => out.clone(),
                    };
                    input = injected.clone();
                    enc_injected = Some(injected);
                }
                BlockRole::GenMid => {
                    let injected = match ctrl {
                        Some(c) => out.add(&c.mid)?,
                        None => out.clone(),
                    };
                    input = enc_injected
                        .as_ref()
                        .expect("encoder runs first")
                        .concat_last(&injected)?;
                }
                _ => {}
            }
            outputs.push(out);
        }
        let outputs: [Tensor; 3] = outputs.try_into().expect("three generative outputs");
        Ok(BranchPass { outputs, attn })
    }

    /// Advances `state` by one step with every block computed. `fine`
    /// supplies the prompt-level attention cache when present.
    pub fn generative_step(
        &self,
        state: &LatentState,
        ctrl: Option<&ControlOutput>,
        counter: &mut Ledger,
        mut fine: Option<&mut AttnCache>,
    ) -> Result<LatentState> {
        let step = state.step + 1;
        let mode = fine.as_ref().map_or(BranchMode::Dual, |c| c.mode(step));
        let prediction = match mode {
            BranchMode::Dual => {
                let pp = self.generative_pass(
                    &state.x,
                    ctrl,
                    step,
                    Branch::Prompt,
                    counter,
                    fine.as_deref_mut(),
                    [None; 3],
                )?;
                let pn = self.generative_pass(
                    &state.x,
                    ctrl,
                    step,
                    Branch::Null,
                    counter,
                    fine.as_deref_mut(),
                    [None; 3],
                )?;
                guided_prediction(&pp.outputs[2], &pn.outputs[2], self.config.guidance_scale)?
            }
            BranchMode::Single => {
                let ps = self.generative_pass(
                    &state.x,
                    ctrl,
                    step,
                    Branch::Single,
                    counter,
                    fine,
                    [None; 3],
                )?;
                let [_, _, dec] = ps.outputs;
                dec
            }
        };
        self.apply_update(state, &prediction)
    }

    /// `x ← x − η·ŷ`.
    pub fn apply_update(&self, state: &LatentState, prediction: &Tensor) -> Result<LatentState> {
        Ok(LatentState {
            x: state.x.sub(&prediction.scale(self.config.eta())?)?,
            step: state.step + 1,
        })
    }

    /// Control outputs of the first `steps` steps of an uncached run.
    pub fn uncached_control_outputs(&self, steps: usize) -> Result<Vec<ControlOutput>> {
        let mut counter = Ledger::new();
        let mut state = self.initial_state();
        let mut outputs = Vec::with_capacity(steps);
        for step in 1..=steps.min(self.config.t_generative) {
            let ctrl = if step <= self.config.t_control {
                Some(self.control_step(&self.control_input(&state.x)?, step, &mut counter)?)
            } else {
                None
            };
            state = self.generative_step(&state, ctrl.as_ref(), &mut counter, None)?;
            outputs.extend(ctrl);
        }
        Ok(outputs)
    }
}
