use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{validate_window, ExperimentConfig, Mode, TauCMode};
use crate::coarse::{
    build_control_plan, build_generative_plan, build_uniform_plan, calibrate, BlockRole, CachePlan,
    Calibration,
};
use crate::error::{Error, Result};
use crate::fine::FineCacheConfig;
use crate::metrics::{
    drift, emit_csv, emit_plot_data, speedup, write_csv, MacLedger, RunReport, SweepPoint,
};
use crate::pipeline::{run_denoise, Denoised, Pipeline};

/// Plans and attention-cache settings resolved from a config.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub control_plan: CachePlan,
    pub gen_plan: CachePlan,
    pub fine: FineCacheConfig,
    pub tau_c: Option<usize>,
}

impl PreparedRun {
    /// Control and generative plans as one table.
    pub fn merged_plan(&self) -> Result<CachePlan> {
        self.control_plan.merge(&self.gen_plan)
    }
}

/// Resolves plans for `config`. `nocache` and `uniform(n)` never use the
/// attention cache; `hgc` uses it as configured.
pub fn prepare(config: &ExperimentConfig, pipeline: &Pipeline) -> Result<PreparedRun> {
    let pc = &config.pipeline;
    let mut run = match config.mode {
        Mode::NoCache => PreparedRun {
            control_plan: CachePlan::all_compute(pc.t_control, &BlockRole::CONTROL),
            gen_plan: CachePlan::all_compute(pc.t_generative, &BlockRole::GENERATIVE),
            fine: FineCacheConfig::disabled(),
            tau_c: None,
        },
        Mode::Uniform(n) => PreparedRun {
            control_plan: CachePlan::all_compute(pc.t_control, &BlockRole::CONTROL),
            gen_plan: build_uniform_plan(pc.t_generative, n)?.subset(&BlockRole::GENERATIVE),
            fine: FineCacheConfig::disabled(),
            tau_c: None,
        },
        Mode::Hgc => {
            let tau_c = match config.tau_c_mode {
                TauCMode::Calibrate => calibrate(pipeline, config.coarse.theta)?.tau_c,
                TauCMode::Fixed(v) => v,
            };
            PreparedRun {
                control_plan: build_control_plan(pc.t_control, tau_c, config.control_latter)?,
                gen_plan: build_generative_plan(pc.t_generative, &config.coarse),
                fine: config.fine.clone(),
                tau_c: Some(tau_c),
            }
        }
    };
    if let Some((start, end)) = config.condition_window {
        validate_window(start, end, pc.t_generative)?;
        run.control_plan
            .restrict_window(&BlockRole::CONTROL, start, end);
        run.control_plan.validate()?;
    }
    Ok(run)
}

/// All-compute run without the attention cache or a condition window.
pub fn run_baseline(pipeline: &Pipeline) -> Result<Denoised> {
    let pc = pipeline.config();
    run_denoise(
        pipeline,
        &CachePlan::all_compute(pc.t_control, &BlockRole::CONTROL),
        &CachePlan::all_compute(pc.t_generative, &BlockRole::GENERATIVE),
        &FineCacheConfig::disabled(),
        None,
    )
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub prepared: PreparedRun,
    pub denoised: Denoised,
}

fn execute_against(
    config: &ExperimentConfig,
    pipeline: &Pipeline,
    baseline: &Denoised,
) -> Result<RunOutcome> {
    let prepared = prepare(config, pipeline)?;
    let denoised = run_denoise(
        pipeline,
        &prepared.control_plan,
        &prepared.gen_plan,
        &prepared.fine,
        None,
    )?;
    let t = config.pipeline.t_generative;
    let ledger = MacLedger::from_counter(&denoised.ledger, t);
    let base = MacLedger::from_counter(&baseline.ledger, t);
    let report = RunReport {
        config: config.snapshot(),
        plan_digest: prepared.merged_plan()?.digest(),
        tau_c: prepared.tau_c,
        drift: drift(&baseline.trajectory, &denoised.trajectory)?,
        baseline_macs: base.total,
        speedup_macs: speedup(&base, &ledger)?,
        ledger,
    };
    Ok(RunOutcome {
        report,
        prepared,
        denoised,
    })
}

/// Runs `config` and its same-seed uncached reference without touching disk.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let pipeline = Pipeline::new(config.pipeline.clone())?;
    let baseline = run_baseline(&pipeline)?;
    execute_against(config, &pipeline, &baseline)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `run`: writes `ledger.csv`, `drift.csv`, `report.json` and `plan.txt`.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let outcome = execute(config)?;
    let dir = &config.output_dir;
    ensure_dir(dir)?;
    emit_csv(&outcome.report, dir)?;
    write_file(&dir.join("report.json"), &outcome.report.to_json()?)?;
    write_file(
        &dir.join("plan.txt"),
        &outcome.prepared.merged_plan()?.to_text(),
    )?;
    Ok(outcome)
}

/// `plan`: resolves and writes `plan.txt` without denoising.
pub fn cmd_plan(config: &ExperimentConfig) -> Result<PreparedRun> {
    config.validate()?;
    let pipeline = Pipeline::new(config.pipeline.clone())?;
    let prepared = prepare(config, &pipeline)?;
    ensure_dir(&config.output_dir)?;
    write_file(
        &config.output_dir.join("plan.txt"),
        &prepared.merged_plan()?.to_text(),
    )?;
    Ok(prepared)
}

/// `calibrate`: writes `similarity.csv` (`i,j,a_ij`) and `tau_c.json`.
pub fn cmd_calibrate(config: &ExperimentConfig) -> Result<Calibration> {
    config.validate()?;
    let pipeline = Pipeline::new(config.pipeline.clone())?;
    let cal = calibrate(&pipeline, config.coarse.theta)?;
    let dir = &config.output_dir;
    ensure_dir(dir)?;
    write_csv(
        &dir.join("similarity.csv"),
        &["i", "j", "a_ij"],
        cal.similarity
            .iter()
            .map(|(i, j, a)| [i.to_string(), j.to_string(), a.to_string()]),
    )?;
    let summary = serde_json::json!({
        "seed": config.pipeline.seed,
        "theta": config.coarse.theta,
        "tau_c": cal.tau_c,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("json value serializes");
    text.push('\n');
    write_file(&dir.join("tau_c.json"), &text)?;
    Ok(cal)
}

/// Parameters an ablation can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateParam {
    Theta,
    LambdaIntra,
    LambdaInter,
    NBase,
    GateStep,
}

impl AblateParam {
    pub fn as_str(self) -> &'static str {
        match self {
            AblateParam::Theta => "theta",
            AblateParam::LambdaIntra => "lambda_intra",
            AblateParam::LambdaInter => "lambda_inter",
            AblateParam::NBase => "n_base",
            AblateParam::GateStep => "gate_step",
        }
    }

    /// `config` with this parameter set to `value`. Sweeping `theta` forces
    /// calibration, since a fixed cached step ignores it.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        let integer = |path: &str| -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 || !value.is_finite() {
                return Err(Error::validation(
                    path,
                    format!("{value} is not a positive integer"),
                ));
            }
            Ok(value as usize)
        };
        match self {
            AblateParam::Theta => {
                c.coarse.theta = value;
                c.tau_c_mode = TauCMode::Calibrate;
            }
            AblateParam::LambdaIntra => c.coarse.lambda_intra = value,
            AblateParam::LambdaInter => c.coarse.lambda_inter = value,
            AblateParam::NBase => c.coarse.n_base = integer("coarse.n_base")?,
            AblateParam::GateStep => c.fine.gate_step = Some(integer("fine.gate_step")?),
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for AblateParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblateParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theta" => AblateParam::Theta,
            "lambda_intra" => AblateParam::LambdaIntra,
            "lambda_inter" => AblateParam::LambdaInter,
            "n_base" => AblateParam::NBase,
            "gate_step" => AblateParam::GateStep,
            other => {
                return Err(Error::validation(
                    "param",
                    format!("unknown parameter `{other}` (expected theta, lambda_intra, lambda_inter, n_base or gate_step)"),
                ))
            }
        })
    }
}

/// Sweep points in input order; nothing is written.
pub fn ablate(
    config: &ExperimentConfig,
    param: AblateParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::validation("values", "sweep has no points"));
    }
    config.validate()?;
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let pipeline = Pipeline::new(config.pipeline.clone())?;
    let baseline = run_baseline(&pipeline)?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, &value)| {
            let out = execute_against(c, &pipeline, &baseline)?;
            Ok(SweepPoint {
                param: param.as_str().to_string(),
                value,
                macs_total: out.report.ledger.total,
                final_l2_rel: out.report.drift.final_l2_rel,
                final_cosine: out.report.drift.final_cosine,
                speedup: out.report.speedup_macs,
            })
        })
        .collect()
}

/// `ablate`: writes `sweep.csv`.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    param: AblateParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let points = ablate(config, param, values)?;
    ensure_dir(&config.output_dir)?;
    emit_plot_data(&points, &config.output_dir.join("sweep.csv"))?;
    Ok(points)
}

/// Drift of an uncached run whose control is confined to `[start, end]`,
/// relative to control at every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPoint {
    pub start: usize,
    pub end: usize,
    pub macs_total: u64,
    pub final_l2_rel: f64,
    pub final_cosine: f64,
}

pub fn window_sweep(
    config: &ExperimentConfig,
    windows: &[(usize, usize)],
) -> Result<Vec<WindowPoint>> {
    if windows.is_empty() {
        return Err(Error::validation("windows", "window set is empty"));
    }
    config.validate()?;
    let t = config.pipeline.t_generative;
    for &(s, e) in windows {
        validate_window(s, e, t)?;
    }
    let pipeline = Pipeline::new(config.pipeline.clone())?;
    let baseline = run_baseline(&pipeline)?;
    windows
        .par_iter()
        .map(|&(start, end)| {
            let mut c = config.clone();
            c.mode = Mode::NoCache;
            c.condition_window = Some((start, end));
            let out = execute_against(&c, &pipeline, &baseline)?;
            Ok(WindowPoint {
                start,
                end,
                macs_total: out.report.ledger.total,
                final_l2_rel: out.report.drift.final_l2_rel,
                final_cosine: out.report.drift.final_cosine,
            })
        })
        .collect()
}

/// `window`: writes `window.csv`.
pub fn cmd_window(
    config: &ExperimentConfig,
    windows: &[(usize, usize)],
) -> Result<Vec<WindowPoint>> {
    let points = window_sweep(config, windows)?;
    ensure_dir(&config.output_dir)?;
    write_csv(
        &config.output_dir.join("window.csv"),
        &["start", "end", "macs_total", "final_l2_rel", "final_cosine"],
        points.iter().map(|p| {
            [
                p.start.to_string(),
                p.end.to_string(),
                p.macs_total.to_string(),
                p.final_l2_rel.to_string(),
                p.final_cosine.to_string(),
            ]
        }),
    )?;
    Ok(points)
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}

/// `compare`: delta table between two `report.json` files.
pub fn cmd_compare(a: &Path, b: &Path) -> Result<String> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    let rows: [(&str, f64, f64); 8] = [
        ("macs_total", ra.ledger.total as f64, rb.ledger.total as f64),
        (
            "macs_control",
            ra.ledger.control as f64,
            rb.ledger.control as f64,
        ),
        (
            "macs_generative",
            ra.ledger.generative as f64,
            rb.ledger.generative as f64,
        ),
        (
            "macs_former",
            ra.ledger.former as f64,
            rb.ledger.former as f64,
        ),
        (
            "macs_latter",
            ra.ledger.latter as f64,
            rb.ledger.latter as f64,
        ),
        ("speedup", ra.speedup_macs, rb.speedup_macs),
        ("final_l2_rel", ra.drift.final_l2_rel, rb.drift.final_l2_rel),
        ("final_cosine", ra.drift.final_cosine, rb.drift.final_cosine),
    ];
    let mut out = format!("{:<16} {:>16} {:>16} {:>16}\n", "metric", "a", "b", "b - a");
    for (name, va, vb) in rows {
        out.push_str(&format!(
            "{name:<16} {va:>16.6} {vb:>16.6} {:>16.6}\n",
            vb - va
        ));
    }
    let tau = |t: Option<usize>| t.map_or("-".to_string(), |v| v.to_string());
    out.push_str(&format!(
        "{:<16} {:>16} {:>16}\n",
        "tau_c",
        tau(ra.tau_c),
        tau(rb.tau_c)
    ));
    let same = if ra.plan_digest == rb.plan_digest {
        "same"
    } else {
        "different"
    };
    out.push_str(&format!("{:<16} {same:>16}\n", "plan"));
    Ok(out)
}
