//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the target exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use hgc::coarse::{
    build_generative_plan, calibrate, select_tau_c, BlockRole, CachePlan, CoarseCacheConfig,
    ControlLatter, SimilarityMatrix,
};
use hgc::experiment::{self, AblateParam, ExperimentConfig, Mode};
use hgc::fine::FineCacheConfig;
use hgc::metrics::MacLedger;
use hgc::pipeline::{run_denoise, Branch, Pipeline, PipelineConfig, RunTrace};
use hgc::tensor::Rng;

use common::{
    enumerate_control, enumerate_generative, expected_ledger, expected_total, scan_tau, Dims,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config(mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        ..ExperimentConfig::default()
    }
}

fn no_cache_identity() -> Check {
    let start = Instant::now();
    let out = experiment::execute(&config(Mode::NoCache)).map_err(e2s)?;
    let elapsed = start.elapsed();

    let pipeline = Pipeline::new(PipelineConfig::default()).map_err(e2s)?;
    let plans = (
        CachePlan::all_compute(20, &BlockRole::CONTROL),
        CachePlan::all_compute(20, &BlockRole::GENERATIVE),
    );
    let again = run_denoise(
        &pipeline,
        &plans.0,
        &plans.1,
        &FineCacheConfig::disabled(),
        None,
    )
    .map_err(e2s)?;
    for (a, b) in out.denoised.trajectory.iter().zip(&again.trajectory) {
        ensure(a.x.bit_eq(&b.x), || {
            format!("trajectories differ at step {}", a.step)
        })?;
    }
    let drift = &out.report.drift;
    ensure(
        drift
            .per_step
            .iter()
            .all(|d| d.l2_rel == 0.0 && d.cosine == 1.0),
        || "drift is not exactly zero".into(),
    )?;
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "bit-identical over 20 steps, drift 0, {:.0?}",
        elapsed
    ))
}

fn schedule_oracle() -> Check {
    let mut rng = Rng::new(0x5eed);
    let mut pick = |lo: u64, hi: u64| lo + rng.next_u64() % (hi - lo + 1);
    for case in 0..200 {
        let t = pick(4, 40) as usize;
        let n = pick(1, 8) as usize;
        let (ki, ke) = (pick(0, 5) as usize, pick(0, 5) as usize);
        let cfg = CoarseCacheConfig {
            n_base: n,
            lambda_intra: ki as f64 / 5.0,
            lambda_inter: ke as f64 / 5.0,
            ..CoarseCacheConfig::default()
        };
        let got = build_generative_plan(t, &cfg);
        let want = enumerate_generative(t, n, ki, ke);
        ensure(got == want, || {
            format!(
                "case {case}: T={t} N={n} λ_intra={ki}/5 λ_inter={ke}/5\n{}\nvs\n{}",
                got.grid(),
                want.grid()
            )
        })?;
    }
    Ok("200 random configurations match the enumerator".into())
}

fn tau_oracle() -> Check {
    let mut rng = Rng::new(77);
    for case in 0..100 {
        let half = 1 + (rng.next_u64() % 20) as usize;
        let floor = rng.next_uniform(-1.0, 1.0).map_err(e2s)?;
        let rows: Vec<Vec<f64>> = (1..=half)
            .map(|i| {
                (i + 1..=half)
                    .map(|_| rng.next_uniform(floor, 1.0).unwrap())
                    .collect()
            })
            .collect();
        let sim = SimilarityMatrix::from_rows(rows.clone()).map_err(e2s)?;
        for theta in [
            0.0,
            0.5,
            0.9,
            1.0,
            rng.next_uniform(floor, 1.0).map_err(e2s)?,
        ] {
            let (got, want) = (select_tau_c(&sim, theta), scan_tau(&rows, theta));
            ensure(got == want, || {
                format!("case {case} θ={theta}: {got} vs {want}")
            })?;
        }
    }
    let pipeline = Pipeline::new(PipelineConfig::default()).map_err(e2s)?;
    let mut picks = Vec::new();
    for theta in [0.0, 0.9, 1.0] {
        let cal = calibrate(&pipeline, theta).map_err(e2s)?;
        let rows: Vec<Vec<f64>> = (1..=10).map(|i| cal.similarity.row(i).to_vec()).collect();
        ensure(cal.tau_c == scan_tau(&rows, theta), || {
            format!("θ={theta} disagrees with scan")
        })?;
        picks.push(cal.tau_c);
    }
    ensure(picks[0] == 1 && picks[2] == 10, || {
        format!("endpoints {picks:?}")
    })?;
    Ok(format!(
        "100 random matrices match; pipeline θ∈{{0,0.9,1}} → τ={picks:?}"
    ))
}

fn hgc_oracle_total(cfg: &ExperimentConfig, tau: usize) -> (u64, u64) {
    let pc = &cfg.pipeline;
    let control = enumerate_control(pc.t_control, tau, cfg.control_latter);
    let generative = enumerate_generative(pc.t_generative, cfg.coarse.n_base, 2, 3);
    let cached = expected_total(pc, &control, &generative, &cfg.fine);
    let baseline = expected_total(
        pc,
        &CachePlan::all_compute(pc.t_control, &BlockRole::CONTROL),
        &CachePlan::all_compute(pc.t_generative, &BlockRole::GENERATIVE),
        &FineCacheConfig::disabled(),
    );
    (cached, baseline)
}

fn ledger_closed_form() -> Check {
    let cfg = ExperimentConfig::default();
    let dims = Dims::of(&cfg.pipeline);
    ensure(dims.block(BlockRole::GenMid) == 23552, || {
        "standard block is not 23552".into()
    })?;
    let out = experiment::execute(&cfg).map_err(e2s)?;
    let tau = out.report.tau_c.ok_or("no cached step reported")?;
    let pc = &cfg.pipeline;
    let want = expected_ledger(
        pc,
        &enumerate_control(pc.t_control, tau, ControlLatter::Skip),
        &enumerate_generative(pc.t_generative, 5, 2, 3),
        &cfg.fine,
    );
    let got = &out.report.ledger;
    ensure(got.entries.len() == want.len(), || {
        format!(
            "{} ledger entries, oracle has {}",
            got.entries.len(),
            want.len()
        )
    })?;
    for e in &got.entries {
        let w = want.get(&(e.step, e.role, e.branch)).copied();
        ensure(w == Some(e.macs), || {
            format!(
                "step {} {} {}: {} vs {:?}",
                e.step, e.role, e.branch, e.macs, w
            )
        })?;
    }
    let total: u64 = want.values().sum();
    ensure(got.total == total, || {
        format!("total {} vs {}", got.total, total)
    })?;
    Ok(format!(
        "total {total} MACs (τ^C={tau}) matches entry by entry"
    ))
}

fn ablation_orderings() -> Check {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let macs = |param, values: &[f64]| -> Result<Vec<u64>, String> {
        Ok(experiment::ablate(&base, param, values)
            .map_err(e2s)?
            .iter()
            .map(|p| p.macs_total)
            .collect())
    };
    let theta = macs(AblateParam::Theta, &[0.0, 0.9, 1.0])?;
    let intra = macs(AblateParam::LambdaIntra, &[0.0, 0.4, 1.0])?;
    let inter = macs(AblateParam::LambdaInter, &[0.0, 0.6, 1.0])?;
    let elapsed = start.elapsed();
    ensure(theta[0] < theta[1] && theta[1] <= theta[2], || {
        format!("theta {theta:?}")
    })?;
    ensure(intra[0] > intra[1] && intra[1] > intra[2], || {
        format!("lambda_intra {intra:?}")
    })?;
    ensure(inter[0] > inter[1] && inter[1] > inter[2], || {
        format!("lambda_inter {inter:?}")
    })?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "θ {theta:?}, λ_intra {intra:?}, λ_inter {inter:?} in {elapsed:.0?}"
    ))
}

fn batch_halving() -> Check {
    let pc = PipelineConfig::default();
    let pipeline = Pipeline::new(pc.clone()).map_err(e2s)?;
    let fine = FineCacheConfig {
        enabled_control: true,
        enabled_generative: true,
        gate_step: Some(10),
    };
    let control = CachePlan::all_compute(20, &BlockRole::CONTROL);
    let generative = CachePlan::all_compute(20, &BlockRole::GENERATIVE);
    let run = run_denoise(&pipeline, &control, &generative, &fine, None).map_err(e2s)?;
    let ledger = MacLedger::from_counter(&run.ledger, 20);

    let dims = Dims::of(&pc);
    let dual: u64 = BlockRole::GENERATIVE
        .iter()
        .map(|&r| 2 * dims.block(r))
        .sum();
    let single: u64 = BlockRole::GENERATIVE
        .iter()
        .map(|&r| dims.block(r) - dims.attention())
        .sum();
    ensure(single == dual / 2 - 3 * dims.attention(), || {
        "oracle inconsistent".into()
    })?;
    for step in 1..=20 {
        let got = ledger.step_total(step, &BlockRole::GENERATIVE);
        let want = if step <= 10 { dual } else { single };
        ensure(got == want, || format!("step {step}: {got} vs {want}"))?;
        if step > 10 {
            ensure(
                ledger
                    .entries
                    .iter()
                    .filter(|e| e.step == step && !e.role.is_control())
                    .all(|e| e.branch == Branch::Single),
                || format!("step {step} ran more than one branch"),
            )?;
        }
    }
    Ok(format!(
        "steps 1-10: {dual} MACs, steps 11-20: {single} MACs"
    ))
}

fn reuse_fidelity() -> Check {
    let (mut reuses, mut attn_reads) = (0usize, 0usize);
    for seed in 0..20u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.seed = seed;
        let pipeline = Pipeline::new(cfg.pipeline.clone()).map_err(e2s)?;
        let prepared = experiment::prepare(&cfg, &pipeline).map_err(e2s)?;
        let mut trace = RunTrace::default();
        run_denoise(
            &pipeline,
            &prepared.control_plan,
            &prepared.gen_plan,
            &prepared.fine,
            Some(&mut trace),
        )
        .map_err(e2s)?;
        for r in &trace.reused {
            let src = trace
                .stored
                .get(&(r.source, r.role, r.branch))
                .ok_or_else(|| format!("seed {seed}: no stored source for {r:?}"))?;
            ensure(r.tensor.bit_eq(src), || {
                format!("seed {seed}: reuse at step {} {} differs", r.step, r.role)
            })?;
            reuses += 1;
        }
        let gate = prepared.fine.resolved_gate(20);
        ensure(trace.fused.len() == 3, || {
            format!("seed {seed}: {} fused sites", trace.fused.len())
        })?;
        for a in &trace.attention {
            let reference = if a.role.is_control() {
                if a.step == 1 {
                    continue;
                }
                trace
                    .attention
                    .iter()
                    .find(|b| b.step == 1 && b.role == a.role)
                    .map(|b| &b.tensor)
            } else if a.step > gate {
                trace.fused.get(&a.role)
            } else {
                continue;
            };
            let reference =
                reference.ok_or_else(|| format!("seed {seed}: no stored map for {}", a.role))?;
            ensure(a.tensor.bit_eq(reference), || {
                format!(
                    "seed {seed}: attention read at step {} {} differs",
                    a.step, a.role
                )
            })?;
            attn_reads += 1;
        }
    }
    ensure(reuses > 0 && attn_reads > 0, || "nothing was reused".into())?;
    Ok(format!(
        "20 seeds, {reuses} block reuses and {attn_reads} attention reads bit-exact"
    ))
}

fn hgc_speedup() -> Check {
    let cfg = ExperimentConfig::default();
    let out = experiment::execute(&cfg).map_err(e2s)?;
    let r = &out.report;
    let tau = r.tau_c.ok_or("no cached step reported")?;
    let (cached, baseline) = hgc_oracle_total(&cfg, tau);
    // a/b == c/d as integers
    ensure(
        u128::from(r.baseline_macs) * u128::from(cached)
            == u128::from(baseline) * u128::from(r.ledger.total),
        || {
            format!(
                "{}/{} vs {baseline}/{cached}",
                r.baseline_macs, r.ledger.total
            )
        },
    )?;
    ensure(r.speedup_macs == baseline as f64 / cached as f64, || {
        "speedup float differs".into()
    })?;
    ensure(r.speedup_macs > 1.8, || {
        format!("speedup {}", r.speedup_macs)
    })?;
    Ok(format!(
        "{baseline}/{cached} = {:.4} (τ^C={tau})",
        r.speedup_macs
    ))
}

fn read_dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(e2s)?
        .map(|e| {
            let e = e.map_err(e2s)?;
            Ok((
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).map_err(e2s)?,
            ))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn determinism() -> Check {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(e2s)?;
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.seed = 3;
        let sub = |name: &str| {
            let mut c = cfg.clone();
            c.output_dir = dir.path().join(name);
            c
        };
        experiment::cmd_run(&sub("run")).map_err(e2s)?;
        experiment::cmd_run(&ExperimentConfig {
            mode: Mode::Uniform(5),
            ..sub("uniform")
        })
        .map_err(e2s)?;
        experiment::cmd_plan(&sub("plan")).map_err(e2s)?;
        experiment::cmd_calibrate(&sub("calibrate")).map_err(e2s)?;
        experiment::cmd_ablate(&sub("ablate"), AblateParam::LambdaInter, &[0.0, 0.6, 1.0])
            .map_err(e2s)?;
        experiment::cmd_window(&sub("window"), &[(1, 20), (1, 10), (11, 20)]).map_err(e2s)?;
        let mut all = Vec::new();
        for name in ["run", "uniform", "plan", "calibrate", "ablate", "window"] {
            all.push((name, read_dir_bytes(&dir.path().join(name))?));
        }
        outputs.push(all);
    }
    let files: usize = outputs[0].iter().map(|(_, f)| f.len()).sum();
    ensure(outputs[0] == outputs[1], || {
        "outputs differ between runs".into()
    })?;
    ensure(files >= 12, || format!("only {files} files written"))?;
    Ok(format!(
        "{files} files byte-identical across two runs of six commands"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("no-cache identity", no_cache_identity),
        ("schedule oracle", schedule_oracle),
        ("cached-step oracle", tau_oracle),
        ("ledger closed form", ledger_closed_form),
        ("ablation MAC orderings", ablation_orderings),
        ("batch halving", batch_halving),
        ("reuse fidelity", reuse_fidelity),
        ("speedup", hgc_speedup),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", i + 1),
            Err(why) => {
                println!("[FAIL] {}. {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
