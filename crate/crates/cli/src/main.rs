use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgc::experiment::{self, AblateParam, ExperimentConfig};
use hgc::Result;

#[derive(Parser)]
#[command(
    name = "hgc",
    version,
    about = "Hybrid-grained feature caching experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `coarse.theta=0.8`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pipeline seed (overrides `pipeline.seed`).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write ledger, drift, plan and report files.
    Run,
    /// Write the resolved cache plan and print it as a grid.
    Plan,
    /// Select the control module's cached step and dump its similarity matrix.
    Calibrate,
    /// Sweep one parameter with everything else fixed.
    Ablate {
        #[arg(long)]
        param: String,
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        values: Vec<f64>,
    },
    /// Restrict control injection to step windows, e.g. `--windows 1-10,11-20`.
    Window {
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_window)]
        windows: Vec<(usize, usize)>,
    },
    /// Print a delta table between two report.json files.
    Compare { a: PathBuf, b: PathBuf },
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| format!("window `{s}` must look like START-END"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("window `{s}`: {e}"))
    };
    Ok((parse(a)?, parse(b)?))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("pipeline.seed={seed}"));
    }
    let mut config = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Compare { a, b } = &cli.command {
        print!("{}", experiment::cmd_compare(a, b)?);
        return Ok(());
    }
    let config = load(&cli.common)?;
    let dir = config.output_dir.display().to_string();
    match cli.command {
        Command::Run => {
            let out = experiment::cmd_run(&config)?;
            let r = &out.report;
            if let Some(tau) = r.tau_c {
                println!("tau_c          {tau}");
            }
            println!("macs           {}", r.ledger.total);
            println!("baseline_macs  {}", r.baseline_macs);
            println!("speedup        {:.4}", r.speedup_macs);
            println!("final_l2_rel   {:.6e}", r.drift.final_l2_rel);
            println!("final_cosine   {:.9}", r.drift.final_cosine);
            println!("wrote {dir}/{{ledger.csv,drift.csv,report.json,plan.txt}}");
        }
        Command::Plan => {
            let prepared = experiment::cmd_plan(&config)?;
            if let Some(tau) = prepared.tau_c {
                println!("tau_c = {tau}");
            }
            print!("{}", prepared.merged_plan()?.grid());
            println!("wrote {dir}/plan.txt");
        }
        Command::Calibrate => {
            let cal = experiment::cmd_calibrate(&config)?;
            println!("tau_c = {}", cal.tau_c);
            println!("wrote {dir}/{{similarity.csv,tau_c.json}}");
        }
        Command::Ablate { param, values } => {
            let param: AblateParam = param.parse()?;
            let points = experiment::cmd_ablate(&config, param, &values)?;
            println!(
                "{:<14} {:>14} {:>10} {:>14} {:>14}",
                param.as_str(),
                "macs",
                "speedup",
                "final_l2_rel",
                "final_cosine"
            );
            for p in points {
                println!(
                    "{:<14} {:>14} {:>10.4} {:>14.6e} {:>14.9}",
                    p.value, p.macs_total, p.speedup, p.final_l2_rel, p.final_cosine
                );
            }
            println!("wrote {dir}/sweep.csv");
        }
        Command::Window { windows } => {
            let points = experiment::cmd_window(&config, &windows)?;
            println!(
                "{:<10} {:>14} {:>14} {:>14}",
                "window", "macs", "final_l2_rel", "final_cosine"
            );
            for p in points {
                let w = format!("{}-{}", p.start, p.end);
                println!(
                    "{w:<10} {:>14} {:>14.6e} {:>14.9}",
                    p.macs_total, p.final_l2_rel, p.final_cosine
                );
            }
            println!("wrote {dir}/window.csv");
        }
        Command::Compare { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
