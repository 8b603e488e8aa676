use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mdmimo::exec::{self, ExecMode};
use mdmimo::experiment::{self, EmitFormat, ExperimentConfig, Manifest, Study};
use mdmimo::protocol::CsiSource;

/// Monte-Carlo simulator for mobile distributed MIMO.
#[derive(Debug, Parser)]
#[command(name = "mdmimo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Downlink capacity gain of the transmit virtual array over distance and RU count.
    Downlink(RunArgs),
    /// Uplink throughput of the receive virtual array over RU count and mobility.
    Uplink(RunArgs),
    /// Downlink bit rate over mobility and UE count.
    Mobility(RunArgs),
    /// One-step NMSE of the reservoir predictor against persistence.
    RcBench(RunArgs),
    /// Checks a config and prints its hash and sweep points.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Study whose preset the config is merged over.
        #[arg(long, default_value = "downlink", value_parser = parse_study)]
        study: Study,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config merged over the subcommand's preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when neither this nor `output` in the config is set.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<EmitFormat>,
    #[arg(long, value_parser = parse_csi)]
    csi: Option<CsiSource>,
    /// Per-node CFO level in Hz.
    #[arg(long)]
    cfo_hz: Option<f64>,
    /// CSI age of the subcommand's link direction.
    #[arg(long)]
    csi_age_s: Option<f64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Run trials on the calling thread.
    #[arg(long)]
    sequential: bool,
}

fn parse_study(s: &str) -> Result<Study, String> {
    match s {
        "downlink" => Ok(Study::Downlink),
        "uplink" => Ok(Study::Uplink),
        "mobility" => Ok(Study::Mobility),
        "rc-bench" => Ok(Study::RcBench),
        other => Err(format!("unknown study {other:?}")),
    }
}

fn parse_format(s: &str) -> Result<EmitFormat, String> {
    s.parse().map_err(|e: mdmimo::Error| e.to_string())
}

fn parse_csi(s: &str) -> Result<CsiSource, String> {
    s.parse().map_err(|e: mdmimo::Error| e.to_string())
}

fn load(study: Study, path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::from_path(study, p)?,
        None => ExperimentConfig::preset(study),
    })
}

fn configure(study: Study, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = load(study, args.config.as_ref())?;
    if let Some(t) = args.trials {
        c.trials = t;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(o) = &args.out {
        c.output = Some(o.clone());
    }
    if let Some(f) = args.format {
        c.format = f;
    }
    if let Some(csi) = args.csi {
        c.downlink.csi = csi;
    }
    if let Some(cfo) = args.cfo_hz {
        c.sync.cfo_hz = cfo;
    }
    if let Some(age) = args.csi_age_s {
        match study {
            Study::Uplink => c.uplink.csi_age_s = age,
            _ => c.downlink.csi_age_s = age,
        }
    }
    if args.sequential {
        c.exec = ExecMode::Sequential;
    }
    c.validate()?;
    Ok(c)
}

fn write_stdout(text: &str) -> Result<()> {
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .context("writing to stdout")
}

fn run(study: Study, args: &RunArgs) -> Result<()> {
    let config = configure(study, args)?;
    let manifest: Manifest = config.manifest(study)?;
    log::info!(
        "{study}: {} trials, config hash {}",
        config.trials,
        manifest.config_hash
    );
    exec::with_threads(args.threads, || -> Result<()> {
        if study == Study::RcBench {
            let rows = experiment::run_rc_bench(&config)?;
            return match &config.output {
                Some(p) => Ok(experiment::emit_rc_bench(&rows, config.format, p, &manifest)?),
                None => match config.format {
                    EmitFormat::Csv => write_stdout(&experiment::render_rc_bench_csv(&rows)?),
                    EmitFormat::Json => write_stdout(&experiment::render_json(&rows, &manifest)?),
                },
            };
        }
        let records = experiment::run_study(&config, study)?;
        match &config.output {
            Some(p) => experiment::emit_results(&records, config.format, p, &manifest)
                .with_context(|| format!("writing {}", p.display())),
            None => match config.format {
                EmitFormat::Csv => write_stdout(&experiment::render_csv(&records)?),
                EmitFormat::Json => write_stdout(&experiment::render_json(&records, &manifest)?),
            },
        }
    })
}

fn validate(study: Study, path: Option<&PathBuf>) -> Result<()> {
    let config = load(study, path)?;
    let manifest = config.manifest(study)?;
    let mut out = format!(
        "ok: {study}, {} trials, config hash {}\n",
        config.trials, manifest.config_hash
    );
    for p in config.points(study)? {
        out.push_str(&format!("  {}\n", p.label));
    }
    write_stdout(&out)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Downlink(a) => run(Study::Downlink, a),
        Command::Uplink(a) => run(Study::Uplink, a),
        Command::Mobility(a) => run(Study::Mobility, a),
        Command::RcBench(a) => run(Study::RcBench, a),
        Command::Validate { config, study } => validate(*study, config.as_ref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
