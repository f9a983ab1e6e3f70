use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use d2dpo::ctmc::{generate, SamplerConfig};
use d2dpo::experiment::{
    metric_odd_ratio, metric_vsr, records_to_csv, run_finetune, run_pretrain, Phase, RunConfig,
    RunMetadata, RunOutcome,
};
use d2dpo::losses::DTerm;
use d2dpo::net::{DenoiserOutput, Mlp};
use d2dpo::oracle::{verify, VerifyMode, VerifyOptions};
use d2dpo::{ctmc, losses, Error};

#[derive(Parser)]
#[command(name = "d2dpo", version, about = "Masked discrete diffusion with preference fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a denoiser on the integer-encoding dataset.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint with the preference loss.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write generated sequences, one per line.
    Sample {
        #[command(flatten)]
        sampling: SampleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print odd ratio and VSR of generated sequences as JSON.
    Eval {
        #[command(flatten)]
        sampling: SampleArgs,
    },
    /// Run the verification suite and write a JSON report.
    Verify {
        #[arg(long, conflicts_with = "full")]
        quick: bool,
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negate the closed-form log-ratio term (mutation smoke test).
        #[arg(long, hide = true)]
        tamper_closed_form: bool,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Training { .. } | Error::NonFiniteGradient { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

/// Write every output into a staging directory, then move the files into
/// `out` only once all of them exist.
fn write_outputs(out: &Path, files: &[(&str, String)]) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let staging = out.join(".staging");
    let result = (|| {
        fs::create_dir_all(&staging)?;
        for (name, body) in files {
            fs::write(staging.join(name), body)?;
        }
        for (name, _) in files {
            fs::rename(staging.join(name), out.join(name))?;
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&staging);
    result
}

fn run_outputs(cfg: &RunConfig, phase: Phase, outcome: &RunOutcome) -> Vec<(&'static str, String)> {
    vec![
        ("checkpoint.json", outcome.model.to_checkpoint_json()),
        ("records.csv", records_to_csv(&outcome.records)),
        ("config.resolved.json", cfg.to_json()),
        ("run.json", RunMetadata::new(phase, cfg, outcome).to_json()),
    ]
}

fn sample_lines(args: &SampleArgs) -> Result<Vec<ctmc::Sequence>, Error> {
    let model = Mlp::load(&args.checkpoint)?;
    let cfg = SamplerConfig {
        num_steps: args.steps,
        eta: args.eta,
        rng_seed: args.seed,
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    generate(&model, &cfg, args.n)
}

fn negated_closed_form(
    alphabet: ctmc::Alphabet,
    theta: &DenoiserOutput,
    reference: &DenoiserOutput,
    xt: &ctmc::Sequence,
    x1: &ctmc::Sequence,
    t: f64,
    eta: f64,
) -> Result<DTerm, Error> {
    let mut d = losses::d_term_mask(alphabet, theta, reference, xt, x1, t, eta)?;
    d.value = -d.value;
    Ok(d)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = read_config(&config)?;
            let outcome = run_pretrain(&cfg)?;
            write_outputs(&out, &run_outputs(&cfg, Phase::Pretrain, &outcome))?;
        }
        Command::Finetune { config, checkpoint, out } => {
            let cfg = read_config(&config)?;
            let pretrained = Mlp::load(&checkpoint)?;
            let outcome = run_finetune(&pretrained, &cfg)?;
            write_outputs(&out, &run_outputs(&cfg, Phase::Finetune, &outcome))?;
        }
        Command::Sample { sampling, out } => {
            let samples = sample_lines(&sampling)?;
            let mut text = String::new();
            for x in &samples {
                text.extend(x.tokens().iter().map(|t| char::from_digit(*t as u32, 36).unwrap_or('?')));
                text.push('\n');
            }
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, text)?;
        }
        Command::Eval { sampling } => {
            let samples = sample_lines(&sampling)?;
            let report = serde_json::json!({
                "samples": samples.len(),
                "odd_ratio": metric_odd_ratio(&samples),
                "vsr": metric_vsr(&samples),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify { quick: _, full, out, tamper_closed_form } => {
            let mut opts = VerifyOptions::new(if full { VerifyMode::Full } else { VerifyMode::Quick });
            if tamper_closed_form {
                opts.closed_form = negated_closed_form;
            }
            let report = verify(&opts)?;
            let json = report.to_json();
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(path, &json)?;
                }
                None => println!("{json}"),
            }
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!("check failed: {} (metric {:e} > threshold {:e})", c.check_name, c.metric, c.threshold);
            }
            if !report.all_pass {
                return Ok(ExitCode::from(5));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("D2DPO_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
