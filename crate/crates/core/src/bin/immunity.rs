use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use immunity::attacks::CounterAttackSpec;
use immunity::config::load_config;
use immunity::pipeline::{self, Context, Outcome, RunDir, VideoJob};
use immunity::{Error, Result};

#[derive(Parser)]
#[command(name = "immunity", version, about = "Image immunization against diffusion-based editing")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set alpha=6` or `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Use this directory as the run directory instead of a new
    /// timestamped one under `run.root`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural toy dataset and manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
    },
    /// Train the immunizer on the seen split.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Immunize every manifest image, or a single image.
    Immunize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "mask")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        mask: Option<PathBuf>,
        /// Re-read each output and check it equals the input outside the mask.
        #[arg(long)]
        self_check: bool,
    },
    /// Edit the unmasked region of one image.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score immunization methods on the manifest.
    Evaluate {
        /// immunizer, identity, random, pgd-encoder or pgd-full (repeatable).
        #[arg(long = "method", default_values_t = vec!["immunizer".to_string()])]
        methods: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a method after counter-attacks.
    Attack {
        #[arg(long, default_value = "immunizer")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `jpeg:<quality>` or `denoise:<id>` (repeatable); defaults to the
        /// configured JPEG quality and denoiser.
        #[arg(long = "counter")]
        counters: Vec<String>,
        /// Only the unattacked arm.
        #[arg(long, conflicts_with = "counters")]
        no_counter: bool,
    },
    /// Immunize a frame sequence, optionally editing and scoring it.
    Video {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        #[arg(long, default_value = "immunizer")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss-term ablation.
    Ablate,
    /// Train and score one model per alpha.
    SweepAlpha {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2.0, 4.0, 6.0])]
        values: Vec<f64>,
    },
    /// Train on one image with seen prompts and compare seen vs unseen.
    PromptAgnostic {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Text file with one prompt per line.
        #[arg(long)]
        seen: PathBuf,
        #[arg(long)]
        unseen: PathBuf,
    },
    /// Render bar summaries of JSONL reports as SVG.
    Plot {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Train { .. } => "train",
            Command::Immunize { .. } => "immunize",
            Command::Edit { .. } => "edit",
            Command::Evaluate { .. } => "evaluate",
            Command::Attack { .. } => "attack",
            Command::Video { .. } => "video",
            Command::Ablate => "ablate",
            Command::SweepAlpha { .. } => "sweep-alpha",
            Command::PromptAgnostic { .. } => "prompt-agnostic",
            Command::Plot { .. } => "plot",
        }
    }
}

fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::ArtifactMissing(path.display().to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::SynthData {
            out,
            count,
            size,
            seed,
            ratio,
        } => return pipeline::cmd_synth_data(out, *count, *size, *seed, *ratio),
        Command::Plot { reports, output } => return pipeline::cmd_plot(reports, output),
        _ => {}
    }
    // Inputs that can be rejected without side effects are checked before
    // the run directory exists.
    let video_job = match &cli.command {
        Command::Video {
            frames,
            masks,
            prompts,
            ..
        } => Some(VideoJob::load(frames, masks, prompts)?),
        _ => None,
    };
    let counters: Vec<CounterAttackSpec> = match &cli.command {
        Command::Attack {
            counters, no_counter, ..
        } => {
            if *no_counter {
                Vec::new()
            } else if counters.is_empty() {
                cfg.attack.counter_attacks()
            } else {
                counters.iter().map(|c| c.parse()).collect::<Result<_>>()?
            }
        }
        _ => Vec::new(),
    };
    let prompt_lists = match &cli.command {
        Command::PromptAgnostic { seen, unseen, .. } => Some((read_prompts(seen)?, read_prompts(unseen)?)),
        _ => None,
    };

    let run_dir = match &cli.run_dir {
        Some(p) => RunDir::at(p.clone())?,
        None => RunDir::create(&cfg.run.root, cli.command.verb())?,
    };
    run_dir.echo_config(&cfg, &std::env::args().collect::<Vec<_>>())?;
    log::info!("run directory: {}", run_dir.root.display());
    let ctx = Context::new(cfg, run_dir);

    match &cli.command {
        Command::Train { resume } => pipeline::cmd_train(&ctx, resume.as_deref()),
        Command::Immunize {
            checkpoint,
            image,
            mask,
            self_check,
        } => {
            let single = image.as_deref().zip(mask.as_deref());
            pipeline::cmd_immunize(&ctx, checkpoint, single, *self_check)
        }
        Command::Edit {
            image,
            mask,
            prompt,
            output,
        } => pipeline::cmd_edit(&ctx, image, mask, prompt, output.as_deref()),
        Command::Evaluate { methods, checkpoint } => pipeline::cmd_evaluate(&ctx, methods, checkpoint.as_deref()),
        Command::Attack { method, checkpoint, .. } => {
            pipeline::cmd_attack(&ctx, method, checkpoint.as_deref(), &counters)
        }
        Command::Video { method, checkpoint, .. } => pipeline::cmd_video(
            &ctx,
            video_job.as_ref().expect("loaded above"),
            method,
            checkpoint.as_deref(),
        ),
        Command::Ablate => pipeline::cmd_ablate(&ctx),
        Command::SweepAlpha { values } => pipeline::cmd_sweep_alpha(&ctx, values),
        Command::PromptAgnostic { image, mask, .. } => {
            let (seen, unseen) = prompt_lists.expect("loaded above");
            pipeline::cmd_prompt_agnostic(&ctx, image, mask, &seen, &unseen)
        }
        Command::SynthData { .. } | Command::Plot { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            println!("{}", out.summary.trim_end());
            for p in &out.written {
                log::info!("wrote {}", p.display());
            }
            if out.failures > 0 {
                log::error!("{} item(s) failed", out.failures);
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
