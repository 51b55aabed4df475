use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use reinforce_tts::config::TrainConfig;
use reinforce_tts::data::load_duration_targets;
use reinforce_tts::demo::{smoke_config, write_tone_corpus, SMOKE_TEXTS};
use reinforce_tts::evaluation::{aggregate, evaluate_entries, plot_alignment};
use reinforce_tts::signal::save_wav;
use reinforce_tts::trainer::{fit, prepare_with_vocabulary, Synthesizer};

/// Text-to-waveform synthesis with a reward-driven duration aligner.
///
/// Relative paths, including those inside the config file, are resolved
/// against `--workdir`.
#[derive(Debug, Parser)]
#[command(name = "reinforce-tts", version)]
struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Overrides the config seed when training. Inference is deterministic,
    /// so other commands accept it without effect.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory, checkpoint root or run directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize one sentence to a WAV file.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a corpus split: per-utterance CSV plus an aggregate JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// `id<TAB>d1 d2 ...` ground-truth frame counts.
        #[arg(long)]
        durations: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render the token-to-frame alignment of one sentence as a PNG.
    PlotAlign {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic tone corpus and a matching small-preset config.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: u64,
    },
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn write_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    // Absolute, so paths stored in checkpoints survive a change of cwd.
    let wd = std::path::absolute(&cli.workdir)
        .with_context(|| format!("resolving workdir {}", cli.workdir.display()))?;
    let wd = wd.as_path();
    let device = Device::Cpu;
    match cli.command {
        Command::Train { config, resume } => {
            let path = resolve(wd, &config);
            let mut cfg = TrainConfig::load(&path)?.rooted(wd);
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let resume = resume.map(|r| resolve(wd, &r));
            let out = fit(&cfg, resume.as_deref(), &device)?;
            println!("trained to step {}; checkpoint {}", out.steps, out.checkpoint.display());
        }
        Command::Synth { ckpt, text, out } => {
            let synth = Synthesizer::from_checkpoint(&resolve(wd, &ckpt), &device)?;
            let s = synth.synthesize(&text)?;
            let out = resolve(wd, &out);
            write_parent(&out)?;
            save_wav(&out, &s.waveform)?;
            println!("{} samples ({} frames) -> {}", s.waveform.len(), s.alignment.num_frames(), out.display());
        }
        Command::Eval {
            ckpt,
            split,
            durations,
            out_dir,
        } => {
            let synth = Synthesizer::from_checkpoint(&resolve(wd, &ckpt), &device)?;
            let data = prepare_with_vocabulary(&synth.config, synth.models.vocabulary.clone())?;
            let entries = match split {
                Split::Train => &data.splits.train,
                Split::Val => &data.splits.val,
                Split::Test => &data.splits.test,
            };
            if entries.is_empty() {
                bail!("the {split:?} split is empty");
            }
            let targets = load_duration_targets(resolve(wd, &durations))?;
            let rows = evaluate_entries(&synth, entries, &targets)?;
            let out_dir = resolve(wd, &out_dir);
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let csv_path = out_dir.join("metrics.csv");
            let mut w = csv::Writer::from_path(&csv_path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let summary = aggregate(&rows);
            let json_path = out_dir.join("summary.json");
            fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::PlotAlign { ckpt, text, out } => {
            let synth = Synthesizer::from_checkpoint(&resolve(wd, &ckpt), &device)?;
            let s = synth.synthesize(&text)?;
            let out = resolve(wd, &out);
            plot_alignment(&s.alignment, &out)?;
            println!(
                "{} tokens x {} frames, {:.1}% monotone -> {}",
                s.alignment.num_tokens(),
                s.alignment.num_frames(),
                100.0 * s.alignment.monotonic_fraction(),
                out.display()
            );
        }
        Command::Demo { out, steps } => {
            let out = resolve(wd, &out);
            let corpus = write_tone_corpus(&out.join("corpus"), &SMOKE_TEXTS, cli.seed.unwrap_or(3))?;
            let mut cfg = smoke_config(&corpus, &out.join("run"), steps, cli.seed.unwrap_or(1234));
            // Store paths the way a user would write them: relative to the workdir.
            for p in [&mut cfg.data.metadata, &mut cfg.data.wav_dir, &mut cfg.output.dir] {
                if let Ok(rel) = p.strip_prefix(wd) {
                    *p = rel.to_path_buf();
                }
            }
            let cfg_path = out.join("config.toml");
            fs::write(&cfg_path, cfg.to_toml()?)?;
            println!("corpus, durations and config written under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already quote their cause; print each new link once.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
