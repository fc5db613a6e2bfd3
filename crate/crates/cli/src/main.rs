use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vexkit::dedup::{dedup_manifest, DEFAULT_THRESHOLD};
use vexkit::embed::{load_embeddings, parse_scores, score_set, score_trials, scores_to_text, Protocol};
use vexkit::manifest::{load_manifest, manifest_stats, save_manifest};
use vexkit::metrics::{CostParams, MetricsReport};
use vexkit::rng::substream;
use vexkit::train::Stage;
use vexkit::trials::{gen_hard_trials, gen_random_trials, load_trial_list, save_trial_list, DEFAULT_MIN_GROUP};
use vexkit_cli::config::RunConfig;
use vexkit_cli::pipeline::{
    embed_stage, eval_manifest, examples, finetune, load_embedding_model, load_features, load_run_manifest,
    preprocess, pretrain, run_pipeline, FailureKind, PipelineOptions, PipelineOutcome, StageError,
};
use vexkit_cli::toy::{generate, ToyBenchSpec};

#[derive(Parser)]
#[command(name = "vexkit", version, about = "Speaker-verification embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic toy corpus (WAV files, manifest and a run config)
    Toygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 30)]
        utterances: usize,
        #[arg(long, default_value_t = 3)]
        videos: usize,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Compute the normalized spectrogram cache
    Preprocess(RunArgs),
    /// Softmax identification pre-training
    Pretrain(RunArgs),
    /// Contrastive fine-tuning with hard-negative mining
    Finetune(RunArgs),
    /// Embed the evaluation utterances with the fine-tuned model
    Embed(RunArgs),
    /// Score a trial list from an embeddings file
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// 1 = full utterance, 2 = crop mean, 3 = crop-pair mean
        #[arg(long, default_value = "3")]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and minimum detection cost of a score file
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
    },
    /// Generate a verification trial list from a manifest
    GenTrials {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_pairs: usize,
        #[arg(long, value_enum, default_value_t = Style::Random)]
        style: Style,
        #[arg(long, default_value_t = DEFAULT_MIN_GROUP)]
        min_group: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Drop near-duplicate utterances of each speaker
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        /// Embeddings file; the full-utterance vectors are compared
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Where to write the filtered manifest
        #[arg(long)]
        out: PathBuf,
        /// Cluster report (keeper then removed ids per line)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dataset statistics of a manifest
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run every stage, resuming from whatever the workdir already holds
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after `stage:epochs` (stage is pretrain or finetune)
        #[arg(long, value_parser = parse_halt)]
        halt_after: Option<(Stage, usize)>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for preprocessing and embedding (training is single-threaded)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Random,
    Hard,
}

fn parse_halt(s: &str) -> Result<(Stage, usize), String> {
    let (stage, n) = s.split_once(':').ok_or("expected stage:epochs")?;
    let stage = match stage {
        "pretrain" => Stage::Identification,
        "finetune" => Stage::Contrastive,
        other => return Err(format!("unknown stage `{other}`")),
    };
    Ok((stage, n.parse().map_err(|_| format!("bad epoch count `{n}`"))?))
}

fn cfg_err(e: impl std::fmt::Display) -> StageError {
    StageError::new("config", FailureKind::Config, e)
}

fn data_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> StageError {
    move |e| StageError::new(stage, FailureKind::Data, e)
}

fn load_config(path: &Path) -> Result<RunConfig, StageError> {
    let cfg = RunConfig::load(path).map_err(cfg_err)?;
    if !cfg.manifest.exists() {
        return Err(cfg_err(format!("manifest {} does not exist", cfg.manifest.display())));
    }
    std::fs::create_dir_all(&cfg.workdir).map_err(|e| data_err("config")(&e))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.cmd {
        Cmd::Toygen {
            out,
            seed,
            speakers,
            utterances,
            videos,
            duration,
            noise,
        } => {
            let spec = ToyBenchSpec {
                n_speakers: speakers,
                utterances_per_speaker: utterances,
                videos_per_speaker: videos,
                duration_s: duration,
                noise_level: noise,
                seed,
                ..ToyBenchSpec::default()
            };
            let manifest = generate(&spec, &out).map_err(|e| match e {
                vexkit_cli::toy::ToyError::Spec(_) => cfg_err(e),
                e => data_err("toygen")(&e),
            })?;
            let cfg = RunConfig::toy(seed, PathBuf::from("manifest.txt"), PathBuf::from("work"), speakers);
            std::fs::write(out.join("toy.conf"), cfg.to_text()).map_err(|e| data_err("toygen")(&e))?;
            println!("wrote {} and {}", manifest.display(), out.join("toy.conf").display());
        }
        Cmd::Preprocess(a) => {
            let cfg = load_config(&a.config)?;
            preprocess(&cfg, &load_run_manifest(&cfg)?, a.threads)?;
        }
        Cmd::Pretrain(a) => {
            let cfg = load_config(&a.config)?;
            let m = load_run_manifest(&cfg)?;
            let bank = load_features(&cfg, None)?;
            pretrain(&cfg, &m, &bank, &PipelineOptions::default())?;
        }
        Cmd::Finetune(a) => {
            let cfg = load_config(&a.config)?;
            let m = load_run_manifest(&cfg)?;
            let bank = load_features(&cfg, None)?;
            let opts = PipelineOptions::default();
            let pre = pretrain(&cfg, &m, &bank, &opts)?.ok_or_else(|| cfg_err("pretraining did not finish"))?;
            finetune(&cfg, &m, &bank, pre, &opts)?;
        }
        Cmd::Embed(a) => {
            let cfg = load_config(&a.config)?;
            let m = load_run_manifest(&cfg)?;
            examples(&cfg, &m)?;
            let model = load_embedding_model(&cfg)?;
            embed_stage(&cfg, &eval_manifest(&cfg, &m)?, &model, a.threads)?;
        }
        Cmd::Score {
            embeddings,
            trials,
            protocol,
            out,
        } => {
            let embs = load_embeddings(&embeddings).map_err(|e| data_err("score")(&e))?;
            let lookup: HashMap<&str, _> = embs.iter().map(|(k, v)| (k.as_str(), v)).collect();
            let list = load_trial_list(&trials).map_err(|e| data_err("score")(&e))?;
            let scores = score_trials(&list, |id| lookup.get(id).copied(), protocol).map_err(|e| data_err("score")(&e))?;
            std::fs::write(&out, scores_to_text(&scores)).map_err(|e| data_err("score")(&e))?;
        }
        Cmd::Evaluate {
            scores,
            p_target,
            c_miss,
            c_fa,
        } => {
            let text = std::fs::read_to_string(&scores).map_err(|e| data_err("evaluate")(&e))?;
            let parsed = parse_scores(&text).map_err(|e| data_err("evaluate")(&e))?;
            let set = score_set(&parsed).map_err(|e| data_err("evaluate")(&e))?;
            let cost = CostParams {
                p_target,
                c_miss,
                c_fa,
            };
            let label = scores.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let r = MetricsReport::compute(label, &set, cost).map_err(cfg_err)?;
            println!("{r}");
        }
        Cmd::GenTrials {
            manifest,
            out,
            n_pairs,
            style,
            min_group,
            seed,
        } => {
            let m = load_manifest(&manifest).map_err(|e| data_err("gen-trials")(&e))?;
            let rng = &mut substream(seed, "trials", style as u64);
            let list = match style {
                Style::Random => gen_random_trials(&m, n_pairs, seed, rng),
                Style::Hard => gen_hard_trials(&m, n_pairs, min_group, seed, rng),
            }
            .map_err(|e| data_err("gen-trials")(&e))?;
            save_trial_list(&list, &out).map_err(|e| data_err("gen-trials")(&e))?;
        }
        Cmd::Dedup {
            manifest,
            embeddings,
            threshold,
            out,
            report,
        } => {
            let m = load_manifest(&manifest).map_err(|e| data_err("dedup")(&e))?;
            let embs: HashMap<String, Vec<f64>> = load_embeddings(&embeddings)
                .map_err(|e| data_err("dedup")(&e))?
                .into_iter()
                .filter_map(|(id, e)| e.full.map(|v| (id, v)))
                .collect();
            let (kept, reports) = dedup_manifest(&m, &embs, threshold).map_err(|e| data_err("dedup")(&e))?;
            save_manifest(&kept, &out).map_err(|e| data_err("dedup")(&e))?;
            let text: String = reports.iter().map(|(_, r)| r.to_string()).collect();
            let removed: usize = reports.iter().map(|(_, r)| r.removed.len()).sum();
            if let Some(path) = report {
                std::fs::write(path, &text).map_err(|e| data_err("dedup")(&e))?;
            }
            println!("removed {removed} of {} utterances", m.utterances().len());
        }
        Cmd::Stats { manifest } => {
            let m = load_manifest(&manifest).map_err(|e| data_err("stats")(&e))?;
            println!("{}", manifest_stats(&m));
        }
        Cmd::Pipeline { run, halt_after } => {
            let cfg = load_config(&run.config)?;
            let opts = PipelineOptions {
                threads: run.threads,
                halt_after,
            };
            match run_pipeline(&cfg, &opts)? {
                PipelineOutcome::Halted => println!("halted; rerun to resume"),
                PipelineOutcome::Finished { report, .. } => print!("{report}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
