//! Command-line driver: fixture generation, corpus preprocessing, training,
//! synthesis, and pause analysis, all off one TOML config.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kotts::audio::{
    detect_pauses, energy_percentile, griffin_lim_invert, load_wav, low_energy_frames,
    mel_spectrogram, pause_statistics, read_mel_file, save_wav, write_mel_file, MelSpectrogram,
    PauseSegment, PauseStats, CORPUS_SAMPLE_RATE, DEFAULT_ITERATIONS,
};
use kotts::fixtures::write_fixture_corpus;
use kotts::pipeline::{config_hash, feature_hash, hash_hex, mark_text, PipelineConfig};
use kotts::text::{decompose_hangul, SymbolTable};
use kotts::train::{
    attach_parses, checkpoint_file_name, latest_checkpoint, load_cached_corpus, load_metadata,
    load_parse_sidecar, preprocess_corpus, split_dataset, Checkpoint, Trainer,
};

#[derive(Parser)]
#[command(name = "kotts", version, about = "Korean text-to-speech reference pipeline")]
struct Cli {
    /// TOML config file. When omitted, ./kotts.toml is used if present,
    /// otherwise built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file (or the checkpoint, for synth).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic fixture corpus plus a ready-to-train config.
    MakeFixture(MakeFixtureArgs),
    /// Run the text and audio front end over a corpus into a feature cache.
    Preprocess(PreprocessArgs),
    /// Train from a feature cache, logging one JSON line per step.
    Train(TrainArgs),
    /// Synthesize mel, waveform, alignment, and gate traces from a checkpoint.
    Synth(SynthArgs),
    /// Detect pauses in wav or mel files; write per-file and corpus reports.
    AnalyzePauses(AnalyzeArgs),
}

#[derive(Args)]
struct MakeFixtureArgs {
    /// Corpus root to create.
    #[arg(long, default_value = "fixture-corpus")]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// `wav_path|transcript` lines; wav paths are relative to this file.
    #[arg(long)]
    metadata: PathBuf,
    /// Optional sidecar of bracketed parses, line-aligned with the metadata.
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Feature cache directory.
    #[arg(long, default_value = "cache")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Metadata file the cache was built from.
    #[arg(long)]
    metadata: PathBuf,
    /// Parse sidecar the cache was built with, if any.
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Feature cache directory produced by `preprocess`.
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
    /// Run directory for checkpoints and logs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Stop after this many total iterations (overrides the config).
    #[arg(long)]
    max_iters: Option<u64>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Checkpoint to synthesize from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text to speak.
    #[arg(long)]
    text: String,
    /// Bracketed constituency parse of the text. Without it, synthesis runs
    /// in degraded mode with no boundary markup.
    #[arg(long)]
    parse: Option<String>,
    /// Stem for the output files.
    #[arg(long, default_value = "synth")]
    name: String,
    /// Output directory.
    #[arg(long, default_value = "synth-out")]
    out: PathBuf,
    /// Griffin-Lim phase-reconstruction iterations.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    griffin_lim_iters: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Wav files, or mel feature files produced by this tool (.mel).
    inputs: Vec<PathBuf>,
    /// Report directory.
    #[arg(long, default_value = "pause-report")]
    out: PathBuf,
    /// Energy percentile that sets the silence threshold per file.
    #[arg(long, default_value_t = 20.0)]
    percentile: f64,
    /// Minimum run length, in frames, for a silence to count as a pause.
    #[arg(long, default_value_t = 3)]
    min_frames: usize,
}

/// One JSON record per invocation describing what ran and what it produced.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    config_hash: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_time_seconds: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let started = Instant::now();
    match &cli.command {
        Command::MakeFixture(args) => make_fixture(&cli, args, started),
        Command::Preprocess(args) => preprocess(&cli, args, started),
        Command::Train(args) => train(&cli, args, started),
        Command::Synth(args) => synth(&cli, args, started),
        Command::AnalyzePauses(args) => analyze_pauses(&cli, args, started),
    }
}

/// Loads the pipeline config per the `--config` rule and applies the global
/// seed override.
fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => {
            let fallback = Path::new("kotts.toml");
            if fallback.exists() {
                let text = fs::read_to_string(fallback).context("reading ./kotts.toml")?;
                toml::from_str(&text).context("parsing ./kotts.toml")?
            } else {
                PipelineConfig::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().context("config validation")?;
    Ok(cfg)
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg_hash: &[u8; 32],
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash_hex(cfg_hash),
        seed,
        inputs,
        outputs,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn make_fixture(cli: &Cli, args: &MakeFixtureArgs, started: Instant) -> Result<()> {
    let mut cfg = PipelineConfig::compact();
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let report = write_fixture_corpus(&args.out, cfg.train.seed)?;
    let config_path = args.out.join("kotts.toml");
    fs::write(&config_path, toml::to_string_pretty(&cfg).expect("config serializes"))
        .with_context(|| format!("writing {}", config_path.display()))?;
    log::info!(
        "fixture corpus: {} utterances, {:.1}s of audio, config {}",
        report.wav_files.len(),
        report.total_seconds,
        config_path.display()
    );
    let mut outputs: Vec<String> =
        report.wav_files.iter().map(|p| p.display().to_string()).collect();
    outputs.extend([
        report.metadata_path.display().to_string(),
        report.parses_path.display().to_string(),
        config_path.display().to_string(),
    ]);
    write_manifest(
        &args.out,
        "make-fixture",
        &config_hash(&cfg),
        cfg.train.seed,
        Vec::new(),
        outputs,
        started,
    )
}

/// Loads metadata and attaches the sidecar parses when given.
fn load_records(
    metadata: &Path,
    parses: Option<&Path>,
) -> Result<Vec<kotts::train::UtteranceRecord>> {
    let (mut records, report) = load_metadata(metadata)?;
    for (line, reason) in &report.skipped {
        log::warn!("{} line {line}: {reason}", metadata.display());
    }
    if let Some(parse_path) = parses {
        let sidecar = load_parse_sidecar(parse_path)?;
        let missing = attach_parses(&mut records, &sidecar);
        if missing > 0 {
            log::warn!("{missing} utterances have no parse; they get no boundary markup");
        }
    } else {
        log::warn!("no parse sidecar given; all utterances run without boundary markup");
    }
    Ok(records)
}

fn preprocess(cli: &Cli, args: &PreprocessArgs, started: Instant) -> Result<()> {
    let cfg = load_config(cli)?;
    let table = SymbolTable::standard();
    let records = load_records(&args.metadata, args.parses.as_deref())?;
    let fhash = feature_hash(&cfg.mel, &table);
    let (prepared, report) = preprocess_corpus(&records, &table, &cfg.mel, &args.out, &fhash)?;
    log::info!(
        "prepared {} utterances ({} from cache), mean clip {:.2}s, {} characters stripped, {} without parses",
        report.utterances,
        report.cache_hits,
        report.mean_clip_seconds,
        report.stripped_characters,
        report.missing_parses,
    );
    let outputs = prepared
        .iter()
        .flat_map(|p| {
            [format!("{}.mel", p.stem), format!("{}.features.json", p.stem)]
        })
        .collect();
    write_manifest(
        &args.out,
        "preprocess",
        &config_hash(&cfg),
        cfg.train.seed,
        vec![args.metadata.display().to_string()],
        outputs,
        started,
    )
}

fn train(cli: &Cli, args: &TrainArgs, started: Instant) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = args.max_iters {
        cfg.train.max_iterations = n;
    }
    let table = SymbolTable::standard();
    let records = load_records(&args.metadata, args.parses.as_deref())?;
    let fhash = feature_hash(&cfg.mel, &table);
    let items = load_cached_corpus(&records, &args.cache, &fhash)
        .context("feature cache does not match this corpus and config; rerun preprocess")?;
    let (train_items, valid_items) =
        split_dataset(items, cfg.train.valid_fraction, cfg.train.seed)?;
    log::info!("{} training / {} validation utterances", train_items.len(), valid_items.len());

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut trainer = if args.resume {
        let Some(path) = latest_checkpoint(&args.out) else {
            bail!("--resume given but no checkpoint found in {}", args.out.display());
        };
        let ckpt = Checkpoint::load(&path)?;
        let mut stored = PipelineConfig {
            mel: ckpt.mel.clone(),
            model: ckpt.model.clone(),
            train: ckpt.train.clone(),
        };
        // The iteration cap is the one knob allowed to move across a resume.
        stored.train.max_iterations = cfg.train.max_iterations;
        if stored != cfg {
            bail!(
                "checkpoint {} was trained under config {}, current is {}; pass the original config",
                path.display(),
                hash_hex(&config_hash(&stored)),
                hash_hex(&config_hash(&cfg)),
            );
        }
        log::info!("resuming from {} at iteration {}", path.display(), ckpt.iteration);
        ckpt.resume(train_items, &table)?
    } else {
        let (model, ps) = kotts::model::Model::new(&cfg.model, table.len(), cfg.train.seed)?;
        Trainer::new(model, ps, train_items, cfg.train.clone())?
    };

    let log_path = args.out.join("train_log.jsonl");
    let valid_path = args.out.join("valid_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .truncate(!args.resume)
        .write(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut valid_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .truncate(!args.resume)
        .write(true)
        .open(&valid_path)
        .with_context(|| format!("opening {}", valid_path.display()))?;

    let interval = cfg.train.checkpoint_interval;
    let mut outputs = vec![log_path.display().to_string(), valid_path.display().to_string()];
    while trainer.iteration < cfg.train.max_iterations {
        let step = trainer.step()?;
        serde_json::to_writer(&mut log_file, &step).expect("step log serializes");
        log_file.write_all(b"\n")?;
        let at_interval = trainer.iteration % interval == 0;
        let done = trainer.iteration >= cfg.train.max_iterations;
        if at_interval || done {
            if !valid_items.is_empty() {
                let eval = trainer.evaluate(&valid_items)?;
                serde_json::to_writer(
                    &mut valid_file,
                    &serde_json::json!({ "iteration": trainer.iteration, "loss": eval }),
                )
                .expect("eval log serializes");
                valid_file.write_all(b"\n")?;
                log::info!(
                    "iteration {}: train total {:.4}, valid total {:.4}",
                    trainer.iteration,
                    step.total,
                    eval.total
                );
            }
            let ckpt_path = args.out.join(checkpoint_file_name(trainer.iteration));
            Checkpoint::capture(&trainer, &cfg.mel, &table).save(&ckpt_path)?;
            outputs.push(ckpt_path.display().to_string());
        }
    }
    log::info!("stopped at iteration {}", trainer.iteration);
    write_manifest(
        &args.out,
        "train",
        &config_hash(&cfg),
        cfg.train.seed,
        vec![args.metadata.display().to_string(), args.cache.display().to_string()],
        outputs,
        started,
    )
}

fn synth(cli: &Cli, args: &SynthArgs, started: Instant) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let table = SymbolTable::from_text(&ckpt.table_text)?;
    let (model, ps, _) = ckpt.restore(&table)?;
    let seed = cli.seed.unwrap_or(ckpt.seed);
    let cfg = PipelineConfig {
        mel: ckpt.mel.clone(),
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
    };

    if args.parse.is_none() {
        log::warn!("no parse given; synthesizing without boundary markup (degraded mode)");
    }
    let marked = mark_text(&args.text, args.parse.as_deref(), &table)?;
    if marked.marked.is_empty() {
        bail!("text is empty after normalization");
    }
    let ids = table.encode(&decompose_hangul(&marked.marked))?;

    let mut g = kotts::nn::Graph::new();
    let mut rng = kotts::model::Model::step_rng(seed, 0, 0);
    let fwd = model.infer_forward(&mut g, &ps, &ids, &mut rng)?;
    let frames = g.value(fwd.decode.mel_post).clone();
    let frames = frames
        .into_dimensionality::<ndarray::Ix2>()
        .expect("decoder output is a frame matrix");
    log::info!(
        "decoded {} frames for {} symbols, stop: {:?}",
        fwd.decode.frames,
        ids.len(),
        fwd.decode.stop
    );

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mel_path = args.out.join(format!("{}.mel", args.name));
    let wav_path = args.out.join(format!("{}.wav", args.name));
    let align_path = args.out.join(format!("{}.alignment.csv", args.name));
    let gate_path = args.out.join(format!("{}.gate.csv", args.name));

    let spectrogram = MelSpectrogram {
        frames,
        config: ckpt.mel.clone(),
        sample_rate: CORPUS_SAMPLE_RATE,
    };
    write_mel_file(&mel_path, &spectrogram, &config_hash(&cfg))?;
    let wave = griffin_lim_invert(&spectrogram, args.griffin_lim_iters, seed)?;
    save_wav(&wav_path, &wave)?;

    let mut align_csv = String::from("step");
    for pos in 0..fwd.decode.alignments.ncols() {
        align_csv.push_str(&format!(",pos{pos}"));
    }
    align_csv.push('\n');
    for (step, row) in fwd.decode.alignments.rows().into_iter().enumerate() {
        align_csv.push_str(&step.to_string());
        for w in row {
            align_csv.push_str(&format!(",{w:.6}"));
        }
        align_csv.push('\n');
    }
    fs::write(&align_path, align_csv)
        .with_context(|| format!("writing {}", align_path.display()))?;

    let mut gate_csv = String::from("step,probability\n");
    for (step, &logit) in g.value(fwd.decode.gate_logits).iter().enumerate() {
        gate_csv.push_str(&format!("{step},{:.6}\n", 1.0 / (1.0 + (-logit).exp())));
    }
    fs::write(&gate_path, gate_csv).with_context(|| format!("writing {}", gate_path.display()))?;

    write_manifest(
        &args.out,
        "synth",
        &config_hash(&cfg),
        seed,
        vec![args.checkpoint.display().to_string(), args.text.clone()],
        vec![
            mel_path.display().to_string(),
            wav_path.display().to_string(),
            align_path.display().to_string(),
            gate_path.display().to_string(),
        ],
        started,
    )
}

#[derive(Serialize)]
struct FilePauseReport<'a> {
    file: String,
    threshold: f64,
    percentile: f64,
    min_frames: usize,
    leading_silence_frames: usize,
    trailing_silence_frames: usize,
    segments: &'a [PauseSegment],
    stats: PauseStats,
}

#[derive(Serialize)]
struct CorpusPauseSummary {
    files_analyzed: usize,
    files_failed: usize,
    total_pauses: usize,
    mean_pauses_per_file: f64,
    mean_pause_seconds: f64,
    mean_rate_per_second: f64,
}

fn analyze_pauses(cli: &Cli, args: &AnalyzeArgs, started: Instant) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut spectrograms: Vec<(String, MelSpectrogram)> = Vec::new();
    let mut failed = 0usize;
    for input in &args.inputs {
        let name = input.display().to_string();
        let loaded = if input.extension().is_some_and(|e| e == "mel") {
            read_mel_file(input).map(|(m, _)| m).map_err(anyhow::Error::from)
        } else {
            load_wav(input)
                .map_err(anyhow::Error::from)
                .and_then(|w| mel_spectrogram(&w, &cfg.mel).map_err(anyhow::Error::from))
        };
        match loaded {
            Ok(m) => spectrograms.push((name, m)),
            Err(e) => {
                failed += 1;
                log::error!("{name}: {e}");
            }
        }
    }

    let mut csv = String::from("file,pauses,mean_seconds,total_seconds,rate_per_second\n");
    let mut all_stats: Vec<PauseStats> = Vec::new();
    let mut outputs = Vec::new();
    for (name, m) in &spectrograms {
        let threshold = energy_percentile(m, args.percentile);
        let report = detect_pauses(m, threshold, args.min_frames);
        let stats =
            pause_statistics(&report.segments, m.num_frames(), &m.config, m.sample_rate)?;
        let stem = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        let json_path = args.out.join(format!("{stem}.pauses.json"));
        let file_report = FilePauseReport {
            file: name.clone(),
            threshold,
            percentile: args.percentile,
            min_frames: args.min_frames,
            leading_silence_frames: report.leading_silence_frames,
            trailing_silence_frames: report.trailing_silence_frames,
            segments: &report.segments,
            stats,
        };
        fs::write(&json_path, serde_json::to_string_pretty(&file_report).expect("serializes"))
            .with_context(|| format!("writing {}", json_path.display()))?;
        outputs.push(json_path.display().to_string());
        csv.push_str(&format!(
            "{name},{},{:.4},{:.4},{:.4}\n",
            stats.count, stats.mean_seconds, stats.total_seconds, stats.rate_per_second
        ));
        all_stats.push(stats);
    }

    let csv_path = args.out.join("pauses.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    outputs.push(csv_path.display().to_string());

    // Low-energy frame totals swept over percentile thresholds; the counts
    // are non-decreasing in the percentile by construction.
    let mut sweep = String::from("percentile,total_low_energy_frames\n");
    for pct in (0..=100).step_by(5) {
        let total: usize = spectrograms
            .iter()
            .map(|(_, m)| low_energy_frames(m, energy_percentile(m, pct as f64), args.min_frames))
            .sum();
        sweep.push_str(&format!("{pct},{total}\n"));
    }
    let sweep_path = args.out.join("threshold_sweep.csv");
    fs::write(&sweep_path, sweep)
        .with_context(|| format!("writing {}", sweep_path.display()))?;
    outputs.push(sweep_path.display().to_string());

    let n = all_stats.len();
    let total_pauses: usize = all_stats.iter().map(|s| s.count).sum();
    let mean = |f: &dyn Fn(&PauseStats) -> f64| {
        if n == 0 {
            0.0
        } else {
            all_stats.iter().map(|s| f(s)).sum::<f64>() / n as f64
        }
    };
    let summary = CorpusPauseSummary {
        files_analyzed: n,
        files_failed: failed,
        total_pauses,
        mean_pauses_per_file: if n == 0 { 0.0 } else { total_pauses as f64 / n as f64 },
        mean_pause_seconds: mean(&|s: &PauseStats| s.mean_seconds),
        mean_rate_per_second: mean(&|s: &PauseStats| s.rate_per_second),
    };
    let summary_path = args.out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("serializes"))
        .with_context(|| format!("writing {}", summary_path.display()))?;
    outputs.push(summary_path.display().to_string());
    log::info!(
        "analyzed {n} files ({failed} failed): {total_pauses} pauses, mean {:.3}s",
        summary.mean_pause_seconds
    );

    write_manifest(
        &args.out,
        "analyze-pauses",
        &config_hash(&cfg),
        cfg.train.seed,
        args.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs,
        started,
    )
}
