//! Batch command-line front end for the source-separation toolkit: corpus
//! synthesis, separator and detector training, separation, evaluation,
//! silence detection, threshold calibration, excerpt extraction and
//! remix-augmented training. Every subcommand is reproducible under a fixed
//! `--seed`, and the effective configuration is echoed into the artifacts it
//! writes.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use demucs::audio::{
    load_sources_dir, load_track_dir, read_wav, synth_corpus, write_wav, SilencePlan, SourceSet,
    SynthSpec, TrackDataset, WavEncoding, Waveform, SOURCE_NAMES,
};
use demucs::detector::{
    detect_track, load_detector, save_detector, train_detector, DetectorConfig, DetectorTrainConfig,
};
use demucs::extract::{
    build_unlabeled_sets, calibrate_thresholds, load_unlabeled_sets, thresholds_from_text,
    thresholds_to_text, CalibrationSettings,
};
use demucs::metrics::{aggregate, evaluate_track};
use demucs::model::{load_model, new_model, save_model, ModelConfig};
use demucs::tensor::Adam;
use demucs::train::{adapt_wave, train_epoch, LoadedDataset, LossKind, RemixSets, TrainConfig};

use config::{echo, resolve, FileConfig};

#[derive(Parser)]
#[command(name = "demucs", version, about = "Waveform-domain music source separation toolkit")]
struct Cli {
    /// RNG seed shared by every stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat key=value config file; command-line flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Separator architecture flags (desk-scale defaults; `--paper-config`
/// switches to the full-size configuration).
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Encoder/decoder depth.
    #[arg(long)]
    depth: Option<usize>,
    /// First-layer channel count.
    #[arg(long)]
    channels: Option<usize>,
    /// Audio sample rate the model trains at.
    #[arg(long)]
    sample_rate: Option<u32>,
    /// Mixture channels: 1 = mono, 2 = stereo.
    #[arg(long)]
    audio_channels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    #[arg(long)]
    lstm_layers: Option<usize>,
    /// Disable the GLU rewrites (plain ReLU 1x1 convolutions).
    #[arg(long)]
    no_glu: bool,
    /// Replace the BiLSTM bottleneck with the identity.
    #[arg(long)]
    no_bilstm: bool,
    /// Weight-rescaling reference level; 0 disables.
    #[arg(long)]
    rescale: Option<f64>,
    /// Also rescale LSTM input-hidden weights.
    #[arg(long)]
    rescale_lstm: bool,
    /// Use the full-size defaults (depth 6, 48 channels, 44.1 kHz stereo).
    #[arg(long)]
    paper_config: bool,
}

impl ModelArgs {
    fn resolve(&self, file: &FileConfig) -> anyhow::Result<(ModelConfig, u32)> {
        let (d_depth, d_ch, d_rate, d_ac) = if self.paper_config {
            (6usize, 48usize, 44_100u32, 2usize)
        } else {
            // desk-scale defaults
            (2, 4, 22_050, 1)
        };
        let config = ModelConfig {
            depth: resolve(self.depth, file, "depth", d_depth)?,
            input_channels: resolve(self.audio_channels, file, "audio_channels", d_ac)?,
            initial_channels: resolve(self.channels, file, "channels", d_ch)?,
            growth: resolve(self.growth, file, "growth", 2)?,
            kernel: resolve(self.kernel, file, "kernel", 8)?,
            stride: resolve(self.stride, file, "stride", 4)?,
            lstm_layers: resolve(self.lstm_layers, file, "lstm_layers", 2)?,
            use_glu: !(self.no_glu || file.get::<bool>("no_glu")?.unwrap_or(false)),
            use_bilstm: !(self.no_bilstm || file.get::<bool>("no_bilstm")?.unwrap_or(false)),
            rescale_reference: resolve(self.rescale, file, "rescale", 0.1)?,
            rescale_lstm: self.rescale_lstm || file.get::<bool>("rescale_lstm")?.unwrap_or(false),
            sources: 4,
        };
        let rate = resolve(self.sample_rate, file, "sample_rate", d_rate)?;
        Ok((config, rate))
    }

    fn echo_pairs(config: &ModelConfig, rate: u32) -> Vec<(&'static str, String)> {
        vec![
            ("depth", config.depth.to_string()),
            ("channels", config.initial_channels.to_string()),
            ("audio_channels", config.input_channels.to_string()),
            ("sample_rate", rate.to_string()),
            ("kernel", config.kernel.to_string()),
            ("stride", config.stride.to_string()),
            ("growth", config.growth.to_string()),
            ("lstm_layers", config.lstm_layers.to_string()),
            ("no_glu", (!config.use_glu).to_string()),
            ("no_bilstm", (!config.use_bilstm).to_string()),
            ("rescale", config.rescale_reference.to_string()),
            ("rescale_lstm", config.rescale_lstm.to_string()),
        ]
    }
}

/// Training-loop flags shared by `train` and `remix-train`.
#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Segment length in seconds (snapped up to a valid length).
    #[arg(long)]
    segment: Option<f64>,
    /// Segment hop in seconds.
    #[arg(long)]
    segment_stride: Option<f64>,
    /// Reconstruction loss: l1 or mse.
    #[arg(long)]
    loss: Option<String>,
    /// Write a checkpoint every N epochs (0 = only the final one).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Probability of a remix step after each batch (remix-train only).
    #[arg(long)]
    remix_probability: Option<f64>,
    /// Remix learning-rate ratio.
    #[arg(long)]
    remix_lr_ratio: Option<f64>,
    /// Weak-supervision weight.
    #[arg(long)]
    remix_lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic 4-stem corpus.
    Synth {
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        tracks: usize,
        /// Track duration in seconds (at least 6).
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long, default_value_t = 22_050)]
        sample_rate: u32,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Planted silent intervals per track (rotating sources).
        #[arg(long, default_value_t = 0)]
        silences_per_track: usize,
        /// Length of each planted silence, seconds.
        #[arg(long, default_value_t = 8.0)]
        silence_len: f64,
    },
    /// Train the separator on a stem corpus.
    Train {
        /// Corpus root (track directories with the five WAVs each).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the log.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Split a mixture into four stems with a trained separator.
    Separate {
        /// Separator checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input mixture WAV.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for drums/bass/other/vocals.wav.
        #[arg(long)]
        out: PathBuf,
        /// Write 16-bit PCM (clamped) instead of float32.
        #[arg(long)]
        pcm16: bool,
    },
    /// Score estimated stems against references (SDR/SIR/SAR report).
    Evaluate {
        /// Root of estimate directories (4 stem WAVs per track).
        #[arg(long)]
        estimates: PathBuf,
        /// Root of reference track directories (5 WAVs per track).
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        frame_seconds: f64,
        /// Report file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-window silent-source probabilities for a mixture.
    Detect {
        /// Detector checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input mixture WAV.
        #[arg(long)]
        input: PathBuf,
        /// Output TSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the silent-source detector on a labeled corpus.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Windows per training crop.
        #[arg(long)]
        crop_windows: Option<usize>,
        /// Use the full-size detector stack.
        #[arg(long)]
        paper_config: bool,
    },
    /// Calibrate per-source probability thresholds on labeled data.
    Calibrate {
        /// Detector checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Labeled calibration corpus root.
        #[arg(long)]
        data: PathBuf,
        /// Threshold file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        precision: f64,
        #[arg(long, default_value_t = -20.0)]
        volume_limit: f64,
        #[arg(long, default_value_t = 50)]
        min_windows: usize,
    },
    /// Harvest silent-source excerpts from unlabeled mixtures into D_i sets.
    Extract {
        /// Detector checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Threshold file from `calibrate`.
        #[arg(long)]
        thresholds: PathBuf,
        /// Directory of unlabeled mixture WAVs.
        #[arg(long)]
        corpus: PathBuf,
        /// Output root for the D_<source> trees.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the unlabeled-remixing step enabled.
    RemixTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Root of the extracted D_<source> sets.
        #[arg(long)]
        unlabeled: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
}

/// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
enum Failure {
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn data_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn numeric_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Numeric(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; help/version requests are success
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(workers) = cli.workers {
        demucs::par::configure_workers(workers);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let file = FileConfig::load(cli.config.as_deref()).map_err(data_err)?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out,
            tracks,
            duration,
            sample_rate,
            channels,
            silences_per_track,
            silence_len,
        } => cmd_synth(&out, tracks, duration, sample_rate, channels, silences_per_track, silence_len, seed),
        Command::Train { data, out, model, train } => {
            cmd_train(&data, &out, &model, &train, &file, seed, None)
        }
        Command::RemixTrain { data, out, unlabeled, model, train } => {
            cmd_train(&data, &out, &model, &train, &file, seed, Some(&unlabeled))
        }
        Command::Separate { model, input, out, pcm16 } => cmd_separate(&model, &input, &out, pcm16),
        Command::Evaluate { estimates, references, frame_seconds, out } => {
            cmd_evaluate(&estimates, &references, frame_seconds, out.as_deref())
        }
        Command::Detect { model, input, out } => cmd_detect(&model, &input, out.as_deref()),
        Command::TrainDetector { data, out, epochs, batch_size, lr, crop_windows, paper_config } => {
            cmd_train_detector(&data, &out, epochs, batch_size, lr, crop_windows, paper_config, &file, seed)
        }
        Command::Calibrate { model, data, out, precision, volume_limit, min_windows } => {
            cmd_calibrate(&model, &data, &out, precision, volume_limit, min_windows)
        }
        Command::Extract { model, thresholds, corpus, out } => {
            cmd_extract(&model, &thresholds, &corpus, &out)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    tracks: usize,
    duration: f64,
    sample_rate: u32,
    channels: usize,
    silences_per_track: usize,
    silence_len: f64,
    seed: u64,
) -> CmdResult {
    if duration < 6.0 {
        return Err(data_err(anyhow!("duration must be at least 6 seconds")));
    }
    let plan = if silences_per_track > 0 {
        SilencePlan::random(seed, tracks, duration, silences_per_track, silence_len)
    } else {
        SilencePlan::none()
    };
    let spec = SynthSpec::new(seed, tracks, duration, sample_rate)
        .channels(channels)
        .silence_plan(plan);
    synth_corpus(out, &spec).map_err(data_err)?;
    let pairs = vec![
        ("command", "synth".to_string()),
        ("seed", seed.to_string()),
        ("tracks", tracks.to_string()),
        ("duration", duration.to_string()),
        ("sample_rate", sample_rate.to_string()),
        ("channels", channels.to_string()),
        ("silences_per_track", silences_per_track.to_string()),
        ("silence_len", silence_len.to_string()),
    ];
    std::fs::write(out.join("corpus.cfg"), echo(&pairs)).map_err(data_err)?;
    eprintln!("synthesized {tracks} tracks under {}", out.display());
    Ok(())
}

/// Load a corpus and adapt every stem to the training rate and channels.
fn load_adapted_tracks(data: &Path, rate: u32, channels: usize) -> Result<Vec<SourceSet>, Failure> {
    let dataset = TrackDataset::scan(data).map_err(data_err)?;
    let mut tracks = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let set = dataset.load_track(i).map_err(data_err)?;
        let adapted: Vec<Waveform> =
            set.sources().iter().map(|s| adapt_wave(s, rate, channels)).collect();
        let mut it = adapted.into_iter();
        tracks.push(SourceSet::new([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ]));
    }
    Ok(tracks)
}

fn cmd_train(
    data: &Path,
    out: &Path,
    margs: &ModelArgs,
    targs: &TrainArgs,
    file: &FileConfig,
    seed: u64,
    unlabeled: Option<&Path>,
) -> CmdResult {
    let (mconfig, rate) = margs.resolve(file).map_err(data_err)?;
    let loss_name = resolve(targs.loss.clone(), file, "loss", "l1".to_string()).map_err(data_err)?;
    let loss = match loss_name.as_str() {
        "l1" => LossKind::L1,
        "mse" => LossKind::Mse,
        other => return Err(data_err(anyhow!("unknown loss {other:?} (expected l1 or mse)"))),
    };
    let paper = margs.paper_config;
    let tconfig = TrainConfig {
        epochs: resolve(targs.epochs, file, "epochs", if paper { 400 } else { 60 }).map_err(data_err)?,
        batch_size: resolve(targs.batch_size, file, "batch_size", if paper { 128 } else { 8 })
            .map_err(data_err)?,
        lr: resolve(targs.lr, file, "lr", 5e-4).map_err(data_err)?,
        lr_decay_every: 160,
        lr_decay_factor: 5.0,
        loss,
        remix_enabled: unlabeled.is_some(),
        remix_probability: resolve(targs.remix_probability, file, "remix_probability", 0.25)
            .map_err(data_err)?,
        remix_lr_ratio: resolve(targs.remix_lr_ratio, file, "remix_lr_ratio", 0.1).map_err(data_err)?,
        remix_lambda: resolve(targs.remix_lambda, file, "remix_lambda", 1e-6).map_err(data_err)?,
        seed,
    };
    let segment_s = resolve(targs.segment, file, "segment", 5.0).map_err(data_err)?;
    let stride_s = resolve(targs.segment_stride, file, "segment_stride", 0.5).map_err(data_err)?;
    let checkpoint_every =
        resolve(targs.checkpoint_every, file, "checkpoint_every", 0).map_err(data_err)?;

    std::fs::create_dir_all(out).map_err(data_err)?;
    let model = new_model(&mconfig, seed).map_err(numeric_err)?;
    let tracks = load_adapted_tracks(data, rate, mconfig.input_channels)?;
    let dataset = LoadedDataset::from_tracks(
        tracks,
        &model,
        (segment_s * rate as f64) as usize,
        ((stride_s * rate as f64) as usize).max(1),
    )
    .map_err(numeric_err)?;

    let remix_sets = match unlabeled {
        Some(root) => {
            let paths = load_unlabeled_sets(root).map_err(data_err)?;
            let sets = RemixSets::load(&paths, rate, mconfig.input_channels).map_err(data_err)?;
            if sets.available().is_empty() {
                eprintln!("warning: no non-empty excerpt sets under {}", root.display());
            }
            Some(sets)
        }
        None => None,
    };

    // log starts with the effective configuration
    let mut pairs = ModelArgs::echo_pairs(&mconfig, rate);
    pairs.push(("command", if unlabeled.is_some() { "remix-train" } else { "train" }.to_string()));
    pairs.push(("seed", seed.to_string()));
    pairs.push(("epochs", tconfig.epochs.to_string()));
    pairs.push(("batch_size", tconfig.batch_size.to_string()));
    pairs.push(("lr", tconfig.lr.to_string()));
    pairs.push(("loss", loss_name.clone()));
    pairs.push(("segment", segment_s.to_string()));
    pairs.push(("segment_stride", stride_s.to_string()));
    pairs.push(("remix_probability", tconfig.remix_probability.to_string()));
    pairs.push(("remix_lambda", tconfig.remix_lambda.to_string()));
    let mut log = echo(&pairs);

    let params = model.params();
    let mut optim = Adam::new(tconfig.lr);
    let mut remix_optim = Adam::new(tconfig.lr * tconfig.remix_lr_ratio);
    for epoch in 0..tconfig.epochs {
        let stats = train_epoch(
            &model,
            &dataset,
            &tconfig,
            &mut optim,
            remix_sets.as_ref().map(|s| (s, &mut remix_optim)),
            &params,
            epoch,
        )
        .map_err(numeric_err)?;
        let line = stats.log_line();
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
        if checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0 && epoch + 1 < tconfig.epochs {
            save_model(&out.join(format!("checkpoint_epoch{:04}.dmx", epoch + 1)), &model, rate)
                .map_err(data_err)?;
        }
    }
    save_model(&out.join("checkpoint_final.dmx"), &model, rate).map_err(data_err)?;
    std::fs::write(out.join("train.log"), log).map_err(data_err)?;
    Ok(())
}

/// Pad with trailing zeros or trim to exactly `frames`.
fn fit_length(wave: &Waveform, frames: usize) -> Waveform {
    let c = wave.channels();
    let mut data = vec![0.0f32; c * frames];
    let copy = wave.frames().min(frames);
    for ch in 0..c {
        data[ch * frames..ch * frames + copy].copy_from_slice(&wave.channel(ch)[..copy]);
    }
    Waveform::new(data, c, wave.sample_rate())
}

fn cmd_separate(model_path: &Path, input: &Path, out: &Path, pcm16: bool) -> CmdResult {
    let (model, model_rate) = load_model(model_path).map_err(data_err)?;
    let wave = read_wav(input).map_err(data_err)?;
    let adapted = adapt_wave(&wave, model_rate, model.config.input_channels);
    let set = model.separate(&adapted).map_err(numeric_err)?;

    std::fs::create_dir_all(out).map_err(data_err)?;
    let encoding = if pcm16 { WavEncoding::Pcm16 } else { WavEncoding::Float32 };
    for (name, stem) in SOURCE_NAMES.iter().zip(set.sources()) {
        // restore the input's rate and exact length
        let restored = if stem.sample_rate() != wave.sample_rate() {
            fit_length(&demucs::audio::resample(stem, wave.sample_rate()), wave.frames())
        } else {
            stem.clone()
        };
        write_wav(&out.join(format!("{name}.wav")), &restored, encoding).map_err(data_err)?;
    }
    let pairs = vec![
        ("command", "separate".to_string()),
        ("model", model_path.display().to_string()),
        ("model_sample_rate", model_rate.to_string()),
        ("input", input.display().to_string()),
        ("pcm16", pcm16.to_string()),
    ];
    std::fs::write(out.join("separate.cfg"), echo(&pairs)).map_err(data_err)?;
    Ok(())
}

fn cmd_evaluate(
    estimates: &Path,
    references: &Path,
    frame_seconds: f64,
    out: Option<&Path>,
) -> CmdResult {
    let refs = TrackDataset::scan(references).map_err(data_err)?;
    let mut evals = Vec::new();
    for dir in refs.tracks() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let est_dir = estimates.join(&name);
        if !est_dir.is_dir() {
            eprintln!("evaluate: no estimates for {name}, skipping");
            continue;
        }
        let reference = load_track_dir(dir).map_err(data_err)?;
        let est = load_sources_dir(&est_dir).map_err(data_err)?;
        let eval = evaluate_track(&name, &est, &reference, frame_seconds).map_err(numeric_err)?;
        evals.push(eval);
    }
    if evals.is_empty() {
        return Err(data_err(anyhow!("no overlapping tracks between estimates and references")));
    }
    let report = aggregate(&evals).map_err(numeric_err)?;
    let json = report.to_json();
    match out {
        Some(path) => std::fs::write(path, json).map_err(data_err)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_detect(model_path: &Path, input: &Path, out: Option<&Path>) -> CmdResult {
    let model = load_detector(model_path).map_err(data_err)?;
    let wave = read_wav(input).map_err(data_err)?;
    let probs = detect_track(&model, &wave).map_err(numeric_err)?;

    let mut text = String::new();
    text.push_str(&format!(
        "# detect model={} input={} window_s=0.64 hop_s=0.064\n",
        model_path.display(),
        input.display()
    ));
    text.push_str("step\twindow\ttime_s\tp_drums\tp_bass\tp_other\tp_vocals\n");
    for (u, p) in probs.iter().enumerate() {
        let w = DetectorConfig::time_map(u);
        text.push_str(&format!(
            "{u}\t{w}\t{:.3}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            w as f64 * 0.064,
            p[0],
            p[1],
            p[2],
            p[3]
        ));
    }
    match out {
        Some(path) => std::fs::write(path, text).map_err(data_err)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_detector(
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    crop_windows: Option<usize>,
    paper_config: bool,
    file: &FileConfig,
    seed: u64,
) -> CmdResult {
    let dconfig = if paper_config { DetectorConfig::paper() } else { DetectorConfig::desk() };
    let tconfig = DetectorTrainConfig {
        epochs: resolve(epochs, file, "detector_epochs", if paper_config { 40 } else { 12 })
            .map_err(data_err)?,
        batch_size: resolve(batch_size, file, "detector_batch_size", if paper_config { 64 } else { 8 })
            .map_err(data_err)?,
        lr: resolve(lr, file, "detector_lr", 5e-4).map_err(data_err)?,
        crop_windows: resolve(crop_windows, file, "detector_crop_windows", 64).map_err(data_err)?,
        seed,
        ..DetectorTrainConfig::default()
    };
    let dataset = TrackDataset::scan(data).map_err(data_err)?;
    let (model, losses) = train_detector(&dataset, &dconfig, &tconfig).map_err(numeric_err)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(data_err)?;
        }
    }
    save_detector(out, &model).map_err(data_err)?;

    let mut log = echo(&[
        ("command", "train-detector".to_string()),
        ("seed", seed.to_string()),
        ("epochs", tconfig.epochs.to_string()),
        ("batch_size", tconfig.batch_size.to_string()),
        ("lr", tconfig.lr.to_string()),
        ("crop_windows", tconfig.crop_windows.to_string()),
        ("paper_config", paper_config.to_string()),
    ]);
    for (e, l) in losses.iter().enumerate() {
        log.push_str(&format!("epoch={e} loss={l:.6e}\n"));
        eprintln!("epoch={e} loss={l:.6e}");
    }
    std::fs::write(out.with_extension("log"), log).map_err(data_err)?;
    Ok(())
}

fn cmd_calibrate(
    model_path: &Path,
    data: &Path,
    out: &Path,
    precision: f64,
    volume_limit: f64,
    min_windows: usize,
) -> CmdResult {
    let model = load_detector(model_path).map_err(data_err)?;
    let dataset = TrackDataset::scan(data).map_err(data_err)?;
    let settings = CalibrationSettings {
        precision_target: precision,
        volume_limit_db: volume_limit,
        min_qualifying: min_windows,
    };
    let cal = calibrate_thresholds(&model, &dataset, &settings).map_err(numeric_err)?;
    std::fs::write(out, thresholds_to_text(&cal)).map_err(data_err)?;
    for (s, name) in SOURCE_NAMES.iter().enumerate() {
        match cal.thresholds[s] {
            Some(t) => eprintln!(
                "{name}: threshold {t:.4}, precision {:.4}, {} qualifying windows",
                cal.precision[s].unwrap_or(0.0),
                cal.qualifying[s]
            ),
            None => eprintln!("{name}: no admissible threshold"),
        }
    }
    Ok(())
}

fn cmd_extract(model_path: &Path, thresholds: &Path, corpus: &Path, out: &Path) -> CmdResult {
    let model = load_detector(model_path).map_err(data_err)?;
    let text = std::fs::read_to_string(thresholds).map_err(data_err)?;
    let cal = thresholds_from_text(&text).map_err(data_err)?;
    std::fs::create_dir_all(out).map_err(data_err)?;
    let summary = build_unlabeled_sets(&model, &cal, corpus, out).map_err(numeric_err)?;
    let mut lines = String::new();
    for (s, name) in SOURCE_NAMES.iter().enumerate() {
        lines.push_str(&format!(
            "{name}: {} excerpts, {:.1} s\n",
            summary.excerpts[s], summary.seconds[s]
        ));
    }
    print!("{lines}");
    std::fs::write(
        out.join("extract.cfg"),
        echo(&[
            ("command", "extract".to_string()),
            ("model", model_path.display().to_string()),
            ("thresholds", thresholds.display().to_string()),
            ("corpus", corpus.display().to_string()),
            ("tracks_processed", summary.tracks_processed.to_string()),
            ("failures", summary.failures.to_string()),
        ]),
    )
    .map_err(data_err)?;
    Ok(())
}
