//! One function per subcommand. Every function returns `anclab::Result`, so
//! `main` maps any failure onto exit code 1 with the diagnostic on stderr,
//! and every function finishes by writing `run.json` with the resolved
//! configuration next to its other outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use anclab::adaptive::{
    fxlms_pretrain, save_broadband, BroadbandMeta, FxlmsConfig, LabelConfig,
    BROADBAND_FORMAT_VERSION,
};
use anclab::cnn::{
    evaluate, load_model, load_split, save_model, write_metrics_csv, CnnModel, TrainConfig,
};
use anclab::dataset::{build_dataset, load_manifest, DatasetConfig, Split, SplitCounts};
use anclab::engine::{compare, simulate, write_compare_csv, SimScenario};
use anclab::filterbank::{decompose, load_bank, reconstruct, save_bank, SubFilterBank};
use anclab::io::{self, read_f32_file, read_wav, to_f64, WavFormat};
use anclab::signal::{
    design_bandpass_fir, fir_filter, nr_db, stft_spectrogram, white_noise, write_nr_csv,
    write_spectrogram_csv, FirFilter, Signal,
};
use anclab::{Error, Result};

use crate::{
    CompareArgs, DatasetArgs, DecomposeArgs, PathArgs, PretrainArgs, ScenarioArgs, SimulateArgs,
    SpectrogramArgs, TrainArgs,
};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Writes `run.json`: the argument struct (clap has already applied every
/// default, so this is the resolved configuration), the subcommand name, the
/// worker cap and any extra resolved values the command computed itself.
/// Serialization uses sorted keys, so identical configurations produce
/// byte-identical files.
fn write_run_json(
    out: &Path,
    subcommand: &str,
    args: &impl Serialize,
    jobs: Option<usize>,
    extra: &[(&str, Value)],
) -> Result<()> {
    let Value::Object(mut doc) = serde_json::to_value(args)? else {
        return Err(Error::InvalidArgument("run configuration must serialize to an object".into()));
    };
    doc.insert("subcommand".into(), Value::String(subcommand.into()));
    doc.insert("jobs".into(), serde_json::to_value(jobs)?);
    for (key, value) in extra {
        doc.insert((*key).into(), value.clone());
    }
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc))?;
    bytes.push(b'\n');
    io::write_atomic(out.join("run.json"), &bytes)
}

/// Input paths are checked before any real work starts, so a typo fails in
/// milliseconds instead of after a long build step.
fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} not found: {}", path.display())))
    }
}

/// Loads a noise recording by extension: `.wav` is self-describing, `.f32`
/// is raw little-endian mono samples taken to be at `fs` Hz.
fn read_noise(path: &Path, fs: u32) -> Result<Signal> {
    require_exists(path, "noise recording")?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(path),
        Some("f32") => Signal::new(to_f64(&read_f32_file(path)?), fs),
        _ => Err(Error::InvalidArgument(format!(
            "cannot tell the format of {} from its extension (expected .wav or .f32)",
            path.display()
        ))),
    }
}

/// Designs the primary/secondary acoustic paths from the shared path flags.
fn design_paths(paths: &PathArgs, fs: u32) -> Result<(FirFilter, FirFilter)> {
    let primary = design_bandpass_fir(
        paths.band_low,
        paths.band_high,
        paths.path_taps,
        fs,
        paths.primary_delay,
    )?;
    let secondary = design_bandpass_fir(
        paths.band_low,
        paths.band_high,
        paths.path_taps,
        fs,
        paths.secondary_delay,
    )?;
    Ok((primary, secondary))
}

/// One-line provenance note for the path design, recorded in manifests.
fn describe_paths(paths: &PathArgs) -> String {
    format!(
        "windowed-sinc bandpass {}-{} Hz, {} taps, delays {}/{}",
        paths.band_low, paths.band_high, paths.path_taps, paths.primary_delay, paths.secondary_delay
    )
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn pretrain(args: &PretrainArgs, jobs: Option<usize>) -> Result<()> {
    let x = match &args.noise {
        Some(path) => read_noise(path, args.fs)?,
        None => {
            let n = (args.seconds * args.fs as f64).round() as usize;
            white_noise(args.seed, n, args.fs)?
        }
    };
    let fs = x.sample_rate_hz();
    let (p, s) = design_paths(&args.paths, fs)?;
    let cfg = FxlmsConfig::new(args.mu, args.taps)?;
    let w = fxlms_pretrain(&x, &p, &s, &cfg, args.epochs)?;

    // Report the frozen-filter residual over the training record: adaptation
    // off, one clean pass, per-second noise reduction.
    let d = fir_filter(&x, &p);
    let anti = fir_filter(&fir_filter(&x, &w), &s);
    let e = Signal::new(
        d.samples()
            .iter()
            .zip(anti.samples())
            .map(|(d, a)| d - a)
            .collect(),
        fs,
    )?;
    let nr = nr_db(&d, &e, 1.0)?;
    let final_db = nr.values_db().last().copied().unwrap_or(0.0);

    io::ensure_dir(&args.out)?;
    let meta = BroadbandMeta {
        format_version: BROADBAND_FORMAT_VERSION,
        taps: args.taps,
        fs_hz: fs,
        seed: args.seed,
        step_size: args.mu,
        epochs: args.epochs,
        train_seconds: x.duration_s(),
    };
    save_broadband(&args.out, &w, &meta)?;
    write_run_json(&args.out, "pretrain", args, jobs, &[])?;
    println!(
        "pretrained {} taps on {:.1} s of noise; frozen final-second NR {:.2} dB; wrote {}",
        args.taps,
        x.duration_s(),
        final_db,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

pub fn decompose_cmd(args: &DecomposeArgs, jobs: Option<usize>) -> Result<()> {
    require_exists(&args.filter, "filter file")?;
    let c = FirFilter::new(to_f64(&read_f32_file(&args.filter)?))?;
    let bank = decompose(&c, args.bands)?;
    io::ensure_dir(&args.out)?;
    save_bank(&args.out, &bank)?;
    write_run_json(&args.out, "decompose", args, jobs, &[])?;
    println!(
        "split {} taps into {} sub filters; wrote {}",
        c.len(),
        bank.n_bands(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

pub fn dataset(args: &DatasetArgs, jobs: Option<usize>) -> Result<()> {
    require_exists(&args.bank, "bank directory")?;
    let bank = load_bank(&args.bank)?;
    // Tracks are fixed one-second 16 kHz frames; the paths must match.
    let fs = 16_000;
    let (p, s) = design_paths(&args.paths, fs)?;

    let base = if args.paper_scale {
        SplitCounts { train: 80_000, val: 2_000, test: 2_000 }
    } else {
        SplitCounts { train: 2_000, val: 200, test: 200 }
    };
    let counts = SplitCounts {
        train: args.train.unwrap_or(base.train),
        val: args.val.unwrap_or(base.val),
        test: args.test.unwrap_or(base.test),
    };

    io::ensure_dir(&args.out)?;
    let config = DatasetConfig {
        root_seed: args.seed,
        counts,
        out_dir: args.out.clone(),
        bank_path: args.bank.display().to_string(),
        paths_path: describe_paths(&args.paths),
        label: LabelConfig::default(),
    };
    let manifest = build_dataset(&config, &bank, &p, &s)?;
    write_run_json(
        &args.out,
        "dataset",
        args,
        jobs,
        &[("resolved_counts", serde_json::to_value(counts)?)],
    )?;
    println!(
        "generated {} tracks ({} train / {} val / {} test) over {} bands; wrote {}",
        manifest.tracks.len(),
        counts.train,
        counts.val,
        counts.test,
        manifest.n_bands,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(args: &TrainArgs, jobs: Option<usize>) -> Result<()> {
    if !args.manifest.is_file() {
        return Err(Error::InvalidArgument(format!(
            "manifest not found: {}",
            args.manifest.display()
        )));
    }
    let dir = match args.manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let manifest = load_manifest(&dir)?;
    let train_set = load_split(&dir, &manifest, Split::Train)?;
    let val_set = load_split(&dir, &manifest, Split::Val)?;

    let model = CnnModel::new(args.seed, manifest.n_bands)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        val_target: (args.val_target > 0.0).then_some(args.val_target),
        ..TrainConfig::default()
    };
    let outcome = anclab::cnn::train(model, &train_set, &val_set, &cfg)?;

    io::ensure_dir(&args.out)?;
    save_model(args.out.join("model.bin"), &outcome.model)?;
    write_metrics_csv(args.out.join("metrics.csv"), &outcome.metrics)?;
    write_run_json(&args.out, "train", args, jobs, &[])?;

    // `best_epoch` is the 1-based epoch number, not a vec index.
    let best = &outcome.metrics[outcome.best_epoch - 1];
    println!(
        "trained {} epochs; best epoch {}: val per-label accuracy {:.4}, exact match {:.4}",
        outcome.metrics.len(),
        best.epoch,
        best.val_bit_accuracy,
        best.val_exact_match
    );
    if manifest.counts.test > 0 {
        let test_set = load_split(&dir, &manifest, Split::Test)?;
        let (bit, exact) = evaluate(&outcome.model, &test_set)?;
        println!("test split: per-label accuracy {bit:.4}, exact match {exact:.4}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate / compare
// ---------------------------------------------------------------------------

/// Owns everything a [`SimScenario`] borrows.
struct LoadedScenario {
    noise: Signal,
    primary: FirFilter,
    secondary: FirFilter,
    bank: SubFilterBank,
    model: Option<CnnModel>,
    candidates: Vec<FirFilter>,
    frame_s: f64,
    fxlms: FxlmsConfig,
}

impl LoadedScenario {
    fn load(args: &ScenarioArgs) -> Result<Self> {
        let noise = read_noise(&args.noise, args.fs)?;
        require_exists(&args.bank, "bank directory")?;
        let bank = load_bank(&args.bank)?;
        let (primary, secondary) = design_paths(&args.paths, noise.sample_rate_hz())?;
        let model = match &args.model {
            Some(path) => {
                require_exists(path, "model file")?;
                Some(load_model(path)?)
            }
            None => None,
        };
        // Fixed library for the selection baseline: every single sub filter
        // plus their sum (the broadband filter the bank was split from).
        let mut candidates: Vec<FirFilter> =
            (1..=bank.n_bands()).map(|m| bank.filter(m).clone()).collect();
        candidates.push(reconstruct(&bank));
        let fxlms = FxlmsConfig::new(args.mu, bank.n_taps())?;
        Ok(LoadedScenario {
            noise,
            primary,
            secondary,
            bank,
            model,
            candidates,
            frame_s: args.frame_s,
            fxlms,
        })
    }

    fn scenario(&self) -> SimScenario<'_> {
        SimScenario {
            noise: &self.noise,
            primary: &self.primary,
            secondary: &self.secondary,
            frame_s: self.frame_s,
            bank: &self.bank,
            model: self.model.as_ref(),
            candidates: &self.candidates,
            fxlms: self.fxlms.clone(),
        }
    }
}

pub fn simulate_cmd(args: &SimulateArgs, jobs: Option<usize>) -> Result<()> {
    let loaded = LoadedScenario::load(&args.scenario)?;
    let result = simulate(&loaded.scenario(), args.method)?;

    io::ensure_dir(&args.out)?;
    io::write_wav(args.out.join("residual.wav"), &result.residual, WavFormat::Float32)?;
    write_nr_csv(args.out.join("nr.csv"), &result.nr)?;
    write_run_json(&args.out, "simulate", args, jobs, &[])?;

    for (w, nr) in result.nr.values_db().iter().enumerate() {
        println!(
            "frame {w}: NR {nr:.2} dB ({})",
            result.choices.get(w).map_or_else(|| "-".into(), |c| c.describe())
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn compare_cmd(args: &CompareArgs, jobs: Option<usize>) -> Result<()> {
    let loaded = LoadedScenario::load(&args.scenario)?;
    let comparison = compare(&loaded.scenario(), &args.methods)?;

    io::ensure_dir(&args.out)?;
    write_compare_csv(args.out.join("compare.csv"), &comparison)?;
    for result in &comparison.results {
        let spec = stft_spectrogram(&result.residual, 512, 256)?;
        let name = format!("{}_spec.csv", result.method.tag());
        write_spectrogram_csv(args.out.join(name), &spec)?;
        io::write_wav(
            args.out.join(format!("{}_residual.wav", result.method.tag())),
            &result.residual,
            WavFormat::Float32,
        )?;
    }
    write_run_json(&args.out, "compare", args, jobs, &[])?;

    for summary in &comparison.summaries {
        println!(
            "{:>12}: mean NR {:.2} dB over controlled frames (worst {:.2} dB)",
            summary.method.tag(),
            summary.mean_nr_db,
            summary.worst_frame_db
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrogram
// ---------------------------------------------------------------------------

pub fn spectrogram(args: &SpectrogramArgs, jobs: Option<usize>) -> Result<()> {
    let x = read_noise(&args.input, args.fs)?;
    let spec = stft_spectrogram(&x, args.win, args.hop)?;
    io::ensure_dir(&args.out)?;
    write_spectrogram_csv(args.out.join("spec.csv"), &spec)?;
    write_run_json(&args.out, "spectrogram", args, jobs, &[])?;
    println!("wrote {}", args.out.join("spec.csv").display());
    Ok(())
}
