//! Labelled noise dataset: band-limited tracks synthesized at a configurable
//! scale, each labelled automatically by the adaptive mechanism.
//!
//! A dataset is a directory of `tracks/<split>/<index>.f32` files plus one
//! `manifest.json` tying every file to its generation spec, its converged
//! combination weights, and its binary label. Everything descends
//! deterministically from one root seed, so a rebuild reproduces the same
//! bytes; existing track files are reused instead of rewritten.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{binarize, BinaryLabel, LabelConfig, LabelMechanism, WeightVector};
use crate::error::{Error, Result};
use crate::filterbank::SubFilterBank;
use crate::io;
use crate::rng::Rng;
use crate::signal::{gen_subband_noise, FirFilter, Signal};

/// On-disk layout version of a dataset directory.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Identifier of the generative model behind `synth_track`, recorded in the
/// manifest so downstream consumers know what the tracks are (band-limited
/// white noise shaped by the sub filters, not recordings).
pub const GENERATOR_TAG: &str = "subband-filtered-white-noise/v1";

/// Probability weights for drawing 1, 2, 3 or 4 active bands per track.
/// Small sets dominate so most labels stay informative (sparse).
const SUBSET_SIZE_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Lowest per-band gain ever generated; keeps every active band above the
/// labelling mechanism's noise floor.
const MIN_GAIN: f64 = 0.25;

/// Fraction of tracks allowed to need regeneration (label divergence) before
/// the build aborts as misconfigured.
const MAX_REGEN_FRACTION: f64 = 0.01;

/// Everything needed to re-synthesize one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Seed of the track's own generator stream.
    pub seed: u64,
    /// Active bands, 1-based, strictly increasing.
    pub band_set: Vec<usize>,
    /// One gain per active band, in [0.25, 1].
    pub gains: Vec<f64>,
    /// Track duration in seconds.
    pub dur_s: f64,
    /// Sample rate in Hz.
    pub fs_hz: u32,
}

impl TrackSpec {
    /// Draws a random spec for `n_bands` available bands from `seed`.
    pub fn draw(seed: u64, n_bands: usize) -> Self {
        let mut rng = Rng::new(seed);
        let roll = rng.next_f64();
        let mut k = SUBSET_SIZE_WEIGHTS.len();
        let mut acc = 0.0;
        for (i, w) in SUBSET_SIZE_WEIGHTS.iter().enumerate() {
            acc += w;
            if roll < acc {
                k = i + 1;
                break;
            }
        }
        let k = k.min(n_bands);
        let mut band_set: Vec<usize> = rng
            .distinct_below(k, n_bands)
            .into_iter()
            .map(|b| b + 1)
            .collect();
        band_set.sort_unstable();
        let gains = band_set
            .iter()
            .map(|_| MIN_GAIN + (1.0 - MIN_GAIN) * rng.next_f64())
            .collect();
        TrackSpec {
            seed,
            band_set,
            gains,
            dur_s: 1.0,
            fs_hz: 16_000,
        }
    }

    /// Number of samples the track will have.
    pub fn n_samples(&self) -> usize {
        (self.dur_s * self.fs_hz as f64).round() as usize
    }
}

/// Dataset split a track belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Disjoint seed-stream offset per split (splits never share seeds).
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

/// Number of tracks per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// One manifest row: where the track lives and what the labeller said.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    /// Path of the sample file, relative to the dataset root.
    pub file: String,
    pub split: Split,
    pub spec: TrackSpec,
    /// Converged combination weights from the adaptive mechanism.
    pub weights: WeightVector,
    /// Binarized weights; the track's training label.
    pub label: BinaryLabel,
    /// How many reseeds the track needed before labelling converged.
    pub regenerations: u32,
}

/// Build configuration for [`build_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    /// Root of the whole dataset's seed tree.
    pub root_seed: u64,
    pub counts: SplitCounts,
    /// Where `manifest.json` and `tracks/` go.
    pub out_dir: PathBuf,
    /// Provenance note: where the sub-filter bank came from.
    pub bank_path: String,
    /// Provenance note: where the acoustic paths came from.
    pub paths_path: String,
    /// Labelling tuning; [`LabelConfig::default`] unless overridden.
    pub label: LabelConfig,
}

/// The dataset's table of contents, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Generative model identifier (see [`GENERATOR_TAG`]).
    pub generator: String,
    pub root_seed: u64,
    pub counts: SplitCounts,
    pub n_bands: usize,
    pub bank_path: String,
    pub paths_path: String,
    pub label_config: LabelConfig,
    pub tracks: Vec<TrackRecord>,
}

impl DatasetManifest {
    /// Rows of one split, in index order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrackRecord> {
        self.tracks.iter().filter(move |t| t.split == split)
    }
}

/// Synthesizes the waveform a spec describes: white noise shaped by the sub
/// filters of the requested bands. Deterministic in the spec.
pub fn synth_track(spec: &TrackSpec, bank: &SubFilterBank) -> Result<Signal> {
    if (spec.dur_s * spec.fs_hz as f64).fract() != 0.0 {
        return Err(Error::invalid(
            "track duration must be a whole number of samples",
        ));
    }
    gen_subband_noise(
        spec.seed,
        &spec.band_set,
        &spec.gains,
        spec.dur_s,
        spec.fs_hz,
        bank.filters(),
    )
}

/// Generates, labels and persists every track, then writes the manifest
/// atomically. Existing track files of the right length are reused, so an
/// interrupted build resumes where it stopped. A track whose labelling
/// diverges is redrawn from a derived seed; more than 1% such redraws abort
/// the build (the labelling step size is wrong for this data).
pub fn build_dataset(
    config: &DatasetConfig,
    bank: &SubFilterBank,
    p: &FirFilter,
    s: &FirFilter,
) -> Result<DatasetManifest> {
    if config.counts.total() == 0 {
        return Err(Error::invalid("dataset needs at least one track"));
    }
    let frame_len = 16_000;
    let mechanism = LabelMechanism::new(bank, p, s, frame_len, config.label.clone())?;
    for split in Split::ALL {
        io::ensure_dir(config.out_dir.join("tracks").join(split.as_str()))?;
    }

    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&split| (0..config.counts.of(split)).map(move |i| (split, i)))
        .collect();

    let tracks: Vec<TrackRecord> = jobs
        .par_iter()
        .map(|&(split, index)| {
            build_track(config, bank, &mechanism, split, index)
        })
        .collect::<Result<_>>()?;

    let regenerated: u64 = tracks.iter().map(|t| u64::from(t.regenerations)).sum();
    if regenerated as f64 > MAX_REGEN_FRACTION * tracks.len() as f64 {
        return Err(Error::Training(format!(
            "{regenerated} of {} tracks needed regeneration; labelling step is misconfigured",
            tracks.len()
        )));
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        generator: GENERATOR_TAG.to_string(),
        root_seed: config.root_seed,
        counts: config.counts,
        n_bands: bank.n_bands(),
        bank_path: config.bank_path.clone(),
        paths_path: config.paths_path.clone(),
        label_config: config.label.clone(),
        tracks,
    };
    io::write_atomic(
        config.out_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads and validates a manifest written by [`build_dataset`].
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.as_ref().join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            "manifest.json",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.counts.total() != manifest.tracks.len() {
        return Err(Error::format(
            "manifest.json",
            format!(
                "counts say {} tracks but {} rows are present",
                manifest.counts.total(),
                manifest.tracks.len()
            ),
        ));
    }
    Ok(manifest)
}

/// Reads one track's samples back as a signal.
pub fn load_track(dir: impl AsRef<Path>, record: &TrackRecord) -> Result<Signal> {
    let values = io::read_f32_file(dir.as_ref().join(&record.file))?;
    if values.len() != record.spec.n_samples() {
        return Err(Error::format(
            &record.file,
            format!(
                "expected {} samples, found {}",
                record.spec.n_samples(),
                values.len()
            ),
        ));
    }
    Signal::new(io::to_f64(&values), record.spec.fs_hz)
}

fn build_track(
    config: &DatasetConfig,
    bank: &SubFilterBank,
    mechanism: &LabelMechanism,
    split: Split,
    index: usize,
) -> Result<TrackRecord> {
    let file = format!("tracks/{}/{}.f32", split.as_str(), index);
    let path = config.out_dir.join(&file);
    let base_seed = Rng::derive(config.root_seed, split.seed_offset() + index as u64);

    let mut regenerations = 0u32;
    loop {
        let seed = if regenerations == 0 {
            base_seed
        } else {
            Rng::derive(base_seed, u64::from(regenerations))
        };
        let spec = TrackSpec::draw(seed, bank.n_bands());

        // The stored samples are float32; label from exactly what a reader of
        // the file will see, not from the transient f64 waveform.
        let quantized = io::to_f32(synth_track(&spec, bank)?.samples());
        let x = Signal::new(io::to_f64(&quantized), spec.fs_hz)?;

        match mechanism.label(&x) {
            Ok(weights) => {
                let label = binarize(&weights)?;
                let reusable = std::fs::metadata(&path)
                    .map(|m| m.len() == 4 * spec.n_samples() as u64)
                    .unwrap_or(false);
                if !reusable {
                    io::write_f32_file(&path, &quantized)?;
                }
                return Ok(TrackRecord {
                    file,
                    split,
                    spec,
                    weights,
                    label,
                    regenerations,
                });
            }
            Err(Error::Divergence { .. }) => {
                regenerations += 1;
                // A couple of redraws per track is already pathological; the
                // >1% build-level gate does the real policing.
                if regenerations > 8 {
                    return Err(Error::Training(format!(
                        "track {file} kept diverging after {regenerations} reseeds"
                    )));
                }
            }
            Err(other) => return Err(other),
        }
    }
}
