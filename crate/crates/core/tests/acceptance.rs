//! Acceptance gates: eight end-to-end criteria, one test per criterion,
//! each printing a single `[criterion N] PASS — ...` line (run with
//! `--nocapture` to see the lines for passing tests; a failing criterion
//! panics with the matching FAIL line).
//!
//! The expensive shared fixture (desk-scale dataset + trained network) is
//! built once and cached under the cargo temp dir keyed by its
//! configuration, so only the first run pays the training cost.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use anclab::adaptive::{
    binarize, fxlms_pretrain, fxlms_run, BinaryLabel, FxlmsConfig, LabelConfig, LabelMechanism,
};
use anclab::cnn::{
    self, finite_difference_check, load_model, model_from_bytes, model_to_bytes, param_count,
    save_model, CnnModel, Mode, TrainConfig,
};
use anclab::dataset::{
    build_dataset, load_manifest, synth_track, DatasetConfig, Split, SplitCounts, TrackSpec,
};
use anclab::engine::{
    compare, simulate_gfanc, simulate_sfanc_lite, Method, SimScenario,
};
use anclab::fft::{fft_forward, fft_inverse, C64};
use anclab::filterbank::{
    band_ranges, decompose, gen_subband_comb, reconstruct, save_bank, SubFilterBank,
};
use anclab::io;
use anclab::rng::Rng;
use anclab::signal::{
    design_bandpass_fir, fir_filter, nr_db, white_noise, FirFilter, Signal,
};

// Lab geometry shared by every criterion.
const FS: u32 = 16_000;
const N_TAPS: usize = 1024;
const N_BANDS: usize = 15;
const MU: f64 = 1e-4;
const PRETRAIN_EPOCHS: usize = 3;
const PATH_TAPS: usize = 255;
const PRIMARY_DELAY: usize = 64;
const SECONDARY_DELAY: usize = 32;
const BAND_LOW_HZ: f64 = 20.0;
const BAND_HIGH_HZ: f64 = 7_980.0;
const TRAIN_SECONDS: f64 = 30.0;
const NOISE_SEED: u64 = 0x414e_434c;
const DATASET_SEED: u64 = 0;
const TRAIN_SEED: u64 = 0;

// ---------------------------------------------------------------------------
// Reporting and small helpers
// ---------------------------------------------------------------------------

/// Prints the criterion's single verdict line and fails the test on FAIL.
fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[criterion {criterion}] {verdict} — {detail}");
    println!("{line}");
    assert!(pass, "{line}");
}

fn linf(diff: impl IntoIterator<Item = f64>) -> f64 {
    diff.into_iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Dense symmetric positive-definite solve (in-place Cholesky); the
/// independent oracle solver for the least-squares references below. A tiny
/// relative ridge keeps near-singular systems factorable.
fn spd_solve(mut a: Vec<f64>, n: usize, mut b: Vec<f64>) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let ridge = 1e-10 * (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    for i in 0..n {
        a[i * n + i] += ridge;
    }
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                assert!(sum > 0.0, "matrix is not positive definite");
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= a[k * n + i] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    b
}

/// Auto- and cross-correlations via zero-padded FFTs:
/// `auto[k] = sum_n u[n]·u[n−k]`, `cross[k] = sum_n d[n]·u[n−k]`, k < n_lags.
fn correlations(u: &[f64], d: &[f64], n_lags: usize) -> (Vec<f64>, Vec<f64>) {
    let size = (u.len() + n_lags).next_power_of_two();
    let embed = |x: &[f64]| {
        let mut buf = vec![C64::new(0.0, 0.0); size];
        for (slot, &v) in buf.iter_mut().zip(x) {
            *slot = C64::new(v, 0.0);
        }
        fft_forward(&buf)
    };
    let fu = embed(u);
    let fd = embed(d);
    let spectrum_to_lags = |spec: Vec<C64>| -> Vec<f64> {
        fft_inverse(&spec)[..n_lags].iter().map(|c| c.re).collect()
    };
    let auto = spectrum_to_lags(fu.iter().map(|v| v * v.conj()).collect());
    let cross = spectrum_to_lags(fd.iter().zip(&fu).map(|(a, b)| a * b.conj()).collect());
    (auto, cross)
}

/// Block least-squares (Wiener) control filter: solves the Toeplitz normal
/// equations built from the filtered reference `u = x∗s` against `d`.
fn wiener_filter(u: &Signal, d: &Signal, n_taps: usize) -> FirFilter {
    let (auto, cross) = correlations(u.samples(), d.samples(), n_taps);
    let mut gram = vec![0.0; n_taps * n_taps];
    for i in 0..n_taps {
        for j in 0..n_taps {
            gram[i * n_taps + j] = auto[i.abs_diff(j)];
        }
    }
    FirFilter::new(spd_solve(gram, n_taps, cross)).unwrap()
}

fn subtract(d: &Signal, anti: &Signal) -> Signal {
    Signal::new(
        d.samples()
            .iter()
            .zip(anti.samples())
            .map(|(a, b)| a - b)
            .collect(),
        d.sample_rate_hz(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn acoustic_paths() -> (FirFilter, FirFilter) {
    let p = design_bandpass_fir(BAND_LOW_HZ, BAND_HIGH_HZ, PATH_TAPS, FS, PRIMARY_DELAY).unwrap();
    let s =
        design_bandpass_fir(BAND_LOW_HZ, BAND_HIGH_HZ, PATH_TAPS, FS, SECONDARY_DELAY).unwrap();
    (p, s)
}

fn training_noise() -> Signal {
    white_noise(NOISE_SEED, (TRAIN_SECONDS * FS as f64) as usize, FS).unwrap()
}

/// Pretrained controller plus everything derived from it. Cheap enough
/// (about a second) to rebuild per process.
struct Lab {
    p: FirFilter,
    s: FirFilter,
    w: FirFilter,
    bank: SubFilterBank,
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let (p, s) = acoustic_paths();
        let x = training_noise();
        let cfg = FxlmsConfig::new(MU, N_TAPS).unwrap();
        let w = fxlms_pretrain(&x, &p, &s, &cfg, PRETRAIN_EPOCHS).unwrap();
        let bank = decompose(&w, N_BANDS).unwrap();
        Lab { p, s, w, bank }
    })
}

/// What the desk-scale training produced, persisted next to the model so
/// re-runs of the suite skip the expensive stage when nothing changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainSummary {
    dataset_seed: u64,
    train_tracks: usize,
    val_tracks: usize,
    train_seed: u64,
    epoch_budget: usize,
    epochs_run: usize,
    best_epoch: usize,
    val_bit_accuracy: f64,
    val_exact_match: f64,
    train_minutes: f64,
}

struct Trained {
    model: CnnModel,
    summary: TrainSummary,
    /// True when this process actually trained (vs. loading the cache).
    built_now: bool,
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-fixture")
}

fn desk_counts() -> SplitCounts {
    SplitCounts {
        train: 2_000,
        val: 200,
        test: 0,
    }
}

/// Generates (or reuses) the desk-scale dataset and returns its directory.
fn desk_dataset(lab: &Lab) -> PathBuf {
    let dir = cache_root().join("dataset");
    let counts = desk_counts();
    if let Ok(manifest) = load_manifest(&dir) {
        if manifest.root_seed == DATASET_SEED
            && manifest.counts == counts
            && manifest.n_bands == N_BANDS
        {
            return dir;
        }
    }
    io::ensure_dir(&dir).unwrap();
    let config = DatasetConfig {
        root_seed: DATASET_SEED,
        counts,
        out_dir: dir.clone(),
        bank_path: "acceptance pretrained bank".into(),
        paths_path: "acceptance acoustic paths".into(),
        label: LabelConfig::default(),
    };
    build_dataset(&config, &lab.bank, &lab.p, &lab.s).unwrap();
    dir
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let dir = cache_root();
        let model_path = dir.join("model.bin");
        let summary_path = dir.join("train_summary.json");
        if let (Ok(model), Ok(bytes)) = (load_model(&model_path), std::fs::read(&summary_path)) {
            if let Ok(summary) = serde_json::from_slice::<TrainSummary>(&bytes) {
                let counts = desk_counts();
                if summary.dataset_seed == DATASET_SEED
                    && summary.train_tracks == counts.train
                    && summary.val_tracks == counts.val
                    && summary.train_seed == TRAIN_SEED
                    && model.n_labels() == N_BANDS
                {
                    return Trained {
                        model,
                        summary,
                        built_now: false,
                    };
                }
            }
        }

        let lab = lab();
        let data_dir = desk_dataset(lab);
        let manifest = load_manifest(&data_dir).unwrap();
        let train_set = cnn::load_split(&data_dir, &manifest, Split::Train).unwrap();
        let val_set = cnn::load_split(&data_dir, &manifest, Split::Val).unwrap();
        let cfg = TrainConfig {
            seed: TRAIN_SEED,
            ..TrainConfig::default()
        };
        let started = Instant::now();
        let outcome =
            cnn::train(CnnModel::new(TRAIN_SEED, N_BANDS).unwrap(), &train_set, &val_set, &cfg)
                .unwrap();
        let train_minutes = started.elapsed().as_secs_f64() / 60.0;

        // `best_epoch` is 1-based.
        let best = &outcome.metrics[outcome.best_epoch - 1];
        let summary = TrainSummary {
            dataset_seed: DATASET_SEED,
            train_tracks: desk_counts().train,
            val_tracks: desk_counts().val,
            train_seed: TRAIN_SEED,
            epoch_budget: cfg.epochs,
            epochs_run: outcome.metrics.len(),
            best_epoch: best.epoch,
            val_bit_accuracy: best.val_bit_accuracy,
            val_exact_match: best.val_exact_match,
            train_minutes,
        };
        save_model(&model_path, &outcome.model).unwrap();
        io::write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary).unwrap()).unwrap();
        Trained {
            model: outcome.model,
            summary,
            built_now: true,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1 — perfect reconstruction and filtering equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_perfect_reconstruction() {
    let start = Instant::now();
    let mut worst_recon = 0.0f64;
    let mut worst_filt = 0.0f64;
    for (case, &(n, m)) in [(64usize, 4usize), (256, 8), (1024, 15)].iter().enumerate() {
        for i in 0..100u64 {
            let mut rng = Rng::new(Rng::derive(0xACC1, case as u64 * 1_000 + i));
            let coeffs: Vec<f64> = (0..n).map(|_| rng.uniform_signed()).collect();
            let filter = FirFilter::new(coeffs.clone()).unwrap();
            let bank = decompose(&filter, m).unwrap();

            let rebuilt = reconstruct(&bank);
            worst_recon = worst_recon.max(linf(
                rebuilt.coeffs().iter().zip(&coeffs).map(|(a, b)| a - b),
            ));

            let x = white_noise(rng.next_u64(), FS as usize, FS).unwrap();
            let broadband = fir_filter(&x, &filter);
            let mut summed = vec![0.0; x.len()];
            for band in 1..=m {
                for (acc, v) in summed.iter_mut().zip(fir_filter(&x, bank.filter(band)).samples())
                {
                    *acc += v;
                }
            }
            worst_filt = worst_filt.max(linf(
                summed.iter().zip(broadband.samples()).map(|(a, b)| a - b),
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_recon < 1e-10 && worst_filt < 1e-9 && elapsed < 30.0;
    report(
        1,
        pass,
        &format!(
            "300 random filters: reconstruction •∞ {worst_recon:.2e} (< 1e-10), \
             filtering equivalence {worst_filt:.2e} (< 1e-9), {elapsed:.1} s (< 30 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2 — band-plan geometry
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_band_plan_geometry() {
    let plan = band_ranges(N_TAPS, N_BANDS).unwrap();
    let width_ok = plan.bandwidth_bins() == 34;
    let band15: Vec<usize> = (477..=547).collect();
    let mut last = plan.range(N_BANDS).to_vec();
    last.sort_unstable();
    let last_ok = last == band15;

    let mut owned = vec![0usize; N_TAPS];
    for band in 1..=N_BANDS {
        for &bin in plan.range(band) {
            owned[bin] += 1;
        }
    }
    let partition_ok = owned.iter().all(|&c| c == 1);
    let dc_ok = plan.band_of(0) == Some(1);

    let pass = width_ok && last_ok && partition_ok && dc_ok;
    report(
        2,
        pass,
        &format!(
            "N=1024, M=15: I={} (=34: {}), band 15 = [477,547] ({}), \
             1024 bins partitioned ({}), DC in band 1 ({})",
            plan.bandwidth_bins(),
            width_ok,
            last_ok,
            partition_ok,
            dc_ok
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3 — FxLMS pretraining vs. the Wiener oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_pretraining_reaches_20db_and_tracks_wiener() {
    let start = Instant::now();
    let (p, s) = acoustic_paths();
    let x = training_noise();
    let d = fir_filter(&x, &p);
    let cfg = FxlmsConfig::new(MU, N_TAPS).unwrap();

    // Warm passes, then one more pass whose in-run residual is scored: the
    // noise reduction the adapting controller itself achieved.
    let warm = fxlms_pretrain(&x, &p, &s, &cfg, PRETRAIN_EPOCHS - 1).unwrap();
    let (e, _w) = fxlms_run(&x, &p, &s, &cfg, &warm).unwrap();
    let nr = nr_db(&d, &e, 1.0).unwrap();
    let final_nr = *nr.values_db().last().unwrap();

    // Independent oracle: the block least-squares filter on the same data.
    let u = fir_filter(&x, &s);
    let wiener = wiener_filter(&u, &d, N_TAPS);
    let e_star = subtract(&d, &fir_filter(&u, &wiener));
    let wiener_nr = *nr_db(&d, &e_star, 1.0).unwrap().values_db().last().unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    let gap = (wiener_nr - final_nr).abs();
    let pass = final_nr >= 20.0 && gap <= 3.0 && elapsed < 120.0;
    report(
        3,
        pass,
        &format!(
            "final-second NR {final_nr:.2} dB (>= 20), Wiener oracle {wiener_nr:.2} dB \
             (gap {gap:.2} <= 3 dB), {elapsed:.1} s (< 120 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4 — adaptive labelling vs. generating sets and the LS oracle
// ---------------------------------------------------------------------------

/// Normal-equation oracle for the labelling weights: least squares of
/// d = x∗p against the per-band regressors y_m = (x∗c_m)∗s.
fn label_oracle(x: &Signal, lab: &Lab) -> Vec<f64> {
    let d = fir_filter(x, &lab.p);
    let regressors: Vec<Signal> = (1..=N_BANDS)
        .map(|m| fir_filter(&fir_filter(x, lab.bank.filter(m)), &lab.s))
        .collect();
    let mut gram = vec![0.0; N_BANDS * N_BANDS];
    let mut rhs = vec![0.0; N_BANDS];
    for i in 0..N_BANDS {
        for j in 0..=i {
            let dot: f64 = regressors[i]
                .samples()
                .iter()
                .zip(regressors[j].samples())
                .map(|(a, b)| a * b)
                .sum();
            gram[i * N_BANDS + j] = dot;
            gram[j * N_BANDS + i] = dot;
        }
        rhs[i] = d
            .samples()
            .iter()
            .zip(regressors[i].samples())
            .map(|(a, b)| a * b)
            .sum();
    }
    spd_solve(gram, N_BANDS, rhs)
}

#[test]
fn criterion_4_adaptive_labelling() {
    let lab = lab();
    let start = Instant::now();
    let mechanism =
        LabelMechanism::new(&lab.bank, &lab.p, &lab.s, FS as usize, LabelConfig::default())
            .unwrap();

    let total = 200u64;
    let mut exact = 0usize;
    let mut worst_gap = 0.0f64;
    for i in 0..total {
        let mut rng = Rng::new(Rng::derive(0xACC4, i));
        let k = 1 + rng.below(3);
        let mut band_set: Vec<usize> = rng
            .distinct_below(k, N_BANDS)
            .into_iter()
            .map(|b| b + 1)
            .collect();
        band_set.sort_unstable();
        let gains: Vec<f64> = band_set.iter().map(|_| rng.range_f64(0.5, 1.0)).collect();
        let spec = TrackSpec {
            seed: rng.next_u64(),
            band_set: band_set.clone(),
            gains,
            dur_s: 1.0,
            fs_hz: FS,
        };
        let x = synth_track(&spec, &lab.bank).unwrap();

        let g = mechanism.label(&x).unwrap();
        if binarize(&g).unwrap().active_bands() == band_set {
            exact += 1;
        }
        let oracle = label_oracle(&x, lab);
        worst_gap = worst_gap.max(linf(g.g().iter().zip(&oracle).map(|(a, b)| a - b)));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let rate = exact as f64 / total as f64;
    let pass = rate >= 0.95 && worst_gap < 0.05 && elapsed < 120.0;
    report(
        4,
        pass,
        &format!(
            "labels match generating sets on {exact}/{total} tracks ({:.1}% >= 95%), \
             worst •∞ gap to the normal-equation oracle {worst_gap:.3} (< 0.05), \
             {elapsed:.1} s (< 120 s)",
            rate * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5 — CNN gradients, serialization, desk-scale accuracy
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_cnn_training() {
    let start = Instant::now();

    // Gradient check across every layer type (the probe model shares the
    // full architecture; 384 samples keeps all feature maps length >= 2).
    let probe = CnnModel::new(7, 6).unwrap();
    let mut rng = Rng::new(0xACC5);
    let input: Vec<f64> = (0..384).map(|_| rng.uniform_signed()).collect();
    let label = BinaryLabel(vec![1, 0, 1, 0, 1, 0]);
    let fd_err = finite_difference_check(&probe, &input, &label, 200, 11).unwrap();

    // Bit-exact serialization round trip: container bytes and eval outputs.
    let bytes = model_to_bytes(&probe);
    let reloaded = model_from_bytes(&bytes).unwrap();
    let bytes_ok = model_to_bytes(&reloaded) == bytes;
    let out_a = probe.forward(&input, Mode::Eval).unwrap();
    let out_b = reloaded.forward(&input, Mode::Eval).unwrap();
    let outputs_ok = out_a
        .iter()
        .zip(&out_b)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Desk-scale training (cached after the first run).
    let trained = trained();
    let summary = &trained.summary;
    let params = param_count(&trained.model);

    let elapsed = start.elapsed().as_secs_f64();
    let runtime_ok = !trained.built_now || elapsed < 900.0;
    let pass = fd_err < 1e-4
        && bytes_ok
        && outputs_ok
        && summary.val_bit_accuracy >= 0.95
        && summary.epochs_run <= summary.epoch_budget
        && params <= 250_000
        && runtime_ok;
    report(
        5,
        pass,
        &format!(
            "finite-difference error {fd_err:.2e} (< 1e-4), serialization bit-exact ({}), \
             val per-label accuracy {:.4} (>= 0.95) at epoch {}/{} on 2000/200 tracks, \
             {params} parameters (<= 250k), {elapsed:.0} s{} (< 900 s)",
            bytes_ok && outputs_ok,
            summary.val_bit_accuracy,
            summary.best_epoch,
            summary.epochs_run,
            if trained.built_now { "" } else { " [cached model]" }
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — frame loop: silent first frame, then broadband-level NR
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_frame_loop() {
    let lab = lab();
    let trained = trained();
    let start = Instant::now();

    // Stationary single-band noise, six seconds. The comb sits exactly on
    // the filter bank's frequency grid, so a correctly labelled frame is
    // controlled as well as the broadband filter controls it.
    let band = 6;
    let noise = gen_subband_comb(0xACC6, lab.bank.plan(), &[band], &[1.0], 6.0, FS).unwrap();
    let cfg = FxlmsConfig::new(MU, N_TAPS).unwrap();

    let sc = SimScenario {
        noise: &noise,
        primary: &lab.p,
        secondary: &lab.s,
        frame_s: 1.0,
        bank: &lab.bank,
        model: Some(&trained.model),
        candidates: &[],
        fxlms: cfg.clone(),
    };
    let gfanc = simulate_gfanc(&sc).unwrap();

    // Broadband reference: the library's selector with exactly one
    // candidate always applies the full pretrained filter from frame 1 on.
    let broadband_only = [lab.w.clone()];
    let sc_ref = SimScenario {
        model: None,
        candidates: &broadband_only,
        ..sc.clone()
    };
    let broadband = simulate_sfanc_lite(&sc_ref).unwrap();

    let first_ok = gfanc.nr.values_db()[0] == 0.0;
    let mut worst_shortfall = f64::NEG_INFINITY;
    for k in 1..gfanc.nr.values_db().len() {
        let shortfall = broadband.nr.values_db()[k] - gfanc.nr.values_db()[k];
        worst_shortfall = worst_shortfall.max(shortfall);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = first_ok && worst_shortfall <= 1.0 && elapsed < 60.0;
    report(
        6,
        pass,
        &format!(
            "frame 0 NR exactly 0 dB ({first_ok}), frames >= 1 within {worst_shortfall:.3} dB \
             of the broadband filter (<= 1 dB), {elapsed:.1} s (< 60 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 — method ordering on two-band noise
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_method_ordering() {
    let lab = lab();
    let trained = trained();
    let start = Instant::now();

    let bands = [4usize, 9];
    let noise =
        gen_subband_comb(0xACC7, lab.bank.plan(), &bands, &[1.0, 1.0], 10.0, FS).unwrap();

    // Selection library: each single sub filter plus the full broadband sum.
    let mut candidates: Vec<FirFilter> = (1..=N_BANDS)
        .map(|m| lab.bank.filter(m).clone())
        .collect();
    candidates.push(reconstruct(&lab.bank));

    let sc = SimScenario {
        noise: &noise,
        primary: &lab.p,
        secondary: &lab.s,
        frame_s: 1.0,
        bank: &lab.bank,
        model: Some(&trained.model),
        candidates: &candidates,
        fxlms: FxlmsConfig::new(MU, N_TAPS).unwrap(),
    };
    let comparison = compare(
        &sc,
        &[Method::Gfanc, Method::GfancOracle, Method::SfancLite, Method::Fxlms],
    )
    .unwrap();

    let mean = |method: Method| -> f64 {
        let result = comparison
            .results
            .iter()
            .find(|r| r.method == method)
            .unwrap();
        result.nr.mean_db(1, result.nr.values_db().len())
    };
    let gfanc_mean = mean(Method::Gfanc);
    let sfanc_mean = mean(Method::SfancLite);
    let fxlms_mean = mean(Method::Fxlms);

    // Identical steady-state cancellation ties GFANC with a broadband
    // selection to ~1e-12 dB; the epsilon only absorbs that rounding, never
    // a real ordering violation.
    const EPS_DB: f64 = 1e-6;
    let mean_ok = gfanc_mean >= sfanc_mean - EPS_DB && gfanc_mean >= fxlms_mean;

    let oracle_nr = &comparison
        .results
        .iter()
        .find(|r| r.method == Method::GfancOracle)
        .unwrap()
        .nr;
    let sfanc_nr = &comparison
        .results
        .iter()
        .find(|r| r.method == Method::SfancLite)
        .unwrap()
        .nr;
    let mut dominance_ok = true;
    let mut worst_margin = f64::INFINITY;
    for k in 1..oracle_nr.values_db().len() {
        let margin = oracle_nr.values_db()[k] - sfanc_nr.values_db()[k];
        worst_margin = worst_margin.min(margin);
        dominance_ok &= margin >= -EPS_DB;
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = mean_ok && dominance_ok && elapsed < 120.0;
    report(
        7,
        pass,
        &format!(
            "mean NR frames 1-9: GFANC {gfanc_mean:.2} dB >= SFANC-lite {sfanc_mean:.2} dB \
             and >= FxLMS {fxlms_mean:.2} dB ({mean_ok}); oracle-label per-frame dominance \
             holds with worst margin {worst_margin:.2e} dB ({dominance_ok}); \
             {elapsed:.1} s (< 120 s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 — byte-identical re-run
// ---------------------------------------------------------------------------

/// Runs the whole pipeline shape (pretrain → decompose → dataset → train →
/// compare) at the lab's geometry but shortened durations/counts, writing
/// every artifact kind the full pipeline writes.
fn pipeline_into(dir: &Path, root_seed: u64) {
    let (p, s) = acoustic_paths();
    let x = white_noise(root_seed, 6 * FS as usize, FS).unwrap();
    let cfg = FxlmsConfig::new(MU, N_TAPS).unwrap();
    let w = fxlms_pretrain(&x, &p, &s, &cfg, 1).unwrap();
    io::ensure_dir(dir).unwrap();
    io::write_f32_file(dir.join("broadband.f32"), &io::to_f32(w.coeffs())).unwrap();

    let bank = decompose(&w, N_BANDS).unwrap();
    save_bank(dir.join("bank"), &bank).unwrap();

    let data_dir = dir.join("dataset");
    io::ensure_dir(&data_dir).unwrap();
    let config = DatasetConfig {
        root_seed: Rng::derive(root_seed, 1),
        counts: SplitCounts {
            train: 24,
            val: 6,
            test: 0,
        },
        out_dir: data_dir.clone(),
        bank_path: "pipeline bank".into(),
        paths_path: "pipeline paths".into(),
        label: LabelConfig::default(),
    };
    build_dataset(&config, &bank, &p, &s).unwrap();

    let manifest = load_manifest(&data_dir).unwrap();
    let train_set = cnn::load_split(&data_dir, &manifest, Split::Train).unwrap();
    let val_set = cnn::load_split(&data_dir, &manifest, Split::Val).unwrap();
    let train_cfg = TrainConfig {
        epochs: 2,
        seed: Rng::derive(root_seed, 2),
        val_target: None,
        ..TrainConfig::default()
    };
    let outcome = cnn::train(
        CnnModel::new(train_cfg.seed, N_BANDS).unwrap(),
        &train_set,
        &val_set,
        &train_cfg,
    )
    .unwrap();
    cnn::write_metrics_csv(dir.join("metrics.csv"), &outcome.metrics).unwrap();

    let noise =
        gen_subband_comb(Rng::derive(root_seed, 3), bank.plan(), &[3, 11], &[1.0, 0.8], 4.0, FS)
            .unwrap();
    let candidates = [reconstruct(&bank)];
    let sc = SimScenario {
        noise: &noise,
        primary: &p,
        secondary: &s,
        frame_s: 1.0,
        bank: &bank,
        model: Some(&outcome.model),
        candidates: &candidates,
        fxlms: FxlmsConfig::new(MU, N_TAPS).unwrap(),
    };
    let comparison = compare(&sc, &[Method::Gfanc, Method::SfancLite, Method::Fxlms]).unwrap();
    anclab::engine::write_compare_csv(dir.join("compare.csv"), &comparison).unwrap();
}

/// Collects every file under `root`, as paths relative to it.
fn walk_files(root: &Path) -> Vec<PathBuf> {
    fn visit(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                visit(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    visit(root, root, &mut out);
    out.sort();
    out
}

#[test]
fn criterion_8_rerun_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("run_a");
    let dir_b = tmp.path().join("run_b");
    let root_seed = 0xACC8;
    pipeline_into(&dir_a, root_seed);
    pipeline_into(&dir_b, root_seed);

    let files = walk_files(&dir_a);
    assert!(
        files.iter().any(|f| f.extension().is_some_and(|e| e == "f32"))
            && files.iter().any(|f| f.extension().is_some_and(|e| e == "csv")),
        "pipeline produced no comparable artifacts"
    );
    let mut mismatched = Vec::new();
    for file in &files {
        let a = std::fs::read(dir_a.join(file)).unwrap();
        let b = std::fs::read(dir_b.join(file)).ok();
        if b.as_deref() != Some(a.as_slice()) {
            mismatched.push(file.display().to_string());
        }
    }
    let same_sets = files == walk_files(&dir_b);

    let elapsed = start.elapsed().as_secs_f64();
    let pass = mismatched.is_empty() && same_sets;
    report(
        8,
        pass,
        &format!(
            "pipeline re-run from seed {root_seed:#x}: {} artifacts byte-identical \
             (mismatches: {:?}), {elapsed:.1} s",
            files.len(),
            mismatched
        ),
    );
}
