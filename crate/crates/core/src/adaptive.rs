//! Filtered-reference LMS machinery.
//!
//! Three consumers share the same core update: pretraining the broadband
//! control filter, the runtime FxLMS baseline, and the labelling mechanism
//! that fits one combination weight per sub band and thresholds the result
//! into a binary label.
//!
//! Simulation convention: the disturbance is the reference filtered through
//! the primary path, `d = x * p`, and the secondary-path estimate used for
//! reference filtering is the true `s` (perfect-estimate assumption).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::filterbank::SubFilterBank;
use crate::io;
use crate::linalg::{axpy, dot};
use crate::signal::{fir_filter, FftConvolver, FirFilter, Signal};

/// Sample-wise FxLMS configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FxlmsConfig {
    /// Adaptation step size (mu).
    pub step_size: f64,
    /// Length of the adaptive filter.
    pub n_taps: usize,
    /// Leaky-LMS coefficient in [0, 1); 0 disables leakage.
    pub leak: f64,
}

/// Step size used throughout the experiments.
pub const DEFAULT_FXLMS_STEP: f64 = 1e-4;

/// Default number of passes over the training noise when pre-training the
/// broadband control filter.
///
/// Calibrated on 30 s of white noise through the standard bandpass paths at
/// the default step size: one pass lands 5.5 dB short of the block
/// least-squares optimum, two passes 2.5 dB, three passes 1.5 dB. Three
/// passes buy a comfortable margin for ~0.8 s of extra compute.
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 3;

/// Abort threshold on the adaptive filter's max coefficient magnitude.
const FXLMS_DIVERGENCE_LIMIT: f64 = 1e6;

/// Abort threshold on a combination weight's magnitude.
const LABEL_DIVERGENCE_LIMIT: f64 = 1e3;

impl FxlmsConfig {
    pub fn new(step_size: f64, n_taps: usize) -> Result<Self> {
        let cfg = FxlmsConfig {
            step_size,
            n_taps,
            leak: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step size must be finite and non-negative"));
        }
        if self.n_taps == 0 {
            return Err(Error::invalid("adaptive filter needs at least one tap"));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::invalid("leak must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Real combination weights, one per sub band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn g(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Thresholded 0/1 weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabel(pub Vec<u8>);

impl BinaryLabel {
    pub fn t(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based indices of the active bands.
    pub fn active_bands(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == 1)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Elementwise threshold at 0.5 (ties map to 1).
pub fn binarize(g: &WeightVector) -> Result<BinaryLabel> {
    if g.g().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("weight vector contains NaN"));
    }
    Ok(BinaryLabel(
        g.g().iter().map(|&v| u8::from(v >= 0.5)).collect(),
    ))
}

// ---------------------------------------------------------------------------
// FxLMS core
// ---------------------------------------------------------------------------

/// One FxLMS pass over `(x, d, x_filtered)` starting from `w` (held reversed
/// in `w_rev`), collecting the residual into `residual` when provided.
///
/// The pass starts from silent delay lines, so repeated passes over the same
/// data each see the identical least-squares problem.
fn fxlms_pass(
    x: &[f64],
    d: &[f64],
    x_filtered_padded: &[f64],
    x_padded: &[f64],
    s: &[f64],
    cfg: &FxlmsConfig,
    w_rev: &mut [f64],
    residual: Option<&mut Vec<f64>>,
) -> Result<()> {
    let n = cfg.n_taps;
    let s_rev: Vec<f64> = s.iter().rev().copied().collect();
    let mut y_padded = vec![0.0; s.len() - 1 + x.len()];
    let mu = cfg.step_size;
    let leak_scale = 1.0 - mu * cfg.leak;

    let mut residual = residual;
    if let Some(r) = residual.as_deref_mut() {
        r.clear();
    }

    for sample in 0..x.len() {
        let y = dot(w_rev, &x_padded[sample..sample + n]);
        y_padded[sample + s.len() - 1] = y;
        let anti = dot(&s_rev, &y_padded[sample..sample + s.len()]);
        let e = d[sample] - anti;
        if let Some(r) = residual.as_deref_mut() {
            r.push(e);
        }
        if cfg.leak > 0.0 {
            for w in w_rev.iter_mut() {
                *w *= leak_scale;
            }
        }
        axpy(w_rev, mu * e, &x_filtered_padded[sample..sample + n]);

        if sample % 2048 == 2047 {
            let peak = w_rev.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if !peak.is_finite() || peak > FXLMS_DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    quantity: "FxLMS filter coefficient",
                    value: peak,
                });
            }
        }
    }

    let peak = w_rev.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !peak.is_finite() || peak > FXLMS_DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            quantity: "FxLMS filter coefficient",
            value: peak,
        });
    }
    Ok(())
}

fn padded(prefix_zeros: usize, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; prefix_zeros + values.len()];
    out[prefix_zeros..].copy_from_slice(values);
    out
}

/// Trains a broadband control filter with sample-wise FxLMS, cycling over the
/// training signal `epochs` times (each pass restarts from silent delay lines
/// but keeps the learned coefficients).
pub fn fxlms_pretrain(
    x: &Signal,
    p: &FirFilter,
    s: &FirFilter,
    cfg: &FxlmsConfig,
    epochs: usize,
) -> Result<FirFilter> {
    cfg.validate()?;
    if epochs == 0 {
        return Err(Error::invalid("need at least one training epoch"));
    }
    let d = fir_filter(x, p);
    let x_filtered = fir_filter(x, s);
    let x_padded = padded(cfg.n_taps - 1, x.samples());
    let xf_padded = padded(cfg.n_taps - 1, x_filtered.samples());

    let mut w_rev = vec![0.0; cfg.n_taps];
    for _ in 0..epochs {
        fxlms_pass(
            x.samples(),
            d.samples(),
            &xf_padded,
            &x_padded,
            s.coeffs(),
            cfg,
            &mut w_rev,
            None,
        )?;
    }
    w_rev.reverse();
    FirFilter::new(w_rev)
}

/// Runs sample-synchronous FxLMS from `w0` over one pass of `x`, returning
/// the residual trace and the final filter.
pub fn fxlms_run(
    x: &Signal,
    p: &FirFilter,
    s: &FirFilter,
    cfg: &FxlmsConfig,
    w0: &FirFilter,
) -> Result<(Signal, FirFilter)> {
    cfg.validate()?;
    if w0.len() != cfg.n_taps {
        return Err(Error::invalid(format!(
            "initial filter has {} taps, config says {}",
            w0.len(),
            cfg.n_taps
        )));
    }
    let d = fir_filter(x, p);
    let x_filtered = fir_filter(x, s);
    let x_padded = padded(cfg.n_taps - 1, x.samples());
    let xf_padded = padded(cfg.n_taps - 1, x_filtered.samples());

    let mut w_rev: Vec<f64> = w0.coeffs().iter().rev().copied().collect();
    let mut residual = Vec::with_capacity(x.len());
    fxlms_pass(
        x.samples(),
        d.samples(),
        &xf_padded,
        &x_padded,
        s.coeffs(),
        cfg,
        &mut w_rev,
        Some(&mut residual),
    )?;
    w_rev.reverse();
    Ok((
        Signal::new(residual, x.sample_rate_hz())?,
        FirFilter::new(w_rev)?,
    ))
}

// ---------------------------------------------------------------------------
// Adaptive labelling
// ---------------------------------------------------------------------------

/// Tuning for the labelling LMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Normalized step scale: the effective step is
    /// `mu_scale / (M * mean power of the filtered sub outputs)`.
    pub mu_scale: f64,
    /// Maximum passes over the frame.
    pub passes: usize,
    /// Early-stop threshold on the largest per-pass weight change.
    pub tol: f64,
    /// Leaky-LMS coefficient, expressed as a fraction of the total stream
    /// power; 0 disables the leak. See [`LabelConfig::ridged`] for when a
    /// nonzero value is the right tool.
    pub leak: f64,
}

/// Labelling step scale, calibrated jointly with the pass budget and stop
/// tolerance below. Band-limited noise generated through a sub filter leaks
/// a little energy into neighbouring bands, and that leakage slowly drags
/// every *inactive* weight towards 1 (at roughly 0.004/pass here) while
/// weakly excited *active* bands (gain 0.25) need many effective passes to
/// reach 1. This scale keeps the per-pass drift just below the stop
/// tolerance, so adaptation halts as soon as the active weights settle;
/// larger scales (e.g. 0.05) let inactive weights saturate at 1 within the
/// pass budget and can diverge outright on narrowband frames.
pub const DEFAULT_LABEL_MU_SCALE: f64 = 1e-4;

/// Pass budget; generous because the early stop normally fires first.
pub const DEFAULT_LABEL_PASSES: usize = 30;

/// Early-stop threshold on the largest per-pass weight change. Must sit
/// above the inactive-band drift rate (see [`DEFAULT_LABEL_MU_SCALE`]) or
/// the stop never fires and the drift accumulates over the full budget.
pub const DEFAULT_LABEL_TOL: f64 = 4e-3;

/// Relative ridge used by [`LabelConfig::ridged`]; see there.
pub const DEFAULT_LABEL_RIDGE: f64 = 0.06;

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            mu_scale: DEFAULT_LABEL_MU_SCALE,
            passes: DEFAULT_LABEL_PASSES,
            tol: DEFAULT_LABEL_TOL,
            leak: 0.0,
        }
    }
}

impl LabelConfig {
    /// Default tuning plus a relative ridge, for labelling broadband-textured
    /// frames (filtered noise rather than pure tones).
    ///
    /// On such frames every sub stream captures a few percent of the frame's
    /// power through the sub filters' inter-bin sidelobes, and because the
    /// disturbance lies exactly in the streams' span (the primary path is the
    /// reconstructed bank cascaded with the secondary path), open-ended LMS
    /// drags *every* weight towards 1 at a rate proportional to its stream
    /// power. The leak turns the fixed point into
    /// `g_m = P_m / (P_m + leak * total_power)`, so binarize keeps exactly
    /// the bands whose power share exceeds the ridge: sidelobe shares
    /// (0.02–0.05 measured across bands) stay off while the weakest
    /// legitimate band (gain 0.5 against three gain-1 siblings, share 0.077)
    /// stays on.
    pub fn ridged() -> Self {
        LabelConfig {
            leak: DEFAULT_LABEL_RIDGE,
            ..LabelConfig::default()
        }
    }
}

/// Reusable labelling mechanism: caches the per-band convolvers so that many
/// frames can be labelled against one bank and path pair.
pub struct LabelMechanism {
    band_convs: Vec<FftConvolver>,
    p_conv: FftConvolver,
    s_conv: FftConvolver,
    s_coeffs: Vec<f64>,
    frame_len: usize,
    cfg: LabelConfig,
}

impl LabelMechanism {
    pub fn new(
        bank: &SubFilterBank,
        p: &FirFilter,
        s: &FirFilter,
        frame_len: usize,
        cfg: LabelConfig,
    ) -> Result<Self> {
        if frame_len == 0 {
            return Err(Error::invalid("frame length must be positive"));
        }
        if !(cfg.mu_scale >= 0.0) {
            return Err(Error::invalid("mu_scale must be non-negative"));
        }
        if cfg.passes == 0 {
            return Err(Error::invalid("need at least one pass"));
        }
        if !(cfg.leak >= 0.0) || cfg.mu_scale * cfg.leak >= 1.0 {
            return Err(Error::invalid(
                "leak must be non-negative and mu_scale * leak < 1",
            ));
        }
        Ok(LabelMechanism {
            band_convs: bank
                .filters()
                .iter()
                .map(|f| FftConvolver::new(f.coeffs(), frame_len))
                .collect(),
            p_conv: FftConvolver::new(p.coeffs(), frame_len),
            s_conv: FftConvolver::new(s.coeffs(), frame_len),
            s_coeffs: s.coeffs().to_vec(),
            frame_len,
            cfg,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.band_convs.len()
    }

    /// Fits the combination weights for one frame.
    ///
    /// Per sub band the frame is filtered once (`y_m`), and again through the
    /// secondary path (`y'_m`); the M-weight LMS then iterates over the frame
    /// until the per-pass weight change drops below `tol` or the pass budget
    /// runs out. Passes restart from silent delay lines, so the fixed point
    /// is the least-squares fit of the precomputed streams.
    pub fn label(&self, x: &Signal) -> Result<WeightVector> {
        if x.len() != self.frame_len {
            return Err(Error::invalid(format!(
                "frame has {} samples, mechanism expects {}",
                x.len(),
                self.frame_len
            )));
        }
        let m = self.band_convs.len();
        let len = x.len();

        let d = self.p_conv.conv_truncated(x.samples());
        let sub_outputs: Vec<Vec<f64>> = self
            .band_convs
            .iter()
            .map(|c| c.conv_truncated(x.samples()))
            .collect();
        let filtered_outputs: Vec<Vec<f64>> = sub_outputs
            .iter()
            .map(|y| self.s_conv.conv_truncated(y))
            .collect();

        let mean_power: f64 = filtered_outputs
            .iter()
            .flat_map(|y| y.iter().map(|v| v * v))
            .sum::<f64>()
            / (m * len) as f64;
        if mean_power == 0.0 || self.cfg.mu_scale == 0.0 {
            return Ok(WeightVector(vec![0.0; m]));
        }
        let mu = self.cfg.mu_scale / (m as f64 * mean_power);

        let s_len = self.s_coeffs.len();
        let s_rev: Vec<f64> = self.s_coeffs.iter().rev().copied().collect();
        let mut g = vec![0.0; m];
        let mut combined_padded = vec![0.0; s_len - 1 + len];
        // With mu = mu_scale / (M * mean power), a ridge of leak * total
        // power reduces to this constant per-sample shrink.
        let shrink = 1.0 - self.cfg.mu_scale * self.cfg.leak;

        for _pass in 0..self.cfg.passes {
            let g_before = g.clone();
            combined_padded[..s_len - 1].fill(0.0);
            for n in 0..len {
                let combined: f64 = g
                    .iter()
                    .zip(&sub_outputs)
                    .map(|(gm, y)| gm * y[n])
                    .sum();
                combined_padded[n + s_len - 1] = combined;
                let anti = dot(&s_rev, &combined_padded[n..n + s_len]);
                let e = d[n] - anti;
                let scale = mu * e;
                for (gm, yf) in g.iter_mut().zip(&filtered_outputs) {
                    *gm = *gm * shrink + scale * yf[n];
                }
            }

            let peak = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if !peak.is_finite() || peak > LABEL_DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    quantity: "combination weight",
                    value: peak,
                });
            }
            let delta = g
                .iter()
                .zip(&g_before)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if delta < self.cfg.tol {
                break;
            }
        }

        Ok(WeightVector(g))
    }
}

/// One-shot convenience wrapper around [`LabelMechanism`].
pub fn label_adapt(
    x: &Signal,
    bank: &SubFilterBank,
    p: &FirFilter,
    s: &FirFilter,
    mu_scale: f64,
    passes: usize,
    tol: f64,
) -> Result<WeightVector> {
    LabelMechanism::new(
        bank,
        p,
        s,
        x.len(),
        LabelConfig {
            mu_scale,
            passes,
            tol,
            leak: 0.0,
        },
    )?
    .label(x)
}

// ---------------------------------------------------------------------------
// Broadband filter persistence
// ---------------------------------------------------------------------------

/// Provenance recorded next to a pretrained broadband filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadbandMeta {
    pub format_version: u32,
    pub taps: usize,
    pub fs_hz: u32,
    pub seed: u64,
    pub step_size: f64,
    pub epochs: usize,
    pub train_seconds: f64,
}

pub const BROADBAND_FORMAT_VERSION: u32 = 1;

/// Writes `broadband.f32` plus `meta.json` into `dir`.
pub fn save_broadband(dir: impl AsRef<Path>, w: &FirFilter, meta: &BroadbandMeta) -> Result<()> {
    io::ensure_dir(&dir)?;
    io::write_f32_file(dir.as_ref().join("broadband.f32"), &io::to_f32(w.coeffs()))?;
    io::write_atomic(
        dir.as_ref().join("meta.json"),
        &serde_json::to_vec_pretty(meta)?,
    )?;
    Ok(())
}

/// Loads a filter saved by [`save_broadband`].
pub fn load_broadband(dir: impl AsRef<Path>) -> Result<(FirFilter, BroadbandMeta)> {
    let meta: BroadbandMeta =
        serde_json::from_slice(&std::fs::read(dir.as_ref().join("meta.json"))?)?;
    if meta.format_version != BROADBAND_FORMAT_VERSION {
        return Err(Error::format(
            "meta.json",
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    let coeffs = io::to_f64(&io::read_f32_file(dir.as_ref().join("broadband.f32"))?);
    if coeffs.len() != meta.taps {
        return Err(Error::format(
            "broadband.f32",
            format!("expected {} taps, found {}", meta.taps, coeffs.len()),
        ));
    }
    Ok((FirFilter::new(coeffs)?, meta))
}
