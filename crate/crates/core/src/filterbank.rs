//! Decomposition of a broadband control filter into sub-band filters that sum
//! back to the original exactly (perfect reconstruction).
//!
//! The filter's DFT bins are partitioned into disjoint bands; each sub filter
//! is the inverse transform of the spectrum masked to one band. Masks are
//! brickwall (exact zeroing, no tapering), and every band's bin set is closed
//! under conjugate mirroring so each sub filter comes back real.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::signal::{dft, idft, FirFilter, Signal, Spectrum};

/// Assignment of DFT bin indices to bands.
///
/// With `I = floor(N / 2M)` bins of one-sided bandwidth per band, band `m`
/// (1-based, `m < M`) owns bins `[(m-1)I+1, mI]` plus the mirror range
/// `[N-mI, N-1-(m-1)I]`; the final band owns everything between
/// `(M-1)I+1` and `N-1-(M-1)I` (including Nyquist for even `N`). Bin 0 (DC)
/// is assigned to band 1 so the bands cover every bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    n_taps: usize,
    n_bands: usize,
    bandwidth_bins: usize,
    ranges: Vec<Vec<usize>>,
}

impl BandPlan {
    pub fn n_taps(&self) -> usize {
        self.n_taps
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    /// One-sided band width in bins (`I`).
    pub fn bandwidth_bins(&self) -> usize {
        self.bandwidth_bins
    }

    /// Sorted bin indices of band `m` (1-based).
    pub fn range(&self, band: usize) -> &[usize] {
        &self.ranges[band - 1]
    }

    pub fn ranges(&self) -> &[Vec<usize>] {
        &self.ranges
    }

    /// The band (1-based) owning a bin, if any.
    pub fn band_of(&self, bin: usize) -> Option<usize> {
        self.ranges
            .iter()
            .position(|r| r.binary_search(&bin).is_ok())
            .map(|i| i + 1)
    }
}

/// Computes the bin partition for a filter of `n_taps` coefficients split
/// into `n_bands` bands.
pub fn band_ranges(n_taps: usize, n_bands: usize) -> Result<BandPlan> {
    if n_bands < 1 {
        return Err(Error::invalid("need at least one band"));
    }
    if n_taps < 2 * n_bands {
        return Err(Error::invalid(format!(
            "{n_taps} taps cannot host {n_bands} bands (bandwidth would be zero)"
        )));
    }
    let n = n_taps;
    let m_total = n_bands;
    let i = n / (2 * m_total);

    let mut ranges = Vec::with_capacity(m_total);
    for m in 1..=m_total {
        let mut bins: Vec<usize> = Vec::new();
        if m == 1 {
            bins.push(0);
        }
        if m < m_total {
            bins.extend((m - 1) * i + 1..=m * i);
            bins.extend(n - m * i..=n - 1 - (m - 1) * i);
        } else {
            bins.extend((m_total - 1) * i + 1..=n - 1 - (m_total - 1) * i);
        }
        bins.sort_unstable();
        ranges.push(bins);
    }

    Ok(BandPlan {
        n_taps,
        n_bands,
        bandwidth_bins: i,
        ranges,
    })
}

/// A broadband filter split into band-limited sub filters.
#[derive(Debug, Clone, PartialEq)]
pub struct SubFilterBank {
    plan: BandPlan,
    filters: Vec<FirFilter>,
}

impl SubFilterBank {
    /// Builds a bank from externally loaded parts, validating consistency.
    pub fn from_parts(plan: BandPlan, filters: Vec<FirFilter>) -> Result<Self> {
        if filters.len() != plan.n_bands() {
            return Err(Error::invalid(format!(
                "plan declares {} bands but {} filters were provided",
                plan.n_bands(),
                filters.len()
            )));
        }
        if let Some(bad) = filters.iter().find(|f| f.len() != plan.n_taps()) {
            return Err(Error::invalid(format!(
                "sub filter length {} does not match plan taps {}",
                bad.len(),
                plan.n_taps()
            )));
        }
        Ok(SubFilterBank { plan, filters })
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    /// Sub filters in band order; band `m` (1-based) is `filters()[m-1]`.
    pub fn filters(&self) -> &[FirFilter] {
        &self.filters
    }

    /// Sub filter of band `m` (1-based).
    pub fn filter(&self, band: usize) -> &FirFilter {
        &self.filters[band - 1]
    }

    pub fn n_bands(&self) -> usize {
        self.plan.n_bands()
    }

    pub fn n_taps(&self) -> usize {
        self.plan.n_taps()
    }
}

/// Splits `c` into `n_bands` sub filters by masking its spectrum over the
/// band plan. The sub filters sum to `c` coefficient-wise.
pub fn decompose(c: &FirFilter, n_bands: usize) -> Result<SubFilterBank> {
    let plan = band_ranges(c.len(), n_bands)?;
    let spectrum = dft(c.coeffs())?;
    let zero = Complex::new(0.0, 0.0);

    let mut filters = Vec::with_capacity(n_bands);
    for band in 1..=n_bands {
        let mut bins = vec![zero; c.len()];
        for &k in plan.range(band) {
            bins[k] = spectrum.bins()[k];
        }
        let coeffs = idft(&Spectrum::new(bins)?)?;
        filters.push(FirFilter::new(coeffs)?);
    }

    Ok(SubFilterBank { plan, filters })
}

/// Coefficient-wise sum of all sub filters; the inverse of [`decompose`].
pub fn reconstruct(bank: &SubFilterBank) -> FirFilter {
    let mut coeffs = vec![0.0; bank.n_taps()];
    for filter in bank.filters() {
        for (acc, &c) in coeffs.iter_mut().zip(filter.coeffs()) {
            *acc += c;
        }
    }
    FirFilter::new(coeffs).expect("sum of finite filters is finite")
}

/// Random-phase sinusoid comb whose tones sit exactly on the plan's DFT grid.
///
/// Every tone frequency is `k/N` cycles per sample for a bin `k` owned by a
/// requested band, so an N-tap sub filter of any *other* band has exactly
/// zero steady-state response to the signal: out-of-band leakage is limited
/// to the convolution onset transient. This makes the comb the cleanest
/// stimulus for exercising band-selective behaviour (the white-noise-through-
/// sub-filter generator leaks a few percent into neighbouring bands through
/// the sub filters' spectral ripple).
///
/// DC is skipped if a band owns it; gains are per entry of `band_set`
/// (1-based band indices). Output is normalized to unit peak.
pub fn gen_subband_comb(
    seed: u64,
    plan: &BandPlan,
    band_set: &[usize],
    gains: &[f64],
    dur_s: f64,
    fs_hz: u32,
) -> Result<Signal> {
    if band_set.is_empty() {
        return Err(Error::invalid("band set must not be empty"));
    }
    if band_set.len() != gains.len() {
        return Err(Error::invalid("need one gain per requested band"));
    }
    if band_set
        .iter()
        .any(|&m| m == 0 || m > plan.n_bands())
    {
        return Err(Error::invalid(format!(
            "band indices must lie in [1, {}]",
            plan.n_bands()
        )));
    }
    let n_samples = (dur_s * fs_hz as f64).round() as usize;
    if n_samples == 0 {
        return Err(Error::invalid("duration too short for one sample"));
    }

    // Every tone completes a whole number of cycles in N samples, so the comb
    // is exactly N-periodic: synthesize one period and tile it.
    let n = plan.n_taps();
    let mut rng = Rng::new(Rng::derive(seed, 0x636f_6d62));
    let mut period = vec![0.0; n];
    for (&band, &gain) in band_set.iter().zip(gains) {
        // Mirror bins duplicate the tone frequencies; keep the lower half.
        for &k in plan.range(band) {
            if k == 0 || 2 * k > n {
                continue;
            }
            let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let phase = 2.0 * std::f64::consts::PI * rng.next_f64();
            for (t, out) in period.iter_mut().enumerate() {
                *out += gain * (omega * t as f64 + phase).cos();
            }
        }
    }
    let peak = period.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::invalid(
            "requested bands contain no usable tone bins",
        ));
    }
    let samples: Vec<f64> = (0..n_samples).map(|t| period[t % n] / peak).collect();
    Signal::new(samples, fs_hz)
}

/// On-disk layout version of a persisted bank directory.
pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format_version: u32,
    #[serde(flatten)]
    plan: BandPlan,
}

/// Persists `bank` as a directory: `plan.json` describing the bin partition
/// plus one `band_<m>.f32` coefficient file per band (1-based, little-endian
/// float32).
pub fn save_bank(dir: impl AsRef<std::path::Path>, bank: &SubFilterBank) -> Result<()> {
    let dir = dir.as_ref();
    crate::io::ensure_dir(dir)?;
    let plan_file = PlanFile {
        format_version: BANK_FORMAT_VERSION,
        plan: bank.plan().clone(),
    };
    crate::io::write_atomic(dir.join("plan.json"), &serde_json::to_vec_pretty(&plan_file)?)?;
    for (m, filter) in (1..).zip(bank.filters()) {
        crate::io::write_f32_file(
            dir.join(format!("band_{m}.f32")),
            &crate::io::to_f32(filter.coeffs()),
        )?;
    }
    Ok(())
}

/// Loads a bank saved by [`save_bank`], validating the plan against a freshly
/// recomputed partition and every coefficient file against the plan's shape.
pub fn load_bank(dir: impl AsRef<std::path::Path>) -> Result<SubFilterBank> {
    let dir = dir.as_ref();
    let plan_file: PlanFile = serde_json::from_slice(&std::fs::read(dir.join("plan.json"))?)?;
    if plan_file.format_version != BANK_FORMAT_VERSION {
        return Err(Error::format(
            "plan.json",
            format!("unsupported format_version {}", plan_file.format_version),
        ));
    }
    let plan = plan_file.plan;
    let expected = band_ranges(plan.n_taps(), plan.n_bands())?;
    if plan != expected {
        return Err(Error::format(
            "plan.json",
            "ranges do not match the partition recomputed from its own N and M",
        ));
    }
    let mut filters = Vec::with_capacity(plan.n_bands());
    for m in 1..=plan.n_bands() {
        let coeffs = crate::io::read_f32_file(dir.join(format!("band_{m}.f32")))?;
        filters.push(FirFilter::new(crate::io::to_f64(&coeffs))?);
    }
    SubFilterBank::from_parts(plan, filters)
}
