//! Foundational signal types and operations: FIR filtering, DFT/IDFT,
//! acoustic-path design, synthetic noise, and evaluation metrics.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{fft_forward, fft_inverse, Fft, C64};
use crate::rng::Rng;

/// Maximum imaginary residual tolerated when an inverse DFT is expected to be
/// real-valued.
pub const IMAG_TOLERANCE: f64 = 1e-9;

/// A sampled real waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("signal must contain at least one sample"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::invalid("signal samples must be finite"));
        }
        Ok(Signal {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean square of the samples.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// A real FIR filter (also used for acoustic paths and generated controllers).
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    coeffs: Vec<f64>,
}

impl FirFilter {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("filter must have at least one tap"));
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("filter coefficients must be finite"));
        }
        Ok(FirFilter { coeffs })
    }

    /// All-zero filter (a disabled controller).
    pub fn zero(taps: usize) -> Self {
        assert!(taps >= 1);
        FirFilter {
            coeffs: vec![0.0; taps],
        }
    }

    /// Unit impulse at `pos`.
    pub fn impulse(taps: usize, pos: usize) -> Self {
        assert!(pos < taps);
        let mut coeffs = vec![0.0; taps];
        coeffs[pos] = 1.0;
        FirFilter { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    /// Sum of squared coefficients.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// Complex frequency response at `f_hz` for sample rate `fs_hz`.
    pub fn response_at(&self, f_hz: f64, fs_hz: u32) -> C64 {
        let omega = 2.0 * std::f64::consts::PI * f_hz / fs_hz as f64;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(n, &c)| c * Complex::new((omega * n as f64).cos(), -(omega * n as f64).sin()))
            .sum()
    }
}

/// Complex DFT of a real coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    bins: Vec<C64>,
}

impl Spectrum {
    pub fn new(bins: Vec<C64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::invalid("spectrum must have at least one bin"));
        }
        Ok(Spectrum { bins })
    }

    pub fn bins(&self) -> &[C64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Noise-reduction level per analysis window, in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct NrSeries {
    window_s: f64,
    values_db: Vec<f64>,
}

impl NrSeries {
    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn values_db(&self) -> &[f64] {
        &self.values_db
    }

    /// Mean over a window index range (e.g. skipping the uncontrolled window 0).
    pub fn mean_db(&self, from: usize, to_exclusive: usize) -> f64 {
        let slice = &self.values_db[from..to_exclusive];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Upper clamp for NR values when the residual has no energy.
pub const NR_CLAMP_DB: f64 = 120.0;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// FFT convolution with a cached kernel spectrum. Use this when the same
/// filter is applied to many signals of a known maximum length.
#[derive(Debug, Clone)]
pub struct FftConvolver {
    fft: Fft,
    kernel_spec: Vec<C64>,
    kernel_len: usize,
    max_input_len: usize,
}

impl FftConvolver {
    pub fn new(kernel: &[f64], max_input_len: usize) -> Self {
        assert!(!kernel.is_empty() && max_input_len >= 1);
        let n = next_pow2(max_input_len + kernel.len() - 1);
        let fft = Fft::new(n);
        let mut buf: Vec<C64> = kernel.iter().map(|&c| Complex::new(c, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        fft.forward(&mut buf);
        FftConvolver {
            fft,
            kernel_spec: buf,
            kernel_len: kernel.len(),
            max_input_len,
        }
    }

    fn conv(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        assert!(x.len() <= self.max_input_len, "input exceeds planned length");
        let n = self.fft.len();
        let mut buf: Vec<C64> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        self.fft.forward(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spec) {
            *b *= k;
        }
        self.fft.inverse(&mut buf);
        buf.iter().take(out_len).map(|c| c.re).collect()
    }

    /// Causal convolution truncated to the input length.
    pub fn conv_truncated(&self, x: &[f64]) -> Vec<f64> {
        self.conv(x, x.len())
    }

    /// Full convolution of length `x.len() + kernel_len - 1`.
    pub fn conv_full(&self, x: &[f64]) -> Vec<f64> {
        self.conv(x, x.len() + self.kernel_len - 1)
    }
}

fn conv_direct(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_len];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        let n_end = out_len.min(x.len() + k);
        for n in k..n_end {
            y[n] += hk * x[n - k];
        }
    }
    y
}

fn conv_dispatch(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    // Direct form wins for short kernels; FFT wins once the product of
    // lengths gets large. The cutoffs are coarse — both paths are exact to
    // rounding.
    if h.len() <= 48 || x.len().saturating_mul(h.len()) <= (1 << 18) {
        conv_direct(x, h, out_len)
    } else {
        FftConvolver::new(h, x.len()).conv(x, out_len)
    }
}

/// Causal linear convolution truncated to the input length (the streaming
/// semantics of a running controller): `y(n) = sum_k h(k) x(n-k)` with
/// `x(j) = 0` for `j < 0`.
pub fn fir_filter(x: &Signal, h: &FirFilter) -> Signal {
    Signal {
        samples: conv_dispatch(x.samples(), h.coeffs(), x.len()),
        sample_rate_hz: x.sample_rate_hz(),
    }
}

/// Full-length linear convolution (`x.len() + h.len() - 1` samples); the
/// reference semantics used by oracle tests and block solvers.
pub fn fir_filter_full(x: &Signal, h: &FirFilter) -> Signal {
    Signal {
        samples: conv_dispatch(x.samples(), h.coeffs(), x.len() + h.len() - 1),
        sample_rate_hz: x.sample_rate_hz(),
    }
}

// ---------------------------------------------------------------------------
// DFT / IDFT
// ---------------------------------------------------------------------------

/// Forward DFT of a real coefficient vector.
pub fn dft(coeffs: &[f64]) -> Result<Spectrum> {
    if coeffs.is_empty() {
        return Err(Error::invalid("cannot transform an empty vector"));
    }
    let buf: Vec<C64> = coeffs.iter().map(|&c| Complex::new(c, 0.0)).collect();
    Spectrum::new(fft_forward(&buf))
}

/// Inverse DFT expected to produce a real vector. Fails with
/// [`Error::NonRealResult`] when the spectrum is not conjugate-symmetric
/// (imaginary residual above [`IMAG_TOLERANCE`]).
pub fn idft(spectrum: &Spectrum) -> Result<Vec<f64>> {
    let time = fft_inverse(spectrum.bins());
    let max_imag = time.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if max_imag > IMAG_TOLERANCE {
        return Err(Error::NonRealResult {
            max_imag,
            tol: IMAG_TOLERANCE,
        });
    }
    Ok(time.into_iter().map(|c| c.re).collect())
}

// ---------------------------------------------------------------------------
// Acoustic-path design
// ---------------------------------------------------------------------------

/// Designs a linear-phase bandpass FIR with an explicit group delay.
///
/// The impulse response is a Hann-windowed ideal bandpass centered on
/// `delay_taps`; the window support is symmetric about that point and clipped
/// to the available taps, so the group delay equals `delay_taps` exactly. The
/// response is normalized to unity at the arithmetic band center, and the DC
/// and Nyquist gains are then nulled exactly by removing the constant and
/// alternating components over the support (truncation would otherwise leave
/// substantial leakage there for wide bands).
pub fn design_bandpass_fir(
    low_hz: f64,
    high_hz: f64,
    taps: usize,
    fs_hz: u32,
    delay_taps: usize,
) -> Result<FirFilter> {
    if fs_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let nyquist = fs_hz as f64 / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(Error::invalid(format!(
            "band limits must satisfy 0 < low < high < fs/2, got [{low_hz}, {high_hz}] at fs {fs_hz}"
        )));
    }
    if taps < 3 {
        return Err(Error::invalid("need at least 3 taps"));
    }
    if delay_taps >= taps {
        return Err(Error::invalid("delay_taps must be below taps"));
    }
    let halfw = delay_taps.min(taps - 1 - delay_taps);
    if halfw < 1 {
        return Err(Error::invalid(
            "delay_taps must leave at least one tap on each side of the group-delay center",
        ));
    }

    let fl = low_hz / fs_hz as f64;
    let fh = high_hz / fs_hz as f64;
    // 2f * sinc(2fk): the ideal lowpass impulse response at cutoff f.
    let lp = |f: f64, k: i64| -> f64 {
        if k == 0 {
            2.0 * f
        } else {
            (2.0 * std::f64::consts::PI * f * k as f64).sin() / (std::f64::consts::PI * k as f64)
        }
    };

    let mut h = vec![0.0; taps];
    for k in -(halfw as i64)..=(halfw as i64) {
        let ideal = lp(fh, k) - lp(fl, k);
        let window =
            0.5 * (1.0 + (std::f64::consts::PI * k as f64 / (halfw as f64 + 1.0)).cos());
        h[(delay_taps as i64 + k) as usize] = ideal * window;
    }

    // Unity gain at the band center.
    let filter = FirFilter { coeffs: h };
    let mid_gain = filter.response_at(0.5 * (low_hz + high_hz), fs_hz).norm();
    let mut h = filter.coeffs;
    if mid_gain <= f64::MIN_POSITIVE {
        return Err(Error::invalid("degenerate band: zero response at center"));
    }
    for c in h.iter_mut() {
        *c /= mid_gain;
    }

    // Remove the constant and alternating components over the support so the
    // DC and Nyquist gains are exactly zero.
    let n0 = delay_taps - halfw;
    let n1 = delay_taps + halfw;
    let support = &h[n0..=n1];
    let sign = |n: usize| if n % 2 == 0 { 1.0 } else { -1.0 };
    let h0: f64 = support.iter().sum();
    let hn: f64 = support
        .iter()
        .enumerate()
        .map(|(i, &c)| c * sign(n0 + i))
        .sum();
    let l = support.len() as f64;
    let s: f64 = (n0..=n1).map(sign).sum();
    let det = l * l - s * s;
    let u = (l * h0 - s * hn) / det;
    let v = (l * hn - s * h0) / det;
    for n in n0..=n1 {
        h[n] -= u + v * sign(n);
    }

    FirFilter::new(h)
}

// ---------------------------------------------------------------------------
// Noise generation
// ---------------------------------------------------------------------------

/// Seeded white noise, uniform in [-1, 1).
pub fn white_noise(seed: u64, num_samples: usize, fs_hz: u32) -> Result<Signal> {
    if num_samples == 0 {
        return Err(Error::invalid("noise length must be positive"));
    }
    let mut rng = Rng::new(seed);
    let samples = (0..num_samples).map(|_| rng.uniform_signed()).collect();
    Signal::new(samples, fs_hz)
}

/// Synthesizes band-limited noise by filtering one seeded white-noise stream
/// through the selected sub filters of `bank` and mixing with `gains`, then
/// normalizing to unit peak. Band indices are 1-based.
pub fn gen_subband_noise(
    seed: u64,
    band_set: &[usize],
    gains: &[f64],
    dur_s: f64,
    fs_hz: u32,
    bank: &[FirFilter],
) -> Result<Signal> {
    if band_set.is_empty() {
        return Err(Error::invalid("band set must not be empty"));
    }
    if band_set.len() != gains.len() {
        return Err(Error::invalid("one gain per band required"));
    }
    let num_samples = (dur_s * fs_hz as f64).round() as usize;
    if num_samples == 0 {
        return Err(Error::invalid("duration too short for one sample"));
    }
    for &band in band_set {
        if band == 0 || band > bank.len() {
            return Err(Error::invalid(format!(
                "band index {band} outside [1, {}]",
                bank.len()
            )));
        }
    }

    let white = white_noise(seed, num_samples, fs_hz)?;
    let mut acc = vec![0.0; num_samples];
    for (&band, &gain) in band_set.iter().zip(gains) {
        let filtered = fir_filter(&white, &bank[band - 1]);
        for (a, y) in acc.iter_mut().zip(filtered.samples()) {
            *a += gain * y;
        }
    }

    let peak = acc.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak > 0.0 {
        for v in acc.iter_mut() {
            *v /= peak;
        }
    }
    Signal::new(acc, fs_hz)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Noise reduction per window: `10 log10(sum d^2 / sum e^2)` in dB.
///
/// Windows with zero residual energy clamp at +120 dB; windows with zero
/// disturbance energy report 0 dB.
pub fn nr_db(d: &Signal, e: &Signal, window_s: f64) -> Result<NrSeries> {
    if d.len() != e.len() {
        return Err(Error::invalid("disturbance and residual lengths differ"));
    }
    if d.sample_rate_hz() != e.sample_rate_hz() {
        return Err(Error::invalid("disturbance and residual rates differ"));
    }
    if !(window_s > 0.0) {
        return Err(Error::invalid("window must be positive"));
    }
    let wlen = (window_s * d.sample_rate_hz() as f64).round() as usize;
    if wlen == 0 {
        return Err(Error::invalid("window shorter than one sample"));
    }
    let count = d.len() / wlen;
    let mut values_db = Vec::with_capacity(count);
    for w in 0..count {
        let range = w * wlen..(w + 1) * wlen;
        let pd: f64 = d.samples()[range.clone()].iter().map(|v| v * v).sum();
        let pe: f64 = e.samples()[range].iter().map(|v| v * v).sum();
        let value = if pd == 0.0 {
            0.0
        } else if pe == 0.0 {
            NR_CLAMP_DB
        } else {
            (10.0 * (pd / pe).log10()).min(NR_CLAMP_DB)
        };
        values_db.push(value);
    }
    Ok(NrSeries {
        window_s,
        values_db,
    })
}

/// Power spectrogram in dB.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    win: usize,
    hop: usize,
    sample_rate_hz: u32,
    /// Row-major `[bin][frame]`.
    power_db: Vec<f64>,
    bins: usize,
    frames: usize,
}

/// Spectrogram floor in dB.
pub const SPECTROGRAM_FLOOR_DB: f64 = -120.0;

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn value(&self, bin: usize, frame: usize) -> f64 {
        self.power_db[bin * self.frames + frame]
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate_hz as f64 / self.win as f64
    }

    /// Start time of a frame in seconds.
    pub fn frame_start_s(&self, frame: usize) -> f64 {
        (frame * self.hop) as f64 / self.sample_rate_hz as f64
    }

    /// Total one-sided power of one frame (linear, not dB).
    pub fn frame_power(&self, frame: usize) -> f64 {
        (0..self.bins)
            .map(|b| 10f64.powf(self.value(b, frame) / 10.0))
            .sum()
    }
}

/// Hann-windowed magnitude-squared STFT in dB with a floor at -120 dB.
///
/// Bins are one-sided (`win/2 + 1` rows). Per-bin powers are scaled so that
/// the one-sided sum over bins estimates the mean-square power of the frame,
/// which makes the output directly comparable to time-domain power.
pub fn stft_spectrogram(x: &Signal, win: usize, hop: usize) -> Result<Spectrogram> {
    if win < 2 {
        return Err(Error::invalid("window must span at least 2 samples"));
    }
    if win > x.len() {
        return Err(Error::invalid("window longer than the signal"));
    }
    if hop == 0 {
        return Err(Error::invalid("hop must be at least 1"));
    }
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos()))
        .collect();
    let window_energy: f64 = window.iter().map(|w| w * w).sum();
    let bins = win / 2 + 1;
    let frames = 1 + (x.len() - win) / hop;
    let mut power_db = vec![SPECTROGRAM_FLOOR_DB; bins * frames];

    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for frame in 0..frames {
        let start = frame * hop;
        for (b, (&s, &w)) in buf
            .iter_mut()
            .zip(x.samples()[start..start + win].iter().zip(&window))
        {
            *b = Complex::new(s * w, 0.0);
        }
        let spec = fft_forward(&buf);
        for (bin, value) in spec.iter().take(bins).enumerate() {
            let one_sided = if bin == 0 || (win % 2 == 0 && bin == win / 2) {
                1.0
            } else {
                2.0
            };
            let p = one_sided * value.norm_sqr() / (win as f64 * window_energy);
            let db = if p > 0.0 {
                (10.0 * p.log10()).max(SPECTROGRAM_FLOOR_DB)
            } else {
                SPECTROGRAM_FLOOR_DB
            };
            power_db[bin * frames + frame] = db;
        }
    }

    Ok(Spectrogram {
        win,
        hop,
        sample_rate_hz: x.sample_rate_hz(),
        power_db,
        bins,
        frames,
    })
}

/// Writes a spectrogram in long plot-ready form
/// (`t_start_s, hz, power_db`, one row per time-frequency cell).
pub fn write_spectrogram_csv(
    path: impl AsRef<std::path::Path>,
    sg: &Spectrogram,
) -> Result<()> {
    crate::io::write_csv(
        path,
        &["t_start_s", "hz", "power_db"],
        (0..sg.frames()).flat_map(|frame| {
            (0..sg.bins()).map(move |bin| {
                vec![
                    format!("{:.4}", sg.frame_start_s(frame)),
                    format!("{:.3}", sg.bin_hz(bin)),
                    format!("{:.4}", sg.value(bin, frame)),
                ]
            })
        }),
    )
}

/// Writes a noise-reduction series as CSV (`t_start_s, nr_db`).
pub fn write_nr_csv(path: impl AsRef<std::path::Path>, nr: &NrSeries) -> Result<()> {
    crate::io::write_csv(
        path,
        &["t_start_s", "nr_db"],
        nr.values_db().iter().enumerate().map(|(w, &value)| {
            vec![
                format!("{:.3}", w as f64 * nr.window_s()),
                format!("{:.6}", value),
            ]
        }),
    )
}
