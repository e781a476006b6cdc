//! End-to-end controllers: the frame-switched GFANC loop (co-processor picks
//! a filter once per frame, controller filters at the sample rate), the
//! SFANC-lite fixed-library baseline, the FxLMS adaptive baseline, and a
//! head-to-head comparison harness.
//!
//! All simulators share one convention: the residual is
//! `e(n) = d(n) - (x * w_frame)(n) * s(n)` with `d = x * p` precomputed once,
//! the control filter switching exactly at frame boundaries (hard switch) and
//! every delay line running continuously across those boundaries.

use std::path::Path;

use crate::adaptive::{fxlms_run, BinaryLabel, FxlmsConfig};
use crate::cnn::{predict_weights, CnnModel};
use crate::error::{Error, Result};
use crate::filterbank::SubFilterBank;
use crate::io;
use crate::linalg::dot;
use crate::signal::{fir_filter, nr_db, FirFilter, NrSeries, Signal};

/// Default co-processor frame length in seconds.
pub const DEFAULT_FRAME_S: f64 = 1.0;

/// Exhaustive subset search is capped here; beyond this the 2^M sweep stops
/// being a reasonable oracle.
const MAX_ORACLE_BANDS: usize = 20;

// ---------------------------------------------------------------------------
// Scenario and result types
// ---------------------------------------------------------------------------

/// Everything a simulation run reads. The per-method extras (`model`,
/// `candidates`, `fxlms`) only need to be populated for the methods actually
/// run on the scenario.
#[derive(Debug, Clone)]
pub struct SimScenario<'a> {
    pub noise: &'a Signal,
    /// Primary path: noise source to error microphone.
    pub primary: &'a FirFilter,
    /// Secondary path: loudspeaker to error microphone.
    pub secondary: &'a FirFilter,
    /// Co-processor frame length in seconds.
    pub frame_s: f64,
    pub bank: &'a SubFilterBank,
    /// Trained weight predictor (GFANC).
    pub model: Option<&'a CnnModel>,
    /// Fixed filter library (SFANC-lite).
    pub candidates: &'a [FirFilter],
    /// Step size and length of the adaptive baseline.
    pub fxlms: FxlmsConfig,
}

impl SimScenario<'_> {
    /// Frame length in samples; validates the scenario geometry.
    fn frame_len(&self) -> Result<usize> {
        if !(self.frame_s > 0.0) {
            return Err(Error::invalid("frame length must be positive"));
        }
        let flen = (self.frame_s * self.noise.sample_rate_hz() as f64).round() as usize;
        if flen == 0 {
            return Err(Error::invalid("frame shorter than one sample"));
        }
        if self.noise.len() < flen {
            return Err(Error::invalid(format!(
                "noise of {} samples is shorter than one {}-sample frame",
                self.noise.len(),
                flen
            )));
        }
        Ok(flen)
    }
}

/// Simulation methods the comparison harness knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// CNN-predicted labels combine sub filters per frame.
    Gfanc,
    /// Like [`Method::Gfanc`] but with labels from an exhaustive subset
    /// search instead of the CNN — the upper bound of the generated family.
    GfancOracle,
    /// Best fixed candidate per frame from a finite library.
    SfancLite,
    /// Sample-by-sample adaptive baseline.
    Fxlms,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Gfanc => "gfanc",
            Method::GfancOracle => "gfanc-oracle",
            Method::SfancLite => "sfanc",
            Method::Fxlms => "fxlms",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "gfanc" => Ok(Method::Gfanc),
            "gfanc-oracle" => Ok(Method::GfancOracle),
            "sfanc" => Ok(Method::SfancLite),
            "fxlms" => Ok(Method::Fxlms),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected gfanc, gfanc-oracle, sfanc or fxlms)"
            ))),
        }
    }
}

/// Serialized as the same tag `parse` accepts, so configs stay round-trippable.
impl serde::Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

/// What controlled one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameChoice {
    /// Zero filter (frame 0, or an all-zero label).
    Uncontrolled,
    /// Binary combination weights over the bank.
    Label(BinaryLabel),
    /// Index into the candidate library.
    Candidate(usize),
    /// Continuously adapting filter (no discrete choice).
    Adaptive,
}

impl FrameChoice {
    /// Compact text for the comparison table: `off`, a bit string, a
    /// candidate id, or `adaptive`.
    pub fn describe(&self) -> String {
        match self {
            FrameChoice::Uncontrolled => "off".into(),
            FrameChoice::Label(label) => {
                label.t().iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
            }
            FrameChoice::Candidate(id) => format!("candidate:{id}"),
            FrameChoice::Adaptive => "adaptive".into(),
        }
    }
}

/// Output of one simulation run.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub method: Method,
    pub disturbance: Signal,
    pub residual: Signal,
    /// One entry per frame, including a partial trailing frame.
    pub choices: Vec<FrameChoice>,
    /// Per-frame noise reduction (full frames only).
    pub nr: NrSeries,
}

// ---------------------------------------------------------------------------
// Filter generation
// ---------------------------------------------------------------------------

/// Combines sub filters with binary weights: `w = sum of t_m * c_m`.
pub fn generate_filter(t: &BinaryLabel, bank: &SubFilterBank) -> Result<FirFilter> {
    if t.len() != bank.n_bands() {
        return Err(Error::invalid(format!(
            "label has {} bits for a {}-band bank",
            t.len(),
            bank.n_bands()
        )));
    }
    let mut coeffs = vec![0.0; bank.n_taps()];
    for (&bit, filter) in t.t().iter().zip(bank.filters()) {
        if bit == 1 {
            for (acc, &c) in coeffs.iter_mut().zip(filter.coeffs()) {
                *acc += c;
            }
        }
    }
    FirFilter::new(coeffs)
}

// ---------------------------------------------------------------------------
// Shared frame-switched controller
// ---------------------------------------------------------------------------

/// Runs the sample-rate controller with a per-frame filter choice.
///
/// `pick(k, prev)` is called once per frame `k >= 1` with the samples of
/// frame `k - 1` and returns the filter to apply during frame `k`; frame 0
/// always runs the zero filter. The reference delay line spans the whole
/// signal (a freshly chosen filter sees the true past input immediately) and
/// the secondary-path line runs over the anti-noise stream without resets.
fn run_switched(
    noise: &Signal,
    primary: &FirFilter,
    secondary: &FirFilter,
    frame_len: usize,
    mut pick: impl FnMut(usize, &[f64]) -> Result<(FirFilter, FrameChoice)>,
) -> Result<(Signal, Signal, Vec<FrameChoice>)> {
    let x = noise.samples();
    let d = fir_filter(noise, primary);
    let mut y = vec![0.0; x.len()];
    let mut choices = vec![FrameChoice::Uncontrolled];

    let mut start = frame_len;
    let mut k = 1;
    while start < x.len() {
        let end = (start + frame_len).min(x.len());
        let (w, choice) = pick(k, &x[start - frame_len..start])?;
        let wr: Vec<f64> = w.coeffs().iter().rev().copied().collect();
        let l = wr.len();
        for (n, out) in y.iter_mut().enumerate().take(end).skip(start) {
            let m = (l - 1).min(n);
            *out = dot(&wr[l - 1 - m..], &x[n - m..=n]);
        }
        choices.push(choice);
        start = end;
        k += 1;
    }

    let anti = fir_filter(&Signal::new(y, noise.sample_rate_hz())?, secondary);
    let e: Vec<f64> = d
        .samples()
        .iter()
        .zip(anti.samples())
        .map(|(dv, av)| dv - av)
        .collect();
    Ok((d, Signal::new(e, noise.sample_rate_hz())?, choices))
}

fn finish(
    method: Method,
    d: Signal,
    e: Signal,
    choices: Vec<FrameChoice>,
    frame_s: f64,
) -> Result<SimResult> {
    let nr = nr_db(&d, &e, frame_s)?;
    Ok(SimResult {
        method,
        disturbance: d,
        residual: e,
        choices,
        nr,
    })
}

// ---------------------------------------------------------------------------
// GFANC
// ---------------------------------------------------------------------------

/// GFANC frame loop: the model labels frame `k - 1`, the label generates the
/// filter for frame `k`, frame 0 runs uncontrolled.
pub fn simulate_gfanc(sc: &SimScenario) -> Result<SimResult> {
    let flen = sc.frame_len()?;
    let model = sc
        .model
        .ok_or_else(|| Error::invalid("scenario has no weight-prediction model"))?;
    if model.n_labels() != sc.bank.n_bands() {
        return Err(Error::invalid(format!(
            "model predicts {} labels for a {}-band bank",
            model.n_labels(),
            sc.bank.n_bands()
        )));
    }
    let fs = sc.noise.sample_rate_hz();
    let (d, e, choices) = run_switched(sc.noise, sc.primary, sc.secondary, flen, |_, prev| {
        let frame = Signal::new(prev.to_vec(), fs)?;
        let label = predict_weights(model, &frame)?;
        let w = generate_filter(&label, sc.bank)?;
        Ok((w, FrameChoice::Label(label)))
    })?;
    finish(Method::Gfanc, d, e, choices, sc.frame_s)
}

/// Per-frame combination weights from an exhaustive subset search.
///
/// For every frame `k >= 1` this picks the label minimizing the residual
/// power that the generated filter *would have produced* on frame `k - 1`,
/// had it been applied from the start of the signal (so the evaluation sees
/// steady-state filtering, like a long-running controller). Entry 0 is the
/// all-zero label. Linearity makes this cheap: the bank's per-band
/// anti-noise streams are precomputed once and subsets are scored through
/// their windowed Gram matrix. Ties resolve to the smallest label value read
/// as a binary number, i.e. the fewest/lowest bands.
pub fn oracle_labels(sc: &SimScenario) -> Result<Vec<BinaryLabel>> {
    let flen = sc.frame_len()?;
    let m = sc.bank.n_bands();
    if m > MAX_ORACLE_BANDS {
        return Err(Error::invalid(format!(
            "exhaustive search over 2^{m} labels is not reasonable (cap {MAX_ORACLE_BANDS})"
        )));
    }
    let d = fir_filter(sc.noise, sc.primary);
    let anti: Vec<Signal> = sc
        .bank
        .filters()
        .iter()
        .map(|c| fir_filter(&fir_filter(sc.noise, c), sc.secondary))
        .collect();

    let mut labels = vec![BinaryLabel(vec![0; m])];
    let mut start = flen;
    while start < sc.noise.len() {
        let window = start - flen..start;
        // Residual power of subset T is |d|^2 - 2 sum_m b_m + sum_{m,l} G_ml
        // over the window; |d|^2 is common to all subsets and dropped.
        let mut b = vec![0.0; m];
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            b[i] = dot(&d.samples()[window.clone()], &anti[i].samples()[window.clone()]);
            for j in 0..=i {
                let g = dot(
                    &anti[i].samples()[window.clone()],
                    &anti[j].samples()[window.clone()],
                );
                gram[i * m + j] = g;
                gram[j * m + i] = g;
            }
        }
        let mut best_mask = 0usize;
        let mut best_score = 0.0; // empty subset: residual power minus |d|^2
        for mask in 1usize..(1 << m) {
            let mut score = 0.0;
            for i in 0..m {
                if mask & (1 << i) == 0 {
                    continue;
                }
                score -= 2.0 * b[i];
                score += gram[i * m + i];
                for j in 0..i {
                    if mask & (1 << j) != 0 {
                        score += 2.0 * gram[i * m + j];
                    }
                }
            }
            if score < best_score {
                best_score = score;
                best_mask = mask;
            }
        }
        labels.push(BinaryLabel(
            (0..m).map(|i| u8::from(best_mask & (1 << i) != 0)).collect(),
        ));
        start += flen;
    }
    Ok(labels)
}

/// GFANC with oracle labels in place of the model — the per-frame optimum of
/// the generated filter family.
pub fn simulate_gfanc_oracle(sc: &SimScenario) -> Result<SimResult> {
    let flen = sc.frame_len()?;
    let labels = oracle_labels(sc)?;
    let (d, e, choices) = run_switched(sc.noise, sc.primary, sc.secondary, flen, |k, _| {
        let label = labels[k].clone();
        let w = generate_filter(&label, sc.bank)?;
        Ok((w, FrameChoice::Label(label)))
    })?;
    finish(Method::GfancOracle, d, e, choices, sc.frame_s)
}

// ---------------------------------------------------------------------------
// SFANC-lite
// ---------------------------------------------------------------------------

/// SFANC-lite: per frame `k >= 1`, applies the library candidate that would
/// have left the least residual power on frame `k - 1` (exhaustive oracle
/// selection, same steady-state evaluation as [`oracle_labels`]); frame 0
/// runs uncontrolled. Ties resolve to the lowest candidate id.
pub fn simulate_sfanc_lite(sc: &SimScenario) -> Result<SimResult> {
    let flen = sc.frame_len()?;
    if sc.candidates.is_empty() {
        return Err(Error::invalid("candidate library is empty"));
    }
    let d = fir_filter(sc.noise, sc.primary);
    let anti: Vec<Signal> = sc
        .candidates
        .iter()
        .map(|c| fir_filter(&fir_filter(sc.noise, c), sc.secondary))
        .collect();

    let (d, e, choices) = run_switched(sc.noise, sc.primary, sc.secondary, flen, |k, _| {
        let window = (k - 1) * flen..k * flen;
        let mut best = 0;
        let mut best_power = f64::INFINITY;
        for (id, stream) in anti.iter().enumerate() {
            let power: f64 = d.samples()[window.clone()]
                .iter()
                .zip(&stream.samples()[window.clone()])
                .map(|(dv, av)| (dv - av) * (dv - av))
                .sum();
            if power < best_power {
                best_power = power;
                best = id;
            }
        }
        Ok((sc.candidates[best].clone(), FrameChoice::Candidate(best)))
    })?;
    finish(Method::SfancLite, d, e, choices, sc.frame_s)
}

// ---------------------------------------------------------------------------
// FxLMS baseline
// ---------------------------------------------------------------------------

/// Sample-synchronous FxLMS from a zero filter (the converging baseline).
pub fn simulate_fxlms(sc: &SimScenario) -> Result<SimResult> {
    let flen = sc.frame_len()?;
    let w0 = FirFilter::new(vec![0.0; sc.fxlms.n_taps])?;
    let (e, _) = fxlms_run(sc.noise, sc.primary, sc.secondary, &sc.fxlms, &w0)?;
    let d = fir_filter(sc.noise, sc.primary);
    let frames = sc.noise.len().div_ceil(flen);
    finish(
        Method::Fxlms,
        d,
        e,
        vec![FrameChoice::Adaptive; frames],
        sc.frame_s,
    )
}

/// Dispatches one method on the scenario.
pub fn simulate(sc: &SimScenario, method: Method) -> Result<SimResult> {
    match method {
        Method::Gfanc => simulate_gfanc(sc),
        Method::GfancOracle => simulate_gfanc_oracle(sc),
        Method::SfancLite => simulate_sfanc_lite(sc),
        Method::Fxlms => simulate_fxlms(sc),
    }
}

// ---------------------------------------------------------------------------
// Comparison harness
// ---------------------------------------------------------------------------

/// One table line: noise reduction of one method over one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub t_start_s: f64,
    pub method: Method,
    pub nr_db: f64,
    pub choice: String,
}

/// Per-method digest over the controlled frames (frame 0 excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_nr_db: f64,
    pub worst_frame_db: f64,
}

/// Everything `compare` produces; `results` keeps the raw runs so callers
/// can export residuals or spectrograms.
#[derive(Debug)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub summaries: Vec<MethodSummary>,
    pub results: Vec<SimResult>,
}

/// Runs every requested method on the identical scenario and tabulates
/// per-frame noise reduction plus per-method summaries.
pub fn compare(sc: &SimScenario, methods: &[Method]) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods requested"));
    }
    let flen = sc.frame_len()?;
    if sc.noise.len() / flen < 2 {
        return Err(Error::invalid(
            "comparison needs at least two full frames (frame 0 is uncontrolled)",
        ));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut results = Vec::new();
    for &method in methods {
        let result = simulate(sc, method)?;
        let values = result.nr.values_db();
        for (w, &nr) in values.iter().enumerate() {
            rows.push(CompareRow {
                t_start_s: w as f64 * sc.frame_s,
                method,
                nr_db: nr,
                choice: result.choices[w].describe(),
            });
        }
        summaries.push(MethodSummary {
            method,
            mean_nr_db: result.nr.mean_db(1, values.len()),
            worst_frame_db: values[1..].iter().copied().fold(f64::INFINITY, f64::min),
        });
        results.push(result);
    }
    Ok(Comparison {
        rows,
        summaries,
        results,
    })
}

/// Writes the comparison table as CSV
/// (`t_start_s, method, nr_db, filter_id_or_label`).
pub fn write_compare_csv(path: impl AsRef<Path>, comparison: &Comparison) -> Result<()> {
    io::write_csv(
        path,
        &["t_start_s", "method", "nr_db", "filter_id_or_label"],
        comparison.rows.iter().map(|row| {
            vec![
                format!("{:.3}", row.t_start_s),
                row.method.tag().to_string(),
                format!("{:.6}", row.nr_db),
                row.choice.clone(),
            ]
        }),
    )
}
