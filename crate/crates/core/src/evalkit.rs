//! Objective evaluation: mel-cepstral distortion, sample diversity and a
//! two-mode coverage test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::scalar::Scalar;

/// `10 / ln 10`, the dB factor of the MCD.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

fn check_aligned<T: Scalar>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> Result<()> {
    if a.order() != b.order() || a.frames() != b.frames() {
        return Err(Error::Eval(format!(
            "sequences differ in shape: {}x{} vs {}x{}",
            a.order(),
            a.frames(),
            b.order(),
            b.frames()
        )));
    }
    Ok(())
}

/// Frame-averaged MCD in dB,
/// `(10 / ln 10) sqrt(2 sum_{d>=1} (mc_d - mc'_d)^2)`. The 0th (energy)
/// coefficient is excluded. Lengths must match exactly.
pub fn mcd<T: Scalar>(reference: &FeatureSequence<T>, converted: &FeatureSequence<T>) -> Result<f64> {
    check_aligned(reference, converted)?;
    let (q, t) = (reference.order(), reference.frames());
    let (a, b) = (reference.mcep().data(), converted.mcep().data());
    let mut sq = vec![0.0f64; t];
    for d in 1..q {
        for (j, acc) in sq.iter_mut().enumerate() {
            let diff = a[d * t + j].to_f64().unwrap() - b[d * t + j].to_f64().unwrap();
            *acc += diff * diff;
        }
    }
    let total: f64 = sq.iter().map(|s| MCD_SCALE * (2.0 * s).sqrt()).sum();
    Ok(total / t as f64)
}

/// Per-utterance MCDs of aligned lists.
pub fn mcd_per_utterance<T: Scalar>(refs: &[FeatureSequence<T>], convs: &[FeatureSequence<T>]) -> Result<Vec<f64>> {
    if refs.len() != convs.len() || refs.is_empty() {
        return Err(Error::Eval(format!("{} references vs {} conversions", refs.len(), convs.len())));
    }
    refs.iter().zip(convs).map(|(r, c)| mcd(r, c)).collect()
}

/// Mean over frames of the Euclidean distance between two sequences'
/// MCEP frames, all `Q` dimensions included.
fn frame_l2<T: Scalar>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> f64 {
    let (q, t) = (a.order(), a.frames());
    let (x, y) = (a.mcep().data(), b.mcep().data());
    (0..t)
        .map(|j| {
            (0..q)
                .map(|d| {
                    let v = x[d * t + j].to_f64().unwrap() - y[d * t + j].to_f64().unwrap();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / t as f64
}

/// Mean frame-averaged L2 distance over all unordered pairs of conversions
/// of the same source. Two constant matrices that differ by `c` everywhere
/// score `c sqrt(Q)`.
pub fn diversity<T: Scalar>(conversions: &[FeatureSequence<T>]) -> Result<f64> {
    if conversions.len() < 2 {
        return Err(Error::Eval("diversity needs at least two conversions".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..conversions.len() {
        for j in i + 1..conversions.len() {
            check_aligned(&conversions[i], &conversions[j])?;
            sum += frame_l2(&conversions[i], &conversions[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// A 1-D two-component Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub means: [f64; 2],
    pub stds: [f64; 2],
    /// Probability of the first component.
    pub weight: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self { means: [-2.0, 2.0], stds: [0.4, 0.4], weight: 0.5 }
    }
}

impl MixtureSpec {
    pub fn component(&self, x: f64) -> usize {
        usize::from((x - self.means[1]).abs() < (x - self.means[0]).abs())
    }

    pub fn sample(&self, rng: &mut crate::rng::Stream) -> f64 {
        let c = usize::from(rng.uniform() >= self.weight);
        self.means[c] + self.stds[c] * rng.normal()
    }
}

/// Outcome of [`mode_coverage_test`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub fractions: [f64; 2],
    /// `(bin_lower_edge, count)` over the range spanned by the mixture.
    pub histogram: Vec<(f64, usize)>,
    pub n_draws: usize,
    pub pass: bool,
}

pub const COVERAGE_BAND: (f64, f64) = (0.3, 0.7);

/// Draws `n_draws` samples, assigns each to the nearest mixture mean, and
/// passes when both components get between 30% and 70% of draws.
pub fn mode_coverage_test(mut sampler: impl FnMut() -> Result<f64>, spec: &MixtureSpec, n_draws: usize) -> Result<CoverageReport> {
    if n_draws == 0 {
        return Err(Error::Eval("no draws requested".into()));
    }
    let lo = spec.means[0].min(spec.means[1]) - 4.0 * spec.stds[0].max(spec.stds[1]);
    let hi = spec.means[0].max(spec.means[1]) + 4.0 * spec.stds[0].max(spec.stds[1]);
    let bins = 40;
    let width = (hi - lo) / bins as f64;
    let mut counts = [0usize; 2];
    let mut hist = vec![0usize; bins];
    for _ in 0..n_draws {
        let x = sampler()?;
        if !x.is_finite() {
            return Err(Error::NonFinite("sampler draw".into()));
        }
        counts[spec.component(x)] += 1;
        let b = ((x - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        hist[b] += 1;
    }
    let fractions = counts.map(|c| c as f64 / n_draws as f64);
    let pass = fractions.iter().all(|&f| (COVERAGE_BAND.0..=COVERAGE_BAND.1).contains(&f));
    Ok(CoverageReport {
        fractions,
        histogram: hist.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, c)).collect(),
        n_draws,
        pass,
    })
}

/// One evaluated row: a method in one conversion direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub direction: String,
    pub mcd_mean: f64,
    pub mcd_stderr: f64,
    pub mcd_per_utterance: Vec<f64>,
    pub n_frames: usize,
    pub diversity: Option<f64>,
}

impl EvalReport {
    pub fn new<T: Scalar>(
        method: &str,
        direction: &str,
        refs: &[FeatureSequence<T>],
        convs: &[FeatureSequence<T>],
        diversity: Option<f64>,
    ) -> Result<Self> {
        let per = mcd_per_utterance(refs, convs)?;
        let n = per.len() as f64;
        let mean = per.iter().sum::<f64>() / n;
        let stderr = if per.len() > 1 {
            (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            method: method.into(),
            direction: direction.into(),
            mcd_mean: mean,
            mcd_stderr: stderr,
            mcd_per_utterance: per,
            n_frames: refs.iter().map(FeatureSequence::frames).sum(),
            diversity,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "method={} direction={} mcd_mean_db={:.4} mcd_stderr_db={:.4} utterances={} frames={}",
            self.method,
            self.direction,
            self.mcd_mean,
            self.mcd_stderr,
            self.mcd_per_utterance.len(),
            self.n_frames
        );
        if let Some(d) = self.diversity {
            let _ = write!(s, " diversity={d:.4}");
        }
        s
    }
}

pub const CSV_HEADER: &str = "method,direction,mcd_mean_db,mcd_stderr_db,utterances,frames,diversity";

/// One row per method and direction, in the order given.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let div = r.diversity.map(|d| format!("{d:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{}",
            r.method,
            r.direction,
            r.mcd_mean,
            r.mcd_stderr,
            r.mcd_per_utterance.len(),
            r.n_frames,
            div
        );
    }
    s
}
