//! Acoustic features: MCEP sequences with log-F0 and aperiodicity payloads,
//! per-speaker statistics and the log-Gaussian F0 transform.

mod adapter;
mod io;
mod synth;

pub use adapter::AnalyzerAdapter;
pub use io::{decode, encode, read_features, write_features, FORMAT_VERSION, MAGIC};
pub use synth::{make_synthetic_corpus, CorpusConfig, SpeakerConfig, SyntheticCorpus, Warp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Default number of mel-cepstral coefficients, including the 0th.
pub const DEFAULT_ORDER: usize = 35;

/// Log-F0 stored on unvoiced frames. Finite so files stay valid, and far
/// outside any plausible log-frequency so it is never mistaken for one.
pub const UNVOICED_LOGF0: f64 = -1.0e10;

/// One utterance: MCEPs `(Q, T)`, per-frame log-F0 with a voiced mask, and
/// an opaque aperiodicity payload carried through conversion untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    mcep: Tensor<T>,
    logf0: Vec<T>,
    voiced: Vec<bool>,
    ap: Vec<u8>,
    frame_rate: f64,
    sample_rate: u32,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(
        mcep: Tensor<T>,
        logf0: Vec<T>,
        voiced: Vec<bool>,
        ap: Vec<u8>,
        frame_rate: f64,
        sample_rate: u32,
    ) -> Result<Self> {
        let s = mcep.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!("mcep must be a non-empty (Q, T) matrix, got {s:?}")));
        }
        let frames = s[1];
        if logf0.len() != frames || voiced.len() != frames {
            return Err(Error::Shape(format!(
                "{frames} frames but {} log-F0 values and {} mask entries",
                logf0.len(),
                voiced.len()
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) || sample_rate == 0 {
            return Err(Error::Shape("frame and sample rates must be positive".into()));
        }
        if let Some(i) = (0..frames).find(|&i| voiced[i] && !logf0[i].is_finite()) {
            return Err(Error::NonFinite(format!("log-F0 at voiced frame {i}")));
        }
        Ok(Self { mcep, logf0, voiced, ap, frame_rate, sample_rate })
    }

    pub fn order(&self) -> usize {
        self.mcep.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.mcep.dim(1)
    }

    pub fn mcep(&self) -> &Tensor<T> {
        &self.mcep
    }

    pub fn logf0(&self) -> &[T] {
        &self.logf0
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn ap(&self) -> &[u8] {
        &self.ap
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Same utterance with replaced MCEPs of identical shape.
    pub fn with_mcep(&self, mcep: Tensor<T>) -> Result<Self> {
        if mcep.shape() != self.mcep.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", mcep.shape(), self.mcep.shape())));
        }
        Ok(Self { mcep, ..self.clone() })
    }

    pub fn with_logf0(&self, logf0: Vec<T>) -> Result<Self> {
        Self::new(self.mcep.clone(), logf0, self.voiced.clone(), self.ap.clone(), self.frame_rate, self.sample_rate)
    }

    /// Frames `start..start + len`. The AP payload is kept whole since its
    /// layout is opaque.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Shape(format!("crop {start}+{len} of {} frames", self.frames())));
        }
        let q = self.order();
        let t = self.frames();
        let src = self.mcep.data();
        let data = (0..q).flat_map(|d| src[d * t + start..d * t + start + len].iter().copied()).collect();
        Self::new(
            Tensor::new(vec![q, len], data)?,
            self.logf0[start..start + len].to_vec(),
            self.voiced[start..start + len].to_vec(),
            self.ap.clone(),
            self.frame_rate,
            self.sample_rate,
        )
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            mcep: self.mcep.cast(),
            logf0: self.logf0.iter().map(|&v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
            voiced: self.voiced.clone(),
            ap: self.ap.clone(),
            frame_rate: self.frame_rate,
            sample_rate: self.sample_rate,
        }
    }
}

/// Per-speaker normalization statistics. Standard deviations are the
/// unbiased sample estimate (divide by N - 1), so `{a, b}` has std
/// `|a - b| / sqrt(2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerStats {
    pub logf0_mean: f64,
    pub logf0_std: f64,
    pub mcep_mean: Vec<f64>,
    pub mcep_std: Vec<f64>,
}

impl SpeakerStats {
    pub fn order(&self) -> usize {
        self.mcep_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !self.logf0_mean.is_finite() || !ok(self.logf0_std) {
            return Err(Error::Stats(format!("log-F0 std must be positive, got {}", self.logf0_std)));
        }
        if self.mcep_mean.len() != self.mcep_std.len() || self.mcep_mean.is_empty() {
            return Err(Error::Stats("MCEP mean and std lengths differ".into()));
        }
        if let Some(d) = self.mcep_std.iter().position(|&s| !ok(s)) {
            return Err(Error::Stats(format!("MCEP std of dimension {d} is {}", self.mcep_std[d])));
        }
        if let Some(d) = self.mcep_mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::Stats(format!("MCEP mean of dimension {d} is not finite")));
        }
        Ok(())
    }

    /// Zero mean, unit variance in every dimension.
    pub fn identity(order: usize) -> Self {
        Self { logf0_mean: 0.0, logf0_std: 1.0, mcep_mean: vec![0.0; order], mcep_std: vec![1.0; order] }
    }
}

/// Two-pass mean and sample standard deviation. With fewer than two values
/// the std is reported as 0, which validation then rejects.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0, n);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt(), n)
}

/// Means and sample standard deviations: MCEPs over all frames, log-F0 over
/// voiced frames only.
pub fn compute_speaker_stats<T: Scalar>(corpus: &[FeatureSequence<T>]) -> Result<SpeakerStats> {
    let first = corpus.first().ok_or_else(|| Error::Stats("empty corpus".into()))?;
    let q = first.order();
    if let Some(i) = corpus.iter().position(|s| s.order() != q) {
        return Err(Error::Stats(format!("utterance {i} has order {} but expected {q}", corpus[i].order())));
    }
    let voiced = corpus.iter().flat_map(|s| {
        s.logf0.iter().zip(&s.voiced).filter(|(_, &v)| v).map(|(f, _)| f.to_f64().unwrap())
    });
    let (logf0_mean, logf0_std, n_voiced) = mean_std(voiced);
    if n_voiced == 0 {
        return Err(Error::Stats("no voiced frames in corpus".into()));
    }
    let mut mcep_mean = Vec::with_capacity(q);
    let mut mcep_std = Vec::with_capacity(q);
    for d in 0..q {
        let dim = corpus.iter().flat_map(move |s| {
            let t = s.frames();
            s.mcep.data()[d * t..(d + 1) * t].iter().map(|v| v.to_f64().unwrap())
        });
        let (m, sd, _) = mean_std(dim);
        mcep_mean.push(m);
        mcep_std.push(sd);
    }
    let stats = SpeakerStats { logf0_mean, logf0_std, mcep_mean, mcep_std };
    stats.validate()?;
    Ok(stats)
}

/// Log-Gaussian F0 transform on voiced frames; unvoiced frames pass through.
pub fn convert_logf0<T: Scalar>(logf0: &[T], voiced: &[bool], src: &SpeakerStats, tgt: &SpeakerStats) -> Result<Vec<T>> {
    if logf0.len() != voiced.len() {
        return Err(Error::Shape(format!("{} log-F0 values, {} mask entries", logf0.len(), voiced.len())));
    }
    if !(src.logf0_std.is_finite() && src.logf0_std > 0.0) {
        return Err(Error::Stats(format!("source log-F0 std {} is not positive", src.logf0_std)));
    }
    let gain = tgt.logf0_std / src.logf0_std;
    Ok(logf0
        .iter()
        .zip(voiced)
        .map(|(&f, &v)| if v { cst((f.to_f64().unwrap() - src.logf0_mean) * gain + tgt.logf0_mean) } else { f })
        .collect())
}

fn per_dim<T: Scalar>(m: &Tensor<T>, stats: &SpeakerStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<T>> {
    let s = m.shape();
    let q = s[s.len() - 2];
    let t = s[s.len() - 1];
    if q != stats.order() {
        return Err(Error::Stats(format!("stats of order {} for features of order {q}", stats.order())));
    }
    let mut out = m.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let d = (i / t) % q;
        *v = cst(f(v.to_f64().unwrap(), stats.mcep_mean[d], stats.mcep_std[d]));
    }
    Ok(out)
}

/// Per-dimension z-scoring of `(Q, T)` or `(B, Q, T)` MCEPs.
pub fn normalize_mcep<T: Scalar>(m: &Tensor<T>, stats: &SpeakerStats) -> Result<Tensor<T>> {
    per_dim(m, stats, |v, mu, sd| (v - mu) / sd)
}

pub fn denormalize_mcep<T: Scalar>(m: &Tensor<T>, stats: &SpeakerStats) -> Result<Tensor<T>> {
    per_dim(m, stats, |v, mu, sd| v * sd + mu)
}
