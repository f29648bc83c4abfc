//! Two-speaker synthetic corpora with a known conversion.
//!
//! Shared low-dimensional content trajectories (smoothed AR(1) walks) are
//! mixed into `Q` dimensions with a decaying spectral envelope, then each
//! speaker applies its own per-dimension warp
//! `m = a sinh(k u) / k + b`, which has the closed-form inverse
//! `u = asinh(k (m - b) / a) / k`. The oracle conversion is therefore
//! `warp_y(warp_x^-1(x))` element by element.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, UNVOICED_LOGF0};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerConfig {
    /// Seeds the per-dimension warp parameters.
    pub seed: u64,
    /// Mean warp curvature `k`; per-dimension values lie in `[0.5k, 1.5k)`.
    pub curvature: f64,
    /// Typical warp gain `a`.
    pub gain: f64,
    /// Scale of the per-dimension offsets `b`, relative to the envelope.
    pub shift: f64,
    pub f0_hz: f64,
    pub logf0_std: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self { seed: 11, curvature: 0.8, gain: 1.0, shift: 1.0, f0_hz: 120.0, logf0_std: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub order: usize,
    /// Dimension of the shared content trajectories.
    pub content_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub frames: usize,
    /// AR(1) coefficient of the content walks; closer to 1 is smoother.
    pub smoothness: f64,
    /// Envelope of dimension `d` is `envelope / (1 + d / 4)`.
    pub envelope: f64,
    pub ap_bytes_per_frame: usize,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub speaker_x: SpeakerConfig,
    pub speaker_y: SpeakerConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            order: super::DEFAULT_ORDER,
            content_dim: 3,
            n_train: 32,
            n_test: 8,
            frames: 128,
            smoothness: 0.98,
            envelope: 0.5,
            ap_bytes_per_frame: 4,
            frame_rate: 200.0,
            sample_rate: 16000,
            speaker_x: SpeakerConfig::default(),
            speaker_y: SpeakerConfig { seed: 29, curvature: 0.8, gain: 1.2, shift: 1.0, f0_hz: 220.0, logf0_std: 0.3 },
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Corpus(m.into()));
        if self.order < 2 {
            return bad("order must be at least 2");
        }
        if self.content_dim < 2 {
            return bad("content_dim must be at least 2 (F0 and voicing use the first and last)");
        }
        if self.n_train == 0 || self.frames == 0 {
            return bad("n_train and frames must be positive");
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return bad("smoothness must lie in [0, 1)");
        }
        if !(self.envelope.is_finite() && self.envelope > 0.0) {
            return bad("envelope must be positive");
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) || self.sample_rate == 0 {
            return bad("frame and sample rates must be positive");
        }
        for (name, s) in [("speaker_x", &self.speaker_x), ("speaker_y", &self.speaker_y)] {
            let pos = |v: f64| v.is_finite() && v > 0.0;
            if !(pos(s.curvature) && pos(s.gain) && pos(s.f0_hz) && pos(s.logf0_std) && s.shift.is_finite()) {
                return Err(Error::Corpus(format!("{name}: curvature, gain, f0_hz and logf0_std must be positive")));
            }
        }
        if self.speaker_x == self.speaker_y {
            return bad("the two speakers are identical");
        }
        Ok(())
    }

    fn envelope_at(&self, d: usize) -> f64 {
        self.envelope / (1.0 + d as f64 / 4.0)
    }
}

/// Per-dimension invertible warp `m = a sinh(k u) / k + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub a: Vec<f64>,
    pub k: Vec<f64>,
    pub b: Vec<f64>,
}

impl Warp {
    fn draw(cfg: &CorpusConfig, s: &SpeakerConfig) -> Self {
        let mut rng = Stream::new(s.seed, Purpose::Corpus);
        let mut w = Warp { a: vec![], k: vec![], b: vec![] };
        for d in 0..cfg.order {
            w.k.push(s.curvature * (0.5 + rng.uniform()));
            w.a.push(s.gain * (0.25 * rng.normal()).exp());
            w.b.push(s.shift * cfg.envelope_at(d) * rng.normal());
        }
        w
    }

    pub fn apply(&self, d: usize, u: f64) -> f64 {
        self.a[d] * (self.k[d] * u).sinh() / self.k[d] + self.b[d]
    }

    pub fn invert(&self, d: usize, m: f64) -> f64 {
        (self.k[d] * (m - self.b[d]) / self.a[d]).asinh() / self.k[d]
    }
}

/// Unpaired training utterances for both speakers, a held-out split where
/// `test_y[i]` renders the content of `test_x[i]`, and the warps behind them.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus<T> {
    pub config: CorpusConfig,
    pub train_x: Vec<FeatureSequence<T>>,
    pub train_y: Vec<FeatureSequence<T>>,
    pub test_x: Vec<FeatureSequence<T>>,
    pub test_y: Vec<FeatureSequence<T>>,
    pub warp_x: Warp,
    pub warp_y: Warp,
}

struct Content {
    /// `(content_dim, frames)` row-major.
    c: Vec<f64>,
    ap: Vec<u8>,
}

fn draw_content(cfg: &CorpusConfig, rng: &mut Stream) -> Content {
    let (k, t) = (cfg.content_dim, cfg.frames);
    let rho = cfg.smoothness;
    let innov = (1.0 - rho * rho).sqrt();
    let mut c = vec![0.0; k * t];
    for row in c.chunks_mut(t) {
        let mut raw = Vec::with_capacity(t);
        let mut v = rng.normal();
        for _ in 0..t {
            raw.push(v);
            v = rho * v + innov * rng.normal();
        }
        for j in 0..t {
            let l = raw[j.saturating_sub(1)];
            let r = raw[(j + 1).min(t - 1)];
            row[j] = 0.25 * l + 0.5 * raw[j] + 0.25 * r;
        }
    }
    let ap = (0..t * cfg.ap_bytes_per_frame).map(|_| (rng.next_u32() & 0xff) as u8).collect();
    Content { c, ap }
}

fn render<T: Scalar>(
    cfg: &CorpusConfig,
    mix: &[f64],
    content: &Content,
    warp: &Warp,
    spk: &SpeakerConfig,
) -> Result<FeatureSequence<T>> {
    let (q, k, t) = (cfg.order, cfg.content_dim, cfg.frames);
    let norm = (k as f64).sqrt();
    let mut m = Vec::with_capacity(q * t);
    for d in 0..q {
        let env = cfg.envelope_at(d);
        for j in 0..t {
            let u: f64 = (0..k).map(|i| mix[d * k + i] * content.c[i * t + j]).sum::<f64>() * env / norm;
            m.push(T::from_f64_lossy(warp.apply(d, u)));
        }
    }
    let f0 = &content.c[..t];
    let voicing = &content.c[(k - 1) * t..];
    let voiced: Vec<bool> = voicing.iter().map(|&v| v > -0.85).collect();
    let logf0 = (0..t)
        .map(|j| T::from_f64_lossy(if voiced[j] { spk.f0_hz.ln() + spk.logf0_std * f0[j] } else { UNVOICED_LOGF0 }))
        .collect();
    FeatureSequence::new(Tensor::new(vec![q, t], m)?, logf0, voiced, content.ap.clone(), cfg.frame_rate, cfg.sample_rate)
}

/// Generates a corpus. The same configuration and stream state always give
/// bit-identical output.
pub fn make_synthetic_corpus<T: Scalar>(cfg: &CorpusConfig, rng: &mut Stream) -> Result<SyntheticCorpus<T>> {
    cfg.validate()?;
    let mix: Vec<f64> = (0..cfg.order * cfg.content_dim).map(|_| rng.normal()).collect();
    let warp_x = Warp::draw(cfg, &cfg.speaker_x);
    let warp_y = Warp::draw(cfg, &cfg.speaker_y);
    let (sx, sy) = (&cfg.speaker_x, &cfg.speaker_y);
    let mut corpus = SyntheticCorpus {
        config: cfg.clone(),
        train_x: Vec::new(),
        train_y: Vec::new(),
        test_x: Vec::new(),
        test_y: Vec::new(),
        warp_x,
        warp_y,
    };
    for _ in 0..cfg.n_train {
        let c = draw_content(cfg, rng);
        corpus.train_x.push(render(cfg, &mix, &c, &corpus.warp_x, sx)?);
    }
    for _ in 0..cfg.n_train {
        let c = draw_content(cfg, rng);
        corpus.train_y.push(render(cfg, &mix, &c, &corpus.warp_y, sy)?);
    }
    for _ in 0..cfg.n_test {
        let c = draw_content(cfg, rng);
        corpus.test_x.push(render(cfg, &mix, &c, &corpus.warp_x, sx)?);
        corpus.test_y.push(render(cfg, &mix, &c, &corpus.warp_y, sy)?);
    }
    Ok(corpus)
}

impl<T: Scalar> SyntheticCorpus<T> {
    /// Exact target rendition of a source-speaker utterance. AP passes
    /// through; log-F0 follows the speakers' generating distributions.
    pub fn oracle_map(&self, x: &FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        if x.order() != self.config.order {
            return Err(Error::Shape(format!("order {} vs corpus order {}", x.order(), self.config.order)));
        }
        let t = x.frames();
        let mut m = x.mcep().clone();
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            let d = i / t;
            let u = self.warp_x.invert(d, v.to_f64().unwrap());
            *v = T::from_f64_lossy(self.warp_y.apply(d, u));
        }
        let (sx, sy) = (&self.config.speaker_x, &self.config.speaker_y);
        let logf0 = x
            .logf0()
            .iter()
            .zip(x.voiced())
            .map(|(&f, &v)| {
                if v {
                    let z = (f.to_f64().unwrap() - sx.f0_hz.ln()) / sx.logf0_std;
                    T::from_f64_lossy(sy.f0_hz.ln() + sy.logf0_std * z)
                } else {
                    f
                }
            })
            .collect();
        x.with_mcep(m)?.with_logf0(logf0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_speakers_rejected() {
        let cfg = CorpusConfig { speaker_y: SpeakerConfig::default(), ..CorpusConfig::default() };
        let mut rng = Stream::new(0, Purpose::Corpus);
        assert!(matches!(make_synthetic_corpus::<f64>(&cfg, &mut rng), Err(Error::Corpus(_))));
    }

    fn small() -> CorpusConfig {
        CorpusConfig { n_train: 2, n_test: 2, frames: 40, ..CorpusConfig::default() }
    }

    #[test]
    fn generation_and_oracle_are_deterministic() {
        let a = make_synthetic_corpus::<f64>(&small(), &mut Stream::new(3, Purpose::Corpus)).unwrap();
        let b = make_synthetic_corpus::<f64>(&small(), &mut Stream::new(3, Purpose::Corpus)).unwrap();
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.test_y, b.test_y);
        let (o1, o2) = (a.oracle_map(&a.test_x[0]).unwrap(), b.oracle_map(&a.test_x[0]).unwrap());
        assert_eq!(o1, o2);
    }

    #[test]
    fn oracle_reproduces_parallel_rendition() {
        let c = make_synthetic_corpus::<f64>(&small(), &mut Stream::new(4, Purpose::Corpus)).unwrap();
        for (x, y) in c.test_x.iter().zip(&c.test_y) {
            let o = c.oracle_map(x).unwrap();
            let err = o.mcep().zip_map(y.mcep(), |a, b| a - b).data().iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-9, "{err}");
            for (a, b) in o.logf0().iter().zip(y.logf0()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(o.ap(), x.ap());
        }
    }

    #[test]
    fn warp_inverse_round_trips() {
        let cfg = CorpusConfig::default();
        let w = Warp::draw(&cfg, &cfg.speaker_y);
        for d in [0, 5, 34] {
            for u in [-2.0, -0.3, 0.0, 0.7, 1.9] {
                assert!((w.invert(d, w.apply(d, u)) - u).abs() < 1e-12);
            }
        }
    }
}
