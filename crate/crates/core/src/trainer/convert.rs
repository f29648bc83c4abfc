use std::path::Path;

use super::{checkpoint_info, restore_state, Direction};
use crate::error::{Error, Result};
use crate::features::{convert_logf0, denormalize_mcep, normalize_mcep, FeatureSequence, SpeakerStats};
use crate::nets::checkpoint::Checkpoint;
use crate::nets::Generator;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::schedule::{denoise_step, forward_marginal_sample, Denoiser, DiffusionSchedule, ScheduleConfig};
use crate::tensor::Tensor;

/// Conversion chain for one direction of a trained model.
#[derive(Debug, Clone)]
pub struct Converter<T> {
    pub direction: Direction,
    pub generator: Generator<T>,
    pub schedule: DiffusionSchedule,
    pub source: SpeakerStats,
    pub target: SpeakerStats,
}

impl<T: Scalar> Converter<T> {
    /// Uses the generator and statistics stored in `ck`. `schedule` is the
    /// caller's schedule; a step count differing from training is an error.
    pub fn from_checkpoint(ck: &Checkpoint<T>, direction: Direction, schedule: &ScheduleConfig) -> Result<Self> {
        let info = checkpoint_info(ck)?;
        if info.schedule.t_diff != schedule.t_diff {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with T_diff = {}, conversion asked for {}",
                info.schedule.t_diff, schedule.t_diff
            )));
        }
        let state = restore_state(ck)?;
        let (generator, source, target) = match direction {
            Direction::X2y => (state.g_xy, info.stats_x, info.stats_y),
            Direction::Y2x => (state.g_yx, info.stats_y, info.stats_x),
        };
        Ok(Self { direction, generator, schedule: schedule.build()?, source, target })
    }

    pub fn load(path: &Path, direction: Direction, schedule: &ScheduleConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, direction, schedule)
    }

    /// Returns `n_samples` conversions of `seq`, each from its own latent
    /// and noise draws.
    pub fn convert(&self, seq: &FeatureSequence<T>, n_samples: usize, rng: &mut Stream) -> Result<Vec<FeatureSequence<T>>> {
        let spec = self.generator.spec();
        if seq.order() != spec.feature_dim {
            return Err(Error::Shape(format!("model expects order {}, input has {}", spec.feature_dim, seq.order())));
        }
        convert_with(
            &self.generator,
            spec.latent_dim,
            spec.downsample_factor,
            &self.schedule,
            &self.source,
            &self.target,
            seq,
            n_samples,
            rng,
        )
    }
}

/// Repeats the last frame until the length is a multiple of `factor`.
fn pad_frames<T: Scalar>(m: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (q, len) = (m.dim(0), m.dim(1));
    let padded = len.div_ceil(factor) * factor;
    Tensor::from_fn(&[q, padded], |i| {
        let (d, f) = (i / padded, i % padded);
        m.data()[d * len + f.min(len - 1)]
    })
}

/// Conversion with any denoiser: normalize with the source statistics,
/// diffuse to `T`, run the reverse chain with a fresh latent per step,
/// denormalize with the target statistics, map log-F0 and pass AP through.
#[allow(clippy::too_many_arguments)]
pub fn convert_with<T: Scalar, G: Denoiser<T> + ?Sized>(
    gen: &G,
    latent_dim: usize,
    downsample_factor: usize,
    sched: &DiffusionSchedule,
    source: &SpeakerStats,
    target: &SpeakerStats,
    seq: &FeatureSequence<T>,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<Vec<FeatureSequence<T>>> {
    if n_samples == 0 || downsample_factor == 0 {
        return Err(Error::Config("n_samples and downsample_factor must be positive".into()));
    }
    let (q, len) = (seq.order(), seq.frames());
    let x0 = pad_frames(&normalize_mcep(seq.mcep(), source)?, downsample_factor);
    let padded = x0.dim(1);
    let batch = Tensor::stack(&vec![x0; n_samples])?;
    let mut x = forward_marginal_sample(&batch, sched.steps(), sched, rng)?;
    for t in (1..=sched.steps()).rev() {
        let z = rng.normal_tensor(&[n_samples, latent_dim]);
        x = denoise_step(&x, t, gen, &z, sched, rng)?.0;
    }
    let logf0 = convert_logf0(seq.logf0(), seq.voiced(), source, target)?;
    (0..n_samples)
        .map(|i| {
            let sample = x.index0(i);
            let cropped = Tensor::from_fn(&[q, len], |k| sample.data()[(k / len) * padded + k % len]);
            seq.with_mcep(denormalize_mcep(&cropped, target)?)?.with_logf0(logf0.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn seq(frames: usize) -> FeatureSequence<f64> {
        let mcep = Tensor::from_fn(&[2, frames], |i| i as f64 * 0.1);
        let voiced: Vec<bool> = (0..frames).map(|i| i % 2 == 0).collect();
        let logf0 = voiced.iter().map(|&v| if v { 5.0 } else { crate::features::UNVOICED_LOGF0 }).collect();
        FeatureSequence::new(mcep, logf0, voiced, vec![7u8; frames * 3], 200.0, 16000).unwrap()
    }

    fn stats(mean: f64) -> SpeakerStats {
        SpeakerStats { logf0_mean: mean, logf0_std: 0.5, mcep_mean: vec![mean; 2], mcep_std: vec![2.0; 2] }
    }

    #[test]
    fn identity_denoiser_returns_target_space_features() {
        // A denoiser that always predicts zero lands on the target mean.
        let zero = |x: &Tensor<f64>, _: &Tensor<f64>, _: usize| Ok(Tensor::zeros(x.shape()));
        let sched = DiffusionSchedule::linear(4, 0.1, 0.95).unwrap();
        let mut rng = Stream::new(3, Purpose::Convert);
        let src = seq(7);
        let out = convert_with(&zero, 2, 4, &sched, &stats(1.0), &stats(-3.0), &src, 2, &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(o.frames(), 7);
            assert!(o.mcep().data().iter().all(|&v| v == -3.0));
            assert_eq!(o.ap(), src.ap());
            assert_eq!(o.voiced(), src.voiced());
            assert_eq!(o.logf0()[0], 1.0);
        }
    }

    #[test]
    fn samples_differ_with_stochastic_denoiser() {
        let passthrough = |x: &Tensor<f64>, _: &Tensor<f64>, _: usize| Ok(x.clone());
        let sched = DiffusionSchedule::linear(4, 0.1, 0.95).unwrap();
        let mut rng = Stream::new(3, Purpose::Convert);
        let out = convert_with(&passthrough, 2, 1, &sched, &stats(0.0), &stats(0.0), &seq(5), 2, &mut rng).unwrap();
        assert_ne!(out[0].mcep(), out[1].mcep());
    }

    #[test]
    fn padding_repeats_last_frame() {
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_frames(&m, 4);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 6.0]);
    }
}
