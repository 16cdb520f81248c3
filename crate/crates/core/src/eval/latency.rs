use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::fusion::{build_model, Backbones, FusedModel, ModelConfig};
use crate::graph::Mode;
use crate::runtime::Environment;
use crate::tensor::{Element, Tensor};

/// Per-image wall-clock statistics over the measured (post-warmup) runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub batch_size: usize,
    pub mean_ms: f64,
    /// Population standard deviation.
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Every measured run, in ms per image.
    pub samples_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(warmup_runs: usize, batch_size: usize, samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(config_err!("latency statistics need at least one measured run"));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let min = samples_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            warmup_runs,
            measured_runs: samples_ms.len(),
            batch_size,
            // rounding can push the mean a hair outside the sample range
            mean_ms: mean.clamp(min, max),
            std_ms: var.sqrt(),
            min_ms: min,
            max_ms: max,
            samples_ms,
        })
    }
}

/// Times `warmup + runs` calls of `f`, keeping only the last `runs`.
/// Each sample is the call's duration divided by `batch_size`.
pub fn time_runs(warmup: usize, runs: usize, batch_size: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(config_err!("runs must be at least 1"));
    }
    if batch_size == 0 {
        return Err(config_err!("batch size must be at least 1"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3 / batch_size as f64);
    }
    LatencyStats::from_samples(warmup, batch_size, samples)
}

/// Forward-pass latency of `model` in Eval mode on a fixed random input of
/// shape `input_shape` (`(N, 3, S, S)`). Data loading is not timed.
pub fn profile_latency<E: Element>(
    model: &mut FusedModel<E>,
    input_shape: [usize; 4],
    warmup: usize,
    runs: usize,
) -> Result<LatencyStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::<E>::randn(input_shape.to_vec(), 1.0, &mut rng);
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let stats = time_runs(warmup, runs, input_shape[0], || model.forward(&input, 0).map(|_| ()));
    model.set_mode(previous);
    stats
}

/// Latency of each backbone alone and of the fused model, measured
/// back-to-back on the same host with the same head configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingComparison {
    pub shufflenet: LatencyStats,
    pub efficientvit: LatencyStats,
    pub fused: LatencyStats,
    /// Soft check: the fused mean is at least each component's mean.
    pub fused_not_faster: bool,
    /// Fused mean divided by the sum of the component means.
    pub fused_over_sum: f64,
    pub environment: Environment,
}

pub fn compare_components(config: &ModelConfig, batch: usize, warmup: usize, runs: usize) -> Result<TimingComparison> {
    let size = config.input_size();
    let measure = |backbones: Backbones| -> Result<LatencyStats> {
        let cfg = ModelConfig {
            backbones,
            ..config.clone()
        };
        let mut model = build_model::<f32>(&cfg, 0)?;
        profile_latency(&mut model, [batch, 3, size, size], warmup, runs)
    };
    let shufflenet = measure(Backbones::ShuffleNet)?;
    let efficientvit = measure(Backbones::EfficientVit)?;
    let fused = measure(Backbones::Fused)?;
    Ok(TimingComparison {
        fused_not_faster: fused.mean_ms >= shufflenet.mean_ms && fused.mean_ms >= efficientvit.mean_ms,
        fused_over_sum: fused.mean_ms / (shufflenet.mean_ms + efficientvit.mean_ms),
        shufflenet,
        efficientvit,
        fused,
        environment: Environment::detect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_has_zero_spread() {
        let s = LatencyStats::from_samples(0, 1, vec![3.5]).unwrap();
        assert_eq!((s.mean_ms, s.std_ms, s.min_ms, s.max_ms), (3.5, 0.0, 3.5, 3.5));
    }

    #[test]
    fn warmup_is_excluded() {
        let mut calls = 0;
        let s = time_runs(3, 4, 2, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((calls, s.measured_runs, s.samples_ms.len(), s.warmup_runs), (7, 4, 4, 3));
        assert!(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms);
    }

    #[test]
    fn zero_runs_is_config_error() {
        assert!(matches!(time_runs(1, 0, 1, || Ok(())), Err(crate::Error::Config(_))));
    }

    #[test]
    fn population_std() {
        let s = LatencyStats::from_samples(0, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!((s.mean_ms, s.std_ms), (2.0, 1.0));
    }
}
