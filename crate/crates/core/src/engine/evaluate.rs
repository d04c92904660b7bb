use fsar_tensor::Scalar;
use rayon::prelude::*;

use super::model::Model;
use super::train::episode_rng;
use crate::dataset::{EmbeddingStore, EpisodeSampler, Manifest, Split};
use crate::error::{Error, Result};
use crate::spm::Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval; `None` for a
    /// single episode.
    pub ci95: Option<f64>,
    pub accuracies: Vec<f64>,
}

/// `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn confidence_interval(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Worker count from `FSAR_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("FSAR_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Accuracy over `n_episodes` test-mode episodes of `split`, seeded per
/// episode from `seed`, so the result does not depend on scheduling.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    manifest: &Manifest,
    store: &EmbeddingStore,
    split: Split,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let sampler = EpisodeSampler::new(manifest, store, split)?;
    let shape = model.config.episode;
    let run = || {
        (0..n_episodes)
            .into_par_iter()
            .map(|i| {
                let ep = sampler.sample(shape, &mut episode_rng(seed, i as u64))?;
                Ok(model.forward_episode(&ep, Mode::Test)?.0.accuracy)
            })
            .collect::<Result<Vec<f64>>>()
    };
    let accuracies = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("FSAR_THREADS: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(EvalReport { episodes: n_episodes, mean, ci95: confidence_interval(&accuracies), accuracies })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_degenerates_for_one_episode() {
        assert_eq!(confidence_interval(&[0.4]), None);
        let ci = confidence_interval(&[0.0, 1.0]).unwrap();
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }
}
