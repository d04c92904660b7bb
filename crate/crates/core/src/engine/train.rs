use fsar_tensor::optim::{adam_step, AdamConfig, AdamState, StepOutcome};
use fsar_tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::MetricsRow;
use super::model::Model;
use crate::dataset::{EmbeddingStore, EpisodeSampler, Manifest, Split};
use crate::error::{Error, Result};

/// Independent generator for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Model plus optimizer state and the pending gradient accumulation.
#[derive(Clone, Debug)]
pub struct TrainState<S: Scalar> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    /// Episodes consumed so far, including skipped ones.
    pub episodes: usize,
    /// Optimizer steps applied.
    pub steps: usize,
    /// Episodes or steps dropped because of non-finite values.
    pub skipped: usize,
    accumulated: Vec<Vec<S>>,
    accumulated_count: usize,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Model<S>) -> Self {
        let adam = AdamState::new(&model.params);
        let accumulated = model.params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self { model, adam, episodes: 0, steps: 0, skipped: 0, accumulated, accumulated_count: 0 }
    }

    /// Episodes whose gradients wait for the next step.
    pub fn pending(&self) -> usize {
        self.accumulated_count
    }

    fn adam_config(&self) -> AdamConfig {
        let o = &self.model.config.optimizer;
        AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    fn accumulate(&mut self, grads: Vec<Vec<S>>) -> Result<()> {
        for (acc, g) in self.accumulated.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        self.accumulated_count += 1;
        if self.accumulated_count < self.model.config.optimizer.accumulation {
            return Ok(());
        }
        let scale = S::lit(1.0 / self.accumulated_count as f64);
        for acc in &mut self.accumulated {
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        let cfg = self.adam_config();
        match adam_step(&mut self.model.params, &self.accumulated, &mut self.adam, &cfg)? {
            StepOutcome::Applied => self.steps += 1,
            StepOutcome::SkippedNonFinite { .. } => self.skipped += 1,
        }
        for acc in &mut self.accumulated {
            acc.iter_mut().for_each(|a| *a = S::zero());
        }
        self.accumulated_count = 0;
        Ok(())
    }
}

/// Runs `episodes` training episodes on the train split, continuing from the
/// state's episode counter. Every episode is reported to `log` and returned.
pub fn train<S: Scalar>(
    state: &mut TrainState<S>,
    manifest: &Manifest,
    store: &EmbeddingStore,
    episodes: usize,
    mut log: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let sampler = EpisodeSampler::new(manifest, store, Split::Train)?;
    let shape = state.model.config.episode;
    let seed = state.model.config.seeds.train;
    let mut rows = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let index = state.episodes;
        let episode = sampler.sample(shape, &mut episode_rng(seed, index as u64))?;
        state.episodes += 1;
        let row = match state.model.episode_gradients(&episode) {
            Ok((pred, loss, grads)) => {
                state.accumulate(grads)?;
                MetricsRow {
                    episode: index,
                    l_ce: loss.ce,
                    l_h: loss.h,
                    l_s: loss.s,
                    total: loss.total,
                    accuracy: pred.accuracy,
                }
            }
            Err(Error::Numeric(_)) => {
                state.skipped += 1;
                let nan = f64::NAN;
                MetricsRow { episode: index, l_ce: nan, l_h: nan, l_s: nan, total: nan, accuracy: nan }
            }
            Err(e) => return Err(e),
        };
        log(&row);
        rows.push(row);
    }
    Ok(rows)
}
