use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{ClassEntry, Manifest, Split, VideoEntry};
use super::store::{EmbeddingStore, PromptRecord, VideoRecord};
use crate::error::{Error, Result};

/// Parameters of the synthetic embedding generator.
///
/// Frame `t` of a video of class `c` is
/// `appearance_sep * u_c + o_v + t * motion_sep * d_c + noise * e / sqrt(C)`
/// with a unit class vector `u_c`, a per-step class drift `d_c` drawn from
/// `N(0, I / C)` (so its norm varies around 1), a per-video offset `o_v` of
/// norm `scene_jitter` and standard normal `e`. Prompt rows are
/// `appearance_sep * u_c + prompt_jitter * e / sqrt(C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub channels: usize,
    pub templates: usize,
    pub appearance_sep: f64,
    pub motion_sep: f64,
    pub noise: f64,
    pub scene_jitter: f64,
    pub prompt_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_classes: 24,
            val_classes: 0,
            test_classes: 10,
            per_class: 20,
            frames: 8,
            channels: 64,
            templates: 16,
            appearance_sep: 1.0,
            motion_sep: 0.0,
            noise: 0.1,
            scene_jitter: 0.0,
            prompt_jitter: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total_classes(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }

    fn validate(&self) -> Result<()> {
        if self.total_classes() == 0 || self.per_class == 0 || self.channels == 0 || self.templates == 0 {
            return Err(Error::Config("synthetic class, video, channel and template counts must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("synthetic T = {} but at least 2 frames are needed", self.frames)));
        }
        for (name, v) in [
            ("appearance_sep", self.appearance_sep),
            ("motion_sep", self.motion_sep),
            ("noise", self.noise),
            ("scene_jitter", self.scene_jitter),
            ("prompt_jitter", self.prompt_jitter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<(Manifest, EmbeddingStore)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, c) = (cfg.frames, cfg.channels);
    let scale = 1.0 / (c as f64).sqrt();
    let n_classes = cfg.total_classes();

    let mut classes = Vec::with_capacity(n_classes);
    let mut splits: BTreeMap<Split, Vec<u32>> = BTreeMap::new();
    let mut entries = Vec::new();
    let mut videos = Vec::new();
    let mut prompts = Vec::new();

    for class in 0..n_classes {
        let id = class as u32;
        let split = if class < cfg.train_classes {
            Split::Train
        } else if class < cfg.train_classes + cfg.val_classes {
            Split::Val
        } else {
            Split::Test
        };
        classes.push(ClassEntry { id, name: format!("class_{class:03}") });
        splits.entry(split).or_default().push(id);

        let appearance = unit_vector(&mut rng, c);
        let drift: Vec<f64> = (0..c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();

        let mut templates = Vec::with_capacity(cfg.templates * c);
        for _ in 0..cfg.templates {
            for &u in &appearance {
                let e: f64 = rng.sample(StandardNormal);
                templates.push((cfg.appearance_sep * u + cfg.prompt_jitter * scale * e) as f32);
            }
        }
        prompts.push(PromptRecord { class_id: id, templates });

        for k in 0..cfg.per_class {
            let offset = unit_vector(&mut rng, c);
            let mut frames = Vec::with_capacity(t * c);
            for step in 0..t {
                let progress = step as f64;
                for ch in 0..c {
                    let e: f64 = rng.sample(StandardNormal);
                    let x = cfg.appearance_sep * appearance[ch]
                        + cfg.scene_jitter * offset[ch]
                        + progress * cfg.motion_sep * drift[ch]
                        + cfg.noise * scale * e;
                    frames.push(x as f32);
                }
            }
            let vid = format!("c{class:03}_v{k:03}");
            entries.push(VideoEntry { id: vid.clone(), class_id: id, split });
            videos.push(VideoRecord { id: vid, class_id: id, frames });
        }
    }

    let manifest = Manifest { classes, videos: entries, frames: t, channels: c, templates: cfg.templates, splits };
    manifest.validate()?;
    let store = EmbeddingStore::new(t, c, cfg.templates, videos, prompts)?;
    store.check_against(&manifest)?;
    Ok((manifest, store))
}
