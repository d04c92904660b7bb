use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Split};
use super::store::{aggregate_prompts, EmbeddingStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self { way: 5, shot: 1, queries: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeItem {
    pub video_id: String,
    pub class_id: u32,
    /// Episode label in `0..way`.
    pub label: usize,
    pub frames: Vec<f32>,
}

/// One N-way K-shot task. Support and query items are grouped by label.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    pub frames: usize,
    pub channels: usize,
    /// Global class id of each episode label.
    pub classes: Vec<u32>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Aggregated prompt feature of each episode label.
    pub class_prompts: Vec<Vec<f32>>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    pub fn support_frames(&self) -> Vec<f32> {
        self.support.iter().flat_map(|i| i.frames.iter().copied()).collect()
    }

    pub fn query_frames(&self) -> Vec<f32> {
        self.query.iter().flat_map(|i| i.frames.iter().copied()).collect()
    }

    /// Prompt feature of every support item, `NK x C`.
    pub fn support_prompts(&self) -> Vec<f32> {
        self.support.iter().flat_map(|i| self.class_prompts[i.label].iter().copied()).collect()
    }

    /// Prompt feature of every query item, `NM x C`. Only meaningful in training.
    pub fn query_prompts(&self) -> Vec<f32> {
        self.query.iter().flat_map(|i| self.class_prompts[i.label].iter().copied()).collect()
    }
}

/// Draws episodes from one split of a store.
pub struct EpisodeSampler<'a> {
    store: &'a EmbeddingStore,
    split: Split,
    classes: Vec<u32>,
    videos: HashMap<u32, Vec<&'a str>>,
    prompts: HashMap<u32, Vec<f32>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(manifest: &'a Manifest, store: &'a EmbeddingStore, split: Split) -> Result<Self> {
        let classes = manifest.classes_in(split).to_vec();
        let mut videos: HashMap<u32, Vec<&str>> = classes.iter().map(|&c| (c, Vec::new())).collect();
        for v in manifest.videos.iter().filter(|v| v.split == split) {
            store.video(&v.id)?;
            videos.entry(v.class_id).or_default().push(v.id.as_str());
        }
        let prompts = classes
            .iter()
            .map(|&c| aggregate_prompts(store, c).map(|p| (c, p)))
            .collect::<Result<_>>()?;
        Ok(Self { store, split, classes, videos, prompts })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn sample<R: Rng + ?Sized>(&self, shape: EpisodeShape, rng: &mut R) -> Result<Episode> {
        let EpisodeShape { way, shot, queries } = shape;
        if way == 0 || shot == 0 || queries == 0 {
            return Err(Error::Sampling(format!("episode shape {way}-way {shot}-shot {queries}-query must be positive")));
        }
        if self.classes.len() < way {
            return Err(Error::Sampling(format!(
                "split {} has {} classes, {way}-way episodes need {} more",
                self.split,
                self.classes.len(),
                way - self.classes.len()
            )));
        }
        let need = shot + queries;
        let picked: Vec<u32> = index::sample(rng, self.classes.len(), way).iter().map(|i| self.classes[i]).collect();
        for &c in &picked {
            let have = self.videos[&c].len();
            if have < need {
                return Err(Error::Sampling(format!(
                    "class {c} has {have} videos, {shot}-shot {queries}-query episodes need {} more",
                    need - have
                )));
            }
        }
        let mut support = Vec::with_capacity(way * shot);
        let mut query = Vec::with_capacity(way * queries);
        for (label, &c) in picked.iter().enumerate() {
            let pool = &self.videos[&c];
            for (k, i) in index::sample(rng, pool.len(), need).iter().enumerate() {
                let rec = self.store.video(pool[i])?;
                let item = EpisodeItem { video_id: rec.id.clone(), class_id: c, label, frames: rec.frames.clone() };
                if k < shot {
                    support.push(item);
                } else {
                    query.push(item);
                }
            }
        }
        query.sort_by_key(|i| i.label);
        Ok(Episode {
            shape,
            frames: self.store.frames(),
            channels: self.store.channels(),
            class_prompts: picked.iter().map(|c| self.prompts[c].clone()).collect(),
            classes: picked,
            support,
            query,
        })
    }
}
