//! Embedding containers, manifests, synthetic data and episode sampling.

mod episode;
mod manifest;
mod store;
mod synth;

pub use episode::{Episode, EpisodeItem, EpisodeSampler, EpisodeShape};
pub use manifest::{ClassEntry, Manifest, Split, VideoEntry};
pub use store::{
    aggregate_prompts, read_frames, read_prompts, read_store, write_frames, write_prompts, write_store,
    EmbeddingStore, PromptRecord, VideoRecord, FRAME_MAGIC, FORMAT_VERSION, PROMPT_MAGIC,
};
pub use synth::{synth_dataset, SynthConfig};
