//! Synthetic rain: streak rendering, image formation and datasets.

mod compose;
mod dataset;
mod image;
mod streak;

pub use compose::{compose_additive, compose_heavy, MaskSpec, RainParams, RainRecipe};
pub use dataset::{
    generate_dataset, generate_pair, import_folders, pair_seed, patch_window, procedural_background, render_pair,
    sample_patch, sample_recipe, sample_training_patch, splitmix64, Composition, Dataset, LoadedPair, Manifest,
    PairRecord, PatchWindow, RainRanges, RainyPair, MANIFEST_FILE,
};
pub use image::{CleanImage, Image};
pub use streak::{line_kernel, render_streak_layer, salt_noise, StreakLayer, StreakSpec};
