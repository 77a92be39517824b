//! Synthetic defects: Perlin blob masks filled with foreign texture.

mod blend;
pub mod perlin;
pub mod texture;

pub use blend::{synth_call_count, synthesize, synthesize_random, SynthConfig, SynthPair};
pub use perlin::{binarize, perlin, sample_mask, AreaBounds, PerlinField};
pub use texture::{TextureBank, TextureKind};
