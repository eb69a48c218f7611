//! Physically based svBRDF rendering, near-field relighting, and calibrated
//! photometric stereo over the rendered stacks.
//!
//! The pipeline is: [`synth`] builds ground-truth scenes, [`renderer`]
//! relights them, [`inverse`] recovers normal/albedo/roughness from image
//! stacks, and [`metrics`] scores the result. [`io`] moves everything to and
//! from disk as PFM maps plus JSON manifests.

pub mod brdf;
pub mod error;
pub mod inverse;
pub mod io;
pub mod metrics;
pub mod renderer;
pub mod synth;
pub mod types;

pub use brdf::{BrdfModel, BrdfParams, FresnelVariant, ShadingGeometry};
pub use error::{Error, Result};
pub use inverse::{LambertianInit, SolveConfig, SolveResult};
pub use renderer::{Falloff, RenderConfig};
pub use synth::{AlbedoMode, Preset, PresetSpec};
pub use types::{
    validate_bundle, Camera, ColorMap, EnvLight, Geometry, Light, Map, NormalMap, Pixel, PointLight, ScalarMap,
    SceneBundle, Vec3, Violation, R_MIN,
};
