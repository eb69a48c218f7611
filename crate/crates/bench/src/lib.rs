//! Shared fixtures for the criterion benchmarks in `benches/`.

use relit::renderer::{relight_stack, sample_frontal_hemisphere};
use relit::synth::generate;
use relit::{Camera, ColorMap, Light, PointLight, Preset, PresetSpec, RenderConfig, SceneBundle};

/// A synthetic scene and its relit stack under `count` hemisphere lights.
pub struct Fixture {
    pub bundle: SceneBundle,
    pub lights: Vec<PointLight>,
    pub images: Vec<ColorMap>,
}

pub fn fixture(preset: Preset, res: usize, count: usize) -> Fixture {
    let bundle = generate(&PresetSpec::new(preset, res, 11), &Camera::square(res)).expect("valid preset");
    let lights: Vec<PointLight> = sample_frontal_hemisphere(count, 2.0, 7)
        .expect("valid sampler arguments")
        .into_iter()
        .map(PointLight::white)
        .collect();
    let as_lights: Vec<Light> = lights.iter().map(|&l| l.into()).collect();
    let images = relight_stack(&bundle, &as_lights, &RenderConfig::default()).expect("renderable scene");
    Fixture { bundle, lights, images }
}
