//! Procedural ground-truth scenes with analytic normals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Camera, ColorMap, Map, SceneBundle, Vec3, R_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Sphere of radius `0.4 * center_depth` centered on the optical axis.
    Sphere,
    /// Fronto-parallel plane carrying a sum of Gaussian bumps.
    BumpField,
    /// Flat fronto-parallel plane.
    TexturedPlane,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Preset::Sphere),
            "bump" | "bump-field" => Ok(Preset::BumpField),
            "plane" | "textured-plane" => Ok(Preset::TexturedPlane),
            other => Err(Error::domain(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlbedoMode {
    Constant([f64; 3]),
    Texture,
}

/// Default sphere albedo; the other presets default to a procedural texture.
pub const SPHERE_ALBEDO: [f64; 3] = [0.7, 0.6, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub preset: Preset,
    pub resolution: usize,
    pub seed: u64,
    /// Roughness varies smoothly inside this range; equal bounds give a constant map.
    pub roughness_range: (f64, f64),
    pub albedo: AlbedoMode,
    /// Distance from the camera to the object center along -z.
    pub center_depth: f64,
}

impl PresetSpec {
    pub fn new(preset: Preset, resolution: usize, seed: u64) -> Self {
        Self {
            preset,
            resolution,
            seed,
            roughness_range: (0.3, 0.6),
            albedo: match preset {
                Preset::Sphere => AlbedoMode::Constant(SPHERE_ALBEDO),
                Preset::BumpField | Preset::TexturedPlane => AlbedoMode::Texture,
            },
            center_depth: 1.0,
        }
    }

    pub fn with_roughness(mut self, lo: f64, hi: f64) -> Self {
        self.roughness_range = (lo, hi);
        self
    }

    pub fn with_albedo(mut self, albedo: AlbedoMode) -> Self {
        self.albedo = albedo;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::domain(format!(
                "resolution must be at least 16, got {}",
                self.resolution
            )));
        }
        let (lo, hi) = self.roughness_range;
        if !(R_MIN <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::domain(format!(
                "roughness range ({lo}, {hi}) must satisfy {R_MIN} <= lo <= hi <= 1"
            )));
        }
        if let AlbedoMode::Constant(a) = self.albedo {
            if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::domain("constant albedo must lie in [0, 1]"));
            }
        }
        if !(self.center_depth.is_finite() && self.center_depth > 0.0) {
            return Err(Error::domain("center depth must be positive"));
        }
        Ok(())
    }
}

/// Smooth field in [0, 1]: the mean of three random plane waves, rescaled.
struct WaveField {
    waves: [(f64, f64, f64); 3],
}

impl WaveField {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * angle.cos(), freq * angle.sin(), phase)
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    /// `s`, `t` are normalized image coordinates in [0, 1].
    fn at(&self, s: f64, t: f64) -> f64 {
        let sum: f64 = self.waves.iter().map(|(fx, fy, p)| (fx * s + fy * t + p).sin()).sum();
        0.5 + sum / 6.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Bump {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

/// Height field `sum_k a_k exp(-|p - c_k|^2 / (2 s_k^2))` above a plane.
struct HeightField {
    bumps: Vec<Bump>,
}

impl HeightField {
    fn random(rng: &mut ChaCha8Rng, scale: f64, count: usize) -> Self {
        let bumps = (0..count)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Bump {
                    x: rng.random_range(-0.42..0.42) * scale,
                    y: rng.random_range(-0.42..0.42) * scale,
                    sigma: rng.random_range(0.06..0.14) * scale,
                    amplitude: sign * rng.random_range(0.02..0.05) * scale,
                }
            })
            .collect();
        Self { bumps }
    }

    /// Height and its gradient at (x, y).
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut h, mut hx, mut hy) = (0.0, 0.0, 0.0);
        for b in &self.bumps {
            let dx = x - b.x;
            let dy = y - b.y;
            let s2 = b.sigma * b.sigma;
            let g = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            h += g;
            hx -= g * dx / s2;
            hy -= g * dy / s2;
        }
        (h, hx, hy)
    }

    /// Radial distance along unit ray `d` to the surface `z = -c + h(x, y)`,
    /// with the surface normal there.
    fn intersect(&self, d: &Vec3, c: f64) -> (f64, Vec3) {
        let mut t = c / -d.z;
        for _ in 0..100 {
            let (h, hx, hy) = self.eval(t * d.x, t * d.y);
            let f = t * d.z + c - h;
            let df = d.z - (hx * d.x + hy * d.y);
            let step = f / df;
            t -= step;
            if step.abs() <= 1e-15 * t {
                break;
            }
        }
        let (_, hx, hy) = self.eval(t * d.x, t * d.y);
        (t, Vec3::new(-hx, -hy, 1.0).normalize())
    }
}

/// Builds the ground-truth bundle for `spec` as seen by `camera`.
///
/// Normals come from the analytic surface; depth is the exact ray hit
/// distance. Lights are left empty.
pub fn generate(spec: &PresetSpec, camera: &Camera) -> Result<SceneBundle> {
    spec.validate()?;
    if camera.width != spec.resolution || camera.height != spec.resolution {
        return Err(Error::domain(format!(
            "camera is {}x{} but the preset asks for {}x{}",
            camera.width, camera.height, spec.resolution, spec.resolution
        )));
    }
    let res = spec.resolution;
    let c = spec.center_depth;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rough_field = WaveField::random(&mut rng);
    let albedo_fields = [
        WaveField::random(&mut rng),
        WaveField::random(&mut rng),
        WaveField::random(&mut rng),
    ];
    let heights = match spec.preset {
        Preset::BumpField => HeightField::random(&mut rng, c, 10),
        _ => HeightField { bumps: Vec::new() },
    };

    let n = res * res;
    let mut normal = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for y in 0..res {
        for x in 0..res {
            let d = camera.ray(x as f64, y as f64);
            let hit = match spec.preset {
                Preset::Sphere => {
                    let center = Vec3::new(0.0, 0.0, -c);
                    let radius = 0.4 * c;
                    let b = d.dot(&center);
                    let disc = b * b - (center.norm_squared() - radius * radius);
                    (disc >= 0.0).then(|| {
                        let t = b - disc.sqrt();
                        (t, ((d * t - center) / radius).normalize())
                    })
                }
                Preset::BumpField | Preset::TexturedPlane => Some(heights.intersect(&d, c)),
            };
            match hit {
                Some((t, nrm)) => {
                    depth.push(t);
                    normal.push(nrm);
                    mask.push(1.0);
                }
                None => {
                    depth.push(c);
                    normal.push(-d);
                    mask.push(0.0);
                }
            }
        }
    }

    let (lo, hi) = spec.roughness_range;
    let norm = |v: usize| v as f64 / (res - 1) as f64;
    let roughness = Map::from_fn(res, res, |x, y| {
        if hi > lo {
            lo + (hi - lo) * rough_field.at(norm(x), norm(y))
        } else {
            lo
        }
    });
    let albedo: ColorMap = Map::from_fn(res, res, |x, y| match spec.albedo {
        AlbedoMode::Constant(a) => Vec3::from(a),
        AlbedoMode::Texture => Vec3::from_fn(|ch, _| 0.15 + 0.75 * albedo_fields[ch].at(norm(x), norm(y))),
    });

    Ok(SceneBundle {
        albedo,
        normal: Map::new(res, res, normal)?,
        depth: Map::new(res, res, depth)?,
        roughness,
        mask: Map::new(res, res, mask)?,
        camera: *camera,
        lights: Vec::new(),
    })
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma_fraction`
/// times the largest value across the whole stack, then clamps at zero.
pub fn perturb_images(images: &[ColorMap], sigma_fraction: f64, seed: u64) -> Result<Vec<ColorMap>> {
    if !(sigma_fraction.is_finite() && sigma_fraction >= 0.0) {
        return Err(Error::domain("noise fraction must be nonnegative"));
    }
    if sigma_fraction == 0.0 {
        return Ok(images.to_vec());
    }
    let peak = images
        .iter()
        .flat_map(|m| m.data().iter().flat_map(|p| p.iter().copied()))
        .fold(0.0f64, f64::max);
    let noise = Normal::new(0.0, sigma_fraction * peak).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.to_vec();
    for img in out.iter_mut() {
        for p in img.data_mut() {
            for c in p.iter_mut() {
                *c = (*c + noise.sample(&mut rng)).max(0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_bundle;

    fn make(preset: Preset, res: usize, seed: u64) -> SceneBundle {
        generate(&PresetSpec::new(preset, res, seed), &Camera::square(res)).unwrap()
    }

    #[test]
    fn every_preset_validates() {
        for preset in [Preset::Sphere, Preset::BumpField, Preset::TexturedPlane] {
            let b = make(preset, 48, 3);
            let v = validate_bundle(&b);
            assert!(v.is_empty(), "{preset:?}: {:?}", &v[..v.len().min(3)]);
            assert!(b.mask.count_set() > 0);
        }
    }

    #[test]
    fn sphere_front_normal_faces_camera() {
        let b = make(Preset::Sphere, 64, 1);
        let n = b.normal.get(32, 32);
        assert!((n - Vec3::z()).norm() < 1e-6, "{n:?}");
        assert!((b.depth.get(32, 32) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bundle() {
        for preset in [Preset::Sphere, Preset::BumpField, Preset::TexturedPlane] {
            assert_eq!(make(preset, 32, 9), make(preset, 32, 9));
        }
        assert_ne!(
            make(Preset::BumpField, 32, 9).normal,
            make(Preset::BumpField, 32, 10).normal
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let cam = Camera::square(8);
        assert!(generate(&PresetSpec::new(Preset::Sphere, 8, 0), &cam).is_err());
        let spec = PresetSpec::new(Preset::Sphere, 32, 0).with_roughness(0.0, 0.5);
        assert!(generate(&spec, &Camera::square(32)).is_err());
        let spec = PresetSpec::new(Preset::Sphere, 32, 0);
        assert!(generate(&spec, &Camera::square(33)).is_err());
    }

    #[test]
    fn constant_roughness_and_albedo() {
        let spec = PresetSpec::new(Preset::Sphere, 32, 0)
            .with_roughness(0.3, 0.3)
            .with_albedo(AlbedoMode::Constant([0.2, 0.4, 0.6]));
        let b = generate(&spec, &Camera::square(32)).unwrap();
        assert!(b.roughness.data().iter().all(|&r| r == 0.3));
        assert!(b.albedo.data().iter().all(|a| *a == Vec3::new(0.2, 0.4, 0.6)));
    }

    #[test]
    fn zero_noise_is_identity() {
        let b = make(Preset::TexturedPlane, 16, 0);
        let imgs = vec![b.albedo.clone(), b.albedo.clone()];
        assert_eq!(perturb_images(&imgs, 0.0, 5).unwrap(), imgs);
        assert_eq!(
            perturb_images(&imgs, 0.01, 5).unwrap(),
            perturb_images(&imgs, 0.01, 5).unwrap()
        );
        assert!(perturb_images(&imgs, -1.0, 5).is_err());
    }

    #[test]
    fn noise_sigma_matches_target() {
        // far from zero so the clamp never bites
        let img = Map::filled(578, 577, Vec3::repeat(1.0));
        let out = perturb_images(&[img], 0.01, 42).unwrap();
        let vals: Vec<f64> = out[0].data().iter().flat_map(|p| p.iter().copied()).collect();
        assert!(vals.len() >= 1_000_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.02 * 0.01, "sigma {}", var.sqrt());
        assert!((mean - 1.0).abs() < 1e-4);
    }
}
