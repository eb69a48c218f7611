//! Direct-illumination rendering of a [`SceneBundle`] under near-field point
//! lights and second-order SH environments, plus the direct/indirect image
//! split.

use std::f64::consts::{FRAC_1_PI, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{self, BrdfModel, BrdfParams, ShadingGeometry};
use crate::error::{Error, Result};
use crate::types::{ColorMap, EnvLight, Light, Map, PointLight, SceneBundle, Vec3};

/// Distances below this are treated as the light sitting on the surface.
pub const MIN_LIGHT_DISTANCE: f64 = 1e-6;

/// Scene center used by the hemisphere light sampler.
pub const SCENE_CENTER: Vec3 = Vec3::new(0.0, 0.0, -1.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Falloff {
    /// `1 / d^2` with d the true surface-to-light distance.
    #[default]
    InverseSquareDistance,
    /// `1 / D^2` with D read from the depth map.
    InverseSquareDepthMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Multiply by `max(n.l, 0)`.
    pub cosine_term: bool,
    pub falloff: Falloff,
    /// Clamp SH irradiance and composed images at zero.
    pub clamp_negative: bool,
    pub brdf: BrdfModel,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            cosine_term: true,
            falloff: Falloff::default(),
            clamp_negative: true,
            brdf: BrdfModel::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Pixels where a point light coincided with the surface.
    pub coincident: usize,
}

/// Outgoing radiance toward the camera from one surface point lit by one
/// point light. The boolean reports a light/surface coincidence.
#[inline]
pub fn point_radiance(
    config: &RenderConfig,
    params: &BrdfParams,
    normal: &Vec3,
    point: &Vec3,
    depth: f64,
    light: &PointLight,
) -> (Vec3, bool) {
    let to_light = light.position - point;
    let raw = to_light.norm();
    let coincident = raw < MIN_LIGHT_DISTANCE;
    let dist = raw.max(MIN_LIGHT_DISTANCE);
    let v = -point / point.norm();
    let l = if raw > 0.0 { to_light / raw } else { v };
    let nl = normal.dot(&l);
    if nl <= 0.0 || normal.dot(&v) <= 0.0 {
        return (Vec3::zeros(), coincident);
    }
    let Some(geom) = ShadingGeometry::unchecked(*normal, l, v) else {
        return (Vec3::zeros(), coincident);
    };
    let falloff = match config.falloff {
        Falloff::InverseSquareDistance => 1.0 / (dist * dist),
        Falloff::InverseSquareDepthMap => 1.0 / (depth * depth),
    };
    let cosine = if config.cosine_term { nl } else { 1.0 };
    let f = brdf::eval_unchecked(params, &geom);
    (light.intensity.component_mul(&f) * (falloff * cosine), coincident)
}

// Real SH basis normalization constants.
const SH_C0: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
const SH_C1: f64 = 0.488_602_511_902_919_9; // sqrt(3 / (4 pi))
const SH_C2: f64 = 1.092_548_430_592_079_2; // sqrt(15 / (4 pi))
const SH_C3: f64 = 0.315_391_565_252_520_05; // sqrt(5 / (16 pi))
const SH_C4: f64 = 0.546_274_215_296_039_6; // sqrt(15 / (16 pi))

/// The 9 real SH basis functions at unit direction `n`, in band order.
pub fn sh_basis(n: &Vec3) -> [f64; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Irradiance at a surface with normal `n` under the SH environment, using
/// the clamped-cosine band factors pi, 2pi/3 and pi/4.
pub fn shade_sh(normal: &Vec3, env: &EnvLight, clamp_negative: bool) -> Vec3 {
    const BAND: [f64; 9] = [
        PI,
        2.0 * PI / 3.0,
        2.0 * PI / 3.0,
        2.0 * PI / 3.0,
        PI / 4.0,
        PI / 4.0,
        PI / 4.0,
        PI / 4.0,
        PI / 4.0,
    ];
    let y = sh_basis(normal);
    let mut out = Vec3::zeros();
    for c in 0..3 {
        let mut e = 0.0;
        for i in 0..9 {
            e += BAND[i] * env.coefficients[c][i] * y[i];
        }
        out[c] = if clamp_negative { e.max(0.0) } else { e };
    }
    out
}

fn check_bundle_dims(bundle: &SceneBundle) -> Result<()> {
    let m = &bundle.mask;
    m.check_same_dims(&bundle.albedo)?;
    m.check_same_dims(&bundle.normal)?;
    m.check_same_dims(&bundle.depth)?;
    m.check_same_dims(&bundle.roughness)?;
    if (bundle.camera.width, bundle.camera.height) != m.dims() {
        return Err(Error::DimensionMismatch {
            expected_w: m.width(),
            expected_h: m.height(),
            got_w: bundle.camera.width,
            got_h: bundle.camera.height,
        });
    }
    Ok(())
}

fn pixel_radiance(bundle: &SceneBundle, lights: &[Light], config: &RenderConfig, i: usize) -> (Vec3, usize) {
    if !bundle.mask.is_set(i) {
        return (Vec3::zeros(), 0);
    }
    let depth = bundle.depth.data()[i];
    let normal = bundle.normal.data()[i];
    let params = BrdfParams {
        albedo: bundle.albedo.data()[i],
        roughness: bundle.roughness.data()[i],
        model: config.brdf,
    };
    let point = bundle.camera.point_at(i, depth);
    let mut sum = Vec3::zeros();
    let mut coincident = 0;
    for light in lights {
        match light {
            Light::Point(p) => {
                let (value, hit) = point_radiance(config, &params, &normal, &point, depth, p);
                sum += value;
                coincident += hit as usize;
            }
            Light::Env(env) => {
                let e = shade_sh(&normal, env, config.clamp_negative);
                sum += params.albedo.component_mul(&e) * FRAC_1_PI;
            }
        }
    }
    (sum, coincident)
}

/// Renders the direct image under the sum of `lights`, with diagnostics.
pub fn render_lights_with_stats(
    bundle: &SceneBundle,
    lights: &[Light],
    config: &RenderConfig,
) -> Result<(ColorMap, RenderStats)> {
    check_bundle_dims(bundle)?;
    let (w, h) = bundle.dims();
    let pixels: Vec<(Vec3, usize)> = (0..w * h)
        .into_par_iter()
        .map(|i| pixel_radiance(bundle, lights, config, i))
        .collect();
    let coincident = pixels.iter().map(|p| p.1).sum();
    let image = Map::new(w, h, pixels.into_iter().map(|p| p.0).collect())?;
    Ok((image, RenderStats { coincident }))
}

pub fn render_lights(bundle: &SceneBundle, lights: &[Light], config: &RenderConfig) -> Result<ColorMap> {
    render_lights_with_stats(bundle, lights, config).map(|r| r.0)
}

/// Renders the direct image under a single light.
pub fn render_direct(bundle: &SceneBundle, light: &Light, config: &RenderConfig) -> Result<ColorMap> {
    render_lights(bundle, std::slice::from_ref(light), config)
}

/// One direct image per light, in input order.
pub fn relight_stack(bundle: &SceneBundle, lights: &[Light], config: &RenderConfig) -> Result<Vec<ColorMap>> {
    if lights.is_empty() {
        return Err(Error::domain("relight_stack needs at least one light"));
    }
    lights
        .iter()
        .map(|light| render_direct(bundle, light, config))
        .collect()
}

/// `direct + residual`, pixelwise.
pub fn compose_global(direct: &ColorMap, residual: &ColorMap, clamp_negative: bool) -> Result<ColorMap> {
    direct.check_same_dims(residual)?;
    let data = direct
        .data()
        .iter()
        .zip(residual.data())
        .map(|(d, r)| {
            let s = d + r;
            if clamp_negative {
                s.map(|c| c.max(0.0))
            } else {
                s
            }
        })
        .collect();
    Map::new(direct.width(), direct.height(), data)
}

/// `full - direct`, pixelwise. The residual may be negative.
pub fn decompose_global(full: &ColorMap, direct: &ColorMap) -> Result<ColorMap> {
    full.check_same_dims(direct)?;
    let data = full.data().iter().zip(direct.data()).map(|(f, d)| f - d).collect();
    Map::new(full.width(), full.height(), data)
}

/// Light positions drawn uniformly (by area) over the camera-side hemisphere
/// of `radius` around [`SCENE_CENTER`].
///
/// Samples come from one ChaCha stream keyed on `seed`, two uniforms per
/// light, so a shorter request is always a prefix of a longer one.
pub fn sample_frontal_hemisphere(count: usize, radius: f64, seed: u64) -> Result<Vec<Vec3>> {
    sample_hemisphere_around(SCENE_CENTER, count, radius, seed)
}

pub fn sample_hemisphere_around(center: Vec3, count: usize, radius: f64, seed: u64) -> Result<Vec<Vec3>> {
    if count == 0 {
        return Err(Error::domain("light count must be at least 1"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::domain(format!(
            "hemisphere radius must be positive, got {radius}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let z: f64 = rng.random();
            let phi = 2.0 * PI * rng.random::<f64>();
            let r = (1.0 - z * z).max(0.0).sqrt();
            center + Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Camera, NormalMap, ScalarMap};

    /// Fronto-parallel plane at z = -1 covering the whole image.
    fn plane(res: usize, roughness: f64) -> SceneBundle {
        let camera = Camera::square(res);
        let depth: ScalarMap = Map::from_fn(res, res, |x, y| 1.0 / -camera.ray(x as f64, y as f64).z);
        let normal: NormalMap = Map::filled(res, res, Vec3::z());
        SceneBundle {
            albedo: Map::filled(res, res, Vec3::repeat(1.0)),
            normal,
            depth,
            roughness: Map::filled(res, res, roughness),
            mask: Map::filled(res, res, 1.0),
            camera,
            lights: vec![],
        }
    }

    fn lambert() -> RenderConfig {
        RenderConfig {
            brdf: BrdfModel::lambertian(),
            ..RenderConfig::default()
        }
    }

    #[test]
    fn colocated_light_on_plane_center() {
        let b = plane(16, 0.5);
        let img = render_direct(&b, &PointLight::white(Vec3::zeros()).into(), &lambert()).unwrap();
        let c = img.get(8, 8);
        for ch in 0..3 {
            assert!((c[ch] - FRAC_1_PI).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_intensity_is_black() {
        let b = plane(16, 0.5);
        let light = PointLight::new(Vec3::new(0.3, 0.2, 0.0), Vec3::zeros());
        let img = render_direct(&b, &light.into(), &RenderConfig::default()).unwrap();
        assert!(img.data().iter().all(|p| *p == Vec3::zeros()));
    }

    #[test]
    fn masked_out_and_backfacing_are_zero() {
        let mut b = plane(16, 0.5);
        b.mask.set(2, 2, 0.0);
        // light behind the plane
        let light = PointLight::white(Vec3::new(0.0, 0.0, -3.0));
        let img = render_direct(&b, &light.into(), &RenderConfig::default()).unwrap();
        assert!(img.data().iter().all(|p| *p == Vec3::zeros()));
        let img = render_direct(&b, &PointLight::white(Vec3::zeros()).into(), &RenderConfig::default()).unwrap();
        assert_eq!(img.get(2, 2), Vec3::zeros());
        assert!(img.get(3, 3).x > 0.0);
    }

    #[test]
    fn coincident_light_is_counted() {
        let b = plane(16, 0.5);
        let light = PointLight::white(b.camera.point_at(8 * 16 + 8, b.depth.get(8, 8)));
        let (img, stats) = render_lights_with_stats(&b, &[light.into()], &lambert()).unwrap();
        assert_eq!(stats.coincident, 1);
        assert!(img.data().iter().all(|p| p.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn depth_falloff_equals_distance_for_colocated_on_axis() {
        let b = plane(16, 0.5);
        let light: Light = PointLight::white(Vec3::zeros()).into();
        let a = render_direct(&b, &light, &RenderConfig::default()).unwrap();
        let cfg = RenderConfig {
            falloff: Falloff::InverseSquareDepthMap,
            ..RenderConfig::default()
        };
        let d = render_direct(&b, &light, &cfg).unwrap();
        assert_eq!(a.get(8, 8), d.get(8, 8));
    }

    #[test]
    fn sh_constant_band() {
        let mut env = EnvLight {
            coefficients: [[0.0; 9]; 3],
        };
        assert_eq!(shade_sh(&Vec3::z(), &env, true), Vec3::zeros());
        for c in 0..3 {
            env.coefficients[c][0] = 1.0;
        }
        for n in [Vec3::z(), -Vec3::z(), Vec3::x(), Vec3::new(1.0, 1.0, 1.0).normalize()] {
            let e = shade_sh(&n, &env, true);
            assert!((e.x - 0.886_226_925_452_758).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_linear_band_is_odd() {
        let mut env = EnvLight {
            coefficients: [[0.0; 9]; 3],
        };
        env.coefficients[0][2] = 1.0;
        let up = shade_sh(&Vec3::z(), &env, false);
        let down = shade_sh(&-Vec3::z(), &env, false);
        assert!(up.x > 0.0);
        assert_eq!(up.x, -down.x);
        assert_eq!(shade_sh(&-Vec3::z(), &env, true).x, 0.0);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn sh_basis_is_orthonormal() {
        // Fibonacci-sphere quadrature of Y_i Y_j over the sphere.
        let n = 200_000;
        let mut gram = [[0.0f64; 9]; 9];
        let golden = PI * (3.0 - 5f64.sqrt());
        for k in 0..n {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            let y = sh_basis(&Vec3::new(r * phi.cos(), r * phi.sin(), z));
            for i in 0..9 {
                for j in 0..9 {
                    gram[i][j] += y[i] * y[j];
                }
            }
        }
        let w = 4.0 * PI / n as f64;
        for i in 0..9 {
            for j in 0..9 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] * w - expect).abs() < 1e-3, "({i},{j})");
            }
        }
    }

    #[test]
    fn compose_and_decompose() {
        let d = Map::filled(4, 4, Vec3::repeat(0.2));
        let r = Map::filled(4, 4, Vec3::repeat(0.1));
        let full = compose_global(&d, &r, true).unwrap();
        assert!(full.data().iter().all(|p| (p.x - 0.3).abs() < 1e-15));
        let zero = Map::filled(4, 4, Vec3::zeros());
        assert_eq!(compose_global(&d, &zero, true).unwrap(), d);
        assert_eq!(decompose_global(&d, &d).unwrap(), zero);
        let other = Map::filled(3, 4, Vec3::zeros());
        assert!(compose_global(&d, &other, true).is_err());
        assert!(decompose_global(&d, &other).is_err());
    }

    #[test]
    fn compose_clamps_negative_only_when_asked() {
        let d = Map::filled(2, 2, Vec3::repeat(0.1));
        let r = Map::filled(2, 2, Vec3::repeat(-0.3));
        assert_eq!(compose_global(&d, &r, true).unwrap().get(0, 0), Vec3::zeros());
        assert!(compose_global(&d, &r, false).unwrap().get(0, 0).x < 0.0);
    }

    #[test]
    fn relight_stack_matches_single_renders() {
        let b = plane(16, 0.4);
        let cfg = RenderConfig::default();
        let l: Light = PointLight::white(Vec3::new(0.5, 0.2, 0.0)).into();
        assert!(relight_stack(&b, &[], &cfg).is_err());
        let one = relight_stack(&b, &[l], &cfg).unwrap();
        assert_eq!(one[0], render_direct(&b, &l, &cfg).unwrap());
        let two = relight_stack(&b, &[l, l], &cfg).unwrap();
        assert_eq!(two[0], two[1]);
    }

    #[test]
    fn hemisphere_sampler_is_deterministic_prefix_and_in_bounds() {
        let a = sample_frontal_hemisphere(32, 2.0, 7).unwrap();
        assert_eq!(a, sample_frontal_hemisphere(32, 2.0, 7).unwrap());
        assert_eq!(a[..4], sample_frontal_hemisphere(4, 2.0, 7).unwrap()[..]);
        assert_ne!(a, sample_frontal_hemisphere(32, 2.0, 8).unwrap());
        for p in &a {
            let rel = p - SCENE_CENTER;
            assert!(rel.z >= 0.0);
            assert!((rel.norm() - 2.0).abs() < 1e-12);
        }
        assert!(sample_frontal_hemisphere(0, 2.0, 7).is_err());
        assert!(sample_frontal_hemisphere(3, 0.0, 7).is_err());
    }

    #[test]
    fn hemisphere_mean_direction_matches_centroid() {
        let pts = sample_frontal_hemisphere(10_000, 1.0, 3).unwrap();
        let mean = pts.iter().fold(Vec3::zeros(), |acc, p| acc + (p - SCENE_CENTER)) / pts.len() as f64;
        // uniform hemisphere centroid is (0, 0, 1/2)
        assert!((mean - Vec3::new(0.0, 0.0, 0.5)).norm() < 0.02 * 0.5 + 0.01, "{mean:?}");
        assert!((mean.z - 0.5).abs() < 0.01);
    }
}
