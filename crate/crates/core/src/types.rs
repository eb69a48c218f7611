//! Per-pixel maps, the pinhole camera, lights, and the scene bundle.
//!
//! Coordinates are camera-centric: the camera sits at the origin, +x points
//! right, +y points down, and the scene lies at negative z. Pixel (0, 0) is the
//! top-left corner and pixel centers sit on integer coordinates.
//!
//! Depth maps hold the radial distance from the camera center to the surface
//! point, not its z coordinate. Normals are outward surface normals and face
//! the camera: `n · (-p) >= 0` for the surface point `p`.

use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Lower bound on roughness. The distribution term degenerates to a delta at 0.
pub const R_MIN: f64 = 0.01;

/// Tolerance on the unit norm of stored normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// A value that can live in one pixel of a [`Map`].
pub trait Pixel: Copy + Default + Send + Sync + 'static {
    const CHANNELS: usize;

    fn channel(&self, c: usize) -> f64;

    fn from_channels(values: &[f64]) -> Self;

    fn is_finite(&self) -> bool {
        (0..Self::CHANNELS).all(|c| self.channel(c).is_finite())
    }
}

impl Pixel for f64 {
    const CHANNELS: usize = 1;

    #[inline]
    fn channel(&self, _c: usize) -> f64 {
        *self
    }

    fn from_channels(values: &[f64]) -> Self {
        values[0]
    }
}

impl Pixel for Vector2<f64> {
    const CHANNELS: usize = 2;

    #[inline]
    fn channel(&self, c: usize) -> f64 {
        self[c]
    }

    fn from_channels(values: &[f64]) -> Self {
        Vector2::new(values[0], values[1])
    }
}

impl Pixel for Vec3 {
    const CHANNELS: usize = 3;

    #[inline]
    fn channel(&self, c: usize) -> f64 {
        self[c]
    }

    fn from_channels(values: &[f64]) -> Self {
        Vec3::new(values[0], values[1], values[2])
    }
}

/// Row-major image of pixels, top-left origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

/// One scalar per pixel: roughness, depth, mask, residuals.
pub type ScalarMap = Map<f64>;
/// Linear RGB per pixel: albedo and rendered images.
pub type ColorMap = Map<Vec3>;
/// Unit surface normals in the camera frame.
pub type NormalMap = Map<Vec3>;

impl<P: Pixel> Map<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::domain(format!(
                "map of {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: P) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<Q: Pixel>(&self, f: impl Fn(P) -> Q) -> Map<Q> {
        Map {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Errors unless `other` has the same width and height.
    pub fn check_same_dims<Q>(&self, other: &Map<Q>) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            });
        }
        Ok(())
    }
}

impl ScalarMap {
    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.data[index] > 0.5
    }

    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&m| m > 0.5).count()
    }
}

/// Perspective pinhole camera at the origin looking down -z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let camera = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        if let Some(reason) = camera.invalid_reason() {
            return Err(Error::domain(reason));
        }
        Ok(camera)
    }

    /// Square camera with focal length equal to the resolution (about 53° FOV)
    /// and the principal point on the center pixel.
    pub fn square(resolution: usize) -> Self {
        let half = (resolution / 2) as f64;
        Self {
            focal: resolution as f64,
            cx: half,
            cy: half,
            width: resolution,
            height: resolution,
        }
    }

    fn invalid_reason(&self) -> Option<String> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Some(format!("focal length must be positive, got {}", self.focal));
        }
        let inside = |c: f64, extent: usize| c.is_finite() && c >= 0.0 && c <= extent as f64;
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Some(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        None
    }

    /// Unit ray through pixel (u, v); its z component is negative.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new(u - self.cx, v - self.cy, -self.focal).normalize()
    }

    /// Projects a camera-frame point in front of the camera to pixel coordinates.
    pub fn project(&self, point: &Vec3) -> (f64, f64) {
        let w = -point.z;
        (self.cx + self.focal * point.x / w, self.cy + self.focal * point.y / w)
    }

    /// Surface point at radial distance `depth` along the ray through (u, v).
    pub fn unproject(&self, (u, v): (f64, f64), depth: f64) -> Result<Vec3> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::domain(format!("depth must be positive, got {depth}")));
        }
        let inside = |c: f64, extent: usize| c.is_finite() && c >= 0.0 && c <= extent as f64;
        if !inside(u, self.width) || !inside(v, self.height) {
            return Err(Error::domain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray(u, v) * depth)
    }

    /// Surface point for integer pixel `index` of a row-major map, skipping
    /// validation. Callers guarantee `depth > 0`.
    #[inline]
    pub fn point_at(&self, index: usize, depth: f64) -> Vec3 {
        let x = (index % self.width) as f64;
        let y = (index / self.width) as f64;
        self.ray(x, y) * depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointLight {
    pub position: Vec3,
    pub intensity: Vec3,
}

impl PointLight {
    pub fn new(position: Vec3, intensity: Vec3) -> Self {
        Self { position, intensity }
    }

    /// White light of unit intensity at `position`.
    pub fn white(position: Vec3) -> Self {
        Self::new(position, Vec3::repeat(1.0))
    }
}

/// Second-order real spherical-harmonic environment, 9 coefficients per
/// channel in band order (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0),
/// (2,1), (2,2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvLight {
    pub coefficients: [[f64; 9]; 3],
}

impl EnvLight {
    /// Builds from 27 values laid out channel-major (all of red, then green, then blue).
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 27 {
            return Err(Error::domain(format!(
                "SH environment needs 27 coefficients, got {}",
                values.len()
            )));
        }
        let mut coefficients = [[0.0; 9]; 3];
        for (c, chunk) in values.chunks_exact(9).enumerate() {
            coefficients[c].copy_from_slice(chunk);
        }
        Ok(Self { coefficients })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coefficients.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Light {
    Point(PointLight),
    Env(EnvLight),
}

impl From<PointLight> for Light {
    fn from(light: PointLight) -> Self {
        Light::Point(light)
    }
}

impl From<EnvLight> for Light {
    fn from(light: EnvLight) -> Self {
        Light::Env(light)
    }
}

/// Albedo, normal, depth, roughness and mask maps with their camera and lights.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub albedo: ColorMap,
    pub normal: NormalMap,
    pub depth: ScalarMap,
    pub roughness: ScalarMap,
    pub mask: ScalarMap,
    pub camera: Camera,
    pub lights: Vec<Light>,
}

impl SceneBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn geometry(&self) -> Geometry<'_> {
        Geometry {
            depth: &self.depth,
            camera: &self.camera,
            mask: &self.mask,
        }
    }
}

/// Depth, camera and mask: the known scene geometry the inverse solver needs.
#[derive(Clone, Copy, Debug)]
pub struct Geometry<'a> {
    pub depth: &'a ScalarMap,
    pub camera: &'a Camera,
    pub mask: &'a ScalarMap,
}

/// One broken invariant found by [`validate_bundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub map: &'static str,
    pub pixel: Option<(usize, usize)>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pixel {
            Some((x, y)) => write!(f, "{} at ({x}, {y}): {}", self.map, self.rule),
            None => write!(f, "{}: {}", self.map, self.rule),
        }
    }
}

/// Lists every broken invariant of `bundle`. An empty list means the bundle is valid.
///
/// Finiteness is checked everywhere, mask values must be 0 or 1 everywhere,
/// and the value-range rules apply only where the mask is set.
pub fn validate_bundle(bundle: &SceneBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let (w, h) = bundle.dims();

    let dims: [(&'static str, (usize, usize)); 4] = [
        ("albedo", bundle.albedo.dims()),
        ("normal", bundle.normal.dims()),
        ("depth", bundle.depth.dims()),
        ("roughness", bundle.roughness.dims()),
    ];
    let mut dims_ok = true;
    for (name, d) in dims {
        if d != (w, h) {
            dims_ok = false;
            out.push(Violation {
                map: name,
                pixel: None,
                rule: format!("dimensions {}x{} differ from mask {w}x{h}", d.0, d.1),
            });
        }
    }
    if let Some(reason) = bundle.camera.invalid_reason() {
        out.push(Violation {
            map: "camera",
            pixel: None,
            rule: reason,
        });
    }
    if (bundle.camera.width, bundle.camera.height) != (w, h) {
        out.push(Violation {
            map: "camera",
            pixel: None,
            rule: format!(
                "camera image size {}x{} differs from maps {w}x{h}",
                bundle.camera.width, bundle.camera.height
            ),
        });
    }
    for (i, light) in bundle.lights.iter().enumerate() {
        let bad = match light {
            Light::Point(p) => {
                !(p.position.iter().all(|v| v.is_finite()) && p.intensity.iter().all(|v| v.is_finite() && *v >= 0.0))
            }
            Light::Env(e) => !e.coefficients.iter().flatten().all(|v| v.is_finite()),
        };
        if bad {
            out.push(Violation {
                map: "lights",
                pixel: None,
                rule: format!("light {i} has non-finite values or negative intensity"),
            });
        }
    }
    if !dims_ok {
        return out;
    }

    let at = |i: usize| Some((i % w, i / w));
    for i in 0..w * h {
        let m = bundle.mask.data()[i];
        if !(m == 0.0 || m == 1.0) {
            out.push(Violation {
                map: "mask",
                pixel: at(i),
                rule: format!("mask value {m} not in {{0, 1}}"),
            });
        }
        let checks: [(&'static str, bool); 4] = [
            ("albedo", bundle.albedo.data()[i].is_finite()),
            ("normal", bundle.normal.data()[i].is_finite()),
            ("depth", bundle.depth.data()[i].is_finite()),
            ("roughness", bundle.roughness.data()[i].is_finite()),
        ];
        for (name, finite) in checks {
            if !finite {
                out.push(Violation {
                    map: name,
                    pixel: at(i),
                    rule: "non-finite value".into(),
                });
            }
        }
        if m != 1.0 {
            continue;
        }

        let a = bundle.albedo.data()[i];
        if a.is_finite() && a.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            out.push(Violation {
                map: "albedo",
                pixel: at(i),
                rule: format!("albedo ({}, {}, {}) outside [0, 1]", a.x, a.y, a.z),
            });
        }
        let r = bundle.roughness.data()[i];
        if r.is_finite() && !(R_MIN..=1.0).contains(&r) {
            out.push(Violation {
                map: "roughness",
                pixel: at(i),
                rule: format!("roughness {r} outside [{R_MIN}, 1]"),
            });
        }
        let d = bundle.depth.data()[i];
        let depth_ok = d.is_finite() && d > 0.0;
        if d.is_finite() && !depth_ok {
            out.push(Violation {
                map: "depth",
                pixel: at(i),
                rule: format!("depth {d} not positive under the mask"),
            });
        }
        let n = bundle.normal.data()[i];
        if n.is_finite() {
            let norm = n.norm();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                out.push(Violation {
                    map: "normal",
                    pixel: at(i),
                    rule: format!("normal norm {norm} is not unit"),
                });
            } else if depth_ok {
                let view = -bundle.camera.point_at(i, d) / d;
                if n.dot(&view) < -UNIT_TOLERANCE {
                    out.push(Violation {
                        map: "normal",
                        pixel: at(i),
                        rule: "normal faces away from the camera".into(),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_bundle(res: usize) -> SceneBundle {
        let camera = Camera::square(res);
        let depth = Map::from_fn(res, res, |x, y| {
            let r = camera.ray(x as f64, y as f64);
            1.0 / -r.z
        });
        SceneBundle {
            albedo: Map::filled(res, res, Vec3::repeat(0.5)),
            normal: Map::filled(res, res, Vec3::z()),
            depth,
            roughness: Map::filled(res, res, 0.5),
            mask: Map::filled(res, res, 1.0),
            camera,
            lights: vec![PointLight::white(Vec3::zeros()).into()],
        }
    }

    #[test]
    fn unproject_principal_point_is_on_axis() {
        let cam = Camera::new(500.0, 250.0, 250.0, 500, 500).unwrap();
        let p = cam.unproject((250.0, 250.0), 1.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, -1.0));
        let p = cam.unproject((250.0, 250.0), 2.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, -2.0));
    }

    #[test]
    fn unproject_off_axis() {
        let cam = Camera::new(500.0, 250.0, 250.0, 1000, 500).unwrap();
        let p = cam.unproject((750.0, 250.0), 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p - Vec3::new(s, 0.0, -s)).norm() < 1e-12);
    }

    #[test]
    fn unproject_rejects_bad_depth() {
        let cam = Camera::square(16);
        assert!(cam.unproject((8.0, 8.0), 0.0).is_err());
        assert!(cam.unproject((8.0, 8.0), -1.0).is_err());
        assert!(cam.unproject((8.0, 8.0), f64::NAN).is_err());
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        assert!(Camera::new(0.0, 8.0, 8.0, 16, 16).is_err());
        assert!(Camera::new(10.0, 17.0, 8.0, 16, 16).is_err());
        assert!(Camera::new(10.0, 8.0, -1.0, 16, 16).is_err());
    }

    #[test]
    fn valid_plane_has_no_violations() {
        assert!(validate_bundle(&plane_bundle(16)).is_empty());
    }

    #[test]
    fn short_normal_is_reported_once() {
        let mut b = plane_bundle(16);
        b.normal.set(3, 4, Vec3::new(0.0, 0.0, 0.5));
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].map, "normal");
        assert_eq!(v[0].pixel, Some((3, 4)));
    }

    #[test]
    fn rough_out_of_range_is_reported() {
        let mut b = plane_bundle(16);
        b.roughness.set(1, 2, 1.5);
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].map, "roughness");
        // masked-out pixels are not range-checked
        b.roughness.set(1, 2, 0.5);
        b.mask.set(5, 5, 0.0);
        b.roughness.set(5, 5, 7.0);
        assert!(validate_bundle(&b).is_empty());
    }

    #[test]
    fn backfacing_and_bad_mask_are_reported() {
        let mut b = plane_bundle(16);
        b.normal.set(0, 0, -Vec3::z());
        b.mask.set(2, 0, 0.5);
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut b = plane_bundle(16);
        b.depth = Map::filled(8, 8, 1.0);
        let v = validate_bundle(&b);
        assert!(v.iter().any(|v| v.map == "depth" && v.pixel.is_none()));
    }

    #[test]
    fn validate_is_idempotent() {
        let mut b = plane_bundle(16);
        b.albedo.set(0, 0, Vec3::new(2.0, 0.0, 0.0));
        let before = b.clone();
        assert_eq!(validate_bundle(&b), validate_bundle(&b));
        assert_eq!(b, before);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unproject_reprojects(u in 0.0f64..640.0, v in 0.0f64..480.0,
                                    depth in 1e-3f64..1e3, focal in 50.0f64..2000.0) {
                let cam = Camera::new(focal, 320.0, 240.0, 640, 480).unwrap();
                let p = cam.unproject((u, v), depth).unwrap();
                let (pu, pv) = cam.project(&p);
                prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
                prop_assert!(((p.norm() - depth) / depth).abs() < 1e-9);
                prop_assert!(p.z < 0.0);
            }
        }
    }
}
