//! Microfacet reflectance: Lambertian diffuse plus an achromatic specular lobe
//! built from a GGX-style distribution, a spherical-Gaussian Fresnel
//! approximation, and a Schlick-Smith geometry term.
//!
//! ```text
//! f = A / pi + D(n.h) F(v.h) G(n.l, n.v) / (4 (n.l) (n.v))
//! D = a^2 / (pi ((n.h)^s (a^2 - 1) + 1)^2),   a = R^2
//! F = (1 - F0) 2^(-(5.55473 (v.h) + 6.8316) (v.h))
//! G = G1(n.l) G1(n.v),   G1(x) = x / (x (1 - k) + k),   k = (R + 1)^2 / 8
//! ```

use std::f64::consts::{FRAC_1_PI, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Vec3, R_MIN, UNIT_TOLERANCE};

/// Floor applied to n.l and n.v in the geometry term and the specular denominator.
pub const EPS_DOT: f64 = 1e-4;

/// Which Fresnel expression to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FresnelVariant {
    /// `(1 - F0) 2^(...)` with no additive base reflectance.
    #[default]
    NoBaseTerm,
    /// `F0 + (1 - F0) 2^(...)`, the usual Schlick-style form.
    WithBaseReflectance,
}

/// Material constants shared by every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrdfModel {
    pub f0: f64,
    /// Exponent on n.h inside the distribution bracket.
    pub exponent: f64,
    pub fresnel: FresnelVariant,
}

impl Default for BrdfModel {
    fn default() -> Self {
        Self {
            f0: 0.05,
            exponent: 2.0,
            fresnel: FresnelVariant::NoBaseTerm,
        }
    }
}

impl BrdfModel {
    /// Specular lobe switched off: `F0 = 1` zeroes the Fresnel factor.
    pub fn lambertian() -> Self {
        Self {
            f0: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f0) {
            return Err(Error::domain(format!("F0 must lie in [0, 1], got {}", self.f0)));
        }
        if !(self.exponent >= 1.0 && self.exponent.is_finite()) {
            return Err(Error::domain(format!(
                "distribution exponent must be >= 1, got {}",
                self.exponent
            )));
        }
        Ok(())
    }
}

/// Per-pixel material plus the shared model constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfParams {
    pub albedo: Vec3,
    pub roughness: f64,
    pub model: BrdfModel,
}

impl BrdfParams {
    pub fn new(albedo: Vec3, roughness: f64, model: BrdfModel) -> Result<Self> {
        model.validate()?;
        if albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain("albedo channels must lie in [0, 1]"));
        }
        if !(R_MIN..=1.0).contains(&roughness) {
            return Err(Error::domain(format!(
                "roughness must lie in [{R_MIN}, 1], got {roughness}"
            )));
        }
        Ok(Self {
            albedo,
            roughness,
            model,
        })
    }
}

/// Unit normal, light, view and half vectors at one shading point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingGeometry {
    pub n: Vec3,
    pub l: Vec3,
    pub v: Vec3,
    pub h: Vec3,
}

impl ShadingGeometry {
    pub fn new(n: Vec3, l: Vec3, v: Vec3) -> Result<Self> {
        for (name, x) in [("normal", n), ("light", l), ("view", v)] {
            if (x.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::domain(format!("{name} vector is not unit")));
            }
        }
        let sum = l + v;
        let len = sum.norm();
        if len < 1e-12 {
            return Err(Error::domain("light and view are opposite; half vector undefined"));
        }
        Ok(Self { n, l, v, h: sum / len })
    }

    /// `v.h`, written symmetrically in `l` and `v` so that swapping them
    /// gives a bit-identical value.
    #[inline]
    pub fn v_dot_h(&self) -> f64 {
        0.5 * (self.v.dot(&self.h) + self.l.dot(&self.h))
    }

    /// Half vector from unnormalized inputs; `None` when l = -v.
    #[inline]
    pub(crate) fn unchecked(n: Vec3, l: Vec3, v: Vec3) -> Option<Self> {
        let sum = l + v;
        let len = sum.norm();
        (len >= 1e-12).then(|| Self { n, l, v, h: sum / len })
    }
}

pub fn microfacet_distribution(n_dot_h: f64, roughness: f64, exponent: f64) -> f64 {
    let x = n_dot_h.clamp(0.0, 1.0);
    let a2 = roughness.powi(4);
    let bracket = x.powf(exponent) * (a2 - 1.0) + 1.0;
    a2 / (PI * bracket * bracket)
}

pub fn fresnel(v_dot_h: f64, f0: f64, variant: FresnelVariant) -> f64 {
    let x = v_dot_h.clamp(0.0, 1.0);
    let falloff = (1.0 - f0) * (-(5.55473 * x + 6.8316) * x).exp2();
    match variant {
        FresnelVariant::NoBaseTerm => falloff,
        FresnelVariant::WithBaseReflectance => f0 + falloff,
    }
}

#[inline]
fn smith_k(roughness: f64) -> f64 {
    (roughness + 1.0) * (roughness + 1.0) / 8.0
}

/// `G1(x) / x`, the form that cancels the specular denominator.
#[inline]
fn g1_over_x(x: f64, k: f64) -> f64 {
    1.0 / (x * (1.0 - k) + k)
}

pub fn geometry_term(n_dot_l: f64, n_dot_v: f64, roughness: f64) -> f64 {
    let k = smith_k(roughness);
    let nl = n_dot_l.clamp(EPS_DOT, 1.0);
    let nv = n_dot_v.clamp(EPS_DOT, 1.0);
    (nl * g1_over_x(nl, k)) * (nv * g1_over_x(nv, k))
}

/// The specular lobe `D F G / (4 n.l n.v)` from raw dot products.
#[inline]
pub(crate) fn specular(model: &BrdfModel, roughness: f64, nh: f64, nl: f64, nv: f64, vh: f64) -> f64 {
    let k = smith_k(roughness);
    let nl = nl.clamp(EPS_DOT, 1.0);
    let nv = nv.clamp(EPS_DOT, 1.0);
    let d = microfacet_distribution(nh, roughness, model.exponent);
    let f = fresnel(vh, model.f0, model.fresnel);
    0.25 * d * f * (g1_over_x(nl, k) * g1_over_x(nv, k))
}

/// Specular value and its partials with respect to the raw dot products and
/// roughness. Partials through a clamped dot product are zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SpecularGrad {
    pub value: f64,
    pub d_nh: f64,
    pub d_nl: f64,
    pub d_nv: f64,
    pub d_roughness: f64,
}

pub(crate) fn specular_grad(model: &BrdfModel, roughness: f64, nh: f64, nl: f64, nv: f64, vh: f64) -> SpecularGrad {
    let s = model.exponent;
    let f = fresnel(vh, model.f0, model.fresnel);

    let x = nh.clamp(0.0, 1.0);
    let x_free = (0.0..=1.0).contains(&nh);
    let r3 = roughness * roughness * roughness;
    let a2 = r3 * roughness;
    let xs = x.powf(s);
    let bracket = xs * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * bracket * bracket);
    let dd_dx = if x_free && x > 0.0 {
        -2.0 * a2 / (PI * bracket.powi(3)) * s * x.powf(s - 1.0) * (a2 - 1.0)
    } else {
        0.0
    };
    let dd_da2 = 1.0 / (PI * bracket * bracket) - 2.0 * a2 * xs / (PI * bracket.powi(3));
    let dd_dr = dd_da2 * 4.0 * r3;

    let k = smith_k(roughness);
    let dk_dr = (roughness + 1.0) / 4.0;
    let lc = nl.clamp(EPS_DOT, 1.0);
    let vc = nv.clamp(EPS_DOT, 1.0);
    let gl = g1_over_x(lc, k);
    let gv = g1_over_x(vc, k);
    let dgl_dx = if nl > EPS_DOT && nl <= 1.0 {
        -(1.0 - k) * gl * gl
    } else {
        0.0
    };
    let dgv_dx = if nv > EPS_DOT && nv <= 1.0 {
        -(1.0 - k) * gv * gv
    } else {
        0.0
    };
    let dgl_dk = -(1.0 - lc) * gl * gl;
    let dgv_dk = -(1.0 - vc) * gv * gv;

    let q = 0.25 * f;
    SpecularGrad {
        value: q * d * (gl * gv),
        d_nh: q * dd_dx * gl * gv,
        d_nl: q * d * dgl_dx * gv,
        d_nv: q * d * gl * dgv_dx,
        d_roughness: q * (dd_dr * gl * gv + d * (dgl_dk * gv + gl * dgv_dk) * dk_dr),
    }
}

fn check_front(geom: &ShadingGeometry) -> Result<()> {
    let nl = geom.n.dot(&geom.l);
    let nv = geom.n.dot(&geom.v);
    if nl <= 0.0 || nv <= 0.0 {
        return Err(Error::domain(format!(
            "BRDF is defined only for n.l > 0 and n.v > 0 (got {nl}, {nv})"
        )));
    }
    Ok(())
}

/// Reflectance per RGB channel.
pub fn eval_brdf(params: &BrdfParams, geom: &ShadingGeometry) -> Result<Vec3> {
    check_front(geom)?;
    Ok(eval_unchecked(params, geom))
}

#[inline]
pub(crate) fn eval_unchecked(params: &BrdfParams, geom: &ShadingGeometry) -> Vec3 {
    let spec = specular(
        &params.model,
        params.roughness,
        geom.n.dot(&geom.h),
        geom.n.dot(&geom.l),
        geom.n.dot(&geom.v),
        geom.v_dot_h(),
    );
    params.albedo * FRAC_1_PI + Vec3::repeat(spec)
}

/// Analytic partials of [`eval_brdf`].
///
/// The specular lobe is achromatic, so the roughness and normal partials are
/// shared by all three channels. Each channel depends on its own albedo only,
/// with slope `1 / pi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfJacobian {
    pub value: Vec3,
    pub d_albedo: f64,
    pub d_roughness: f64,
    /// Gradient with respect to the normal taken as a free 3-vector.
    pub d_normal: Vec3,
}

impl BrdfJacobian {
    /// Row of partials for `channel` ordered (albedo r, g, b, roughness, normal x, y, z).
    pub fn row(&self, channel: usize) -> [f64; 7] {
        let mut row = [0.0; 7];
        row[channel] = self.d_albedo;
        row[3] = self.d_roughness;
        row[4] = self.d_normal.x;
        row[5] = self.d_normal.y;
        row[6] = self.d_normal.z;
        row
    }
}

pub fn eval_brdf_jacobian(params: &BrdfParams, geom: &ShadingGeometry) -> Result<BrdfJacobian> {
    check_front(geom)?;
    Ok(jacobian_unchecked(params, geom))
}

pub(crate) fn jacobian_unchecked(params: &BrdfParams, geom: &ShadingGeometry) -> BrdfJacobian {
    let g = specular_grad(
        &params.model,
        params.roughness,
        geom.n.dot(&geom.h),
        geom.n.dot(&geom.l),
        geom.n.dot(&geom.v),
        geom.v_dot_h(),
    );
    BrdfJacobian {
        value: params.albedo * FRAC_1_PI + Vec3::repeat(g.value),
        d_albedo: FRAC_1_PI,
        d_roughness: g.d_roughness,
        d_normal: geom.h * g.d_nh + geom.l * g.d_nl + geom.v * g.d_nv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn distribution_is_flat_at_unit_roughness() {
        for nh in [0.0, 0.3, 0.7, 1.0] {
            assert!(rel(microfacet_distribution(nh, 1.0, 2.0), FRAC_1_PI) < 1e-15);
        }
    }

    #[test]
    fn distribution_hand_values() {
        assert!(rel(microfacet_distribution(1.0, 0.5, 2.0), 16.0 / PI) < 1e-9);
        assert!(rel(microfacet_distribution(0.0, 0.5, 2.0), 0.0625 / PI) < 1e-9);
        // clamping
        assert_eq!(
            microfacet_distribution(-0.4, 0.5, 2.0),
            microfacet_distribution(0.0, 0.5, 2.0)
        );
    }

    #[test]
    fn fresnel_hand_values() {
        assert_eq!(fresnel(0.0, 0.05, FresnelVariant::NoBaseTerm), 0.95);
        let tail = 0.95 * (-12.38633f64).exp2();
        assert!(rel(fresnel(1.0, 0.05, FresnelVariant::NoBaseTerm), tail) < 1e-12);
        assert!((fresnel(1.0, 0.05, FresnelVariant::NoBaseTerm) - 1.774e-4).abs() < 1e-7);
        assert!(rel(fresnel(1.0, 0.05, FresnelVariant::WithBaseReflectance), 0.05 + tail) < 1e-12);
    }

    #[test]
    fn geometry_hand_values() {
        assert!(rel(geometry_term(1.0, 1.0, 0.37), 1.0) < 1e-15);
        assert!(rel(geometry_term(0.5, 0.5, 1.0), 4.0 / 9.0) < 1e-12);
        assert!(rel(geometry_term(0.25, 1.0, 0.0), 0.25 / (0.25 * 0.875 + 0.125)) < 1e-12);
    }

    #[test]
    fn pure_specular_at_normal_incidence() {
        let z = Vec3::z();
        let geom = ShadingGeometry::new(z, z, z).unwrap();
        let params = BrdfParams::new(Vec3::zeros(), 0.5, BrdfModel::default()).unwrap();
        let f = eval_brdf(&params, &geom).unwrap();
        let expected = 16.0 / PI * fresnel(1.0, 0.05, FresnelVariant::NoBaseTerm) / 4.0;
        assert!(rel(f.x, expected) < 1e-12);
        assert!((f.x - 2.259e-4).abs() < 1e-7);
        assert_eq!(f.x, f.y);
        assert_eq!(f.y, f.z);
    }

    #[test]
    fn zero_fresnel_is_lambertian() {
        let n = Vec3::z();
        let l = Vec3::new(0.3, 0.1, 1.0).normalize();
        let v = Vec3::new(-0.2, 0.4, 1.0).normalize();
        let geom = ShadingGeometry::new(n, l, v).unwrap();
        let albedo = Vec3::new(0.2, 0.5, 0.9);
        let params = BrdfParams::new(albedo, 0.3, BrdfModel::lambertian()).unwrap();
        assert_eq!(eval_brdf(&params, &geom).unwrap(), albedo * FRAC_1_PI);
    }

    #[test]
    fn backfacing_is_a_domain_error() {
        let n = Vec3::z();
        let l = Vec3::new(1.0, 0.0, -0.1).normalize();
        let geom = ShadingGeometry::new(n, l, n).unwrap();
        let params = BrdfParams::new(Vec3::repeat(0.5), 0.5, BrdfModel::default()).unwrap();
        assert!(eval_brdf(&params, &geom).is_err());
        assert!(eval_brdf_jacobian(&params, &geom).is_err());
    }

    #[test]
    fn params_validation() {
        let m = BrdfModel::default();
        assert!(BrdfParams::new(Vec3::repeat(0.5), 0.005, m).is_err());
        assert!(BrdfParams::new(Vec3::repeat(1.5), 0.5, m).is_err());
        let bad = BrdfModel { exponent: 0.5, ..m };
        assert!(BrdfParams::new(Vec3::repeat(0.5), 0.5, bad).is_err());
    }

    #[test]
    fn clamp_floor_is_continuous() {
        let params = BrdfParams::new(Vec3::repeat(0.4), 0.4, BrdfModel::default()).unwrap();
        let n = Vec3::z();
        let v = Vec3::new(0.2, 0.0, 1.0).normalize();
        let at = |nl: f64| {
            let l = Vec3::new(-(1.0 - nl * nl).sqrt(), 0.0, nl);
            eval_brdf(&params, &ShadingGeometry::new(n, l, v).unwrap()).unwrap().x
        };
        let below = at(EPS_DOT * (1.0 - 1e-9));
        let above = at(EPS_DOT * (1.0 + 1e-9));
        assert!(rel(below, above) < 1e-6, "{below} vs {above}");
    }

    #[test]
    fn albedo_partial_is_one_over_pi() {
        let n = Vec3::z();
        let geom = ShadingGeometry::new(n, n, n).unwrap();
        let params = BrdfParams::new(Vec3::repeat(0.3), 0.7, BrdfModel::default()).unwrap();
        let j = eval_brdf_jacobian(&params, &geom).unwrap();
        assert_eq!(j.row(0)[0], FRAC_1_PI);
        assert_eq!(j.row(0)[1], 0.0);
        assert_eq!(j.row(2)[2], FRAC_1_PI);
    }

    #[test]
    fn roughness_partial_matches_central_difference_at_unit_roughness() {
        let n = Vec3::z();
        let geom = ShadingGeometry::new(n, n, n).unwrap();
        let model = BrdfModel::default();
        let value = |r: f64| specular(&model, r, 1.0, 1.0, 1.0, 1.0);
        let h = 1e-4;
        let fd = (value(1.0 + h) - value(1.0 - h)) / (2.0 * h);
        let params = BrdfParams::new(Vec3::repeat(0.3), 1.0, model).unwrap();
        let j = eval_brdf_jacobian(&params, &geom).unwrap();
        assert!(rel(j.d_roughness, fd) < 1e-5, "{} vs {fd}", j.d_roughness);
    }

    #[test]
    fn normal_partial_along_normal_matches_central_difference() {
        let n = Vec3::new(0.1, -0.2, 1.0).normalize();
        let l = Vec3::new(0.5, 0.1, 1.0).normalize();
        let v = Vec3::new(-0.3, 0.2, 1.0).normalize();
        let model = BrdfModel {
            fresnel: FresnelVariant::WithBaseReflectance,
            ..BrdfModel::default()
        };
        let params = BrdfParams::new(Vec3::repeat(0.3), 0.4, model).unwrap();
        let geom = ShadingGeometry::new(n, l, v).unwrap();
        let j = eval_brdf_jacobian(&params, &geom).unwrap();
        let at = |t: f64| {
            let g = ShadingGeometry {
                n: n * (1.0 + t),
                ..geom
            };
            eval_unchecked(&params, &g).x
        };
        let h = 1e-4;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!(rel(j.d_normal.dot(&n), fd) < 1e-5, "{} vs {fd}", j.d_normal.dot(&n));
    }
}
