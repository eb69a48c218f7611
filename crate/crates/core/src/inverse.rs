//! Calibrated near-field photometric stereo.
//!
//! Each masked pixel is solved on its own: a linear Lambertian fit over the
//! lit observations gives a normal and albedo, then Levenberg-Marquardt
//! refines normal, albedo and roughness against the full microfacet forward
//! model. Depth and camera are known inputs.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{specular_grad, BrdfParams, ShadingGeometry, EPS_DOT};
use crate::error::{Error, Result};
use crate::renderer::{Falloff, RenderConfig, MIN_LIGHT_DISTANCE};
use crate::types::{ColorMap, Geometry, Map, NormalMap, PointLight, ScalarMap, Vec3, R_MIN};

/// Largest accepted condition number of the per-pixel light matrix.
pub const MAX_CONDITION: f64 = 1e6;

/// A residual this many times the median residual marks the Lambertian fit
/// as contaminated by a highlight.
const OUTLIER_RATIO: f64 = 5.0;

/// Cap on light triples tried by the least-median search.
const MAX_TRIPLES: usize = 200;

/// Pixel status codes stored in [`SolveResult::flags`].
pub mod flag {
    pub const OK: f64 = 0.0;
    /// The Lambertian system was rank deficient or ill-conditioned.
    pub const DEGENERATE: f64 = 1.0;
    /// Refinement hit a non-finite residual or Jacobian; the pixel kept its
    /// initialization.
    pub const NON_FINITE: f64 = 2.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub roughness_init: f64,
    pub estimate_roughness: bool,
    /// Forward model used for the fit; must match how the images were formed.
    pub render: RenderConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_tolerance: 1e-10,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            roughness_init: 0.5,
            estimate_roughness: true,
            render: RenderConfig::default(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.cost_tolerance,
            self.initial_damping,
            self.damping_up,
            self.damping_down,
        ];
        if self.max_iterations < 1 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain(
                "solver settings must be positive and max_iterations at least 1",
            ));
        }
        if !(R_MIN..=1.0).contains(&self.roughness_init) {
            return Err(Error::domain(format!("initial roughness must lie in [{R_MIN}, 1]")));
        }
        self.render.brdf.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambertianInit {
    pub normal: NormalMap,
    pub albedo: ColorMap,
    /// 1 where the pixel was degenerate, 0 otherwise.
    pub degenerate: ScalarMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub normal: NormalMap,
    pub albedo: ColorMap,
    pub roughness: ScalarMap,
    /// Final sum of squared residuals per pixel.
    pub residual: ScalarMap,
    /// Accepted refinement steps per pixel.
    pub iterations: ScalarMap,
    /// One of the [`flag`] codes per pixel.
    pub flags: ScalarMap,
}

fn check_inputs(images: &[ColorMap], lights: &[PointLight], geom: &Geometry<'_>) -> Result<()> {
    if images.len() < 3 {
        return Err(Error::TooFewImages {
            needed: 3,
            got: images.len(),
        });
    }
    if images.len() != lights.len() {
        return Err(Error::domain(format!(
            "{} images but {} lights",
            images.len(),
            lights.len()
        )));
    }
    for img in images {
        geom.mask.check_same_dims(img)?;
    }
    geom.mask.check_same_dims(geom.depth)?;
    if (geom.camera.width, geom.camera.height) != geom.mask.dims() {
        return Err(Error::DimensionMismatch {
            expected_w: geom.mask.width(),
            expected_h: geom.mask.height(),
            got_w: geom.camera.width,
            got_h: geom.camera.height,
        });
    }
    Ok(())
}

fn cmp_vec(a: &Vec3, b: &Vec3) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Observation order independent of how the caller listed them, so every
/// reduction runs in the same order.
fn canonical_order(images: &[ColorMap], lights: &[PointLight]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lights.len()).collect();
    idx.sort_by(|&i, &j| {
        cmp_vec(&lights[i].position, &lights[j].position)
            .then_with(|| cmp_vec(&lights[i].intensity, &lights[j].intensity))
            .then_with(|| {
                images[i]
                    .data()
                    .iter()
                    .zip(images[j].data())
                    .map(|(a, b)| cmp_vec(a, b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    });
    idx
}

/// Per-pixel light geometry for one observation.
#[derive(Clone, Copy)]
struct LightAt {
    dir: Vec3,
    /// Intensity times falloff, per channel.
    irradiance: Vec3,
}

fn light_at(light: &PointLight, point: &Vec3, depth: f64, falloff: Falloff) -> LightAt {
    let to_light = light.position - point;
    let raw = to_light.norm();
    let dist = raw.max(MIN_LIGHT_DISTANCE);
    let dir = if raw > 0.0 {
        to_light / raw
    } else {
        -point / point.norm()
    };
    let f = match falloff {
        Falloff::InverseSquareDistance => 1.0 / (dist * dist),
        Falloff::InverseSquareDepthMap => 1.0 / (depth * depth),
    };
    LightAt {
        dir,
        irradiance: light.intensity * f,
    }
}

struct PixelInit {
    normal: Vec3,
    albedo: Vec3,
    degenerate: bool,
}

/// Solves `pi * y_j = b . l_j` in the least-squares sense over `rows`.
/// Returns `None` when the system is rank deficient or too ill-conditioned.
fn lambert_fit(rows: &[(Vec3, f64)]) -> Option<Vec3> {
    if rows.len() < 3 {
        return None;
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vec3::zeros();
    for (l, y) in rows {
        ata += l * l.transpose();
        atb += l * (PI * y);
    }
    let eig = SymmetricEigen::new(ata);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    // cond(L) = sqrt(cond(L^T L))
    if min.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || (max / min).sqrt() > MAX_CONDITION {
        return None;
    }
    let inv =
        eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e)) * eig.eigenvectors.transpose();
    let b = inv * atb;
    (b.norm() >= 1e-9).then_some(b)
}

/// Least-median-of-squares Lambertian fit over triples of `used`
/// observations. Triples are enumerated in a fixed order and thinned by a
/// constant stride when there are more than [`MAX_TRIPLES`].
fn least_median_fit(obs: &[(Vec3, Vec3, f64)], used: &[usize]) -> Option<Vec3> {
    let n = used.len();
    let total = n * (n - 1) * (n - 2) / 6;
    let stride = total.div_ceil(MAX_TRIPLES).max(1);
    let mut best: Option<(f64, Vec3)> = None;
    let mut resid = vec![0.0; n];
    let mut k = 0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                k += 1;
                if (k - 1) % stride != 0 {
                    continue;
                }
                let tri = [used[a], used[b], used[c]].map(|j| (obs[j].0, obs[j].2));
                let Some(fit) = lambert_fit(&tri) else {
                    continue;
                };
                for (r, &j) in resid.iter_mut().zip(used) {
                    *r = (PI * obs[j].2 - fit.dot(&obs[j].0)).abs();
                }
                let (_, &mut med, _) = resid.select_nth_unstable_by(n / 2, f64::total_cmp);
                if best.is_none_or(|(m, _)| med < m) {
                    best = Some((med, fit));
                }
            }
        }
    }
    best.map(|(_, b)| b)
}

fn init_pixel(
    images: &[&ColorMap],
    lights: &[&PointLight],
    point: &Vec3,
    depth: f64,
    falloff: Falloff,
    i: usize,
) -> PixelInit {
    let view = -point / point.norm();
    let degenerate = PixelInit {
        normal: view,
        albedo: Vec3::zeros(),
        degenerate: true,
    };

    // Per-channel radiance divided by irradiance; channels with no light are skipped.
    let mut obs: Vec<(Vec3, Vec3, f64)> = Vec::with_capacity(lights.len());
    for (img, light) in images.iter().zip(lights) {
        let at = light_at(light, point, depth, falloff);
        let pix = img.data()[i];
        let mut ratio = Vec3::zeros();
        let (mut sum, mut n) = (0.0, 0);
        for c in 0..3 {
            if at.irradiance[c] > 1e-12 {
                ratio[c] = pix[c] / at.irradiance[c];
                sum += ratio[c];
                n += 1;
            }
        }
        if n > 0 {
            obs.push((at.dir, ratio, sum / n as f64));
        }
    }

    let lit: Vec<usize> = (0..obs.len()).filter(|&j| obs[j].2 > 0.0).collect();
    let mut used: Vec<usize> = if lit.len() >= 3 { lit } else { (0..obs.len()).collect() };
    let rows = |used: &[usize]| -> Vec<(Vec3, f64)> { used.iter().map(|&j| (obs[j].0, obs[j].2)).collect() };
    let Some(mut b) = lambert_fit(&rows(&used)) else {
        return degenerate;
    };
    // Drop lights the first fit places behind the surface and refit.
    let front: Vec<usize> = used.iter().copied().filter(|&j| b.dot(&obs[j].0) > 0.0).collect();
    if front.len() >= 3 && front.len() < used.len() {
        if let Some(b2) = lambert_fit(&rows(&front)) {
            b = b2;
            used = front;
        }
    }
    // Specular highlights only ever add light, and one strong highlight can
    // drag the least-squares fit far off. When the residuals show such an
    // outlier, pick the fit with the least median residual over light
    // triples and refit on its inliers.
    let peak = used.iter().map(|&j| PI * obs[j].2).fold(0.0, f64::max);
    let floor = 1e-6 * peak;
    let residuals =
        |b: &Vec3, set: &[usize]| -> Vec<f64> { set.iter().map(|&j| PI * obs[j].2 - b.dot(&obs[j].0)).collect() };
    let median_abs = |r: &[f64]| -> f64 {
        let mut m: Vec<f64> = r.iter().map(|x| x.abs()).collect();
        m.sort_by(f64::total_cmp);
        m[m.len() / 2]
    };
    if used.len() >= 5 {
        let r = residuals(&b, &used);
        let worst = r.iter().copied().fold(f64::MIN, f64::max);
        if worst > (OUTLIER_RATIO * median_abs(&r)).max(floor) {
            if let Some(best) = least_median_fit(&obs, &used) {
                let r = residuals(&best, &used);
                let n = used.len() as f64;
                let scale = 1.4826 * (1.0 + 5.0 / (n - 3.0)) * median_abs(&r);
                let inliers: Vec<usize> = used
                    .iter()
                    .zip(&r)
                    .filter(|(_, e)| e.abs() <= (2.5 * scale).max(floor))
                    .map(|(&j, _)| j)
                    .collect();
                if let Some(b2) = lambert_fit(&rows(&inliers)) {
                    b = b2;
                    used = inliers;
                }
            }
        }
    }

    let mut normal = b.normalize();
    if normal.dot(&view) < 0.0 {
        normal = -normal;
    }
    let mut num = Vec3::zeros();
    let mut den = 0.0;
    for &j in &used {
        let (l, ratio, _) = &obs[j];
        let s = normal.dot(l);
        if s > 0.0 {
            num += ratio * s;
            den += s * s;
        }
    }
    let albedo = if den > 0.0 {
        (num * (PI / den)).map(|c| c.clamp(0.0, 1.0))
    } else {
        Vec3::zeros()
    };
    PixelInit {
        normal,
        albedo,
        degenerate: false,
    }
}

/// Linear Lambertian photometric stereo per masked pixel.
///
/// Observations that are zero (attached shadow) are left out when at least
/// three lit ones remain. Pixels whose light matrix is rank deficient or has
/// condition number above [`MAX_CONDITION`] get the view direction as normal
/// and zero albedo.
pub fn lambertian_init(
    images: &[ColorMap],
    lights: &[PointLight],
    geom: &Geometry<'_>,
    falloff: Falloff,
) -> Result<LambertianInit> {
    check_inputs(images, lights, geom)?;
    let order = canonical_order(images, lights);
    let imgs: Vec<&ColorMap> = order.iter().map(|&k| &images[k]).collect();
    let lts: Vec<&PointLight> = order.iter().map(|&k| &lights[k]).collect();
    let (w, h) = geom.mask.dims();
    let pixels: Vec<PixelInit> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let depth = geom.depth.data()[i];
            if !geom.mask.is_set(i) {
                let point = geom.camera.point_at(i, 1.0);
                return PixelInit {
                    normal: -point,
                    albedo: Vec3::zeros(),
                    degenerate: false,
                };
            }
            let point = geom.camera.point_at(i, depth);
            init_pixel(&imgs, &lts, &point, depth, falloff, i)
        })
        .collect();
    Ok(LambertianInit {
        normal: Map::new(w, h, pixels.iter().map(|p| p.normal).collect())?,
        albedo: Map::new(w, h, pixels.iter().map(|p| p.albedo).collect())?,
        degenerate: Map::new(w, h, pixels.iter().map(|p| p.degenerate as u8 as f64).collect())?,
    })
}

const NP: usize = 6;
type Mat6 = SMatrix<f64, NP, NP>;
type Vec6 = SVector<f64, NP>;

#[derive(Clone, Copy, Debug, PartialEq)]
struct PixelState {
    normal: Vec3,
    albedo: Vec3,
    roughness: f64,
}

/// Orthonormal tangent pair at unit `n`.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = (a - n * n.dot(&a)).normalize();
    (t1, n.cross(&t1))
}

/// Everything a pixel solve needs that does not change between iterations.
struct PixelProblem<'a> {
    view: Vec3,
    lights: Vec<LightAt>,
    observed: Vec<Vec3>,
    config: &'a SolveConfig,
}

impl PixelProblem<'_> {
    fn predict(&self, s: &PixelState, light: &LightAt) -> Vec3 {
        let params = BrdfParams {
            albedo: s.albedo,
            roughness: s.roughness,
            model: self.config.render.brdf,
        };
        let nl = s.normal.dot(&light.dir);
        if nl <= 0.0 || s.normal.dot(&self.view) <= 0.0 {
            return Vec3::zeros();
        }
        let Some(geom) = ShadingGeometry::unchecked(s.normal, light.dir, self.view) else {
            return Vec3::zeros();
        };
        let f = crate::brdf::eval_unchecked(&params, &geom);
        let cosine = if self.config.render.cosine_term { nl } else { 1.0 };
        light.irradiance.component_mul(&f) * cosine
    }

    fn cost(&self, s: &PixelState) -> f64 {
        let mut total = 0.0;
        for (light, obs) in self.lights.iter().zip(&self.observed) {
            total += (self.predict(s, light) - obs).norm_squared();
        }
        total
    }

    /// Gauss-Newton normal equations `(J^T J, J^T r, cost)` in the chart
    /// `(d1, d2, albedo r, g, b, roughness)` around `s`.
    fn normal_equations(&self, s: &PixelState, tangents: (Vec3, Vec3)) -> (Mat6, Vec6, f64) {
        let mut jtj = Mat6::zeros();
        let mut jtr = Vec6::zeros();
        let mut cost = 0.0;
        let model = &self.config.render.brdf;
        let cosine_on = self.config.render.cosine_term;
        let v = self.view;
        let nv = s.normal.dot(&v);
        for (light, obs) in self.lights.iter().zip(&self.observed) {
            let l = light.dir;
            let nl = s.normal.dot(&l);
            let geom = (nl > 0.0 && nv > 0.0)
                .then(|| ShadingGeometry::unchecked(s.normal, l, v))
                .flatten();
            let Some(geom) = geom else {
                cost += obs.norm_squared();
                // model is identically zero here, so the Jacobian rows vanish
                continue;
            };
            let g = specular_grad(model, s.roughness, s.normal.dot(&geom.h), nl, nv, geom.v_dot_h());
            let d_spec_n = geom.h * g.d_nh + l * g.d_nl + v * g.d_nv;
            let cosine = if cosine_on { nl } else { 1.0 };
            for c in 0..3 {
                let k = light.irradiance[c];
                let f = s.albedo[c] / PI + g.value;
                let r = k * f * cosine - obs[c];
                let dn = if cosine_on {
                    (d_spec_n * nl + l * f) * k
                } else {
                    d_spec_n * k
                };
                let mut row = Vec6::zeros();
                row[0] = dn.dot(&tangents.0);
                row[1] = dn.dot(&tangents.1);
                row[2 + c] = k * cosine / PI;
                row[5] = k * cosine * g.d_roughness;
                jtj += row * row.transpose();
                jtr += row * r;
                cost += r * r;
            }
        }
        (jtj, jtr, cost)
    }

    fn step(&self, s: &PixelState, tangents: (Vec3, Vec3), delta: &Vec6) -> PixelState {
        let normal = (s.normal + tangents.0 * delta[0] + tangents.1 * delta[1]).normalize();
        let albedo = Vec3::new(
            (s.albedo.x + delta[2]).clamp(0.0, 1.0),
            (s.albedo.y + delta[3]).clamp(0.0, 1.0),
            (s.albedo.z + delta[4]).clamp(0.0, 1.0),
        );
        let roughness = if self.config.estimate_roughness {
            (s.roughness + delta[5]).clamp(R_MIN, 1.0)
        } else {
            s.roughness
        };
        PixelState {
            normal,
            albedo,
            roughness,
        }
    }
}

struct PixelOutcome {
    state: PixelState,
    cost: f64,
    accepted: usize,
    flag: f64,
    /// Accepted-step cost sequence, kept only when requested.
    trace: Vec<f64>,
}

fn refine_pixel(problem: &PixelProblem<'_>, init: PixelState, max_iterations: usize, keep_trace: bool) -> PixelOutcome {
    let cfg = problem.config;
    let n_params = if cfg.estimate_roughness { NP } else { NP - 1 };
    let mut state = init;
    let mut lambda = cfg.initial_damping;
    let mut accepted = 0;
    let mut trace = Vec::new();
    let non_finite = |cost: f64| PixelOutcome {
        state: init,
        cost,
        accepted: 0,
        flag: flag::NON_FINITE,
        trace: Vec::new(),
    };

    let mut cost = problem.cost(&state);
    if !cost.is_finite() {
        return non_finite(f64::NAN);
    }
    if keep_trace {
        trace.push(cost);
    }
    // costs this small are float rounding of an exact fit
    let floor = 1e-28 * problem.observed.iter().map(|o| o.norm_squared()).sum::<f64>();
    let mut iter = 0;
    while iter < max_iterations && cost > floor {
        let tangents = tangent_basis(&state.normal);
        let (jtj, jtr, _) = problem.normal_equations(&state, tangents);
        if !(jtj.iter().all(|v| v.is_finite()) && jtr.iter().all(|v| v.is_finite())) {
            return non_finite(problem.cost(&init));
        }
        let max_diag = (0..n_params).map(|k| jtj[(k, k)]).fold(0.0, f64::max);
        if max_diag == 0.0 {
            break;
        }
        let mut improved = false;
        while iter < max_iterations {
            iter += 1;
            let mut a = jtj;
            for k in 0..NP {
                if k < n_params {
                    a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * max_diag);
                } else {
                    // frozen roughness: pin its row
                    a.fill_row(k, 0.0);
                    a.fill_column(k, 0.0);
                    a[(k, k)] = 1.0;
                }
            }
            let mut rhs = -jtr;
            if n_params < NP {
                rhs[NP - 1] = 0.0;
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    lambda *= cfg.damping_up;
                    continue;
                }
            };
            let candidate = problem.step(&state, tangents, &delta);
            let new_cost = problem.cost(&candidate);
            if new_cost.is_finite() && new_cost < cost {
                let decrease = (cost - new_cost) / cost;
                state = candidate;
                cost = new_cost;
                accepted += 1;
                lambda = (lambda * cfg.damping_down).max(1e-15);
                if keep_trace {
                    trace.push(cost);
                }
                improved = decrease >= cfg.cost_tolerance;
                break;
            }
            lambda *= cfg.damping_up;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    PixelOutcome {
        state,
        cost,
        accepted,
        flag: flag::OK,
        trace,
    }
}

/// Levenberg-Marquardt refinement of normal, albedo and (optionally)
/// roughness per masked pixel, starting from `init`.
///
/// Normals move in a two-parameter tangent chart re-centered every
/// iteration; albedo is projected to [0, 1] and roughness to [`R_MIN`], 1]
/// after each step. Only cost-decreasing steps are accepted.
pub fn refine_lm(
    init: &LambertianInit,
    images: &[ColorMap],
    lights: &[PointLight],
    geom: &Geometry<'_>,
    config: &SolveConfig,
) -> Result<SolveResult> {
    Ok(refine_impl(init, images, lights, geom, config, false)?.0)
}

/// Same as [`refine_lm`] but also returns the accepted-step cost sequence of
/// every pixel.
pub fn refine_lm_traced(
    init: &LambertianInit,
    images: &[ColorMap],
    lights: &[PointLight],
    geom: &Geometry<'_>,
    config: &SolveConfig,
) -> Result<(SolveResult, Vec<Vec<f64>>)> {
    refine_impl(init, images, lights, geom, config, true)
}

/// Costs above this fraction of the observed energy trigger extra starts.
const RESTART_COST: f64 = 1e-6;

/// Iteration budget for screening a restart.
const SCREEN_ITERATIONS: usize = 8;

/// Runs extra starts when the first solve left a large residual: the
/// half-vector of the brightest observation, the view direction, and the
/// first normal with other roughness values. Keeps the lowest cost.
fn refine_restarts(problem: &PixelProblem<'_>, first: PixelOutcome, keep_trace: bool) -> PixelOutcome {
    let energy: f64 = problem.observed.iter().map(|o| o.norm_squared()).sum();
    if first.flag != flag::OK || first.cost <= RESTART_COST * energy {
        return first;
    }
    let brightest = problem
        .lights
        .iter()
        .zip(&problem.observed)
        .filter(|(l, _)| l.irradiance.max() > 0.0)
        .map(|(l, o)| (l, o.sum() / l.irradiance.sum()))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let mut starts: Vec<(Vec3, f64)> = Vec::new();
    if let Some((l, _)) = brightest {
        let h = (l.dir + problem.view).normalize();
        if h.iter().all(|c| c.is_finite()) {
            starts.push((h, problem.config.roughness_init));
            starts.push((h, 0.2));
        }
    }
    starts.push((problem.view, problem.config.roughness_init));
    if problem.config.estimate_roughness {
        starts.push((first.state.normal, 0.2));
        starts.push((first.state.normal, 0.8));
    }
    // Screen every start with a short budget, then finish the best one.
    let budget = SCREEN_ITERATIONS.min(problem.config.max_iterations);
    let mut best: Option<PixelOutcome> = None;
    for (normal, roughness) in starts {
        if normal.dot(&problem.view) <= EPS_DOT {
            continue;
        }
        let roughness = if problem.config.estimate_roughness {
            roughness
        } else {
            problem.config.roughness_init
        };
        let start = PixelState {
            normal,
            albedo: fit_albedo(problem, &normal, roughness),
            roughness,
        };
        let out = refine_pixel(problem, start, budget, false);
        if out.flag == flag::OK && best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    match best {
        Some(b) if b.cost < first.cost => {
            let out = refine_pixel(problem, b.state, problem.config.max_iterations, keep_trace);
            if out.flag == flag::OK && out.cost < first.cost {
                PixelOutcome {
                    accepted: out.accepted + b.accepted,
                    ..out
                }
            } else {
                first
            }
        }
        _ => first,
    }
}

/// Least-squares albedo for a fixed normal and roughness, clamped to [0, 1].
fn fit_albedo(problem: &PixelProblem<'_>, normal: &Vec3, roughness: f64) -> Vec3 {
    let probe = PixelState {
        normal: *normal,
        albedo: Vec3::zeros(),
        roughness,
    };
    let unit = PixelState {
        albedo: Vec3::repeat(1.0),
        ..probe
    };
    let mut num = Vec3::zeros();
    let mut den = Vec3::zeros();
    for (light, obs) in problem.lights.iter().zip(&problem.observed) {
        let spec = problem.predict(&probe, light);
        let diffuse = problem.predict(&unit, light) - spec;
        num += diffuse.component_mul(&(obs - spec));
        den += diffuse.component_mul(&diffuse);
    }
    Vec3::from_fn(|c, _| {
        if den[c] > 0.0 {
            (num[c] / den[c]).clamp(0.0, 1.0)
        } else {
            0.0
        }
    })
}

fn refine_impl(
    init: &LambertianInit,
    images: &[ColorMap],
    lights: &[PointLight],
    geom: &Geometry<'_>,
    config: &SolveConfig,
    keep_trace: bool,
) -> Result<(SolveResult, Vec<Vec<f64>>)> {
    check_inputs(images, lights, geom)?;
    config.validate()?;
    geom.mask.check_same_dims(&init.normal)?;
    geom.mask.check_same_dims(&init.albedo)?;
    geom.mask.check_same_dims(&init.degenerate)?;
    let order = canonical_order(images, lights);
    let (w, h) = geom.mask.dims();

    let outcomes: Vec<PixelOutcome> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let start = PixelState {
                normal: init.normal.data()[i],
                albedo: init.albedo.data()[i],
                roughness: config.roughness_init,
            };
            let idle = |flag| PixelOutcome {
                state: start,
                cost: 0.0,
                accepted: 0,
                flag,
                trace: Vec::new(),
            };
            if !geom.mask.is_set(i) {
                return idle(flag::OK);
            }
            if init.degenerate.data()[i] != 0.0 {
                return idle(flag::DEGENERATE);
            }
            let depth = geom.depth.data()[i];
            let point = geom.camera.point_at(i, depth);
            let problem = PixelProblem {
                view: -point / point.norm(),
                lights: order
                    .iter()
                    .map(|&k| light_at(&lights[k], &point, depth, config.render.falloff))
                    .collect(),
                observed: order.iter().map(|&k| images[k].data()[i]).collect(),
                config,
            };
            let first = refine_pixel(&problem, start, config.max_iterations, keep_trace);
            refine_restarts(&problem, first, keep_trace)
        })
        .collect();

    let field =
        |f: &dyn Fn(&PixelOutcome) -> f64| -> Result<ScalarMap> { Map::new(w, h, outcomes.iter().map(f).collect()) };
    let result = SolveResult {
        normal: Map::new(w, h, outcomes.iter().map(|o| o.state.normal).collect())?,
        albedo: Map::new(w, h, outcomes.iter().map(|o| o.state.albedo).collect())?,
        roughness: field(&|o| o.state.roughness)?,
        residual: field(&|o| if o.cost.is_finite() { o.cost } else { 0.0 })?,
        iterations: field(&|o| o.accepted as f64)?,
        flags: field(&|o| o.flag)?,
    };
    let traces = outcomes.into_iter().map(|o| o.trace).collect();
    Ok((result, traces))
}

/// Lambertian initialization followed by LM refinement.
pub fn solve(
    images: &[ColorMap],
    lights: &[PointLight],
    geom: &Geometry<'_>,
    config: &SolveConfig,
) -> Result<SolveResult> {
    config.validate()?;
    let init = lambertian_init(images, lights, geom, config.render.falloff)?;
    refine_lm(&init, images, lights, geom, config)
}
