//! PFM maps, JSON manifests, scene bundles and image stacks on disk.
//!
//! PFM layout: `PF` (RGB) or `Pf` (grey) magic, width and height, then a
//! scale whose sign gives the byte order (negative = little-endian),
//! each on its own line, followed by 32-bit floats with rows stored
//! bottom-to-top. Maps are written little-endian with scale `-1.0`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    validate_bundle, Camera, ColorMap, EnvLight, Light, Map, Pixel, PointLight, SceneBundle, Vec3, Violation,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A PFM of either channel count.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyMap {
    Scalar(Map<f64>),
    Color(Map<Vec3>),
}

impl AnyMap {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            AnyMap::Scalar(m) => m.dims(),
            AnyMap::Color(m) => m.dims(),
        }
    }
}

fn pfm_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Pfm {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

/// Encodes a map as little-endian PFM bytes.
pub fn encode_pfm<P: Pixel>(map: &Map<P>) -> Result<Vec<u8>> {
    let magic = match P::CHANNELS {
        1 => "Pf",
        3 => "PF",
        n => return Err(Error::domain(format!("PFM holds 1 or 3 channels, not {n}"))),
    };
    if map.data().iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("PFM payload must be finite"));
    }
    let (w, h) = map.dims();
    let header = format!("{magic}\n{w} {h}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + w * h * P::CHANNELS * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            let p = map.get(x, y);
            for c in 0..P::CHANNELS {
                out.extend_from_slice(&(p.channel(c) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Writes `map` as PFM, creating missing parent directories.
pub fn write_map<P: Pixel>(path: impl AsRef<Path>, map: &Map<P>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(map)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the next whitespace-delimited header token starting at `*pos`.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path, what: &str) -> Result<(&'a str, usize)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(pfm_err(path, start, format!("expected {what}, found end of file")));
    }
    let token =
        std::str::from_utf8(&bytes[start..*pos]).map_err(|_| pfm_err(path, start, format!("{what} is not ASCII")))?;
    Ok((token, start))
}

/// Decodes PFM bytes; `path` is used only for error messages.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<AnyMap> {
    let mut pos = 0;
    let (magic, at) = header_token(bytes, &mut pos, path, "magic")?;
    let channels = match magic {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(pfm_err(path, at, format!("bad magic '{other}'"))),
    };
    let mut dim = |what: &str| -> Result<usize> {
        let (tok, at) = header_token(bytes, &mut pos, path, what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(pfm_err(path, at, format!("bad {what} '{tok}'"))),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let (scale_tok, at) = header_token(bytes, &mut pos, path, "scale")?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| pfm_err(path, at, format!("bad scale '{scale_tok}'")))?;
    let little = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(pfm_err(path, pos, "missing newline after scale"));
    }
    pos += 1;

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| pfm_err(path, 0, "dimensions overflow"))?;
    let need = count * 4;
    if bytes.len() - pos < need {
        return Err(pfm_err(
            path,
            bytes.len(),
            format!(
                "truncated payload: need {need} bytes after offset {pos}, have {}",
                bytes.len() - pos
            ),
        ));
    }
    let mut values = vec![0.0f64; count];
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            for c in 0..channels {
                let k = (row * width + x) * channels + c;
                let off = pos + k * 4;
                let raw: [u8; 4] = bytes[off..off + 4].try_into().expect("4 bytes");
                let v = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                if !v.is_finite() {
                    return Err(pfm_err(path, off, "non-finite value"));
                }
                values[(y * width + x) * channels + c] = v as f64;
            }
        }
    }
    Ok(if channels == 1 {
        AnyMap::Scalar(Map::new(width, height, values)?)
    } else {
        let px = values.chunks_exact(3).map(Vec3::from_column_slice).collect();
        AnyMap::Color(Map::new(width, height, px)?)
    })
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyMap> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<Map<f64>> {
    let path = path.as_ref();
    match read_any(path)? {
        AnyMap::Scalar(m) => Ok(m),
        AnyMap::Color(_) => Err(pfm_err(path, 0, "expected a 1-channel 'Pf' map")),
    }
}

pub fn read_color(path: impl AsRef<Path>) -> Result<Map<Vec3>> {
    let path = path.as_ref();
    match read_any(path)? {
        AnyMap::Color(m) => Ok(m),
        AnyMap::Scalar(_) => Err(pfm_err(path, 0, "expected a 3-channel 'PF' map")),
    }
}

/// Lossy 8-bit PNG import: channel values are mapped to [0, 1] with no
/// gamma decoding.
pub fn read_png(path: impl AsRef<Path>) -> Result<ColorMap> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Map::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32);
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

/// Light as stored in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LightRecord {
    Point {
        position: [f64; 3],
        intensity: [f64; 3],
    },
    /// 27 values, channel-major: the 9 red coefficients, then green, then blue.
    Env {
        coefficients: Vec<f64>,
    },
}

impl From<&Light> for LightRecord {
    fn from(light: &Light) -> Self {
        match light {
            Light::Point(p) => LightRecord::Point {
                position: p.position.into(),
                intensity: p.intensity.into(),
            },
            Light::Env(e) => LightRecord::Env {
                coefficients: e.to_flat(),
            },
        }
    }
}

impl LightRecord {
    pub fn to_light(&self) -> Result<Light> {
        Ok(match self {
            LightRecord::Point { position, intensity } => {
                Light::Point(PointLight::new(Vec3::from(*position), Vec3::from(*intensity)))
            }
            LightRecord::Env { coefficients } => Light::Env(EnvLight::from_flat(coefficients)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFiles {
    pub albedo: String,
    pub normal: String,
    pub depth: String,
    pub roughness: String,
    pub mask: String,
}

impl Default for MapFiles {
    fn default() -> Self {
        Self {
            albedo: "albedo.pfm".into(),
            normal: "normal.pfm".into(),
            depth: "depth.pfm".into(),
            roughness: "roughness.pfm".into(),
            mask: "mask.pfm".into(),
        }
    }
}

/// `manifest.json` of a scene bundle or an image stack.
///
/// A bundle lists its `maps`; a stack lists one image per light in `images`.
/// Unknown keys are ignored on read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub camera: Camera,
    pub lights: Vec<LightRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<MapFiles>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
    #[serde(default)]
    pub notes: String,
}

impl Manifest {
    pub fn lights(&self) -> Result<Vec<Light>> {
        self.lights.iter().map(LightRecord::to_light).collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            ),
        });
    }
    if manifest.lights.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: "manifest lists no lights".into(),
        });
    }
    Ok(manifest)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the five maps and `manifest.json` into `dir`.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &SceneBundle, notes: &str) -> Result<()> {
    let dir = dir.as_ref();
    if bundle.lights.is_empty() {
        return Err(Error::domain("a bundle needs at least one light to be written"));
    }
    ensure_dir(dir)?;
    let files = MapFiles::default();
    write_map(dir.join(&files.albedo), &bundle.albedo)?;
    write_map(dir.join(&files.normal), &bundle.normal)?;
    write_map(dir.join(&files.depth), &bundle.depth)?;
    write_map(dir.join(&files.roughness), &bundle.roughness)?;
    write_map(dir.join(&files.mask), &bundle.mask)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        camera: bundle.camera,
        lights: bundle.lights.iter().map(LightRecord::from).collect(),
        maps: Some(files),
        images: Vec::new(),
        notes: notes.to_string(),
    };
    write_manifest(dir.join(MANIFEST_FILE), &manifest)
}

fn check_dims<P: Pixel>(path: &Path, map: &Map<P>, dims: (usize, usize)) -> Result<()> {
    if map.dims() != dims {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: format!(
                "map is {}x{} but the camera expects {}x{}",
                map.width(),
                map.height(),
                dims.0,
                dims.1
            ),
        });
    }
    Ok(())
}

/// Reads a bundle written by [`write_bundle`]. Invariant violations are
/// returned alongside the bundle rather than rejected.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(SceneBundle, Vec<Violation>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&manifest_path)?;
    let files = manifest.maps.clone().ok_or_else(|| Error::Manifest {
        path: manifest_path.clone(),
        reason: "manifest has no 'maps' section".into(),
    })?;
    let dims = (manifest.camera.width, manifest.camera.height);
    let load = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        Ok(p)
    };
    let (ap, np, dp, rp, mp) = (
        load(&files.albedo)?,
        load(&files.normal)?,
        load(&files.depth)?,
        load(&files.roughness)?,
        load(&files.mask)?,
    );
    let albedo = read_color(&ap)?;
    check_dims(&ap, &albedo, dims)?;
    let normal = read_color(&np)?;
    check_dims(&np, &normal, dims)?;
    let depth = read_scalar(&dp)?;
    check_dims(&dp, &depth, dims)?;
    let roughness = read_scalar(&rp)?;
    check_dims(&rp, &roughness, dims)?;
    let mask = read_scalar(&mp)?;
    check_dims(&mp, &mask, dims)?;
    let bundle = SceneBundle {
        albedo,
        normal,
        depth,
        roughness,
        mask,
        camera: manifest.camera,
        lights: manifest.lights()?,
    };
    let violations = validate_bundle(&bundle);
    Ok((bundle, violations))
}

pub fn stack_image_name(index: usize) -> String {
    format!("image_{index:03}.pfm")
}

/// Writes one PFM per image plus a manifest pairing each with its light.
pub fn write_stack(
    dir: impl AsRef<Path>,
    images: &[ColorMap],
    lights: &[Light],
    camera: &Camera,
    notes: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    if images.len() != lights.len() || images.is_empty() {
        return Err(Error::domain(
            "a stack needs one light per image and at least one image",
        ));
    }
    ensure_dir(dir)?;
    let names: Vec<String> = (0..images.len()).map(stack_image_name).collect();
    for (name, img) in names.iter().zip(images) {
        write_map(dir.join(name), img)?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        camera: *camera,
        lights: lights.iter().map(LightRecord::from).collect(),
        maps: None,
        images: names,
        notes: notes.to_string(),
    };
    write_manifest(dir.join(MANIFEST_FILE), &manifest)
}

/// Reads a stack written by [`write_stack`]: images, lights and camera.
pub fn read_stack(dir: impl AsRef<Path>) -> Result<(Vec<ColorMap>, Vec<Light>, Camera)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&manifest_path)?;
    if manifest.images.len() != manifest.lights.len() {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: format!("{} images but {} lights", manifest.images.len(), manifest.lights.len()),
        });
    }
    let dims = (manifest.camera.width, manifest.camera.height);
    let mut images = Vec::with_capacity(manifest.images.len());
    for name in &manifest.images {
        let p = dir.join(name);
        let img = read_color(&p)?;
        check_dims(&p, &img, dims)?;
        images.push(img);
    }
    Ok((images, manifest.lights()?, manifest.camera))
}
