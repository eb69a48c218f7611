use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use relit::inverse::solve;
use relit::io::{self, AnyMap, MANIFEST_FILE};
use relit::metrics::{masked_mse, mean_angular_error, roughness_gradient_loss, ssim};
use relit::renderer::{relight_stack, render_lights, sample_frontal_hemisphere};
use relit::synth::generate;
use relit::{
    Camera, EnvLight, Error, Falloff, Light, Map, Pixel, PointLight, Preset, PresetSpec, RenderConfig, ScalarMap,
    SolveConfig, Vec3,
};

/// Environment variable that caps the worker thread count.
const THREADS_ENV: &str = "RELIT_THREADS";

#[derive(Parser)]
#[command(
    name = "relit",
    version,
    about = "Synthetic svBRDF scenes, relighting and photometric stereo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle.
    Gen(GenArgs),
    /// Render one image of a scene.
    Render(RenderArgs),
    /// Render a stack of images under many point lights.
    Relight(RelightArgs),
    /// Recover normals, albedo and roughness from a calibrated stack.
    Solve(SolveArgs),
    /// Compare estimated maps against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// sphere, bump or plane
    #[arg(long)]
    preset: String,
    #[arg(long)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FalloffArg {
    Distance,
    Depth,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Index into the scene manifest's lights.
    #[arg(long, conflicts_with = "light_pos")]
    light_index: Option<usize>,
    /// Point light position x,y,z in camera space.
    #[arg(long, value_parser = parse_vec3)]
    light_pos: Option<Vec3>,
    /// Point light intensity r,g,b.
    #[arg(long, value_parser = parse_vec3, requires = "light_pos")]
    intensity: Option<Vec3>,
    /// 27 SH coefficients (channel-major), JSON array or whitespace/comma separated.
    #[arg(long)]
    env_coeffs: Option<PathBuf>,
    #[arg(long)]
    no_cosine: bool,
    #[arg(long, value_enum, default_value = "distance")]
    falloff: FalloffArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelightArgs {
    #[arg(long)]
    scene: PathBuf,
    /// hemisphere:COUNT:RADIUS:SEED
    #[arg(long, conflicts_with = "lights_file", required_unless_present = "lights_file")]
    lights: Option<String>,
    /// Manifest whose light list is used as-is.
    #[arg(long)]
    lights_file: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    images_dir: PathBuf,
    /// Scene bundle providing depth, mask and camera.
    #[arg(long)]
    geometry: PathBuf,
    #[arg(long)]
    no_roughness: bool,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "mae,ssim,mse,rough-grad")]
    metrics: Vec<MetricName>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MetricName {
    Mae,
    Ssim,
    Mse,
    RoughGrad,
}

/// Failure classes with stable exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::TooFewImages { .. }) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

#[derive(Serialize)]
struct Report {
    command: String,
    config: serde_json::Value,
    metrics: BTreeMap<String, f64>,
    wall_time_s: f64,
    seed: Option<u64>,
}

impl Report {
    fn print_table(&self) {
        let width = self.metrics.keys().map(|k| k.len()).max().unwrap_or(6).max(6);
        println!("{:<width$}  value", "metric");
        for (k, v) in &self.metrics {
            println!("{k:<width$}  {v:.6}");
        }
        println!("{:<width$}  {:.3}", "wall_time_s", self.wall_time_s);
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn log(stage: &str) {
    eprintln!("[relit] {stage}");
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("expected x,y,z: {e}"))?;
    match parts.as_slice() {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected three finite comma-separated numbers, got '{s}'")),
    }
}

fn read_env_coeffs(path: &Path) -> Result<EnvLight, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("cannot read env coefficients {}: {e}", path.display())))?;
    let values: Vec<f64> = match serde_json::from_str::<Vec<f64>>(&text) {
        Ok(v) => v,
        Err(_) => text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(f64::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?,
    };
    EnvLight::from_flat(&values).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_scene(dir: &Path) -> Result<relit::SceneBundle, Failure> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!("no scene bundle at {}", dir.display())));
    }
    let (bundle, violations) = io::read_bundle(dir)?;
    for v in violations.iter().take(5) {
        eprintln!("[relit] warning: {v}");
    }
    if violations.len() > 5 {
        eprintln!("[relit] warning: {} more violations", violations.len() - 5);
    }
    Ok(bundle)
}

fn cmd_gen(args: GenArgs) -> CmdResult {
    let preset = Preset::from_str(&args.preset).map_err(usage)?;
    let spec = PresetSpec::new(preset, args.res, args.seed);
    spec.validate().map_err(usage)?;
    log("generating scene");
    let mut bundle = generate(&spec, &Camera::square(args.res))?;
    bundle.lights = vec![PointLight::white(Vec3::zeros()).into()];
    let notes = format!("preset {} res {} seed {}", args.preset, args.res, args.seed);
    io::write_bundle(&args.out, &bundle, &notes)?;
    println!(
        "wrote {} ({}x{}, {} masked pixels)",
        args.out.display(),
        args.res,
        args.res,
        bundle.mask.count_set()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> CmdResult {
    let bundle = load_scene(&args.scene)?;
    let mut lights: Vec<Light> = Vec::new();
    if let Some(i) = args.light_index {
        let light = bundle.lights.get(i).ok_or_else(|| {
            usage(format!(
                "scene has {} lights, index {i} is out of range",
                bundle.lights.len()
            ))
        })?;
        lights.push(*light);
    }
    if let Some(pos) = args.light_pos {
        let intensity = args.intensity.unwrap_or(Vec3::repeat(1.0));
        if intensity.iter().any(|c| *c < 0.0) {
            return Err(usage("light intensity must be nonnegative"));
        }
        lights.push(PointLight::new(pos, intensity).into());
    }
    if let Some(path) = &args.env_coeffs {
        lights.push(read_env_coeffs(path)?.into());
    }
    if lights.is_empty() {
        return Err(usage("give --light-index, --light-pos or --env-coeffs"));
    }
    let config = RenderConfig {
        cosine_term: !args.no_cosine,
        falloff: match args.falloff {
            FalloffArg::Distance => Falloff::InverseSquareDistance,
            FalloffArg::Depth => Falloff::InverseSquareDepthMap,
        },
        ..RenderConfig::default()
    };
    log("rendering");
    let image = render_lights(&bundle, &lights, &config)?;
    io::write_map(&args.out, &image)?;
    let peak = image.data().iter().map(|p| p.max()).fold(0.0, f64::max);
    println!("wrote {} (peak {peak:.6})", args.out.display());
    Ok(())
}

/// Parses `hemisphere:COUNT:RADIUS:SEED`.
fn parse_hemisphere(spec: &str) -> Result<Vec<Vec3>, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || usage(format!("expected hemisphere:COUNT:RADIUS:SEED, got '{spec}'"));
    let [kind, count, radius, seed] = parts.as_slice() else {
        return Err(bad());
    };
    if *kind != "hemisphere" {
        return Err(bad());
    }
    let count: usize = count.parse().map_err(|_| bad())?;
    let radius: f64 = radius.parse().map_err(|_| bad())?;
    let seed: u64 = seed.parse().map_err(|_| bad())?;
    if count == 0 {
        return Err(usage("light COUNT must be at least 1"));
    }
    sample_frontal_hemisphere(count, radius, seed).map_err(usage)
}

fn cmd_relight(args: RelightArgs) -> CmdResult {
    let bundle = load_scene(&args.scene)?;
    let (lights, source): (Vec<Light>, String) = match (&args.lights, &args.lights_file) {
        (Some(spec), _) => (
            parse_hemisphere(spec)?
                .into_iter()
                .map(|p| PointLight::white(p).into())
                .collect(),
            spec.clone(),
        ),
        (None, Some(path)) => {
            if !path.is_file() {
                return Err(usage(format!("no light manifest at {}", path.display())));
            }
            (io::read_manifest(path)?.lights()?, path.display().to_string())
        }
        (None, None) => return Err(usage("give --lights or --lights-file")),
    };
    log(&format!("rendering {} images", lights.len()));
    let images = relight_stack(&bundle, &lights, &RenderConfig::default())?;
    io::write_stack(
        &args.out_dir,
        &images,
        &lights,
        &bundle.camera,
        &format!("lights {source}"),
    )?;
    println!("wrote {} images to {}", images.len(), args.out_dir.display());
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> CmdResult {
    let start = Instant::now();
    if !args.images_dir.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!("no image stack at {}", args.images_dir.display())));
    }
    let geometry = load_scene(&args.geometry)?;
    log("reading stack");
    let (images, lights, camera) = io::read_stack(&args.images_dir)?;
    if camera != geometry.camera {
        return Err(Failure::Runtime(anyhow!(
            "stack camera differs from the geometry camera"
        )));
    }
    let points: Vec<PointLight> = lights
        .iter()
        .map(|l| match l {
            Light::Point(p) => Ok(*p),
            Light::Env(_) => Err(usage(
                "solve needs point lights only; the stack has an environment light",
            )),
        })
        .collect::<Result<_, _>>()?;
    let mut config = SolveConfig {
        estimate_roughness: !args.no_roughness,
        ..SolveConfig::default()
    };
    if let Some(n) = args.max_iter {
        if n == 0 {
            return Err(usage("--max-iter must be at least 1"));
        }
        config.max_iterations = n;
    }
    log(&format!("solving {} images", images.len()));
    let result = solve(&images, &points, &geometry.geometry(), &config)?;

    log("writing results");
    io::write_map(args.out.join("normal.pfm"), &result.normal)?;
    io::write_map(args.out.join("albedo.pfm"), &result.albedo)?;
    io::write_map(args.out.join("roughness.pfm"), &result.roughness)?;
    io::write_map(args.out.join("residual.pfm"), &result.residual)?;
    io::write_map(args.out.join("flags.pfm"), &result.flags)?;

    let masked: Vec<usize> = (0..geometry.mask.len()).filter(|&i| geometry.mask.is_set(i)).collect();
    let n = masked.len().max(1) as f64;
    let count = |flag: f64| masked.iter().filter(|&&i| result.flags.data()[i] == flag).count() as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("masked_pixels".into(), masked.len() as f64);
    metrics.insert("degenerate_pixels".into(), count(relit::inverse::flag::DEGENERATE));
    metrics.insert("non_finite_pixels".into(), count(relit::inverse::flag::NON_FINITE));
    metrics.insert(
        "mean_residual".into(),
        masked.iter().map(|&i| result.residual.data()[i]).sum::<f64>() / n,
    );
    metrics.insert(
        "mean_iterations".into(),
        masked.iter().map(|&i| result.iterations.data()[i]).sum::<f64>() / n,
    );
    let report = Report {
        command: "solve".into(),
        config: json!({
            "images_dir": args.images_dir,
            "geometry": args.geometry,
            "images": images.len(),
            "solver": config,
        }),
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: None,
    };
    report.write(&args.out.join("report.json"))?;
    report.print_table();
    Ok(())
}

/// Map pairs to compare: the named files, or every standard map present in both directories.
fn eval_pairs(est: &Path, gt: &Path) -> Result<Vec<(String, AnyMap, AnyMap)>, Failure> {
    for p in [est, gt] {
        if !p.exists() {
            return Err(Failure::Runtime(anyhow!("{} does not exist", p.display())));
        }
    }
    if est.is_file() && gt.is_file() {
        let name = est
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![(name, io::read_any(est)?, io::read_any(gt)?)]);
    }
    if !(est.is_dir() && gt.is_dir()) {
        return Err(usage("--est and --gt must both be files or both be directories"));
    }
    let mut pairs = Vec::new();
    for name in ["normal", "albedo", "roughness", "depth"] {
        let (e, g) = (est.join(format!("{name}.pfm")), gt.join(format!("{name}.pfm")));
        if e.is_file() && g.is_file() {
            pairs.push((name.to_string(), io::read_any(&e)?, io::read_any(&g)?));
        }
    }
    if pairs.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no common maps between {} and {}",
            est.display(),
            gt.display()
        )));
    }
    Ok(pairs)
}

/// Zeroes everything outside the mask, so SSIM sees only the object.
fn masked<P: Pixel>(map: &Map<P>, mask: &ScalarMap) -> Result<Map<P>, Failure> {
    map.check_same_dims(mask)?;
    let data = map
        .data()
        .iter()
        .zip(mask.data())
        .map(|(p, &m)| {
            if m > 0.5 {
                *p
            } else {
                P::from_channels(&[0.0; 3][..P::CHANNELS])
            }
        })
        .collect();
    Ok(Map::new(map.width(), map.height(), data)?)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let start = Instant::now();
    let mask = io::read_scalar(&args.mask)?;
    let pairs = eval_pairs(&args.est, &args.gt)?;
    let wants = |m: MetricName| args.metrics.contains(&m);
    let mut metrics = BTreeMap::new();
    for (name, est, gt) in &pairs {
        match (est, gt) {
            (AnyMap::Color(e), AnyMap::Color(g)) => {
                if wants(MetricName::Mae) && name != "albedo" {
                    metrics.insert(format!("{name}.mae_deg"), mean_angular_error(e, g, &mask)?);
                }
                if wants(MetricName::Mse) {
                    metrics.insert(format!("{name}.mse"), masked_mse(e, g, &mask)?);
                }
                if wants(MetricName::Ssim) && name != "normal" {
                    metrics.insert(format!("{name}.ssim"), ssim(&masked(e, &mask)?, &masked(g, &mask)?)?);
                }
            }
            (AnyMap::Scalar(e), AnyMap::Scalar(g)) => {
                if wants(MetricName::Mse) {
                    metrics.insert(format!("{name}.mse"), masked_mse(e, g, &mask)?);
                }
                if wants(MetricName::RoughGrad) && name != "depth" {
                    metrics.insert(format!("{name}.grad_mse"), roughness_gradient_loss(e, g, &mask)?);
                }
                if wants(MetricName::Ssim) && name != "roughness" && name != "depth" {
                    metrics.insert(format!("{name}.ssim"), ssim(&masked(e, &mask)?, &masked(g, &mask)?)?);
                }
            }
            _ => {
                return Err(Failure::Runtime(anyhow!(
                    "{name}: estimate and ground truth differ in channel count"
                )));
            }
        }
    }
    let report = Report {
        command: "eval".into(),
        config: json!({
            "est": args.est,
            "gt": args.gt,
            "mask": args.mask,
            "metrics": args.metrics.iter().map(|m| m.to_possible_value().map(|v| v.get_name().to_string())).collect::<Vec<_>>(),
        }),
        metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: None,
    };
    report.write(&args.out)?;
    report.print_table();
    Ok(())
}

/// The error and its causes, skipping causes already quoted in the message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Render(a) => cmd_render(a),
        Command::Relight(a) => cmd_relight(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
