//! `splat4d`: generate synthetic scenes, fit and render Gaussian fields,
//! evaluate them, and run the flow-matching and depth-alignment demos.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use splat4d::camera::{make_trajectory, TrajectoryFile, TrajectoryKind, TrajectoryParams};
use splat4d::datagen::{self, align_depth, extract_anchors, generate, AnchorSet, Preset, SceneBundle, SceneConfig};
use splat4d::fitter::{evaluate, fit, fit_from, init_from_depth, init_from_tracks, StageName, StagePlan};
use splat4d::flowmatch::{guidance_gamma, toy_demo, GaussianTarget, GuidanceSchedule, TrainConfig};
use splat4d::formats::{read_depth, read_g4d, write_atomic, write_depth, write_g4d, write_png};
use splat4d::gaussian::deform;
use splat4d::raster::render;
use splat4d::{Error, Result};

const THREADS_ENV: &str = "SPLAT4D_THREADS";

#[derive(Parser, Debug)]
#[command(name = "splat4d", version, about = "Explicit 4D Gaussian fields at desk scale")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene bundle.
    GenScene(GenSceneArgs),
    /// Fit a Gaussian field to a scene bundle.
    Fit(FitArgs),
    /// Render one trajectory frame of a field.
    Render(RenderArgs),
    /// Score a field against a scene bundle.
    Eval(EvalArgs),
    /// Train the toy flow-matching model on a 2-D Gaussian and sample it.
    FlowDemo(FlowDemoArgs),
    /// Align a relative depth map to metric scale.
    AlignDepth(AlignDepthArgs),
    /// Generate a camera trajectory.
    Traj(TrajArgs),
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    #[arg(long, value_parser = parse_preset)]
    preset: Preset,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = datagen::DEFAULT_VIEWS)]
    views: usize,
    /// Held-out view indices (default: the middle view).
    #[arg(long, value_delimiter = ',')]
    held_out: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// `default` for the built-in three-stage plan, or a plan JSON file.
    #[arg(long, default_value = "default")]
    plan: String,
    /// Run every loss from the first iteration in one stage of the plan's
    /// total length.
    #[arg(long)]
    direct: bool,
    /// Initialization: `auto` (tracks when present, else depth), `tracks`
    /// or `depth`.
    #[arg(long, default_value = "auto")]
    init: String,
    /// Output field (G4D).
    #[arg(long)]
    out: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    /// Trajectory frame to render.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Field time index; defaults to the frame whose timestamp is nearest
    /// the trajectory frame's timestamp.
    #[arg(long)]
    time_index: Option<usize>,
    /// Background color, three comma-separated values.
    #[arg(long, value_parser = parse_rgb, default_value = "0.1,0.1,0.1")]
    background: [f64; 3],
    /// Output color image (PNG).
    #[arg(long)]
    out: PathBuf,
    /// Output depth map (RAWT, dims [H, W]).
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output metrics (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlowDemoArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    /// Output report (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignDepthArgs {
    /// Relative depth map (RAWT, dims [H, W]).
    #[arg(long)]
    rel: PathBuf,
    /// Anchor pairs as a JSON list of `[d_rel, d_gt]`.
    #[arg(long, conflicts_with = "scene")]
    anchors: Option<PathBuf>,
    /// Scene bundle whose object silhouettes and recorded depth supply the
    /// anchors.
    #[arg(long, requires = "view")]
    scene: Option<PathBuf>,
    #[arg(long)]
    view: Option<usize>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output metric depth (RAWT).
    #[arg(long)]
    out: PathBuf,
    /// Output solve summary (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrajArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: TrajectoryKind,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    turns: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    focal_scale: Option<f64>,
    /// Output trajectory (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<TrajectoryKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match values[..] {
        [r, g, b] if values.iter().all(|v| v.is_finite()) => Ok([r, g, b]),
        _ => Err(format!("expected three finite comma-separated values, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenScene(a) => gen_scene(a, seed),
        Command::Fit(a) => fit_cmd(a, seed),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::FlowDemo(a) => flow_demo(a, seed),
        Command::AlignDepth(a) => align_cmd(a),
        Command::Traj(a) => traj_cmd(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data {
        location: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn gen_scene(a: GenSceneArgs, seed: u64) -> Result<()> {
    let config = SceneConfig {
        views: a.views,
        held_out: a.held_out,
        ..SceneConfig::new(a.preset, a.frames, a.res, seed)
    };
    let scene = generate(&config)?;
    scene.write(&a.out)?;
    println!(
        "{}: {} frames, {} views ({} held out), {}x{}, {} Gaussians, {} valid tracks -> {}",
        a.preset,
        scene.frames(),
        scene.views.len(),
        scene.held_out_views().len(),
        a.res,
        a.res,
        scene.field.len(),
        scene.manifest.track_valid.iter().filter(|&&v| v).count(),
        a.out.display()
    );
    Ok(())
}

fn load_plan(choice: &str) -> Result<StagePlan> {
    if choice == "default" {
        return Ok(StagePlan::default());
    }
    let path = Path::new(choice);
    StagePlan::from_json(&read_text(path)?).map_err(|e| match e {
        Error::Data { location, reason } => Error::Data {
            location: format!("{} {location}", path.display()),
            reason,
        },
        other => Error::Data {
            location: path.display().to_string(),
            reason: other.to_string(),
        },
    })
}

fn fit_cmd(a: FitArgs, seed: u64) -> Result<()> {
    let scene = SceneBundle::load(&a.scene)?;
    let mut plan = load_plan(&a.plan)?;
    if a.direct {
        plan = StagePlan {
            weights: plan.weights,
            ..StagePlan::direct(plan.total_iterations())
        };
    }
    let (field, report) = match a.init.as_str() {
        "auto" => fit(&scene, &plan, seed)?,
        "tracks" => fit_from(&scene, &plan, seed, init_from_tracks(&scene)?)?,
        "depth" => fit_from(&scene, &plan, seed, init_from_depth(&scene)?)?,
        other => return Err(Error::Config(format!("unknown --init `{other}`"))),
    };
    write_g4d(&a.out, &field)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    for b in &report.stage_boundaries {
        let h = &report.history[b.start..b.end];
        if let (Some(first), Some(last)) = (h.first(), h.last()) {
            println!(
                "{:<8} iterations {:>5}..{:<5} total loss {:.6} -> {:.6}",
                stage_label(b.name),
                b.start,
                b.end,
                first.total,
                last.total
            );
        }
    }
    let held = scene.held_out_views();
    println!("train PSNR {:.2} dB", report.mean_psnr(false));
    if !held.is_empty() {
        println!("held-out PSNR {:.2} dB", report.mean_psnr(true));
    }
    println!("{} Gaussians -> {} ({:.1}s)", field.len(), a.out.display(), report.wall_clock_s);
    Ok(())
}

fn stage_label(name: StageName) -> &'static str {
    match name {
        StageName::Static => "static",
        StageName::Hires => "hires",
        StageName::Dynamic => "dynamic",
    }
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let field = read_g4d(&a.field)?;
    let traj = TrajectoryFile::from_json(&read_text(&a.traj)?)?.to_trajectory()?;
    let cam = traj
        .cameras
        .get(a.frame)
        .ok_or_else(|| Error::Range(format!("frame {} of a {}-frame trajectory", a.frame, traj.len())))?;
    let t_index = match a.time_index {
        Some(k) => k,
        None => nearest_time(&field.timestamps, traj.timestamps[a.frame]),
    };
    let out = render(&deform(&field, t_index)?, cam, a.background)?;
    write_png(&a.out, &out.color)?;
    if let Some(path) = &a.depth {
        write_depth(path, &out.depth)?;
    }
    println!(
        "rendered frame {} (field time {t_index}) at {}x{} -> {}",
        a.frame,
        cam.width,
        cam.height,
        a.out.display()
    );
    Ok(())
}

fn nearest_time(timestamps: &[f64], t: f64) -> usize {
    timestamps
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map_or(0, |(i, _)| i)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let field = read_g4d(&a.field)?;
    let scene = SceneBundle::load(&a.scene)?;
    let report = evaluate(&field, &scene)?;
    for v in &report.views {
        let corr = v.depth_correlation.iter().sum::<f64>() / v.depth_correlation.len() as f64;
        println!(
            "view {}{}: PSNR {:.2} dB, depth correlation {:.4}",
            v.view,
            if v.held_out { " (held out)" } else { "" },
            v.mean_psnr,
            corr
        );
    }
    println!(
        "RPE {:.3e} / {:.3e} deg, cycle consistent: {}",
        report.rpe_trans, report.rpe_rot_deg, report.cycle_consistent
    );
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FlowDemoReport {
    #[serde(flatten)]
    toy: splat4d::flowmatch::ToyReport,
    guidance: GuidanceSchedule,
    guidance_gamma: Vec<f64>,
}

fn flow_demo(a: FlowDemoArgs, seed: u64) -> Result<()> {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        steps: a.steps.unwrap_or(defaults.steps),
        dataset_size: a.dataset_size.unwrap_or(defaults.dataset_size),
        lr: a.lr.unwrap_or(defaults.lr),
        seed,
    };
    let toy = toy_demo(&GaussianTarget::default(), &config, a.samples)?;
    let guidance = GuidanceSchedule::default();
    let guidance_gamma = (0..=guidance.steps)
        .map(|k| guidance_gamma(&guidance, k))
        .collect::<Result<Vec<_>>>()?;
    println!(
        "loss {:.5} -> {:.5} over {} steps",
        toy.loss_curve.first().copied().unwrap_or(f64::NAN),
        toy.loss_curve.last().copied().unwrap_or(f64::NAN),
        config.steps
    );
    println!(
        "{} samples: mean [{:.4}, {:.4}] (error {:.4}), covariance error {:.4}",
        toy.sample_count, toy.sample_mean[0], toy.sample_mean[1], toy.mean_error, toy.cov_error
    );
    println!(
        "guidance gamma: {:.4} at step 0, {:.4} at step {}",
        guidance_gamma[0],
        guidance_gamma[guidance.steps],
        guidance.steps
    );
    if let Some(path) = &a.out {
        write_json(
            path,
            &FlowDemoReport {
                toy,
                guidance,
                guidance_gamma,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignReport {
    scale: f64,
    shift: f64,
    anchors: AnchorSet,
}

fn align_cmd(a: AlignDepthArgs) -> Result<()> {
    let rel = read_depth(&a.rel)?;
    let anchors = match (&a.anchors, &a.scene) {
        (Some(path), _) => {
            let text = read_text(path)?;
            let pairs: Vec<(f64, f64)> = serde_json::from_str(&text).map_err(|e| Error::Data {
                location: format!("{} line {} column {}", path.display(), e.line(), e.column()),
                reason: e.to_string(),
            })?;
            AnchorSet { pairs }
        }
        (None, Some(dir)) => {
            let scene = SceneBundle::load(dir)?;
            let v = a.view.expect("clap enforces --view with --scene");
            let k = a.frame;
            if k >= scene.frames() {
                return Err(Error::Range(format!("frame {k} of a {}-frame scene", scene.frames())));
            }
            let masks = datagen::object_masks(&scene, v, k)?;
            let gt = &scene.views[v].depths[k];
            extract_anchors(&rel, &masks, |mask| {
                let mut vals: Vec<f64> = mask
                    .iter()
                    .zip(&gt.data)
                    .filter(|(m, z)| **m && datagen::is_valid_measurement(**z))
                    .map(|(_, z)| *z)
                    .collect();
                datagen::median(&mut vals).unwrap_or(f64::NAN)
            })?
        }
        (None, None) => return Err(Error::Config("one of --anchors or --scene is required".into())),
    };
    let (metric, scale, shift) = align_depth(&rel, &anchors)?;
    write_depth(&a.out, &metric)?;
    println!(
        "{} anchors: scale {scale:.6}, shift {shift:.6} -> {}",
        anchors.pairs.len(),
        a.out.display()
    );
    if let Some(path) = &a.report {
        write_json(path, &AlignReport { scale, shift, anchors })?;
    }
    Ok(())
}

fn traj_cmd(a: TrajArgs) -> Result<()> {
    let d = TrajectoryParams::default();
    let params = TrajectoryParams {
        radius: a.radius.unwrap_or(d.radius),
        turns: a.turns.unwrap_or(d.turns),
        amplitude: a.amplitude.unwrap_or(d.amplitude),
        step: a.step.unwrap_or(d.step),
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        focal_scale: a.focal_scale.unwrap_or(d.focal_scale),
        ..d
    };
    let traj = make_trajectory(a.kind, a.frames, &params)?;
    let file = TrajectoryFile::from_trajectory(&traj);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(&a.out, file.to_json().as_bytes())?;
    println!(
        "{} frames of a {:?} trajectory at {}x{} -> {}",
        traj.len(),
        a.kind,
        params.width,
        params.height,
        a.out.display()
    );
    Ok(())
}
