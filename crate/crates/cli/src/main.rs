use blursplat::blur::{synthesize_blur, ExposureSegment};
use blursplat::explore::{
    baseline_score, explore, ExplorationConfig, ExploreBuffer, ExploreError, Reference,
    ThresholdProfile,
};
use blursplat::harness::{
    build_benchmark, eval_outcome, eval_run, load_benchmark, orbit_pose, radial_spectrum,
    report_text, save_benchmark, AblationRow, AblationStage, Benchmark, BenchmarkSpec,
    HarnessError, TrajectoryFamily,
};
use blursplat::image::Image;
use blursplat::lie::PoseSE3;
use blursplat::priors::{
    DeblurRequest, GroundTruthOracle, NoisyOracle, PriorProvider, ProviderError,
};
use blursplat::scene::{generate_scene, ColorScheme, GaussianScene, SceneLayout, SceneRecipe};
use blursplat::splat::{render, CameraIntrinsics, RenderConfig};
use blursplat::train::{train, write_run_dir, PosesFile, TrainConfig, TrainError};
use blursplat_service::{LocalServer, RemoteConfig, RemoteProvider, ServeOptions};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "blursplat", version, about = "Sparse-view deblurring Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian scene.
    GenScene(GenSceneArgs),
    /// Render a scene from one camera, optionally with motion blur.
    Render(RenderArgs),
    /// Build a blurry sparse-view benchmark dataset.
    BlurDataset(BlurDatasetArgs),
    /// Train on a dataset.
    Train(TrainArgs),
    /// Evaluate a run on the held-out views, or run the ablation.
    Eval(EvalArgs),
    /// Run one exploration round and write its trace.
    Explore(ExploreArgs),
    /// Frequency spectrum of an image.
    Fft(FftArgs),
    /// Serve the ground-truth oracle over HTTP.
    ServeOracle(ServeArgs),
}

#[derive(clap::Args)]
struct GenSceneArgs {
    /// Recipe JSON; flags below are ignored when given.
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cluster-field")]
    layout: Layout,
    #[arg(long, default_value_t = 300)]
    count: usize,
    #[arg(long, value_enum, default_value = "vivid")]
    colors: Colors,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Layout {
    Box,
    TexturedWall,
    ClusterField,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Colors {
    Vivid,
    Muted,
    Gray,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera pose JSON (camera-to-world). Defaults to an orbit camera.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Orbit angle in radians, used without --pose.
    #[arg(long, default_value_t = 0.0)]
    angle: f64,
    #[arg(long, default_value_t = 4.5)]
    radius: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 50.0)]
    fov: f64,
    /// Orbit arc covered during the exposure, radians. Zero renders sharp.
    #[arg(long, default_value_t = 0.0)]
    exposure: f64,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BlurDatasetArgs {
    /// Benchmark spec JSON; flags given explicitly override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    exposure: Option<f64>,
    #[arg(long, value_enum)]
    trajectory: Option<Trajectory>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Trajectory {
    Arc,
    Shake,
    Dolly,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TrainConfig JSON. Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// oracle | noisy:SIGMA | remote:URL
    #[arg(long, default_value = "oracle")]
    provider: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory to evaluate.
    #[arg(long, required_unless_present = "ablation")]
    run: Option<PathBuf>,
    /// Train and evaluate the four ablation stages instead.
    #[arg(long)]
    ablation: bool,
    /// Full configuration for the ablation.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "oracle")]
    provider: String,
    /// Number of training seeds per ablation stage, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExploreArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory whose scene and poses are explored. Defaults to the
    /// ground-truth scene at the corrupted initial poses.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value = "oracle")]
    provider: String,
    #[arg(long, value_enum, default_value = "synthetic")]
    profile: Profile,
    #[arg(long, allow_negative_numbers = true)]
    s_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    s_max: Option<f64>,
    #[arg(long)]
    candidates_per_pair: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Profile {
    Synthetic,
    Outdoor,
}

#[derive(clap::Args)]
struct FftArgs {
    #[arg(long)]
    image: PathBuf,
    /// Centered log-magnitude image.
    #[arg(long)]
    out: PathBuf,
    /// Profile JSON with the radial power and high-frequency ratio.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Dataset directory; its ground-truth scene and cameras back the oracle.
    #[arg(long, conflicts_with_all = ["scene", "cameras"])]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "cameras")]
    scene: Option<PathBuf>,
    /// cameras.json giving intrinsics and per-frame poses.
    #[arg(long, requires = "scene")]
    cameras: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8750")]
    bind: std::net::SocketAddr,
    #[arg(long, default_value_t = 30_000)]
    deadline_ms: u64,
    /// Seed of the noise stream used for ?sigma= requests.
    #[arg(long)]
    seed: Option<u64>,
}

enum CliError {
    Config(String),
    Data(String),
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Provider(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Provider(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidArgument(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Provider(p) => CliError::Provider(p.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::InvalidRequest(m) => CliError::Data(m),
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<ExploreError> for CliError {
    fn from(e: ExploreError) -> Self {
        match e {
            ExploreError::Config(m) => CliError::Config(m),
            ExploreError::Provider(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn announce_seed(seed: u64) {
    println!("seed: {seed}");
}

fn hash_of(value: &impl Serialize) -> String {
    let text = serde_json::to_string(value).expect("serializable");
    format!("{:016x}", blursplat::rng::hash_bytes(0x5eed, text.as_bytes()))
}

/// Parses `oracle`, `noisy:SIGMA` or `remote:URL`.
fn make_provider(spec: &str, bench: &Benchmark, seed: u64) -> Result<Box<dyn PriorProvider>> {
    let oracle = || {
        GroundTruthOracle::new(
            Arc::new(bench.scene.clone()),
            bench.cameras.intrinsics,
            bench.gt_poses(),
        )
    };
    if spec == "oracle" {
        return Ok(Box::new(oracle()));
    }
    if let Some(s) = spec.strip_prefix("noisy:") {
        let sigma: f64 = s
            .parse()
            .map_err(|_| CliError::Config(format!("bad noise level {s:?}")))?;
        let p = NoisyOracle::new(oracle(), sigma, seed).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(Box::new(p));
    }
    if let Some(url) = spec.strip_prefix("remote:") {
        let cfg = RemoteConfig {
            base_url: url.trim_end_matches('/').to_string(),
            ..Default::default()
        };
        return Ok(Box::new(RemoteProvider::connect(cfg)?));
    }
    Err(CliError::Config(format!(
        "unknown provider {spec:?}; expected oracle, noisy:SIGMA or remote:URL"
    )))
}

fn gen_scene(a: GenSceneArgs) -> Result<()> {
    let mut recipe = match &a.recipe {
        Some(p) => read_config::<SceneRecipe>(p)?,
        None => SceneRecipe {
            colors: match a.colors {
                Colors::Vivid => ColorScheme::Vivid,
                Colors::Muted => ColorScheme::Muted,
                Colors::Gray => ColorScheme::Gray,
            },
            ..SceneRecipe::new(
                0,
                a.count,
                match a.layout {
                    Layout::Box => SceneLayout::Box,
                    Layout::TexturedWall => SceneLayout::TexturedWall,
                    Layout::ClusterField => SceneLayout::ClusterField,
                },
            )
        },
    };
    if let Some(s) = a.seed {
        recipe.seed = s;
    }
    announce_seed(recipe.seed);
    let scene = generate_scene(&recipe).map_err(|e| CliError::Config(e.to_string()))?;
    scene.save(&a.out).map_err(data_err)?;
    let hash = hash_of(&recipe);
    write_json(
        &a.out.with_extension("recipe.json"),
        &serde_json::json!({ "config_hash": hash, "recipe": recipe }),
    )?;
    println!("wrote {} ({} gaussians, config {hash})", a.out.display(), scene.len());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    announce_seed(seed);
    let scene = GaussianScene::load(&a.scene).map_err(data_err)?;
    let intr = CameraIntrinsics::from_fov(a.width, a.height, a.fov)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let target = scene.bounds().center();
    let rcfg = RenderConfig::default();
    let (color, depth) = match &a.pose {
        Some(p) => {
            let pose: PoseSE3 = read_config(p)?;
            let out = render(&scene, &pose, &intr, &rcfg).map_err(data_err)?;
            (out.color, out.depth)
        }
        None if a.exposure > 0.0 => {
            let seg = ExposureSegment::new(
                orbit_pose(&target, a.radius, a.angle - 0.5 * a.exposure),
                orbit_pose(&target, a.radius, a.angle + 0.5 * a.exposure),
                a.samples,
            )
            .map_err(|e| CliError::Config(e.to_string()))?;
            let out = synthesize_blur(&scene, &seg, &intr, &rcfg).map_err(data_err)?;
            (out.color, out.depth)
        }
        None => {
            let pose = orbit_pose(&target, a.radius, a.angle);
            let out = render(&scene, &pose, &intr, &rcfg).map_err(data_err)?;
            (out.color, out.depth)
        }
    };
    color.clamp01().write_png(&a.out, true).map_err(data_err)?;
    if let Some(d) = &a.depth {
        depth.write_pfm(d).map_err(data_err)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn blur_dataset(a: BlurDatasetArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_config::<BenchmarkSpec>(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(v) = a.views {
        spec.views = v;
    }
    if let Some(e) = a.exposure {
        spec.exposure = e;
    }
    if let Some(t) = a.trajectory {
        spec.trajectory = match t {
            Trajectory::Arc => TrajectoryFamily::Arc,
            Trajectory::Shake => TrajectoryFamily::Shake,
            Trajectory::Dolly => TrajectoryFamily::Dolly,
        };
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    announce_seed(spec.seed);
    let bench = build_benchmark(&spec)?;
    save_benchmark(&bench, &a.out)?;
    println!(
        "wrote {} ({} frames, train {:?}, config {})",
        a.out.display(),
        bench.blurry.len(),
        bench.split.train,
        spec.hash()
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => read_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref(), a.seed)?;
    announce_seed(cfg.seed);
    let bench = load_benchmark(&a.dataset)?;
    let provider = make_provider(&a.provider, &bench, cfg.seed)?;
    let data = bench.dataset();
    log::info!("training {} iterations with {}", cfg.total_iters, provider.identity());
    let out = train(&data, &cfg, Some(provider.as_ref()))?;
    write_run_dir(&a.out, &data, &cfg, &out)?;
    if let Some(last) = out.report.metrics.iter().rev().find_map(|m| m.heldout_psnr) {
        println!("held-out psnr {last:.3}");
    }
    println!(
        "wrote {} (config {}, {} generated views)",
        a.out.display(),
        cfg.hash(),
        out.report.generated_views
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let bench = load_benchmark(&a.dataset)?;
    let data = bench.dataset();
    if !a.ablation {
        announce_seed(a.seed.unwrap_or(0));
        let run = a.run.as_deref().expect("clap enforces --run");
        let report = eval_run(run, &data, Some(&bench.gt_poses()))?;
        print!("{}", report_text(&report));
        let out = a.out.unwrap_or_else(|| run.join("eval.json"));
        write_json(&out, &report)?;
        return Ok(());
    }
    let full = load_train_config(a.config.as_deref(), a.seed)?;
    announce_seed(full.seed);
    let provider = make_provider(&a.provider, &bench, full.seed)?;
    let seeds: Vec<u64> = (0..a.seeds.max(1)).map(|k| full.seed + k).collect();
    let mut rows = Vec::new();
    for stage in AblationStage::ALL {
        let mut psnr = Vec::new();
        let mut ssim = Vec::new();
        for &s in &seeds {
            let cfg = TrainConfig {
                seed: s,
                ..stage.apply(&full)
            };
            let out = train(&data, &cfg, Some(provider.as_ref()))?;
            let r = eval_outcome(&out, &data, &cfg, &bench.gt_poses())?;
            log::info!("{} seed {s}: {:.3} dB", stage.label(), r.mean_psnr);
            psnr.push(r.mean_psnr);
            ssim.push(r.mean_ssim);
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            stage,
            seeds: seeds.clone(),
            mean_psnr: psnr.iter().sum::<f64>() / n,
            mean_ssim: ssim.iter().sum::<f64>() / n,
            psnr,
            ssim,
        });
    }
    print!("{}", blursplat::harness::ablation_table(&rows));
    if let Some(out) = &a.out {
        write_json(out, &serde_json::json!({ "config_hash": full.hash(), "rows": rows }))?;
    }
    Ok(())
}

fn explore_cmd(a: ExploreArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    announce_seed(seed);
    let bench = load_benchmark(&a.dataset)?;
    let data = bench.dataset();
    let provider = make_provider(&a.provider, &bench, seed)?;
    let mut cfg = ExplorationConfig::profile(match a.profile {
        Profile::Synthetic => ThresholdProfile::Synthetic,
        Profile::Outdoor => ThresholdProfile::Outdoor,
    });
    if let Some(v) = a.s_min {
        cfg.s_min = v;
    }
    if let Some(v) = a.s_max {
        cfg.s_max = v;
    }
    if let Some(c) = a.candidates_per_pair {
        cfg.candidates_per_pair = c;
    }
    cfg.validate()?;
    let (scene, rcfg, poses) = match &a.run {
        Some(run) => {
            let scene = GaussianScene::load(run.join("scene.json")).map_err(data_err)?;
            let p: PosesFile = read_json_data(&run.join("poses.json"))?;
            let poses = p
                .segments
                .iter()
                .map(|s| {
                    ExposureSegment::new(s.start, s.end, s.n)
                        .map(|seg| seg.midpoint(Default::default()))
                        .map_err(data_err)
                })
                .collect::<Result<Vec<_>>>()?;
            (scene, RenderConfig::default(), poses)
        }
        None => (
            bench.scene.clone(),
            RenderConfig::default(),
            data.train.iter().map(|v| v.init_pose).collect(),
        ),
    };
    let mut references = Vec::new();
    for (v, pose) in data.train.iter().zip(&poses) {
        let image = provider.deblur(&DeblurRequest {
            image: v.blurry.clone(),
            frame: Some(v.frame),
            pose: Some(*pose),
        })?;
        references.push(Reference { pose: *pose, image });
    }
    let intr = data.intrinsics;
    let base = baseline_score(&scene, provider.as_ref(), &poses, &references, &intr, &rcfg, cfg.t0)?;
    let mut buffer = ExploreBuffer { poses: poses.clone() };
    let round = explore(&scene, provider.as_ref(), &mut buffer, &references, base, &cfg, &intr, &rcfg)?;
    let trace = round.trace();
    let accepted = trace.candidates.iter().filter(|c| c.accepted).count();
    let hash = hash_of(&cfg);
    write_json(
        &a.out,
        &serde_json::json!({
            "config_hash": hash,
            "config": cfg,
            "provider": provider.identity(),
            "trace": trace,
        }),
    )?;
    println!(
        "baseline {base:.3} dB, {accepted}/{} accepted, wrote {}",
        trace.candidates.len(),
        a.out.display()
    );
    Ok(())
}

fn read_json_data<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn fft_cmd(a: FftArgs) -> Result<()> {
    announce_seed(a.seed.unwrap_or(0));
    let img = Image::read_png(&a.image).map_err(data_err)?;
    let profile = radial_spectrum(&img);
    let mag = profile.log_magnitude_image();
    let peak = mag.data().iter().cloned().fold(0.0, f64::max);
    let scaled = if peak > 0.0 { mag.scale(1.0 / peak) } else { mag };
    scaled.write_png(&a.out, true).map_err(data_err)?;
    if let Some(j) = &a.json {
        write_json(
            j,
            &serde_json::json!({
                "source": a.image,
                "hf_ratio": profile.hf_ratio,
                "radial": profile.radial,
            }),
        )?;
    }
    println!("hf_ratio {:.6}", profile.hf_ratio);
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    announce_seed(seed);
    let oracle = match (&a.dataset, &a.scene, &a.cameras) {
        (Some(d), _, _) => {
            let bench = load_benchmark(d)?;
            GroundTruthOracle::new(Arc::new(bench.scene.clone()), bench.cameras.intrinsics, bench.gt_poses())
        }
        (None, Some(s), Some(c)) => {
            let scene = GaussianScene::load(s).map_err(data_err)?;
            let cams: blursplat::harness::CamerasFile = read_json_data(c)?;
            let poses = cams.frames.iter().map(|f| f.pose).collect();
            GroundTruthOracle::new(Arc::new(scene), cams.intrinsics, poses)
        }
        _ => return Err(CliError::Config("need --dataset or --scene with --cameras".into())),
    };
    let opts = ServeOptions {
        seed,
        deadline: Duration::from_millis(a.deadline_ms),
    };
    let server = LocalServer::start(oracle, opts, a.bind)
        .map_err(|e| CliError::Provider(format!("bind {}: {e}", a.bind)))?;
    println!("listening on {}", server.url());
    use std::io::Write;
    let _ = std::io::stdout().flush();
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenScene(a) => gen_scene(a),
        Command::Render(a) => render_cmd(a),
        Command::BlurDataset(a) => blur_dataset(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explore(a) => explore_cmd(a),
        Command::Fft(a) => fft_cmd(a),
        Command::ServeOracle(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
