mod checkpoint;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rad_core::correspondence::{load_matches, match_desk, write_matches, CorrespondenceSet, MatchConfig};
use rad_core::geometry::{make_context_3d, sample_pose, CameraIntrinsics, PoseBounds, RenderConfig};
use rad_core::harness::bench::{run_benchmark, write_report, BenchModels, BenchmarkConfig, BenchmarkReport, Protocol, Variant};
use rad_core::harness::colormap::colorize_map;
use rad_core::harness::dataset::{synthetic_dataset, write_dataset, Dataset, Split};
use rad_core::harness::experiment::{run_synthetic_experiment, ExperimentConfig};
use rad_core::harness::io::{read_rgb_png, write_depth, write_rgb_png, DepthFormat};
use rad_core::harness::pipeline::{run_inference, AttentionMode, InferenceConfig, MatchSource, Resources};
use rad_core::harness::synth::SyntheticSceneSpec;
use rad_core::harness::train::{build_retrieval_bank, Stage, StagedModel, TrainLog, TrainPlan};
use rad_core::image::DepthMap;
use rad_core::metrics::{select_underrepresented, ClassStats, METRIC_COLUMNS};
use rad_core::nn::{DualStreamModel, ModelConfig};
use rad_core::retrieval::{compute_descriptor, DescriptorIndex, QueryMode};
use rad_core::segment::{fallback_segments, FallbackSegmenterConfig, SegmentMap};
use rad_core::uncertainty::{keep_segments, mask_image, uncertainty_map, NoiseConfig};
use rad_core::{ImageBuffer, SeededRng};
use serde::Serialize;

/// Retrieval-augmented monocular depth at desk scale.
#[derive(Parser)]
#[command(name = "rad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D corpus with rare classes and write its manifest.
    Synth(SynthArgs),
    /// Load a manifest, check every file and print split and class statistics.
    Ingest(IngestArgs),
    /// Build or query a descriptor index.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Per-pixel uncertainty, kept segments and the masked query image.
    Uncertainty(UncertaintyArgs),
    /// Match two images with the desk matcher.
    Match(MatchArgs),
    /// Render an RGB-D image from a random nearby pose, with its correspondences.
    Augment3d(Augment3dArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Predict depth for one image.
    Infer(InferArgs),
    /// Benchmark a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the metric table of a benchmark directory.
    Report(ReportArgs),
    /// Run the synthetic end-to-end experiment over several seeds.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthFmt {
    Png16,
    Pfm,
}

impl From<DepthFmt> for DepthFormat {
    fn from(f: DepthFmt) -> Self {
        match f {
            DepthFmt::Png16 => DepthFormat::Png16,
            DepthFmt::Pfm => DepthFormat::Pfm,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    pool: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML scene spec; overrides --size.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "png16")]
    depth_format: DepthFmt,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    frequency_cap: f64,
    #[arg(long, default_value_t = 5)]
    min_occurrences: usize,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Index every non-test sample of a manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// Scene of the query; pool items of this scene are skipped.
        #[arg(long)]
        scene_id: Option<u32>,
    },
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    image: PathBuf,
    /// Checkpoint whose input stream serves as the depth model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    h: f64,
    #[arg(long, default_value_t = 20.0)]
    q: f64,
    /// 16-bit PNG segment map; a built-in segmenter is used when absent.
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Masked query image (PNG).
    #[arg(long)]
    out_mask: Option<PathBuf>,
    /// False-colour uncertainty map (PNG).
    #[arg(long)]
    out_umap: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Match file (JSON); printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    window_radius: usize,
    #[arg(long, default_value_t = 256)]
    max_keypoints: usize,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
}

#[derive(Args)]
struct Augment3dArgs {
    #[arg(long)]
    image: PathBuf,
    /// Depth map (`.png` 16-bit millimeters or `.pfm` meters).
    #[arg(long)]
    depth: PathBuf,
    /// Intrinsics as `fx,fy,cx,cy`.
    #[arg(long, value_delimiter = ',', required = true)]
    intrinsics: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    max_angle_deg: f64,
    /// Translation bound as a fraction of the median depth.
    #[arg(long, default_value_t = 0.05)]
    translation_fraction: f64,
    #[arg(long, default_value_t = 1)]
    splat_px: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives `rgb.png`, `depth.pfm` and `matches.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// 1 = initialize, 2 = single stream, 3 = context stream init, 4 = joint.
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Training plan (TOML).
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Model configuration (TOML), stage 1 only.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Checkpoint of the previous stage.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Inference settings used to build retrieval contexts (TOML), stage 4 only.
    #[arg(long)]
    inference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Matched,
    Full,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Manifest providing the retrieval pool.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Prebuilt index; built from the manifest when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    segments: Option<PathBuf>,
    #[arg(long, default_value_t = u32::MAX)]
    scene_id: u32,
    /// Number of context samples; 0 runs the input stream alone.
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, value_enum, default_value = "matched")]
    attention: Attention,
    /// Query with the whole image instead of its uncertain segments.
    #[arg(long)]
    global: bool,
    /// Precomputed match files, one per retrieved context in rank order.
    #[arg(long, num_args = 1..)]
    matches: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Depth output (`.png` 16-bit millimeters or `.pfm`).
    #[arg(long)]
    out: PathBuf,
    /// False-colour inverse depth (PNG).
    #[arg(long)]
    color: Option<PathBuf>,
    /// Diagnostics (JSON).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-2 checkpoint for the single-stream row and the uncertainty model.
    #[arg(long)]
    single_stream: Option<PathBuf>,
    #[arg(long)]
    inference: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.1)]
    frequency_cap: f64,
    #[arg(long, default_value_t = 5)]
    min_occurrences: usize,
    /// Number of test images rendered as PNG.
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `rad eval`.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Index { command } => index(command),
        Command::Uncertainty(a) => uncertainty(a),
        Command::Match(a) => matching(a),
        Command::Augment3d(a) => augment3d(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn depth_format_of(path: &Path) -> Result<DepthFormat> {
    DepthFormat::from_path(path).with_context(|| format!("{}: depth files must end in .png or .pfm", path.display()))
}

fn segments_for(image: &ImageBuffer, path: Option<&Path>) -> Result<SegmentMap> {
    Ok(match path {
        Some(p) => SegmentMap::load_png16(p)?,
        None => fallback_segments(image, &FallbackSegmenterConfig::default()),
    })
}

fn inverse_depth_png(path: &Path, d: &DepthMap, min_depth: f64, max_depth: f64) -> Result<()> {
    let inv: Vec<f64> = d.values().iter().map(|&x| if x > 0.0 { 1.0 / x } else { 0.0 }).collect();
    let img = colorize_map(d.width(), d.height(), &inv, d.valid_mask(), 1.0 / max_depth, 1.0 / min_depth);
    write_rgb_png(path, &img)?;
    Ok(())
}

fn rare_classes(ds: &Dataset, cap: f64, min_occurrences: usize) -> (ClassStats, BTreeSet<u32>) {
    let train = ds.split(Split::Train);
    let stats = ClassStats::from_class_maps(train.iter().filter_map(|s| s.classes.as_ref()));
    let rare = select_underrepresented(&stats, cap, min_occurrences);
    (stats, rare)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_toml::<SyntheticSceneSpec>(p)?,
        None => SyntheticSceneSpec::desk(0, a.size),
    };
    let ds = synthetic_dataset(
        &spec,
        &[(Split::Train, a.train), (Split::Pool, a.pool), (Split::Test, a.test)],
        a.seed << 24,
    )?;
    let manifest = write_dataset(&ds, &a.out, a.depth_format.into())?;
    println!("wrote {} samples to {}", manifest.entries.len(), a.out.join("manifest.json").display());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    train: usize,
    pool: usize,
    test: usize,
    scenes: usize,
    class_stats: ClassStats,
    rare_classes: BTreeSet<u32>,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ds = Dataset::load(&a.manifest)?;
    let (class_stats, rare_classes) = rare_classes(&ds, a.frequency_cap, a.min_occurrences);
    print_json(&IngestSummary {
        train: ds.split(Split::Train).len(),
        pool: ds.split(Split::Pool).len(),
        test: ds.split(Split::Test).len(),
        scenes: ds.samples.iter().map(|s| s.scene_id).collect::<BTreeSet<_>>().len(),
        class_stats,
        rare_classes,
    })
}

fn index(cmd: IndexCommand) -> Result<()> {
    match cmd {
        IndexCommand::Build { manifest, out } => {
            let ds = Dataset::load(&manifest)?;
            let idx = ds.pool_index()?;
            idx.save(&out)?;
            println!(
                "indexed {} samples ({} skipped), dim {}",
                idx.len(),
                idx.skipped().len(),
                idx.dim()
            );
        }
        IndexCommand::Query { index, image, m, scene_id } => {
            let idx = DescriptorIndex::load(&index)?;
            let img = read_rgb_png(&image)?;
            let hits = idx.knn_query(&compute_descriptor(&img), m, scene_id)?;
            print_json(&hits.hits)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct UncertaintySummary {
    mean: f64,
    max: f64,
    segments: usize,
    kept_segments: BTreeSet<u32>,
}

fn uncertainty(a: UncertaintyArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?.model;
    let image = read_rgb_png(&a.image)?;
    let seg = segments_for(&image, a.segments.as_deref())?;
    let noise = NoiseConfig { sigma: a.sigma, n: a.n };
    let u = uncertainty_map(&model, &image, &noise, &mut SeededRng::new(a.seed))?;
    let kept = keep_segments(&u, &seg, a.h, a.q)?;
    if let Some(p) = &a.out_mask {
        write_rgb_png(p, &mask_image(&image, &seg, &kept)?)?;
    }
    if let Some(p) = &a.out_umap {
        let hi = u.max().max(1e-12);
        write_rgb_png(p, &colorize_map(u.width(), u.height(), u.values(), u.valid_mask(), 0.0, hi))?;
    }
    print_json(&UncertaintySummary {
        mean: u.mean(),
        max: u.max(),
        segments: seg.num_segments(),
        kept_segments: kept,
    })
}

fn matching(a: MatchArgs) -> Result<()> {
    let ia = read_rgb_png(&a.a)?;
    let ib = read_rgb_png(&a.b)?;
    let cfg = MatchConfig {
        window_radius: a.window_radius,
        max_keypoints: a.max_keypoints,
        ratio: a.ratio,
        ..MatchConfig::default()
    };
    let set = match_desk(&ia, &ib, &cfg);
    match &a.out {
        Some(p) => {
            write_matches(p, &set)?;
            println!("{} matches", set.len());
        }
        None => {
            let pairs: Vec<[f64; 5]> = set.pairs.iter().map(|m| [m.ua, m.va, m.ub, m.vb, m.score]).collect();
            print_json(&serde_json::json!({ "pairs": pairs }))?;
        }
    }
    Ok(())
}

fn augment3d(a: Augment3dArgs) -> Result<()> {
    let [fx, fy, cx, cy] = a.intrinsics[..] else {
        bail!("--intrinsics takes exactly fx,fy,cx,cy");
    };
    let k = CameraIntrinsics::new(fx, fy, cx, cy)?;
    let image = read_rgb_png(&a.image)?;
    let depth = rad_core::harness::io::read_depth(&a.depth, depth_format_of(&a.depth)?)?;
    let median = depth.median().context("depth map has no valid pixels")?;
    let bounds = PoseBounds {
        max_angle_deg: a.max_angle_deg,
        max_translation_m: a.translation_fraction * median,
    };
    let pose = sample_pose(&mut SeededRng::new(a.seed), &bounds);
    let aug = make_context_3d(&image, &depth, &k, &pose, 0, &RenderConfig { splat_px: a.splat_px })?;
    if aug.no_visible_points {
        bail!("no point is visible from the sampled pose");
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_rgb_png(&a.out_dir.join("rgb.png"), &aug.context.image)?;
    write_depth(&a.out_dir.join("depth.pfm"), &aug.context.depth, DepthFormat::Pfm)?;
    write_matches(&a.out_dir.join("matches.json"), &aug.correspondences)?;
    println!(
        "rotated {:.3} deg, {} correspondences",
        pose.angle().to_degrees(),
        aug.correspondences.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stage = Stage::from_number(a.stage)?;
    let mut plan = match &a.plan {
        Some(p) => TrainPlan::load(p)?,
        None => TrainPlan::default(),
    };
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    let from = |required: Stage| -> Result<StagedModel> {
        let path = a.from.as_deref().context("--from <checkpoint> is required after stage 1")?;
        let staged = checkpoint::load(path)?;
        if staged.completed != required {
            bail!(
                "stage {} needs a stage-{} checkpoint, {} is at stage {}",
                stage.number(),
                required.number(),
                path.display(),
                staged.completed.number()
            );
        }
        Ok(staged)
    };
    let dataset = || -> Result<Dataset> {
        let path = a.manifest.as_deref().context("--manifest is required for this stage")?;
        Ok(Dataset::load(path)?)
    };
    let mut log = TrainLog::default();
    let staged = match stage {
        Stage::Initialized => {
            let cfg = match &a.model_config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::default(),
            };
            StagedModel::initialized(DualStreamModel::new(cfg, &mut SeededRng::derived(plan.seed, 1))?)
        }
        Stage::SingleStream => {
            let mut staged = from(Stage::Initialized)?;
            let ds = dataset()?;
            log = staged.train_single_stream(&ds.split(Split::Train), &plan)?;
            staged
        }
        Stage::ContextInit => {
            let mut staged = from(Stage::SingleStream)?;
            staged.init_context_stream(plan.seed)?;
            staged
        }
        Stage::Joint => {
            let mut staged = from(Stage::ContextInit)?;
            let ds = dataset()?;
            let inference: InferenceConfig = match &a.inference {
                Some(p) => read_toml(p)?,
                None => InferenceConfig::default(),
            };
            let train = ds.split(Split::Train);
            let index = ds.pool_index()?;
            let store = ds.pool_store();
            // The input stream is unchanged by the context-stream surgery.
            let uncertainty_model = staged.model.clone();
            let resources = Resources {
                index: &index,
                pool: &store,
                uncertainty_model: &uncertainty_model,
            };
            let bank = build_retrieval_bank(
                &train,
                resources,
                &inference.retrieval,
                &inference.matching,
                &staged.model.config,
                plan.seed,
            )?;
            log = staged.train_joint(&train, &bank, &plan)?;
            staged
        }
    };
    checkpoint::save(&staged, &a.out)?;
    if let Some(p) = &a.log {
        write_json(p, &log)?;
    }
    if let Some(last) = log.epochs.last() {
        println!("stage {} done: {} epochs, final loss {:.6}", stage.number(), log.epochs.len(), last.mean_loss);
    } else {
        println!("stage {} done", stage.number());
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = checkpoint::load_at_least(&a.model, Stage::SingleStream)?.model;
    let ds = Dataset::load(&a.manifest)?;
    let index = match &a.index {
        Some(p) => DescriptorIndex::load(p)?,
        None => ds.pool_index()?,
    };
    let store = ds.pool_store();
    let image = read_rgb_png(&a.image)?;
    let seg = segments_for(&image, a.segments.as_deref())?;
    let mut cfg = InferenceConfig {
        attention: match a.attention {
            Attention::Matched => AttentionMode::Matched,
            Attention::Full => AttentionMode::FullContext,
        },
        ..InferenceConfig::default()
    };
    cfg.retrieval.m = a.m;
    if a.global {
        cfg.retrieval.mode = QueryMode::Global;
    }
    let loaded: Vec<CorrespondenceSet> = a
        .matches
        .iter()
        .map(|p| load_matches(p, image.dims(), (ds.config.width, ds.config.height)))
        .collect::<std::result::Result<_, _>>()?;
    let source = if loaded.is_empty() {
        MatchSource::Desk(&cfg.matching)
    } else {
        MatchSource::Precomputed(&loaded)
    };
    let resources = Resources {
        index: &index,
        pool: &store,
        uncertainty_model: &model,
    };
    let out = run_inference(&image, a.scene_id, &seg, &model, resources, source, &cfg, &mut SeededRng::new(a.seed))?;
    write_depth(&a.out, &out.depth, depth_format_of(&a.out)?)?;
    if let Some(p) = &a.color {
        inverse_depth_png(p, &out.depth, model.config.min_depth, model.config.max_depth)?;
    }
    if let Some(p) = &a.diagnostics {
        write_json(p, &out.assembly.diagnostics)?;
    }
    println!(
        "{} contexts, {} token matches",
        out.assembly.contexts.len(),
        out.assembly.diagnostics.token_matches
    );
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    Ok(match name.trim() {
        "single_stream" => Variant::SingleStream,
        "baseline" => Variant::Baseline,
        "rad" => Variant::Rad,
        "full_context" => Variant::FullContext,
        "global_retrieval" => Variant::GlobalRetrieval,
        other => bail!("unknown variant `{other}`"),
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let staged = checkpoint::load_at_least(&a.model, Stage::ContextInit)?;
    let single = a
        .single_stream
        .as_deref()
        .map(|p| checkpoint::load_at_least(p, Stage::SingleStream))
        .transpose()?
        .map(|s| s.model);
    let ds = Dataset::load(&a.manifest)?;
    let test = ds.split(Split::Test);
    if test.is_empty() {
        bail!("manifest has no test split");
    }
    let (_, rare) = rare_classes(&ds, a.frequency_cap, a.min_occurrences);
    let mut inference: InferenceConfig = match &a.inference {
        Some(p) => read_toml(p)?,
        None => InferenceConfig::default(),
    };
    if let Some(m) = a.m {
        inference.retrieval.m = m;
    }
    let variants = match &a.variants {
        Some(names) => names.iter().map(|n| parse_variant(n)).collect::<Result<Vec<_>>>()?,
        None => {
            let mut v = vec![Variant::Baseline, Variant::Rad, Variant::FullContext, Variant::GlobalRetrieval];
            if single.is_some() {
                v.insert(0, Variant::SingleStream);
            }
            v
        }
    };
    let index = ds.pool_index()?;
    let store = ds.pool_store();
    let model = &staged.model;
    let resources = Resources {
        index: &index,
        pool: &store,
        uncertainty_model: single.as_ref().unwrap_or(model),
    };
    let cfg = BenchmarkConfig {
        inference,
        variants,
        rare_classes: rare,
        min_depth: ds.config.min_depth,
        max_depth: ds.config.max_depth,
        seed: a.seed,
    };
    let models = BenchModels {
        model,
        single_stream: single.as_ref(),
    };
    let (rep, preds) = run_benchmark(&test, models, resources, &cfg)?;
    write_report(&rep, &preds, &test, &a.out, a.images, (ds.config.min_depth, ds.config.max_depth))?;
    print_table(&rep);
    Ok(())
}

fn print_table(rep: &BenchmarkReport) {
    println!("rare classes: {:?}, {} test images", rep.rare_classes, rep.test_images);
    println!("{:<18} {:<5} {}", "variant", "set", METRIC_COLUMNS.map(|c| format!("{c:>8}")).join(" "));
    for r in &rep.variants {
        for (p, name) in [(Protocol::Rare, "rare"), (Protocol::All, "all")] {
            let Some(agg) = r.protocol(p) else { continue };
            let cols: Vec<String> = METRIC_COLUMNS
                .iter()
                .map(|c| format!("{:>8.4}", agg.pixel_weighted.column(c).unwrap_or(f64::NAN)))
                .collect();
            println!("{:<18} {:<5} {}", r.variant.name(), name, cols.join(" "));
        }
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.dir.join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rep: BenchmarkReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    print_table(&rep);
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    rare: Vec<(Variant, Option<f64>)>,
    all: Vec<(Variant, Option<f64>)>,
    seconds: f64,
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_toml::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    let mut summaries = Vec::new();
    for seed in 0..a.seeds {
        let res = run_synthetic_experiment(&cfg, seed)?;
        let row = |p| cfg.variants.iter().map(|&v| (v, res.report.abs_rel(v, p))).collect::<Vec<_>>();
        let summary = SeedSummary {
            seed,
            rare: row(Protocol::Rare),
            all: row(Protocol::All),
            seconds: res.timings.values().sum(),
        };
        println!("seed {seed} ({:.0} s)", summary.seconds);
        print_table(&res.report);
        if let Some(dir) = &a.out {
            let test = res.dataset.split(Split::Test);
            write_report(
                &res.report,
                &res.predictions,
                &test,
                &dir.join(format!("seed{seed}")),
                4,
                (cfg.model.min_depth, cfg.model.max_depth),
            )?;
        }
        summaries.push(summary);
    }
    if let Some(dir) = &a.out {
        write_json(&dir.join("summary.json"), &summaries)?;
    }
    Ok(())
}
