//! The synthetic end-to-end experiment: render a corpus, train all stages,
//! benchmark every variant.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::bench::{run_benchmark, BenchModels, BenchmarkConfig, BenchmarkReport, Predictions, Variant};
use crate::harness::dataset::{synthetic_dataset, Dataset, Split};
use crate::harness::pipeline::{InferenceConfig, Resources};
use crate::harness::synth::SyntheticSceneSpec;
use crate::harness::train::{build_retrieval_bank, StagedModel, TrainLog, TrainPlan};
use crate::metrics::{select_underrepresented, ClassStats, DEFAULT_FREQUENCY_CAP, DEFAULT_MIN_OCCURRENCES};
use crate::nn::{DualStreamModel, ModelConfig};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene template; the seed is replaced per scene.
    pub scene: SyntheticSceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub inference: InferenceConfig,
    pub frequency_cap: f64,
    pub min_occurrences: usize,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let size = 64;
        let model = ModelConfig {
            image_width: size,
            image_height: size,
            patch: 8,
            d_model: 32,
            heads: 2,
            blocks: 2,
            mlp_hidden: 64,
            taps: vec![0, 1],
            min_depth: 0.5,
            ..ModelConfig::default()
        };
        let plan = TrainPlan {
            single_stream_epochs: 20,
            joint_epochs: 20,
            batch_size: 4,
            single_stream_lr: 2e-3,
            joint_lr: 1e-3,
            grad_clip: Some(1.0),
            ..TrainPlan::default()
        };
        Self {
            scene: SyntheticSceneSpec::desk(0, size),
            train_scenes: 500,
            test_scenes: 100,
            model,
            plan,
            inference: InferenceConfig::default(),
            frequency_cap: DEFAULT_FREQUENCY_CAP,
            min_occurrences: DEFAULT_MIN_OCCURRENCES,
            variants: vec![
                Variant::SingleStream,
                Variant::Baseline,
                Variant::Rad,
                Variant::FullContext,
                Variant::GlobalRetrieval,
            ],
        }
    }
}

pub struct ExperimentResult {
    pub seed: u64,
    pub dataset: Dataset,
    pub class_stats: ClassStats,
    pub rare_classes: BTreeSet<u32>,
    pub single_stream: DualStreamModel,
    pub model: DualStreamModel,
    pub single_stream_log: TrainLog,
    pub joint_log: TrainLog,
    pub report: BenchmarkReport,
    pub predictions: Predictions,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn run_synthetic_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
        timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let dataset = synthetic_dataset(
        &cfg.scene,
        &[(Split::Train, cfg.train_scenes), (Split::Test, cfg.test_scenes)],
        seed << 24,
    )?;
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    let class_stats = ClassStats::from_class_maps(train.iter().filter_map(|s| s.classes.as_ref()));
    let rare_classes = select_underrepresented(&class_stats, cfg.frequency_cap, cfg.min_occurrences);
    lap("synthesize", &mut timings);

    let plan = TrainPlan {
        seed,
        ..cfg.plan.clone()
    };
    let init = DualStreamModel::new(cfg.model.clone(), &mut SeededRng::derived(seed, 1))?;
    let mut staged = StagedModel::initialized(init);
    let single_stream_log = staged.train_single_stream(&train, &plan)?;
    let single_stream = staged.model.clone();
    staged.init_context_stream(seed)?;
    lap("train_single_stream", &mut timings);

    let index = dataset.pool_index()?;
    let store = dataset.pool_store();
    let resources = Resources {
        index: &index,
        pool: &store,
        uncertainty_model: &single_stream,
    };
    let bank = build_retrieval_bank(
        &train,
        resources,
        &cfg.inference.retrieval,
        &cfg.inference.matching,
        &cfg.model,
        seed,
    )?;
    lap("retrieval_bank", &mut timings);

    let joint_log = staged.train_joint(&train, &bank, &plan)?;
    lap("train_joint", &mut timings);

    let bench = BenchmarkConfig {
        inference: cfg.inference,
        variants: cfg.variants.clone(),
        rare_classes: rare_classes.clone(),
        min_depth: cfg.model.min_depth,
        max_depth: cfg.model.max_depth,
        seed: seed ^ 0xBE4C,
    };
    let models = BenchModels {
        model: &staged.model,
        single_stream: Some(&single_stream),
    };
    let (report, predictions) = run_benchmark(&test, models, resources, &bench)?;
    lap("benchmark", &mut timings);

    Ok(ExperimentResult {
        seed,
        class_stats,
        rare_classes,
        model: staged.model,
        single_stream,
        single_stream_log,
        joint_log,
        report,
        predictions,
        timings,
        dataset,
    })
}
