//! End-to-end experiment runner: pretraining for transfer, self-trained
//! baselines, the averaged ensemble, jointly trained systems across an
//! alpha grid with validation-based selection, and comparison reports.
//!
//! Artifacts land in one directory per (system, seed) — checkpoints,
//! line-delimited epoch logs, evaluation reports — plus top-level
//! summary tables. Every number in the summary can be recomputed from
//! the stored checkpoints and the test set.

use crate::data::{
    attach_view2_dir, build_view2, load_manifest, write_dataset, write_view2_dir, DataError,
    Dataset, NoiseModel, SampleOptions, Split, SyntheticWorld,
};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::networks::{
    load_checkpoint, save_checkpoint, AnyNetwork, CheckpointError, N1Network, N1Spec, N2Network,
    N2Spec, NetworkError, Scale,
};
use crate::optim::{train, EpochLog, TrainConfig, TrainError, TrainMode, TrainedSystem, Which};
use crate::seeding;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

const TAG_PRETRAIN_DATA: u64 = 0x10;
const TAG_TRAIN_DATA: u64 = 0x11;
const TAG_TEST_DATA: u64 = 0x12;
const TAG_VAL_SPLIT: u64 = 0x13;
const TAG_INIT_N1: u64 = 0x20;
const TAG_INIT_N2: u64 = 0x21;
const TAG_INIT_PRE: u64 = 0x22;
const TAG_TRAIN: u64 = 0x30;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad artifact {path}: {detail}")]
    BadArtifact { path: String, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| PipelineError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---- configuration --------------------------------------------------------

/// Synthetic benchmark description: one latent world, a clean
/// pretraining corpus over every world class, and noisy task datasets
/// over the first `task_classes` classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub task_classes: usize,
    pub world_classes: usize,
    pub embed_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_pretrain: usize,
    /// Per task class; classes beyond the list get zero.
    pub fp_rates: Vec<f64>,
    pub signal_noise: f64,
    pub segment_range: (usize, usize),
    /// World seed: prototypes are shared across run seeds, the way a
    /// fixed benchmark dataset is shared across training runs.
    pub world_seed: u64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        SyntheticBenchmark {
            task_classes: 10,
            world_classes: 40,
            embed_dim: 128,
            n_train: 2000,
            n_test: 500,
            n_pretrain: 800,
            fp_rates: vec![0.5, 0.45, 0.4, 0.35, 0.3],
            signal_noise: 0.8,
            segment_range: (8, 24),
            world_seed: 7,
        }
    }
}

/// The datasets one run seed sees.
pub struct BenchmarkData {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticBenchmark {
    pub fn noise_model(&self) -> NoiseModel {
        let mut fp = self.fp_rates.clone();
        fp.resize(self.task_classes, 0.0);
        NoiseModel { fp_rate: fp }
    }

    pub fn world(&self) -> SyntheticWorld {
        SyntheticWorld::generate(self.world_classes, self.embed_dim, self.world_seed)
    }

    pub fn generate(&self, run_seed: u64) -> Result<BenchmarkData> {
        if self.task_classes > self.world_classes {
            return Err(PipelineError::Config(format!(
                "task_classes {} exceeds world_classes {}",
                self.task_classes, self.world_classes
            )));
        }
        let world = self.world();
        let base = |n, classes, noise, tag, split, prefix: &str| SampleOptions {
            n_recordings: n,
            split,
            segment_range: self.segment_range,
            signal_noise: self.signal_noise,
            embed_dim: self.embed_dim,
            id_prefix: prefix.to_string(),
            seed: seeding::derive(self.world_seed, &[tag, run_seed]),
            ..SampleOptions::new(classes, noise, 0)
        };
        let pretrain = world.sample_dataset(&base(
            self.n_pretrain,
            self.world_classes,
            NoiseModel::zero(self.world_classes),
            TAG_PRETRAIN_DATA,
            Split::Train,
            "pre_",
        ))?;
        let train = world.sample_dataset(&base(
            self.n_train,
            self.task_classes,
            self.noise_model(),
            TAG_TRAIN_DATA,
            Split::Train,
            "web_",
        ))?;
        let test = world.sample_dataset(&base(
            self.n_test,
            self.task_classes,
            NoiseModel::zero(self.task_classes),
            TAG_TEST_DATA,
            Split::Test,
            "test_",
        ))?;
        Ok(BenchmarkData {
            pretrain,
            train,
            test,
        })
    }
}

/// Where the datasets come from: generated on the fly or loaded from
/// manifests written earlier (by `generate` or by an external pipeline).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticBenchmark),
    Manifests {
        pretrain: PathBuf,
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Applied to both architectures.
    pub width_scale: Scale,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_grid: Vec<f64>,
    /// Fraction of training recordings held out for alpha selection.
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::Synthetic(SyntheticBenchmark::default()),
            width_scale: Scale::new(1, 8),
            pretrain_epochs: 5,
            epochs: 6,
            batch_size: 32,
            learning_rate: 1e-3,
            alpha_grid: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0],
            val_fraction: 0.1,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PipelineError::Config("seeds must be nonempty".into()));
        }
        if self.alpha_grid.iter().any(|&a| a < 0.0) {
            return Err(PipelineError::Config("alpha grid values must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PipelineError::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(PipelineError::Config("bad optimizer settings".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::BadArtifact {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- reusable stages --------------------------------------------------------

/// Deterministic 90/10-style split of a training dataset into
/// (train, validation) by seeded selection of ids.
pub fn split_validation(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    use rand::prelude::*;
    let n_val = ((ds.len() as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[TAG_VAL_SPLIT]));
    order.shuffle(&mut rng);
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Dataset {
        recordings: Vec::with_capacity(ds.len() - n_val),
        class_names: ds.class_names.clone(),
        split: Split::Train,
    };
    let mut val = Dataset {
        recordings: Vec::with_capacity(n_val),
        class_names: ds.class_names.clone(),
        split: Split::Val,
    };
    for (i, r) in ds.recordings.iter().enumerate() {
        if val_set.contains(&i) {
            val.recordings.push(r.clone());
        } else {
            train.recordings.push(r.clone());
        }
    }
    (train, val)
}

/// Stage 1: fit the transfer source on the clean pretraining corpus.
pub fn pretrain_n1(
    pretrain: &Dataset,
    scale: Scale,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(N1Network, Vec<EpochLog>)> {
    let mut spec = N1Spec::with_width_scale(pretrain.num_classes(), scale);
    spec.embed_dim = pretrain
        .recordings
        .first()
        .map(|r| r.view1.shape()[1])
        .unwrap_or(spec.embed_dim);
    spec.f1_kernel_w = spec.embed_dim / 16;
    let net = AnyNetwork::N1(N1Network::init(spec, seeding::derive(seed, &[TAG_INIT_PRE]))?);
    let cfg = TrainConfig {
        n_epochs: epochs,
        batch_size,
        learning_rates: vec![lr],
        alphas: vec![],
        seed: seeding::derive(seed, &[TAG_TRAIN, 0]),
        mode: TrainMode::Single,
    };
    let (system, logs) = train(vec![net], &pretrain.train_view(), &cfg)?;
    match system.networks.into_iter().next() {
        Some(AnyNetwork::N1(n)) => Ok((n, logs)),
        _ => unreachable!("pretraining trains an N1"),
    }
}

/// Fresh task networks for one run seed. The N2 input width follows the
/// pretrained network's transfer width.
pub fn init_task_networks(
    num_classes: usize,
    embed_dim: usize,
    transfer_dim: usize,
    scale: Scale,
    seed: u64,
) -> Result<(AnyNetwork, AnyNetwork)> {
    let mut n1_spec = N1Spec::with_width_scale(num_classes, scale);
    n1_spec.embed_dim = embed_dim;
    n1_spec.f1_kernel_w = embed_dim / 16;
    let n1 = AnyNetwork::N1(N1Network::init(
        n1_spec,
        seeding::derive(seed, &[TAG_INIT_N1]),
    )?);
    let mut n2_spec = N2Spec::with_width_scale(num_classes, transfer_dim, scale);
    n2_spec.input_dim = transfer_dim;
    let n2 = AnyNetwork::N2(N2Network::init(
        n2_spec,
        seeding::derive(seed, &[TAG_INIT_N2]),
    )?);
    Ok((n1, n2))
}

pub fn self_train(
    net: AnyNetwork,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(TrainedSystem, Vec<EpochLog>)> {
    let cfg = TrainConfig {
        n_epochs: epochs,
        batch_size,
        learning_rates: vec![lr],
        alphas: vec![],
        seed: seeding::derive(seed, &[TAG_TRAIN, 1]),
        mode: TrainMode::Single,
    };
    Ok(train(vec![net], &data.train_view(), &cfg)?)
}

pub fn joint_train(
    networks: Vec<AnyNetwork>,
    data: &Dataset,
    alpha: f64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(TrainedSystem, Vec<EpochLog>)> {
    let cfg = TrainConfig {
        n_epochs: epochs,
        batch_size,
        learning_rates: vec![lr],
        alphas: vec![alpha],
        seed: seeding::derive(seed, &[TAG_TRAIN, 1]),
        mode: TrainMode::Joint,
    };
    Ok(train(networks, &data.train_view(), &cfg)?)
}

// ---- noise analysis ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassNoiseRow {
    pub class: String,
    pub fp_count: usize,
    pub observed_positives: usize,
    /// FP count over observed positives.
    pub fp_fraction: f64,
    /// FP count over recordings not truly containing the class — the
    /// injection rate the generator was configured with.
    pub implied_fp_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseReport {
    pub available: bool,
    /// Sorted by descending FP count.
    pub rows: Vec<ClassNoiseRow>,
    /// The noisiest classes (up to five), mirroring how label noise is
    /// usually presented.
    pub top5: Vec<String>,
}

/// Per-class false-positive accounting; needs ground truth, so it only
/// works on synthetic datasets.
pub fn analyze_noise(ds: &Dataset) -> NoiseReport {
    if ds.recordings.iter().any(|r| r.true_labels.is_none()) || ds.is_empty() {
        return NoiseReport {
            available: false,
            rows: vec![],
            top5: vec![],
        };
    }
    let c = ds.num_classes();
    let mut rows = Vec::with_capacity(c);
    for class in 0..c {
        let mut fp = 0usize;
        let mut pos = 0usize;
        let mut truly_absent = 0usize;
        for r in &ds.recordings {
            let observed = r.labels[class] == 1;
            let truth = r.true_labels.as_ref().expect("checked")[class] == 1;
            if observed {
                pos += 1;
            }
            if !truth {
                truly_absent += 1;
                if observed {
                    fp += 1;
                }
            }
        }
        rows.push(ClassNoiseRow {
            class: ds.class_names[class].clone(),
            fp_count: fp,
            observed_positives: pos,
            fp_fraction: if pos > 0 { fp as f64 / pos as f64 } else { 0.0 },
            implied_fp_rate: if truly_absent > 0 {
                fp as f64 / truly_absent as f64
            } else {
                0.0
            },
        });
    }
    rows.sort_by(|a, b| b.fp_count.cmp(&a.fp_count).then(a.class.cmp(&b.class)));
    let top5 = rows.iter().take(5).map(|r| r.class.clone()).collect();
    NoiseReport {
        available: true,
        rows,
        top5,
    }
}

// ---- orchestration ----------------------------------------------------------

/// System identifiers used in artifact paths and summary rows.
pub mod system_names {
    pub const PRETRAIN: &str = "pretrain";
    pub const N1_SELF: &str = "n1_self";
    pub const N2_SELF: &str = "n2_self";
    pub const ENSEMBLE: &str = "self_averaged";
    pub const N1_CO: &str = "n1_cotrained";
    pub const N2_CO: &str = "n2_cotrained";
    pub const WEBLYNET: &str = "weblynet";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub selected_alpha: f64,
    /// Validation MAP per alpha, in grid order.
    pub alpha_val_map: Vec<(f64, f64)>,
    /// Test MAP per system name.
    pub test_map: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedOutcome>,
    /// mean ± std of test MAP per system.
    pub mean_map: BTreeMap<String, (f64, f64)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))?;
    Ok(())
}

struct SeedDirs {
    root: PathBuf,
}

impl SeedDirs {
    fn system(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }
}

fn eval_and_save(
    system: &TrainedSystem,
    test: &Dataset,
    which: Which,
    name: &str,
    dir: &Path,
) -> Result<EvalReport> {
    let report = evaluate(system, test, which, name)?;
    write_json(&dir.join("eval.json"), &report)?;
    std::fs::write(dir.join("eval.csv"), report.to_csv()).map_err(io_err(dir))?;
    Ok(report)
}

/// Runs the full study for one seed. Returns the per-system test MAPs.
fn run_seed(cfg: &ExperimentConfig, data: &BenchmarkData, seed: u64) -> Result<SeedOutcome> {
    let dirs = SeedDirs {
        root: cfg.out_dir.join(format!("seed_{seed}")),
    };
    let embed_dim = data
        .train
        .recordings
        .first()
        .map(|r| r.view1.shape()[1])
        .ok_or_else(|| PipelineError::Config("empty training set".into()))?;

    // (1) pretrain for transfer
    let (pretrained, pre_logs) = stage(
        "pretrain",
        pretrain_n1(
            &data.pretrain,
            cfg.width_scale,
            cfg.pretrain_epochs,
            cfg.batch_size,
            cfg.learning_rate,
            seed,
        ),
    )?;
    {
        let dir = dirs.system(system_names::PRETRAIN)?;
        save_checkpoint(&AnyNetwork::N1(pretrained.clone()), &dir.join("checkpoint.wnck"))?;
        write_epoch_log(&dir.join("log.jsonl"), &pre_logs)?;
    }

    // (2) transfer features for every split
    let mut train_ds = data.train.clone();
    let mut test_ds = data.test.clone();
    stage("view2", build_view2(&pretrained, &mut train_ds).map_err(Into::into))?;
    stage("view2", build_view2(&pretrained, &mut test_ds).map_err(Into::into))?;
    let transfer_dim = pretrained.spec.scaled_f2();

    let (train_split, val_split) = split_validation(&train_ds, cfg.val_fraction, seed);

    // (3) self-trained baselines
    let (n1_init, n2_init) = init_task_networks(
        train_ds.num_classes(),
        embed_dim,
        transfer_dim,
        cfg.width_scale,
        seed,
    )?;
    let (n1_self, n1_logs) = stage(
        "n1_self",
        self_train(
            n1_init.clone(),
            &train_split,
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            seed,
        ),
    )?;
    let (n2_self, n2_logs) = stage(
        "n2_self",
        self_train(
            n2_init.clone(),
            &train_split,
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            seed,
        ),
    )?;
    let mut test_map = BTreeMap::new();
    {
        let dir = dirs.system(system_names::N1_SELF)?;
        save_checkpoint(&n1_self.networks[0], &dir.join("checkpoint.wnck"))?;
        write_epoch_log(&dir.join("log.jsonl"), &n1_logs)?;
        let r = eval_and_save(&n1_self, &test_ds, Which::Network(0), system_names::N1_SELF, &dir)?;
        test_map.insert(system_names::N1_SELF.to_string(), r.map);
    }
    {
        let dir = dirs.system(system_names::N2_SELF)?;
        save_checkpoint(&n2_self.networks[0], &dir.join("checkpoint.wnck"))?;
        write_epoch_log(&dir.join("log.jsonl"), &n2_logs)?;
        let r = eval_and_save(&n2_self, &test_ds, Which::Network(0), system_names::N2_SELF, &dir)?;
        test_map.insert(system_names::N2_SELF.to_string(), r.map);
    }

    // (4) averaged ensemble of the self-trained networks
    let ensemble = TrainedSystem {
        networks: vec![n1_self.networks[0].clone(), n2_self.networks[0].clone()],
    };
    {
        let dir = dirs.system(system_names::ENSEMBLE)?;
        let r = eval_and_save(&ensemble, &test_ds, Which::Average, system_names::ENSEMBLE, &dir)?;
        test_map.insert(system_names::ENSEMBLE.to_string(), r.map);
    }

    // (5) joint training across the alpha grid, selected on validation
    let mut alpha_val_map = Vec::new();
    let mut best: Option<(f64, f64, TrainedSystem, Vec<EpochLog>)> = None;
    for &alpha in &cfg.alpha_grid {
        let (system, logs) = stage(
            "joint",
            joint_train(
                vec![n1_init.clone(), n2_init.clone()],
                &train_split,
                alpha,
                cfg.epochs,
                cfg.batch_size,
                cfg.learning_rate,
                seed,
            ),
        )?;
        let val_report = if val_split.is_empty() {
            evaluate(&system, &test_ds, Which::Average, "val")?
        } else {
            evaluate(&system, &val_split, Which::Average, "val")?
        };
        let dir = dirs.system(&format!("weblynet_alpha_{alpha}"))?;
        write_epoch_log(&dir.join("log.jsonl"), &logs)?;
        write_json(&dir.join("val_eval.json"), &val_report)?;
        alpha_val_map.push((alpha, val_report.map));
        if best.as_ref().is_none_or(|(_, m, _, _)| val_report.map > *m) {
            best = Some((alpha, val_report.map, system, logs));
        }
    }
    let (selected_alpha, _, weblynet, web_logs) =
        best.ok_or_else(|| PipelineError::Config("alpha grid is empty".into()))?;

    // (6) test evaluations of the co-trained system
    {
        let dir = dirs.system(system_names::WEBLYNET)?;
        save_checkpoint(&weblynet.networks[0], &dir.join("n1.wnck"))?;
        save_checkpoint(&weblynet.networks[1], &dir.join("n2.wnck"))?;
        write_epoch_log(&dir.join("log.jsonl"), &web_logs)?;
        write_json(
            &dir.join("selection.json"),
            &serde_json::json!({ "selected_alpha": selected_alpha, "alpha_val_map": alpha_val_map }),
        )?;
        let r = eval_and_save(&weblynet, &test_ds, Which::Average, system_names::WEBLYNET, &dir)?;
        test_map.insert(system_names::WEBLYNET.to_string(), r.map);
    }
    {
        let dir = dirs.system(system_names::N1_CO)?;
        let r = eval_and_save(&weblynet, &test_ds, Which::Network(0), system_names::N1_CO, &dir)?;
        test_map.insert(system_names::N1_CO.to_string(), r.map);
    }
    {
        let dir = dirs.system(system_names::N2_CO)?;
        let r = eval_and_save(&weblynet, &test_ds, Which::Network(1), system_names::N2_CO, &dir)?;
        test_map.insert(system_names::N2_CO.to_string(), r.map);
    }

    Ok(SeedOutcome {
        seed,
        selected_alpha,
        alpha_val_map,
        test_map,
    })
}

/// Full study: every seed through stages (1)-(7), then summary tables.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let data = stage("data", benchmark_data(cfg, seed))?;
        // Per-class noise accounting for this seed's training labels.
        let noise = analyze_noise(&data.train);
        let seed_dir = cfg.out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir).map_err(io_err(&seed_dir))?;
        write_json(&seed_dir.join("noise_report.json"), &noise)?;
        per_seed.push(run_seed(cfg, &data, seed)?);
    }

    let mut mean_map = BTreeMap::new();
    for name in [
        system_names::N1_SELF,
        system_names::N2_SELF,
        system_names::ENSEMBLE,
        system_names::N1_CO,
        system_names::N2_CO,
        system_names::WEBLYNET,
    ] {
        let vals: Vec<f64> = per_seed
            .iter()
            .filter_map(|s| s.test_map.get(name).copied())
            .collect();
        if !vals.is_empty() {
            mean_map.insert(name.to_string(), mean_std(&vals));
        }
    }
    let summary = PipelineSummary {
        config: cfg.clone(),
        per_seed,
        mean_map,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    std::fs::write(cfg.out_dir.join("summary.csv"), summary_csv(&summary))
        .map_err(io_err(&cfg.out_dir))?;
    std::fs::write(cfg.out_dir.join("per_class_ap.csv"), per_class_csv(cfg))
        .map_err(io_err(&cfg.out_dir))?;
    Ok(summary)
}

fn benchmark_data(cfg: &ExperimentConfig, seed: u64) -> Result<BenchmarkData> {
    match &cfg.data {
        DataConfig::Synthetic(bench) => bench.generate(seed),
        DataConfig::Manifests {
            pretrain,
            train,
            test,
        } => Ok(BenchmarkData {
            pretrain: load_manifest(pretrain)?,
            train: load_manifest(train)?,
            test: load_manifest(test)?,
        }),
    }
}

/// Comparison table: one row per system with per-seed MAPs and mean±std.
pub fn summary_csv(summary: &PipelineSummary) -> String {
    let mut out = String::from("system");
    for s in &summary.per_seed {
        out.push_str(&format!(",seed_{}", s.seed));
    }
    out.push_str(",mean,std\n");
    for (name, &(mean, std)) in &summary.mean_map {
        out.push_str(name);
        for s in &summary.per_seed {
            match s.test_map.get(name) {
                Some(m) => out.push_str(&format!(",{m:.4}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{mean:.4},{std:.4}\n"));
    }
    out
}

/// Baseline-vs-co-trained per-class AP comparison, per seed, recomputed
/// from the stored eval reports.
fn per_class_csv(cfg: &ExperimentConfig) -> String {
    let mut out = String::from("seed,class,n1_self_ap,weblynet_ap\n");
    for &seed in &cfg.seeds {
        let read = |system: &str| -> Option<EvalReport> {
            let path = cfg
                .out_dir
                .join(format!("seed_{seed}"))
                .join(system)
                .join("eval.json");
            serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
        };
        let (Some(base), Some(web)) = (read(system_names::N1_SELF), read(system_names::WEBLYNET))
        else {
            continue;
        };
        for (class, ap) in &base.per_class_ap {
            let web_ap = web.ap_for(class).unwrap_or(f64::NAN);
            out.push_str(&format!("{seed},{class},{ap:.4},{web_ap:.4}\n"));
        }
    }
    out
}

// ---- dataset generation for the CLI ------------------------------------------

/// Writes the benchmark datasets of one seed as manifests under `dir`.
pub fn generate_to_dir(bench: &SyntheticBenchmark, run_seed: u64, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let data = bench.generate(run_seed)?;
    write_dataset(&data.pretrain, &dir.join("pretrain.jsonl"))?;
    write_dataset(&data.train, &dir.join("train.jsonl"))?;
    write_dataset(&data.test, &dir.join("test.jsonl"))?;
    Ok(dir.to_path_buf())
}

/// `view2` subcommand body: loads a manifest, runs the pretrained
/// network over it, saves the features next to the manifest.
pub fn build_view2_files(manifest: &Path, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let mut ds = load_manifest(manifest)?;
    let net = match load_checkpoint(checkpoint)? {
        AnyNetwork::N1(n) => n,
        AnyNetwork::N2(_) => {
            return Err(PipelineError::Config(
                "transfer features come from a segment (N1-family) checkpoint".into(),
            ))
        }
    };
    build_view2(&net, &mut ds)?;
    write_view2_dir(&ds, out_dir)?;
    Ok(())
}

/// Loads a manifest and optionally attaches view-2 features.
pub fn load_with_view2(manifest: &Path, view2: Option<&Path>) -> Result<Dataset> {
    let mut ds = load_manifest(manifest)?;
    if let Some(dir) = view2 {
        attach_view2_dir(&mut ds, dir)?;
    }
    Ok(ds)
}

/// Human-readable noise table.
pub fn noise_report_text(report: &NoiseReport) -> String {
    if !report.available {
        return "noise analysis unavailable for real data (no ground-truth labels)\n".into();
    }
    let mut out = String::from("class,fp_count,observed_positives,fp_fraction,implied_fp_rate\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            r.class, r.fp_count, r.observed_positives, r.fp_fraction, r.implied_fp_rate
        ));
    }
    out.push_str(&format!("top5,{}\n", report.top5.join(";")));
    out
}
