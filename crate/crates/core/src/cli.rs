//! Experiment configuration and the commands behind the `maskconnect` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{connectivity_dot, connectivity_json, prune_unused, PruneReport};
use crate::data::{load_cifar, make_blobs, Dataset, Split, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::graph::{build, load_checkpoint, save_checkpoint, ArchSpec, Checkpoint, ConnectivityMode, Family, ModuleGraph, ShortcutKind};
use crate::train::{evaluate, metrics_csv, run_phases, EvalResult, MetricsRow, PhaseSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    /// Gaussian blobs with the architecture's image size and class count.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityName {
    Learned,
    FixedPrev,
    FixedRandom,
    FixedFull,
}

/// Flat TOML experiment description. Defaults are the desk-scale ResNeXt
/// setup: 3 modules, `C = 8`, `w = 2`, `K = 4`, 5,000 CIFAR-10 training
/// images, 12/10/5/5 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    /// Number of blocks (ResNet) or modules (ResNeXt, 3 if neither this nor
    /// `depth` is set); exclusive with `depth`.
    pub modules: Option<usize>,
    /// ResNeXt depth `2 + 3L`.
    pub depth: Option<usize>,
    pub cardinality: usize,
    pub width: usize,
    pub fan_in: usize,
    pub connectivity: ConnectivityName,
    /// Seed for `fixed_random` masks; the run seed if absent.
    pub connectivity_seed: Option<u64>,
    pub shortcut: Option<ShortcutKind>,
    pub stem_channels: Option<usize>,
    /// Image side for synthetic data (CIFAR is always 32).
    pub image_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub dataset: DatasetName,
    pub data_dir: Option<PathBuf>,
    /// Training images kept (the first ones); all if absent.
    pub subset_size: Option<usize>,
    /// Test images kept; all (CIFAR) or 1,000 (synthetic) if absent.
    pub test_size: Option<usize>,
    pub epochs: [usize; 4],
    pub lr_weights: [f64; 4],
    /// 0.2 for ResNeXt, 0.3 for ResNet if absent.
    pub lr_masks: Option<f64>,
    /// Number of phases to run, from the first.
    pub phases: usize,
    pub momentum: f64,
    /// 5e-4 for ResNeXt, 1e-4 for ResNet if absent.
    pub weight_decay: Option<f64>,
    pub batch_size: usize,
    pub augment: bool,
    pub wall_clock: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: Family::Resnext,
            modules: None,
            depth: None,
            cardinality: 8,
            width: 2,
            fan_in: 4,
            connectivity: ConnectivityName::Learned,
            connectivity_seed: None,
            shortcut: None,
            stem_channels: None,
            image_size: None,
            num_classes: None,
            dataset: DatasetName::Cifar10,
            data_dir: None,
            subset_size: Some(5000),
            test_size: None,
            epochs: [12, 10, 5, 5],
            lr_weights: [0.1, 0.1, 0.01, 0.001],
            lr_masks: None,
            phases: 4,
            momentum: 0.9,
            weight_decay: None,
            batch_size: 128,
            augment: true,
            wall_clock: false,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub subset_size: Option<usize>,
    pub phases: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(n) = o.subset_size {
            self.subset_size = Some(n);
        }
        if let Some(p) = o.phases {
            self.phases = p;
        }
    }

    fn num_classes(&self) -> usize {
        self.num_classes.unwrap_or(match self.dataset {
            DatasetName::Cifar100 => 100,
            _ => 10,
        })
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let classes = self.num_classes();
        let mut spec = match (self.family, self.modules, self.depth) {
            (_, Some(_), Some(_)) => return Err(Error::Config("set either modules or depth, not both".into())),
            (Family::Resnet, Some(l), None) => ArchSpec::resnet(l, self.fan_in, classes),
            (Family::Resnet, None, _) => return Err(Error::Config("resnet needs modules".into())),
            (Family::Resnext, l, d) => {
                let depth = match (l, d) {
                    (Some(l), _) => 2 + 3 * l,
                    (None, Some(d)) => d,
                    (None, None) => 2 + 3 * DEFAULT_MODULES,
                };
                ArchSpec::resnext(depth, self.width, self.cardinality, self.fan_in, classes)?
            }
        };
        spec.connectivity = match self.connectivity {
            ConnectivityName::Learned => ConnectivityMode::Learned,
            ConnectivityName::FixedPrev => ConnectivityMode::FixedPrev,
            ConnectivityName::FixedRandom => ConnectivityMode::FixedRandom {
                seed: self.connectivity_seed.unwrap_or(self.seed),
            },
            ConnectivityName::FixedFull => ConnectivityMode::FixedFull,
        };
        if let Some(s) = self.shortcut {
            spec.shortcut = s;
        }
        if let Some(c) = self.stem_channels {
            spec.stem_channels = c;
        }
        match (self.dataset, self.image_size) {
            (DatasetName::Blobs, Some(s)) => spec.image_size = s,
            (DatasetName::Cifar10 | DatasetName::Cifar100, Some(s)) if s != 32 => {
                return Err(Error::Config(format!("CIFAR images are 32×32, not {s}")))
            }
            _ => {}
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn schedule(&self) -> PhaseSchedule {
        let lr_masks = self.lr_masks.unwrap_or(match self.family {
            Family::Resnet => 0.3,
            Family::Resnext => 0.2,
        });
        PhaseSchedule::four_phase(self.epochs, self.lr_weights, lr_masks).truncated(self.phases)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay.unwrap_or(match self.family {
                Family::Resnet => 1e-4,
                Family::Resnext => 5e-4,
            }),
            batch_size: self.batch_size,
            augment: self.augment,
            wall_clock: self.wall_clock,
            ..TrainConfig::default()
        }
    }

    /// Checks everything a run needs before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.arch_spec()?;
        if self.phases == 0 || self.phases > 4 {
            return Err(Error::Config(format!("phases must be in 1..=4, got {}", self.phases)));
        }
        self.schedule().validate()?;
        self.train_config().validate()?;
        if matches!(self.dataset, DatasetName::Cifar10 | DatasetName::Cifar100) && self.data_dir.is_none() {
            return Err(Error::Config("data_dir is required for CIFAR".into()));
        }
        if self.subset_size == Some(0) || self.test_size == Some(0) {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        Ok(())
    }

    /// Train and test splits. Synthetic data does not depend on `seed`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetName::Cifar10 | DatasetName::Cifar100 => {
                let variant = if self.dataset == DatasetName::Cifar10 {
                    Variant::Cifar10
                } else {
                    Variant::Cifar100
                };
                let dir = self.data_dir.as_ref().ok_or_else(|| Error::Config("data_dir is required for CIFAR".into()))?;
                let splits = load_cifar(dir, variant, self.subset_size)?;
                let test = match self.test_size {
                    Some(n) => splits.test.subset(n),
                    None => splits.test,
                };
                Ok((splits.train, test))
            }
            DatasetName::Blobs => {
                let spec = self.arch_spec()?;
                let (n_train, n_test) = (self.subset_size.unwrap_or(5000), self.test_size.unwrap_or(1000));
                let mut rng = ChaCha8Rng::seed_from_u64(BLOBS_SEED);
                let s = spec.image_size;
                let all = make_blobs(n_train + n_test, spec.num_classes, [spec.in_channels, s, s], 4.0, 1.0, &mut rng)?;
                let train = all.subset(n_train);
                let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
                let (images, labels) = all.batch::<ChaCha8Rng>(&test_idx, None);
                let test = Dataset::new(images, labels, spec.num_classes, Split::Test)?;
                Ok((train, test))
            }
        }
    }
}

const DEFAULT_MODULES: usize = 3;

const BLOBS_SEED: u64 = 0xb10b5;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::Shape { .. } | Error::InvalidAdapter { .. } => 1,
        Error::NonFinite(_) | Error::DegenerateBatch { .. } => 2,
        Error::Io(_) | Error::CorruptFile { .. } | Error::Checkpoint(_) => 3,
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.mckp";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.mckp";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub test: EvalResult,
    pub graph: ModuleGraph,
}

fn write_connectivity(graph: &ModuleGraph, dir: &Path) -> Result<()> {
    fs::write(dir.join("connectivity.json"), connectivity_json(graph))?;
    fs::write(dir.join("connectivity.dot"), connectivity_dot(graph))?;
    Ok(())
}

/// Builds, trains and evaluates one configuration. Writes the resolved
/// config, metrics, checkpoint and connectivity into `cfg.out`. On a
/// non-finite loss the partial metrics and a diagnostic checkpoint of the
/// failing state are written before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.arch_spec()?;
    let (train, test) = cfg.load_data()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graph = build(&spec, &mut rng)?;
    log::info!(
        "{:?} with {} blocks, {} parameters, {} train / {} test images",
        spec.family,
        graph.block_count(),
        graph.param_count(),
        train.len(),
        test.len()
    );
    let schedule = cfg.schedule();
    let mut rows = Vec::new();
    let result = run_phases(&mut graph, &train, Some(&test), &schedule, &cfg.train_config(), &mut rng, |r| {
        rows.push(r.clone())
    });
    fs::write(cfg.out.join(METRICS_FILE), metrics_csv(&rows))?;
    let phase = rows.last().map_or(0, |r| r.phase as u32);
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_)) {
            let ckpt = Checkpoint { graph, rng: Some(rng), phase };
            save_checkpoint(&cfg.out.join(DIAGNOSTIC_FILE), &ckpt)?;
        }
        return Err(e);
    }
    let test_result = evaluate(&mut graph, &test, cfg.train_config().eval_batch)?;
    let ckpt = Checkpoint {
        graph,
        rng: Some(rng),
        phase,
    };
    save_checkpoint(&cfg.out.join(CHECKPOINT_FILE), &ckpt)?;
    write_connectivity(&ckpt.graph, &cfg.out)?;
    Ok(TrainOutcome {
        rows,
        test: test_result,
        graph: ckpt.graph,
    })
}

/// Top-1 and loss of a checkpoint on the configured test split.
pub fn cmd_eval(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<EvalResult> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let (_, test) = cfg.load_data()?;
    evaluate(&mut ckpt.graph, &test, cfg.train_config().eval_batch)
}

/// Removes blocks no longer reachable from the output and writes the pruned
/// checkpoint to `out`.
pub fn cmd_prune(checkpoint: &Path, out: &Path) -> Result<PruneReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (graph, report) = prune_unused(ckpt.graph)?;
    save_checkpoint(out, &Checkpoint { graph, ..ckpt })?;
    Ok(report)
}

/// Writes `connectivity.json` and `connectivity.dot` into `dir`.
pub fn cmd_export_conn(checkpoint: &Path, dir: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    fs::create_dir_all(dir)?;
    write_connectivity(&ckpt.graph, dir)
}

pub fn cmd_gradcheck() -> Result<Vec<GradCheckReport>> {
    gradcheck::run_all(&GradCheckConfig::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fan_in: usize,
    pub top1: f64,
    pub loss: f64,
    pub params: usize,
    pub params_effective: usize,
}

pub const SWEEP_HEADER: &str = "k,top1,loss,params,params_effective";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.fan_in, r.top1, r.loss, r.params, r.params_effective
        );
    }
    out
}

/// Trains one run per fan-in, each in `out/k{K}`, and writes
/// `out/sweep_k.csv`.
pub fn cmd_sweep_k(cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(Error::Config("no fan-in values to sweep".into()));
    }
    for &k in ks {
        ExperimentConfig { fan_in: k, ..cfg.clone() }.validate()?;
    }
    let mut rows = Vec::new();
    for &k in ks {
        let run = ExperimentConfig {
            fan_in: k,
            out: cfg.out.join(format!("k{k}")),
            ..cfg.clone()
        };
        let outcome = cmd_train(&run)?;
        rows.push(SweepRow {
            fan_in: k,
            top1: outcome.test.top1,
            loss: outcome.test.loss,
            params: outcome.graph.param_count(),
            params_effective: outcome.graph.effective_param_count(),
        });
    }
    fs::write(cfg.out.join("sweep_k.csv"), sweep_csv(&rows))?;
    Ok(rows)
}
