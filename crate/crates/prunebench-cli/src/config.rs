//! Experiment configuration files: a flat TOML schema with typed sections,
//! full defaults, strict unknown-key rejection, and a canonical re-emission
//! used for hashing and reproducibility.

use std::path::Path;

use prunebench::attacks::{BbConfig, CwConfig, PgdConfig};
use prunebench::harness::{AttackConfigs, AttackKind, EpsilonGrid, ExperimentConfig};
use prunebench::pruning::PruningMethod;
use prunebench::training::TrainConfig;
use prunebench::{Error, Result};
use serde::{Deserialize, Serialize};

/// The on-disk schema. Every field is optional; [`FileConfig::resolve`]
/// fills defaults. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacks: Option<AttackSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<EpsilonSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory with MNIST-format IDX files; when absent a deterministic
    /// synthetic glyph set is rendered instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Method labels "structure_criterion_scope"; default: all nine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_base: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Attack kinds to evaluate ("linf", "l2", "l0"); default: all three.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgd: Option<PgdSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cw: Option<CwSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bb: Option<BbSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PgdSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CwSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_search_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BbSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_search_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_decays: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polish: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<Vec<f64>>,
}

/// A fully-resolved configuration: dataset choices plus the experiment
/// parameters handed to the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub mnist_dir: Option<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub val_fraction: f64,
    pub seed_base: u64,
    pub experiment: ExperimentConfig,
}

pub fn parse_method(label: &str) -> Result<PruningMethod> {
    PruningMethod::all()
        .into_iter()
        .find(|m| m.label() == label)
        .ok_or_else(|| {
            Error::Contract(format!(
                "experiment.methods: unknown method '{}' (expected structure_criterion_scope)",
                label
            ))
        })
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config parse error: {}", e)))
    }

    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Fill defaults and validate every field, naming the offending field
    /// in errors.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let data = self.data.clone().unwrap_or_default();
        let exp = self.experiment.clone().unwrap_or_default();
        let train = self.train.clone().unwrap_or_default();
        let attacks = self.attacks.clone().unwrap_or_default();
        let eps = self.epsilons.clone().unwrap_or_default();

        let methods = match &exp.methods {
            None => PruningMethod::all(),
            Some(labels) => labels
                .iter()
                .map(|l| parse_method(l))
                .collect::<Result<Vec<_>>>()?,
        };
        let rates = exp.rates.clone().unwrap_or_else(|| vec![2, 4, 8, 16, 32, 64]);
        if rates.windows(2).any(|w| w[0] >= w[1])
            || rates.iter().any(|&r| r < 2 || !r.is_power_of_two())
        {
            return Err(Error::Contract(format!(
                "experiment.rates: must be strictly increasing powers of two >= 2, got {:?}",
                rates
            )));
        }
        let seed_count = exp.seeds.unwrap_or(5);
        if seed_count == 0 {
            return Err(Error::Contract("experiment.seeds: must be >= 1".into()));
        }
        let seed_base = exp.seed_base.unwrap_or(0);
        let subset = exp.subset.unwrap_or(256);
        if subset == 0 {
            return Err(Error::Contract("experiment.subset: must be >= 1".into()));
        }

        let train_defaults = TrainConfig::default();
        let train_cfg = TrainConfig {
            lr0: train.lr0.unwrap_or(train_defaults.lr0),
            max_epochs: train.max_epochs.unwrap_or(train_defaults.max_epochs),
            patience_epochs: train
                .patience_epochs
                .unwrap_or(train_defaults.patience_epochs),
            lr_decay_factor: train
                .lr_decay_factor
                .unwrap_or(train_defaults.lr_decay_factor),
            lr_patience: train.lr_patience.unwrap_or(train_defaults.lr_patience),
            batch_size: train.batch_size.unwrap_or(train_defaults.batch_size),
        };
        train_cfg
            .validate()
            .map_err(|e| Error::Contract(format!("train: {}", e)))?;

        let kinds = match &attacks.kinds {
            None => vec![AttackKind::Linf, AttackKind::L2, AttackKind::L0],
            Some(names) => names
                .iter()
                .map(|n| {
                    AttackKind::from_name(n)
                        .map_err(|_| Error::Contract(format!("attacks.kinds: unknown kind '{}'", n)))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let grid_for = |kind: AttackKind| -> Result<EpsilonGrid> {
            let custom = match kind {
                AttackKind::Linf => &eps.linf,
                AttackKind::L2 => &eps.l2,
                AttackKind::L0 => &eps.l0,
            };
            match custom {
                None => Ok(EpsilonGrid::table_default(kind)),
                Some(values) => EpsilonGrid::new(kind, values.clone())
                    .map_err(|e| Error::Contract(format!("epsilons.{}: {}", kind.name(), e))),
            }
        };
        let grids = kinds
            .iter()
            .map(|&k| grid_for(k))
            .collect::<Result<Vec<_>>>()?;

        let pgd_s = attacks.pgd.clone().unwrap_or_default();
        let cw_s = attacks.cw.clone().unwrap_or_default();
        let bb_s = attacks.bb.clone().unwrap_or_default();
        let pgd_d = PgdConfig::default();
        let cw_d = CwConfig::default();
        let bb_d = BbConfig::default();
        let attack_cfgs = AttackConfigs {
            pgd: PgdConfig {
                eps: 0.0,
                steps: pgd_s.steps.unwrap_or(pgd_d.steps),
                rel_step: pgd_s.rel_step.unwrap_or(pgd_d.rel_step),
                random_start: pgd_s.random_start.unwrap_or(pgd_d.random_start),
            },
            cw: CwConfig {
                binary_search_steps: cw_s
                    .binary_search_steps
                    .unwrap_or(cw_d.binary_search_steps),
                inner_steps: cw_s.inner_steps.unwrap_or(cw_d.inner_steps),
                step_size: cw_s.step_size.unwrap_or(cw_d.step_size),
                initial_c: cw_s.initial_c.unwrap_or(cw_d.initial_c),
                kappa: cw_s.kappa.unwrap_or(cw_d.kappa),
            },
            bb: BbConfig {
                binary_search_steps: bb_s
                    .binary_search_steps
                    .unwrap_or(bb_d.binary_search_steps),
                inner_steps: bb_s.inner_steps.unwrap_or(bb_d.inner_steps),
                initial_radius: bb_s.initial_radius.unwrap_or(bb_d.initial_radius),
                radius_decays: bb_s.radius_decays.unwrap_or(bb_d.radius_decays),
                decay_factor: bb_s.decay_factor.unwrap_or(bb_d.decay_factor),
                polish: bb_s.polish.unwrap_or(bb_d.polish),
            },
        };
        if attack_cfgs.cw.kappa < 0.0 {
            return Err(Error::Contract("attacks.cw.kappa: must be >= 0".into()));
        }

        let val_fraction = data.val_fraction.unwrap_or(0.1);
        if !(0.0 < val_fraction && val_fraction < 1.0) {
            return Err(Error::Contract(
                "data.val_fraction: must be in (0, 1)".into(),
            ));
        }
        let train_size = data.train_size.unwrap_or(8000);
        let test_size = data.test_size.unwrap_or(2000);
        if train_size == 0 || test_size == 0 {
            return Err(Error::Contract(
                "data.train_size / data.test_size: must be >= 1".into(),
            ));
        }

        let experiment = ExperimentConfig {
            methods,
            rates,
            seeds: (0..seed_count as u64).map(|i| seed_base.wrapping_add(i)).collect(),
            grids,
            subset,
            train: train_cfg,
            attacks: attack_cfgs,
        };
        experiment.validate()?;
        Ok(ResolvedConfig {
            mnist_dir: data.mnist_dir.clone(),
            train_size,
            test_size,
            val_fraction,
            seed_base,
            experiment,
        })
    }

    /// The canonical form: every field written explicitly so two configs
    /// resolving identically emit identical text.
    pub fn canonical(&self) -> Result<String> {
        let r = self.resolve()?;
        let e = &r.experiment;
        let grid = |kind: AttackKind| -> Option<Vec<f64>> {
            e.grids.iter().find(|g| g.kind == kind).map(|g| g.values.clone())
        };
        let full = FileConfig {
            data: Some(DataSection {
                mnist_dir: r.mnist_dir.clone(),
                train_size: Some(r.train_size),
                test_size: Some(r.test_size),
                val_fraction: Some(r.val_fraction),
            }),
            experiment: Some(ExperimentSection {
                methods: Some(e.methods.iter().map(|m| m.label()).collect()),
                rates: Some(e.rates.clone()),
                seeds: Some(e.seeds.len()),
                seed_base: Some(r.seed_base),
                subset: Some(e.subset),
            }),
            train: Some(TrainSection {
                lr0: Some(e.train.lr0),
                max_epochs: Some(e.train.max_epochs),
                patience_epochs: Some(e.train.patience_epochs),
                lr_decay_factor: Some(e.train.lr_decay_factor),
                lr_patience: Some(e.train.lr_patience),
                batch_size: Some(e.train.batch_size),
            }),
            attacks: Some(AttackSection {
                kinds: Some(e.grids.iter().map(|g| g.kind.name().to_string()).collect()),
                pgd: Some(PgdSection {
                    steps: Some(e.attacks.pgd.steps),
                    rel_step: Some(e.attacks.pgd.rel_step),
                    random_start: Some(e.attacks.pgd.random_start),
                }),
                cw: Some(CwSection {
                    binary_search_steps: Some(e.attacks.cw.binary_search_steps),
                    inner_steps: Some(e.attacks.cw.inner_steps),
                    step_size: Some(e.attacks.cw.step_size),
                    initial_c: Some(e.attacks.cw.initial_c),
                    kappa: Some(e.attacks.cw.kappa),
                }),
                bb: Some(BbSection {
                    binary_search_steps: Some(e.attacks.bb.binary_search_steps),
                    inner_steps: Some(e.attacks.bb.inner_steps),
                    initial_radius: Some(e.attacks.bb.initial_radius),
                    radius_decays: Some(e.attacks.bb.radius_decays),
                    decay_factor: Some(e.attacks.bb.decay_factor),
                    polish: Some(e.attacks.bb.polish),
                }),
            }),
            epsilons: Some(EpsilonSection {
                linf: grid(AttackKind::Linf),
                l2: grid(AttackKind::L2),
                l0: grid(AttackKind::L0),
            }),
        };
        toml::to_string(&full).map_err(|e| Error::Format(format!("config serialize error: {}", e)))
    }
}

/// Parse a config file and resolve it, treating a missing `path` as the
/// empty (all-defaults) config only when `path` is None.
pub fn parse_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    match path {
        None => FileConfig::default().resolve(),
        Some(p) => FileConfig::load(p)?.resolve(),
    }
}
