//! Experiment orchestration: epsilon calibration, robust accuracy,
//! retrospective epsilon sweeps, margin tables, and the full
//! prune-finetune-attack sweep with CSV reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{
    bb_l0, cw_l2, oracle_predict, pgd_linf, sample_starting_point, BbConfig, CwConfig,
    GradientOracle, NetworkOracle, PgdConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::build_cnn5;
use crate::pruning::{iterative_prune, PruningMethod};
use crate::training::{train_to_convergence, TrainConfig};

/// Which perturbation norm an attack is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    L0,
    L2,
    Linf,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::L0 => "l0",
            AttackKind::L2 => "l2",
            AttackKind::Linf => "linf",
        }
    }

    pub fn from_name(name: &str) -> Result<AttackKind> {
        match name {
            "l0" => Ok(AttackKind::L0),
            "l2" => Ok(AttackKind::L2),
            "linf" => Ok(AttackKind::Linf),
            other => Err(Error::Contract(format!("unknown attack kind '{}'", other))),
        }
    }

    /// Minimization attacks return a minimal perturbation, so a single run
    /// serves every epsilon; PGD is fixed-budget instead.
    pub fn is_minimization(&self) -> bool {
        !matches!(self, AttackKind::Linf)
    }
}

/// Four ascending attack strengths for one norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonGrid {
    pub kind: AttackKind,
    pub values: Vec<f64>,
}

impl EpsilonGrid {
    pub fn new(kind: AttackKind, values: Vec<f64>) -> Result<EpsilonGrid> {
        if values.is_empty() {
            return Err(Error::Contract("epsilon grid must be non-empty".into()));
        }
        if values[0] < 0.0 || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "epsilon grid must be non-negative and strictly increasing, got {:?}",
                values
            )));
        }
        Ok(EpsilonGrid { kind, values })
    }

    /// Published default grids per norm.
    pub fn table_default(kind: AttackKind) -> EpsilonGrid {
        let values = match kind {
            AttackKind::Linf => vec![0.125 / 255.0, 0.25 / 255.0, 0.5 / 255.0, 1.0 / 255.0],
            AttackKind::L0 => vec![20.0, 70.0, 120.0, 170.0],
            AttackKind::L2 => vec![10.0, 15.0, 20.0, 25.0],
        };
        EpsilonGrid { kind, values }
    }
}

/// Hyperparameters for the three attacks, bundled per experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackConfigs {
    pub pgd: PgdConfig,
    pub cw: CwConfig,
    pub bb: BbConfig,
}

/// Per-sample result of one attack, reduced to what scoring needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub clean_correct: bool,
    /// An adversarial perturbation was found.
    pub found: bool,
    /// Its norm in the attack's metric (meaningful iff `found`).
    pub norm: f64,
}

/// SplitMix64 seed mixing so every cell and sample gets an independent,
/// reproducible stream.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Run a minimization attack (L0 or L2) once per sample; the outcomes can
/// then be scored retrospectively at any epsilon.
///
/// Samples the model already misclassifies are marked clean-wrong without
/// invoking the attack. An L0 sample with no valid starting point in the
/// subset counts as not-found (the attack produced no adversarial).
pub fn attack_outcomes(
    oracle: &dyn GradientOracle,
    kind: AttackKind,
    cfgs: &AttackConfigs,
    subset: &Dataset,
    base_seed: u64,
) -> Result<Vec<SampleOutcome>> {
    if !kind.is_minimization() {
        return Err(Error::Contract(
            "attack_outcomes is defined for minimization attacks (l0, l2) only".into(),
        ));
    }
    if subset.is_empty() {
        return Err(Error::Contract("evaluation subset must be non-empty".into()));
    }
    (0..subset.len())
        .into_par_iter()
        .map(|i| -> Result<SampleOutcome> {
            let x = subset.image(i);
            let y = subset.labels[i];
            if oracle_predict(oracle, &x)? != y {
                return Ok(SampleOutcome {
                    clean_correct: false,
                    found: false,
                    norm: 0.0,
                });
            }
            let seed = derive_seed(base_seed, i as u64);
            let record = match kind {
                AttackKind::L2 => cw_l2(oracle, &x, y, &cfgs.cw, seed)?,
                AttackKind::L0 => match sample_starting_point(subset, y, seed, oracle) {
                    Ok(start) => bb_l0(oracle, &x, y, &start, &cfgs.bb, seed)?,
                    Err(Error::StartingPointNotFound(_)) => {
                        return Ok(SampleOutcome {
                            clean_correct: true,
                            found: false,
                            norm: 0.0,
                        })
                    }
                    Err(e) => return Err(e),
                },
                AttackKind::Linf => unreachable!(),
            };
            let norm = match kind {
                AttackKind::L0 => record.l0 as f64,
                _ => record.l2,
            };
            Ok(SampleOutcome {
                clean_correct: true,
                found: record.success,
                norm,
            })
        })
        .collect()
}

/// Accuracy per epsilon from one minimization run: a sample is robust iff
/// it was clean-correct and either no adversarial was found or its minimal
/// norm exceeds epsilon.
pub fn retrospective_curve(outcomes: &[SampleOutcome], grid: &EpsilonGrid) -> Result<Vec<f64>> {
    if !grid.kind.is_minimization() {
        return Err(Error::Contract(
            "retrospective curves exist for minimization attacks only".into(),
        ));
    }
    if outcomes.is_empty() {
        return Err(Error::Contract("no outcomes to score".into()));
    }
    let n = outcomes.len() as f64;
    Ok(grid
        .values
        .iter()
        .map(|&eps| {
            let robust = outcomes
                .iter()
                .filter(|o| o.clean_correct && (!o.found || o.norm > eps))
                .count();
            robust as f64 / n
        })
        .collect())
}

/// Fraction of the subset the model still classifies correctly after an
/// attack with budget `eps`.
pub fn robust_accuracy(
    oracle: &dyn GradientOracle,
    kind: AttackKind,
    cfgs: &AttackConfigs,
    subset: &Dataset,
    eps: f64,
    base_seed: u64,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Contract("evaluation subset must be non-empty".into()));
    }
    match kind {
        AttackKind::Linf => {
            let robust: usize = (0..subset.len())
                .into_par_iter()
                .map(|i| -> Result<usize> {
                    let x = subset.image(i);
                    let y = subset.labels[i];
                    if oracle_predict(oracle, &x)? != y {
                        return Ok(0);
                    }
                    let cfg = PgdConfig { eps, ..cfgs.pgd.clone() };
                    let rec = pgd_linf(oracle, &x, y, &cfg, derive_seed(base_seed, i as u64))?;
                    Ok(if rec.success { 0 } else { 1 })
                })
                .sum::<Result<usize>>()?;
            Ok(robust as f64 / subset.len() as f64)
        }
        _ => {
            let outcomes = attack_outcomes(oracle, kind, cfgs, subset, base_seed)?;
            let grid = EpsilonGrid::new(kind, vec![eps.max(0.0)])?;
            Ok(retrospective_curve(&outcomes, &grid)?[0])
        }
    }
}

/// Clean accuracy of the oracle on the subset.
pub fn clean_accuracy(oracle: &dyn GradientOracle, subset: &Dataset) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Contract("evaluation subset must be non-empty".into()));
    }
    let correct: usize = (0..subset.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            Ok((oracle_predict(oracle, &subset.image(i))? == subset.labels[i]) as usize)
        })
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / subset.len() as f64)
}

/// Choose four ascending attack strengths such that the accuracy drop at
/// the first is at most 1 percentage point and the last fools more than
/// half of the subset; the middle two are geometrically spaced. Falls back
/// to the published defaults when the search produces a degenerate grid.
pub fn calibrate_epsilons(
    oracle: &dyn GradientOracle,
    kind: AttackKind,
    cfgs: &AttackConfigs,
    subset: &Dataset,
    base_seed: u64,
) -> Result<EpsilonGrid> {
    if subset.is_empty() {
        return Err(Error::Contract("calibration subset must be non-empty".into()));
    }
    let n = subset.len();
    let endpoints = match kind {
        AttackKind::Linf => {
            // walk a doubling ladder of budgets up to the box diameter
            let mut eps1 = None;
            let mut eps4 = None;
            let clean = clean_accuracy(oracle, subset)?;
            let mut eps = 0.125 / 255.0;
            while eps <= 1.0 + 1e-12 {
                let acc = robust_accuracy(oracle, kind, cfgs, subset, eps, base_seed)?;
                if clean - acc <= 0.01 {
                    eps1 = Some(eps);
                }
                if 1.0 - acc > 0.5 {
                    eps4 = Some(eps);
                    break;
                }
                eps *= 2.0;
            }
            let eps4 = eps4.ok_or_else(|| {
                Error::Calibration(format!(
                    "PGD cannot fool more than 50% of {} samples within the box", n
                ))
            })?;
            Some((eps1.unwrap_or(eps4 / 8.0), eps4))
        }
        _ => {
            let outcomes = attack_outcomes(oracle, kind, cfgs, subset, base_seed)?;
            let clean_wrong = outcomes.iter().filter(|o| !o.clean_correct).count();
            let mut norms: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.clean_correct && o.found)
                .map(|o| o.norm)
                .collect();
            norms.sort_by(f64::total_cmp);
            // fooled(eps) = clean_wrong + #{norm <= eps}; need > n/2
            let needed = (n as f64 / 2.0 - clean_wrong as f64).floor() as i64 + 1;
            if needed > norms.len() as i64 {
                return Err(Error::Calibration(format!(
                    "attack fooled only {} of {} samples at unlimited budget",
                    clean_wrong + norms.len(),
                    n
                )));
            }
            let eps4 = if needed <= 0 { norms.first().copied().unwrap_or(0.0) } else {
                norms[needed as usize - 1]
            };
            // largest eps fooling at most 1% of the subset
            let allowed = (0.01 * n as f64).floor() as usize;
            let eps1 = if norms.is_empty() {
                None
            } else if allowed >= norms.len() {
                Some(norms[norms.len() - 1])
            } else if allowed == 0 {
                Some(match kind {
                    AttackKind::L0 => norms[0] - 1.0,
                    _ => 0.5 * norms[0],
                })
            } else {
                Some(match kind {
                    AttackKind::L0 => norms[allowed] - 1.0,
                    _ => 0.5 * (norms[allowed - 1] + norms[allowed]),
                })
            };
            eps1.map(|e| (e, eps4))
        }
    };

    let grid = endpoints.and_then(|(eps1, eps4)| {
        if !(eps1 > 0.0 && eps4 > eps1) {
            return None;
        }
        let ratio = eps4 / eps1;
        let mut values: Vec<f64> = (0..4).map(|i| eps1 * ratio.powf(i as f64 / 3.0)).collect();
        if kind == AttackKind::L0 {
            for v in values.iter_mut() {
                *v = v.round();
            }
        }
        EpsilonGrid::new(kind, values).ok()
    });
    Ok(grid.unwrap_or_else(|| EpsilonGrid::table_default(kind)))
}

/// One cell with its absolute value and margin against the rate-1 column.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginCell {
    pub rate: usize,
    pub value: f64,
    /// None for the baseline column itself.
    pub margin: Option<f64>,
    pub increase: bool,
}

impl MarginCell {
    /// "86.21 (0.64)" style rendering; increases are starred.
    pub fn render(&self) -> String {
        match self.margin {
            None => format!("{:.2}", self.value),
            Some(m) => format!(
                "{:.2} ({:.2}){}",
                self.value,
                m,
                if self.increase { "*" } else { "" }
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginTable {
    pub rates: Vec<usize>,
    pub rows: Vec<(String, Vec<MarginCell>)>,
}

impl MarginTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,rate,value,margin,increase\n");
        for (label, cells) in &self.rows {
            for cell in cells {
                let margin = cell
                    .margin
                    .map(|m| format!("{:.2}", m))
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{:.2},{},{}",
                    label, cell.rate, cell.value, margin, cell.increase
                );
            }
        }
        out
    }
}

/// Build the margins table: margin = value(rate) - value(rate 1) in the
/// units the values are given in (accuracy percentage points); increases
/// over the baseline are flagged.
pub fn margin_table(rates: &[usize], rows: &[(String, Vec<f64>)]) -> Result<MarginTable> {
    let base_idx = rates
        .iter()
        .position(|&r| r == 1)
        .ok_or_else(|| Error::Contract("margin table requires the rate-1 baseline column".into()))?;
    let mut table = MarginTable {
        rates: rates.to_vec(),
        rows: Vec::with_capacity(rows.len()),
    };
    for (label, values) in rows {
        if values.len() != rates.len() {
            return Err(Error::Contract(format!(
                "row '{}' has {} values for {} rates",
                label,
                values.len(),
                rates.len()
            )));
        }
        let baseline = values[base_idx];
        let cells = rates
            .iter()
            .zip(values)
            .map(|(&rate, &value)| MarginCell {
                rate,
                value,
                margin: (rate != 1).then(|| value - baseline),
                increase: rate != 1 && value > baseline,
            })
            .collect();
        table.rows.push((label.clone(), cells));
    }
    Ok(table)
}

/// One CSV row of the robustness report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: PruningMethod,
    pub rate: usize,
    /// None marks a seed-averaged row.
    pub seed: Option<u64>,
    /// "none" for clean rows, else the attack kind name.
    pub attack: String,
    pub epsilon: f64,
    /// "clean_acc" or "robust_acc".
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
}

impl ReportRow {
    fn sort_key(&self) -> (String, usize, String, String, u64, String) {
        (
            self.method.label(),
            self.rate,
            match self.seed {
                Some(s) => format!("a{:020}", s),
                None => "mean".to_string(),
            },
            self.attack.clone(),
            self.epsilon.to_bits(),
            self.metric.clone(),
        )
    }

    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{},{:.6},{}",
            self.method.structure_name(),
            self.method.criterion_name(),
            self.method.scope_name(),
            self.rate,
            match self.seed {
                Some(s) => s.to_string(),
                None => "mean".to_string(),
            },
            self.attack,
            self.epsilon,
            self.metric,
            self.value,
            self.n_samples
        )
    }

    fn from_csv_line(line: &str) -> Result<ReportRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!("bad report row '{}'", line)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad float '{}'", s)))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad integer '{}'", s)))
        };
        let method = PruningMethod::all()
            .into_iter()
            .find(|m| {
                m.structure_name() == fields[0]
                    && m.criterion_name() == fields[1]
                    && m.scope_name() == fields[2]
            })
            .ok_or_else(|| Error::Format(format!("unknown method in row '{}'", line)))?;
        Ok(ReportRow {
            method,
            rate: parse_u(fields[3])?,
            seed: if fields[4] == "mean" {
                None
            } else {
                Some(
                    fields[4]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad seed '{}'", fields[4])))?,
                )
            },
            attack: fields[5].to_string(),
            epsilon: parse_f(fields[6])?,
            metric: fields[7].to_string(),
            value: parse_f(fields[8])?,
            n_samples: parse_u(fields[9])?,
        })
    }
}

pub const REPORT_HEADER: &str =
    "method_structure,criterion,scope,rate,seed,attack,epsilon,metric,value,n_samples";

/// Accuracy values for every (method, rate, seed, attack, epsilon) cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<ReportRow>,
    /// Human-readable descriptions of cells that failed.
    pub failures: Vec<String>,
}

impl RobustnessReport {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| r.sort_key());
    }

    pub fn to_csv(&self) -> String {
        let mut sorted = self.clone();
        sorted.sort();
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for row in &sorted.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RobustnessReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != REPORT_HEADER {
                    return Err(Error::Format("missing report header".into()));
                }
                continue;
            }
            if !line.is_empty() {
                rows.push(ReportRow::from_csv_line(line)?);
            }
        }
        Ok(RobustnessReport {
            rows,
            failures: Vec::new(),
        })
    }

    /// Check report-wide invariants: unique keys, robust <= clean, and
    /// exact monotonicity in epsilon for minimization attacks.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for row in &self.rows {
            let key = (
                row.method.label(),
                row.rate,
                row.seed,
                row.attack.clone(),
                row.epsilon.to_bits(),
                row.metric.clone(),
            );
            if !seen.insert(key) {
                return Err(Error::Contract(format!(
                    "duplicate report cell: {}",
                    row.to_csv_line()
                )));
            }
        }
        // group robust rows with their clean row
        for row in &self.rows {
            if row.metric != "robust_acc" {
                continue;
            }
            let clean = self.rows.iter().find(|r| {
                r.metric == "clean_acc"
                    && r.method == row.method
                    && r.rate == row.rate
                    && r.seed == row.seed
            });
            if let Some(clean) = clean {
                if row.value > clean.value + 1e-9 {
                    return Err(Error::Contract(format!(
                        "robust accuracy above clean accuracy: {}",
                        row.to_csv_line()
                    )));
                }
            }
        }
        // monotonicity per minimization-attack curve
        let mut curves: BTreeMap<(String, usize, Option<u64>, String), Vec<(f64, f64)>> =
            BTreeMap::new();
        for row in &self.rows {
            if row.metric == "robust_acc"
                && AttackKind::from_name(&row.attack).is_ok_and(|k| k.is_minimization())
            {
                curves
                    .entry((row.method.label(), row.rate, row.seed, row.attack.clone()))
                    .or_default()
                    .push((row.epsilon, row.value));
            }
        }
        for (key, mut curve) in curves {
            curve.sort_by(|a, b| a.0.total_cmp(&b.0));
            if curve.windows(2).any(|w| w[1].1 > w[0].1) {
                return Err(Error::Contract(format!(
                    "non-monotone retrospective curve at {:?}",
                    key
                )));
            }
        }
        Ok(())
    }

    /// Append seed-averaged rows (seed column "mean") for every cell that
    /// appears under more than one seed.
    pub fn append_seed_means(&mut self) {
        let mut groups: BTreeMap<_, Vec<&ReportRow>> = BTreeMap::new();
        for row in self.rows.iter().filter(|r| r.seed.is_some()) {
            groups
                .entry((
                    row.method.label(),
                    row.rate,
                    row.attack.clone(),
                    row.epsilon.to_bits(),
                    row.metric.clone(),
                ))
                .or_default()
                .push(row);
        }
        let mut means = Vec::new();
        for rows in groups.values() {
            if rows.len() < 2 {
                continue;
            }
            let mean = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
            let mut row = rows[0].clone();
            row.seed = None;
            row.value = mean;
            means.push(row);
        }
        self.rows.extend(means);
    }
}

/// Full sweep configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<PruningMethod>,
    /// Target compression rates, ascending powers of two (rate 1 is always
    /// recorded implicitly).
    pub rates: Vec<usize>,
    pub seeds: Vec<u64>,
    pub grids: Vec<EpsilonGrid>,
    /// Evaluation subset size drawn from the test set.
    pub subset: usize,
    pub train: TrainConfig,
    pub attacks: AttackConfigs,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Contract("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Contract("at least one pruning method is required".into()));
        }
        if self.subset == 0 {
            return Err(Error::Contract("evaluation subset must be non-empty".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        for (i, g) in self.grids.iter().enumerate() {
            EpsilonGrid::new(g.kind, g.values.clone())?;
            if self.grids[..i].iter().any(|h| h.kind == g.kind) {
                return Err(Error::Contract(format!(
                    "duplicate epsilon grid for attack '{}'",
                    g.kind.name()
                )));
            }
        }
        self.train.validate()
    }
}

/// Train/validation/test datasets for one experiment.
pub struct ExperimentData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

const EVAL_SHUFFLE_SEED: u64 = 0x00e5_a175;

/// The evaluation subset: first `n` test images under a fixed shuffle.
pub fn evaluation_subset(test: &Dataset, n: usize) -> Result<Dataset> {
    if n > test.len() {
        return Err(Error::Contract(format!(
            "evaluation subset {} exceeds test-set size {}",
            n,
            test.len()
        )));
    }
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(EVAL_SHUFFLE_SEED));
    idx.truncate(n);
    Ok(test.gather(&idx))
}

fn cell_path(out: &Path, seed: u64, method: &PruningMethod, rate: usize, attack: &str)
    -> std::path::PathBuf {
    out.join("cells")
        .join(format!("{}_{}_{}_{}.csv", seed, method.label(), rate, attack))
}

/// Evaluate one (model, attack-or-clean) cell, using a cached artifact
/// when resuming.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    oracle: &NetworkOracle,
    subset: &Dataset,
    cfg: &ExperimentConfig,
    method: &PruningMethod,
    rate: usize,
    seed: u64,
    grid: Option<&EpsilonGrid>,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<Vec<ReportRow>> {
    let attack_name = grid.map_or("clean", |g| g.kind.name());
    if let (Some(out), true) = (out_dir, resume) {
        let path = cell_path(out, seed, method, rate, attack_name);
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut rows = Vec::new();
            for line in text.lines().filter(|l| !l.is_empty()) {
                rows.push(ReportRow::from_csv_line(line)?);
            }
            return Ok(rows);
        }
    }

    let cell_seed = derive_seed(
        derive_seed(seed, rate as u64),
        derive_seed(
            method.label().bytes().map(u64::from).sum(),
            attack_name.bytes().map(u64::from).sum(),
        ),
    );
    let rows = match grid {
        None => vec![ReportRow {
            method: *method,
            rate,
            seed: Some(seed),
            attack: "none".into(),
            epsilon: 0.0,
            metric: "clean_acc".into(),
            value: clean_accuracy(oracle, subset)?,
            n_samples: subset.len(),
        }],
        Some(grid) => {
            let accuracies: Vec<f64> = if grid.kind.is_minimization() {
                let outcomes =
                    attack_outcomes(oracle, grid.kind, &cfg.attacks, subset, cell_seed)?;
                retrospective_curve(&outcomes, grid)?
            } else {
                grid.values
                    .iter()
                    .enumerate()
                    .map(|(j, &eps)| {
                        robust_accuracy(
                            oracle,
                            grid.kind,
                            &cfg.attacks,
                            subset,
                            eps,
                            derive_seed(cell_seed, j as u64),
                        )
                    })
                    .collect::<Result<_>>()?
            };
            grid.values
                .iter()
                .zip(accuracies)
                .map(|(&eps, acc)| ReportRow {
                    method: *method,
                    rate,
                    seed: Some(seed),
                    attack: grid.kind.name().into(),
                    epsilon: eps,
                    metric: "robust_acc".into(),
                    value: acc,
                    n_samples: subset.len(),
                })
                .collect()
        }
    };

    if let Some(out) = out_dir {
        let path = cell_path(out, seed, method, rate, attack_name);
        std::fs::create_dir_all(path.parent().expect("cell path has parent"))?;
        let mut text = String::new();
        for row in &rows {
            text.push_str(&row.to_csv_line());
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    Ok(rows)
}

/// The full sweep: per seed, train the dense model once, then for each
/// pruning method iterate the rate schedule with prune -> fine-tune ->
/// evaluate. Attacks always target the exact pruned model being scored.
/// Failures are isolated per cell and collected in the report.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<RobustnessReport> {
    cfg.validate()?;
    let subset = evaluation_subset(data.test, cfg.subset)?;
    if let Some(out) = out_dir {
        std::fs::create_dir_all(out)?;
    }

    let (h, w, c) = data.train.sample_shape();
    let mut report = RobustnessReport::default();

    for &seed in &cfg.seeds {
        // the dense (rate-1) model is method-independent: every method
        // starts from all-ones masks, so train it once per seed
        let mut dense = build_cnn5((h, w, c), data.train.class_count, derive_seed(seed, 0))?;
        train_to_convergence(&mut dense, data.train, data.val, &cfg.train, derive_seed(seed, 1))?;

        for method in &cfg.methods {
            let mut evaluate_model = |rate: usize, model: &crate::model::MaskedNetwork| {
                let oracle = NetworkOracle::new(model);
                let mut cells: Vec<Option<&EpsilonGrid>> = vec![None];
                cells.extend(cfg.grids.iter().map(Some));
                for grid in cells {
                    match run_cell(
                        &oracle, &subset, cfg, method, rate, seed, grid, out_dir, resume,
                    ) {
                        Ok(rows) => report.rows.extend(rows),
                        Err(e) => report.failures.push(format!(
                            "seed {} method {} rate {} attack {}: {}",
                            seed,
                            method.label(),
                            rate,
                            grid.map_or("clean", |g| g.kind.name()),
                            e
                        )),
                    }
                }
            };

            evaluate_model(1, &dense);

            if cfg.rates.is_empty() {
                continue;
            }
            let mut net = dense.clone();
            let mut finetune_step = 0u64;
            let method_seed = derive_seed(seed, derive_seed(2, method.label().len() as u64));
            let train_cfg = cfg.train.clone();
            let checkpoints = {
                let mut trainer = |n: &mut crate::model::MaskedNetwork| {
                    finetune_step += 1;
                    train_to_convergence(
                        n,
                        data.train,
                        data.val,
                        &train_cfg,
                        derive_seed(method_seed, finetune_step),
                    )
                    .map(|_| ())
                };
                iterative_prune(&mut net, method, &cfg.rates, &mut trainer, method_seed)
            };
            match checkpoints {
                Ok(checkpoints) => {
                    for (rate, model) in &checkpoints {
                        if let Some(out) = out_dir {
                            let dir = out.join("checkpoints");
                            std::fs::create_dir_all(&dir)?;
                            model.save_checkpoint(&dir.join(format!(
                                "{}_{}_{}.ckpt",
                                seed,
                                method.label(),
                                rate
                            )))?;
                        }
                        evaluate_model(*rate, model);
                    }
                }
                Err(e) => report.failures.push(format!(
                    "seed {} method {}: pruning schedule failed: {}",
                    seed,
                    method.label(),
                    e
                )),
            }
        }
    }

    report.append_seed_means();
    report.sort();
    if let Some(out) = out_dir {
        std::fs::write(out.join("report.csv"), report.to_csv())?;
    }
    Ok(report)
}
