//! Experiment orchestration: k-fold cross-validation over seeds, the
//! strategy matrix, training schedules, evaluation and table assembly.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{majority_vote, staple, train_local_once, ube_fuse, LocalClient, StapleConfig, UbeConfig};
use crate::error::{Error, Result};
use crate::federation::{compute_rounds, run_federated, size_weights, FlClient, FlConfig, FlStrategy};
use crate::metrics::{
    dsc, nsd, pooled_dsc, robustness_delta, utility_report, CaseRecord, CostLedger, ResultsTable, RobustnessTable,
    Traffic, UtilityReport,
};
use crate::numcore::{OptimizerSpec, Rng};
use crate::privacy::{budget_sweep, DpConfig, DpTrainSpec, SweepPoint, SweepSetup};
use crate::scenario::{preprocess, ClientDataset, PreprocessSpec, Sample, ScenarioSpec};
use crate::segmodel::{Architecture, SegModel, DEFAULT_THRESHOLD};
use crate::training::{train_steps, TrainSpec};
use crate::volume::MaskVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "ube")]
    Ube,
    #[serde(rename = "staple")]
    Staple,
    #[serde(rename = "mv")]
    Mv,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Local,
        StrategyKind::Centralized,
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::Ube,
        StrategyKind::Staple,
        StrategyKind::Mv,
    ];

    /// Column name; local models are named per client instead.
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Local => "Local",
            StrategyKind::Centralized => "Centralized",
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::Ube => "UBE",
            StrategyKind::Staple => "STAPLE",
            StrategyKind::Mv => "MV",
        }
    }

    pub fn is_consensus(&self) -> bool {
        matches!(self, StrategyKind::Ube | StrategyKind::Staple | StrategyKind::Mv)
    }

    pub fn is_federated(&self) -> bool {
        matches!(self, StrategyKind::FedAvg | StrategyKind::FedProx)
    }
}

/// Strategy name of a client's local model.
pub fn local_name(client: &str) -> String {
    format!("Local-{client}")
}

/// Training hyperparameters shared by every strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Local steps per federated round.
    pub local_steps: u64,
    /// Gradient steps of one local training run.
    pub k_steps: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 8, dropout: 0.3, local_steps: 20, k_steps: 450 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.local_steps == 0 || self.k_steps == 0 {
            return Err(Error::config("batch size, local steps and k_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Candidate values explored by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub dropout: Vec<f64>,
    pub local_steps: Vec<u64>,
    pub k_steps: Vec<u64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            learning_rate: vec![1e-4, 1e-3, 1e-2, 0.1, 1.0],
            batch_size: vec![4, 8, 16],
            dropout: vec![0.1, 0.3, 0.5],
            local_steps: vec![10, 15, 20, 25],
            k_steps: vec![300, 400, 450, 500],
        }
    }
}

impl HyperGrid {
    pub fn single(h: Hyper) -> Self {
        Self {
            learning_rate: vec![h.learning_rate],
            batch_size: vec![h.batch_size],
            dropout: vec![h.dropout],
            local_steps: vec![h.local_steps],
            k_steps: vec![h.k_steps],
        }
    }

    pub fn points(&self) -> Vec<Hyper> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &batch_size in &self.batch_size {
                for &dropout in &self.dropout {
                    for &local_steps in &self.local_steps {
                        for &k_steps in &self.k_steps {
                            out.push(Hyper { learning_rate, batch_size, dropout, local_steps, k_steps });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Everything needed to run one experiment besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub scenario: ScenarioSpec,
    pub strategies: Vec<StrategyKind>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub hyper: Hyper,
    pub fedprox_mu: f64,
    pub patch_radius: usize,
    pub hidden: usize,
    pub bias_correction: Option<usize>,
    pub flip: bool,
    pub ube: UbeConfig,
    pub staple: StapleConfig,
    pub nsd_tau: f64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Training center left out of every training strategy.
    pub exclude: Option<String>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            strategies: StrategyKind::ALL.to_vec(),
            folds: 5,
            seeds: vec![0, 1, 2, 3, 4],
            hyper: Hyper::default(),
            fedprox_mu: 0.01,
            patch_radius: 2,
            hidden: 16,
            bias_correction: Some(6),
            flip: true,
            ube: UbeConfig::default(),
            staple: StapleConfig::default(),
            nsd_tau: 1.0,
            workers: 0,
            exclude: None,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.folds < 2 {
            return Err(Error::config(format!("fold count must be >= 2, got {}", self.folds)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("plan needs at least one seed"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("plan needs at least one strategy"));
        }
        let unique: BTreeSet<_> = self.strategies.iter().collect();
        if unique.len() != self.strategies.len() {
            return Err(Error::config("duplicate strategy in plan"));
        }
        self.hyper.validate()?;
        self.architecture().validate()?;
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return Err(Error::config("FedProx mu must be >= 0"));
        }
        if !(self.nsd_tau >= 0.0 && self.nsd_tau.is_finite()) {
            return Err(Error::config("NSD tolerance must be >= 0"));
        }
        if let Some(ex) = &self.exclude {
            match self.scenario.profiles.iter().find(|p| &p.id == ex) {
                None => return Err(Error::config(format!("excluded center {ex} is not in the scenario"))),
                Some(p) if !p.is_training() => {
                    return Err(Error::config(format!("excluded center {ex} is test-only")));
                }
                Some(_) => {}
            }
            if self.scenario.profiles.iter().filter(|p| p.is_training()).count() < 2 {
                return Err(Error::config("leave-one-out needs at least two training centers"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            patch_radius: self.patch_radius,
            hidden: self.hidden,
            dropout: self.hyper.dropout,
            volumetric: !self.scenario.shape.is_2d(),
        }
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec { target: self.scenario.shape, bias_correction: self.bias_correction, flip: self.flip }
    }

    /// Training center ids in scenario order, minus the excluded one.
    pub fn training_centers(&self) -> Vec<String> {
        self.scenario
            .profiles
            .iter()
            .filter(|p| p.is_training() && Some(&p.id) != self.exclude.as_ref())
            .map(|p| p.id.clone())
            .collect()
    }

    /// Column order: one local model per training client, then the shared
    /// strategies in plan order.
    pub fn strategy_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.strategies {
            if *s == StrategyKind::Local {
                out.extend(self.training_centers().iter().map(|c| local_name(c)));
            } else {
                out.push(s.name().to_string());
            }
        }
        out
    }
}

/// Fold of the `k`-th sample of a center.
pub fn fold_of(k: usize, folds: usize) -> usize {
    k % folds
}

/// Step budgets derived from the local schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    /// `E`: mean over clients of the epochs covered by `K` local steps,
    /// rounded to the nearest whole epoch.
    pub epochs: u64,
    pub rounds: u64,
    pub local_steps: u64,
    pub centralized_steps: u64,
}

impl Schedule {
    pub fn derive(train_sizes: &[usize], hyper: &Hyper) -> Result<Self> {
        if train_sizes.is_empty() || train_sizes.contains(&0) {
            return Err(Error::config("every training client needs samples"));
        }
        let b = hyper.batch_size as f64;
        let mean_epochs =
            train_sizes.iter().map(|&n| hyper.k_steps as f64 * b / n as f64).sum::<f64>() / train_sizes.len() as f64;
        let epochs = (mean_epochs.round() as u64).max(1);
        let total: usize = train_sizes.iter().sum();
        let rounds = compute_rounds(epochs, total as u64, train_sizes.len() as u64, hyper.batch_size as u64, hyper.local_steps)?;
        let centralized_steps = (epochs * total as u64).div_ceil(hyper.batch_size as u64).max(1);
        Ok(Self { epochs, rounds, local_steps: hyper.k_steps, centralized_steps })
    }
}

/// A strategy that could not be completed in one (seed, fold) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellError {
    pub seed: u64,
    pub fold: usize,
    pub strategy: String,
    pub message: String,
}

pub fn write_errors<W: Write>(errors: &[CellError], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "fold", "strategy", "message"])?;
    for e in errors {
        w.write_record([e.seed.to_string(), e.fold.to_string(), e.strategy.clone(), e.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub strategy: String,
    pub train_seconds: f64,
    pub infer_seconds_per_case: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct CellOutput {
    records: Vec<CaseRecord>,
    errors: Vec<CellError>,
    timings: Vec<Timing>,
    rounds: u64,
}

/// Test cases of one cell, grouped by test set.
struct TestSet {
    center: String,
    cases: Vec<(usize, Sample)>,
}

struct CellData {
    /// Training clients in order: id and preprocessed, flipped samples.
    train: Vec<(String, Vec<Sample>)>,
    tests: Vec<TestSet>,
}

fn prepare_cell(plan: &ExperimentPlan, datasets: &[ClientDataset], fold: usize, root: &Rng) -> Result<CellData> {
    let spec = plan.preprocess_spec();
    let eval_spec = PreprocessSpec { flip: false, ..spec };
    let training = plan.training_centers();
    let mut train = Vec::new();
    let mut tests = Vec::new();
    for (ci, ds) in datasets.iter().enumerate() {
        let mut flips = root.fork(10).fork(ci as u64);
        let mut cases = Vec::new();
        let mut own = Vec::new();
        if ds.is_test_only() {
            for (k, s) in ds.test.iter().enumerate() {
                cases.push((k, preprocess(s, &eval_spec, None)?.0));
            }
        } else {
            for (k, s) in ds.train.iter().enumerate() {
                if fold_of(k, plan.folds) == fold {
                    cases.push((k, preprocess(s, &eval_spec, None)?.0));
                } else {
                    own.push(preprocess(s, &spec, Some(&mut flips))?.0);
                }
            }
        }
        if training.contains(&ds.center_id) {
            train.push((ds.center_id.clone(), own));
        }
        if !cases.is_empty() {
            tests.push(TestSet { center: ds.center_id.clone(), cases });
        }
    }
    Ok(CellData { train, tests })
}

fn check_datasets(plan: &ExperimentPlan, datasets: &[ClientDataset]) -> Result<()> {
    let ids: Vec<&String> = datasets.iter().map(|d| &d.center_id).collect();
    let expect: Vec<&String> = plan.scenario.profiles.iter().map(|p| &p.id).collect();
    if ids != expect {
        return Err(Error::config(format!("datasets {ids:?} do not match scenario centers {expect:?}")));
    }
    for (d, p) in datasets.iter().zip(&plan.scenario.profiles) {
        if d.is_test_only() == p.is_training() {
            return Err(Error::config(format!("dataset {} role does not match its profile", d.center_id)));
        }
    }
    Ok(())
}

/// Produces a mask per test case for one trained strategy.
enum Predictor<'a> {
    Single(&'a SegModel),
    Mv(&'a [SegModel]),
    Staple(&'a [SegModel], StapleConfig),
    Ube(&'a [SegModel], UbeConfig, Rng),
}

impl Predictor<'_> {
    fn predict(&self, image: &crate::volume::ImageVolume, case_key: u64) -> Result<MaskVolume> {
        let masks = |models: &[SegModel]| {
            models.iter().map(|m| m.predict_mask(image, DEFAULT_THRESHOLD)).collect::<Result<Vec<_>>>()
        };
        match self {
            Predictor::Single(m) => m.predict_mask(image, DEFAULT_THRESHOLD),
            Predictor::Mv(models) => majority_vote(&masks(models)?),
            Predictor::Staple(models, cfg) => Ok(staple(&masks(models)?, cfg)?.0),
            Predictor::Ube(models, cfg, rng) => Ok(ube_fuse(models, image, cfg, &rng.fork(case_key))?.mask),
        }
    }
}

fn evaluate(
    plan: &ExperimentPlan,
    seed: u64,
    fold: usize,
    strategy: &str,
    predictor: &Predictor<'_>,
    tests: &[TestSet],
) -> Result<(Vec<CaseRecord>, f64)> {
    let t0 = Instant::now();
    let mut out = Vec::new();
    for (ti, set) in tests.iter().enumerate() {
        for (k, (image, truth)) in &set.cases {
            let pred = predictor.predict(image, ((ti as u64) << 32) | *k as u64)?;
            out.push(CaseRecord {
                seed,
                fold,
                strategy: strategy.to_string(),
                center: set.center.clone(),
                case_id: *k,
                dsc: dsc(&pred, truth)?,
                nsd: nsd(&pred, truth, plan.nsd_tau)?,
            });
        }
    }
    let per_case = t0.elapsed().as_secs_f64() / out.len().max(1) as f64;
    Ok((out, per_case))
}

fn run_cell(plan: &ExperimentPlan, datasets: &[ClientDataset], seed: u64, fold: usize) -> Result<CellOutput> {
    let root = Rng::new(seed, 1).fork(fold as u64);
    let data = prepare_cell(plan, datasets, fold, &root)?;
    let arch = plan.architecture();
    let initial = SegModel::init(arch, &mut root.fork(20))?;
    let optimizer = OptimizerSpec::adamw(plan.hyper.learning_rate);
    let spec = TrainSpec { optimizer, batch_size: plan.hyper.batch_size };
    let sizes: Vec<usize> = data.train.iter().map(|(_, d)| d.len()).collect();
    let schedule = Schedule::derive(&sizes, &plan.hyper)?;
    let mut out = CellOutput { records: Vec::new(), errors: Vec::new(), timings: Vec::new(), rounds: schedule.rounds };
    let fail = |out: &mut CellOutput, strategy: &str, e: Error| {
        warn!("seed {seed} fold {fold} {strategy}: {e}");
        out.errors.push(CellError { seed, fold, strategy: strategy.to_string(), message: e.to_string() });
    };
    let finish = |out: &mut CellOutput, name: &str, train_seconds: f64, predictor: Predictor<'_>| {
        match evaluate(plan, seed, fold, name, &predictor, &data.tests) {
            Ok((records, infer)) => {
                out.records.extend(records);
                out.timings.push(Timing { strategy: name.to_string(), train_seconds, infer_seconds_per_case: infer });
            }
            Err(e) => fail(out, name, e),
        }
    };

    let needs_local = plan.strategies.iter().any(|s| *s == StrategyKind::Local || s.is_consensus());
    let mut locals: Option<(Vec<SegModel>, f64)> = None;
    let mut local_error: Option<String> = None;
    if needs_local {
        let clients: Vec<LocalClient<'_>> = data
            .train
            .iter()
            .enumerate()
            .map(|(i, (id, d))| LocalClient { id, data: d, rng: root.fork(100 + i as u64) })
            .collect();
        let t0 = Instant::now();
        match train_local_once(&clients, &initial, &spec, schedule.local_steps) {
            Ok((models, _)) => locals = Some((models, t0.elapsed().as_secs_f64())),
            Err(e) => local_error = Some(e.to_string()),
        }
    }
    let fl_clients = || -> Vec<FlClient> {
        data.train
            .iter()
            .enumerate()
            .map(|(i, (id, d))| FlClient::new(id.clone(), d.clone(), root.fork(200 + i as u64)))
            .collect()
    };

    for kind in &plan.strategies {
        let kind = *kind;
        match kind {
            StrategyKind::Local => match &locals {
                Some((models, secs)) => {
                    for ((id, _), m) in data.train.iter().zip(models) {
                        finish(&mut out, &local_name(id), secs / models.len() as f64, Predictor::Single(m));
                    }
                }
                None => {
                    for (id, _) in &data.train {
                        let msg = local_error.clone().unwrap_or_default();
                        fail(&mut out, &local_name(id), Error::Protocol(msg));
                    }
                }
            },
            StrategyKind::Centralized => {
                let pooled: Vec<Sample> = data.train.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
                let t0 = Instant::now();
                match train_steps(&initial, &pooled, &spec, schedule.centralized_steps, &root.fork(30), None) {
                    Ok((m, _)) => finish(&mut out, kind.name(), t0.elapsed().as_secs_f64(), Predictor::Single(&m)),
                    Err(e) => fail(&mut out, kind.name(), e),
                }
            }
            StrategyKind::FedAvg | StrategyKind::FedProx => {
                let strategy = match kind {
                    StrategyKind::FedAvg => FlStrategy::FedAvg,
                    _ => FlStrategy::FedProx { mu: plan.fedprox_mu },
                };
                let result = size_weights(&sizes).and_then(|weights| {
                    let config = FlConfig {
                        strategy,
                        local_steps: plan.hyper.local_steps,
                        batch_size: plan.hyper.batch_size,
                        rounds: schedule.rounds,
                        weights,
                        optimizer,
                    };
                    let t0 = Instant::now();
                    run_federated(&fl_clients(), &initial, &config).map(|(m, _)| (m, t0.elapsed().as_secs_f64()))
                });
                match result {
                    Ok((m, secs)) => finish(&mut out, kind.name(), secs, Predictor::Single(&m)),
                    Err(e) => fail(&mut out, kind.name(), e),
                }
            }
            StrategyKind::Ube | StrategyKind::Staple | StrategyKind::Mv => {
                let Some((models, secs)) = &locals else {
                    let msg = local_error.clone().unwrap_or_default();
                    fail(&mut out, kind.name(), Error::Protocol(msg));
                    continue;
                };
                let predictor = match kind {
                    StrategyKind::Ube => Predictor::Ube(models, plan.ube, root.fork(40)),
                    StrategyKind::Staple => Predictor::Staple(models, plan.staple),
                    _ => Predictor::Mv(models),
                };
                finish(&mut out, kind.name(), *secs, predictor);
            }
        }
    }
    Ok(out)
}

/// Everything a plan run produces. Tables are views of `records`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub records: Vec<CaseRecord>,
    pub errors: Vec<CellError>,
    pub strategies: Vec<String>,
    pub test_sets: Vec<String>,
    pub table: ResultsTable,
    pub cost: CostLedger,
    pub utility: UtilityReport,
    /// Number of (seed, fold) cells attempted.
    pub cells: usize,
}

impl PlanOutput {
    /// True when no cell produced a single record.
    pub fn all_failed(&self) -> bool {
        self.records.is_empty()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build().map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Runs every (seed, fold) cell and assembles the tables. A failing strategy
/// in one cell becomes an error row; the rest of the matrix still runs.
pub fn run_plan(plan: &ExperimentPlan, datasets: &[ClientDataset]) -> Result<PlanOutput> {
    plan.validate()?;
    check_datasets(plan, datasets)?;
    let cells: Vec<(u64, usize)> = plan.seeds.iter().flat_map(|&s| (0..plan.folds).map(move |f| (s, f))).collect();
    let results: Vec<(u64, usize, Result<CellOutput>)> = pool(plan.workers)?.install(|| {
        cells
            .par_iter()
            .map(|&(seed, fold)| {
                info!("cell seed {seed} fold {fold}");
                (seed, fold, run_cell(plan, datasets, seed, fold))
            })
            .collect()
    });
    let strategies = plan.strategy_names();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut timings: Vec<Timing> = Vec::new();
    let mut rounds = None;
    for (seed, fold, r) in results {
        match r {
            Ok(c) => {
                records.extend(c.records);
                errors.extend(c.errors);
                timings.extend(c.timings);
                rounds.get_or_insert(c.rounds);
            }
            Err(e) => {
                for s in &strategies {
                    errors.push(CellError { seed, fold, strategy: s.clone(), message: e.to_string() });
                }
            }
        }
    }
    let test_sets: Vec<String> = plan.scenario.profiles.iter().map(|p| p.id.clone()).collect();
    let table = ResultsTable::from_records(&records, &test_sets, &strategies);
    let clients = plan.training_centers();
    let model_bytes = plan.architecture().param_count() as u64 * 8;
    let mut cost = CostLedger::new(model_bytes, clients.len() as u64, rounds.unwrap_or(0));
    for s in &strategies {
        let t: Vec<&Timing> = timings.iter().filter(|t| &t.strategy == s).collect();
        if t.is_empty() {
            continue;
        }
        let n = t.len() as f64;
        let traffic = match s.as_str() {
            "Centralized" => Traffic::Centralized,
            "FedAvg" | "FedProx" => Traffic::Federated,
            "UBE" | "STAPLE" | "MV" => Traffic::Consensus,
            _ => Traffic::Local,
        };
        cost.record(
            s.clone(),
            traffic,
            t.iter().map(|t| t.train_seconds).sum::<f64>() / n,
            t.iter().map(|t| t.infer_seconds_per_case).sum::<f64>() / n,
        );
    }
    let local_models: Vec<(String, String)> = clients.iter().map(|c| (c.clone(), local_name(c))).collect();
    let methods: Vec<String> = strategies.iter().filter(|s| !s.starts_with("Local-")).cloned().collect();
    let utility = utility_report(&records, &local_models, &methods);
    Ok(PlanOutput { records, errors, strategies, test_sets, table, cost, utility, cells: cells.len() })
}

/// Generates the plan's scenario and runs it.
pub fn run_generated(plan: &ExperimentPlan) -> Result<PlanOutput> {
    let datasets = plan.scenario.generate()?;
    run_plan(plan, &datasets)
}

/// Mean over training clients of each local model's DSC on its own test folds.
pub fn local_score(output: &PlanOutput, plan: &ExperimentPlan) -> Option<f64> {
    let scores: Vec<f64> = plan
        .training_centers()
        .iter()
        .map(|c| pooled_dsc(&output.records, &local_name(c), &[c.clone()].into()))
        .collect::<Option<Vec<_>>>()?;
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub chosen: Hyper,
    /// Every evaluated point with its score; `None` when the run failed.
    pub scores: Vec<(Hyper, Option<f64>)>,
}

/// Evaluates each grid point with the Local strategy only and picks the one
/// with the best mean local DSC. Ties go to the smaller learning rate, then
/// the smaller batch.
pub fn grid_search(plan: &ExperimentPlan, datasets: &[ClientDataset], grid: &HyperGrid) -> Result<GridResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("hyperparameter grid is empty"));
    }
    let mut scores = Vec::with_capacity(points.len());
    for h in points {
        let p = ExperimentPlan { hyper: h, strategies: vec![StrategyKind::Local], ..plan.clone() };
        let score = match run_plan(&p, datasets) {
            Ok(out) if out.errors.is_empty() => local_score(&out, &p).filter(|s| s.is_finite()),
            Ok(_) => None,
            Err(e) => {
                warn!("grid point {h:?} failed: {e}");
                None
            }
        };
        scores.push((h, score));
    }
    let chosen = scores
        .iter()
        .filter_map(|(h, s)| s.map(|s| (h, s)))
        .fold(None::<(&Hyper, f64)>, |best, (h, s)| match best {
            None => Some((h, s)),
            Some((bh, bs)) => {
                let better = s > bs
                    || (s == bs
                        && (h.learning_rate < bh.learning_rate
                            || (h.learning_rate == bh.learning_rate && h.batch_size < bh.batch_size)));
                Some(if better { (h, s) } else { (bh, bs) })
            }
        })
        .map(|(h, _)| *h)
        .ok_or_else(|| Error::Protocol("every grid point failed".into()))?;
    Ok(GridResult { chosen, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOut {
    pub with: PlanOutput,
    pub without: PlanOutput,
    pub deltas: RobustnessTable,
}

/// Runs the plan with and without `excluded` among the training clients.
/// The excluded center's own test folds stay in the evaluation.
pub fn leave_one_out(plan: &ExperimentPlan, datasets: &[ClientDataset], excluded: &str) -> Result<LeaveOneOut> {
    let reduced = ExperimentPlan { exclude: Some(excluded.to_string()), ..plan.clone() };
    reduced.validate()?;
    let with = run_plan(&ExperimentPlan { exclude: None, ..plan.clone() }, datasets)?;
    let without = run_plan(&reduced, datasets)?;
    // A strategy that cannot run on the reduced federation (STAPLE with a
    // single rater) leaves error rows and is left out of the comparison.
    let shared: Vec<String> = with
        .table
        .strategies
        .iter()
        .filter(|s| !s.starts_with("Local-") && without.table.strategies.contains(s))
        .cloned()
        .collect();
    let deltas = robustness_delta(&with.table, &without.table, &shared)?;
    Ok(LeaveOneOut { with, without, deltas })
}

/// Settings of the privacy sweep beyond the plan itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyPlan {
    pub dp: DpConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// DSC-versus-budget curves for MV-CBM and FedAvg-FL. Every training center
/// trains on all of its samples; the test-only centers are the evaluation
/// set. Schedules are capped at the non-private ones.
pub fn privacy_sweep(plan: &ExperimentPlan, datasets: &[ClientDataset], privacy: &PrivacyPlan) -> Result<Vec<SweepPoint>> {
    plan.validate()?;
    check_datasets(plan, datasets)?;
    privacy.dp.validate()?;
    if privacy.seeds.is_empty() {
        return Err(Error::config("privacy sweep needs at least one seed"));
    }
    let eval = PreprocessSpec { flip: false, ..plan.preprocess_spec() };
    let training = plan.training_centers();
    let mut clients = Vec::new();
    let mut test = Vec::new();
    for ds in datasets {
        if ds.is_test_only() {
            for s in &ds.test {
                test.push(preprocess(s, &eval, None)?.0);
            }
        } else if training.contains(&ds.center_id) {
            let d = ds.train.iter().map(|s| preprocess(s, &eval, None).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
            clients.push(d);
        }
    }
    if test.is_empty() {
        return Err(Error::config("privacy sweep needs at least one test-only center"));
    }
    let sizes: Vec<usize> = clients.iter().map(Vec::len).collect();
    let schedule = Schedule::derive(&sizes, &plan.hyper)?;
    let train = DpTrainSpec {
        optimizer: OptimizerSpec::sgd(privacy.learning_rate),
        batch_size: privacy.batch_size,
        dp: privacy.dp,
    };
    let arch = Architecture { dropout: 0.0, ..plan.architecture() };
    let results: Vec<Result<Vec<SweepPoint>>> = pool(plan.workers)?.install(|| {
        privacy
            .seeds
            .par_iter()
            .map(|&seed| {
                let root = Rng::new(seed, 2);
                let initial = SegModel::init(arch, &mut root.fork(20))?;
                let setup = SweepSetup {
                    seed,
                    clients: clients.iter().map(Vec::as_slice).collect(),
                    test: &test,
                    initial: &initial,
                    train,
                    local_steps_cap: schedule.local_steps,
                    rounds_cap: schedule.rounds,
                    steps_per_round: plan.hyper.local_steps,
                    rng: root.fork(50),
                };
                budget_sweep(&setup, &privacy.epsilons)
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_profiles;
    use crate::volume::Shape;

    fn tiny_plan() -> ExperimentPlan {
        let profiles = default_profiles()
            .into_iter()
            .map(|p| crate::scenario::CenterProfile { samples: p.samples.min(6), ..p })
            .collect();
        ExperimentPlan {
            scenario: ScenarioSpec { seed: 3, shape: Shape::plane(12, 12), profiles },
            folds: 2,
            seeds: vec![7],
            hyper: Hyper { learning_rate: 0.01, batch_size: 2, dropout: 0.3, local_steps: 2, k_steps: 6 },
            patch_radius: 1,
            hidden: 4,
            bias_correction: Some(3),
            ube: UbeConfig { passes: 3, ..UbeConfig::default() },
            workers: 1,
            ..ExperimentPlan::default()
        }
    }

    #[test]
    fn fold_partition_covers_each_sample_once() {
        for n in [1usize, 5, 13, 48] {
            for k in [2usize, 3, 5] {
                let mut test_count = vec![0; n];
                for fold in 0..k {
                    for (i, c) in test_count.iter_mut().enumerate() {
                        if fold_of(i, k) == fold {
                            *c += 1;
                        }
                    }
                }
                assert!(test_count.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn schedule_step_parity() {
        let h = Hyper::default();
        let sizes = [13, 10, 11, 38];
        let s = Schedule::derive(&sizes, &h).unwrap();
        let total: usize = sizes.iter().sum();
        let per_client = s.epochs as f64 * total as f64 / (sizes.len() as f64 * h.batch_size as f64);
        let fl = (s.rounds * h.local_steps) as f64;
        assert!(fl >= per_client && fl - per_client < h.local_steps as f64, "{fl} vs {per_client}");
        assert_eq!(s.centralized_steps, (s.epochs * total as u64).div_ceil(8));
    }

    #[test]
    fn plan_validation() {
        let mut p = tiny_plan();
        p.folds = 1;
        assert!(p.validate().is_err());
        let mut p = tiny_plan();
        p.exclude = Some("C05".into());
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = tiny_plan();
        p.strategies = vec![StrategyKind::Mv, StrategyKind::Mv];
        assert!(p.validate().is_err());
        assert!(tiny_plan().validate().is_ok());
    }

    #[test]
    fn full_matrix_runs_and_is_deterministic() {
        let plan = tiny_plan();
        let data = plan.scenario.generate().unwrap();
        let a = run_plan(&plan, &data).unwrap();
        assert!(a.errors.is_empty(), "{:?}", a.errors);
        assert_eq!(a.strategies.len(), 4 + 6);
        assert_eq!(a.table.strategies, a.strategies);
        assert_eq!(a.table.test_sets.len(), 6);
        let b = run_plan(&ExperimentPlan { workers: 3, ..plan.clone() }, &data).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.cost.rounds >= 1);
        assert!(!a.utility.rows.is_empty());
    }

    #[test]
    fn single_local_column() {
        let mut plan = tiny_plan();
        plan.strategies = vec![StrategyKind::Local];
        plan.scenario.profiles.retain(|p| p.id == "C01" || !p.is_training());
        let data = plan.scenario.generate().unwrap();
        let out = run_plan(&plan, &data).unwrap();
        assert_eq!(out.table.strategies, vec!["Local-C01".to_string()]);
    }

    #[test]
    fn leave_one_out_keeps_excluded_test_set() {
        let plan = ExperimentPlan { strategies: vec![StrategyKind::FedAvg, StrategyKind::Mv], ..tiny_plan() };
        let data = plan.scenario.generate().unwrap();
        let loo = leave_one_out(&plan, &data, "C03").unwrap();
        assert!(loo.without.table.test_sets.contains(&"C03".to_string()));
        assert_eq!(loo.without.cost.clients, 3);
        assert_eq!(loo.deltas.strategies, vec!["FedAvg".to_string(), "MV".to_string()]);
        assert!(matches!(leave_one_out(&plan, &data, "C06"), Err(Error::Config(_))));
    }

    #[test]
    fn grid_search_single_point_and_tie_break() {
        let plan = tiny_plan();
        let data = plan.scenario.generate().unwrap();
        let g = grid_search(&plan, &data, &HyperGrid::single(plan.hyper)).unwrap();
        assert_eq!(g.chosen, plan.hyper);
        // local steps do not affect Local-only runs, so both points tie
        let grid = HyperGrid { local_steps: vec![2, 3], ..HyperGrid::single(plan.hyper) };
        let g = grid_search(&plan, &data, &grid).unwrap();
        assert_eq!(g.scores[0].1, g.scores[1].1);
        assert_eq!(g.chosen.local_steps, 2);
    }
}
