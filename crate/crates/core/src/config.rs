//! TOML configuration files: scenario, plan, privacy sweep and output paths.
//! Unknown keys are rejected and every error names the offending line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consensus::{StapleConfig, UbeConfig, UbeDirection};
use crate::error::{Error, Result};
use crate::harness::{ExperimentPlan, Hyper, HyperGrid, StrategyKind};
use crate::privacy::DpConfig;
use crate::scenario::{default_profiles, CenterProfile, ScenarioSpec};
use crate::volume::Shape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub seed: u64,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    #[serde(rename = "center")]
    pub centers: Vec<CenterProfile>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { seed: 0, shape: [1, 32, 32], centers: default_profiles() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UbeWeighting {
    Inverse,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub strategies: Vec<StrategyKind>,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub fedprox_mu: f64,
    pub patch_radius: usize,
    pub hidden: usize,
    /// Bias-correction smoothing radius; 0 disables it.
    pub bias_correction: usize,
    pub flip: bool,
    pub nsd_tau: f64,
    pub ube_passes: usize,
    pub ube_weighting: UbeWeighting,
    pub staple_tol: f64,
    pub staple_max_iters: usize,
    /// Training center removed by the robustness experiment.
    pub robustness_exclude: String,
    pub hyper: Hyper,
    /// When present, hyperparameters are chosen by grid search first.
    pub grid: Option<HyperGrid>,
}

impl Default for PlanSection {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        Self {
            strategies: plan.strategies,
            folds: plan.folds,
            seeds: plan.seeds,
            fedprox_mu: plan.fedprox_mu,
            patch_radius: plan.patch_radius,
            hidden: plan.hidden,
            bias_correction: plan.bias_correction.unwrap_or(0),
            flip: plan.flip,
            nsd_tau: plan.nsd_tau,
            ube_passes: plan.ube.passes,
            ube_weighting: UbeWeighting::Inverse,
            staple_tol: plan.staple.tol,
            staple_max_iters: plan.staple.max_iters,
            robustness_exclude: "C03".into(),
            hyper: plan.hyper,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub clip: f64,
    pub sigma: f64,
    pub delta: f64,
    pub epsilons: Vec<f64>,
    /// Plain SGD learning rate for private training.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Experiment seeds of the sweep; empty means the plan's seeds.
    pub seeds: Vec<u64>,
}

impl Default for DpSection {
    fn default() -> Self {
        let dp = DpConfig::default();
        Self {
            clip: dp.clip,
            sigma: dp.sigma,
            delta: dp.delta,
            epsilons: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5],
            learning_rate: 0.2,
            batch_size: 8,
            seeds: Vec::new(),
        }
    }
}

impl DpSection {
    pub fn dp_config(&self) -> DpConfig {
        DpConfig { clip: self.clip, sigma: self.sigma, delta: self.delta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub data_dir: PathBuf,
    pub results_dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { data_dir: "data".into(), results_dir: "results".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: ScenarioSection,
    pub plan: PlanSection,
    pub dp: DpSection,
    pub output: OutputSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            let msg = e.message().trim().to_string();
            match line {
                Some(l) => Error::config(format!("line {l}: {msg}")),
                None => Error::config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_spec()?.validate()?;
        self.plan()?.validate()?;
        let dp = self.dp.dp_config();
        dp.validate()?;
        if self.dp.epsilons.is_empty()
            || self.dp.epsilons[0] <= 0.0
            || self.dp.epsilons.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::config("dp.epsilons must be positive and strictly increasing"));
        }
        if !(self.dp.learning_rate > 0.0) || self.dp.batch_size == 0 {
            return Err(Error::config("dp.learning_rate and dp.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let [d, h, w] = self.scenario.shape;
        Ok(ScenarioSpec { seed: self.scenario.seed, shape: Shape::new(d, h, w)?, profiles: self.scenario.centers.clone() })
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        let p = &self.plan;
        Ok(ExperimentPlan {
            scenario: self.scenario_spec()?,
            strategies: p.strategies.clone(),
            folds: p.folds,
            seeds: p.seeds.clone(),
            hyper: p.hyper,
            fedprox_mu: p.fedprox_mu,
            patch_radius: p.patch_radius,
            hidden: p.hidden,
            bias_correction: (p.bias_correction > 0).then_some(p.bias_correction),
            flip: p.flip,
            ube: UbeConfig {
                passes: p.ube_passes,
                direction: match p.ube_weighting {
                    UbeWeighting::Inverse => UbeDirection::Inverse,
                    UbeWeighting::Direct => UbeDirection::Direct,
                },
                ..UbeConfig::default()
            },
            staple: StapleConfig { tol: p.staple_tol, max_iters: p.staple_max_iters, ..StapleConfig::default() },
            nsd_tau: p.nsd_tau,
            workers: 0,
            exclude: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ConfigFile::parse("").unwrap();
        assert_eq!(cfg, ConfigFile::default());
        assert_eq!(cfg.plan().unwrap(), ExperimentPlan::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = ConfigFile::default();
        assert_eq!(ConfigFile::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[plan]\nfolds = 3\nfoldz = 4\n";
        let err = ConfigFile::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("foldz"), "{err}");
        let err = ConfigFile::parse("[scenario]\nseed = 1\n[[scenario.center]]\nid = \"A\"\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn zero_centers_rejected() {
        let err = ConfigFile::parse("[scenario]\ncenter = []\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strategies_and_grid_parse() {
        let text = "[plan]\nstrategies = [\"local\", \"mv\"]\nseeds = [9]\n[plan.grid]\nlearning_rate = [0.01]\n\
                    batch_size = [4]\ndropout = [0.3]\nlocal_steps = [20]\nk_steps = [100]\n";
        let cfg = ConfigFile::parse(text).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.strategies, vec![StrategyKind::Local, StrategyKind::Mv]);
        assert_eq!(cfg.plan.grid.unwrap().points().len(), 1);
        assert!(ConfigFile::parse("[plan]\nstrategies = [\"bogus\"]\n").is_err());
        assert!(ConfigFile::parse("[plan]\nfolds = 1\n").is_err());
    }
}
