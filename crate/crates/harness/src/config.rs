//! Experiment configuration as flat `key = value` text.
//!
//! Unknown keys are rejected. Every key has a default, so an empty file is a
//! valid configuration of the default collapse scenario.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use cvsg::diffusion::{make_schedule, Condition, NoiseSchedule, ObjectId, RegionId};
use cvsg::guidance::{FeedbackMode, GuidanceConfig};
use cvsg::kernel::KernelKind;
use cvsg::metrics::{Averaging, DEFAULT_K};
use cvsg::scenarios::{ScenarioSpec, Stratify};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Baseline,
    FgLoss,
    FgEntropy,
    Vsg,
    Cvsg,
    ContextOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::FgLoss,
        Method::FgEntropy,
        Method::Vsg,
        Method::Cvsg,
        Method::ContextOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::FgLoss => "fg_loss",
            Method::FgEntropy => "fg_entropy",
            Method::Vsg => "vsg",
            Method::Cvsg => "cvsg",
            Method::ContextOnly => "context_only",
        }
    }

    pub fn feedback_mode(&self) -> Option<FeedbackMode> {
        match self {
            Method::FgLoss => Some(FeedbackMode::Loss),
            Method::FgEntropy => Some(FeedbackMode::Entropy),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `scale` times the median pairwise distance of the cell's exemplar pool.
    Median { scale: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    /// Output dimension of a random linear feature lift; `None` keeps raw
    /// coordinates.
    pub feature_dim: Option<usize>,
    pub feature_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> cvsg::Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub schedule: ScheduleConfig,
    pub kernel: KernelConfig,
    /// `n` is ignored; `generations_per_cell` sets it.
    pub guidance: GuidanceConfig,
    /// Exemplars per condition (`M`).
    pub exemplars: usize,
    pub stratify: Stratify,
    /// One memory bank for all conditions instead of one per condition.
    pub shared_bank: bool,
    /// Sample placed in every bank before generation starts.
    pub seed_sample: Option<Vec<f64>>,
    pub feedback_weight: f64,
    /// Clip of the feedback methods' added term, kept apart from
    /// `guidance.grad_clip` so the two families are tuned independently.
    pub feedback_clip: f64,
    pub method: Method,
    pub generations_per_cell: usize,
    pub eval_k: usize,
    pub averaging: Averaging,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default_collapse(),
            schedule: ScheduleConfig {
                steps: 50,
                beta_min: 1e-4,
                beta_max: 0.2,
                eta: 0.0,
            },
            kernel: KernelConfig {
                kind: KernelKind::Rbf,
                bandwidth: Bandwidth::Median { scale: 1.0 },
                feature_dim: None,
                feature_seed: 0,
            },
            guidance: GuidanceConfig::default(),
            exemplars: 2,
            stratify: Stratify::PerRegion,
            shared_bank: false,
            seed_sample: None,
            feedback_weight: 1.0,
            feedback_clip: 10.0,
            method: Method::Cvsg,
            generations_per_cell: 200,
            eval_k: DEFAULT_K,
            averaging: Averaging::Unweighted,
            seeds: vec![0],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn strip_id(key: &str, s: &str, prefix: char) -> Result<u32, HarnessError> {
    parse(key, s.strip_prefix(prefix).unwrap_or(s))
}

fn fmt_list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if k.starts_with("sweep.") {
                continue;
            }
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["method"] => self.method = parse(key, value)?,
            ["generations_per_cell"] => self.generations_per_cell = parse(key, value)?,
            ["eval_k"] => self.eval_k = parse(key, value)?,
            ["seeds"] => self.seeds = parse_list(key, value)?,
            ["averaging"] => {
                self.averaging = match value {
                    "unweighted" => Averaging::Unweighted,
                    "by_real_count" => Averaging::ByRealCount,
                    _ => return Err(HarnessError::Config(format!("{key}: unknown averaging {value:?}"))),
                }
            }
            ["scenario", "regions"] => {
                let n: u32 = parse(key, value)?;
                self.scenario.regions = (0..n).map(RegionId).collect();
            }
            ["scenario", "objects"] => {
                let n: u32 = parse(key, value)?;
                self.scenario.objects = (0..n).map(ObjectId).collect();
            }
            ["scenario", "modes_per_cell"] => self.scenario.modes_per_cell = parse(key, value)?,
            ["scenario", "dim"] => self.scenario.dim = parse(key, value)?,
            ["scenario", "separation"] => self.scenario.separation = parse(key, value)?,
            ["scenario", "mode_std"] => self.scenario.mode_std = parse(key, value)?,
            ["scenario", "weight_skew"] => self.scenario.weight_skew = parse(key, value)?,
            ["scenario", "residual"] => self.scenario.residual = parse(key, value)?,
            ["scenario", "reference_per_cell"] => self.scenario.reference_per_cell = parse(key, value)?,
            ["scenario", "pool_per_cell"] => self.scenario.pool_per_cell = parse(key, value)?,
            ["scenario", "seed"] => self.scenario.seed = parse(key, value)?,
            ["scenario", "collapse", "clear"] => {
                if parse_bool(key, value)? {
                    self.scenario.collapse.clear();
                }
            }
            ["scenario", "collapse", "region", r] => {
                let region = RegionId(strip_id(key, r, 'r')?);
                self.scenario.collapse.retain(|c, _| c.region != region);
                let f: f64 = parse(key, value)?;
                if f != 1.0 {
                    self.scenario.collapse_region(region, f);
                }
            }
            ["scenario", "collapse", "cell", o, r] => {
                let cond = Condition::new(strip_id(key, o, 'o')?, strip_id(key, r, 'r')?);
                self.scenario.collapse.insert(cond, parse(key, value)?);
            }
            ["scenario", "imbalance", r] => {
                self.scenario
                    .imbalance
                    .insert(RegionId(strip_id(key, r, 'r')?), parse(key, value)?);
            }
            ["schedule", "steps"] => self.schedule.steps = parse(key, value)?,
            ["schedule", "beta_min"] => self.schedule.beta_min = parse(key, value)?,
            ["schedule", "beta_max"] => self.schedule.beta_max = parse(key, value)?,
            ["schedule", "eta"] => self.schedule.eta = parse(key, value)?,
            ["kernel", "kind"] => {
                self.kernel.kind = match value {
                    "rbf" => KernelKind::Rbf,
                    "cosine" => KernelKind::Cosine,
                    _ => return Err(HarnessError::Config(format!("{key}: unknown kernel {value:?}"))),
                }
            }
            ["kernel", "bandwidth"] => {
                self.kernel.bandwidth = if value == "median" {
                    Bandwidth::Median { scale: 1.0 }
                } else if let Some(scale) = value.strip_prefix("median*") {
                    Bandwidth::Median {
                        scale: parse(key, scale)?,
                    }
                } else {
                    Bandwidth::Fixed(parse(key, value)?)
                }
            }
            ["kernel", "feature_dim"] => {
                self.kernel.feature_dim = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            ["kernel", "feature_seed"] => self.kernel.feature_seed = parse(key, value)?,
            ["guidance", "alpha"] => self.guidance.alpha = parse(key, value)?,
            ["guidance", "beta"] => self.guidance.beta = parse(key, value)?,
            ["guidance", "gamma"] => {
                self.guidance.gamma = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            ["guidance", "gfreq"] => self.guidance.gfreq = parse(key, value)?,
            ["guidance", "phase"] => self.guidance.phase = parse(key, value)?,
            ["guidance", "grad_clip"] => self.guidance.grad_clip = parse(key, value)?,
            ["guidance", "exemplars"] => self.exemplars = parse(key, value)?,
            ["guidance", "stratify"] => {
                self.stratify = match value {
                    "random" => Stratify::Random,
                    "per_region" => Stratify::PerRegion,
                    _ => return Err(HarnessError::Config(format!("{key}: unknown stratify {value:?}"))),
                }
            }
            ["guidance", "shared_bank"] => self.shared_bank = parse_bool(key, value)?,
            ["guidance", "seed_sample"] => {
                self.seed_sample = if value == "none" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            ["guidance", "feedback_weight"] => self.feedback_weight = parse(key, value)?,
            ["guidance", "feedback_clip"] => self.feedback_clip = parse(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        self.schedule.build()?;
        let mut g = self.guidance.clone();
        g.n = self.generations_per_cell.max(1);
        g.validate()?;
        if self.generations_per_cell < 1 {
            return Err(HarnessError::Config("generations_per_cell must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.eval_k < 1 {
            return Err(HarnessError::Config("eval_k must be at least 1".into()));
        }
        let (_, beta) = self.effective_weights();
        if beta > 0.0 && self.exemplars < 1 {
            return Err(HarnessError::Config(format!(
                "method {} with beta > 0 needs guidance.exemplars >= 1",
                self.method
            )));
        }
        if self.method == Method::ContextOnly && !(self.guidance.beta > 0.0) {
            return Err(HarnessError::Config("context_only needs beta > 0".into()));
        }
        if self.method.feedback_mode().is_some() && self.scenario.regions.len() < 2 {
            return Err(HarnessError::Config("feedback guidance needs at least two regions".into()));
        }
        if let Some(s) = &self.seed_sample {
            if s.len() != self.scenario.dim {
                return Err(HarnessError::Config("seed_sample dimension differs from scenario.dim".into()));
            }
        }
        if !(self.feedback_weight >= 0.0) || !(self.feedback_clip > 0.0) {
            return Err(HarnessError::Config(
                "feedback_weight must be non-negative and feedback_clip positive".into(),
            ));
        }
        if let Bandwidth::Fixed(h) = self.kernel.bandwidth {
            if !(h > 0.0) {
                return Err(HarnessError::Config("kernel.bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    /// `(alpha, beta)` after the method's restrictions.
    pub fn effective_weights(&self) -> (f64, f64) {
        let (a, b) = (self.guidance.alpha, self.guidance.beta);
        match self.method {
            Method::Baseline | Method::FgLoss | Method::FgEntropy => (0.0, 0.0),
            Method::Vsg => (a, 0.0),
            Method::ContextOnly => (0.0, b),
            Method::Cvsg => (a, b),
        }
    }

    /// Guidance weight actually applied by the feedback methods.
    pub fn effective_feedback_weight(&self) -> f64 {
        if self.method.feedback_mode().is_some() {
            self.feedback_weight
        } else {
            0.0
        }
    }

    /// Guidance configuration for one condition's generation run.
    pub fn guidance_for_run(&self) -> GuidanceConfig {
        let (alpha, beta) = self.effective_weights();
        GuidanceConfig {
            alpha,
            beta,
            n: self.generations_per_cell,
            ..self.guidance.clone()
        }
    }

    /// Every key with its current value, sorted by key.
    pub fn canonical_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let s = &self.scenario;
        put("method", self.method.to_string());
        put("generations_per_cell", self.generations_per_cell.to_string());
        put("eval_k", self.eval_k.to_string());
        put("seeds", fmt_list(&self.seeds));
        put(
            "averaging",
            match self.averaging {
                Averaging::Unweighted => "unweighted",
                Averaging::ByRealCount => "by_real_count",
            }
            .to_string(),
        );
        put("scenario.regions", s.regions.len().to_string());
        put("scenario.objects", s.objects.len().to_string());
        put("scenario.modes_per_cell", s.modes_per_cell.to_string());
        put("scenario.dim", s.dim.to_string());
        put("scenario.separation", s.separation.to_string());
        put("scenario.mode_std", s.mode_std.to_string());
        put("scenario.weight_skew", s.weight_skew.to_string());
        put("scenario.residual", s.residual.to_string());
        put("scenario.reference_per_cell", s.reference_per_cell.to_string());
        put("scenario.pool_per_cell", s.pool_per_cell.to_string());
        put("scenario.seed", s.seed.to_string());
        for (c, f) in &s.collapse {
            put(&format!("scenario.collapse.cell.{}.{}", c.object, c.region), f.to_string());
        }
        for (r, f) in &s.imbalance {
            put(&format!("scenario.imbalance.{r}"), f.to_string());
        }
        put("schedule.steps", self.schedule.steps.to_string());
        put("schedule.beta_min", self.schedule.beta_min.to_string());
        put("schedule.beta_max", self.schedule.beta_max.to_string());
        put("schedule.eta", self.schedule.eta.to_string());
        put(
            "kernel.kind",
            match self.kernel.kind {
                KernelKind::Rbf => "rbf",
                KernelKind::Cosine => "cosine",
            }
            .to_string(),
        );
        put(
            "kernel.bandwidth",
            match self.kernel.bandwidth {
                Bandwidth::Median { scale: 1.0 } => "median".to_string(),
                Bandwidth::Median { scale } => format!("median*{scale}"),
                Bandwidth::Fixed(h) => h.to_string(),
            },
        );
        put(
            "kernel.feature_dim",
            self.kernel.feature_dim.map_or("none".to_string(), |d| d.to_string()),
        );
        put("kernel.feature_seed", self.kernel.feature_seed.to_string());
        let g = &self.guidance;
        put("guidance.alpha", g.alpha.to_string());
        put("guidance.beta", g.beta.to_string());
        put("guidance.gamma", g.gamma.map_or("none".to_string(), |v| v.to_string()));
        put("guidance.gfreq", g.gfreq.to_string());
        put("guidance.phase", g.phase.to_string());
        put("guidance.grad_clip", g.grad_clip.to_string());
        put("guidance.exemplars", self.exemplars.to_string());
        put(
            "guidance.stratify",
            match self.stratify {
                Stratify::Random => "random",
                Stratify::PerRegion => "per_region",
            }
            .to_string(),
        );
        put("guidance.shared_bank", self.shared_bank.to_string());
        put(
            "guidance.seed_sample",
            self.seed_sample.as_deref().map_or("none".to_string(), fmt_list),
        );
        put("guidance.feedback_weight", self.feedback_weight.to_string());
        put("guidance.feedback_clip", self.feedback_clip.to_string());
        m
    }

    /// Canonical text form; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let pairs = self.canonical_pairs();
        let mut out = String::new();
        // collapse is re-stated from scratch so the text is self-contained
        out.push_str("scenario.collapse.clear = true\n");
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn config_hash(&self) -> String {
        hash_text(&self.to_text())
    }

    /// Hash of the scenario and schedule keys only. Random streams are
    /// derived from it so that methods differing only in guidance settings
    /// share their noise.
    pub fn world_hash(&self) -> u64 {
        let text: String = self
            .canonical_pairs()
            .into_iter()
            .filter(|(k, _)| k.starts_with("scenario.") || k.starts_with("schedule."))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

pub fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
