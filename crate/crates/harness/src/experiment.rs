//! Running configured methods over a scenario.
//!
//! Random streams are derived from `(world_hash, seed, cell)` only, so two
//! configurations that differ in their guidance settings see the same
//! scenario, the same exemplar draws and the same sampler noise.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use cvsg::diffusion::{stream_seed, Condition, NoiseSchedule, RegionId};
use cvsg::guidance::{
    generate_feedback, generate_sequence, ExemplarSet, FeedbackConfig, Generation, MemoryBank, SampleDiagnostics,
    Similarity,
};
use cvsg::kernel::{median_pairwise_distance, FeatureMap, KernelKind, KernelSpec};
use cvsg::metrics::{region_report, EvalSet, LabeledSample, MetricsReport};
use cvsg::scenarios::{build_scenario, pick_exemplars, ScenarioBundle, ScenarioSpec};
use cvsg::vendi::vendi_score;
use cvsg::FeatureVector;
use rayon::prelude::*;

use crate::config::{parse_kv, Bandwidth, ExperimentConfig};
use crate::report::{aggregate_rows, rows_for, Aggregate};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cond: Condition,
    pub samples: Vec<FeatureVector>,
    /// Vendi Score of the cell's generations under the cell's kernel.
    pub vendi: f64,
    pub diagnostics: Vec<SampleDiagnostics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cond: Condition,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub cells: Vec<CellOutcome>,
    pub failures: Vec<CellFailure>,
    /// `None` when evaluation failed; see `eval_error`.
    pub report: Option<MetricsReport>,
    pub eval_error: Option<String>,
    pub real_counts: BTreeMap<RegionId, usize>,
    pub bundle: Arc<ScenarioBundle>,
}

impl SeedResult {
    /// Mean over cells of the per-cell output Vendi Score.
    pub fn output_vendi(&self) -> f64 {
        if self.cells.is_empty() {
            return f64::NAN;
        }
        self.cells.iter().map(|c| c.vendi).sum::<f64>() / self.cells.len() as f64
    }

    pub fn generated(&self) -> Vec<LabeledSample> {
        self.cells
            .iter()
            .flat_map(|c| c.samples.iter().map(|x| LabeledSample { x: x.clone(), cond: c.cond }))
            .collect()
    }
}

/// Guidance instrumentation summed over every trajectory of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiagnosticsSummary {
    pub trajectories: usize,
    pub guided_steps: usize,
    pub min_guided_per_trajectory: usize,
    pub max_guided_per_trajectory: usize,
    pub degenerate_fallbacks: usize,
    pub clipped_steps: usize,
}

impl DiagnosticsSummary {
    fn collect<'a>(diags: impl IntoIterator<Item = &'a SampleDiagnostics>) -> Self {
        let mut s = Self {
            min_guided_per_trajectory: usize::MAX,
            ..Self::default()
        };
        for d in diags {
            s.trajectories += 1;
            s.guided_steps += d.guided_steps;
            s.min_guided_per_trajectory = s.min_guided_per_trajectory.min(d.guided_steps);
            s.max_guided_per_trajectory = s.max_guided_per_trajectory.max(d.guided_steps);
            s.degenerate_fallbacks += d.degenerate_fallbacks;
            s.clipped_steps += d.clipped_steps;
        }
        if s.trajectories == 0 {
            s.min_guided_per_trajectory = 0;
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    /// `None` when no seed produced a report.
    pub aggregate: Option<Aggregate>,
    pub diagnostics: DiagnosticsSummary,
    pub seconds_per_sample: f64,
}

impl RunRecord {
    pub fn failures(&self) -> impl Iterator<Item = (u64, &CellFailure)> {
        self.seeds.iter().flat_map(|s| s.failures.iter().map(move |f| (s.seed, f)))
    }

    pub fn is_complete(&self) -> bool {
        self.seeds.iter().all(|s| s.failures.is_empty() && s.report.is_some())
    }

    pub fn mean_output_vendi(&self) -> f64 {
        self.seeds.iter().map(SeedResult::output_vendi).sum::<f64>() / self.seeds.len() as f64
    }
}

/// Scenario spec actually built for run seed `seed`.
pub fn seeded_scenario(spec: &ScenarioSpec, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        seed: stream_seed(spec.seed, seed),
        ..spec.clone()
    }
}

type BundleCache = HashMap<(u64, u64), Arc<ScenarioBundle>>;

fn build_bundles<'a>(
    configs: impl IntoIterator<Item = &'a ExperimentConfig>,
) -> Result<BundleCache, HarnessError> {
    let mut wanted: BTreeMap<(u64, u64), ScenarioSpec> = BTreeMap::new();
    for cfg in configs {
        let wh = cfg.world_hash();
        for &seed in &cfg.seeds {
            wanted
                .entry((wh, seed))
                .or_insert_with(|| seeded_scenario(&cfg.scenario, seed));
        }
    }
    wanted
        .into_par_iter()
        .map(|(key, spec)| Ok((key, Arc::new(build_scenario(&spec)?))))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let bundles = build_bundles([cfg])?;
    run_with_bundles(cfg, &bundles)
}

fn run_with_bundles(cfg: &ExperimentConfig, bundles: &BundleCache) -> Result<RunRecord, HarnessError> {
    let sched = cfg.schedule.build()?;
    let wh = cfg.world_hash();
    let seeds: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &sched, Arc::clone(&bundles[&(wh, seed)]), wh, seed))
        .collect();

    let rows = rows_for(cfg, &cfg.config_hash(), &seeds);
    let aggregate = (!rows.is_empty()).then(|| aggregate_rows(&rows));
    let diagnostics =
        DiagnosticsSummary::collect(seeds.iter().flat_map(|s| s.cells.iter().flat_map(|c| &c.diagnostics)));
    let (secs, count) = seeds
        .iter()
        .flat_map(|s| &s.cells)
        .fold((0.0, 0usize), |(t, n), c| (t + c.seconds, n + c.samples.len()));
    Ok(RunRecord {
        config: cfg.clone(),
        config_hash: cfg.config_hash(),
        seeds,
        aggregate,
        diagnostics,
        seconds_per_sample: if count > 0 { secs / count as f64 } else { 0.0 },
    })
}

struct CellPlan {
    cond: Condition,
    sim: Similarity,
    exemplars: ExemplarSet,
    gen_seed: u64,
}

fn plan_cell(
    cfg: &ExperimentConfig,
    bundle: &ScenarioBundle,
    cond: Condition,
    base: u64,
    index: u64,
) -> cvsg::Result<CellPlan> {
    let map = match cfg.kernel.feature_dim {
        Some(d) => FeatureMap::random_lift(cfg.scenario.dim, d, cfg.kernel.feature_seed),
        None => FeatureMap::Identity,
    };
    let spec = match cfg.kernel.kind {
        KernelKind::Cosine => KernelSpec::cosine(),
        KernelKind::Rbf => {
            let h = match cfg.kernel.bandwidth {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Median { scale } => {
                    let pool: Vec<FeatureVector> = bundle.pool_for(&cond).iter().map(|x| map.apply(x)).collect();
                    let med = median_pairwise_distance(&pool).ok_or_else(|| {
                        cvsg::Error::Contract(format!("median bandwidth undefined for {cond}: pool too small"))
                    })?;
                    med * scale
                }
            };
            KernelSpec::rbf(h)
        }
    };
    let (_, beta) = cfg.effective_weights();
    let exemplars = if beta > 0.0 {
        pick_exemplars(
            &bundle.exemplar_pool,
            &cond,
            cfg.exemplars,
            cfg.stratify,
            stream_seed(base, 2 * index + 1),
        )?
    } else {
        ExemplarSet::new(Vec::new())
    };
    Ok(CellPlan {
        cond,
        sim: Similarity::new(map, spec),
        exemplars,
        gen_seed: stream_seed(base, 2 * index),
    })
}

fn fresh_bank(cfg: &ExperimentConfig) -> cvsg::Result<MemoryBank> {
    match &cfg.seed_sample {
        Some(x) => MemoryBank::seeded(vec![FeatureVector::from_column_slice(x)]),
        None => Ok(MemoryBank::new()),
    }
}

fn generate_cell(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    bundle: &ScenarioBundle,
    plan: &CellPlan,
    bank: &mut MemoryBank,
) -> cvsg::Result<CellOutcome> {
    let start = Instant::now();
    let Generation { samples, diagnostics } = match cfg.method.feedback_mode() {
        Some(mode) => {
            let fb = FeedbackConfig {
                mode,
                weight: cfg.effective_feedback_weight(),
                gfreq: cfg.guidance.gfreq,
                phase: cfg.guidance.phase,
                n: cfg.generations_per_cell,
                grad_clip: cfg.feedback_clip,
            };
            generate_feedback(&plan.cond, &fb, &bundle.sampler_world, &bundle.reference_world, sched, plan.gen_seed)?
        }
        None => generate_sequence(
            &plan.cond,
            bank,
            &plan.exemplars,
            &cfg.guidance_for_run(),
            &bundle.sampler_world,
            sched,
            &plan.sim,
            plan.gen_seed,
        )?,
    };
    let seconds = start.elapsed().as_secs_f64();
    let vendi = vendi_score(&plan.sim.features(&samples), &plan.sim.kernel)?.score;
    Ok(CellOutcome {
        cond: plan.cond,
        samples,
        vendi,
        diagnostics,
        seconds,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    bundle: Arc<ScenarioBundle>,
    world_hash: u64,
    seed: u64,
) -> SeedResult {
    let base = stream_seed(world_hash, seed);
    let conds = cfg.scenario.conditions();
    let run_cell = |i: usize, cond: Condition, bank: &mut MemoryBank| {
        plan_cell(cfg, &bundle, cond, base, i as u64)
            .and_then(|plan| generate_cell(cfg, sched, &bundle, &plan, bank))
            .map_err(|e| CellFailure {
                cond,
                message: e.to_string(),
            })
    };
    let outcomes: Vec<Result<CellOutcome, CellFailure>> = if cfg.shared_bank {
        match fresh_bank(cfg) {
            Ok(mut bank) => conds
                .iter()
                .enumerate()
                .map(|(i, c)| run_cell(i, *c, &mut bank))
                .collect(),
            Err(e) => conds
                .iter()
                .map(|c| {
                    Err(CellFailure {
                        cond: *c,
                        message: e.to_string(),
                    })
                })
                .collect(),
        }
    } else {
        conds
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut bank = fresh_bank(cfg).map_err(|e| CellFailure {
                    cond: *c,
                    message: e.to_string(),
                })?;
                run_cell(i, *c, &mut bank)
            })
            .collect()
    };

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    let mut real_counts = BTreeMap::new();
    for s in &bundle.reference_set {
        *real_counts.entry(s.cond.region).or_insert(0) += 1;
    }
    let mut result = SeedResult {
        seed,
        cells,
        failures,
        report: None,
        eval_error: None,
        real_counts,
        bundle: Arc::clone(&bundle),
    };
    let eval = EvalSet {
        real: bundle.reference_set.clone(),
        generated: result.generated(),
    };
    match region_report(&eval, &bundle.reference_world, cfg.eval_k, cfg.averaging) {
        Ok(r) => result.report = Some(r),
        Err(e) => result.eval_error = Some(e.to_string()),
    }
    result
}

/// Cartesian grid of config overrides. Axis values are applied with
/// [`ExperimentConfig::set`], in axis order; the pseudo key
/// `guidance.beta_ratio` sets `beta = ratio * alpha` after all other keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<String>)>,
}

pub const BETA_RATIO_KEY: &str = "guidance.beta_ratio";

impl SweepGrid {
    pub fn axis(mut self, key: &str, values: &[&str]) -> Self {
        self.axes
            .push((key.to_string(), values.iter().map(|v| v.to_string()).collect()));
        self
    }

    /// Collects `sweep.<key> = v1, v2, ...` lines; other lines are ignored.
    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut grid = Self::default();
        for (k, v) in parse_kv(text)? {
            if let Some(key) = k.strip_prefix("sweep.") {
                let values: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                grid.axes.push((key.to_string(), values));
            }
        }
        Ok(grid)
    }

    /// Every grid point in row-major order (last axis fastest). A grid with
    /// no axes, or with an empty axis, has no points.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        if self.axes.is_empty() {
            return Vec::new();
        }
        let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn configs(&self, base: &ExperimentConfig) -> Vec<Result<ExperimentConfig, HarnessError>> {
        self.points()
            .into_iter()
            .map(|point| {
                let mut cfg = base.clone();
                let mut ratio = None;
                for (k, v) in &point {
                    if k == BETA_RATIO_KEY {
                        ratio = Some(
                            v.parse::<f64>()
                                .map_err(|_| HarnessError::Config(format!("{k}: cannot parse {v:?}")))?,
                        );
                    } else {
                        cfg.set(k, v)?;
                    }
                }
                if let Some(r) = ratio {
                    cfg.guidance.beta = r * cfg.guidance.alpha;
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

/// One record per grid point, in grid order. Scenario builds are shared
/// between points with the same world; a failing point does not affect the
/// others.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Vec<Result<RunRecord, HarnessError>> {
    let configs = grid.configs(base);
    let bundles = match build_bundles(configs.iter().filter_map(|c| c.as_ref().ok())) {
        Ok(b) => b,
        Err(e) => {
            let msg = e.to_string();
            return configs
                .into_iter()
                .map(|c| c.and(Err(HarnessError::Config(format!("scenario build failed: {msg}")))))
                .collect();
        }
    };
    configs
        .into_par_iter()
        .map(|c| c.and_then(|cfg| run_with_bundles(&cfg, &bundles)))
        .collect()
}
