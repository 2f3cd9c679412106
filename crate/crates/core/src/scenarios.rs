//! Synthetic region x object benchmarks.
//!
//! Every (object, region) cell owns `modes_per_cell` Gaussian modes laid out
//! on a small jittered grid. The reference world holds all of them; the
//! sampler world plays the biased pretrained model and keeps only a fraction
//! of each cell's modes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{stream_seed, Component, Condition, MixtureWorld, ObjectId, RegionId};
use crate::error::{contract, Result};
use crate::guidance::ExemplarSet;
use crate::kernel::FeatureVector;
use crate::metrics::LabeledSample;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub regions: Vec<RegionId>,
    pub objects: Vec<ObjectId>,
    pub modes_per_cell: usize,
    pub dim: usize,
    /// Spacing between neighbouring modes of a cell.
    pub separation: f64,
    /// Per-axis standard deviation of every mode.
    pub mode_std: f64,
    /// Fraction of a cell's modes kept by the sampler (default 1).
    pub collapse: BTreeMap<Condition, f64>,
    /// Multiplier on a region's reference sample count (default 1).
    pub imbalance: BTreeMap<RegionId, f64>,
    /// Geometric decay of the sampler weights over a cell's retained modes;
    /// 0 keeps them uniform.
    pub weight_skew: f64,
    /// Sampler weight of each dropped mode relative to the first retained
    /// one. 0 removes dropped modes from the sampler; a small positive value
    /// keeps them as rare modes.
    pub residual: f64,
    pub reference_per_cell: usize,
    pub pool_per_cell: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Grid with no collapse and no imbalance.
    pub fn balanced(regions: u32, objects: u32, modes_per_cell: usize) -> Self {
        Self {
            regions: (0..regions).map(RegionId).collect(),
            objects: (0..objects).map(ObjectId).collect(),
            modes_per_cell,
            dim: 2,
            separation: 0.6,
            mode_std: 0.1,
            collapse: BTreeMap::new(),
            imbalance: BTreeMap::new(),
            weight_skew: 0.0,
            residual: 0.0,
            reference_per_cell: 60,
            pool_per_cell: 20,
            seed: 0,
        }
    }

    /// 3 regions x 4 objects x 4 modes with region `r0` collapsed to a
    /// quarter of its modes.
    pub fn default_collapse() -> Self {
        let mut spec = Self::balanced(3, 4, 4);
        spec.collapse_region(RegionId(0), 0.25);
        spec
    }

    /// The collapse scenario with unequal reference counts across regions.
    pub fn imbalanced() -> Self {
        let mut spec = Self::default_collapse();
        spec.imbalance.insert(RegionId(1), 0.5);
        spec.imbalance.insert(RegionId(2), 2.0);
        spec
    }

    pub fn collapse_region(&mut self, region: RegionId, fraction: f64) {
        for o in &self.objects {
            self.collapse.insert(
                Condition {
                    object: *o,
                    region,
                },
                fraction,
            );
        }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::with_capacity(self.objects.len() * self.regions.len());
        for r in &self.regions {
            for o in &self.objects {
                out.push(Condition {
                    object: *o,
                    region: *r,
                });
            }
        }
        out
    }

    pub fn retained_modes(&self, cond: &Condition) -> usize {
        let f = self.collapse.get(cond).copied().unwrap_or(1.0);
        ((f * self.modes_per_cell as f64).ceil() as usize).clamp(1, self.modes_per_cell)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.objects.is_empty() {
            return Err(contract("scenario needs at least one region and one object"));
        }
        if self.modes_per_cell < 1 || self.dim < 1 {
            return Err(contract("modes_per_cell and dim must be at least 1"));
        }
        if !(self.separation > 0.0 && self.mode_std > 0.0) {
            return Err(contract("separation and mode_std must be positive"));
        }
        for (c, f) in &self.collapse {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(contract(format!("collapse fraction for {c} must lie in (0, 1]")));
            }
            if !self.regions.contains(&c.region) || !self.objects.contains(&c.object) {
                return Err(contract(format!("collapse refers to unknown cell {c}")));
            }
        }
        for (r, m) in &self.imbalance {
            if !(*m > 0.0 && m.is_finite()) || !self.regions.contains(r) {
                return Err(contract(format!("invalid imbalance entry for {r}")));
            }
        }
        if !(self.weight_skew >= 0.0) {
            return Err(contract("weight_skew must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.residual) {
            return Err(contract("residual must lie in [0, 1)"));
        }
        if self.reference_per_cell < 1 {
            return Err(contract("reference_per_cell must be at least 1"));
        }
        Ok(())
    }

    fn reference_count(&self, region: &RegionId) -> usize {
        let m = self.imbalance.get(region).copied().unwrap_or(1.0);
        ((self.reference_per_cell as f64 * m).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub reference_world: MixtureWorld,
    pub sampler_world: MixtureWorld,
    /// Reference-world index of every sampler component, in order.
    pub sampler_sources: Vec<usize>,
    pub reference_set: Vec<LabeledSample>,
    pub exemplar_pool: Vec<LabeledSample>,
}

impl ScenarioBundle {
    pub fn reference_for(&self, cond: &Condition) -> Vec<FeatureVector> {
        self.reference_set
            .iter()
            .filter(|s| s.cond == *cond)
            .map(|s| s.x.clone())
            .collect()
    }

    pub fn pool_for(&self, cond: &Condition) -> Vec<FeatureVector> {
        self.exemplar_pool
            .iter()
            .filter(|s| s.cond == *cond)
            .map(|s| s.x.clone())
            .collect()
    }
}

fn grid_side(modes: usize) -> usize {
    (modes as f64).sqrt().ceil() as usize
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    spec.validate()?;
    let side = grid_side(spec.modes_per_cell);
    let cell_pitch = (side + 1) as f64 * spec.separation;
    let n_obj = spec.objects.len() as f64;
    let n_reg = spec.regions.len() as f64;
    let weight = 1.0 / (spec.objects.len() * spec.regions.len() * spec.modes_per_cell) as f64;

    let mut layout_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 0));
    let mut components = Vec::new();
    let mut sampler_sources = Vec::new();
    let mut sampler_components = Vec::new();
    for (ri, r) in spec.regions.iter().enumerate() {
        for (oi, o) in spec.objects.iter().enumerate() {
            let cond = Condition {
                object: *o,
                region: *r,
            };
            let cx = (oi as f64 - (n_obj - 1.0) / 2.0) * cell_pitch;
            let cy = (ri as f64 - (n_reg - 1.0) / 2.0) * cell_pitch;
            let first = components.len();
            for m in 0..spec.modes_per_cell {
                let gx = (m % side) as f64 - (side as f64 - 1.0) / 2.0;
                let gy = (m / side) as f64 - (side as f64 - 1.0) / 2.0;
                let mut mean = FeatureVector::zeros(spec.dim);
                let jitter = 0.15 * spec.separation;
                mean[0] = cx + gx * spec.separation + layout_rng.random_range(-jitter..=jitter);
                if spec.dim > 1 {
                    mean[1] = cy + gy * spec.separation + layout_rng.random_range(-jitter..=jitter);
                }
                components.push(Component {
                    mean,
                    cov_diag: FeatureVector::from_element(spec.dim, spec.mode_std * spec.mode_std),
                    weight,
                    object: *o,
                    region: *r,
                });
            }
            let keep = spec.retained_modes(&cond);
            let mut kept = sample_indices(&mut layout_rng, spec.modes_per_cell, keep).into_vec();
            kept.sort_unstable();
            for m in 0..spec.modes_per_cell {
                let w = match kept.iter().position(|&k| k == m) {
                    Some(rank) => (-spec.weight_skew * rank as f64).exp(),
                    None if spec.residual > 0.0 => spec.residual,
                    None => continue,
                };
                let mut c = components[first + m].clone();
                c.weight = w / keep as f64;
                sampler_sources.push(first + m);
                sampler_components.push(c);
            }
        }
    }
    // Cells keep equal total mass in the sampler.
    let mut cell_mass: BTreeMap<Condition, f64> = BTreeMap::new();
    for c in &sampler_components {
        *cell_mass
            .entry(Condition {
                object: c.object,
                region: c.region,
            })
            .or_default() += c.weight;
    }
    for c in &mut sampler_components {
        c.weight /= cell_mass[&Condition {
            object: c.object,
            region: c.region,
        }];
    }
    let reference_world = MixtureWorld::normalized(components)?;
    let sampler_world = MixtureWorld::normalized(sampler_components)?;

    let mut draw_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 1));
    let mut reference_set = Vec::new();
    let mut exemplar_pool = Vec::new();
    let comps = reference_world.components();
    for cond in spec.conditions() {
        let cell: Vec<&Component> = comps
            .iter()
            .filter(|c| c.object == cond.object && c.region == cond.region)
            .collect();
        let n_ref = spec.reference_count(&cond.region);
        // One stream of draws per cell; the first n_ref go to the reference
        // set and the remainder to the exemplar pool.
        for i in 0..(n_ref + spec.pool_per_cell) {
            let c = cell[draw_rng.random_range(0..cell.len())];
            let mut x = c.mean.clone();
            for k in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut draw_rng);
                x[k] += z * c.cov_diag[k].sqrt();
            }
            let s = LabeledSample { x, cond };
            if i < n_ref {
                reference_set.push(s);
            } else {
                exemplar_pool.push(s);
            }
        }
    }
    Ok(ScenarioBundle {
        reference_world,
        sampler_world,
        sampler_sources,
        reference_set,
        exemplar_pool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stratify {
    /// Draw among all pool entries of the condition's object.
    #[default]
    Random,
    /// Draw among pool entries of the exact (object, region) cell.
    PerRegion,
}

/// Seeded draw of `m` exemplars for `cond` without replacement.
pub fn pick_exemplars(
    pool: &[LabeledSample],
    cond: &Condition,
    m: usize,
    stratify: Stratify,
    seed: u64,
) -> Result<ExemplarSet> {
    let eligible: Vec<&LabeledSample> = pool
        .iter()
        .filter(|s| match stratify {
            Stratify::Random => s.cond.object == cond.object,
            Stratify::PerRegion => s.cond == *cond,
        })
        .collect();
    if eligible.len() < m {
        return Err(contract(format!(
            "exemplar pool has {} eligible samples for {cond}, need {m}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, eligible.len(), m);
    Ok(ExemplarSet::new(picks.into_iter().map(|i| eligible[i].x.clone()).collect()))
}

fn join(x: &FeatureVector) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Line-oriented text form of a bundle: one `component` or `sample` record
/// per line with `key=value` fields, vectors comma-separated.
pub fn serialize_bundle(bundle: &ScenarioBundle) -> String {
    let mut out = String::from("# cvsg scenario v1\n");
    let worlds = [("reference", &bundle.reference_world), ("sampler", &bundle.sampler_world)];
    for (name, world) in worlds {
        for (i, c) in world.components().iter().enumerate() {
            let source = if name == "sampler" { bundle.sampler_sources[i] } else { i };
            let _ = writeln!(
                out,
                "component world={name} index={i} source={source} object={} region={} weight={} mean={} cov={}",
                c.object.0,
                c.region.0,
                c.weight,
                join(&c.mean),
                join(&c.cov_diag)
            );
        }
    }
    let sets = [("reference", &bundle.reference_set), ("pool", &bundle.exemplar_pool)];
    for (name, set) in sets {
        for (i, s) in set.iter().enumerate() {
            let _ = writeln!(
                out,
                "sample set={name} index={i} object={} region={} x={}",
                s.cond.object.0,
                s.cond.region.0,
                join(&s.x)
            );
        }
    }
    out
}

fn parse_vec(s: &str) -> Result<FeatureVector> {
    let vals: std::result::Result<Vec<f64>, _> = s.split(',').map(str::parse).collect();
    vals.map(FeatureVector::from_vec)
        .map_err(|e| contract(format!("bad vector {s:?}: {e}")))
}

fn fields(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace().skip(1).filter_map(|kv| kv.split_once('=')).collect()
}

fn field<'a>(f: &BTreeMap<&str, &'a str>, key: &str, line_no: usize) -> Result<&'a str> {
    f.get(key)
        .copied()
        .ok_or_else(|| contract(format!("line {line_no}: missing field {key}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, line_no: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| contract(format!("line {line_no}: {e}")))
}

pub fn parse_bundle(text: &str) -> Result<ScenarioBundle> {
    let mut reference = Vec::new();
    let mut sampler = Vec::new();
    let mut sampler_sources = Vec::new();
    let mut reference_set = Vec::new();
    let mut exemplar_pool = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f = fields(line);
        let object = ObjectId(parse_num(field(&f, "object", line_no)?, line_no)?);
        let region = RegionId(parse_num(field(&f, "region", line_no)?, line_no)?);
        match line.split_whitespace().next() {
            Some("component") => {
                let c = Component {
                    mean: parse_vec(field(&f, "mean", line_no)?)?,
                    cov_diag: parse_vec(field(&f, "cov", line_no)?)?,
                    weight: parse_num(field(&f, "weight", line_no)?, line_no)?,
                    object,
                    region,
                };
                match field(&f, "world", line_no)? {
                    "reference" => reference.push(c),
                    "sampler" => {
                        sampler_sources.push(parse_num(field(&f, "source", line_no)?, line_no)?);
                        sampler.push(c);
                    }
                    other => return Err(contract(format!("line {line_no}: unknown world {other}"))),
                }
            }
            Some("sample") => {
                let s = LabeledSample {
                    x: parse_vec(field(&f, "x", line_no)?)?,
                    cond: Condition { object, region },
                };
                match field(&f, "set", line_no)? {
                    "reference" => reference_set.push(s),
                    "pool" => exemplar_pool.push(s),
                    other => return Err(contract(format!("line {line_no}: unknown set {other}"))),
                }
            }
            _ => return Err(contract(format!("line {line_no}: unknown record"))),
        }
    }
    // Weights were normalized when the bundle was built, so the strict
    // constructor keeps them bit-for-bit.
    Ok(ScenarioBundle {
        reference_world: MixtureWorld::new(reference)?,
        sampler_world: MixtureWorld::new(sampler)?,
        sampler_sources,
        reference_set,
        exemplar_pool,
    })
}
