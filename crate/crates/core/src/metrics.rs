//! k-NN manifold precision and recall, F1, the posterior consistency proxy
//! and per-region aggregation.

use std::collections::{BTreeMap, BTreeSet};

use crate::diffusion::{Condition, LabelQuery, MixtureWorld, ObjectId, RegionId};
use crate::error::{contract, Result};
use crate::kernel::FeatureVector;

/// Default neighbourhood size of the manifold estimate.
pub const DEFAULT_K: usize = 3;

/// Quantile used for the consistency lower tail.
pub const CONSISTENCY_QUANTILE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: FeatureVector,
    pub cond: Condition,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    pub real: Vec<LabeledSample>,
    pub generated: Vec<LabeledSample>,
}

/// Distance from every point to its `k`-th nearest other point.
pub fn knn_radii(points: &[FeatureVector], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= points.len() {
        return Err(contract(format!(
            "k-NN radius needs 1 <= k < n, got k={k}, n={}",
            points.len()
        )));
    }
    let mut dists = Vec::with_capacity(points.len() - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm()),
            );
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// Fraction of `gen` inside the union of k-NN balls around `real`.
pub fn improved_precision(gen: &[FeatureVector], real: &[FeatureVector], k: usize) -> Result<f64> {
    if gen.is_empty() || real.is_empty() {
        return Err(contract("precision needs non-empty generated and real sets"));
    }
    let radii = knn_radii(real, k)?;
    let inside = gen
        .iter()
        .filter(|g| real.iter().zip(&radii).any(|(r, rad)| (*g - r).norm() <= *rad))
        .count();
    Ok(inside as f64 / gen.len() as f64)
}

/// Fraction of `real` inside the union of k-NN balls around `gen`.
pub fn improved_recall(gen: &[FeatureVector], real: &[FeatureVector], k: usize) -> Result<f64> {
    improved_precision(real, gen, k)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Quantile without interpolation: the order statistic at
/// `floor(q * (n - 1))`.
pub fn lower_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).floor() as usize;
    Some(sorted[idx])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    /// Mean over object classes of the per-class lower-tail posterior.
    pub score: f64,
    pub per_object: BTreeMap<ObjectId, f64>,
    /// Classes of the world that had no generated samples.
    pub excluded: Vec<ObjectId>,
}

/// Per-class 10th percentile of `p(object | x)` under the reference world,
/// averaged over classes.
pub fn consistency_score(generated: &[LabeledSample], world: &MixtureWorld) -> Result<Consistency> {
    consistency_over(generated, world, &world.objects())
}

fn consistency_over(generated: &[LabeledSample], world: &MixtureWorld, classes: &[ObjectId]) -> Result<Consistency> {
    let mut by_object: BTreeMap<ObjectId, Vec<f64>> = BTreeMap::new();
    for s in generated {
        let p = world.posterior_log_prob(&s.x, &LabelQuery::Object(s.cond.object))?.exp();
        by_object.entry(s.cond.object).or_default().push(p);
    }
    let mut per_object = BTreeMap::new();
    let mut excluded = Vec::new();
    for o in classes {
        match by_object.get(o).and_then(|ps| lower_quantile(ps, CONSISTENCY_QUANTILE)) {
            Some(q) => {
                per_object.insert(*o, q);
            }
            None => excluded.push(*o),
        }
    }
    for o in by_object.keys() {
        if !classes.contains(o) {
            return Err(contract(format!("generated object {o} is unknown to the world")));
        }
    }
    if per_object.is_empty() {
        return Err(contract("consistency needs at least one class with samples"));
    }
    let score = per_object.values().sum::<f64>() / per_object.len() as f64;
    Ok(Consistency {
        score,
        per_object,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Averaging {
    #[default]
    Unweighted,
    /// Weighted by the number of real samples in each region.
    ByRealCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_region: BTreeMap<RegionId, RegionMetrics>,
    pub average: RegionMetrics,
    pub worst_region: RegionId,
}

impl MetricsReport {
    pub fn worst(&self) -> &RegionMetrics {
        &self.per_region[&self.worst_region]
    }
}

/// Lowest F1 wins; ties go to the smallest region id.
pub fn worst_by_f1(per_region: &BTreeMap<RegionId, RegionMetrics>) -> Option<RegionId> {
    let mut best: Option<(RegionId, f64)> = None;
    for (r, m) in per_region {
        if best.is_none_or(|(_, f)| m.f1 < f) {
            best = Some((*r, m.f1));
        }
    }
    best.map(|(r, _)| r)
}

pub fn region_report(eval: &EvalSet, world: &MixtureWorld, k: usize, averaging: Averaging) -> Result<MetricsReport> {
    let mut real: BTreeMap<RegionId, Vec<FeatureVector>> = BTreeMap::new();
    let mut gen: BTreeMap<RegionId, Vec<LabeledSample>> = BTreeMap::new();
    for s in &eval.real {
        real.entry(s.cond.region).or_default().push(s.x.clone());
    }
    for s in &eval.generated {
        gen.entry(s.cond.region).or_default().push(s.clone());
    }
    let regions: BTreeSet<RegionId> = real.keys().chain(gen.keys()).copied().collect();
    if regions.is_empty() {
        return Err(contract("evaluation set is empty"));
    }
    let missing: Vec<String> = regions
        .iter()
        .filter(|r| !real.contains_key(r) || !gen.contains_key(r))
        .map(|r| r.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(contract(format!(
            "regions without both real and generated samples: {}",
            missing.join(", ")
        )));
    }

    let classes = world.objects();
    let mut per_region = BTreeMap::new();
    for r in &regions {
        let real_r = &real[r];
        let gen_r = &gen[r];
        let gen_x: Vec<FeatureVector> = gen_r.iter().map(|s| s.x.clone()).collect();
        let precision = improved_precision(&gen_x, real_r, k)?;
        let recall = improved_recall(&gen_x, real_r, k)?;
        let present: Vec<ObjectId> = classes
            .iter()
            .copied()
            .filter(|o| gen_r.iter().any(|s| s.cond.object == *o))
            .collect();
        let consistency = consistency_over(gen_r, world, &present)?.score;
        per_region.insert(
            *r,
            RegionMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                consistency,
            },
        );
    }

    let weights: Vec<f64> = regions
        .iter()
        .map(|r| match averaging {
            Averaging::Unweighted => 1.0,
            Averaging::ByRealCount => real[r].len() as f64,
        })
        .collect();
    let average = weighted_mean(per_region.values().copied().zip(weights));
    let worst_region = worst_by_f1(&per_region).expect("non-empty regions");
    Ok(MetricsReport {
        per_region,
        average,
        worst_region,
    })
}

/// Component-wise weighted mean of metric rows.
pub fn weighted_mean(rows: impl IntoIterator<Item = (RegionMetrics, f64)>) -> RegionMetrics {
    let mut acc = RegionMetrics::default();
    let mut total = 0.0;
    for (m, w) in rows {
        acc.precision += w * m.precision;
        acc.recall += w * m.recall;
        acc.f1 += w * m.f1;
        acc.consistency += w * m.consistency;
        total += w;
    }
    if total > 0.0 {
        acc.precision /= total;
        acc.recall /= total;
        acc.f1 /= total;
        acc.consistency /= total;
    }
    acc
}
