//! One-region-out hyperparameter selection.
//!
//! The configuration chosen for region `r` is the one with the best mean F1
//! over every region except `r`, so no region's own score influences its
//! choice.

use std::collections::{BTreeMap, BTreeSet};

use cvsg::diffusion::RegionId;

use crate::experiment::RunRecord;
use crate::report::{rows_for, ResultRow};
use crate::HarnessError;

/// Config hash chosen for each region. Ties go to the lexicographically
/// smallest config hash.
pub fn one_region_out_select(rows: &[ResultRow]) -> Result<BTreeMap<RegionId, String>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Config("selection needs at least one record".into()));
    }
    // config -> region -> seed -> f1
    let mut table: BTreeMap<&str, BTreeMap<RegionId, BTreeMap<u64, f64>>> = BTreeMap::new();
    for r in rows {
        if !r.metrics.f1.is_finite() {
            return Err(HarnessError::Config(format!(
                "non-finite F1 for config {} region {} seed {}",
                r.config_hash, r.region, r.seed
            )));
        }
        let prev = table
            .entry(&r.config_hash)
            .or_default()
            .entry(r.region)
            .or_default()
            .insert(r.seed, r.metrics.f1);
        if prev.is_some() {
            return Err(HarnessError::Config(format!(
                "duplicate record for config {} region {} seed {}",
                r.config_hash, r.region, r.seed
            )));
        }
    }
    let regions: BTreeSet<RegionId> = rows.iter().map(|r| r.region).collect();
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    if regions.len() < 2 {
        return Err(HarnessError::Config("one-region-out selection needs at least two regions".into()));
    }
    let mut gaps = Vec::new();
    for (cfg, by_region) in &table {
        for r in &regions {
            for s in &seeds {
                if !by_region.get(r).is_some_and(|m| m.contains_key(s)) {
                    gaps.push(format!("{cfg}/{r}/seed {s}"));
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(HarnessError::Config(format!("incomplete coverage: missing {}", gaps.join(", "))));
    }

    let region_means: BTreeMap<&str, BTreeMap<RegionId, f64>> = table
        .iter()
        .map(|(cfg, by_region)| {
            let means = by_region
                .iter()
                .map(|(r, by_seed)| (*r, by_seed.values().sum::<f64>() / by_seed.len() as f64))
                .collect();
            (*cfg, means)
        })
        .collect();

    let mut chosen = BTreeMap::new();
    for held_out in &regions {
        let mut best: Option<(&str, f64)> = None;
        // BTreeMap iteration is lexicographic, so a strict comparison keeps
        // the smallest hash among ties
        for (cfg, means) in &region_means {
            let others: Vec<f64> = means.iter().filter(|(r, _)| *r != held_out).map(|(_, f)| *f).collect();
            let score = others.iter().sum::<f64>() / others.len() as f64;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((cfg, score));
            }
        }
        chosen.insert(*held_out, best.expect("at least one config").0.to_string());
    }
    Ok(chosen)
}

pub fn select_records(records: &[RunRecord]) -> Result<BTreeMap<RegionId, String>, HarnessError> {
    let rows: Vec<ResultRow> = records
        .iter()
        .flat_map(|r| rows_for(&r.config, &r.config_hash, &r.seeds))
        .collect();
    one_region_out_select(&rows)
}
