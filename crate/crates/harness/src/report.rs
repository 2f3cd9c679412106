//! Result tables, aggregates and plot data.
//!
//! `results.csv` has one row per (config, region, seed) with the header
//! [`RESULTS_HEADER`]. Floats are written in Rust's shortest round-trip
//! form, so [`parse_results`] recovers every value bit for bit and
//! [`aggregate_rows`] over the parsed rows equals the in-memory aggregate.
//! Wall-clock timing goes to `timing.txt`, the only non-deterministic file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cvsg::diffusion::RegionId;
use cvsg::metrics::{weighted_mean, worst_by_f1, Averaging, RegionMetrics};

use crate::config::ExperimentConfig;
use crate::experiment::{RunRecord, SeedResult};
use crate::HarnessError;

pub const RESULTS_HEADER: [&str; 15] = [
    "config_hash",
    "method",
    "alpha",
    "beta",
    "gamma",
    "gfreq",
    "exemplars",
    "averaging",
    "seed",
    "region",
    "real_count",
    "precision",
    "recall",
    "f1",
    "consistency",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    pub method: String,
    /// Effective weights after the method's restrictions.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub gfreq: usize,
    pub exemplars: usize,
    pub averaging: Averaging,
    pub seed: u64,
    pub region: RegionId,
    pub real_count: usize,
    pub metrics: RegionMetrics,
}

/// Mean over seeds of per-region, average and worst-region metrics. The
/// worst region is picked per seed by F1.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub per_region: BTreeMap<RegionId, RegionMetrics>,
    pub average: RegionMetrics,
    pub worst: RegionMetrics,
    /// Worst region of each seed, in seed order.
    pub worst_regions: Vec<(u64, RegionId)>,
    pub seeds: usize,
}

fn averaging_name(a: Averaging) -> &'static str {
    match a {
        Averaging::Unweighted => "unweighted",
        Averaging::ByRealCount => "by_real_count",
    }
}

/// Table rows of every seed that produced a report.
pub fn rows_for(cfg: &ExperimentConfig, config_hash: &str, seeds: &[SeedResult]) -> Vec<ResultRow> {
    let (alpha, beta) = cfg.effective_weights();
    let mut rows = Vec::new();
    for s in seeds {
        let Some(report) = &s.report else { continue };
        for (region, metrics) in &report.per_region {
            rows.push(ResultRow {
                config_hash: config_hash.to_string(),
                method: cfg.method.to_string(),
                alpha,
                beta,
                gamma: cfg.guidance.gamma,
                gfreq: cfg.guidance.gfreq,
                exemplars: cfg.exemplars,
                averaging: cfg.averaging,
                seed: s.seed,
                region: *region,
                real_count: s.real_counts.get(region).copied().unwrap_or(0),
                metrics: *metrics,
            });
        }
    }
    rows
}

/// Aggregate of rows that all belong to one configuration.
pub fn aggregate_rows(rows: &[ResultRow]) -> Aggregate {
    let mut by_seed: BTreeMap<u64, BTreeMap<RegionId, (RegionMetrics, usize)>> = BTreeMap::new();
    for r in rows {
        by_seed
            .entry(r.seed)
            .or_default()
            .insert(r.region, (r.metrics, r.real_count));
    }
    let averaging = rows.first().map_or(Averaging::Unweighted, |r| r.averaging);
    let mut averages = Vec::new();
    let mut worsts = Vec::new();
    let mut worst_regions = Vec::new();
    let mut per_region_rows: BTreeMap<RegionId, Vec<(RegionMetrics, f64)>> = BTreeMap::new();
    for (seed, regions) in &by_seed {
        let metrics: BTreeMap<RegionId, RegionMetrics> = regions.iter().map(|(r, (m, _))| (*r, *m)).collect();
        let avg = weighted_mean(regions.values().map(|(m, n)| {
            let w = match averaging {
                Averaging::Unweighted => 1.0,
                Averaging::ByRealCount => *n as f64,
            };
            (*m, w)
        }));
        averages.push((avg, 1.0));
        let worst = worst_by_f1(&metrics).expect("seed has at least one region");
        worsts.push((metrics[&worst], 1.0));
        worst_regions.push((*seed, worst));
        for (r, m) in metrics {
            per_region_rows.entry(r).or_default().push((m, 1.0));
        }
    }
    Aggregate {
        per_region: per_region_rows
            .into_iter()
            .map(|(r, ms)| (r, weighted_mean(ms)))
            .collect(),
        average: weighted_mean(averages),
        worst: weighted_mean(worsts),
        worst_regions,
        seeds: by_seed.len(),
    }
}

/// Aggregates keyed by config hash.
pub fn aggregates_by_config(rows: &[ResultRow]) -> BTreeMap<String, Aggregate> {
    let mut groups: BTreeMap<String, Vec<ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.config_hash.clone()).or_default().push(r.clone());
    }
    groups.into_iter().map(|(k, rs)| (k, aggregate_rows(&rs))).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".to_string(), |g| g.to_string())
}

pub fn results_csv(records: &[&RunRecord]) -> Result<String, HarnessError> {
    let rows: Vec<ResultRow> = records
        .iter()
        .flat_map(|rec| rows_for(&rec.config, &rec.config_hash, &rec.seeds))
        .collect();
    rows_csv(&rows)
}

/// Results table text. Floats use the shortest representation that parses
/// back to the same bits, so `parse_results` inverts this exactly.
pub fn rows_csv(rows: &[ResultRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in rows {
        let m = r.metrics;
        w.write_record([
            r.config_hash.clone(),
            r.method.clone(),
            r.alpha.to_string(),
            r.beta.to_string(),
            opt(r.gamma),
            r.gfreq.to_string(),
            r.exemplars.to_string(),
            averaging_name(r.averaging).to_string(),
            r.seed.to_string(),
            r.region.to_string(),
            r.real_count.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.consistency.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Parse(e.to_string()))
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Parse(e.to_string())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T, HarnessError> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| HarnessError::Parse(format!("line {line}: bad {} value {raw:?}", RESULTS_HEADER[i])))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(HarnessError::Parse(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let region: String = field(&rec, 9, line)?;
        let region = region
            .strip_prefix('r')
            .and_then(|s| s.parse().ok())
            .map(RegionId)
            .ok_or_else(|| HarnessError::Parse(format!("line {line}: bad region {region:?}")))?;
        let gamma: String = field(&rec, 4, line)?;
        let averaging = match rec.get(7) {
            Some("unweighted") => Averaging::Unweighted,
            Some("by_real_count") => Averaging::ByRealCount,
            other => return Err(HarnessError::Parse(format!("line {line}: bad averaging {other:?}"))),
        };
        rows.push(ResultRow {
            config_hash: field(&rec, 0, line)?,
            method: field(&rec, 1, line)?,
            alpha: field(&rec, 2, line)?,
            beta: field(&rec, 3, line)?,
            gamma: if gamma == "none" {
                None
            } else {
                Some(field(&rec, 4, line)?)
            },
            gfreq: field(&rec, 5, line)?,
            exemplars: field(&rec, 6, line)?,
            averaging,
            seed: field(&rec, 8, line)?,
            region,
            real_count: field(&rec, 10, line)?,
            metrics: RegionMetrics {
                precision: field(&rec, 11, line)?,
                recall: field(&rec, 12, line)?,
                f1: field(&rec, 13, line)?,
                consistency: field(&rec, 14, line)?,
            },
        });
    }
    Ok(rows)
}

fn aggregate_header() -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<13} {:<16} {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} | worst regions",
        "method", "config", "alpha", "beta", "F1", "", "Prec.", "", "Recall", "", "Consist", "", "VS"
    );
    let _ = writeln!(
        out,
        "{:<13} {:<16} {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7} |",
        "", "", "", "", "Avg.", "Worst", "Avg.", "Worst", "Avg.", "Worst", "Avg.", "Worst", "Avg."
    );
    out
}

fn aggregate_line(out: &mut String, method: &str, hash: &str, alpha: f64, beta: f64, agg: Option<&Aggregate>, vendi: Option<f64>) {
    let _ = write!(out, "{method:<13} {hash:<16} {alpha:>7.3} {beta:>7.3} |");
    let Some(a) = agg else {
        let _ = writeln!(out, " no report");
        return;
    };
    let pairs = [
        (a.average.f1, a.worst.f1),
        (a.average.precision, a.worst.precision),
        (a.average.recall, a.worst.recall),
        (a.average.consistency, a.worst.consistency),
    ];
    for (avg, worst) in pairs {
        let _ = write!(out, " {avg:>7.4} {worst:>7.4} |");
    }
    let vs = vendi.map_or("-".to_string(), |v| format!("{v:.3}"));
    let worst: Vec<String> = a.worst_regions.iter().map(|(_, r)| r.to_string()).collect();
    let _ = writeln!(out, " {vs:>7} | {}", worst.join(","));
}

/// Avg./Worst-Reg. table, one line per record.
pub fn aggregate_text(records: &[&RunRecord]) -> String {
    let mut out = aggregate_header();
    for rec in records {
        let (alpha, beta) = rec.config.effective_weights();
        aggregate_line(
            &mut out,
            rec.config.method.name(),
            &rec.config_hash,
            alpha,
            beta,
            rec.aggregate.as_ref(),
            Some(rec.mean_output_vendi()),
        );
    }
    out
}

/// The same table rebuilt from parsed result rows, one line per config in
/// first-appearance order. Output Vendi Scores are not part of the rows.
pub fn aggregate_text_from_rows(rows: &[ResultRow]) -> String {
    let aggregates = aggregates_by_config(rows);
    let mut out = aggregate_header();
    let mut seen = std::collections::BTreeSet::new();
    for r in rows {
        if seen.insert(r.config_hash.as_str()) {
            aggregate_line(&mut out, &r.method, &r.config_hash, r.alpha, r.beta, aggregates.get(&r.config_hash), None);
        }
    }
    out
}

fn coords(x: &cvsg::FeatureVector) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Generations of the first seed against the reference and sampler modes.
pub fn scatter_text(rec: &RunRecord) -> String {
    let mut out = String::from("# set object region coordinates...\n");
    let Some(first) = rec.seeds.first() else { return out };
    let bundle = &first.bundle;
    for c in bundle.reference_world.components() {
        let _ = writeln!(out, "reference_mode {} {} {}", c.object, c.region, coords(&c.mean));
    }
    for c in bundle.sampler_world.components() {
        let _ = writeln!(out, "sampler_mode {} {} {}", c.object, c.region, coords(&c.mean));
    }
    for cell in &first.cells {
        for x in &cell.samples {
            let _ = writeln!(out, "generated {} {} {}", cell.cond.object, cell.cond.region, coords(x));
        }
    }
    out
}

/// Output Vendi Score and recall against the guidance weights.
pub fn alpha_vs_text(records: &[&RunRecord]) -> String {
    let mut rows: Vec<(String, f64, f64, String, f64, f64)> = records
        .iter()
        .map(|r| {
            let (a, b) = r.config.effective_weights();
            let recall = r.aggregate.as_ref().map_or(f64::NAN, |g| g.average.recall);
            (r.config.method.to_string(), a, b, r.config_hash.clone(), r.mean_output_vendi(), recall)
        })
        .collect();
    rows.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(x.1.total_cmp(&y.1))
            .then(x.2.total_cmp(&y.2))
            .then(x.3.cmp(&y.3))
    });
    let mut out = String::from("# method alpha beta config_hash vendi recall\n");
    for (m, a, b, h, vs, rc) in rows {
        let _ = writeln!(out, "{m} {a} {b} {h} {vs} {rc}");
    }
    out
}

pub fn diagnostics_text(records: &[&RunRecord]) -> String {
    let mut out = String::from(
        "# config_hash method trajectories guided_steps min_guided max_guided degenerate_fallbacks clipped_steps failed_cells\n",
    );
    for r in records {
        let d = r.diagnostics;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            r.config_hash,
            r.config.method,
            d.trajectories,
            d.guided_steps,
            d.min_guided_per_trajectory,
            d.max_guided_per_trajectory,
            d.degenerate_fallbacks,
            d.clipped_steps,
            r.failures().count()
        );
    }
    for r in records {
        for (seed, f) in r.failures() {
            let _ = writeln!(out, "# failure {} seed={seed} cell={} {}", r.config_hash, f.cond, f.message);
        }
        for s in &r.seeds {
            if let Some(e) = &s.eval_error {
                let _ = writeln!(out, "# eval_error {} seed={} {e}", r.config_hash, s.seed);
            }
        }
    }
    out
}

pub fn timing_text(records: &[&RunRecord]) -> String {
    let mut out = String::from("# config_hash method seconds_per_sample\n");
    for r in records {
        let _ = writeln!(out, "{} {} {}", r.config_hash, r.config.method, r.seconds_per_sample);
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes every table and plot file into `out_dir` (created if missing) and
/// returns the written paths.
pub fn emit_reports(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let refs: Vec<&RunRecord> = records.iter().collect();
    let mut paths = vec![
        write(out_dir, "results.csv", &results_csv(&refs)?)?,
        write(out_dir, "aggregate.txt", &aggregate_text(&refs))?,
        write(out_dir, "alpha_vs.dat", &alpha_vs_text(&refs))?,
        write(out_dir, "diagnostics.dat", &diagnostics_text(&refs))?,
        write(out_dir, "timing.txt", &timing_text(&refs))?,
    ];
    for r in records {
        let name = format!("scatter_{}_{}.dat", r.config.method, r.config_hash);
        paths.push(write(out_dir, &name, &scatter_text(r))?);
    }
    Ok(paths)
}
