use std::collections::BTreeMap;

use cvsg::diffusion::RegionId;
use cvsg::metrics::{Averaging, RegionMetrics};
use cvsg_harness::one_region_out_select;
use cvsg_harness::report::ResultRow;

fn row(config: &str, region: u32, seed: u64, f1: f64) -> ResultRow {
    ResultRow {
        config_hash: config.to_string(),
        method: "cvsg".to_string(),
        alpha: 1.0,
        beta: 2.0,
        gamma: None,
        gfreq: 5,
        exemplars: 2,
        averaging: Averaging::Unweighted,
        seed,
        region: RegionId(region),
        real_count: 10,
        metrics: RegionMetrics {
            precision: f1,
            recall: f1,
            f1,
            consistency: 1.0,
        },
    }
}

/// `table[c][r]` holds the per-seed F1 values of config `c` in region `r`.
fn rows(table: &[(&str, [&[f64]; 3])]) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for (cfg, regions) in table {
        for (r, seeds) in regions.iter().enumerate() {
            for (s, f1) in seeds.iter().enumerate() {
                out.push(row(cfg, r as u32, s as u64, *f1));
            }
        }
    }
    out
}

fn expect(pairs: &[(u32, &str)]) -> BTreeMap<RegionId, String> {
    pairs.iter().map(|(r, c)| (RegionId(*r), c.to_string())).collect()
}

#[test]
fn single_config_is_chosen_everywhere() {
    let t = rows(&[("aaaa", [&[0.3], &[0.4], &[0.5]])]);
    assert_eq!(one_region_out_select(&t).unwrap(), expect(&[(0, "aaaa"), (1, "aaaa"), (2, "aaaa")]));
}

#[test]
fn dominating_config_wins_every_region() {
    let t = rows(&[
        ("aaaa", [&[0.3, 0.2], &[0.4, 0.4], &[0.5, 0.1]]),
        ("bbbb", [&[0.6, 0.5], &[0.7, 0.9], &[0.8, 0.6]]),
    ]);
    assert_eq!(one_region_out_select(&t).unwrap(), expect(&[(0, "bbbb"), (1, "bbbb"), (2, "bbbb")]));
}

#[test]
fn held_out_region_does_not_pick_its_own_best() {
    // per-region seed means:   r0   r1   r2
    //                    a    0.9  0.2  0.2
    //                    b    0.1  0.6  0.6
    //                    c    0.6  0.6  0.1
    // r0 is best served by a on its own scores, but the others favour b
    let t = rows(&[
        ("a", [&[1.0, 0.8], &[0.2, 0.2], &[0.1, 0.3]]),
        ("b", [&[0.1, 0.1], &[0.5, 0.7], &[0.6, 0.6]]),
        ("c", [&[0.6, 0.6], &[0.5, 0.7], &[0.0, 0.2]]),
    ]);
    assert_eq!(one_region_out_select(&t).unwrap(), expect(&[(0, "b"), (1, "a"), (2, "c")]));
}

#[test]
fn ties_go_to_the_smallest_hash() {
    let t = rows(&[
        ("f00d", [&[0.5], &[0.5], &[0.5]]),
        ("beef", [&[0.5], &[0.5], &[0.5]]),
    ]);
    assert_eq!(one_region_out_select(&t).unwrap(), expect(&[(0, "beef"), (1, "beef"), (2, "beef")]));
}

#[test]
fn missing_coverage_is_reported() {
    let mut t = rows(&[
        ("a", [&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]),
        ("b", [&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]),
    ]);
    t.retain(|r| !(r.config_hash == "b" && r.region == RegionId(2) && r.seed == 1));
    let err = one_region_out_select(&t).unwrap_err().to_string();
    assert!(err.contains("b/r2/seed 1"), "{err}");
}

#[test]
fn malformed_tables_are_rejected() {
    assert!(one_region_out_select(&[]).is_err());
    assert!(one_region_out_select(&[row("a", 0, 0, 0.5)]).is_err());
    let dup = vec![row("a", 0, 0, 0.5), row("a", 1, 0, 0.5), row("a", 1, 0, 0.6)];
    assert!(one_region_out_select(&dup).unwrap_err().to_string().contains("duplicate"));
    let nan = vec![row("a", 0, 0, 0.5), row("a", 1, 0, f64::NAN)];
    assert!(one_region_out_select(&nan).unwrap_err().to_string().contains("non-finite"));
}
