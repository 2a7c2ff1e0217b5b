use std::collections::HashSet;

use proptest::prelude::*;
use rld_core::analysis::{
    compute_metrics, deployed_count, deployment_coverage, deployment_order, triple_distribution_report,
    write_coverage_csv, CoverageIndex, Metrics, Strategy,
};
use rld_core::topology::{generate_synthetic_topology, parse_as_rel, SyntheticParams};
use rld_core::tripledata::{generate_all, local_dataset};
use rld_core::{Asn, Execution, Label};

#[test]
fn metrics_from_counts() {
    let m = Metrics::from_counts(8, 2, 5, 1);
    assert_eq!(m.total(), 16);
    assert!((m.accuracy - 13.0 / 16.0).abs() < 1e-15);
    assert!((m.precision - 0.8).abs() < 1e-15);
    assert!((m.recall - 8.0 / 9.0).abs() < 1e-15);
    assert!((m.f1 - 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0)).abs() < 1e-15);
    assert!(!m.degenerate);
    let none = Metrics::from_counts(0, 0, 4, 0);
    assert!(none.degenerate);
    assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    assert!(compute_metrics(&[Label::Malicious], &[]).is_err());
    assert!(compute_metrics(&[], &[]).is_err());
}

#[test]
fn coverage_endpoints_and_monotonicity() {
    let g = generate_synthetic_topology(4, 200, SyntheticParams::default()).unwrap();
    let rates: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let index = CoverageIndex::build(&g, Execution::Parallel).unwrap();
    for s in Strategy::ALL {
        let c = index.curve(&g, s, &rates).unwrap();
        assert_eq!(c.points[0].coverage, 0.0);
        assert_eq!(c.points[0].deployed, 0);
        assert_eq!(c.points[20].coverage, 1.0);
        assert!(c.points.windows(2).all(|w| w[0].coverage <= w[1].coverage));
        let seq = deployment_coverage(&g, s, &rates, Execution::Sequential).unwrap();
        assert_eq!(seq, c);
    }
    let mut csv = Vec::new();
    write_coverage_csv(&mut csv, &[index.curve(&g, Strategy::Peer, &[0.5]).unwrap()]).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "strategy,rate,deployed,coverage");
    assert!(text.lines().nth(1).unwrap().starts_with("peer,0.5,100,"));
}

#[test]
fn coverage_matches_direct_union() {
    let g = generate_synthetic_topology(6, 120, SyntheticParams::default()).unwrap();
    let all = generate_all(&g, g.nodes(), Execution::Parallel).unwrap();
    let universe: HashSet<u128> = all
        .iter()
        .flat_map(|d| d.samples.iter().filter(|s| s.label == Label::Malicious).map(|s| s.triple.key()))
        .collect();
    let order = deployment_order(&g, Strategy::Customer);
    let k = deployed_count(0.1, g.node_count()).unwrap();
    let covered: HashSet<u128> = order[..k]
        .iter()
        .flat_map(|&m| local_dataset(&g, m).unwrap().samples)
        .filter(|s| s.label == Label::Malicious)
        .map(|s| s.triple.key())
        .collect();
    let c = deployment_coverage(&g, Strategy::Customer, &[0.1], Execution::Parallel).unwrap();
    assert_eq!(c.points[0].deployed, k);
    assert!((c.points[0].coverage - covered.len() as f64 / universe.len() as f64).abs() < 1e-15);
}

#[test]
fn deployment_order_breaks_ties_by_asn() {
    // AS 1 and AS 2 each have two customers; AS 3 has one.
    let g = parse_as_rel("1|10|-1\n1|11|-1\n2|12|-1\n2|13|-1\n3|14|-1\n".as_bytes()).unwrap();
    let order = deployment_order(&g, Strategy::Customer);
    assert_eq!(&order[..3], &[Asn(1), Asn(2), Asn(3)]);
    assert!(deployed_count(1.5, 10).is_err());
    assert_eq!(deployed_count(0.01, 250).unwrap(), 3);
}

#[test]
fn distribution_report_counts_everything() {
    let g = generate_synthetic_topology(2, 150, SyntheticParams::default()).unwrap();
    let d = triple_distribution_report(&g, Execution::Parallel).unwrap();
    let all = generate_all(&g, g.nodes(), Execution::Parallel).unwrap();
    assert_eq!(d.total, all.iter().map(|c| c.len()).sum::<usize>());
    assert_eq!(d.malicious + d.regular, d.total);
    let cdf = d.inference_cdf();
    assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
    assert_eq!(cdf.last().unwrap().1, 1.0);
    let median = d.median_inference_fraction().unwrap();
    assert!((0.0..=1.0).contains(&median));
}

proptest! {
    #[test]
    fn metrics_match_counted_confusion(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let label = |m: bool| if m { Label::Malicious } else { Label::Regular };
        let preds: Vec<Label> = pairs.iter().map(|p| label(p.0)).collect();
        let truths: Vec<Label> = pairs.iter().map(|p| label(p.1)).collect();
        let m = compute_metrics(&preds, &truths).unwrap();
        let count = |a: bool, b: bool| pairs.iter().filter(|p| p.0 == a && p.1 == b).count();
        prop_assert_eq!((m.tp, m.fp, m.tn, m.fn_), (count(true, true), count(true, false), count(false, false), count(false, true)));
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }
}
