use std::collections::HashSet;

use proptest::prelude::*;
use rld_core::topology::{generate_synthetic_topology, SyntheticParams};
use rld_core::tripledata::{
    assign_group_clients, assign_group_clients_from_graph, dataset_distribution, generate_all, local_dataset,
    read_samples, write_samples, GroupPreset,
};
use rld_core::{AsGraph, Asn, Execution, Label, LabeledTriple, Origin, Triple};

fn graph() -> AsGraph {
    generate_synthetic_topology(3, 250, SyntheticParams::default()).unwrap()
}

#[test]
fn local_data_shape() {
    let g = graph();
    for &m in g.nodes().iter().take(60) {
        let d = local_dataset(&g, m).unwrap();
        let deg = g.degree(m).unwrap();
        let direct = d.samples.iter().filter(|s| s.origin == Origin::Direct).count();
        let inferred = d.samples.iter().filter(|s| s.origin == Origin::Inference).count();
        assert_eq!(direct, deg * deg.saturating_sub(1));
        assert_eq!(inferred, direct);
        assert!(d.samples.iter().all(LabeledTriple::owner_consistent));
        let keys: HashSet<_> = d.samples.iter().map(|s| (s.triple, s.origin)).collect();
        assert_eq!(keys.len(), d.len());
    }
}

#[test]
fn generation_is_execution_independent() {
    let g = graph();
    let a = generate_all(&g, g.nodes(), Execution::Sequential).unwrap();
    let b = generate_all(&g, g.nodes(), Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn group_clients_match_preset() {
    let g = generate_synthetic_topology(1, 400, SyntheticParams::default()).unwrap();
    let preset = GroupPreset::builtin(1).unwrap().scaled_to(4100);
    let clients = assign_group_clients_from_graph(&g, &preset, 1, 2_000_000).unwrap();
    assert_eq!(clients.len(), 5);
    let ids: HashSet<Asn> = clients.iter().map(|c| c.id).collect();
    assert_eq!(ids.len(), 5);
    let report = dataset_distribution(&clients);
    for (c, target) in report.clients.iter().zip(&preset.clients) {
        assert_eq!(c.total, target.size);
        assert_eq!(c.malicious, target.malicious);
        assert!((c.malicious_pct / 100.0 - target.nominal_malicious).abs() <= 0.02);
    }
    for c in &clients {
        let full: HashSet<_> = local_dataset(&g, c.id).unwrap().samples.into_iter().collect();
        assert!(c.samples.iter().all(|s| full.contains(s)));
    }
    let all = generate_all(&g, g.nodes(), Execution::Parallel).unwrap();
    assert_eq!(assign_group_clients(&all, &preset, 1).unwrap(), clients);
}

#[test]
fn infeasible_preset_is_an_error() {
    let g = generate_synthetic_topology(2, 30, SyntheticParams::default()).unwrap();
    let preset = GroupPreset::builtin(3).unwrap();
    assert!(assign_group_clients_from_graph(&g, &preset, 0, 2_000_000).is_err());
}

fn arb_sample() -> impl Strategy<Value = LabeledTriple> {
    (any::<[u32; 4]>(), any::<bool>(), 0usize..3).prop_map(|(a, mal, o)| LabeledTriple {
        triple: Triple::new(a[0], a[1], a[2]),
        label: if mal { Label::Malicious } else { Label::Regular },
        origin: [Origin::Direct, Origin::Inference, Origin::Reverse][o],
        owner: Asn(a[3]),
    })
}

proptest! {
    #[test]
    fn samples_round_trip(samples in prop::collection::vec(arb_sample(), 0..50)) {
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        prop_assert_eq!(read_samples(&buf[..]).unwrap(), samples);
    }

    #[test]
    fn triple_key_round_trip(a in any::<u32>(), b in any::<u32>(), c in any::<u32>()) {
        let t = Triple::new(a, b, c);
        prop_assert_eq!(Triple::from_key(t.key()), t);
        prop_assert_eq!(t.reversed().reversed(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn group_assignment_is_seeded(seed in 0u64..6) {
        let g = generate_synthetic_topology(1, 400, SyntheticParams::default()).unwrap();
        let preset = GroupPreset::builtin(4).unwrap().scaled_to(1500);
        let a = assign_group_clients_from_graph(&g, &preset, seed, 2_000_000).unwrap();
        let b = assign_group_clients_from_graph(&g, &preset, seed, 2_000_000).unwrap();
        prop_assert_eq!(&a, &b);
        for (c, t) in a.iter().zip(&preset.clients) {
            prop_assert_eq!(c.len(), t.size);
            prop_assert_eq!(c.stats().malicious, t.malicious);
        }
    }
}

#[test]
fn synthetic_malicious_share() {
    let g = generate_synthetic_topology(7, 500, SyntheticParams::default()).unwrap();
    let all = generate_all(&g, g.nodes(), Execution::Parallel).unwrap();
    let share = dataset_distribution(&all).malicious_pct / 100.0;
    eprintln!("synthetic malicious share {share:.4}");
    assert!((0.5..=0.8).contains(&share), "{share}");
}
