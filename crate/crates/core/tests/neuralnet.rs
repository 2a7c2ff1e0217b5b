use proptest::prelude::*;
use rld_core::neuralnet::{
    apply_update, encode_triple, forward, init_model, mean_loss, model_get_update, predict_batch, train_epochs,
    Architecture, ModelConfig, ModelParams, ModelUpdate, INPUT_BITS,
};
use rld_core::{Asn, ClientDataset, Execution, Label, LabeledTriple, Origin, Triple};

#[test]
fn default_model_size() {
    let p = init_model(&ModelConfig::default()).unwrap();
    assert_eq!(p.len(), 123_586);
    let dense = init_model(&ModelConfig { architecture: Architecture::Dense, ..Default::default() }).unwrap();
    assert_eq!(dense.len(), INPUT_BITS * 128 + 128 + 128 * 64 + 64 + 64 * 2 + 2);
}

#[test]
fn encoding_is_big_endian_per_asn() {
    let bits = encode_triple(&Triple::new(1, 0x8000_0000u32, 0)).bits();
    assert_eq!(bits[31], 1);
    assert_eq!(bits[32], 1);
    assert_eq!(bits.iter().map(|&b| b as u32).sum::<u32>(), 2);
    assert_eq!(encode_triple(&Triple::new(7, 8, 9)).decode(), Triple::new(7, 8, 9));
}

#[test]
fn training_learns_a_separable_rule() {
    // Malicious exactly when the middle ASN is odd.
    let cfg = ModelConfig { hidden1: 16, hidden2: 8, seed: 4, learning_rate: 0.01, ..Default::default() };
    let samples: Vec<LabeledTriple> = (0..400u32)
        .map(|i| LabeledTriple {
            triple: Triple::new(i * 31 + 7, i, i * 17 + 3),
            label: if i % 2 == 1 { Label::Malicious } else { Label::Regular },
            origin: Origin::Direct,
            owner: Asn(i),
        })
        .collect();
    let data = ClientDataset::new(Asn(1), samples);
    let init = init_model(&cfg).unwrap();
    let trained = train_epochs(&init, &data, 30, &cfg, 1).unwrap();
    assert!(mean_loss(&trained, &data.samples) < mean_loss(&init, &data.samples) / 4.0);
    let triples: Vec<Triple> = data.samples.iter().map(|s| s.triple).collect();
    let preds = predict_batch(&trained, &triples, Execution::Parallel);
    let correct = preds.iter().zip(&data.samples).filter(|(p, s)| **p == s.label).count();
    assert!(correct >= 390, "{correct}");
    assert_eq!(preds, predict_batch(&trained, &triples, Execution::Sequential));
}

#[test]
fn serialization_round_trips() {
    let p = init_model(&ModelConfig { hidden1: 5, hidden2: 3, seed: 2, ..Default::default() }).unwrap();
    assert_eq!(ModelParams::from_bytes(&p.to_bytes()).unwrap(), p);
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    assert_eq!(ModelParams::read_from(&buf[..]).unwrap(), p);
    let u = ModelUpdate::zeros_like(&p);
    assert_eq!(ModelUpdate::from_bytes(&u.to_bytes()).unwrap(), u);
    let mut bad = p.to_bytes();
    bad[0] ^= 0xff;
    assert!(ModelParams::from_bytes(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_probabilities(a in any::<u32>(), b in any::<u32>(), c in any::<u32>(), seed in 0u64..50) {
        let p = init_model(&ModelConfig { hidden1: 4, hidden2: 3, seed, ..Default::default() }).unwrap();
        let out = forward(&p, &encode_triple(&Triple::new(a, b, c)));
        prop_assert!(out.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_round_trip(s1 in 0u64..100, s2 in 0u64..100) {
        let cfg = ModelConfig { hidden1: 3, hidden2: 2, ..Default::default() };
        let a = init_model(&ModelConfig { seed: s1, ..cfg }).unwrap();
        let b = init_model(&ModelConfig { seed: s2, ..cfg }).unwrap();
        let d = model_get_update(&a, &b).unwrap();
        let back = apply_update(&a, &d).unwrap();
        for (x, y) in back.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs().max(1.0));
        }
    }
}
