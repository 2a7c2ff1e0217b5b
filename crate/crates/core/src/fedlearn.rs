//! Federated training: local rounds, FedAvg aggregation and the global loop
//! that records every aggregated update on the ledger.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::analysis::{compute_metrics, AnalysisError, Metrics};
use crate::exec::Execution;
use crate::ledger::{KeyRing, Ledger, LedgerError, RoundSubmission, AUTHORITY};
use crate::neuralnet::{
    apply_update, init_model, AdamState, Trainer, mix_seed, model_get_update, predict_batch, train_epochs_with_losses, Digest, ModelConfig,
    ModelParams, ModelUpdate, NnError,
};
use crate::topology::Asn;
use crate::tripledata::{ClientDataset, LabeledTriple, Triple};

#[derive(Debug, thiserror::Error)]
pub enum FlError {
    #[error("invalid FL configuration: {0}")]
    Config(String),
    #[error("no clients")]
    NoClients,
    #[error("client {0} has no samples")]
    EmptyClient(Asn),
    #[error("duplicate client id {0}")]
    DuplicateClient(Asn),
    #[error("{updates} updates but {weights} weights")]
    WeightCount { updates: usize, weights: usize },
    #[error("aggregation weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Metrics(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Client weight proportional to its sample count.
    #[default]
    SizeProportional,
    Uniform,
}

/// Whether a client's Adam moments survive from one round to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerState {
    /// Each client keeps its optimizer for the whole task.
    #[default]
    Persistent,
    /// Every local round starts from fresh moments.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub weighting: Weighting,
    pub optimizer_state: OptimizerState,
    /// Master seed for client shuffles and ledger keys.
    pub seed: u64,
    pub execution: Execution,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            global_epochs: 70,
            weighting: Weighting::SizeProportional,
            optimizer_state: OptimizerState::Persistent,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.local_epochs == 0 {
            return Err(FlError::Config("local_epochs must be at least 1".into()));
        }
        if self.global_epochs == 0 {
            return Err(FlError::Config("global_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Shuffle seed of a client's local round `round` (1-based).
pub fn round_seed(master: u64, client: Asn, round: u64) -> u64 {
    mix_seed(mix_seed(master, client.0 as u64), round)
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: Asn,
    pub samples: usize,
    pub update: ModelUpdate,
    /// Mean training loss of each local epoch.
    pub losses: Vec<f64>,
}

/// `ce` local epochs from the global parameters, returned as the cumulative
/// parameter delta. Epoch `e` is shuffled by `(seed, e)`.
pub fn local_round(
    client: &ClientDataset,
    global: &ModelParams,
    ce: usize,
    config: &ModelConfig,
    seed: u64,
) -> Result<LocalUpdate, FlError> {
    if client.is_empty() {
        return Err(FlError::EmptyClient(client.id));
    }
    let (trained, losses) = train_epochs_with_losses(global, &client.samples, ce, config, seed)?;
    Ok(LocalUpdate { client: client.id, samples: client.len(), update: model_get_update(global, &trained)?, losses })
}

/// [`local_round`] continuing from (and advancing) the client's optimizer
/// state.
pub fn local_round_with_state(
    client: &ClientDataset,
    global: &ModelParams,
    adam: AdamState,
    ce: usize,
    config: &ModelConfig,
    seed: u64,
) -> Result<(LocalUpdate, AdamState), FlError> {
    if client.is_empty() {
        return Err(FlError::EmptyClient(client.id));
    }
    let mut trainer = Trainer::with_state(global.clone(), adam, config)?;
    let losses = (0..ce as u64)
        .map(|e| trainer.run_epoch(&client.samples, seed, e))
        .collect::<Result<Vec<_>, _>>()?;
    let (trained, adam) = trainer.into_parts();
    let update = model_get_update(global, &trained)?;
    Ok((LocalUpdate { client: client.id, samples: client.len(), update, losses }, adam))
}

/// Weighted element-wise mean of `updates`, weights normalized to sum 1.
///
/// Each element's weighted sum is accumulated exactly as a floating-point
/// expansion over its terms in a canonical order, then divided by the exact
/// total weight with one correction step. The result is within one ulp of the true
/// mean, exact when all updates agree, and independent of the order of the
/// `(update, weight)` pairs.
pub fn fed_avg(updates: &[ModelUpdate], weights: &[f64]) -> Result<ModelUpdate, FlError> {
    if updates.len() != weights.len() {
        return Err(FlError::WeightCount { updates: updates.len(), weights: weights.len() });
    }
    let first = updates.first().ok_or(FlError::NoUpdates)?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FlError::BadWeights);
    }
    let mut sorted_w = weights.to_vec();
    sorted_w.sort_by(f64::total_cmp);
    let mut total_exp = Vec::new();
    for &w in &sorted_w {
        grow_expansion(&mut total_exp, w);
    }
    let total = expansion_value(&total_exp);
    if total <= 0.0 {
        return Err(FlError::BadWeights);
    }
    for u in &updates[1..] {
        if u.shapes() != first.shapes() {
            return Err(NnError::ShapeMismatch("updates disagree in shape".into()).into());
        }
    }
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(updates.len());
    let mut exp = Vec::new();
    let delta = (0..first.delta().len())
        .map(|k| {
            terms.clear();
            terms.extend(updates.iter().zip(weights).map(|(u, &w)| (u.delta()[k], w)));
            terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            exp.clear();
            for &(x, w) in &terms {
                let (p, e) = two_product(x, w);
                grow_expansion(&mut exp, p);
                grow_expansion(&mut exp, e);
            }
            let q = expansion_value(&exp) / total;
            for &t in &total_exp {
                let (p, e) = two_product(q, t);
                grow_expansion(&mut exp, -p);
                grow_expansion(&mut exp, -e);
            }
            q + expansion_value(&exp) / total
        })
        .collect();
    let base = updates.iter().map(|u| u.base_version()).max().unwrap_or(0);
    Ok(ModelUpdate::from_parts(first.shapes().to_vec(), delta, base)?)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    (s, (a - (s - bv)) + (b - bv))
}

fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Adds `b` to a nonoverlapping expansion (components in increasing
/// magnitude), keeping it exact and dropping zero components.
fn grow_expansion(exp: &mut Vec<f64>, b: f64) {
    let mut q = b;
    let mut out = 0;
    for i in 0..exp.len() {
        let (s, h) = two_sum(q, exp[i]);
        q = s;
        if h != 0.0 {
            exp[out] = h;
            out += 1;
        }
    }
    exp.truncate(out);
    if q != 0.0 || exp.is_empty() {
        exp.push(q);
    }
}

fn expansion_value(exp: &[f64]) -> f64 {
    exp.iter().sum()
}

/// Aggregation weights for `clients` under `mode`.
pub fn client_weights(clients: &[ClientDataset], mode: Weighting) -> Vec<f64> {
    clients
        .iter()
        .map(|c| match mode {
            Weighting::SizeProportional => c.len() as f64,
            Weighting::Uniform => 1.0,
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, test: &[LabeledTriple], exec: Execution) -> Result<Metrics, FlError> {
    if test.is_empty() {
        return Err(FlError::Metrics(AnalysisError::Empty));
    }
    let triples: Vec<Triple> = test.iter().map(|s| s.triple).collect();
    let truths: Vec<_> = test.iter().map(|s| s.label).collect();
    Ok(compute_metrics(&predict_batch(params, &triples, exec), &truths)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: Asn,
    pub samples: usize,
    pub weight: f64,
    /// Mean loss of the client's last local epoch.
    pub loss: f64,
    #[serde(with = "hex_digest")]
    pub update_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    /// 1-based global round, equal to the index of its ledger block.
    pub round: u64,
    pub clients: Vec<ClientRound>,
    #[serde(with = "hex_digest")]
    pub aggregate_digest: Digest,
    pub winner: Asn,
    #[serde(with = "hex_digest")]
    pub block_digest: Digest,
    pub metrics: Option<Metrics>,
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
    }
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub params: ModelParams,
    pub history: Vec<RoundResult>,
}

/// Deterministic FL simulation with a freshly created ledger keyed from the
/// FL seed.
pub fn run_fl_simulation(
    clients: &[ClientDataset],
    model_config: &ModelConfig,
    fl_config: &FlConfig,
    eval: Option<&[LabeledTriple]>,
) -> Result<(FlOutcome, Ledger), FlError> {
    let ids: Vec<Asn> = clients.iter().map(|c| c.id).collect();
    let keys = KeyRing::derive(fl_config.seed, &ids);
    let mut ledger = Ledger::new(keys.registry(), Default::default());
    let outcome = run_fl(clients, model_config, fl_config, &mut ledger, &keys, eval)?;
    Ok((outcome, ledger))
}

/// Global rounds `1..=ge`: every client trains from the current global
/// model, updates are averaged in ascending client-id order, the round
/// winner signs a block for the aggregate, and the aggregate is applied.
/// The ledger must be empty; its genesis block records the initial model.
pub fn run_fl(
    clients: &[ClientDataset],
    model_config: &ModelConfig,
    fl_config: &FlConfig,
    ledger: &mut Ledger,
    keys: &KeyRing,
    eval: Option<&[LabeledTriple]>,
) -> Result<FlOutcome, FlError> {
    fl_config.validate()?;
    model_config.validate()?;
    if clients.is_empty() {
        return Err(FlError::NoClients);
    }
    let mut clients: Vec<&ClientDataset> = clients.iter().collect();
    clients.sort_by_key(|c| c.id);
    for w in clients.windows(2) {
        if w[0].id == w[1].id {
            return Err(FlError::DuplicateClient(w[0].id));
        }
    }
    if let Some(c) = clients.iter().find(|c| c.is_empty()) {
        return Err(FlError::EmptyClient(c.id));
    }
    let ids: Vec<Asn> = clients.iter().map(|c| c.id).collect();
    let owned: Vec<ClientDataset> = clients.iter().map(|c| (*c).clone()).collect();
    let weights = client_weights(&owned, fl_config.weighting);

    let mut global = init_model(model_config)?;
    // The execution mode does not affect results, so it stays out of the chain.
    let mut fl_json = serde_json::to_value(fl_config).expect("config serializes");
    if let Some(map) = fl_json.as_object_mut() {
        map.remove("execution");
    }
    let description = serde_json::json!({ "model": model_config, "fl": fl_json }).to_string();
    ledger.start(&global, &ids, description.into_bytes(), keys.signer(AUTHORITY)?)?;

    let exec = fl_config.execution;
    let mut states: Vec<AdamState> = owned.iter().map(|_| AdamState::new(global.len())).collect();
    let mut history = Vec::with_capacity(fl_config.global_epochs);
    for round in 1..=fl_config.global_epochs as u64 {
        log::debug!("global round {round}");
        let jobs: Vec<(&ClientDataset, AdamState)> = owned.iter().zip(states.drain(..)).collect();
        let results = exec.try_map(&jobs, |(c, adam)| {
            let seed = round_seed(fl_config.seed, c.id, round);
            match fl_config.optimizer_state {
                OptimizerState::Persistent => {
                    local_round_with_state(c, &global, adam.clone(), fl_config.local_epochs, model_config, seed)
                }
                OptimizerState::Fresh => local_round(c, &global, fl_config.local_epochs, model_config, seed)
                    .map(|l| (l, adam.clone())),
            }
        })?;
        let mut locals = Vec::with_capacity(results.len());
        for (l, adam) in results {
            locals.push(l);
            states.push(adam);
        }
        let updates: Vec<ModelUpdate> = locals.iter().map(|l| l.update.clone()).collect();
        let aggregate = fed_avg(&updates, &weights)?;

        let winner = ledger.next_winner()?;
        let block = ledger.append_round(
            RoundSubmission { update: &aggregate, participants: &ids, winner },
            keys.signer(winner)?,
        )?;
        let block_digest = block.digest();
        let aggregate_digest = block.payload_digest;

        global = apply_update(&global, &aggregate)?;
        let metrics = match eval {
            Some(test) => Some(evaluate(&global, test, exec)?),
            None => None,
        };
        history.push(RoundResult {
            round,
            clients: locals
                .iter()
                .zip(&weights)
                .map(|(l, &weight)| ClientRound {
                    client: l.client,
                    samples: l.samples,
                    weight,
                    loss: l.losses.last().copied().unwrap_or(f64::NAN),
                    update_digest: l.update.digest(),
                })
                .collect(),
            aggregate_digest,
            winner,
            block_digest,
            metrics,
        });
    }
    Ok(FlOutcome { params: global, history })
}

/// One CSV row per round and client.
pub fn write_history_csv<W: Write>(mut w: W, history: &[RoundResult]) -> io::Result<()> {
    writeln!(w, "round,client,samples,weight,loss,winner,block_digest,{}", Metrics::CSV_HEADER)?;
    for r in history {
        let metrics = r.metrics.map(|m| m.csv_row()).unwrap_or_else(|| ",,,,,,,,".into());
        for c in &r.clients {
            writeln!(
                w,
                "{},{},{},{},{:.8},{},{},{}",
                r.round,
                c.client.0,
                c.samples,
                c.weight,
                c.loss,
                r.winner.0,
                hex::encode(r.block_digest),
                metrics
            )?;
        }
    }
    Ok(())
}

/// One JSON record per line.
pub fn write_history_jsonl<W: Write>(mut w: W, history: &[RoundResult]) -> io::Result<()> {
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::LayerShape;
    use crate::tripledata::{Label, Origin};

    fn update(values: &[f64]) -> ModelUpdate {
        ModelUpdate::from_parts(vec![LayerShape::new("w", &[values.len()])], values.to_vec(), 0).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig { hidden1: 4, hidden2: 3, ..Default::default() }
    }

    fn client(id: u32, n: usize, offset: u32) -> ClientDataset {
        let samples = (0..n as u32)
            .map(|i| LabeledTriple {
                triple: Triple::new(i + offset, 7, i * 3 + 1),
                label: if i % 3 == 0 { Label::Regular } else { Label::Malicious },
                origin: Origin::Direct,
                owner: Asn(7),
            })
            .collect();
        ClientDataset::new(Asn(id), samples)
    }

    #[test]
    fn fed_avg_arithmetic() {
        let avg = fed_avg(&[update(&[1.0]), update(&[3.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(avg.delta(), &[2.0]);
        let u = update(&[0.1, -2.5, 7.0]);
        let same = fed_avg(&[u.clone(), u.clone(), u.clone()], &[3.0, 0.5, 9.0]).unwrap();
        assert_eq!(same.delta(), u.delta());
    }

    #[test]
    fn fed_avg_errors() {
        assert!(matches!(fed_avg(&[], &[]), Err(FlError::NoUpdates)));
        assert!(matches!(fed_avg(&[update(&[1.0])], &[0.0]), Err(FlError::BadWeights)));
        assert!(matches!(fed_avg(&[update(&[1.0])], &[1.0, 2.0]), Err(FlError::WeightCount { .. })));
        assert!(fed_avg(&[update(&[1.0]), update(&[1.0, 2.0])], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn fed_avg_permutation_invariant() {
        let us = [update(&[0.3, 1e-9, -4.0]), update(&[0.7, 2.0, 1e8]), update(&[-0.1, 3.3, 0.25])];
        let ws = [5.0, 1.0, 2.5];
        let a = fed_avg(&us, &ws).unwrap();
        let b = fed_avg(&[us[2].clone(), us[0].clone(), us[1].clone()], &[ws[2], ws[0], ws[1]]).unwrap();
        assert_eq!(a.delta(), b.delta());
    }

    #[test]
    fn zero_learning_rate_gives_zero_update() {
        let cfg = ModelConfig { learning_rate: 0.0, ..small() };
        let g = init_model(&cfg).unwrap();
        let u = local_round(&client(1, 40, 0), &g, 2, &cfg, 5).unwrap();
        assert!(u.update.delta().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn local_round_deterministic() {
        let cfg = small();
        let g = init_model(&cfg).unwrap();
        let a = local_round(&client(1, 40, 0), &g, 2, &cfg, 5).unwrap();
        let b = local_round(&client(1, 40, 0), &g, 2, &cfg, 5).unwrap();
        assert_eq!(a.update, b.update);
        assert!(matches!(
            local_round(&ClientDataset::new(Asn(2), vec![]), &g, 1, &cfg, 0),
            Err(FlError::EmptyClient(_))
        ));
    }

    #[test]
    fn run_fl_builds_one_block_per_round() {
        let clients = vec![client(3, 30, 0), client(1, 50, 100), client(2, 20, 200)];
        let fl = FlConfig { global_epochs: 4, local_epochs: 1, seed: 9, ..Default::default() };
        let eval: Vec<LabeledTriple> = clients.iter().flat_map(|c| c.samples.clone()).collect();
        let (out, ledger) = run_fl_simulation(&clients, &small(), &fl, Some(&eval)).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(ledger.len(), 5);
        assert!(ledger.verify_chain().valid);
        assert_eq!(ledger.replay().unwrap().values(), out.params.values());
        for r in &out.history {
            assert!([Asn(1), Asn(2), Asn(3)].contains(&r.winner));
            assert!(r.metrics.is_some());
        }
        let mut csv = Vec::new();
        write_history_csv(&mut csv, &out.history).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn parallel_matches_sequential() {
        let clients = vec![client(1, 30, 0), client(2, 25, 50)];
        let base = FlConfig { global_epochs: 3, local_epochs: 2, seed: 1, ..Default::default() };
        let seq = FlConfig { execution: Execution::Sequential, ..base };
        let (a, _) = run_fl_simulation(&clients, &small(), &base, None).unwrap();
        let (b, _) = run_fl_simulation(&clients, &small(), &seq, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn config_validation() {
        let clients = vec![client(1, 10, 0)];
        let bad = FlConfig { global_epochs: 0, ..Default::default() };
        assert!(matches!(run_fl_simulation(&clients, &small(), &bad, None), Err(FlError::Config(_))));
        assert!(matches!(run_fl_simulation(&[], &small(), &FlConfig::default(), None), Err(FlError::NoClients)));
    }
}
