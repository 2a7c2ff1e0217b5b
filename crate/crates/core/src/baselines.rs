//! Comparison methods: relationship-repository detectors, central learning
//! over pooled client data, and single-client learning.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::analysis::{compute_metrics, Metrics};
use crate::neuralnet::{mix_seed, train_epochs_with_losses, ModelConfig, ModelParams, NnError};
use crate::topology::{AsGraph, Asn, Role, TopologyError};
use crate::tripledata::{is_valley_violation, ClientDataset, Label, LabeledTriple, Triple};

/// Relationships shared by the participants: every link incident to at
/// least one participant, stored from both endpoints' views.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalRepository {
    participants: BTreeSet<Asn>,
    roles: HashMap<(Asn, Asn), Role>,
}

impl GlobalRepository {
    pub fn participants(&self) -> &BTreeSet<Asn> {
        &self.participants
    }

    /// Number of links known.
    pub fn len(&self) -> usize {
        self.roles.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Role of `b` as seen from `a`, if the link is known.
    pub fn role(&self, a: Asn, b: Asn) -> Option<Role> {
        self.roles.get(&(a, b)).copied()
    }

    /// Valley-free verdict when both links of `t` are known.
    pub fn verdict(&self, t: &Triple) -> Option<Label> {
        let from = self.role(t.middle, t.first)?;
        let to = self.role(t.middle, t.last)?;
        Some(if t.first == t.last || is_valley_violation(from, to) { Label::Malicious } else { Label::Regular })
    }
}

pub fn build_global_repository(graph: &AsGraph, participants: &[Asn]) -> Result<GlobalRepository, TopologyError> {
    let mut repo = GlobalRepository::default();
    for &p in participants {
        for &(n, role) in graph.neighbors(p)? {
            repo.roles.insert((p, n), role);
            repo.roles.insert((n, p), role.dual());
        }
        repo.participants.insert(p);
    }
    Ok(repo)
}

/// What a repository detector answers for triples it cannot resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnknownPolicy {
    Random,
    AllMalicious,
    AllRegular,
}

impl UnknownPolicy {
    pub const ALL: [UnknownPolicy; 3] = [UnknownPolicy::Random, UnknownPolicy::AllMalicious, UnknownPolicy::AllRegular];

    pub fn name(self) -> &'static str {
        match self {
            UnknownPolicy::Random => "ml-random",
            UnknownPolicy::AllMalicious => "ml-0",
            UnknownPolicy::AllRegular => "ml-1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

pub fn ml_predict(repo: &GlobalRepository, t: &Triple, policy: UnknownPolicy, seed: u64) -> Label {
    if let Some(label) = repo.verdict(t) {
        return label;
    }
    match policy {
        UnknownPolicy::AllMalicious => Label::Malicious,
        UnknownPolicy::AllRegular => Label::Regular,
        UnknownPolicy::Random => {
            let key = t.key();
            let h = mix_seed(mix_seed(seed, (key >> 64) as u64), key as u64);
            if h >> 63 == 0 {
                Label::Malicious
            } else {
                Label::Regular
            }
        }
    }
}

/// Repository detector metrics on a labeled test set.
pub fn evaluate_repository(
    repo: &GlobalRepository,
    test: &[LabeledTriple],
    policy: UnknownPolicy,
    seed: u64,
) -> Result<Metrics, crate::analysis::AnalysisError> {
    let preds: Vec<Label> = test.iter().map(|s| ml_predict(repo, &s.triple, policy, seed)).collect();
    let truths: Vec<Label> = test.iter().map(|s| s.label).collect();
    compute_metrics(&preds, &truths)
}

/// All client samples, clients in ascending id order, each in its own order.
pub fn pooled_samples(clients: &[ClientDataset]) -> Vec<LabeledTriple> {
    let mut sorted: Vec<&ClientDataset> = clients.iter().collect();
    sorted.sort_by_key(|c| c.id);
    sorted.iter().flat_map(|c| c.samples.iter().copied()).collect()
}

/// One model trained on the pooled data of every client.
pub fn train_central(
    clients: &[ClientDataset],
    config: &ModelConfig,
    epochs: usize,
    seed: u64,
) -> Result<ModelParams, NnError> {
    let pooled = pooled_samples(clients);
    let init = crate::neuralnet::init_model(config)?;
    train_epochs_with_losses(&init, &pooled, epochs, config, seed).map(|(p, _)| p)
}

/// One model trained on a single client's data.
pub fn train_single(client: &ClientDataset, config: &ModelConfig, epochs: usize, seed: u64) -> Result<ModelParams, NnError> {
    let init = crate::neuralnet::init_model(config)?;
    train_epochs_with_losses(&init, &client.samples, epochs, config, seed).map(|(p, _)| p)
}
