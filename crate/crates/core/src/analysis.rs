//! Detection metrics, deployment coverage, training-triple distribution,
//! the leak-detection oracle for deployed sets, and the FL cost model.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::neuralnet::{mix_seed, sha256};
use crate::topology::{AsGraph, Asn, Role, TopologyError};
use crate::tripledata::{for_each_sample, simulate_visible_links, Label, Origin, Triple, TripleDataError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{predictions} predictions for {truths} labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("deployment rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("theta {0} outside [0, 1]")]
    InvalidTheta(f64),
    #[error("path has no link between {0} and {1}")]
    DisconnectedPath(Asn, Asn),
    #[error("leaker index {index} invalid for a path of {len} ASes")]
    InvalidLeaker { index: usize, len: usize },
    #[error("receiver {0} is not deployed")]
    ReceiverNotDeployed(Asn),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    TripleData(#[from] TripleDataError),
}

/// Confusion counts and ratios with Malicious as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio(tp + tn, tp + fp + tn + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { tp, fp, tn, fn_, accuracy, precision, recall, f1, degenerate }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub const CSV_HEADER: &'static str = "tp,fp,tn,fn,accuracy,precision,recall,f1,degenerate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.tp, self.fp, self.tn, self.fn_, self.accuracy, self.precision, self.recall, self.f1, self.degenerate
        )
    }
}

pub fn compute_metrics(predictions: &[Label], truths: &[Label]) -> Result<Metrics, AnalysisError> {
    if predictions.len() != truths.len() {
        return Err(AnalysisError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    if predictions.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (Label::Malicious, Label::Malicious) => tp += 1,
            (Label::Malicious, Label::Regular) => fp += 1,
            (Label::Regular, Label::Regular) => tn += 1,
            (Label::Regular, Label::Malicious) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, tn, fn_))
}

/// Ranking criterion for deploying ASes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Peer,
    Customer,
    Provider,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Peer, Strategy::Customer, Strategy::Provider];

    pub fn role(self) -> Role {
        match self {
            Strategy::Peer => Role::Peer,
            Strategy::Customer => Role::Customer,
            Strategy::Provider => Role::Provider,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Peer => "peer",
            Strategy::Customer => "customer",
            Strategy::Provider => "provider",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str().eq_ignore_ascii_case(s))
    }
}

/// Deployment order: descending count of neighbors in the strategy's role,
/// ties by ascending ASN.
pub fn deployment_order(graph: &AsGraph, strategy: Strategy) -> Vec<Asn> {
    let role = strategy.role();
    let mut ranked: Vec<(usize, Asn)> = graph
        .nodes()
        .iter()
        .map(|&a| {
            let n = graph.neighbors(a).map(|ns| ns.iter().filter(|(_, r)| *r == role).count()).unwrap_or(0);
            (n, a)
        })
        .collect();
    ranked.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    ranked.into_iter().map(|(_, a)| a).collect()
}

/// Number of ASes deployed at `rate`.
pub fn deployed_count(rate: f64, nodes: usize) -> Result<usize, AnalysisError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(AnalysisError::InvalidRate(rate));
    }
    Ok(((rate * nodes as f64).ceil() as usize).min(nodes))
}

/// Which ASes hold each malicious triple in their local data, so coverage
/// can be evaluated for any deployment order without regenerating samples.
#[derive(Debug, Clone)]
pub struct CoverageIndex {
    nodes: Vec<Asn>,
    /// Per node (in `nodes` order), the malicious triple keys it generates.
    owned: Vec<Vec<u128>>,
    total: usize,
}

impl CoverageIndex {
    pub fn build(graph: &AsGraph, exec: Execution) -> Result<Self, AnalysisError> {
        let nodes = graph.nodes().to_vec();
        let owned = exec.try_map(&nodes, |&m| -> Result<Vec<u128>, AnalysisError> {
            let visible = simulate_visible_links(graph, m)?;
            let mut keys = Vec::new();
            for_each_sample(graph, m, &visible, |s| {
                if s.label == Label::Malicious {
                    keys.push(s.triple.key());
                }
            })?;
            keys.sort_unstable();
            keys.dedup();
            Ok(keys)
        })?;
        let total = owned.iter().flatten().collect::<HashSet<_>>().len();
        Ok(Self { nodes, owned, total })
    }

    /// Unique malicious triples across the whole network.
    pub fn total_malicious(&self) -> usize {
        self.total
    }

    /// Coverage after deploying each prefix of `order` of the given sizes.
    fn coverage_for_counts(&self, order: &[Asn], counts: &[usize]) -> Vec<f64> {
        let pos: HashMap<Asn, usize> = self.nodes.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        // Earliest deployment step at which each key becomes covered.
        let mut first: HashMap<u128, usize> = HashMap::with_capacity(self.total);
        for (rank, a) in order.iter().enumerate() {
            for &k in &self.owned[pos[a]] {
                first.entry(k).or_insert(rank);
            }
        }
        let mut hist = vec![0usize; order.len() + 1];
        for &r in first.values() {
            hist[r + 1] += 1;
        }
        for i in 1..hist.len() {
            hist[i] += hist[i - 1];
        }
        counts
            .iter()
            .map(|&c| if self.total == 0 { 0.0 } else { hist[c.min(order.len())] as f64 / self.total as f64 })
            .collect()
    }

    pub fn curve(&self, graph: &AsGraph, strategy: Strategy, rates: &[f64]) -> Result<CoverageCurve, AnalysisError> {
        let counts = rates
            .iter()
            .map(|&r| deployed_count(r, self.nodes.len()))
            .collect::<Result<Vec<_>, _>>()?;
        let order = deployment_order(graph, strategy);
        let cov = self.coverage_for_counts(&order, &counts);
        Ok(CoverageCurve {
            strategy,
            points: rates
                .iter()
                .zip(counts)
                .zip(cov)
                .map(|((&rate, deployed), coverage)| CoveragePoint { rate, deployed, coverage })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub rate: f64,
    pub deployed: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub strategy: Strategy,
    pub points: Vec<CoveragePoint>,
}

/// Fraction of all malicious triples in the network that appear in the
/// pooled data of the top-ranked ASes, per rate.
pub fn deployment_coverage(
    graph: &AsGraph,
    strategy: Strategy,
    rates: &[f64],
    exec: Execution,
) -> Result<CoverageCurve, AnalysisError> {
    CoverageIndex::build(graph, exec)?.curve(graph, strategy, rates)
}

pub fn write_coverage_csv<W: Write>(mut w: W, curves: &[CoverageCurve]) -> io::Result<()> {
    writeln!(w, "strategy,rate,deployed,coverage")?;
    for c in curves {
        for p in &c.points {
            writeln!(w, "{},{},{},{:.6}", c.strategy.as_str(), p.rate, p.deployed, p.coverage)?;
        }
    }
    Ok(())
}

/// Per-AS share of inference-derived samples (inference plus reverse).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsShare {
    pub asn: Asn,
    pub samples: usize,
    pub malicious: usize,
    pub inference_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleDistribution {
    pub total: usize,
    pub malicious: usize,
    pub regular: usize,
    pub malicious_share: f64,
    pub per_as: Vec<AsShare>,
}

impl TripleDistribution {
    /// Empirical CDF of the per-AS inference fraction over ASes with at
    /// least one sample: sorted `(fraction, cumulative share)` pairs.
    pub fn inference_cdf(&self) -> Vec<(f64, f64)> {
        let mut xs: Vec<f64> = self.per_as.iter().filter(|s| s.samples > 0).map(|s| s.inference_fraction).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect()
    }

    /// Median per-AS inference fraction over ASes with samples.
    pub fn median_inference_fraction(&self) -> Option<f64> {
        let mut xs: Vec<f64> = self.per_as.iter().filter(|s| s.samples > 0).map(|s| s.inference_fraction).collect();
        if xs.is_empty() {
            return None;
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "asn,samples,malicious,inference_fraction")?;
        for s in &self.per_as {
            writeln!(w, "{},{},{},{:.6}", s.asn.0, s.samples, s.malicious, s.inference_fraction)?;
        }
        Ok(())
    }

    pub fn write_cdf_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "inference_fraction,cdf")?;
        for (x, f) in self.inference_cdf() {
            writeln!(w, "{x:.6},{f:.6}")?;
        }
        Ok(())
    }
}

/// Class mix of the samples every AS would generate, counted by streaming
/// so large graphs need no sample storage.
pub fn triple_distribution_report(graph: &AsGraph, exec: Execution) -> Result<TripleDistribution, AnalysisError> {
    let per_as = exec.try_map(graph.nodes(), |&m| -> Result<AsShare, AnalysisError> {
        let visible = simulate_visible_links(graph, m)?;
        let (mut samples, mut malicious, mut inferred) = (0usize, 0usize, 0usize);
        for_each_sample(graph, m, &visible, |s| {
            samples += 1;
            malicious += (s.label == Label::Malicious) as usize;
            inferred += (s.origin != Origin::Direct) as usize;
        })?;
        let inference_fraction = if samples == 0 { 0.0 } else { inferred as f64 / samples as f64 };
        Ok(AsShare { asn: m, samples, malicious, inference_fraction })
    })?;
    let total: usize = per_as.iter().map(|s| s.samples).sum();
    let malicious: usize = per_as.iter().map(|s| s.malicious).sum();
    Ok(TripleDistribution {
        total,
        malicious,
        regular: total - malicious,
        malicious_share: if total == 0 { 0.0 } else { malicious as f64 / total as f64 },
        per_as,
    })
}

/// Answers whether a deployed model identifies a triple as malicious.
pub trait TripleOracle {
    fn identifies(&self, t: &Triple) -> bool;
}

/// Oracle backed by the pooled training data of the deployed set: a triple
/// is identified when it is a pooled malicious sample and falls into the
/// seeded `theta` fraction of identifiable triples.
#[derive(Debug, Clone)]
pub struct PooledOracle {
    malicious: HashSet<u128>,
    theta: f64,
    seed: u64,
}

impl PooledOracle {
    pub fn build(graph: &AsGraph, deployed: &[Asn], theta: f64, seed: u64) -> Result<Self, AnalysisError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(AnalysisError::InvalidTheta(theta));
        }
        let mut malicious = HashSet::new();
        for &m in deployed {
            let visible = simulate_visible_links(graph, m)?;
            for_each_sample(graph, m, &visible, |s| {
                if s.label == Label::Malicious {
                    malicious.insert(s.triple.key());
                }
            })?;
        }
        Ok(Self { malicious, theta, seed })
    }

    pub fn len(&self) -> usize {
        self.malicious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.malicious.is_empty()
    }

    fn in_theta_subset(&self, t: &Triple) -> bool {
        if self.theta >= 1.0 {
            return true;
        }
        let mut msg = [0u8; 24];
        msg[..8].copy_from_slice(&self.seed.to_be_bytes());
        msg[8..].copy_from_slice(&t.key().to_be_bytes()[..16]);
        let h = sha256(&msg);
        let x = mix_seed(u64::from_be_bytes(h[..8].try_into().unwrap()), 0);
        ((x >> 11) as f64 / (1u64 << 53) as f64) < self.theta
    }
}

impl TripleOracle for PooledOracle {
    fn identifies(&self, t: &Triple) -> bool {
        self.malicious.contains(&t.key()) && self.in_theta_subset(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Detected,
    NotDetected,
}

/// Whether the deployed set catches a leak by `path[h]` on an announcement
/// travelling along `path`, whose last element is the receiving AS.
/// Detection needs the leaking triple `(v_{h-1}, v_h, v_{h+1})` to be
/// identified while the leaker or its successor is deployed.
pub fn theorem1_detect(
    graph: &AsGraph,
    deployed: &HashSet<Asn>,
    path: &[Asn],
    h: usize,
    oracle: &dyn TripleOracle,
) -> Result<Verdict, AnalysisError> {
    if h == 0 || h + 1 >= path.len() {
        return Err(AnalysisError::InvalidLeaker { index: h, len: path.len() });
    }
    for w in path.windows(2) {
        if !graph.has_link(w[0], w[1]) {
            return Err(AnalysisError::DisconnectedPath(w[0], w[1]));
        }
    }
    let receiver = *path.last().unwrap();
    if !deployed.contains(&receiver) {
        return Err(AnalysisError::ReceiverNotDeployed(receiver));
    }
    let triple = Triple::new(path[h - 1], path[h], path[h + 1]);
    let watched = deployed.contains(&path[h]) || deployed.contains(&path[h + 1]);
    Ok(if watched && oracle.identifies(&triple) { Verdict::Detected } else { Verdict::NotDetected })
}

/// `fixed + per_unit * x`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearCost {
    pub fixed: f64,
    pub per_unit: f64,
}

impl LinearCost {
    pub fn constant(c: f64) -> Self {
        Self { fixed: c, per_unit: 0.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.fixed + self.per_unit * x
    }

    fn is_valid(&self) -> bool {
        self.fixed >= 0.0 && self.per_unit >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub global_epochs: usize,
    pub local_epochs: usize,
    /// `|D_m|` for every participant; its length is `|M|`.
    pub dataset_sizes: Vec<usize>,
    /// Cost of one local epoch as a function of `|D_m|`.
    pub local_epoch: LinearCost,
    /// Per-participant aggregation cost in every round.
    pub aggregation: f64,
    /// Cost of sending one update to one other participant.
    pub broadcast: f64,
    /// Consensus cost as a function of `|M|`.
    pub consensus: LinearCost,
    /// Storage cost as a function of the stored update size in bytes.
    pub storage: LinearCost,
    #[serde(default)]
    pub update_bytes: u64,
    /// Charge consensus and storage once per round instead of once per
    /// participant per round.
    #[serde(default)]
    pub per_round: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub local_computation: f64,
    pub exchange: f64,
    pub consensus: f64,
    pub storage: f64,
    pub total: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("at least one participant is required")]
    NoParticipants,
    #[error("cost functions must be non-negative")]
    NegativeCost,
}

pub fn total_cost(p: &CostParams) -> Result<CostBreakdown, CostError> {
    let n = p.dataset_sizes.len();
    if n == 0 {
        return Err(CostError::NoParticipants);
    }
    if !(p.local_epoch.is_valid()
        && p.consensus.is_valid()
        && p.storage.is_valid()
        && p.aggregation >= 0.0
        && p.broadcast >= 0.0)
    {
        return Err(CostError::NegativeCost);
    }
    let ge = p.global_epochs as f64;
    let nf = n as f64;
    let per_round_local: f64 = p
        .dataset_sizes
        .iter()
        .map(|&d| p.local_epochs as f64 * p.local_epoch.eval(d as f64) + p.aggregation)
        .sum();
    let local_computation = ge * per_round_local;
    let exchange = ge * nf * (nf - 1.0) * p.broadcast;
    let multiplicity = if p.per_round { 1.0 } else { nf };
    let consensus = ge * multiplicity * p.consensus.eval(nf);
    let storage = ge * multiplicity * p.storage.eval(p.update_bytes as f64);
    Ok(CostBreakdown {
        local_computation,
        exchange,
        consensus,
        storage,
        total: local_computation + exchange + consensus + storage,
    })
}
