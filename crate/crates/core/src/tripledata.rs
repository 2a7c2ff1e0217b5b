//! Labeled AS-triple generation from local routing policy.
//!
//! Every deployed AS `m` labels two families of triples from what it knows
//! locally: *direct* triples `(n_i, m, n_j)` where `m` itself is the possible
//! leaker, labeled from its own relationships, and *inference* triples
//! `(n_i, n_j, m)` where the neighbor `n_j` is the possible leaker, labeled
//! from whether the link `(n_i, n_j)` shows up in `m`'s stable RIB. Every
//! regular inference triple also yields its reverse `(m, n_j, n_i)`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::topology::{AsGraph, Asn, Role, TopologyError};

/// Route direction: learned from `first` by `middle`, exported to `last`.
/// `middle` is the possible leaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub first: Asn,
    pub middle: Asn,
    pub last: Asn,
}

impl Triple {
    pub fn new(first: impl Into<Asn>, middle: impl Into<Asn>, last: impl Into<Asn>) -> Self {
        Self { first: first.into(), middle: middle.into(), last: last.into() }
    }

    /// Packs the three ASNs into the low 96 bits.
    pub fn key(&self) -> u128 {
        ((self.first.0 as u128) << 64) | ((self.middle.0 as u128) << 32) | self.last.0 as u128
    }

    pub fn from_key(key: u128) -> Self {
        Self {
            first: Asn((key >> 64) as u32),
            middle: Asn((key >> 32) as u32),
            last: Asn(key as u32),
        }
    }

    pub fn reversed(&self) -> Self {
        Self { first: self.last, middle: self.middle, last: self.first }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.first.0, self.middle.0, self.last.0)
    }
}

/// Sample label. The numeric values are the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Malicious = 0,
    Regular = 1,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Malicious),
            1 => Some(Label::Regular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// The owner is the middle AS.
    Direct,
    /// The owner is the last AS.
    Inference,
    /// The owner is the first AS.
    Reverse,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Direct => "direct",
            Origin::Inference => "inference",
            Origin::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(Origin::Direct),
            "inference" => Some(Origin::Inference),
            "reverse" => Some(Origin::Reverse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub label: Label,
    pub origin: Origin,
    /// The AS whose local data this sample belongs to.
    pub owner: Asn,
}

impl LabeledTriple {
    /// Checks the owner/position invariant of the origin tag.
    pub fn owner_consistent(&self) -> bool {
        match self.origin {
            Origin::Direct => self.triple.middle == self.owner,
            Origin::Inference => self.triple.last == self.owner,
            Origin::Reverse => self.triple.first == self.owner,
        }
    }
}

/// Stand-in for the owner's stable RIB: the ordered links `(n_i, n_j)` such
/// that a route learned by neighbor `n_j` from `n_i` may be exported to the
/// owner without breaking valley-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleLinkSet {
    owner: Asn,
    links: BTreeSet<(Asn, Asn)>,
}

impl VisibleLinkSet {
    pub fn new(owner: Asn, links: impl IntoIterator<Item = (Asn, Asn)>) -> Self {
        Self { owner, links: links.into_iter().collect() }
    }

    pub fn owner(&self) -> Asn {
        self.owner
    }

    pub fn contains(&self, from: Asn, to: Asn) -> bool {
        self.links.contains(&(from, to))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Asn, Asn)> {
        self.links.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub malicious: usize,
    pub regular: usize,
}

impl DatasetStats {
    pub fn of(samples: &[LabeledTriple]) -> Self {
        let malicious = samples.iter().filter(|s| s.label == Label::Malicious).count();
        Self { total: samples.len(), malicious, regular: samples.len() - malicious }
    }
}

/// One participant's local training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientDataset {
    /// The owning AS, or a synthetic client id for partitioned groups.
    pub id: Asn,
    pub samples: Vec<LabeledTriple>,
}

impl ClientDataset {
    pub fn new(id: Asn, samples: Vec<LabeledTriple>) -> Self {
        Self { id, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Always recomputed from the samples.
    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(&self.samples)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TripleDataError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("visible-link set belongs to {found}, expected {expected}")]
    OwnerMismatch { expected: Asn, found: Asn },
    #[error("conflicting labels for {origin:?} triple {triple}")]
    LabelConflict { triple: Triple, origin: Origin },
    #[error("infeasible group preset: {0}")]
    Infeasible(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Valley-free check for a route learned from a neighbor with role
/// `learned_from` and exported to a neighbor with role `exported_to`, both
/// as seen from the middle AS. Covers leak types 1 through 4.
pub fn is_valley_violation(learned_from: Role, exported_to: Role) -> bool {
    learned_from.is_upstream_or_peer() && exported_to.is_upstream_or_peer()
}

/// Valley-free verdict for a whole triple against ground truth. A triple
/// whose links do not exist cannot occur on a real path and is malicious.
pub fn triple_label(graph: &AsGraph, t: &Triple) -> Label {
    match (
        graph.relationship_from(t.middle, t.first),
        graph.relationship_from(t.middle, t.last),
    ) {
        (Some(from), Some(to)) if t.first != t.last && !is_valley_violation(from, to) => Label::Regular,
        _ => Label::Malicious,
    }
}

/// Simulated RIB visibility for `m`: every graph edge `(n_i, n_j)` with
/// `n_j` a neighbor of `m`, `n_i != m`, such that exporting a route learned
/// from `n_i` by `n_j` onward to `m` is valley-free.
pub fn simulate_visible_links(graph: &AsGraph, m: Asn) -> Result<VisibleLinkSet, TripleDataError> {
    let mut links = BTreeSet::new();
    for &(nj, _) in graph.neighbors(m)? {
        let m_role = graph
            .relationship_from(nj, m)
            .expect("adjacency is symmetric");
        for &(ni, ni_role) in graph.neighbors(nj)? {
            if ni != m && !is_valley_violation(ni_role, m_role) {
                links.insert((ni, nj));
            }
        }
    }
    Ok(VisibleLinkSet { owner: m, links })
}

/// Streams the samples of `m` in generation order: for each ordered pair of
/// distinct neighbors `(n_i, n_j)` sorted by ASN, the direct sample, then the
/// inference sample, then the reverse sample if any.
pub fn for_each_sample<F>(
    graph: &AsGraph,
    m: Asn,
    visible: &VisibleLinkSet,
    mut f: F,
) -> Result<(), TripleDataError>
where
    F: FnMut(LabeledTriple),
{
    if visible.owner != m {
        return Err(TripleDataError::OwnerMismatch { expected: m, found: visible.owner });
    }
    let neighbors = graph.neighbors(m)?;
    for &(ni, ri) in neighbors {
        for &(nj, rj) in neighbors {
            if ni == nj {
                continue;
            }
            let direct = if is_valley_violation(ri, rj) { Label::Malicious } else { Label::Regular };
            f(LabeledTriple { triple: Triple::new(ni, m, nj), label: direct, origin: Origin::Direct, owner: m });
            if visible.contains(ni, nj) {
                f(LabeledTriple {
                    triple: Triple::new(ni, nj, m),
                    label: Label::Regular,
                    origin: Origin::Inference,
                    owner: m,
                });
                f(LabeledTriple {
                    triple: Triple::new(m, nj, ni),
                    label: Label::Regular,
                    origin: Origin::Reverse,
                    owner: m,
                });
            } else {
                f(LabeledTriple {
                    triple: Triple::new(ni, nj, m),
                    label: Label::Malicious,
                    origin: Origin::Inference,
                    owner: m,
                });
            }
        }
    }
    Ok(())
}

/// Local training data of `m`. Duplicate `(triple, origin)` samples keep the
/// first occurrence; a label conflict on the same key is an error.
pub fn generate_local_dataset(
    graph: &AsGraph,
    m: Asn,
    visible: &VisibleLinkSet,
) -> Result<ClientDataset, TripleDataError> {
    let mut seen: HashMap<(u128, Origin), Label> = HashMap::new();
    let mut samples = Vec::new();
    let mut conflict = None;
    for_each_sample(graph, m, visible, |s| {
        match seen.get(&(s.triple.key(), s.origin)) {
            Some(&l) if l != s.label => {
                conflict.get_or_insert((s.triple, s.origin));
            }
            Some(_) => {}
            None => {
                seen.insert((s.triple.key(), s.origin), s.label);
                samples.push(s);
            }
        }
    })?;
    if let Some((triple, origin)) = conflict {
        return Err(TripleDataError::LabelConflict { triple, origin });
    }
    Ok(ClientDataset::new(m, samples))
}

/// Simulates visibility and generates the local dataset of `m`.
pub fn local_dataset(graph: &AsGraph, m: Asn) -> Result<ClientDataset, TripleDataError> {
    let visible = simulate_visible_links(graph, m)?;
    generate_local_dataset(graph, m, &visible)
}

/// Local datasets of every AS in `owners`, in input order.
pub fn generate_all(
    graph: &AsGraph,
    owners: &[Asn],
    exec: Execution,
) -> Result<Vec<ClientDataset>, TripleDataError> {
    exec.try_map(owners, |&m| local_dataset(graph, m))
}

/// Per-client class and origin mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDistribution {
    pub id: Asn,
    pub total: usize,
    pub malicious: usize,
    pub regular: usize,
    pub malicious_pct: f64,
    pub regular_pct: f64,
    /// Fraction of inference and reverse samples among all samples.
    pub inference_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DistributionReport {
    pub clients: Vec<ClientDistribution>,
    pub total: usize,
    pub malicious: usize,
    pub regular: usize,
    pub malicious_pct: f64,
    pub regular_pct: f64,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn dataset_distribution(datasets: &[ClientDataset]) -> DistributionReport {
    let mut report = DistributionReport::default();
    for d in datasets {
        let stats = d.stats();
        let inferred = d.samples.iter().filter(|s| s.origin != Origin::Direct).count();
        report.clients.push(ClientDistribution {
            id: d.id,
            total: stats.total,
            malicious: stats.malicious,
            regular: stats.regular,
            malicious_pct: pct(stats.malicious, stats.total),
            regular_pct: pct(stats.regular, stats.total),
            inference_fraction: if stats.total == 0 { 0.0 } else { inferred as f64 / stats.total as f64 },
        });
        report.total += stats.total;
        report.malicious += stats.malicious;
        report.regular += stats.regular;
    }
    report.malicious_pct = pct(report.malicious, report.total);
    report.regular_pct = pct(report.regular, report.total);
    report
}

impl DistributionReport {
    /// CSV with one row per client followed by an `aggregate` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "client,total,malicious,regular,malicious_pct,regular_pct,inference_fraction")?;
        for c in &self.clients {
            writeln!(
                w,
                "{},{},{},{},{:.4},{:.4},{:.6}",
                c.id.0, c.total, c.malicious, c.regular, c.malicious_pct, c.regular_pct, c.inference_fraction
            )?;
        }
        writeln!(
            w,
            "aggregate,{},{},{},{:.4},{:.4},",
            self.total, self.malicious, self.regular, self.malicious_pct, self.regular_pct
        )
    }
}

/// Exact per-client target counts of a five-client experiment group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTarget {
    pub size: usize,
    pub malicious: usize,
    /// Class ratio and size share the counts must stay within 2 points of.
    pub nominal_malicious: f64,
    pub nominal_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPreset {
    pub name: String,
    pub clients: Vec<ClientTarget>,
}

/// First synthetic client id: the private-use ASN range.
pub const SYNTHETIC_CLIENT_BASE: u32 = 64512;

// (size, malicious) per client
const GROUP_TABLE: [[(usize, usize); 5]; 4] = [
    [(6936, 6192), (4189, 3913), (69, 33), (1922, 1680), (434, 406)],
    [(12549, 12099), (13134, 12158), (12218, 7606), (12369, 10205), (13198, 8998)],
    [(35712, 17856), (149580, 74790), (180904, 90452), (43316, 21658), (6836, 3418)],
    [(3418, 1761), (3418, 1672), (3418, 1724), (3418, 1679), (3418, 1676)],
];

impl GroupPreset {
    /// The four reference regimes: 1 unbalanced size + unbalanced class,
    /// 2 balanced size + unbalanced class, 3 unbalanced size + balanced
    /// class, 4 balanced size + balanced class.
    pub fn builtin(group: u8) -> Option<Self> {
        let rows = GROUP_TABLE.get(usize::from(group).checked_sub(1)?)?;
        let total: usize = rows.iter().map(|r| r.0).sum();
        Some(Self {
            name: format!("group{group}"),
            clients: rows
                .iter()
                .map(|&(size, malicious)| ClientTarget {
                    size,
                    malicious,
                    nominal_malicious: malicious as f64 / size as f64,
                    nominal_share: size as f64 / total as f64,
                })
                .collect(),
        })
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(|c| c.size).sum()
    }

    pub fn total_malicious(&self) -> usize {
        self.clients.iter().map(|c| c.malicious).sum()
    }

    /// Same shares and class ratios, rescaled to roughly `total` samples.
    pub fn scaled_to(&self, total: usize) -> Self {
        Self {
            name: format!("{}@{total}", self.name),
            clients: self
                .clients
                .iter()
                .map(|c| {
                    let size = ((c.nominal_share * total as f64).round() as usize).max(1);
                    let malicious = (c.nominal_malicious * size as f64).round() as usize;
                    ClientTarget { size, malicious, ..c.clone() }
                })
                .collect(),
        }
    }
}

/// Splits `pool` into one dataset per preset client by sampling without
/// replacement, separately per class. Deterministic per seed.
pub fn partition_groups(
    pool: &[LabeledTriple],
    preset: &GroupPreset,
    seed: u64,
) -> Result<Vec<ClientDataset>, TripleDataError> {
    let total = preset.total();
    for (k, c) in preset.clients.iter().enumerate() {
        if c.size == 0 || c.malicious > c.size {
            return Err(TripleDataError::Infeasible(format!(
                "client {} has size {} and {} malicious samples",
                k + 1,
                c.size,
                c.malicious
            )));
        }
        let ratio = c.malicious as f64 / c.size as f64;
        let share = c.size as f64 / total as f64;
        if (ratio - c.nominal_malicious).abs() > 0.02 || (share - c.nominal_share).abs() > 0.02 {
            return Err(TripleDataError::Infeasible(format!(
                "client {} cannot hold its class ratio at size {} ({:.2}% vs {:.2}%)",
                k + 1,
                c.size,
                100.0 * ratio,
                100.0 * c.nominal_malicious
            )));
        }
    }

    let mut malicious: Vec<usize> = Vec::new();
    let mut regular: Vec<usize> = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        match s.label {
            Label::Malicious => malicious.push(i),
            Label::Regular => regular.push(i),
        }
    }
    let need_mal = preset.total_malicious();
    let need_reg = total - need_mal;
    if malicious.len() < need_mal || regular.len() < need_reg {
        return Err(TripleDataError::Infeasible(format!(
            "pool has {} malicious / {} regular samples, preset needs {need_mal} / {need_reg}",
            malicious.len(),
            regular.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    malicious.shuffle(&mut rng);
    regular.shuffle(&mut rng);
    let (mut mi, mut ri) = (0, 0);
    let mut out = Vec::with_capacity(preset.clients.len());
    for (k, c) in preset.clients.iter().enumerate() {
        let n_reg = c.size - c.malicious;
        let mut idx: Vec<usize> = malicious[mi..mi + c.malicious]
            .iter()
            .chain(&regular[ri..ri + n_reg])
            .copied()
            .collect();
        mi += c.malicious;
        ri += n_reg;
        idx.sort_unstable();
        let samples = idx.into_iter().map(|i| pool[i]).collect();
        out.push(ClientDataset::new(Asn(SYNTHETIC_CLIENT_BASE + k as u32 + 1), samples));
    }
    Ok(out)
}

/// Picks one real AS per preset client and subsamples its own local data to
/// the client's size and class mix. Candidates are tried in a seeded random
/// order; an AS is used at most once. Client ids are the chosen ASNs.
pub fn assign_group_clients(
    datasets: &[ClientDataset],
    preset: &GroupPreset,
    seed: u64,
) -> Result<Vec<ClientDataset>, TripleDataError> {
    assign_clients_with(datasets.len(), preset, seed, |i| Ok(Some(datasets[i].clone())))
}

/// [`assign_group_clients`] over every AS of `graph`, generating local data
/// only for candidates actually inspected. ASes whose data would exceed
/// `max_samples` are skipped.
pub fn assign_group_clients_from_graph(
    graph: &AsGraph,
    preset: &GroupPreset,
    seed: u64,
    max_samples: usize,
) -> Result<Vec<ClientDataset>, TripleDataError> {
    let nodes = graph.nodes();
    assign_clients_with(nodes.len(), preset, seed, |i| {
        let d = graph.degree(nodes[i])?;
        if 2 * d * d.saturating_sub(1) > max_samples {
            return Ok(None);
        }
        local_dataset(graph, nodes[i]).map(Some)
    })
}

fn assign_clients_with<F>(
    n_candidates: usize,
    preset: &GroupPreset,
    seed: u64,
    mut load: F,
) -> Result<Vec<ClientDataset>, TripleDataError>
where
    F: FnMut(usize) -> Result<Option<ClientDataset>, TripleDataError>,
{
    let mut order: Vec<usize> = (0..n_candidates).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut cache: HashMap<usize, Option<ClientDataset>> = HashMap::new();
    let mut used = vec![false; n_candidates];
    let mut out = Vec::with_capacity(preset.clients.len());
    for (k, c) in preset.clients.iter().enumerate() {
        let need_mal = c.malicious.min(c.size);
        let need_reg = c.size - need_mal;
        let mut chosen = None;
        for &i in &order {
            if used[i] {
                continue;
            }
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(i) {
                e.insert(load(i)?);
            }
            if let Some(d) = &cache[&i] {
                let st = d.stats();
                if st.malicious >= need_mal && st.regular >= need_reg {
                    chosen = Some(i);
                    break;
                }
            }
        }
        let Some(i) = chosen else {
            return Err(TripleDataError::Infeasible(format!(
                "no unused AS can supply client {} ({need_mal} malicious / {need_reg} regular)",
                k + 1
            )));
        };
        used[i] = true;
        let d = cache[&i].as_ref().expect("chosen candidates are loaded");
        let (mut mal, mut reg): (Vec<usize>, Vec<usize>) =
            (0..d.len()).partition(|&j| d.samples[j].label == Label::Malicious);
        mal.shuffle(&mut rng);
        reg.shuffle(&mut rng);
        let mut idx: Vec<usize> = mal[..need_mal].iter().chain(&reg[..need_reg]).copied().collect();
        idx.sort_unstable();
        out.push(ClientDataset::new(d.id, idx.into_iter().map(|j| d.samples[j]).collect()));
    }
    Ok(out)
}

const SAMPLES_HEADER: &str = "# first,middle,last,label,origin,owner";

/// Newline-delimited `first,middle,last,label,origin,owner` records with
/// label `0` (malicious) or `1` (regular).
pub fn write_samples<W: Write>(mut w: W, samples: &[LabeledTriple]) -> io::Result<()> {
    writeln!(w, "{SAMPLES_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.triple.first.0,
            s.triple.middle.0,
            s.triple.last.0,
            s.label.code(),
            s.origin.as_str(),
            s.owner.0
        )?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<LabeledTriple>, TripleDataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| TripleDataError::Parse { line: line_no, reason: reason.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 comma-separated fields"));
        }
        let asn = |s: &str| s.trim().parse::<u32>().map(Asn).map_err(|_| bad("invalid ASN"));
        let label = f[3]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(Label::from_code)
            .ok_or_else(|| bad("label must be 0 or 1"))?;
        let origin = Origin::parse(f[4].trim()).ok_or_else(|| bad("unknown origin"))?;
        out.push(LabeledTriple {
            triple: Triple::new(asn(f[0])?, asn(f[1])?, asn(f[2])?),
            label,
            origin,
            owner: asn(f[5])?,
        });
    }
    Ok(out)
}
