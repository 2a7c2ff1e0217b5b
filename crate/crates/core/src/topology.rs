//! AS-level topology with business relationships.
//!
//! The canonical on-disk format is the CAIDA "serial-1" relationship file:
//! `<asn1>|<asn2>|<rel>` with `rel = -1` when `asn1` is the provider of
//! `asn2` and `rel = 0` for a peering link. Lines starting with `#` are
//! comments.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Autonomous system number. The full 32-bit space is representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Asn(pub u32);

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AS{}", self.0)
    }
}

impl FromStr for Asn {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let s = s
            .strip_prefix("AS")
            .or_else(|| s.strip_prefix("as"))
            .unwrap_or(s);
        s.parse().map(Asn)
    }
}

impl From<u32> for Asn {
    fn from(v: u32) -> Self {
        Asn(v)
    }
}

/// Business relationship of a link. For `P2C` the first AS of the link is
/// the provider of the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relationship {
    P2P,
    P2C,
}

/// Role of a neighbor as seen from a given AS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// The neighbor is a provider of the viewing AS.
    Provider,
    /// The neighbor is a customer of the viewing AS.
    Customer,
    Peer,
}

impl Role {
    pub fn dual(self) -> Role {
        match self {
            Role::Provider => Role::Customer,
            Role::Customer => Role::Provider,
            Role::Peer => Role::Peer,
        }
    }

    /// Provider or peer: routes learned from such a neighbor must not be
    /// exported to another provider or peer.
    pub fn is_upstream_or_peer(self) -> bool {
        matches!(self, Role::Provider | Role::Peer)
    }
}

/// One link in canonical orientation (`a` is the provider for `P2C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub a: Asn,
    pub b: Asn,
    pub rel: LinkKind,
}

/// Relationship kind with the CAIDA numeric encoding as ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkKind {
    P2C,
    P2P,
}

impl LinkKind {
    pub fn caida_code(self) -> i8 {
        match self {
            LinkKind::P2C => -1,
            LinkKind::P2P => 0,
        }
    }

    pub fn relationship(self) -> Relationship {
        match self {
            LinkKind::P2C => Relationship::P2C,
            LinkKind::P2P => Relationship::P2P,
        }
    }
}

impl From<Relationship> for LinkKind {
    fn from(r: Relationship) -> Self {
        match r {
            Relationship::P2C => LinkKind::P2C,
            Relationship::P2P => LinkKind::P2P,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: invalid ASN {token:?}")]
    InvalidAsn { line: usize, token: String },
    #[error("line {line}: relationship {token:?} is not -1 or 0")]
    InvalidRelationship { line: usize, token: String },
    #[error("conflicting relationship for {a}-{b}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Conflict { line: Option<usize>, a: Asn, b: Asn },
    #[error("self-loop at {asn}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    SelfLoop { line: Option<usize>, asn: Asn },
    #[error("unknown {0}")]
    UnknownAsn(Asn),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-AS neighbor counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DegreeProfile {
    pub peers: usize,
    pub customers: usize,
    pub providers: usize,
}

impl DegreeProfile {
    pub fn degree(&self) -> usize {
        self.peers + self.customers + self.providers
    }
}

/// Summary counts, as printed by the ingest command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub nodes: usize,
    pub links: usize,
    pub p2c_links: usize,
    pub p2p_links: usize,
    pub components: usize,
    pub provenance: Vec<String>,
}

/// Immutable AS graph. Nodes are kept sorted by ASN and every adjacency list
/// is sorted by neighbor ASN, so iteration order is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsGraph {
    nodes: Vec<Asn>,
    index: HashMap<Asn, usize>,
    adj: Vec<Vec<(Asn, Role)>>,
    n_links: usize,
    provenance: Vec<String>,
}

/// Accumulates links, rejecting self-loops and conflicting duplicates.
#[derive(Debug, Default, Clone)]
pub struct AsGraphBuilder {
    nodes: BTreeMap<Asn, ()>,
    // keyed by (min, max); value is the link in canonical orientation
    links: HashMap<(Asn, Asn), Link>,
    provenance: Vec<String>,
}

impl AsGraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, asn: Asn) -> &mut Self {
        self.nodes.insert(asn, ());
        self
    }

    pub fn provenance(&mut self, line: impl Into<String>) -> &mut Self {
        self.provenance.push(line.into());
        self
    }

    /// Adds a link; for `P2C`, `a` is the provider of `b`.
    pub fn add_link(&mut self, a: Asn, b: Asn, rel: Relationship) -> Result<&mut Self, TopologyError> {
        self.add_link_at(a, b, rel, None)
    }

    fn add_link_at(
        &mut self,
        a: Asn,
        b: Asn,
        rel: Relationship,
        line: Option<usize>,
    ) -> Result<&mut Self, TopologyError> {
        if a == b {
            return Err(TopologyError::SelfLoop { line, asn: a });
        }
        let link = Link { a, b, rel: rel.into() };
        let key = (a.min(b), a.max(b));
        match self.links.get(&key) {
            Some(existing) if same_link(existing, &link) => {}
            Some(_) => return Err(TopologyError::Conflict { line, a: key.0, b: key.1 }),
            None => {
                self.links.insert(key, link);
                self.nodes.insert(a, ());
                self.nodes.insert(b, ());
            }
        }
        Ok(self)
    }

    pub fn build(&self) -> AsGraph {
        let nodes: Vec<Asn> = self.nodes.keys().copied().collect();
        let index: HashMap<Asn, usize> = nodes.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let mut adj: Vec<Vec<(Asn, Role)>> = vec![Vec::new(); nodes.len()];
        for link in self.links.values() {
            let (ra, rb) = match link.rel {
                // a is provider of b: from a, b is a customer
                LinkKind::P2C => (Role::Customer, Role::Provider),
                LinkKind::P2P => (Role::Peer, Role::Peer),
            };
            adj[index[&link.a]].push((link.b, ra));
            adj[index[&link.b]].push((link.a, rb));
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|&(n, _)| n);
        }
        AsGraph {
            nodes,
            index,
            adj,
            n_links: self.links.len(),
            provenance: self.provenance.clone(),
        }
    }
}

fn same_link(x: &Link, y: &Link) -> bool {
    match (x.rel, y.rel) {
        (LinkKind::P2P, LinkKind::P2P) => true,
        (LinkKind::P2C, LinkKind::P2C) => x.a == y.a && x.b == y.b,
        _ => false,
    }
}

impl AsGraph {
    pub fn builder() -> AsGraphBuilder {
        AsGraphBuilder::new()
    }

    /// Builds a graph from `(a, b, rel)` triples; `a` is the provider for `P2C`.
    pub fn from_links<I>(links: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (Asn, Asn, Relationship)>,
    {
        let mut b = AsGraphBuilder::new();
        for (x, y, rel) in links {
            b.add_link(x, y, rel)?;
        }
        Ok(b.build())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.n_links
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending ASN order.
    pub fn nodes(&self) -> &[Asn] {
        &self.nodes
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.index.contains_key(&asn)
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    /// Neighbors of `asn` with their role as seen from `asn`, sorted by ASN.
    pub fn neighbors(&self, asn: Asn) -> Result<&[(Asn, Role)], TopologyError> {
        self.index
            .get(&asn)
            .map(|&i| self.adj[i].as_slice())
            .ok_or(TopologyError::UnknownAsn(asn))
    }

    pub fn degree(&self, asn: Asn) -> Result<usize, TopologyError> {
        self.neighbors(asn).map(<[_]>::len)
    }

    /// Role of `b` as seen from `a`, or `None` when the two are not linked
    /// (or either is unknown).
    pub fn relationship_from(&self, a: Asn, b: Asn) -> Option<Role> {
        let list = &self.adj[*self.index.get(&a)?];
        list.binary_search_by_key(&b, |&(n, _)| n)
            .ok()
            .map(|i| list[i].1)
    }

    pub fn has_link(&self, a: Asn, b: Asn) -> bool {
        self.relationship_from(a, b).is_some()
    }

    pub fn degree_profile(&self, asn: Asn) -> Result<DegreeProfile, TopologyError> {
        let mut p = DegreeProfile::default();
        for &(_, role) in self.neighbors(asn)? {
            match role {
                Role::Peer => p.peers += 1,
                Role::Customer => p.customers += 1,
                Role::Provider => p.providers += 1,
            }
        }
        Ok(p)
    }

    /// All links in canonical orientation, sorted by `(a, b)`.
    pub fn links(&self) -> Vec<Link> {
        let mut out = Vec::with_capacity(self.n_links);
        for (i, &a) in self.nodes.iter().enumerate() {
            for &(b, role) in &self.adj[i] {
                match role {
                    Role::Customer => out.push(Link { a, b, rel: LinkKind::P2C }),
                    Role::Peer if a < b => out.push(Link { a, b, rel: LinkKind::P2P }),
                    _ => {}
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.nodes.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.nodes.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &(n, _) in &self.adj[u] {
                    let v = self.index[&n];
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// True when the provider-to-customer digraph contains a directed cycle.
    pub fn has_provider_cycle(&self) -> bool {
        // Kahn's algorithm over provider -> customer edges
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for list in &self.adj {
            for &(nb, role) in list {
                if role == Role::Customer {
                    indeg[self.index[&nb]] += 1;
                }
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for &(nb, role) in &self.adj[u] {
                if role == Role::Customer {
                    let v = self.index[&nb];
                    indeg[v] -= 1;
                    if indeg[v] == 0 {
                        queue.push_back(v);
                    }
                }
            }
        }
        visited != n
    }

    pub fn summary(&self) -> TopologySummary {
        let links = self.links();
        let p2c = links.iter().filter(|l| l.rel == LinkKind::P2C).count();
        TopologySummary {
            nodes: self.node_count(),
            links: links.len(),
            p2c_links: p2c,
            p2p_links: links.len() - p2c,
            components: self.connected_components(),
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the canonical serialization: provenance lines as `#` comments,
    /// then one `asn1|asn2|rel` line per link sorted by `(asn1, asn2)`.
    pub fn write_as_rel<W: Write>(&self, mut w: W) -> io::Result<()> {
        for line in &self.provenance {
            writeln!(w, "# {line}")?;
        }
        for link in self.links() {
            writeln!(w, "{}|{}|{}", link.a.0, link.b.0, link.rel.caida_code())?;
        }
        Ok(())
    }

    pub fn to_as_rel_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_as_rel(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serialization is ASCII")
    }
}

/// Parses a CAIDA relationship stream.
///
/// Columns after the third are ignored (some distributions append a source
/// tag); a warning is logged once with the number of affected lines.
pub fn parse_as_rel<R: BufRead>(reader: R) -> Result<AsGraph, TopologyError> {
    let mut builder = AsGraphBuilder::new();
    let mut extra_columns = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(rest) = comment.strip_prefix("synthetic ") {
                builder.provenance(format!("synthetic {rest}"));
            }
            continue;
        }
        let mut fields = trimmed.split('|');
        let (a, b, rel) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(r)) => (a, b, r),
            _ => {
                return Err(TopologyError::Malformed {
                    line: line_no,
                    reason: format!("expected `asn1|asn2|rel`, got {trimmed:?}"),
                })
            }
        };
        if fields.next().is_some() {
            extra_columns += 1;
        }
        let a = parse_asn(a, line_no)?;
        let b = parse_asn(b, line_no)?;
        let rel = match rel.trim() {
            "-1" => Relationship::P2C,
            "0" => Relationship::P2P,
            other => {
                return Err(TopologyError::InvalidRelationship {
                    line: line_no,
                    token: other.to_string(),
                })
            }
        };
        builder.add_link_at(a, b, rel, Some(line_no))?;
    }
    if extra_columns > 0 {
        log::warn!("ignored trailing columns on {extra_columns} relationship lines");
    }
    Ok(builder.build())
}

fn parse_asn(token: &str, line: usize) -> Result<Asn, TopologyError> {
    let t = token.trim();
    if t.is_empty() || !t.bytes().all(|c| c.is_ascii_digit()) {
        return Err(TopologyError::InvalidAsn { line, token: token.to_string() });
    }
    t.parse::<u32>()
        .map(Asn)
        .map_err(|_| TopologyError::InvalidAsn { line, token: token.to_string() })
}

/// Reads a relationship file, transparently decompressing gzip input.
pub fn read_as_rel_file(path: impl AsRef<Path>) -> Result<AsGraph, TopologyError> {
    let mut file = BufReader::new(File::open(path.as_ref())?);
    let magic = file.fill_buf()?;
    let gz = magic.len() >= 2 && magic[0] == 0x1f && magic[1] == 0x8b;
    if gz {
        let reader: Box<dyn Read> = Box::new(GzDecoder::new(file));
        parse_as_rel(BufReader::new(reader))
    } else {
        parse_as_rel(file)
    }
}

/// Knobs of the synthetic Internet-like generator.
///
/// The generator grows a customer-provider hierarchy by preferential
/// attachment: a fully peered core of `core_size` ASes, then every new AS
/// buys transit from `1..=max_providers` earlier ASes chosen with probability
/// proportional to their customer count plus one. Providers always precede
/// their customers, so the provider digraph is acyclic. Peering is added on
/// top: every AS draws a Pareto-distributed peering propensity with tail
/// index `peer_tail`, independent of its place in the hierarchy, and
/// `peer_rate * n` peering links join pairs sampled proportionally to the
/// product of their propensities. A few open-peering hubs (content and
/// exchange-heavy networks) end up with far more peers than any transit
/// provider has customers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub core_size: usize,
    pub max_providers: usize,
    /// Probability of buying transit from one more provider (up to the max).
    pub multihoming: f64,
    pub peer_rate: f64,
    /// Pareto tail index of the peering propensity; smaller is heavier.
    pub peer_tail: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            core_size: 4,
            max_providers: 3,
            multihoming: 0.2,
            peer_rate: 0.7,
            peer_tail: 1.2,
        }
    }
}

impl SyntheticParams {
    fn validate(&self, n_nodes: usize) -> Result<(), TopologyError> {
        if n_nodes < 3 {
            return Err(TopologyError::InvalidParams(format!("need at least 3 nodes, got {n_nodes}")));
        }
        if self.core_size == 0 || self.core_size > n_nodes {
            return Err(TopologyError::InvalidParams(format!(
                "core_size must be in 1..={n_nodes}, got {}",
                self.core_size
            )));
        }
        if self.max_providers == 0 {
            return Err(TopologyError::InvalidParams("max_providers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.multihoming) {
            return Err(TopologyError::InvalidParams(format!(
                "multihoming must be a probability, got {}",
                self.multihoming
            )));
        }
        if !self.peer_rate.is_finite() || self.peer_rate < 0.0 {
            return Err(TopologyError::InvalidParams(format!(
                "peer_rate must be non-negative, got {}",
                self.peer_rate
            )));
        }
        if !self.peer_tail.is_finite() || self.peer_tail <= 0.0 {
            return Err(TopologyError::InvalidParams(format!(
                "peer_tail must be positive, got {}",
                self.peer_tail
            )));
        }
        Ok(())
    }
}

/// Deterministic synthetic topology. ASNs are `1..=n_nodes`, in creation
/// order, so lower ASNs sit higher in the hierarchy.
pub fn generate_synthetic_topology(
    seed: u64,
    n_nodes: usize,
    params: SyntheticParams,
) -> Result<AsGraph, TopologyError> {
    params.validate(n_nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let asn = |i: usize| Asn(i as u32 + 1);

    let mut builder = AsGraphBuilder::new();
    builder.provenance(format!(
        "synthetic seed={seed} n={n_nodes} core={} max_providers={} multihoming={} peer_rate={} peer_tail={}",
        params.core_size, params.max_providers, params.multihoming, params.peer_rate, params.peer_tail
    ));
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut customers = vec![0usize; n_nodes];

    let core = params.core_size;
    for i in 0..core {
        builder.add_node(asn(i));
        for j in 0..i {
            builder.add_link(asn(i), asn(j), Relationship::P2P)?;
            adjacent[i].push(j);
            adjacent[j].push(i);
        }
    }

    for i in core..n_nodes {
        let mut k = 1;
        while k < params.max_providers.min(i) && rng.gen_bool(params.multihoming) {
            k += 1;
        }
        for _ in 0..k {
            let pick = weighted_pick(&mut rng, 0..i, |j| {
                if adjacent[i].contains(&j) {
                    0.0
                } else {
                    (customers[j] + 1) as f64
                }
            });
            let Some(p) = pick else { break };
            builder.add_link(asn(p), asn(i), Relationship::P2C)?;
            adjacent[i].push(p);
            adjacent[p].push(i);
            customers[p] += 1;
        }
    }

    let propensity: Vec<f64> = (0..n_nodes)
        .map(|_| (1.0 - rng.gen::<f64>()).powf(-1.0 / params.peer_tail))
        .collect();
    let pick = WeightedIndex::new(&propensity).expect("propensities are finite and positive");
    let target = (params.peer_rate * n_nodes as f64).round() as usize;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target && attempts < 50 * target.max(1) {
        attempts += 1;
        let (i, j) = (pick.sample(&mut rng), pick.sample(&mut rng));
        if i == j || adjacent[i].contains(&j) {
            continue;
        }
        builder.add_link(asn(i.min(j)), asn(i.max(j)), Relationship::P2P)?;
        adjacent[i].push(j);
        adjacent[j].push(i);
        placed += 1;
    }
    Ok(builder.build())
}

fn weighted_pick<R: Rng, F: Fn(usize) -> f64>(
    rng: &mut R,
    range: std::ops::Range<usize>,
    weight: F,
) -> Option<usize> {
    let weights: Vec<f64> = range.clone().map(&weight).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    for (off, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        if target < *w {
            return Some(range.start + off);
        }
        target -= w;
    }
    // rounding left us past the end; take the last eligible candidate
    weights.iter().rposition(|w| *w > 0.0).map(|off| range.start + off)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<AsGraph, TopologyError> {
        parse_as_rel(s.as_bytes())
    }

    #[test]
    fn parses_provider_customer_line() {
        let g = parse("1|2|-1\n").unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.relationship_from(Asn(2), Asn(1)), Some(Role::Provider));
        assert_eq!(g.relationship_from(Asn(1), Asn(2)), Some(Role::Customer));
    }

    #[test]
    fn parses_peer_line() {
        let g = parse("3|4|0\n").unwrap();
        assert_eq!(g.relationship_from(Asn(4), Asn(3)), Some(Role::Peer));
        assert_eq!(g.relationship_from(Asn(3), Asn(4)), Some(Role::Peer));
        assert_eq!(g.relationship_from(Asn(3), Asn(5)), None);
    }

    #[test]
    fn comments_and_duplicates() {
        let g = parse("# source: test\n1|2|-1\n1|2|-1\n2|3|0\n3|2|0\n").unwrap();
        assert_eq!(g.link_count(), 2);
    }

    #[test]
    fn extra_columns_are_ignored() {
        let g = parse("1|2|-1|bgp\n2|3|0|mlp\n").unwrap();
        assert_eq!(g.link_count(), 2);
    }

    #[test]
    fn conflicting_duplicate_is_an_error() {
        let err = parse("1|2|-1\n2|1|-1\n").unwrap_err();
        assert!(matches!(err, TopologyError::Conflict { line: Some(2), .. }), "{err}");
        let err = parse("1|2|-1\n1|2|0\n").unwrap_err();
        assert!(matches!(err, TopologyError::Conflict { .. }));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match parse("1|2|-1\n1|2\n").unwrap_err() {
            TopologyError::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        match parse("x|2|-1\n").unwrap_err() {
            TopologyError::InvalidAsn { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        match parse("1|2|1\n").unwrap_err() {
            TopologyError::InvalidRelationship { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse("1|4294967296|0\n"), Err(TopologyError::InvalidAsn { .. })));
        assert!(matches!(parse("5|5|0\n"), Err(TopologyError::SelfLoop { .. })));
    }

    #[test]
    fn max_asn_fits() {
        let g = parse("4294967295|1|0\n").unwrap();
        assert!(g.contains(Asn(u32::MAX)));
    }

    #[test]
    fn degree_profiles() {
        let star = AsGraph::from_links((1..=5).map(|c| (Asn(10), Asn(c), Relationship::P2C))).unwrap();
        assert_eq!(
            star.degree_profile(Asn(10)).unwrap(),
            DegreeProfile { peers: 0, customers: 5, providers: 0 }
        );
        let leak_graph = parse("1|4|-1\n2|4|-1\n").unwrap();
        assert_eq!(
            leak_graph.degree_profile(Asn(4)).unwrap(),
            DegreeProfile { peers: 0, customers: 0, providers: 2 }
        );
        let mut b = AsGraph::builder();
        b.add_node(Asn(9));
        let lonely = b.build();
        assert_eq!(lonely.degree_profile(Asn(9)).unwrap(), DegreeProfile::default());
        assert!(matches!(lonely.degree_profile(Asn(1)), Err(TopologyError::UnknownAsn(_))));
    }

    #[test]
    fn components_are_counted() {
        let g = parse("1|2|-1\n3|4|0\n").unwrap();
        assert_eq!(g.connected_components(), 2);
    }

    #[test]
    fn serialization_sorted_and_canonical() {
        let g = parse("9|2|0\n3|1|-1\n2|1|0\n").unwrap();
        assert_eq!(g.to_as_rel_string(), "1|2|0\n2|9|0\n3|1|-1\n");
    }

    #[test]
    fn provider_cycle_detected() {
        let g = parse("1|2|-1\n2|3|-1\n3|1|-1\n").unwrap();
        assert!(g.has_provider_cycle());
        let g = parse("1|2|-1\n2|3|-1\n1|3|-1\n").unwrap();
        assert!(!g.has_provider_cycle());
    }

    #[test]
    fn synthetic_is_deterministic_and_acyclic() {
        let a = generate_synthetic_topology(7, 50, SyntheticParams::default()).unwrap();
        let b = generate_synthetic_topology(7, 50, SyntheticParams::default()).unwrap();
        assert_eq!(a.to_as_rel_string(), b.to_as_rel_string());
        assert!(!a.has_provider_cycle());
        assert_eq!(a.connected_components(), 1);
        let c = generate_synthetic_topology(8, 50, SyntheticParams::default()).unwrap();
        assert_ne!(a.to_as_rel_string(), c.to_as_rel_string());
    }

    #[test]
    fn synthetic_rejects_degenerate_params() {
        let p = SyntheticParams { max_providers: 0, ..Default::default() };
        assert!(matches!(generate_synthetic_topology(1, 10, p), Err(TopologyError::InvalidParams(_))));
        assert!(generate_synthetic_topology(1, 2, SyntheticParams::default()).is_err());
        let p = SyntheticParams { multihoming: 1.5, ..Default::default() };
        assert!(generate_synthetic_topology(1, 10, p).is_err());
    }

    #[test]
    fn synthetic_provenance_survives_round_trip() {
        let g = generate_synthetic_topology(3, 20, SyntheticParams::default()).unwrap();
        let text = g.to_as_rel_string();
        assert!(text.starts_with("# synthetic seed=3 n=20"));
        let back = parse(&text).unwrap();
        assert_eq!(back, g);
    }
}
