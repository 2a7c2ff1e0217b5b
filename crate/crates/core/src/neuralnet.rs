//! Triple classifier: 96-bit input, a single-step gated recurrent layer (or a
//! plain dense layer), a rectified hidden layer and a two-way softmax.
//!
//! Output index 0 scores "regular" and index 1 scores "malicious"; a triple
//! is predicted regular only when the first output is strictly larger.
//!
//! Parameters live in one flat `f64` vector described by a shape table, so
//! federated updates are plain element-wise vector arithmetic.

use std::fmt;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::exec::Execution;
use crate::tripledata::{ClientDataset, Label, LabeledTriple, Triple};

pub const INPUT_BITS: usize = 96;
pub const OUTPUTS: usize = 2;

/// Adam moment decay rates and numerical floor.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// SHA-256 content digest.
pub type Digest = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// Three 32-bit big-endian binary expansions (first, middle, last),
/// concatenated. Stored packed; bit `j` of the feature vector is bit
/// `95 - j` of the packed key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripleEncoding(u128);

impl TripleEncoding {
    pub fn bits(&self) -> [u8; INPUT_BITS] {
        let mut out = [0u8; INPUT_BITS];
        for (j, b) in out.iter_mut().enumerate() {
            *b = ((self.0 >> (95 - j)) & 1) as u8;
        }
        out
    }

    pub fn features(&self) -> [f64; INPUT_BITS] {
        self.bits().map(f64::from)
    }

    pub fn decode(&self) -> Triple {
        Triple::from_key(self.0)
    }

    /// Indices of the features equal to one, ascending.
    fn active(&self) -> ActiveBits {
        ActiveBits(self.0)
    }
}

struct ActiveBits(u128);

impl Iterator for ActiveBits {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let p = 127 - self.0.leading_zeros() as usize;
        self.0 &= !(1u128 << p);
        Some(95 - p)
    }
}

pub fn encode_triple(t: &Triple) -> TripleEncoding {
    TripleEncoding(t.key())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One timestep of an LSTM cell (zero initial state).
    #[default]
    RecurrentGated,
    /// A `tanh` dense layer in place of the gated cell.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden1: usize,
    pub hidden2: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::RecurrentGated,
            hidden1: 128,
            hidden2: 64,
            seed: 0,
            learning_rate: 0.001,
            batch_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(NnError::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(NnError::InvalidConfig(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        let (h1, h2) = (self.hidden1, self.hidden2);
        let mut v = match self.architecture {
            Architecture::RecurrentGated => vec![
                LayerShape::new("lstm/kernel", &[INPUT_BITS, 4 * h1]),
                LayerShape::new("lstm/recurrent_kernel", &[h1, 4 * h1]),
                LayerShape::new("lstm/bias", &[4 * h1]),
            ],
            Architecture::Dense => vec![
                LayerShape::new("input/kernel", &[INPUT_BITS, h1]),
                LayerShape::new("input/bias", &[h1]),
            ],
        };
        v.extend([
            LayerShape::new("hidden/kernel", &[h1, h2]),
            LayerShape::new("hidden/bias", &[h2]),
            LayerShape::new("output/kernel", &[h2, OUTPUTS]),
            LayerShape::new("output/bias", &[OUTPUTS]),
        ]);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        Self { name: name.to_string(), dims: dims.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid serialized blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Flat parameter vector plus its shape table.
#[derive(Clone, PartialEq)]
pub struct ModelParams {
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
    version: u64,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("shapes", &self.shapes)
            .field("len", &self.values.len())
            .field("version", &self.version)
            .finish()
    }
}

impl ModelParams {
    pub fn from_parts(shapes: Vec<LayerShape>, values: Vec<f64>, version: u64) -> Result<Self, NnError> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if expected != values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape table describes {expected} values, got {}",
                values.len()
            )));
        }
        Layout::from_shapes(&shapes)?;
        Ok(Self { shapes, values, version })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable view of one named layer.
    pub fn layer_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let mut off = 0;
        for s in &self.shapes {
            if s.name == name {
                return Some(&mut self.values[off..off + s.len()]);
            }
            off += s.len();
        }
        None
    }

    fn check_shapes(&self, other: &[LayerShape]) -> Result<(), NnError> {
        if self.shapes != other {
            return Err(NnError::ShapeMismatch("shape tables differ".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_blob(PARAMS_MAGIC, self.version, &self.shapes, &self.values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let (version, shapes, values) = decode_blob(PARAMS_MAGIC, bytes)?;
        Self::from_parts(shapes, values, version)
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.to_bytes())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Additive delta between two parameter vectors.
#[derive(Clone, PartialEq)]
pub struct ModelUpdate {
    shapes: Vec<LayerShape>,
    delta: Vec<f64>,
    base_version: u64,
}

impl fmt::Debug for ModelUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelUpdate")
            .field("len", &self.delta.len())
            .field("base_version", &self.base_version)
            .finish()
    }
}

impl ModelUpdate {
    pub fn from_parts(shapes: Vec<LayerShape>, delta: Vec<f64>, base_version: u64) -> Result<Self, NnError> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if expected != delta.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape table describes {expected} values, got {}",
                delta.len()
            )));
        }
        Ok(Self { shapes, delta, base_version })
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            shapes: params.shapes.clone(),
            delta: vec![0.0; params.len()],
            base_version: params.version,
        }
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn base_version(&self) -> u64 {
        self.base_version
    }

    pub fn negated(&self) -> Self {
        Self {
            shapes: self.shapes.clone(),
            delta: self.delta.iter().map(|x| -x).collect(),
            base_version: self.base_version,
        }
    }

    /// Element-wise sum of two updates.
    pub fn add(&self, other: &ModelUpdate) -> Result<Self, NnError> {
        if self.shapes != other.shapes {
            return Err(NnError::ShapeMismatch("shape tables differ".into()));
        }
        Ok(Self {
            shapes: self.shapes.clone(),
            delta: self.delta.iter().zip(&other.delta).map(|(a, b)| a + b).collect(),
            base_version: self.base_version,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_blob(UPDATE_MAGIC, self.base_version, &self.shapes, &self.delta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let (base_version, shapes, delta) = decode_blob(UPDATE_MAGIC, bytes)?;
        Self::from_parts(shapes, delta, base_version)
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.to_bytes())
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"RLDM";
const UPDATE_MAGIC: &[u8; 4] = b"RLDU";
const BLOB_FORMAT: u32 = 1;

// magic | format u32 | version u64 | n_layers u32 | { name_len u32, name,
// n_dims u32, dims u64* }* | n_values u64 | f64* ; all little-endian
fn encode_blob(magic: &[u8; 4], version: u64, shapes: &[LayerShape], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + values.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&BLOB_FORMAT.to_le_bytes());
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for s in shapes {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for &d in &s.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format("truncated blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_blob(magic: &[u8; 4], bytes: &[u8]) -> Result<(u64, Vec<LayerShape>, Vec<f64>), NnError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != magic {
        return Err(NnError::Format("bad magic".into()));
    }
    let format = c.u32()?;
    if format != BLOB_FORMAT {
        return Err(NnError::Format(format!("unsupported format version {format}")));
    }
    let version = c.u64()?;
    let n_layers = c.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| NnError::Format("layer name is not UTF-8".into()))?
            .to_string();
        let n_dims = c.u32()? as usize;
        let mut dims = Vec::with_capacity(n_dims.min(8));
        for _ in 0..n_dims {
            dims.push(c.u64()? as usize);
        }
        shapes.push(LayerShape { name, dims });
    }
    let n = c.u64()? as usize;
    let raw = c.take(n.checked_mul(8).ok_or_else(|| NnError::Format("length overflow".into()))?)?;
    let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    if c.pos != bytes.len() {
        return Err(NnError::Format("trailing bytes".into()));
    }
    Ok((version, shapes, values))
}

/// Offsets of every layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    arch: Architecture,
    h1: usize,
    h2: usize,
    // first layer
    k1: usize,
    b1: usize,
    k2: usize,
    b2: usize,
    k3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn from_shapes(shapes: &[LayerShape]) -> Result<Self, NnError> {
        let bad = || NnError::ShapeMismatch("unrecognized layer table".into());
        let names: Vec<&str> = shapes.iter().map(|s| s.name.as_str()).collect();
        let (arch, h1) = match names.first() {
            Some(&"lstm/kernel") => {
                let d = &shapes[0].dims;
                if d.len() != 2 || d[0] != INPUT_BITS || !d[1].is_multiple_of(4) {
                    return Err(bad());
                }
                (Architecture::RecurrentGated, d[1] / 4)
            }
            Some(&"input/kernel") => {
                let d = &shapes[0].dims;
                if d.len() != 2 || d[0] != INPUT_BITS {
                    return Err(bad());
                }
                (Architecture::Dense, d[1])
            }
            _ => return Err(bad()),
        };
        let hidden = shapes
            .iter()
            .find(|s| s.name == "hidden/kernel")
            .ok_or_else(bad)?;
        if hidden.dims.len() != 2 {
            return Err(bad());
        }
        let h2 = hidden.dims[1];
        let expected = ModelConfig { architecture: arch, hidden1: h1, hidden2: h2, ..Default::default() }.shapes();
        if expected != shapes {
            return Err(bad());
        }
        let offsets: Vec<usize> = shapes
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.len();
                Some(o)
            })
            .collect();
        let len: usize = shapes.iter().map(LayerShape::len).sum();
        let l = match arch {
            Architecture::RecurrentGated => Layout {
                arch,
                h1,
                h2,
                k1: offsets[0],
                b1: offsets[2],
                k2: offsets[3],
                b2: offsets[4],
                k3: offsets[5],
                b3: offsets[6],
                len,
            },
            Architecture::Dense => Layout {
                arch,
                h1,
                h2,
                k1: offsets[0],
                b1: offsets[1],
                k2: offsets[2],
                b2: offsets[3],
                k3: offsets[4],
                b3: offsets[5],
                len,
            },
        };
        Ok(l)
    }

    fn gate_width(&self) -> usize {
        match self.arch {
            Architecture::RecurrentGated => 4 * self.h1,
            Architecture::Dense => self.h1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-sample activations kept for the backward pass.
struct Cache {
    z1: Vec<f64>,
    // gate activations (i, f, g, o) or dense tanh output
    act: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    r2: Vec<f64>,
    logits: [f64; OUTPUTS],
    // backward scratch
    dh1: Vec<f64>,
    dr2: Vec<f64>,
    dz1: Vec<f64>,
}

impl Cache {
    fn new(l: &Layout) -> Self {
        let gw = l.gate_width();
        Self {
            z1: vec![0.0; gw],
            act: vec![0.0; gw],
            c: vec![0.0; l.h1],
            tc: vec![0.0; l.h1],
            h1: vec![0.0; l.h1],
            a2: vec![0.0; l.h2],
            r2: vec![0.0; l.h2],
            logits: [0.0; OUTPUTS],
            dh1: vec![0.0; l.h1],
            dr2: vec![0.0; l.h2],
            dz1: vec![0.0; gw],
        }
    }
}

fn forward_cached(l: &Layout, w: &[f64], x: TripleEncoding, cache: &mut Cache) {
    let gw = l.gate_width();
    let h1 = l.h1;
    cache.z1.copy_from_slice(&w[l.b1..l.b1 + gw]);
    for j in x.active() {
        let row = &w[l.k1 + j * gw..l.k1 + (j + 1) * gw];
        for (z, r) in cache.z1.iter_mut().zip(row) {
            *z += r;
        }
    }
    match l.arch {
        Architecture::RecurrentGated => {
            // gate order i, f, g, o; with zero initial state c = i * g
            for u in 0..h1 {
                let i = sigmoid(cache.z1[u]);
                let f = sigmoid(cache.z1[h1 + u]);
                let g = cache.z1[2 * h1 + u].tanh();
                let o = sigmoid(cache.z1[3 * h1 + u]);
                cache.act[u] = i;
                cache.act[h1 + u] = f;
                cache.act[2 * h1 + u] = g;
                cache.act[3 * h1 + u] = o;
                let c = i * g;
                let tc = c.tanh();
                cache.c[u] = c;
                cache.tc[u] = tc;
                cache.h1[u] = o * tc;
            }
        }
        Architecture::Dense => {
            for u in 0..h1 {
                let t = cache.z1[u].tanh();
                cache.act[u] = t;
                cache.h1[u] = t;
            }
        }
    }
    let h2 = l.h2;
    cache.a2.copy_from_slice(&w[l.b2..l.b2 + h2]);
    for (i, &hv) in cache.h1.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let row = &w[l.k2 + i * h2..l.k2 + (i + 1) * h2];
        for (a, r) in cache.a2.iter_mut().zip(row) {
            *a += hv * r;
        }
    }
    for (r, &a) in cache.r2.iter_mut().zip(&cache.a2) {
        *r = a.max(0.0);
    }
    let mut logits = [w[l.b3], w[l.b3 + 1]];
    for (i, &rv) in cache.r2.iter().enumerate() {
        logits[0] += rv * w[l.k3 + i * OUTPUTS];
        logits[1] += rv * w[l.k3 + i * OUTPUTS + 1];
    }
    cache.logits = logits;
}

fn softmax(logits: [f64; OUTPUTS]) -> [f64; OUTPUTS] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Output index trained towards for a label.
fn target_index(label: Label) -> usize {
    match label {
        Label::Regular => 0,
        Label::Malicious => 1,
    }
}

fn cross_entropy(logits: [f64; OUTPUTS], target: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[target]
}

/// Accumulates `scale * dLoss/dw` for one sample into `grad`; returns the
/// sample's loss.
fn backward_accumulate(
    l: &Layout,
    w: &[f64],
    x: TripleEncoding,
    target: usize,
    scale: f64,
    cache: &mut Cache,
    grad: &mut [f64],
) -> f64 {
    forward_cached(l, w, x, cache);
    let loss = cross_entropy(cache.logits, target);
    let p = softmax(cache.logits);
    let mut dl = [p[0] * scale, p[1] * scale];
    dl[target] -= scale;

    let (h1, h2) = (l.h1, l.h2);
    grad[l.b3] += dl[0];
    grad[l.b3 + 1] += dl[1];
    for i in 0..h2 {
        let rv = cache.r2[i];
        grad[l.k3 + i * OUTPUTS] += rv * dl[0];
        grad[l.k3 + i * OUTPUTS + 1] += rv * dl[1];
        let d = w[l.k3 + i * OUTPUTS] * dl[0] + w[l.k3 + i * OUTPUTS + 1] * dl[1];
        // relu gate
        cache.dr2[i] = if cache.a2[i] > 0.0 { d } else { 0.0 };
    }
    for j in 0..h2 {
        grad[l.b2 + j] += cache.dr2[j];
    }
    for i in 0..h1 {
        let hv = cache.h1[i];
        let row_w = &w[l.k2 + i * h2..l.k2 + (i + 1) * h2];
        let row_g = &mut grad[l.k2 + i * h2..l.k2 + (i + 1) * h2];
        let mut acc = 0.0;
        for j in 0..h2 {
            let d = cache.dr2[j];
            row_g[j] += hv * d;
            acc += row_w[j] * d;
        }
        cache.dh1[i] = acc;
    }

    match l.arch {
        Architecture::RecurrentGated => {
            for u in 0..h1 {
                let dh = cache.dh1[u];
                let (i, g, o) = (cache.act[u], cache.act[2 * h1 + u], cache.act[3 * h1 + u]);
                let tc = cache.tc[u];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc);
                cache.dz1[u] = dc * g * i * (1.0 - i);
                // the forget gate multiplies a zero cell state
                cache.dz1[h1 + u] = 0.0;
                cache.dz1[2 * h1 + u] = dc * i * (1.0 - g * g);
                cache.dz1[3 * h1 + u] = d_o * o * (1.0 - o);
            }
        }
        Architecture::Dense => {
            for u in 0..h1 {
                let t = cache.act[u];
                cache.dz1[u] = cache.dh1[u] * (1.0 - t * t);
            }
        }
    }
    let gw = l.gate_width();
    for (gb, d) in grad[l.b1..l.b1 + gw].iter_mut().zip(&cache.dz1) {
        *gb += d;
    }
    for j in x.active() {
        let row = &mut grad[l.k1 + j * gw..l.k1 + (j + 1) * gw];
        for (g, d) in row.iter_mut().zip(&cache.dz1) {
            *g += d;
        }
    }
    loss
}

/// Deterministic initialization: kernels uniform in `±1/sqrt(fan_in)` drawn
/// in layer order from the config seed, biases zero.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams, NnError> {
    config.validate()?;
    let shapes = config.shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut values = Vec::with_capacity(shapes.iter().map(LayerShape::len).sum());
    for s in &shapes {
        if s.dims.len() == 2 {
            let bound = 1.0 / (s.dims[0] as f64).sqrt();
            values.extend((0..s.len()).map(|_| rng.gen_range(-bound..bound)));
        } else {
            values.extend(std::iter::repeat_n(0.0, s.len()));
        }
    }
    ModelParams::from_parts(shapes, values, 0)
}

/// Raw output scores before the softmax.
pub fn logits(params: &ModelParams, x: &TripleEncoding) -> [f64; OUTPUTS] {
    let l = Layout::from_shapes(&params.shapes).expect("validated at construction");
    let mut cache = Cache::new(&l);
    forward_cached(&l, &params.values, *x, &mut cache);
    cache.logits
}

/// Softmax output `(regular, malicious)`.
pub fn forward(params: &ModelParams, x: &TripleEncoding) -> [f64; OUTPUTS] {
    softmax(logits(params, x))
}

pub fn forward_batch(params: &ModelParams, xs: &[TripleEncoding], exec: Execution) -> Vec<[f64; OUTPUTS]> {
    let l = Layout::from_shapes(&params.shapes).expect("validated at construction");
    const CHUNK: usize = 256;
    let chunks: Vec<&[TripleEncoding]> = xs.chunks(CHUNK).collect();
    exec.map(&chunks, |chunk| {
        let mut cache = Cache::new(&l);
        chunk
            .iter()
            .map(|x| {
                forward_cached(&l, &params.values, *x, &mut cache);
                softmax(cache.logits)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Regular only when the first output is strictly larger; ties are
/// malicious.
pub fn label_from_output(out: [f64; OUTPUTS]) -> Label {
    if out[0] > out[1] {
        Label::Regular
    } else {
        Label::Malicious
    }
}

pub fn predict(params: &ModelParams, t: &Triple) -> Label {
    label_from_output(forward(params, &encode_triple(t)))
}

pub fn predict_batch(params: &ModelParams, ts: &[Triple], exec: Execution) -> Vec<Label> {
    let xs: Vec<TripleEncoding> = ts.iter().map(encode_triple).collect();
    forward_batch(params, &xs, exec).into_iter().map(label_from_output).collect()
}

/// Mean cross-entropy and its gradient over `samples`.
pub fn loss_and_gradient(params: &ModelParams, samples: &[LabeledTriple]) -> (f64, Vec<f64>) {
    let l = Layout::from_shapes(&params.shapes).expect("validated at construction");
    let mut cache = Cache::new(&l);
    let mut grad = vec![0.0; l.len];
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut loss = 0.0;
    for s in samples {
        loss += backward_accumulate(
            &l,
            &params.values,
            encode_triple(&s.triple),
            target_index(s.label),
            scale,
            &mut cache,
            &mut grad,
        );
    }
    (loss * scale, grad)
}

/// Mean cross-entropy over `samples` (forward only).
pub fn mean_loss(params: &ModelParams, samples: &[LabeledTriple]) -> f64 {
    let l = Layout::from_shapes(&params.shapes).expect("validated at construction");
    let mut cache = Cache::new(&l);
    let total: f64 = samples
        .iter()
        .map(|s| {
            forward_cached(&l, &params.values, encode_triple(&s.triple), &mut cache);
            cross_entropy(cache.logits, target_index(s.label))
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Adam first and second moments plus step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        for k in 0..w.len() {
            let gk = g[k];
            let m = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * gk;
            let v = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            self.m[k] = m;
            self.v[k] = v;
            if m != 0.0 {
                w[k] -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPSILON);
            }
        }
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch Adam trainer holding a private parameter copy and optimizer
/// state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    adam: AdamState,
    layout: Layout,
    learning_rate: f64,
    batch_size: usize,
    epochs_run: u64,
}

impl Trainer {
    pub fn new(params: ModelParams, config: &ModelConfig) -> Result<Self, NnError> {
        let adam = AdamState::new(params.len());
        Self::with_state(params, adam, config)
    }

    pub fn with_state(params: ModelParams, adam: AdamState, config: &ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::from_shapes(&params.shapes)?;
        if adam.m.len() != params.len() {
            return Err(NnError::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            params,
            adam,
            layout,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            epochs_run: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Replaces the parameters, keeping the optimizer state.
    pub fn set_params(&mut self, params: ModelParams) -> Result<(), NnError> {
        self.params.check_shapes(&params.shapes)?;
        self.params = params;
        Ok(())
    }

    pub fn into_parts(self) -> (ModelParams, AdamState) {
        (self.params, self.adam)
    }

    /// One pass over `data` in an order shuffled by `(seed, epoch)`.
    /// Returns the mean loss over the epoch's samples, measured on each
    /// batch before its update.
    pub fn run_epoch(&mut self, data: &[LabeledTriple], seed: u64, epoch: u64) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
        order.shuffle(&mut rng);

        let l = self.layout;
        let mut cache = Cache::new(&l);
        let mut grad = vec![0.0; l.len];
        let mut total_loss = 0.0;
        for batch in order.chunks(self.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &data[i];
                total_loss += backward_accumulate(
                    &l,
                    &self.params.values,
                    encode_triple(&s.triple),
                    target_index(s.label),
                    scale,
                    &mut cache,
                    &mut grad,
                );
            }
            self.adam.step(&mut self.params.values, &grad, self.learning_rate);
        }
        self.epochs_run += 1;
        Ok(total_loss / data.len() as f64)
    }
}

/// `epochs` passes of mini-batch Adam from fresh optimizer state; epoch `e`
/// is shuffled by `(seed, e)`. The input is left untouched.
pub fn train_epochs(
    params: &ModelParams,
    data: &ClientDataset,
    epochs: usize,
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParams, NnError> {
    train_epochs_with_losses(params, &data.samples, epochs, config, seed).map(|(p, _)| p)
}

/// Like [`train_epochs`] over a raw sample slice, also returning the mean
/// loss of every epoch.
pub fn train_epochs_with_losses(
    params: &ModelParams,
    data: &[LabeledTriple],
    epochs: usize,
    config: &ModelConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut trainer = Trainer::new(params.clone(), config)?;
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        losses.push(trainer.run_epoch(data, seed, e as u64)?);
    }
    let (mut out, _) = trainer.into_parts();
    out.version = params.version + 1;
    Ok((out, losses))
}

/// `after - before`, element-wise.
pub fn model_get_update(before: &ModelParams, after: &ModelParams) -> Result<ModelUpdate, NnError> {
    before.check_shapes(&after.shapes)?;
    Ok(ModelUpdate {
        shapes: before.shapes.clone(),
        delta: after.values.iter().zip(&before.values).map(|(a, b)| a - b).collect(),
        base_version: before.version,
    })
}

/// `params + update`, element-wise.
pub fn apply_update(params: &ModelParams, update: &ModelUpdate) -> Result<ModelParams, NnError> {
    params.check_shapes(&update.shapes)?;
    Ok(ModelParams {
        shapes: params.shapes.clone(),
        values: params.values.iter().zip(&update.delta).map(|(p, d)| p + d).collect(),
        version: params.version + 1,
    })
}
