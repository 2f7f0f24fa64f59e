//! Desk-scale multi-layer, multi-head attention with RoPE and a pluggable
//! precision policy.
//!
//! Layers are independent banks of q/k projections that all read the same
//! input; there are no value/output projections, residuals or MLPs. Only the
//! pre-softmax logits and their softmax are produced.
//!
//! Pipeline for one `(layer, head)`:
//!
//! 1. `q = W_Q x`, `k = W_K x` in the rotation precision.
//! 2. rotate to `position + shift` in the rotation precision.
//! 3. round q/k to the storage format.
//! 4. `q_i . k_j` in the accumulation precision (pairwise order).
//! 5. row softmax in the softmax precision, optionally re-rounded.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::AttentionPlan;
use crate::precision::{ComputePrecision, PrecisionPolicy, StorageFormat};
use crate::reduce::{pairwise_dot, pairwise_sum, Lane};
use crate::rope::{PositionShift, RopeError, RotaryConfig};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const CONTAINER_MAGIC: &[u8; 8] = b"RPLTENS1";

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("input has {got} columns, model width is {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("input must contain at least one token")]
    EmptyInput,
    #[error("plan covers {plan} tokens but the input has {input}")]
    PlanLength { plan: usize, input: usize },
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("shape mismatch: header implies {expected} payload bytes, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite weight in layer {layer} at flat index {index}")]
    NonFiniteWeight { layer: usize, index: usize },
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Query/key projections of one layer, each `d_model x d_model` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: Vec<LayerWeights>,
    heads: usize,
    d_model: usize,
    rotary: RotaryConfig,
}

impl AttentionStack {
    pub fn new(layers: Vec<LayerWeights>, heads: usize, d_model: usize, rope_base: f64) -> Result<Self> {
        check_dims(layers.len(), heads, d_model)?;
        let n = d_model * d_model;
        for (l, layer) in layers.iter().enumerate() {
            if layer.w_q.len() != n || layer.w_k.len() != n {
                return Err(AttentionError::InvalidDimensions(format!(
                    "layer {l} projections must have {n} entries"
                )));
            }
            let bad = layer.w_q.iter().chain(&layer.w_k).position(|w| !w.is_finite());
            if let Some(index) = bad {
                return Err(AttentionError::NonFiniteWeight { layer: l, index });
            }
        }
        let rotary = RotaryConfig::new(d_model / heads, rope_base)?;
        Ok(AttentionStack { layers, heads, d_model, rotary })
    }

    /// Weights uniform in `[-1/sqrt(d_model), 1/sqrt(d_model)]`, deterministic per seed.
    pub fn init_random(layers: usize, heads: usize, d_model: usize, seed: u64) -> Result<Self> {
        check_dims(layers, heads, d_model)?;
        let bound = (1.0 / (d_model as f64).sqrt()) as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d_model * d_model;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let layers = (0..layers)
            .map(|_| {
                let w_q = draw(&mut rng);
                let w_k = draw(&mut rng);
                LayerWeights { w_q, w_k }
            })
            .collect();
        AttentionStack::new(layers, heads, d_model, DEFAULT_ROPE_BASE)
    }

    /// Swap in a different RoPE base (e.g. an NTK/YaRN-adjusted effective base).
    pub fn with_rope_base(mut self, base: f64) -> Result<Self> {
        self.rotary = RotaryConfig::new(self.head_dim(), base)?.with_layout(self.rotary.layout());
        Ok(self)
    }

    pub fn with_rotary(mut self, rotary: RotaryConfig) -> Result<Self> {
        if rotary.head_dim() != self.head_dim() {
            return Err(AttentionError::InvalidDimensions(format!(
                "rotary head_dim {} != {}",
                rotary.head_dim(),
                self.head_dim()
            )));
        }
        self.rotary = rotary;
        Ok(self)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn rotary(&self) -> &RotaryConfig {
        &self.rotary
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Write the tensor container: magic, u64-LE header length, JSON header,
    /// then f32-LE payload (`W_Q` then `W_K` for each layer).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ContainerHeader {
            layers: self.layers.len(),
            heads: self.heads,
            d_model: self.d_model,
            dtype: "f32".into(),
            order: "row-major".into(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for layer in &self.layers {
            for x in layer.w_q.iter().chain(&layer.w_k) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let malformed = |m: &str| AttentionError::MalformedContainer(m.to_string());
        let mut magic = [0u8; 8];
        read_exact_or(&mut r, &mut magic, "missing magic")?;
        if &magic != CONTAINER_MAGIC {
            return Err(malformed("bad magic"));
        }
        let mut len = [0u8; 8];
        read_exact_or(&mut r, &mut len, "missing header length")?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 20 {
            return Err(malformed("header length implausibly large"));
        }
        let mut json = vec![0u8; len as usize];
        read_exact_or(&mut r, &mut json, "truncated header")?;
        let header: ContainerHeader = serde_json::from_slice(&json)
            .map_err(|e| AttentionError::MalformedContainer(format!("header: {e}")))?;
        if header.dtype != "f32" || header.order != "row-major" {
            return Err(malformed("unsupported dtype or order"));
        }
        check_dims(header.layers, header.heads, header.d_model)?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let n = header.d_model * header.d_model;
        let expected = header.layers * 2 * n * 4;
        if payload.len() != expected {
            return Err(AttentionError::ShapeMismatch { expected, found: payload.len() });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let layers = values
            .chunks_exact(2 * n)
            .map(|c| LayerWeights { w_q: c[..n].to_vec(), w_k: c[n..].to_vec() })
            .collect();
        AttentionStack::new(layers, header.heads, header.d_model, DEFAULT_ROPE_BASE)
    }
}

/// Load a stack from a tensor container file (RoPE base 10000).
pub fn load_weights(path: impl AsRef<Path>) -> Result<AttentionStack> {
    AttentionStack::read_from(BufReader::new(File::open(path)?))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => AttentionError::MalformedContainer(what.to_string()),
        _ => AttentionError::Io(e),
    })
}

fn check_dims(layers: usize, heads: usize, d_model: usize) -> Result<()> {
    if layers == 0 || heads == 0 || d_model == 0 {
        return Err(AttentionError::InvalidDimensions(
            "layers, heads and d_model must be positive".into(),
        ));
    }
    if !d_model.is_multiple_of(heads) {
        return Err(AttentionError::InvalidDimensions(format!(
            "d_model {d_model} not divisible by {heads} heads"
        )));
    }
    if !(d_model / heads).is_multiple_of(2) {
        return Err(AttentionError::InvalidDimensions(format!(
            "head dimension {} must be even",
            d_model / heads
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    layers: usize,
    heads: usize,
    d_model: usize,
    dtype: String,
    order: String,
}

/// Dense row-major matrix of token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// First `rows` rows.
    pub fn truncated(&self, rows: usize) -> Matrix {
        let rows = rows.min(self.rows);
        Matrix::from_vec(rows, self.cols, self.data[..rows * self.cols].to_vec())
    }
}

/// Standard-normal token embeddings, stored at f32 precision so every policy
/// sees the same input. `stream` selects an independent sequence per seed.
pub fn gaussian_input(t: usize, d_model: usize, seed: u64, stream: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..t * d_model)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32 as f64
        })
        .collect();
    Matrix::from_vec(t, d_model, data)
}

/// Square lower-triangular matrix stored packed by rows. Entries above the
/// diagonal read as `above`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangularMatrix {
    n: usize,
    above: f64,
    data: Vec<f64>,
}

/// Pre-softmax `q.k` per pair; pairs a plan masks out hold `-inf`.
pub type LogitMatrix = TriangularMatrix;
/// Softmax probabilities; masked and future entries are exactly 0.
pub type ScoreMatrix = TriangularMatrix;

impl TriangularMatrix {
    fn filled(n: usize, fill: f64, above: f64) -> Self {
        TriangularMatrix { n, above, data: vec![fill; n * (n + 1) / 2] }
    }

    #[inline]
    fn offset(i: usize) -> usize {
        i * (i + 1) / 2
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            self.above
        } else {
            self.data[Self::offset(i) + j]
        }
    }

    /// Entries `0..=i` of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let o = Self::offset(i);
        &self.data[o..o + i + 1]
    }

    #[inline]
    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let o = Self::offset(i);
        &mut self.data[o..o + i + 1]
    }
}

/// One value per `(layer, head)`, layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrid<T> {
    layers: usize,
    heads: usize,
    items: Vec<T>,
}

impl<T> HeadGrid<T> {
    pub fn from_fn(layers: usize, heads: usize, f: impl Fn(usize, usize) -> T + Sync) -> Self
    where
        T: Send,
    {
        let items = (0..layers * heads)
            .into_par_iter()
            .map(|k| f(k / heads, k % heads))
            .collect();
        HeadGrid { layers, heads, items }
    }

    pub fn try_from_fn<E: Send>(
        layers: usize,
        heads: usize,
        f: impl Fn(usize, usize) -> std::result::Result<T, E> + Sync,
    ) -> std::result::Result<Self, E>
    where
        T: Send,
    {
        let items = (0..layers * heads)
            .into_par_iter()
            .map(|k| f(k / heads, k % heads))
            .collect::<std::result::Result<Vec<T>, E>>()?;
        Ok(HeadGrid { layers, heads, items })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn get(&self, layer: usize, head: usize) -> &T {
        &self.items[layer * self.heads + head]
    }

    /// `((layer, head), item)` in layer-major order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let h = self.heads;
        self.items.iter().enumerate().map(move |(k, x)| ((k / h, k % h), x))
    }
}

/// Un-rotated q/k projections for every `(layer, head)`, already rounded to a
/// rotation precision. Independent of position shift, so shift sweeps reuse it.
#[derive(Clone, Debug)]
pub struct Projections {
    tokens: usize,
    precision: ComputePrecision,
    heads: HeadGrid<HeadProjection>,
}

#[derive(Clone, Debug)]
struct HeadProjection {
    q: Vec<f64>,
    k: Vec<f64>,
}

impl Projections {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn precision(&self) -> ComputePrecision {
        self.precision
    }
}

fn project_lane<R: Lane>(w: &[f32], x: &[R], t: usize, d_model: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let w_rows: Vec<Vec<R>> = rows
        .map(|r| w[r * d_model..(r + 1) * d_model].iter().map(|&v| R::from_f64(v as f64)).collect())
        .collect();
    let mut out = Vec::with_capacity(t * w_rows.len());
    for tok in 0..t {
        let xt = &x[tok * d_model..(tok + 1) * d_model];
        out.extend(w_rows.iter().map(|wr| pairwise_dot(wr, xt).to_f64()));
    }
    out
}

fn project_all<R: Lane>(stack: &AttentionStack, x: &Matrix) -> HeadGrid<HeadProjection> {
    let xl: Vec<R> = x.as_slice().iter().map(|&v| R::from_f64(v)).collect();
    let (t, dm, d) = (x.rows(), stack.d_model, stack.head_dim());
    HeadGrid::from_fn(stack.num_layers(), stack.heads, |l, h| {
        let layer = &stack.layers[l];
        let rows = h * d..(h + 1) * d;
        HeadProjection {
            q: project_lane::<R>(&layer.w_q, &xl, t, dm, rows.clone()),
            k: project_lane::<R>(&layer.w_k, &xl, t, dm, rows),
        }
    })
}

/// Compute `W_Q x` and `W_K x` for every head in `precision`.
pub fn project(stack: &AttentionStack, x: &Matrix, precision: ComputePrecision) -> Result<Projections> {
    if x.rows() == 0 {
        return Err(AttentionError::EmptyInput);
    }
    if x.cols() != stack.d_model {
        return Err(AttentionError::InputWidth { expected: stack.d_model, got: x.cols() });
    }
    let heads = match precision {
        ComputePrecision::F64 => project_all::<f64>(stack, x),
        ComputePrecision::F32 => project_all::<f32>(stack, x),
    };
    Ok(Projections { tokens: x.rows(), precision, heads })
}

/// Rotate every token's head vector to `positions[t]` and round it to `storage`,
/// returning values in the accumulation lane.
fn rotate_store<R: Lane, A: Lane>(
    raw: &[f64],
    tables: &[(R, R)],
    positions: &[u64],
    rotary: &RotaryConfig,
    storage: StorageFormat,
) -> Vec<A> {
    let d = rotary.head_dim();
    let half = d / 2;
    let mut buf: Vec<R> = vec![R::ZERO; d];
    let mut out = Vec::with_capacity(raw.len());
    for (t, v) in raw.chunks_exact(d).enumerate() {
        for (b, &x) in buf.iter_mut().zip(v) {
            *b = R::from_f64(x);
        }
        rotary.apply(&mut buf, &tables[t * half..(t + 1) * half], positions[t]);
        out.extend(buf.iter().map(|&x| A::from_f64(storage.round(x.to_f64()))));
    }
    out
}

struct Rotated<A> {
    q: Vec<A>,
    k: Vec<A>,
}

fn shifted_positions(positions: &[u64], shift: PositionShift) -> Result<Vec<u64>> {
    positions
        .iter()
        .map(|&p| shift.apply(p).map_err(AttentionError::from))
        .collect()
}

fn tables_for<R: Lane>(rotary: &RotaryConfig, positions: &[u64]) -> Vec<(R, R)> {
    let mut all = Vec::with_capacity(positions.len() * rotary.head_dim() / 2);
    let mut one = Vec::new();
    for &p in positions {
        rotary.cos_sin::<R>(p, &mut one);
        all.extend_from_slice(&one);
    }
    all
}

fn logits_lane<R: Lane, A: Lane>(
    stack: &AttentionStack,
    proj: &Projections,
    positions: &[u64],
    storage: StorageFormat,
    plan: Option<&AttentionPlan>,
) -> HeadGrid<LogitMatrix> {
    let tables = tables_for::<R>(&stack.rotary, positions);
    let d = stack.head_dim();
    let t = proj.tokens;
    HeadGrid::from_fn(stack.num_layers(), stack.heads, |l, h| {
        let hp = proj.heads.get(l, h);
        let rot = Rotated::<A> {
            q: rotate_store::<R, A>(&hp.q, &tables, positions, &stack.rotary, storage),
            k: rotate_store::<R, A>(&hp.k, &tables, positions, &stack.rotary, storage),
        };
        let mut m = TriangularMatrix::filled(t, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..t {
            let qi = &rot.q[i * d..(i + 1) * d];
            let row = m.row_mut(i);
            let mut fill = |j: usize| {
                row[j] = pairwise_dot(qi, &rot.k[j * d..(j + 1) * d]).to_f64();
            };
            match plan {
                None => (0..=i).for_each(&mut fill),
                Some(p) => {
                    for &(lo, hi) in p.row(i) {
                        (lo..=hi).for_each(&mut fill);
                    }
                }
            }
        }
        m
    })
}

fn first_column_lane<R: Lane, A: Lane>(
    stack: &AttentionStack,
    proj: &Projections,
    positions: &[u64],
    storage: StorageFormat,
) -> HeadGrid<Vec<f64>> {
    let tables = tables_for::<R>(&stack.rotary, positions);
    let half = stack.head_dim() / 2;
    let d = stack.head_dim();
    HeadGrid::from_fn(stack.num_layers(), stack.heads, |l, h| {
        let hp = proj.heads.get(l, h);
        let q = rotate_store::<R, A>(&hp.q, &tables, positions, &stack.rotary, storage);
        let k0 = rotate_store::<R, A>(&hp.k[..d], &tables[..half], &positions[..1], &stack.rotary, storage);
        q.chunks_exact(d).map(|qi| pairwise_dot(qi, &k0).to_f64()).collect()
    })
}

fn base_positions(tokens: usize, plan: Option<&AttentionPlan>) -> Result<Vec<u64>> {
    match plan {
        Some(p) if p.len() != tokens => Err(AttentionError::PlanLength { plan: p.len(), input: tokens }),
        Some(p) => Ok(p.position_ids().to_vec()),
        None => Ok((0..tokens as u64).collect()),
    }
}

/// Logits for every `(layer, head)` from precomputed projections.
pub fn logits_from_projections(
    stack: &AttentionStack,
    proj: &Projections,
    shift: PositionShift,
    policy: &PrecisionPolicy,
    plan: Option<&AttentionPlan>,
) -> Result<HeadGrid<LogitMatrix>> {
    if proj.precision != policy.rotation {
        return Err(AttentionError::InvalidDimensions(
            "projections were computed in a different rotation precision".into(),
        ));
    }
    let positions = shifted_positions(&base_positions(proj.tokens, plan)?, shift)?;
    let s = policy.qk_storage;
    use ComputePrecision::*;
    Ok(match (policy.rotation, policy.accumulation) {
        (F64, F64) => logits_lane::<f64, f64>(stack, proj, &positions, s, plan),
        (F64, F32) => logits_lane::<f64, f32>(stack, proj, &positions, s, plan),
        (F32, F64) => logits_lane::<f32, f64>(stack, proj, &positions, s, plan),
        (F32, F32) => logits_lane::<f32, f32>(stack, proj, &positions, s, plan),
    })
}

/// Logits `A_{i,0}` against the first key only, for every query `i`.
pub fn first_column_logits(
    stack: &AttentionStack,
    proj: &Projections,
    shift: PositionShift,
    policy: &PrecisionPolicy,
) -> Result<HeadGrid<Vec<f64>>> {
    if proj.precision != policy.rotation {
        return Err(AttentionError::InvalidDimensions(
            "projections were computed in a different rotation precision".into(),
        ));
    }
    let positions = shifted_positions(&base_positions(proj.tokens, None)?, shift)?;
    let s = policy.qk_storage;
    use ComputePrecision::*;
    Ok(match (policy.rotation, policy.accumulation) {
        (F64, F64) => first_column_lane::<f64, f64>(stack, proj, &positions, s),
        (F64, F32) => first_column_lane::<f64, f32>(stack, proj, &positions, s),
        (F32, F64) => first_column_lane::<f32, f64>(stack, proj, &positions, s),
        (F32, F32) => first_column_lane::<f32, f32>(stack, proj, &positions, s),
    })
}

/// `A^{l,h}` for input `x` with every position shifted by `shift`. With a plan,
/// positions come from the plan and only allowed pairs are computed.
pub fn forward_logits(
    stack: &AttentionStack,
    x: &Matrix,
    shift: PositionShift,
    policy: &PrecisionPolicy,
    plan: Option<&AttentionPlan>,
) -> Result<HeadGrid<LogitMatrix>> {
    if let Some(p) = plan {
        if p.len() != x.rows() {
            return Err(AttentionError::PlanLength { plan: p.len(), input: x.rows() });
        }
    }
    let proj = project(stack, x, policy.rotation)?;
    logits_from_projections(stack, &proj, shift, policy, plan)
}

fn softmax_row<P: Lane>(logits: &[f64], out: &mut [f64], allowed: &[(usize, usize)], scratch: &mut Vec<P>) {
    scratch.clear();
    for &(lo, hi) in allowed {
        scratch.extend(logits[lo..=hi].iter().map(|&x| P::from_f64(x)));
    }
    let mut max = scratch[0];
    for &v in scratch.iter() {
        if v > max {
            max = v;
        }
    }
    for v in scratch.iter_mut() {
        *v = (*v - max).exp();
    }
    let sum = pairwise_sum(scratch);
    let mut k = 0;
    for &(lo, hi) in allowed {
        for o in &mut out[lo..=hi] {
            *o = (scratch[k] / sum).to_f64();
            k += 1;
        }
    }
}

/// Row-wise softmax over allowed entries with max subtraction. Entries outside
/// the plan (or above the diagonal) are exactly 0.
pub fn softmax_scores(
    logits: &LogitMatrix,
    plan: Option<&AttentionPlan>,
    precision: ComputePrecision,
) -> ScoreMatrix {
    let n = logits.size();
    if let Some(p) = plan {
        assert_eq!(p.len(), n, "plan size must match logits");
    }
    let mut out = TriangularMatrix::filled(n, 0.0, 0.0);
    let mut s32: Vec<f32> = Vec::new();
    let mut s64: Vec<f64> = Vec::new();
    for i in 0..n {
        let full = [(0, i)];
        let allowed: &[(usize, usize)] = match plan {
            Some(p) => p.row(i),
            None => &full,
        };
        let row = logits.row(i);
        let dst = out.row_mut(i);
        match precision {
            ComputePrecision::F64 => softmax_row(row, dst, allowed, &mut s64),
            ComputePrecision::F32 => softmax_row(row, dst, allowed, &mut s32),
        }
    }
    out
}

/// Scores for every head: logits, softmax in the policy's softmax precision,
/// then the policy's score rounding.
pub fn scores_from_logits(
    logits: &HeadGrid<LogitMatrix>,
    policy: &PrecisionPolicy,
    plan: Option<&AttentionPlan>,
) -> HeadGrid<ScoreMatrix> {
    HeadGrid::from_fn(logits.layers(), logits.heads(), |l, h| {
        let mut s = softmax_scores(logits.get(l, h), plan, policy.softmax);
        if policy.score_storage != StorageFormat::F64 {
            for v in &mut s.data {
                *v = policy.score_storage.round(*v);
            }
        }
        s
    })
}

pub fn forward_scores(
    stack: &AttentionStack,
    x: &Matrix,
    shift: PositionShift,
    policy: &PrecisionPolicy,
    plan: Option<&AttentionPlan>,
) -> Result<HeadGrid<ScoreMatrix>> {
    let logits = forward_logits(stack, x, shift, policy, plan)?;
    Ok(scores_from_logits(&logits, policy, plan))
}
