//! Rotary positional embedding.
//!
//! Chunk `i` of a head vector is rotated by `pos * freqs[i]` with
//! `freqs[i] = base^(-2i/d)`. Angles are always formed in f64; the cos/sin
//! values and the rotation arithmetic are then evaluated in the requested
//! precision.

use serde::{Deserialize, Serialize};

use crate::precision::{ComputePrecision, PrecisionPolicy};
use crate::reduce::{pairwise_dot, Lane};

/// Largest position (after shifting) whose value is exact in f64.
pub const MAX_POSITION: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RopeError {
    #[error("head dimension must be even and at least 2, got {0}")]
    OddHeadDim(usize),
    #[error("rope base must be positive and finite, got {0}")]
    InvalidBase(f64),
    #[error("vector length {got} does not match head dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("position {pos} + shift {shift} exceeds the exactly representable range")]
    PositionOverflow { pos: u64, shift: u64 },
}

/// Which coordinates form a rotation pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLayout {
    /// `(v[2i], v[2i+1])`, adjacent 2-d chunks.
    #[default]
    Chunked,
    /// `(v[i], v[i + d/2])`, the rotate-half convention.
    HalfSplit,
}

impl PairLayout {
    #[inline]
    fn pair(self, i: usize, half: usize) -> (usize, usize) {
        match self {
            PairLayout::Chunked => (2 * i, 2 * i + 1),
            PairLayout::HalfSplit => (i, i + half),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotaryConfig {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
    layout: PairLayout,
}

impl RotaryConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self, RopeError> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(RopeError::OddHeadDim(head_dim));
        }
        if !(base > 0.0 && base.is_finite()) {
            return Err(RopeError::InvalidBase(base));
        }
        let freqs = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RotaryConfig {
            head_dim,
            base,
            freqs,
            layout: PairLayout::Chunked,
        })
    }

    pub fn with_layout(mut self, layout: PairLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn layout(&self) -> PairLayout {
        self.layout
    }

    /// Per-chunk `(cos, sin)` for `pos`, rounded into lane `T`.
    pub(crate) fn cos_sin<T: Lane>(&self, pos: u64, out: &mut Vec<(T, T)>) {
        out.clear();
        out.extend(self.freqs.iter().map(|&f| {
            let angle = pos as f64 * f;
            (T::from_f64(cos(angle)), T::from_f64(sin(angle)))
        }));
    }

    /// Rotate `v` in place using a precomputed `(cos, sin)` table. Chunks with a
    /// zero angle are left untouched so position 0 is an exact identity.
    pub(crate) fn apply<T: Lane>(&self, v: &mut [T], table: &[(T, T)], pos: u64) {
        debug_assert_eq!(v.len(), self.head_dim);
        if pos == 0 {
            return;
        }
        let half = self.head_dim / 2;
        for (i, &(c, s)) in table.iter().enumerate() {
            let (a, b) = self.layout.pair(i, half);
            let (x, y) = (v[a], v[b]);
            v[a] = x * c - y * s;
            v[b] = x * s + y * c;
        }
    }
}

// Kept out of line so the compiler cannot merge the pair into `sincos`, which
// is not always correctly rounded for large angles.
#[inline(never)]
fn cos(x: f64) -> f64 {
    x.cos()
}

#[inline(never)]
fn sin(x: f64) -> f64 {
    x.sin()
}

/// Non-negative offset added to every position index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositionShift(pub u64);

impl PositionShift {
    pub fn apply(self, pos: u64) -> Result<u64, RopeError> {
        pos.checked_add(self.0)
            .filter(|&p| p <= MAX_POSITION)
            .ok_or(RopeError::PositionOverflow { pos, shift: self.0 })
    }
}

impl From<u64> for PositionShift {
    fn from(d: u64) -> Self {
        PositionShift(d)
    }
}

fn check_len(cfg: &RotaryConfig, v: &[f64]) -> Result<(), RopeError> {
    if v.len() != cfg.head_dim {
        return Err(RopeError::DimensionMismatch {
            expected: cfg.head_dim,
            got: v.len(),
        });
    }
    Ok(())
}

fn rotate_in<T: Lane>(v: &[f64], pos: u64, cfg: &RotaryConfig) -> Vec<T> {
    let mut lane: Vec<T> = v.iter().map(|&x| T::from_f64(x)).collect();
    let mut table = Vec::with_capacity(cfg.freqs.len());
    cfg.cos_sin(pos, &mut table);
    cfg.apply(&mut lane, &table, pos);
    lane
}

/// Rotate `v` to position `pos`, evaluated in `precision`. The input is first
/// rounded to that precision.
pub fn rotate(
    v: &[f64],
    pos: u64,
    cfg: &RotaryConfig,
    precision: ComputePrecision,
) -> Result<Vec<f64>, RopeError> {
    check_len(cfg, v)?;
    if pos > MAX_POSITION {
        return Err(RopeError::PositionOverflow { pos, shift: 0 });
    }
    Ok(match precision {
        ComputePrecision::F64 => rotate_in::<f64>(v, pos, cfg),
        ComputePrecision::F32 => rotate_in::<f32>(v, pos, cfg)
            .into_iter()
            .map(|x| x as f64)
            .collect(),
    })
}

/// The pre-softmax logit `(R_{i+shift} q)^T (R_{j+shift} k)` with rounding at
/// every stage `policy` names. No `1/sqrt(d)` scaling.
pub fn rope_logit(
    q: &[f64],
    k: &[f64],
    i: u64,
    j: u64,
    shift: PositionShift,
    cfg: &RotaryConfig,
    policy: &PrecisionPolicy,
) -> Result<f64, RopeError> {
    check_len(cfg, q)?;
    check_len(cfg, k)?;
    let qi = shift.apply(i)?;
    let kj = shift.apply(j)?;
    let store = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter().map(|x| policy.qk_storage.round(x)).collect()
    };
    let qr = store(rotate(q, qi, cfg, policy.rotation)?);
    let kr = store(rotate(k, kj, cfg, policy.rotation)?);
    Ok(match policy.accumulation {
        ComputePrecision::F64 => pairwise_dot(&qr, &kr),
        ComputePrecision::F32 => {
            let a: Vec<f32> = qr.iter().map(|&x| x as f32).collect();
            let b: Vec<f32> = kr.iter().map(|&x| x as f32).collect();
            pairwise_dot(&a, &b) as f64
        }
    })
}
