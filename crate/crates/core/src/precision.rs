//! Software BFloat16 and the precision policies that place rounding along the
//! q/k → rotate → dot → softmax pipeline.
//!
//! `Bf16` is a plain 16-bit pattern: 1 sign bit, 8 exponent bits, 7 mantissa
//! bits. Encoding from `f32` is round-to-nearest, ties-to-even. Subnormals are
//! kept (no flush-to-zero), so every finite pattern survives a decode/encode
//! round trip.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A bfloat16 value stored as its raw bit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const NEG_ZERO: Bf16 = Bf16(0x8000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    pub const NAN: Bf16 = Bf16(0x7FC0);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round an `f32` to the nearest bfloat16, ties to even.
    #[inline]
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            // Keep the sign, force a quiet NaN so the payload cannot round to infinity.
            return Bf16(((bits >> 16) as u16 & 0x8000) | 0x7FC0);
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16((rounded >> 16) as u16)
    }

    /// Exact widening: the pattern becomes the top half of an `f32`.
    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & 0x7FFF > 0x7F80
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & 0x7F80 != 0x7F80
    }
}

impl From<Bf16> for f32 {
    fn from(w: Bf16) -> f32 {
        w.to_f32()
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

#[inline]
pub fn encode_bf16(x: f32) -> Bf16 {
    Bf16::from_f32(x)
}

#[inline]
pub fn decode_bf16(w: Bf16) -> f32 {
    w.to_f32()
}

/// Arithmetic precision of a compute stage (rotation, accumulation, softmax).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputePrecision {
    F64,
    F32,
}

impl ComputePrecision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            ComputePrecision::F64 => x,
            ComputePrecision::F32 => x as f32 as f64,
        }
    }
}

/// Storage format applied to a stage's output values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    F64,
    F32,
    Bf16,
}

impl StorageFormat {
    /// Round `x` into this format. Bf16 goes through binary32 first, the way a
    /// real pipeline casts an f32 activation to bf16.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            StorageFormat::F64 => x,
            StorageFormat::F32 => x as f32 as f64,
            StorageFormat::Bf16 => Bf16::from_f32(x as f32).to_f32() as f64,
        }
    }
}

/// Pipeline stage at which a policy may round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// q/k projection and RoPE rotation (outside the attention kernel).
    Rotation,
    /// Rotated q/k handed to the attention kernel.
    QkStorage,
    /// Inner-product accumulation.
    Accumulation,
    /// Softmax evaluation.
    Softmax,
    /// Attention probabilities after softmax.
    Scores,
}

/// Where rounding happens along the attention pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub rotation: ComputePrecision,
    pub qk_storage: StorageFormat,
    pub accumulation: ComputePrecision,
    pub softmax: ComputePrecision,
    /// Optional re-rounding of probabilities. All presets leave this at `F64`,
    /// i.e. scores stay in softmax precision.
    pub score_storage: StorageFormat,
}

impl PrecisionPolicy {
    pub const EXACT: PrecisionPolicy = PrecisionPolicy {
        rotation: ComputePrecision::F64,
        qk_storage: StorageFormat::F64,
        accumulation: ComputePrecision::F64,
        softmax: ComputePrecision::F64,
        score_storage: StorageFormat::F64,
    };

    pub const F32: PrecisionPolicy = PrecisionPolicy {
        rotation: ComputePrecision::F32,
        qk_storage: StorageFormat::F32,
        accumulation: ComputePrecision::F32,
        softmax: ComputePrecision::F32,
        score_storage: StorageFormat::F64,
    };

    /// Rotation in f32 outside the kernel, q/k cast to bf16 for the kernel,
    /// products and sums in f32.
    pub const FA2_BF16: PrecisionPolicy = PrecisionPolicy {
        rotation: ComputePrecision::F32,
        qk_storage: StorageFormat::Bf16,
        accumulation: ComputePrecision::F32,
        softmax: ComputePrecision::F32,
        score_storage: StorageFormat::F64,
    };

    pub const PRESETS: [(&'static str, PrecisionPolicy); 3] = [
        ("exact", PrecisionPolicy::EXACT),
        ("f32", PrecisionPolicy::F32),
        ("fa2-bf16", PrecisionPolicy::FA2_BF16),
    ];

    pub fn with_score_storage(mut self, format: StorageFormat) -> Self {
        self.score_storage = format;
        self
    }

    /// Preset name, if this policy is one of the presets.
    pub fn name(&self) -> Option<&'static str> {
        Self::PRESETS
            .iter()
            .find(|(_, p)| p == self)
            .map(|(name, _)| *name)
    }

    pub fn round(&self, x: f64, stage: Stage) -> f64 {
        match stage {
            Stage::Rotation => self.rotation.round(x),
            Stage::QkStorage => self.qk_storage.round(x),
            Stage::Accumulation => self.accumulation.round(x),
            Stage::Softmax => self.softmax.round(x),
            Stage::Scores => self.score_storage.round(x),
        }
    }
}

/// Round `x` to the precision `policy` assigns to `stage`.
pub fn round_along_policy(x: f64, stage: Stage, policy: &PrecisionPolicy) -> f64 {
    policy.round(x, stage)
}

impl fmt::Display for PrecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(
                f,
                "custom({:?},{:?},{:?},{:?},{:?})",
                self.rotation, self.qk_storage, self.accumulation, self.softmax, self.score_storage
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown precision policy `{0}` (expected exact, f32 or fa2-bf16)")]
pub struct UnknownPolicy(pub String);

impl FromStr for PrecisionPolicy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "exact" | "f64" => Ok(PrecisionPolicy::EXACT),
            "f32" => Ok(PrecisionPolicy::F32),
            "fa2-bf16" | "bf16" => Ok(PrecisionPolicy::FA2_BF16),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}
