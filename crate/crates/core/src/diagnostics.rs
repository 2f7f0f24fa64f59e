//! Shift-discrepancy metrics for RoPE attention.
//!
//! `D(X, d1, d2)` sums, over layers, heads and key columns `j`, the column
//! total `sum_i |S_ij(d1) - S_ij(d2)|` of absolute score differences weighted
//! by `n_j = 1/(T - j)` (the number of causal entries in column `j`).
//! `D_logit` is the mean absolute pre-softmax difference against the first
//! key only, summed over layers and heads.
//!
//! All metric arithmetic is f64 in a fixed order; parallelism only splits the
//! per-head forward passes, so reports are bit-identical across thread counts.

use std::io::{self, Write};

use serde::Serialize;

use crate::attention::{
    first_column_logits, gaussian_input, logits_from_projections, project, scores_from_logits,
    AttentionError, AttentionStack, HeadGrid, Matrix, Projections, ScoreMatrix,
};
use crate::precision::PrecisionPolicy;
use crate::reduce::pairwise_sum;
use crate::rope::PositionShift;

/// Shift list used for the shift sweep (`delta2` fixed at 16).
pub const DEFAULT_DELTA1_LIST: [u64; 19] = [
    0, 2, 4, 6, 8, 10, 12, 14, 15, 17, 18, 20, 22, 50, 100, 200, 500, 1000, 2000,
];
pub const DEFAULT_DELTA2: u64 = 16;
pub const DEFAULT_LENGTHS: [usize; 8] = [64, 128, 256, 512, 1024, 2048, 4096, 8192];

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_D_MODEL: usize = 256;
pub const DEFAULT_SEQ_LEN: usize = 1024;
pub const DEFAULT_NUM_SEQUENCES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("sequence lengths must be positive and sorted ascending")]
    UnsortedLengths,
    #[error("num_sequences must be at least 1")]
    NoSequences,
    #[error("sequence length must be at least 1")]
    EmptySequence,
}

pub type Result<T, E = DiagnosticsError> = std::result::Result<T, E>;

/// `n_j = 1/(len - j)` for 0-based key column `j`.
pub fn normalization_vector(len: usize) -> Vec<f64> {
    (0..len).map(|j| 1.0 / (len - j) as f64).collect()
}

/// Settings for one comparison between two shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffConfig {
    pub delta_1: PositionShift,
    pub delta_2: PositionShift,
    pub sequence_length: usize,
    pub policy: PrecisionPolicy,
    pub num_sequences: usize,
    pub seed: u64,
    n: Vec<f64>,
}

impl DiffConfig {
    pub fn new(
        delta_1: u64,
        delta_2: u64,
        sequence_length: usize,
        policy: PrecisionPolicy,
        num_sequences: usize,
        seed: u64,
    ) -> Result<Self> {
        if sequence_length == 0 {
            return Err(DiagnosticsError::EmptySequence);
        }
        if num_sequences == 0 {
            return Err(DiagnosticsError::NoSequences);
        }
        Ok(DiffConfig {
            delta_1: PositionShift(delta_1),
            delta_2: PositionShift(delta_2),
            sequence_length,
            policy,
            num_sequences,
            seed,
            n: normalization_vector(sequence_length),
        })
    }

    pub fn normalization(&self) -> &[f64] {
        &self.n
    }

    /// Input for sequence `s`: stream `s + 1` of the configured seed.
    pub fn input(&self, stack: &AttentionStack, s: usize) -> Matrix {
        gaussian_input(self.sequence_length, stack.d_model(), self.seed, s as u64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffMeta {
    pub policy: String,
    pub delta1: u64,
    pub delta2: u64,
    pub seed: Option<u64>,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffReport {
    #[serde(rename = "D")]
    pub d: f64,
    /// `sum_{l,h} n_j sum_i |.|` for each key column `j`.
    pub per_token: Vec<f64>,
    /// `[layer][head]` partial sums.
    pub per_layer_head: Vec<Vec<f64>>,
    pub meta: DiffMeta,
}

fn diff_scores(a: &HeadGrid<ScoreMatrix>, b: &HeadGrid<ScoreMatrix>, meta: DiffMeta) -> DiffReport {
    let t = meta.t;
    let n = normalization_vector(t);
    let weighted: HeadGrid<Vec<f64>> = HeadGrid::from_fn(a.layers(), a.heads(), |l, h| {
        let (sa, sb) = (a.get(l, h), b.get(l, h));
        let mut cols = vec![0.0f64; t];
        for i in 0..t {
            for ((c, &x), &y) in cols.iter_mut().zip(sa.row(i)).zip(sb.row(i)) {
                *c += (x - y).abs();
            }
        }
        cols.iter().zip(&n).map(|(c, w)| c * w).collect()
    });

    let mut per_token = vec![0.0f64; t];
    let mut per_layer_head = vec![vec![0.0; a.heads()]; a.layers()];
    for ((l, h), cols) in weighted.iter() {
        for (p, c) in per_token.iter_mut().zip(cols) {
            *p += c;
        }
        per_layer_head[l][h] = pairwise_sum(cols);
    }
    DiffReport {
        d: pairwise_sum(&per_token),
        per_token,
        per_layer_head,
        meta,
    }
}

fn scores_at(
    stack: &AttentionStack,
    proj: &Projections,
    shift: PositionShift,
    policy: &PrecisionPolicy,
) -> Result<HeadGrid<ScoreMatrix>> {
    let logits = logits_from_projections(stack, proj, shift, policy, None)?;
    Ok(scores_from_logits(&logits, policy, None))
}

fn meta(policy: &PrecisionPolicy, d1: PositionShift, d2: PositionShift, seed: Option<u64>, t: usize) -> DiffMeta {
    DiffMeta { policy: policy.to_string(), delta1: d1.0, delta2: d2.0, seed, t }
}

/// `D(X, delta_1, delta_2)` with its per-token and per-head decompositions.
pub fn score_diff(
    stack: &AttentionStack,
    x: &Matrix,
    delta_1: PositionShift,
    delta_2: PositionShift,
    policy: &PrecisionPolicy,
) -> Result<DiffReport> {
    let proj = project(stack, x, policy.rotation)?;
    let a = scores_at(stack, &proj, delta_1, policy)?;
    let b = scores_at(stack, &proj, delta_2, policy)?;
    Ok(diff_scores(&a, &b, meta(policy, delta_1, delta_2, None, x.rows())))
}

/// Per-key-column decomposition of `D`; sums to `D`.
pub fn per_token_diff(
    stack: &AttentionStack,
    x: &Matrix,
    delta_1: PositionShift,
    delta_2: PositionShift,
    policy: &PrecisionPolicy,
) -> Result<Vec<f64>> {
    Ok(score_diff(stack, x, delta_1, delta_2, policy)?.per_token)
}

fn logit_diff_from(a: &HeadGrid<Vec<f64>>, b: &HeadGrid<Vec<f64>>, t: usize) -> f64 {
    let mut total = 0.0;
    for ((_, ca), (_, cb)) in a.iter().zip(b.iter()) {
        let diffs: Vec<f64> = ca.iter().zip(cb).map(|(x, y)| (x - y).abs()).collect();
        total += pairwise_sum(&diffs);
    }
    total / t as f64
}

/// `D_logit`: `(1/T) sum_{l,h} sum_i |A_{i,0}(delta_1) - A_{i,0}(delta_2)|`.
pub fn logit_diff_first_token(
    stack: &AttentionStack,
    x: &Matrix,
    delta_1: PositionShift,
    delta_2: PositionShift,
    policy: &PrecisionPolicy,
) -> Result<f64> {
    let proj = project(stack, x, policy.rotation)?;
    let a = first_column_logits(stack, &proj, delta_1, policy)?;
    let b = first_column_logits(stack, &proj, delta_2, policy)?;
    Ok(logit_diff_from(&a, &b, x.rows()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x) / xs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftSweepRow {
    pub delta1: u64,
    pub delta2: u64,
    #[serde(rename = "T")]
    pub t: usize,
    pub policy: String,
    pub seed: u64,
    pub mean_d: f64,
    pub per_sequence_d: Vec<f64>,
    /// Per-token vector averaged over sequences.
    pub mean_per_token: Vec<f64>,
}

/// Mean `D(X, delta1, cfg.delta_2)` over `cfg.num_sequences` seeded inputs for
/// each `delta1`. `cfg.delta_1` is ignored.
pub fn shift_sweep(stack: &AttentionStack, cfg: &DiffConfig, delta1s: &[u64]) -> Result<Vec<ShiftSweepRow>> {
    let t = cfg.sequence_length;
    let mut per_seq: Vec<Vec<DiffReport>> = vec![Vec::with_capacity(cfg.num_sequences); delta1s.len()];
    for s in 0..cfg.num_sequences {
        let x = cfg.input(stack, s);
        let proj = project(stack, &x, cfg.policy.rotation)?;
        let reference = scores_at(stack, &proj, cfg.delta_2, &cfg.policy)?;
        for (k, &d1) in delta1s.iter().enumerate() {
            let d1 = PositionShift(d1);
            let m = meta(&cfg.policy, d1, cfg.delta_2, Some(cfg.seed), t);
            let report = if d1 == cfg.delta_2 {
                diff_scores(&reference, &reference, m)
            } else {
                diff_scores(&scores_at(stack, &proj, d1, &cfg.policy)?, &reference, m)
            };
            per_seq[k].push(report);
        }
    }
    Ok(delta1s
        .iter()
        .zip(per_seq)
        .map(|(&d1, reports)| {
            let ds: Vec<f64> = reports.iter().map(|r| r.d).collect();
            let mut acc = vec![0.0f64; t];
            for r in &reports {
                for (a, p) in acc.iter_mut().zip(&r.per_token) {
                    *a += p;
                }
            }
            let n = reports.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            ShiftSweepRow {
                delta1: d1,
                delta2: cfg.delta_2.0,
                t,
                policy: cfg.policy.to_string(),
                seed: cfg.seed,
                mean_d: mean(&ds),
                per_sequence_d: ds,
                mean_per_token: acc,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthSweepRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub delta1: u64,
    pub delta2: u64,
    pub policy: String,
    pub seed: u64,
    pub mean_d_logit: f64,
    pub per_sequence: Vec<f64>,
}

/// Mean `D_logit` per sequence length. Sequence `s` at length `T` is the
/// first `T` tokens of the same seeded stream, so lengths share prefixes.
pub fn length_sweep(
    stack: &AttentionStack,
    lengths: &[usize],
    delta_1: PositionShift,
    delta_2: PositionShift,
    policy: &PrecisionPolicy,
    num_sequences: usize,
    seed: u64,
) -> Result<Vec<LengthSweepRow>> {
    if lengths.first() == Some(&0) || lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(DiagnosticsError::UnsortedLengths);
    }
    if num_sequences == 0 {
        return Err(DiagnosticsError::NoSequences);
    }
    let Some(&max_t) = lengths.last() else {
        return Ok(Vec::new());
    };
    let mut per_len = vec![Vec::with_capacity(num_sequences); lengths.len()];
    for s in 0..num_sequences {
        let full = gaussian_input(max_t, stack.d_model(), seed, s as u64 + 1);
        for (k, &t) in lengths.iter().enumerate() {
            let x = full.truncated(t);
            per_len[k].push(logit_diff_first_token(stack, &x, delta_1, delta_2, policy)?);
        }
    }
    Ok(lengths
        .iter()
        .zip(per_len)
        .map(|(&t, vals)| LengthSweepRow {
            t,
            delta1: delta_1.0,
            delta2: delta_2.0,
            policy: policy.to_string(),
            seed,
            mean_d_logit: mean(&vals),
            per_sequence: vals,
        })
        .collect())
}

/// Whether the mean `D_logit` never decreases with length.
pub fn is_nondecreasing(rows: &[LengthSweepRow]) -> bool {
    rows.windows(2).all(|w| w[0].mean_d_logit <= w[1].mean_d_logit)
}

pub const CSV_HEADER: &str = "delta1,delta2,T,policy,seed,metric,value";

/// One CSV record.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRecord {
    pub delta1: u64,
    pub delta2: u64,
    pub t: usize,
    pub policy: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_csv<W: Write>(mut w: W, records: &[CsvRecord]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        // `{:?}` on f64 prints the shortest round-trip form.
        writeln!(
            w,
            "{},{},{},{},{},{},{:?}",
            r.delta1, r.delta2, r.t, r.policy, r.seed, r.metric, r.value
        )?;
    }
    Ok(())
}

impl ShiftSweepRow {
    pub fn csv_record(&self) -> CsvRecord {
        CsvRecord {
            delta1: self.delta1,
            delta2: self.delta2,
            t: self.t,
            policy: self.policy.clone(),
            seed: self.seed,
            metric: "D".into(),
            value: self.mean_d,
        }
    }

    /// One record per key column, metric `per_token[j]`.
    pub fn per_token_records(&self) -> Vec<CsvRecord> {
        self.mean_per_token
            .iter()
            .enumerate()
            .map(|(j, &v)| CsvRecord {
                metric: format!("per_token[{j}]"),
                value: v,
                ..self.csv_record()
            })
            .collect()
    }
}

impl LengthSweepRow {
    pub fn csv_record(&self) -> CsvRecord {
        CsvRecord {
            delta1: self.delta1,
            delta2: self.delta2,
            t: self.t,
            policy: self.policy.clone(),
            seed: self.seed,
            metric: "D_logit".into(),
            value: self.mean_d_logit,
        }
    }
}
