//! Attention-plan compiler for packed long-context windows.
//!
//! A [`BatchLayout`] describes what sits at every position of a training
//! window (a shared anchor, domain tags, document tokens). [`compile`] turns a
//! layout plus a [`MaskScheme`] into an [`AttentionPlan`]: per-row sorted
//! column intervals, position ids, loss mask and the attended-pair count.
//!
//! Visibility rules, always restricted to `j <= i`:
//!
//! | scheme | key `j` visible from query `i` when |
//! |---|---|
//! | `full_causal` | always |
//! | `intra_doc`, `intra_doc_reset`, `interleaved_intra` | same document |
//! | `anchor`, `anchor_tag`, `interleaved_anchor` | same document, or `j` is the anchor |
//!
//! A tag token belongs to its document. An anchor outside an anchor scheme
//! only sees itself. Position ids run `0..T` except under `intra_doc_reset`,
//! where they restart at 0 for every document.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("layout has no tokens")]
    EmptyLayout,
    #[error("layout has more than one anchor token")]
    MultipleAnchors,
    #[error("anchor token at index {0}, it must be at index 0")]
    AnchorNotFirst(usize),
    #[error("document {doc}: within-document index must start at 0 (token {at})")]
    DocIndexNotZeroBased { doc: u32, at: usize },
    #[error("document {doc}: within-document index not strictly increasing at token {at}")]
    DocIndexNotIncreasing { doc: u32, at: usize },
    #[error("document {doc}: chunk id decreases at token {at}")]
    ChunkOrder { doc: u32, at: usize },
    #[error("tag at token {0} does not immediately precede the first token of its document")]
    MisplacedTag(usize),
    #[error("scheme `{0}` requires an anchor token at index 0")]
    MissingAnchor(MaskScheme),
    #[error("unknown mask scheme `{0}`")]
    UnknownScheme(String),
    #[error("max_chunks must be at least 1")]
    InvalidMaxChunks,
    #[error("document {0} has zero length")]
    EmptyDocument(u32),
    #[error("window of {window} tokens cannot hold a document token after {overhead} prefix tokens")]
    WindowTooSmall { window: usize, overhead: usize },
    #[error("layout needs {needed} tokens but the window holds {window}")]
    ExceedsWindow { needed: usize, window: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Anchor,
    Tag,
    Doc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutToken {
    pub role: TokenRole,
    /// Ignored for the anchor.
    pub doc_id: u32,
    pub chunk_id: u32,
    /// Order of this token within its document. Only meaningful for `Doc`.
    pub within_doc_index: u32,
}

impl LayoutToken {
    pub fn anchor() -> Self {
        LayoutToken {
            role: TokenRole::Anchor,
            doc_id: 0,
            chunk_id: 0,
            within_doc_index: 0,
        }
    }

    pub fn tag(doc_id: u32) -> Self {
        LayoutToken {
            role: TokenRole::Tag,
            doc_id,
            chunk_id: 0,
            within_doc_index: 0,
        }
    }

    pub fn doc(doc_id: u32, chunk_id: u32, within_doc_index: u32) -> Self {
        LayoutToken {
            role: TokenRole::Doc,
            doc_id,
            chunk_id,
            within_doc_index,
        }
    }

    /// Document this token belongs to; `None` for the anchor.
    pub fn document(&self) -> Option<u32> {
        match self.role {
            TokenRole::Anchor => None,
            TokenRole::Tag | TokenRole::Doc => Some(self.doc_id),
        }
    }
}

/// Ordered token roles of one training window. Always validated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BatchLayout {
    window: usize,
    tokens: Vec<LayoutToken>,
}

#[derive(Deserialize)]
struct RawLayout {
    tokens: Vec<LayoutToken>,
}

impl<'de> Deserialize<'de> for BatchLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawLayout::deserialize(d)?;
        BatchLayout::new(raw.tokens).map_err(serde::de::Error::custom)
    }
}

/// Which structural tokens a layout builder inserts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayoutOptions {
    pub anchor: bool,
    pub tags: bool,
}

impl LayoutOptions {
    pub fn for_scheme(scheme: MaskScheme) -> Self {
        LayoutOptions {
            anchor: scheme.needs_anchor(),
            tags: scheme.uses_tags(),
        }
    }
}

impl BatchLayout {
    pub fn new(tokens: Vec<LayoutToken>) -> Result<Self, MaskError> {
        validate_tokens(&tokens)?;
        Ok(BatchLayout {
            window: tokens.len(),
            tokens,
        })
    }

    /// Documents laid out back to back, ids `0..lengths.len()`.
    pub fn from_doc_lengths(lengths: &[usize], opts: LayoutOptions) -> Result<Self, MaskError> {
        let mut tokens = Vec::with_capacity(lengths.iter().sum::<usize>() + lengths.len() + 1);
        if opts.anchor {
            tokens.push(LayoutToken::anchor());
        }
        for (d, &len) in lengths.iter().enumerate() {
            let id = d as u32;
            if len == 0 {
                return Err(MaskError::EmptyDocument(id));
            }
            if opts.tags {
                tokens.push(LayoutToken::tag(id));
            }
            tokens.extend((0..len as u32).map(|k| LayoutToken::doc(id, 0, k)));
        }
        BatchLayout::new(tokens)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[LayoutToken] {
        &self.tokens
    }

    pub fn has_anchor(&self) -> bool {
        self.tokens.first().is_some_and(|t| t.role == TokenRole::Anchor)
    }

    /// Number of distinct documents.
    pub fn num_documents(&self) -> usize {
        let mut ids: Vec<u32> = self.tokens.iter().filter_map(|t| t.document()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Token count per document (tags included), keyed by doc id.
    pub fn document_lengths(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for d in self.tokens.iter().filter_map(|t| t.document()) {
            *out.entry(d).or_insert(0) += 1;
        }
        out
    }
}

fn validate_tokens(tokens: &[LayoutToken]) -> Result<(), MaskError> {
    let mut seen_anchor = false;
    // doc id -> (last within-doc index, last chunk id)
    let mut docs: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
    for (at, t) in tokens.iter().enumerate() {
        match t.role {
            TokenRole::Anchor => {
                if seen_anchor {
                    return Err(MaskError::MultipleAnchors);
                }
                if at != 0 {
                    return Err(MaskError::AnchorNotFirst(at));
                }
                seen_anchor = true;
            }
            TokenRole::Tag => {
                let ok = !docs.contains_key(&t.doc_id)
                    && tokens.get(at + 1).is_some_and(|n| {
                        n.role == TokenRole::Doc && n.doc_id == t.doc_id && n.within_doc_index == 0
                    });
                if !ok {
                    return Err(MaskError::MisplacedTag(at));
                }
            }
            TokenRole::Doc => match docs.get_mut(&t.doc_id) {
                None => {
                    if t.within_doc_index != 0 {
                        return Err(MaskError::DocIndexNotZeroBased { doc: t.doc_id, at });
                    }
                    docs.insert(t.doc_id, (0, t.chunk_id));
                }
                Some((last, chunk)) => {
                    if t.within_doc_index <= *last {
                        return Err(MaskError::DocIndexNotIncreasing { doc: t.doc_id, at });
                    }
                    if t.chunk_id < *chunk {
                        return Err(MaskError::ChunkOrder { doc: t.doc_id, at });
                    }
                    *last = t.within_doc_index;
                    *chunk = t.chunk_id;
                }
            },
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskScheme {
    FullCausal,
    IntraDoc,
    IntraDocReset,
    Anchor,
    AnchorTag,
    InterleavedIntra,
    InterleavedAnchor,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 7] = [
        MaskScheme::FullCausal,
        MaskScheme::IntraDoc,
        MaskScheme::IntraDocReset,
        MaskScheme::Anchor,
        MaskScheme::AnchorTag,
        MaskScheme::InterleavedIntra,
        MaskScheme::InterleavedAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskScheme::FullCausal => "full_causal",
            MaskScheme::IntraDoc => "intra_doc",
            MaskScheme::IntraDocReset => "intra_doc_reset",
            MaskScheme::Anchor => "anchor",
            MaskScheme::AnchorTag => "anchor_tag",
            MaskScheme::InterleavedIntra => "interleaved_intra",
            MaskScheme::InterleavedAnchor => "interleaved_anchor",
        }
    }

    pub fn needs_anchor(self) -> bool {
        matches!(
            self,
            MaskScheme::Anchor | MaskScheme::AnchorTag | MaskScheme::InterleavedAnchor
        )
    }

    pub fn uses_tags(self) -> bool {
        self == MaskScheme::AnchorTag
    }

    pub fn is_interleaved(self) -> bool {
        matches!(self, MaskScheme::InterleavedIntra | MaskScheme::InterleavedAnchor)
    }

    pub fn resets_positions(self) -> bool {
        self == MaskScheme::IntraDocReset
    }

    fn masks_documents(self) -> bool {
        self != MaskScheme::FullCausal
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskScheme {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        MaskScheme::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| MaskError::UnknownScheme(s.to_string()))
    }
}

impl Serialize for MaskScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MaskScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive column interval `[lo, hi]`.
pub type ColumnInterval = (usize, usize);

/// A compiled mask: block-sparse visibility, position ids, loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPlan {
    scheme: MaskScheme,
    rows: Vec<Vec<ColumnInterval>>,
    position_ids: Vec<u64>,
    loss_mask: Vec<bool>,
    pair_count: u64,
}

impl AttentionPlan {
    /// Plain causal plan over `t` tokens with positions `0..t`.
    pub fn causal(t: usize) -> Self {
        AttentionPlan {
            scheme: MaskScheme::FullCausal,
            rows: (0..t).map(|i| vec![(0, i)]).collect(),
            position_ids: (0..t as u64).collect(),
            loss_mask: vec![true; t],
            pair_count: (t as u64) * (t as u64 + 1) / 2,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn row(&self, i: usize) -> &[ColumnInterval] {
        &self.rows[i]
    }

    pub fn position_ids(&self) -> &[u64] {
        &self.position_ids
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn pair_count(&self) -> u64 {
        self.pair_count
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        let row = &self.rows[i];
        let k = row.partition_point(|&(lo, _)| lo <= j);
        k > 0 && row[k - 1].1 >= j
    }

    /// Every allowed `(i, j)` in row-major order.
    pub fn enumerate_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.pair_count as usize);
        for (i, row) in self.rows.iter().enumerate() {
            for &(lo, hi) in row {
                out.extend((lo..=hi).map(|j| (i, j)));
            }
        }
        out
    }

    /// One line per row, `#` allowed and `.` masked.
    pub fn render_ascii(&self) -> String {
        let t = self.len();
        let mut s = String::with_capacity(t * (t + 1));
        for row in &self.rows {
            let mut line = vec![b'.'; t];
            for &(lo, hi) in row {
                line[lo..=hi].fill(b'#');
            }
            s.push_str(std::str::from_utf8(&line).expect("ascii"));
            s.push('\n');
        }
        s
    }

    pub fn to_export(&self) -> PlanExport {
        PlanExport {
            t: self.len(),
            scheme: self.scheme.name().to_string(),
            position_ids: self.position_ids.clone(),
            loss_mask: self.loss_mask.clone(),
            rows: self
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| RowExport {
                    i,
                    intervals: r.iter().map(|&(lo, hi)| [lo, hi]).collect(),
                })
                .collect(),
            pair_count: self.pair_count,
        }
    }

    /// Rebuild a plan from its export form, checking every structural invariant.
    pub fn from_export(e: &PlanExport) -> Result<Self, MaskError> {
        let bad = |m: String| Err(MaskError::InvalidPlan(m));
        let scheme: MaskScheme = e.scheme.parse()?;
        if e.position_ids.len() != e.t || e.loss_mask.len() != e.t || e.rows.len() != e.t {
            return bad("vector lengths do not match T".into());
        }
        let mut rows = Vec::with_capacity(e.t);
        let mut count = 0u64;
        for (i, r) in e.rows.iter().enumerate() {
            if r.i != i {
                return bad(format!("row {i} labelled {}", r.i));
            }
            let mut prev_hi: Option<usize> = None;
            for &[lo, hi] in &r.intervals {
                if lo > hi || hi > i || prev_hi.is_some_and(|p| lo <= p) {
                    return bad(format!("row {i}: interval [{lo}, {hi}] out of order or non-causal"));
                }
                prev_hi = Some(hi);
                count += (hi - lo + 1) as u64;
            }
            rows.push(r.intervals.iter().map(|&[lo, hi]| (lo, hi)).collect());
        }
        if count != e.pair_count {
            return bad(format!("pair_count {} but intervals cover {count}", e.pair_count));
        }
        Ok(AttentionPlan {
            scheme,
            rows,
            position_ids: e.position_ids.clone(),
            loss_mask: e.loss_mask.clone(),
            pair_count: count,
        })
    }
}

/// JSON form of a plan consumed by external training pipelines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanExport {
    #[serde(rename = "T")]
    pub t: usize,
    pub scheme: String,
    pub position_ids: Vec<u64>,
    pub loss_mask: Vec<bool>,
    pub rows: Vec<RowExport>,
    pub pair_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowExport {
    pub i: usize,
    pub intervals: Vec<[usize; 2]>,
}

/// Maximal runs `[start, end]` of consecutive positions belonging to each document.
fn document_runs(layout: &BatchLayout) -> BTreeMap<u32, Vec<ColumnInterval>> {
    let mut runs: BTreeMap<u32, Vec<ColumnInterval>> = BTreeMap::new();
    for (p, t) in layout.tokens.iter().enumerate() {
        if let Some(d) = t.document() {
            let list = runs.entry(d).or_default();
            match list.last_mut() {
                Some(last) if last.1 + 1 == p => last.1 = p,
                _ => list.push((p, p)),
            }
        }
    }
    runs
}

/// Compile `layout` under `scheme`.
pub fn compile(layout: &BatchLayout, scheme: MaskScheme) -> Result<AttentionPlan, MaskError> {
    let t = layout.len();
    if t == 0 {
        return Err(MaskError::EmptyLayout);
    }
    let anchored = layout.has_anchor();
    if scheme.needs_anchor() && !anchored {
        return Err(MaskError::MissingAnchor(scheme));
    }

    let runs = document_runs(layout);
    let mut rows = Vec::with_capacity(t);
    for (i, tok) in layout.tokens.iter().enumerate() {
        if !scheme.masks_documents() {
            rows.push(vec![(0, i)]);
            continue;
        }
        let Some(doc) = tok.document() else {
            // The anchor (always index 0) sees only itself.
            rows.push(vec![(i, i)]);
            continue;
        };
        let mut row: Vec<ColumnInterval> = Vec::new();
        if scheme.needs_anchor() {
            row.push((0, 0));
        }
        for &(lo, hi) in runs[&doc].iter().take_while(|r| r.0 <= i) {
            let hi = hi.min(i);
            match row.last_mut() {
                Some(last) if last.1 + 1 == lo => last.1 = hi,
                _ => row.push((lo, hi)),
            }
        }
        rows.push(row);
    }

    let position_ids = if scheme.resets_positions() {
        let mut next: BTreeMap<Option<u32>, u64> = BTreeMap::new();
        layout
            .tokens
            .iter()
            .map(|tok| {
                let c = next.entry(tok.document()).or_insert(0);
                let p = *c;
                *c += 1;
                p
            })
            .collect()
    } else {
        (0..t as u64).collect()
    };

    let loss_mask = layout
        .tokens
        .iter()
        .map(|tok| tok.role == TokenRole::Doc)
        .collect();

    let pair_count = rows
        .iter()
        .flatten()
        .map(|&(lo, hi)| (hi - lo + 1) as u64)
        .sum();

    Ok(AttentionPlan {
        scheme,
        rows,
        position_ids,
        loss_mask,
        pair_count,
    })
}

/// Expand a plan into its sorted `(i, j)` pairs.
pub fn enumerate_pairs(plan: &AttentionPlan) -> Vec<(usize, usize)> {
    plan.enumerate_pairs()
}

/// Number of pairs a full causal mask over `t` tokens attends.
pub fn full_causal_pairs(t: usize) -> u64 {
    (t as u64) * (t as u64 + 1) / 2
}

/// Attended pairs under `scheme` relative to full causal attention on the same window.
pub fn pair_cost_ratio(layout: &BatchLayout, scheme: MaskScheme) -> Result<f64, MaskError> {
    let plan = compile(layout, scheme)?;
    Ok(plan.pair_count() as f64 / full_causal_pairs(layout.len()) as f64)
}

/// A source document: an id, a token count and an optional domain label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocSpec {
    pub id: u32,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl DocSpec {
    pub fn new(id: u32, len: usize) -> Self {
        DocSpec { id, len, domain: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkPolicy {
    pub max_chunks: usize,
    pub layout: LayoutOptions,
}

/// Split each document at random internal points into `1..=max_chunks`
/// chunks and merge the chunk streams in a uniformly random interleaving.
/// Per-document chunk order is preserved.
pub fn interleave_chunks(
    docs: &[DocSpec],
    policy: ChunkPolicy,
    seed: u64,
) -> Result<BatchLayout, MaskError> {
    if policy.max_chunks < 1 {
        return Err(MaskError::InvalidMaxChunks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per document: chunk boundaries as (start, end) in within-doc indices.
    let mut chunks: Vec<Vec<(usize, usize)>> = Vec::with_capacity(docs.len());
    for doc in docs {
        if doc.len == 0 {
            return Err(MaskError::EmptyDocument(doc.id));
        }
        let k = rng.random_range(1..=policy.max_chunks.min(doc.len));
        let mut cuts: Vec<usize> = sample(&mut rng, doc.len - 1, k - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        let mut bounds = Vec::with_capacity(k);
        let mut start = 0;
        for c in cuts.into_iter().chain(std::iter::once(doc.len)) {
            bounds.push((start, c));
            start = c;
        }
        chunks.push(bounds);
    }

    let mut tokens = Vec::with_capacity(docs.iter().map(|d| d.len + 1).sum::<usize>() + 1);
    if policy.layout.anchor {
        tokens.push(LayoutToken::anchor());
    }
    let mut next = vec![0usize; docs.len()];
    let mut remaining: usize = chunks.iter().map(Vec::len).sum();
    while remaining > 0 {
        // Drawing a stream with probability proportional to its leftover chunk
        // count makes every interleaving equally likely.
        let mut r = rng.random_range(0..remaining);
        let d = (0..docs.len())
            .find(|&d| {
                let left = chunks[d].len() - next[d];
                if r < left {
                    true
                } else {
                    r -= left;
                    false
                }
            })
            .expect("remaining > 0");
        let c = next[d];
        let (lo, hi) = chunks[d][c];
        let id = docs[d].id;
        if c == 0 && policy.layout.tags {
            tokens.push(LayoutToken::tag(id));
        }
        tokens.extend((lo..hi).map(|k| LayoutToken::doc(id, c as u32, k as u32)));
        next[d] += 1;
        remaining -= 1;
    }
    BatchLayout::new(tokens)
}

/// Fill windows of `window` tokens with documents in input order. A document
/// that does not fit is cut at the window boundary and continues in the next
/// window. Document ids are input indices; chunk ids count the pieces.
pub fn pack_documents(
    doc_lengths: &[usize],
    window: usize,
    opts: LayoutOptions,
) -> Result<Vec<BatchLayout>, MaskError> {
    let prefix = opts.anchor as usize;
    let per_doc = opts.tags as usize;
    if window < 2 || window < prefix + per_doc + 1 {
        return Err(MaskError::WindowTooSmall {
            window,
            overhead: prefix + per_doc,
        });
    }
    let fresh = || {
        let mut v = Vec::with_capacity(window);
        if opts.anchor {
            v.push(LayoutToken::anchor());
        }
        v
    };

    let mut out = Vec::new();
    let mut current = fresh();
    for (d, &len) in doc_lengths.iter().enumerate() {
        let id = d as u32;
        if len == 0 {
            return Err(MaskError::EmptyDocument(id));
        }
        let mut done = 0usize;
        let mut piece = 0u32;
        while done < len {
            let space = window - current.len();
            if space < per_doc + 1 {
                out.push(BatchLayout::new(std::mem::replace(&mut current, fresh()))?);
                continue;
            }
            let take = (len - done).min(space - per_doc);
            if opts.tags {
                current.push(LayoutToken {
                    chunk_id: piece,
                    ..LayoutToken::tag(id)
                });
            }
            current.extend((0..take as u32).map(|k| LayoutToken::doc(id, piece, k)));
            done += take;
            piece += 1;
        }
    }
    if current.len() > prefix {
        out.push(BatchLayout::new(current)?);
    }
    Ok(out)
}

/// Layout request as read from JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub window: usize,
    pub docs: Vec<DocSpec>,
    pub scheme: MaskScheme,
    #[serde(default)]
    pub seed: u64,
    /// Chunk cap for interleaved schemes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chunks: Option<usize>,
}

pub const DEFAULT_MAX_CHUNKS: usize = 4;

impl LayoutSpec {
    /// Build the single window this request describes: interleaved for the
    /// interleaved schemes, documents in order otherwise.
    pub fn build(&self) -> Result<BatchLayout, MaskError> {
        let opts = LayoutOptions::for_scheme(self.scheme);
        let layout = if self.scheme.is_interleaved() {
            interleave_chunks(
                &self.docs,
                ChunkPolicy {
                    max_chunks: self.max_chunks.unwrap_or(DEFAULT_MAX_CHUNKS),
                    layout: opts,
                },
                self.seed,
            )?
        } else {
            let mut tokens = Vec::new();
            if opts.anchor {
                tokens.push(LayoutToken::anchor());
            }
            for doc in &self.docs {
                if doc.len == 0 {
                    return Err(MaskError::EmptyDocument(doc.id));
                }
                if opts.tags {
                    tokens.push(LayoutToken::tag(doc.id));
                }
                tokens.extend((0..doc.len as u32).map(|k| LayoutToken::doc(doc.id, 0, k)));
            }
            BatchLayout::new(tokens)?
        };
        if layout.len() > self.window {
            return Err(MaskError::ExceedsWindow {
                needed: layout.len(),
                window: self.window,
            });
        }
        Ok(layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchored(lengths: &[usize]) -> BatchLayout {
        BatchLayout::from_doc_lengths(lengths, LayoutOptions { anchor: true, tags: false }).unwrap()
    }

    fn plain(lengths: &[usize]) -> BatchLayout {
        BatchLayout::from_doc_lengths(lengths, LayoutOptions::default()).unwrap()
    }

    #[test]
    fn anchor_three_three() {
        let plan = compile(&anchored(&[3, 3]), MaskScheme::Anchor).unwrap();
        assert_eq!(plan.pair_count(), 19);
        assert_eq!(plan.position_ids(), &[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(plan.row(4), &[(0, 0), (4, 4)]);
        assert_eq!(plan.row(2), &[(0, 2)]);
    }

    #[test]
    fn full_causal_counts() {
        let plan = compile(&plain(&[4]), MaskScheme::FullCausal).unwrap();
        assert_eq!(plan.pair_count(), 10);
        let plan = compile(&plain(&[2]), MaskScheme::FullCausal).unwrap();
        assert_eq!(plan.enumerate_pairs(), vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn reset_positions() {
        let plan = compile(&plain(&[3, 3]), MaskScheme::IntraDocReset).unwrap();
        assert_eq!(plan.position_ids(), &[0, 1, 2, 0, 1, 2]);
        let plan = compile(&plain(&[3, 3]), MaskScheme::IntraDoc).unwrap();
        assert_eq!(plan.position_ids(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn small_enumerations() {
        let plan = compile(&plain(&[1, 1]), MaskScheme::IntraDoc).unwrap();
        assert_eq!(enumerate_pairs(&plan), vec![(0, 0), (1, 1)]);
        let plan = compile(&anchored(&[1, 1]), MaskScheme::Anchor).unwrap();
        assert_eq!(
            enumerate_pairs(&plan),
            vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 2)]
        );
    }

    #[test]
    fn cost_ratios() {
        assert_eq!(pair_cost_ratio(&anchored(&[9]), MaskScheme::Anchor).unwrap(), 1.0);
        let r = pair_cost_ratio(&anchored(&[4, 4, 4, 4]), MaskScheme::Anchor).unwrap();
        assert_eq!(r, 57.0 / 153.0);
        let r = pair_cost_ratio(&plain(&[4, 4, 4, 4]), MaskScheme::IntraDoc).unwrap();
        assert_eq!(r, 40.0 / 136.0);
    }

    #[test]
    fn anchor_schemes_need_an_anchor() {
        for s in MaskScheme::ALL.into_iter().filter(|s| s.needs_anchor()) {
            assert_eq!(compile(&plain(&[2]), s), Err(MaskError::MissingAnchor(s)));
        }
    }

    #[test]
    fn layout_validation() {
        let a = LayoutToken::anchor();
        let d = LayoutToken::doc;
        assert_eq!(
            BatchLayout::new(vec![d(0, 0, 0), a]),
            Err(MaskError::AnchorNotFirst(1))
        );
        assert_eq!(
            BatchLayout::new(vec![a, a]),
            Err(MaskError::MultipleAnchors)
        );
        assert_eq!(
            BatchLayout::new(vec![d(0, 0, 1)]),
            Err(MaskError::DocIndexNotZeroBased { doc: 0, at: 0 })
        );
        assert_eq!(
            BatchLayout::new(vec![d(0, 0, 0), d(0, 0, 0)]),
            Err(MaskError::DocIndexNotIncreasing { doc: 0, at: 1 })
        );
        assert_eq!(
            BatchLayout::new(vec![d(0, 1, 0), d(0, 0, 1)]),
            Err(MaskError::ChunkOrder { doc: 0, at: 1 })
        );
        assert_eq!(
            BatchLayout::new(vec![LayoutToken::tag(1), d(0, 0, 0)]),
            Err(MaskError::MisplacedTag(0))
        );
        assert_eq!(
            BatchLayout::new(vec![d(0, 0, 0), LayoutToken::tag(0)]),
            Err(MaskError::MisplacedTag(1))
        );
        // Gaps in within-doc indices are allowed as long as they increase.
        assert!(BatchLayout::new(vec![d(0, 0, 0), d(1, 0, 0), d(0, 0, 5)]).is_ok());
        assert_eq!(compile(&BatchLayout::new(vec![]).unwrap(), MaskScheme::FullCausal), Err(MaskError::EmptyLayout));
    }

    #[test]
    fn tags_are_document_local_and_unlossed() {
        let layout =
            BatchLayout::from_doc_lengths(&[2, 2], LayoutOptions { anchor: true, tags: true }).unwrap();
        let plan = compile(&layout, MaskScheme::AnchorTag).unwrap();
        // anchor, tag0, d0, d0, tag1, d1, d1
        assert_eq!(plan.loss_mask(), &[false, false, true, true, false, true, true]);
        assert!(plan.allows(4, 0));
        assert!(!plan.allows(4, 3));
        assert!(plan.allows(6, 4));
    }

    #[test]
    fn anchor_under_intra_doc_sees_only_itself() {
        let plan = compile(&anchored(&[2]), MaskScheme::IntraDoc).unwrap();
        assert_eq!(plan.row(0), &[(0, 0)]);
        assert_eq!(plan.row(2), &[(1, 2)]);
        let plan = compile(&anchored(&[2, 2]), MaskScheme::IntraDocReset).unwrap();
        assert_eq!(plan.position_ids(), &[0, 0, 1, 0, 1]);
    }

    #[test]
    fn interleaved_rows_have_one_interval_per_chunk() {
        let d = LayoutToken::doc;
        let layout = BatchLayout::new(vec![
            LayoutToken::anchor(),
            d(0, 0, 0),
            d(1, 0, 0),
            d(0, 1, 1),
            d(1, 1, 1),
            d(0, 2, 2),
        ])
        .unwrap();
        let plan = compile(&layout, MaskScheme::InterleavedIntra).unwrap();
        assert_eq!(plan.row(5), &[(1, 1), (3, 3), (5, 5)]);
        let plan = compile(&layout, MaskScheme::InterleavedAnchor).unwrap();
        assert_eq!(plan.row(5), &[(0, 1), (3, 3), (5, 5)]);
        assert_eq!(plan.row(4), &[(0, 0), (2, 2), (4, 4)]);
    }

    #[test]
    fn ascii_render() {
        let plan = compile(&plain(&[4]), MaskScheme::FullCausal).unwrap();
        assert_eq!(plan.render_ascii(), "#...\n##..\n###.\n####\n");
    }

    #[test]
    fn export_round_trip_and_rejection() {
        let plan = compile(&anchored(&[3, 2]), MaskScheme::Anchor).unwrap();
        let e = plan.to_export();
        let json = serde_json::to_string(&e).unwrap();
        let back: PlanExport = serde_json::from_str(&json).unwrap();
        assert_eq!(AttentionPlan::from_export(&back).unwrap(), plan);

        let mut broken = e.clone();
        broken.pair_count += 1;
        assert!(AttentionPlan::from_export(&broken).is_err());
        let mut broken = e;
        broken.rows[1].intervals = vec![[0, 2]];
        assert!(AttentionPlan::from_export(&broken).is_err());
    }

    #[test]
    fn interleave_single_chunk_is_identity() {
        let docs = [DocSpec::new(0, 2)];
        let policy = ChunkPolicy { max_chunks: 1, layout: LayoutOptions::default() };
        let layout = interleave_chunks(&docs, policy, 99).unwrap();
        assert_eq!(layout.tokens(), &[LayoutToken::doc(0, 0, 0), LayoutToken::doc(0, 0, 1)]);
        let bad = ChunkPolicy { max_chunks: 0, layout: LayoutOptions::default() };
        assert_eq!(interleave_chunks(&docs, bad, 0), Err(MaskError::InvalidMaxChunks));
    }

    #[test]
    fn interleave_produces_variety() {
        let docs = [DocSpec::new(0, 2), DocSpec::new(1, 2)];
        let policy = ChunkPolicy { max_chunks: 2, layout: LayoutOptions::default() };
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..1000 {
            let l = interleave_chunks(&docs, policy, seed).unwrap();
            seen.insert(l.tokens().iter().map(|t| t.doc_id).collect::<Vec<_>>());
        }
        assert!(seen.len() >= 2);
    }

    #[test]
    fn packing_examples() {
        let opts = LayoutOptions { anchor: true, tags: false };
        let packed = pack_documents(&[3, 3], 7, opts).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].len(), 7);

        let packed = pack_documents(&[10], 7, opts).unwrap();
        let sizes: Vec<usize> = packed.iter().map(|l| l.len()).collect();
        assert_eq!(sizes, vec![7, 5]);
        assert!(packed.iter().all(|l| l.has_anchor()));

        assert!(pack_documents(&[], 7, opts).unwrap().is_empty());
        assert!(matches!(
            pack_documents(&[3], 1, LayoutOptions::default()),
            Err(MaskError::WindowTooSmall { .. })
        ));
        assert!(matches!(
            pack_documents(&[3], 2, LayoutOptions { anchor: true, tags: true }),
            Err(MaskError::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn packing_with_tags_never_strands_a_tag() {
        let opts = LayoutOptions { anchor: true, tags: true };
        let packed = pack_documents(&[4, 1, 5], 6, opts).unwrap();
        for l in &packed {
            assert!(l.len() <= 6);
            assert_ne!(l.tokens().last().unwrap().role, TokenRole::Tag);
        }
        let doc_tokens: usize = packed
            .iter()
            .map(|l| l.tokens().iter().filter(|t| t.role == TokenRole::Doc).count())
            .sum();
        assert_eq!(doc_tokens, 10);
    }

    #[test]
    fn layout_spec_json() {
        let spec: LayoutSpec = serde_json::from_str(
            r#"{"window": 8, "docs": [{"id": 1, "len": 3}, {"id": 2, "len": 3, "domain": "wiki"}],
                "scheme": "anchor", "seed": 0}"#,
        )
        .unwrap();
        let layout = spec.build().unwrap();
        assert_eq!(compile(&layout, spec.scheme).unwrap().pair_count(), 19);

        let too_big = LayoutSpec { window: 6, ..spec.clone() };
        assert_eq!(too_big.build(), Err(MaskError::ExceedsWindow { needed: 7, window: 6 }));

        assert!(serde_json::from_str::<LayoutSpec>(
            r#"{"window": 8, "docs": [], "scheme": "bogus", "seed": 0}"#
        )
        .is_err());
        assert!(serde_json::from_str::<LayoutSpec>(
            r#"{"window": 8, "docs": [], "scheme": "anchor", "seed": 0, "extra": 1}"#
        )
        .is_err());
    }

    #[test]
    fn layout_json_is_validated_on_read() {
        let ok = serde_json::to_string(&anchored(&[2])).unwrap();
        let back: BatchLayout = serde_json::from_str(&ok).unwrap();
        assert_eq!(back, anchored(&[2]));
        let bad = r#"{"window": 2, "tokens": [
            {"role": "doc", "doc_id": 0, "chunk_id": 0, "within_doc_index": 0},
            {"role": "anchor", "doc_id": 0, "chunk_id": 0, "within_doc_index": 0}]}"#;
        assert!(serde_json::from_str::<BatchLayout>(bad).is_err());
    }
}
