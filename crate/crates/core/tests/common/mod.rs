//! Oracles and generators shared by the integration tests. Nothing here calls
//! into the library's own reference paths.

#![allow(dead_code)]

use std::io::{self, Write};

use rand::Rng;
use ropelab::mask::{BatchLayout, LayoutToken, MaskScheme, TokenRole};

/// Print one result line and fail the test when `passed` is false. Written
/// straight to the stderr handle so it shows without `--nocapture`.
pub fn report(criterion: u32, name: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(io::stderr(), "criterion {criterion:>2} [{status}] {name}: {detail}");
    assert!(passed, "criterion {criterion} ({name}) failed: {detail}");
}

/// Nearest bf16 to `x` under ties-to-even, decided against the exact midpoint
/// of the two bracketing bf16 values (all representable in f64).
pub fn bf16_midpoint_oracle(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16 & 0x8000) | 0x7FC0;
    }
    let sign = (bits >> 16) as u16 & 0x8000;
    let a = x.abs() as f64;
    let down = (x.abs().to_bits() >> 16) as u16;
    let lo = f32::from_bits((down as u32) << 16) as f64;
    if lo == a {
        return sign | down;
    }
    let hi = if down == 0x7F7F {
        // Past the largest finite bf16 the next step is 2^128.
        2f64.powi(128)
    } else {
        f32::from_bits(((down + 1) as u32) << 16) as f64
    };
    let mid = (lo + hi) / 2.0;
    let up = a > mid || (a == mid && down & 1 == 1);
    sign | if up { down + 1 } else { down }
}

/// Whether query `i` may attend key `j` under `scheme`, straight from the
/// scheme definitions.
pub fn visible(tokens: &[LayoutToken], scheme: MaskScheme, i: usize, j: usize) -> bool {
    if j > i {
        return false;
    }
    if i == j || scheme == MaskScheme::FullCausal {
        return true;
    }
    let owner = |t: &LayoutToken| (t.role != TokenRole::Anchor).then_some(t.doc_id);
    let same = owner(&tokens[i]).is_some() && owner(&tokens[i]) == owner(&tokens[j]);
    let anchored = matches!(
        scheme,
        MaskScheme::Anchor | MaskScheme::AnchorTag | MaskScheme::InterleavedAnchor
    );
    same || (anchored && tokens[j].role == TokenRole::Anchor)
}

/// A random valid layout of exactly `t` tokens. Documents are cut into chunks
/// that are shuffled across documents while keeping each document's order.
pub fn random_layout<R: Rng>(rng: &mut R, t: usize, anchor: bool, tags: bool) -> BatchLayout {
    assert!(t >= 1 + anchor as usize + tags as usize);
    let mut body = t - anchor as usize;
    let mut lens = Vec::new();
    while body > 0 {
        let overhead = tags as usize;
        if body < overhead + 1 {
            // Fold the leftover into the previous document.
            *lens.last_mut().expect("first document always fits") += body;
            break;
        }
        let len = rng.random_range(1..=(body - overhead).min(24));
        lens.push(len);
        body -= len + overhead;
    }
    // Per document: remaining tokens, cut into chunk sizes.
    let mut queues: Vec<Vec<usize>> = lens
        .iter()
        .map(|&len| {
            let mut left = len;
            let mut parts = Vec::new();
            while left > 0 {
                let p = rng.random_range(1..=left);
                parts.push(p);
                left -= p;
            }
            parts.reverse();
            parts
        })
        .collect();
    let mut tokens = Vec::with_capacity(t);
    if anchor {
        tokens.push(LayoutToken::anchor());
    }
    let mut emitted = vec![0u32; lens.len()];
    let mut chunk = vec![0u32; lens.len()];
    let mut live: Vec<usize> = (0..lens.len()).collect();
    while !live.is_empty() {
        let k = rng.random_range(0..live.len());
        let d = live[k];
        let size = queues[d].pop().expect("live documents have chunks");
        if emitted[d] == 0 && tags {
            tokens.push(LayoutToken::tag(d as u32));
        }
        for _ in 0..size {
            tokens.push(LayoutToken::doc(d as u32, chunk[d], emitted[d]));
            emitted[d] += 1;
        }
        chunk[d] += 1;
        if queues[d].is_empty() {
            live.swap_remove(k);
        }
    }
    let layout = BatchLayout::new(tokens).expect("generated layout is valid");
    assert_eq!(layout.len(), t);
    layout
}

/// Number of tokens (tags included) each document owns.
pub fn document_sizes(layout: &BatchLayout) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    for tok in layout.tokens() {
        if tok.role == TokenRole::Anchor {
            continue;
        }
        let d = tok.doc_id as usize;
        if sizes.len() <= d {
            sizes.resize(d + 1, 0);
        }
        sizes[d] += 1;
    }
    sizes.retain(|&s| s > 0);
    sizes
}

pub fn triangle(n: u64) -> u64 {
    n * (n + 1) / 2
}
