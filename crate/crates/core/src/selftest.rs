//! Built-in verification suite behind `ropelab selftest`.
//!
//! The checks here use their own oracles: bf16 rounding is recomputed from
//! neighbour distances in f64, and masks are checked against a direct
//! evaluation of each scheme's visibility predicate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::{compile, BatchLayout, LayoutToken, MaskScheme, TokenRole};
use crate::precision::Bf16;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// bf16 bits nearest to `x` under ties-to-even, found by comparing the two
/// bracketing bf16 values.
pub fn bf16_oracle(x: f32) -> u16 {
    if x.is_nan() {
        return ((x.to_bits() >> 16) as u16 & 0x8000) | 0x7FC0;
    }
    let bits = x.to_bits();
    let sign = bits & 0x8000_0000;
    let mag = bits & 0x7FFF_FFFF;
    let lo = mag & 0xFFFF_0000;
    if lo == mag {
        return (bits >> 16) as u16;
    }
    let hi = lo + 0x1_0000;
    let value = |m: u32| -> f64 {
        if m >= 0x7F80_0000 {
            // One step past the largest finite bf16.
            2f64.powi(128)
        } else {
            f32::from_bits(m) as f64
        }
    };
    let v = f32::from_bits(mag) as f64;
    let (dl, dh) = (v - value(lo), value(hi) - v);
    let pick = if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if (lo >> 16) & 1 == 0 {
        lo
    } else {
        hi
    };
    ((sign | pick) >> 16) as u16
}

pub fn check_bf16_exhaustive() -> Check {
    let mut failures = 0u32;
    for b in 0..=u16::MAX {
        let w = Bf16::from_bits(b);
        let back = Bf16::from_f32(w.to_f32());
        let ok = if w.is_nan() { back.is_nan() } else { back == w };
        if !ok {
            failures += 1;
        }
    }
    Check {
        name: "bf16 exhaustive round trip",
        passed: failures == 0,
        detail: format!("65536 patterns, {failures} failures"),
    }
}

pub fn check_bf16_random(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for _ in 0..samples {
        let x = f32::from_bits(rng.random::<u32>());
        let got = Bf16::from_f32(x);
        let want = bf16_oracle(x);
        let ok = if x.is_nan() { got.is_nan() } else { got.to_bits() == want };
        if !ok {
            failures += 1;
        }
    }
    Check {
        name: "bf16 random vs ties-to-even oracle",
        passed: failures == 0,
        detail: format!("{samples} samples, {failures} failures"),
    }
}

/// Direct evaluation of a scheme's visibility predicate.
pub fn visible(tokens: &[LayoutToken], scheme: MaskScheme, i: usize, j: usize) -> bool {
    if j > i {
        return false;
    }
    let same_doc = match (tokens[i].document(), tokens[j].document()) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    };
    match scheme {
        MaskScheme::FullCausal => true,
        MaskScheme::IntraDoc | MaskScheme::IntraDocReset | MaskScheme::InterleavedIntra => {
            i == j || same_doc
        }
        MaskScheme::Anchor | MaskScheme::AnchorTag | MaskScheme::InterleavedAnchor => {
            i == j || same_doc || (j == 0 && tokens[0].role == TokenRole::Anchor)
        }
    }
}

/// Random valid layout with at most `max_t` tokens: optional anchor, optional
/// tags, documents split into chunks and interleaved.
pub fn random_layout<R: Rng>(rng: &mut R, max_t: usize, anchor: bool) -> BatchLayout {
    let tags = rng.random_bool(0.3);
    let budget = max_t - anchor as usize;
    let mut docs: Vec<usize> = Vec::new();
    let mut used = 0;
    while used < budget {
        let room = budget - used;
        if room < 1 + tags as usize {
            break;
        }
        let len = rng.random_range(1..=room - tags as usize);
        docs.push(len);
        used += len + tags as usize;
        if rng.random_bool(0.25) {
            break;
        }
    }
    let interleave = rng.random_bool(0.5);
    let mut streams: Vec<(u32, usize, usize)> = docs.iter().enumerate().map(|(d, &l)| (d as u32, l, 0)).collect();
    let mut tokens = Vec::new();
    if anchor {
        tokens.push(LayoutToken::anchor());
    }
    let mut chunk_ids = vec![0u32; docs.len()];
    while !streams.is_empty() {
        let k = if interleave { rng.random_range(0..streams.len()) } else { 0 };
        let (id, len, done) = streams[k];
        let take = if interleave { rng.random_range(1..=len - done) } else { len };
        if done == 0 && tags {
            tokens.push(LayoutToken::tag(id));
        }
        let c = chunk_ids[id as usize];
        tokens.extend((done..done + take).map(|w| LayoutToken::doc(id, c, w as u32)));
        chunk_ids[id as usize] += 1;
        if done + take == len {
            streams.remove(k);
        } else {
            streams[k].2 = done + take;
        }
    }
    BatchLayout::new(tokens).expect("generator emits valid layouts")
}

pub fn check_mask_oracle(layouts: usize, max_t: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut compiled = 0usize;
    for _ in 0..layouts {
        let t = rng.random_range(2..=max_t);
        let layout = random_layout(&mut rng, t, true);
        let bare = BatchLayout::new(layout.tokens()[1..].to_vec()).expect("suffix stays valid");
        for scheme in MaskScheme::ALL {
            let l = if scheme.needs_anchor() || rng.random_bool(0.5) { &layout } else { &bare };
            if l.is_empty() {
                continue;
            }
            let plan = compile(l, scheme).expect("valid layout compiles");
            compiled += 1;
            let t = l.len();
            let want: Vec<(usize, usize)> = (0..t)
                .flat_map(|i| (0..=i).map(move |j| (i, j)))
                .filter(|&(i, j)| visible(l.tokens(), scheme, i, j))
                .collect();
            if plan.enumerate_pairs() != want || plan.pair_count() as usize != want.len() {
                mismatches += 1;
            }
        }
    }
    Check {
        name: "mask plans vs brute-force predicate",
        passed: mismatches == 0,
        detail: format!("{compiled} plans, {mismatches} mismatches"),
    }
}

pub fn run_all(samples: usize, layouts: usize, seed: u64) -> Vec<Check> {
    vec![
        check_bf16_exhaustive(),
        check_bf16_random(samples, seed),
        check_mask_oracle(layouts, 64, seed),
    ]
}
