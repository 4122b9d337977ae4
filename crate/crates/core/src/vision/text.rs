//! Frozen text featurizer: a hashed bag of tokens.
//!
//! Each non-stopword token adds ±1 at four hash-chosen positions of a
//! `dim`-wide vector. The learned part of the text encoder is the projection
//! that sits on top (see [`super::model`]).

use crate::dsl::tokenize;

/// Function words that carry no segmentation signal.
pub const STOPWORDS: &[&str] = &["the", "a", "an", "thing", "that", "this", "of", "one", "object"];

const PROBES: usize = 4;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Positions and signs a token contributes to.
pub fn token_features(token: &str, dim: usize) -> Vec<(usize, f64)> {
    let mut state = fnv1a(token.as_bytes());
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(PROBES);
    while out.len() < PROBES.min(dim) {
        let r = splitmix(&mut state);
        let idx = (r % dim as u64) as usize;
        if out.iter().any(|(i, _)| *i == idx) {
            continue;
        }
        let sign = if (r >> 63) == 1 { -1.0 } else { 1.0 };
        out.push((idx, sign));
    }
    out
}

pub fn bag_of_tokens(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        if STOPWORDS.contains(&tok.as_str()) {
            continue;
        }
        for (i, s) in token_features(&tok, dim) {
            v[i] += s;
        }
    }
    v
}
