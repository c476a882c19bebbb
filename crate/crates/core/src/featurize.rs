//! Deterministic hashed n-gram featurization of (problem, candidate) pairs.
//!
//! Both texts are tokenized into lowercase word n-grams and character
//! n-grams. Every gram is hashed with 64-bit FNV-1a under a stream tag so
//! the problem and candidate occupy disjoint feature namespaces and the pair
//! is scored jointly. A second FNV-1a pass with a different offset basis
//! chooses the feature sign. Index 0 is a constant bias feature.
//!
//! The hash constants and tags below are part of the on-disk contract:
//! changing any of them changes every feature vector.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Offset basis of the sign hash.
pub const SIGN_OFFSET: u64 = 0x84222325_cbf29ce4;

pub const TAG_PROBLEM_WORD: &[u8] = b"p\x1fw\x1f";
pub const TAG_PROBLEM_CHAR: &[u8] = b"p\x1fc\x1f";
pub const TAG_CANDIDATE_WORD: &[u8] = b"c\x1fw\x1f";
pub const TAG_CANDIDATE_CHAR: &[u8] = b"c\x1fc\x1f";

pub fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub dim: usize,
    /// Inclusive word n-gram order range.
    pub word_ngrams: (usize, usize),
    /// Inclusive character n-gram order range.
    pub char_ngrams: (usize, usize),
    pub normalize: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            dim: 4096,
            word_ngrams: (1, 2),
            char_ngrams: (3, 5),
            normalize: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "featurizer dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.dim > u32::MAX as usize {
            return Err(Error::InvalidConfig("featurizer dim too large".into()));
        }
        for (name, (lo, hi)) in [("word_ngrams", self.word_ngrams), ("char_ngrams", self.char_ngrams)] {
            if lo > hi {
                return Err(Error::InvalidConfig(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        Ok(())
    }
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i as usize] = x;
        }
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    fn from_unsorted(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_unstable_by_key(|p| p.0);
        let mut out = SparseVec::default();
        for (i, x) in pairs {
            if out.indices.last() == Some(&i) {
                *out.values.last_mut().unwrap() += x;
            } else {
                out.indices.push(i);
                out.values.push(x);
            }
        }
        // Signed collisions may cancel exactly.
        let mut k = 0;
        for j in 0..out.indices.len() {
            if out.values[j] != 0.0 || out.indices[j] == 0 {
                out.indices[k] = out.indices[j];
                out.values[k] = out.values[j];
                k += 1;
            }
        }
        out.indices.truncate(k);
        out.values.truncate(k);
        out
    }
}

struct Hasher<'a> {
    cfg: &'a FeaturizerConfig,
    out: Vec<(u32, f64)>,
}

impl Hasher<'_> {
    fn emit(&mut self, tag: &[u8], parts: &[&[u8]]) {
        let mut h = fnv1a(FNV_OFFSET, tag);
        let mut s = fnv1a(SIGN_OFFSET, tag);
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                h = fnv1a(h, b" ");
                s = fnv1a(s, b" ");
            }
            h = fnv1a(h, p);
            s = fnv1a(s, p);
        }
        let idx = 1 + (h % (self.cfg.dim as u64 - 1)) as u32;
        let sign = if s >> 63 == 0 { 1.0 } else { -1.0 };
        self.out.push((idx, sign));
    }

    fn stream(&mut self, text: &str, word_tag: &[u8], char_tag: &[u8]) -> (usize, usize) {
        let start = self.out.len();
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let (wlo, whi) = self.cfg.word_ngrams;
        for n in wlo.max(1)..=whi {
            for win in words.windows(n) {
                let parts: Vec<&[u8]> = win.iter().map(|w| w.as_bytes()).collect();
                self.emit(word_tag, &parts);
            }
        }
        if !words.is_empty() {
            let joined = format!(" {} ", words.join(" "));
            let offsets: Vec<usize> = joined
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(joined.len()))
                .collect();
            let n_chars = offsets.len() - 1;
            let (clo, chi) = self.cfg.char_ngrams;
            for n in clo.max(1)..=chi {
                if n > n_chars {
                    break;
                }
                for i in 0..=n_chars - n {
                    let gram = &joined.as_bytes()[offsets[i]..offsets[i + n]];
                    self.emit(char_tag, &[gram]);
                }
            }
        }
        (start, self.out.len())
    }
}

fn l2_normalize(pairs: &mut [(u32, f64)]) {
    // Merge before taking the norm so repeated grams count as a single coordinate.
    let merged = SparseVec::from_unsorted(pairs.to_vec());
    let norm = merged.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for p in pairs.iter_mut() {
            p.1 /= norm;
        }
    }
}

/// Sparse form of [`featurize`]. When `normalize` is set, each text stream is
/// scaled to unit norm before the bias is added and the whole vector is
/// normalized, so long problem statements do not drown the candidate.
pub fn featurize_sparse(problem_text: &str, candidate_text: &str, cfg: &FeaturizerConfig) -> SparseVec {
    let mut h = Hasher { cfg, out: Vec::new() };
    let (p0, p1) = h.stream(problem_text, TAG_PROBLEM_WORD, TAG_PROBLEM_CHAR);
    let (c0, c1) = h.stream(candidate_text, TAG_CANDIDATE_WORD, TAG_CANDIDATE_CHAR);
    let mut pairs = h.out;
    if cfg.normalize {
        l2_normalize(&mut pairs[p0..p1]);
        l2_normalize(&mut pairs[c0..c1]);
    }
    pairs.push((0, 1.0));
    let mut v = SparseVec::from_unsorted(pairs);
    if cfg.normalize {
        let norm = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v.values {
            *x /= norm;
        }
    }
    v
}

pub fn featurize(problem_text: &str, candidate_text: &str, cfg: &FeaturizerConfig) -> Vec<f64> {
    featurize_sparse(problem_text, candidate_text, cfg).to_dense(cfg.dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberMask {
    pub mask_seed: u64,
    pub keep_fraction: f64,
}

impl MemberMask {
    pub fn full() -> Self {
        Self {
            mask_seed: 0,
            keep_fraction: 1.0,
        }
    }

    /// Number of non-bias coordinates kept out of `dim - 1`.
    pub fn kept_count(&self, dim: usize) -> usize {
        let n = dim - 1;
        ((self.keep_fraction * n as f64).round() as usize).min(n)
    }

    /// Builds the index map for a feature dimension.
    pub fn index(&self, dim: usize) -> MaskIndex {
        let n = dim - 1;
        let k = self.kept_count(dim);
        let mut kept: Vec<usize> = if k == n {
            (1..dim).collect()
        } else {
            let mut rng = seed::rng(seed::derive(self.mask_seed, dim as u64, "mask"));
            index::sample(&mut rng, n, k).into_iter().map(|i| i + 1).collect()
        };
        kept.push(0);
        kept.sort_unstable();
        let mut position = vec![u32::MAX; dim];
        for (p, &i) in kept.iter().enumerate() {
            position[i] = p as u32;
        }
        MaskIndex { kept, position }
    }
}

/// Original-to-masked coordinate map induced by a [`MemberMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskIndex {
    /// Kept original indices, increasing; always contains 0.
    pub kept: Vec<usize>,
    position: Vec<u32>,
}

impl MaskIndex {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn position(&self, original: usize) -> Option<usize> {
        match self.position.get(original) {
            Some(&p) if p != u32::MAX => Some(p as usize),
            _ => None,
        }
    }

    /// Projects a sparse vector into masked coordinates.
    pub fn project(&self, v: &SparseVec) -> SparseVec {
        let mut out = SparseVec::default();
        for (i, x) in v.iter() {
            if let Some(p) = self.position(i) {
                out.indices.push(p as u32);
                out.values.push(x);
            }
        }
        out
    }
}

/// Zeroes every coordinate outside the mask's kept subset.
pub fn apply_mask(v: &[f64], mask: &MemberMask) -> Vec<f64> {
    let idx = mask.index(v.len());
    let mut out = vec![0.0; v.len()];
    for &i in &idx.kept {
        out[i] = v[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> FeaturizerConfig {
        FeaturizerConfig::default()
    }

    #[test]
    fn empty_texts_only_bias() {
        let v = featurize("", "", &cfg());
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_bitwise() {
        let a = featurize("Janet has 16 eggs", "She sells 9. #### 18", &cfg());
        let b = featurize("Janet has 16 eggs", "She sells 9. #### 18", &cfg());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unit_norm_when_normalized() {
        let v = featurize("a problem", "a candidate answer", &cfg());
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bias_is_one_without_normalization() {
        let c = FeaturizerConfig {
            normalize: false,
            ..cfg()
        };
        let v = featurize("x y z", "w", &c);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn problem_text_changes_vector() {
        let a = featurize("first problem", "same answer", &cfg());
        let b = featurize("second problem", "same answer", &cfg());
        assert_ne!(a, b);
    }

    #[test]
    fn one_word_perturbation_changes_vector() {
        let vocab: Vec<String> = (0..200).map(|i| format!("w{i}x")).collect();
        let mut rng = seed::rng(11);
        let c = cfg();
        for _ in 0..1000 {
            let len = rng.random_range(3..15);
            let words: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(0..200)].as_str()).collect();
            let mut other = words.clone();
            let pos = rng.random_range(0..len);
            let mut repl = vocab[rng.random_range(0..200)].as_str();
            while repl == words[pos] {
                repl = vocab[rng.random_range(0..200)].as_str();
            }
            other[pos] = repl;
            let a = featurize_sparse("problem", &words.join(" "), &c);
            let b = featurize_sparse("problem", &other.join(" "), &c);
            assert_ne!(a, b, "{words:?} vs {other:?}");
        }
    }

    #[test]
    fn disjoint_stream_tags() {
        // The same text as problem or as candidate must hash differently.
        let a = featurize_sparse("hello world", "", &cfg());
        let b = featurize_sparse("", "hello world", &cfg());
        assert_ne!(a.indices, b.indices);
    }

    #[test]
    fn full_mask_is_identity() {
        let v = featurize("p", "some candidate", &cfg());
        assert_eq!(apply_mask(&v, &MemberMask::full()), v);
    }

    #[test]
    fn zero_vector_stays_zero() {
        let v = vec![0.0; 64];
        let m = MemberMask {
            mask_seed: 3,
            keep_fraction: 0.5,
        };
        assert_eq!(apply_mask(&v, &m), v);
    }

    #[test]
    fn mask_keeps_bias_and_is_idempotent() {
        let v: Vec<f64> = (0..128).map(|i| i as f64 + 1.0).collect();
        let m = MemberMask {
            mask_seed: 9,
            keep_fraction: 0.3,
        };
        let once = apply_mask(&v, &m);
        assert_eq!(once[0], 1.0);
        assert_eq!(apply_mask(&once, &m), once);
        assert_eq!(once.iter().filter(|&&x| x != 0.0).count(), 1 + m.kept_count(128));
    }

    #[test]
    fn half_masks_overlap_about_a_quarter() {
        let dim = 4096;
        let seeds: Vec<MaskIndex> = (0..20)
            .map(|s| {
                MemberMask {
                    mask_seed: 1000 + s,
                    keep_fraction: 0.5,
                }
                .index(dim)
            })
            .collect();
        let expected = dim as f64 / 4.0;
        for w in seeds.windows(2) {
            assert_ne!(w[0].kept, w[1].kept);
            let a: std::collections::HashSet<_> = w[0].kept.iter().collect();
            let overlap = w[1].kept.iter().filter(|i| a.contains(i)).count() as f64;
            assert!((overlap - expected).abs() <= 0.1 * expected, "{overlap}");
        }
    }

    #[test]
    fn dim_below_two_rejected() {
        let c = FeaturizerConfig { dim: 1, ..cfg() };
        assert!(c.validate().is_err());
    }
}
