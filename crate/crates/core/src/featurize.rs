//! Offline stand-in for a sentence encoder: signed feature hashing of word
//! unigrams, word bigrams and character trigrams, L2-normalized.
//!
//! Real encoders plug in at the embedding boundary through DPEB1 files; this
//! featurizer only keeps toy runs self-contained.

use rayon::prelude::*;

use crate::corpus::{Corpus, SimpleTokenizer, Tokenizer};
use crate::embedding::{corpus_fingerprint, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingFeaturizer {
    pub dim: usize,
}

impl Default for HashingFeaturizer {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl HashingFeaturizer {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("featurizer dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    fn add(&self, v: &mut [f64], kind: &[u8], parts: &[&[u8]], weight: f64) {
        let mut all = Vec::with_capacity(parts.len() + 1);
        all.push(kind);
        all.extend_from_slice(parts);
        let h = fnv1a(&all);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign * weight;
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f64; self.dim];
        let words = SimpleTokenizer.tokenize(text);
        for w in &words {
            self.add(&mut v, b"w", &[w.as_bytes()], 1.0);
        }
        for pair in words.windows(2) {
            self.add(&mut v, b"b", &[pair[0].as_bytes(), pair[1].as_bytes()], 0.5);
        }
        let lower: Vec<u8> = format!(" {} ", text.to_lowercase()).into_bytes();
        for tri in lower.windows(3) {
            self.add(&mut v, b"c", &[tri], 0.25);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }

    /// Row `i` embeds record `i`; the fingerprint binds the matrix to `corpus`.
    pub fn embed_corpus(&self, corpus: &Corpus) -> Result<EmbeddingMatrix> {
        let data: Vec<f32> = corpus.records.par_iter().flat_map_iter(|r| self.embed(&r.text)).collect();
        EmbeddingMatrix::new(corpus.len(), self.dim, data, corpus_fingerprint(corpus))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusRole;
    use crate::embedding::validate_alignment;

    #[test]
    fn unit_norm_and_deterministic() {
        let f = HashingFeaturizer::new(64).unwrap();
        let a = f.embed("Write a short poem about owls.");
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a, f.embed("Write a short poem about owls."));
        assert!(f.embed("").iter().all(|x| *x == 0.0));
    }

    #[test]
    fn similar_texts_are_closer() {
        let f = HashingFeaturizer::default();
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        let a = f.embed("Explain how glaciers work.");
        let b = f.embed("Explain how volcanoes work.");
        let c = f.embed("Call Ana at 5550102030.");
        assert!(dot(&a, &b) > dot(&a, &c) + 0.2);
    }

    #[test]
    fn corpus_matrix_is_aligned() {
        let c = Corpus::from_texts(CorpusRole::Synthetic, "s", &["one", "two two", "three"]);
        let m = HashingFeaturizer::new(16).unwrap().embed_corpus(&c).unwrap();
        assert_eq!((m.count(), m.dim()), (3, 16));
        validate_alignment(&m, &c).unwrap();
    }
}
