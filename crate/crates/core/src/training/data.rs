//! Synthetic paired task: a lexical map composed with adjacent-pair swaps,
//! with noisy repeated-prototype frames standing in for speech.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FrameSequence, TokenSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            src_vocab: 32,
            tgt_vocab: 32,
            min_len: 4,
            max_len: 16,
            min_frames: 2,
            max_frames: 4,
            feat_dim: 16,
            noise_sigma: 0.3,
            n_train: 2000,
            n_dev: 100,
            n_test: 200,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.src_vocab < 2 || self.tgt_vocab < self.src_vocab {
            return bad("need 2 ≤ src_vocab ≤ tgt_vocab so the lexical map is injective");
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return bad("sentence lengths");
        }
        if self.min_frames < 1 || self.max_frames < self.min_frames {
            return bad("frames per token");
        }
        if self.feat_dim == 0 || !(self.noise_sigma >= 0.0) {
            return bad("features");
        }
        if self.n_train + self.n_dev + self.n_test == 0 {
            return bad("empty dataset");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedExample {
    pub frames: FrameSequence,
    pub transcript: TokenSequence,
    pub target: TokenSequence,
    /// Frames covering each transcript token.
    pub token_frames: Vec<usize>,
}

impl PairedExample {
    /// Number of transcript tokens whose frames are fully inside the first
    /// `frames` frames.
    pub fn tokens_received(&self, frames: usize) -> usize {
        let mut acc = 0;
        for (i, &k) in self.token_frames.iter().enumerate() {
            acc += k;
            if acc > frames {
                return i;
            }
        }
        self.token_frames.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub lexicon: Vec<usize>,
    pub train: Vec<PairedExample>,
    pub dev: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
}

/// Swaps positions `(2k, 2k+1)`; an odd trailing token stays put.
pub fn pair_swap<T: Copy>(xs: &[T]) -> Vec<T> {
    let mut out = xs.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

pub fn target_for(lexicon: &[usize], transcript: &[usize]) -> Vec<usize> {
    pair_swap(&transcript.iter().map(|&s| lexicon[s]).collect::<Vec<_>>())
}

pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lexicon: Vec<usize> = (0..spec.tgt_vocab).collect();
    lexicon.shuffle(&mut rng);
    lexicon.truncate(spec.src_vocab);
    let prototypes: Vec<Vec<f64>> = (0..spec.src_vocab)
        .map(|_| {
            (0..spec.feat_dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let total = spec.n_train + spec.n_dev + spec.n_test;
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > 1000 * total {
            return Err(Error::Config("task space too small for the requested split sizes".into()));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let transcript: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.src_vocab)).collect();
        if !seen.insert(transcript.clone()) {
            continue;
        }
        let mut data = Vec::new();
        let mut token_frames = Vec::with_capacity(len);
        for &tok in &transcript {
            let k = rng.gen_range(spec.min_frames..=spec.max_frames);
            token_frames.push(k);
            for _ in 0..k {
                for &v in &prototypes[tok] {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(v + n);
                }
            }
        }
        let n_frames = data.len() / spec.feat_dim;
        let frames = FrameSequence::new(Tensor::new(vec![n_frames, spec.feat_dim], data)?)?;
        examples.push(PairedExample {
            frames,
            target: TokenSequence::new(target_for(&lexicon, &transcript)),
            transcript: TokenSequence::new(transcript),
            token_frames,
        });
    }
    let test = examples.split_off(spec.n_train + spec.n_dev);
    let dev = examples.split_off(spec.n_train);
    Ok(Dataset {
        spec: spec.clone(),
        lexicon,
        train: examples,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_train: 50,
            n_dev: 10,
            n_test: 10,
            ..Default::default()
        }
    }

    #[test]
    fn pair_swap_rule() {
        assert_eq!(pair_swap(&[1, 2, 3, 4]), vec![2, 1, 4, 3]);
        assert_eq!(pair_swap(&[1, 2, 3]), vec![2, 1, 3]);
        let lex: Vec<usize> = (0..8).map(|i| (i * 3) % 8).collect();
        assert_eq!(target_for(&lex, &[0, 1, 2, 3]), vec![lex[1], lex[0], lex[3], lex[2]]);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().map(|e| e.transcript.clone()).collect();
        assert!(a.dev.iter().chain(&a.test).all(|e| !train.contains(&e.transcript)));
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (50, 10, 10));
        for e in &a.train {
            assert_eq!(e.target.tokens, target_for(&a.lexicon, &e.transcript.tokens));
            assert!((4..=16).contains(&e.transcript.len()));
            assert_eq!(e.frames.len(), e.token_frames.iter().sum::<usize>());
        }
    }

    #[test]
    fn noiseless_frames_repeat_prototypes() {
        let spec = SyntheticTaskSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let d = generate_dataset(&spec).unwrap();
        let e = &d.train[0];
        let f = spec.feat_dim;
        let first = &e.frames.frames.data[..f];
        for r in 1..e.token_frames[0] {
            assert_eq!(&e.frames.frames.data[r * f..(r + 1) * f], first);
        }
        // the same token elsewhere has the same vector
        let tok = e.transcript.tokens[0];
        let mut start = 0;
        for (i, &k) in e.token_frames.iter().enumerate() {
            if i > 0 && e.transcript.tokens[i] == tok {
                assert_eq!(&e.frames.frames.data[start * f..(start + 1) * f], first);
            }
            start += k;
        }
    }

    #[test]
    fn tokens_received_counts_complete_tokens() {
        let d = generate_dataset(&small()).unwrap();
        let e = &d.train[0];
        assert_eq!(e.tokens_received(0), 0);
        assert_eq!(e.tokens_received(e.token_frames[0]), 1);
        assert_eq!(e.tokens_received(e.token_frames[0] - 1), 0);
        assert_eq!(e.tokens_received(e.frames.len()), e.transcript.len());
    }

    #[test]
    fn hash_tracks_spec() {
        let a = small();
        let mut b = small();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
