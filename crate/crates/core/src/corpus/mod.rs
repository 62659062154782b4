//! Synthetic pseudo-speech corpus.
//!
//! Each content token owns a fixed unit-norm prototype vector. An
//! utterance renders its transcript by repeating each prototype for a
//! random number of frames, optionally inserting zero-vector silence
//! between tokens, and adding Gaussian noise. Token durations vary per
//! occurrence, so frame counts say little about transcript length.

mod dataset;

pub use dataset::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::numerics::{Rng, Tensor};

/// Stream ids at or above this are reserved for prototypes.
const PROTOTYPE_STREAM: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Frames per rendered token, inclusive.
    pub frames_per_token: [usize; 2],
    pub silence_prob: f64,
    /// Frames per silence gap, inclusive.
    pub silence_len: [usize; 2],
    pub noise_sigma: f64,
    /// Transcript length, inclusive.
    pub utt_len: [usize; 2],
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 20,
            feat_dim: 24,
            frames_per_token: [2, 6],
            silence_prob: 0.3,
            silence_len: [1, 4],
            noise_sigma: 0.3,
            utt_len: [4, 20],
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.vocab_size == 0 || self.feat_dim == 0 {
            return bad("vocab_size and feat_dim must be positive");
        }
        let [rmin, rmax] = self.frames_per_token;
        if rmin < 1 || rmin > rmax {
            return bad("frames_per_token needs 1 <= min <= max");
        }
        let [lmin, lmax] = self.utt_len;
        if lmin < 1 || lmin > lmax {
            return bad("utt_len needs 1 <= min <= max");
        }
        let [smin, smax] = self.silence_len;
        if smin > smax || (self.silence_prob > 0.0 && smin == 0) {
            return bad("silence_len needs 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad("silence_prob must lie in [0, 1]");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }

    /// Unit-norm prototype for content token `id` (1-based), a function of
    /// `(seed, id)` only.
    pub fn prototype(&self, id: usize) -> Vec<f32> {
        let mut rng = Rng::stream(self.seed, PROTOTYPE_STREAM + id as u64);
        let v: Vec<f64> = (0..self.feat_dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter().map(|x| (x / norm) as f32).collect()
    }

    /// Upper bound on frames for a transcript of `len` tokens.
    pub fn max_frames(&self, len: usize) -> usize {
        len * self.frames_per_token[1] + len.saturating_sub(1) * self.silence_len[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, feat_dim]`
    pub features: Tensor<f32>,
    pub transcript: TokenSequence,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Renders `transcript` into frames, drawing durations, silences and noise
/// from `rng`.
pub fn render(cfg: &CorpusConfig, transcript: &[usize], rng: &mut Rng) -> Tensor<f32> {
    let d = cfg.feat_dim;
    let mut frames: Vec<f32> = Vec::new();
    for (i, &tok) in transcript.iter().enumerate() {
        if i > 0 && cfg.silence_prob > 0.0 && rng.bernoulli(cfg.silence_prob) {
            let n = rng.uniform_int(cfg.silence_len[0], cfg.silence_len[1]);
            frames.extend(std::iter::repeat_n(0.0, n * d));
        }
        let proto = cfg.prototype(tok);
        let r = rng.uniform_int(cfg.frames_per_token[0], cfg.frames_per_token[1]);
        for _ in 0..r {
            frames.extend_from_slice(&proto);
        }
    }
    if cfg.noise_sigma > 0.0 {
        for x in &mut frames {
            *x += (rng.normal() * cfg.noise_sigma) as f32;
        }
    }
    let t = frames.len() / d;
    Tensor::new([t, d], frames).expect("at least one token is rendered")
}

/// Utterance number `index` of the corpus keyed by `cfg.seed` and `split`.
pub fn gen_utterance(cfg: &CorpusConfig, split: u64, index: usize) -> Utterance {
    let mut rng = Rng::stream(cfg.seed, (split << 32) | index as u64);
    let len = rng.uniform_int(cfg.utt_len[0], cfg.utt_len[1]);
    let transcript: Vec<usize> = (0..len).map(|_| rng.uniform_int(1, cfg.vocab_size)).collect();
    let features = render(cfg, &transcript, &mut rng);
    Utterance {
        id: format!("s{split}-{index:06}"),
        features,
        transcript,
    }
}

pub fn gen_split(cfg: &CorpusConfig, split: u64, count: usize) -> Vec<Utterance> {
    (0..count).map(|i| gen_utterance(cfg, split, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(r: usize) -> CorpusConfig {
        CorpusConfig {
            frames_per_token: [r, r],
            silence_prob: 0.0,
            noise_sigma: 0.0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn deterministic_rendering() {
        let cfg = quiet(2);
        let x = render(&cfg, &[1, 2], &mut Rng::new(0));
        assert_eq!(x.shape(), &[4, 24]);
        let (a, b) = (cfg.prototype(1), cfg.prototype(2));
        assert_eq!(x.row(0), &a[..]);
        assert_eq!(x.row(1), &a[..]);
        assert_eq!(x.row(2), &b[..]);
        assert_eq!(x.row(3), &b[..]);
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let cfg = CorpusConfig::default();
        for id in 1..=cfg.vocab_size {
            let n: f32 = cfg.prototype(id).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_ne!(cfg.prototype(1), cfg.prototype(2));
    }

    #[test]
    fn same_seed_same_utterance() {
        let cfg = CorpusConfig::default();
        assert_eq!(gen_utterance(&cfg, 0, 5), gen_utterance(&cfg, 0, 5));
        assert_ne!(gen_utterance(&cfg, 0, 5), gen_utterance(&cfg, 1, 5));
    }

    #[test]
    fn durations_vary_for_a_fixed_transcript() {
        let cfg = CorpusConfig {
            silence_prob: 0.0,
            ..CorpusConfig::default()
        };
        let transcript = [3, 1, 4, 1, 5];
        let lens: std::collections::HashSet<usize> = (0..100)
            .map(|i| render(&cfg, &transcript, &mut Rng::new(i)).shape()[0])
            .collect();
        assert!(lens.len() > 1);
    }

    #[test]
    fn frame_count_bounds() {
        let cfg = CorpusConfig::default();
        for u in gen_split(&cfg, 0, 200) {
            let l = u.transcript.len();
            assert!(u.frames() >= l * cfg.frames_per_token[0]);
            assert!(u.frames() <= cfg.max_frames(l));
            assert!((cfg.utt_len[0]..=cfg.utt_len[1]).contains(&l));
            assert!(u.transcript.iter().all(|&t| (1..=cfg.vocab_size).contains(&t)));
        }
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig::default().validate().is_ok());
        let bad = CorpusConfig {
            frames_per_token: [0, 2],
            ..CorpusConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CorpusConfig {
            noise_sigma: -1.0,
            ..CorpusConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
