//! User-partitioned token datasets and a synthetic Markov-chain corpus.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

pub const DEFAULT_UNROLL: usize = 10;

/// Splits a token stream into training sequences of `unroll` predictions.
///
/// Window `i` starts at token `i * unroll` and includes the following
/// token as the last target, so consecutive windows overlap by one token
/// and every adjacent pair is predicted exactly once. A 1600-token stream
/// with `unroll = 10` yields 160 sequences.
pub fn split_sequences(tokens: &[u32], unroll: usize) -> Vec<&[u32]> {
    assert!(unroll > 0, "unroll length must be positive");
    (0..tokens.len())
        .step_by(unroll)
        .map(|start| &tokens[start..(start + unroll + 1).min(tokens.len())])
        .filter(|s| s.len() >= 2)
        .collect()
}

/// One user's examples and derived weight `w_k = min(n_k / cap, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserShard {
    pub user_id: u64,
    pub tokens: Vec<u32>,
    pub weight: f64,
}

impl UserShard {
    /// `n_k`, counted in tokens.
    pub fn num_examples(&self) -> usize {
        self.tokens.len()
    }

    pub fn sequences(&self, unroll: usize) -> Vec<&[u32]> {
        split_sequences(&self.tokens, unroll)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    users: Vec<UserShard>,
    vocab: usize,
    unroll: usize,
    example_cap: f64,
}

impl TokenDataset {
    /// Users are stored sorted by id. `example_cap` is the per-user cap `ŵ`.
    pub fn new(users: Vec<(u64, Vec<u32>)>, vocab: usize, unroll: usize, example_cap: f64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::config("vocabulary needs at least two tokens"));
        }
        if unroll == 0 {
            return Err(Error::config("unroll length must be positive"));
        }
        if !(example_cap > 0.0) {
            return Err(Error::config(format!("per-user example cap must be positive, got {example_cap}")));
        }
        let mut shards: Vec<UserShard> = users
            .into_iter()
            .map(|(user_id, tokens)| {
                super::check_tokens(&tokens, vocab).map_err(|e| Error::config(format!("user {user_id}: {e}")))?;
                let weight = (tokens.len() as f64 / example_cap).min(1.0);
                Ok(UserShard { user_id, tokens, weight })
            })
            .collect::<Result<_>>()?;
        shards.sort_by_key(|u| u.user_id);
        if let Some(w) = shards.windows(2).find(|w| w[0].user_id == w[1].user_id) {
            return Err(Error::config(format!("duplicate user id {}", w[0].user_id)));
        }
        Ok(TokenDataset {
            users: shards,
            vocab,
            unroll,
            example_cap,
        })
    }

    pub fn users(&self) -> &[UserShard] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn unroll(&self) -> usize {
        self.unroll
    }

    pub fn example_cap(&self) -> f64 {
        self.example_cap
    }

    /// `W = sum_k w_k`.
    pub fn total_weight(&self) -> f64 {
        self.users.iter().map(|u| u.weight).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.users.iter().map(|u| u.tokens.len()).sum()
    }

    /// All sequences of all users, for evaluation.
    pub fn all_sequences(&self) -> Vec<&[u32]> {
        self.users.iter().flat_map(|u| u.sequences(self.unroll)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub users: usize,
    pub tokens_per_user: usize,
    pub vocab: usize,
    /// 0: every user follows the shared chain; 1: every user follows its own.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            users: 1000,
            tokens_per_user: 1600,
            vocab: 100,
            heterogeneity: 0.3,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::config("need at least one user"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocabulary needs at least two tokens"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config(format!("heterogeneity must lie in [0, 1], got {}", self.heterogeneity)));
        }
        Ok(())
    }
}

const SHARED_LOGIT_SCALE: f64 = 3.0;
const PREFERRED_MASS: f64 = 0.9;

/// The population-wide transition matrix (row-stochastic, V x V).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    vocab: usize,
    shared: Vec<f64>,
}

impl MarkovSource {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = substream(seed, 0, Purpose::Synthesis, u64::MAX);
        let mut shared = vec![0.0; vocab * vocab];
        for row in shared.chunks_mut(vocab) {
            for x in row.iter_mut() {
                *x = SHARED_LOGIT_SCALE * rng.sample::<f64, _>(StandardNormal);
            }
            super::softmax_in_place(row);
        }
        MarkovSource { vocab, shared }
    }

    pub fn shared_row(&self, token: usize) -> &[f64] {
        &self.shared[token * self.vocab..(token + 1) * self.vocab]
    }

    /// Transition row for a user: `(1 - h) * shared + h * personal`, where
    /// the personal chain puts most of its mass on the user's preferred tokens.
    pub fn user_row(&self, token: usize, preferred: &[u32], heterogeneity: f64) -> Vec<f64> {
        let v = self.vocab as f64;
        let mut personal = vec![(1.0 - PREFERRED_MASS) / v; self.vocab];
        for &p in preferred {
            personal[p as usize] += PREFERRED_MASS / preferred.len() as f64;
        }
        self.shared_row(token)
            .iter()
            .zip(personal)
            .map(|(s, p)| (1.0 - heterogeneity) * s + heterogeneity * p)
            .collect()
    }

    /// Draws `len` tokens: a uniform first token, then the user's chain.
    pub fn generate<R: Rng + ?Sized>(&self, preferred: &[u32], heterogeneity: f64, len: usize, rng: &mut R) -> Vec<u32> {
        let rows: Vec<WeightedIndex<f64>> = (0..self.vocab)
            .map(|t| WeightedIndex::new(self.user_row(t, preferred, heterogeneity)).expect("valid transition row"))
            .collect();
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut cur = rng.random_range(0..self.vocab);
        out.push(cur as u32);
        while out.len() < len {
            cur = rows[cur].sample(rng);
            out.push(cur as u32);
        }
        out
    }
}

/// The preferred-token set of a user (`max(1, V/10)` distinct tokens).
pub fn user_preferences(cfg: &SynthesisConfig, user_id: u64) -> Vec<u32> {
    let mut rng = substream(cfg.seed, 1, Purpose::Synthesis, user_id);
    let count = (cfg.vocab / 10).max(1);
    let mut picks: Vec<u32> = index::sample(&mut rng, cfg.vocab, count).into_iter().map(|i| i as u32).collect();
    picks.sort_unstable();
    picks
}

/// Generates the users with ids in `ids`. Each user depends only on
/// `(seed, user_id)`, so evaluation users can be drawn from the same
/// population by asking for ids past the training range.
pub fn synthesize_users(cfg: &SynthesisConfig, ids: Range<u64>) -> Result<Vec<(u64, Vec<u32>)>> {
    cfg.validate()?;
    let source = MarkovSource::new(cfg.vocab, cfg.seed);
    Ok(ids
        .map(|id| {
            let preferred = user_preferences(cfg, id);
            let mut rng = substream(cfg.seed, 2, Purpose::Synthesis, id);
            (id, source.generate(&preferred, cfg.heterogeneity, cfg.tokens_per_user, &mut rng))
        })
        .collect())
}

/// `cfg.users` training users with ids `0..K`.
pub fn synthesize_dataset(cfg: &SynthesisConfig, unroll: usize, example_cap: f64) -> Result<TokenDataset> {
    let users = synthesize_users(cfg, 0..cfg.users as u64)?;
    TokenDataset::new(users, cfg.vocab, unroll, example_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn histogram(tokens: &[u32], v: usize) -> Vec<f64> {
        let mut h = vec![0.0; v];
        for &t in tokens {
            h[t as usize] += 1.0 / tokens.len() as f64;
        }
        h
    }

    #[test]
    fn sequence_windows() {
        let tokens: Vec<u32> = (0..1600).map(|i| (i % 7) as u32).collect();
        let seqs = split_sequences(&tokens, 10);
        assert_eq!(seqs.len(), 160);
        assert_eq!(seqs[0].len(), 11);
        assert_eq!(seqs[159].len(), 10);
        assert_eq!(seqs.iter().map(|s| s.len() - 1).sum::<usize>(), 1599);
        assert_eq!(split_sequences(&[1, 2, 3], 10), vec![&[1u32, 2, 3][..]]);
        assert!(split_sequences(&[4], 10).is_empty());
    }

    #[test]
    fn full_users_have_unit_weight() {
        let cfg = SynthesisConfig {
            users: 1000,
            tokens_per_user: 1600,
            vocab: 20,
            ..SynthesisConfig::default()
        };
        let ds = synthesize_dataset(&cfg, 10, 1600.0).unwrap();
        assert!(ds.users().iter().all(|u| u.weight == 1.0));
        assert_eq!(ds.total_weight(), 1000.0);
        assert_eq!(ds.total_tokens(), 1000 * 1600);
    }

    #[test]
    fn short_users_are_down_weighted() {
        let ds = TokenDataset::new(vec![(1, vec![0; 400]), (0, vec![1; 1600])], 2, 10, 1600.0).unwrap();
        assert_eq!(ds.users()[0].user_id, 0);
        assert_eq!(ds.users()[1].weight, 0.25);
        assert!(TokenDataset::new(vec![(1, vec![0]), (1, vec![0])], 2, 10, 1.0).is_err());
        assert!(TokenDataset::new(vec![(1, vec![5])], 2, 10, 1.0).is_err());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = SynthesisConfig {
            users: 5,
            tokens_per_user: 50,
            ..SynthesisConfig::default()
        };
        assert_eq!(synthesize_users(&cfg, 0..5).unwrap(), synthesize_users(&cfg, 0..5).unwrap());
        let other = SynthesisConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synthesize_users(&cfg, 0..5).unwrap(), synthesize_users(&other, 0..5).unwrap());
    }

    #[test]
    fn homogeneous_users_share_a_distribution() {
        let cfg = SynthesisConfig {
            users: 2,
            tokens_per_user: 20_000,
            vocab: 10,
            heterogeneity: 0.0,
            seed: 3,
        };
        let users = synthesize_users(&cfg, 0..2).unwrap();
        let a = histogram(&users[0].1, 10);
        let b = histogram(&users[1].1, 10);
        for (x, y) in a.iter().zip(&b) {
            // binomial sd is at most sqrt(0.25 / 20000) ~ 0.0035 per histogram;
            // Markov dependence inflates it, so allow a generous margin
            assert!((x - y).abs() < 0.03, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn heterogeneous_users_follow_their_preferences() {
        let source = MarkovSource::new(10, 8);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let a = source.generate(&[2], 1.0, 5000, &mut rng);
        let b = source.generate(&[7], 1.0, 5000, &mut rng);
        let top = |h: Vec<f64>| super::super::argmax(&h);
        assert_eq!(top(histogram(&a, 10)), 2);
        assert_eq!(top(histogram(&b, 10)), 7);
    }

    #[test]
    fn preferences_have_expected_size() {
        let cfg = SynthesisConfig::default();
        let p = user_preferences(&cfg, 4);
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }
}
