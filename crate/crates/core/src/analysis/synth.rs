//! Synthetic raw-tier traces with planted class structure.
//!
//! Each sample draws three latent scores from its class profile:
//!
//! * `z_U` sets the number of distinct top-1 tokens
//!   `u = 1 + floor(sigmoid(z_U) * L)`; layers `1..u-1` carry distinct
//!   tokens and layers `u..L` the final token.
//! * `z_H` sets layer entropies `ln V * sigmoid(w_l * z_H + noise * e_l)`
//!   with depth weights `w_l = 1 - r + r * l / L`.
//! * `z_A` sets the per-layer image attention level
//!   `a_l = sigmoid(z_A + noise * e'_l)`.
//!
//! Hidden states are built so that the logit lens reproduces the planted
//! top-1 token and entropy: `W` scales a random partial permutation, and
//! "slack" coordinates outside the projected ones control the LayerNorm
//! scale and therefore the logit gap between the top token and the rest.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::trace::{Labels, Layers, LensParams, ModelHead, RawLayer, SampleTrace};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

/// A normal distribution on the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitNormal {
    pub mean: f64,
    pub std: f64,
}

impl LogitNormal {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.mean + self.std * e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub unique: LogitNormal,
    pub entropy: LogitNormal,
    pub attention: LogitNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub hallucination_rate: f64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub real_profile: ClassProfile,
    pub hallu_profile: ClassProfile,
    /// Per-layer noise on the entropy and attention logits.
    pub noise: f64,
    /// `r` in the depth weights; 0 weighs every layer equally.
    pub depth_ramp: f64,
    /// Magnitude of the nonzero projection entries.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            hallucination_rate: 0.3,
            num_layers: 8,
            num_heads: 4,
            hidden_dim: 40,
            vocab_size: 32,
            image_tokens: 4,
            text_tokens: 6,
            real_profile: ClassProfile {
                unique: LogitNormal::new(-1.0, 0.8),
                entropy: LogitNormal::new(-0.5, 0.8),
                attention: LogitNormal::new(0.5, 0.5),
            },
            hallu_profile: ClassProfile {
                unique: LogitNormal::new(0.5, 0.8),
                entropy: LogitNormal::new(0.5, 0.8),
                attention: LogitNormal::new(-0.2, 0.5),
            },
            noise: 0.3,
            depth_ramp: 0.5,
            logit_scale: 10.0,
            seed: 0,
        }
    }
}

fn check_profile(name: &str, p: &ClassProfile) -> Result<(), SynthError> {
    for (part, d) in [("unique", p.unique), ("entropy", p.entropy), ("attention", p.attention)] {
        if !d.mean.is_finite() || !(d.std >= 0.0 && d.std.is_finite()) {
            return Err(SynthError::Invalid(format!(
                "{name}.{part} needs a finite mean and a nonnegative std"
            )));
        }
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2".into());
        }
        if !(self.hallucination_rate > 0.0 && self.hallucination_rate < 1.0) {
            return bad(format!(
                "hallucination_rate {} must lie strictly between 0 and 1",
                self.hallucination_rate
            ));
        }
        let n_pos = self.positives();
        if n_pos == 0 || n_pos == self.n_samples {
            return bad("hallucination_rate leaves one class empty".into());
        }
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad("num_layers and num_heads must be positive".into());
        }
        if self.vocab_size < self.num_layers.max(2) {
            return bad("vocab_size must be at least max(num_layers, 2)".into());
        }
        if self.hidden_dim < self.vocab_size + 2 {
            return bad("hidden_dim must be at least vocab_size + 2".into());
        }
        if self.image_tokens == 0 || self.text_tokens == 0 {
            return bad("image_tokens and text_tokens must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.depth_ramp) {
            return bad("depth_ramp must lie in [0,1]".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale must be positive".into());
        }
        check_profile("real_profile", &self.real_profile)?;
        check_profile("hallu_profile", &self.hallu_profile)
    }

    /// Exact number of hallucinated samples.
    pub fn positives(&self) -> usize {
        (self.hallucination_rate * self.n_samples as f64).round() as usize
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Entropy of a distribution with one token `gap` nats of logit above
/// `v - 1` equal others.
pub(crate) fn gap_entropy(gap: f64, v: usize) -> f64 {
    let q = (v as f64 - 1.0) * (-gap).exp();
    q.ln_1p() + gap * q / (1.0 + q)
}

/// Inverts `gap_entropy` on `[0, max_gap]` by bisection.
fn gap_for_entropy(target: f64, v: usize, max_gap: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, max_gap);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap_entropy(mid, v) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `"tok{id}"` for every id, matching the generator's token strings.
pub fn synthetic_vocab(vocab_size: usize) -> Vec<String> {
    (0..vocab_size).map(|i| format!("tok{i}")).collect()
}

const NORM_EPS: f32 = 1e-5;

struct Geometry {
    v: usize,
    d: usize,
    scale: f64,
    /// Column carrying each token's logit.
    column: Vec<usize>,
    slack: Vec<usize>,
    max_gap: f64,
    min_entropy: f64,
    max_entropy: f64,
}

impl Geometry {
    /// Hidden state whose lens distribution puts `gap` nats on `token`.
    fn hidden_state(&self, token: usize, gap: f64) -> Vec<f32> {
        let d = self.d as f64;
        let alpha = 1.0;
        let mean = alpha / d;
        let sigma = self.scale * alpha / gap;
        let var = sigma * sigma - f64::from(NORM_EPS);
        let m = self.slack.len() / 2 * 2;
        let r2 = ((d * (var + mean * mean) - alpha * alpha) / m as f64).max(0.0);
        let r = r2.sqrt();
        let mut h = vec![0.0f32; self.d];
        h[self.column[token]] = alpha as f32;
        for (k, &c) in self.slack.iter().take(m).enumerate() {
            h[c] = if k % 2 == 0 { r as f32 } else { -r as f32 };
        }
        h
    }
}

/// Generates a raw-tier trace set and its labels; deterministic in `seed`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(ModelHead, Vec<SampleTrace>, Labels), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (l, v, d, heads) = (config.num_layers, config.vocab_size, config.hidden_dim, config.num_heads);

    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let mut projection = vec![0.0f32; v * d];
    for (tok, &c) in perm[..v].iter().enumerate() {
        projection[tok * d + c] = config.logit_scale as f32;
    }
    // Largest gap reachable with zero slack, kept slightly inside.
    let zero_slack_var = 1.0 / d as f64 - 1.0 / (d * d) as f64;
    let max_gap = 0.999 * config.logit_scale / (zero_slack_var + f64::from(NORM_EPS)).sqrt();
    let geo = Geometry {
        v,
        d,
        scale: config.logit_scale,
        column: perm[..v].to_vec(),
        slack: perm[v..].to_vec(),
        max_gap,
        min_entropy: gap_entropy(max_gap, v),
        max_entropy: (v as f64).ln() - 1e-3,
    };
    let head = ModelHead {
        model_id: format!("synthetic-seed{}", config.seed),
        num_layers: l,
        num_heads: heads,
        hidden_dim: d,
        vocab_size: v,
        lens: Some(LensParams {
            projection,
            norm_gain: vec![1.0; d],
            norm_bias: vec![0.0; d],
            norm_epsilon: NORM_EPS,
        }),
    };

    let n = config.n_samples;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_hallu = vec![false; n];
    for &i in &order[..config.positives()] {
        is_hallu[i] = true;
    }

    let (n_img, n_txt) = (config.image_tokens, config.text_tokens);
    let t = n_img + n_txt;
    let ln_v = (v as f64).ln();
    let mut labels = Labels::new();
    let mut samples = Vec::with_capacity(n);
    for (i, &hallu) in is_hallu.iter().enumerate() {
        let profile = if hallu { &config.hallu_profile } else { &config.real_profile };
        let z_u = profile.unique.draw(&mut rng);
        let z_h = profile.entropy.draw(&mut rng);
        let z_a = profile.attention.draw(&mut rng);
        let u = (1 + (sigmoid(z_u) * l as f64).floor() as usize).clamp(1, l);

        let final_token = rng.random_range(0..v);
        let others = index::sample(&mut rng, v - 1, u - 1);
        let mut tokens: Vec<usize> = others
            .iter()
            .map(|k| if k >= final_token { k + 1 } else { k })
            .collect();
        tokens.resize(l, final_token);

        let mut layers = Vec::with_capacity(l);
        for (depth, &token) in tokens.iter().enumerate() {
            let w = 1.0 - config.depth_ramp + config.depth_ramp * (depth + 1) as f64 / l as f64;
            let e_h: f64 = rng.sample(StandardNormal);
            let e_a: f64 = rng.sample(StandardNormal);
            let entropy = (ln_v * sigmoid(w * z_h + config.noise * e_h)).clamp(geo.min_entropy, geo.max_entropy);
            let gap = gap_for_entropy(entropy, geo.v, geo.max_gap);
            let a = sigmoid(z_a + config.noise * e_a);
            let attention_rows = (0..heads)
                .map(|h| {
                    let a_h = a * (1.0 - h as f64 / (2 * heads) as f64);
                    let mut row = vec![(a_h / n_img as f64) as f32; n_img];
                    row.extend(std::iter::repeat_n(((1.0 - a_h) / n_txt as f64) as f32, n_txt));
                    row
                })
                .collect();
            layers.push(RawLayer {
                hidden_state: geo.hidden_state(token, gap),
                attention_rows,
            });
        }

        let sample_id = format!("synth-{i:06}");
        labels.insert(sample_id.clone(), hallu);
        samples.push(SampleTrace {
            sample_id,
            prefix_token_ids: (0..t).map(|p| (p % v) as u32).collect(),
            target_position: t,
            image_indices: (0..n_img as u32).collect(),
            text_indices: (n_img as u32..t as u32).collect(),
            layers: Layers::Raw(layers),
            final_token_id: final_token as u32,
            final_token_string: format!("tok{final_token}"),
        });
    }
    Ok((head, samples, labels))
}

/// Closed-form Bayes-optimal AUC when it exists: noise 0, identical
/// unique-token profiles, and equal per-component spreads across classes.
/// Entropy and attention latents are then recoverable exactly and the
/// optimal score is linear in them, giving `Phi(sqrt(sum (dmu/sigma)^2) / sqrt 2)`.
pub fn bayes_optimal_auc(config: &SynthConfig) -> Option<f64> {
    let (a, b) = (&config.real_profile, &config.hallu_profile);
    if config.noise != 0.0 || a.unique != b.unique {
        return None;
    }
    let mut sq = 0.0;
    for (x, y) in [(a.entropy, b.entropy), (a.attention, b.attention)] {
        if x.std != y.std {
            return None;
        }
        let delta = y.mean - x.mean;
        if delta == 0.0 {
            continue;
        }
        if x.std == 0.0 {
            return Some(1.0);
        }
        sq += (delta / x.std).powi(2);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Some(normal.cdf(sq.sqrt() / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::logitlens::{project_to_vocab, top1_token};

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn gap_entropy_limits() {
        assert!((gap_entropy(0.0, 10) - 10f64.ln()).abs() < 1e-12);
        assert!(gap_entropy(60.0, 10) < 1e-20);
        let g = gap_for_entropy(1.3, 10, 50.0);
        assert!((gap_entropy(g, 10) - 1.3).abs() < 1e-10);
    }

    #[test]
    fn lens_reproduces_planted_structure() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small()
        };
        let (head, samples, labels) = generate_synthetic(&cfg).unwrap();
        assert_eq!(labels.len(), 40);
        for s in &samples {
            s.validate(&head).unwrap();
            let Layers::Raw(raw) = &s.layers else { unreachable!() };
            let last = raw.last().unwrap();
            let dist = project_to_vocab(&last.hidden_state, &head, cfg.num_layers).unwrap();
            assert_eq!(top1_token(&dist), s.final_token_id);
            let fv = extract_features(s, Some(&head)).unwrap();
            // With noise 0 entropies follow the depth weights monotonically in z_H.
            assert!(fv.entropies.iter().all(|&h| h > 0.0 && h < (cfg.vocab_size as f64).ln()));
            let mut distinct = fv.top1_tokens.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let first_final = fv.top1_tokens.iter().position(|&t| t == s.final_token_id).unwrap();
            assert_eq!(distinct.len(), first_final + 1);
            assert!(fv.top1_tokens[first_final..].iter().all(|&t| t == s.final_token_id));
        }
    }

    #[test]
    fn planted_entropy_is_recovered() {
        let cfg = SynthConfig {
            noise: 0.0,
            depth_ramp: 0.0,
            ..small()
        };
        let (head, samples, _) = generate_synthetic(&cfg).unwrap();
        for s in &samples {
            let fv = extract_features(s, Some(&head)).unwrap();
            // Equal depth weights and no noise: every layer has one entropy.
            for h in &fv.entropies {
                assert!((h - fv.entropies[0]).abs() < 1e-4, "{:?}", fv.entropies);
            }
        }
    }

    #[test]
    fn exact_positive_count_and_determinism() {
        let cfg = SynthConfig {
            n_samples: 1000,
            hallucination_rate: 0.5,
            num_layers: 2,
            ..SynthConfig::default()
        };
        let (h1, s1, l1) = generate_synthetic(&cfg).unwrap();
        assert_eq!(l1.iter().filter(|(_, b)| *b).count(), 500);
        let (h2, s2, l2) = generate_synthetic(&cfg).unwrap();
        assert_eq!((h1, s1, l1), (h2, s2, l2));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig {
                hallucination_rate: 1.0,
                ..small()
            },
            SynthConfig {
                hidden_dim: 33,
                ..small()
            },
            SynthConfig {
                vocab_size: 4,
                ..small()
            },
            SynthConfig {
                noise: -1.0,
                ..small()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(SynthError::Invalid(_))));
        }
        let mut cfg = small();
        cfg.hallu_profile.entropy.std = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bayes_auc_closed_form() {
        let p = ClassProfile {
            unique: LogitNormal::new(0.0, 1.0),
            entropy: LogitNormal::new(0.0, 1.0),
            attention: LogitNormal::new(0.0, 1.0),
        };
        let mut q = p;
        q.entropy.mean = 2f64.sqrt();
        let cfg = SynthConfig {
            real_profile: p,
            hallu_profile: q,
            noise: 0.0,
            ..small()
        };
        // Phi(1) for a unit-variance separation of sqrt 2.
        assert!((bayes_optimal_auc(&cfg).unwrap() - 0.841_344_746_068_542_9).abs() < 1e-9);
        assert_eq!(bayes_optimal_auc(&SynthConfig { noise: 0.1, ..cfg.clone() }), None);
    }
}
