//! Simulated recommendation rollouts under the world model: the policy
//! picks a song, the world model imputes its feedback, a scalar utility is
//! derived, and the step is appended to the history as observed context.
//! Also the pre-deployment stress-testing harness with guardrail checks.
//!
//! Rollouts append the predicted rating as a probability rather than a
//! sampled binary, which keeps them deterministic, and never insert
//! session-boundary tokens (a rollout extends the current session).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Catalogue;
use crate::eval::{diversity_report, DiversityReport};
use crate::history::{append_step, Token, Window};
use crate::numerics::rng::{derive_seed, seeded};
use crate::policy::RecommendPolicy;
use crate::worldmodel::{
    encode_last, predict_feedback, FeedbackPrediction, WorldModelConfig, WorldModelError,
    WorldModelParams,
};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error("invalid utility weights: {0}")]
    InvalidWeights(String),
    #[error("invalid stress spec: {0}")]
    InvalidStressSpec(String),
}

// ── utility ─────────────────────────────────────────────────────────

/// Weights of the scalar utility over the four predicted signals, each in
/// [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityWeights {
    pub rating: f64,
    pub engagement: f64,
    pub valence: f64,
    pub arousal: f64,
}

impl Default for UtilityWeights {
    /// Affect-only weighting; engagement and rating are held out.
    fn default() -> Self {
        UtilityWeights { rating: 0.0, engagement: 0.0, valence: 0.5, arousal: 0.5 }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<(), RolloutError> {
        for (name, w) in [
            ("rating", self.rating),
            ("engagement", self.engagement),
            ("valence", self.valence),
            ("arousal", self.arousal),
        ] {
            if !(-1.0..=1.0).contains(&w) {
                return Err(RolloutError::InvalidWeights(format!("{} = {} outside [-1,1]", name, w)));
            }
        }
        Ok(())
    }

    /// Training additionally requires a non-degenerate objective.
    pub fn validate_for_training(&self) -> Result<(), RolloutError> {
        self.validate()?;
        if self.rating == 0.0 && self.engagement == 0.0 && self.valence == 0.0 && self.arousal == 0.0
        {
            return Err(RolloutError::InvalidWeights("all-zero weights cannot drive training".into()));
        }
        Ok(())
    }
}

/// R = lambda_r r + lambda_e e + lambda_v v + lambda_a a.
pub fn utility(pred: &FeedbackPrediction, w: &UtilityWeights) -> f64 {
    w.rating * pred.rating
        + w.engagement * pred.engagement
        + w.valence * pred.valence
        + w.arousal * pred.arousal
}

// ── rollouts ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub song_id: usize,
    pub prediction: FeedbackPrediction,
    pub utility: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub window: Window,
    pub steps: Vec<RolloutStep>,
}

impl Rollout {
    pub fn songs(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.song_id).collect()
    }

    /// Per-signal means (1/L) sum of predictions.
    pub fn signal_means(&self) -> [f64; 4] {
        let mut sums = [0.0; 4];
        for step in &self.steps {
            for (s, v) in sums.iter_mut().zip(step.prediction.as_array()) {
                *s += v;
            }
        }
        sums.map(|s| s / self.steps.len() as f64)
    }

    pub fn mean_utility(&self) -> f64 {
        self.steps.iter().map(|s| s.utility).sum::<f64>() / self.steps.len() as f64
    }
}

/// L iterations of {policy picks a song, world model predicts feedback,
/// utility derived, step appended}.
pub fn run_rollout(
    policy: &dyn RecommendPolicy,
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    seed_window: Window,
    seed_tokens: &[Token],
    catalogue: &Catalogue,
    length: usize,
    weights: &UtilityWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, RolloutError> {
    weights.validate()?;
    let mut history: Vec<Token> = seed_tokens.to_vec();
    let mut steps = Vec::with_capacity(length);
    for _ in 0..length {
        let song = policy.next_song(&history, catalogue, rng);
        let z = encode_last(wm_params, wm_cfg, &history)?;
        let prediction = predict_feedback(wm_params, wm_cfg, &z, catalogue.embedding(song));
        let step_utility = utility(&prediction, weights);
        append_step(&mut history, song, catalogue.embedding(song), &prediction);
        steps.push(RolloutStep { song_id: song, prediction, utility: step_utility });
    }
    debug_assert_eq!(history.len(), seed_tokens.len() + length);
    Ok(Rollout { window: seed_window, steps })
}

/// Aggregates over one seed's rollouts across all windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRolloutMetrics {
    pub seed: u64,
    pub mean_engagement: f64,
    pub mean_rating: f64,
    pub mean_valence: f64,
    pub mean_arousal: f64,
    pub mean_utility: f64,
    pub diversity: DiversityReport,
}

impl SeedRolloutMetrics {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "engagement" => Some(self.mean_engagement),
            "rating" => Some(self.mean_rating),
            "valence" => Some(self.mean_valence),
            "arousal" => Some(self.mean_arousal),
            "utility" => Some(self.mean_utility),
            "coverage" => Some(self.diversity.coverage),
            "normalized_entropy" => Some(self.diversity.normalized_entropy),
            "ild" => Some(self.diversity.ild),
            "gini" => Some(self.diversity.gini),
            _ => None,
        }
    }
}

pub const ROLLOUT_METRIC_NAMES: [&str; 9] = [
    "engagement",
    "rating",
    "valence",
    "arousal",
    "utility",
    "coverage",
    "normalized_entropy",
    "ild",
    "gini",
];

/// Rollouts over all windows for one seed; per-window RNG streams derive
/// from (seed, window index) so windows stay independent.
pub fn rollout_suite(
    policy: &dyn RecommendPolicy,
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    windows: &[(Window, Vec<Token>)],
    catalogue: &Catalogue,
    length: usize,
    weights: &UtilityWeights,
    seed: u64,
) -> Result<(Vec<Rollout>, SeedRolloutMetrics), RolloutError> {
    let mut rollouts = Vec::with_capacity(windows.len());
    for (idx, (window, tokens)) in windows.iter().enumerate() {
        let mut rng = seeded(derive_seed(seed, &format!("rollout/{idx}")));
        rollouts.push(run_rollout(
            policy, wm_params, wm_cfg, *window, tokens, catalogue, length, weights, &mut rng,
        )?);
    }
    let mut sums = [0.0; 4];
    let mut utility_sum = 0.0;
    let mut n = 0usize;
    for r in &rollouts {
        for step in &r.steps {
            for (s, v) in sums.iter_mut().zip(step.prediction.as_array()) {
                *s += v;
            }
            utility_sum += step.utility;
            n += 1;
        }
    }
    let songs: Vec<Vec<usize>> = rollouts.iter().map(|r| r.songs()).collect();
    let metrics = SeedRolloutMetrics {
        seed,
        mean_engagement: sums[0] / n as f64,
        mean_rating: sums[1] / n as f64,
        mean_valence: sums[2] / n as f64,
        mean_arousal: sums[3] / n as f64,
        mean_utility: utility_sum / n as f64,
        diversity: diversity_report(&songs, catalogue),
    };
    Ok((rollouts, metrics))
}

/// Cross-seed mean and SD per metric; `make_policy` receives each seed so
/// seed-specific trained parameters can be swapped in.
pub fn run_rollout_batch<'a, F>(
    mut make_policy: F,
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    windows: &[(Window, Vec<Token>)],
    catalogue: &Catalogue,
    length: usize,
    weights: &UtilityWeights,
    seeds: &[u64],
) -> Result<RolloutBatch, RolloutError>
where
    F: FnMut(u64) -> Box<dyn RecommendPolicy + 'a>,
{
    assert!(!windows.is_empty(), "need at least one seed window");
    assert!(!seeds.is_empty(), "need at least one seed");
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let policy = make_policy(seed);
        let (_, metrics) = rollout_suite(
            policy.as_ref(),
            wm_params,
            wm_cfg,
            windows,
            catalogue,
            length,
            weights,
            seed,
        )?;
        per_seed.push(metrics);
    }
    Ok(RolloutBatch { per_seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub per_seed: Vec<SeedRolloutMetrics>,
}

impl RolloutBatch {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_seed.iter().filter_map(|m| m.metric(metric)).collect()
    }

    pub fn mean_sd(&self, metric: &str) -> (f64, f64) {
        crate::eval::mean_sd(&self.values(metric))
    }
}

// ── stress testing ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Perturbation {
    /// Overwrite every boundary token's pre-session affect.
    ExtremePreAffect { valence: f64, arousal: f64 },
    /// Replace the seed window with an empty history.
    ColdStartEmptyHistory,
    /// Shuffle the window's tokens (seeded).
    ShuffledHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressSpec {
    pub name: String,
    pub perturbation: Perturbation,
    /// Guardrail: maximum tolerated per-step |delta arousal-hat|.
    pub max_step_arousal_delta: f64,
    /// Guardrail: minimum tolerated coverage over the stressed batch.
    pub coverage_floor: f64,
}

impl StressSpec {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.max_step_arousal_delta <= 0.0 || self.coverage_floor <= 0.0 {
            return Err(RolloutError::InvalidStressSpec(format!(
                "thresholds must be positive in spec '{}'",
                self.name
            )));
        }
        Ok(())
    }
}

/// Default pre-deployment battery. The cold-start spec keeps a token
/// coverage floor: a deterministic policy sees a single empty history, so
/// a batch-level coverage check cannot be meaningful there.
pub fn default_stress_specs() -> Vec<StressSpec> {
    vec![
        StressSpec {
            name: "extreme-pre-affect-low".into(),
            perturbation: Perturbation::ExtremePreAffect { valence: 0.05, arousal: 0.05 },
            max_step_arousal_delta: 0.25,
            coverage_floor: 0.01,
        },
        StressSpec {
            name: "extreme-pre-affect-high".into(),
            perturbation: Perturbation::ExtremePreAffect { valence: 0.95, arousal: 0.95 },
            max_step_arousal_delta: 0.25,
            coverage_floor: 0.01,
        },
        StressSpec {
            name: "cold-start-empty-history".into(),
            perturbation: Perturbation::ColdStartEmptyHistory,
            max_step_arousal_delta: 0.25,
            coverage_floor: 0.001,
        },
        StressSpec {
            name: "shuffled-history".into(),
            perturbation: Perturbation::ShuffledHistory,
            max_step_arousal_delta: 0.25,
            coverage_floor: 0.01,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StressOutcome {
    pub spec: StressSpec,
    pub observed_max_arousal_delta: f64,
    pub observed_coverage: f64,
    pub arousal_pass: bool,
    pub coverage_pass: bool,
}

impl StressOutcome {
    pub fn passed(&self) -> bool {
        self.arousal_pass && self.coverage_pass
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StressReport {
    pub policy: String,
    pub outcomes: Vec<StressOutcome>,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed())
    }

    /// Structured text with explicit PASS/FAIL lines per spec and check.
    pub fn render(&self) -> String {
        let mut out = format!("stress report policy={}\n", self.policy);
        for o in &self.outcomes {
            out.push_str(&format!(
                "spec={} check=max_step_arousal_delta threshold={:.3} observed={:.3} verdict={}\n",
                o.spec.name,
                o.spec.max_step_arousal_delta,
                o.observed_max_arousal_delta,
                if o.arousal_pass { "PASS" } else { "FAIL" }
            ));
            out.push_str(&format!(
                "spec={} check=coverage_floor threshold={:.4} observed={:.4} verdict={}\n",
                o.spec.name,
                o.spec.coverage_floor,
                o.observed_coverage,
                if o.coverage_pass { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("overall={}\n", if self.passed() { "PASS" } else { "FAIL" }));
        out
    }
}

fn apply_perturbation(
    perturbation: &Perturbation,
    windows: &[(Window, Vec<Token>)],
    seed: u64,
) -> Vec<(Window, Vec<Token>)> {
    use rand::seq::SliceRandom;
    match perturbation {
        Perturbation::ExtremePreAffect { valence, arousal } => windows
            .iter()
            .map(|(w, tokens)| {
                let tokens = tokens
                    .iter()
                    .map(|t| {
                        let mut t = t.clone();
                        if t.kind == crate::history::TokenKind::Boundary {
                            t.valence = *valence;
                            t.arousal = *arousal;
                            t.mask_valence = true;
                            t.mask_arousal = true;
                        }
                        t
                    })
                    .collect();
                (*w, tokens)
            })
            .collect(),
        Perturbation::ColdStartEmptyHistory => windows
            .iter()
            .map(|(w, _)| (Window { user_id: w.user_id, start: 0, len: 0 }, Vec::new()))
            .collect(),
        Perturbation::ShuffledHistory => windows
            .iter()
            .enumerate()
            .map(|(i, (w, tokens))| {
                let mut rng = seeded(derive_seed(seed, &format!("shuffle/{i}")));
                // Shuffle the events, not the BOS marker.
                let mut tokens = crate::encoder::strip_bos(tokens).to_vec();
                tokens.shuffle(&mut rng);
                (*w, tokens)
            })
            .collect(),
    }
}

/// Largest |arousal-hat step| along a rollout, including the jump from the
/// last observed arousal in the seed window when one exists.
fn max_arousal_delta(rollout: &Rollout, seed_tokens: &[Token]) -> f64 {
    let mut prev = seed_tokens.iter().rev().find(|t| t.mask_arousal).map(|t| t.arousal);
    let mut max_delta: f64 = 0.0;
    for step in &rollout.steps {
        if let Some(p) = prev {
            max_delta = max_delta.max((step.prediction.arousal - p).abs());
        }
        prev = Some(step.prediction.arousal);
    }
    max_delta
}

/// Run the perturbation battery and check the guardrails. Report-only: no
/// enforcement happens inside the policy.
pub fn stress_test(
    policy: &dyn RecommendPolicy,
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    specs: &[StressSpec],
    windows: &[(Window, Vec<Token>)],
    catalogue: &Catalogue,
    length: usize,
    weights: &UtilityWeights,
    seed: u64,
) -> Result<StressReport, RolloutError> {
    let mut outcomes = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let stressed = apply_perturbation(&spec.perturbation, windows, seed);
        let (rollouts, metrics) = rollout_suite(
            policy, wm_params, wm_cfg, &stressed, catalogue, length, weights, seed,
        )?;
        let observed_max = rollouts
            .iter()
            .zip(&stressed)
            .map(|(r, (_, tokens))| max_arousal_delta(r, tokens))
            .fold(0.0f64, f64::max);
        let outcome = StressOutcome {
            observed_max_arousal_delta: observed_max,
            observed_coverage: metrics.diversity.coverage,
            arousal_pass: observed_max <= spec.max_step_arousal_delta,
            coverage_pass: metrics.diversity.coverage >= spec.coverage_floor,
            spec: spec.clone(),
        };
        outcomes.push(outcome);
    }
    Ok(StressReport { policy: policy.name().to_string(), outcomes })
}
