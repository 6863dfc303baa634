//! Factorized causal-transformer world model: a causal encoder turns a
//! history into per-position embeddings z_i, and a lightweight MLP head on
//! [z_i; candidate] predicts four-signal feedback for any candidate song.
//! Trained with a masked composite loss (MSE on continuous signals, BCE on
//! the rating) under a user-disjoint MCCV protocol with per-signal
//! validation checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{Catalogue, LoggedDataset};
use crate::encoder::{
    strip_bos, token_input_dim, token_input_matrix, truncate_to_context, BoundEncoder,
    EncoderConfig, EncoderParams, InputAblation, TrainContext,
};
use crate::history::{build_sequence, sample_windows, Token, TokenKind, TokenSequence};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{adam_step, AdamConfig, AdamState, Checkpoint, NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum WorldModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    History(#[from] crate::history::HistoryError),
    #[error("invalid world-model config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("split has no usable {0} users")]
    EmptySplit(&'static str),
    #[error("history of {len} tokens exceeds max context {max}; truncate to the most recent tokens first")]
    ContextOverflow { len: usize, max: usize },
}

// ── signals ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Signal {
    Engagement,
    Rating,
    Valence,
    Arousal,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::Engagement, Signal::Rating, Signal::Valence, Signal::Arousal];

    pub fn index(self) -> usize {
        match self {
            Signal::Engagement => 0,
            Signal::Rating => 1,
            Signal::Valence => 2,
            Signal::Arousal => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Signal::Engagement => "engagement",
            Signal::Rating => "rating",
            Signal::Valence => "valence",
            Signal::Arousal => "arousal",
        }
    }
}

/// Four-signal prediction, each through a sigmoid and therefore in [0,1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackPrediction {
    pub engagement: f64,
    pub rating: f64,
    pub valence: f64,
    pub arousal: f64,
}

impl FeedbackPrediction {
    pub fn as_array(&self) -> [f64; 4] {
        [self.engagement, self.rating, self.valence, self.arousal]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        FeedbackPrediction { engagement: a[0], rating: a[1], valence: a[2], arousal: a[3] }
    }

    pub fn get(&self, signal: Signal) -> f64 {
        self.as_array()[signal.index()]
    }
}

// ── configuration ───────────────────────────────────────────────────

/// Leave-one-feature-out switches. Zeroing an input component also zeroes
/// its presence mask; targets are never ablated.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Predict from the BOS embedding alone (no history context).
    pub drop_history: bool,
    /// Zero the four feedback values and their masks in history tokens.
    pub drop_feedback: bool,
    /// Zero song embeddings in history tokens (candidate still shown).
    pub drop_history_songs: bool,
    /// Zero the candidate embedding into the prediction head.
    pub drop_candidate_song: bool,
    /// Hard-truncate each prediction's context to the last k tokens.
    pub max_lookback: Option<usize>,
}

impl AblationSpec {
    pub fn none() -> Self {
        AblationSpec::default()
    }

    pub fn effective_lookback(&self) -> Option<usize> {
        if self.drop_history {
            Some(0)
        } else {
            self.max_lookback
        }
    }

    pub fn input_ablation(&self) -> InputAblation {
        InputAblation {
            zero_feedback: self.drop_feedback,
            zero_song_embeddings: self.drop_history_songs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden_dim: usize,
    pub use_rotary_pe: bool,
    pub max_context: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Song-embedding dimension this model consumes.
    pub embed_dim: usize,
    pub windows_per_user: usize,
    pub window_len_range: (usize, usize),
    pub ablation: AblationSpec,
}

impl WorldModelConfig {
    /// Desk-scale defaults: small enough for finite-difference audits on a
    /// reduced copy, large enough to beat the mean predictor on synthetic
    /// data.
    pub fn desk_default(embed_dim: usize) -> Self {
        WorldModelConfig {
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            mlp_hidden_dim: 128,
            use_rotary_pe: false,
            max_context: 2048,
            dropout: 0.0,
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            embed_dim,
            windows_per_user: 5,
            window_len_range: (50, 1000),
            ablation: AblationSpec::none(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            model_dim: self.model_dim,
            mlp_hidden_dim: self.mlp_hidden_dim,
            use_rotary_pe: self.use_rotary_pe,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), WorldModelError> {
        self.encoder_config().validate()?;
        if self.window_len_range.0 == 0 || self.window_len_range.0 > self.window_len_range.1 {
            return Err(WorldModelError::InvalidConfig("empty window length range".into()));
        }
        if self.max_context < self.window_len_range.1.min(64) {
            return Err(WorldModelError::InvalidConfig(format!(
                "max_context {} shorter than usable training windows",
                self.max_context
            )));
        }
        Ok(())
    }
}

// ── parameters ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelParams {
    pub encoder: EncoderParams,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

impl WorldModelParams {
    pub fn init(cfg: &WorldModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = EncoderParams::init(&cfg.encoder_config(), token_input_dim(cfg.embed_dim), rng);
        let head_in = cfg.model_dim + cfg.embed_dim;
        WorldModelParams {
            encoder,
            head_w1: Tensor::randn(&[head_in, cfg.mlp_hidden_dim], 1.0 / (head_in as f64).sqrt(), rng),
            head_b1: Tensor::zeros(&[cfg.mlp_hidden_dim]),
            head_w2: Tensor::randn(&[cfg.mlp_hidden_dim, 4], 1.0 / (cfg.mlp_hidden_dim as f64).sqrt(), rng),
            head_b2: Tensor::zeros(&[4]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder.", &mut out);
        out.push(("head.w1".into(), &self.head_w1));
        out.push(("head.b1".into(), &self.head_b1));
        out.push(("head.w2".into(), &self.head_w2));
        out.push(("head.b2".into(), &self.head_b2));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit_mut("encoder.", &mut out);
        out.push(("head.w1".into(), &mut self.head_w1));
        out.push(("head.b1".into(), &mut self.head_b1));
        out.push(("head.w2".into(), &mut self.head_w2));
        out.push(("head.b2".into(), &mut self.head_b2));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn config_to_meta(ckpt: &mut Checkpoint, cfg: &WorldModelConfig) {
    ckpt.set_meta("kind", "worldmodel");
    ckpt.set_meta("n_layers", cfg.n_layers);
    ckpt.set_meta("n_heads", cfg.n_heads);
    ckpt.set_meta("model_dim", cfg.model_dim);
    ckpt.set_meta("mlp_hidden_dim", cfg.mlp_hidden_dim);
    ckpt.set_meta("use_rotary_pe", cfg.use_rotary_pe);
    ckpt.set_meta("max_context", cfg.max_context);
    ckpt.set_meta("embed_dim", cfg.embed_dim);
    ckpt.set_meta("ablation.drop_history", cfg.ablation.drop_history);
    ckpt.set_meta("ablation.drop_feedback", cfg.ablation.drop_feedback);
    ckpt.set_meta("ablation.drop_history_songs", cfg.ablation.drop_history_songs);
    ckpt.set_meta("ablation.drop_candidate_song", cfg.ablation.drop_candidate_song);
    ckpt.set_meta(
        "ablation.max_lookback",
        cfg.ablation.max_lookback.map_or("none".to_string(), |k| k.to_string()),
    );
}

fn config_from_meta(ckpt: &Checkpoint) -> Result<WorldModelConfig, NumericsError> {
    let lookback_raw: String = ckpt.meta_parsed("ablation.max_lookback")?;
    let max_lookback = if lookback_raw == "none" {
        None
    } else {
        Some(lookback_raw.parse().map_err(|_| {
            NumericsError::Checkpoint(format!("bad ablation.max_lookback '{lookback_raw}'"))
        })?)
    };
    let mut cfg = WorldModelConfig::desk_default(ckpt.meta_parsed("embed_dim")?);
    cfg.n_layers = ckpt.meta_parsed("n_layers")?;
    cfg.n_heads = ckpt.meta_parsed("n_heads")?;
    cfg.model_dim = ckpt.meta_parsed("model_dim")?;
    cfg.mlp_hidden_dim = ckpt.meta_parsed("mlp_hidden_dim")?;
    cfg.use_rotary_pe = ckpt.meta_parsed("use_rotary_pe")?;
    cfg.max_context = ckpt.meta_parsed("max_context")?;
    cfg.ablation = AblationSpec {
        drop_history: ckpt.meta_parsed("ablation.drop_history")?,
        drop_feedback: ckpt.meta_parsed("ablation.drop_feedback")?,
        drop_history_songs: ckpt.meta_parsed("ablation.drop_history_songs")?,
        drop_candidate_song: ckpt.meta_parsed("ablation.drop_candidate_song")?,
        max_lookback,
    };
    Ok(cfg)
}

/// Architecture metadata travels with the tensors, so a checkpoint is
/// self-describing (training-only fields come back as desk defaults).
pub fn save_world_model(params: &WorldModelParams, cfg: &WorldModelConfig, path: &Path) -> Result<(), WorldModelError> {
    let mut ckpt = Checkpoint::new();
    config_to_meta(&mut ckpt, cfg);
    for (name, t) in params.named_tensors() {
        ckpt.add_tensor(&name, t.clone());
    }
    ckpt.save(path)?;
    Ok(())
}

pub fn load_world_model(path: &Path) -> Result<(WorldModelParams, WorldModelConfig), WorldModelError> {
    let mut ckpt = Checkpoint::load(path)?;
    if ckpt.meta("kind") != Some("worldmodel") {
        return Err(WorldModelError::InvalidConfig(format!(
            "{} is not a world-model checkpoint",
            path.display()
        )));
    }
    let cfg = config_from_meta(&ckpt)?;
    let mut rng = seeded(0);
    let mut params = WorldModelParams::init(&cfg, &mut rng);
    for (name, slot) in params.named_tensors_mut() {
        let loaded = ckpt.take_tensor(&name)?;
        if loaded.shape() != slot.shape() {
            return Err(WorldModelError::InvalidConfig(format!(
                "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                name,
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    Ok((params, cfg))
}

// ── forward passes ──────────────────────────────────────────────────

pub struct BoundWorldModel {
    pub encoder: BoundEncoder,
    head_w1: Var,
    head_b1: Var,
    head_w2: Var,
    head_b2: Var,
}

impl BoundWorldModel {
    pub fn bind(params: &WorldModelParams, cfg: &WorldModelConfig, tape: &mut Tape, trainable: bool) -> Self {
        let encoder = BoundEncoder::bind(&params.encoder, &cfg.encoder_config(), tape, trainable);
        let mut insert = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BoundWorldModel {
            encoder,
            head_w1: insert(&params.head_w1),
            head_b1: insert(&params.head_b1),
            head_w2: insert(&params.head_w2),
            head_b2: insert(&params.head_b2),
        }
    }

    pub fn grads(&self, tape: &Tape, out: &mut Vec<Tensor>) {
        self.encoder.grads(tape, out);
        for v in [self.head_w1, self.head_b1, self.head_w2, self.head_b2] {
            out.push(tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())));
        }
    }

    /// Sigmoid head over [z rows ; candidate rows] -> [N, 4].
    pub fn head(&self, tape: &mut Tape, z_rows: Var, candidates: &Tensor) -> Result<Var, NumericsError> {
        let cand = tape.constant(candidates.clone());
        let joined = tape.concat_lastdim(z_rows, cand)?;
        let hidden = tape.matmul(joined, self.head_w1)?;
        let hidden = tape.add_bias(hidden, self.head_b1)?;
        let hidden = tape.tanh(hidden);
        let logits = tape.matmul(hidden, self.head_w2)?;
        let logits = tape.add_bias(logits, self.head_b2)?;
        Ok(tape.sigmoid(logits))
    }
}

/// One supervised position inside a window: predict the feedback observed
/// on stripped-token `token_idx` from the history before it plus that
/// token's song as candidate.
#[derive(Clone, Debug)]
pub struct PredictionTask {
    pub token_idx: usize,
    pub candidate: Vec<f64>,
    pub targets: [f64; 4],
    pub target_mask: [bool; 4],
}

/// Supervised positions of a (BOS-stripped) token slice.
pub fn prediction_tasks(tokens: &[Token]) -> Vec<PredictionTask> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::Song && t.has_any_target())
        .map(|(idx, t)| PredictionTask {
            token_idx: idx,
            candidate: t.song_embedding.clone().expect("song token without embedding"),
            targets: [t.engagement, t.rating, t.valence, t.arousal],
            target_mask: [t.target_engagement, t.target_rating, t.target_valence, t.target_arousal],
        })
        .collect()
}

fn candidate_matrix(tasks: &[PredictionTask], embed_dim: usize, drop_candidate: bool) -> Tensor {
    let mut data = vec![0.0; tasks.len() * embed_dim];
    if !drop_candidate {
        for (i, task) in tasks.iter().enumerate() {
            data[i * embed_dim..(i + 1) * embed_dim].copy_from_slice(&task.candidate);
        }
    }
    Tensor::new(vec![tasks.len(), embed_dim], data).unwrap()
}

/// Build [N, 4] predictions for the tasks of one token slice, honoring the
/// ablation spec (input zeroing and context truncation).
pub fn task_predictions(
    model: &BoundWorldModel,
    cfg: &WorldModelConfig,
    tape: &mut Tape,
    tokens: &[Token],
    tasks: &[PredictionTask],
    mut train: Option<&mut TrainContext>,
) -> Result<Var, WorldModelError> {
    if tokens.len() > cfg.max_context {
        return Err(WorldModelError::ContextOverflow { len: tokens.len(), max: cfg.max_context });
    }
    let ablation = cfg.ablation.input_ablation();
    let z_rows = match cfg.ablation.effective_lookback() {
        None => {
            let input = token_input_matrix(tokens, cfg.embed_dim, ablation);
            let z = model.encoder.forward(tape, &input, train.as_deref_mut())?;
            // Context row for token_idx is z[token_idx]: BOS occupies row 0
            // and token i sits at row i+1, so row token_idx encodes the
            // history strictly before it.
            let rows: Vec<usize> = tasks.iter().map(|t| t.token_idx).collect();
            tape.select_rows(z, &rows)?
        }
        Some(lookback) => {
            let mut collected: Option<Var> = None;
            for task in tasks {
                let start = task.token_idx.saturating_sub(lookback);
                let context = &tokens[start..task.token_idx];
                let input = token_input_matrix(context, cfg.embed_dim, ablation);
                let z = model.encoder.forward(tape, &input, train.as_deref_mut())?;
                let last = tape.value(z).rows() - 1;
                let row = tape.select_rows(z, &[last])?;
                collected = Some(match collected {
                    None => row,
                    Some(acc) => tape.concat_rows(acc, row)?,
                });
            }
            collected.expect("tasks nonempty")
        }
    };
    let cands = candidate_matrix(tasks, cfg.embed_dim, cfg.ablation.drop_candidate_song);
    Ok(model.head(tape, z_rows, &cands)?)
}

// ── composite loss ──────────────────────────────────────────────────

const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SignalLoss {
    pub observed: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub per_signal: [SignalLoss; 4],
    /// Set when no signal had a single observed target.
    pub no_targets: bool,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.per_signal.iter().map(|s| s.value).sum()
    }
}

/// Mean-per-observed-target MSE on engagement/valence/arousal plus
/// mean-per-observed-target BCE on the rating. Positions without a given
/// target contribute zero to that term and exactly zero gradient.
pub fn composite_loss_on_tape(
    tape: &mut Tape,
    predictions: Var,
    tasks: &[PredictionTask],
) -> Result<(Var, LossBreakdown), WorldModelError> {
    let n = tasks.len();
    if tape.value(predictions).shape() != [n, 4] {
        return Err(NumericsError::ShapeMismatch {
            op: "composite_loss",
            lhs: tape.value(predictions).shape().to_vec(),
            rhs: vec![n, 4],
        }
        .into());
    }
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for signal in Signal::ALL {
        let s = signal.index();
        let count = tasks.iter().filter(|t| t.target_mask[s]).count();
        breakdown.per_signal[s].observed = count;
        if count == 0 {
            continue;
        }
        let targets =
            Tensor::new(vec![n, 1], tasks.iter().map(|t| t.targets[s]).collect()).unwrap();
        let mask = Tensor::new(
            vec![n, 1],
            tasks.iter().map(|t| t.target_mask[s] as u8 as f64).collect(),
        )
        .unwrap();
        let pred_col = tape.slice_lastdim(predictions, s, 1)?;
        let target_col = tape.constant(targets.clone());
        let mask_col = tape.constant(mask);
        let per_position = match signal {
            Signal::Rating => {
                let clamped = tape.clamp(pred_col, BCE_EPS, 1.0 - BCE_EPS);
                let log_p = tape.log(clamped)?;
                let neg_p = tape.neg(clamped);
                let one_minus_p = tape.add_scalar(neg_p, 1.0);
                let log_q = tape.log(one_minus_p)?;
                let one_minus_y = Tensor::new(
                    vec![n, 1],
                    targets.data().iter().map(|y| 1.0 - y).collect(),
                )
                .unwrap();
                let y = target_col;
                let one_minus_y = tape.constant(one_minus_y);
                let pos = tape.mul(y, log_p)?;
                let neg = tape.mul(one_minus_y, log_q)?;
                let ll = tape.add(pos, neg)?;
                tape.neg(ll)
            }
            _ => {
                let diff = tape.sub(pred_col, target_col)?;
                tape.mul(diff, diff)?
            }
        };
        let masked = tape.mul(per_position, mask_col)?;
        let summed = tape.sum(masked);
        let mean = tape.mul_scalar(summed, 1.0 / count as f64);
        breakdown.per_signal[s].value = tape.value(mean).item();
        total = Some(match total {
            None => mean,
            Some(acc) => tape.add(acc, mean)?,
        });
    }
    let total = match total {
        Some(v) => v,
        None => {
            breakdown.no_targets = true;
            log::warn!("composite loss over positions with no observed targets; defined as 0");
            tape.constant(Tensor::scalar(0.0))
        }
    };
    Ok((total, breakdown))
}

/// Value-level composite loss over explicit predictions; convenience for
/// tests and validation sweeps.
pub fn composite_loss(predictions: &[[f64; 4]], tasks: &[PredictionTask]) -> Result<LossBreakdown, WorldModelError> {
    let mut tape = Tape::new();
    let flat: Vec<f64> = predictions.iter().flatten().copied().collect();
    let preds = tape.constant(Tensor::new(vec![predictions.len(), 4], flat).unwrap());
    let (_, breakdown) = composite_loss_on_tape(&mut tape, preds, tasks)?;
    Ok(breakdown)
}

// ── public inference ops ────────────────────────────────────────────

/// Per-position history embeddings; row 0 is the BOS-only embedding and
/// row i+1 encodes tokens[..=i]. Errors if the (stripped) history exceeds
/// max_context; callers truncate to the most recent tokens first.
pub fn encode_history(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    tokens: &[Token],
) -> Result<Tensor, WorldModelError> {
    let stripped = strip_bos(tokens);
    if stripped.len() > cfg.max_context {
        return Err(WorldModelError::ContextOverflow { len: stripped.len(), max: cfg.max_context });
    }
    let mut tape = Tape::new();
    let model = BoundWorldModel::bind(params, cfg, &mut tape, false);
    let input = token_input_matrix(stripped, cfg.embed_dim, cfg.ablation.input_ablation());
    let z = model.encoder.forward(&mut tape, &input, None)?;
    Ok(tape.value(z).clone())
}

fn head_forward_row(params: &WorldModelParams, cfg: &WorldModelConfig, z_row: &[f64], candidate: &[f64]) -> FeedbackPrediction {
    let hidden_dim = cfg.mlp_hidden_dim;
    let d = z_row.len();
    let ed = candidate.len();
    let w1 = params.head_w1.data();
    let mut hidden = params.head_b1.data().to_vec();
    for (i, &x) in z_row.iter().enumerate() {
        let row = &w1[i * hidden_dim..(i + 1) * hidden_dim];
        for (h, &w) in hidden.iter_mut().zip(row) {
            *h += x * w;
        }
    }
    if !cfg.ablation.drop_candidate_song {
        for (i, &x) in candidate.iter().enumerate() {
            let row = &w1[(d + i) * hidden_dim..(d + i + 1) * hidden_dim];
            for (h, &w) in hidden.iter_mut().zip(row) {
                *h += x * w;
            }
        }
    }
    debug_assert_eq!(w1.len(), (d + ed) * hidden_dim);
    for h in hidden.iter_mut() {
        *h = h.tanh();
    }
    let w2 = params.head_w2.data();
    let mut logits = params.head_b2.data().to_vec();
    for (i, &h) in hidden.iter().enumerate() {
        let row = &w2[i * 4..(i + 1) * 4];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += h * w;
        }
    }
    let squash = |x: f64| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    FeedbackPrediction {
        engagement: squash(logits[0]),
        rating: squash(logits[1]),
        valence: squash(logits[2]),
        arousal: squash(logits[3]),
    }
}

/// Predicted feedback for one candidate given a history embedding row.
pub fn predict_feedback(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    z_row: &[f64],
    candidate: &[f64],
) -> FeedbackPrediction {
    head_forward_row(params, cfg, z_row, candidate)
}

/// Predicted feedback for every catalogue song from one encoder pass;
/// elementwise identical to per-song `predict_feedback`.
pub fn score_catalogue(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    z_row: &[f64],
    catalogue: &Catalogue,
) -> Vec<FeedbackPrediction> {
    (0..catalogue.n_songs())
        .map(|song| head_forward_row(params, cfg, z_row, catalogue.embedding(song)))
        .collect()
}

/// Last-row history embedding for the most recent max_context tokens.
pub fn encode_last(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    tokens: &[Token],
) -> Result<Vec<f64>, WorldModelError> {
    let stripped = strip_bos(tokens);
    let truncated = truncate_to_context(stripped, cfg.max_context);
    let z = encode_history(params, cfg, truncated)?;
    Ok(z.row(z.rows() - 1).to_vec())
}

// ── MCCV split plan ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub master_seed: u64,
    pub splits: Vec<Split>,
}

/// Random 80/10/10 partitions of the user ids, split by user and never by
/// interaction. The same plan is reused for every model variant compared.
pub fn make_split_plan(user_ids: &[usize], n_splits: usize, master_seed: u64) -> SplitPlan {
    assert!(user_ids.len() >= 3, "need at least 3 users to split");
    let splits = (0..n_splits)
        .map(|k| {
            let mut rng = seeded(derive_seed(master_seed, &format!("split/{k}")));
            let mut ids = user_ids.to_vec();
            ids.shuffle(&mut rng);
            let n = ids.len();
            let n_val = (n / 10).max(1);
            let n_test = (n / 10).max(1);
            let test = ids.split_off(n - n_test);
            let val = ids.split_off(n - n_test - n_val);
            Split { train: ids, val, test }
        })
        .collect();
    SplitPlan { master_seed, splits }
}

impl Split {
    pub fn validate_disjoint(&self) -> Result<(), WorldModelError> {
        let train: BTreeSet<_> = self.train.iter().collect();
        let val: BTreeSet<_> = self.val.iter().collect();
        let test: BTreeSet<_> = self.test.iter().collect();
        if train.intersection(&val).next().is_some()
            || train.intersection(&test).next().is_some()
            || val.intersection(&test).next().is_some()
        {
            return Err(WorldModelError::InvalidConfig("split user sets overlap".into()));
        }
        Ok(())
    }
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean per-signal validation losses (None when a signal had no
    /// observed validation targets).
    pub val_losses: [Option<f64>; 4],
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub params: WorldModelParams,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedWorldModel {
    pub config: WorldModelConfig,
    pub final_params: WorldModelParams,
    /// Best validation checkpoint per signal, earliest epoch on ties.
    pub best: [BestCheckpoint; 4],
    pub epochs: Vec<EpochStats>,
    /// Every user id that contributed a gradient; the strong-generalization
    /// protocol demands this stays inside the train split.
    pub trained_user_ids: BTreeSet<usize>,
}

pub fn build_sequences(
    dataset: &LoggedDataset,
    catalogue: &Catalogue,
    users: &[usize],
) -> Result<BTreeMap<usize, TokenSequence>, WorldModelError> {
    let mut out = BTreeMap::new();
    for &user_id in users {
        let log = dataset
            .user(user_id)
            .ok_or_else(|| WorldModelError::InvalidConfig(format!("user {user_id} missing from dataset")))?;
        out.insert(user_id, build_sequence(log, catalogue)?);
    }
    Ok(out)
}

fn adam_apply(
    params: &mut WorldModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), WorldModelError> {
    let mut slots: Vec<&mut Tensor> = params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam_step(&mut slots, &grad_refs, state, cfg)?;
    Ok(())
}

/// Mean per-signal loss of `params` over the full histories of `users`.
pub fn dataset_signal_losses(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    sequences: &BTreeMap<usize, TokenSequence>,
    users: &[usize],
) -> Result<[Option<f64>; 4], WorldModelError> {
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for user in users {
        let seq = &sequences[user];
        let stripped = strip_bos(&seq.tokens);
        let tokens = truncate_to_context(stripped, cfg.max_context);
        let tasks = prediction_tasks(tokens);
        if tasks.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let model = BoundWorldModel::bind(params, cfg, &mut tape, false);
        let preds = task_predictions(&model, cfg, &mut tape, tokens, &tasks, None)?;
        let (_, breakdown) = composite_loss_on_tape(&mut tape, preds, &tasks)?;
        for s in 0..4 {
            let sl = breakdown.per_signal[s];
            if sl.observed > 0 {
                sums[s] += sl.value * sl.observed as f64;
                counts[s] += sl.observed;
            }
        }
    }
    Ok(std::array::from_fn(|s| (counts[s] > 0).then(|| sums[s] / counts[s] as f64)))
}

/// Train on train-user windows only, re-sampling windows_per_user windows
/// each epoch; track per-signal validation loss on full val histories and
/// keep the best checkpoint per signal.
pub fn train_world_model(
    dataset: &LoggedDataset,
    catalogue: &Catalogue,
    cfg: &WorldModelConfig,
    split: &Split,
) -> Result<TrainedWorldModel, WorldModelError> {
    cfg.validate()?;
    split.validate_disjoint()?;
    if split.train.is_empty() {
        return Err(WorldModelError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(WorldModelError::EmptySplit("validation"));
    }

    let train_seqs = build_sequences(dataset, catalogue, &split.train)?;
    let val_seqs = build_sequences(dataset, catalogue, &split.val)?;

    let mut rng = seeded(derive_seed(cfg.seed, "train-world-model"));
    let mut params = WorldModelParams::init(cfg, &mut rng);
    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut adam_state = {
        let named = params.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };

    let mut best: [Option<BestCheckpoint>; 4] = [None, None, None, None];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut trained_user_ids = BTreeSet::new();

    for epoch in 0..cfg.epochs {
        // Fresh windows per user each epoch.
        let mut windows = Vec::new();
        for (&user_id, seq) in &train_seqs {
            for w in sample_windows(seq, cfg.windows_per_user, cfg.window_len_range, &mut rng) {
                windows.push((user_id, w));
            }
        }
        windows.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_examples = 0usize;
        for chunk in windows.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for (user_id, window) in chunk {
                let seq = &train_seqs[user_id];
                let tokens = strip_bos(window.slice(seq));
                let tasks = prediction_tasks(tokens);
                if tasks.is_empty() {
                    continue;
                }
                let mut tape = Tape::new();
                let model = BoundWorldModel::bind(&params, cfg, &mut tape, true);
                let mut ctx = TrainContext { rng: &mut rng };
                let preds =
                    task_predictions(&model, cfg, &mut tape, tokens, &tasks, Some(&mut ctx))?;
                let (loss, breakdown) = composite_loss_on_tape(&mut tape, preds, &tasks)?;
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(WorldModelError::Diverged { epoch, loss: loss_value });
                }
                epoch_loss += breakdown.total();
                epoch_examples += 1;
                trained_user_ids.insert(*user_id);
                tape.backward(loss)?;
                let mut grads = Vec::new();
                model.grads(&tape, &mut grads);
                match &mut grad_acc {
                    None => grad_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
                used += 1;
            }
            if let Some(mut grads) = grad_acc {
                let scale = 1.0 / used as f64;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
                adam_apply(&mut params, &grads, &mut adam_state, &adam_cfg)?;
            }
        }

        let train_loss = if epoch_examples > 0 { epoch_loss / epoch_examples as f64 } else { 0.0 };
        if !train_loss.is_finite() {
            return Err(WorldModelError::Diverged { epoch, loss: train_loss });
        }
        let val_losses = dataset_signal_losses(&params, cfg, &val_seqs, &split.val)?;
        for s in 0..4 {
            if let Some(v) = val_losses[s] {
                let improves = match &best[s] {
                    None => true,
                    Some(b) => v < b.val_loss,
                };
                if improves {
                    best[s] = Some(BestCheckpoint { params: params.clone(), epoch, val_loss: v });
                }
            }
        }
        epochs.push(EpochStats { epoch, train_loss, val_losses });
    }

    // A signal with no validation targets anywhere falls back to the final
    // parameters.
    let best = best.map(|b| {
        b.unwrap_or_else(|| BestCheckpoint {
            params: params.clone(),
            epoch: cfg.epochs.saturating_sub(1),
            val_loss: f64::NAN,
        })
    });

    Ok(TrainedWorldModel { config: *cfg, final_params: params, best, epochs, trained_user_ids })
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct SignalEval {
    pub observed: usize,
    pub mse: Option<f64>,
    pub r2: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct WorldModelEvaluation {
    pub per_signal: [SignalEval; 4],
}

/// (prediction, target) pairs for one signal over users' full histories
/// under the given parameters.
pub fn collect_signal_predictions(
    params: &WorldModelParams,
    cfg: &WorldModelConfig,
    sequences: &BTreeMap<usize, TokenSequence>,
    users: &[usize],
    signal: Signal,
) -> Result<Vec<(f64, f64)>, WorldModelError> {
    let s = signal.index();
    let mut pairs = Vec::new();
    for user in users {
        let seq = &sequences[user];
        let stripped = strip_bos(&seq.tokens);
        let tokens = truncate_to_context(stripped, cfg.max_context);
        let tasks: Vec<PredictionTask> =
            prediction_tasks(tokens).into_iter().filter(|t| t.target_mask[s]).collect();
        if tasks.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let model = BoundWorldModel::bind(params, cfg, &mut tape, false);
        let preds = task_predictions(&model, cfg, &mut tape, tokens, &tasks, None)?;
        let values = tape.value(preds);
        for (i, task) in tasks.iter().enumerate() {
            pairs.push((values.row(i)[s], task.targets[s]));
        }
    }
    Ok(pairs)
}

/// Per-signal metrics on strictly unseen test users, each signal scored by
/// its own best checkpoint. R-squared baselines come from the train split.
pub fn evaluate_world_model(
    trained: &TrainedWorldModel,
    dataset: &LoggedDataset,
    catalogue: &Catalogue,
    split: &Split,
) -> Result<WorldModelEvaluation, WorldModelError> {
    split.validate_disjoint()?;
    let cfg = &trained.config;
    let test_seqs = build_sequences(dataset, catalogue, &split.test)?;

    // Train-split target means anchor R-squared; never the test split.
    let train_seqs = build_sequences(dataset, catalogue, &split.train)?;
    let mut baseline = [0.0f64; 4];
    let mut baseline_n = [0usize; 4];
    for seq in train_seqs.values() {
        for task in prediction_tasks(strip_bos(&seq.tokens)) {
            for s in 0..4 {
                if task.target_mask[s] {
                    baseline[s] += task.targets[s];
                    baseline_n[s] += 1;
                }
            }
        }
    }
    for s in 0..4 {
        if baseline_n[s] > 0 {
            baseline[s] /= baseline_n[s] as f64;
        }
    }

    let mut eval = WorldModelEvaluation::default();
    for signal in Signal::ALL {
        let s = signal.index();
        let pairs = collect_signal_predictions(
            &trained.best[s].params,
            cfg,
            &test_seqs,
            &split.test,
            signal,
        )?;
        let mut entry = SignalEval { observed: pairs.len(), ..SignalEval::default() };
        if !pairs.is_empty() {
            let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            match signal {
                Signal::Rating => {
                    let labels: Vec<bool> = targets.iter().map(|t| *t > 0.5).collect();
                    entry.auc = crate::eval::roc_auc(&preds, &labels);
                }
                _ => {
                    let mse = preds
                        .iter()
                        .zip(&targets)
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum::<f64>()
                        / preds.len() as f64;
                    entry.mse = Some(mse);
                    entry.r2 = crate::eval::r_squared(&preds, &targets, baseline[s]);
                }
            }
        }
        eval.per_signal[s] = entry;
    }
    Ok(eval)
}
