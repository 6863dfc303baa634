//! Recommender policies: behaviour cloning with an InfoNCE contrastive
//! loss (Copycat), DPO fine-tuning on world-model-scored preference pairs,
//! and the Random/Greedy baselines. All four expose one next-song
//! interface so the rollout engine stays policy-agnostic.
//!
//! The cloned policy emits a point embedding; DPO needs likelihoods. The
//! policy distribution is defined as a softmax over cosine similarities to
//! the catalogue with temperature `match_temperature`. That construction is
//! this pipeline's biggest modelling choice and is used consistently for
//! DPO training and for any likelihood-based diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{Catalogue, LoggedDataset};
use crate::encoder::{
    strip_bos, token_input_dim, token_input_matrix, truncate_to_context, BoundEncoder,
    EncoderParams, InputAblation,
};
use crate::history::{sample_windows, Token, TokenKind, TokenSequence, Window};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{adam_step, AdamConfig, AdamState, Checkpoint, NumericsError, Tape, Tensor, Var};
use crate::rollout::UtilityWeights;
use crate::worldmodel::{
    encode_history, predict_feedback, score_catalogue, WorldModelConfig, WorldModelError,
    WorldModelParams,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    History(#[from] crate::history::HistoryError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no preference pairs to fine-tune on")]
    NoPairs,
}

// ── configuration & parameters ──────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyConfig {
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
    pub embed_dim: usize,
    /// InfoNCE temperature.
    pub infonce_temperature: f64,
    /// Unplayed-song negatives per training step.
    pub n_negatives: usize,
    /// Temperature of the cosine-softmax policy distribution.
    pub match_temperature: f64,
    pub windows_per_user: usize,
    pub window_len_range: (usize, usize),
}

impl PolicyConfig {
    pub fn desk_default(embed_dim: usize) -> Self {
        PolicyConfig {
            n_layers: 2,
            n_heads: 4,
            model_dim: 48,
            mlp_hidden_dim: 96,
            use_rotary_pe: false,
            max_context: 2048,
            dropout: 0.0,
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            embed_dim,
            infonce_temperature: 0.07,
            n_negatives: 63,
            match_temperature: 0.1,
            windows_per_user: 5,
            window_len_range: (10, 100),
        }
    }

    fn encoder_config(&self) -> crate::encoder::EncoderConfig {
        crate::encoder::EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            model_dim: self.model_dim,
            mlp_hidden_dim: self.mlp_hidden_dim,
            use_rotary_pe: self.use_rotary_pe,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.encoder_config().validate()?;
        if self.infonce_temperature <= 0.0 {
            return Err(PolicyError::BadTemperature(self.infonce_temperature));
        }
        if self.match_temperature <= 0.0 {
            return Err(PolicyError::BadTemperature(self.match_temperature));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub encoder: EncoderParams,
    pub out_proj_w: Tensor,
    pub out_proj_b: Tensor,
}

impl PolicyParams {
    pub fn init(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = EncoderParams::init(&cfg.encoder_config(), token_input_dim(cfg.embed_dim), rng);
        PolicyParams {
            encoder,
            out_proj_w: Tensor::randn(
                &[cfg.model_dim, cfg.embed_dim],
                1.0 / (cfg.model_dim as f64).sqrt(),
                rng,
            ),
            out_proj_b: Tensor::zeros(&[cfg.embed_dim]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder.", &mut out);
        out.push(("out_proj.w".into(), &self.out_proj_w));
        out.push(("out_proj.b".into(), &self.out_proj_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit_mut("encoder.", &mut out);
        out.push(("out_proj.w".into(), &mut self.out_proj_w));
        out.push(("out_proj.b".into(), &mut self.out_proj_b));
        out
    }
}

pub fn save_policy(params: &PolicyParams, cfg: &PolicyConfig, path: &Path) -> Result<(), PolicyError> {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("kind", "policy");
    ckpt.set_meta("n_layers", cfg.n_layers);
    ckpt.set_meta("n_heads", cfg.n_heads);
    ckpt.set_meta("model_dim", cfg.model_dim);
    ckpt.set_meta("mlp_hidden_dim", cfg.mlp_hidden_dim);
    ckpt.set_meta("use_rotary_pe", cfg.use_rotary_pe);
    ckpt.set_meta("max_context", cfg.max_context);
    ckpt.set_meta("embed_dim", cfg.embed_dim);
    ckpt.set_meta("infonce_temperature", cfg.infonce_temperature);
    ckpt.set_meta("n_negatives", cfg.n_negatives);
    ckpt.set_meta("match_temperature", cfg.match_temperature);
    for (name, t) in params.named_tensors() {
        ckpt.add_tensor(&name, t.clone());
    }
    ckpt.save(path)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<(PolicyParams, PolicyConfig), PolicyError> {
    let mut ckpt = Checkpoint::load(path)?;
    if ckpt.meta("kind") != Some("policy") {
        return Err(PolicyError::InvalidConfig(format!("{} is not a policy checkpoint", path.display())));
    }
    let mut cfg = PolicyConfig::desk_default(ckpt.meta_parsed("embed_dim")?);
    cfg.n_layers = ckpt.meta_parsed("n_layers")?;
    cfg.n_heads = ckpt.meta_parsed("n_heads")?;
    cfg.model_dim = ckpt.meta_parsed("model_dim")?;
    cfg.mlp_hidden_dim = ckpt.meta_parsed("mlp_hidden_dim")?;
    cfg.use_rotary_pe = ckpt.meta_parsed("use_rotary_pe")?;
    cfg.max_context = ckpt.meta_parsed("max_context")?;
    cfg.infonce_temperature = ckpt.meta_parsed("infonce_temperature")?;
    cfg.n_negatives = ckpt.meta_parsed("n_negatives")?;
    cfg.match_temperature = ckpt.meta_parsed("match_temperature")?;
    let mut rng = seeded(0);
    let mut params = PolicyParams::init(&cfg, &mut rng);
    for (name, slot) in params.named_tensors_mut() {
        let loaded = ckpt.take_tensor(&name)?;
        if loaded.shape() != slot.shape() {
            return Err(PolicyError::InvalidConfig(format!(
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

struct BoundPolicy {
    encoder: BoundEncoder,
    out_proj_w: Var,
    out_proj_b: Var,
}

impl BoundPolicy {
    fn bind(params: &PolicyParams, cfg: &PolicyConfig, tape: &mut Tape, trainable: bool) -> Self {
        let encoder = BoundEncoder::bind(&params.encoder, &cfg.encoder_config(), tape, trainable);
        let mut insert = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BoundPolicy {
            encoder,
            out_proj_w: insert(&params.out_proj_w),
            out_proj_b: insert(&params.out_proj_b),
        }
    }

    fn grads(&self, tape: &Tape, out: &mut Vec<Tensor>) {
        self.encoder.grads(tape, out);
        for v in [self.out_proj_w, self.out_proj_b] {
            out.push(tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())));
        }
    }

    /// Unit-normalized next-song embedding predictions for every position;
    /// row i predicts the token at stripped index i.
    fn forward_rows(&self, tape: &mut Tape, tokens: &[Token], embed_dim: usize) -> Result<Var, PolicyError> {
        let input = token_input_matrix(tokens, embed_dim, InputAblation::default());
        let z = self.encoder.forward(tape, &input, None)?;
        let raw = tape.matmul(z, self.out_proj_w)?;
        let raw = tape.add_bias(raw, self.out_proj_b)?;
        // Row-wise L2 normalization from primitives: norms via a ones
        // matvec, broadcast back with an outer product.
        let squared = tape.mul(raw, raw)?;
        let ones_col = tape.constant(Tensor::full(&[embed_dim, 1], 1.0));
        let sums = tape.matmul(squared, ones_col)?;
        let safe = tape.add_scalar(sums, 1e-24);
        let logs = tape.log(safe)?;
        let half_logs = tape.mul_scalar(logs, 0.5);
        let norms = tape.exp(half_logs)?;
        let ones_row = tape.constant(Tensor::full(&[1, embed_dim], 1.0));
        let norms_full = tape.matmul(norms, ones_row)?;
        Ok(tape.div(raw, norms_full)?)
    }
}

/// Unit-normalized predicted next-song embedding from the final position.
/// Histories longer than max_context are truncated to the most recent
/// tokens.
pub fn policy_forward(params: &PolicyParams, cfg: &PolicyConfig, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
    let stripped = truncate_to_context(strip_bos(tokens), cfg.max_context);
    let mut tape = Tape::new();
    let bound = BoundPolicy::bind(params, cfg, &mut tape, false);
    let rows = bound.forward_rows(&mut tape, stripped, cfg.embed_dim)?;
    let value = tape.value(rows);
    Ok(value.row(value.rows() - 1).to_vec())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-k song ids by cosine similarity, ties broken by ascending id.
pub fn match_catalogue(s_hat: &[f64], catalogue: &Catalogue, k: usize) -> Vec<usize> {
    assert!(k <= catalogue.n_songs(), "k exceeds catalogue size");
    let mut scored: Vec<(usize, f64)> = (0..catalogue.n_songs())
        .map(|song| (song, cosine(s_hat, catalogue.embedding(song))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|(song, _)| song).collect()
}

// ── InfoNCE ─────────────────────────────────────────────────────────

fn normalized_rows(rows: &[&[f64]]) -> Tensor {
    let dim = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in rows {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-24);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![rows.len(), dim], data).unwrap()
}

/// -log softmax of sim(s_hat, positive)/tau against {positive, negatives};
/// `s_hat_row` must be a unit-normalized [1, d] row on the tape.
fn copycat_loss_on_tape(
    tape: &mut Tape,
    s_hat_row: Var,
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<Var, PolicyError> {
    if tau <= 0.0 {
        return Err(PolicyError::BadTemperature(tau));
    }
    let mut rows: Vec<&[f64]> = Vec::with_capacity(negatives.len() + 1);
    rows.push(positive);
    rows.extend_from_slice(negatives);
    let candidates = tape.constant(normalized_rows(&rows));
    let s_col = tape.transpose(s_hat_row)?;
    let sims = tape.matmul(candidates, s_col)?;
    let logits = tape.mul_scalar(sims, 1.0 / tau);
    let row = tape.transpose(logits)?;
    let log_probs = tape.log_softmax_lastdim(row);
    let first = tape.slice_lastdim(log_probs, 0, 1)?;
    let scalar = tape.reshape(first, &[1])?;
    Ok(tape.neg(scalar))
}

/// Value-level InfoNCE loss for a predicted embedding against one positive
/// and a set of unplayed negatives.
pub fn copycat_loss(s_hat: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64, PolicyError> {
    let mut tape = Tape::new();
    let s = tape.constant(normalized_rows(&[s_hat]));
    let loss = copycat_loss_on_tape(&mut tape, s, positive, negatives, tau)?;
    Ok(tape.value(loss).item())
}

// ── policy distribution ─────────────────────────────────────────────

/// Per-song log-probabilities over the catalogue.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistribution {
    pub log_probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.log_probs.iter().enumerate() {
            if *v > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

fn log_softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// log softmax over cosine(s_hat, song)/match_temperature for the full
/// catalogue.
pub fn policy_log_probs(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    tokens: &[Token],
    catalogue: &Catalogue,
) -> Result<PolicyDistribution, PolicyError> {
    if cfg.match_temperature <= 0.0 {
        return Err(PolicyError::BadTemperature(cfg.match_temperature));
    }
    let s_hat = policy_forward(params, cfg, tokens)?;
    let logits: Vec<f64> = (0..catalogue.n_songs())
        .map(|song| cosine(&s_hat, catalogue.embedding(song)) / cfg.match_temperature)
        .collect();
    Ok(PolicyDistribution { log_probs: log_softmax_values(&logits) })
}

// ── copycat training ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PolicyEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub params: PolicyParams,
    pub config: PolicyConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: Vec<PolicyEpochStats>,
}

/// Fixed per-user windows drawn from a dedicated seed so that training,
/// fine-tuning, and evaluation all share one window set.
pub fn user_windows(
    sequences: &BTreeMap<usize, TokenSequence>,
    users: &[usize],
    n_windows: usize,
    len_range: (usize, usize),
    window_seed: u64,
) -> Vec<Window> {
    let mut out = Vec::new();
    for &user in users {
        let mut rng = seeded(derive_seed(window_seed, &format!("windows/{user}")));
        out.extend(sample_windows(&sequences[&user], n_windows, len_range, &mut rng));
    }
    out
}

fn songs_played_by(seq: &TokenSequence) -> BTreeSet<usize> {
    seq.tokens.iter().filter_map(|t| t.song_id).collect()
}

struct CopycatStep {
    position: usize,
    positive: usize,
}

fn copycat_steps(tokens: &[Token]) -> Vec<CopycatStep> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::Song)
        .map(|(position, t)| CopycatStep { position, positive: t.song_id.expect("song token") })
        .collect()
}

fn window_copycat_loss(
    bound: &BoundPolicy,
    tape: &mut Tape,
    tokens: &[Token],
    catalogue: &Catalogue,
    unplayed: &[usize],
    cfg: &PolicyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>, PolicyError> {
    let steps = copycat_steps(tokens);
    if steps.is_empty() {
        return Ok(None);
    }
    let rows = bound.forward_rows(tape, tokens, cfg.embed_dim)?;
    let mut total: Option<Var> = None;
    for step in &steps {
        let s_row = tape.select_rows(rows, &[step.position])?;
        let negatives: Vec<&[f64]> = (0..cfg.n_negatives)
            .map(|_| {
                let id = unplayed[rng.gen_range(0..unplayed.len())];
                catalogue.embedding(id)
            })
            .collect();
        let loss = copycat_loss_on_tape(
            tape,
            s_row,
            catalogue.embedding(step.positive),
            &negatives,
            cfg.infonce_temperature,
        )?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = total.expect("steps nonempty");
    Ok(Some(tape.mul_scalar(total, 1.0 / steps.len() as f64)))
}

/// Mean InfoNCE loss of `params` over a window set with negatives drawn
/// from a fixed seed (deterministic and comparable across epochs).
fn window_set_loss(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    sequences: &BTreeMap<usize, TokenSequence>,
    windows: &[Window],
    catalogue: &Catalogue,
    unplayed: &BTreeMap<usize, Vec<usize>>,
    seed: u64,
) -> Result<f64, PolicyError> {
    let mut rng = seeded(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for window in windows {
        let seq = &sequences[&window.user_id];
        let tokens = strip_bos(window.slice(seq));
        let mut tape = Tape::new();
        let bound = BoundPolicy::bind(params, cfg, &mut tape, false);
        if let Some(loss) = window_copycat_loss(
            &bound,
            &mut tape,
            tokens,
            catalogue,
            &unplayed[&window.user_id],
            cfg,
            &mut rng,
        )? {
            total += tape.value(loss).item();
            count += 1;
        }
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

fn unplayed_songs(
    sequences: &BTreeMap<usize, TokenSequence>,
    users: &[usize],
    catalogue: &Catalogue,
) -> BTreeMap<usize, Vec<usize>> {
    users
        .iter()
        .map(|&user| {
            let played = songs_played_by(&sequences[&user]);
            let unplayed: Vec<usize> =
                (0..catalogue.n_songs()).filter(|s| !played.contains(s)).collect();
            // A user who somehow played everything falls back to the full
            // catalogue minus nothing; keep at least one candidate.
            let unplayed = if unplayed.is_empty() { (0..catalogue.n_songs()).collect() } else { unplayed };
            (user, unplayed)
        })
        .collect()
}

/// Behaviour cloning of the logged policy on train-user windows with
/// validation-loss checkpointing on the validation users' windows.
pub fn train_copycat(
    dataset: &LoggedDataset,
    catalogue: &Catalogue,
    split: &crate::worldmodel::Split,
    cfg: &PolicyConfig,
    window_seed: u64,
) -> Result<TrainedPolicy, PolicyError> {
    cfg.validate()?;
    let train_seqs = crate::worldmodel::build_sequences(dataset, catalogue, &split.train)?;
    let val_seqs = crate::worldmodel::build_sequences(dataset, catalogue, &split.val)?;
    let train_windows = user_windows(
        &train_seqs,
        &split.train,
        cfg.windows_per_user,
        cfg.window_len_range,
        window_seed,
    );
    let val_windows =
        user_windows(&val_seqs, &split.val, cfg.windows_per_user, cfg.window_len_range, window_seed);
    let train_unplayed = unplayed_songs(&train_seqs, &split.train, catalogue);
    let val_unplayed = unplayed_songs(&val_seqs, &split.val, catalogue);
    let val_negative_seed = derive_seed(cfg.seed, "copycat-validation-negatives");

    let mut rng = seeded(derive_seed(cfg.seed, "train-copycat"));
    let mut params = PolicyParams::init(cfg, &mut rng);
    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut adam_state = {
        let named = params.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };

    let mut best: Option<(PolicyParams, usize, f64)> = None;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut examples = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for &wi in chunk {
                let window = &train_windows[wi];
                let seq = &train_seqs[&window.user_id];
                let tokens = strip_bos(window.slice(seq));
                let mut tape = Tape::new();
                let bound = BoundPolicy::bind(&params, cfg, &mut tape, true);
                let loss = match window_copycat_loss(
                    &bound,
                    &mut tape,
                    tokens,
                    catalogue,
                    &train_unplayed[&window.user_id],
                    cfg,
                    &mut rng,
                )? {
                    Some(l) => l,
                    None => continue,
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(PolicyError::Diverged { epoch, loss: value });
                }
                epoch_loss += value;
                examples += 1;
                tape.backward(loss)?;
                let mut grads = Vec::new();
                bound.grads(&tape, &mut grads);
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
                let mut slots: Vec<&mut Tensor> =
                    params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
                let refs: Vec<&Tensor> = grads.iter().collect();
                adam_step(&mut slots, &refs, &mut adam_state, &adam_cfg)?;
            }
        }
        let train_loss = if examples > 0 { epoch_loss / examples as f64 } else { 0.0 };
        let val_loss = window_set_loss(
            &params,
            cfg,
            &val_seqs,
            &val_windows,
            catalogue,
            &val_unplayed,
            val_negative_seed,
        )?;
        if best.as_ref().map_or(true, |(_, _, b)| val_loss < *b) {
            best = Some((params.clone(), epoch, val_loss));
        }
        epochs.push(PolicyEpochStats { epoch, train_loss, val_loss });
    }
    let (best_params, best_epoch, best_val_loss) =
        best.unwrap_or((params, cfg.epochs.saturating_sub(1), f64::NAN));
    Ok(TrainedPolicy { params: best_params, config: *cfg, best_epoch, best_val_loss, epochs })
}

// ── preference pairs ────────────────────────────────────────────────

/// (history context, preferred song, rejected song) plus the utilities
/// that justified the preference. The context is the window prefix up to
/// `step` (a stripped-token index).
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub user_id: usize,
    pub window: Window,
    pub step: usize,
    pub winner: usize,
    pub loser: usize,
    pub winner_utility: f64,
    pub loser_utility: f64,
}

/// Corrective + exploratory candidate ids; never contains the loser.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub corrective: Vec<usize>,
    pub exploratory: Vec<usize>,
}

impl CandidatePool {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.corrective.iter().chain(&self.exploratory).copied()
    }

    pub fn len(&self) -> usize {
        self.corrective.len() + self.exploratory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nearest neighbours of a song by cosine distance, ascending, ties by id;
/// the song itself is excluded.
pub fn nearest_neighbours(catalogue: &Catalogue, song: usize, count: usize) -> Vec<usize> {
    let anchor = catalogue.embedding(song);
    let mut scored: Vec<(usize, f64)> = (0..catalogue.n_songs())
        .filter(|s| *s != song)
        .map(|s| (s, 1.0 - cosine(anchor, catalogue.embedding(s))))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(count);
    scored.into_iter().map(|(s, _)| s).collect()
}

/// Top-M/2 nearest neighbours of the poorly-received song plus M/2
/// uniform draws from the rest of the catalogue; deduplicated and padded
/// with further neighbours when the uniform draws run dry.
pub fn build_candidate_pool(
    catalogue: &Catalogue,
    loser: usize,
    pool_size: usize,
    rng: &mut ChaCha8Rng,
) -> CandidatePool {
    let half = pool_size / 2;
    let corrective = nearest_neighbours(catalogue, loser, half);
    let taken: BTreeSet<usize> = corrective.iter().copied().chain([loser]).collect();
    let available: Vec<usize> = (0..catalogue.n_songs()).filter(|s| !taken.contains(s)).collect();
    let mut exploratory = Vec::with_capacity(pool_size - half);
    let mut drawn = BTreeSet::new();
    let want = (pool_size - half).min(available.len());
    while exploratory.len() < want {
        let s = available[rng.gen_range(0..available.len())];
        if drawn.insert(s) {
            exploratory.push(s);
        }
    }
    CandidatePool { corrective, exploratory }
}

/// A logged step counts as negative feedback when the rating is observed
/// and negative, or no rating was observed and engagement fell below the
/// threshold.
pub fn is_negative_feedback(token: &Token, engagement_threshold: f64) -> bool {
    debug_assert_eq!(token.kind, TokenKind::Song);
    if token.mask_rating {
        token.rating < 0.5
    } else {
        token.engagement < engagement_threshold
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairMiningConfig {
    pub pool_size: usize,
    pub negative_engagement_threshold: f64,
}

impl Default for PairMiningConfig {
    fn default() -> Self {
        PairMiningConfig { pool_size: 16, negative_engagement_threshold: 0.3 }
    }
}

/// Negative history sampling over a window set: for every step whose
/// production recommendation received negative feedback, score a
/// corrective+exploratory pool under the world model and emit a pair when
/// the best candidate beats the logged song's utility.
pub fn build_preference_pairs(
    sequences: &BTreeMap<usize, TokenSequence>,
    windows: &[Window],
    catalogue: &Catalogue,
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    weights: &UtilityWeights,
    mining: &PairMiningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreferencePair>, PolicyError> {
    let mut pairs = Vec::new();
    for window in windows {
        let seq = &sequences[&window.user_id];
        let tokens = strip_bos(window.slice(seq));
        if tokens.is_empty() {
            continue;
        }
        let z = encode_history(wm_params, wm_cfg, tokens)?;
        for (idx, token) in tokens.iter().enumerate() {
            if token.kind != TokenKind::Song || !is_negative_feedback(token, mining.negative_engagement_threshold) {
                continue;
            }
            let loser = token.song_id.expect("song token");
            let pool = build_candidate_pool(catalogue, loser, mining.pool_size, rng);
            let context = z.row(idx);
            let utility_of = |song: usize| {
                let pred = predict_feedback(wm_params, wm_cfg, context, catalogue.embedding(song));
                crate::rollout::utility(&pred, weights)
            };
            let loser_utility = utility_of(loser);
            let mut winner: Option<(usize, f64)> = None;
            for candidate in pool.all() {
                let u = utility_of(candidate);
                let better = match winner {
                    None => true,
                    Some((bid, bu)) => u > bu || (u == bu && candidate < bid),
                };
                if better {
                    winner = Some((candidate, u));
                }
            }
            if let Some((winner, winner_utility)) = winner {
                if winner_utility > loser_utility {
                    pairs.push(PreferencePair {
                        user_id: window.user_id,
                        window: *window,
                        step: idx,
                        winner,
                        loser,
                        winner_utility,
                        loser_utility,
                    });
                }
            }
        }
    }
    if pairs.is_empty() {
        log::warn!("no negative-feedback steps found; preference-pair set is empty");
    }
    Ok(pairs)
}

// ── DPO ─────────────────────────────────────────────────────────────

/// -mean log sigmoid(beta [(log pi_theta(w) - log pi_ref(w)) -
/// (log pi_theta(l) - log pi_ref(l))]) over pairs, from full catalogue
/// distributions indexed per pair.
pub fn dpo_loss(
    theta: &[PolicyDistribution],
    reference: &[PolicyDistribution],
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64, PolicyError> {
    if beta <= 0.0 {
        return Err(PolicyError::BadTemperature(beta));
    }
    if theta.len() != pairs.len() || reference.len() != pairs.len() {
        return Err(PolicyError::InvalidConfig("distribution/pair count mismatch".into()));
    }
    let mut total = 0.0;
    for ((t, r), pair) in theta.iter().zip(reference).zip(pairs) {
        let margin = beta
            * ((t.log_probs[pair.winner] - r.log_probs[pair.winner])
                - (t.log_probs[pair.loser] - r.log_probs[pair.loser]));
        // -log sigmoid(m) = softplus(-m)
        total += (-margin).max(0.0) + (-(-margin).abs()).exp().ln_1p();
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, learning_rate: 1e-4, epochs: 4, batch_size: 16, seed: 0 }
    }
}

struct PreparedPair {
    context: Vec<Token>,
    winner: usize,
    loser: usize,
    ref_winner_logp: f64,
    ref_loser_logp: f64,
}

fn unit_catalogue_matrix(catalogue: &Catalogue) -> Tensor {
    let rows: Vec<&[f64]> = (0..catalogue.n_songs()).map(|s| catalogue.embedding(s)).collect();
    normalized_rows(&rows)
}

/// Catalogue log-probabilities for one context on the tape; returns a
/// [1, n_songs] log-softmax row.
fn log_probs_on_tape(
    bound: &BoundPolicy,
    tape: &mut Tape,
    context: &[Token],
    catalogue_unit: &Tensor,
    cfg: &PolicyConfig,
) -> Result<Var, PolicyError> {
    let rows = bound.forward_rows(tape, context, cfg.embed_dim)?;
    let last = tape.value(rows).rows() - 1;
    let s_row = tape.select_rows(rows, &[last])?;
    let cat = tape.constant(catalogue_unit.clone());
    let s_col = tape.transpose(s_row)?;
    let sims = tape.matmul(cat, s_col)?;
    let logits = tape.mul_scalar(sims, 1.0 / cfg.match_temperature);
    let row = tape.transpose(logits)?;
    Ok(tape.log_softmax_lastdim(row))
}

/// Fine-tune from a frozen Copycat reference with the DPO objective.
pub fn train_dpo(
    reference: &PolicyParams,
    cfg: &PolicyConfig,
    dpo: &DpoConfig,
    pairs: &[PreferencePair],
    sequences: &BTreeMap<usize, TokenSequence>,
    catalogue: &Catalogue,
) -> Result<TrainedPolicy, PolicyError> {
    if pairs.is_empty() {
        return Err(PolicyError::NoPairs);
    }
    if dpo.beta <= 0.0 {
        return Err(PolicyError::BadTemperature(dpo.beta));
    }
    let catalogue_unit = unit_catalogue_matrix(catalogue);

    // The reference is frozen: its per-pair log-probs are constants.
    let mut prepared = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let seq = &sequences[&pair.user_id];
        let tokens = strip_bos(pair.window.slice(seq));
        let context: Vec<Token> = tokens[..pair.step].to_vec();
        let dist = policy_log_probs(reference, cfg, &context, catalogue)?;
        prepared.push(PreparedPair {
            context,
            winner: pair.winner,
            loser: pair.loser,
            ref_winner_logp: dist.log_probs[pair.winner],
            ref_loser_logp: dist.log_probs[pair.loser],
        });
    }

    let mut theta = reference.clone();
    let adam_cfg = AdamConfig::with_learning_rate(dpo.learning_rate);
    let mut adam_state = {
        let named = theta.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let mut rng = seeded(derive_seed(dpo.seed, "train-dpo"));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::new();

    for epoch in 0..dpo.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut examples = 0usize;
        for chunk in order.chunks(dpo.batch_size.max(1)) {
            let mut grad_acc: Option<Vec<Tensor>> = None;
            for &pi in chunk {
                let pair = &prepared[pi];
                let mut tape = Tape::new();
                let bound = BoundPolicy::bind(&theta, cfg, &mut tape, true);
                let log_probs = log_probs_on_tape(&bound, &mut tape, &pair.context, &catalogue_unit, cfg)?;
                let flat = tape.reshape(log_probs, &[catalogue.n_songs()])?;
                let picked = tape.gather(flat, &[pair.winner, pair.loser])?;
                let theta_w = tape.gather(picked, &[0])?;
                let theta_l = tape.gather(picked, &[1])?;
                let diff = tape.sub(theta_w, theta_l)?;
                let ref_margin = pair.ref_winner_logp - pair.ref_loser_logp;
                let centered = tape.add_scalar(diff, -ref_margin);
                let margin = tape.mul_scalar(centered, dpo.beta);
                let neg_margin = tape.neg(margin);
                let loss = tape.softplus(neg_margin);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(PolicyError::Diverged { epoch, loss: value });
                }
                epoch_loss += value;
                examples += 1;
                tape.backward(loss)?;
                let mut grads = Vec::new();
                bound.grads(&tape, &mut grads);
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
            }
            if let Some(mut grads) = grad_acc {
                let scale = 1.0 / chunk.len() as f64;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
                let mut slots: Vec<&mut Tensor> =
                    theta.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
                let refs: Vec<&Tensor> = grads.iter().collect();
                adam_step(&mut slots, &refs, &mut adam_state, &adam_cfg)?;
            }
        }
        let train_loss = epoch_loss / examples.max(1) as f64;
        epochs.push(PolicyEpochStats { epoch, train_loss, val_loss: f64::NAN });
    }
    let best_epoch = epochs.last().map(|e| e.epoch).unwrap_or(0);
    Ok(TrainedPolicy {
        params: theta,
        config: *cfg,
        best_epoch,
        best_val_loss: f64::NAN,
        epochs,
    })
}

/// Mean winner-minus-loser log-prob margin of `params` over pairs.
pub fn mean_pair_margin(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    pairs: &[PreferencePair],
    sequences: &BTreeMap<usize, TokenSequence>,
    catalogue: &Catalogue,
) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for pair in pairs {
        let seq = &sequences[&pair.user_id];
        let tokens = strip_bos(pair.window.slice(seq));
        let dist = policy_log_probs(params, cfg, &tokens[..pair.step], catalogue)?;
        total += dist.log_probs[pair.winner] - dist.log_probs[pair.loser];
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Mean per-state KL(theta || reference) over the pairs' contexts.
pub fn mean_state_kl(
    theta: &PolicyParams,
    reference: &PolicyParams,
    cfg: &PolicyConfig,
    pairs: &[PreferencePair],
    sequences: &BTreeMap<usize, TokenSequence>,
    catalogue: &Catalogue,
) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for pair in pairs {
        let seq = &sequences[&pair.user_id];
        let tokens = strip_bos(pair.window.slice(seq));
        let t = policy_log_probs(theta, cfg, &tokens[..pair.step], catalogue)?;
        let r = policy_log_probs(reference, cfg, &tokens[..pair.step], catalogue)?;
        let kl: f64 = t
            .log_probs
            .iter()
            .zip(&r.log_probs)
            .map(|(lt, lr)| lt.exp() * (lt - lr))
            .sum();
        total += kl;
    }
    Ok(total / pairs.len().max(1) as f64)
}

// ── baselines & the shared next-song interface ──────────────────────

pub fn baseline_random(catalogue: &Catalogue, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(0..catalogue.n_songs())
}

/// Argmax of world-model utility over the full catalogue, ties by
/// ascending song id.
pub fn baseline_greedy(
    wm_params: &WorldModelParams,
    wm_cfg: &WorldModelConfig,
    weights: &UtilityWeights,
    history: &[Token],
    catalogue: &Catalogue,
) -> Result<usize, PolicyError> {
    let z = crate::worldmodel::encode_last(wm_params, wm_cfg, history)?;
    let preds = score_catalogue(wm_params, wm_cfg, &z, catalogue);
    let mut best = 0usize;
    let mut best_u = f64::NEG_INFINITY;
    for (song, pred) in preds.iter().enumerate() {
        let u = crate::rollout::utility(pred, weights);
        if u > best_u {
            best = song;
            best_u = u;
        }
    }
    Ok(best)
}

/// One shared interface for all four policies; the rollout engine and the
/// adherence evaluation consume this and nothing else.
pub trait RecommendPolicy {
    fn name(&self) -> &str;
    /// Next recommendation given the history so far.
    fn next_song(&self, history: &[Token], catalogue: &Catalogue, rng: &mut ChaCha8Rng) -> usize;
    /// Full-catalogue ranking given the history so far. The first element
    /// agrees with `next_song` for deterministic policies.
    fn rank_catalogue(&self, history: &[Token], catalogue: &Catalogue, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

pub struct RandomPolicy;

impl RecommendPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn next_song(&self, _history: &[Token], catalogue: &Catalogue, rng: &mut ChaCha8Rng) -> usize {
        baseline_random(catalogue, rng)
    }

    fn rank_catalogue(&self, _history: &[Token], catalogue: &Catalogue, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..catalogue.n_songs()).collect();
        ids.shuffle(rng);
        ids
    }
}

pub struct GreedyPolicy<'a> {
    pub wm_params: &'a WorldModelParams,
    pub wm_cfg: &'a WorldModelConfig,
    pub weights: UtilityWeights,
}

impl GreedyPolicy<'_> {
    fn utilities(&self, history: &[Token], catalogue: &Catalogue) -> Vec<f64> {
        let z = crate::worldmodel::encode_last(self.wm_params, self.wm_cfg, history)
            .expect("greedy encode failed");
        score_catalogue(self.wm_params, self.wm_cfg, &z, catalogue)
            .iter()
            .map(|p| crate::rollout::utility(p, &self.weights))
            .collect()
    }
}

impl RecommendPolicy for GreedyPolicy<'_> {
    fn name(&self) -> &str {
        "greedy"
    }

    fn next_song(&self, history: &[Token], catalogue: &Catalogue, _rng: &mut ChaCha8Rng) -> usize {
        let utilities = self.utilities(history, catalogue);
        let mut best = 0usize;
        for (song, u) in utilities.iter().enumerate() {
            if *u > utilities[best] {
                best = song;
            }
        }
        best
    }

    fn rank_catalogue(&self, history: &[Token], catalogue: &Catalogue, _rng: &mut ChaCha8Rng) -> Vec<usize> {
        let utilities = self.utilities(history, catalogue);
        let mut ids: Vec<usize> = (0..catalogue.n_songs()).collect();
        ids.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]).then(a.cmp(&b)));
        ids
    }
}

/// Copycat or DPO: an embedding-predicting policy matched to the catalogue
/// by cosine similarity.
pub struct EmbeddingPolicy<'a> {
    pub label: &'a str,
    pub params: &'a PolicyParams,
    pub cfg: &'a PolicyConfig,
}

impl RecommendPolicy for EmbeddingPolicy<'_> {
    fn name(&self) -> &str {
        self.label
    }

    fn next_song(&self, history: &[Token], catalogue: &Catalogue, _rng: &mut ChaCha8Rng) -> usize {
        let s_hat = policy_forward(self.params, self.cfg, history).expect("policy forward failed");
        match_catalogue(&s_hat, catalogue, 1)[0]
    }

    fn rank_catalogue(&self, history: &[Token], catalogue: &Catalogue, _rng: &mut ChaCha8Rng) -> Vec<usize> {
        let s_hat = policy_forward(self.params, self.cfg, history).expect("policy forward failed");
        match_catalogue(&s_hat, catalogue, catalogue.n_songs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, GeneratorConfig, SyntheticWorld};
    use crate::history::build_sequence;
    use approx::assert_relative_eq;

    fn tiny_world() -> SyntheticWorld {
        generate_world(&GeneratorConfig {
            n_users: 6,
            n_songs: 24,
            n_genres: 3,
            embed_dim: 6,
            sessions_per_user: (3, 4),
            songs_per_session: (3, 5),
            seed: 555,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(embed_dim: usize) -> PolicyConfig {
        PolicyConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 12,
            mlp_hidden_dim: 12,
            epochs: 6,
            batch_size: 4,
            learning_rate: 5e-3,
            n_negatives: 7,
            window_len_range: (4, 10),
            ..PolicyConfig::desk_default(embed_dim)
        }
    }

    #[test]
    fn forward_output_is_unit_norm_causal_and_deterministic() {
        let world = tiny_world();
        let cfg = tiny_cfg(6);
        let params = PolicyParams::init(&cfg, &mut seeded(1));
        let seq = build_sequence(&world.dataset.users[0], &world.catalogue).unwrap();

        let s = policy_forward(&params, &cfg, &seq.tokens).unwrap();
        let norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "norm {}", norm);

        // Deterministic.
        assert_eq!(s, policy_forward(&params, &cfg, &seq.tokens).unwrap());

        // Causal: predictions for earlier positions are unchanged when a
        // token is appended.
        let shorter = policy_forward(&params, &cfg, &seq.tokens[..seq.len() - 1]).unwrap();
        let mut tape = Tape::new();
        let bound = BoundPolicy::bind(&params, &cfg, &mut tape, false);
        let rows = bound.forward_rows(&mut tape, strip_bos(&seq.tokens), cfg.embed_dim).unwrap();
        let full = tape.value(rows);
        let prev_row = full.row(full.rows() - 2);
        for (a, b) in shorter.iter().zip(prev_row) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn match_catalogue_brute_force_ties_and_scale_invariance() {
        let world = tiny_world();
        // Exact catalogue row ranks first.
        let target = world.catalogue.embedding(13).to_vec();
        let ranked = match_catalogue(&target, &world.catalogue, 5);
        assert_eq!(ranked[0], 13);

        // Full k is a permutation.
        let all = match_catalogue(&target, &world.catalogue, world.catalogue.n_songs());
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..world.catalogue.n_songs()).collect::<Vec<_>>());

        // Brute-force agreement on a random query.
        use rand::Rng as _;
        let mut rng = seeded(7);
        let query: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
        let ranked = match_catalogue(&query, &world.catalogue, world.catalogue.n_songs());
        let mut brute: Vec<(usize, f64)> = (0..world.catalogue.n_songs())
            .map(|s| (s, cosine(&query, world.catalogue.embedding(s))))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(ranked, brute.into_iter().map(|(s, _)| s).collect::<Vec<_>>());

        // Cosine makes the ranking scale-invariant.
        let scaled: Vec<f64> = query.iter().map(|v| v * 37.5).collect();
        assert_eq!(ranked, match_catalogue(&scaled, &world.catalogue, world.catalogue.n_songs()));
    }

    #[test]
    fn copycat_loss_anchors() {
        // Orthogonal unit vectors: identical similarity (zero) to positive
        // and all 15 negatives gives a uniform softmax, loss = ln 16.
        let dim = 32;
        let mut vectors = Vec::new();
        for i in 0..17 {
            let mut v = vec![0.0; dim];
            v[i] = 1.0;
            vectors.push(v);
        }
        let s_hat = vectors[0].clone();
        let positive = vectors[1].clone();
        let negatives: Vec<&[f64]> = vectors[2..17].iter().map(|v| v.as_slice()).collect();
        assert_eq!(negatives.len(), 15);
        let loss = copycat_loss(&s_hat, &positive, &negatives, 0.07).unwrap();
        assert_relative_eq!(loss, 16f64.ln(), epsilon = 1e-9);

        // Perfectly aligned positive with tiny temperature: loss -> 0.
        let loss = copycat_loss(&positive, &positive, &negatives, 0.01).unwrap();
        assert!(loss < 1e-12, "loss {}", loss);

        // Non-positive temperature is rejected.
        assert!(matches!(
            copycat_loss(&s_hat, &positive, &negatives, 0.0),
            Err(PolicyError::BadTemperature(_))
        ));
    }

    fn flatten(params: &PolicyParams) -> Vec<f64> {
        params.named_tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    fn unflatten(template: &PolicyParams, flat: &[f64]) -> PolicyParams {
        let mut params = template.clone();
        let mut off = 0;
        for (_, t) in params.named_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        params
    }

    fn fd_check(analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, at: &[f64], tol: f64) {
        let h = 1e-5;
        let mut point = at.to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..at.len() {
            let orig = point[i];
            point[i] = orig + h;
            let up = f(&point);
            point[i] = orig - h;
            let down = f(&point);
            point[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (analytic[i] - numeric).abs();
            if diff > 1e-7 {
                worst = worst.max(diff / analytic[i].abs().max(numeric.abs()));
            }
        }
        assert!(worst <= tol, "worst rel err {}", worst);
    }

    #[test]
    fn copycat_gradient_matches_finite_differences() {
        let world = tiny_world();
        let mut cfg = tiny_cfg(6);
        cfg.n_negatives = 5;
        let params = PolicyParams::init(&cfg, &mut seeded(3));
        let seq = build_sequence(&world.dataset.users[1], &world.catalogue).unwrap();
        let tokens = &strip_bos(&seq.tokens)[..5];
        let unplayed: Vec<usize> = (0..world.catalogue.n_songs()).collect();

        let eval = |p: &PolicyParams, want_grads: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let bound = BoundPolicy::bind(p, &cfg, &mut tape, true);
            let mut rng = seeded(42);
            let loss = window_copycat_loss(
                &bound,
                &mut tape,
                tokens,
                &world.catalogue,
                &unplayed,
                &cfg,
                &mut rng,
            )
            .unwrap()
            .unwrap();
            let value = tape.value(loss).item();
            if !want_grads {
                return (value, Vec::new());
            }
            tape.backward(loss).unwrap();
            let mut grads = Vec::new();
            bound.grads(&tape, &mut grads);
            (value, grads.iter().flat_map(|g| g.data().iter().copied()).collect())
        };

        let flat = flatten(&params);
        let (_, analytic) = eval(&params, true);
        fd_check(&analytic, |p| eval(&unflatten(&params, p), false).0, &flat, 1e-4);
    }

    #[test]
    fn log_probs_anchors() {
        let world = tiny_world();
        let cfg = tiny_cfg(6);
        let params = PolicyParams::init(&cfg, &mut seeded(4));
        let seq = build_sequence(&world.dataset.users[2], &world.catalogue).unwrap();
        let dist = policy_log_probs(&params, &cfg, &seq.tokens, &world.catalogue).unwrap();

        let total: f64 = dist.log_probs.iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "sum {}", total);

        let s_hat = policy_forward(&params, &cfg, &seq.tokens).unwrap();
        let ranked = match_catalogue(&s_hat, &world.catalogue, 1);
        assert_eq!(dist.argmax(), ranked[0]);

        // Uniform similarities: every log-prob is -ln n.
        let n = world.catalogue.n_songs();
        let uniform = PolicyDistribution { log_probs: log_softmax_values(&vec![0.7; n]) };
        for lp in &uniform.log_probs {
            assert_relative_eq!(*lp, -(n as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn preference_pairs_pool_shape_and_winner_dominance() {
        let world = tiny_world();
        let wm_cfg = crate::worldmodel::WorldModelConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 12,
            mlp_hidden_dim: 12,
            ..crate::worldmodel::WorldModelConfig::desk_default(6)
        };
        let wm_params = WorldModelParams::init(&wm_cfg, &mut seeded(5));
        let users = world.dataset.user_ids();
        let sequences =
            crate::worldmodel::build_sequences(&world.dataset, &world.catalogue, &users).unwrap();
        let windows = user_windows(&sequences, &users, 3, (5, 12), 99);
        let weights = UtilityWeights::default();
        let mining = PairMiningConfig::default();
        let mut rng = seeded(6);
        let pairs = build_preference_pairs(
            &sequences,
            &windows,
            &world.catalogue,
            &wm_params,
            &wm_cfg,
            &weights,
            &mining,
            &mut rng,
        )
        .unwrap();
        assert!(!pairs.is_empty(), "synthetic world produced no negative steps");
        for pair in &pairs {
            assert_ne!(pair.winner, pair.loser);
            assert!(pair.winner_utility > pair.loser_utility);
        }

        // Pool structure: M=16 means 8 corrective + 8 exploratory, loser
        // excluded, corrective exactly the nearest neighbours.
        let pool = build_candidate_pool(&world.catalogue, 3, 16, &mut seeded(8));
        assert_eq!(pool.corrective.len(), 8);
        assert_eq!(pool.exploratory.len(), 8);
        assert!(!pool.all().any(|s| s == 3));
        let all: BTreeSet<usize> = pool.all().collect();
        assert_eq!(all.len(), 16, "pool has duplicates");

        let brute = {
            let anchor = world.catalogue.embedding(3);
            let mut scored: Vec<(usize, f64)> = (0..world.catalogue.n_songs())
                .filter(|s| *s != 3)
                .map(|s| (s, 1.0 - cosine(anchor, world.catalogue.embedding(s))))
                .collect();
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            scored[..8].iter().map(|(s, _)| *s).collect::<Vec<_>>()
        };
        assert_eq!(pool.corrective, brute);
    }

    #[test]
    fn dpo_loss_anchors() {
        let world = tiny_world();
        let n = world.catalogue.n_songs();
        let mut rng = seeded(9);
        use rand::Rng as _;
        let pairs: Vec<PreferencePair> = (0..6)
            .map(|i| PreferencePair {
                user_id: 0,
                window: Window { user_id: 0, start: 0, len: 1 },
                step: 0,
                winner: rng.gen_range(0..n),
                loser: (i * 2 + 1) % n,
                winner_utility: 1.0,
                loser_utility: 0.0,
            })
            .collect();
        let dists: Vec<PolicyDistribution> = (0..pairs.len())
            .map(|_| {
                let logits: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
                PolicyDistribution { log_probs: log_softmax_values(&logits) }
            })
            .collect();

        // theta = ref: exactly ln 2 for any beta and any pair set.
        for beta in [0.05, 0.1, 1.0, 100.0] {
            let loss = dpo_loss(&dists, &dists, &pairs, beta).unwrap();
            assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-9);
        }

        // Raising log pi_theta(winner) strictly decreases the loss.
        let mut improved = dists.clone();
        for (d, pair) in improved.iter_mut().zip(&pairs) {
            d.log_probs[pair.winner] += 0.5;
        }
        let better = dpo_loss(&improved, &dists, &pairs, 0.5).unwrap();
        assert!(better < std::f64::consts::LN_2);

        assert!(dpo_loss(&dists, &dists, &pairs, 0.0).is_err());
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        // 10-song catalogue, one pair, gradient through the full policy.
        let world = generate_world(&GeneratorConfig {
            n_users: 3,
            n_songs: 10,
            n_genres: 2,
            embed_dim: 4,
            sessions_per_user: (2, 3),
            songs_per_session: (2, 4),
            seed: 31,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = PolicyConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 8,
            mlp_hidden_dim: 8,
            ..PolicyConfig::desk_default(4)
        };
        let params = PolicyParams::init(&cfg, &mut seeded(12));
        let seq = build_sequence(&world.dataset.users[0], &world.catalogue).unwrap();
        let context: Vec<Token> = strip_bos(&seq.tokens)[..4].to_vec();
        let catalogue_unit = unit_catalogue_matrix(&world.catalogue);
        let beta = 0.4;
        let (ref_w, ref_l) = (-2.1, -2.6);

        let eval = |p: &PolicyParams, want_grads: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let bound = BoundPolicy::bind(p, &cfg, &mut tape, true);
            let log_probs =
                log_probs_on_tape(&bound, &mut tape, &context, &catalogue_unit, &cfg).unwrap();
            let flat = tape.reshape(log_probs, &[10]).unwrap();
            let picked = tape.gather(flat, &[7, 2]).unwrap();
            let w = tape.gather(picked, &[0]).unwrap();
            let l = tape.gather(picked, &[1]).unwrap();
            let diff = tape.sub(w, l).unwrap();
            let centered = tape.add_scalar(diff, -(ref_w - ref_l));
            let margin = tape.mul_scalar(centered, beta);
            let neg = tape.neg(margin);
            let loss = tape.softplus(neg);
            let value = tape.value(loss).item();
            if !want_grads {
                return (value, Vec::new());
            }
            tape.backward(loss).unwrap();
            let mut grads = Vec::new();
            bound.grads(&tape, &mut grads);
            (value, grads.iter().flat_map(|g| g.data().iter().copied()).collect())
        };
        let flat = flatten(&params);
        let (_, analytic) = eval(&params, true);
        fd_check(&analytic, |p| eval(&unflatten(&params, p), false).0, &flat, 1e-4);
    }

    #[test]
    fn copycat_training_decreases_loss_and_is_seed_deterministic() {
        let world = tiny_world();
        let cfg = tiny_cfg(6);
        let plan = crate::worldmodel::make_split_plan(&world.dataset.user_ids(), 1, 17);
        let split = &plan.splits[0];
        let a = train_copycat(&world.dataset, &world.catalogue, split, &cfg, 42).unwrap();
        assert!(
            a.epochs.last().unwrap().train_loss < a.epochs.first().unwrap().train_loss,
            "copycat loss did not decrease"
        );
        let b = train_copycat(&world.dataset, &world.catalogue, split, &cfg, 42).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);

        // Checkpoint round-trip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("copycat.ckpt");
        save_policy(&a.params, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_policy(&path).unwrap();
        assert_eq!(loaded, a.params);
        assert_eq!(loaded_cfg.match_temperature, cfg.match_temperature);
    }

    #[test]
    fn dpo_training_raises_the_pair_margin() {
        // Extra exploration produces plenty of poorly-received steps.
        let world = generate_world(&GeneratorConfig {
            n_users: 8,
            n_songs: 24,
            n_genres: 3,
            embed_dim: 6,
            sessions_per_user: (3, 5),
            songs_per_session: (3, 5),
            logging_epsilon: 0.35,
            rating_observe_prob: 0.6,
            seed: 556,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = tiny_cfg(6);
        let plan = crate::worldmodel::make_split_plan(&world.dataset.user_ids(), 1, 18);
        let split = &plan.splits[0];
        let reference = train_copycat(&world.dataset, &world.catalogue, split, &cfg, 42).unwrap();

        let wm_cfg = crate::worldmodel::WorldModelConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 12,
            mlp_hidden_dim: 12,
            ..crate::worldmodel::WorldModelConfig::desk_default(6)
        };
        let wm_params = WorldModelParams::init(&wm_cfg, &mut seeded(20));
        let sequences =
            crate::worldmodel::build_sequences(&world.dataset, &world.catalogue, &split.train).unwrap();
        let windows = user_windows(&sequences, &split.train, 6, (8, 20), 42);
        let pairs = build_preference_pairs(
            &sequences,
            &windows,
            &world.catalogue,
            &wm_params,
            &wm_cfg,
            &UtilityWeights::default(),
            &PairMiningConfig::default(),
            &mut seeded(21),
        )
        .unwrap();
        assert!(!pairs.is_empty());

        let dpo_cfg = DpoConfig { epochs: 3, learning_rate: 3e-4, ..DpoConfig::default() };
        let tuned =
            train_dpo(&reference.params, &cfg, &dpo_cfg, &pairs, &sequences, &world.catalogue).unwrap();

        let margin_ref =
            mean_pair_margin(&reference.params, &cfg, &pairs, &sequences, &world.catalogue).unwrap();
        let margin_tuned =
            mean_pair_margin(&tuned.params, &cfg, &pairs, &sequences, &world.catalogue).unwrap();
        assert!(
            margin_tuned > margin_ref,
            "margin did not improve: {} -> {}",
            margin_ref,
            margin_tuned
        );

        // A very large beta pins theta to the reference harder than a
        // small one.
        let strong = DpoConfig { beta: 100.0, epochs: 3, learning_rate: 3e-4, ..DpoConfig::default() };
        let pinned =
            train_dpo(&reference.params, &cfg, &strong, &pairs, &sequences, &world.catalogue).unwrap();
        let kl_weak =
            mean_state_kl(&tuned.params, &reference.params, &cfg, &pairs, &sequences, &world.catalogue)
                .unwrap();
        let kl_strong =
            mean_state_kl(&pinned.params, &reference.params, &cfg, &pairs, &sequences, &world.catalogue)
                .unwrap();
        assert!(kl_strong < kl_weak, "beta=100 KL {} vs beta=0.1 KL {}", kl_strong, kl_weak);

        assert!(matches!(
            train_dpo(&reference.params, &cfg, &dpo_cfg, &[], &sequences, &world.catalogue),
            Err(PolicyError::NoPairs)
        ));
    }

    #[test]
    fn baselines_behave() {
        let world = tiny_world();
        // Random over 10^4 draws: per-song frequency within 4 sigma.
        let mut rng = seeded(30);
        let n = world.catalogue.n_songs();
        let draws = 10_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[baseline_random(&world.catalogue, &mut rng)] += 1;
        }
        let expected = draws as f64 / n as f64;
        let sigma = (draws as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 4.0 * sigma, "count {} vs {}", c, expected);
        }

        // Greedy equals the brute-force argmax of score_catalogue
        // utilities and is deterministic.
        let wm_cfg = crate::worldmodel::WorldModelConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 12,
            mlp_hidden_dim: 12,
            ..crate::worldmodel::WorldModelConfig::desk_default(6)
        };
        let wm_params = WorldModelParams::init(&wm_cfg, &mut seeded(31));
        let seq = build_sequence(&world.dataset.users[0], &world.catalogue).unwrap();
        let weights = UtilityWeights::default();
        let pick =
            baseline_greedy(&wm_params, &wm_cfg, &weights, &seq.tokens, &world.catalogue).unwrap();
        let z = crate::worldmodel::encode_last(&wm_params, &wm_cfg, &seq.tokens).unwrap();
        let brute = score_catalogue(&wm_params, &wm_cfg, &z, &world.catalogue)
            .iter()
            .enumerate()
            .max_by(|(ai, ap), (bi, bp)| {
                crate::rollout::utility(ap, &weights)
                    .total_cmp(&crate::rollout::utility(bp, &weights))
                    .then(bi.cmp(ai))
            })
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(pick, brute);
        assert_eq!(
            pick,
            baseline_greedy(&wm_params, &wm_cfg, &weights, &seq.tokens, &world.catalogue).unwrap()
        );

        // The trait view agrees with the free functions.
        let greedy = GreedyPolicy { wm_params: &wm_params, wm_cfg: &wm_cfg, weights };
        let mut rng = seeded(0);
        assert_eq!(greedy.next_song(&seq.tokens, &world.catalogue, &mut rng), pick);
        assert_eq!(greedy.rank_catalogue(&seq.tokens, &world.catalogue, &mut rng)[0], pick);
    }
}
