//! Causal decoder-only transformer shared by the world model and the
//! recommender policy. A learnable BOS row is prepended to the projected
//! token inputs, so output row 0 encodes the empty history and row i+1
//! encodes the history up to and including input token i. Pre-LN blocks,
//! tanh MLP, optional rotary position encoding on queries and keys.

use rand_chacha::ChaCha8Rng;

use crate::history::{Token, TokenKind};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub const FEEDBACK_FIELDS: usize = 4;
pub const KIND_ONE_HOT: usize = 3;

/// Input width of one projected token:
/// [song embedding | e r v a | mask_e mask_r mask_v mask_a | kind one-hot].
pub fn token_input_dim(embed_dim: usize) -> usize {
    embed_dim + 2 * FEEDBACK_FIELDS + KIND_ONE_HOT
}

/// Input-side ablation switches: zeroing a component also zeroes its mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputAblation {
    pub zero_feedback: bool,
    pub zero_song_embeddings: bool,
}

/// Rows of model input for tokens (any leading BOS token must already be
/// stripped; the encoder supplies its own learnable BOS row).
pub fn token_input_matrix(tokens: &[Token], embed_dim: usize, ablation: InputAblation) -> Tensor {
    let in_dim = token_input_dim(embed_dim);
    let mut data = vec![0.0; tokens.len() * in_dim];
    for (row, token) in tokens.iter().enumerate() {
        debug_assert!(token.kind != TokenKind::Bos, "strip BOS tokens before projection");
        let base = row * in_dim;
        if !ablation.zero_song_embeddings {
            if let Some(embedding) = &token.song_embedding {
                debug_assert_eq!(embedding.len(), embed_dim);
                data[base..base + embed_dim].copy_from_slice(embedding);
            }
        }
        if !ablation.zero_feedback {
            let f = base + embed_dim;
            data[f] = token.engagement;
            data[f + 1] = token.rating;
            data[f + 2] = token.valence;
            data[f + 3] = token.arousal;
            let m = f + FEEDBACK_FIELDS;
            data[m] = token.mask_engagement as u8 as f64;
            data[m + 1] = token.mask_rating as u8 as f64;
            data[m + 2] = token.mask_valence as u8 as f64;
            data[m + 3] = token.mask_arousal as u8 as f64;
        }
        let k = base + embed_dim + 2 * FEEDBACK_FIELDS;
        let kind_slot = match token.kind {
            TokenKind::Bos => 0,
            TokenKind::Song => 1,
            TokenKind::Boundary => 2,
        };
        data[k + kind_slot] = 1.0;
    }
    Tensor::new(vec![tokens.len(), in_dim], data).unwrap()
}

/// Drop a leading BOS token if present; windows starting at 0 carry one.
pub fn strip_bos(tokens: &[Token]) -> &[Token] {
    match tokens.first() {
        Some(t) if t.kind == TokenKind::Bos => &tokens[1..],
        _ => tokens,
    }
}

/// Keep the most recent `max_context` tokens (recency matters most).
pub fn truncate_to_context(tokens: &[Token], max_context: usize) -> &[Token] {
    if tokens.len() > max_context {
        &tokens[tokens.len() - max_context..]
    } else {
        tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden_dim: usize,
    pub use_rotary_pe: bool,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.model_dim % self.n_heads != 0 {
            return Err(NumericsError::InvalidArg {
                op: "EncoderConfig",
                detail: format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads),
            });
        }
        if (self.model_dim / self.n_heads) % 2 != 0 && self.use_rotary_pe {
            return Err(NumericsError::InvalidArg {
                op: "EncoderConfig",
                detail: "rotary encoding needs an even head dimension".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub input_proj_w: Tensor,
    pub input_proj_b: Tensor,
    pub bos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let h = cfg.mlp_hidden_dim;
        let xavier = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], xavier(d), rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(&[d, d], xavier(d), rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(&[d, d], xavier(d), rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(&[d, d], xavier(d), rng),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: Tensor::randn(&[d, h], xavier(d), rng),
                mlp_b1: Tensor::zeros(&[h]),
                mlp_w2: Tensor::randn(&[h, d], xavier(h), rng),
                mlp_b2: Tensor::zeros(&[d]),
            })
            .collect();
        EncoderParams {
            input_proj_w: Tensor::randn(&[input_dim, d], xavier(input_dim), rng),
            input_proj_b: Tensor::zeros(&[d]),
            bos: Tensor::randn(&[1, d], 0.02, rng),
            blocks,
            final_ln_gamma: Tensor::full(&[d], 1.0),
            final_ln_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}input_proj.w"), &self.input_proj_w));
        out.push((format!("{prefix}input_proj.b"), &self.input_proj_b));
        out.push((format!("{prefix}bos"), &self.bos));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1.gamma", &b.ln1_gamma),
                ("ln1.beta", &b.ln1_beta),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2.gamma", &b.ln2_gamma),
                ("ln2.beta", &b.ln2_beta),
                ("mlp.w1", &b.mlp_w1),
                ("mlp.b1", &b.mlp_b1),
                ("mlp.w2", &b.mlp_w2),
                ("mlp.b2", &b.mlp_b2),
            ] {
                out.push((format!("{prefix}block{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}final_ln.gamma"), &self.final_ln_gamma));
        out.push((format!("{prefix}final_ln.beta"), &self.final_ln_beta));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}input_proj.w"), &mut self.input_proj_w));
        out.push((format!("{prefix}input_proj.b"), &mut self.input_proj_b));
        out.push((format!("{prefix}bos"), &mut self.bos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1.gamma", &mut b.ln1_gamma),
                ("ln1.beta", &mut b.ln1_beta),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2.gamma", &mut b.ln2_gamma),
                ("ln2.beta", &mut b.ln2_beta),
                ("mlp.w1", &mut b.mlp_w1),
                ("mlp.b1", &mut b.mlp_b1),
                ("mlp.w2", &mut b.mlp_w2),
                ("mlp.b2", &mut b.mlp_b2),
            ] {
                out.push((format!("{prefix}block{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}final_ln.gamma"), &mut self.final_ln_gamma));
        out.push((format!("{prefix}final_ln.beta"), &mut self.final_ln_beta));
    }
}

/// Tape-bound copy of the encoder parameters.
pub struct BoundEncoder {
    pub input_proj_w: Var,
    pub input_proj_b: Var,
    pub bos: Var,
    blocks: Vec<BoundBlock>,
    final_ln_gamma: Var,
    final_ln_beta: Var,
    cfg: EncoderConfig,
}

struct BoundBlock {
    ln1_gamma: Var,
    ln1_beta: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

/// Dropout context for a training forward pass; `None` runs deterministic
/// inference.
pub struct TrainContext<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl BoundEncoder {
    pub fn bind(params: &EncoderParams, cfg: &EncoderConfig, tape: &mut Tape, trainable: bool) -> Self {
        let mut insert = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BoundEncoder {
            input_proj_w: insert(&params.input_proj_w),
            input_proj_b: insert(&params.input_proj_b),
            bos: insert(&params.bos),
            blocks: params
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_gamma: insert(&b.ln1_gamma),
                    ln1_beta: insert(&b.ln1_beta),
                    wq: insert(&b.wq),
                    bq: insert(&b.bq),
                    wk: insert(&b.wk),
                    bk: insert(&b.bk),
                    wv: insert(&b.wv),
                    bv: insert(&b.bv),
                    wo: insert(&b.wo),
                    bo: insert(&b.bo),
                    ln2_gamma: insert(&b.ln2_gamma),
                    ln2_beta: insert(&b.ln2_beta),
                    mlp_w1: insert(&b.mlp_w1),
                    mlp_b1: insert(&b.mlp_b1),
                    mlp_w2: insert(&b.mlp_w2),
                    mlp_b2: insert(&b.mlp_b2),
                })
                .collect(),
            final_ln_gamma: insert(&params.final_ln_gamma),
            final_ln_beta: insert(&params.final_ln_beta),
            cfg: *cfg,
        }
    }

    /// Gradients of all bound parameters after backward, in `visit` order.
    pub fn grads(&self, tape: &Tape, out: &mut Vec<Tensor>) {
        let mut push = |v: Var| {
            out.push(
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())),
            )
        };
        push(self.input_proj_w);
        push(self.input_proj_b);
        push(self.bos);
        for b in &self.blocks {
            for v in [
                b.ln1_gamma, b.ln1_beta, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gamma, b.ln2_beta, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2,
            ] {
                push(v);
            }
        }
        push(self.final_ln_gamma);
        push(self.final_ln_beta);
    }

    /// Full causal forward pass. `input_rows` holds T projected-token rows
    /// (possibly zero rows for an empty history); the output has T+1 rows,
    /// row 0 being the BOS-only embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input_rows: &Tensor,
        mut train: Option<&mut TrainContext>,
    ) -> Result<Var, NumericsError> {
        let t_in = input_rows.shape()[0];
        let mut x = if t_in == 0 {
            // select_rows keeps the broadcast-free path uniform.
            tape.select_rows(self.bos, &[0])?
        } else {
            let rows = tape.constant(input_rows.clone());
            let projected = tape.matmul(rows, self.input_proj_w)?;
            let projected = tape.add_bias(projected, self.input_proj_b)?;
            tape.concat_rows(self.bos, projected)?
        };
        let t_total = t_in + 1;

        // Upper-triangular mask: 1 above the diagonal blocks attention to
        // future positions.
        let mut mask = Tensor::zeros(&[t_total, t_total]);
        for i in 0..t_total {
            for j in (i + 1)..t_total {
                mask.data_mut()[i * t_total + j] = 1.0;
            }
        }

        let n_heads = self.cfg.n_heads;
        let head_dim = self.cfg.model_dim / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let p = self.cfg.dropout;

        for block in &self.blocks {
            let normed = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, 1e-5)?;
            let q = tape.matmul(normed, block.wq)?;
            let q = tape.add_bias(q, block.bq)?;
            let k = tape.matmul(normed, block.wk)?;
            let k = tape.add_bias(k, block.bk)?;
            let v = tape.matmul(normed, block.wv)?;
            let v = tape.add_bias(v, block.bv)?;

            let mut heads: Option<Var> = None;
            for h in 0..n_heads {
                let mut qh = tape.slice_lastdim(q, h * head_dim, head_dim)?;
                let mut kh = tape.slice_lastdim(k, h * head_dim, head_dim)?;
                let vh = tape.slice_lastdim(v, h * head_dim, head_dim)?;
                if self.cfg.use_rotary_pe {
                    qh = tape.rope(qh, 10000.0)?;
                    kh = tape.rope(kh, 10000.0)?;
                }
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.mul_scalar(scores, scale);
                let masked = tape.masked_fill(scores, &mask, -1e30)?;
                let mut attn = tape.softmax_lastdim(masked);
                if let Some(ctx) = train.as_deref_mut() {
                    if p > 0.0 {
                        attn = tape.dropout(attn, p, ctx.rng)?;
                    }
                }
                let mixed = tape.matmul(attn, vh)?;
                heads = Some(match heads {
                    None => mixed,
                    Some(acc) => tape.concat_lastdim(acc, mixed)?,
                });
            }
            let concat = heads.expect("at least one head");
            let mut attn_out = tape.matmul(concat, block.wo)?;
            attn_out = tape.add_bias(attn_out, block.bo)?;
            if let Some(ctx) = train.as_deref_mut() {
                if p > 0.0 {
                    attn_out = tape.dropout(attn_out, p, ctx.rng)?;
                }
            }
            x = tape.add(x, attn_out)?;

            let normed2 = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, 1e-5)?;
            let hidden = tape.matmul(normed2, block.mlp_w1)?;
            let hidden = tape.add_bias(hidden, block.mlp_b1)?;
            let hidden = tape.tanh(hidden);
            let mut mlp_out = tape.matmul(hidden, block.mlp_w2)?;
            mlp_out = tape.add_bias(mlp_out, block.mlp_b2)?;
            if let Some(ctx) = train.as_deref_mut() {
                if p > 0.0 {
                    mlp_out = tape.dropout(mlp_out, p, ctx.rng)?;
                }
            }
            x = tape.add(x, mlp_out)?;
        }
        tape.layer_norm(x, self.final_ln_gamma, self.final_ln_beta, 1e-5)
    }
}
