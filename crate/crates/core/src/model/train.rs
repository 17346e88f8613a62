//! Brief next-token training of the toy decoder with hand-written backprop
//! and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    attend, cross_entropy, rmsnorm, silu, softmax_in_place, ModelConfig, ToyModel,
    LINEARS_PER_BLOCK,
};
use crate::error::{Error, Result};
use crate::io::{generate_corpus, CorpusRule};
use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 64,
            learning_rate: 3e-3,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean next-token loss of each step's batch, before the update.
    pub losses: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-8;

/// Trains `model` in place on random windows of `tokens`.
pub fn train(model: &mut ToyModel, tokens: &[u32], cfg: &TrainConfig) -> Result<TrainReport> {
    model.validate()?;
    if cfg.seq_len < 2 || cfg.seq_len > model.config.max_seq_len {
        return Err(Error::invalid(format!(
            "training seq_len {} must be in [2, {}]",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    if tokens.len() < cfg.seq_len {
        return Err(Error::invalid(format!(
            "corpus of {} tokens is shorter than seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::invalid(
            "batch_size and learning_rate must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut m2 = m1.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=tokens.len() - cfg.seq_len);
                &tokens[start..start + cfg.seq_len]
            })
            .collect();
        let model_ref = &*model;
        let per_seq = batch
            .par_iter()
            .map(|seq| loss_and_grad(model_ref, seq))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut grad = ToyModel::zeros(model.config);
        for (l, g) in &per_seq {
            loss += l;
            for (acc, gi) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                axpy(1.0, gi, acc);
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss diverged at step {step}"
            )));
        }
        losses.push(loss);

        let lr = cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (((p, g), a), b) in model
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut m1)
            .zip(&mut m2)
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                a[i] = BETA1 * a[i] + (1.0 - BETA1) * gi;
                b[i] = BETA2 * b[i] + (1.0 - BETA2) * gi * gi;
                p[i] -= lr * (a[i] / c1) / ((b[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(TrainReport { losses })
}

/// Synthetic training stream length used by [`train_toy_model`].
pub const TOY_CORPUS_LEN: usize = 400_000;

/// A seeded random model briefly trained on a `markov2` stream drawn with
/// `corpus_seed`.
pub fn train_toy_model(
    config: ModelConfig,
    corpus_seed: u64,
    cfg: &TrainConfig,
) -> Result<(ToyModel, TrainReport)> {
    let mut model = ToyModel::random(config)?;
    let corpus = generate_corpus(
        CorpusRule::Markov2,
        corpus_seed,
        TOY_CORPUS_LEN,
        config.vocab_size,
    )?;
    let report = train(&mut model, &corpus.tokens, cfg)?;
    Ok((model, report))
}

struct BlockTape {
    a_xn: Vec<Vec<f64>>,
    a_r: Vec<f64>,
    a_y: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    keys: Vec<f64>,
    values: Vec<f64>,
    probs: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    b_xn: Vec<Vec<f64>>,
    b_r: Vec<f64>,
    b_y: Vec<Vec<f64>>,
    up: Vec<Vec<f64>>,
    gate: Vec<Vec<f64>>,
    hh: Vec<Vec<f64>>,
}

fn outer_acc(w: &mut Matrix, dy: &[f64], x: &[f64]) {
    for (i, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            axpy(d, x, w.row_mut(i));
        }
    }
}

fn tmatvec(w: &Matrix, dy: &[f64]) -> Vec<f64> {
    w.matvec_transposed(dy).expect("shapes fixed by the model")
}

/// `dL/dx` of `y = x / rms(x) * gain`; accumulates `dL/dgain`.
fn rmsnorm_backward(dy: &[f64], xn: &[f64], r: f64, gain: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let dxn: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for ((dg, d), x) in dgain.iter_mut().zip(dy).zip(xn) {
        *dg += d * x;
    }
    let mean = dot(&dxn, xn) / xn.len() as f64;
    dxn.iter()
        .zip(xn)
        .map(|(d, x)| (d - x * mean) / r)
        .collect()
}

/// Summed next-token loss over positions `0..len-1` and its gradient, for a
/// sequence scored as a whole (every position predicts its successor).
/// The returned loss is the mean over scored positions.
pub fn loss_and_grad(model: &ToyModel, seq: &[u32]) -> Result<(f64, ToyModel)> {
    model.check_tokens(seq)?;
    if seq.len() < 2 {
        return Err(Error::invalid(
            "training sequence needs at least two tokens",
        ));
    }
    let cfg = &model.config;
    let (n, heads) = (cfg.embed_dim, cfg.num_heads);
    let dh = n / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let len = seq.len();

    // forward, position-major per block so arithmetic matches inference
    let mut x: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            model
                .tok_emb
                .row(tok as usize)
                .iter()
                .zip(model.pos_emb.row(t))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let mut tapes = Vec::with_capacity(cfg.num_layers);
    for block in &model.blocks {
        let mut tape = BlockTape {
            a_xn: Vec::with_capacity(len),
            a_r: Vec::with_capacity(len),
            a_y: Vec::with_capacity(len),
            q: Vec::with_capacity(len),
            keys: Vec::with_capacity(len * n),
            values: Vec::with_capacity(len * n),
            probs: Vec::with_capacity(len),
            o: Vec::with_capacity(len),
            b_xn: Vec::with_capacity(len),
            b_r: Vec::with_capacity(len),
            b_y: Vec::with_capacity(len),
            up: Vec::with_capacity(len),
            gate: Vec::with_capacity(len),
            hh: Vec::with_capacity(len),
        };
        for (t, xt) in x.iter_mut().enumerate() {
            let (a, a_xn, a_r) = rmsnorm(xt, &block.attn_norm);
            let q = block.w_q.matvec_unchecked(&a);
            tape.keys.extend(block.w_k.matvec_unchecked(&a));
            tape.values.extend(block.w_v.matvec_unchecked(&a));
            let (o, p) = attend(&q, &tape.keys, &tape.values, t + 1, heads);
            let attn = block.w_o.matvec_unchecked(&o);
            xt.iter_mut().zip(&attn).for_each(|(xi, d)| *xi += d);
            let (b, b_xn, b_r) = rmsnorm(xt, &block.mlp_norm);
            let up = block.w_up.matvec_unchecked(&b);
            let gate = block.w_gate.matvec_unchecked(&b);
            let hh: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * silu(*g)).collect();
            let down = block.w_down.matvec_unchecked(&hh);
            xt.iter_mut().zip(&down).for_each(|(xi, d)| *xi += d);
            tape.a_xn.push(a_xn);
            tape.a_r.push(a_r);
            tape.a_y.push(a);
            tape.q.push(q);
            tape.probs.push(p);
            tape.o.push(o);
            tape.b_xn.push(b_xn);
            tape.b_r.push(b_r);
            tape.b_y.push(b);
            tape.up.push(up);
            tape.gate.push(gate);
            tape.hh.push(hh);
        }
        tapes.push(tape);
    }

    let mut grad = ToyModel::zeros(*cfg);
    let scored = (len - 1) as f64;
    let mut loss = 0.0;
    let mut dx: Vec<Vec<f64>> = vec![vec![0.0; n]; len];
    for t in 0..len - 1 {
        let (f, f_xn, f_r) = rmsnorm(&x[t], &model.final_norm);
        let logits = model.lm_head.matvec_unchecked(&f);
        let target = seq[t + 1] as usize;
        loss += cross_entropy(&logits, target);
        let mut dlogits = logits;
        softmax_in_place(&mut dlogits);
        dlogits[target] -= 1.0;
        dlogits.iter_mut().for_each(|d| *d /= scored);
        outer_acc(&mut grad.lm_head, &dlogits, &f);
        let df = tmatvec(&model.lm_head, &dlogits);
        dx[t] = rmsnorm_backward(&df, &f_xn, f_r, &model.final_norm, &mut grad.final_norm);
    }

    for (b, block) in model.blocks.iter().enumerate().rev() {
        let tape = &tapes[b];
        let g = &mut grad.blocks[b];
        // MLP
        for (t, dxt) in dx.iter_mut().enumerate() {
            let dhh = tmatvec(&block.w_down, dxt);
            outer_acc(&mut g.w_down, dxt, &tape.hh[t]);
            let (up, gate) = (&tape.up[t], &tape.gate[t]);
            let mut dup = vec![0.0; up.len()];
            let mut dgate = vec![0.0; up.len()];
            for i in 0..up.len() {
                let sg = 1.0 / (1.0 + (-gate[i]).exp());
                dup[i] = dhh[i] * silu(gate[i]);
                dgate[i] = dhh[i] * up[i] * sg * (1.0 + gate[i] * (1.0 - sg));
            }
            outer_acc(&mut g.w_up, &dup, &tape.b_y[t]);
            outer_acc(&mut g.w_gate, &dgate, &tape.b_y[t]);
            let mut db = tmatvec(&block.w_up, &dup);
            axpy(1.0, &tmatvec(&block.w_gate, &dgate), &mut db);
            let back = rmsnorm_backward(
                &db,
                &tape.b_xn[t],
                tape.b_r[t],
                &block.mlp_norm,
                &mut g.mlp_norm,
            );
            axpy(1.0, &back, dxt);
        }
        // attention
        let mut dq = vec![vec![0.0; n]; len];
        let mut dk = vec![0.0; len * n];
        let mut dv = vec![0.0; len * n];
        for t in 0..len {
            let d_o = tmatvec(&block.w_o, &dx[t]);
            outer_acc(&mut g.w_o, &dx[t], &tape.o[t]);
            for h in 0..heads {
                let lo = h * dh;
                let doh = &d_o[lo..lo + dh];
                let p = &tape.probs[t][h];
                let dp: Vec<f64> = (0..=t)
                    .map(|s| dot(doh, &tape.values[s * n + lo..s * n + lo + dh]))
                    .collect();
                let pdp = dot(p, &dp);
                for s in 0..=t {
                    axpy(p[s], doh, &mut dv[s * n + lo..s * n + lo + dh]);
                    let dz = p[s] * (dp[s] - pdp) * scale;
                    axpy(
                        dz,
                        &tape.keys[s * n + lo..s * n + lo + dh],
                        &mut dq[t][lo..lo + dh],
                    );
                    axpy(
                        dz,
                        &tape.q[t][lo..lo + dh],
                        &mut dk[s * n + lo..s * n + lo + dh],
                    );
                }
            }
        }
        for t in 0..len {
            let a = &tape.a_y[t];
            let (dkt, dvt) = (&dk[t * n..(t + 1) * n], &dv[t * n..(t + 1) * n]);
            outer_acc(&mut g.w_q, &dq[t], a);
            outer_acc(&mut g.w_k, dkt, a);
            outer_acc(&mut g.w_v, dvt, a);
            let mut da = tmatvec(&block.w_q, &dq[t]);
            axpy(1.0, &tmatvec(&block.w_k, dkt), &mut da);
            axpy(1.0, &tmatvec(&block.w_v, dvt), &mut da);
            let back = rmsnorm_backward(
                &da,
                &tape.a_xn[t],
                tape.a_r[t],
                &block.attn_norm,
                &mut g.attn_norm,
            );
            axpy(1.0, &back, &mut dx[t]);
        }
    }
    for (t, &tok) in seq.iter().enumerate() {
        axpy(1.0, &dx[t], grad.tok_emb.row_mut(tok as usize));
        axpy(1.0, &dx[t], grad.pos_emb.row_mut(t));
    }
    debug_assert_eq!(LINEARS_PER_BLOCK, 7);
    Ok((loss / scored, grad))
}

/// Mean next-token loss over positions `0..len-1` via the inference path.
pub fn sequence_loss(model: &ToyModel, seq: &[u32]) -> Result<f64> {
    let logits = model.forward(seq, None, 0)?;
    let n = seq.len() - 1;
    if n == 0 {
        return Err(Error::invalid("sequence needs at least two tokens"));
    }
    Ok((0..n)
        .map(|t| cross_entropy(&logits[t], seq[t + 1] as usize))
        .sum::<f64>()
        / n as f64)
}
