use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::{attend_row, ContextModel, LmConfig, Model, Weights};
use crate::corpus::{EncodedDialog, Role, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Dialogs per optimizer step.
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 2000,
            patience: 5,
            eval_every: 100,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub best_step: usize,
    pub best_dev_ppl: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,dev_ppl\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.train_loss, r.dev_ppl));
        }
        out
    }
}

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per row `n_heads × window_len` probabilities, concatenated.
    probs: Vec<f64>,
    prob_offsets: Vec<usize>,
    ctx: Vec<f64>,
    mask1: Option<Vec<f64>>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Loss and gradient for one dialog processed from a fresh state.
///
/// Targets are `tokens[1..]`; `scored[t]` selects which targets contribute.
/// Adds `scale · ∂(Σ CE)/∂θ` into `grad` and returns `(Σ CE, #scored)`.
pub(crate) fn loss_and_grad(
    w: &Weights,
    cfg: &LmConfig,
    tokens: &[TokenId],
    scored: &[bool],
    scale: f64,
    grad: &mut Weights,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> (f64, usize) {
    let t_len = tokens.len();
    let (d, di, nv, nh) = (cfg.d_model, cfg.d_inner, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.head_dim();
    let win = cfg.window();
    let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let mut x = Vec::with_capacity(t_len * d);
    for &t in tokens {
        x.extend_from_slice(&w.tok_emb[t as usize * d..(t as usize + 1) * d]);
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let (a, ln1_xhat, ln1_rstd) = ops::layer_norm(&x, d, &lw.ln1_g, &lw.ln1_b);
        let q = ops::matmul(&a, t_len, d, &lw.wq, d);
        let k = ops::matmul(&a, t_len, d, &lw.wk, d);
        let v = ops::matmul(&a, t_len, d, &lw.wv, d);
        let mut probs = Vec::new();
        let mut prob_offsets = Vec::with_capacity(t_len);
        let mut ctx = vec![0.0; t_len * d];
        for i in 0..t_len {
            let ws = cfg.window_start(i);
            let n = i - ws + 1;
            prob_offsets.push(probs.len());
            let off = probs.len();
            probs.resize(off + nh * n, 0.0);
            attend_row(
                cfg,
                &lw.rel_bias,
                &q[i * d..(i + 1) * d],
                &k[ws * d..(i + 1) * d],
                &v[ws * d..(i + 1) * d],
                n - 1,
                &mut probs[off..],
                &mut ctx[i * d..(i + 1) * d],
            );
        }
        let mut attn_out = ops::matmul(&ctx, t_len, d, &lw.wo, d);
        let mask1 = (p_drop > 0.0).then(|| dropout_mask(t_len * d, p_drop, dropout_rng.as_deref_mut().unwrap()));
        if let Some(m) = &mask1 {
            attn_out.iter_mut().zip(m).for_each(|(o, m)| *o *= m);
        }
        ops::add_assign(&mut x, &attn_out);

        let (b, ln2_xhat, ln2_rstd) = ops::layer_norm(&x, d, &lw.ln2_g, &lw.ln2_b);
        let mut u = ops::matmul(&b, t_len, d, &lw.w1, di);
        ops::add_bias(&mut u, &lw.b1);
        let g: Vec<f64> = u.iter().map(|&z| ops::gelu(z)).collect();
        let mut ff = ops::matmul(&g, t_len, di, &lw.w2, d);
        ops::add_bias(&mut ff, &lw.b2);
        let mask2 = (p_drop > 0.0).then(|| dropout_mask(t_len * d, p_drop, dropout_rng.as_deref_mut().unwrap()));
        if let Some(m) = &mask2 {
            ff.iter_mut().zip(m).for_each(|(o, m)| *o *= m);
        }
        ops::add_assign(&mut x, &ff);

        caches.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            a,
            q,
            k,
            v,
            probs,
            prob_offsets,
            ctx,
            mask1,
            ln2_xhat,
            ln2_rstd,
            b,
            u,
            g,
            mask2,
        });
    }

    let (y, lnf_xhat, lnf_rstd) = ops::layer_norm(&x, d, &w.lnf_g, &w.lnf_b);
    let mut logits = ops::matmul(&y, t_len, d, &w.out_w, nv);
    ops::add_bias(&mut logits, &w.out_b);

    // Cross-entropy and d(loss)/d(logits).
    let mut loss = 0.0;
    let mut count = 0;
    let mut dlogits = vec![0.0; t_len * nv];
    for i in 0..t_len.saturating_sub(1) {
        if !scored[i + 1] {
            continue;
        }
        let target = tokens[i + 1] as usize;
        let row = &logits[i * nv..(i + 1) * nv];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[target];
        count += 1;
        let drow = &mut dlogits[i * nv..(i + 1) * nv];
        for (dz, &z) in drow.iter_mut().zip(row) {
            *dz = (z - lse).exp() * scale;
        }
        drow[target] -= scale;
    }

    // Backward.
    ops::matmul_at_acc(&y, t_len, d, &dlogits, nv, &mut grad.out_w);
    ops::col_sum_acc(&dlogits, nv, &mut grad.out_b);
    let dy = ops::matmul_bt(&dlogits, t_len, nv, &w.out_w, d);
    let mut dx = ops::layer_norm_backward(
        &dy,
        &lnf_xhat,
        &lnf_rstd,
        d,
        &w.lnf_g,
        &mut grad.lnf_g,
        &mut grad.lnf_b,
    );

    let scale_qk = 1.0 / (dh as f64).sqrt();
    for li in (0..cfg.n_layers).rev() {
        let lw = &w.layers[li];
        let c = &caches[li];
        let gl = &mut grad.layers[li];

        // Feedforward sublayer.
        let mut dff = dx.clone();
        if let Some(m) = &c.mask2 {
            dff.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        ops::matmul_at_acc(&c.g, t_len, di, &dff, d, &mut gl.w2);
        ops::col_sum_acc(&dff, d, &mut gl.b2);
        let mut du = ops::matmul_bt(&dff, t_len, d, &lw.w2, di);
        for (g, &z) in du.iter_mut().zip(&c.u) {
            *g *= ops::gelu_grad(z);
        }
        ops::matmul_at_acc(&c.b, t_len, d, &du, di, &mut gl.w1);
        ops::col_sum_acc(&du, di, &mut gl.b1);
        let db = ops::matmul_bt(&du, t_len, di, &lw.w1, d);
        let dx1_ln = ops::layer_norm_backward(
            &db,
            &c.ln2_xhat,
            &c.ln2_rstd,
            d,
            &lw.ln2_g,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        );
        ops::add_assign(&mut dx, &dx1_ln);

        // Attention sublayer.
        let mut dao = dx.clone();
        if let Some(m) = &c.mask1 {
            dao.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
        }
        ops::matmul_at_acc(&c.ctx, t_len, d, &dao, d, &mut gl.wo);
        let dctx = ops::matmul_bt(&dao, t_len, d, &lw.wo, d);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        for i in 0..t_len {
            let ws = cfg.window_start(i);
            let n = i - ws + 1;
            let off = c.prob_offsets[i];
            for h in 0..nh {
                let ph = &c.probs[off + h * n..off + (h + 1) * n];
                let hs = h * dh..(h + 1) * dh;
                let dctx_h = &dctx[i * d + hs.start..i * d + hs.end];
                let mut dp = vec![0.0; n];
                for j in 0..n {
                    let row = (ws + j) * d;
                    dp[j] = ops::dot(dctx_h, &c.v[row + hs.start..row + hs.end]);
                    for (g, &gc) in dv[row + hs.start..row + hs.end].iter_mut().zip(dctx_h) {
                        *g += ph[j] * gc;
                    }
                }
                let weighted: f64 = ph.iter().zip(&dp).map(|(p, g)| p * g).sum();
                for j in 0..n {
                    let ds = ph[j] * (dp[j] - weighted);
                    if ds == 0.0 {
                        continue;
                    }
                    gl.rel_bias[h * win + (n - 1 - j)] += ds;
                    let row = (ws + j) * d;
                    for e in hs.clone() {
                        dq[i * d + e] += ds * scale_qk * c.k[row + e];
                        dk[row + e] += ds * scale_qk * c.q[i * d + e];
                    }
                }
            }
        }
        ops::matmul_at_acc(&c.a, t_len, d, &dq, d, &mut gl.wq);
        ops::matmul_at_acc(&c.a, t_len, d, &dk, d, &mut gl.wk);
        ops::matmul_at_acc(&c.a, t_len, d, &dv, d, &mut gl.wv);
        let mut da = ops::matmul_bt(&dq, t_len, d, &lw.wq, d);
        ops::add_assign(&mut da, &ops::matmul_bt(&dk, t_len, d, &lw.wk, d));
        ops::add_assign(&mut da, &ops::matmul_bt(&dv, t_len, d, &lw.wv, d));
        let dx_ln = ops::layer_norm_backward(
            &da,
            &c.ln1_xhat,
            &c.ln1_rstd,
            d,
            &lw.ln1_g,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        );
        ops::add_assign(&mut dx, &dx_ln);
    }

    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        ops::add_assign(&mut grad.tok_emb[t * d..(t + 1) * d], &dx[i * d..(i + 1) * d]);
    }

    (loss, count)
}

/// Mean cross-entropy over all targets of `dialogs` and its gradient.
pub fn batch_loss_and_grad(model: &Model, dialogs: &[&EncodedDialog]) -> (f64, Weights) {
    let total: usize = dialogs.iter().map(|d| d.tokens.len().saturating_sub(1)).sum();
    let mut grad = Weights::zeros(&model.config);
    let scale = 1.0 / total.max(1) as f64;
    let mut loss = 0.0;
    for d in dialogs {
        let scored = vec![true; d.tokens.len()];
        let (l, _) = loss_and_grad(&model.weights, &model.config, &d.tokens, &scored, scale, &mut grad, None);
        loss += l;
    }
    (loss * scale, grad)
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    fn new(cfg: &LmConfig) -> Self {
        Self {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut Weights, g: &Weights, opt: &TrainOptions) {
        self.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.t);
        let bc2 = 1.0 - opt.beta2.powi(self.t);
        for (((p, g), m), v) in w
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let update = opt.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
                p[i] = (p[i] - update) as f32 as f64;
            }
        }
    }
}

fn check_tokens(dialogs: &[EncodedDialog], vocab_size: usize) -> Result<()> {
    for d in dialogs {
        if let Some(&id) = d.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
    }
    Ok(())
}

/// Adam training with periodic dev evaluation and early stopping. Each dialog
/// is processed from a fresh state. Returns the best-dev-perplexity weights.
pub fn train(
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    config: LmConfig,
    opt: &TrainOptions,
) -> Result<(Model, TrainLog)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Validation("training needs non-empty train and dev splits".into()));
    }
    if opt.batch_size == 0 || opt.eval_every == 0 || opt.max_steps == 0 {
        return Err(Error::Config("batch_size, eval_every and max_steps must be positive".into()));
    }
    check_tokens(train, config.vocab_size)?;
    check_tokens(dev, config.vocab_size)?;

    let mut model = Model::new(config)?;
    let cfg = model.config.clone();
    let mut adam = Adam::new(&cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_da7a);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd50_90d7);
    let mut order: Vec<usize> = Vec::new();

    let mut log = TrainLog {
        best_dev_ppl: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.weights.clone();
    let mut bad_evals = 0;
    let mut window_loss = 0.0;
    let mut window_steps = 0;

    for step in 1..=opt.max_steps {
        let mut batch = Vec::with_capacity(opt.batch_size);
        while batch.len() < opt.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            batch.push(&train[order.pop().unwrap()]);
        }

        let total: usize = batch.iter().map(|d| d.tokens.len().saturating_sub(1)).sum();
        let scale = 1.0 / total.max(1) as f64;
        let mut grad = Weights::zeros(&cfg);
        let mut loss = 0.0;
        for d in &batch {
            let scored = vec![true; d.tokens.len()];
            let rng = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
            loss += loss_and_grad(&model.weights, &cfg, &d.tokens, &scored, scale, &mut grad, rng).0;
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut model.weights, &grad, opt);
        window_loss += loss;
        window_steps += 1;

        if step % opt.eval_every == 0 || step == opt.max_steps {
            let dev_ppl = perplexity(&model, dev, false)?;
            log.rows.push(TrainLogRow {
                step,
                train_loss: window_loss / window_steps as f64,
                dev_ppl,
            });
            log::debug!("step {step}: train loss {:.4}, dev ppl {dev_ppl:.4}", window_loss / window_steps as f64);
            window_loss = 0.0;
            window_steps = 0;
            if dev_ppl < log.best_dev_ppl {
                log.best_dev_ppl = dev_ppl;
                log.best_step = step;
                best = model.weights.clone();
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals > opt.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    model.weights = best;
    Ok((model, log))
}

/// `exp(mean CE)` given the probability assigned to each scored target.
pub fn perplexity_from_target_probs(probs: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for p in probs {
        nll -= p.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("perplexity over zero scored tokens".into()));
    }
    Ok((nll / n as f64).exp())
}

/// Perplexity over next-token targets, resetting state per dialog.
/// `assistant_only` scores only Assistant-tagged targets.
pub fn perplexity<M: ContextModel>(model: &M, dialogs: &[EncodedDialog], assistant_only: bool) -> Result<f64> {
    let mut target_probs = Vec::new();
    for d in dialogs {
        let mut state = model.reset_state();
        let out = model.forward(&d.tokens, &mut state)?;
        for t in 1..d.tokens.len() {
            if assistant_only && d.roles[t] != Role::Assistant {
                continue;
            }
            target_probs.push(out.distributions[t - 1].probs()[d.tokens[t] as usize]);
        }
    }
    perplexity_from_target_probs(target_probs)
}
