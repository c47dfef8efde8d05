//! Forward pass, response-masked cross-entropy, and exact backpropagation
//! for the toy decoder.
//!
//! Input layout for a sample with `P` (unpadded) instruction tokens and `l`
//! response tokens:
//!
//! ```text
//! position:  0      1 .. P          P+1 .. P+l-1
//! input:     START  x_1 .. x_P      y_1 .. y_{l-1}
//! target:    -      (P-1 unused)    positions P .. P+l-1 predict y_1 .. y_l
//! ```
//!
//! Each block is `x + Attn(LN(x))` followed by `x + MLP(LN(x))`, with causal
//! multi-head attention and a tanh-GELU MLP of width `4d`.

use super::ops::{
    add_assign, add_row_bias, col_sums_acc, dot, gelu, gelu_grad, log_sum_exp, matmul, matmul_nt,
    matmul_tn_acc, softmax_in_place,
};
use super::params::{LayerParams, ModelParams};
use super::{ModelError, TokenSequence};
use crate::gradient::{GradientBundle, Projection};
use crate::matrix::Matrix;

const LN_EPS: f64 = 1e-5;

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = gain[c] * h + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            let g = dyr[c] * gain[c];
            mean_dxhat += g;
            mean_dxhat_xhat += g * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let g = dyr[c] * gain[c];
            dx[r * d + c] = cache.rstd[r] * (g - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `len x len` row-major attention weights (upper triangle zero).
    probs: Vec<Vec<f64>>,
    z: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct Trace {
    len: usize,
    tokens: Vec<Option<usize>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    fin: Vec<f64>,
    logits: Vec<f64>,
}

/// Validated, pad-stripped view of a sample.
pub(crate) struct Prepared {
    /// `None` is the start slot.
    tokens: Vec<Option<usize>>,
    /// Input position whose logits predict `targets[0]`.
    first_target: usize,
    targets: Vec<usize>,
}

pub(crate) fn prepare(
    params: &ModelParams,
    sample: &TokenSequence,
) -> Result<Prepared, ModelError> {
    let cfg = &params.config;
    if sample.vocab_size != cfg.vocab_size {
        return Err(ModelError::VocabMismatch {
            model: cfg.vocab_size,
            sample: sample.vocab_size,
        });
    }
    sample.validate()?;
    let instruction: Vec<usize> = sample.unpadded_instruction().map(|t| t as usize).collect();
    let total = instruction.len() + sample.response.len();
    if total > cfg.max_seq_len {
        return Err(ModelError::ContextOverflow {
            len: total,
            max: cfg.max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.push(None);
    tokens.extend(instruction.iter().map(|&t| Some(t)));
    let resp = &sample.response;
    tokens.extend(resp[..resp.len() - 1].iter().map(|&t| Some(t as usize)));
    Ok(Prepared {
        tokens,
        first_target: instruction.len(),
        targets: resp.iter().map(|&t| t as usize).collect(),
    })
}

fn forward(params: &ModelParams, prep: &Prepared) -> Trace {
    let cfg = &params.config;
    let d = cfg.model_dim;
    let f = cfg.mlp_dim();
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let len = prep.tokens.len();

    let mut x = vec![0.0; len * d];
    for (t, tok) in prep.tokens.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        match tok {
            Some(id) => row.copy_from_slice(&params.token_embedding[id * d..(id + 1) * d]),
            None => row.copy_from_slice(&params.start_embedding),
        }
        add_assign(row, &params.position_embedding[t * d..(t + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, d, &lp.ln1_gain, &lp.ln1_bias);
        let q = matmul(&a, &lp.w_q, len, d, d);
        let k = matmul(&a, &lp.w_k, len, d, d);
        let v = matmul(&a, &lp.w_v, len, d, d);
        let mut z = vec![0.0; len * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * hd;
            let mut p = vec![0.0; len * len];
            for t in 0..len {
                let qt = &q[t * d + off..t * d + off + hd];
                let row = &mut p[t * len..t * len + t + 1];
                for (s, slot) in row.iter_mut().enumerate() {
                    *slot = dot(qt, &k[s * d + off..s * d + off + hd]) * scale;
                }
                softmax_in_place(row);
                let zt = &mut z[t * d + off..t * d + off + hd];
                for (s, &w) in row.iter().enumerate() {
                    for (zc, &vc) in zt.iter_mut().zip(&v[s * d + off..s * d + off + hd]) {
                        *zc += w * vc;
                    }
                }
            }
            probs.push(p);
        }
        let attn = matmul(&z, &lp.w_o, len, d, d);
        add_assign(&mut x, &attn);

        let (b, ln2) = layer_norm(&x, d, &lp.ln2_gain, &lp.ln2_bias);
        let mut h_pre = matmul(&b, &lp.w_fc, len, d, f);
        add_row_bias(&mut h_pre, &lp.b_fc);
        let h_act: Vec<f64> = h_pre.iter().map(|&u| gelu(u)).collect();
        let mut m = matmul(&h_act, &lp.w_proj, len, f, d);
        add_row_bias(&mut m, &lp.b_proj);
        add_assign(&mut x, &m);

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            z,
            ln2,
            b,
            h_pre,
            h_act,
        });
    }

    let (fin, lnf) = layer_norm(&x, d, &params.lnf_gain, &params.lnf_bias);
    let mut logits = matmul(&fin, &params.w_head, len, d, cfg.vocab_size);
    add_row_bias(&mut logits, &params.b_head);
    Trace {
        len,
        tokens: prep.tokens.clone(),
        layers,
        lnf,
        fin,
        logits,
    }
}

/// Mean of `-log p(target)` over the response positions.
fn masked_loss(trace: &Trace, prep: &Prepared, vocab: usize) -> f64 {
    let total: f64 = prep
        .targets
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let t = prep.first_target + j;
            let row = &trace.logits[t * vocab..(t + 1) * vocab];
            log_sum_exp(row) - row[y]
        })
        .sum();
    total / prep.targets.len() as f64
}

/// `-log softmax(logits)[target]`
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `softmax(logits) - onehot(target)`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p[target] -= 1.0;
    p
}

/// Response-masked, length-normalized cross-entropy of `sample`.
pub fn forward_loss(params: &ModelParams, sample: &TokenSequence) -> Result<f64, ModelError> {
    let prep = prepare(params, sample)?;
    let trace = forward(params, &prep);
    Ok(masked_loss(&trace, &prep, params.config.vocab_size))
}

/// Logits at every input position, `len x vocab` row-major.
pub fn forward_logits(
    params: &ModelParams,
    sample: &TokenSequence,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let prep = prepare(params, sample)?;
    let trace = forward(params, &prep);
    Ok(trace
        .logits
        .chunks_exact(params.config.vocab_size)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Loss and the gradient of every parameter, packed in a [`ModelParams`]
/// with the same shapes.
pub fn loss_and_grads(
    params: &ModelParams,
    sample: &TokenSequence,
) -> Result<(f64, ModelParams), ModelError> {
    let prep = prepare(params, sample)?;
    let trace = forward(params, &prep);
    let loss = masked_loss(&trace, &prep, params.config.vocab_size);
    Ok((loss, backward(params, &prep, &trace)))
}

fn backward(params: &ModelParams, prep: &Prepared, tr: &Trace) -> ModelParams {
    let cfg = &params.config;
    let d = cfg.model_dim;
    let f = cfg.mlp_dim();
    let vocab = cfg.vocab_size;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let len = tr.len;
    let mut g = ModelParams::zeros(*cfg);

    let inv_l = 1.0 / prep.targets.len() as f64;
    let mut dlogits = vec![0.0; len * vocab];
    for (j, &y) in prep.targets.iter().enumerate() {
        let t = prep.first_target + j;
        let grad = cross_entropy_grad(&tr.logits[t * vocab..(t + 1) * vocab], y);
        for (o, gv) in dlogits[t * vocab..(t + 1) * vocab].iter_mut().zip(grad) {
            *o = gv * inv_l;
        }
    }

    matmul_tn_acc(&tr.fin, &dlogits, len, d, vocab, &mut g.w_head);
    col_sums_acc(&dlogits, vocab, &mut g.b_head);
    let dfin = matmul_nt(&dlogits, &params.w_head, len, vocab, d);
    let mut dx = layer_norm_backward(
        &dfin,
        &tr.lnf,
        &params.lnf_gain,
        d,
        &mut g.lnf_gain,
        &mut g.lnf_bias,
    );

    for (li, (lp, cache)) in params.layers.iter().zip(&tr.layers).enumerate().rev() {
        let lg: &mut LayerParams = &mut g.layers[li];

        // MLP branch
        matmul_tn_acc(&cache.h_act, &dx, len, f, d, &mut lg.w_proj);
        col_sums_acc(&dx, d, &mut lg.b_proj);
        let mut dh = matmul_nt(&dx, &lp.w_proj, len, d, f);
        for (dv, &u) in dh.iter_mut().zip(&cache.h_pre) {
            *dv *= gelu_grad(u);
        }
        matmul_tn_acc(&cache.b, &dh, len, d, f, &mut lg.w_fc);
        col_sums_acc(&dh, f, &mut lg.b_fc);
        let db = matmul_nt(&dh, &lp.w_fc, len, f, d);
        let dmid = layer_norm_backward(
            &db,
            &cache.ln2,
            &lp.ln2_gain,
            d,
            &mut lg.ln2_gain,
            &mut lg.ln2_bias,
        );
        add_assign(&mut dx, &dmid);

        // attention branch
        matmul_tn_acc(&cache.z, &dx, len, d, d, &mut lg.w_o);
        let dz = matmul_nt(&dx, &lp.w_o, len, d, d);
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        for h in 0..heads {
            let off = h * hd;
            let p = &cache.probs[h];
            let mut dp = vec![0.0; len];
            for t in 0..len {
                let dzt = &dz[t * d + off..t * d + off + hd];
                let prow = &p[t * len..t * len + t + 1];
                for s in 0..=t {
                    dp[s] = dot(dzt, &cache.v[s * d + off..s * d + off + hd]);
                    let w = prow[s];
                    for (dvc, &g) in dv[s * d + off..s * d + off + hd].iter_mut().zip(dzt) {
                        *dvc += w * g;
                    }
                }
                let weighted: f64 = prow.iter().zip(&dp[..=t]).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    let ds = prow[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[t * d + off + c] += ds * cache.k[s * d + off + c];
                        dk[s * d + off + c] += ds * cache.q[t * d + off + c];
                    }
                }
            }
        }
        matmul_tn_acc(&cache.a, &dq, len, d, d, &mut lg.w_q);
        matmul_tn_acc(&cache.a, &dk, len, d, d, &mut lg.w_k);
        matmul_tn_acc(&cache.a, &dv, len, d, d, &mut lg.w_v);
        let mut da = matmul_nt(&dq, &lp.w_q, len, d, d);
        add_assign(&mut da, &matmul_nt(&dk, &lp.w_k, len, d, d));
        add_assign(&mut da, &matmul_nt(&dv, &lp.w_v, len, d, d));
        let din = layer_norm_backward(
            &da,
            &cache.ln1,
            &lp.ln1_gain,
            d,
            &mut lg.ln1_gain,
            &mut lg.ln1_bias,
        );
        add_assign(&mut dx, &din);
    }

    for (t, tok) in tr.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        add_assign(&mut g.position_embedding[t * d..(t + 1) * d], row);
        match tok {
            Some(id) => add_assign(&mut g.token_embedding[id * d..(id + 1) * d], row),
            None => add_assign(&mut g.start_embedding, row),
        }
    }
    g
}

/// Per-sample Q/K/V/O weight gradients of the response loss.
pub fn backward_gradients(
    params: &ModelParams,
    sample: &TokenSequence,
    sample_id: &str,
) -> Result<GradientBundle, ModelError> {
    let (loss, grads) = loss_and_grads(params, sample)?;
    Ok(projection_bundle(sample_id, loss, &grads))
}

pub(crate) fn projection_bundle(sample_id: &str, loss: f64, grads: &ModelParams) -> GradientBundle {
    let d = grads.config.model_dim;
    let layers = grads
        .layers
        .iter()
        .map(|lg| {
            Projection::ALL.map(|p| Matrix::from_vec_unchecked(d, d, lg.projection(p).to_vec()))
        })
        .collect();
    GradientBundle::new(sample_id, loss, layers).expect("toy model gradients are well formed")
}
