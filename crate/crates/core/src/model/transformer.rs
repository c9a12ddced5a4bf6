//! Forward and backward passes of the policy transformer.
//!
//! All matrices are row-major `f64`. Activations of one example are cached
//! during the forward pass and consumed by [`backward`].

use super::params::BlockOffsets;
use super::PolicyModel;
use crate::codec::TokenId;
use crate::diffusion::LOG_FLOOR;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// One corrupted training example: the model sees `corrupted` and is scored
/// on `targets` at `masked_set`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub context: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub masked_set: Vec<usize>,
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x n x n` attention weights.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Cache {
    context: Vec<TokenId>,
    actions: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    z: Vec<f64>,
    rows: Vec<usize>,
}

pub(crate) struct ForwardPass {
    /// `rows.len() x K` softmax outputs for the requested action rows.
    pub probs: Vec<f64>,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Accumulates the input gradient into `dx` and parameter gradients into
/// `dgain` / `dbias`.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] += is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// `x (n x k) * w (k x m) + b`.
fn linear(x: &[f64], w: &[f64], b: &[f64], k: usize, m: usize) -> Vec<f64> {
    let n = x.len() / k;
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let o = &mut out[r * m..(r + 1) * m];
        o.copy_from_slice(b);
        for (p, &xv) in x[r * k..(r + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[p * m..(p + 1) * m];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// Gradients of [`linear`]: `dw += x^T dy`, `db += sum(dy)`, `dx += dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = x.len() / k;
    for r in 0..n {
        let dyr = &dy[r * m..(r + 1) * m];
        for (dbv, g) in db.iter_mut().zip(dyr) {
            *dbv += g;
        }
        for (p, &xv) in x[r * k..(r + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (dwv, g) in dw[p * m..(p + 1) * m].iter_mut().zip(dyr) {
                *dwv += xv * g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..n {
            let dyr = &dy[r * m..(r + 1) * m];
            for p in 0..k {
                let wr = &w[p * m..(p + 1) * m];
                dx[r * k + p] += wr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn slice(params: &[f64], offset: usize, len: usize) -> &[f64] {
    &params[offset..offset + len]
}

fn attention(model: &PolicyModel, q: &[f64], k: &[f64], v: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * n];
    let mut o = vec![0.0; n * d];
    for h in 0..heads {
        let col = h * dh;
        for i in 0..n {
            let qi = &q[i * d + col..i * d + col + dh];
            let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, pj) in prow.iter_mut().enumerate() {
                let kj = &k[j * d + col..j * d + col + dh];
                *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(prow);
            let oi = &mut o[i * d + col..i * d + col + dh];
            for (j, &pj) in prow.iter().enumerate() {
                let vj = &v[j * d + col..j * d + col + dh];
                for (ov, vv) in oi.iter_mut().zip(vj) {
                    *ov += pj * vv;
                }
            }
        }
    }
    (o, probs)
}

fn block_forward(model: &PolicyModel, b: &BlockOffsets, x: &mut [f64], n: usize) -> BlockCache {
    let cfg = model.config();
    let (d, f) = (cfg.embed_dim, cfg.ff_dim);
    let p = model.params();
    let (a, ln1) = layer_norm(x, slice(p, b.ln1_gain, d), slice(p, b.ln1_bias, d), d);
    let q = linear(&a, slice(p, b.wq, d * d), slice(p, b.bq, d), d, d);
    let k = linear(&a, slice(p, b.wk, d * d), slice(p, b.bk, d), d, d);
    let v = linear(&a, slice(p, b.wv, d * d), slice(p, b.bv, d), d, d);
    let (o, probs) = attention(model, &q, &k, &v, n);
    let attn_out = linear(&o, slice(p, b.wo, d * d), slice(p, b.bo, d), d, d);
    for (xv, av) in x.iter_mut().zip(&attn_out) {
        *xv += av;
    }
    let (c, ln2) = layer_norm(x, slice(p, b.ln2_gain, d), slice(p, b.ln2_bias, d), d);
    let u = linear(&c, slice(p, b.w1, d * f), slice(p, b.b1, f), d, f);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let ff_out = linear(&g, slice(p, b.w2, f * d), slice(p, b.b2, d), f, d);
    for (xv, fv) in x.iter_mut().zip(&ff_out) {
        *xv += fv;
    }
    BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        c,
        u,
        g,
    }
}

fn embed(model: &PolicyModel, context: &[TokenId], actions: &[TokenId]) -> Vec<f64> {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let lay = &model.layout;
    let p = model.params();
    let n = cfg.seq_len();
    let mut x = vec![0.0; n * d];
    for (pos, xr) in x.chunks_mut(d).enumerate() {
        let tok = if pos < cfg.context_len {
            lay.context_embed + context[pos] as usize * d
        } else {
            lay.action_embed + actions[pos - cfg.context_len] as usize * d
        };
        let pe = lay.position_embed + pos * d;
        for j in 0..d {
            xr[j] = p[tok + j] + p[pe + j];
        }
    }
    if let Some(base) = lay.condition_embed {
        let mut cond = vec![0.0; d];
        let first = cfg.context_len - cfg.condition_slots;
        for (slot, &t) in context[first..].iter().enumerate() {
            let at = base + (slot * cfg.context_vocab + t as usize) * d;
            for (c, v) in cond.iter_mut().zip(&p[at..at + d]) {
                *c += v;
            }
        }
        for xr in x[cfg.context_len * d..].chunks_mut(d) {
            for (xv, c) in xr.iter_mut().zip(&cond) {
                *xv += c;
            }
        }
    }
    x
}

/// Runs the model and returns softmax outputs for the action rows `rows`,
/// together with the activation cache needed by [`backward`].
pub(crate) fn forward_cached(
    model: &PolicyModel,
    context: &[TokenId],
    actions: &[TokenId],
    rows: &[usize],
) -> (ForwardPass, Cache) {
    let cfg = model.config();
    let (d, kc) = (cfg.embed_dim, cfg.num_classes);
    let n = cfg.seq_len();
    let lay = &model.layout;
    let p = model.params();
    let mut x = embed(model, context, actions);
    let blocks = lay
        .blocks
        .iter()
        .map(|b| block_forward(model, b, &mut x, n))
        .collect();
    let (z, final_ln) = layer_norm(
        &x,
        slice(p, lay.final_gain, d),
        slice(p, lay.final_bias, d),
        d,
    );
    let mut z_rows = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let at = (cfg.context_len + r) * d;
        z_rows.extend_from_slice(&z[at..at + d]);
    }
    let mut probs = linear(
        &z_rows,
        slice(p, lay.head_weight, d * kc),
        slice(p, lay.head_bias, kc),
        d,
        kc,
    );
    for row in probs.chunks_mut(kc) {
        softmax_in_place(row);
    }
    let cache = Cache {
        context: context.to_vec(),
        actions: actions.to_vec(),
        blocks,
        final_ln,
        z: z_rows,
        rows: rows.to_vec(),
    };
    (ForwardPass { probs }, cache)
}

pub(crate) fn forward(
    model: &PolicyModel,
    context: &[TokenId],
    actions: &[TokenId],
    rows: &[usize],
) -> ForwardPass {
    forward_cached(model, context, actions, rows).0
}

/// Backpropagates `dlogits` (`rows.len() x K`, gradient with respect to the
/// head's pre-softmax outputs) and accumulates into `grad`.
pub(crate) fn backward(model: &PolicyModel, cache: &Cache, dlogits: &[f64], grad: &mut [f64]) {
    let cfg = model.config();
    let (d, f, kc) = (cfg.embed_dim, cfg.ff_dim, cfg.num_classes);
    let n = cfg.seq_len();
    let lay = &model.layout;
    let p = model.params();

    let mut dz_rows = vec![0.0; cache.rows.len() * d];
    {
        let (head_w, head_b) = pair_mut(grad, lay.head_weight, lay.head_bias, d * kc);
        linear_backward(
            &cache.z,
            slice(p, lay.head_weight, d * kc),
            dlogits,
            d,
            kc,
            head_w,
            head_b,
            Some(&mut dz_rows),
        );
    }
    let mut dz = vec![0.0; n * d];
    for (i, &r) in cache.rows.iter().enumerate() {
        let at = (cfg.context_len + r) * d;
        for j in 0..d {
            dz[at + j] += dz_rows[i * d + j];
        }
    }
    let mut dx = vec![0.0; n * d];
    {
        let (dg, db) = pair_mut(grad, lay.final_gain, lay.final_bias, d);
        layer_norm_backward(&dz, &cache.final_ln, slice(p, lay.final_gain, d), d, &mut dx, dg, db);
    }

    for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        // Feed-forward sublayer; dx is the gradient of the block output.
        let mut dg = vec![0.0; n * f];
        {
            let (dw2, db2) = pair_mut(grad, b.w2, b.b2, f * d);
            linear_backward(&bc.g, slice(p, b.w2, f * d), &dx, f, d, dw2, db2, Some(&mut dg));
        }
        let du: Vec<f64> = dg.iter().zip(&bc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let mut dc = vec![0.0; n * d];
        {
            let (dw1, db1) = pair_mut(grad, b.w1, b.b1, d * f);
            linear_backward(&bc.c, slice(p, b.w1, d * f), &du, d, f, dw1, db1, Some(&mut dc));
        }
        {
            let (dgain, dbias) = pair_mut(grad, b.ln2_gain, b.ln2_bias, d);
            layer_norm_backward(&dc, &bc.ln2, slice(p, b.ln2_gain, d), d, &mut dx, dgain, dbias);
        }

        // Attention sublayer; dx now holds the gradient of the mid residual.
        let mut d_o = vec![0.0; n * d];
        {
            let (dwo, dbo) = pair_mut(grad, b.wo, b.bo, d * d);
            linear_backward(&bc.o, slice(p, b.wo, d * d), &dx, d, d, dwo, dbo, Some(&mut d_o));
        }
        let (dq, dk, dv) = attention_backward(model, bc, &d_o, n);
        let mut da = vec![0.0; n * d];
        for (w, bias, dy) in [(b.wq, b.bq, &dq), (b.wk, b.bk, &dk), (b.wv, b.bv, &dv)] {
            let (dw, db) = pair_mut(grad, w, bias, d * d);
            linear_backward(&bc.a, slice(p, w, d * d), dy, d, d, dw, db, Some(&mut da));
        }
        {
            let (dgain, dbias) = pair_mut(grad, b.ln1_gain, b.ln1_bias, d);
            layer_norm_backward(&da, &bc.ln1, slice(p, b.ln1_gain, d), d, &mut dx, dgain, dbias);
        }
    }

    for pos in 0..n {
        let tok = if pos < cfg.context_len {
            lay.context_embed + cache.context[pos] as usize * d
        } else {
            lay.action_embed + cache.actions[pos - cfg.context_len] as usize * d
        };
        let pe = lay.position_embed + pos * d;
        for j in 0..d {
            let g = dx[pos * d + j];
            grad[tok + j] += g;
            grad[pe + j] += g;
        }
    }
    if let Some(base) = lay.condition_embed {
        let mut dcond = vec![0.0; d];
        for row in dx[cfg.context_len * d..].chunks(d) {
            for (a, g) in dcond.iter_mut().zip(row) {
                *a += g;
            }
        }
        let first = cfg.context_len - cfg.condition_slots;
        for (slot, &t) in cache.context[first..].iter().enumerate() {
            let at = base + (slot * cfg.context_vocab + t as usize) * d;
            for (a, g) in grad[at..at + d].iter_mut().zip(&dcond) {
                *a += g;
            }
        }
    }
}

fn attention_backward(
    model: &PolicyModel,
    bc: &BlockCache,
    d_o: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..cfg.heads {
        let col = h * dh;
        for i in 0..n {
            let prow = &bc.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &d_o[i * d + col..i * d + col + dh];
            // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
            for j in 0..n {
                let vj = &bc.v[j * d + col..j * d + col + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let pij = prow[j];
                for (dvv, g) in dv[j * d + col..j * d + col + dh].iter_mut().zip(doi) {
                    *dvv += pij * g;
                }
            }
            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + col + c] += ds * bc.k[j * d + col + c];
                    dk[j * d + col + c] += ds * bc.q[i * d + col + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Disjoint mutable views of a weight tensor of `len` entries at `weight`
/// and the bias vector stored after it at `bias`.
fn pair_mut(grad: &mut [f64], weight: usize, bias: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(weight + len <= bias);
    let (lo, hi) = grad.split_at_mut(bias);
    (&mut lo[weight..weight + len], hi)
}

/// Loss (summed masked cross-entropy) of one example and, when `grad` is
/// given, its gradient scaled by `weight` accumulated into `grad`.
pub(crate) fn example_loss(
    model: &PolicyModel,
    example: &MaskedExample,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let kc = model.config().num_classes;
    if example.masked_set.is_empty() {
        return 0.0;
    }
    let (pass, cache) = forward_cached(model, &example.context, &example.corrupted, &example.masked_set);
    let mut loss = 0.0;
    let mut dlogits = pass.probs.clone();
    for (i, &pos) in example.masked_set.iter().enumerate() {
        let target = example.targets[pos] as usize;
        loss -= pass.probs[i * kc + target].max(LOG_FLOOR).ln();
        dlogits[i * kc + target] -= 1.0;
    }
    if let Some(grad) = grad {
        for g in &mut dlogits {
            *g *= weight;
        }
        backward(model, &cache, &dlogits, grad);
    }
    loss
}
