use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{add_bias, add_col_sums, dot, matmul, matmul_a_bt, matmul_at_b};
use super::{bernoulli_keep, LayerOffsets, ModelError, ModelParams};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Mlm,
    Classify,
}

/// A padded batch, row-major `batch_size × seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// Original ids at selected MLM positions, `None` elsewhere.
    pub mlm_targets: Option<Vec<Option<u32>>>,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    /// Stacks equally long rows.
    pub fn from_rows(rows: &[(&[u32], &[u8])]) -> Result<Self, ModelError> {
        let seq_len = rows.first().map_or(0, |r| r.0.len());
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut mask = Vec::with_capacity(rows.len() * seq_len);
        for (r_ids, r_mask) in rows {
            if r_ids.len() != seq_len || r_mask.len() != seq_len {
                return Err(shape("rows differ in length"));
            }
            ids.extend_from_slice(r_ids);
            mask.extend_from_slice(r_mask);
        }
        Ok(Batch { batch_size: rows.len(), seq_len, ids, mask, mlm_targets: None, labels: None })
    }

    pub fn with_targets(mut self, targets: Vec<Option<u32>>) -> Self {
        self.mlm_targets = Some(targets);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Self {
        self.labels = Some(labels);
        self
    }

    fn row(&self, b: usize) -> core::ops::Range<usize> {
        b * self.seq_len..(b + 1) * self.seq_len
    }

    fn validate(&self, params: &ModelParams, objective: Objective) -> Result<(), ModelError> {
        let cfg = &params.config;
        let cells = self.batch_size * self.seq_len;
        if self.ids.len() != cells || self.mask.len() != cells {
            return Err(shape("ids/mask size differs from batch_size × seq_len"));
        }
        if self.seq_len > cfg.max_len {
            return Err(shape(&format!("seq_len {} exceeds max_len {}", self.seq_len, cfg.max_len)));
        }
        if let Some(bad) = self.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(shape(&format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(shape("mask entries must be 0 or 1"));
        }
        match objective {
            Objective::Mlm => {
                let targets = self.mlm_targets.as_ref().ok_or_else(|| shape("mlm objective needs targets"))?;
                if targets.len() != cells {
                    return Err(shape("targets size differs from batch_size × seq_len"));
                }
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        if *t as usize >= cfg.vocab_size {
                            return Err(shape(&format!("target id {t} outside vocabulary")));
                        }
                        if self.mask[i] == 0 {
                            return Err(shape("target at a padding position"));
                        }
                    }
                }
            }
            Objective::Classify => {
                let labels = self.labels.as_ref().ok_or_else(|| shape("classify objective needs labels"))?;
                if labels.len() != self.batch_size || labels.iter().any(|&y| y > 1) {
                    return Err(shape("labels must be one 0/1 value per example"));
                }
                if (0..self.batch_size).any(|b| self.mask[self.row(b)].iter().all(|&m| m == 0)) {
                    return Err(shape("classification example without tokens"));
                }
            }
        }
        Ok(())
    }
}

fn shape(msg: &str) -> ModelError {
    ModelError::Shape(String::from(msg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLogits {
    pub example: usize,
    /// Position in the padded row.
    pub position: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub loss: f64,
    /// Per-example P(case), classify objective only.
    pub probabilities: Vec<f64>,
    /// Vocabulary logits at every target position, mlm objective only.
    pub masked_logits: Vec<MaskedLogits>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, n × n attention probabilities.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    bb: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    drop2: Option<Vec<f64>>,
}

struct ExampleCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    drop0: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Vec<f64>,
}

fn slice(v: &[f64], off: usize, len: usize) -> &[f64] {
    &v[off..off + len]
}

fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dgamma/dbeta.
fn layer_norm_back(dy: &[f64], d: usize, cache: &LnCache, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// ln(1 + e^z)
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn gather_head(x: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head_add(dst: &mut [f64], src: &[f64], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        for c in 0..dh {
            dst[i * d + h * dh + c] += src[i * dh + c];
        }
    }
}

fn dropout_mask(rng: &mut Rng, len: usize, p: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..len).map(|_| if bernoulli_keep(rng, p) { scale } else { 0.0 }).collect()
}

fn linear(x: &[f64], n: usize, w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    matmul(&mut out, x, w, n, d_in, d_out);
    add_bias(&mut out, b);
    out
}

fn example_forward(
    params: &ModelParams,
    ids: &[u32],
    positions: &[usize],
    mut dropout: Option<&mut Rng>,
) -> ExampleCache {
    let cfg = &params.config;
    let lay = &params.layout;
    let w = &params.values;
    let (n, d, ff, nh) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let p = cfg.dropout_p;
    let mut draw = |len: usize| match dropout.as_deref_mut() {
        Some(rng) if p > 0.0 => Some(dropout_mask(rng, len, p)),
        _ => None,
    };

    let mut x = vec![0.0; n * d];
    for (i, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
        let e = slice(w, lay.tok_emb + id as usize * d, d);
        let pe = slice(w, lay.pos_emb + pos * d, d);
        for j in 0..d {
            x[i * d + j] = e[j] + pe[j];
        }
    }
    let drop0 = draw(n * d);
    if let Some(m) = &drop0 {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &lay.layers {
        let (a, ln1) = layer_norm(&x, d, slice(w, lo.ln1_g, d), slice(w, lo.ln1_b, d));
        let q = linear(&a, n, slice(w, lo.wq, d * d), slice(w, lo.bq, d), d, d);
        let k = linear(&a, n, slice(w, lo.wk, d * d), slice(w, lo.bk, d), d, d);
        let v = linear(&a, n, slice(w, lo.wv, d * d), slice(w, lo.bv, d), d, d);
        let mut ctx = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = gather_head(&q, n, d, h, dh);
            let kh = gather_head(&k, n, d, h, dh);
            let vh = gather_head(&v, n, d, h, dh);
            let mut s = vec![0.0; n * n];
            matmul_a_bt(&mut s, &qh, &kh, n, dh, n);
            for row in s.chunks_exact_mut(n) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            let mut ch = vec![0.0; n * dh];
            matmul(&mut ch, &s, &vh, n, n, dh);
            scatter_head_add(&mut ctx, &ch, n, d, h, dh);
            probs.push(s);
        }
        let mut o = linear(&ctx, n, slice(w, lo.wo, d * d), slice(w, lo.bo, d), d, d);
        let drop1 = draw(n * d);
        if let Some(m) = &drop1 {
            o.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);

        let (bb, ln2) = layer_norm(&x, d, slice(w, lo.ln2_g, d), slice(w, lo.ln2_b, d));
        let u = linear(&bb, n, slice(w, lo.w1, d * ff), slice(w, lo.b1, ff), d, ff);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut f = linear(&g, n, slice(w, lo.w2, ff * d), slice(w, lo.b2, d), ff, d);
        let drop2 = draw(n * d);
        if let Some(m) = &drop2 {
            f.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);

        layers.push(LayerCache { ln1, a, q, k, v, probs, ctx, drop1, ln2, bb, u, g, drop2 });
    }
    let (hf, lnf) = layer_norm(&x, d, slice(w, lay.lnf_g, d), slice(w, lay.lnf_b, d));
    ExampleCache { ids: ids.to_vec(), positions: positions.to_vec(), drop0, layers, lnf, hf }
}

fn layer_backward(
    params: &ModelParams,
    lo: &LayerOffsets,
    c: &LayerCache,
    mut dx: Vec<f64>,
    grads: &mut [f64],
) -> Vec<f64> {
    let cfg = &params.config;
    let w = &params.values;
    let (d, ff, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
    let dh = cfg.head_dim();
    let n = dx.len() / d;
    let scale = 1.0 / libm::sqrt(dh as f64);

    // Feed-forward branch.
    let mut df = dx.clone();
    if let Some(m) = &c.drop2 {
        df.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    matmul_at_b(&mut grads[lo.w2..lo.w2 + ff * d], &c.g, &df, n, ff, d);
    add_col_sums(&mut grads[lo.b2..lo.b2 + d], &df);
    let mut dg = vec![0.0; n * ff];
    matmul_a_bt(&mut dg, &df, slice(w, lo.w2, ff * d), n, d, ff);
    let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
    matmul_at_b(&mut grads[lo.w1..lo.w1 + d * ff], &c.bb, &du, n, d, ff);
    add_col_sums(&mut grads[lo.b1..lo.b1 + ff], &du);
    let mut dbb = vec![0.0; n * d];
    matmul_a_bt(&mut dbb, &du, slice(w, lo.w1, d * ff), n, ff, d);
    let (dg2, db2) = split_pair(grads, lo.ln2_g, lo.ln2_b, d);
    let dx_ln2 = layer_norm_back(&dbb, d, &c.ln2, slice(w, lo.ln2_g, d), dg2, db2);
    dx.iter_mut().zip(&dx_ln2).for_each(|(a, b)| *a += b);

    // Attention branch.
    let mut d_o = dx.clone();
    if let Some(m) = &c.drop1 {
        d_o.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    matmul_at_b(&mut grads[lo.wo..lo.wo + d * d], &c.ctx, &d_o, n, d, d);
    add_col_sums(&mut grads[lo.bo..lo.bo + d], &d_o);
    let mut dctx = vec![0.0; n * d];
    matmul_a_bt(&mut dctx, &d_o, slice(w, lo.wo, d * d), n, d, d);

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for h in 0..nh {
        let probs = &c.probs[h];
        let qh = gather_head(&c.q, n, d, h, dh);
        let kh = gather_head(&c.k, n, d, h, dh);
        let vh = gather_head(&c.v, n, d, h, dh);
        let dch = gather_head(&dctx, n, d, h, dh);
        let mut dp = vec![0.0; n * n];
        matmul_a_bt(&mut dp, &dch, &vh, n, dh, n);
        let mut dvh = vec![0.0; n * dh];
        matmul_at_b(&mut dvh, probs, &dch, n, n, dh);
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let pr = &probs[i * n..(i + 1) * n];
            let dpr = &dp[i * n..(i + 1) * n];
            let inner = dot(pr, dpr);
            for j in 0..n {
                ds[i * n + j] = pr[j] * (dpr[j] - inner) * scale;
            }
        }
        let mut dqh = vec![0.0; n * dh];
        matmul(&mut dqh, &ds, &kh, n, n, dh);
        let mut dkh = vec![0.0; n * dh];
        matmul_at_b(&mut dkh, &ds, &qh, n, n, dh);
        scatter_head_add(&mut dq, &dqh, n, d, h, dh);
        scatter_head_add(&mut dk, &dkh, n, d, h, dh);
        scatter_head_add(&mut dv, &dvh, n, d, h, dh);
    }
    let mut da = vec![0.0; n * d];
    for (dproj, wo, bo) in [(&dq, lo.wq, lo.bq), (&dk, lo.wk, lo.bk), (&dv, lo.wv, lo.bv)] {
        matmul_at_b(&mut grads[wo..wo + d * d], &c.a, dproj, n, d, d);
        add_col_sums(&mut grads[bo..bo + d], dproj);
        matmul_a_bt(&mut da, dproj, slice(w, wo, d * d), n, d, d);
    }
    let (dg1, db1) = split_pair(grads, lo.ln1_g, lo.ln1_b, d);
    let dx_ln1 = layer_norm_back(&da, d, &c.ln1, slice(w, lo.ln1_g, d), dg1, db1);
    dx.iter_mut().zip(&dx_ln1).for_each(|(a, b)| *a += b);
    dx
}

/// Two disjoint mutable tensor slices, `first` before `second`.
fn split_pair(grads: &mut [f64], first: usize, second: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(first + len <= second);
    let (lo, hi) = grads.split_at_mut(second);
    (&mut lo[first..first + len], &mut hi[..len])
}

fn example_backward(params: &ModelParams, cache: &ExampleCache, dhf: &[f64], grads: &mut [f64]) {
    let cfg = &params.config;
    let lay = &params.layout;
    let d = cfg.d_model;
    let (dgf, dbf) = split_pair(grads, lay.lnf_g, lay.lnf_b, d);
    let mut dx = layer_norm_back(dhf, d, &cache.lnf, slice(&params.values, lay.lnf_g, d), dgf, dbf);
    for (lo, c) in lay.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(params, lo, c, dx, grads);
    }
    if let Some(m) = &cache.drop0 {
        dx.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    for (i, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = lay.tok_emb + id as usize * d;
        let pe = lay.pos_emb + pos * d;
        for j in 0..d {
            grads[te + j] += row[j];
            grads[pe + j] += row[j];
        }
    }
}

/// MLM logits for one final hidden row.
fn mlm_logits(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    let cfg = &params.config;
    let lay = &params.layout;
    let w = &params.values;
    let (d, vsz) = (cfg.d_model, cfg.vocab_size);
    let mut logits = slice(w, lay.mlm_b, vsz).to_vec();
    match lay.mlm_w {
        None => {
            for (v, l) in logits.iter_mut().enumerate() {
                *l += dot(h, slice(w, lay.tok_emb + v * d, d));
            }
        }
        Some(off) => matmul(&mut logits, h, slice(w, off, d * vsz), 1, d, vsz),
    }
    logits
}

/// Returns cross-entropy and accumulates head gradients scaled by `weight`;
/// the hidden-state gradient is added to `dh`.
fn mlm_head_backward(
    params: &ModelParams,
    h: &[f64],
    logits: &[f64],
    target: u32,
    weight: f64,
    grads: &mut [f64],
    dh: &mut [f64],
) {
    let cfg = &params.config;
    let lay = &params.layout;
    let w = &params.values;
    let (d, vsz) = (cfg.d_model, cfg.vocab_size);
    let lse = log_sum_exp(logits);
    let dlogits: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(v, &l)| (libm::exp(l - lse) - f64::from(u8::from(v == target as usize))) * weight)
        .collect();
    add_col_sums(&mut grads[lay.mlm_b..lay.mlm_b + vsz], &dlogits);
    match lay.mlm_w {
        None => {
            for (v, &g) in dlogits.iter().enumerate() {
                let e = lay.tok_emb + v * d;
                for j in 0..d {
                    grads[e + j] += g * h[j];
                    dh[j] += g * w[e + j];
                }
            }
        }
        Some(off) => {
            matmul_at_b(&mut grads[off..off + d * vsz], h, &dlogits, 1, d, vsz);
            matmul_a_bt(dh, &dlogits, slice(w, off, d * vsz), 1, vsz, d);
        }
    }
}

fn real_positions(mask: &[u8]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect()
}

struct Pass {
    loss: f64,
    output: ForwardOutput,
    grads: Option<Vec<f64>>,
}

fn run(
    params: &ModelParams,
    batch: &Batch,
    objective: Objective,
    want_grads: bool,
    mut dropout: Option<&mut Rng>,
) -> Result<Pass, ModelError> {
    batch.validate(params, objective)?;
    let d = params.config.d_model;
    let mut grads = want_grads.then(|| vec![0.0; params.layout.len]);
    let mut output = ForwardOutput { loss: 0.0, probabilities: Vec::new(), masked_logits: Vec::new() };
    let mut loss = 0.0;

    let n_targets = batch.mlm_targets.as_ref().map_or(0, |t| t.iter().flatten().count());
    for b in 0..batch.batch_size {
        let row = batch.row(b);
        let positions = real_positions(&batch.mask[row.clone()]);
        let targets: Vec<(usize, u32)> = match (objective, &batch.mlm_targets) {
            (Objective::Mlm, Some(t)) => positions
                .iter()
                .enumerate()
                .filter_map(|(r, &pos)| t[row.start + pos].map(|id| (r, id)))
                .collect(),
            _ => Vec::new(),
        };
        if objective == Objective::Mlm && targets.is_empty() {
            continue;
        }
        let ids: Vec<u32> = positions.iter().map(|&p| batch.ids[row.start + p]).collect();
        let cache = example_forward(params, &ids, &positions, dropout.as_deref_mut());
        let mut dhf = vec![0.0; cache.hf.len()];

        match objective {
            Objective::Mlm => {
                let weight = 1.0 / n_targets as f64;
                for &(r, target) in &targets {
                    let h = &cache.hf[r * d..(r + 1) * d];
                    let logits = mlm_logits(params, h);
                    loss += (log_sum_exp(&logits) - logits[target as usize]) * weight;
                    if let Some(g) = grads.as_mut() {
                        mlm_head_backward(params, h, &logits, target, weight, g, &mut dhf[r * d..(r + 1) * d]);
                    }
                    output.masked_logits.push(MaskedLogits { example: b, position: positions[r], logits });
                }
            }
            Objective::Classify => {
                let lay = &params.layout;
                let w = &params.values;
                let y = f64::from(batch.labels.as_ref().expect("validated")[b]);
                let h = &cache.hf[..d];
                let z = dot(h, slice(w, lay.cls_w, d)) + w[lay.cls_b];
                let weight = 1.0 / batch.batch_size as f64;
                loss += (softplus(z) - y * z) * weight;
                let p = sigmoid(z);
                output.probabilities.push(p);
                if let Some(g) = grads.as_mut() {
                    let dz = (p - y) * weight;
                    for j in 0..d {
                        g[lay.cls_w + j] += dz * h[j];
                        dhf[j] += dz * w[lay.cls_w + j];
                    }
                    g[lay.cls_b] += dz;
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            example_backward(params, &cache, &dhf, g);
        }
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    if let Some(g) = &grads {
        if let Some(t) = params.layout.tensors.iter().find(|t| g[t.range()].iter().any(|v| !v.is_finite())) {
            return Err(ModelError::NonFiniteGradient(t.name.clone()));
        }
    }
    output.loss = loss;
    Ok(Pass { loss, output, grads })
}

/// Evaluation-mode forward pass (no dropout).
///
/// MLM loss is the mean cross-entropy over all target positions of the
/// batch (0 when there are none); classification loss is the mean binary
/// cross-entropy of the head applied to the first real position.
pub fn forward(params: &ModelParams, batch: &Batch, objective: Objective) -> Result<ForwardOutput, ModelError> {
    run(params, batch, objective, false, None).map(|p| p.output)
}

/// Analytic gradient of the evaluation-mode loss.
pub fn backward(params: &ModelParams, batch: &Batch, objective: Objective) -> Result<Vec<f64>, ModelError> {
    run(params, batch, objective, true, None).map(|p| p.grads.expect("requested"))
}

/// Loss and gradient in one pass; dropout is applied when `dropout` is given
/// and the config's rate is positive.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    objective: Objective,
    dropout: Option<&mut Rng>,
) -> Result<(f64, Vec<f64>), ModelError> {
    run(params, batch, objective, true, dropout).map(|p| (p.loss, p.grads.expect("requested")))
}

/// Attention probabilities over the real positions of one row, indexed
/// `[layer][head][query * n + key]`.
pub fn attention_maps(params: &ModelParams, ids: &[u32], mask: &[u8]) -> Vec<Vec<Vec<f64>>> {
    let positions = real_positions(mask);
    let real: Vec<u32> = positions.iter().map(|&p| ids[p]).collect();
    let cache = example_forward(params, &real, &positions, None);
    cache.layers.into_iter().map(|l| l.probs).collect()
}
