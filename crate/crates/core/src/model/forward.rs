use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// Inputs of the user tower, as embedding-table rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserFeatures {
    pub history: Vec<usize>,
    pub profile: usize,
}

/// Inputs specific to one candidate category, as embedding-table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateFeatures {
    pub category: usize,
    pub crossing: [usize; 2],
}

fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU derivative; the kink at 0 gets 0.
fn relu_mask(pre: &Array1<f64>, upstream: &Array1<f64>) -> Array1<f64> {
    upstream * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention weights, `L × L`, rows sum to one.
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Array2<f64>,
    pub heads: Vec<HeadCache>,
    pub concat: Array2<f64>,
    pub output: Array2<f64>,
}

/// Multi-head self-attention without masking or positional encoding.
pub fn mhsa_forward(x: ArrayView2<f64>, params: &ModelParams) -> AttentionCache {
    let hp = &params.hparams;
    let scale = 1.0 / (hp.d_head as f64).sqrt();
    let len = x.nrows();
    let mut concat = Array2::zeros((len, hp.heads * hp.d_head));
    let mut heads = Vec::with_capacity(hp.heads);
    for h in 0..hp.heads {
        let q = x.dot(&params.w_q[h]);
        let k = x.dot(&params.w_k[h]);
        let v = x.dot(&params.w_v[h]);
        let probs = softmax_rows(&(q.dot(&k.t()) * scale));
        let head = probs.dot(&v);
        concat
            .slice_mut(s![.., h * hp.d_head..(h + 1) * hp.d_head])
            .assign(&head);
        heads.push(HeadCache { q, k, v, probs });
    }
    let output = concat.dot(&params.w_o);
    AttentionCache {
        input: x.to_owned(),
        heads,
        concat,
        output,
    }
}

pub fn mhsa(x: ArrayView2<f64>, params: &ModelParams) -> Array2<f64> {
    mhsa_forward(x, params).output
}

#[derive(Debug, Clone)]
pub struct UserCache {
    pub attention: AttentionCache,
    /// `e_P ⊕ sum-pool(E^s)`.
    pub fused: Array1<f64>,
    pub z1: Array1<f64>,
    pub h1: Array1<f64>,
    pub z2: Array1<f64>,
    pub e_u: Array1<f64>,
}

fn user_ffn(attention: AttentionCache, profile: ArrayView1<f64>, params: &ModelParams) -> UserCache {
    let pooled = attention.output.sum_axis(Axis(0));
    let mut fused = Array1::zeros(profile.len() + pooled.len());
    fused.slice_mut(s![..profile.len()]).assign(&profile);
    fused.slice_mut(s![profile.len()..]).assign(&pooled);
    let z1 = fused.dot(&params.w1) + &params.b1;
    let h1 = relu(&z1);
    let z2 = h1.dot(&params.w2) + &params.b2;
    let e_u = relu(&z2);
    UserCache {
        attention,
        fused,
        z1,
        h1,
        z2,
        e_u,
    }
}

/// `e_u = ReLU(ReLU((e_P ⊕ Σ_rows E^s) W1 + b1) W2 + b2)`.
pub fn user_net(es: ArrayView2<f64>, profile: ArrayView1<f64>, params: &ModelParams) -> Array1<f64> {
    let attention = AttentionCache {
        input: Array2::zeros((0, 0)),
        heads: Vec::new(),
        concat: Array2::zeros((0, 0)),
        output: es.to_owned(),
    };
    user_ffn(attention, profile, params).e_u
}

pub fn check_user(user: &UserFeatures, params: &ModelParams) -> Result<()> {
    if user.history.is_empty() || user.history.len() > params.hparams.max_history {
        return Err(Error::Config(format!(
            "history length {} outside 1..={}",
            user.history.len(),
            params.hparams.max_history
        )));
    }
    check_row("item_emb", &params.item_emb, user.history.iter().copied())?;
    check_row("prof_emb", &params.prof_emb, [user.profile])
}

pub fn check_candidate(cand: &CandidateFeatures, params: &ModelParams) -> Result<()> {
    check_row("cat_emb", &params.cat_emb, [cand.category])?;
    check_row("cross_emb", &params.cross_emb, cand.crossing)
}

fn check_row(table: &'static str, emb: &Array2<f64>, rows: impl IntoIterator<Item = usize>) -> Result<()> {
    for index in rows {
        if index >= emb.nrows() {
            return Err(Error::TokenOutOfRange {
                table,
                index,
                rows: emb.nrows(),
            });
        }
    }
    Ok(())
}

/// Full user tower forward; tokens must already be range-checked.
pub fn user_forward(user: &UserFeatures, params: &ModelParams) -> UserCache {
    let x = params.item_emb.select(Axis(0), &user.history);
    let attention = mhsa_forward(x.view(), params);
    user_ffn(attention, params.prof_emb.row(user.profile), params)
}

#[derive(Debug, Clone)]
pub struct CategoryCache {
    pub row: usize,
    pub z3: Array1<f64>,
    pub h3: Array1<f64>,
    pub z4: Array1<f64>,
    pub out: Array1<f64>,
}

/// `e'_c = ReLU(ReLU(e_c W3 + b3) W4 + b4)`.
pub fn category_net(e_c: ArrayView1<f64>, params: &ModelParams) -> Array1<f64> {
    category_ffn(usize::MAX, e_c, params).out
}

fn category_ffn(row: usize, e_c: ArrayView1<f64>, params: &ModelParams) -> CategoryCache {
    let z3 = e_c.dot(&params.w3) + &params.b3;
    let h3 = relu(&z3);
    let z4 = h3.dot(&params.w4) + &params.b4;
    let out = relu(&z4);
    CategoryCache { row, z3, h3, z4, out }
}

pub fn category_forward(row: usize, params: &ModelParams) -> CategoryCache {
    category_ffn(row, params.cat_emb.row(row), params)
}

/// Element-wise sum of the two crossing-token embeddings.
pub fn crossing_embedding(crossing: [usize; 2], params: &ModelParams) -> Array1<f64> {
    &params.cross_emb.row(crossing[0]) + &params.cross_emb.row(crossing[1])
}

/// `wᵀ(e_F ⊕ ⟨e_u, e'_c⟩) + b`.
pub fn wide_score(e_u: ArrayView1<f64>, e_c: ArrayView1<f64>, crossing: [usize; 2], params: &ModelParams) -> f64 {
    let d_cross = params.hparams.d_cross;
    let cross = crossing_embedding(crossing, params);
    let w = &params.wide_w;
    w.slice(s![..d_cross]).dot(&cross) + w[d_cross] * e_u.dot(&e_c) + params.wide_bias()
}

pub fn score(user: &UserFeatures, cand: &CandidateFeatures, params: &ModelParams) -> Result<f64> {
    check_user(user, params)?;
    check_candidate(cand, params)?;
    let e_u = user_forward(user, params).e_u;
    let e_c = category_forward(cand.category, params).out;
    Ok(wide_score(e_u.view(), e_c.view(), cand.crossing, params))
}

/// Scores many candidates for one user, computing `e_u` once.
pub fn score_categories(user: &UserFeatures, cands: &[CandidateFeatures], params: &ModelParams) -> Result<Vec<f64>> {
    check_user(user, params)?;
    for c in cands {
        check_candidate(c, params)?;
    }
    let e_u = user_forward(user, params).e_u;
    Ok(cands
        .iter()
        .map(|c| {
            let e_c = category_forward(c.category, params).out;
            wide_score(e_u.view(), e_c.view(), c.crossing, params)
        })
        .collect())
}

/// Category-tower outputs for every category row, reused across users.
#[derive(Debug, Clone)]
pub struct CategoryTable {
    pub outputs: Array2<f64>,
}

impl CategoryTable {
    pub fn build(params: &ModelParams) -> Self {
        let n = params.cat_emb.nrows();
        let mut outputs = Array2::zeros((n, params.hparams.d_match));
        for r in 0..n {
            outputs.row_mut(r).assign(&category_forward(r, params).out);
        }
        CategoryTable { outputs }
    }

    pub fn score(&self, e_u: ArrayView1<f64>, cand: &CandidateFeatures, params: &ModelParams) -> f64 {
        wide_score(e_u, self.outputs.row(cand.category), cand.crossing, params)
    }
}

/// Backpropagates `d_out = ∂L/∂e'_c` through the category tower.
pub fn category_backward(cache: &CategoryCache, d_out: &Array1<f64>, params: &ModelParams, grads: &mut Gradients) {
    let dz4 = relu_mask(&cache.z4, d_out);
    grads.w4 += &outer(&cache.h3, &dz4);
    grads.b4 += &dz4;
    let dh3 = params.w4.dot(&dz4);
    let dz3 = relu_mask(&cache.z3, &dh3);
    let e_c = params.cat_emb.row(cache.row);
    grads.w3 += &outer(&e_c.to_owned(), &dz3);
    grads.b3 += &dz3;
    let de_c = params.w3.dot(&dz3);
    grads.cat_emb.add_row(cache.row, de_c.view());
}

/// Backpropagates `d_e_u = ∂L/∂e_u` through the user FFN, sum-pool and MHSA
/// down to item and profile embedding rows.
pub fn user_backward(
    user: &UserFeatures,
    cache: &UserCache,
    d_e_u: &Array1<f64>,
    params: &ModelParams,
    grads: &mut Gradients,
) {
    let hp = &params.hparams;
    let dz2 = relu_mask(&cache.z2, d_e_u);
    grads.w2 += &outer(&cache.h1, &dz2);
    grads.b2 += &dz2;
    let dh1 = params.w2.dot(&dz2);
    let dz1 = relu_mask(&cache.z1, &dh1);
    grads.w1 += &outer(&cache.fused, &dz1);
    grads.b1 += &dz1;
    let d_fused = params.w1.dot(&dz1);
    grads.prof_emb.add_row(user.profile, d_fused.slice(s![..hp.d_prof]));
    let d_pooled = d_fused.slice(s![hp.d_prof..]);

    let att = &cache.attention;
    let len = att.input.nrows();
    // Sum-pool broadcasts the same gradient to every row.
    let d_out = d_pooled.broadcast((len, hp.d_model)).expect("pool width").to_owned();
    grads.w_o += &att.concat.t().dot(&d_out);
    let d_concat = d_out.dot(&params.w_o.t());
    let scale = 1.0 / (hp.d_head as f64).sqrt();
    let x = &att.input;
    let mut dx = Array2::<f64>::zeros((len, hp.d_model));
    for (h, hc) in att.heads.iter().enumerate() {
        let d_head = d_concat.slice(s![.., h * hp.d_head..(h + 1) * hp.d_head]);
        let d_probs = d_head.dot(&hc.v.t());
        let dv = hc.probs.t().dot(&d_head);
        // softmax Jacobian per row: dS = P ⊙ (dP − Σ_j dP·P)
        let row_dot = (&d_probs * &hc.probs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = &hc.probs * &(&d_probs - &row_dot) * scale;
        let dq = d_scores.dot(&hc.k);
        let dk = d_scores.t().dot(&hc.q);
        grads.w_q[h] += &x.t().dot(&dq);
        grads.w_k[h] += &x.t().dot(&dk);
        grads.w_v[h] += &x.t().dot(&dv);
        dx += &dq.dot(&params.w_q[h].t());
        dx += &dk.dot(&params.w_k[h].t());
        dx += &dv.dot(&params.w_v[h].t());
    }
    for (pos, &row) in user.history.iter().enumerate() {
        grads.item_emb.add_row(row, dx.row(pos));
    }
}

/// Backpropagates `g = ∂L/∂f` for one candidate through the wide layer.
/// Returns `(∂L/∂e_u, ∂L/∂e'_c)` contributions.
pub fn wide_backward(
    g: f64,
    e_u: ArrayView1<f64>,
    e_c: ArrayView1<f64>,
    crossing: [usize; 2],
    params: &ModelParams,
    grads: &mut Gradients,
) -> (Array1<f64>, Array1<f64>) {
    let d_cross = params.hparams.d_cross;
    let cross = crossing_embedding(crossing, params);
    {
        let mut gw = grads.wide_w.slice_mut(s![..d_cross]);
        gw.scaled_add(g, &cross);
    }
    grads.wide_w[d_cross] += g * e_u.dot(&e_c);
    grads.wide_b[0] += g;
    let w_cross = params.wide_w.slice(s![..d_cross]).to_owned() * g;
    for r in crossing {
        grads.cross_emb.add_row(r, w_cross.view());
    }
    let coef = g * params.wide_w[d_cross];
    (e_c.to_owned() * coef, e_u.to_owned() * coef)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}
