//! The next-category scorer: a wide linear layer over crossing features and the
//! dot product of a self-attentive user tower with a category tower.
//!
//! ```text
//! history items ─ emb ─ MHSA ─ sum-pool ─┐
//! profile ─────── emb ───────────────────┴─ concat ─ FFN ─ e_u ─┐
//! target category ─ emb ─ FFN ─ e'_c ───────────────────────────┴─ <·,·> ─┐
//! crossing tokens ─ emb ─ sum ─────────────────────────────────────────────┴─ wide ─ f(u,c)
//! ```
//!
//! Parameters live in `f64`; checkpoints store `f32`.

mod checkpoint;
mod forward;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::*;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samples::{CROSS_VOCAB, PROFILE_VOCAB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    pub max_history: usize,
    /// Item embedding width, also the MHSA output width.
    pub d_model: usize,
    pub d_cat: usize,
    pub d_cross: usize,
    pub d_prof: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Width of `e_u` and `e'_c`.
    pub d_match: usize,
    pub ffn_hidden: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            max_history: 20,
            d_model: 64,
            d_cat: 32,
            d_cross: 8,
            d_prof: 8,
            heads: 8,
            d_head: 8,
            d_match: 32,
            ffn_hidden: 64,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("max_history", self.max_history),
            ("d_model", self.d_model),
            ("d_cat", self.d_cat),
            ("d_cross", self.d_cross),
            ("d_prof", self.d_prof),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("d_match", self.d_match),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "heads * d_head = {} != d_model = {}",
                self.heads * self.d_head,
                self.d_model
            )));
        }
        Ok(())
    }

    pub(crate) fn entries(&self) -> [(&'static str, usize); 9] {
        [
            ("max_history", self.max_history),
            ("d_model", self.d_model),
            ("d_cat", self.d_cat),
            ("d_cross", self.d_cross),
            ("d_prof", self.d_prof),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("d_match", self.d_match),
            ("ffn_hidden", self.ffn_hidden),
        ]
    }
}

/// Embedding-table row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: usize,
    pub categories: usize,
    pub cross: usize,
    pub profiles: usize,
}

impl Vocab {
    pub fn new(items: usize, categories: usize) -> Self {
        Vocab {
            items,
            categories,
            cross: CROSS_VOCAB,
            profiles: PROFILE_VOCAB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hparams: HyperParams,
    pub vocab: Vocab,
    pub item_emb: Array2<f64>,
    pub cat_emb: Array2<f64>,
    pub cross_emb: Array2<f64>,
    pub prof_emb: Array2<f64>,
    /// Per head, `d_model × d_head`.
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    /// `(heads·d_head) × d_model`.
    pub w_o: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
    /// `d_cross` crossing weights followed by the weight of the tower dot product.
    pub wide_w: Array1<f64>,
    /// Length-1 wide bias.
    pub wide_b: Array1<f64>,
}

/// Names of the four embedding tables; gradients for these are row-sparse.
pub const EMBEDDING_TABLES: [&str; 4] = ["item_emb", "cat_emb", "cross_emb", "prof_emb"];

/// Tensor names and shapes in checkpoint order.
pub fn tensor_layout(hp: &HyperParams, vocab: &Vocab) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("item_emb".to_string(), vec![vocab.items, hp.d_model]),
        ("cat_emb".to_string(), vec![vocab.categories, hp.d_cat]),
        ("cross_emb".to_string(), vec![vocab.cross, hp.d_cross]),
        ("prof_emb".to_string(), vec![vocab.profiles, hp.d_prof]),
    ];
    for kind in ["q", "k", "v"] {
        for h in 0..hp.heads {
            out.push((format!("attn.{kind}.{h}"), vec![hp.d_model, hp.d_head]));
        }
    }
    out.extend([
        ("attn.o".to_string(), vec![hp.heads * hp.d_head, hp.d_model]),
        ("user.w1".to_string(), vec![hp.d_prof + hp.d_model, hp.ffn_hidden]),
        ("user.b1".to_string(), vec![hp.ffn_hidden]),
        ("user.w2".to_string(), vec![hp.ffn_hidden, hp.d_match]),
        ("user.b2".to_string(), vec![hp.d_match]),
        ("cat.w3".to_string(), vec![hp.d_cat, hp.ffn_hidden]),
        ("cat.b3".to_string(), vec![hp.ffn_hidden]),
        ("cat.w4".to_string(), vec![hp.ffn_hidden, hp.d_match]),
        ("cat.b4".to_string(), vec![hp.d_match]),
        ("wide.w".to_string(), vec![hp.d_cross + 1]),
        ("wide.b".to_string(), vec![1]),
    ]);
    out
}

fn is_bias(name: &str) -> bool {
    name.contains(".b")
}

impl ModelParams {
    pub fn zeros(hparams: HyperParams, vocab: Vocab) -> Result<Self> {
        hparams.validate()?;
        let hp = hparams;
        let z2 = |r, c| Array2::zeros((r, c));
        let heads = |_| Array2::zeros((hp.d_model, hp.d_head));
        Ok(ModelParams {
            hparams,
            vocab,
            item_emb: z2(vocab.items, hp.d_model),
            cat_emb: z2(vocab.categories, hp.d_cat),
            cross_emb: z2(vocab.cross, hp.d_cross),
            prof_emb: z2(vocab.profiles, hp.d_prof),
            w_q: (0..hp.heads).map(heads).collect(),
            w_k: (0..hp.heads).map(heads).collect(),
            w_v: (0..hp.heads).map(heads).collect(),
            w_o: z2(hp.heads * hp.d_head, hp.d_model),
            w1: z2(hp.d_prof + hp.d_model, hp.ffn_hidden),
            b1: Array1::zeros(hp.ffn_hidden),
            w2: z2(hp.ffn_hidden, hp.d_match),
            b2: Array1::zeros(hp.d_match),
            w3: z2(hp.d_cat, hp.ffn_hidden),
            b3: Array1::zeros(hp.ffn_hidden),
            w4: z2(hp.ffn_hidden, hp.d_match),
            b4: Array1::zeros(hp.d_match),
            wide_w: Array1::zeros(hp.d_cross + 1),
            wide_b: Array1::zeros(1),
        })
    }

    /// Glorot-uniform weights and embeddings, zero biases.
    pub fn init(hparams: HyperParams, vocab: Vocab, seed: u64) -> Result<Self> {
        if vocab.items == 0 || vocab.categories == 0 || vocab.cross == 0 || vocab.profiles == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        let mut params = Self::zeros(hparams, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, data) in params.tensors_mut() {
            if is_bias(&name) {
                continue;
            }
            let (fan_in, fan_out) = match shape.as_slice() {
                [r, c] => (*r, *c),
                [n] => (*n, 1),
                _ => unreachable!("tensors are 1-d or 2-d"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for x in data.iter_mut() {
                *x = dist.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn wide_bias(&self) -> f64 {
        self.wide_b[0]
    }

    /// `(name, shape, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<&[f64]> = vec![
            slice2(&self.item_emb),
            slice2(&self.cat_emb),
            slice2(&self.cross_emb),
            slice2(&self.prof_emb),
        ];
        for set in [&self.w_q, &self.w_k, &self.w_v] {
            out.extend(set.iter().map(slice2));
        }
        out.extend([
            slice2(&self.w_o),
            slice2(&self.w1),
            slice1(&self.b1),
            slice2(&self.w2),
            slice1(&self.b2),
            slice2(&self.w3),
            slice1(&self.b3),
            slice2(&self.w4),
            slice1(&self.b4),
            slice1(&self.wide_w),
            slice1(&self.wide_b),
        ]);
        tensor_layout(&self.hparams, &self.vocab)
            .into_iter()
            .zip(out)
            .map(|((n, s), d)| (n, s, d))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let layout = tensor_layout(&self.hparams, &self.vocab);
        let mut out: Vec<&mut [f64]> = vec![
            slice2_mut(&mut self.item_emb),
            slice2_mut(&mut self.cat_emb),
            slice2_mut(&mut self.cross_emb),
            slice2_mut(&mut self.prof_emb),
        ];
        out.extend(self.w_q.iter_mut().map(slice2_mut));
        out.extend(self.w_k.iter_mut().map(slice2_mut));
        out.extend(self.w_v.iter_mut().map(slice2_mut));
        out.extend([
            slice2_mut(&mut self.w_o),
            slice2_mut(&mut self.w1),
            slice1_mut(&mut self.b1),
            slice2_mut(&mut self.w2),
            slice1_mut(&mut self.b2),
            slice2_mut(&mut self.w3),
            slice1_mut(&mut self.b3),
            slice2_mut(&mut self.w4),
            slice1_mut(&mut self.b4),
            slice1_mut(&mut self.wide_w),
            slice1_mut(&mut self.wide_b),
        ]);
        layout.into_iter().zip(out).map(|((n, s), d)| (n, s, d)).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Gradient rows of an embedding table; rows never touched are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: BTreeMap<usize, Array1<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        SparseRows {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, row: usize) -> &mut Array1<f64> {
        let width = self.width;
        self.rows.entry(row).or_insert_with(|| Array1::zeros(width))
    }

    pub fn add_row(&mut self, row: usize, values: ndarray::ArrayView1<f64>) {
        *self.row_mut(row) += &values;
    }

    pub fn add_assign(&mut self, other: &SparseRows) {
        for (&r, v) in &other.rows {
            self.add_row(r, v.view());
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.rows.values_mut() {
            *v *= s;
        }
    }

    pub fn to_dense(&self, rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, self.width));
        for (&r, v) in &self.rows {
            out.row_mut(r).assign(v);
        }
        out
    }
}

/// Gradient view of one tensor.
pub enum TensorGrad<'a> {
    Dense(&'a [f64]),
    Rows(&'a SparseRows),
}

/// Gradients with the same layout as [`ModelParams`]; embedding tables are row-sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub item_emb: SparseRows,
    pub cat_emb: SparseRows,
    pub cross_emb: SparseRows,
    pub prof_emb: SparseRows,
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    pub w_o: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
    pub wide_w: Array1<f64>,
    pub wide_b: Array1<f64>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        let hp = &params.hparams;
        let z = ModelParams::zeros(hp.to_owned(), Vocab::new(0, 0)).expect("validated hparams");
        Gradients {
            item_emb: SparseRows::new(hp.d_model),
            cat_emb: SparseRows::new(hp.d_cat),
            cross_emb: SparseRows::new(hp.d_cross),
            prof_emb: SparseRows::new(hp.d_prof),
            w_q: z.w_q,
            w_k: z.w_k,
            w_v: z.w_v,
            w_o: z.w_o,
            w1: z.w1,
            b1: z.b1,
            w2: z.w2,
            b2: z.b2,
            w3: z.w3,
            b3: z.b3,
            w4: z.w4,
            b4: z.b4,
            wide_w: z.wide_w,
            wide_b: z.wide_b,
        }
    }

    pub fn add_assign(&mut self, o: &Gradients) {
        self.item_emb.add_assign(&o.item_emb);
        self.cat_emb.add_assign(&o.cat_emb);
        self.cross_emb.add_assign(&o.cross_emb);
        self.prof_emb.add_assign(&o.prof_emb);
        for (a, b) in self.w_q.iter_mut().zip(&o.w_q) {
            *a += b;
        }
        for (a, b) in self.w_k.iter_mut().zip(&o.w_k) {
            *a += b;
        }
        for (a, b) in self.w_v.iter_mut().zip(&o.w_v) {
            *a += b;
        }
        self.w_o += &o.w_o;
        self.w1 += &o.w1;
        self.b1 += &o.b1;
        self.w2 += &o.w2;
        self.b2 += &o.b2;
        self.w3 += &o.w3;
        self.b3 += &o.b3;
        self.w4 += &o.w4;
        self.b4 += &o.b4;
        self.wide_w += &o.wide_w;
        self.wide_b += &o.wide_b;
    }

    pub fn scale(&mut self, s: f64) {
        self.item_emb.scale(s);
        self.cat_emb.scale(s);
        self.cross_emb.scale(s);
        self.prof_emb.scale(s);
        for m in self.w_q.iter_mut().chain(&mut self.w_k).chain(&mut self.w_v) {
            *m *= s;
        }
        self.w_o *= s;
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
        self.w3 *= s;
        self.b3 *= s;
        self.w4 *= s;
        self.b4 *= s;
        self.wide_w *= s;
        self.wide_b *= s;
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<TensorGrad<'_>> {
        let mut out = vec![
            TensorGrad::Rows(&self.item_emb),
            TensorGrad::Rows(&self.cat_emb),
            TensorGrad::Rows(&self.cross_emb),
            TensorGrad::Rows(&self.prof_emb),
        ];
        for set in [&self.w_q, &self.w_k, &self.w_v] {
            out.extend(set.iter().map(|m| TensorGrad::Dense(slice2(m))));
        }
        out.extend([
            TensorGrad::Dense(slice2(&self.w_o)),
            TensorGrad::Dense(slice2(&self.w1)),
            TensorGrad::Dense(slice1(&self.b1)),
            TensorGrad::Dense(slice2(&self.w2)),
            TensorGrad::Dense(slice1(&self.b2)),
            TensorGrad::Dense(slice2(&self.w3)),
            TensorGrad::Dense(slice1(&self.b3)),
            TensorGrad::Dense(slice2(&self.w4)),
            TensorGrad::Dense(slice1(&self.b4)),
            TensorGrad::Dense(slice1(&self.wide_w)),
            TensorGrad::Dense(slice1(&self.wide_b)),
        ]);
        out
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self, params: &ModelParams) -> Option<String> {
        let layout = tensor_layout(&params.hparams, &params.vocab);
        for ((name, _), g) in layout.into_iter().zip(self.tensors()) {
            let finite = match g {
                TensorGrad::Dense(d) => d.iter().all(|x| x.is_finite()),
                TensorGrad::Rows(r) => r.rows.values().all(|v| v.iter().all(|x| x.is_finite())),
            };
            if !finite {
                return Some(name);
            }
        }
        None
    }

    /// Dense copy of every tensor, in [`ModelParams::tensors`] order.
    pub fn to_dense(&self, params: &ModelParams) -> Vec<(String, Vec<f64>)> {
        let layout = tensor_layout(&params.hparams, &params.vocab);
        layout
            .into_iter()
            .zip(self.tensors())
            .map(|((name, shape), g)| {
                let v = match g {
                    TensorGrad::Dense(d) => d.to_vec(),
                    TensorGrad::Rows(r) => r.to_dense(shape[0]).into_raw_vec_and_offset().0,
                };
                (name, v)
            })
            .collect()
    }
}
