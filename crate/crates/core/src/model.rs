//! Tiny conditional decoder-only transformer with hand-written reverse-mode
//! gradients.
//!
//! The scene feature vector is projected to `d_model` and occupies position 0;
//! token embeddings follow at positions `1..=n`. Blocks are pre-LayerNorm
//! causal self-attention followed by a tanh-GELU MLP of width `4 * d_model`.
//! Logits are produced for token positions only, so row `t` of a sequence's
//! logits scores the token that follows input token `t`.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_text, write_text};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
/// Standard deviation of the normal init for every weight matrix and embedding.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest caption (BOS and EOS included) the model accepts.
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_features: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 32,
            vocab_size,
            n_features,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 || self.vocab_size == 0 || self.n_features == 0 {
            return Err(Error::Config(
                "max_len >= 2, vocab_size > 0 and n_features > 0 required".into(),
            ));
        }
        Ok(())
    }

    /// Positions in the residual stream: the feature slot plus `max_len - 1` inputs.
    fn positions(&self) -> usize {
        self.max_len
    }

    fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Clone, Copy, Debug)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Copy, Debug)]
struct Vector {
    off: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln1_g: Vector,
    ln1_b: Vector,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    bo: Vector,
    ln2_g: Vector,
    ln2_b: Vector,
    w1: Mat,
    b1: Vector,
    w2: Mat,
    b2: Vector,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: Mat,
    pos_emb: Mat,
    feat_w: Mat,
    feat_b: Vector,
    blocks: Vec<BlockLayout>,
    lnf_g: Vector,
    lnf_b: Vector,
    w_out: Mat,
    b_out: Vector,
    names: Vec<(String, Vec<usize>, usize)>,
    len: usize,
}

struct Cursor {
    off: usize,
    names: Vec<(String, Vec<usize>, usize)>,
}

impl Cursor {
    fn mat(&mut self, name: String, rows: usize, cols: usize) -> Mat {
        let m = Mat {
            off: self.off,
            rows,
            cols,
        };
        self.names.push((name, vec![rows, cols], self.off));
        self.off += rows * cols;
        m
    }

    fn vector(&mut self, name: String, len: usize) -> Vector {
        let v = Vector { off: self.off, len };
        self.names.push((name, vec![len], self.off));
        self.off += len;
        v
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let h = 4 * d;
        let mut cur = Cursor {
            off: 0,
            names: Vec::new(),
        };
        let tok_emb = cur.mat("tok_emb".into(), c.vocab_size, d);
        let pos_emb = cur.mat("pos_emb".into(), c.positions(), d);
        let feat_w = cur.mat("feat_w".into(), c.n_features, d);
        let feat_b = cur.vector("feat_b".into(), d);
        let blocks = (0..c.n_layers)
            .map(|l| BlockLayout {
                ln1_g: cur.vector(format!("blocks.{l}.ln1_g"), d),
                ln1_b: cur.vector(format!("blocks.{l}.ln1_b"), d),
                wq: cur.mat(format!("blocks.{l}.wq"), d, d),
                wk: cur.mat(format!("blocks.{l}.wk"), d, d),
                wv: cur.mat(format!("blocks.{l}.wv"), d, d),
                wo: cur.mat(format!("blocks.{l}.wo"), d, d),
                bo: cur.vector(format!("blocks.{l}.bo"), d),
                ln2_g: cur.vector(format!("blocks.{l}.ln2_g"), d),
                ln2_b: cur.vector(format!("blocks.{l}.ln2_b"), d),
                w1: cur.mat(format!("blocks.{l}.w1"), d, h),
                b1: cur.vector(format!("blocks.{l}.b1"), h),
                w2: cur.mat(format!("blocks.{l}.w2"), h, d),
                b2: cur.vector(format!("blocks.{l}.b2"), d),
            })
            .collect();
        let lnf_g = cur.vector("lnf_g".into(), d);
        let lnf_b = cur.vector("lnf_b".into(), d);
        let w_out = cur.mat("w_out".into(), d, c.vocab_size);
        let b_out = cur.vector("b_out".into(), c.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            feat_w,
            feat_b,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            len: cur.off,
            names: cur.names,
        }
    }
}

/// Model weights (or their gradients) stored in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    data: Vec<f64>,
}

/// Deterministic per-seed initialization: N(0, 0.02²) for matrices and
/// embeddings, zeros for biases, ones for LayerNorm gains.
pub fn init(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let layout = config.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut data = vec![0.0; layout.len];
    for (name, shape, off) in &layout.names {
        let n: usize = shape.iter().product();
        let slot = &mut data[*off..off + n];
        if shape.len() == 2 {
            slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        } else if name.ends_with("_g") {
            slot.fill(1.0);
        }
    }
    Ok(Parameters {
        config: config.clone(),
        data,
    })
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            data: vec![0.0; config.parameter_count()],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(name, shape, values)` for every tensor, in storage order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.config
            .layout()
            .names
            .into_iter()
            .map(|(name, shape, off)| {
                let n = shape.iter().product::<usize>();
                (name, shape, &self.data[off..off + n])
            })
            .collect()
    }

    /// Mutable view of one named tensor, in row-major order.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (_, shape, off) = self.config.layout().names.into_iter().find(|(n, _, _)| n == name)?;
        let n = shape.iter().product::<usize>();
        Some(&mut self.data[off..off + n])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    fn mat(&self, m: Mat) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((m.rows, m.cols), &self.data[m.off..m.off + m.rows * m.cols])
            .expect("layout")
    }

    fn mat_mut(&mut self, m: Mat) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape(
            (m.rows, m.cols),
            &mut self.data[m.off..m.off + m.rows * m.cols],
        )
        .expect("layout")
    }

    fn vector(&self, v: Vector) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[v.off..v.off + v.len])
    }

    fn vector_mut(&mut self, v: Vector) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[v.off..v.off + v.len])
    }

    pub fn forward(
        &self,
        features: ArrayView2<'_, f64>,
        tokens: &[Vec<u32>],
    ) -> Result<(LogitsBatch, ForwardTrace)> {
        forward(self, features, tokens)
    }

    pub fn backward(&self, trace: &ForwardTrace, upstream: ArrayView3<'_, f64>) -> Result<Parameters> {
        backward(self, trace, upstream)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            tensors: self
                .named()
                .into_iter()
                .map(|(name, shape, values)| NamedTensor {
                    name,
                    shape,
                    data: values.to_vec(),
                })
                .collect(),
        };
        write_text(path, &serde_json::to_string(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(&read_text(path)?)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?}",
                file.format
            )));
        }
        file.config.validate()?;
        let layout = file.config.layout();
        if layout.names.len() != file.tensors.len() {
            return Err(Error::Shape("checkpoint tensor count differs from config".into()));
        }
        let mut data = Vec::with_capacity(layout.len);
        for ((name, shape, _), t) in layout.names.iter().zip(file.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("checkpoint tensor {} malformed", t.name)));
            }
            data.extend(t.data);
        }
        Ok(Self {
            config: file.config,
            data,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "smile_ckpt_v1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

/// Next-token scores, `batch × positions × vocab`. Rows at or beyond a
/// sequence's length are zero and carry no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBatch {
    pub values: Array3<f64>,
    pub lengths: Vec<usize>,
}

struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockCache {
    a: Array2<f64>,
    ln1: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    c: Array2<f64>,
    ln2: LayerNormCache,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct SequenceTrace {
    features: Array1<f64>,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    z: Array2<f64>,
    lnf: LayerNormCache,
}

/// Activations recorded by [`forward`] and consumed by [`backward`].
pub struct ForwardTrace {
    sequences: Vec<SequenceTrace>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }
}

fn layer_norm(x: ArrayView2<'_, f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &g + &b;
    (y, LayerNormCache { xhat, rstd })
}

/// Returns dx and accumulates dgamma/dbeta.
fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    cache: &LayerNormCache,
    g: ArrayView1<'_, f64>,
    mut dg: ArrayViewMut1<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = &dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let dh = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[t];
        dx.row_mut(t)
            .assign(&((&dh - mean_dh - &(&xh * mean_dhx)) * r));
    }
    dx
}

const GELU_C: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (s * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let t = (s * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * u * u)
}

/// Causal softmax attention for one head; returns (output, probabilities).
fn attend(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let t = q.nrows();
    let scores = q.dot(&k.t()) * scale;
    let mut probs = Array2::zeros((t, t));
    for i in 0..t {
        let row = scores.row(i);
        let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (row[j] - m).exp();
            probs[[i, j]] = e;
            sum += e;
        }
        for j in 0..=i {
            probs[[i, j]] /= sum;
        }
    }
    (probs.dot(&v), probs)
}

impl Parameters {
    fn embed(&self, layout: &Layout, features: ArrayView1<'_, f64>, tokens: &[u32]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len() + 1, d));
        let pos = self.mat(layout.pos_emb);
        let mut row0 = features.dot(&self.mat(layout.feat_w));
        row0 += &self.vector(layout.feat_b);
        row0 += &pos.row(0);
        x.row_mut(0).assign(&row0);
        let emb = self.mat(layout.tok_emb);
        for (i, &tok) in tokens.iter().enumerate() {
            let mut r = x.row_mut(i + 1);
            r.assign(&emb.row(tok as usize));
            r += &pos.row(i + 1);
        }
        x
    }

    fn sequence_forward(&self, layout: &Layout, features: ArrayView1<'_, f64>, tokens: &[u32]) -> (Array2<f64>, SequenceTrace) {
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(layout, features, tokens);
        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for bl in &layout.blocks {
            let (a, ln1) = layer_norm(x.view(), self.vector(bl.ln1_g), self.vector(bl.ln1_b));
            let q = a.dot(&self.mat(bl.wq));
            let k = a.dot(&self.mat(bl.wk));
            let v = a.dot(&self.mat(bl.wv));
            let mut o = Array2::zeros(x.raw_dim());
            let mut probs = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let (oh, ph) = attend(q.slice(cols), k.slice(cols), v.slice(cols), scale);
                o.slice_mut(cols).assign(&oh);
                probs.push(ph);
            }
            x = x + o.dot(&self.mat(bl.wo)) + self.vector(bl.bo);
            let (cn, ln2) = layer_norm(x.view(), self.vector(bl.ln2_g), self.vector(bl.ln2_b));
            let u = cn.dot(&self.mat(bl.w1)) + self.vector(bl.b1);
            let g = u.mapv(gelu);
            x = x + g.dot(&self.mat(bl.w2)) + self.vector(bl.b2);
            blocks.push(BlockCache {
                a,
                ln1,
                q,
                k,
                v,
                probs,
                o,
                c: cn,
                ln2,
                u,
                g,
            });
        }
        let (z, lnf) = layer_norm(x.view(), self.vector(layout.lnf_g), self.vector(layout.lnf_b));
        let logits = z.slice(s![1.., ..]).dot(&self.mat(layout.w_out)) + self.vector(layout.b_out);
        (
            logits,
            SequenceTrace {
                features: features.to_owned(),
                tokens: tokens.to_vec(),
                blocks,
                z,
                lnf,
            },
        )
    }

    fn sequence_backward(&self, layout: &Layout, tr: &SequenceTrace, dlogits: ArrayView2<'_, f64>, grad: &mut Parameters) {
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = tr.tokens.len();
        let zt = tr.z.slice(s![1.., ..]);
        grad.mat_mut(layout.w_out).scaled_add(1.0, &zt.t().dot(&dlogits));
        grad.vector_mut(layout.b_out).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let mut dz = Array2::zeros((n + 1, c.d_model));
        dz.slice_mut(s![1.., ..]).assign(&dlogits.dot(&self.mat(layout.w_out).t()));
        let (dg, db) = split_two(grad, layout.lnf_g, layout.lnf_b);
        let mut dx = layer_norm_backward(dz.view(), &tr.lnf, self.vector(layout.lnf_g), dg, db);

        for (bl, cache) in layout.blocks.iter().zip(&tr.blocks).rev() {
            // MLP branch.
            grad.mat_mut(bl.w2).scaled_add(1.0, &cache.g.t().dot(&dx));
            grad.vector_mut(bl.b2).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let mut du = dx.dot(&self.mat(bl.w2).t());
            du.zip_mut_with(&cache.u, |d, &u| *d *= gelu_grad(u));
            grad.mat_mut(bl.w1).scaled_add(1.0, &cache.c.t().dot(&du));
            grad.vector_mut(bl.b1).scaled_add(1.0, &du.sum_axis(Axis(0)));
            let dc = du.dot(&self.mat(bl.w1).t());
            let (dg, db) = split_two(grad, bl.ln2_g, bl.ln2_b);
            dx += &layer_norm_backward(dc.view(), &cache.ln2, self.vector(bl.ln2_g), dg, db);

            // Attention branch.
            grad.mat_mut(bl.wo).scaled_add(1.0, &cache.o.t().dot(&dx));
            grad.vector_mut(bl.bo).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let d_o = dx.dot(&self.mat(bl.wo).t());
            let mut dq = Array2::zeros(cache.q.raw_dim());
            let mut dk = Array2::zeros(cache.k.raw_dim());
            let mut dv = Array2::zeros(cache.v.raw_dim());
            for (h, p) in cache.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&cache.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let mut ds = Array2::zeros(p.raw_dim());
                for i in 0..p.nrows() {
                    let dot: f64 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                    for j in 0..=i {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
            }
            let at = cache.a.t();
            grad.mat_mut(bl.wq).scaled_add(1.0, &at.dot(&dq));
            grad.mat_mut(bl.wk).scaled_add(1.0, &at.dot(&dk));
            grad.mat_mut(bl.wv).scaled_add(1.0, &at.dot(&dv));
            let da = dq.dot(&self.mat(bl.wq).t())
                + dk.dot(&self.mat(bl.wk).t())
                + dv.dot(&self.mat(bl.wv).t());
            let (dg, db) = split_two(grad, bl.ln1_g, bl.ln1_b);
            dx += &layer_norm_backward(da.view(), &cache.ln1, self.vector(bl.ln1_g), dg, db);
        }

        let dx0 = dx.row(0);
        {
            let mut fw = grad.mat_mut(layout.feat_w);
            for (i, &f) in tr.features.iter().enumerate() {
                if f != 0.0 {
                    fw.row_mut(i).scaled_add(f, &dx0);
                }
            }
        }
        grad.vector_mut(layout.feat_b).scaled_add(1.0, &dx0);
        grad.mat_mut(layout.pos_emb)
            .slice_mut(s![..=n, ..])
            .scaled_add(1.0, &dx);
        let mut emb = grad.mat_mut(layout.tok_emb);
        for (i, &tok) in tr.tokens.iter().enumerate() {
            emb.row_mut(tok as usize).scaled_add(1.0, &dx.row(i + 1));
        }
    }
}

/// Two disjoint mutable views into the gradient buffer (adjacent gain/bias).
fn split_two(grad: &mut Parameters, a: Vector, b: Vector) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a.off + a.len <= b.off);
    let (left, right) = grad.data.split_at_mut(b.off);
    (
        ArrayViewMut1::from(&mut left[a.off..a.off + a.len]),
        ArrayViewMut1::from(&mut right[..b.len]),
    )
}

fn check_inputs(params: &Parameters, features: &ArrayView2<'_, f64>, tokens: &[Vec<u32>]) -> Result<()> {
    let c = &params.config;
    if features.nrows() != tokens.len() || features.ncols() != c.n_features {
        return Err(Error::Shape(format!(
            "features {:?} for {} sequences with {} features each",
            features.shape(),
            tokens.len(),
            c.n_features
        )));
    }
    for seq in tokens {
        // Inputs exclude the final EOS, so a caption of max_len tokens gives max_len - 1 inputs.
        if seq.is_empty() || seq.len() >= c.max_len {
            return Err(Error::LengthOverflow {
                len: seq.len() + 1,
                max_len: c.max_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: c.vocab_size,
            });
        }
    }
    Ok(())
}

/// Teacher-forced forward pass over ragged input sequences.
pub fn forward(
    params: &Parameters,
    features: ArrayView2<'_, f64>,
    tokens: &[Vec<u32>],
) -> Result<(LogitsBatch, ForwardTrace)> {
    check_inputs(params, &features, tokens)?;
    let layout = params.config.layout();
    let width = tokens.iter().map(Vec::len).max().unwrap_or(0);
    let mut values = Array3::zeros((tokens.len(), width, params.config.vocab_size));
    let mut sequences = Vec::with_capacity(tokens.len());
    for (b, seq) in tokens.iter().enumerate() {
        let (logits, trace) = params.sequence_forward(&layout, features.row(b), seq);
        values.slice_mut(s![b, ..seq.len(), ..]).assign(&logits);
        sequences.push(trace);
    }
    Ok((
        LogitsBatch {
            values,
            lengths: tokens.iter().map(Vec::len).collect(),
        },
        ForwardTrace { sequences },
    ))
}

/// Exact parameter gradients of `sum(upstream * logits)` for the recorded pass.
pub fn backward(params: &Parameters, trace: &ForwardTrace, upstream: ArrayView3<'_, f64>) -> Result<Parameters> {
    let v = params.config.vocab_size;
    let width = trace.sequences.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    if upstream.shape() != [trace.sequences.len(), width, v] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected [{}, {width}, {v}]",
            upstream.shape(),
            trace.sequences.len()
        )));
    }
    let layout = params.config.layout();
    let mut grad = Parameters::zeros(&params.config);
    for (b, seq) in trace.sequences.iter().enumerate() {
        let dl = upstream.slice(s![b, ..seq.tokens.len(), ..]);
        if dl.iter().all(|&x| x == 0.0) {
            continue;
        }
        params.sequence_backward(&layout, seq, dl, &mut grad);
    }
    Ok(grad)
}

/// Key/value cache for incremental decoding of one sequence.
#[derive(Clone, Debug)]
pub struct IncrementalState {
    keys: Vec<Vec<Array1<f64>>>,
    values: Vec<Vec<Array1<f64>>>,
    position: usize,
}

impl IncrementalState {
    /// Number of residual positions consumed, feature slot included.
    pub fn position(&self) -> usize {
        self.position
    }
}

impl Parameters {
    fn step_hidden(&self, layout: &Layout, mut x: Array1<f64>, state: &mut IncrementalState) -> Array1<f64> {
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, bl) in layout.blocks.iter().enumerate() {
            let a = layer_norm_row(x.view(), self.vector(bl.ln1_g), self.vector(bl.ln1_b));
            let q = a.dot(&self.mat(bl.wq));
            state.keys[l].push(a.dot(&self.mat(bl.wk)));
            state.values[l].push(a.dot(&self.mat(bl.wv)));
            let keys = &state.keys[l];
            let vals = &state.values[l];
            let mut o = Array1::zeros(c.d_model);
            for h in 0..c.n_heads {
                let r = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r.clone()]);
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| qh.dot(&k.slice(s![r.clone()])) * scale)
                    .collect();
                let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                let mut oh = o.slice_mut(s![r.clone()]);
                for (w, v) in e.iter().zip(vals) {
                    oh.scaled_add(w / sum, &v.slice(s![r.clone()]));
                }
            }
            x = x + o.dot(&self.mat(bl.wo)) + self.vector(bl.bo);
            let cn = layer_norm_row(x.view(), self.vector(bl.ln2_g), self.vector(bl.ln2_b));
            let g = (cn.dot(&self.mat(bl.w1)) + self.vector(bl.b1)).mapv(gelu);
            x = x + g.dot(&self.mat(bl.w2)) + self.vector(bl.b2);
        }
        state.position += 1;
        layer_norm_row(x.view(), self.vector(layout.lnf_g), self.vector(layout.lnf_b))
    }

    /// Consumes the feature slot and returns a fresh decoding state.
    pub fn start(&self, features: ArrayView1<'_, f64>) -> Result<IncrementalState> {
        if features.len() != self.config.n_features {
            return Err(Error::Shape(format!(
                "feature vector of length {}, expected {}",
                features.len(),
                self.config.n_features
            )));
        }
        let layout = self.config.layout();
        let mut state = IncrementalState {
            keys: vec![Vec::new(); layout.blocks.len()],
            values: vec![Vec::new(); layout.blocks.len()],
            position: 0,
        };
        let mut x = features.dot(&self.mat(layout.feat_w));
        x += &self.vector(layout.feat_b);
        x += &self.mat(layout.pos_emb).row(0);
        self.step_hidden(&layout, x, &mut state);
        Ok(state)
    }

    /// Feeds one token and returns the logits for the token that follows it.
    pub fn step(&self, state: &mut IncrementalState, token: u32) -> Result<Array1<f64>> {
        let c = &self.config;
        if state.position >= c.positions() {
            return Err(Error::LengthOverflow {
                len: state.position + 1,
                max_len: c.max_len,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: c.vocab_size,
            });
        }
        let layout = c.layout();
        let x = &self.mat(layout.tok_emb).row(token as usize) + &self.mat(layout.pos_emb).row(state.position);
        let z = self.step_hidden(&layout, x, state);
        Ok(z.dot(&self.mat(layout.w_out)) + self.vector(layout.b_out))
    }
}

fn layer_norm_row(x: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let centered = x.mapv(|v| v - mean);
    let var = centered.iter().map(|v| v * v).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    centered * r * &g + &b
}
