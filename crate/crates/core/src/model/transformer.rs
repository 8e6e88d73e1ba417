//! Pre-LN causal transformer blocks with explicit backward passes and an
//! incremental (KV-cached) decode path.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{gelu_backward, gelu_forward, LayerNorm, LayerNormCache, Linear, Param};

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,      // d -> 3d
    pub attn_out: Linear, // d -> d
    pub ln2: LayerNorm,
    pub ff1: Linear, // d -> d_ff
    pub ff2: Linear, // d_ff -> d
    pub heads: usize,
}

pub struct BlockCache {
    x_ln1: Array2<f64>,
    ln1c: LayerNormCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>, // per head, S x S
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    x_ln2: Array2<f64>,
    ln2c: LayerNormCache,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn(shape, |_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
}

impl Block {
    pub fn new(name: &str, d: usize, d_ff: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % heads == 0, "d_emb must be divisible by heads");
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            qkv: Linear::new(&format!("{name}.qkv"), d, 3 * d, 0.02, rng),
            attn_out: Linear::new(&format!("{name}.attn_out"), d, d, 0.02, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ff1: Linear::new(&format!("{name}.ff1"), d, d_ff, 0.02, rng),
            ff2: Linear::new(&format!("{name}.ff2"), d_ff, d, 0.02, rng),
            heads,
        }
    }

    /// Causal self-attention + feed-forward with residuals. `dropout` is
    /// applied to the two residual branches when `rng` is given (training).
    pub fn forward(
        &self,
        x: &Array2<f64>,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, BlockCache) {
        let steps = x.nrows();
        let d = x.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (x_ln1, ln1c) = self.ln1.forward(x);
        let qkv = self.qkv.forward(&x_ln1);
        let mut probs = Vec::with_capacity(self.heads);
        let mut ctx = Array2::zeros((steps, d));
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            // causal mask: step t attends to <= t
            for i in 0..steps {
                for j in (i + 1)..steps {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
            let p = crate::nn::softmax_rows(&scores);
            let c = p.dot(&v);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&c);
            probs.push(p);
        }
        let mut attn = self.attn_out.forward(&ctx);
        let mut rng = rng;
        let attn_mask = if dropout > 0.0 {
            rng.as_deref_mut().map(|r| dropout_mask((steps, d), dropout, r))
        } else {
            None
        };
        if let Some(m) = &attn_mask {
            attn *= m;
        }
        let x_mid = x + &attn;
        let _ = &x_mid;

        let (x_ln2, ln2c) = self.ln2.forward(&x_mid);
        let ff_pre = self.ff1.forward(&x_ln2);
        let ff_act = gelu_forward(&ff_pre);
        let mut ff = self.ff2.forward(&ff_act);
        let ff_mask = if dropout > 0.0 {
            rng.map(|r| dropout_mask((steps, d), dropout, r))
        } else {
            None
        };
        if let Some(m) = &ff_mask {
            ff *= m;
        }
        let y = &x_mid + &ff;
        (
            y,
            BlockCache {
                x_ln1,
                ln1c,
                qkv,
                probs,
                ctx,
                attn_mask,
                x_ln2,
                ln2c,
                ff_pre,
                ff_act,
                ff_mask,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let steps = dy.nrows();
        let d = dy.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let mut dff = dy.clone();
        if let Some(m) = &cache.ff_mask {
            dff *= m;
        }
        let dff_act = self.ff2.backward(&cache.ff_act, &dff);
        let dff_pre = gelu_backward(&cache.ff_pre, &dff_act);
        let dx_ln2 = self.ff1.backward(&cache.x_ln2, &dff_pre);
        let mut dx_mid = self.ln2.backward(&cache.ln2c, &dx_ln2);
        dx_mid += dy; // residual

        // attention branch
        let mut dattn = dx_mid.clone();
        if let Some(m) = &cache.attn_mask {
            dattn *= m;
        }
        let dctx = self.attn_out.backward(&cache.ctx, &dattn);
        let mut dqkv = Array2::zeros((steps, 3 * d));
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &cache.probs[h];
            let dctx_h = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dctx_h.dot(&v.t());
            let dv = p.t().dot(&dctx_h);
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            let mut ds = &dp * p;
            for i in 0..steps {
                let row_sum: f64 = ds.row(i).sum();
                for j in 0..steps {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - row_sum);
                }
            }
            let dq = ds.dot(&k).mapv(|v| v * scale);
            let dk = ds.t().dot(&q).mapv(|v| v * scale);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        let dx_ln1 = self.qkv.backward(&cache.x_ln1, &dqkv);
        let mut dx = self.ln1.backward(&cache.ln1c, &dx_ln1);
        dx += &dx_mid; // residual
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.ln1.params_mut();
        ps.extend(self.qkv.params_mut());
        ps.extend(self.attn_out.params_mut());
        ps.extend(self.ln2.params_mut());
        ps.extend(self.ff1.params_mut());
        ps.extend(self.ff2.params_mut());
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.ln1.params();
        ps.extend(self.qkv.params());
        ps.extend(self.attn_out.params());
        ps.extend(self.ln2.params());
        ps.extend(self.ff1.params());
        ps.extend(self.ff2.params());
        ps
    }

    /// One decode step against a grown key/value cache (eval mode).
    pub fn step(&self, x: &Array1<f64>, cache: &mut LayerKv) -> Array1<f64> {
        let d = x.len();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x2 = x.clone().insert_axis(ndarray::Axis(0));
        let (x_ln1, _) = self.ln1.forward(&x2);
        let qkv = self.qkv.forward(&x_ln1);
        cache.push(qkv.slice(s![0, d..2 * d]).to_owned(), qkv.slice(s![0, 2 * d..3 * d]).to_owned());
        let len = cache.len;
        let mut ctx = Array1::zeros(d);
        for h in 0..self.heads {
            let q = qkv.slice(s![0, h * dh..(h + 1) * dh]);
            let mut scores = Array1::zeros(len);
            for t in 0..len {
                let k = cache.k.slice(s![t, h * dh..(h + 1) * dh]);
                let dot: f64 = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
                scores[t] = dot * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.mapv_inplace(|v| (v - m).exp());
            let sum = scores.sum();
            scores.mapv_inplace(|v| v / sum);
            for t in 0..len {
                let v = cache.v.slice(s![t, h * dh..(h + 1) * dh]);
                for (j, vv) in v.iter().enumerate() {
                    ctx[h * dh + j] += scores[t] * vv;
                }
            }
        }
        let attn = self.attn_out.forward(&ctx.insert_axis(ndarray::Axis(0)));
        let x_mid = &x2 + &attn;
        let (x_ln2, _) = self.ln2.forward(&x_mid);
        let ff = self.ff2.forward(&gelu_forward(&self.ff1.forward(&x_ln2)));
        (&x_mid + &ff).row(0).to_owned()
    }
}

/// Per-layer key/value cache for incremental decoding.
pub struct LayerKv {
    k: Array2<f64>,
    v: Array2<f64>,
    len: usize,
}

impl LayerKv {
    pub fn new(max_len: usize, d: usize) -> Self {
        Self { k: Array2::zeros((max_len, d)), v: Array2::zeros((max_len, d)), len: 0 }
    }

    fn push(&mut self, k: Array1<f64>, v: Array1<f64>) {
        assert!(self.len < self.k.nrows(), "decode past max_seq");
        self.k.row_mut(self.len).assign(&k);
        self.v.row_mut(self.len).assign(&v);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
