//! Autoregressive text decoder.
//!
//! A small pre-norm transformer operating on f64 throughout. The decoder does
//! not tokenize or resolve multimodal slots; callers hand it a matrix of
//! embedding rows (one per sequence position) and get back next-token logits.
//! Token embedding lookup is exposed separately so the pipeline can mix token
//! rows with projected visual rows before calling `forward_rows`.
//!
//! Every forward pass caches enough intermediate state for an exact backward
//! pass; there is no KV cache or other inference shortcut, so generation
//! re-runs the full prefix each step. At the intended scale that is cheap and
//! keeps one code path for training and decoding.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, layer_norm, layer_norm_backward, linear, linear_backward, Activation, Parameterized,
    ParamSlot,
};
use crate::seed::sub_rng;

const LN_EPS: f64 = 1e-5;

/// Hyperparameters for [`Decoder`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl DecoderConfig {
    /// Two layers of four heads over 128-dim embeddings. Big enough to fit
    /// small corpora verbatim, small enough that a few hundred optimizer
    /// steps run in seconds.
    pub fn tiny(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            embed_dim: 128,
            layers: 2,
            heads: 4,
            max_len: 1024,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("decoder vocab_size must be positive".into()));
        }
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "decoder dims, layers, heads and max_len must be positive".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One attention + MLP block with its gradients.
struct Block {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    // gradient twins, same shapes
    g_ln1_g: Array1<f64>,
    g_ln1_b: Array1<f64>,
    g_wq: Array2<f64>,
    g_bq: Array1<f64>,
    g_wk: Array2<f64>,
    g_bk: Array1<f64>,
    g_wv: Array2<f64>,
    g_bv: Array1<f64>,
    g_wo: Array2<f64>,
    g_bo: Array1<f64>,
    g_ln2_g: Array1<f64>,
    g_ln2_b: Array1<f64>,
    g_w1: Array2<f64>,
    g_b1: Array1<f64>,
    g_w2: Array2<f64>,
    g_b2: Array1<f64>,
}

impl Block {
    fn new(d: usize, rng: &mut impl rand::Rng) -> Self {
        let h = 4 * d;
        let mut mat = |rows: usize, cols: usize| {
            let mut w = Array2::zeros((rows, cols));
            nn::fill_normal(w.as_slice_mut().unwrap(), 1.0 / (cols as f64).sqrt(), rng);
            w
        };
        Block {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: mat(d, d),
            bq: Array1::zeros(d),
            wk: mat(d, d),
            bk: Array1::zeros(d),
            wv: mat(d, d),
            bv: Array1::zeros(d),
            wo: mat(d, d),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: mat(h, d),
            b1: Array1::zeros(h),
            w2: mat(d, h),
            b2: Array1::zeros(d),
            g_ln1_g: Array1::zeros(d),
            g_ln1_b: Array1::zeros(d),
            g_wq: Array2::zeros((d, d)),
            g_bq: Array1::zeros(d),
            g_wk: Array2::zeros((d, d)),
            g_bk: Array1::zeros(d),
            g_wv: Array2::zeros((d, d)),
            g_bv: Array1::zeros(d),
            g_wo: Array2::zeros((d, d)),
            g_bo: Array1::zeros(d),
            g_ln2_g: Array1::zeros(d),
            g_ln2_b: Array1::zeros(d),
            g_w1: Array2::zeros((h, d)),
            g_b1: Array1::zeros(h),
            g_w2: Array2::zeros((d, h)),
            g_b2: Array1::zeros(d),
        }
    }
}

/// Per-layer activations saved during the forward pass.
struct BlockCache {
    x: Array2<f64>,
    h1: Array2<f64>,
    ln1_means: Array1<f64>,
    ln1_rstds: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One attention matrix per head, each (n, n), rows already softmaxed.
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    x2: Array2<f64>,
    h2: Array2<f64>,
    ln2_means: Array1<f64>,
    ln2_rstds: Array1<f64>,
    pre: Array2<f64>,
    mh: Array2<f64>,
}

/// Activations for a full forward pass, consumed by [`Decoder::backward_rows`].
pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    x_last: Array2<f64>,
    hf: Array2<f64>,
    lnf_means: Array1<f64>,
    lnf_rstds: Array1<f64>,
}

/// The decoder itself: embeddings, transformer blocks, and an untied output
/// head. Zeroing the head weights and bias makes every logit row identical
/// (uniform next-token distribution), which the loss and scoring tests use
/// as an analytic reference point.
pub struct Decoder {
    cfg: DecoderConfig,
    embed: Array2<f64>,
    pos: Array2<f64>,
    blocks: Vec<Block>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
    g_embed: Array2<f64>,
    g_pos: Array2<f64>,
    g_lnf_g: Array1<f64>,
    g_lnf_b: Array1<f64>,
    g_head_w: Array2<f64>,
    g_head_b: Array1<f64>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut rng = sub_rng(cfg.seed, &["decoder"]);
        let mut embed = Array2::zeros((cfg.vocab_size, d));
        nn::fill_normal(embed.as_slice_mut().unwrap(), 0.05, &mut rng);
        let mut pos = Array2::zeros((cfg.max_len, d));
        nn::fill_normal(pos.as_slice_mut().unwrap(), 0.05, &mut rng);
        let blocks = (0..cfg.layers).map(|_| Block::new(d, &mut rng)).collect();
        let mut head_w = Array2::zeros((cfg.vocab_size, d));
        nn::fill_normal(head_w.as_slice_mut().unwrap(), 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Decoder {
            embed,
            pos,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(cfg.vocab_size),
            g_embed: Array2::zeros((cfg.vocab_size, d)),
            g_pos: Array2::zeros((cfg.max_len, d)),
            g_lnf_g: Array1::zeros(d),
            g_lnf_b: Array1::zeros(d),
            g_head_w: Array2::zeros((cfg.vocab_size, d)),
            g_head_b: Array1::zeros(cfg.vocab_size),
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Embedding row for a token id. The caller assembles the input matrix
    /// from these rows plus any non-token rows.
    pub fn embed_token(&self, id: u32) -> Result<ArrayView1<'_, f64>> {
        let idx = id as usize;
        if idx >= self.cfg.vocab_size {
            return Err(Error::Shape(format!(
                "token id {} out of vocabulary (size {})",
                id, self.cfg.vocab_size
            )));
        }
        Ok(self.embed.row(idx))
    }

    /// Adds gradient flowing into the embedding row of `id`. Used by the
    /// pipeline when scattering sequence gradients back to their sources.
    pub fn accumulate_embed_grad(&mut self, id: u32, grad: ArrayView1<f64>) {
        let mut row = self.g_embed.row_mut(id as usize);
        row += &grad;
    }

    /// Runs the transformer over pre-assembled rows and returns logits of
    /// shape `(n, vocab_size)` along with the cache needed for backward.
    ///
    /// Position embeddings are added here; `rows` must not include them.
    pub fn forward_rows(&self, rows: &Array2<f64>) -> Result<(Array2<f64>, DecoderCache)> {
        let n = rows.nrows();
        let d = self.cfg.embed_dim;
        if n == 0 {
            return Err(Error::Shape("decoder input has no rows".into()));
        }
        if rows.ncols() != d {
            return Err(Error::Shape(format!(
                "decoder expects rows of width {}, got {}",
                d,
                rows.ncols()
            )));
        }
        if n > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                n, self.cfg.max_len
            )));
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = rows.clone();
        x += &self.pos.slice(ndarray::s![..n, ..]);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h1, ln1_means, ln1_rstds) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b, LN_EPS);
            let q = linear(&h1, &blk.wq, &blk.bq);
            let k = linear(&h1, &blk.wk, &blk.bk);
            let v = linear(&h1, &blk.wv, &blk.bv);

            let mut att = Vec::with_capacity(heads);
            let mut ctx = Array2::zeros((n, d));
            for h in 0..heads {
                let cols = ndarray::s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                for i in 0..n {
                    for j in (i + 1)..n {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                for mut row in scores.rows_mut() {
                    nn::softmax_inplace(row.as_slice_mut().unwrap());
                }
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
                att.push(scores);
            }
            let ao = linear(&ctx, &blk.wo, &blk.bo);
            let x2 = &x + &ao;

            let (h2, ln2_means, ln2_rstds) = layer_norm(&x2, &blk.ln2_g, &blk.ln2_b, LN_EPS);
            let pre = linear(&h2, &blk.w1, &blk.b1);
            let mh = pre.mapv(|t| Activation::Silu.apply(t));
            let m2 = linear(&mh, &blk.w2, &blk.b2);
            let x3 = &x2 + &m2;

            caches.push(BlockCache {
                x: x.clone(),
                h1,
                ln1_means,
                ln1_rstds,
                q,
                k,
                v,
                att,
                ctx,
                x2: x2.clone(),
                h2,
                ln2_means,
                ln2_rstds,
                pre,
                mh,
            });
            x = x3;
        }

        let (hf, lnf_means, lnf_rstds) = layer_norm(&x, &self.lnf_g, &self.lnf_b, LN_EPS);
        let logits = linear(&hf, &self.head_w, &self.head_b);
        Ok((
            logits,
            DecoderCache {
                blocks: caches,
                x_last: x,
                hf,
                lnf_means,
                lnf_rstds,
            },
        ))
    }

    /// Backpropagates `dlogits` through the whole stack, accumulating
    /// parameter gradients, and returns the gradient with respect to the
    /// input rows (position embeddings excluded, mirroring `forward_rows`).
    pub fn backward_rows(&mut self, cache: &DecoderCache, dlogits: &Array2<f64>) -> Array2<f64> {
        let n = dlogits.nrows();
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (dhf, dw_head, db_head) = linear_backward(&cache.hf, &self.head_w, dlogits);
        self.g_head_w += &dw_head;
        self.g_head_b += &db_head;
        let (mut dx, dg, db) = layer_norm_backward(
            &cache.x_last,
            &self.lnf_g,
            &cache.lnf_means,
            &cache.lnf_rstds,
            &dhf,
        );
        self.g_lnf_g += &dg;
        self.g_lnf_b += &db;

        for (blk, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            // dx currently holds the gradient at the block output x3 = x2 + m2.
            let dm2 = dx.clone();
            let (dmh, dw2, db2) = linear_backward(&bc.mh, &blk.w2, &dm2);
            blk.g_w2 += &dw2;
            blk.g_b2 += &db2;
            let dpre = ndarray::Zip::from(&dmh).and(&bc.pre).map_collect(|&g, &p| {
                g * Activation::Silu.grad(p)
            });
            let (dh2, dw1, db1) = linear_backward(&bc.h2, &blk.w1, &dpre);
            blk.g_w1 += &dw1;
            blk.g_b1 += &db1;
            let (dx2_ln, dg2, db2n) =
                layer_norm_backward(&bc.x2, &blk.ln2_g, &bc.ln2_means, &bc.ln2_rstds, &dh2);
            blk.g_ln2_g += &dg2;
            blk.g_ln2_b += &db2n;
            let dx2 = &dx + &dx2_ln;

            let (dctx, dwo, dbo) = linear_backward(&bc.ctx, &blk.wo, &dx2);
            blk.g_wo += &dwo;
            blk.g_bo += &dbo;

            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for h in 0..heads {
                let cols = ndarray::s![.., h * dh..(h + 1) * dh];
                let att = &bc.att[h];
                let vh = bc.v.slice(cols);
                let dctx_h = dctx.slice(cols);
                // ctx_h = att · vh
                let datt_raw = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&att.t().dot(&dctx_h));
                // softmax backward row by row; causal entries past the
                // diagonal have att == 0 so they contribute nothing.
                let mut dscores = Array2::zeros((n, n));
                for i in 0..n {
                    let arow = att.row(i);
                    let grow = datt_raw.row(i);
                    let dot: f64 = arow.iter().zip(grow.iter()).map(|(a, g)| a * g).sum();
                    for j in 0..=i {
                        dscores[[i, j]] = arow[j] * (grow[j] - dot) * scale;
                    }
                }
                let qh = bc.q.slice(cols);
                let kh = bc.k.slice(cols);
                dq.slice_mut(cols).assign(&dscores.dot(&kh));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            }

            let (dh1_q, dwq, dbq) = linear_backward(&bc.h1, &blk.wq, &dq);
            let (dh1_k, dwk, dbk) = linear_backward(&bc.h1, &blk.wk, &dk);
            let (dh1_v, dwv, dbv) = linear_backward(&bc.h1, &blk.wv, &dv);
            blk.g_wq += &dwq;
            blk.g_bq += &dbq;
            blk.g_wk += &dwk;
            blk.g_bk += &dbk;
            blk.g_wv += &dwv;
            blk.g_bv += &dbv;
            let dh1 = dh1_q + dh1_k + dh1_v;
            let (dx_ln, dg1, db1n) =
                layer_norm_backward(&bc.x, &blk.ln1_g, &bc.ln1_means, &bc.ln1_rstds, &dh1);
            blk.g_ln1_g += &dg1;
            blk.g_ln1_b += &db1n;
            dx = dx2 + dx_ln;
        }

        // Position embedding gradient: x0 = rows + pos[..n].
        let mut gpos = self.g_pos.slice_mut(ndarray::s![..n, ..]);
        gpos += &dx;
        dx
    }
}

impl Parameterized for Decoder {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        macro_rules! emit {
            ($name:expr, $value:expr, $grad:expr) => {{
                let shape: Vec<usize> = $value.shape().to_vec();
                f(ParamSlot {
                    name: $name,
                    shape: &shape,
                    value: $value.as_slice_mut().unwrap(),
                    grad: $grad.as_slice_mut().unwrap(),
                });
            }};
        }
        emit!("decoder.embed", self.embed, self.g_embed);
        emit!("decoder.pos", self.pos, self.g_pos);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            emit!(&format!("decoder.layer{i}.ln1.gamma"), blk.ln1_g, blk.g_ln1_g);
            emit!(&format!("decoder.layer{i}.ln1.beta"), blk.ln1_b, blk.g_ln1_b);
            emit!(&format!("decoder.layer{i}.attn.wq"), blk.wq, blk.g_wq);
            emit!(&format!("decoder.layer{i}.attn.bq"), blk.bq, blk.g_bq);
            emit!(&format!("decoder.layer{i}.attn.wk"), blk.wk, blk.g_wk);
            emit!(&format!("decoder.layer{i}.attn.bk"), blk.bk, blk.g_bk);
            emit!(&format!("decoder.layer{i}.attn.wv"), blk.wv, blk.g_wv);
            emit!(&format!("decoder.layer{i}.attn.bv"), blk.bv, blk.g_bv);
            emit!(&format!("decoder.layer{i}.attn.wo"), blk.wo, blk.g_wo);
            emit!(&format!("decoder.layer{i}.attn.bo"), blk.bo, blk.g_bo);
            emit!(&format!("decoder.layer{i}.ln2.gamma"), blk.ln2_g, blk.g_ln2_g);
            emit!(&format!("decoder.layer{i}.ln2.beta"), blk.ln2_b, blk.g_ln2_b);
            emit!(&format!("decoder.layer{i}.mlp.w1"), blk.w1, blk.g_w1);
            emit!(&format!("decoder.layer{i}.mlp.b1"), blk.b1, blk.g_b1);
            emit!(&format!("decoder.layer{i}.mlp.w2"), blk.w2, blk.g_w2);
            emit!(&format!("decoder.layer{i}.mlp.b2"), blk.b2, blk.g_b2);
        }
        emit!("decoder.lnf.gamma", self.lnf_g, self.g_lnf_g);
        emit!("decoder.lnf.beta", self.lnf_b, self.g_lnf_b);
        emit!("decoder.head.w", self.head_w, self.g_head_w);
        emit!("decoder.head.b", self.head_b, self.g_head_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Decoder {
        Decoder::new(DecoderConfig {
            vocab_size: 11,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            max_len: 16,
            seed: 9,
        })
        .unwrap()
    }

    fn random_rows(dec: &Decoder, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = sub_rng(seed, &["rows"]);
        let mut rows = Array2::zeros((n, dec.config().embed_dim));
        nn::fill_normal(rows.as_slice_mut().unwrap(), 0.4, &mut rng);
        rows
    }

    #[test]
    fn zeroed_head_gives_uniform_logits() {
        let mut dec = small();
        dec.for_each_param(&mut |slot| {
            if slot.name.starts_with("decoder.head.") {
                slot.value.fill(0.0);
            }
        });
        let rows = random_rows(&dec, 5, 1);
        let (logits, _) = dec.forward_rows(&rows).unwrap();
        for &l in logits.iter() {
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let dec = small();
        let mut a = random_rows(&dec, 6, 2);
        let (la, _) = dec.forward_rows(&a).unwrap();
        // Perturb the last row; earlier logits must not move at all.
        for x in a.row_mut(5).iter_mut() {
            *x += 0.7;
        }
        let (lb, _) = dec.forward_rows(&a).unwrap();
        for i in 0..5 {
            for j in 0..dec.config().vocab_size {
                assert_eq!(la[[i, j]], lb[[i, j]], "row {i} changed");
            }
        }
    }

    #[test]
    fn rejects_overlong_input() {
        let dec = small();
        let rows = random_rows(&dec, 17, 3);
        assert!(matches!(dec.forward_rows(&rows), Err(Error::Shape(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut dec = small();
        let mut rng = sub_rng(77, &["obj"]);
        let rows = random_rows(&dec, 4, 4);
        let n = rows.nrows();
        let v = dec.config().vocab_size;
        // Scalar objective: weighted sum of logits.
        let mut weights = Array2::zeros((n, v));
        nn::fill_normal(weights.as_slice_mut().unwrap(), 1.0, &mut rng);
        let (_, cache) = dec.forward_rows(&rows).unwrap();
        let drows = dec.backward_rows(&cache, &weights);

        let f = |r: &Array2<f64>| -> f64 {
            let (l, _) = dec.forward_rows(r).unwrap();
            (&l * &weights).sum()
        };
        let eps = 1e-6;
        let mut checked = 0;
        for i in 0..n {
            for j in 0..dec.config().embed_dim {
                let mut plus = rows.clone();
                plus[[i, j]] += eps;
                let mut minus = rows.clone();
                minus[[i, j]] -= eps;
                let num = (f(&plus) - f(&minus)) / (2.0 * eps);
                let ana = drows[[i, j]];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    ((num - ana).abs() / denom) < 1e-5,
                    "rows[{i},{j}]: numeric {num} vs analytic {ana}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, n * dec.config().embed_dim);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut dec = small();
        let mut rng = sub_rng(78, &["obj2"]);
        let rows = random_rows(&dec, 4, 5);
        let v = dec.config().vocab_size;
        let mut weights = Array2::zeros((4, v));
        nn::fill_normal(weights.as_slice_mut().unwrap(), 1.0, &mut rng);

        dec.zero_grads();
        let (_, cache) = dec.forward_rows(&rows).unwrap();
        dec.backward_rows(&cache, &weights);

        // Snapshot analytic grads for a random subset of parameters.
        let mut flat: Vec<(String, usize, f64)> = Vec::new();
        dec.for_each_param(&mut |slot| {
            for (i, g) in slot.grad.iter().enumerate() {
                flat.push((slot.name.to_string(), i, *g));
            }
        });
        let mut pick = sub_rng(6, &["pick"]);
        let eps = 1e-6;
        for _ in 0..60 {
            let (name, idx, ana) = flat[pick.random_range(0..flat.len())].clone();
            let bump = |dec: &mut Decoder, delta: f64| {
                dec.for_each_param(&mut |slot| {
                    if slot.name == name.as_str() {
                        slot.value[idx] += delta;
                    }
                });
            };
            bump(&mut dec, eps);
            let (lp, _) = dec.forward_rows(&rows).unwrap();
            let fp = (&lp * &weights).sum();
            bump(&mut dec, -2.0 * eps);
            let (lm, _) = dec.forward_rows(&rows).unwrap();
            let fm = (&lm * &weights).sum();
            bump(&mut dec, eps);
            let num = (fp - fm) / (2.0 * eps);
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                ((num - ana).abs() / denom) < 1e-4,
                "{name}[{idx}]: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn embed_token_rejects_out_of_vocab() {
        let dec = small();
        assert!(dec.embed_token(10).is_ok());
        assert!(dec.embed_token(11).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let mut a = small();
        let mut b = small();
        assert_eq!(nn::param_checksum(&mut a), nn::param_checksum(&mut b));
    }
}
