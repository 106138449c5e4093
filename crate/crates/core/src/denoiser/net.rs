//! Small time-embedded encoder-decoder noise predictor.
//!
//! Two resolution levels with a skip connection:
//!
//! ```text
//! input (C contrasts + 1 mask channel)
//!   -> conv3x3 -> +time bias -> silu -> conv3x3 -> silu      (skip)
//!   -> avgpool/2
//!   -> conv3x3 -> +time bias -> silu -> conv3x3 -> silu
//!   -> nearest x2 -> conv3x3 -> silu
//!   -> concat skip -> conv3x3 -> silu -> conv3x3 (C outputs)
//! ```
//!
//! Parameters live in one flat f32 buffer; gradients mirror it, which
//! keeps the optimizer and the checkpoint format trivial. All convolution
//! is im2col plus GEMM; the backward pass is written out by hand.

use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2};
use std::collections::HashMap;

use super::{Denoiser, SliceBatch};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand_distr::{Distribution, Normal};

/// Architectural hyperparameters plus the forward-schedule parameters the
/// weights were trained against.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub contrasts: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub total_steps: usize,
    pub cosine_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            contrasts: 3,
            base_channels: 16,
            time_dim: 32,
            total_steps: crate::schedule::DEFAULT_T,
            cosine_offset: crate::schedule::DEFAULT_COSINE_OFFSET,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    index: HashMap<String, usize>,
}

impl ParamLayout {
    fn build(cfg: &ModelConfig) -> Self {
        let c = cfg.contrasts;
        let f = cfg.base_channels;
        let te = cfg.time_dim;
        let mut entries = Vec::new();
        let mut total = 0usize;
        let mut push = |name: &str, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry {
                name: name.to_string(),
                shape,
                offset: total,
                len,
            });
            total += len;
        };
        push("enc1a.w", vec![f, (c + 1) * 9]);
        push("enc1a.b", vec![f]);
        push("time1.w", vec![f, te]);
        push("time1.b", vec![f]);
        push("enc1b.w", vec![f, f * 9]);
        push("enc1b.b", vec![f]);
        push("enc2a.w", vec![2 * f, f * 9]);
        push("enc2a.b", vec![2 * f]);
        push("time2.w", vec![2 * f, te]);
        push("time2.b", vec![2 * f]);
        push("enc2b.w", vec![2 * f, 2 * f * 9]);
        push("enc2b.b", vec![2 * f]);
        push("up.w", vec![f, 2 * f * 9]);
        push("up.b", vec![f]);
        push("dec.w", vec![f, 2 * f * 9]);
        push("dec.b", vec![f]);
        push("out.w", vec![c, f * 9]);
        push("out.b", vec![c]);
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        ParamLayout {
            entries,
            total,
            index,
        }
    }

    fn entry(&self, name: &str) -> &ParamEntry {
        &self.entries[self.index[name]]
    }
}

/// The trainable denoiser.
#[derive(Debug, Clone)]
pub struct TimeUnet {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<f32>,
}

/// Forward activations kept for the backward pass.
pub struct ForwardCache {
    x: Array4<f32>,
    h1a: Array4<f32>,
    a1: Array4<f32>,
    h1b: Array4<f32>,
    pooled: Array4<f32>,
    h2a: Array4<f32>,
    a3: Array4<f32>,
    h2b: Array4<f32>,
    upsampled: Array4<f32>,
    hu: Array4<f32>,
    au: Array4<f32>,
    cat: Array4<f32>,
    hd: Array4<f32>,
    ad: Array4<f32>,
    emb: Array2<f32>,
}

impl TimeUnet {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        if cfg.contrasts == 0 {
            return Err(Error::parameter("contrasts", "must be >= 1"));
        }
        if cfg.base_channels == 0 {
            return Err(Error::parameter("base_channels", "must be >= 1"));
        }
        if cfg.time_dim < 2 || cfg.time_dim % 2 != 0 {
            return Err(Error::parameter("time_dim", "must be an even number >= 2"));
        }
        let layout = ParamLayout::build(&cfg);
        let mut params = vec![0f32; layout.total];
        let mut rng = stream_rng(init_seed, &[0x1a17]);
        for entry in &layout.entries {
            if entry.name.ends_with(".b") {
                continue; // biases start at zero
            }
            let fan_in = entry.shape[1] as f64;
            // The output layer starts near (not at) zero so a fresh model
            // already produces distinct, nonzero predictions.
            let scale = if entry.name == "out.w" { 0.05 } else { 1.0 };
            let std = scale * (2.0 / fan_in).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for v in &mut params[entry.offset..entry.offset + entry.len] {
                *v = dist.sample(&mut rng) as f32;
            }
        }
        Ok(TimeUnet {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: Vec<f32>) -> Result<Self> {
        let layout = ParamLayout::build(&cfg);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "parameter buffer holds {} values, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(TimeUnet {
            cfg,
            layout,
            params,
        })
    }

    fn w(&self, name: &str) -> ArrayView2<'_, f32> {
        let e = self.layout.entry(name);
        ArrayView2::from_shape(
            (e.shape[0], e.shape[1]),
            &self.params[e.offset..e.offset + e.len],
        )
        .unwrap()
    }

    fn b(&self, name: &str) -> &[f32] {
        let e = self.layout.entry(name);
        &self.params[e.offset..e.offset + e.len]
    }

    /// Sinusoidal embedding of the timesteps, `(B, time_dim)`.
    fn embed_time(&self, timesteps: &[usize]) -> Array2<f32> {
        let te = self.cfg.time_dim;
        let half = te / 2;
        let mut emb = Array2::<f32>::zeros((timesteps.len(), te));
        for (b, &t) in timesteps.iter().enumerate() {
            for i in 0..half {
                let freq = (-(i as f64) * (10000f64).ln() / (half.max(2) - 1) as f64).exp();
                let angle = t as f64 * freq;
                emb[[b, 2 * i]] = angle.sin() as f32;
                emb[[b, 2 * i + 1]] = angle.cos() as f32;
            }
        }
        emb
    }

    /// Assemble the `(B, C+1, H, W)` network input from a slice batch.
    fn assemble_input(&self, batch: &SliceBatch) -> Array4<f32> {
        let (b, c, h, w) = (
            batch.batch_size(),
            batch.channels(),
            batch.height(),
            batch.width(),
        );
        let mut x = Array4::<f32>::zeros((b, c + 1, h, w));
        for item in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        x[[item, ch, y, xx]] = batch.images[[item, ch, y, xx]] as f32;
                    }
                }
            }
            for y in 0..h {
                for xx in 0..w {
                    x[[item, c, y, xx]] = batch.masks[[item, y, xx]] as f32;
                }
            }
        }
        x
    }

    /// Full forward pass. `keep_cache` retains activations for backprop.
    pub fn forward(
        &self,
        batch: &SliceBatch,
        keep_cache: bool,
    ) -> Result<(Array4<f32>, Option<ForwardCache>)> {
        batch.validate(self.cfg.total_steps)?;
        if batch.channels() != self.cfg.contrasts {
            return Err(Error::shape(
                "batch contrasts",
                &[self.cfg.contrasts],
                &[batch.channels()],
            ));
        }
        let (h, w) = (batch.height(), batch.width());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::parameter(
                "slice shape",
                format!("height and width must be even, got {h}x{w}"),
            ));
        }
        let x = self.assemble_input(batch);
        let emb = self.embed_time(&batch.timesteps);

        let mut h1a = conv3x3(&x, &self.w("enc1a.w"), self.b("enc1a.b"));
        add_time_bias(&mut h1a, &emb, &self.w("time1.w"), self.b("time1.b"));
        let a1 = silu(&h1a);
        let h1b = conv3x3(&a1, &self.w("enc1b.w"), self.b("enc1b.b"));
        let a2 = silu(&h1b);

        let pooled = avgpool2(&a2);
        let mut h2a = conv3x3(&pooled, &self.w("enc2a.w"), self.b("enc2a.b"));
        add_time_bias(&mut h2a, &emb, &self.w("time2.w"), self.b("time2.b"));
        let a3 = silu(&h2a);
        let h2b = conv3x3(&a3, &self.w("enc2b.w"), self.b("enc2b.b"));
        let a4 = silu(&h2b);

        let upsampled = upsample2(&a4);
        let hu = conv3x3(&upsampled, &self.w("up.w"), self.b("up.b"));
        let au = silu(&hu);
        let cat = concat_channels(&au, &a2);
        let hd = conv3x3(&cat, &self.w("dec.w"), self.b("dec.b"));
        let ad = silu(&hd);
        let out = conv3x3(&ad, &self.w("out.w"), self.b("out.b"));

        let cache = keep_cache.then(|| ForwardCache {
            x,
            h1a,
            a1,
            h1b,
            pooled,
            h2a,
            a3,
            h2b,
            upsampled,
            hu,
            au,
            cat,
            hd,
            ad,
            emb,
        });
        Ok((out, cache))
    }

    /// Backpropagate `d_out` (gradient of the loss w.r.t. the network
    /// output) through the cached forward pass. Returns a flat gradient
    /// buffer aligned with [`TimeUnet::params`].
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array4<f32>) -> Vec<f32> {
        let mut grads = vec![0f32; self.layout.total];

        let d_ad = {
            let (dw, db) = self.grad_pair(&mut grads, "out");
            conv3x3_backward(d_out, &cache.ad, &self.w("out.w"), dw, db)
        };
        let d_hd = silu_backward(&d_ad, &cache.hd);
        let d_cat = {
            let (dw, db) = self.grad_pair(&mut grads, "dec");
            conv3x3_backward(&d_hd, &cache.cat, &self.w("dec.w"), dw, db)
        };
        let (d_au, d_a2_from_cat) = split_channels(&d_cat, cache.au.shape()[1]);
        let d_hu = silu_backward(&d_au, &cache.hu);
        let d_upsampled = {
            let (dw, db) = self.grad_pair(&mut grads, "up");
            conv3x3_backward(&d_hu, &cache.upsampled, &self.w("up.w"), dw, db)
        };
        let d_a4 = upsample2_backward(&d_upsampled);
        let d_h2b = silu_backward(&d_a4, &cache.h2b);
        let d_a3 = {
            let (dw, db) = self.grad_pair(&mut grads, "enc2b");
            conv3x3_backward(&d_h2b, &cache.a3, &self.w("enc2b.w"), dw, db)
        };
        let d_h2a = silu_backward(&d_a3, &cache.h2a);
        {
            let (dw, db) = self.grad_pair(&mut grads, "time2");
            time_bias_backward(&d_h2a, &cache.emb, dw, db);
        }
        let d_pooled = {
            let (dw, db) = self.grad_pair(&mut grads, "enc2a");
            conv3x3_backward(&d_h2a, &cache.pooled, &self.w("enc2a.w"), dw, db)
        };
        let mut d_a2 = avgpool2_backward(&d_pooled);
        d_a2 += &d_a2_from_cat;
        let d_h1b = silu_backward(&d_a2, &cache.h1b);
        let d_a1 = {
            let (dw, db) = self.grad_pair(&mut grads, "enc1b");
            conv3x3_backward(&d_h1b, &cache.a1, &self.w("enc1b.w"), dw, db)
        };
        let d_h1a = silu_backward(&d_a1, &cache.h1a);
        {
            let (dw, db) = self.grad_pair(&mut grads, "time1");
            time_bias_backward(&d_h1a, &cache.emb, dw, db);
        }
        {
            let (dw, db) = self.grad_pair(&mut grads, "enc1a");
            conv3x3_backward(&d_h1a, &cache.x, &self.w("enc1a.w"), dw, db);
        }
        grads
    }

    /// Disjoint mutable views of a layer's weight and bias gradients. The
    /// layout places each `<layer>.b` directly after `<layer>.w`.
    fn grad_pair<'g>(
        &self,
        grads: &'g mut [f32],
        layer: &str,
    ) -> (ArrayViewMut2<'g, f32>, &'g mut [f32]) {
        let we = self.layout.entry(&format!("{layer}.w"));
        let be = self.layout.entry(&format!("{layer}.b"));
        debug_assert_eq!(we.offset + we.len, be.offset);
        let (wshape, wlen, woff, blen) = (we.shape.clone(), we.len, we.offset, be.len);
        let chunk = &mut grads[woff..woff + wlen + blen];
        let (ws, bs) = chunk.split_at_mut(wlen);
        (
            ArrayViewMut2::from_shape((wshape[0], wshape[1]), ws).unwrap(),
            bs,
        )
    }
}

impl Denoiser for TimeUnet {
    fn contrasts(&self) -> usize {
        self.cfg.contrasts
    }

    fn total_steps(&self) -> usize {
        self.cfg.total_steps
    }

    fn denoise(&self, batch: &SliceBatch) -> Result<Array4<f64>> {
        let (out, _) = self.forward(batch, false)?;
        let eps = out.mapv(|v| v as f64);
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "denoise".into(),
                reason: "non-finite network output".into(),
            });
        }
        Ok(eps)
    }
}

// ---- layer kernels -------------------------------------------------------

/// Gather 3x3 neighborhoods (zero padded) into a `(C*9, H*W)` matrix.
fn im2col(input: &[f32], c_in: usize, h: usize, w: usize, cols: &mut Array2<f32>) {
    let cols_slice = cols.as_slice_mut().unwrap();
    cols_slice.fill(0.0);
    let hw = h * w;
    for c in 0..c_in {
        let chan = &input[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 9 + ky * 3 + kx) * hw;
                let dy = ky as i64 - 1;
                let dx = kx as i64 - 1;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src_base = sy as usize * w;
                    let dst_base = row + y * w;
                    // Valid x range after the horizontal shift.
                    let (x0, x1) = if dx < 0 { (1, w) } else if dx > 0 { (0, w - 1) } else { (0, w) };
                    for x in x0..x1 {
                        cols_slice[dst_base + x] = chan[src_base + (x as i64 + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a `(C*9, H*W)` gradient matrix back to image layout.
fn col2im(dcols: &Array2<f32>, c_in: usize, h: usize, w: usize, dinput: &mut [f32]) {
    let dcols_slice = dcols.as_slice().unwrap();
    let hw = h * w;
    for c in 0..c_in {
        let chan_base = c * hw;
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (c * 9 + ky * 3 + kx) * hw;
                let dy = ky as i64 - 1;
                let dx = kx as i64 - 1;
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src_base = row + y * w;
                    let dst_base = chan_base + sy as usize * w;
                    let (x0, x1) = if dx < 0 { (1, w) } else if dx > 0 { (0, w - 1) } else { (0, w) };
                    for x in x0..x1 {
                        dinput[dst_base + (x as i64 + dx) as usize] += dcols_slice[src_base + x];
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution over a `(B, C_in, H, W)` tensor.
fn conv3x3(x: &Array4<f32>, w: &ArrayView2<f32>, bias: &[f32]) -> Array4<f32> {
    let (b, c_in, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = w.shape()[0];
    let hw = h * ww;
    let mut out = Array4::<f32>::zeros((b, c_out, h, ww));
    let mut cols = Array2::<f32>::zeros((c_in * 9, hw));
    let x_slice = x.as_slice().unwrap();
    let out_slice = out.as_slice_mut().unwrap();
    for item in 0..b {
        im2col(&x_slice[item * c_in * hw..(item + 1) * c_in * hw], c_in, h, ww, &mut cols);
        let mut result = Array2::<f32>::zeros((c_out, hw));
        ndarray::linalg::general_mat_mul(1.0, w, &cols, 0.0, &mut result);
        let res = result.as_slice().unwrap();
        let dst = &mut out_slice[item * c_out * hw..(item + 1) * c_out * hw];
        for co in 0..c_out {
            let bval = bias[co];
            for (d, r) in dst[co * hw..(co + 1) * hw].iter_mut().zip(&res[co * hw..(co + 1) * hw]) {
                *d = r + bval;
            }
        }
    }
    out
}

/// Backward pass for [`conv3x3`]: accumulates weight/bias gradients and
/// returns the input gradient.
fn conv3x3_backward(
    d_out: &Array4<f32>,
    x: &Array4<f32>,
    w: &ArrayView2<f32>,
    mut dw: ArrayViewMut2<f32>,
    db: &mut [f32],
) -> Array4<f32> {
    let (b, c_in, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c_out = d_out.shape()[1];
    let hw = h * ww;
    let mut dx = Array4::<f32>::zeros((b, c_in, h, ww));
    let mut cols = Array2::<f32>::zeros((c_in * 9, hw));
    let mut dcols = Array2::<f32>::zeros((c_in * 9, hw));
    let x_slice = x.as_slice().unwrap();
    let dout_slice = d_out.as_slice().unwrap();
    let dx_slice = dx.as_slice_mut().unwrap();
    for item in 0..b {
        im2col(&x_slice[item * c_in * hw..(item + 1) * c_in * hw], c_in, h, ww, &mut cols);
        let dout_item =
            ArrayView2::from_shape((c_out, hw), &dout_slice[item * c_out * hw..(item + 1) * c_out * hw])
                .unwrap();
        // dW += dOut . colsT ; db += rowsum(dOut) ; dcols = WT . dOut
        ndarray::linalg::general_mat_mul(1.0, &dout_item, &cols.t(), 1.0, &mut dw);
        for co in 0..c_out {
            let mut s = 0f32;
            for v in dout_item.row(co) {
                s += v;
            }
            db[co] += s;
        }
        ndarray::linalg::general_mat_mul(1.0, &w.t(), &dout_item, 0.0, &mut dcols);
        col2im(&dcols, c_in, h, ww, &mut dx_slice[item * c_in * hw..(item + 1) * c_in * hw]);
    }
    dx
}

/// Add a learned per-channel bias derived from the time embedding.
fn add_time_bias(h: &mut Array4<f32>, emb: &Array2<f32>, w: &ArrayView2<f32>, bias: &[f32]) {
    let (b, c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
    let hw = hh * ww;
    let h_slice = h.as_slice_mut().unwrap();
    for item in 0..b {
        let e = emb.row(item);
        for ch in 0..c {
            let mut t = bias[ch];
            for (wv, ev) in w.row(ch).iter().zip(e.iter()) {
                t += wv * ev;
            }
            for v in &mut h_slice[item * c * hw + ch * hw..item * c * hw + (ch + 1) * hw] {
                *v += t;
            }
        }
    }
}

fn time_bias_backward(
    d_h: &Array4<f32>,
    emb: &Array2<f32>,
    mut dw: ArrayViewMut2<f32>,
    db: &mut [f32],
) {
    let (b, c, hh, ww) = (d_h.shape()[0], d_h.shape()[1], d_h.shape()[2], d_h.shape()[3]);
    let hw = hh * ww;
    let d_slice = d_h.as_slice().unwrap();
    for item in 0..b {
        let e = emb.row(item);
        for ch in 0..c {
            let mut s = 0f32;
            for v in &d_slice[item * c * hw + ch * hw..item * c * hw + (ch + 1) * hw] {
                s += v;
            }
            db[ch] += s;
            for (dwv, ev) in dw.row_mut(ch).iter_mut().zip(e.iter()) {
                *dwv += s * ev;
            }
        }
    }
}

fn silu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v * sigmoid(v))
}

fn silu_backward(d_out: &Array4<f32>, pre: &Array4<f32>) -> Array4<f32> {
    let mut dx = d_out.clone();
    for (d, &p) in dx.iter_mut().zip(pre.iter()) {
        let s = sigmoid(p);
        *d *= s * (1.0 + p * (1.0 - s));
    }
    dx
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn avgpool2(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<f32>::zeros((b, c, h / 2, w / 2));
    for item in 0..b {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out[[item, ch, y, xx]] = 0.25
                        * (x[[item, ch, 2 * y, 2 * xx]]
                            + x[[item, ch, 2 * y, 2 * xx + 1]]
                            + x[[item, ch, 2 * y + 1, 2 * xx]]
                            + x[[item, ch, 2 * y + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    out
}

fn avgpool2_backward(d_out: &Array4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = (
        d_out.shape()[0],
        d_out.shape()[1],
        d_out.shape()[2],
        d_out.shape()[3],
    );
    let mut dx = Array4::<f32>::zeros((b, c, h2 * 2, w2 * 2));
    for item in 0..b {
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let g = 0.25 * d_out[[item, ch, y, xx]];
                    dx[[item, ch, 2 * y, 2 * xx]] = g;
                    dx[[item, ch, 2 * y, 2 * xx + 1]] = g;
                    dx[[item, ch, 2 * y + 1, 2 * xx]] = g;
                    dx[[item, ch, 2 * y + 1, 2 * xx + 1]] = g;
                }
            }
        }
    }
    dx
}

fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<f32>::zeros((b, c, h * 2, w * 2));
    for item in 0..b {
        for ch in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out[[item, ch, y, xx]] = x[[item, ch, y / 2, xx / 2]];
                }
            }
        }
    }
    out
}

fn upsample2_backward(d_out: &Array4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = (
        d_out.shape()[0],
        d_out.shape()[1],
        d_out.shape()[2],
        d_out.shape()[3],
    );
    let mut dx = Array4::<f32>::zeros((b, c, h2 / 2, w2 / 2));
    for item in 0..b {
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dx[[item, ch, y / 2, xx / 2]] += d_out[[item, ch, y, xx]];
                }
            }
        }
    }
    dx
}

fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (bs, ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let cb = b.shape()[1];
    let mut out = Array4::<f32>::zeros((bs, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels(d: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    let a = d.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> SliceBatch {
        let mut rng = stream_rng(seed, &[99]);
        let images = Array4::from_shape_vec(
            (b, c, h, w),
            crate::rng::standard_normal_vec(&mut rng, b * c * h * w),
        )
        .unwrap();
        let masks = Array3::from_shape_vec(
            (b, h, w),
            (0..b * h * w).map(|i| (i % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        SliceBatch {
            images,
            masks,
            timesteps: (0..b).map(|i| 1 + i * 7 % 100).collect(),
            channel_present: Array2::from_elem((b, c), true),
        }
    }

    fn tiny_model(seed: u64) -> TimeUnet {
        TimeUnet::new(
            ModelConfig {
                contrasts: 2,
                base_channels: 4,
                time_dim: 8,
                total_steps: 100,
                cosine_offset: 0.008,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(3);
        let batch = tiny_batch(2, 2, 8, 8, 5);
        let a = model.denoise(&batch).unwrap();
        let b = model.denoise(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_shape_matches_images() {
        let model = tiny_model(3);
        let batch = tiny_batch(3, 2, 8, 12, 5);
        let out = model.denoise(&batch).unwrap();
        assert_eq!(out.shape(), batch.images.shape());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_out_of_range_timestep() {
        let model = tiny_model(3);
        let mut batch = tiny_batch(1, 2, 8, 8, 5);
        batch.timesteps[0] = 101;
        assert!(model.denoise(&batch).is_err());
    }

    #[test]
    fn rejects_odd_slice_shape() {
        let model = tiny_model(3);
        let batch = tiny_batch(1, 2, 7, 8, 5);
        assert!(model.denoise(&batch).is_err());
    }

    #[test]
    fn time_embedding_distinguishes_timesteps() {
        let model = tiny_model(3);
        let mut batch = tiny_batch(1, 2, 8, 8, 5);
        let out1 = model.denoise(&batch).unwrap();
        batch.timesteps[0] = 90;
        let out2 = model.denoise(&batch).unwrap();
        assert_ne!(out1, out2);
    }

    /// Central-difference check of the analytic gradients for every
    /// parameter block on a tiny model.
    #[test]
    fn gradients_match_finite_differences() {
        let mut model = tiny_model(11);
        let batch = tiny_batch(2, 2, 4, 4, 21);
        // Give the zero-initialized output layer nonzero weights so the
        // gradient reaches every block.
        {
            let e = model.layout.entry("out.w").clone();
            let mut rng = stream_rng(4, &[1]);
            for v in &mut model.params[e.offset..e.offset + e.len] {
                *v = (crate::rng::standard_normal_vec(&mut rng, 1)[0] * 0.3) as f32;
            }
        }
        let loss_of = |m: &TimeUnet| -> f64 {
            let (out, _) = m.forward(&batch, false).unwrap();
            out.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
        };
        let (out, cache) = model.forward(&batch, true).unwrap();
        let d_out = out.mapv(|v| 2.0 * v);
        let grads = model.backward(cache.as_ref().unwrap(), &d_out);

        let mut checked = 0;
        for entry in model.layout.entries.clone() {
            // Probe a few indices per block.
            for probe in [0usize, entry.len / 2, entry.len - 1] {
                let idx = entry.offset + probe;
                let eps = 2e-3f32;
                let orig = model.params[idx];
                model.params[idx] = orig + eps;
                let lp = loss_of(&model);
                model.params[idx] = orig - eps;
                let lm = loss_of(&model);
                model.params[idx] = orig;
                let numeric = (lp - lm) / (2.0 * eps as f64);
                let analytic = grads[idx] as f64;
                let denom = numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    ((numeric - analytic) / denom).abs() < 0.08,
                    "{}[{probe}]: numeric {numeric}, analytic {analytic}",
                    entry.name
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
