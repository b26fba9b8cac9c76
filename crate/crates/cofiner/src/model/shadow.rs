//! Double-precision shadow of the classifier.
//!
//! Mirrors the forward pass, both losses, and backward in f64 with the same
//! formulas and accumulation order as the f32 implementation. The
//! finite-difference gradient checks run against this replica: central
//! differences with a usable step size drown in f32 rounding noise, so both
//! sides of the comparison are computed here.

use super::{window_buckets, TokenClassifier};
use crate::model::LOG_FLOOR;

/// f64 copy of all parameters plus the dimensions needed to run them.
#[derive(Debug, Clone)]
pub struct ShadowModel {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub hidden_dim: usize,
    pub num_tags: usize,
    pub embed: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Cached intermediates of one shadow forward pass.
#[derive(Debug)]
pub struct ShadowForward {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub h: Vec<f64>,
    pub probs: Vec<f64>,
    pub n: usize,
}

impl ShadowModel {
    pub fn from_model(model: &TokenClassifier) -> Self {
        let c = &model.config;
        let cast = |t: &super::Tensor| t.data.iter().map(|&v| v as f64).collect();
        ShadowModel {
            vocab_size: c.vocab_size,
            embed_dim: c.embed_dim,
            window: c.window,
            hidden_dim: c.hidden_dim,
            num_tags: c.num_tags,
            embed: cast(&model.embed),
            w1: cast(&model.w1),
            b1: cast(&model.b1),
            w2: cast(&model.w2),
            b2: cast(&model.b2),
        }
    }

    pub fn input_dim(&self) -> usize {
        (2 * self.window + 1) * self.embed_dim
    }

    /// Total parameter count across the flat layout embed|w1|b1|w2|b2.
    pub fn param_count(&self) -> usize {
        self.embed.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        let (slice, off) = self.locate(i);
        slice[off]
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (slice, off) = self.locate_mut(i);
        slice[off] = v;
    }

    fn locate(&self, mut i: usize) -> (&[f64], usize) {
        for slice in [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2] {
            if i < slice.len() {
                return (slice, i);
            }
            i -= slice.len();
        }
        panic!("parameter index out of range");
    }

    fn locate_mut(&mut self, mut i: usize) -> (&mut [f64], usize) {
        for slice in [
            &mut self.embed,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ] {
            if i < slice.len() {
                return (slice, i);
            }
            i -= slice.len();
        }
        panic!("parameter index out of range");
    }

    /// Forward pass; `drop_scale`, when given, must hold one inverted-dropout
    /// factor per (token, hidden unit) and is applied after the ReLU.
    pub fn forward(&self, buckets: &[u32], drop_scale: Option<&[f64]>) -> ShadowForward {
        let n = buckets.len();
        let (ed, hd, nt) = (self.embed_dim, self.hidden_dim, self.num_tags);
        let in_dim = self.input_dim();
        let mut x = vec![0.0f64; n * in_dim];
        for pos in 0..n {
            let win = window_buckets(buckets, pos, self.window);
            for (s, &b) in win.iter().enumerate() {
                let row = &self.embed[b as usize * ed..(b as usize + 1) * ed];
                x[pos * in_dim + s * ed..pos * in_dim + (s + 1) * ed].copy_from_slice(row);
            }
        }
        let mut z1 = vec![0.0f64; n * hd];
        for pos in 0..n {
            let xr = &x[pos * in_dim..(pos + 1) * in_dim];
            for j in 0..hd {
                let wrow = &self.w1[j * in_dim..(j + 1) * in_dim];
                let mut acc = self.b1[j];
                for (w, v) in wrow.iter().zip(xr) {
                    acc += w * v;
                }
                z1[pos * hd + j] = acc;
            }
        }
        let mut h = vec![0.0f64; n * hd];
        for i in 0..n * hd {
            let s = drop_scale.map_or(1.0, |d| d[i]);
            h[i] = z1[i].max(0.0) * s;
        }
        let mut probs = vec![0.0f64; n * nt];
        for pos in 0..n {
            let hr = &h[pos * hd..(pos + 1) * hd];
            let logits: Vec<f64> = (0..nt)
                .map(|j| {
                    let wrow = &self.w2[j * hd..(j + 1) * hd];
                    let mut acc = self.b2[j];
                    for (w, v) in wrow.iter().zip(hr) {
                        acc += w * v;
                    }
                    acc
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[pos * nt + j] = e / sum;
            }
        }
        ShadowForward { x, z1, h, probs, n }
    }

    /// Reverse-mode gradients for `dL/dprobs`, flat in the parameter layout.
    pub fn backward(
        &self,
        cache: &ShadowForward,
        buckets: &[u32],
        drop_scale: Option<&[f64]>,
        dprobs: &[f64],
    ) -> Vec<f64> {
        let n = cache.n;
        let (ed, hd, nt) = (self.embed_dim, self.hidden_dim, self.num_tags);
        let in_dim = self.input_dim();
        let slots = 2 * self.window + 1;
        let mut g_embed = vec![0.0f64; self.embed.len()];
        let mut g_w1 = vec![0.0f64; self.w1.len()];
        let mut g_b1 = vec![0.0f64; self.b1.len()];
        let mut g_w2 = vec![0.0f64; self.w2.len()];
        let mut g_b2 = vec![0.0f64; self.b2.len()];
        let mut dx = vec![0.0f64; in_dim];
        for pos in 0..n {
            let prow = &cache.probs[pos * nt..(pos + 1) * nt];
            let drow = &dprobs[pos * nt..(pos + 1) * nt];
            let dot: f64 = prow.iter().zip(drow).map(|(p, d)| p * d).sum();
            let dlogits: Vec<f64> = prow.iter().zip(drow).map(|(p, d)| p * (d - dot)).collect();
            let hr = &cache.h[pos * hd..(pos + 1) * hd];
            let mut dh = vec![0.0f64; hd];
            for (j, &dl) in dlogits.iter().enumerate() {
                g_b2[j] += dl;
                for k in 0..hd {
                    g_w2[j * hd + k] += dl * hr[k];
                    dh[k] += dl * self.w2[j * hd + k];
                }
            }
            if let Some(scale) = drop_scale {
                let sc = &scale[pos * hd..(pos + 1) * hd];
                for (d, &s) in dh.iter_mut().zip(sc) {
                    *d *= s;
                }
            }
            let z1r = &cache.z1[pos * hd..(pos + 1) * hd];
            for (d, &z) in dh.iter_mut().zip(z1r) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let xr = &cache.x[pos * in_dim..(pos + 1) * in_dim];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (j, &dz) in dh.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                g_b1[j] += dz;
                for k in 0..in_dim {
                    g_w1[j * in_dim + k] += dz * xr[k];
                    dx[k] += dz * self.w1[j * in_dim + k];
                }
            }
            for s in 0..slots {
                let b = window_buckets(buckets, pos, self.window)[s] as usize;
                for e in 0..ed {
                    g_embed[b * ed + e] += dx[s * ed + e];
                }
            }
        }
        let mut flat = g_embed;
        flat.extend(g_w1);
        flat.extend(g_b1);
        flat.extend(g_w2);
        flat.extend(g_b2);
        flat
    }
}

/// f64 token-mean cross-entropy; same clamping as the f32 path.
pub fn shadow_fine_loss(probs: &[f64], num_tags: usize, gold: &[usize]) -> (f64, Vec<f64>) {
    let n = gold.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dprobs = vec![0.0f64; probs.len()];
    for (i, &g) in gold.iter().enumerate() {
        let p = probs[i * num_tags + g];
        total += p.max(LOG_FLOOR).ln();
        if p >= LOG_FLOOR {
            dprobs[i * num_tags + g] = -(inv_n) / p;
        }
    }
    (-(total * inv_n), dprobs)
}

/// f64 masked coarse cross-entropy through a tag-level matrix.
///
/// Returns (loss, dL/dp_fine, dL/dp_coarse).
pub fn shadow_coarse_loss(
    probs: &[f64],
    num_fine_tags: usize,
    m_tag: &[f64],
    num_coarse_tags: usize,
    gold: &[usize],
    mask: &[bool],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = gold.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dprobs = vec![0.0f64; probs.len()];
    let mut d_coarse = vec![0.0f64; n * num_coarse_tags];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let g = gold[i];
        let row = &probs[i * num_fine_tags..(i + 1) * num_fine_tags];
        let mut pc = 0.0;
        for (k, &p) in row.iter().enumerate() {
            pc += p * m_tag[k * num_coarse_tags + g];
        }
        total += pc.max(LOG_FLOOR).ln();
        if pc >= LOG_FLOOR {
            let dpc = -(inv_n) / pc;
            d_coarse[i * num_coarse_tags + g] = dpc;
            for (k, d) in dprobs[i * num_fine_tags..(i + 1) * num_fine_tags]
                .iter_mut()
                .enumerate()
            {
                *d = dpc * m_tag[k * num_coarse_tags + g];
            }
        }
    }
    (-(total * inv_n), dprobs, d_coarse)
}
