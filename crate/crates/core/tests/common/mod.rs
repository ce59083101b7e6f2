//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use gridseg::autograd::{Tape, Var};
use gridseg::params::{ParamId, ParamStore};
use gridseg::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `x` is `[C, N]` row-major; `w` is `[O, C]`. Returns `[O, N]`.
pub fn project(w: &[f64], o: usize, x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * n];
    for a in 0..o {
        for p in 0..n {
            let mut acc = 0.0;
            for k in 0..c {
                acc += w[a * c + k] * x[k * n + p];
            }
            out[a * n + p] = acc;
        }
    }
    out
}

/// Zero-padded stride-1 cross-correlation of one image `[I, H, W]` with `[O, I, k, k]`.
pub fn conv_naive(x: &[f64], i_ch: usize, h: usize, w: usize, weight: &[f64], o_ch: usize, k: usize, pad: usize) -> Vec<f64> {
    let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut out = vec![0.0; o_ch * oh * ow];
    for o in 0..o_ch {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for i in 0..i_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad as isize;
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * i_ch + i) * k + ky) * k + kx]
                                * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Positional attention on one image `[C, N]`: `γ · V·Aᵀ + x`, `A = softmax_j(q_i·k_j)`.
pub fn positional_oracle(x: &[f64], c: usize, n: usize, wq: &[f64], wk: &[f64], r: usize, wv: &[f64], gamma: f64) -> Vec<f64> {
    let q = project(wq, r, x, c, n);
    let k = project(wk, r, x, c, n);
    let v = project(wv, c, x, c, n);
    let mut out = x.to_vec();
    for i in 0..n {
        let energy: Vec<f64> = (0..n)
            .map(|j| (0..r).map(|d| q[d * n + i] * k[d * n + j]).sum())
            .collect();
        let a = softmax(&energy);
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..n {
                acc += v[ch * n + j] * a[j];
            }
            out[ch * n + i] += gamma * acc;
        }
    }
    out
}

/// Channel attention on one image `[C, N]`: `γ · A·X + x`, `A = softmax_b(x_a·x_b)`.
pub fn channel_oracle(x: &[f64], c: usize, n: usize, gamma: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for a in 0..c {
        let energy: Vec<f64> = (0..c)
            .map(|b| (0..n).map(|p| x[a * n + p] * x[b * n + p]).sum())
            .collect();
        let att = softmax(&energy);
        for p in 0..n {
            let mut acc = 0.0;
            for b in 0..c {
                acc += att[b] * x[b * n + p];
            }
            out[a * n + p] += gamma * acc;
        }
    }
    out
}

/// Gabor-modulated convolution of one image, `[G, O, H, W]` flattened.
pub fn gabor_conv_oracle(x: &[f64], i_ch: usize, h: usize, w: usize, base: &[f64], o_ch: usize, filters: &[f64], g: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(g * o_ch * h * w);
    for u in 0..g {
        let f = &filters[u * k * k..(u + 1) * k * k];
        let weight: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(idx, &b)| b * f[idx % (k * k)])
            .collect();
        out.extend(conv_naive(x, i_ch, h, w, &weight, o_ch, k, k / 2));
    }
    out
}

pub struct GaborOracleWeights<'a> {
    pub query: &'a [f64],
    pub key: &'a [f64],
    pub value: &'a [f64],
    pub filters: &'a [f64],
    pub project: &'a [f64],
    pub gamma: f64,
    pub orientations: usize,
    pub planes: usize,
    pub kernel: usize,
}

/// Gabor attention on one image `[C, H, W]`, materialising the `G×G` affinity by loops.
pub fn gabor_attention_oracle(x: &[f64], c: usize, h: usize, w: usize, p: &GaborOracleWeights) -> Vec<f64> {
    let (g, cg, k) = (p.orientations, p.planes, p.kernel);
    let q = gabor_conv_oracle(x, c, h, w, p.query, cg, p.filters, g, k);
    let kk = gabor_conv_oracle(x, c, h, w, p.key, cg, p.filters, g, k);
    let v = gabor_conv_oracle(x, c, h, w, p.value, cg, p.filters, g, k);
    let n = cg * h * w;
    let mut attended = vec![0.0; g * n];
    for a in 0..g {
        let mut energy = vec![0.0; g];
        for (b, e) in energy.iter_mut().enumerate() {
            for m in 0..n {
                *e += q[a * n + m] * kk[b * n + m];
            }
        }
        let att = softmax(&energy);
        for m in 0..n {
            attended[a * n + m] = (0..g).map(|b| att[b] * v[b * n + m]).sum();
        }
    }
    let back = project(p.project, c, &attended, g * cg, h * w);
    x.iter().zip(&back).map(|(xi, bi)| xi + p.gamma * bi).collect()
}

/// Relative error between tape gradients of stored parameters and central differences.
pub fn param_gradcheck<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let out = f(&tape, store).unwrap();
        let grads = tape.backward(&out).unwrap();
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect()
    };
    let eval = |store: &ParamStore| {
        let tape = Tape::inference();
        f(&tape, store).unwrap().value().data()[0]
    };
    let h = 1e-6;
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (&id, grad) in ids.iter().zip(&analytic) {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            d2 += (a - num).powi(2);
            a2 += a * a;
            n2 += num * num;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        d2.sqrt() / scale
    }
}

/// A scalar that depends on every output element with distinct weights.
pub fn weighted_sum<'t>(tape: &'t Tape, y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(random(y.shape(), seed));
    Ok(y.mul(&w)?.sum())
}
