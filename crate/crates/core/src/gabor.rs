//! Oriented Gabor filter banks and Gabor-modulated convolutions.
//!
//! A modulated layer keeps one learnable kernel stack and multiplies it element-wise by
//! each of the `G` oriented filters, producing one output group per orientation. The
//! orientation axis is kept explicit in the output layout `[batch, G, C_out, H, W]`.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Construction parameters of a bank. Defaults follow `λ = k − 1`, `σ = λ / 2`, `ψ = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub orientations: usize,
    pub kernel_size: usize,
    pub wavelength: f64,
    pub sigma: f64,
    pub phase: f64,
    /// Spatial aspect ratio of the envelope.
    pub aspect: f64,
}

impl GaborParams {
    pub fn for_kernel(orientations: usize, kernel_size: usize) -> Self {
        let wavelength = kernel_size.saturating_sub(1).max(1) as f64;
        GaborParams {
            orientations,
            kernel_size,
            wavelength,
            sigma: 0.5 * wavelength,
            phase: 0.0,
            aspect: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.orientations == 0 {
            return Err(Error::invalid("Gabor bank needs at least one orientation"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "Gabor kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::invalid("Gabor wavelength must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("Gabor envelope sigma must be positive"));
        }
        if !(self.aspect > 0.0 && self.phase.is_finite()) {
            return Err(Error::invalid("Gabor aspect must be positive and phase finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborBank {
    params: GaborParams,
    angles: Vec<f64>,
    filters: Tensor,
}

pub fn make_gabor_bank(
    orientations: usize,
    kernel_size: usize,
    wavelength: f64,
    sigma: f64,
    phase: f64,
) -> Result<GaborBank> {
    GaborBank::new(GaborParams {
        orientations,
        kernel_size,
        wavelength,
        sigma,
        phase,
        aspect: 1.0,
    })
}

impl GaborBank {
    pub fn new(params: GaborParams) -> Result<Self> {
        params.validate()?;
        let angles = orientation_angles(params.orientations);
        let filters = sample_bank(&params, &angles).filters;
        Ok(GaborBank {
            params,
            angles,
            filters,
        })
    }

    pub fn params(&self) -> &GaborParams {
        &self.params
    }

    pub fn orientations(&self) -> usize {
        self.params.orientations
    }

    pub fn kernel_size(&self) -> usize {
        self.params.kernel_size
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// All filters as `[G, k, k]`.
    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    pub fn filter(&self, u: usize) -> &[f64] {
        let kk = self.params.kernel_size * self.params.kernel_size;
        &self.filters.data()[u * kk..(u + 1) * kk]
    }

    /// Replaces the sampled filters; only meant for tests that need a stub bank.
    pub fn with_filters(mut self, filters: Tensor) -> Result<Self> {
        if filters.shape() != self.filters.shape() {
            return Err(Error::shape("GaborBank::with_filters", self.filters.shape(), filters.shape()));
        }
        self.filters = filters;
        Ok(self)
    }
}

pub fn orientation_angles(g: usize) -> Vec<f64> {
    (0..g).map(|u| u as f64 * PI / g as f64).collect()
}

/// Raw samples and their derivatives with respect to σ and λ, before normalisation.
struct Sampled {
    filters: Tensor,
    d_sigma: Tensor,
    d_lambda: Tensor,
}

fn sample_bank(p: &GaborParams, angles: &[f64]) -> Sampled {
    let k = p.kernel_size;
    let half = (k as f64 - 1.0) / 2.0;
    let shape = [angles.len(), k, k];
    let mut raw = Tensor::zeros(&shape);
    let mut dr_sigma = Tensor::zeros(&shape);
    let mut dr_lambda = Tensor::zeros(&shape);
    for (u, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        for row in 0..k {
            for col in 0..k {
                let x = col as f64 - half;
                let y = row as f64 - half;
                let xr = x * c + y * s;
                let yr = -x * s + y * c;
                let rho = xr * xr + p.aspect * p.aspect * yr * yr;
                let env = (-rho / (2.0 * p.sigma * p.sigma)).exp();
                let phi = 2.0 * PI * xr / p.wavelength + p.phase;
                let idx = [u, row, col];
                raw.set(&idx, env * phi.cos());
                dr_sigma.set(&idx, env * phi.cos() * rho / p.sigma.powi(3));
                dr_lambda.set(
                    &idx,
                    env * phi.sin() * 2.0 * PI * xr / (p.wavelength * p.wavelength),
                );
            }
        }
    }
    // Unit max-abs normalisation per filter, differentiated through the arg-max element.
    let kk = k * k;
    let mut filters = raw.clone();
    let mut d_sigma = dr_sigma.clone();
    let mut d_lambda = dr_lambda.clone();
    for u in 0..angles.len() {
        let r = &raw.data()[u * kk..(u + 1) * kk];
        let (m, &rm) = r
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("non-empty filter");
        let norm = rm.abs();
        let sign = rm.signum();
        let ds_m = dr_sigma.data()[u * kk + m];
        let dl_m = dr_lambda.data()[u * kk + m];
        for i in 0..kk {
            let j = u * kk + i;
            let ri = raw.data()[j];
            filters.data_mut()[j] = ri / norm;
            d_sigma.data_mut()[j] = dr_sigma.data()[j] / norm - ri * sign * ds_m / (norm * norm);
            d_lambda.data_mut()[j] =
                dr_lambda.data()[j] / norm - ri * sign * dl_m / (norm * norm);
        }
    }
    Sampled {
        filters,
        d_sigma,
        d_lambda,
    }
}

/// `out[u·O + o, i] = base[o, i] ⊙ filters[u]`, as plain tensors.
pub fn modulate(base: &Tensor, bank: &GaborBank) -> Result<Tensor> {
    let tape = Tape::inference();
    let b = tape.constant(base.clone());
    let f = tape.constant(bank.filters().clone());
    Ok(modulate_var(&b, &f)?.value().clone())
}

/// Differentiable orientation-major modulation of a `[O, I, k, k]` stack by `[G, k, k]` filters.
pub fn modulate_var<'t>(base: &Var<'t>, filters: &Var<'t>) -> Result<Var<'t>> {
    let &[out_ch, in_ch, kh, kw] = base.shape() else {
        return Err(Error::invalid("modulate: base weights must be [O, I, k, k]"));
    };
    let &[g, fh, fw] = filters.shape() else {
        return Err(Error::invalid("modulate: filters must be [G, k, k]"));
    };
    if (kh, kw) != (fh, fw) {
        return Err(Error::shape("modulate kernel size", &[kh, kw], &[fh, fw]));
    }
    let kk = kh * kw;
    let planes = out_ch * in_ch;
    let bd = base.value().clone();
    let fd = filters.value().clone();
    let mut out = Vec::with_capacity(g * planes * kk);
    for u in 0..g {
        let f = &fd.data()[u * kk..(u + 1) * kk];
        for p in 0..planes {
            let w = &bd.data()[p * kk..(p + 1) * kk];
            out.extend(w.iter().zip(f).map(|(a, b)| a * b));
        }
    }
    let out = Tensor::new(&[g * out_ch, in_ch, kh, kw], out)?;
    let (b_shape, f_shape) = (base.shape().to_vec(), filters.shape().to_vec());
    Ok(base.tape().record(out, &[base, filters], move |grad, mask| {
        let gd = grad.data();
        let db = mask[0].then(|| {
            let mut d = vec![0.0; planes * kk];
            for u in 0..g {
                let f = &fd.data()[u * kk..(u + 1) * kk];
                for p in 0..planes {
                    let gs = &gd[(u * planes + p) * kk..(u * planes + p + 1) * kk];
                    for ((dv, gv), fv) in d[p * kk..(p + 1) * kk].iter_mut().zip(gs).zip(f) {
                        *dv += gv * fv;
                    }
                }
            }
            Tensor::new(&b_shape, d).unwrap()
        });
        let df = mask[1].then(|| {
            let mut d = vec![0.0; g * kk];
            for u in 0..g {
                for p in 0..planes {
                    let gs = &gd[(u * planes + p) * kk..(u * planes + p + 1) * kk];
                    let w = &bd.data()[p * kk..(p + 1) * kk];
                    for ((dv, gv), wv) in d[u * kk..(u + 1) * kk].iter_mut().zip(gs).zip(w) {
                        *dv += gv * wv;
                    }
                }
            }
            Tensor::new(&f_shape, d).unwrap()
        });
        vec![db, df]
    }))
}

/// Samples a bank from variable `σ` and `λ` so that both can be learned.
pub fn bank_var<'t>(
    params: &GaborParams,
    sigma: &Var<'t>,
    wavelength: &Var<'t>,
) -> Result<Var<'t>> {
    let p = GaborParams {
        sigma: sigma.value().data()[0],
        wavelength: wavelength.value().data()[0],
        ..*params
    };
    p.validate()?;
    let sampled = sample_bank(&p, &orientation_angles(p.orientations));
    let Sampled {
        filters,
        d_sigma,
        d_lambda,
    } = sampled;
    Ok(sigma
        .tape()
        .record(filters, &[sigma, wavelength], move |g, mask| {
            let dot = |d: &Tensor| {
                Tensor::scalar(g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum())
            };
            vec![mask[0].then(|| dot(&d_sigma)), mask[1].then(|| dot(&d_lambda))]
        }))
}

#[derive(Clone, Debug)]
pub struct GaborConvLayer {
    base: ParamId,
    bank: GaborBank,
    learnable: Option<(ParamId, ParamId)>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    padding: usize,
}

impl GaborConvLayer {
    /// Registers a layer with `out_channels` planes per orientation. The bank is fixed
    /// unless `learnable_bank` is set, in which case σ and λ become parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bank: GaborBank,
        stride: usize,
        padding: usize,
        learnable_bank: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || stride == 0 {
            return Err(Error::invalid("Gabor conv needs positive channels and stride"));
        }
        let k = bank.kernel_size();
        let base = store.add(
            format!("{name}.base"),
            params::fan_in_uniform(
                &[out_channels, in_channels, k, k],
                in_channels * k * k,
                rng,
            ),
        );
        let learnable = learnable_bank.then(|| {
            (
                store.add(format!("{name}.sigma"), Tensor::scalar(bank.params().sigma)),
                store.add(
                    format!("{name}.wavelength"),
                    Tensor::scalar(bank.params().wavelength),
                ),
            )
        });
        Ok(GaborConvLayer {
            base,
            bank,
            learnable,
            in_channels,
            out_channels,
            stride,
            padding,
        })
    }

    pub fn bank(&self) -> &GaborBank {
        &self.bank
    }

    pub fn base_weights(&self) -> ParamId {
        self.base
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn orientations(&self) -> usize {
        self.bank.orientations()
    }

    fn filters<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        match self.learnable {
            None => Ok(tape.constant(self.bank.filters().clone())),
            Some((s, l)) => bank_var(
                self.bank.params(),
                &tape.param(store, s),
                &tape.param(store, l),
            ),
        }
    }

    /// Effective kernel stack `[G·O, I, k, k]`, orientation-major.
    pub fn modulated_weights<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let base = tape.param(store, self.base);
        let filters = self.filters(tape, store)?;
        modulate_var(&base, &filters)
    }

    /// `[B, C_in, H, W]` → `[B, G, C_out, H', W']`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "gabor_conv input",
                &[0, self.in_channels, 0, 0],
                s,
            ));
        }
        let w = self.modulated_weights(tape, store)?;
        let y = x.conv2d(&w, None, self.stride, self.padding)?;
        let &[b, _, h, wd] = y.shape() else {
            unreachable!()
        };
        y.reshape(&[b, self.orientations(), self.out_channels, h, wd])
    }
}

/// Free-function form of [`GaborConvLayer::forward`].
pub fn gabor_conv<'t>(
    x: &Var<'t>,
    layer: &GaborConvLayer,
    store: &ParamStore,
) -> Result<Var<'t>> {
    layer.forward(x.tape(), store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rejects_invalid_parameters() {
        assert!(make_gabor_bank(0, 5, 4.0, 2.0, 0.0).is_err());
        assert!(make_gabor_bank(4, 4, 4.0, 2.0, 0.0).is_err());
        assert!(make_gabor_bank(4, 5, 0.0, 2.0, 0.0).is_err());
        assert!(make_gabor_bank(4, 5, 4.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn angles_cover_half_turn_uniformly() {
        let bank = make_gabor_bank(4, 5, 4.0, 2.0, 0.0).unwrap();
        let want = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];
        for (a, b) in bank.angles().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn filters_are_unit_max_normalised() {
        let bank = make_gabor_bank(6, 7, 3.0, 1.5, 0.4).unwrap();
        for u in 0..6 {
            let m = bank.filter(u).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-15);
            assert!(bank.filter(u).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn single_orientation_bank() {
        let bank = make_gabor_bank(1, 3, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(bank.angles(), &[0.0]);
        assert_eq!(bank.filters().shape(), &[1, 3, 3]);
    }

    #[test]
    fn modulate_scalar_kernels() {
        let bank = make_gabor_bank(2, 1, 1.0, 1.0, 0.0)
            .unwrap()
            .with_filters(Tensor::new(&[2, 1, 1], vec![0.5, -2.0]).unwrap())
            .unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let out = modulate(&w, &bank).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1, 1]);
        assert_eq!(out.data(), &[1.5, -6.0]);
    }

    #[test]
    fn modulate_identity_and_annihilation() {
        let bank = make_gabor_bank(3, 3, 2.0, 1.0, 0.0).unwrap();
        let ones = bank.clone().with_filters(Tensor::ones(&[3, 3, 3])).unwrap();
        let w = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64 * 0.1 - 1.0);
        let out = modulate(&w, &ones).unwrap();
        for u in 0..3 {
            assert_eq!(&out.data()[u * 36..(u + 1) * 36], w.data());
        }
        let zero = modulate(&Tensor::zeros(&[2, 2, 3, 3]), &bank).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_rejects_kernel_mismatch() {
        let bank = make_gabor_bank(2, 5, 4.0, 2.0, 0.0).unwrap();
        assert!(modulate(&Tensor::zeros(&[1, 1, 3, 3]), &bank).is_err());
    }

    #[test]
    fn bank_is_deterministic() {
        let a = make_gabor_bank(4, 9, 4.0, 2.0, 0.3).unwrap();
        let b = make_gabor_bank(4, 9, 4.0, 2.0, 0.3).unwrap();
        assert_eq!(a.filters().data(), b.filters().data());
    }

    #[test]
    fn parameter_count_matches_plain_kernel_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bank = make_gabor_bank(4, 3, 2.0, 1.0, 0.0).unwrap();
        GaborConvLayer::new(&mut store, "g", 5, 2, bank.clone(), 1, 1, false, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), 2 * 5 * 3 * 3);
        let mut learn = ParamStore::new();
        GaborConvLayer::new(&mut learn, "g", 5, 2, bank, 1, 1, true, &mut rng).unwrap();
        assert_eq!(learn.trainable_count(), 2 * 5 * 3 * 3 + 2);
    }
}
