//! Positional, channel and Gabor (orientation-axis) self-attention, and the
//! tri-attention module that sums them over one shared residual.
//!
//! Every branch computes an attention term `γ · A(x)`; the standalone branch ops return
//! `x + γ · A(x)`. Residual scales start at zero so each branch is the identity at init.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gabor::{GaborBank, GaborConvLayer, GaborParams};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub positional: bool,
    pub channel: bool,
    pub gabor: bool,
    /// Divide affinity logits by `sqrt(d)`.
    pub scaled: bool,
    pub orientations: usize,
    pub gabor_kernel: usize,
    /// Output planes per orientation of each Gabor projection.
    pub gabor_channels: usize,
    pub learnable_bank: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            positional: true,
            channel: true,
            gabor: true,
            scaled: false,
            orientations: 4,
            gabor_kernel: 3,
            gabor_channels: 2,
            learnable_bank: false,
        }
    }
}

impl AttentionConfig {
    /// Positional plus channel attention only.
    pub fn dual() -> Self {
        AttentionConfig {
            gabor: false,
            ..Self::default()
        }
    }
}

fn check_input(x: &Var<'_>, channels: usize) -> Result<(usize, usize, usize, usize)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::invalid("attention input must be [B, C, H, W]"));
    };
    if c != channels {
        return Err(Error::shape("attention channels", &[b, channels, h, w], x.shape()));
    }
    if h * w == 0 || c == 0 {
        return Err(Error::invalid("attention input must be non-empty"));
    }
    if !x.value().is_finite() {
        return Err(Error::NonFinite("attention input"));
    }
    Ok((b, c, h, w))
}

fn logits<'t>(energy: Var<'t>, scaled: bool, dim: usize) -> Var<'t> {
    if scaled {
        energy.scale(1.0 / (dim as f64).sqrt())
    } else {
        energy
    }
}

/// Releases a metered affinity once it is no longer referenced by an inference tape.
fn retire(tape: &Tape, elements: usize) {
    if !tape.is_recording() {
        tape.meter().release(elements);
    }
}

#[derive(Clone, Debug)]
pub struct PositionalAttention {
    channels: usize,
    reduced: usize,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    gamma: ParamId,
    scaled: bool,
}

impl PositionalAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        scaled: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let reduced = (channels / 8).max(1);
        let mut proj = |suffix: &str, out: usize| {
            store.add(
                format!("{name}.{suffix}"),
                params::fan_in_uniform(&[out, channels, 1, 1], channels, rng),
            )
        };
        let query = proj("query", reduced);
        let key = proj("key", reduced);
        let value = proj("value", channels);
        let gamma = store.add(format!("{name}.gamma"), Tensor::scalar(0.0));
        PositionalAttention {
            channels,
            reduced,
            query,
            key,
            value,
            gamma,
            scaled,
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    /// `(query, key, value)` 1×1 projection weights.
    pub fn projections(&self) -> (ParamId, ParamId, ParamId) {
        (self.query, self.key, self.value)
    }

    pub fn reduced_channels(&self) -> usize {
        self.reduced
    }

    /// Row-stochastic `[B, N, N]` affinity over positions.
    pub fn affinity<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, _, h, w) = check_input(x, self.channels)?;
        let n = h * w;
        let q = x
            .conv2d(&tape.param(store, self.query), None, 1, 0)?
            .reshape(&[b, self.reduced, n])?;
        let k = x
            .conv2d(&tape.param(store, self.key), None, 1, 0)?
            .reshape(&[b, self.reduced, n])?;
        let energy = q.bmm(&k, true, false)?;
        tape.meter().acquire(b * n * n);
        Ok(logits(energy, self.scaled, self.reduced).softmax_last())
    }

    /// `γ_p · V·Aᵀ`, without the residual.
    pub fn term<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, c, h, w) = check_input(x, self.channels)?;
        let n = h * w;
        let attended = {
            let affinity = self.affinity(tape, store, x)?;
            let v = x
                .conv2d(&tape.param(store, self.value), None, 1, 0)?
                .reshape(&[b, c, n])?;
            let out = v.bmm(&affinity, false, true)?;
            drop(affinity);
            retire(tape, b * n * n);
            out
        };
        attended
            .reshape(&[b, c, h, w])?
            .mul_scalar(&tape.param(store, self.gamma))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        self.term(tape, store, x)?.add(x)
    }
}

/// Channel attention has no projections; only the residual scale is learned.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    channels: usize,
    gamma: ParamId,
    scaled: bool,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, scaled: bool) -> Self {
        ChannelAttention {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::scalar(0.0)),
            scaled,
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    /// Row-stochastic `[B, C, C]` affinity over channel vectors.
    pub fn affinity<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, c, h, w) = check_input(x, self.channels)?;
        let flat = x.reshape(&[b, c, h * w])?;
        let energy = flat.bmm(&flat, false, true)?;
        tape.meter().acquire(b * c * c);
        Ok(logits(energy, self.scaled, h * w).softmax_last())
    }

    pub fn term<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, c, h, w) = check_input(x, self.channels)?;
        let affinity = self.affinity(tape, x)?;
        let out = affinity.bmm(&x.reshape(&[b, c, h * w])?, false, false)?;
        drop(affinity);
        retire(tape, b * c * c);
        out.reshape(&[b, c, h, w])?
            .mul_scalar(&tape.param(store, self.gamma))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        self.term(tape, store, x)?.add(x)
    }
}

/// Attention across the orientation axis of three independent Gabor-modulated projections.
#[derive(Clone, Debug)]
pub struct GaborAttention {
    channels: usize,
    query: GaborConvLayer,
    key: GaborConvLayer,
    value: GaborConvLayer,
    project: ParamId,
    gamma: ParamId,
    scaled: bool,
}

impl GaborAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.orientations == 0 {
            return Err(Error::invalid("Gabor attention needs G >= 1"));
        }
        let bank = GaborBank::new(GaborParams::for_kernel(
            config.orientations,
            config.gabor_kernel,
        ))?;
        Self::with_bank(store, name, channels, bank, config, rng)
    }

    pub fn with_bank(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        bank: GaborBank,
        config: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pad = bank.kernel_size() / 2;
        let cg = config.gabor_channels;
        let layer = |suffix: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            GaborConvLayer::new(
                store,
                &format!("{name}.{suffix}"),
                channels,
                cg,
                bank.clone(),
                1,
                pad,
                config.learnable_bank,
                rng,
            )
        };
        let query = layer("query", store, rng)?;
        let key = layer("key", store, rng)?;
        let value = layer("value", store, rng)?;
        let g = bank.orientations();
        let project = store.add(
            format!("{name}.project"),
            params::fan_in_uniform(&[channels, g * cg, 1, 1], g * cg, rng),
        );
        let gamma = store.add(format!("{name}.gamma"), Tensor::scalar(0.0));
        Ok(GaborAttention {
            channels,
            query,
            key,
            value,
            project,
            gamma,
            scaled: config.scaled,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn project(&self) -> ParamId {
        self.project
    }

    /// `(query, key, value)` Gabor projections.
    pub fn layers(&self) -> (&GaborConvLayer, &GaborConvLayer, &GaborConvLayer) {
        (&self.query, &self.key, &self.value)
    }

    pub fn orientations(&self) -> usize {
        self.query.orientations()
    }

    fn flat<'t>(
        &self,
        layer: &GaborConvLayer,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Var<'t>,
    ) -> Result<Var<'t>> {
        let y = layer.forward(tape, store, x)?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[1], s[2] * s[3] * s[4]])
    }

    /// Row-stochastic `[B, G, G]` affinity between orientation groups.
    pub fn affinity<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, ..) = check_input(x, self.channels)?;
        let q = self.flat(&self.query, tape, store, x)?;
        let k = self.flat(&self.key, tape, store, x)?;
        let n = q.shape()[2];
        let g = self.orientations();
        let energy = q.bmm(&k, false, true)?;
        tape.meter().acquire(b * g * g);
        Ok(logits(energy, self.scaled, n).softmax_last())
    }

    /// Attended orientation features `A·V_g` before back-projection, `[B, G, N]`.
    pub fn attended<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, ..) = check_input(x, self.channels)?;
        let g = self.orientations();
        let affinity = self.affinity(tape, store, x)?;
        let v = self.flat(&self.value, tape, store, x)?;
        let out = affinity.bmm(&v, false, false)?;
        drop(affinity);
        retire(tape, b * g * g);
        Ok(out)
    }

    pub fn term<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, _, h, w) = check_input(x, self.channels)?;
        let g = self.orientations();
        let cg = self.query.out_channels();
        let attended = self.attended(tape, store, x)?;
        attended
            .reshape(&[b, g * cg, h, w])?
            .conv2d(&tape.param(store, self.project), None, 1, 0)?
            .mul_scalar(&tape.param(store, self.gamma))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        self.term(tape, store, x)?.add(x)
    }
}

/// `x + γ_p·A_p(x) + γ_c·A_c(x) + γ_g·A_g(x)` over whichever branches are enabled.
#[derive(Clone, Debug)]
pub struct TriAttention {
    channels: usize,
    pub positional: Option<PositionalAttention>,
    pub channel: Option<ChannelAttention>,
    pub gabor: Option<GaborAttention>,
}

impl TriAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("attention needs at least one channel"));
        }
        let positional = config.positional.then(|| {
            PositionalAttention::new(store, &format!("{name}.pos"), channels, config.scaled, rng)
        });
        let channel = config
            .channel
            .then(|| ChannelAttention::new(store, &format!("{name}.chan"), channels, config.scaled));
        let gabor = if config.gabor {
            Some(GaborAttention::new(
                store,
                &format!("{name}.gabor"),
                channels,
                config,
                rng,
            )?)
        } else {
            None
        };
        Ok(TriAttention {
            channels,
            positional,
            channel,
            gabor,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Residual scales of the enabled branches.
    pub fn gammas(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.positional.as_ref().map(|p| p.gamma()));
        ids.extend(self.channel.as_ref().map(|c| c.gamma()));
        ids.extend(self.gabor.as_ref().map(|g| g.gamma()));
        ids
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        check_input(x, self.channels)?;
        let mut out = x.clone();
        if let Some(p) = &self.positional {
            out = out.add(&p.term(tape, store, x)?)?;
        }
        if let Some(c) = &self.channel {
            out = out.add(&c.term(tape, store, x)?)?;
        }
        if let Some(g) = &self.gabor {
            out = out.add(&g.term(tape, store, x)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(channels: usize) -> (ParamStore, TriAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tri = TriAttention::new(&mut store, "att", channels, &AttentionConfig::default(), &mut rng)
            .unwrap();
        (store, tri)
    }

    fn input(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7 % 13) as f64 * 0.31).sin())
    }

    #[test]
    fn zero_residual_scales_give_identity() {
        let (store, tri) = setup(4);
        let tape = Tape::inference();
        let x = tape.constant(input(&[2, 4, 5, 3]));
        let y = tri.forward(&tape, &store, &x).unwrap();
        assert_eq!(y.value(), x.value());
        for out in [
            tri.positional.as_ref().unwrap().forward(&tape, &store, &x).unwrap(),
            tri.channel.as_ref().unwrap().forward(&tape, &store, &x).unwrap(),
            tri.gabor.as_ref().unwrap().forward(&tape, &store, &x).unwrap(),
        ] {
            assert_eq!(out.value(), x.value());
        }
    }

    #[test]
    fn constant_input_gives_uniform_positional_affinity() {
        let (store, tri) = setup(3);
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[1, 3, 3, 4], 0.8));
        let a = tri
            .positional
            .as_ref()
            .unwrap()
            .affinity(&tape, &store, &x)
            .unwrap();
        assert!(a.value().data().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn single_channel_affinity_is_one() {
        let (mut store, tri) = setup(1);
        let chan = tri.channel.as_ref().unwrap();
        store.set(chan.gamma(), Tensor::scalar(0.5)).unwrap();
        let tape = Tape::inference();
        let xt = input(&[1, 1, 4, 4]);
        let x = tape.constant(xt.clone());
        assert_eq!(chan.affinity(&tape, &x).unwrap().value().data(), &[1.0]);
        let y = chan.forward(&tape, &store, &x).unwrap();
        assert!(y.value().max_abs_diff(&xt.scale(1.5)) < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (mut store, tri) = setup(4);
        for id in tri.gammas() {
            store.set(id, Tensor::scalar(0.9)).unwrap();
        }
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let y = tri.forward(&tape, &store, &x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, tri) = setup(4);
        let tape = Tape::inference();
        let wrong = tape.constant(input(&[1, 3, 4, 4]));
        assert!(tri.forward(&tape, &store, &wrong).is_err());
        let mut bad = input(&[1, 4, 4, 4]);
        bad.data_mut()[5] = f64::NAN;
        let bad = tape.constant(bad);
        assert!(matches!(
            tri.forward(&tape, &store, &bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn meter_returns_to_zero_after_inference() {
        let (store, tri) = setup(4);
        let tape = Tape::inference();
        let x = tape.constant(input(&[1, 4, 4, 4]));
        tri.forward(&tape, &store, &x).unwrap();
        assert_eq!(tape.meter().live(), 0);
        assert_eq!(tape.meter().peak(), 16 * 16);
    }
}
