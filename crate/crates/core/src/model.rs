//! The full segmentation network: arcsinh input scaling, a stride-1 convolutional
//! backbone run per scale, fusion, gridded tri-attention, and six 1×1 heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gridded::{build_ms_features, Backbone, Fusion, GriddedAttention, ScaleSet};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Backbone feature width; working maps have twice this many channels.
    pub width: usize,
    pub backbone_layers: usize,
    pub scales: ScaleSet,
    /// `None` disables gridding and attends over whole maps; written as `0` in files.
    #[serde(with = "tile_size_serde")]
    pub tile_size: Option<usize>,
    pub attention: AttentionConfig,
    /// Tiles attended per batched call.
    pub tile_batch: usize,
    pub arcsinh: bool,
    pub zero_init_heads: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            width: 32,
            backbone_layers: 4,
            scales: ScaleSet::default(),
            tile_size: Some(16),
            attention: AttentionConfig::default(),
            tile_batch: 1,
            arcsinh: true,
            zero_init_heads: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Non-gridded multi-scale dual attention.
    pub fn control(width: usize) -> Self {
        ModelConfig {
            width,
            tile_size: None,
            attention: AttentionConfig::dual(),
            ..Self::default()
        }
    }

    /// Gridded multi-scale tri-attention.
    pub fn full(width: usize, tile_size: usize) -> Self {
        ModelConfig {
            width,
            tile_size: Some(tile_size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.backbone_layers == 0 {
            return Err(Error::Config("channels, width and layers must be positive".into()));
        }
        if self.tile_size == Some(0) || self.tile_batch == 0 {
            return Err(Error::Config("tile size and tile batch must be positive".into()));
        }
        if self.attention.gabor && self.attention.gabor_kernel.is_multiple_of(2) {
            return Err(Error::Config("Gabor kernel size must be odd".into()));
        }
        Ok(())
    }
}

mod tile_size_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        Ok(match usize::deserialize(d)? {
            0 => None,
            t => Some(t),
        })
    }
}

/// `arcsinh(a·x + b)` with learnable scalars.
#[derive(Clone, Debug)]
pub struct ArcsinhLayer {
    pub a: ParamId,
    pub b: ParamId,
}

impl ArcsinhLayer {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        ArcsinhLayer {
            a: store.add(format!("{name}.a"), Tensor::scalar(1.0)),
            b: store.add(format!("{name}.b"), Tensor::scalar(0.0)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x
            .mul_scalar(&tape.param(store, self.a))?
            .add_scalar(&tape.param(store, self.b))?
            .asinh())
    }
}

/// Stacked 3×3 convolutions, each followed by a rectifier and layer normalisation.
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    layers: Vec<ConvBlock>,
    width: usize,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBackbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { width };
                ConvBlock {
                    weight: store.add(
                        format!("{name}.conv{i}.weight"),
                        params::he_uniform(&[width, cin, 3, 3], cin * 9, rng),
                    ),
                    bias: store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[width])),
                    gamma: store.add(format!("{name}.norm{i}.gamma"), Tensor::ones(&[width])),
                    beta: store.add(format!("{name}.norm{i}.beta"), Tensor::zeros(&[width])),
                }
            })
            .collect();
        ConvBackbone { layers, width }
    }
}

impl Backbone for ConvBackbone {
    fn out_channels(&self) -> usize {
        self.width
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = h
                .conv2d(
                    &tape.param(store, l.weight),
                    Some(&tape.param(store, l.bias)),
                    1,
                    1,
                )?
                .relu()
                .layer_norm(&tape.param(store, l.gamma), &tape.param(store, l.beta), 1e-5)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, channels: usize, zero: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = if zero {
            Tensor::zeros(&[1, channels, 1, 1])
        } else {
            params::fan_in_uniform(&[1, channels, 1, 1], channels, rng)
        };
        Head {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1])),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            &tape.param(store, self.weight),
            Some(&tape.param(store, self.bias)),
            1,
            0,
        )
    }
}

/// Six `[B, 1, H, W]` logit maps: one per scale on the attention maps, one per scale on
/// the working feature maps.
pub struct SegOutputs<'t> {
    pub attention: Vec<Var<'t>>,
    pub features: Vec<Var<'t>>,
}

impl<'t> SegOutputs<'t> {
    /// Attention heads first, then feature heads, finest scale first within each.
    pub fn all(&self) -> Vec<Var<'t>> {
        self.attention.iter().chain(&self.features).cloned().collect()
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    store: ParamStore,
    arcsinh: Option<ArcsinhLayer>,
    backbone: ConvBackbone,
    fusion: Fusion,
    gridded: GriddedAttention,
    attention_heads: Vec<Head>,
    feature_heads: Vec<Head>,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let arcsinh = config
            .arcsinh
            .then(|| ArcsinhLayer::new(&mut store, "arcsinh"));
        let backbone = ConvBackbone::new(
            &mut store,
            "backbone",
            config.in_channels,
            config.width,
            config.backbone_layers,
            &mut rng,
        );
        let n_scales = config.scales.len();
        let fusion = Fusion::new(&mut store, "fusion", config.width, n_scales, &mut rng);
        let working = 2 * config.width;
        let gridded = GriddedAttention::new(
            &mut store,
            "grid",
            working,
            &config.scales,
            config.tile_size,
            &config.attention,
            &mut rng,
        )?
        .with_batch_width(config.tile_batch);
        let attention_heads = (0..n_scales)
            .map(|i| Head::new(&mut store, &format!("head.att{i}"), working, config.zero_init_heads, &mut rng))
            .collect();
        let feature_heads = (0..n_scales)
            .map(|i| Head::new(&mut store, &format!("head.feat{i}"), working, config.zero_init_heads, &mut rng))
            .collect();
        Ok(SegModel {
            config,
            store,
            arcsinh,
            backbone,
            fusion,
            gridded,
            attention_heads,
            feature_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn arcsinh(&self) -> Option<&ArcsinhLayer> {
        self.arcsinh.as_ref()
    }

    pub fn gridded(&self) -> &GriddedAttention {
        &self.gridded
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn backbone(&self) -> &ConvBackbone {
        &self.backbone
    }

    pub fn attention_heads(&self) -> &[Head] {
        &self.attention_heads
    }

    pub fn feature_heads(&self) -> &[Head] {
        &self.feature_heads
    }

    pub fn forward<'t>(&self, tape: &'t Tape, image: &Tensor) -> Result<SegOutputs<'t>> {
        let &[_, c, h, w] = image.shape() else {
            return Err(Error::invalid("image must be [B, C, H, W]"));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "model input channels",
                &[self.config.in_channels],
                &[c],
            ));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("model input"));
        }
        let store = &self.store;
        let mut x = tape.constant(image.clone());
        if let Some(layer) = &self.arcsinh {
            x = layer.forward(tape, store, &x)?;
        }
        let mut set = build_ms_features(tape, store, &x, &self.backbone, &self.config.scales)?;
        let working = self.fusion.fuse(tape, store, &mut set)?;
        let attended = self.gridded.forward(tape, store, &working)?;
        let attention = self
            .attention_heads
            .iter()
            .zip(&attended)
            .map(|(head, a)| head.forward(tape, store, a))
            .collect::<Result<Vec<_>>>()?;
        let features = self
            .feature_heads
            .iter()
            .zip(&working)
            .map(|(head, m)| head.forward(tape, store, &m.upsample_bilinear(h, w)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegOutputs {
            attention,
            features,
        })
    }

    /// Mean of the sigmoid of the three attention-head logits, `[B, 1, H, W]`.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let out = self.forward(&tape, image)?;
        let probs: Vec<Tensor> = out
            .attention
            .iter()
            .map(|l| l.value().map(crate::autograd::sigmoid))
            .collect();
        average(&probs)
    }

    /// Like [`predict`](Self::predict), for images whose sides are not multiples of the
    /// coarsest scale factor: pads by edge replication and crops the result.
    pub fn predict_any_size(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.config.scales.coarsest();
        let &[b, c, h, w] = image.shape() else {
            return Err(Error::invalid("image must be [B, C, H, W]"));
        };
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        if (ph, pw) == (h, w) {
            return self.predict(image);
        }
        let padded = Tensor::from_fn(&[b, c, ph, pw], |i| {
            let x = (i % pw).min(w - 1);
            let y = (i / pw % ph).min(h - 1);
            let plane = i / (ph * pw);
            image.data()[(plane * h + y) * w + x]
        });
        let p = self.predict(&padded)?;
        Ok(Tensor::from_fn(&[b, 1, h, w], |i| {
            let x = i % w;
            let y = i / w % h;
            let n = i / (h * w);
            p.data()[(n * ph + y) * pw + x]
        }))
    }
}

pub fn average(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero maps"))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("average", first.shape(), m.shape()));
        }
        acc.add_assign(m);
    }
    Ok(acc.scale(1.0 / maps.len() as f64))
}

/// Pixel-wise mean of each model's [`SegModel::predict`].
pub fn ensemble_predict(models: &[SegModel], image: &Tensor) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    let preds = models
        .iter()
        .map(|m| m.predict_any_size(image))
        .collect::<Result<Vec<_>>>()?;
    average(&preds)
}
