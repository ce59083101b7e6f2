//! Multi-scale feature construction, fusion and gridded (tiled) attention.
//!
//! Each scale runs the backbone on a downsampled copy of the input. The per-scale maps
//! are fused at full resolution, each scale's working map is `concat(map, rescaled
//! fused)`, and that map is cut into constant-size tiles. A per-scale tri-attention
//! module (shared by all tiles of that scale) runs on every tile, tiles are reassembled,
//! and coarser scales are brought back to full size through a chain of upscaling blocks
//! that is shared between scales.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, TriAttention};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Integer downsampling factors, finest first, e.g. `[1, 2, 4]` for scales `{1, ½, ¼}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleSet {
    factors: Vec<usize>,
}

impl ScaleSet {
    pub fn from_factors(factors: Vec<usize>) -> Result<Self> {
        match factors.as_slice() {
            [] => return Err(Error::invalid("scale set is empty")),
            [first, ..] if *first != 1 => {
                return Err(Error::invalid("the finest scale must be 1"))
            }
            _ => {}
        }
        if factors.len() > 1 {
            let ratio = factors[1];
            if ratio < 2 {
                return Err(Error::invalid("scales must strictly decrease"));
            }
            for pair in factors.windows(2) {
                if pair[1] != pair[0] * ratio {
                    return Err(Error::invalid(format!(
                        "scales {:?} do not share a common integer factor",
                        factors
                    )));
                }
            }
        }
        Ok(ScaleSet { factors })
    }

    /// `count` scales separated by factor 2: `{1, ½, …}`.
    pub fn halving(count: usize) -> Result<Self> {
        Self::from_factors((0..count).map(|i| 1usize << i).collect())
    }

    /// Parses scale values such as `1, 0.5, 0.25`.
    pub fn from_scales(scales: &[f64]) -> Result<Self> {
        let factors = scales
            .iter()
            .map(|&s| {
                if !(s > 0.0 && s <= 1.0) {
                    return Err(Error::invalid(format!("scale {s} is not in (0, 1]")));
                }
                let f = 1.0 / s;
                let r = f.round();
                if (f - r).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "scale {s} is not an integer rescale factor"
                    )));
                }
                Ok(r as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_factors(factors)
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn scales(&self) -> Vec<f64> {
        self.factors.iter().map(|&f| 1.0 / f as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Factor between adjacent scales (1 for a single scale).
    pub fn ratio(&self) -> usize {
        self.factors.get(1).copied().unwrap_or(1)
    }

    pub fn coarsest(&self) -> usize {
        *self.factors.last().expect("non-empty")
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScaleSet::from_scales(&v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Self {
        s.scales()
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet::halving(3).expect("default scales")
    }
}

/// Anything that maps `[B, C_in, H, W]` to `[B, C, H, W]` at stride 1.
pub trait Backbone {
    fn out_channels(&self) -> usize;
    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>>;
}

pub struct MultiScaleFeatureSet<'t> {
    pub scales: ScaleSet,
    pub maps: Vec<Var<'t>>,
    pub fused: Option<Var<'t>>,
}

pub fn build_ms_features<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    image: &Var<'t>,
    backbone: &dyn Backbone,
    scales: &ScaleSet,
) -> Result<MultiScaleFeatureSet<'t>> {
    let &[_, _, h, w] = image.shape() else {
        return Err(Error::invalid("image must be [B, C, H, W]"));
    };
    let coarsest = scales.coarsest();
    if h % coarsest != 0 || w % coarsest != 0 || h < coarsest || w < coarsest {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by the coarsest scale factor {coarsest}"
        )));
    }
    let maps = scales
        .factors()
        .iter()
        .map(|&f| backbone.forward(tape, store, &image.downsample_area(f)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleFeatureSet {
        scales: scales.clone(),
        maps,
        fused: None,
    })
}

/// 1×1 reduction of the concatenated, full-size upsampled scale maps.
#[derive(Clone, Debug)]
pub struct Fusion {
    channels: usize,
    scales: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, scales: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = channels * scales;
        Fusion {
            channels,
            scales,
            weight: store.add(
                format!("{name}.weight"),
                params::fan_in_uniform(&[channels, fan_in, 1, 1], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Sets `set.fused` and returns each scale's working map `concat(map_s, rescale(fused, s))`.
    pub fn fuse<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        set: &mut MultiScaleFeatureSet<'t>,
    ) -> Result<Vec<Var<'t>>> {
        if set.maps.len() != self.scales {
            return Err(Error::invalid(format!(
                "fusion built for {} scales, got {}",
                self.scales,
                set.maps.len()
            )));
        }
        let full = set.maps.first().ok_or_else(|| Error::invalid("no feature maps"))?;
        let (h, w) = (full.shape()[2], full.shape()[3]);
        let up = set
            .maps
            .iter()
            .map(|m| {
                if m.shape()[1] != self.channels {
                    return Err(Error::shape("fuse channels", &[self.channels], &[m.shape()[1]]));
                }
                m.upsample_bilinear(h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var<'t>> = up.iter().collect();
        let fused = Var::concat_channels(&refs)?.conv2d(
            &tape.param(store, self.weight),
            Some(&tape.param(store, self.bias)),
            1,
            0,
        )?;
        let working = set
            .maps
            .iter()
            .zip(set.scales.factors())
            .map(|(m, &f)| Var::concat_channels(&[m, &fused.downsample_area(f)?]))
            .collect::<Result<Vec<_>>>()?;
        set.fused = Some(fused);
        Ok(working)
    }
}

/// Placement metadata for a tiling of a `[B, C, H, W]` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileLayout {
    pub tile_size: usize,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileLayout {
    pub fn new(shape: &[usize], tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::invalid("tile size must be positive"));
        }
        let &[batch, channels, height, width] = shape else {
            return Err(Error::invalid("tiling expects [B, C, H, W]"));
        };
        Ok(TileLayout {
            tile_size,
            batch,
            channels,
            height,
            width,
            tile_rows: height.div_ceil(tile_size),
            tile_cols: width.div_ceil(tile_size),
        })
    }

    pub fn tiles_per_image(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    /// Top-left corner of row-major tile `t`.
    pub fn origin(&self, t: usize) -> (usize, usize) {
        (
            (t / self.tile_cols) * self.tile_size,
            (t % self.tile_cols) * self.tile_size,
        )
    }

    /// Rows and columns of zero padding added on the bottom and right.
    pub fn padding(&self) -> (usize, usize) {
        (
            self.tile_rows * self.tile_size - self.height,
            self.tile_cols * self.tile_size - self.width,
        )
    }

    /// Copies between the map layout and the tile-major layout `[B·nt, C, T, T]`.
    fn scatter(&self, src: &[f64], to_tiles: bool) -> Vec<f64> {
        let t = self.tile_size;
        let nt = self.tiles_per_image();
        let (h, w) = (self.height, self.width);
        let mut out = if to_tiles {
            vec![0.0; self.batch * nt * self.channels * t * t]
        } else {
            vec![0.0; self.batch * self.channels * h * w]
        };
        for b in 0..self.batch {
            for tile in 0..nt {
                let (oy, ox) = self.origin(tile);
                let rows = t.min(h.saturating_sub(oy));
                let cols = t.min(w.saturating_sub(ox));
                for c in 0..self.channels {
                    let map_plane = (b * self.channels + c) * h * w;
                    let tile_plane = ((b * nt + tile) * self.channels + c) * t * t;
                    for y in 0..rows {
                        let m = map_plane + (oy + y) * w + ox;
                        let tl = tile_plane + y * t;
                        if to_tiles {
                            out[tl..tl + cols].copy_from_slice(&src[m..m + cols]);
                        } else {
                            out[m..m + cols].copy_from_slice(&src[tl..tl + cols]);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Cuts a map into zero-padded `T×T` tiles stacked on the batch axis, tile-major per image.
pub fn tile_var<'t>(map: &Var<'t>, tile_size: usize) -> Result<(Var<'t>, TileLayout)> {
    let layout = TileLayout::new(map.shape(), tile_size)?;
    let t = tile_size;
    let shape = [
        layout.batch * layout.tiles_per_image(),
        layout.channels,
        t,
        t,
    ];
    let out = Tensor::new(&shape, layout.scatter(map.value().data(), true))?;
    let l = layout.clone();
    let map_shape = map.shape().to_vec();
    let var = map.tape().record(out, &[map], move |g, _| {
        vec![Some(Tensor::new(&map_shape, l.scatter(g.data(), false)).unwrap())]
    });
    Ok((var, layout))
}

/// Inverse of [`tile_var`]; strips the padding.
pub fn untile_var<'t>(tiles: &Var<'t>, layout: &TileLayout) -> Result<Var<'t>> {
    let t = layout.tile_size;
    let expected = [
        layout.batch * layout.tiles_per_image(),
        layout.channels,
        t,
        t,
    ];
    if tiles.shape() != expected {
        return Err(Error::shape("untile", &expected, tiles.shape()));
    }
    let out = Tensor::new(
        &[layout.batch, layout.channels, layout.height, layout.width],
        layout.scatter(tiles.value().data(), false),
    )?;
    let l = layout.clone();
    Ok(tiles.tape().record(out, &[tiles], move |g, _| {
        vec![Some(Tensor::new(&expected, l.scatter(g.data(), true)).unwrap())]
    }))
}

/// Tiles of one map with their origins.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub layout: TileLayout,
    /// Downsampling factor of the source map.
    pub source_factor: usize,
    /// One `[B, C, T, T]` tensor per tile, row-major.
    pub tiles: Vec<Tensor>,
    pub origins: Vec<(usize, usize)>,
}

pub fn tile(map: &Tensor, tile_size: usize) -> Result<TileGrid> {
    let tape = Tape::inference();
    let (stacked, layout) = tile_var(&tape.constant(map.clone()), tile_size)?;
    let nt = layout.tiles_per_image();
    let per = layout.channels * tile_size * tile_size;
    let data = stacked.value().data();
    let tiles = (0..nt)
        .map(|t| {
            let mut v = Vec::with_capacity(layout.batch * per);
            for b in 0..layout.batch {
                let s = (b * nt + t) * per;
                v.extend_from_slice(&data[s..s + per]);
            }
            Tensor::new(&[layout.batch, layout.channels, tile_size, tile_size], v)
        })
        .collect::<Result<Vec<_>>>()?;
    let origins = (0..nt).map(|t| layout.origin(t)).collect();
    Ok(TileGrid {
        layout,
        source_factor: 1,
        tiles,
        origins,
    })
}

pub fn untile(grid: &TileGrid) -> Result<Tensor> {
    let l = &grid.layout;
    let nt = l.tiles_per_image();
    if grid.tiles.len() != nt {
        return Err(Error::invalid(format!(
            "tile grid has {} tiles, layout needs {nt}",
            grid.tiles.len()
        )));
    }
    let per = l.channels * l.tile_size * l.tile_size;
    let mut stacked = vec![0.0; l.batch * nt * per];
    for (t, tile) in grid.tiles.iter().enumerate() {
        for b in 0..l.batch {
            let d = (b * nt + t) * per;
            stacked[d..d + per].copy_from_slice(&tile.data()[b * per..(b + 1) * per]);
        }
    }
    let tape = Tape::inference();
    let v = tape.constant(Tensor::new(
        &[l.batch * nt, l.channels, l.tile_size, l.tile_size],
        stacked,
    )?);
    Ok(untile_var(&v, l)?.value().clone())
}

/// Nearest upsampling by the scale ratio followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct UpscaleBlock {
    ratio: usize,
    weight: ParamId,
    bias: ParamId,
}

impl UpscaleBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        UpscaleBlock {
            ratio,
            weight: store.add(
                format!("{name}.weight"),
                params::fan_in_uniform(&[channels, channels, 3, 3], channels * 9, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    /// Turns the convolution into the identity, leaving only the nearest upsampling.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let w = store.value_mut(self.weight);
        let c = w.dim(0);
        w.data_mut().fill(0.0);
        for i in 0..c {
            w.set(&[i, i, 1, 1], 1.0);
        }
        store.value_mut(self.bias).data_mut().fill(0.0);
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.upsample_nearest(self.ratio)?.conv2d(
            &tape.param(store, self.weight),
            Some(&tape.param(store, self.bias)),
            1,
            1,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GriddedAttention {
    scales: ScaleSet,
    /// One attention module per scale branch.
    branches: Vec<TriAttention>,
    /// `upscale[i]` maps scale `i + 1` to scale `i`; shared by every coarser branch.
    upscale: Vec<UpscaleBlock>,
    /// `None` attends over whole maps.
    tile_size: Option<usize>,
    /// Tiles attended per batched call.
    batch_width: usize,
}

impl GriddedAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        scales: &ScaleSet,
        tile_size: Option<usize>,
        config: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tile_size == Some(0) {
            return Err(Error::invalid("tile size must be positive"));
        }
        let branches = (0..scales.len())
            .map(|i| TriAttention::new(store, &format!("{name}.branch{i}"), channels, config, rng))
            .collect::<Result<Vec<_>>>()?;
        let upscale = (1..scales.len())
            .map(|i| UpscaleBlock::new(store, &format!("{name}.up{i}"), channels, scales.ratio(), rng))
            .collect();
        Ok(GriddedAttention {
            scales: scales.clone(),
            branches,
            upscale,
            tile_size,
            batch_width: 1,
        })
    }

    pub fn with_batch_width(mut self, width: usize) -> Self {
        self.batch_width = width.max(1);
        self
    }

    pub fn branches(&self) -> &[TriAttention] {
        &self.branches
    }

    pub fn upscale_blocks(&self) -> &[UpscaleBlock] {
        &self.upscale
    }

    pub fn tile_size(&self) -> Option<usize> {
        self.tile_size
    }

    /// Attention on one branch, tile by tile, reassembled at that branch's scale.
    pub fn branch_forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        branch: usize,
        map: &Var<'t>,
    ) -> Result<Var<'t>> {
        let module = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::invalid(format!("no attention branch {branch}")))?;
        let Some(t) = self.tile_size else {
            return module.forward(tape, store, map);
        };
        let (tiles, layout) = tile_var(map, t)?;
        let count = tiles.shape()[0];
        let mut done = Vec::with_capacity(count.div_ceil(self.batch_width));
        let mut start = 0;
        while start < count {
            let len = self.batch_width.min(count - start);
            let chunk = if len == count {
                tiles.clone()
            } else {
                tiles.slice_batch(start, len)?
            };
            done.push(module.forward(tape, store, &chunk)?);
            start += len;
        }
        let attended = if done.len() == 1 {
            done.pop().unwrap()
        } else {
            Var::concat_batch(&done)?
        };
        untile_var(&attended, &layout)
    }

    /// Brings a map at scale index `from` to full size through the shared upscaling chain.
    pub fn realign<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        from: usize,
        x: &Var<'t>,
    ) -> Result<Var<'t>> {
        let mut out = x.clone();
        for block in self.upscale[..from].iter().rev() {
            out = block.forward(tape, store, &out)?;
        }
        Ok(out)
    }

    /// One realigned full-size attention map per scale.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        working: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        if working.len() != self.branches.len() {
            return Err(Error::invalid(format!(
                "gridded attention has {} branches but got {} maps",
                self.branches.len(),
                working.len()
            )));
        }
        working
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let att = self.branch_forward(tape, store, i, m)?;
                self.realign(tape, store, i, &att)
            })
            .collect()
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttentionCost {
    pub tile_count: usize,
    pub gridded_entries: u128,
    pub full_entries: u128,
    pub ratio: f64,
}

/// Positional-affinity sizes of gridded attention versus attention over the full map.
pub fn attention_cost(side: usize, scales: &ScaleSet, tile_size: usize) -> Result<AttentionCost> {
    if tile_size == 0 || side == 0 {
        return Err(Error::invalid("side and tile size must be positive"));
    }
    let tile_count: usize = scales
        .factors()
        .iter()
        .map(|&f| {
            let per_side = (side / f).max(1).div_ceil(tile_size);
            per_side * per_side
        })
        .sum();
    let gridded_entries = tile_count as u128 * (tile_size as u128).pow(4);
    let full_entries = (side as u128).pow(4);
    Ok(AttentionCost {
        tile_count,
        gridded_entries,
        full_entries,
        ratio: gridded_entries as f64 / full_entries as f64,
    })
}
