//! Analytic attention cost next to the affinity peak measured by the tape's meter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::AttentionConfig;
use crate::autograd::Tape;
use crate::error::Result;
use crate::gridded::{attention_cost, GriddedAttention, ScaleSet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub side: usize,
    pub scales: Vec<f64>,
    pub tile: usize,
    pub tiles: usize,
    pub gridded_entries: u128,
    pub full_entries: u128,
    pub ratio: f64,
    /// Peak live affinity elements during one inference pass, when measured.
    pub measured_peak: Option<usize>,
}

/// Peak live affinity elements while running gridded tri-attention over one
/// `[1, channels, side, side]` input per scale, branch after branch, in inference mode.
pub fn measure_peak_affinity(side: usize, scales: &ScaleSet, tile: Option<usize>, channels: usize) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let att = GriddedAttention::new(&mut store, "bench", channels, scales, tile, &AttentionConfig::default(), &mut rng)?;
    let tape = Tape::inference();
    let maps = scales
        .factors()
        .iter()
        .map(|&f| {
            let s = (side / f).max(1);
            tape.constant(Tensor::from_fn(&[1, channels, s, s], |i| ((i * 7919) % 101) as f64 / 101.0))
        })
        .collect::<Vec<_>>();
    att.forward(&tape, &store, &maps)?;
    Ok(tape.meter().peak())
}

pub fn benchmark(side: usize, scales: &ScaleSet, tile: usize, measure_channels: Option<usize>) -> Result<BenchRow> {
    let cost = attention_cost(side, scales, tile)?;
    let measured_peak = match measure_channels {
        Some(c) => Some(measure_peak_affinity(side, scales, Some(tile), c)?),
        None => None,
    };
    Ok(BenchRow {
        side,
        scales: scales.scales(),
        tile,
        tiles: cost.tile_count,
        gridded_entries: cost.gridded_entries,
        full_entries: cost.full_entries,
        ratio: cost.ratio,
        measured_peak,
    })
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    fs::write(path, render_csv(rows))?;
    Ok(())
}

/// Scales are `;`-separated inside their column.
pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("side,scales,T,tiles,gridded_entries,full_entries,ratio,measured_peak\n");
    for r in rows {
        let scales: Vec<String> = r.scales.iter().map(|v| v.to_string()).collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.side,
            scales.join(";"),
            r.tile,
            r.tiles,
            r.gridded_entries,
            r.full_entries,
            r.ratio,
            r.measured_peak.map_or(String::new(), |p| p.to_string())
        )
        .unwrap();
    }
    s
}
