//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Rendering lives in plain Rust functions so it can be tested natively; the
//! `#[wasm_bindgen]` exports only convert errors.

use gridseg::gabor::make_gabor_bank;
use gridseg::gridded::{attention_cost, ScaleSet};
use gridseg::synth::{generate_cirrus_sample, SynthParams};
use gridseg::Tensor;
use wasm_bindgen::prelude::*;

/// An RGBA image ready for `ImageData`.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Picture {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
}

impl Picture {
    fn blank(width: usize, height: usize) -> Self {
        Picture { width, height, pixels: vec![255; width * height * 4] }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 4;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Paints `values` (`side × side`, row-major) at `(x0, 0)`, each cell `zoom` pixels wide.
    fn panel(&mut self, x0: usize, side: usize, zoom: usize, values: &[f64], color: impl Fn(f64) -> [u8; 3]) {
        for (i, &v) in values.iter().enumerate() {
            let rgb = color(v);
            let (r, c) = (i / side, i % side);
            for dy in 0..zoom {
                for dx in 0..zoom {
                    self.put(x0 + c * zoom + dx, r * zoom + dy, rgb);
                }
            }
        }
    }
}

fn grey(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Blue for negative, red for positive, white at zero; `v` in `[-1, 1]`.
fn diverging(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - v.abs())).round() as u8;
    if v >= 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

const GAP: usize = 4;

/// Filters of a Gabor bank side by side, each normalised by its own peak magnitude.
pub fn render_gabor_bank(
    orientations: usize,
    kernel: usize,
    wavelength: f64,
    sigma: f64,
    phase: f64,
    zoom: usize,
) -> Result<Picture, String> {
    if zoom == 0 {
        return Err("zoom must be positive".into());
    }
    let bank = make_gabor_bank(orientations, kernel, wavelength, sigma, phase).map_err(|e| e.to_string())?;
    let side = kernel * zoom;
    let mut pic = Picture::blank(orientations * (side + GAP) - GAP, side);
    for (u, f) in bank.filters().data().chunks(kernel * kernel).enumerate() {
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let scaled: Vec<f64> = f.iter().map(|v| v / peak).collect();
        pic.panel(u * (side + GAP), kernel, zoom, &scaled, diverging);
    }
    Ok(pic)
}

/// Synthetic sample as three panels: observed image, latent cirrus intensity, consensus mask.
pub fn render_cirrus_sample(seed: u64, size: usize, force_cirrus: bool, coverage: f64) -> Result<Picture, String> {
    let params = SynthParams {
        cirrus_present: force_cirrus.then_some(true),
        coverage,
        ..SynthParams::default()
    };
    let s = generate_cirrus_sample(seed, size, &params).map_err(|e| e.to_string())?;
    let mut pic = Picture::blank(3 * size + 2 * GAP, size);
    let panels: [&Tensor; 3] = [&s.image, &s.intensity, &s.consensus.y];
    for (k, t) in panels.into_iter().enumerate() {
        pic.panel(k * (size + GAP), size, 1, t.data(), grey);
    }
    Ok(pic)
}

/// Affinity-matrix sizes of gridded versus full attention.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub tiles: usize,
    pub gridded_entries: f64,
    pub full_entries: f64,
    pub ratio: f64,
}

/// `scales` halving steps starting at full resolution, tiles of `tile × tile`.
pub fn compute_cost(side: usize, scales: usize, tile: usize) -> Result<Cost, String> {
    let set = ScaleSet::halving(scales).map_err(|e| e.to_string())?;
    let c = attention_cost(side, &set, tile).map_err(|e| e.to_string())?;
    Ok(Cost {
        tiles: c.tile_count,
        gridded_entries: c.gridded_entries as f64,
        full_entries: c.full_entries as f64,
        ratio: c.ratio,
    })
}

#[wasm_bindgen(js_name = gaborBank)]
pub fn gabor_bank(
    orientations: usize,
    kernel: usize,
    wavelength: f64,
    sigma: f64,
    phase: f64,
    zoom: usize,
) -> Result<Picture, JsError> {
    render_gabor_bank(orientations, kernel, wavelength, sigma, phase, zoom).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = cirrusSample)]
pub fn cirrus_sample(seed: u32, size: usize, force_cirrus: bool, coverage: f64) -> Result<Picture, JsError> {
    render_cirrus_sample(seed as u64, size, force_cirrus, coverage).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attentionCost)]
pub fn attention_cost_js(side: usize, scales: usize, tile: usize) -> Result<Cost, JsError> {
    compute_cost(side, scales, tile).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_layout() {
        let p = render_gabor_bank(4, 9, 4.0, 2.0, 0.0, 3).unwrap();
        assert_eq!((p.width, p.height), (4 * 27 + 3 * GAP, 27));
        assert_eq!(p.pixels.len(), p.width * p.height * 4);
        // even-phase filters peak at the centre, which is positive and saturated
        let c = (13 * p.width + 13) * 4;
        assert_eq!(&p.pixels[c..c + 3], &[255, 0, 0]);
    }

    #[test]
    fn sample_panels() {
        let p = render_cirrus_sample(7, 64, true, 0.6).unwrap();
        assert_eq!((p.width, p.height), (3 * 64 + 2 * GAP, 64));
        assert_eq!(p, render_cirrus_sample(7, 64, true, 0.6).unwrap());
    }

    #[test]
    fn cost_matches_benchmark() {
        let c = compute_cost(64, 3, 16).unwrap();
        assert_eq!(c.tiles, 21);
        assert_eq!(c.ratio, 21.0 / 256.0);
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(render_gabor_bank(0, 3, 2.0, 1.0, 0.0, 1).is_err());
        assert!(render_gabor_bank(2, 3, 2.0, 1.0, 0.0, 0).is_err());
        assert!(compute_cost(64, 3, 0).is_err());
        assert!(render_cirrus_sample(0, 2, false, 0.5).is_err());
    }
}
