//! Whole-image inference from raster files or sample containers.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::container::{Array, ArrayFile};
use crate::error::{Error, Result};
use crate::model::{ensemble_predict, SegModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InferOptions {
    pub threshold: f64,
    pub overlay: bool,
    /// Resample inputs to this side before predicting; outputs keep the input size.
    pub side: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            threshold: 0.5,
            overlay: false,
            side: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferRecord {
    pub input: PathBuf,
    /// `[H, W]` probabilities.
    pub probability: Tensor,
    pub probability_png: PathBuf,
    pub probability_array: PathBuf,
    pub mask_png: PathBuf,
    pub overlay_png: Option<PathBuf>,
}

/// Reads a single-channel image as `[H, W]` in `[0, 1]`. Containers must hold an
/// `image` array of shape `[H, W]` (or with leading unit axes).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let is_container = path.extension().is_some_and(|e| e == "gsa");
    let t = if is_container {
        ArrayFile::read(path)?.tensor("image")?
    } else {
        let img = image::open(path)
            .map_err(|e| Error::invalid(format!("cannot read image {}: {e}", path.display())))?
            .into_luma16();
        let (w, h) = img.dimensions();
        Tensor::new(
            &[h as usize, w as usize],
            img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        )?
    };
    let dims: Vec<usize> = t.shape().iter().copied().filter(|&d| d != 1).collect();
    let (h, w) = match (dims.as_slice(), t.shape()) {
        ([h, w], _) => (*h, *w),
        ([n], [.., 1]) => (*n, 1),
        ([n], _) => (1, *n),
        _ => return Err(Error::invalid(format!("{} is not a single-channel image", path.display()))),
    };
    if h == 0 || w == 0 || !t.is_finite() {
        return Err(Error::invalid(format!("{} is empty or non-finite", path.display())));
    }
    t.reshape(&[h, w])
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_probability_png(path: &Path, p: &Tensor) -> Result<()> {
    let &[h, w] = p.shape() else {
        return Err(Error::invalid("probability map must be [H, W]"));
    };
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, p.data().iter().map(|&v| to_u16(v)).collect())
            .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, p: &Tensor, threshold: f64) -> Result<()> {
    let &[h, w] = p.shape() else {
        return Err(Error::invalid("probability map must be [H, W]"));
    };
    let buf = GrayImage::from_raw(
        w as u32,
        h as u32,
        p.data().iter().map(|&v| if v >= threshold { 255 } else { 0 }).collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// The input (arcsinh-stretched) in grey with predicted contamination tinted red.
pub fn write_overlay_png(path: &Path, image: &Tensor, p: &Tensor, threshold: f64) -> Result<()> {
    let &[h, w] = image.shape() else {
        return Err(Error::invalid("image must be [H, W]"));
    };
    if p.shape() != image.shape() {
        return Err(Error::shape("overlay", image.shape(), p.shape()));
    }
    let stretched = image.map(|v| (10.0 * v).asinh());
    let (lo, hi) = stretched
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, (&s, &q)) in stretched.data().iter().zip(p.data()).enumerate() {
        let g = (s - lo) / span;
        let a = if q >= threshold { 0.45 } else { 0.0 };
        let px = |c: f64| ((g * (1.0 - a) + c * a) * 255.0).round().clamp(0.0, 255.0) as u8;
        out.put_pixel((i % w) as u32, (i / w) as u32, Rgb([px(1.0), px(0.0), px(0.0)]));
    }
    out.save(path)?;
    Ok(())
}

/// Probabilities for one `[H, W]` image, averaged over `models`.
pub fn predict_image(models: &[SegModel], image: &Tensor, side: Option<usize>) -> Result<Tensor> {
    let &[h, w] = image.shape() else {
        return Err(Error::invalid("image must be [H, W]"));
    };
    if let Some(first) = models.first() {
        let c = first.config().in_channels;
        if models.iter().any(|m| m.config().in_channels != c) || c != 1 {
            return Err(Error::invalid("ensemble members must all take one input channel"));
        }
    }
    let input = match side {
        Some(s) if (s, s) != (h, w) => image.resize_bilinear(s, s)?,
        _ => image.clone(),
    };
    let (ih, iw) = (input.dim(0), input.dim(1));
    let p = ensemble_predict(models, &input.reshape(&[1, 1, ih, iw])?)?.reshape(&[ih, iw])?;
    if (ih, iw) == (h, w) {
        Ok(p)
    } else {
        Ok(p.resize_bilinear(h, w)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Writes `<stem>_prob.png` (16-bit), `<stem>_prob.gsa` (exact), `<stem>_mask.png` and
/// optionally `<stem>_overlay.png` into `out_dir` for every input.
pub fn infer(models: &[SegModel], inputs: &[PathBuf], out_dir: &Path, opts: &InferOptions) -> Result<Vec<InferRecord>> {
    if models.is_empty() {
        return Err(Error::invalid("inference needs at least one checkpoint"));
    }
    std::fs::create_dir_all(out_dir)?;
    inputs
        .iter()
        .map(|input| {
            let image = read_image(input)?;
            let prob = predict_image(models, &image, opts.side)?;
            let stem = input
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            let probability_png = out_dir.join(format!("{stem}_prob.png"));
            let probability_array = out_dir.join(format!("{stem}_prob.gsa"));
            let mask_png = out_dir.join(format!("{stem}_mask.png"));
            write_probability_png(&probability_png, &prob)?;
            let mut f = ArrayFile::new();
            f.insert("probability", Array::f64(&prob));
            f.write(&probability_array)?;
            write_mask_png(&mask_png, &prob, opts.threshold)?;
            let overlay_png = if opts.overlay {
                let p = out_dir.join(format!("{stem}_overlay.png"));
                write_overlay_png(&p, &image, &prob, opts.threshold)?;
                Some(p)
            } else {
                None
            };
            Ok(InferRecord {
                input: input.clone(),
                probability: prob,
                probability_png,
                probability_array,
                mask_png,
                overlay_png,
            })
        })
        .collect()
}
