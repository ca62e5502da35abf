use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::metrics::{compute_metrics, EvalReport, SampleReport};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{mask_to_bbox, BBox};
use crate::mask::Mask;
use crate::tensor::kernels::{align_corners_coords, resample_forward};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// An RGB image in `[0, 1]` (`[H, W, 3]`) with its binary lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Mask,
    /// Tight box around the mask, `None` when the mask is empty.
    pub gt_box: Option<BBox>,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 || (h, w) != (mask.height(), mask.width()) {
            return shape_err(format!(
                "image {:?} does not pair with a {}x{} mask",
                image.shape(),
                mask.height(),
                mask.width()
            ));
        }
        let gt_box = match mask_to_bbox(&mask) {
            Ok(b) => Some(b),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        Ok(LabeledSample {
            id: id.into(),
            image,
            mask,
            gt_box,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Mirror the sample horizontally and/or vertically.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> LabeledSample {
        if !horizontal && !vertical {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let src = |r: usize, c: usize| {
            (
                if vertical { h - 1 - r } else { r },
                if horizontal { w - 1 - c } else { c },
            )
        };
        let mask = Mask::from_fn(h, w, |r, c| {
            let (sr, sc) = src(r, c);
            self.mask.get(sr, sc)
        });
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = src(r, c);
                data.extend_from_slice(&self.image.data()[(sr * w + sc) * 3..][..3]);
            }
        }
        let image = Tensor::new(vec![h, w, 3], data).expect("same extents");
        LabeledSample::new(self.id.clone(), image, mask).expect("flip preserves pairing")
    }
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer matches extents")
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = t.dims3()?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let raw = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents"))
}

/// Bilinear (align-corners) resize of an `[H, W, C]` tensor.
pub fn resize_image(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let ys = align_corners_coords(h, height);
    let xs = align_corners_coords(w, width);
    Tensor::new(
        vec![height, width, c],
        resample_forward(image.data(), (h, w, c), &ys, &xs),
    )
}

/// Resize image (bilinear) and mask (nearest) to `size x size`.
pub fn resize_pair(sample: &LabeledSample, size: usize) -> Result<LabeledSample> {
    let image = resize_image(&sample.image, size, size)?;
    let mask = sample.mask.resize_nearest(size, size);
    LabeledSample::new(sample.id.clone(), image, mask)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        gray.as_raw().iter().map(|&v| u8::from(v > 127)).collect(),
    )
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path)?;
    Ok(())
}

/// Read a tab-separated manifest of `id, image path, mask path` lines.
/// Relative paths resolve against the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<LabeledSample>> {
    let text = fs::read_to_string(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let fail = |id: &str, reason: String| Error::Ingestion {
            id: id.to_string(),
            reason,
        };
        if fields.len() != 3 {
            return Err(fail(
                fields[0],
                format!(
                    "manifest line {} has {} fields, expected 3",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        let image_path = root.join(fields[1]);
        let mask_path = root.join(fields[2]);
        let rgb = image::open(&image_path)
            .map_err(|e| fail(id, format!("{}: {e}", image_path.display())))?
            .to_rgb8();
        let mask = load_mask_png(&mask_path)
            .map_err(|e| fail(id, format!("{}: {e}", mask_path.display())))?;
        let image = image_to_tensor(&rgb);
        if image.shape()[..2] != [mask.height(), mask.width()] {
            return Err(fail(
                id,
                format!(
                    "image is {}x{} but mask is {}x{}",
                    image.shape()[0],
                    image.shape()[1],
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        samples.push(LabeledSample::new(id, image, mask)?);
    }
    Ok(samples)
}

/// Write `images/<id>.png`, `masks/<id>.png` and a manifest under `dir`.
pub fn save_dataset(dir: &Path, samples: &[LabeledSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = fs::File::create(&manifest)?;
    for s in samples {
        let image_rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.id);
        tensor_to_rgb(&s.image)?.save(dir.join(&image_rel))?;
        save_mask_png(&s.mask, &dir.join(&mask_rel))?;
        writeln!(out, "{}\t{image_rel}\t{mask_rel}", s.id)?;
    }
    Ok(manifest)
}

/// Score every `<id>.png` mask in `gt_dir` against the same-named file in
/// `pred_dir`, in file-name order.
pub fn evaluate_mask_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let mut names: Vec<PathBuf> = fs::read_dir(gt_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    names.sort();
    if names.is_empty() {
        return Err(Error::Argument(format!(
            "no PNG masks in {}",
            gt_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(names.len());
    for gt_path in names {
        let id = gt_path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let fail = |reason: String| Error::Ingestion {
            id: id.clone(),
            reason,
        };
        let pred_path = pred_dir.join(gt_path.file_name().unwrap_or_default());
        let gt =
            load_mask_png(&gt_path).map_err(|e| fail(format!("{}: {e}", gt_path.display())))?;
        let pred =
            load_mask_png(&pred_path).map_err(|e| fail(format!("{}: {e}", pred_path.display())))?;
        let metrics = compute_metrics(&pred, &gt).map_err(|e| fail(e.to_string()))?;
        samples.push(SampleReport { id, metrics });
    }
    Ok(EvalReport::new(samples))
}

pub const GT_COLOR: [u8; 3] = [0, 200, 0];
pub const PRED_COLOR: [u8; 3] = [220, 0, 0];

/// Draw the ground-truth box (green) and predicted box (red) over the image.
pub fn render_boxes(image: &Tensor, gt: Option<&BBox>, pred: Option<&BBox>) -> Result<RgbImage> {
    let mut img = tensor_to_rgb(image)?;
    for (b, color) in [(gt, GT_COLOR), (pred, PRED_COLOR)] {
        if let Some(b) = b {
            draw_rect(&mut img, b, color);
        }
    }
    Ok(img)
}

/// Draw the ground-truth contour (green) and predicted contour (red) over
/// the image.
pub fn render_contours(image: &Tensor, gt: Option<&Mask>, pred: Option<&Mask>) -> Result<RgbImage> {
    let mut img = tensor_to_rgb(image)?;
    for (m, color) in [(gt, GT_COLOR), (pred, PRED_COLOR)] {
        let Some(m) = m else { continue };
        if (img.height() as usize, img.width() as usize) != (m.height(), m.width()) {
            return shape_err(format!(
                "overlay mask {}x{} does not match image {}x{}",
                m.height(),
                m.width(),
                img.height(),
                img.width()
            ));
        }
        for (r, c) in contour(m) {
            img.put_pixel(c as u32, r as u32, Rgb(color));
        }
    }
    Ok(img)
}

/// Foreground pixels with a 4-neighbour outside the mask or on the border.
pub fn contour(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn draw_rect(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = (b.x1.floor() as i64).clamp(0, w - 1);
    let y1 = (b.y1.floor() as i64).clamp(0, h - 1);
    let x2 = (b.x2.ceil() as i64 - 1).clamp(0, w - 1);
    let y2 = (b.y2.ceil() as i64 - 1).clamp(0, h - 1);
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
        img.put_pixel(x as u32, y2 as u32, Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
        img.put_pixel(x2 as u32, y as u32, Rgb(color));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledSample {
        let image = Tensor::from_fn(&[60, 100, 3], |i| (i % 7) as f64 / 7.0);
        let mask = Mask::from_fn(60, 100, |r, c| {
            (20..30).contains(&r) && (40..60).contains(&c)
        });
        LabeledSample::new("a", image, mask).unwrap()
    }

    #[test]
    fn resize_scales_lesion_area() {
        let s = resize_pair(&sample(), 512).unwrap();
        assert_eq!(s.image.shape(), &[512, 512, 3]);
        let expected = 200.0 * 512.0 * 512.0 / 6000.0;
        let got = s.mask.count() as f64;
        assert!(
            (got - expected).abs() / expected < 0.05,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let s = sample();
        let r = resize_image(&s.image, 60, 100).unwrap();
        assert_eq!(r, s.image);
        assert_eq!(s.mask.resize_nearest(60, 100), s.mask);
    }

    #[test]
    fn flips_move_the_box() {
        let s = sample();
        let f = s.flipped(true, true);
        let b = f.gt_box.unwrap();
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (40.0, 30.0, 60.0, 40.0));
        assert_eq!(f.flipped(true, true), s);
    }

    #[test]
    fn round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        let manifest = save_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].mask, s.mask);
        assert!(back[0].image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn contour_is_the_ring_of_a_square() {
        let m = Mask::from_fn(6, 6, |r, c| (1..5).contains(&r) && (1..5).contains(&c));
        let ring = contour(&m);
        assert_eq!(ring.len(), 12);
        assert!(!ring.contains(&(2, 2)));
        let img = render_contours(&Tensor::zeros(&[6, 6, 3]), None, Some(&m)).unwrap();
        assert_eq!(img.get_pixel(1, 1).0, PRED_COLOR);
        assert_eq!(img.get_pixel(2, 2).0, [0, 0, 0]);
    }

    #[test]
    fn boxes_use_distinct_colors() {
        let b = BBox::new(1.0, 1.0, 4.0, 4.0).unwrap();
        let p = BBox::new(2.0, 2.0, 6.0, 6.0).unwrap();
        let img = render_boxes(&Tensor::zeros(&[8, 8, 3]), Some(&b), Some(&p)).unwrap();
        assert_eq!(img.get_pixel(1, 1).0, GT_COLOR);
        assert_eq!(img.get_pixel(5, 5).0, PRED_COLOR);
    }

    #[test]
    fn missing_file_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join(MANIFEST_NAME);
        fs::write(&manifest, "x7\tnope.png\tnope_mask.png\n").unwrap();
        match load_dataset(&manifest) {
            Err(Error::Ingestion { id, .. }) => assert_eq!(id, "x7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
