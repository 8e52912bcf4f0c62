//! Synthetic shape-segmentation data: background plus K−1 shape classes
//! (filled ellipses, rectangles, annuli) at random positions, sizes, and
//! intensities, with additive Gaussian noise. Deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::evt1;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
const PLACEMENT_TRIES: usize = 100;

pub struct SynthSample<T: Scalar> {
    /// [3,H,W] row-major, values in [0,1].
    pub image: Vec<T>,
    /// [H,W] class labels < num_classes.
    pub mask: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Ellipse,
    Rect,
    Annulus,
}

#[derive(Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
}

struct Shape {
    kind: ShapeKind,
    place: Placement,
    /// Annulus inner radius fraction.
    inner: f64,
    intensity: f64,
    color_channel: usize,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.place.cx, y - self.place.cy);
        match self.kind {
            ShapeKind::Ellipse => {
                let (rx, ry) = (self.place.r, self.place.r * 0.75);
                (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 1.0
            }
            ShapeKind::Rect => dx.abs() <= self.place.r && dy.abs() <= self.place.r * 0.8,
            ShapeKind::Annulus => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= self.place.r && d >= self.place.r * self.inner
            }
        }
    }
}

fn overlaps(a: &Placement, b: &Placement) -> bool {
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    (dx * dx + dy * dy).sqrt() < a.r + b.r
}

/// Generate `n` samples of [3,H,W] images with [H,W] masks over
/// `num_classes` classes (class 0 is background). Every sample carries one
/// shape per foreground class; shapes avoid each other by rejection and
/// draw on top in class order when placement fails.
pub fn generate_synth_dataset<T: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SynthSample<T>>> {
    if num_classes < 2 {
        return Err(Error::InvalidArg(format!(
            "synthetic dataset needs >= 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let min_side = h.min(w) as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let base = rng.gen_range(0.02..0.18);
        let mut img = vec![base; 3 * h * w];
        let mut mask = vec![0u8; h * w];
        let mut shapes: Vec<Shape> = Vec::new();
        for class in 1..num_classes {
            let kind = match (class - 1) % 3 {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rect,
                _ => ShapeKind::Annulus,
            };
            let mut place = Placement {
                cx: 0.0,
                cy: 0.0,
                r: 0.0,
            };
            for attempt in 0..=PLACEMENT_TRIES {
                let r = rng.gen_range(0.14..0.26) * min_side;
                let cx = rng.gen_range(r..w as f64 - r);
                let cy = rng.gen_range(r..h as f64 - r);
                place = Placement { cx, cy, r };
                let clear = shapes.iter().all(|s| !overlaps(&place, &s.place));
                if clear || attempt == PLACEMENT_TRIES {
                    break;
                }
            }
            shapes.push(Shape {
                kind,
                place,
                inner: rng.gen_range(0.4..0.6),
                intensity: rng.gen_range(0.55..0.95),
                color_channel: (class - 1) % 3,
            });
        }
        // Later shapes draw on top.
        for (si, shape) in shapes.iter().enumerate() {
            let class = (si + 1) as u8;
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        mask[y * w + x] = class;
                        for c in 0..3 {
                            let v = if c == shape.color_channel {
                                shape.intensity
                            } else {
                                shape.intensity * 0.25
                            };
                            img[c * h * w + y * w + x] = v;
                        }
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        out.push(SynthSample {
            image: img.into_iter().map(T::from_f64).collect(),
            mask,
            h,
            w,
        });
    }
    Ok(out)
}

/// Stack samples into a [B,3,H,W] input tensor and flat [B·H·W] labels.
pub fn batch_of<T: Scalar>(samples: &[&SynthSample<T>]) -> (Tensor<T>, Vec<u8>) {
    let (h, w) = (samples[0].h, samples[0].w);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.mask);
    }
    (
        Tensor::new_internal(vec![samples.len(), 3, h, w], data, false),
        labels,
    )
}

/// Write images and masks as EVT1 files plus a `manifest.tsv` of
/// `id <TAB> image <TAB> mask` rows.
pub fn export_dataset<T: Scalar>(dir: &std::path::Path, samples: &[SynthSample<T>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img_name = format!("img_{i:05}.evt1");
        let mask_name = format!("mask_{i:05}.evt1");
        let img = Tensor::from_vec(&[3, s.h, s.w], s.image.clone())?;
        evt1::write_tensor_to_path(&dir.join(&img_name), &img)?;
        let mask_vals: Vec<T> = s.mask.iter().map(|&m| T::from_f64(m as f64)).collect();
        let mask = Tensor::from_vec(&[s.h, s.w], mask_vals)?;
        evt1::write_tensor_to_path(&dir.join(&mask_name), &mask)?;
        manifest.push_str(&format!("{i}\t{img_name}\t{mask_name}\n"));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`export_dataset`].
pub fn import_dataset<T: Scalar>(dir: &std::path::Path) -> Result<Vec<SynthSample<T>>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (_id, img_name, mask_name) = (
            parts.next(),
            parts.next().ok_or_else(|| manifest_err(lineno))?,
            parts.next().ok_or_else(|| manifest_err(lineno))?,
        );
        let img = evt1::read_tensor_from_path::<T>(&dir.join(img_name))?;
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(Error::CorruptFile(format!(
                "{img_name}: expected [3,H,W] image, got {:?}",
                img.shape()
            )));
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let mask_t = evt1::read_tensor_from_path::<T>(&dir.join(mask_name))?;
        if mask_t.shape() != [h, w] {
            return Err(Error::CorruptFile(format!(
                "{mask_name}: mask shape {:?} does not match image {h}x{w}",
                mask_t.shape()
            )));
        }
        let mask: Vec<u8> = mask_t
            .data()
            .iter()
            .map(|&v| {
                let f = v.to_f64_();
                let r = f.round();
                if (f - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) {
                    Err(Error::CorruptFile(format!(
                        "{mask_name}: non-integral label {f}"
                    )))
                } else {
                    Ok(r as u8)
                }
            })
            .collect::<Result<_>>()?;
        out.push(SynthSample {
            image: img.to_vec(),
            mask,
            h,
            w,
        });
    }
    if out.is_empty() {
        return Err(Error::ConfigError(format!(
            "dataset at {} is empty",
            dir.display()
        )));
    }
    Ok(out)
}

fn manifest_err(lineno: usize) -> Error {
    Error::CorruptFile(format!("manifest.tsv line {}: expected id\timage\tmask", lineno + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical() {
        let a = generate_synth_dataset::<f32>(3, 32, 32, 3, 7).unwrap();
        let b = generate_synth_dataset::<f32>(3, 32, 32, 3, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn all_classes_present_and_values_clamped() {
        let set = generate_synth_dataset::<f32>(64, 32, 32, 4, 11).unwrap();
        let mut hist = [0usize; 4];
        for s in &set {
            for &m in &s.mask {
                hist[m as usize] += 1;
            }
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(hist.iter().all(|&c| c > 0), "histogram {hist:?}");
    }

    #[test]
    fn rejects_single_class() {
        assert!(generate_synth_dataset::<f32>(1, 16, 16, 1, 0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_synth_dataset::<f32>(2, 16, 16, 3, 5).unwrap();
        export_dataset(dir.path(), &set).unwrap();
        let back = import_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in set.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }
}
