//! Synthetic ventricle-like segmentation data, rotation augmentation and
//! subject-level cross-validation folds.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.4;
pub const NUM_FOLDS: usize = 3;

/// An image `(1, H, W, 1)` and its binary label map of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject<T> {
    pub id: usize,
    pub images: Vec<Sample<T>>,
}

/// One cross-validation configuration: `test` subjects are held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    /// 1-based.
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn name(&self) -> String {
        format!("SYN-{}", self.fold)
    }
}

#[derive(Debug, Clone, Copy)]
enum Blob {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        theta: f64,
    },
    /// An ellipse with a shifted, larger ellipse carved out of it.
    Crescent {
        outer: (f64, f64, f64, f64, f64),
        inner: (f64, f64, f64, f64, f64),
    },
}

fn ellipse_level(x: f64, y: f64, (cx, cy, a, b, theta): (f64, f64, f64, f64, f64)) -> f64 {
    let (s, c) = theta.sin_cos();
    let dx = x - cx;
    let dy = y - cy;
    let u = (c * dx + s * dy) / a;
    let v = (-s * dx + c * dy) / b;
    1.0 - (u * u + v * v).sqrt()
}

impl Blob {
    /// Positive inside the structure, negative outside.
    fn level(&self, x: f64, y: f64) -> f64 {
        match *self {
            Blob::Ellipse { cx, cy, a, b, theta } => ellipse_level(x, y, (cx, cy, a, b, theta)),
            Blob::Crescent { outer, inner } => ellipse_level(x, y, outer).min(-ellipse_level(x, y, inner)),
        }
    }

    fn random(rng: &mut impl Rng, crescent: bool, scale: f64) -> Blob {
        let cx = rng.random_range(0.3..0.7);
        let cy = rng.random_range(0.3..0.7);
        let a = rng.random_range(0.10..0.25) * scale;
        let b = rng.random_range(0.08..0.2) * scale;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        if !crescent {
            return Blob::Ellipse { cx, cy, a, b, theta };
        }
        let shift = rng.random_range(0.35..0.6) * a;
        let (s, c) = theta.sin_cos();
        Blob::Crescent {
            outer: (cx, cy, a, b, theta),
            inner: (cx + c * shift, cy + s * shift, a * 0.9, b * 1.05, theta),
        }
    }
}

fn render<T: Scalar>(blob: &Blob, size: usize, rng: &mut impl Rng, contrast: f64, noise: f64) -> Sample<T> {
    let shape = Shape::new(1, size, size, 1);
    let (fx, fy, phase) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut image = Vec::with_capacity(size * size);
    let mut label = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let x = (j as f64 + 0.5) / size as f64;
            let y = (i as f64 + 0.5) / size as f64;
            let level = blob.level(x, y);
            let soft = 1.0 / (1.0 + (-level * 12.0).exp());
            let background = 0.2 + 0.08 * (fx * x * 6.0 + fy * y * 6.0 + phase).sin();
            let z: f64 = rng.sample(StandardNormal);
            image.push(T::of(background + contrast * soft + noise * z));
            label.push(if level > 0.0 { T::one() } else { T::zero() });
        }
    }
    Sample {
        image: Tensor::from_parts(shape, image),
        label: Tensor::from_parts(shape, label),
    }
}

pub fn foreground_fraction<T: Scalar>(label: &Tensor<T>) -> f64 {
    let fg = label.data().iter().filter(|v| v.as_f64() > 0.5).count();
    fg as f64 / label.data().len() as f64
}

/// Deterministic stand-in dataset: every image shows one smooth bright
/// structure (an ellipse or a crescent) on a slowly varying background with
/// additive Gaussian noise; the label is the structure's mask. Foreground
/// fractions are kept within `[0.02, 0.4]`.
pub fn generate_synthetic<T: Scalar>(
    num_subjects: usize,
    images_per_subject: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Subject<T>>> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Config(format!("image size {size} is not a positive multiple of 16")));
    }
    if num_subjects == 0 || images_per_subject == 0 {
        return Err(Error::Config("need at least one subject and one image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(num_subjects);
    for id in 0..num_subjects {
        // per-subject appearance, shared by its slices
        let crescent = rng.random_bool(0.5);
        let scale = rng.random_range(0.8..1.2);
        let contrast = rng.random_range(0.5..0.7);
        let noise = rng.random_range(0.04..0.08);
        let mut images = Vec::with_capacity(images_per_subject);
        while images.len() < images_per_subject {
            let blob = Blob::random(&mut rng, crescent, scale);
            let sample = render::<T>(&blob, size, &mut rng, contrast, noise);
            let frac = foreground_fraction(&sample.label);
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                images.push(sample);
            }
        }
        subjects.push(Subject { id, images });
    }
    Ok(subjects)
}

/// The inclusive angle grid `-range, -range + step, ..., range` in degrees.
pub fn rotation_angles(range_deg: f64, step_deg: f64) -> Result<Vec<f64>> {
    if range_deg < 0.0 || step_deg <= 0.0 {
        return Err(Error::Config(format!("bad rotation grid ±{range_deg} step {step_deg}")));
    }
    let steps = range_deg / step_deg;
    if (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::Config(format!("step {step_deg} does not divide range {range_deg}")));
    }
    let n = steps.round() as i64;
    Ok((-n..=n).map(|k| k as f64 * step_deg).collect())
}

/// Rotates about the image center; bilinear for the image, nearest for the
/// label, zero outside the frame. `0` returns an exact copy.
pub fn rotate_sample<T: Scalar>(sample: &Sample<T>, angle_deg: f64) -> Sample<T> {
    if angle_deg == 0.0 {
        return sample.clone();
    }
    let s = sample.image.shape();
    let (h, w) = (s.h(), s.w());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let img = sample.image.data();
    let lbl = sample.label.data();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[y as usize * w + x as usize].as_f64()
        }
    };
    let mut image = Vec::with_capacity(h * w);
    let mut label = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            // inverse map: destination -> source
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - tx) * (1.0 - ty)
                + at(y0, x0 + 1) * tx * (1.0 - ty)
                + at(y0 + 1, x0) * (1.0 - tx) * ty
                + at(y0 + 1, x0 + 1) * tx * ty;
            image.push(T::of(v));
            let (ny, nx) = (sy.round(), sx.round());
            let l = if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                T::zero()
            } else {
                lbl[ny as usize * w + nx as usize]
            };
            label.push(l);
        }
    }
    Sample {
        image: Tensor::from_parts(s, image),
        label: Tensor::from_parts(s, label),
    }
}

/// Every image of `subject` rotated by every angle of the grid (the 0°
/// member is the original).
pub fn augment_rotations<T: Scalar>(subject: &Subject<T>, range_deg: f64, step_deg: f64) -> Result<Vec<Sample<T>>> {
    let angles = rotation_angles(range_deg, step_deg)?;
    Ok(subject
        .images
        .iter()
        .flat_map(|s| angles.iter().map(move |&a| rotate_sample(s, a)))
        .collect())
}

/// Shuffles subject ids with `seed` and cuts them into three groups whose
/// sizes differ by at most one (larger groups last). Fold `k` tests on
/// group `k`.
pub fn three_fold_splits(subject_ids: &[usize], seed: u64) -> Result<Vec<FoldSplit>> {
    if subject_ids.len() < NUM_FOLDS {
        return Err(Error::Config(format!(
            "need at least {NUM_FOLDS} subjects for three folds, got {}",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    let n = ids.len();
    let mut groups = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for k in 0..NUM_FOLDS {
        let len = n / NUM_FOLDS + usize::from(k >= NUM_FOLDS - n % NUM_FOLDS);
        let mut g = ids[start..start + len].to_vec();
        g.sort_unstable();
        groups.push(g);
        start += len;
    }
    Ok((0..NUM_FOLDS)
        .map(|k| {
            let mut train: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, g)| g.iter().copied())
                .collect();
            train.sort_unstable();
            FoldSplit {
                fold: k + 1,
                train,
                test: groups[k].clone(),
            }
        })
        .collect())
}

fn subjects_by_id<'a, T>(subjects: &'a [Subject<T>], ids: &[usize]) -> Result<Vec<&'a Subject<T>>> {
    ids.iter()
        .map(|&id| {
            subjects
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Config(format!("fold references unknown subject {id}")))
        })
        .collect()
}

/// Augmented training images of a split's training subjects.
pub fn training_set<T: Scalar>(
    subjects: &[Subject<T>],
    split: &FoldSplit,
    range_deg: f64,
    step_deg: f64,
) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for s in subjects_by_id(subjects, &split.train)? {
        out.extend(augment_rotations(s, range_deg, step_deg)?);
    }
    Ok(out)
}

/// Un-augmented images of a split's test subjects.
pub fn test_set<T: Scalar>(subjects: &[Subject<T>], split: &FoldSplit) -> Result<Vec<Sample<T>>> {
    Ok(subjects_by_id(subjects, &split.test)?
        .into_iter()
        .flat_map(|s| s.images.iter().cloned())
        .collect())
}

const MANIFEST: &str = "manifest.txt";

/// Writes `subject_<id>/img_<k>.nkt` and `lbl_<k>.nkt` per image plus a
/// `manifest.txt` with one `fold <k> test <ids>` line per fold.
pub fn save_dataset<T: Scalar>(dir: &Path, subjects: &[Subject<T>], splits: &[FoldSplit]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in subjects {
        let sub = dir.join(format!("subject_{}", s.id));
        fs::create_dir_all(&sub)?;
        for (k, sample) in s.images.iter().enumerate() {
            sample
                .image
                .write_to(BufWriter::new(fs::File::create(sub.join(format!("img_{k}.nkt")))?))?;
            sample
                .label
                .write_to(BufWriter::new(fs::File::create(sub.join(format!("lbl_{k}.nkt")))?))?;
        }
    }
    let mut manifest = String::from("# fold <k> test <subject ids>; training uses the remaining subjects\n");
    for split in splits {
        let ids: Vec<String> = split.test.iter().map(|i| i.to_string()).collect();
        manifest.push_str(&format!("fold {} test {}\n", split.fold, ids.join(",")));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`] (or prepared by hand in the
/// same layout). Labels must be binary.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Vec<Subject<T>>, Vec<FoldSplit>)> {
    let mut subjects = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id) = name.strip_prefix("subject_").and_then(|v| v.parse::<usize>().ok()) else {
            continue;
        };
        let mut images = Vec::new();
        for k in 0.. {
            let img = entry.path().join(format!("img_{k}.nkt"));
            if !img.exists() {
                break;
            }
            let image = Tensor::<T>::read_from(BufReader::new(fs::File::open(&img)?))?;
            let label = Tensor::<T>::read_from(BufReader::new(fs::File::open(entry.path().join(format!("lbl_{k}.nkt")))?))?;
            if image.shape() != label.shape() || image.shape().n() != 1 || image.shape().c() != 1 {
                return Err(Error::Format(format!(
                    "subject {id} image {k}: image {} and label {} must both be (1,H,W,1)",
                    image.shape(),
                    label.shape()
                )));
            }
            if let Some(v) = label.data().iter().find(|v| !v.is_zero() && **v != T::one()) {
                return Err(Error::NonBinaryMask(v.as_f64()));
            }
            images.push(Sample { image, label });
        }
        subjects.push(Subject { id, images });
    }
    subjects.sort_by_key(|s| s.id);
    let all: Vec<usize> = subjects.iter().map(|s| s.id).collect();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut splits = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (fold, test) = match parts.as_slice() {
            ["fold", k, "test", ids] => (k, ids),
            _ => return Err(Error::Format(format!("bad manifest line `{line}`"))),
        };
        let fold: usize = fold.parse().map_err(|_| Error::Format(format!("bad fold index in `{line}`")))?;
        let test: Vec<usize> = test
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad subject id in `{line}`"))))
            .collect::<Result<_>>()?;
        let train = all.iter().copied().filter(|id| !test.contains(id)).collect();
        splits.push(FoldSplit { fold, train, test });
    }
    Ok((subjects, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic::<f32>(3, 2, 32, 7).unwrap();
        let b = generate_synthetic::<f32>(3, 2, 32, 7).unwrap();
        let c = generate_synthetic::<f32>(3, 2, 32, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn foreground_fraction_bounds() {
        for s in generate_synthetic::<f32>(9, 10, 64, 1).unwrap() {
            for img in &s.images {
                let f = foreground_fraction(&img.label);
                assert!((0.02..=0.4).contains(&f), "{f}");
                assert!(img.label.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert_eq!(img.image.shape(), img.label.shape());
            }
        }
    }

    #[test]
    fn size_must_be_multiple_of_16() {
        assert!(generate_synthetic::<f32>(3, 1, 40, 0).is_err());
    }

    #[test]
    fn angle_grids() {
        let rv = rotation_angles(30.0, 10.0).unwrap();
        assert_eq!(rv, [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0]);
        assert_eq!(rotation_angles(60.0, 2.0).unwrap().len(), 61);
        assert!(rotation_angles(30.0, 7.0).is_err());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = &generate_synthetic::<f64>(1, 1, 32, 3).unwrap()[0].images[0];
        assert_eq!(&rotate_sample(s, 0.0), s);
    }

    #[test]
    fn quarter_turns_permute_pixels() {
        let s = &generate_synthetic::<f64>(1, 1, 16, 3).unwrap()[0].images[0];
        let r = rotate_sample(s, 90.0);
        let back = rotate_sample(&rotate_sample(&r, 90.0), 180.0);
        assert!(back.image.max_abs_diff(&s.image) < 1e-9);
        assert_eq!(back.label, s.label);
        let sum = |t: &Tensor<f64>| t.sum();
        assert!((sum(&r.label) - sum(&s.label)).abs() < 1e-9);
    }

    #[test]
    fn augmentation_count() {
        let subjects = generate_synthetic::<f32>(1, 3, 16, 3).unwrap();
        assert_eq!(augment_rotations(&subjects[0], 30.0, 10.0).unwrap().len(), 3 * 7);
        assert_eq!(augment_rotations(&subjects[0], 60.0, 2.0).unwrap().len(), 3 * 61);
    }

    #[test]
    fn fold_sizes() {
        let nine = three_fold_splits(&(0..9).collect::<Vec<_>>(), 1).unwrap();
        assert!(nine.iter().all(|f| f.test.len() == 3 && f.train.len() == 6));
        let sizes: Vec<usize> = three_fold_splits(&(0..37).collect::<Vec<_>>(), 1)
            .unwrap()
            .iter()
            .map(|f| f.test.len())
            .collect();
        assert_eq!(sizes, [12, 12, 13]);
        let fifteen: Vec<usize> = three_fold_splits(&(0..45).collect::<Vec<_>>(), 2)
            .unwrap()
            .iter()
            .map(|f| f.test.len())
            .collect();
        assert_eq!(fifteen, [15, 15, 15]);
        assert!(three_fold_splits(&[0, 1], 0).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_synthetic::<f32>(3, 2, 16, 5).unwrap();
        let splits = three_fold_splits(&[0, 1, 2], 5).unwrap();
        save_dataset(dir.path(), &subjects, &splits).unwrap();
        let (s2, f2) = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(s2, subjects);
        assert_eq!(f2, splits);
    }
}
