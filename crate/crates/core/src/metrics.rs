//! Dice similarity coefficient and per-fold summaries.

use std::fmt;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNetModel;

fn is_binary<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    match t.data().iter().find(|v| !v.is_zero() && **v != T::one()) {
        Some(v) => Err(Error::NonBinaryMask(v.as_f64())),
        None => Ok(()),
    }
}

/// `2|P∩T| / (|P|+|T|)`, and 1 when both masks are empty.
pub fn dsc<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            lhs: pred.shape(),
            rhs: truth.shape(),
            context: "dsc",
        });
    }
    is_binary(pred)?;
    is_binary(truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (!a.is_zero(), !b.is_zero());
        p += usize::from(a);
        t += usize::from(b);
        both += usize::from(a && b);
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::EmptyReduction("mean of no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub summary: MeanStd,
    pub per_image: Vec<f64>,
}

/// Scores `model` on every test image; statistics are over images.
pub fn evaluate_fold<T: Scalar>(model: &UNetModel<T>, test: &[Sample<T>]) -> Result<FoldScore> {
    if test.is_empty() {
        return Err(Error::EmptyReduction("empty test set".into()));
    }
    let per_image = test
        .iter()
        .map(|s| dsc(&model.predict(&s.image)?, &s.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldScore {
        summary: MeanStd::of(&per_image)?,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(bits: &[u8]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, bits.len(), 1), bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(&[0; 4]), &mask(&[0; 4])).unwrap(), 1.0);
    }

    #[test]
    fn half_overlap() {
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let t = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        // 2*2 / (4+4)
        assert_eq!(dsc(&p, &t).unwrap(), 0.5);
        assert_eq!(dsc(&t, &p).unwrap(), 0.5);
    }

    #[test]
    fn rejects_non_binary_and_shape() {
        assert!(matches!(dsc(&mask(&[1, 2]), &mask(&[1, 0])), Err(Error::NonBinaryMask(v)) if v == 2.0));
        assert!(dsc(&mask(&[1, 0]), &mask(&[1, 0, 0])).is_err());
    }

    #[test]
    fn monotone_as_overlap_removed() {
        let t = mask(&[1; 10]);
        let mut bits = vec![1u8; 10];
        let mut last = dsc(&mask(&bits), &t).unwrap();
        for i in 0..10 {
            bits[i] = 0;
            let d = dsc(&mask(&bits), &t).unwrap();
            assert!(d <= last);
            last = d;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn population_std() {
        let s = MeanStd::of(&[1.0, 0.5, 0.0]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        // sqrt(((0.5)^2 + 0 + (0.5)^2) / 3)
        assert!((s.std - (0.5f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std - 0.4082).abs() < 1e-4);
        assert!(MeanStd::of(&[]).is_err());
    }
}
