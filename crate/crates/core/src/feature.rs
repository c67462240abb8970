use ndarray::{Array1, Array3, ArrayView3, Axis};

use crate::error::{invalid_arg, Result};

/// A C×H×W activation tensor from a backbone (or its transformed version).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
    source: String,
}

impl FeatureMap {
    /// Wraps `values`, rejecting NaN/Inf entries and empty dimensions.
    pub fn new(values: Array3<f64>, source: impl Into<String>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid_arg(format!("feature map has empty shape {c}x{h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("feature map contains non-finite values"));
        }
        Ok(Self { values, source: source.into() })
    }

    pub fn values(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// (C, H, W)
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Global average pooling: per-channel spatial mean.
    pub fn gap(&self) -> Array1<f64> {
        gap(&self.values.view())
    }
}

pub fn gap(values: &ArrayView3<f64>) -> Array1<f64> {
    let (_, h, w) = values.dim();
    values.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

/// Row-major first location of the maximum of channel `c`.
pub fn argmax_location(values: &ArrayView3<f64>, c: usize) -> (usize, usize) {
    let (_, h, w) = values.dim();
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..h {
        for j in 0..w {
            let v = values[[c, i, j]];
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite() {
        let v = Array3::from_elem((2, 1, 1), f64::INFINITY);
        assert!(FeatureMap::new(v, "t").is_err());
    }

    #[test]
    fn gap_is_spatial_mean() {
        let v = array![[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 8.0]]];
        let f = FeatureMap::new(v, "t").unwrap();
        assert_eq!(f.gap(), array![2.5, 2.0]);
    }

    #[test]
    fn argmax_ties_take_first_row_major() {
        let v = array![[[1.0, 5.0], [5.0, 2.0]]];
        assert_eq!(argmax_location(&v.view(), 0), (0, 1));
    }
}
