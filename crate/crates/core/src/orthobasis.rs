//! Orthogonal change of basis over feature channels.
//!
//! The basis is parameterized by an unconstrained square generator `A`; the
//! mixing matrix is `U = exp(A − Aᵀ)`, which is special orthogonal for every
//! `A`. `U` is cached and only recomputed on demand after `A` changes.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::error::{invalid_arg, ProdgError, Result};
use crate::feature::{argmax_location, FeatureMap};
use crate::linalg;

/// Guard on the purity denominator at locations with (near) zero norm.
pub const PURITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalBasis {
    a: Array2<f64>,
    u: Array2<f64>,
    dirty: bool,
}

impl OrthogonalBasis {
    /// Identity basis over `channels` channels (`A = 0`, so `U = I`).
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(invalid_arg("basis needs at least one channel"));
        }
        Ok(Self {
            a: Array2::zeros((channels, channels)),
            u: Array2::eye(channels),
            dirty: false,
        })
    }

    /// Builds a basis from a generator and computes `U` eagerly.
    pub fn from_generator(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c || r == 0 {
            return Err(invalid_arg(format!("generator must be square and non-empty, got {r}x{c}")));
        }
        let mut basis = Self { u: Array2::zeros((r, r)), a, dirty: true };
        basis.recompute_u()?;
        Ok(basis)
    }

    /// Restores a basis from stored arrays without recomputing `U`. Callers
    /// that need to trust `U` should check [`Self::orthogonality_residual`].
    pub fn from_parts(a: Array2<f64>, u: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c || u.dim() != (r, c) || r == 0 {
            return Err(invalid_arg("generator and U must be square with equal shapes"));
        }
        Ok(Self { a, u, dirty: false })
    }

    pub fn channels(&self) -> usize {
        self.a.nrows()
    }

    pub fn generator(&self) -> ArrayView2<'_, f64> {
        self.a.view()
    }

    /// Mutable access to `A`; marks the cached `U` stale.
    pub fn generator_mut(&mut self) -> &mut Array2<f64> {
        self.dirty = true;
        &mut self.a
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// The cached orthogonal matrix. Fails if `A` changed since the last
    /// [`Self::recompute_u`].
    pub fn u(&self) -> Result<ArrayView2<'_, f64>> {
        if self.dirty {
            return Err(ProdgError::InvalidState("U is stale; call recompute_u".into()));
        }
        Ok(self.u.view())
    }

    /// `A − Aᵀ`
    pub fn skew(&self) -> Array2<f64> {
        &self.a - &self.a.t()
    }

    /// Recomputes `U = exp(A − Aᵀ)`.
    pub fn recompute_u(&mut self) -> Result<()> {
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(ProdgError::InvalidState("generator A has non-finite entries".into()));
        }
        self.u = linalg::expm(&self.skew().view())?;
        self.dirty = false;
        Ok(())
    }

    pub fn orthogonality_residual(&self) -> Result<f64> {
        Ok(linalg::orthogonality_residual(&self.u()?))
    }

    /// Z = U·Φ along the channel axis.
    pub fn apply(&self, feat: &FeatureMap) -> Result<FeatureMap> {
        let z = self.apply_values(&feat.values())?;
        FeatureMap::new(z, format!("{}+basis", feat.source()))
    }

    pub fn apply_values(&self, values: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let u = self.u()?;
        mix_channels(&u, values)
    }

    /// Pulls `∂f/∂U` back to `∂f/∂A` through the exponential and the
    /// antisymmetrization.
    pub fn generator_grad(&self, grad_u: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.channels();
        if grad_u.dim() != (n, n) {
            return Err(invalid_arg("gradient shape does not match basis"));
        }
        if grad_u.iter().any(|v| !v.is_finite()) {
            return Err(ProdgError::Numerical { step: 0, message: "non-finite basis gradient".into() });
        }
        let grad_x = linalg::expm_vjp(&self.skew().view(), grad_u)?;
        Ok(&grad_x - &grad_x.t())
    }
}

/// Left-multiplies `m` (C'×C) onto the channel axis of a C×H×W array.
pub fn mix_channels(m: &ArrayView2<f64>, values: &ArrayView3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = values.dim();
    if m.ncols() != c {
        return Err(invalid_arg(format!(
            "channel mismatch: basis has {} channels, features have {c}",
            m.ncols()
        )));
    }
    let flat = values
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous reshape");
    let out = m.dot(&flat);
    Ok(out.into_shape_with_order((m.nrows(), h, w)).expect("contiguous reshape"))
}

/// Linear head with the inverse basis folded into its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub original_weights: Array2<f64>,
    pub basis_u: Array2<f64>,
}

impl FusedHead {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    /// Logits for pooled, already transformed features.
    pub fn logits(&self, pooled_z: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if pooled_z.len() != self.weights.ncols() {
            return Err(invalid_arg("pooled feature length does not match head"));
        }
        Ok(self.weights.dot(pooled_z) + &self.bias)
    }
}

/// Folds `Uᵀ` into a linear head: fused weights are `W·Uᵀ`, bias unchanged.
pub fn fuse_head(
    weights: &ArrayView2<f64>,
    bias: &ArrayView1<f64>,
    basis: &OrthogonalBasis,
) -> Result<FusedHead> {
    let u = basis.u()?;
    if weights.ncols() != basis.channels() {
        return Err(invalid_arg(format!(
            "head has {} input columns, basis has {} channels",
            weights.ncols(),
            basis.channels()
        )));
    }
    if bias.len() != weights.nrows() {
        return Err(invalid_arg("bias length does not match number of classes"));
    }
    Ok(FusedHead {
        weights: weights.dot(&u.t()),
        bias: bias.to_owned(),
        original_weights: weights.to_owned(),
        basis_u: u.to_owned(),
    })
}

/// Purity of channel `c`: the channel's spatial maximum divided by the
/// channel-vector norm at that location.
pub fn purity(feat: &FeatureMap, basis: &OrthogonalBasis, c: usize) -> Result<f64> {
    check_channel(c, feat.channels())?;
    let z = basis.apply_values(&feat.values())?;
    Ok(purity_of_transformed(&z.view(), c)?.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityEval {
    pub value: f64,
    /// Argmax location (row, col) of channel `c`.
    pub location: (usize, usize),
    /// ∂purity/∂Z[:, row, col]; the gradient is zero elsewhere.
    pub grad_z: Array1<f64>,
}

/// Purity and its gradient with respect to the transformed features.
pub fn purity_of_transformed(z: &ArrayView3<f64>, c: usize) -> Result<PurityEval> {
    let channels = z.dim().0;
    check_channel(c, channels)?;
    let (i, j) = argmax_location(z, c);
    let col = z.slice(ndarray::s![.., i, j]);
    let norm = col.dot(&col).sqrt();
    let zc = col[c];
    let (value, grad_z) = if norm > PURITY_EPS {
        let mut g = col.mapv(|v| -zc * v / (norm * norm * norm));
        g[c] += 1.0 / norm;
        (zc / norm, g)
    } else {
        let mut g = Array1::zeros(channels);
        g[c] = 1.0 / PURITY_EPS;
        (zc / PURITY_EPS, g)
    };
    Ok(PurityEval { value, location: (i, j), grad_z })
}

fn check_channel(c: usize, channels: usize) -> Result<()> {
    if c >= channels {
        return Err(invalid_arg(format!("channel {c} out of range for {channels} channels")));
    }
    Ok(())
}
