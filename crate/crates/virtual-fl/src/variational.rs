//! Diagonal Gaussians in moment and natural form, their factor algebra, and
//! reparameterized sampling.
//!
//! Moment form ([`DiagGaussian`]) is what priors and posteriors are stated
//! in; natural form ([`NaturalFactor`], precision `λ = 1/σ²` and shift
//! `η = μ/σ²`) is what makes products and quotients of Gaussian messages
//! elementwise additions and subtractions. Quotients may produce
//! non-positive precisions; such improper factors are legal as messages and
//! only rejected (or clamped, see [`NaturalFactor::project_proper`]) when a
//! distribution is actually needed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softplus, softplus_inv, NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum VariationalError {
    #[error("{op}: dimension mismatch ({left} vs {right})")]
    DimensionMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("improper factor: precision {precision} at index {index} is not positive")]
    ImproperFactor { index: usize, precision: f64 },
    #[error("invalid variance {value} at index {index}: must be positive and finite")]
    InvalidVariance { index: usize, value: f64 },
    #[error("non-finite entry at index {index} in {field}")]
    NonFinite { field: &'static str, index: usize },
}

fn check_dims(op: &'static str, left: usize, right: usize) -> Result<(), VariationalError> {
    if left == right {
        Ok(())
    } else {
        Err(VariationalError::DimensionMismatch { op, left, right })
    }
}

/// Moment-form diagonal Gaussian: per-dimension mean and (strictly positive,
/// finite) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, VariationalError> {
        check_dims("DiagGaussian::new", mean.len(), variance.len())?;
        if let Some(index) = mean.iter().position(|m| !m.is_finite()) {
            return Err(VariationalError::NonFinite {
                field: "mean",
                index,
            });
        }
        if let Some(index) = variance.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(VariationalError::InvalidVariance {
                index,
                value: variance[index],
            });
        }
        Ok(DiagGaussian { mean, variance })
    }

    /// N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    /// Same scalar mean and variance in every dimension.
    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<Self, VariationalError> {
        DiagGaussian::new(vec![mean; dim], vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Natural parameters λ = 1/σ², η = μ/σ².
    pub fn to_natural(&self) -> NaturalFactor {
        let precision: Vec<f64> = self.variance.iter().map(|v| 1.0 / v).collect();
        let shift = self
            .mean
            .iter()
            .zip(&precision)
            .map(|(m, l)| m * l)
            .collect();
        NaturalFactor { precision, shift }
    }
}

/// Natural-parameter Gaussian message. Precisions may be zero or negative:
/// factors are unnormalized messages, not distributions, until converted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalFactor {
    precision: Vec<f64>,
    shift: Vec<f64>,
}

impl NaturalFactor {
    pub fn new(precision: Vec<f64>, shift: Vec<f64>) -> Result<Self, VariationalError> {
        check_dims("NaturalFactor::new", precision.len(), shift.len())?;
        for (field, vec) in [("precision", &precision), ("shift", &shift)] {
            if let Some(index) = vec.iter().position(|x| !x.is_finite()) {
                return Err(VariationalError::NonFinite { field, index });
            }
        }
        Ok(NaturalFactor { precision, shift })
    }

    /// The identity message (λ = 0, η = 0): multiplying by it changes nothing.
    pub fn unit(dim: usize) -> Self {
        NaturalFactor {
            precision: vec![0.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.precision.len()
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// Moment form; errors if any precision is not strictly positive.
    pub fn to_moment(&self) -> Result<DiagGaussian, VariationalError> {
        if let Some(index) = self.precision.iter().position(|l| *l <= 0.0) {
            return Err(VariationalError::ImproperFactor {
                index,
                precision: self.precision[index],
            });
        }
        let variance: Vec<f64> = self.precision.iter().map(|l| 1.0 / l).collect();
        let mean = self
            .shift
            .iter()
            .zip(&self.precision)
            .map(|(e, l)| e / l)
            .collect();
        DiagGaussian::new(mean, variance)
    }

    fn zip_with(
        &self,
        other: &NaturalFactor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NaturalFactor, VariationalError> {
        check_dims(op, self.dim(), other.dim())?;
        let precision = self
            .precision
            .iter()
            .zip(&other.precision)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let shift = self
            .shift
            .iter()
            .zip(&other.shift)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(NaturalFactor { precision, shift })
    }

    /// Product of two Gaussian messages: elementwise addition of natural
    /// parameters. Commutative and associative.
    pub fn product(&self, other: &NaturalFactor) -> Result<NaturalFactor, VariationalError> {
        self.zip_with(other, "factor_product", |a, b| a + b)
    }

    /// Quotient of two Gaussian messages: elementwise subtraction. Inverts
    /// [`NaturalFactor::product`]; the result may be improper.
    pub fn quotient(&self, other: &NaturalFactor) -> Result<NaturalFactor, VariationalError> {
        self.zip_with(other, "factor_quotient", |a, b| a - b)
    }

    /// Raises the message to the power `c` (scales both natural parameters).
    /// `scale(1/K)` splits a prior evenly across K factors.
    pub fn scale(&self, c: f64) -> NaturalFactor {
        NaturalFactor {
            precision: self.precision.iter().map(|l| c * l).collect(),
            shift: self.shift.iter().map(|e| c * e).collect(),
        }
    }

    /// Damped update in natural parameters: `(1−d)·old + d·new`. `d = 1`
    /// returns `new` unchanged (no damping).
    pub fn damped(&self, new: &NaturalFactor, d: f64) -> Result<NaturalFactor, VariationalError> {
        self.zip_with(new, "damped", |old, upd| (1.0 - d) * old + d * upd)
    }

    /// Moment form with non-positive precisions clamped to `min_precision`.
    ///
    /// Per dimension: a precision at or above the floor converts exactly; a
    /// precision below the floor is clamped, with the mean preserved as
    /// `η/λ` while the original precision is positive and `η/min_precision`
    /// otherwise. The result always satisfies the moment-form invariants.
    pub fn project_proper(&self, min_precision: f64) -> DiagGaussian {
        assert!(
            min_precision > 0.0 && min_precision.is_finite(),
            "min_precision must be positive and finite, got {min_precision}"
        );
        let mut mean = Vec::with_capacity(self.dim());
        let mut variance = Vec::with_capacity(self.dim());
        for (&l, &e) in self.precision.iter().zip(&self.shift) {
            if l >= min_precision {
                variance.push(1.0 / l);
                mean.push(e / l);
            } else {
                variance.push(1.0 / min_precision);
                mean.push(if l > 0.0 { e / l } else { e / min_precision });
            }
        }
        DiagGaussian { mean, variance }
    }
}

/// KL(p ‖ q) between diagonal Gaussians, in nats:
/// `Σ_d log(σ_q/σ_p) + (σ_p² + (μ_p−μ_q)²)/(2σ_q²) − 1/2`.
pub fn kl_divergence(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64, VariationalError> {
    check_dims("kl_divergence", p.dim(), q.dim())?;
    let mut total = 0.0;
    for i in 0..p.dim() {
        let (vp, vq) = (p.variance[i], q.variance[i]);
        let dm = p.mean[i] - q.mean[i];
        total += 0.5 * (vq / vp).ln() + (vp + dm * dm) / (2.0 * vq) - 0.5;
    }
    Ok(total)
}

/// Reparameterized sample μ + σ ⊙ ε for a given standard-normal draw ε.
pub fn sample_reparam(d: &DiagGaussian, noise: &[f64]) -> Vec<f64> {
    assert_eq!(
        d.dim(),
        noise.len(),
        "sample_reparam: noise length {} does not match dimension {}",
        noise.len(),
        d.dim()
    );
    d.mean
        .iter()
        .zip(&d.variance)
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect()
}

/// Draws a standard-normal vector of the given length.
pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Trainable parameterization of a diagonal Gaussian: σ = softplus(rho), so
/// any real `rho` yields a strictly positive standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalParams {
    pub fn from_gaussian(d: &DiagGaussian) -> Self {
        VariationalParams {
            mean: d.mean.clone(),
            rho: d.variance.iter().map(|v| softplus_inv(v.sqrt())).collect(),
        }
    }

    pub fn to_gaussian(&self) -> DiagGaussian {
        let variance = self
            .rho
            .iter()
            .map(|r| {
                let s = softplus(*r);
                s * s
            })
            .collect();
        DiagGaussian {
            mean: self.mean.clone(),
            variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Places `params` on a tape as two leaves (mean, rho) and returns their ids.
pub fn params_leaves(tape: &mut Tape, params: &VariationalParams) -> (NodeId, NodeId) {
    let mean = tape.leaf(Tensor::vector(params.mean.clone()));
    let rho = tape.leaf(Tensor::vector(params.rho.clone()));
    (mean, rho)
}

/// Builds KL(q ‖ prior) on the tape, where q has mean node `mean` and
/// standard deviation softplus(`rho`). Returns a scalar node differentiable
/// with respect to both leaves.
pub fn kl_node(
    tape: &mut Tape,
    mean: NodeId,
    rho: NodeId,
    prior: &DiagGaussian,
) -> Result<NodeId, TensorError> {
    let half_log_vp: Vec<f64> = prior.variance().iter().map(|v| 0.5 * v.ln()).collect();
    let inv_2vp: Vec<f64> = prior.variance().iter().map(|v| 1.0 / (2.0 * v)).collect();
    let c_half_log = tape.constant(Tensor::vector(half_log_vp));
    let c_inv_2vp = tape.constant(Tensor::vector(inv_2vp));
    let c_prior_mean = tape.constant(Tensor::vector(prior.mean().to_vec()));

    let s = tape.softplus(rho);
    let log_s = tape.log(s);
    let s2 = tape.mul(s, s)?;
    let dm = tape.sub(mean, c_prior_mean)?;
    let dm2 = tape.mul(dm, dm)?;
    let numer = tape.add(s2, dm2)?;
    let quad = tape.mul(numer, c_inv_2vp)?;
    let t = tape.sub(quad, log_s)?;
    let t = tape.add(t, c_half_log)?;
    let t = tape.add_scalar(t, -0.5);
    Ok(tape.sum(t))
}

/// Builds the reparameterized sample μ + softplus(rho) ⊙ ε on the tape for a
/// fixed noise draw ε. Returns a vector node differentiable with respect to
/// both leaves.
pub fn sample_node(
    tape: &mut Tape,
    mean: NodeId,
    rho: NodeId,
    noise: &[f64],
) -> Result<NodeId, TensorError> {
    let eps = tape.constant(Tensor::vector(noise.to_vec()));
    let s = tape.softplus(rho);
    let scaled = tape.mul(s, eps)?;
    tape.add(mean, scaled)
}
