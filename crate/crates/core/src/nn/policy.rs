use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::{Mlp, MlpGrads, MlpSpec, Tape};
use super::Parameters;
use crate::error::{Error, Result};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian policy with a state-independent learnable log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub mean: MlpGrads,
    pub log_std: Array1<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(spec: MlpSpec, init_log_std: f64, rng: &mut R) -> Result<Self> {
        let dim = spec.output_dim;
        Ok(GaussianPolicy {
            mean: Mlp::new(spec, rng)?,
            log_std: Array1::from_elem(dim, init_log_std),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        self.mean.spec()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(obs)
    }

    pub fn sample_action<R: Rng>(&self, mean: ArrayView1<f64>, rng: &mut R) -> Vec<f64> {
        mean.iter()
            .zip(self.log_std.iter())
            .map(|(&m, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect()
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        if !self.is_finite() {
            return Err(Error::Training("non-finite policy parameters".into()));
        }
        if action.len() != self.action_dim() {
            return Err(Error::shape(self.action_dim(), action.len()));
        }
        let mean = self.mean.forward(obs)?;
        Ok(gaussian_log_prob(&mean, self.log_std.view(), action))
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (1.0 + LOG_2PI)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    /// Row-wise log-densities of `actions` under means taken from a tape.
    pub fn log_prob_batch(&self, means: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array1<f64> {
        means
            .outer_iter()
            .zip(actions.outer_iter())
            .map(|(m, a)| {
                m.iter()
                    .zip(self.log_std.iter())
                    .zip(a.iter())
                    .map(|((&m, &ls), &a)| log_density_term(m, ls, a))
                    .sum()
            })
            .collect()
    }

    /// Gradients given dLoss/dlogp per row plus a direct dLoss/dlog_std term.
    ///
    /// `coef[i]` multiplies the gradient of `log pi(a_i | s_i)`.
    pub fn backward_log_prob(
        &self,
        tape: &Tape,
        actions: ArrayView2<f64>,
        coef: ArrayView1<f64>,
        extra_log_std: ArrayView1<f64>,
    ) -> PolicyGrads {
        let inv_var: Array1<f64> = self.log_std.mapv(|ls| (-2.0 * ls).exp());
        let resid = &actions - &tape.output;
        // d logp / d mu = (a - mu) / sigma^2
        let mut d_mean = &resid * &inv_var;
        d_mean *= &coef.insert_axis(Axis(1));
        // d logp / d log_sigma = (a - mu)^2 / sigma^2 - 1
        let mut d_log_std = Array1::<f64>::zeros(self.action_dim());
        for (row, &c) in resid.outer_iter().zip(coef.iter()) {
            for ((g, &r), &iv) in d_log_std.iter_mut().zip(row.iter()).zip(inv_var.iter()) {
                *g += c * (r * r * iv - 1.0);
            }
        }
        d_log_std += &extra_log_std;
        PolicyGrads {
            mean: self.mean.backward(tape, d_mean.view()),
            log_std: d_log_std,
        }
    }
}

/// `sum_d [ -(a_d - mu_d)^2 / (2 sigma_d^2) - log sigma_d - log(2 pi) / 2 ]`
pub fn gaussian_log_prob(mean: &[f64], log_std: ArrayView1<f64>, action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std.iter())
        .zip(action)
        .map(|((&m, &ls), &a)| log_density_term(m, ls, a))
        .sum()
}

#[inline]
fn log_density_term(mean: f64, log_std: f64, action: f64) -> f64 {
    let z = (action - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - 0.5 * LOG_2PI
}

impl PolicyGrads {
    pub fn zeros_like(policy: &GaussianPolicy) -> Self {
        PolicyGrads {
            mean: MlpGrads::zeros_like(&policy.mean),
            log_std: Array1::zeros(policy.action_dim()),
        }
    }
}

impl Parameters for GaussianPolicy {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.mean.slices();
        s.push(self.log_std.as_slice().expect("standard layout"));
        s
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.mean.slices_mut();
        s.push(self.log_std.as_slice_mut().expect("standard layout"));
        s
    }
}

impl Parameters for PolicyGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.mean.slices();
        s.push(self.log_std.as_slice().expect("standard layout"));
        s
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.mean.slices_mut();
        s.push(self.log_std.as_slice_mut().expect("standard layout"));
        s
    }
}

/// Stacks rows into a matrix.
pub fn stack_rows(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (mut dst, src) in m.outer_iter_mut().zip(rows) {
        dst.assign(&ArrayView1::from(src.as_slice()));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn log_prob_at_mean_unit_sigma() {
        let lp = gaussian_log_prob(&[0.3, -0.1, 2.0], Array1::zeros(3).view(), &[0.3, -0.1, 2.0]);
        assert!((lp - (-1.5 * LOG_2PI)).abs() < 1e-14);
        let off = gaussian_log_prob(&[0.3, -0.1, 2.0], Array1::zeros(3).view(), &[1.3, -0.1, 2.0]);
        assert!((off - (lp - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn log_prob_matches_density_formula() {
        let mu = [0.4, -1.2];
        let sigma = [0.3_f64, 1.7_f64];
        let a = [0.1, 0.5];
        let density: f64 = (0..2)
            .map(|d| {
                let z = (a[d] - mu[d]) / sigma[d];
                (-0.5 * z * z).exp() / (sigma[d] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .product();
        let ls = array![sigma[0].ln(), sigma[1].ln()];
        let lp = gaussian_log_prob(&mu, ls.view(), &a);
        assert!((lp - density.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_std_gradient_at_mean_is_minus_one() {
        let mut rng = seed::rng(4);
        let pol = GaussianPolicy::new(MlpSpec::tanh(2, &[3], 2), 0.1f64.ln(), &mut rng).unwrap();
        let obs = array![[0.2, 0.7]];
        let tape = pol.mean.forward_tape(obs).unwrap();
        let actions = tape.output.clone();
        let g = pol.backward_log_prob(&tape, actions.view(), array![1.0].view(), Array1::zeros(2).view());
        for v in g.log_std.iter() {
            assert!((v + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut rng = seed::rng(4);
        let mut pol = GaussianPolicy::new(MlpSpec::tanh(1, &[2], 1), 0.0, &mut rng).unwrap();
        pol.log_std[0] = f64::NAN;
        assert!(matches!(pol.log_prob(&[0.0], &[0.0]), Err(Error::Training(_))));
    }
}
