use crate::error::{Error, Result};

/// Suffix sums `G_t = r_t + gamma * G_{t+1}` with zero after the last reward.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

/// Generalized advantage estimates. `values` carries one extra bootstrap
/// entry (zero at a terminal state).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::shape(rewards.len() + 1, values.len()));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn returns_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(discounted_return(&[1.0, 0.0, 0.0], 0.5), vec![1.0, 0.0, 0.0]);
        let g = discounted_return(&[1.0, 1.0], 0.999);
        assert!((g[0] - 1.999).abs() < 1e-15 && g[1] == 1.0);
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.1, 0.2, -0.3, 0.0];
        let a = gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert!((a[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_matches_double_sum() {
        let r = [0.3, -0.7, 1.1, 0.0, 2.5];
        let v = [0.2, -0.4, 0.9, 1.3, -0.6, 0.0];
        let (gamma, lambda) = (0.9f64, 0.5f64);
        let delta: Vec<f64> = (0..5).map(|t| r[t] + gamma * v[t + 1] - v[t]).collect();
        let brute: Vec<f64> = (0..5)
            .map(|t| (0..5 - t).map(|k| (gamma * lambda).powi(k as i32) * delta[t + k]).sum())
            .collect();
        let a = gae(&r, &v, gamma, lambda).unwrap();
        for t in 0..5 {
            assert!((a[t] - brute[t]).abs() < 1e-12, "{t}: {} vs {}", a[t], brute[t]);
        }
    }

    #[test]
    fn gae_length_mismatch() {
        assert!(gae(&[1.0, 2.0], &[0.0, 0.0], 0.9, 0.9).is_err());
    }

    proptest! {
        #[test]
        fn gae_lambda_one_is_return_minus_value(
            r in prop::collection::vec(-1.0f64..1.0, 1..=40),
            gamma in 0.0f64..=1.0,
            seed_vals in prop::collection::vec(-1.0f64..1.0, 40),
        ) {
            let mut v: Vec<f64> = seed_vals[..r.len()].to_vec();
            v.push(0.0);
            let a = gae(&r, &v, gamma, 1.0).unwrap();
            let g = discounted_return(&r, gamma);
            for t in 0..r.len() {
                prop_assert!((a[t] - (g[t] - v[t])).abs() < 1e-12);
            }
        }
    }
}
