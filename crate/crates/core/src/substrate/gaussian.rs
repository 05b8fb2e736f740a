use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `sum_i log N(x_i; mean_i, exp(logvar_i))`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], logvar: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != logvar.len() {
        return Err(Error::contract(format!(
            "gaussian_logpdf: lengths {} / {} / {}",
            x.len(),
            mean.len(),
            logvar.len()
        )));
    }
    Ok(x.iter()
        .zip(mean)
        .zip(logvar)
        .map(|((&x, &m), &lv)| {
            let r = x - m;
            -0.5 * LN_2PI - 0.5 * lv - 0.5 * r * r * (-lv).exp()
        })
        .sum())
}

/// `mean + exp(logvar / 2) * noise`.
pub fn reparam_sample(mean: &[f64], logvar: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != logvar.len() || mean.len() != noise.len() {
        return Err(Error::contract(format!(
            "reparam_sample: lengths {} / {} / {}",
            mean.len(),
            logvar.len(),
            noise.len()
        )));
    }
    Ok(mean
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn standard_normal_at_mode() {
        let v = gaussian_logpdf(&[0.0], &[0.0], &[0.0]).unwrap();
        assert!((v + 0.918_938_5).abs() < 1e-7);
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn two_dims_unit_offset() {
        let v = gaussian_logpdf(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let want = -(2.0 * std::f64::consts::PI).ln() - 1.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn integrates_to_one_on_a_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let m = 3.0 * z;
            let lv: f64 = StandardNormal.sample(&mut rng);
            let sd = (0.5 * lv).exp();
            let (lo, hi, n) = (m - 12.0 * sd, m + 12.0 * sd, 20_000);
            let h = (hi - lo) / n as f64;
            let total: f64 = (0..=n)
                .map(|k| {
                    let x = lo + k as f64 * h;
                    let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                    w * gaussian_logpdf(&[x], &[m], &[lv]).unwrap().exp()
                })
                .sum::<f64>()
                * h;
            assert!((total - 1.0).abs() < 1e-3, "total = {total}");
        }
    }

    #[test]
    fn reparam_edge_cases() {
        assert_eq!(
            reparam_sample(&[1.0, -2.0], &[0.3, 1.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, -2.0]
        );
        assert_eq!(reparam_sample(&[1.0], &[0.0], &[0.5]).unwrap(), vec![1.5]);
        assert!(reparam_sample(&[1.0], &[0.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn reparam_moments() {
        let (mean, logvar) = (0.7, -0.4_f64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                reparam_sample(&[mean], &[logvar], &[StandardNormal.sample(&mut rng)]).unwrap()[0]
            })
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = logvar.exp();
        assert!((m - mean).abs() < 3.0 * (true_var / n as f64).sqrt());
        // var of the sample variance for a normal: 2 sigma^4 / (n - 1)
        assert!((var - true_var).abs() < 3.0 * (2.0 * true_var * true_var / (n - 1) as f64).sqrt());
    }

    proptest! {
        #[test]
        fn translation_invariant(x in -5.0f64..5.0, m in -5.0f64..5.0, lv in -2.0f64..2.0, c in -1e3f64..1e3) {
            // Exact equality holds whenever the shifted difference is computed exactly.
            let c = c.round();
            let (xs, ms) = (x.round(), m.round());
            let a = gaussian_logpdf(&[xs + c], &[ms + c], &[lv]).unwrap();
            let b = gaussian_logpdf(&[xs], &[ms], &[lv]).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn deterministic(x in -5.0f64..5.0, m in -5.0f64..5.0, lv in -2.0f64..2.0) {
            let a = gaussian_logpdf(&[x], &[m], &[lv]).unwrap();
            let b = gaussian_logpdf(&[x], &[m], &[lv]).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
