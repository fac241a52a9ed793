use nalgebra::{DMatrix, DVector};

use super::FitError;
use crate::ecm::{OcvCurve, Soc};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcvFit {
    pub curve: OcvCurve,
    pub rms: f64,
}

/// Ordinary least squares of a degree-5 polynomial through `(soc, ocv)`
/// points, solved by Householder QR of the Vandermonde matrix.
pub fn fit_ocv_poly(points: &[(Soc, f64)]) -> Result<OcvFit, FitError> {
    const N: usize = 6;
    let mut xs: Vec<f64> = points.iter().map(|(s, _)| s.value()).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < N {
        return Err(FitError::RankDeficient {
            distinct: xs.len(),
            needed: N,
        });
    }
    if points.iter().any(|(_, v)| !v.is_finite()) {
        return Err(FitError::InvalidInput("non-finite voltage".into()));
    }
    let m = points.len();
    // Columns s^5 .. s^0, matching the coefficient order of OcvCurve.
    let a = DMatrix::from_fn(m, N, |r, c| points[r].0.value().powi((N - 1 - c) as i32));
    let b = DVector::from_iterator(m, points.iter().map(|(_, v)| *v));
    let qr = a.clone().qr();
    let qtb = qr.q().transpose() * &b;
    let coef = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(FitError::RankDeficient {
            distinct: xs.len(),
            needed: N,
        })?;
    let resid = &a * &coef - &b;
    let rms = (resid.norm_squared() / m as f64).sqrt();
    let mut coeffs = [0.0; N];
    coeffs.copy_from_slice(coef.as_slice());
    Ok(OcvFit {
        curve: OcvCurve::new(coeffs),
        rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn soc(v: f64) -> Soc {
        Soc::new(v).unwrap()
    }

    #[test]
    fn recovers_reference_coefficients() {
        let c = OcvCurve::REFERENCE_COEFFS;
        let pts: Vec<_> = (0..=10)
            .map(|k| {
                let s = k as f64 / 10.0;
                let v: f64 = (0..6).map(|j| c[j] * s.powi(5 - j as i32)).sum();
                (soc(s), v)
            })
            .collect();
        let fit = fit_ocv_poly(&pts).unwrap();
        for (got, want) in fit.curve.coeffs.iter().zip(c) {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(fit.rms < 1e-12);
    }

    #[test]
    fn linear_data_gives_linear_fit() {
        let pts: Vec<_> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&s| (soc(s), 11.9 + 0.8 * s))
            .collect();
        let fit = fit_ocv_poly(&pts).unwrap();
        let c = fit.curve.coeffs;
        for k in 0..4 {
            assert!(c[k].abs() < 1e-8, "c[{k}]={}", c[k]);
        }
        assert!((c[4] - 0.8).abs() < 1e-9);
        assert!((c[5] - 11.9).abs() < 1e-10);
    }

    #[test]
    fn too_few_points_is_rank_deficient() {
        let pts: Vec<_> = (0..5).map(|k| (soc(k as f64 / 5.0), 12.0)).collect();
        assert_eq!(
            fit_ocv_poly(&pts).unwrap_err(),
            FitError::RankDeficient {
                distinct: 5,
                needed: 6
            }
        );
        // Repeated abscissae do not count twice.
        let mut dup = pts.clone();
        dup.extend(pts.iter().copied());
        assert!(matches!(
            fit_ocv_poly(&dup),
            Err(FitError::RankDeficient { distinct: 5, .. })
        ));
    }

    proptest! {
        #[test]
        fn residual_is_order_invariant(seed in 0u64..1000, noise in proptest::collection::vec(-0.01f64..0.01, 11)) {
            let ocv = OcvCurve::reference();
            let mut pts: Vec<_> = (0..=10)
                .map(|k| {
                    let s = k as f64 / 10.0;
                    (soc(s), ocv.eval(s) + noise[k])
                })
                .collect();
            let a = fit_ocv_poly(&pts).unwrap().rms;
            // deterministic shuffle
            let n = pts.len();
            for k in 0..n {
                let j = ((seed.wrapping_mul(6364136223846793005).wrapping_add(k as u64 * 1442695040888963407)) >> 33) as usize % n;
                pts.swap(k, j);
            }
            let b = fit_ocv_poly(&pts).unwrap().rms;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-12));
        }
    }
}
