use super::Soc;

/// Degree-5 polynomial mapping state of charge to open-circuit voltage.
///
/// Coefficients are stored highest degree first, so `coeffs[0]` multiplies
/// `s^5` and `coeffs[5]` is the constant term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcvCurve {
    pub coeffs: [f64; 6],
}

impl OcvCurve {
    /// Rest-voltage curve of the 100 Ah, 12 V lead-acid reference battery.
    pub const REFERENCE_COEFFS: [f64; 6] = [11.41, -24.38, 17.85, -5.233, 0.928, 12.33];

    pub fn new(coeffs: [f64; 6]) -> Self {
        OcvCurve { coeffs }
    }

    pub fn reference() -> Self {
        OcvCurve::new(Self::REFERENCE_COEFFS)
    }

    pub fn ocv(&self, s: Soc) -> f64 {
        self.eval(s.value())
    }

    /// Analytic derivative with respect to SoC, volts per unit SoC.
    pub fn docv_ds(&self, s: Soc) -> f64 {
        self.slope(s.value())
    }

    /// Horner evaluation at an arbitrary abscissa.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn slope(&self, x: f64) -> f64 {
        let [c5, c4, c3, c2, c1, _] = self.coeffs;
        (((5.0 * c5 * x + 4.0 * c4) * x + 3.0 * c3) * x + 2.0 * c2) * x + c1
    }
}

impl Default for OcvCurve {
    fn default() -> Self {
        OcvCurve::reference()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: explicit powers, no nesting.
    fn term_sum(c: &[f64; 6], s: f64) -> f64 {
        (0..6).map(|k| c[k] * s.powi(5 - k as i32)).sum()
    }

    #[test]
    fn reference_values() {
        let ocv = OcvCurve::reference();
        let c = OcvCurve::REFERENCE_COEFFS;
        assert_eq!(ocv.ocv(Soc::EMPTY), 12.33);
        let at_one = term_sum(&c, 1.0);
        assert!((at_one - 12.905).abs() < 1e-12);
        assert!((ocv.ocv(Soc::FULL) - at_one).abs() < 1e-12);
        let half = Soc::new(0.5).unwrap();
        assert!((ocv.ocv(half) - 12.5498125).abs() < 1e-12);
        assert!((ocv.ocv(half) - term_sum(&c, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn slope_values() {
        let ocv = OcvCurve::reference();
        assert_eq!(ocv.docv_ds(Soc::EMPTY), 0.928);
        let h = 1e-6;
        let c = OcvCurve::REFERENCE_COEFFS;
        let fd = (term_sum(&c, 1.0 + h) - term_sum(&c, 1.0 - h)) / (2.0 * h);
        assert!((fd - 3.542).abs() < 1e-3);
        assert!((ocv.docv_ds(Soc::FULL) - 3.542).abs() < 1e-9);
    }

    #[test]
    fn reference_slope_is_positive_on_fine_grid() {
        let ocv = OcvCurve::reference();
        for k in 0..=1000 {
            let s = k as f64 / 1000.0;
            assert!(ocv.slope(s) > 0.0, "non-positive slope at s={s}");
        }
    }
}
