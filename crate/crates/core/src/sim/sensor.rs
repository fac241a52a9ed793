use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimError;

/// Gaussian noise followed by quantization on the current and voltage
/// channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub i_noise_sigma: f64,
    pub v_noise_sigma: f64,
    /// Amperes per LSB; zero disables quantization.
    pub i_quant: f64,
    /// Volts per LSB; zero disables quantization.
    pub v_quant: f64,
    pub seed: u64,
}

impl Default for SensorModel {
    /// A 30 A Hall-effect current sensor and a 12-bit ADC behind a 5:1
    /// divider.
    fn default() -> Self {
        SensorModel {
            i_noise_sigma: 0.050,
            v_noise_sigma: 0.010,
            i_quant: 0.0293,
            v_quant: 0.004,
            seed: 0,
        }
    }
}

impl SensorModel {
    /// Noise-free, unquantized sensors.
    pub fn ideal() -> Self {
        SensorModel {
            i_noise_sigma: 0.0,
            v_noise_sigma: 0.0,
            i_quant: 0.0,
            v_quant: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("i_noise_sigma", self.i_noise_sigma),
            ("v_noise_sigma", self.v_noise_sigma),
            ("i_quant", self.i_quant),
            ("v_quant", self.v_quant),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidScenario(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One noise channel with its own deterministic stream.
#[derive(Debug, Clone)]
pub struct Channel {
    rng: ChaCha8Rng,
    sigma: f64,
    quant: f64,
}

impl Channel {
    pub fn new(seed: u64, stream: u64, sigma: f64, quant: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Channel { rng, sigma, quant }
    }

    pub fn measure(&mut self, x: f64) -> f64 {
        let noisy = if self.sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            x + self.sigma * z
        } else {
            x
        };
        quantize(noisy, self.quant)
    }
}

pub fn quantize(x: f64, lsb: f64) -> f64 {
    if lsb > 0.0 {
        (x / lsb).round() * lsb
    } else {
        x
    }
}

/// Current and voltage channels of one sensor pair.
#[derive(Debug, Clone)]
pub struct Sensors {
    pub current: Channel,
    pub voltage: Channel,
}

impl Sensors {
    /// Streams `first` and `first + 1` of the model's seed.
    pub fn new(model: &SensorModel, first: u64) -> Self {
        Sensors {
            current: Channel::new(model.seed, first, model.i_noise_sigma, model.i_quant),
            voltage: Channel::new(model.seed, first + 1, model.v_noise_sigma, model.v_quant),
        }
    }

    pub fn measure(&mut self, i: f64, v: f64) -> (f64, f64) {
        (self.current.measure(i), self.voltage.measure(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ideal_is_identity() {
        let mut s = Sensors::new(&SensorModel::ideal(), 0);
        assert_eq!(s.measure(-3.217, 12.613), (-3.217, 12.613));
    }

    #[test]
    fn quantized_current_is_lsb_multiple() {
        let m = SensorModel {
            i_quant: 0.1,
            ..SensorModel::default()
        };
        let mut s = Sensors::new(&m, 0);
        for k in 0..200 {
            let i = s.current.measure(k as f64 * 0.0137 - 1.0);
            let n = i / 0.1;
            assert!((n - n.round()).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let m = SensorModel::default();
        let mut a = Sensors::new(&m, 0);
        let mut b = Sensors::new(&m, 0);
        for _ in 0..100 {
            assert_eq!(a.measure(1.0, 12.0), b.measure(1.0, 12.0));
        }
        let mut c = Sensors::new(&m, 2);
        let mut a = Sensors::new(&m, 0);
        let same = (0..20).all(|_| a.measure(1.0, 12.0) == c.measure(1.0, 12.0));
        assert!(!same);
    }

    #[test]
    fn noise_has_requested_spread() {
        let m = SensorModel {
            v_quant: 0.0,
            ..SensorModel::default()
        };
        let mut s = Sensors::new(&m, 0);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| s.voltage.measure(0.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3e-4);
        assert!((var.sqrt() - 0.010).abs() < 3e-4);
    }
}
