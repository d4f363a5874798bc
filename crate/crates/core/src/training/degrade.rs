//! Synthetic underwater degradation: wavelength-dependent attenuation plus
//! a backscatter veil.

use rand::Rng;

use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

/// Water column parameters for [`degrade`].
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    /// Attenuation per unit depth for R, G, B.
    pub beta: [f64; 3],
    pub depth: f64,
    /// Veiling light colour, each component in `[0,1]`.
    pub backscatter: [f64; 3],
    /// Lower bound on the transmittance.
    pub floor: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            beta: [0.8, 0.3, 0.1],
            depth: 2.0,
            backscatter: [0.0, 0.1, 0.15],
            floor: 0.05,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(FusionError::invalid(format!("attenuation must be >= 0, got {:?}", self.beta)));
        }
        if !self.depth.is_finite() || self.depth < 0.0 {
            return Err(FusionError::invalid(format!("depth must be >= 0, got {}", self.depth)));
        }
        if self.backscatter.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(FusionError::invalid(format!(
                "backscatter must lie in [0,1], got {:?}",
                self.backscatter
            )));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(FusionError::invalid(format!("transmittance floor must lie in [0,1], got {}", self.floor)));
        }
        Ok(())
    }

    /// `max(exp(-beta_c * d), floor)` per channel.
    pub fn transmittance(&self) -> [f64; 3] {
        self.beta.map(|b| (-b * self.depth).exp().max(self.floor))
    }

    /// Random water: red always attenuates fastest.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            beta: [rng.gen_range(0.5..1.0), rng.gen_range(0.15..0.4), rng.gen_range(0.03..0.12)],
            depth: rng.gen_range(0.5..3.0),
            backscatter: [rng.gen_range(0.0..0.1), rng.gen_range(0.1..0.35), rng.gen_range(0.15..0.45)],
            floor: 0.05,
        }
    }
}

/// `out_c = clean_c * t_c + B_c * (1 - t_c)`, clamped to `[0,1]`.
pub fn degrade(clean: &Tensor, p: &DegradationParams) -> Result<Tensor> {
    p.validate()?;
    let (c, h, w) = clean.chw()?;
    if c != 3 {
        return Err(FusionError::shape(format!("degrade expects 3 channels, got {c}")));
    }
    let t = p.transmittance();
    let plane = h * w;
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            (v * t[ch] + p.backscatter[ch] * (1.0 - t[ch])).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(clean.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clean(seed: u64) -> Tensor {
        Tensor::uniform(&[3, 6, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_depth_is_identity() {
        let x = clean(1);
        let p = DegradationParams {
            depth: 0.0,
            ..Default::default()
        };
        assert_eq!(degrade(&x, &p).unwrap(), x);
    }

    #[test]
    fn deep_water_tends_to_backscatter() {
        let p = DegradationParams {
            depth: 1e4,
            floor: 0.0,
            ..Default::default()
        };
        let out = degrade(&clean(2), &p).unwrap();
        for ch in 0..3 {
            let plane = out.channel(ch).unwrap();
            assert!(plane.data().iter().all(|v| (v - p.backscatter[ch]).abs() < 1e-12));
        }
    }

    #[test]
    fn red_loses_most() {
        let p = DegradationParams {
            beta: [0.8, 0.3, 0.1],
            depth: 2.0,
            backscatter: [0.0, 0.1, 0.15],
            floor: 0.0,
        };
        for seed in 0..20 {
            let x = clean(seed);
            let y = degrade(&x, &p).unwrap();
            let ratio = |c| y.channel(c).unwrap().mean() / x.channel(c).unwrap().mean();
            assert!(ratio(0) < ratio(1));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let x = clean(0);
        for p in [
            DegradationParams {
                beta: [-0.1, 0.0, 0.0],
                ..Default::default()
            },
            DegradationParams {
                depth: -1.0,
                ..Default::default()
            },
            DegradationParams {
                backscatter: [0.0, 1.5, 0.0],
                ..Default::default()
            },
        ] {
            assert!(degrade(&x, &p).is_err());
        }
        assert!(degrade(&Tensor::zeros(&[1, 4, 4]), &DegradationParams::default()).is_err());
    }
}
