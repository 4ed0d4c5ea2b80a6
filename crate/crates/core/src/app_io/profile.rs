use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dae_engine::CurrentProfile;
use crate::error::{Error, Result};

/// Seeded drive-cycle-like current: a sum of random steps and sinusoids,
/// shifted to zero mean and clipped to `[-peak, peak]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfileSpec {
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    /// Sample period in seconds.
    pub period: f64,
    /// Peak current bound (A).
    pub peak: f64,
    #[serde(default)]
    pub components: Vec<ProfileComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileComponent {
    /// Levels drawn from `[-amplitude, amplitude]`, each held for a dwell
    /// time drawn from `dwell`.
    Steps { amplitude: f64, dwell: [f64; 2] },
    /// One sinusoid with amplitude, period and phase drawn at random.
    Sine {
        amplitude: [f64; 2],
        period: [f64; 2],
    },
}

impl SyntheticProfileSpec {
    /// About one urban drive cycle long, sized for packs of a few hundred
    /// mAh per cell.
    pub fn udds_like(seed: u64) -> Self {
        SyntheticProfileSpec {
            seed,
            duration: 1372.0,
            period: 1.0,
            peak: 2.0,
            components: vec![
                ProfileComponent::Steps {
                    amplitude: 1.0,
                    dwell: [5.0, 40.0],
                },
                ProfileComponent::Sine {
                    amplitude: [0.2, 0.6],
                    period: [30.0, 120.0],
                },
                ProfileComponent::Sine {
                    amplitude: [0.1, 0.3],
                    period: [5.0, 15.0],
                },
            ],
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    format!("{field}.{name}"),
                    format!("must be positive, got {v}"),
                ))
            }
        };
        positive("duration", self.duration)?;
        positive("period", self.period)?;
        positive("peak", self.peak)?;
        let range = |path: String, r: [f64; 2], floor: f64| {
            if r[0].is_finite() && r[1].is_finite() && floor <= r[0] && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::config(
                    path,
                    format!("need {floor} <= lower <= upper, got {r:?}"),
                ))
            }
        };
        for (n, c) in self.components.iter().enumerate() {
            let at = format!("{field}.components[{n}]");
            match c {
                ProfileComponent::Steps { amplitude, dwell } => {
                    if !(amplitude.is_finite() && *amplitude >= 0.0) {
                        return Err(Error::config(
                            format!("{at}.amplitude"),
                            format!("must be non-negative, got {amplitude}"),
                        ));
                    }
                    range(format!("{at}.dwell"), *dwell, self.period)?;
                }
                ProfileComponent::Sine { amplitude, period } => {
                    range(format!("{at}.amplitude"), *amplitude, 0.0)?;
                    range(format!("{at}.period"), *period, 2.0 * self.period)?;
                }
            }
        }
        Ok(())
    }
}

pub fn synthesize_profile(spec: &SyntheticProfileSpec) -> Result<CurrentProfile> {
    spec.validate("profile")?;
    let n = (spec.duration / spec.period).ceil().max(1.0) as usize;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * spec.period).collect();
    let mut current = vec![0.0; n];
    for (index, component) in spec.components.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        match component {
            ProfileComponent::Steps { amplitude, dwell } => {
                let mut k = 0;
                while k < n {
                    let level = if *amplitude > 0.0 {
                        rng.random_range(-amplitude..=*amplitude)
                    } else {
                        0.0
                    };
                    let hold = if dwell[1] > dwell[0] {
                        rng.random_range(dwell[0]..dwell[1])
                    } else {
                        dwell[0]
                    };
                    let len = ((hold / spec.period).round() as usize).max(1);
                    for c in current.iter_mut().skip(k).take(len) {
                        *c += level;
                    }
                    k += len;
                }
            }
            ProfileComponent::Sine { amplitude, period } => {
                let a = uniform(&mut rng, *amplitude);
                let p = uniform(&mut rng, *period);
                let phase = rng.random_range(0.0..TAU);
                for (c, t) in current.iter_mut().zip(&times) {
                    *c += a * (TAU * t / p + phase).sin();
                }
            }
        }
    }
    let mean = current.iter().sum::<f64>() / n as f64;
    for c in current.iter_mut() {
        *c = (*c - mean).clamp(-spec.peak, spec.peak);
    }
    CurrentProfile::new(times, current)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_is_zero() {
        let spec = SyntheticProfileSpec {
            components: Vec::new(),
            ..SyntheticProfileSpec::udds_like(1)
        };
        let p = synthesize_profile(&spec).unwrap();
        assert_eq!(p.times().len(), 1372);
        assert!(p.currents().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn same_seed_same_profile() {
        let a = synthesize_profile(&SyntheticProfileSpec::udds_like(5)).unwrap();
        let b = synthesize_profile(&SyntheticProfileSpec::udds_like(5)).unwrap();
        let c = synthesize_profile(&SyntheticProfileSpec::udds_like(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn peak_bound_holds() {
        let mut spec = SyntheticProfileSpec::udds_like(2);
        spec.peak = 0.5;
        let p = synthesize_profile(&spec).unwrap();
        assert!(p.currents().iter().all(|c| c.abs() <= 0.5));
        assert!(p.currents().iter().any(|c| c.abs() == 0.5));
    }

    #[test]
    fn unclipped_profile_has_zero_mean() {
        let mut spec = SyntheticProfileSpec::udds_like(3);
        spec.peak = 1e6;
        let p = synthesize_profile(&spec).unwrap();
        let mean: f64 = p.currents().iter().sum::<f64>() / p.currents().len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn bad_component_is_rejected() {
        let mut spec = SyntheticProfileSpec::udds_like(0);
        spec.components.push(ProfileComponent::Sine {
            amplitude: [1.0, 0.5],
            period: [10.0, 20.0],
        });
        let err = synthesize_profile(&spec).unwrap_err();
        assert!(err.to_string().contains("components[3].amplitude"), "{err}");
    }
}
