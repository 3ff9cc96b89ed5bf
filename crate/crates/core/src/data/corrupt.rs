use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Gaussian,
    Shot,
    Impulse,
    Salt,
    Pepper,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Gaussian,
        CorruptionKind::Shot,
        CorruptionKind::Impulse,
        CorruptionKind::Salt,
        CorruptionKind::Pepper,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::Shot => "shot",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::Salt => "salt",
            CorruptionKind::Pepper => "pepper",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("corruption.kind", format!("unknown corruption {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = Self { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config("corruption.severity", format!("must lie in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }

    /// `kind-severity`, e.g. `gaussian-5`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_P: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.07];
const CONTRAST_C: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];

/// The severity table entry for `spec`.
pub fn severity_param(spec: CorruptionSpec) -> Result<f64> {
    spec.validate()?;
    let i = usize::from(spec.severity - 1);
    Ok(match spec.kind {
        CorruptionKind::Gaussian => GAUSSIAN_SIGMA[i],
        CorruptionKind::Shot => SHOT_LAMBDA[i],
        CorruptionKind::Impulse | CorruptionKind::Salt | CorruptionKind::Pepper => IMPULSE_P[i],
        CorruptionKind::Contrast => CONTRAST_C[i],
    })
}

pub fn corrupt<R: Rng + ?Sized>(clip: &VideoClip, spec: CorruptionSpec, rng: &mut R) -> Result<VideoClip> {
    corrupt_with_param(clip, spec.kind, severity_param(spec)?, rng)
}

/// Applies `kind` with an explicit parameter (noise std, photon count,
/// replaced fraction or contrast factor), then clamps to `[0, 1]`.
pub fn corrupt_with_param<R: Rng + ?Sized>(clip: &VideoClip, kind: CorruptionKind, param: f64, rng: &mut R) -> Result<VideoClip> {
    if !(param.is_finite() && param >= 0.0) {
        return Err(Error::config("corruption.param", format!("must be finite and non-negative, got {param}")));
    }
    let mut out = clip.clone();
    let data = out.frames.data_mut();
    match kind {
        CorruptionKind::Gaussian => {
            if param > 0.0 {
                let n = Normal::new(0.0, param).expect("positive std");
                data.iter_mut().for_each(|x| *x += n.sample(rng));
            }
        }
        CorruptionKind::Shot => {
            if param <= 0.0 {
                return Err(Error::config("corruption.param", "shot noise needs a positive photon count"));
            }
            for x in data.iter_mut() {
                let rate = *x * param;
                *x = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng) / param
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::Impulse | CorruptionKind::Salt | CorruptionKind::Pepper => {
            for x in data.iter_mut() {
                if rng.random::<f64>() < param {
                    *x = match kind {
                        CorruptionKind::Salt => 1.0,
                        CorruptionKind::Pepper => 0.0,
                        _ => f64::from(u8::from(rng.random::<bool>())),
                    };
                }
            }
        }
        CorruptionKind::Contrast => {
            let c = *clip.frames.shape().last().unwrap();
            let mut mean = vec![0.0; c];
            for (i, x) in data.iter().enumerate() {
                mean[i % c] += x;
            }
            let n = (data.len() / c) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            for (i, x) in data.iter_mut().enumerate() {
                *x = (*x - mean[i % c]) * param + mean[i % c];
            }
        }
    }
    data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    Ok(out)
}

/// Corrupts every clip of a stream from one seeded generator.
pub fn corrupt_stream(clips: &[VideoClip], spec: CorruptionSpec, seed: u64) -> Result<Vec<VideoClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clips.iter().map(|c| corrupt(c, spec, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn flat(v: f64) -> VideoClip {
        VideoClip::new(Tensor::filled(vec![16, 8, 8, 3], v), "c", Some(0)).unwrap()
    }

    #[test]
    fn parse_and_severity_bounds() {
        assert_eq!("salt".parse::<CorruptionKind>().unwrap(), CorruptionKind::Salt);
        assert!(matches!("blur".parse::<CorruptionKind>(), Err(Error::Config { .. })));
        assert!(CorruptionSpec::new(CorruptionKind::Salt, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Salt, 6).is_err());
        assert!(serde_json::from_str::<CorruptionSpec>("{\"kind\":\"fog\",\"severity\":1}").is_err());
    }

    #[test]
    fn zero_parameter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = flat(0.4);
        for kind in [CorruptionKind::Gaussian, CorruptionKind::Impulse, CorruptionKind::Salt, CorruptionKind::Pepper] {
            assert_eq!(corrupt_with_param(&clip, kind, 0.0, &mut rng).unwrap(), clip);
        }
        assert_eq!(corrupt_with_param(&clip, CorruptionKind::Contrast, 1.0, &mut rng).unwrap(), clip);
    }

    #[test]
    fn pepper_fraction() {
        let clip = flat(0.5);
        let spec = CorruptionSpec::new(CorruptionKind::Pepper, 5).unwrap();
        let out = corrupt(&clip, spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let zeros = out.frames.data().iter().filter(|&&v| v == 0.0).count() as f64 / out.frames.len() as f64;
        assert!(zeros >= 0.06, "{zeros}");
    }

    #[test]
    fn outputs_stay_in_range_and_are_seeded() {
        let clip = flat(0.97);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                let a = corrupt(&clip, spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
                let b = corrupt(&clip, spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.frames.shape(), clip.frames.shape());
                assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
