//! Quality metrics: the phase-sensitive approximation objective (forward
//! only) and SNR improvement of enhanced output.

use serde::Serialize;

use crate::dsp::{apply_mask, check_same_shape, MaskFrame, Spectrogram};
use crate::error::{Error, Result};
use crate::mixgen::measure_snr;

/// Reported when the residual has zero energy.
pub const SNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsaBreakdown {
    pub mag_mse: f64,
    pub complex_mse: f64,
    pub total: f64,
}

/// With `S_hat = mask * noisy` (noisy phase): mean squared magnitude error
/// plus mean squared modulus of the complex error, both averaged over all
/// time-frequency bins, weighted equally.
pub fn psa_loss(mask: &[MaskFrame], noisy: &Spectrogram, clean: &Spectrogram) -> Result<PsaBreakdown> {
    check_same_shape(noisy, clean)?;
    let est = apply_mask(mask, noisy)?;
    let n = est.data().len();
    if n == 0 {
        return Ok(PsaBreakdown {
            mag_mse: 0.0,
            complex_mse: 0.0,
            total: 0.0,
        });
    }
    let (mut mag, mut cplx) = (0.0, 0.0);
    for (e, s) in est.data().iter().zip(clean.data()) {
        let d = e.norm() - s.norm();
        mag += d * d;
        cplx += (e - s).norm_sqr();
    }
    let mag_mse = mag / n as f64;
    let complex_mse = cplx / n as f64;
    Ok(PsaBreakdown {
        mag_mse,
        complex_mse,
        total: mag_mse + complex_mse,
    })
}

/// Clipped ideal amplitude mask `min(1, |S| / |Y|)`; bins where the mixture
/// is silent get 0.
pub fn ideal_mask(noisy: &Spectrogram, clean: &Spectrogram) -> Result<Vec<MaskFrame>> {
    check_same_shape(noisy, clean)?;
    (0..noisy.frames())
        .map(|t| {
            MaskFrame::new(
                noisy
                    .frame(t)
                    .iter()
                    .zip(clean.frame(t))
                    .map(|(y, s)| {
                        let ym = y.norm();
                        if ym > 0.0 {
                            (s.norm() / ym).min(1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnrImprovement {
    pub input_snr_db: f64,
    pub output_snr_db: f64,
    pub delta_db: f64,
}

fn snr_capped(target: &[f64], signal: &[f64]) -> Result<f64> {
    let residual: Vec<f64> = signal.iter().zip(target).map(|(s, t)| s - t).collect();
    match measure_snr(target, &residual) {
        Ok(v) => Ok(v.min(SNR_CAP_DB)),
        Err(Error::UndefinedSnr("noise")) => Ok(SNR_CAP_DB),
        Err(e) => Err(e),
    }
}

/// SNR of the mixture and of the enhanced signal against `target`, with the
/// residual `signal - target` as noise. Inputs must already be time aligned.
pub fn snr_improvement(mixture: &[f64], enhanced: &[f64], target: &[f64]) -> Result<SnrImprovement> {
    if mixture.len() != target.len() || enhanced.len() != target.len() {
        return Err(Error::invalid(format!(
            "length mismatch: mixture {}, enhanced {}, target {}",
            mixture.len(),
            enhanced.len(),
            target.len()
        )));
    }
    let input_snr_db = snr_capped(target, mixture)?;
    let output_snr_db = snr_capped(target, enhanced)?;
    Ok(SnrImprovement {
        input_snr_db,
        output_snr_db,
        delta_db: output_snr_db - input_snr_db,
    })
}

/// Compensate a pipeline delay: drop the first `delay` samples of
/// `enhanced` and the last `delay` of the references.
pub fn snr_improvement_delayed(
    mixture: &[f64],
    enhanced: &[f64],
    target: &[f64],
    delay: usize,
) -> Result<SnrImprovement> {
    if enhanced.len() < delay || mixture.len() < delay || target.len() < delay {
        return Err(Error::invalid("signal shorter than the latency"));
    }
    let keep = enhanced.len() - delay;
    if mixture.len() < keep || target.len() < keep {
        return Err(Error::invalid("length mismatch"));
    }
    snr_improvement(&mixture[..keep], &enhanced[delay..], &target[..keep])
}

/// One line of the JSON-lines metric report.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub clip: String,
    #[serde(flatten)]
    pub snr: SnrImprovement,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psa: Option<PsaBreakdown>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig, Waveform};
    use crate::rng::FixtureRng;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn spec_of(x: Vec<f64>) -> Spectrogram {
        stft(&Waveform::new(x, 16000).unwrap(), StftConfig::default()).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut r = FixtureRng::new(seed);
        (0..len).map(|_| r.uniform(-0.5, 0.5)).collect()
    }

    fn filled(t: usize, v: f64) -> Vec<MaskFrame> {
        vec![MaskFrame::filled(257, v).unwrap(); t]
    }

    #[test]
    fn perfect_estimate_is_zero() {
        let s = spec_of(noise(2000, 1));
        let l = psa_loss(&filled(s.frames(), 1.0), &s, &s).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn zero_mask_gives_clean_power() {
        let y = spec_of(noise(2000, 1));
        let s = spec_of(noise(2000, 2));
        let l = psa_loss(&filled(y.frames(), 0.0), &y, &s).unwrap();
        let power = s.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / s.data().len() as f64;
        assert!((l.mag_mse - power).abs() < 1e-12 * power.max(1.0));
        assert!((l.complex_mse - power).abs() < 1e-12 * power.max(1.0));
        assert_eq!(l.total, l.mag_mse + l.complex_mse);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let y = spec_of(noise(3000, 3));
        let s = spec_of(noise(3000, 4));
        let mut r = FixtureRng::new(5);
        let mask: Vec<MaskFrame> = (0..y.frames())
            .map(|_| MaskFrame::new((0..257).map(|_| r.unit_f64()).collect()).unwrap())
            .collect();
        let (mut m, mut c, mut n) = (0.0, 0.0, 0usize);
        for t in 0..y.frames() {
            for f in 0..257 {
                let g = mask[t].values()[f];
                let yv = y.frame(t)[f];
                let est = Complex64::new(g * yv.re, g * yv.im);
                let sv = s.frame(t)[f];
                let dm = (est.re * est.re + est.im * est.im).sqrt()
                    - (sv.re * sv.re + sv.im * sv.im).sqrt();
                m += dm * dm;
                c += (est.re - sv.re).powi(2) + (est.im - sv.im).powi(2);
                n += 1;
            }
        }
        let l = psa_loss(&mask, &y, &s).unwrap();
        assert!((l.mag_mse - m / n as f64).abs() < 1e-9);
        assert!((l.complex_mse - c / n as f64).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let a = spec_of(noise(2000, 1));
        let b = spec_of(noise(2400, 1));
        assert!(psa_loss(&filled(a.frames(), 1.0), &a, &b).is_err());
        assert!(psa_loss(&filled(1, 1.0), &a, &a).is_err());
    }

    #[test]
    fn snr_improvement_contracts() {
        let t = noise(4000, 1);
        let n = noise(4000, 2);
        let mix: Vec<f64> = t.iter().zip(&n).map(|(a, b)| a + b).collect();
        let perfect = snr_improvement(&mix, &t, &t).unwrap();
        assert_eq!(perfect.output_snr_db, SNR_CAP_DB);
        let same = snr_improvement(&mix, &mix, &t).unwrap();
        assert_eq!(same.delta_db, 0.0);
        assert!(snr_improvement(&mix, &t[..10], &t).is_err());
    }

    #[test]
    fn delayed_alignment() {
        let t = noise(4000, 1);
        let mut delayed = vec![0.0; 100];
        delayed.extend_from_slice(&t[..3900]);
        let r = snr_improvement_delayed(&t, &delayed, &t, 100).unwrap();
        assert_eq!(r.output_snr_db, SNR_CAP_DB);
    }

    #[test]
    fn record_json_shape() {
        let rec = MetricRecord {
            clip: "a".into(),
            snr: SnrImprovement {
                input_snr_db: 0.0,
                output_snr_db: 3.0,
                delta_db: 3.0,
            },
            psa: None,
        };
        let v: serde_json::Value = serde_json::from_str(&rec.to_json_line()).unwrap();
        assert_eq!(v["delta_db"], 3.0);
        assert!(v.get("psa").is_none());
    }

    proptest! {
        #[test]
        fn loss_scales_quadratically(seed in 0u64..200, k in 0.1f64..10.0) {
            let y = spec_of(noise(1200, seed));
            let s = spec_of(noise(1200, seed + 1));
            let scale = |sp: &Spectrogram| {
                Spectrogram::from_frames(sp.config, sp.frames(), sp.data().iter().map(|c| c * k).collect()).unwrap()
            };
            let mut r = FixtureRng::new(seed);
            let mask: Vec<MaskFrame> = (0..y.frames())
                .map(|_| MaskFrame::new((0..257).map(|_| r.unit_f64()).collect()).unwrap())
                .collect();
            let a = psa_loss(&mask, &y, &s).unwrap();
            let b = psa_loss(&mask, &scale(&y), &scale(&s)).unwrap();
            prop_assert!((b.mag_mse - k * k * a.mag_mse).abs() <= 1e-9 * b.mag_mse.max(1.0));
            prop_assert!((b.complex_mse - k * k * a.complex_mse).abs() <= 1e-9 * b.complex_mse.max(1.0));
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..200) {
            let y = spec_of(noise(1000, seed));
            let s = spec_of(noise(1000, seed + 7));
            let l = psa_loss(&ideal_mask(&y, &s).unwrap(), &y, &s).unwrap();
            prop_assert!(l.mag_mse >= 0.0 && l.complex_mse >= 0.0);
        }
    }
}
