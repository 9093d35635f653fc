//! Deterministic synthetic EEG generator with stage-dependent spectra.
//!
//! Each stage gets a characteristic frequency signature so that a model
//! (and a plain DFT band-power probe) can tell them apart:
//!
//! * **W**   — mixed alpha/beta sinusoids, 8–30 Hz, moderate amplitude
//! * **N1**  — theta sinusoids, 4–8 Hz, medium amplitude
//! * **N2**  — 10 Hz background plus two 12–14 Hz spindle bursts under a
//!   Hann envelope
//! * **N3**  — high-amplitude delta, 0.5–4 Hz
//! * **REM** — low-amplitude theta with a light beta overlay
//!
//! White Gaussian noise is added at a configurable SNR, every sample is
//! quantized through `f32` (so EPB round-trips bit-exactly), and the whole
//! dataset is a pure function of the config — same seed, same bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal_io::{EpochDataset, SleepStage, SAMPLES_PER_EPOCH, SAMPLE_RATE_HZ};

/// Parameters of the synthetic cohort.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub subjects: usize,
    pub epochs_per_subject: usize,
    /// Stage priors in wire-code order (W, N1, N2, N3, REM); renormalized
    /// with a warning when they do not sum to 1.
    pub priors: [f64; 5],
    pub seed: u64,
    /// Signal-to-noise ratio of the additive Gaussian noise, in dB.
    pub snr_db: f64,
    /// Per-epoch uniform amplitude jitter, as a fraction (0.15 = ±15%).
    pub amplitude_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 10,
            epochs_per_subject: 400,
            priors: [0.196, 0.066, 0.421, 0.135, 0.182],
            seed: 42,
            snr_db: 12.0,
            amplitude_jitter: 0.15,
        }
    }
}

fn add_sine(buf: &mut [f64], freq_hz: f64, amp: f64, phase: f64) {
    let w = 2.0 * std::f64::consts::PI * freq_hz / SAMPLE_RATE_HZ as f64;
    for (t, v) in buf.iter_mut().enumerate() {
        *v += amp * (w * t as f64 + phase).sin();
    }
}

/// Spindle burst: a sinusoid under a Hann envelope centered at `center`.
fn add_burst(buf: &mut [f64], freq_hz: f64, amp: f64, phase: f64, center: usize, width: usize) {
    let w = 2.0 * std::f64::consts::PI * freq_hz / SAMPLE_RATE_HZ as f64;
    let start = center.saturating_sub(width / 2);
    let end = (start + width).min(buf.len());
    for t in start..end {
        let u = (t - start) as f64 / (width.max(2) - 1) as f64;
        let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * u).cos());
        buf[t] += amp * hann * (w * t as f64 + phase).sin();
    }
}

fn stage_signal(stage: SleepStage, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf = vec![0.0; SAMPLES_PER_EPOCH];
    match stage {
        SleepStage::Wake => {
            let f1 = rng.random_range(8.0..13.0);
            let f2 = rng.random_range(13.0..22.0);
            let f3 = rng.random_range(22.0..30.0);
            let (p1, p2, p3) = (rng_phase(rng), rng_phase(rng), rng_phase(rng));
            add_sine(&mut buf, f1, 9.0, p1);
            add_sine(&mut buf, f2, 7.0, p2);
            add_sine(&mut buf, f3, 5.0, p3);
        }
        SleepStage::N1 => {
            let f1 = rng.random_range(4.0..6.0);
            let f2 = rng.random_range(6.0..8.0);
            let (p1, p2) = (rng_phase(rng), rng_phase(rng));
            add_sine(&mut buf, f1, 15.0, p1);
            add_sine(&mut buf, f2, 12.0, p2);
        }
        SleepStage::N2 => {
            let (p1, p2) = (rng_phase(rng), rng_phase(rng));
            add_sine(&mut buf, 10.0, 12.0, p1);
            add_sine(&mut buf, rng.random_range(1.0..2.5), 10.0, p2);
            // Two spindles clear of the epoch edges.
            let width = (0.7 * SAMPLE_RATE_HZ as f64) as usize;
            for _ in 0..2 {
                let f = rng.random_range(12.0..14.0);
                let c = rng.random_range(width..SAMPLES_PER_EPOCH - width);
                let p = rng_phase(rng);
                add_burst(&mut buf, f, 40.0, p, c, width);
            }
        }
        SleepStage::N3 => {
            let f1 = rng.random_range(0.5..2.0);
            let f2 = rng.random_range(2.0..4.0);
            let (p1, p2) = (rng_phase(rng), rng_phase(rng));
            add_sine(&mut buf, f1, 55.0, p1);
            add_sine(&mut buf, f2, 40.0, p2);
        }
        SleepStage::Rem => {
            let f1 = rng.random_range(4.0..8.0);
            let f2 = rng.random_range(20.0..25.0);
            let (p1, p2) = (rng_phase(rng), rng_phase(rng));
            add_sine(&mut buf, f1, 5.0, p1);
            add_sine(&mut buf, f2, 3.0, p2);
        }
    }
    buf
}

fn rng_phase(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..2.0 * std::f64::consts::PI)
}

/// Generate a synthetic cohort.
pub fn synth_generate(cfg: &SynthConfig) -> Result<EpochDataset> {
    if cfg.subjects == 0 || cfg.epochs_per_subject == 0 {
        return Err(Error::Config("synthetic cohort needs at least one subject and epoch".into()));
    }
    let mut priors = cfg.priors;
    for (i, p) in priors.iter().enumerate() {
        if !p.is_finite() || *p < 0.0 {
            return Err(Error::Config(format!(
                "stage prior {i} is {p}; priors must be finite and non-negative"
            )));
        }
    }
    let total: f64 = priors.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("stage priors sum to zero".into()));
    }
    if (total - 1.0).abs() > 1e-9 {
        log::warn!("stage priors sum to {total}; renormalizing");
        for p in priors.iter_mut() {
            *p /= total;
        }
    }
    if !(0.0..1.0).contains(&cfg.amplitude_jitter) {
        return Err(Error::Config(format!(
            "amplitude jitter {} outside [0, 1)",
            cfg.amplitude_jitter
        )));
    }

    let mut cumulative = [0.0; 5];
    let mut acc = 0.0;
    for (c, p) in cumulative.iter_mut().zip(&priors) {
        acc += p;
        *c = acc;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut ds = EpochDataset::new();
    for s in 0..cfg.subjects {
        let subject = format!("S{s:03}");
        let subject_gain = rng.random_range(0.9..1.1);
        for _ in 0..cfg.epochs_per_subject {
            let u: f64 = rng.random();
            let stage = SleepStage::ALL
                [cumulative.iter().position(|&c| u < c).unwrap_or(4)];
            let mut signal = stage_signal(stage, &mut rng);
            let gain = subject_gain
                * (1.0 + rng.random_range(-cfg.amplitude_jitter..cfg.amplitude_jitter));
            for v in signal.iter_mut() {
                *v *= gain;
            }
            let rms = (signal.iter().map(|v| v * v).sum::<f64>()
                / SAMPLES_PER_EPOCH as f64)
                .sqrt();
            let sigma = rms / 10f64.powf(cfg.snr_db / 20.0);
            for v in signal.iter_mut() {
                *v += sigma * noise_unit.sample(&mut rng);
                // Quantize through f32: the EPB container stores f32, and
                // keeping the in-memory values identical makes round-trips
                // bit-exact.
                *v = *v as f32 as f64;
            }
            ds.push_epoch(&subject, &signal, stage)?;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Power in a frequency band via a direct DFT over the named bins.
    ///
    /// Bin k corresponds to k/30 Hz (3000 samples at 100 Hz), so a band
    /// [lo_hz, hi_hz] covers bins [30*lo, 30*hi].
    fn band_power(x: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
        let n = x.len() as f64;
        let k_lo = (lo_hz * 30.0).round() as usize;
        let k_hi = (hi_hz * 30.0).round() as usize;
        let mut p = 0.0;
        for k in k_lo..=k_hi {
            let w = 2.0 * std::f64::consts::PI * k as f64 / n;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = w * t as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            p += re * re + im * im;
        }
        p
    }

    fn small_cohort() -> EpochDataset {
        synth_generate(&SynthConfig {
            subjects: 2,
            epochs_per_subject: 40,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn first_epoch_of(ds: &EpochDataset, stage: SleepStage) -> Vec<f64> {
        let i = (0..ds.len()).find(|&i| ds.label(i) == stage).expect("stage present");
        ds.epoch(i).to_vec()
    }

    #[test]
    fn stage_spectra_sit_in_their_bands() {
        let ds = small_cohort();
        // N3 is delta-dominated.
        let n3 = first_epoch_of(&ds, SleepStage::N3);
        assert!(band_power(&n3, 0.5, 4.0) > 4.0 * band_power(&n3, 8.0, 30.0));
        assert!(band_power(&n3, 0.5, 4.0) > 4.0 * band_power(&n3, 4.0, 8.0));
        // Wake is alpha/beta-dominated.
        let w = first_epoch_of(&ds, SleepStage::Wake);
        assert!(band_power(&w, 8.0, 30.0) > 4.0 * band_power(&w, 0.5, 4.0));
        // N2 carries spindle-band energy that N1 lacks.
        let n2 = first_epoch_of(&ds, SleepStage::N2);
        let n1 = first_epoch_of(&ds, SleepStage::N1);
        assert!(band_power(&n2, 11.5, 14.5) > 5.0 * band_power(&n1, 11.5, 14.5));
        // N1 is markedly larger than REM at similar frequencies.
        let rem = first_epoch_of(&ds, SleepStage::Rem);
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!(rms(&n1) > 2.0 * rms(&rem), "N1 rms {} vs REM rms {}", rms(&n1), rms(&rem));
    }

    #[test]
    fn empirical_stage_rates_track_the_priors() {
        let cfg = SynthConfig { seed: 1, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.len(), 4000);
        assert_eq!(ds.subject_ids().len(), 10);
        let h = ds.class_histogram();
        for (i, &count) in h.iter().enumerate() {
            let rate = count as f64 / ds.len() as f64;
            assert!(
                (rate - cfg.priors[i]).abs() < 0.02,
                "stage {i} rate {rate} should be near prior {}",
                cfg.priors[i]
            );
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig { subjects: 2, epochs_per_subject: 10, ..SynthConfig::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_are_f32_exact() {
        let ds = small_cohort();
        for i in 0..ds.len() {
            for &v in ds.epoch(i) {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }

    #[test]
    fn priors_are_validated_and_renormalized() {
        let bad = SynthConfig { priors: [0.2, -0.1, 0.4, 0.3, 0.2], ..SynthConfig::default() };
        assert!(synth_generate(&bad).is_err());
        let zero = SynthConfig { priors: [0.0; 5], ..SynthConfig::default() };
        assert!(synth_generate(&zero).is_err());
        // Doubled priors renormalize to the same draw sequence.
        let base = SynthConfig { subjects: 1, epochs_per_subject: 30, ..SynthConfig::default() };
        let mut doubled = base.clone();
        for p in doubled.priors.iter_mut() {
            *p *= 2.0;
        }
        assert_eq!(synth_generate(&base).unwrap(), synth_generate(&doubled).unwrap());
    }
}
