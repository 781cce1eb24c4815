//! Deterministic source signals: pseudo-speech and pink-ish noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Highest harmonic frequency kept, relative to Nyquist.
const HARMONIC_CEILING: f64 = 0.95;
/// Flat harmonic amplitude under the formants, about 30 dB below a peak.
const SPECTRAL_FLOOR: f64 = 0.03;

struct Formant {
    center: f64,
    bandwidth: f64,
    depth: f64,
    rate: f64,
    phase: f64,
}

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

pub fn sample_count(duration_s: f64, sample_rate: f64) -> usize {
    (duration_s * sample_rate).round() as usize
}

/// Pseudo-speech: a harmonic train with drifting F0 (90–220 Hz) shaped by
/// 2–3 wandering formants and a syllabic envelope (3–6 Hz), unit RMS.
pub fn synth_speech_like(seed: u64, duration_s: f64, sample_rate: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count(duration_s, sample_rate).max(1);

    let f0_center = rng.random_range(110.0..190.0);
    let f0_depth = rng.random_range(10.0..30.0);
    let f0_rate = rng.random_range(0.5..2.0);
    let f0_phase = rng.random_range(0.0..2.0 * PI);
    let formant_ranges = [(300.0, 800.0), (900.0, 2200.0), (2300.0, 3300.0)];
    let formant_count = rng.random_range(2..=3);
    let formants: Vec<Formant> = formant_ranges[..formant_count]
        .iter()
        .map(|&(lo, hi)| Formant {
            center: rng.random_range(lo..hi),
            bandwidth: rng.random_range(80.0..160.0),
            depth: rng.random_range(0.05..0.2),
            rate: rng.random_range(0.5..3.0),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let syllable_rate = rng.random_range(3.0..6.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let max_harmonics = (sample_rate / 2.0 / 90.0) as usize;
    let harmonic_phase: Vec<f64> = (0..max_harmonics)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    let ceiling = HARMONIC_CEILING * sample_rate / 2.0;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sample_rate;
        let f0 =
            (f0_center + f0_depth * (2.0 * PI * f0_rate * t + f0_phase).sin()).clamp(90.0, 220.0);
        phase += 2.0 * PI * f0 / sample_rate;
        let centers: Vec<f64> = formants
            .iter()
            .map(|f| f.center * (1.0 + f.depth * (2.0 * PI * f.rate * t + f.phase).sin()))
            .collect();
        let mut s = 0.0;
        for (k, hp) in harmonic_phase.iter().enumerate() {
            let fk = (k + 1) as f64 * f0;
            if fk >= ceiling {
                break;
            }
            let shape: f64 = formants
                .iter()
                .zip(&centers)
                .map(|(f, &c)| (-((fk - c) / f.bandwidth).powi(2)).exp())
                .sum();
            let amp = shape + SPECTRAL_FLOOR;
            s += amp * ((k + 1) as f64 * phase + hp).sin();
        }
        let env = 0.1 + 0.9 * 0.5 * (1.0 - (2.0 * PI * syllable_rate * t + syllable_phase).cos());
        out.push(env * s);
    }
    normalize_rms(&mut out);
    out
}

/// Pink-ish noise (three-pole approximation of a 1/f spectrum), unit RMS.
pub fn pink_noise(seed: u64, duration_s: f64, sample_rate: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count(duration_s, sample_rate).max(1);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    normalize_rms(&mut out);
    out
}

/// White Gaussian noise, unit RMS.
pub fn white_noise(seed: u64, duration_s: f64, sample_rate: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample_count(duration_s, sample_rate).max(1);
    let mut out: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize_rms(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Peak of the normalized cross-correlation over all lags.
    fn xcorr_peak(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as isize;
        let norm =
            (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
        (-(n - 1)..n)
            .map(|lag| {
                let mut s = 0.0;
                for i in 0..n {
                    let j = i + lag;
                    if (0..n).contains(&j) {
                        s += a[i as usize] * b[j as usize];
                    }
                }
                (s / norm).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn speech_is_deterministic_and_unit_rms() {
        let a = synth_speech_like(3, 0.5, 8000.0);
        let b = synth_speech_like(3, 0.5, 8000.0);
        assert_eq!(a.len(), 4000);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!((rms(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn different_seeds_are_weakly_correlated() {
        for (s1, s2) in [(1, 2), (10, 11), (100, 7)] {
            let a = synth_speech_like(s1, 0.5, 8000.0);
            let b = synth_speech_like(s2, 0.5, 8000.0);
            let peak = xcorr_peak(&a, &b);
            assert!(peak < 0.5, "seeds {s1},{s2}: {peak}");
        }
    }

    #[test]
    fn noise_is_unit_rms_and_tilted() {
        let x = pink_noise(4, 1.0, 8000.0);
        assert!((rms(&x) - 1.0).abs() < 1e-9);
        // More energy in the low band than the high band.
        let lo: f64 = x.windows(2).map(|w| (w[0] + w[1]).powi(2)).sum();
        let hi: f64 = x.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum();
        assert!(lo > 2.0 * hi);
        let w = white_noise(4, 1.0, 8000.0);
        assert!((rms(&w) - 1.0).abs() < 1e-9);
    }
}
