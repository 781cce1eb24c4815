//! Spherical-head HRIRs: Woodworth ITD, sine-law broadband ILD and a
//! far-ear head-shadow low-pass.

use std::f64::consts::PI;

/// Head radius in metres.
pub const HEAD_RADIUS: f64 = 0.0875;
/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
/// Broadband ILD at ±90°, in dB.
pub const ILD_SLOPE_DB: f64 = 10.0;
/// HRIR length in taps.
pub const HRIR_TAPS: usize = 33;
const CENTER: usize = HRIR_TAPS / 2;
/// Far-ear shadow cutoff at 0° and at ±90°.
const SHADOW_CUTOFF_HZ: (f64, f64) = (4000.0, 1500.0);

/// Interaural time difference in seconds for an azimuth in degrees
/// (positive = source on the left, so the right ear lags).
pub fn woodworth_itd(azimuth_deg: f64) -> f64 {
    let th = azimuth_deg.abs().to_radians();
    azimuth_deg.signum() * (HEAD_RADIUS / SPEED_OF_SOUND) * (th + th.sin())
}

/// Broadband ILD `10·log10(E_left / E_right)` of the head model, in dB.
pub fn model_ild_db(azimuth_deg: f64) -> f64 {
    ILD_SLOPE_DB * azimuth_deg.to_radians().sin()
}

/// Cutoff of the far-ear shadow filter, linear in |θ|.
pub fn shadow_cutoff_hz(azimuth_deg: f64) -> f64 {
    let (c0, c90) = SHADOW_CUTOFF_HZ;
    c0 + (c90 - c0) * azimuth_deg.abs().min(90.0) / 90.0
}

/// Windowed-sinc tap `n` of a filter delaying by `delay` samples relative
/// to the centre tap (Blackman window centred on the delayed peak).
fn sinc_tap(n: f64, delay: f64) -> f64 {
    let x = n - CENTER as f64 - delay;
    let half = CENTER as f64 + 1.0;
    if x.abs() >= half {
        return 0.0;
    }
    let w = 0.42 + 0.5 * (PI * x / half).cos() + 0.08 * (2.0 * PI * x / half).cos();
    let s = if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    };
    w * s
}

/// Fractional-delay filter with unit DC gain.
fn fractional_delay(delay: f64) -> Vec<f64> {
    let mut h: Vec<f64> = (0..HRIR_TAPS).map(|n| sinc_tap(n as f64, delay)).collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Zero-phase one-pole low-pass (the causal pole run forwards and
/// backwards), convolved into `h` and rescaled to keep the energy of `h`.
/// Running the pole both ways keeps the shadow from adding group delay
/// that would bias the ITD.
fn apply_shadow(h: &[f64], cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let a = (-2.0 * PI * cutoff_hz / sample_rate).exp();
    let reach = CENTER as isize;
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|j| a.powi(j.unsigned_abs() as i32))
        .collect();
    let mut out = vec![0.0; h.len()];
    for (n, o) in out.iter_mut().enumerate() {
        for (j, k) in kernel.iter().enumerate() {
            let m = n as isize + j as isize - reach;
            if (0..h.len() as isize).contains(&m) {
                *o += k * h[m as usize];
            }
        }
    }
    let e_in: f64 = h.iter().map(|v| v * v).sum();
    let e_out: f64 = out.iter().map(|v| v * v).sum();
    let g = (e_in / e_out).sqrt();
    out.iter_mut().for_each(|v| *v *= g);
    out
}

/// Left and right HRIRs (`HRIR_TAPS` each, centre tap = zero delay).
pub fn synth_hrir(azimuth_deg: f64, sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let half_itd = 0.5 * woodworth_itd(azimuth_deg) * sample_rate;
    let half_ild = 0.5 * model_ild_db(azimuth_deg);
    let gain = |db: f64| 10f64.powf(db / 20.0);
    let mut left = fractional_delay(-half_itd);
    let mut right = fractional_delay(half_itd);
    let cutoff = shadow_cutoff_hz(azimuth_deg);
    if azimuth_deg > 0.0 {
        right = apply_shadow(&right, cutoff, sample_rate);
    } else if azimuth_deg < 0.0 {
        left = apply_shadow(&left, cutoff, sample_rate);
    }
    let (gl, gr) = (gain(half_ild), gain(-half_ild));
    left.iter_mut().for_each(|v| *v *= gl);
    right.iter_mut().for_each(|v| *v *= gr);
    (left, right)
}

/// Same-length filtering with the centre tap as the zero-delay reference.
pub fn filter_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let c = h.len() / 2;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            h.iter()
                .enumerate()
                .map(|(k, hk)| {
                    let j = i + c as isize - k as isize;
                    if (0..n).contains(&j) {
                        hk * x[j as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}
