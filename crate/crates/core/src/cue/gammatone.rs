//! Fourth-order gammatone filterbank on an ERB-rate grid.
//!
//! Each channel shifts the signal down by its center frequency, runs it
//! through four identical complex one-pole low-pass stages and shifts back.
//! That is the recursive form of a sampled gammatone with bandwidth
//! `1.019·ERB(fc)`, normalized to unit gain at the center frequency.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 32;
pub const LOW_HZ: f64 = 80.0;
pub const HIGH_HZ: f64 = 3770.0;
pub const ORDER: usize = 4;
/// Nominal frequencies of the channels used for per-channel ILD.
pub const ILD_TARGETS_HZ: [f64; 3] = [2070.0, 3080.0, 3750.0];

/// Equivalent rectangular bandwidth in Hz.
pub fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `f`).
pub fn erb_rate(f: f64) -> f64 {
    21.4 * (4.37 * f / 1000.0 + 1.0).log10()
}

pub fn erb_rate_inverse(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

#[derive(Clone, Debug)]
pub struct GammatoneBank {
    sample_rate: f64,
    centers: Vec<f64>,
    /// Per-stage pole radius.
    poles: Vec<f64>,
    /// Samples removed from the start of each channel so that the envelope
    /// of the impulse response peaks at sample 0.
    delays: Vec<usize>,
    ild_channels: [usize; 3],
}

impl GammatoneBank {
    pub fn new(sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 2.0 * HIGH_HZ) {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} Hz cannot represent a {HIGH_HZ} Hz channel"
            )));
        }
        let (lo, hi) = (erb_rate(LOW_HZ), erb_rate(HIGH_HZ));
        let centers: Vec<f64> = (0..CHANNELS)
            .map(|k| erb_rate_inverse(lo + (hi - lo) * k as f64 / (CHANNELS - 1) as f64))
            .collect();
        let poles: Vec<f64> = centers
            .iter()
            .map(|&f| (-2.0 * PI * 1.019 * erb(f) / sample_rate).exp())
            .collect();
        // Envelope of the cascade impulse response is C(n+3, 3)·aⁿ, which
        // stops growing once a(n+4)/(n+1) ≤ 1.
        let delays = poles
            .iter()
            .map(|&a| ((4.0 * a - 1.0) / (1.0 - a)).ceil().max(0.0) as usize)
            .collect();
        let nearest = |target: f64| {
            (0..CHANNELS)
                .min_by(|&i, &j| {
                    (centers[i] - target)
                        .abs()
                        .total_cmp(&(centers[j] - target).abs())
                })
                .unwrap()
        };
        let ild_channels = ILD_TARGETS_HZ.map(nearest);
        Ok(GammatoneBank {
            sample_rate,
            centers,
            poles,
            delays,
            ild_channels,
        })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channels(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    /// Channels nearest 2.07, 3.08 and 3.75 kHz.
    pub fn ild_channels(&self) -> [usize; 3] {
        self.ild_channels
    }

    /// Channels below `cutoff_hz`.
    pub fn channels_below(&self, cutoff_hz: f64) -> Vec<usize> {
        (0..self.channels())
            .filter(|&c| self.centers[c] < cutoff_hz)
            .collect()
    }

    /// Filters `x` into `[channels][T]`.
    pub fn filter(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.channels())
            .map(|c| self.filter_channel(x, c))
            .collect()
    }

    pub fn filter_channel(&self, x: &[f64], channel: usize) -> Vec<f64> {
        let w = 2.0 * PI * self.centers[channel] / self.sample_rate;
        let a = self.poles[channel];
        let gain = 1.0 - a;
        let delay = self.delays[channel];
        let mut state = [(0.0f64, 0.0f64); ORDER];
        let mut out = vec![0.0; x.len()];
        for t in 0..x.len() + delay {
            let v = x.get(t).copied().unwrap_or(0.0);
            let (s, c) = (w * t as f64).sin_cos();
            let mut re = v * c;
            let mut im = -v * s;
            for st in &mut state {
                st.0 = gain * re + a * st.0;
                st.1 = gain * im + a * st.1;
                re = st.0;
                im = st.1;
            }
            if t >= delay {
                out[t - delay] = 2.0 * (re * c - im * s);
            }
        }
        out
    }
}
