//! Interaural cue evaluation: gammatone front end, per-unit ITD and ILD,
//! histogram-mode utterance summaries, frame-level azimuth, and the
//! separation metrics reported alongside them.

mod gammatone;

pub use gammatone::{
    erb, erb_rate, erb_rate_inverse, GammatoneBank, CHANNELS, HIGH_HZ, ILD_TARGETS_HZ, LOW_HZ,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::loss::{si_snr_db, snr_db, DEFAULT_EPSILON};
use crate::sim::woodworth_itd;
use crate::sim::Binaural;

pub const FRAME_S: f64 = 0.020;
pub const HOP_S: f64 = 0.010;
pub const MAX_LAG_S: f64 = 1e-3;
/// Units whose summed ear energy is below this are treated as silent.
pub const ENERGY_FLOOR: f64 = 1e-10;
/// Units more than this far below the loudest unit are left out.
pub const QUALIFY_DB: f64 = 40.0;
/// ITD is taken only from channels below this frequency.
pub const ITD_CUTOFF_HZ: f64 = 1500.0;
pub const ITD_BINS: usize = 500;
pub const ITD_RANGE_US: f64 = 1000.0;
pub const ILD_BINS: usize = 40;
pub const ILD_RANGE_DB: f64 = 20.0;

/// Cues of one time-frequency unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unit {
    /// Positive when the right ear lags. `None` when the correlation
    /// maximum sits on the edge of the lag range, i.e. there is no peak
    /// within it.
    pub itd_us: Option<f64>,
    /// `10·log10(E_left/E_right)`.
    pub ild_db: f64,
    pub energy: f64,
}

/// Per-unit cues, `[frames × channels]`. Silent units, and units that
/// overlap a channel's compensation delay at the end of the signal, are `None`.
#[derive(Clone, Debug)]
pub struct FrameCues {
    pub frames: usize,
    pub channels: usize,
    pub units: Vec<Option<Unit>>,
}

impl FrameCues {
    pub fn unit(&self, frame: usize, channel: usize) -> Option<&Unit> {
        self.units[frame * self.channels + channel].as_ref()
    }

    /// Energy a unit needs to enter the histograms.
    pub fn qualifying_energy(&self) -> f64 {
        let max = self
            .units
            .iter()
            .flatten()
            .map(|u| u.energy)
            .fold(0.0, f64::max);
        (max * 10f64.powf(-QUALIFY_DB / 10.0)).max(ENERGY_FLOOR)
    }

    fn qualified(&self, frame: usize, channel: usize, threshold: f64) -> Option<&Unit> {
        self.unit(frame, channel).filter(|u| u.energy >= threshold)
    }
}

/// Fixed-range histogram. Values outside the range are dropped.
pub fn histogram_mode(values: &[f64], lo: f64, hi: f64, bins: usize) -> Option<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut any = false;
    for &v in values {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
        any = true;
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = b;
        }
    }
    Some(lo + (best as f64 + 0.5) * width)
}

/// Inverts the Woodworth ITD by linear interpolation in a 1° table,
/// clamping to ±90°.
pub fn itd_to_azimuth(itd_us: f64) -> f64 {
    let table: Vec<f64> = (0..=180)
        .map(|i| woodworth_itd(i as f64 - 90.0) * 1e6)
        .collect();
    if itd_us <= table[0] {
        return -90.0;
    }
    if itd_us >= table[180] {
        return 90.0;
    }
    let i = table.partition_point(|&v| v <= itd_us).clamp(1, 180);
    let (a, b) = (table[i - 1], table[i]);
    (i - 1) as f64 - 90.0 + (itd_us - a) / (b - a)
}

/// Whole-signal `10·log10(E_left/E_right)`.
pub fn broadband_ild_db(sig: &Binaural) -> Result<f64> {
    let (l, r) = (energy(&sig.left), energy(&sig.right));
    if l < ENERGY_FLOOR || r < ENERGY_FLOOR {
        return Err(Error::UndefinedCue("broadband ILD of a silent ear".into()));
    }
    Ok(10.0 * (l / r).log10())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Utterance-level cues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cues {
    pub itd_us: f64,
    /// At the three designated ILD channels.
    pub ild_db: [f64; 3],
    /// One entry per frame; `None` for frames without qualifying units.
    pub azimuth_deg: Vec<Option<f64>>,
}

/// Absolute cue differences between an estimate and its reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueErrors {
    pub itd_us: f64,
    pub ild_db: [f64; 3],
    pub azimuth_deg: f64,
}

/// Improvement of an estimate over the mixture, averaged over both ears.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepMetrics {
    pub delta_snr_db: f64,
    pub delta_si_snr_db: f64,
}

/// Cue estimator bound to a filterbank.
#[derive(Clone, Debug)]
pub struct CueAnalyzer {
    bank: GammatoneBank,
    itd_channels: Vec<usize>,
}

impl CueAnalyzer {
    pub fn new(sample_rate: f64) -> Result<Self> {
        let bank = GammatoneBank::new(sample_rate)?;
        let itd_channels = bank.channels_below(ITD_CUTOFF_HZ);
        Ok(CueAnalyzer { bank, itd_channels })
    }

    pub fn bank(&self) -> &GammatoneBank {
        &self.bank
    }

    pub fn itd_channels(&self) -> &[usize] {
        &self.itd_channels
    }

    pub fn frame_cues(&self, sig: &Binaural) -> Result<FrameCues> {
        if sig.left.len() != sig.right.len() {
            return Err(shape_err!(
                "ears have {} and {} samples",
                sig.left.len(),
                sig.right.len()
            ));
        }
        let fs = self.bank.sample_rate();
        let frame = (FRAME_S * fs).round() as usize;
        let hop = (HOP_S * fs).round() as usize;
        let max_lag = (MAX_LAG_S * fs).round() as usize;
        let t = sig.len();
        let frames = if t < frame { 0 } else { (t - frame) / hop + 1 };
        let channels = self.bank.channels();
        let mut units = vec![None; frames * channels];
        for c in 0..channels {
            let l = self.bank.filter_channel(&sig.left, c);
            let r = self.bank.filter_channel(&sig.right, c);
            // Near the end the delay-compensated output is computed from
            // zero padding rather than signal; those units are dropped.
            let usable = t.saturating_sub(self.bank.delays()[c]);
            for f in (0..frames).take_while(|f| f * hop + frame <= usable) {
                units[f * channels + c] = unit_cues(&l, &r, f * hop, frame, max_lag, fs);
            }
        }
        Ok(FrameCues {
            frames,
            channels,
            units,
        })
    }

    /// Histogram-mode ITD over qualifying low-frequency units.
    pub fn utterance_itd(&self, cues: &FrameCues) -> Result<f64> {
        let threshold = cues.qualifying_energy();
        let values: Vec<f64> = (0..cues.frames)
            .flat_map(|f| {
                self.itd_channels
                    .iter()
                    .filter_map(move |&c| cues.qualified(f, c, threshold))
            })
            .filter_map(|u| u.itd_us)
            .collect();
        histogram_mode(&values, -ITD_RANGE_US, ITD_RANGE_US, ITD_BINS)
            .ok_or_else(|| Error::UndefinedCue("no qualifying low-frequency units for ITD".into()))
    }

    /// Histogram-mode ILD of one designated channel.
    pub fn utterance_ild(&self, cues: &FrameCues, channel: usize) -> Result<f64> {
        if !self.bank.ild_channels().contains(&channel) {
            return Err(Error::Usage(format!(
                "channel {channel} is not an ILD channel"
            )));
        }
        let threshold = cues.qualifying_energy();
        let values: Vec<f64> = (0..cues.frames)
            .filter_map(|f| cues.qualified(f, channel, threshold))
            .map(|u| u.ild_db)
            .collect();
        histogram_mode(&values, -ILD_RANGE_DB, ILD_RANGE_DB, ILD_BINS).ok_or_else(|| {
            Error::UndefinedCue(format!("no qualifying units in channel {channel} for ILD"))
        })
    }

    /// Per-frame azimuth from the energy-weighted median low-frequency ITD.
    pub fn azimuth_frames(&self, cues: &FrameCues) -> Vec<Option<f64>> {
        let threshold = cues.qualifying_energy();
        (0..cues.frames)
            .map(|f| {
                let mut units: Vec<(f64, f64)> = self
                    .itd_channels
                    .iter()
                    .filter_map(|&c| cues.qualified(f, c, threshold))
                    .filter_map(|u| u.itd_us.map(|itd| (itd, u.energy)))
                    .collect();
                weighted_median(&mut units).map(itd_to_azimuth)
            })
            .collect()
    }

    pub fn cues(&self, sig: &Binaural) -> Result<Cues> {
        let fc = self.frame_cues(sig)?;
        let itd_us = self.utterance_itd(&fc)?;
        let [a, b, c] = self.bank.ild_channels();
        let ild_db = [
            self.utterance_ild(&fc, a)?,
            self.utterance_ild(&fc, b)?,
            self.utterance_ild(&fc, c)?,
        ];
        Ok(Cues {
            itd_us,
            ild_db,
            azimuth_deg: self.azimuth_frames(&fc),
        })
    }

    pub fn cue_errors(&self, est: &Binaural, reference: &Binaural) -> Result<CueErrors> {
        if est.len() != reference.len() {
            return Err(shape_err!(
                "estimate has {} samples, reference {}",
                est.len(),
                reference.len()
            ));
        }
        let (e, r) = (self.cues(est)?, self.cues(reference)?);
        Ok(CueErrors {
            itd_us: (e.itd_us - r.itd_us).abs(),
            ild_db: [0, 1, 2].map(|k| (e.ild_db[k] - r.ild_db[k]).abs()),
            azimuth_deg: mean_azimuth_error(&e.azimuth_deg, &r.azimuth_deg)?,
        })
    }
}

/// Mean absolute difference over frames where both tracks are defined.
pub fn mean_azimuth_error(est: &[Option<f64>], reference: &[Option<f64>]) -> Result<f64> {
    let diffs: Vec<f64> = est
        .iter()
        .zip(reference)
        .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
        .collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedCue(
            "no frame has an azimuth in both signals".into(),
        ));
    }
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Median of `(value, weight)` pairs.
fn weighted_median(units: &mut [(f64, f64)]) -> Option<f64> {
    if units.is_empty() {
        return None;
    }
    units.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = units.iter().map(|u| u.1).sum();
    let mut acc = 0.0;
    for &(v, w) in units.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return Some(v);
        }
    }
    units.last().map(|u| u.0)
}

fn unit_cues(
    l: &[f64],
    r: &[f64],
    start: usize,
    len: usize,
    max_lag: usize,
    fs: f64,
) -> Option<Unit> {
    let lw = &l[start..start + len];
    let rw = &r[start..start + len];
    let (el, er) = (energy(lw), energy(rw));
    if el + er < ENERGY_FLOOR || el == 0.0 || er == 0.0 {
        return None;
    }
    // Normalized correlation of the left frame with the right channel
    // shifted by lag; samples outside the signal count as zero.
    let corr: Vec<f64> = (-(max_lag as isize)..=max_lag as isize)
        .map(|lag| {
            let (mut s, mut ea, mut eb) = (0.0, 0.0, 0.0);
            for (i, &a) in lw.iter().enumerate() {
                let j = (start + i) as isize + lag;
                if j >= 0 && (j as usize) < r.len() {
                    let b = r[j as usize];
                    s += a * b;
                    ea += a * a;
                    eb += b * b;
                }
            }
            if ea > 0.0 && eb > 0.0 {
                s / (ea * eb).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut k = 0;
    for (i, &v) in corr.iter().enumerate() {
        if v > corr[k] {
            k = i;
        }
    }
    let itd_us = (k > 0 && k + 1 < corr.len()).then(|| {
        let mut lag = k as f64 - max_lag as f64;
        let (a, b, c) = (corr[k - 1], corr[k], corr[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            lag += 0.5 * (a - c) / denom;
        }
        lag / fs * 1e6
    });
    Some(Unit {
        itd_us,
        ild_db: 10.0 * (el / er).log10(),
        energy: el + er,
    })
}

/// ΔSNR and ΔSI-SNR of `est` over `mixture` against `reference`, averaged
/// over ears.
pub fn sep_metrics(est: &Binaural, reference: &Binaural, mixture: &Binaural) -> Result<SepMetrics> {
    if est.len() != reference.len() || mixture.len() != reference.len() {
        return Err(shape_err!(
            "lengths differ: estimate {}, reference {}, mixture {}",
            est.len(),
            reference.len(),
            mixture.len()
        ));
    }
    let eps = DEFAULT_EPSILON;
    let mut d_snr = 0.0;
    let mut d_si = 0.0;
    for (e, r, m) in [
        (&est.left, &reference.left, &mixture.left),
        (&est.right, &reference.right, &mixture.right),
    ] {
        d_snr += snr_db(e, r, eps)? - snr_db(m, r, eps)?;
        d_si += si_snr_db(e, r, eps)? - si_snr_db(m, r, eps)?;
    }
    Ok(SepMetrics {
        delta_snr_db: d_snr / 2.0,
        delta_si_snr_db: d_si / 2.0,
    })
}
