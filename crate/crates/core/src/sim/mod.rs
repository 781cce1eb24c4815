//! Synthetic binaural scenes: pseudo-speech and noise sources rendered
//! through a spherical-head model and mixed at a target SNR.

pub mod dataset;
mod head;
mod source;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    gen_dataset, load_split, synthesize_split, DatasetConfig, Example, Manifest, SceneEntry, Split,
    MANIFEST_FILE,
};
pub use head::{
    filter_centered, model_ild_db, shadow_cutoff_hz, synth_hrir, woodworth_itd, HEAD_RADIUS,
    HRIR_TAPS, ILD_SLOPE_DB, SPEED_OF_SOUND,
};
pub use source::{pink_noise, sample_count, synth_speech_like, white_noise};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
pub const MAX_NOISE_SOURCES: usize = 10;

/// A two-ear signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Binaural {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl Binaural {
    pub fn zeros(len: usize) -> Self {
        Binaural {
            left: vec![0.0; len],
            right: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn add_assign(&mut self, other: &Binaural) {
        for (a, b) in self.left.iter_mut().zip(&other.left) {
            *a += b;
        }
        for (a, b) in self.right.iter_mut().zip(&other.right) {
            *a += b;
        }
    }

    pub fn scaled(&self, g: f64) -> Binaural {
        Binaural {
            left: self.left.iter().map(|v| v * g).collect(),
            right: self.right.iter().map(|v| v * g).collect(),
        }
    }
}

/// Renders a mono source at `azimuth_deg` (same length as the input).
pub fn spatialize(mono: &[f64], azimuth_deg: f64, sample_rate: f64) -> Binaural {
    let (hl, hr) = synth_hrir(azimuth_deg, sample_rate);
    Binaural {
        left: filter_centered(mono, &hl),
        right: filter_centered(mono, &hr),
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Scales both noise channels by one factor so that the left-ear
/// speech-to-noise energy ratio is `snr_db`.
pub fn scale_to_snr(noise: &Binaural, speech_left: &[f64], snr_db: f64) -> Result<Binaural> {
    let en = energy(&noise.left);
    if en <= 0.0 {
        return Err(Error::Scene("noise is silent in the left ear".into()));
    }
    let g = (energy(speech_left) / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(noise.scaled(g))
}

/// Mixes 64-bit `a` and `b` into a new seed.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(a ^ mix(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub speaker_azimuths_deg: Vec<f64>,
    /// Empty for a noise-free scene.
    pub noise_azimuths_deg: Vec<f64>,
    /// Left-ear speech-to-noise ratio; ignored without noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Scene(m));
        if self.sample_rate == 0 || !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return fail(format!(
                "invalid rate {} Hz / duration {} s",
                self.sample_rate, self.duration_s
            ));
        }
        if self.speaker_azimuths_deg.is_empty() {
            return fail("a scene needs at least one speaker".into());
        }
        if self.noise_azimuths_deg.len() > MAX_NOISE_SOURCES {
            return fail(format!(
                "{} noise sources (at most {MAX_NOISE_SOURCES})",
                self.noise_azimuths_deg.len()
            ));
        }
        if !self.noise_azimuths_deg.is_empty() && !self.snr_db.is_finite() {
            return fail(format!("invalid SNR {}", self.snr_db));
        }
        let all: Vec<f64> = self
            .speaker_azimuths_deg
            .iter()
            .chain(&self.noise_azimuths_deg)
            .copied()
            .collect();
        if let Some(a) = all.iter().find(|a| !(a.abs() <= 90.0)) {
            return fail(format!("azimuth {a}° outside [−90, 90]"));
        }
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                return fail(format!("azimuth {a}° used by more than one source"));
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        sample_count(self.duration_s, f64::from(self.sample_rate))
    }
}

/// Ground-truth cues of one source under the head model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceCues {
    pub azimuth_deg: f64,
    pub itd_us: f64,
    pub ild_db: f64,
}

impl SourceCues {
    pub fn at(azimuth_deg: f64) -> Self {
        SourceCues {
            azimuth_deg,
            itd_us: woodworth_itd(azimuth_deg) * 1e6,
            ild_db: model_ild_db(azimuth_deg),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub mixture: Binaural,
    /// Spatialized clean speech, one per speaker.
    pub references: Vec<Binaural>,
    /// Scaled noise sum (zeros for a noise-free scene).
    pub noise: Binaural,
    pub speaker_cues: Vec<SourceCues>,
    pub noise_cues: Vec<SourceCues>,
}

/// Builds a scene; every signal is a function of `spec.seed`.
pub fn make_scene(spec: &SceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    let fs = f64::from(spec.sample_rate);
    let n = spec.samples();
    let references: Vec<Binaural> = spec
        .speaker_azimuths_deg
        .iter()
        .enumerate()
        .map(|(i, &az)| {
            spatialize(
                &synth_speech_like(derive_seed(spec.seed, i as u64), spec.duration_s, fs),
                az,
                fs,
            )
        })
        .collect();
    let mut speech = Binaural::zeros(n);
    for r in &references {
        speech.add_assign(r);
    }
    let noise = if spec.noise_azimuths_deg.is_empty() {
        Binaural::zeros(n)
    } else {
        let mut sum = Binaural::zeros(n);
        for (j, &az) in spec.noise_azimuths_deg.iter().enumerate() {
            let src = pink_noise(derive_seed(spec.seed, 1000 + j as u64), spec.duration_s, fs);
            sum.add_assign(&spatialize(&src, az, fs));
        }
        scale_to_snr(&sum, &speech.left, spec.snr_db)?
    };
    let mut mixture = speech;
    mixture.add_assign(&noise);
    Ok(SceneTruth {
        spec: spec.clone(),
        mixture,
        references,
        noise,
        speaker_cues: spec
            .speaker_azimuths_deg
            .iter()
            .map(|&a| SourceCues::at(a))
            .collect(),
        noise_cues: spec
            .noise_azimuths_deg
            .iter()
            .map(|&a| SourceCues::at(a))
            .collect(),
    })
}
