//! Train/valid/test scene sets written as WAV files plus a JSON manifest.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, make_scene, SceneSpec, SceneTruth, SourceCues, MAX_NOISE_SOURCES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub speakers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Noise sources per scene are drawn uniformly from this inclusive
    /// range; `[0, 0]` gives noise-free scenes.
    pub noise_count: [usize; 2],
    pub snr_db: [f64; 2],
    /// Azimuths are drawn from multiples of this step within ±90°.
    pub azimuth_step_deg: f64,
    /// Smallest azimuth difference between two speakers.
    pub min_speaker_separation_deg: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            duration_s: 0.5,
            speakers: 2,
            train: 8,
            valid: 2,
            test: 2,
            noise_count: [0, 0],
            snr_db: [-10.0, 10.0],
            azimuth_step_deg: 5.0,
            min_speaker_separation_deg: 10.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return fail("sample_rate and duration_s must be positive".into());
        }
        if self.speakers == 0 {
            return fail("speakers must be at least 1".into());
        }
        let [lo, hi] = self.noise_count;
        if lo > hi || hi > MAX_NOISE_SOURCES {
            return fail(format!(
                "noise_count range {lo}..={hi} must be ordered and at most {MAX_NOISE_SOURCES}"
            ));
        }
        if !(self.snr_db[0] <= self.snr_db[1]) {
            return fail(format!("snr_db range {:?} must be ordered", self.snr_db));
        }
        if !(self.azimuth_step_deg > 0.0 && self.azimuth_step_deg <= 90.0) {
            return fail(format!(
                "azimuth_step_deg {} must be in (0, 90]",
                self.azimuth_step_deg
            ));
        }
        let slots = self.grid().len();
        if self.speakers + hi > slots {
            return fail(format!(
                "{} sources do not fit on {slots} azimuth slots",
                self.speakers + hi
            ));
        }
        let needed = (self.speakers.saturating_sub(1)) as f64 * self.min_speaker_separation_deg;
        if needed > 180.0 {
            return fail(format!(
                "{} speakers cannot be {}° apart",
                self.speakers, self.min_speaker_separation_deg
            ));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<f64> {
        let k = (90.0 / self.azimuth_step_deg).floor() as i64;
        (-k..=k).map(|i| i as f64 * self.azimuth_step_deg).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    /// Global scene index of the first scene of `split`; splits occupy
    /// consecutive, disjoint index ranges.
    fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Valid => self.train,
            Split::Test => self.train + self.valid,
        }
    }

    /// Spec of scene `index` within `split`.
    pub fn scene_spec(&self, split: Split, index: usize) -> SceneSpec {
        let seed = derive_seed(self.seed, (self.offset(split) + index) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        let grid = self.grid();
        let speakers = loop {
            let mut pick: Vec<f64> = grid
                .choose_multiple(&mut rng, self.speakers)
                .copied()
                .collect();
            pick.sort_by(f64::total_cmp);
            if pick
                .windows(2)
                .all(|w| w[1] - w[0] >= self.min_speaker_separation_deg - 1e-9)
            {
                pick.shuffle(&mut rng);
                break pick;
            }
        };
        let [lo, hi] = self.noise_count;
        let n_noise = rng.random_range(lo..=hi);
        let free: Vec<f64> = grid
            .iter()
            .copied()
            .filter(|a| !speakers.contains(a))
            .collect();
        let noise: Vec<f64> = free.choose_multiple(&mut rng, n_noise).copied().collect();
        let snr = if n_noise > 0 {
            rng.random_range(self.snr_db[0]..=self.snr_db[1])
        } else {
            0.0
        };
        SceneSpec {
            sample_rate: self.sample_rate,
            duration_s: self.duration_s,
            speaker_azimuths_deg: speakers,
            noise_azimuths_deg: noise,
            snr_db: snr,
            seed,
        }
    }

    pub fn scene_id(split: Split, index: usize) -> String {
        format!("{}-{index:04}", split.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePaths {
    /// Two-channel mixture, relative to the manifest directory.
    pub mixture: String,
    /// One two-channel file per speaker.
    pub references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per source, speakers first, then noise sources.
    pub itd_us: Vec<f64>,
    pub ild_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub paths: ScenePaths,
    /// Speaker azimuths, in reference order.
    pub azimuths_deg: Vec<f64>,
    pub noise_azimuths_deg: Vec<f64>,
    pub noise_count: usize,
    /// `None` for noise-free scenes.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub ground_truth: GroundTruth,
}

impl SceneEntry {
    pub fn speaker_cues(&self) -> Vec<SourceCues> {
        self.azimuths_deg
            .iter()
            .enumerate()
            .map(|(i, &a)| SourceCues {
                azimuth_deg: a,
                itd_us: self.ground_truth.itd_us[i],
                ild_db: self.ground_truth.ild_db[i],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn entry_for(split: Split, index: usize, truth: &SceneTruth) -> SceneEntry {
    let id = DatasetConfig::scene_id(split, index);
    let dir = split.name();
    let cues: Vec<&SourceCues> = truth.speaker_cues.iter().chain(&truth.noise_cues).collect();
    SceneEntry {
        paths: ScenePaths {
            mixture: format!("{dir}/{id}_mix.wav"),
            references: (1..=truth.references.len())
                .map(|k| format!("{dir}/{id}_s{k}.wav"))
                .collect(),
        },
        id,
        split,
        azimuths_deg: truth.spec.speaker_azimuths_deg.clone(),
        noise_azimuths_deg: truth.spec.noise_azimuths_deg.clone(),
        noise_count: truth.spec.noise_azimuths_deg.len(),
        snr_db: (!truth.spec.noise_azimuths_deg.is_empty()).then_some(truth.spec.snr_db),
        seed: truth.spec.seed,
        ground_truth: GroundTruth {
            itd_us: cues.iter().map(|c| c.itd_us).collect(),
            ild_db: cues.iter().map(|c| c.ild_db).collect(),
        },
    }
}

/// Writes every scene of every split under `out_dir` and returns the
/// manifest (also saved as `out_dir/manifest.json`).
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut scenes = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            let truth = make_scene(&cfg.scene_spec(split, i))?;
            let entry = entry_for(split, i, &truth);
            let m = &truth.mixture;
            write_wav(
                &out_dir.join(&entry.paths.mixture),
                &[&m.left, &m.right],
                cfg.sample_rate,
            )?;
            for (r, p) in truth.references.iter().zip(&entry.paths.references) {
                write_wav(&out_dir.join(p), &[&r.left, &r.right], cfg.sample_rate)?;
            }
            scenes.push(entry);
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        scenes,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One training/evaluation item: a binaural mixture and its per-speaker
/// binaural references.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    /// `[C × 2 × T]`, ears ordered (left, right).
    pub reference: Tensor,
    pub speaker_cues: Vec<SourceCues>,
}

impl Example {
    pub fn from_scene(id: impl Into<String>, truth: &SceneTruth) -> Result<Example> {
        let mut data = Vec::new();
        for r in &truth.references {
            data.extend_from_slice(&r.left);
            data.extend_from_slice(&r.right);
        }
        let t = truth.mixture.len();
        Ok(Example {
            id: id.into(),
            left: truth.mixture.left.clone(),
            right: truth.mixture.right.clone(),
            reference: Tensor::new(vec![truth.references.len(), 2, t], data)?,
            speaker_cues: truth.speaker_cues.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn speakers(&self) -> usize {
        self.reference.shape()[0]
    }
}

/// Builds the examples of a split in memory, without touching disk.
pub fn synthesize_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<Example>> {
    cfg.validate()?;
    (0..cfg.count(split))
        .map(|i| {
            Example::from_scene(
                DatasetConfig::scene_id(split, i),
                &make_scene(&cfg.scene_spec(split, i))?,
            )
        })
        .collect()
}

fn read_binaural(path: &Path, rate: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut ch, sr) = read_wav(path)?;
    if ch.len() != 2 || sr != rate {
        return Err(Error::Scene(format!(
            "{}: expected 2 channels at {rate} Hz, found {} at {sr} Hz",
            path.display(),
            ch.len()
        )));
    }
    let right = ch.pop().unwrap();
    let left = ch.pop().unwrap();
    Ok((left, right))
}

/// Loads the examples of one split from a manifest written by
/// [`gen_dataset`].
pub fn load_split(manifest_path: &Path, split: Split) -> Result<(Manifest, Vec<Example>)> {
    let manifest = Manifest::load(manifest_path)?;
    let root: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let rate = manifest.config.sample_rate;
    let mut out = Vec::new();
    for e in manifest.scenes.iter().filter(|e| e.split == split) {
        let (left, right) = read_binaural(&root.join(&e.paths.mixture), rate)?;
        let mut data = Vec::new();
        for p in &e.paths.references {
            let (l, r) = read_binaural(&root.join(p), rate)?;
            if l.len() != left.len() {
                return Err(Error::Scene(format!(
                    "{}: length differs from the mixture",
                    p
                )));
            }
            data.extend(l);
            data.extend(r);
        }
        let t = left.len();
        out.push(Example {
            id: e.id.clone(),
            left,
            right,
            reference: Tensor::new(vec![e.paths.references.len(), 2, t], data)?,
            speaker_cues: e.speaker_cues(),
        });
    }
    Ok((manifest, out))
}
