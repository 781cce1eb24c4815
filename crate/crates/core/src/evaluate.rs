//! Corpus evaluation: separation gains and cue errors per utterance, for the
//! model's estimates and for the unprocessed mixture.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cue::{sep_metrics, CueAnalyzer, CueErrors, SepMetrics};
use crate::error::{shape_err, Result};
use crate::loss::{pit_assign, Objective, PitScope, DEFAULT_EPSILON};
use crate::model::{separate, ModelConfig, SagrnnParams};
use crate::sim::{Binaural, Example};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Estimate,
    Mixture,
}

/// One speaker of one scene, scored either from its estimate or from the
/// mixture itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    pub speaker: usize,
    pub kind: RowKind,
    pub sep: SepMetrics,
    /// `None` when a cue was undefined; see `error`.
    pub cues: Option<CueErrors>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    /// Rows with defined cues; the cue means are over these.
    pub cue_rows: usize,
    pub delta_snr_db: f64,
    pub delta_si_snr_db: f64,
    pub delta_itd_us: f64,
    pub delta_ild_db: [f64; 3],
    pub delta_azimuth_deg: f64,
}

impl Summary {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a UtteranceRow>) -> Summary {
        let mut s = Summary::default();
        for r in rows {
            s.rows += 1;
            s.delta_snr_db += r.sep.delta_snr_db;
            s.delta_si_snr_db += r.sep.delta_si_snr_db;
            if let Some(c) = &r.cues {
                s.cue_rows += 1;
                s.delta_itd_us += c.itd_us;
                for k in 0..3 {
                    s.delta_ild_db[k] += c.ild_db[k];
                }
                s.delta_azimuth_deg += c.azimuth_deg;
            }
        }
        if s.rows > 0 {
            s.delta_snr_db /= s.rows as f64;
            s.delta_si_snr_db /= s.rows as f64;
        }
        if s.cue_rows > 0 {
            let n = s.cue_rows as f64;
            s.delta_itd_us /= n;
            s.delta_ild_db.iter_mut().for_each(|v| *v /= n);
            s.delta_azimuth_deg /= n;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Center frequencies of the three ILD channels, Hz.
    pub ild_channels_hz: [f64; 3],
    pub utterances: Vec<UtteranceRow>,
    pub estimate: Summary,
    pub mixture: Summary,
}

impl EvalReport {
    pub fn from_rows(analyzer: &CueAnalyzer, utterances: Vec<UtteranceRow>) -> Self {
        let centers = analyzer.bank().centers();
        let ild_channels_hz = analyzer.bank().ild_channels().map(|c| centers[c]);
        let estimate = Summary::of(utterances.iter().filter(|r| r.kind == RowKind::Estimate));
        let mixture = Summary::of(utterances.iter().filter(|r| r.kind == RowKind::Mixture));
        EvalReport {
            ild_channels_hz,
            utterances,
            estimate,
            mixture,
        }
    }

    /// Human-readable table, one line per row plus the two summaries.
    pub fn table(&self) -> String {
        let [a, b, c] = self.ild_channels_hz.map(|f| format!("dILD@{:.0}", f));
        let mut out = format!(
            "{:<12} {:>3} {:<8} {:>8} {:>9} {:>8} {:>10} {:>10} {:>10} {:>8}\n",
            "id", "spk", "kind", "dSNR", "dSI-SNR", "dITD", a, b, c, "dAz"
        );
        let line = |out: &mut String,
                    id: &str,
                    spk: &str,
                    kind: &str,
                    snr: f64,
                    si: f64,
                    cues: Option<(f64, [f64; 3], f64)>| {
            let _ = write!(out, "{id:<12} {spk:>3} {kind:<8} {snr:>8.3} {si:>9.3} ");
            match cues {
                Some((itd, ild, az)) => {
                    let _ = writeln!(
                        out,
                        "{itd:>8.2} {:>10.3} {:>10.3} {:>10.3} {az:>8.3}",
                        ild[0], ild[1], ild[2]
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:>8} {:>10} {:>10} {:>10} {:>8}",
                        "-", "-", "-", "-", "-"
                    );
                }
            }
        };
        for r in &self.utterances {
            let kind = match r.kind {
                RowKind::Estimate => "estimate",
                RowKind::Mixture => "mixture",
            };
            let cues = r.cues.map(|c| (c.itd_us, c.ild_db, c.azimuth_deg));
            line(
                &mut out,
                &r.id,
                &r.speaker.to_string(),
                kind,
                r.sep.delta_snr_db,
                r.sep.delta_si_snr_db,
                cues,
            );
        }
        for (name, s) in [("estimate", &self.estimate), ("mixture", &self.mixture)] {
            let cues =
                (s.cue_rows > 0).then_some((s.delta_itd_us, s.delta_ild_db, s.delta_azimuth_deg));
            line(
                &mut out,
                "mean",
                "",
                name,
                s.delta_snr_db,
                s.delta_si_snr_db,
                cues,
            );
        }
        out
    }
}

fn speaker_signal(x: &Tensor, s: usize) -> Binaural {
    let t = x.shape()[2];
    let d = x.data();
    Binaural {
        left: d[2 * s * t..(2 * s + 1) * t].to_vec(),
        right: d[(2 * s + 1) * t..(2 * s + 2) * t].to_vec(),
    }
}

/// Scores given estimates `[C×2×T]` against each example's references.
/// Estimates are matched to references by the best joint-ear SNR.
pub fn evaluate_estimates(
    analyzer: &CueAnalyzer,
    examples: &[Example],
    estimates: &[Tensor],
) -> Result<EvalReport> {
    if examples.len() != estimates.len() {
        return Err(shape_err!(
            "{} examples but {} estimates",
            examples.len(),
            estimates.len()
        ));
    }
    let mut rows = Vec::new();
    for (ex, est) in examples.iter().zip(estimates) {
        let perm = pit_assign(
            est,
            &ex.reference,
            Objective::Snr,
            PitScope::JointEars,
            DEFAULT_EPSILON,
        )?;
        let mixture = Binaural {
            left: ex.left.clone(),
            right: ex.right.clone(),
        };
        for (j, &i) in perm.permutation().iter().enumerate() {
            let reference = speaker_signal(&ex.reference, j);
            let estimate = speaker_signal(est, i);
            for (kind, signal) in [(RowKind::Estimate, &estimate), (RowKind::Mixture, &mixture)] {
                let sep = sep_metrics(signal, &reference, &mixture)?;
                let (cues, error) = match analyzer.cue_errors(signal, &reference) {
                    Ok(c) => (Some(c), None),
                    Err(e @ crate::Error::UndefinedCue(_)) => (None, Some(e.to_string())),
                    Err(e) => return Err(e),
                };
                rows.push(UtteranceRow {
                    id: ex.id.clone(),
                    speaker: j,
                    kind,
                    sep,
                    cues,
                    error,
                });
            }
        }
    }
    Ok(EvalReport::from_rows(analyzer, rows))
}

/// Separates every example with the last block and scores the result.
pub fn evaluate(
    params: &SagrnnParams<Tensor>,
    cfg: &ModelConfig,
    examples: &[Example],
    sample_rate: f64,
) -> Result<EvalReport> {
    let analyzer = CueAnalyzer::new(sample_rate)?;
    let estimates = examples
        .iter()
        .map(|ex| separate(params, cfg, &ex.left, &ex.right))
        .collect::<Result<Vec<_>>>()?;
    evaluate_estimates(&analyzer, examples, &estimates)
}
