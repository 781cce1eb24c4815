//! Training objective: plain SNR, scale-invariant SNR, permutation-invariant
//! assignment, and the multi-scale mean over blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Largest speaker count accepted by [`pit_assign`] (C! permutations).
pub const MAX_PIT_SPEAKERS: usize = 6;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Snr,
    SiSnr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitScope {
    /// One speaker permutation shared by both ears.
    JointEars,
    /// An independent permutation per ear.
    PerEar,
}

/// Which blocks contribute to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiScale {
    All,
    Last3,
    Last,
}

impl MultiScale {
    /// Zero-based indices of the blocks included out of `blocks`.
    pub fn blocks(self, blocks: usize) -> std::ops::Range<usize> {
        let keep = match self {
            MultiScale::All => blocks,
            MultiScale::Last3 => blocks.min(3),
            MultiScale::Last => blocks.min(1),
        };
        blocks - keep..blocks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub multiscale: MultiScale,
    pub objective: Objective,
    pub pit_scope: PitScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: DEFAULT_EPSILON,
            multiscale: MultiScale::All,
            objective: Objective::Snr,
            pit_scope: PitScope::JointEars,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub(crate) fn snr_db_slice(est: &[f64], reference: &[f64], eps: f64) -> f64 {
    let signal: f64 = reference.iter().map(|r| r * r).sum();
    let noise: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    DB * ((signal + eps) / (noise + eps)).ln()
}

/// Squared correlation coefficient of the zero-mean signals.
fn squared_correlation(est: &[f64], reference: &[f64]) -> f64 {
    let n = est.len() as f64;
    let me = est.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let (mut ee, mut rr, mut er) = (0.0, 0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let (a, b) = (e - me, r - mr);
        ee += a * a;
        rr += b * b;
        er += a * b;
    }
    if ee == 0.0 || rr == 0.0 {
        0.0
    } else {
        (er * er / (ee * rr)).min(1.0)
    }
}

pub(crate) fn si_snr_db_slice(est: &[f64], reference: &[f64], eps: f64) -> f64 {
    // With both signals zero-mean, the projection splits the estimate into
    // target and residual energies rho²·‖e‖² and (1−rho²)·‖e‖². Regularizing
    // the energy ratio after normalizing by ‖e‖² keeps the value exactly
    // invariant to the scale of the estimate.
    let rho2 = squared_correlation(est, reference);
    DB * ((rho2 + eps) / (1.0 - rho2 + eps)).ln()
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(shape_err!(
            "length mismatch: {} vs {}",
            est.len(),
            reference.len()
        ));
    }
    Ok(())
}

/// `10·log10((‖ref‖²+ε)/(‖ref−est‖²+ε))`.
pub fn snr_db(est: &[f64], reference: &[f64], eps: f64) -> Result<f64> {
    check_lengths(est, reference)?;
    Ok(snr_db_slice(est, reference, eps))
}

/// Scale-invariant SNR in dB.
///
/// Both signals are made zero-mean and the estimate is split into its
/// projection onto the reference and the residual. The ratio of the two
/// energies is regularized by ε after normalizing by the estimate energy,
/// i.e. `10·log10((ρ²+ε)/(1−ρ²+ε))` with ρ the correlation coefficient, so
/// `si_snr_db(α·s, s)` does not depend on α > 0.
pub fn si_snr_db(est: &[f64], reference: &[f64], eps: f64) -> Result<f64> {
    check_lengths(est, reference)?;
    Ok(si_snr_db_slice(est, reference, eps))
}

pub fn objective_db(objective: Objective, est: &[f64], reference: &[f64], eps: f64) -> Result<f64> {
    match objective {
        Objective::Snr => snr_db(est, reference, eps),
        Objective::SiSnr => si_snr_db(est, reference, eps),
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut all = vec![current.clone()];
    loop {
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return all;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        all.push(current.clone());
    }
}

/// Result of a permutation-invariant assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PitAssignment {
    /// `perms[e][j]` is the estimate assigned to reference speaker `j` in ear
    /// `e`. Under [`PitScope::JointEars`] every ear shares one permutation.
    pub perms: Vec<Vec<usize>>,
    /// Negative mean objective of the chosen assignment.
    pub loss: f64,
}

impl PitAssignment {
    /// The permutation used for ear 0 (the joint one under joint scope).
    pub fn permutation(&self) -> &[usize] {
        &self.perms[0]
    }
}

/// Picks the best assignment from a score table.
///
/// `scores[(i * c + j) * ears + e]` is the objective of estimate `i` against
/// reference `j` in ear `e`; larger is better. Ties keep the
/// lexicographically first permutation.
pub fn pit_from_scores(
    scores: &[f64],
    speakers: usize,
    ears: usize,
    scope: PitScope,
) -> Result<PitAssignment> {
    if speakers == 0 || ears == 0 {
        return Err(shape_err!("pit needs at least one speaker and one ear"));
    }
    if speakers > MAX_PIT_SPEAKERS {
        return Err(Error::Config(format!(
            "permutation search over {speakers} speakers exceeds the limit of {MAX_PIT_SPEAKERS}"
        )));
    }
    if scores.len() != speakers * speakers * ears {
        return Err(shape_err!("pit score table has {} entries", scores.len()));
    }
    let perms = permutations(speakers);
    let score = |i: usize, j: usize, e: usize| scores[(i * speakers + j) * ears + e];
    let best_for = |ear_set: &[usize]| -> (Vec<usize>, f64) {
        let mut best: Option<(usize, f64)> = None;
        for (pi, p) in perms.iter().enumerate() {
            let total: f64 = ear_set
                .iter()
                .map(|&e| {
                    p.iter()
                        .enumerate()
                        .map(|(j, &i)| score(i, j, e))
                        .sum::<f64>()
                })
                .sum();
            let loss = -total / (speakers * ear_set.len()) as f64;
            if best.is_none_or(|(_, b)| loss < b) {
                best = Some((pi, loss));
            }
        }
        let (pi, loss) = best.unwrap();
        (perms[pi].clone(), loss)
    };
    match scope {
        PitScope::JointEars => {
            let all: Vec<usize> = (0..ears).collect();
            let (perm, loss) = best_for(&all);
            Ok(PitAssignment {
                perms: vec![perm; ears],
                loss,
            })
        }
        PitScope::PerEar => {
            let mut out = Vec::with_capacity(ears);
            let mut loss = 0.0;
            for e in 0..ears {
                let (perm, l) = best_for(&[e]);
                out.push(perm);
                loss += l;
            }
            Ok(PitAssignment {
                perms: out,
                loss: loss / ears as f64,
            })
        }
    }
}

fn speaker_ear_dims(est: &Tensor, reference: &Tensor) -> Result<(usize, usize, usize)> {
    if est.shape() != reference.shape() || est.rank() != 3 {
        return Err(shape_err!(
            "estimates {:?} vs references {:?}, expected matching [C×E×T]",
            est.shape(),
            reference.shape()
        ));
    }
    let s = est.shape();
    if !(1..=2).contains(&s[1]) {
        return Err(shape_err!("ear axis must have extent 1 or 2, got {}", s[1]));
    }
    Ok((s[0], s[1], s[2]))
}

/// Exhaustive permutation-invariant assignment of `est` to `reference`,
/// both `[C×E×T]`.
pub fn pit_assign(
    est: &Tensor,
    reference: &Tensor,
    objective: Objective,
    scope: PitScope,
    eps: f64,
) -> Result<PitAssignment> {
    let (c, e, t) = speaker_ear_dims(est, reference)?;
    if c > MAX_PIT_SPEAKERS {
        return Err(Error::Config(format!(
            "{c} speakers exceeds the limit of {MAX_PIT_SPEAKERS}"
        )));
    }
    let (ev, rv) = (est.data(), reference.data());
    fn row(data: &[f64], e: usize, t: usize, s: usize, ear: usize) -> &[f64] {
        &data[(s * e + ear) * t..(s * e + ear + 1) * t]
    }
    let mut scores = Vec::with_capacity(c * c * e);
    for i in 0..c {
        for j in 0..c {
            for ear in 0..e {
                scores.push(objective_db(
                    objective,
                    row(ev, e, t, i, ear),
                    row(rv, e, t, j, ear),
                    eps,
                )?);
            }
        }
    }
    pit_from_scores(&scores, c, e, scope)
}

/// Mean PIT loss over the blocks selected by `cfg.multiscale`.
pub fn multi_scale_loss(
    block_estimates: &[Tensor],
    reference: &Tensor,
    cfg: &LossConfig,
) -> Result<f64> {
    let range = cfg.multiscale.blocks(block_estimates.len());
    if range.is_empty() {
        return Err(Error::Usage(
            "multi-scale loss over an empty block set".into(),
        ));
    }
    let n = range.len() as f64;
    let mut total = 0.0;
    for b in range {
        total += pit_assign(
            &block_estimates[b],
            reference,
            cfg.objective,
            cfg.pit_scope,
            cfg.epsilon,
        )?
        .loss;
    }
    Ok(total / n)
}

/// Differentiable PIT loss for one block's estimates `[C×E×T]`.
pub fn pit_loss_var(
    g: &mut Graph,
    est: Var,
    reference: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, PitAssignment)> {
    let (c, e, t) = speaker_ear_dims(g.value(est), reference)?;
    if c > MAX_PIT_SPEAKERS {
        return Err(Error::Config(format!(
            "{c} speakers exceeds the limit of {MAX_PIT_SPEAKERS}"
        )));
    }
    // Row (i, j, ear) pairs estimate i with reference j.
    let rows = c * c * e;
    let mut src = Vec::with_capacity(rows * t);
    let mut tiled = Vec::with_capacity(rows * t);
    let rv = reference.data();
    for i in 0..c {
        for j in 0..c {
            for ear in 0..e {
                src.extend((i * e + ear) * t..(i * e + ear + 1) * t);
                tiled.extend_from_slice(&rv[(j * e + ear) * t..(j * e + ear + 1) * t]);
            }
        }
    }
    let pairs = g.gather(est, src, vec![rows, t])?;
    let tiled = Tensor::from_parts(vec![rows, t], tiled);
    let scores = match cfg.objective {
        Objective::Snr => g.snr_db(pairs, &tiled, cfg.epsilon)?,
        Objective::SiSnr => g.si_snr_db(pairs, &tiled, cfg.epsilon)?,
    };
    let assignment = pit_from_scores(g.value(scores).data(), c, e, cfg.pit_scope)?;
    let mut picked = Vec::with_capacity(c * e);
    for (ear, perm) in assignment.perms.iter().enumerate() {
        for (j, &i) in perm.iter().enumerate() {
            picked.push((i * c + j) * e + ear);
        }
    }
    let chosen = g.select(scores, &picked)?;
    let mean = g.mean(chosen)?;
    let loss = g.scale(mean, -1.0)?;
    Ok((loss, assignment))
}

/// Differentiable multi-scale loss over per-block estimates `[C×E×T]`.
pub fn multi_scale_loss_var(
    g: &mut Graph,
    blocks: &[Var],
    reference: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let range = cfg.multiscale.blocks(blocks.len());
    if range.is_empty() {
        return Err(Error::Usage(
            "multi-scale loss over an empty block set".into(),
        ));
    }
    let n = range.len();
    let mut acc: Option<Var> = None;
    for b in range {
        let (l, _) = pit_loss_var(g, blocks[b], reference, cfg)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    g.scale(acc.unwrap(), 1.0 / n as f64)
}
