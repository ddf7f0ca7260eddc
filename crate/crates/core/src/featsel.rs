//! Scoring and selecting feature channels.
//!
//! Each channel of each pyramid level gets two scores:
//!
//! * texturedness, the smallest eigenvalue of the channel's summed
//!   structure tensor `G = sum_x [gx^2, gx gy; gx gy, gy^2]`, which is large
//!   only when the channel has gradient energy in two directions;
//! * instability, the mean squared difference per valid pixel between the
//!   channel in the first frame of a sequence, resampled through the known
//!   warp, and the same channel in every later frame.
//!
//! Channels are ranked per level by the sum of their texturedness rank
//! (descending) and instability rank (ascending), and the best
//! `ceil(fraction * channels)` of every level are kept.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lk::row_taps;
use crate::par;
use crate::tensor::{gradient_central, FeaturePyramid, FeatureVolume, TensorError};
use crate::warp::Warp;

/// Minimum fraction of pixels a warped frame must share with the first.
pub const MIN_OVERLAP: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no scores to rank")]
    EmptyScores,
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("a stability sequence needs at least two frames")]
    SequenceTooShort,
    #[error("frame {frame}: only {valid} of {total} pixels overlap the first frame")]
    InsufficientOverlap { frame: usize, valid: usize, total: usize },
    #[error("frames disagree in shape or channel count")]
    ShapeMismatch,
    #[error("scores do not cover level {level} channel {channel}")]
    MissingScore { level: usize, channel: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Smallest eigenvalue of the symmetric PSD matrix `[a, b; b, c]`.
///
/// Uses `sqrt((a - c)^2 + 4 b^2)`, which equals `sqrt(tr^2 - 4 det)` but
/// does not cancel catastrophically for near-isotropic tensors.
pub fn min_eigenvalue_2x2(a: f64, b: f64, c: f64) -> f64 {
    let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
    (0.5 * (a + c - disc)).max(0.0)
}

/// Texturedness of every channel of a volume (dims at least 3x3).
pub fn texturedness_scores(v: &FeatureVolume) -> Result<Vec<f64>, SelectError> {
    let (gx, gy) = gradient_central(v)?;
    Ok(par::map_range(v.channels(), |c| {
        let (mut sxx, mut sxy, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in gx.channel(c).iter().zip(gy.channel(c)) {
            let (a, b) = (a as f64, b as f64);
            sxx += a * a;
            sxy += a * b;
            syy += b * b;
        }
        min_eigenvalue_2x2(sxx, sxy, syy)
    }))
}

/// Texturedness of a single-channel activation.
pub fn texturedness_score(activation: &FeatureVolume) -> Result<f64, SelectError> {
    Ok(texturedness_scores(activation)?[0])
}

/// Instability of every channel over a sequence.
///
/// `frames[i]` pairs the activation of frame `i` with the warp taking its
/// pixels into frame 0. The first warp is ignored. Returns
/// `1/(N-1) sum_{i>=1} mean_x (V_0(W_i(x)) - V_i(x))^2` per channel, where
/// the mean runs over the pixels whose warped position lands in frame 0.
pub fn stability_scores<W: Warp>(frames: &[(&FeatureVolume, &W)]) -> Result<Vec<f64>, SelectError> {
    if frames.len() < 2 {
        return Err(SelectError::SequenceTooShort);
    }
    let first = frames[0].0;
    let (w, h, ch) = (first.width(), first.height(), first.channels());
    let mut acc = vec![0.0f64; ch];
    for (i, (v, warp)) in frames.iter().enumerate().skip(1) {
        if v.width() != w || v.height() != h || v.channels() != ch {
            return Err(SelectError::ShapeMismatch);
        }
        let hom = warp.homography();
        let taps: Vec<_> = (0..h).flat_map(|y| row_taps(&hom, y, w, w, h)).collect();
        let valid = taps.iter().filter(|t| t.is_some()).count();
        if valid == 0 || (valid as f64) < MIN_OVERLAP * (w * h) as f64 {
            return Err(SelectError::InsufficientOverlap {
                frame: i,
                valid,
                total: w * h,
            });
        }
        let per_channel = par::map_range(ch, |c| {
            let src = first.channel(c);
            let cur = v.channel(c);
            let mut s = 0.0f64;
            for (p, tap) in taps.iter().enumerate() {
                if let Some(tap) = tap {
                    let d = tap.apply(src) - cur[p] as f64;
                    s += d * d;
                }
            }
            s / valid as f64
        });
        for (a, s) in acc.iter_mut().zip(per_channel) {
            *a += s;
        }
    }
    let n = (frames.len() - 1) as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// Instability of a single-channel activation sequence.
pub fn stability_score<W: Warp>(frames: &[(&FeatureVolume, &W)]) -> Result<f64, SelectError> {
    Ok(stability_scores(frames)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub level: usize,
    pub channel: usize,
    pub texturedness: f64,
    pub instability: f64,
}

/// Scores every channel of every level over one sequence of pyramids.
///
/// `sequence[i]` pairs frame `i`'s pyramid with the warp, at input
/// resolution, taking frame `i` into frame 0. Texturedness is averaged over
/// all frames.
pub fn score_sequence<W: Warp>(sequence: &[(FeaturePyramid, W)]) -> Result<Vec<FeatureScore>, SelectError> {
    if sequence.len() < 2 {
        return Err(SelectError::SequenceTooShort);
    }
    let levels = sequence[0].0.num_levels();
    if sequence.iter().any(|(p, _)| p.num_levels() != levels) {
        return Err(SelectError::ShapeMismatch);
    }
    let mut out = Vec::new();
    for l in 0..levels {
        let scale = sequence[0].0.scale(l) as f64;
        let local: Vec<W> = sequence.iter().map(|(_, w)| w.at_scale(scale)).collect();
        let frames: Vec<(&FeatureVolume, &W)> =
            sequence.iter().zip(&local).map(|((p, _), w)| (p.level(l), w)).collect();
        let instability = stability_scores(&frames)?;
        let mut texture = vec![0.0; instability.len()];
        for (p, _) in sequence {
            for (t, s) in texture.iter_mut().zip(texturedness_scores(p.level(l))?) {
                *t += s;
            }
        }
        for (c, (t, s)) in texture.iter().zip(&instability).enumerate() {
            out.push(FeatureScore {
                level: l,
                channel: c,
                texturedness: t / sequence.len() as f64,
                instability: *s,
            });
        }
    }
    Ok(out)
}

/// Averages scores of several sequences over the same pyramid shape.
pub fn average_scores(runs: &[Vec<FeatureScore>]) -> Result<Vec<FeatureScore>, SelectError> {
    let first = runs.first().ok_or(SelectError::EmptyScores)?;
    let mut out = first.clone();
    for run in &runs[1..] {
        if run.len() != out.len() {
            return Err(SelectError::ShapeMismatch);
        }
        for (o, s) in out.iter_mut().zip(run) {
            if (o.level, o.channel) != (s.level, s.channel) {
                return Err(SelectError::ShapeMismatch);
            }
            o.texturedness += s.texturedness;
            o.instability += s.instability;
        }
    }
    let n = runs.len() as f64;
    for o in &mut out {
        o.texturedness /= n;
        o.instability /= n;
    }
    Ok(out)
}

/// Per-level lists of selected channels, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub levels: Vec<Vec<usize>>,
}

impl FeatureMask {
    /// Every channel of every level.
    pub fn full(shape: &[usize]) -> Self {
        Self {
            levels: shape.iter().map(|&n| (0..n).collect()).collect(),
        }
    }

    pub fn validate(&self, shape: &[usize]) -> Result<(), SelectError> {
        if self.levels.len() != shape.len() {
            return Err(SelectError::InvalidMask(format!(
                "{} levels in mask, {} in pyramid",
                self.levels.len(),
                shape.len()
            )));
        }
        for (l, (sel, &n)) in self.levels.iter().zip(shape).enumerate() {
            if sel.is_empty() {
                return Err(SelectError::InvalidMask(format!("level {l} selects no channels")));
            }
            if sel.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SelectError::InvalidMask(format!(
                    "level {l} indices are not strictly increasing"
                )));
            }
            if sel.iter().any(|&c| c >= n) {
                return Err(SelectError::InvalidMask(format!("level {l} index out of range")));
            }
        }
        Ok(())
    }

    /// The pyramid restricted to the selected channels.
    pub fn apply(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid, SelectError> {
        self.validate(&pyramid.shape())?;
        Ok(pyramid.select_channels(&self.levels)?)
    }

    pub fn channel_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

/// Number of channels kept out of `count`: `ceil(fraction * count)`, at
/// least 1. A tolerance of 1e-9 keeps products such as `0.15 * 20` from
/// rounding up past an exact integer.
pub fn quota(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64 - 1e-9).ceil() as usize).clamp(1, count.max(1))
}

fn check_fraction(fraction: f64) -> Result<(), SelectError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SelectError::InvalidFraction(fraction));
    }
    Ok(())
}

/// Relative weights of the two ranks in the combined criterion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankWeights {
    pub texturedness: f64,
    pub stability: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        Self {
            texturedness: 1.0,
            stability: 1.0,
        }
    }
}

/// A score with its combined rank within its level and selection flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedScore {
    pub level: usize,
    pub channel: usize,
    pub texturedness: f64,
    pub instability: f64,
    /// 0-based position in the level's combined ordering.
    pub rank: usize,
    pub selected: bool,
}

fn competition_ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0; values.len()];
    for (pos, &c) in order.iter().enumerate() {
        ranks[c] = if pos > 0 && values[order[pos - 1]] == values[c] {
            ranks[order[pos - 1]]
        } else {
            pos
        };
    }
    ranks
}

/// Ranks channels within each level and keeps the best `quota` per level.
///
/// The combined key is `w_t * texturedness_rank + w_s * instability_rank`,
/// where tied scores share the lower rank; ties in the combined key go to
/// the lower channel index.
pub fn rank_and_select(
    scores: &[FeatureScore],
    fraction: f64,
    weights: RankWeights,
) -> Result<(FeatureMask, Vec<RankedScore>), SelectError> {
    check_fraction(fraction)?;
    if scores.is_empty() {
        return Err(SelectError::EmptyScores);
    }
    let mut by_level: BTreeMap<usize, Vec<FeatureScore>> = BTreeMap::new();
    for s in scores {
        by_level.entry(s.level).or_default().push(*s);
    }
    let max_level = *by_level.keys().last().unwrap();
    let mut mask = Vec::with_capacity(max_level + 1);
    let mut ranked = Vec::with_capacity(scores.len());
    for l in 0..=max_level {
        let mut level = by_level
            .remove(&l)
            .ok_or(SelectError::MissingScore { level: l, channel: 0 })?;
        level.sort_by_key(|s| s.channel);
        for (i, s) in level.iter().enumerate() {
            if s.channel != i {
                return Err(SelectError::MissingScore { level: l, channel: i });
            }
        }
        let n = level.len();
        // Competition ranking: a channel's rank is the number of channels
        // strictly better on that criterion, so equal scores share a rank.
        let tex: Vec<f64> = level.iter().map(|s| s.texturedness).collect();
        let inst: Vec<f64> = level.iter().map(|s| s.instability).collect();
        let tex_rank = competition_ranks(&tex, true);
        let inst_rank = competition_ranks(&inst, false);
        let combined: Vec<f64> = (0..n)
            .map(|c| weights.texturedness * tex_rank[c] as f64 + weights.stability * inst_rank[c] as f64)
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| combined[a].total_cmp(&combined[b]).then(a.cmp(&b)));
        let keep = quota(fraction, n);
        let mut sel: Vec<usize> = order[..keep].to_vec();
        sel.sort_unstable();
        let mut rank_of = vec![0; n];
        for (r, &c) in order.iter().enumerate() {
            rank_of[c] = r;
        }
        for s in &level {
            ranked.push(RankedScore {
                level: l,
                channel: s.channel,
                texturedness: s.texturedness,
                instability: s.instability,
                rank: rank_of[s.channel],
                selected: rank_of[s.channel] < keep,
            });
        }
        mask.push(sel);
    }
    Ok((FeatureMask { levels: mask }, ranked))
}

/// Uniform random subset of `quota(fraction, n)` channels per level, drawn
/// without replacement from a ChaCha8 stream seeded by `seed`.
pub fn random_mask(shape: &[usize], fraction: f64, seed: u64) -> Result<FeatureMask, SelectError> {
    check_fraction(fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = shape
        .iter()
        .map(|&n| {
            let mut v = rand::seq::index::sample(&mut rng, n, quota(fraction, n)).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    Ok(FeatureMask { levels })
}
