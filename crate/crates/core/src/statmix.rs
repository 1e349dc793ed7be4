//! Channel statistics of feature maps and the two statistic-mixing
//! transforms.
//!
//! Both transforms re-normalize a feature map per channel to target
//! statistics (adaptive instance normalization). They differ only in where
//! the content and the target statistics come from:
//!
//! * the personalized transform keeps the content of `e` and applies
//!   statistics interpolated between `e` and its paired map `e'`;
//! * the shared transform keeps the content of `e'` and applies the
//!   statistics of `e`.
//!
//! The `*_on_tape` variants record onto a [`Tape`] and are what the model
//! trains through; the plain functions are convenience wrappers over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor folded into every standard deviation as `sqrt(var + eps²)`.
pub const STAT_EPS: f64 = 1e-5;

/// Per-channel spatial mean and standard deviation of one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape("channel_stats", &[mean.len()], &[std.len()]));
        }
        // sqrt(eps²) may round a hair below eps
        if let Some(s) = std.iter().find(|s| s.is_nan() || **s < STAT_EPS * (1.0 - 1e-12)) {
            return Err(Error::Domain(format!("channel std {s} below floor {STAT_EPS}")));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

/// Statistics recorded on a tape, each `B×C`.
#[derive(Clone, Copy, Debug)]
pub struct StatVars {
    pub mean: Var,
    pub std: Var,
}

pub fn stats_on_tape(tape: &mut Tape, e: Var) -> Result<StatVars> {
    Ok(StatVars {
        mean: tape.channel_mean(e)?,
        std: tape.channel_std(e, STAT_EPS)?,
    })
}

/// Per-sample `λ·a + (1−λ)·b` of both mean and std.
pub fn interpolate_on_tape(
    tape: &mut Tape,
    a: StatVars,
    b: StatVars,
    lambdas: &[f64],
) -> Result<StatVars> {
    check_lambdas(lambdas)?;
    Ok(StatVars {
        mean: tape.lerp(a.mean, b.mean, lambdas)?,
        std: tape.lerp(a.std, b.std, lambdas)?,
    })
}

/// Content of `e`, statistics `target`.
pub fn personalized_on_tape(tape: &mut Tape, e: Var, target: StatVars) -> Result<Var> {
    tape.adain(e, target.mean, target.std, STAT_EPS)
}

/// Content of `e_prime`, statistics of `e`.
pub fn shared_on_tape(tape: &mut Tape, e_prime: Var, stats_of_e: StatVars) -> Result<Var> {
    tape.adain(e_prime, stats_of_e.mean, stats_of_e.std, STAT_EPS)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    match lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(l) => Err(Error::Domain(format!("interpolation weight {l} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Views a `C×H×W` or `B×C×H×W` tensor as batched.
fn as_batched(e: &Tensor) -> Result<Tensor> {
    match e.shape() {
        [c, h, w] => e.clone().reshape(vec![1, *c, *h, *w]),
        [_, _, _, _] => Ok(e.clone()),
        other => Err(Error::shape("channel_stats", other, &[0, 0, 0, 0])),
    }
}

fn stats_to_tape(tape: &mut Tape, stats: &[ChannelStats], shape: &[usize]) -> Result<StatVars> {
    let (batch, channels) = (shape[0], shape[1]);
    if stats.len() != batch {
        return Err(Error::shape("stats batch", shape, &[stats.len()]));
    }
    if let Some(s) = stats.iter().find(|s| s.channels() != channels) {
        return Err(Error::shape("stats channels", shape, &[s.channels()]));
    }
    let mean: Vec<f64> = stats.iter().flat_map(|s| s.mean.iter().copied()).collect();
    let std: Vec<f64> = stats.iter().flat_map(|s| s.std.iter().copied()).collect();
    Ok(StatVars {
        mean: tape.constant(&Tensor::new(vec![batch, channels], mean)?),
        std: tape.constant(&Tensor::new(vec![batch, channels], std)?),
    })
}

fn stats_from_tape(tape: &Tape, vars: StatVars) -> Result<Vec<ChannelStats>> {
    let channels = tape.shape(vars.mean)[1];
    tape.data(vars.mean)
        .chunks_exact(channels)
        .zip(tape.data(vars.std).chunks_exact(channels))
        .map(|(m, s)| ChannelStats::new(m.to_vec(), s.to_vec()))
        .collect()
}

/// Channel statistics for every sample of a `C×H×W` or `B×C×H×W` map.
pub fn channel_stats(e: &Tensor) -> Result<Vec<ChannelStats>> {
    let e = as_batched(e)?;
    let mut tape = Tape::new();
    let v = tape.constant(&e);
    let s = stats_on_tape(&mut tape, v)?;
    stats_from_tape(&tape, s)
}

pub fn interpolate_stats(a: &ChannelStats, b: &ChannelStats, lambda: f64) -> Result<ChannelStats> {
    check_lambdas(&[lambda])?;
    if a.channels() != b.channels() {
        return Err(Error::shape("interpolate_stats", &[a.channels()], &[b.channels()]));
    }
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect()
    };
    ChannelStats::new(mix(&a.mean, &b.mean), mix(&a.std, &b.std))
}

fn transform(content: &Tensor, target: &[ChannelStats]) -> Result<Tensor> {
    let batched = as_batched(content)?;
    let mut tape = Tape::new();
    let x = tape.constant(&batched);
    let t = stats_to_tape(&mut tape, target, batched.shape())?;
    let y = tape.adain(x, t.mean, t.std, STAT_EPS)?;
    tape.value(y).reshape(content.shape().to_vec())
}

/// Re-normalizes `e` to `stats_star` (one entry per sample).
pub fn transform_personalized(e: &Tensor, stats_star: &[ChannelStats]) -> Result<Tensor> {
    transform(e, stats_star)
}

/// Spatial content of `e_prime` carrying the statistics of `e`.
pub fn transform_shared(e_prime: &Tensor, stats_of_e: &[ChannelStats]) -> Result<Tensor> {
    transform(e_prime, stats_of_e)
}
