//! End-to-end acceptance checks, shared by the `acceptance` test target and
//! the CLI `selftest` command.
//!
//! Every check is seeded; a failing check reports what it measured.

use std::collections::HashSet;
use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::SyntheticSpec;
use crate::error::Result;
use crate::experiment::{run_seed, run_seed_audited, DataSource, ExperimentConfig, Mode, SeedOutcome};
use crate::federation::{aggregate, AggregationRule, Message, NamedTensor, RoundConfig, SharedSnapshot};
use crate::metrics::{accuracy, auc, eer};
use crate::model::{
    forward_mixed, loss_adversarial, loss_personalized, loss_shared, Batch, Branch, ForgeryModel, Mixing,
    ModelSpec,
};
use crate::rng::{derive, Domain, Rng};
use crate::statmix::{self, ChannelStats, STAT_EPS};
use crate::tensor::{Tape, Tensor, Var};

/// Result of one criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(id: u8, name: &'static str, check: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
    Outcome {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Knobs for the expensive training checks.
#[derive(Clone, Debug)]
pub struct Settings {
    /// Seeds for the ablation and diagonal-dominance runs.
    pub seeds: Vec<u64>,
    /// Communication rounds per run.
    pub rounds: usize,
    pub threads: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            rounds: 15,
            threads: 1,
        }
    }
}

/// Runs every criterion in order, reporting each as it finishes.
pub fn run_all(settings: &Settings, mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut push = |o: Outcome| {
        report(&o);
        out.push(o);
    };
    push(gradient_correctness());
    push(statistic_postconditions());
    push(gradient_routing());
    push(aggregation());
    push(metric_oracles());
    let (ablation, dominance, privacy) = training_checks(settings);
    push(ablation);
    push(dominance);
    push(degenerate_equivalence());
    push(privacy);
    out
}

// ---------------------------------------------------------------------------
// gradients

const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-4;
const GRAD_TRIALS: usize = 100;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn gaussian(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, scale).expect("valid sigma");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("finite")
}

/// Values bounded away from zero, so ReLU kinks are not straddled.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.3..2.0)).collect()).expect("finite")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Reduces `out` to a scalar through fixed random coefficients.
fn scalarize(tape: &mut Tape, out: Var, coeffs: &Tensor) -> Result<Var> {
    if tape.data(out).len() == 1 {
        return Ok(out);
    }
    let c = tape.constant(coeffs);
    let m = tape.mul(out, c)?;
    tape.sum(m)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`. Gradients with norm below `1e-3` are judged
/// against that floor instead, since finite differences in `f64` carry
/// roundoff noise around `1e-8`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-3)
}

/// Largest relative error over the inputs of one instance.
fn check_op(rng: &mut Rng, inputs: &[Tensor], build: &Build) -> Result<f64> {
    let eval = |inputs: &[Tensor], coeffs: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().tracked())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = match coeffs {
            Some(c) => scalarize(&mut tape, out, c)?,
            None => out,
        };
        Ok((tape, vars, loss))
    };
    let (probe, _, out) = eval(inputs, None)?;
    let coeffs = gaussian(rng, probe.shape(out), 1.0);

    let (mut tape, vars, loss) = eval(inputs, Some(&coeffs))?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("tracked input").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let at = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (t, _, l) = eval(&shifted, Some(&coeffs))?;
                t.scalar_value(l)
            };
            *slot = five_point(at)?;
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Fourth-order central difference.
fn five_point(f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let h = FD_STEP;
    let near = f(h)? - f(-h)?;
    let far = f(2.0 * h)? - f(-2.0 * h)?;
    Ok((8.0 * near - far) / (12.0 * h))
}

struct OpCase {
    name: &'static str,
    make: fn(&mut Rng) -> (Vec<Tensor>, Box<Build>),
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0), gaussian(rng, &s, 1.0)], Box::new(|t, v| t.add(v[0], v[1])))
            },
        },
        OpCase {
            name: "sub",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0), gaussian(rng, &s, 1.0)], Box::new(|t, v| t.sub(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0), gaussian(rng, &s, 1.0)], Box::new(|t, v| t.mul(v[0], v[1])))
            },
        },
        OpCase {
            name: "scale",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                let f = rng.random_range(-2.0..2.0);
                (vec![gaussian(rng, &s, 1.0)], Box::new(move |t, v| t.scale(v[0], f)))
            },
        },
        OpCase {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                (
                    vec![gaussian(rng, &[m, k], 1.0), gaussian(rng, &[k, n], 1.0)],
                    Box::new(|t, v| t.matmul(v[0], v[1])),
                )
            },
        },
        OpCase {
            name: "conv2d",
            make: |rng| {
                let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
                let (h, w) = (dim(rng, 2, 5), dim(rng, 2, 5));
                let k = if rng.random::<bool>() { 3 } else { 1 };
                (
                    vec![
                        gaussian(rng, &[b, ci, h, w], 1.0),
                        gaussian(rng, &[co, ci, k, k], 1.0),
                        gaussian(rng, &[co], 1.0),
                    ],
                    Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
                )
            },
        },
        OpCase {
            name: "relu",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![off_zero(rng, &s)], Box::new(|t, v| t.relu(v[0])))
            },
        },
        OpCase {
            name: "global_avg_pool",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.global_avg_pool(v[0])))
            },
        },
        OpCase {
            name: "avg_pool",
            make: |rng| {
                let s = [dim(rng, 1, 2), dim(rng, 1, 3), 2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.avg_pool(v[0], 2)))
            },
        },
        OpCase {
            name: "flatten",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.flatten(v[0])))
            },
        },
        OpCase {
            name: "linear",
            make: |rng| {
                let (b, f, n) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 4));
                (
                    vec![gaussian(rng, &[b, f], 1.0), gaussian(rng, &[n, f], 1.0), gaussian(rng, &[n], 1.0)],
                    Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
                )
            },
        },
        OpCase {
            name: "log_softmax",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 2, 5)];
                (vec![gaussian(rng, &s, 2.0)], Box::new(|t, v| t.log_softmax(v[0])))
            },
        },
        OpCase {
            name: "sum",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.sum(v[0])))
            },
        },
        OpCase {
            name: "mean",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.mean(v[0])))
            },
        },
        OpCase {
            name: "weighted_sum",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3)];
                let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                (
                    (0..3).map(|_| gaussian(rng, &s, 1.0)).collect(),
                    Box::new(move |t, v| t.weighted_sum(&[(v[0], w[0]), (v[1], w[1]), (v[2], w[2])])),
                )
            },
        },
        OpCase {
            name: "gather_rows",
            make: |rng| {
                let (b, c) = (dim(rng, 1, 4), dim(rng, 1, 3));
                let index: Vec<usize> = (0..dim(rng, 1, 5)).map(|_| rng.random_range(0..b)).collect();
                (vec![gaussian(rng, &[b, c], 1.0)], Box::new(move |t, v| t.gather_rows(v[0], &index)))
            },
        },
        OpCase {
            name: "channel_mean",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.channel_mean(v[0])))
            },
        },
        OpCase {
            name: "channel_std",
            make: |rng| {
                let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 4)];
                (vec![gaussian(rng, &s, 1.0)], Box::new(|t, v| t.channel_std(v[0], STAT_EPS)))
            },
        },
        OpCase {
            name: "adain",
            make: |rng| {
                let (b, c) = (dim(rng, 1, 3), dim(rng, 1, 3));
                let s = [b, c, dim(rng, 1, 4), dim(rng, 2, 4)];
                (
                    vec![gaussian(rng, &s, 1.0), gaussian(rng, &[b, c], 1.0), positive(rng, &[b, c])],
                    Box::new(|t, v| t.adain(v[0], v[1], v[2], STAT_EPS)),
                )
            },
        },
        OpCase {
            name: "lerp",
            make: |rng| {
                let (b, c) = (dim(rng, 1, 4), dim(rng, 1, 3));
                let w: Vec<f64> = (0..b).map(|_| rng.random()).collect();
                (
                    vec![gaussian(rng, &[b, c], 1.0), gaussian(rng, &[b, c], 1.0)],
                    Box::new(move |t, v| t.lerp(v[0], v[1], &w)),
                )
            },
        },
        OpCase {
            name: "nll",
            make: |rng| {
                let (b, n) = (dim(rng, 1, 4), dim(rng, 2, 4));
                let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
                (
                    vec![gaussian(rng, &[b, n], 1.0)],
                    Box::new(move |t, v| {
                        let lp = t.log_softmax(v[0])?;
                        t.nll(lp, &labels)
                    }),
                )
            },
        },
        OpCase {
            name: "uniform_cross_entropy",
            make: |rng| {
                let s = [dim(rng, 1, 4), dim(rng, 2, 4)];
                (
                    vec![gaussian(rng, &s, 1.0)],
                    Box::new(|t, v| {
                        let lp = t.log_softmax(v[0])?;
                        t.uniform_cross_entropy(lp)
                    }),
                )
            },
        },
        OpCase {
            name: "transform_personalized",
            make: |rng| {
                let b = dim(rng, 2, 3);
                let s = [b, dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3)];
                let mut pair: Vec<usize> = (0..b).collect();
                pair.shuffle(rng);
                let lambdas: Vec<f64> = (0..b).map(|_| rng.random()).collect();
                (
                    vec![gaussian(rng, &s, 1.0)],
                    Box::new(move |t, v| {
                        let e_pair = t.gather_rows(v[0], &pair)?;
                        let se = statmix::stats_on_tape(t, v[0])?;
                        let sp = statmix::stats_on_tape(t, e_pair)?;
                        let star = statmix::interpolate_on_tape(t, se, sp, &lambdas)?;
                        statmix::personalized_on_tape(t, v[0], star)
                    }),
                )
            },
        },
        OpCase {
            name: "transform_shared",
            make: |rng| {
                let b = dim(rng, 2, 3);
                let s = [b, dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3)];
                let mut pair: Vec<usize> = (0..b).collect();
                pair.shuffle(rng);
                (
                    vec![gaussian(rng, &s, 1.0)],
                    Box::new(move |t, v| {
                        let e_pair = t.gather_rows(v[0], &pair)?;
                        let se = statmix::stats_on_tape(t, v[0])?;
                        statmix::shared_on_tape(t, e_pair, se)
                    }),
                )
            },
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Personalized,
    Shared,
    Adversarial,
}

impl LossKind {
    /// Branches whose parameters receive this loss's gradient.
    fn branches(self) -> &'static [Branch] {
        match self {
            LossKind::Personalized => &[Branch::FeatureExtractor, Branch::Personalized],
            LossKind::Shared => &[Branch::Shared],
            LossKind::Adversarial => &[Branch::FeatureExtractor],
        }
    }

    fn name(self) -> &'static str {
        match self {
            LossKind::Personalized => "L_p",
            LossKind::Shared => "L_s",
            LossKind::Adversarial => "L_adv",
        }
    }
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        in_channels: 1,
        height: 4,
        width: 4,
        hidden_channels: 2,
        feature_channels: 3,
        kernel: 3,
        num_classes: 2,
    }
}

fn random_batch(rng: &mut Rng, spec: &ModelSpec, b: usize) -> Result<Batch> {
    let images = gaussian(rng, &[b, spec.in_channels, spec.height, spec.width], 1.0);
    let labels = (0..b).map(|_| rng.random_range(0..spec.num_classes)).collect();
    Batch::new(images, labels, spec.num_classes)
}

fn random_model(rng: &mut Rng, spec: ModelSpec) -> Result<ForgeryModel> {
    let mut model = ForgeryModel::init(spec, &mut rng.clone(), rng)?;
    // non-zero biases exercise every term
    for p in model.params_mut() {
        if p.name.ends_with("bias") {
            let n = p.value.numel();
            p.value = gaussian(rng, &[n], 0.1).tracked();
        }
    }
    Ok(model)
}

/// Value of one loss, with gradients flowing to `trainable` parameters.
fn loss_on_tape(
    model: &ForgeryModel,
    batch: &Batch,
    rng: &Rng,
    kind: LossKind,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(crate::model::MixedForward, Var)> {
    let mut fwd = forward_mixed(model, batch, &mut rng.clone(), Mixing::Random, trainable)?;
    let paired = fwd.paired_labels(&batch.labels);
    let loss = match kind {
        LossKind::Personalized => loss_personalized(&mut fwd.tape, fwd.log_probs_p, &batch.labels)?,
        LossKind::Shared => loss_shared(&mut fwd.tape, fwd.log_probs_s, &paired)?,
        LossKind::Adversarial => loss_adversarial(&mut fwd.tape, fwd.log_probs_adv)?,
    };
    Ok((fwd, loss))
}

/// Finite differences of one loss against every parameter it trains.
fn check_loss(rng: &mut Rng, kind: LossKind) -> Result<f64> {
    let spec = tiny_spec();
    let model = random_model(rng, spec)?;
    let b = dim(rng, 2, 4);
    let batch = random_batch(rng, &spec, b)?;
    let fwd_rng = rng.clone();
    let trainable = |name: &str| Branch::of(name).is_some_and(|b| kind.branches().contains(&b));

    let (mut fwd, loss) = loss_on_tape(&model, &batch, &fwd_rng, kind, &trainable)?;
    fwd.tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, p) in model.params().iter().enumerate() {
        if !trainable(&p.name) {
            continue;
        }
        let analytic = fwd.tape.grad(fwd.bound.vars()[i]).expect("trainable").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let at = |delta: f64| -> Result<f64> {
                let mut shifted = model.clone();
                shifted.params_mut()[i].value.data_mut()[j] += delta;
                let (f, l) = loss_on_tape(&shifted, &batch, &fwd_rng, kind, &|_| false)?;
                f.tape.scalar_value(l)
            };
            *slot = five_point(at)?;
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn gradient_correctness() -> Outcome {
    timed(1, "gradient correctness", || {
        let mut rng = derive(1, Domain::Server, 1);
        let mut failures = Vec::new();
        let mut worst: f64 = 0.0;
        let mut instances = 0;
        for case in op_cases() {
            let mut case_worst: f64 = 0.0;
            for _ in 0..GRAD_TRIALS {
                let (inputs, build) = (case.make)(&mut rng);
                case_worst = case_worst.max(check_op(&mut rng, &inputs, &*build)?);
                instances += 1;
            }
            if case_worst > FD_TOLERANCE {
                failures.push(format!("{} {case_worst:.2e}", case.name));
            }
            worst = worst.max(case_worst);
        }
        for kind in [LossKind::Personalized, LossKind::Shared, LossKind::Adversarial] {
            let mut case_worst: f64 = 0.0;
            for _ in 0..GRAD_TRIALS {
                case_worst = case_worst.max(check_loss(&mut rng, kind)?);
                instances += 1;
            }
            if case_worst > FD_TOLERANCE {
                failures.push(format!("{} {case_worst:.2e}", kind.name()));
            }
            worst = worst.max(case_worst);
        }
        let detail = format!("{instances} instances, worst relative error {worst:.2e} (limit {FD_TOLERANCE:.0e})");
        if failures.is_empty() {
            Ok((true, detail))
        } else {
            Ok((false, format!("{detail}; over limit: {}", failures.join(", "))))
        }
    })
}

// ---------------------------------------------------------------------------
// statistics

fn max_stat_gap(a: &[ChannelStats], b: &[ChannelStats]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let m = x.mean().iter().zip(y.mean()).map(|(p, q)| (p - q).abs());
            let s = x.std().iter().zip(y.std()).map(|(p, q)| (p - q).abs());
            m.chain(s).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn statistic_postconditions() -> Outcome {
    timed(2, "statistic post-conditions", || {
        const TRIALS: usize = 100;
        let mut rng = derive(2, Domain::Server, 2);
        let mut worst: f64 = 0.0;
        for _ in 0..TRIALS {
            let (b, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
            let shape = [b, c, dim(&mut rng, 2, 6), dim(&mut rng, 2, 6)];
            let (s1, s2) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
            let e = gaussian(&mut rng, &shape, s1);
            let e_prime = gaussian(&mut rng, &shape, s2);
            let target: Vec<ChannelStats> = (0..b)
                .map(|_| {
                    let mean = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let std = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
                    ChannelStats::new(mean, std)
                })
                .collect::<Result<_>>()?;
            let rp = statmix::transform_personalized(&e, &target)?;
            worst = worst.max(max_stat_gap(&statmix::channel_stats(&rp)?, &target));
            let stats_e = statmix::channel_stats(&e)?;
            let rs = statmix::transform_shared(&e_prime, &stats_e)?;
            worst = worst.max(max_stat_gap(&statmix::channel_stats(&rs)?, &stats_e));
        }
        Ok((worst <= 1e-4, format!("{TRIALS} trials, worst deviation {worst:.2e} (limit 1e-4)")))
    })
}

// ---------------------------------------------------------------------------
// routing

pub fn gradient_routing() -> Outcome {
    timed(3, "gradient routing", || {
        const TRIALS: usize = 20;
        let mut rng = derive(3, Domain::Server, 3);
        let mut violations = Vec::new();
        for trial in 0..TRIALS {
            let spec = if trial % 2 == 0 { tiny_spec() } else { ModelSpec::default() };
            let model = random_model(&mut rng, spec)?;
            let b = dim(&mut rng, 2, 6);
            let batch = random_batch(&mut rng, &spec, b)?;
            for kind in [LossKind::Personalized, LossKind::Shared, LossKind::Adversarial] {
                let (mut fwd, loss) = loss_on_tape(&model, &batch, &rng, kind, &|_| true)?;
                fwd.tape.backward(loss)?;
                for (p, v) in model.params().iter().zip(fwd.bound.vars()) {
                    let grad = fwd.tape.grad(*v).expect("all trainable");
                    let routed = Branch::of(&p.name).is_some_and(|b| kind.branches().contains(&b));
                    let zero = grad.iter().all(|g| *g == 0.0);
                    // outside the routed set grads must be exactly zero; the
                    // weights inside it must actually receive a gradient
                    if (!routed && !zero) || (routed && p.name.ends_with("weight") && zero) {
                        violations.push(format!("trial {trial} {} {}", kind.name(), p.name));
                    }
                }
            }
        }
        let detail = format!("{TRIALS} trials × 3 losses");
        if violations.is_empty() {
            Ok((true, format!("{detail}, all gradients confined to their branches")))
        } else {
            Ok((false, format!("{detail}; misrouted: {}", violations.join(", "))))
        }
    })
}

// ---------------------------------------------------------------------------
// aggregation

fn small_federation(mode: Mode, clients: usize, samples: usize, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        data: DataSource::Synthetic(SyntheticSpec {
            clients,
            samples_per_client: samples,
            ..SyntheticSpec::default()
        }),
        round: RoundConfig {
            rounds,
            ..RoundConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn aggregation() -> Outcome {
    timed(4, "aggregation oracle and scheduling independence", || {
        const TRIALS: usize = 200;
        let mut rng = derive(4, Domain::Server, 4);
        let mut worst: f64 = 0.0;
        for _ in 0..TRIALS {
            let n = dim(&mut rng, 1, 8);
            let shapes: Vec<usize> = (0..dim(&mut rng, 1, 3)).map(|_| dim(&mut rng, 1, 10)).collect();
            let snaps: Vec<SharedSnapshot> = (0..n)
                .map(|_| SharedSnapshot {
                    params: shapes
                        .iter()
                        .enumerate()
                        .map(|(i, &len)| NamedTensor {
                            name: format!("p{i}"),
                            shape: vec![len],
                            data: gaussian(&mut rng, &[len], 10.0).data().to_vec(),
                        })
                        .collect(),
                })
                .collect();
            let refs: Vec<&SharedSnapshot> = snaps.iter().collect();
            let got = aggregate(&refs, AggregationRule::Mean, 1.0)?;
            for (i, &len) in shapes.iter().enumerate() {
                for j in 0..len {
                    let mean = snaps.iter().map(|s| s.params[i].data[j] / n as f64).sum::<f64>();
                    worst = worst.max((got.params[i].data[j] - mean).abs());
                }
            }
        }

        let cfg = small_federation(Mode::Fedpr, 4, 60, 2);
        let one = run_seed(&cfg, 11, 1)?.checkpoint.encode()?;
        let four = run_seed(&cfg, 11, 4)?.checkpoint.encode()?;
        let identical = one == four;
        Ok((
            worst <= 1e-12 && identical,
            format!(
                "{TRIALS} trials, worst deviation {worst:.1e} (limit 1e-12); 1 vs 4 threads {}",
                if identical { "bitwise identical" } else { "DIFFER" }
            ),
        ))
    })
}

// ---------------------------------------------------------------------------
// metrics

fn brute_accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let mut correct = 0;
    for (s, l) in scores.iter().zip(labels) {
        let predicted = if *s >= 0.5 { 1 } else { 0 };
        if predicted == *l {
            correct += 1;
        }
    }
    correct as f64 / scores.len() as f64
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (sp, _) in scores.iter().zip(labels).filter(|(_, l)| **l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| **l == 0) {
            pairs += 1.0;
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Counts errors at every candidate threshold independently, then
/// interpolates at the first sign change of `FPR − FNR`.
fn brute_eer(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates = |t: f64| {
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
        let fneg = scores.iter().zip(labels).filter(|(s, l)| **s < t && **l == 1).count() as f64;
        (fp / neg, fneg / pos)
    };
    // thresholds below every score predict all positive
    let mut points = vec![(1.0, 0.0)];
    points.extend(thresholds.iter().map(|&t| rates(t)));
    for w in points.windows(2) {
        let ((f0, n0), (f1, n1)) = (w[0], w[1]);
        if f0 == n0 {
            return f0;
        }
        let (d0, d1) = (f0 - n0, f1 - n1);
        if d0 > 0.0 && d1 < 0.0 {
            return f0 + d0 / (d0 - d1) * (f1 - f0);
        }
    }
    let (f, _) = *points.last().expect("non-empty");
    f
}

pub fn metric_oracles() -> Outcome {
    timed(5, "metric oracles", || {
        const TRIALS: usize = 1000;
        let mut rng = derive(5, Domain::Server, 5);
        let mut mismatches = Vec::new();
        let mut eer_worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let n = dim(&mut rng, 1, 100);
            // coarse grids force ties
            let levels = [2, 5, 20, 1_000_000][trial % 4];
            let grid = Uniform::new(0, levels).expect("non-empty range");
            let scores: Vec<f64> = (0..n).map(|_| grid.sample(&mut rng) as f64 / (levels - 1) as f64).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if accuracy(&scores, &labels, 0.5)? != brute_accuracy(&scores, &labels) {
                mismatches.push(format!("accuracy trial {trial}"));
            }
            let both = labels.contains(&0) && labels.contains(&1);
            if !both {
                if auc(&scores, &labels).is_ok() || eer(&scores, &labels).is_ok() {
                    mismatches.push(format!("single-class trial {trial} accepted"));
                }
                continue;
            }
            if auc(&scores, &labels)? != brute_auc(&scores, &labels) {
                mismatches.push(format!("auc trial {trial}"));
            }
            let gap = (eer(&scores, &labels)? - brute_eer(&scores, &labels)).abs();
            eer_worst = eer_worst.max(gap);
            if gap > 1e-9 {
                mismatches.push(format!("eer trial {trial}"));
            }
        }
        let detail = format!("{TRIALS} trials of length ≤ 100, worst EER gap {eer_worst:.1e}");
        if mismatches.is_empty() {
            Ok((true, detail))
        } else {
            Ok((false, format!("{detail}; mismatches: {}", mismatches.join(", "))))
        }
    })
}

// ---------------------------------------------------------------------------
// training

/// Scans every message crossing the client boundary for personalized
/// parameter names and raw training pixels.
struct PrivacyScan {
    forbidden_names: Vec<String>,
    pixel_values: HashSet<u64>,
    pixel_bytes: HashSet<[u8; 16]>,
    messages: usize,
    violations: Vec<String>,
}

impl PrivacyScan {
    fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let data = cfg.data.load(seed)?;
        let model = ForgeryModel::init(cfg.model, &mut derive(0, Domain::Server, 0), &mut derive(0, Domain::Server, 1))?;
        let forbidden_names = cfg
            .mode
            .partition(&model)
            .personalized
            .into_iter()
            .collect();
        let mut pixel_values = HashSet::new();
        let mut pixel_bytes = HashSet::new();
        for s in data.iter().flat_map(|d| d.train.iter().chain(&d.test)) {
            let px = s.image.data();
            pixel_values.extend(px.iter().map(|v| v.to_bits()));
            // the first four pixels of each image as raw f32 and f64 bytes
            let mut f32_bytes = [0u8; 16];
            for (chunk, v) in f32_bytes.chunks_exact_mut(4).zip(px) {
                chunk.copy_from_slice(&(*v as f32).to_le_bytes());
            }
            pixel_bytes.insert(f32_bytes);
            let mut f64_bytes = [0u8; 16];
            for (chunk, v) in f64_bytes.chunks_exact_mut(8).zip(px) {
                chunk.copy_from_slice(&v.to_le_bytes());
            }
            pixel_bytes.insert(f64_bytes);
        }
        Ok(Self {
            forbidden_names,
            pixel_values,
            pixel_bytes,
            messages: 0,
            violations: Vec::new(),
        })
    }

    fn inspect(&mut self, msg: Message<'_>) {
        self.messages += 1;
        let (label, json, snapshot) = match msg {
            Message::Upload(u) => (
                format!("upload from client {}", u.client_id),
                serde_json::to_vec(u),
                &u.shared,
            ),
            Message::Broadcast(s) => ("broadcast".to_string(), serde_json::to_vec(s), s),
        };
        let Ok(json) = json else {
            self.violations.push(format!("{label}: not serializable"));
            return;
        };
        let text = String::from_utf8_lossy(&json);
        for name in &self.forbidden_names {
            if text.contains(name.as_str()) {
                self.violations.push(format!("{label} names {name}"));
            }
        }
        let values: Vec<f64> = snapshot.params.iter().flat_map(|p| p.data.iter().copied()).collect();
        if values.iter().any(|v| self.pixel_values.contains(&v.to_bits())) {
            self.violations.push(format!("{label} carries a pixel value"));
        }
        let mut binary: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        binary.extend_from_slice(&json);
        if binary
            .windows(16)
            .any(|w| self.pixel_bytes.contains(<&[u8; 16]>::try_from(w).expect("window")))
        {
            self.violations.push(format!("{label} contains raw image bytes"));
        }
    }
}

fn default_run(mode: Mode, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        round: RoundConfig {
            rounds,
            ..RoundConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

/// Ablation direction, diagonal dominance and the privacy scan, which share
/// the same training runs.
pub fn training_checks(settings: &Settings) -> (Outcome, Outcome, Outcome) {
    let start = Instant::now();
    let fedpr_cfg = default_run(Mode::Fedpr, settings.rounds);
    let fedavg_cfg = default_run(Mode::Fedavg, settings.rounds);
    let mut scan: Option<PrivacyScan> = None;
    let runs = (|| -> Result<Vec<(SeedOutcome, SeedOutcome)>> {
        let mut runs = Vec::new();
        for (i, &seed) in settings.seeds.iter().enumerate() {
            let fedpr = if i == 0 {
                let mut s = PrivacyScan::new(&fedpr_cfg, seed)?;
                let out = run_seed_audited(&fedpr_cfg, seed, settings.threads, |m| s.inspect(m))?;
                scan = Some(s);
                out
            } else {
                run_seed(&fedpr_cfg, seed, settings.threads)?
            };
            let fedavg = run_seed(&fedavg_cfg, seed, settings.threads)?;
            runs.push((fedpr, fedavg));
        }
        Ok(runs)
    })();
    let elapsed = start.elapsed();
    let fail = |id, name, e: &dyn fmt::Display| Outcome {
        id,
        name,
        passed: false,
        detail: format!("error: {e}"),
        elapsed,
    };
    let runs = match runs {
        Ok(r) => r,
        Err(e) => {
            return (
                fail(6, "ablation direction", &e),
                fail(7, "diagonal dominance", &e),
                fail(9, "privacy boundary", &e),
            )
        }
    };

    let pr: Vec<f64> = runs.iter().map(|(p, _)| p.mean_self_accuracy()).collect();
    let avg: Vec<f64> = runs.iter().map(|(_, a)| a.mean_self_accuracy()).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let gap = 100.0 * (mean(&pr) - mean(&avg));
    let per_seed: Vec<String> = pr
        .iter()
        .zip(&avg)
        .map(|(p, a)| format!("{:.1}/{:.1}", 100.0 * p, 100.0 * a))
        .collect();
    let in_time = elapsed < Duration::from_secs(300);
    let ablation = Outcome {
        id: 6,
        name: "ablation direction",
        passed: settings.seeds.len() >= 5 && gap >= 5.0 && in_time,
        detail: format!(
            "{} seeds × {} rounds: FedPR {:.1}% vs FedAvg {:.1}%, gap {gap:.1} points (need ≥ 5.0); per seed {}; {:.0} s (limit 300)",
            settings.seeds.len(),
            settings.rounds,
            100.0 * mean(&pr),
            100.0 * mean(&avg),
            per_seed.join(" "),
            elapsed.as_secs_f64()
        ),
        elapsed,
    };

    let dominant = runs.iter().filter(|(p, _)| p.matrix.diagonal_dominant()).count();
    let needed = (settings.seeds.len() * 4).div_ceil(5);
    let dominance = Outcome {
        id: 7,
        name: "diagonal dominance",
        passed: settings.seeds.len() >= 5 && dominant >= needed,
        detail: format!("{dominant} of {} seeds diagonal-dominant (need {needed})", settings.seeds.len()),
        elapsed,
    };

    let privacy = match scan {
        Some(s) => Outcome {
            id: 9,
            name: "privacy boundary",
            passed: s.violations.is_empty() && s.messages > 0,
            detail: if s.violations.is_empty() {
                format!("{} messages over {} rounds, none leaked", s.messages, settings.rounds)
            } else {
                s.violations.join("; ")
            },
            elapsed,
        },
        None => fail(9, "privacy boundary", &"no audited run"),
    };
    (ablation, dominance, privacy)
}

pub fn degenerate_equivalence() -> Outcome {
    timed(8, "degenerate-federation equivalence", || {
        let fedpr = small_federation(Mode::Fedpr, 1, 200, 3);
        let central = ExperimentConfig {
            mode: Mode::Centralized,
            ..fedpr.clone()
        };
        let a = run_seed(&fedpr, 21, 1)?;
        let b = run_seed(&central, 21, 1)?;
        let strip = |o: &SeedOutcome| {
            o.history
                .iter()
                .map(|r| crate::federation::RoundReport {
                    wall_clock_ms: 0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        let same_history = serde_json::to_string(&strip(&a)).ok() == serde_json::to_string(&strip(&b)).ok();
        let same_params = a.checkpoint.encode()? == b.checkpoint.encode()?;
        Ok((
            same_history && same_params,
            format!(
                "K=1, w=1, 3 rounds: history {}, parameters {}",
                if same_history { "identical" } else { "DIFFER" },
                if same_params { "bitwise identical" } else { "DIFFER" }
            ),
        ))
    })
}
