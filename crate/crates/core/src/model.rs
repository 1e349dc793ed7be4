//! The three-branch client network and its training objective.
//!
//! * `ff`: feature extractor, two same-padded 3×3 convolutions with ReLU,
//!   producing the feature map `e`.
//! * `fp`: personalized head, fed the statistic-interpolated map.
//! * `fs`: shared head, fed the statistic-swapped map of the paired sample.
//!
//! Each head flattens its `C×H×W` input and applies one linear layer, so it
//! can weigh spatial positions individually.
//!
//! Gradient routing is fixed by graph construction:
//!
//! | loss   | reaches    |
//! |--------|------------|
//! | `L_p`  | `ff`, `fp` |
//! | `L_s`  | `fs` (features detached) |
//! | `L_adv`| `ff` (`fs` frozen)       |

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::statmix::{self, StatVars};
use crate::tensor::{sgd_step, ParamTensor, Tape, Tensor, Var};

/// Label of the "fake" class; inference scores are its probability.
pub const FAKE_CLASS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    FeatureExtractor,
    Personalized,
    Shared,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::FeatureExtractor, Branch::Personalized, Branch::Shared];

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::FeatureExtractor => "ff",
            Branch::Personalized => "fp",
            Branch::Shared => "fs",
        }
    }

    pub fn of(name: &str) -> Option<Branch> {
        let prefix = name.split('.').next()?;
        Branch::ALL.into_iter().find(|b| b.prefix() == prefix)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden_channels: usize,
    pub feature_channels: usize,
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 16,
            width: 16,
            hidden_channels: 8,
            feature_channels: 16,
            kernel: 3,
            num_classes: 2,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.height,
            self.width,
            self.hidden_channels,
            self.feature_channels,
            self.kernel,
        ];
        if dims.contains(&0) || self.kernel.is_multiple_of(2) || self.num_classes < 2 {
            return Err(Error::Config(format!("invalid model spec {self:?}")));
        }
        Ok(())
    }

    fn head_inputs(&self) -> usize {
        self.feature_channels * self.height * self.width
    }

    /// Names and shapes of every parameter, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = vec![
            ("ff.conv1.weight".into(), vec![self.hidden_channels, self.in_channels, k, k]),
            ("ff.conv1.bias".into(), vec![self.hidden_channels]),
            ("ff.conv2.weight".into(), vec![self.feature_channels, self.hidden_channels, k, k]),
            ("ff.conv2.bias".into(), vec![self.feature_channels]),
        ];
        for head in ["fp", "fs"] {
            out.push((format!("{head}.linear.weight"), vec![self.num_classes, self.head_inputs()]));
            out.push((format!("{head}.linear.bias"), vec![self.num_classes]));
        }
        out
    }
}

/// Relative weights of the three losses.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config(format!(
                "loss weights {w:?} must be finite, non-negative and not all zero"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::shape("batch", shape, &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How the statistic-interpolation weight λ is chosen per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mixing {
    /// λ ~ U(0, 1), drawn from the client RNG.
    Random,
    /// The same λ for every sample; `Fixed(1.0)` disables mixing.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgeryModel {
    spec: ModelSpec,
    params: Vec<ParamTensor>,
}

/// Tape handles for one bound copy of the model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    /// Constant copies of the `fs` weights used by the adversarial term.
    fs_frozen: (Var, Var),
}

impl Bound {
    /// One handle per parameter, in [`ForgeryModel::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const FP_W: usize = 4;
const FP_B: usize = 5;
const FS_W: usize = 6;
const FS_B: usize = 7;

impl ForgeryModel {
    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero. `ff` and `fs` draw
    /// from `shared_rng`, `fp` from `personal_rng`.
    pub fn init(spec: ModelSpec, shared_rng: &mut Rng, personal_rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (name, shape) in spec.layout() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let rng = if name.starts_with("fp.") {
                    &mut *personal_rng
                } else {
                    &mut *shared_rng
                };
                (0..numel).map(|_| dist.sample(rng)).collect()
            };
            params.push(ParamTensor::new(name, Tensor::new(shape, data)?));
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a model from named parameter values (e.g. a checkpoint).
    pub fn from_params(spec: ModelSpec, params: Vec<ParamTensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::Partition(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.shape() {
                return Err(Error::Partition(format!(
                    "parameter {} {:?} does not match layout entry {name} {shape:?}",
                    p.name,
                    p.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn branch_params(&self, branch: Branch) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter().filter(move |p| Branch::of(&p.name) == Some(branch))
    }

    /// Sets both heads' weights and biases to zero.
    pub fn zero_heads(&mut self) {
        for p in &mut self.params[FP_W..] {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Records the parameters on `tape`; those for which `trainable` returns
    /// true become gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p, trainable(&p.name)))
            .collect();
        let fs_frozen = (
            tape.param(&self.params[FS_W], false),
            tape.param(&self.params[FS_B], false),
        );
        Bound { vars, fs_frozen }
    }

    /// `e = relu(conv2(relu(conv1(x))))`
    pub fn features(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let v = &bound.vars;
        let h = tape.conv2d(images, v[CONV1_W], Some(v[CONV1_B]))?;
        let h = tape.relu(h)?;
        let e = tape.conv2d(h, v[CONV2_W], Some(v[CONV2_B]))?;
        tape.relu(e)
    }

    fn head(tape: &mut Tape, weight: Var, bias: Var, input: Var) -> Result<Var> {
        let flat = tape.flatten(input)?;
        let logits = tape.linear(flat, weight, Some(bias))?;
        tape.log_softmax(logits)
    }

    pub fn personalized_head(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        Self::head(tape, bound.vars[FP_W], bound.vars[FP_B], input)
    }

    pub fn shared_head(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        Self::head(tape, bound.vars[FS_W], bound.vars[FS_B], input)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = &self.spec;
        let expected = [s.in_channels, s.height, s.width];
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape("model input", shape, &expected));
        }
        Ok(())
    }

    /// Adds the tape's gradients into every parameter bound as trainable.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(*v) {
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Plain personalized-branch log-probabilities, no statistic mixing.
    pub fn log_probs(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &|_| false);
        let x = tape.constant(images);
        let e = self.features(&mut tape, &bound, x)?;
        let lp = self.personalized_head(&mut tape, &bound, e)?;
        Ok(tape.value(lp))
    }

    /// Probability of [`FAKE_CLASS`] per sample from the personalized branch.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<f64>> {
        let lp = self.log_probs(images)?;
        let n = self.spec.num_classes;
        Ok(lp.data().chunks_exact(n).map(|row| row[FAKE_CLASS].exp()).collect())
    }
}

/// A random permutation of `0..n` without fixed points (for `n ≥ 2`).
pub fn pair_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    if n >= 2 {
        for i in 0..n {
            if perm[i] == i {
                perm.swap(i, (i + 1) % n);
            }
        }
    }
    perm
}

/// Result of the training forward pass. All handles live on `tape`.
pub struct MixedForward {
    pub tape: Tape,
    pub bound: Bound,
    /// Personalized branch on the statistic-interpolated map.
    pub log_probs_p: Var,
    /// Shared branch on the swapped map; features detached, `fs` live.
    pub log_probs_s: Var,
    /// The same prediction with features live and `fs` frozen; its value
    /// equals `log_probs_s`.
    pub log_probs_adv: Var,
    /// `x'[i] = x[pair_index[i]]`.
    pub pair_index: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl MixedForward {
    pub fn paired_labels(&self, labels: &[usize]) -> Vec<usize> {
        self.pair_index.iter().map(|&j| labels[j]).collect()
    }
}

pub fn forward_mixed(
    model: &ForgeryModel,
    batch: &Batch,
    rng: &mut Rng,
    mixing: Mixing,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<MixedForward> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Batch(format!("pairing needs at least 2 samples, got {b}")));
    }
    model.check_images(&batch.images)?;
    let pair_index = pair_permutation(b, rng);
    let lambdas: Vec<f64> = match mixing {
        Mixing::Random => (0..b).map(|_| rng.random::<f64>()).collect(),
        Mixing::Fixed(l) => vec![l; b],
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let x = tape.constant(&batch.images);
    let e = model.features(&mut tape, &bound, x)?;
    let e_pair = tape.gather_rows(e, &pair_index)?;
    let stats_e = statmix::stats_on_tape(&mut tape, e)?;
    let stats_pair = statmix::stats_on_tape(&mut tape, e_pair)?;

    let star = statmix::interpolate_on_tape(&mut tape, stats_e, stats_pair, &lambdas)?;
    let rp = statmix::personalized_on_tape(&mut tape, e, star)?;
    let log_probs_p = model.personalized_head(&mut tape, &bound, rp)?;

    let e_pair_d = tape.detach(e_pair);
    let stats_e_d = StatVars {
        mean: tape.detach(stats_e.mean),
        std: tape.detach(stats_e.std),
    };
    let rs_d = statmix::shared_on_tape(&mut tape, e_pair_d, stats_e_d)?;
    let log_probs_s = model.shared_head(&mut tape, &bound, rs_d)?;

    let rs = statmix::shared_on_tape(&mut tape, e_pair, stats_e)?;
    let (fw, fb) = bound.fs_frozen;
    let log_probs_adv = ForgeryModel::head(&mut tape, fw, fb, rs)?;

    Ok(MixedForward {
        tape,
        bound,
        log_probs_p,
        log_probs_s,
        log_probs_adv,
        pair_index,
        lambdas,
    })
}

/// Mean `−log p[label]` of the personalized branch.
pub fn loss_personalized(tape: &mut Tape, log_probs_p: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(log_probs_p, labels)
}

/// Mean `−log p[label']` of the shared branch against the paired labels.
pub fn loss_shared(tape: &mut Tape, log_probs_s: Var, paired_labels: &[usize]) -> Result<Var> {
    tape.nll(log_probs_s, paired_labels)
}

/// Mean cross-entropy between the uniform distribution and the shared
/// branch's prediction.
pub fn loss_adversarial(tape: &mut Tape, log_probs_s: Var) -> Result<Var> {
    tape.uniform_cross_entropy(log_probs_s)
}

/// `α·L_adv + β·L_p + γ·L_s`
pub fn total_loss(tape: &mut Tape, lp: Var, ls: Var, ladv: Var, w: LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(ladv, w.alpha), (lp, w.beta), (ls, w.gamma)])
}

pub fn total_loss_value(lp: f64, ls: f64, ladv: f64, w: LossWeights) -> f64 {
    w.alpha * ladv + w.beta * lp + w.gamma * ls
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub personalized: f64,
    pub shared: f64,
    pub adversarial: f64,
}

/// Optimizer settings for one local update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub mixing: Mixing,
    pub lr: f64,
    pub momentum: f64,
}

/// One SGD step on `total_loss`, updating only parameters accepted by
/// `trainable`.
pub fn train_step(
    model: &mut ForgeryModel,
    batch: &Batch,
    rng: &mut Rng,
    cfg: &StepConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StepLosses> {
    let mut fwd = forward_mixed(model, batch, rng, cfg.mixing, trainable)?;
    let paired = fwd.paired_labels(&batch.labels);
    let tape = &mut fwd.tape;
    let lp = loss_personalized(tape, fwd.log_probs_p, &batch.labels)?;
    let ls = loss_shared(tape, fwd.log_probs_s, &paired)?;
    let ladv = loss_adversarial(tape, fwd.log_probs_adv)?;
    let total = total_loss(tape, lp, ls, ladv, cfg.weights)?;
    let losses = StepLosses {
        total: tape.scalar_value(total)?,
        personalized: tape.scalar_value(lp)?,
        shared: tape.scalar_value(ls)?,
        adversarial: tape.scalar_value(ladv)?,
    };
    tape.backward(total)?;
    model.accumulate_grads(&fwd.tape, &fwd.bound)?;
    let updated = model.params.iter_mut().filter(|p| trainable(&p.name));
    sgd_step(updated, cfg.lr, cfg.momentum)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Domain};

    fn model(seed: u64) -> ForgeryModel {
        let mut a = derive(seed, Domain::ServerInit, 0);
        let mut b = derive(seed, Domain::ClientInit, 0);
        ForgeryModel::init(ModelSpec::default(), &mut a, &mut b).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut rng = derive(seed, Domain::ClientData, 0);
        let data = (0..n * 256).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let images = Tensor::new(vec![n, 1, 16, 16], data).unwrap();
        Batch::new(images, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    fn scalar_loss(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, lp: &[f64], n: usize) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::new(vec![lp.len() / n, n], lp.to_vec()).unwrap());
        let l = f(&mut tape, v).unwrap();
        tape.scalar_value(l).unwrap()
    }

    #[test]
    fn personalized_loss_values() {
        let perfect = scalar_loss(|t, v| loss_personalized(t, v, &[1]), &[f64::MIN_POSITIVE.ln(), 0.0], 2);
        assert_eq!(perfect, 0.0);
        let half = 0.5f64.ln();
        let uniform = scalar_loss(|t, v| loss_personalized(t, v, &[0]), &[half, half], 2);
        assert!((uniform - 2f64.ln()).abs() < 1e-12);
        let quarter = scalar_loss(|t, v| loss_personalized(t, v, &[0]), &[0.25f64.ln(), 0.75f64.ln()], 2);
        assert!((quarter - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn shared_loss_values() {
        let half = 0.5f64.ln();
        let perfect = scalar_loss(|t, v| loss_shared(t, v, &[0]), &[0.0, -50.0], 2);
        assert_eq!(perfect, 0.0);
        let uniform = scalar_loss(|t, v| loss_shared(t, v, &[1]), &[half, half], 2);
        assert!((uniform - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_values() {
        let half = 0.5f64.ln();
        let uniform = scalar_loss(loss_adversarial, &[half, half], 2);
        assert!((uniform - 2f64.ln()).abs() < 1e-12);
        let skewed = scalar_loss(loss_adversarial, &[0.9f64.ln(), 0.1f64.ln()], 2);
        assert!((skewed - 1.2039728043259361).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let only_p = LossWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss_value(0.7, 0.3, 0.9, only_p), 0.7);
        assert!((total_loss_value(1.0, 1.0, 1.0, LossWeights::default()) - 2.1).abs() < 1e-15);
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, LossWeights::default()), 0.0);

        let mut tape = Tape::new();
        let one = tape.constant(&Tensor::scalar(1.0));
        let t = total_loss(&mut tape, one, one, one, LossWeights::default()).unwrap();
        assert!((tape.scalar_value(t).unwrap() - 2.1).abs() < 1e-15);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert!(zero.validate().is_err());
        let negative = LossWeights {
            alpha: -0.1,
            ..LossWeights::default()
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn forward_rows_are_distributions() {
        let m = model(1);
        let b = batch(6, 2);
        let mut rng = derive(3, Domain::ClientTrain, 0);
        let fwd = forward_mixed(&m, &b, &mut rng, Mixing::Random, &|_| true).unwrap();
        for v in [fwd.log_probs_p, fwd.log_probs_s, fwd.log_probs_adv] {
            for row in fwd.tape.data(v).chunks_exact(2) {
                let s: f64 = row.iter().map(|x| x.exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(fwd.tape.data(fwd.log_probs_s), fwd.tape.data(fwd.log_probs_adv));
        let mut sorted = fwd.pair_index.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert!(fwd.pair_index.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn identical_images_without_mixing_match_plain_forward() {
        let m = model(4);
        let one = batch(1, 5);
        let images = Tensor::new(vec![4, 1, 16, 16], one.images.data().repeat(4)).unwrap();
        let b = Batch::new(images.clone(), vec![0, 1, 0, 1], 2).unwrap();
        let mut rng = derive(6, Domain::ClientTrain, 0);
        let fwd = forward_mixed(&m, &b, &mut rng, Mixing::Fixed(1.0), &|_| false).unwrap();
        let plain = m.log_probs(&images).unwrap();
        for (a, p) in fwd.tape.data(fwd.log_probs_p).iter().zip(plain.data()) {
            assert!((a - p).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sample_batch_is_rejected() {
        let m = model(1);
        let mut rng = derive(0, Domain::ClientTrain, 0);
        let err = forward_mixed(&m, &batch(1, 0), &mut rng, Mixing::Random, &|_| true);
        assert!(matches!(err, Err(Error::Batch(_))));
    }

    #[test]
    fn forward_is_reproducible() {
        let m = model(8);
        let b = batch(5, 9);
        let run = || {
            let mut rng = derive(10, Domain::ClientTrain, 0);
            let f = forward_mixed(&m, &b, &mut rng, Mixing::Random, &|_| true).unwrap();
            (f.tape.value(f.log_probs_p), f.tape.value(f.log_probs_s), f.pair_index)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_scores() {
        let mut m = model(11);
        let images = batch(4, 12).images;
        let scores = m.infer(&images).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(scores, m.infer(&images).unwrap());
        m.zero_heads();
        assert!(m.infer(&images).unwrap().iter().all(|&s| s == 0.5));
        let wrong = Tensor::zeros(vec![2, 1, 8, 8]);
        assert!(matches!(m.infer(&wrong), Err(Error::Shape { .. })));
    }

    fn changed_branches(before: &ForgeryModel, after: &ForgeryModel) -> Vec<Branch> {
        let mut out: Vec<Branch> = before
            .params()
            .iter()
            .zip(after.params())
            .filter(|(a, b)| a.value.data() != b.value.data())
            .filter_map(|(a, _)| Branch::of(&a.name))
            .collect();
        out.dedup();
        out
    }

    fn step_on(weights: LossWeights) -> Vec<Branch> {
        let mut m = model(20);
        let before = m.clone();
        let b = batch(8, 21);
        let mut rng = derive(22, Domain::ClientTrain, 0);
        let cfg = StepConfig {
            weights,
            mixing: Mixing::Random,
            lr: 0.1,
            momentum: 0.5,
        };
        train_step(&mut m, &b, &mut rng, &cfg, &|_| true).unwrap();
        changed_branches(&before, &m)
    }

    #[test]
    fn shared_loss_only_moves_shared_head() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
        };
        assert_eq!(step_on(w), vec![Branch::Shared]);
    }

    #[test]
    fn adversarial_loss_only_moves_extractor() {
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(step_on(w), vec![Branch::FeatureExtractor]);
    }

    #[test]
    fn personalized_loss_moves_extractor_and_personal_head() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        };
        assert_eq!(step_on(w), vec![Branch::FeatureExtractor, Branch::Personalized]);
    }

    #[test]
    fn layout_names_are_disjoint_and_branch_tagged() {
        let layout = ModelSpec::default().layout();
        let mut names: Vec<_> = layout.iter().map(|(n, _)| n.clone()).collect();
        assert!(names.iter().all(|n| Branch::of(n).is_some()));
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }
}
