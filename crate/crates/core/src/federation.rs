//! Synchronous federation rounds over shared/personalized parameter splits.
//!
//! Each round the server selects clients, every selected client loads the
//! global shared parameters, runs a personalized phase (only personalized
//! parameters move) followed by a shared phase (only shared parameters move),
//! and uploads its shared parameters. The server averages the uploads and
//! broadcasts the result to every client.
//!
//! Only [`SharedSnapshot`]s and scalar loss summaries cross the client
//! boundary. Selected clients train in parallel; uploads are merged in
//! ascending client id, so results do not depend on thread count.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches_per_epoch, epoch_order, stack, ClientData, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvalResult};
use crate::model::{train_step, Branch, ForgeryModel, LossWeights, Mixing, StepConfig, StepLosses};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which parameter names are uploaded and which stay on the client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionedParams {
    pub shared: BTreeSet<String>,
    pub personalized: BTreeSet<String>,
}

impl PartitionedParams {
    /// Parameters of `shared_branches` are shared; the rest are personalized.
    pub fn by_branch(model: &ForgeryModel, shared_branches: &[Branch]) -> Self {
        let (mut shared, mut personalized) = (BTreeSet::new(), BTreeSet::new());
        for p in model.params() {
            let is_shared = Branch::of(&p.name).is_some_and(|b| shared_branches.contains(&b));
            if is_shared {
                shared.insert(p.name.clone());
            } else {
                personalized.insert(p.name.clone());
            }
        }
        Self {
            shared,
            personalized,
        }
    }

    /// Feature extractor and shared head shared; personalized head local.
    pub fn standard(model: &ForgeryModel) -> Self {
        Self::by_branch(model, &[Branch::FeatureExtractor, Branch::Shared])
    }

    /// Every parameter shared (plain federated averaging).
    pub fn all_shared(model: &ForgeryModel) -> Self {
        Self::by_branch(model, &Branch::ALL)
    }

    pub fn is_shared(&self, name: &str) -> bool {
        self.shared.contains(name)
    }

    pub fn is_personalized(&self, name: &str) -> bool {
        self.personalized.contains(name)
    }

    /// Disjoint and complete over `model`'s parameters.
    pub fn validate(&self, model: &ForgeryModel) -> Result<()> {
        if let Some(n) = self.shared.intersection(&self.personalized).next() {
            return Err(Error::Partition(format!("{n} is both shared and personalized")));
        }
        let names: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let covered: BTreeSet<String> = self.shared.union(&self.personalized).cloned().collect();
        if names != covered {
            return Err(Error::Partition(format!(
                "partition covers {covered:?}, model has {names:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Values of the shared parameters, in model layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedSnapshot {
    pub params: Vec<NamedTensor>,
}

impl SharedSnapshot {
    pub fn capture(model: &ForgeryModel, partition: &PartitionedParams) -> Self {
        let params = model
            .params()
            .iter()
            .filter(|p| partition.is_shared(&p.name))
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self { params }
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Overwrites the matching parameters of `model`.
    pub fn load_into(&self, model: &mut ForgeryModel) -> Result<()> {
        for t in &self.params {
            let p = model
                .param_mut(&t.name)
                .ok_or_else(|| Error::Partition(format!("model has no parameter {}", t.name)))?;
            if p.shape() != t.shape.as_slice() {
                return Err(Error::shape("load shared", p.shape(), &t.shape));
            }
            p.value = Tensor::new(t.shape.clone(), t.data.clone())?.tracked();
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let params = self
            .params
            .iter()
            .map(|t| NamedTensor {
                data: t.data.iter().map(|v| v * factor).collect(),
                ..t.clone()
            })
            .collect();
        Self { params }
    }
}

/// How uploads are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Arithmetic mean over the selected clients.
    #[default]
    Mean,
    /// `fraction · Σ uploads`, the literal scaled-sum form.
    ScaledSum,
}

/// Combines uploads parameter by parameter, summing in the given order.
pub fn aggregate(updates: &[&SharedSnapshot], rule: AggregationRule, fraction: f64) -> Result<SharedSnapshot> {
    let Some(first) = updates.first() else {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    };
    let mut out = (*first).clone();
    for u in &updates[1..] {
        if u.params.len() != out.params.len() {
            return Err(Error::Aggregation(format!(
                "update has {} parameters, expected {}",
                u.params.len(),
                out.params.len()
            )));
        }
        for (acc, t) in out.params.iter_mut().zip(&u.params) {
            if acc.name != t.name || acc.shape != t.shape {
                return Err(Error::Aggregation(format!(
                    "mismatched parameter {} {:?} vs {} {:?}",
                    acc.name, acc.shape, t.name, t.shape
                )));
            }
            acc.data.iter_mut().zip(&t.data).for_each(|(a, v)| *a += v);
        }
    }
    let factor = match rule {
        AggregationRule::Mean => None,
        AggregationRule::ScaledSum => Some(fraction),
    };
    let n = updates.len() as f64;
    for t in &mut out.params {
        for v in &mut t.data {
            *v = match factor {
                Some(f) => f * *v,
                None => *v / n,
            };
        }
    }
    Ok(out)
}

/// `⌈fraction·K⌉` distinct client ids, sorted ascending.
pub fn select_clients(k: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("no clients to select from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("selection fraction {fraction} outside (0, 1]")));
    }
    let count = ((fraction * k as f64).ceil() as usize).clamp(1, k);
    if count == k {
        return Ok((0..k).collect());
    }
    let mut ids = index::sample(rng, k, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub rounds: usize,
    pub selection_fraction: f64,
    /// Steps of the personalized phase; `None` = one pass over the data.
    pub local_personal_steps: Option<usize>,
    /// Steps of the shared phase; `None` = one pass over the data.
    pub local_shared_steps: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Interpolate statistics with random λ; when false λ is fixed at 1.
    pub mix_statistics: bool,
    pub aggregation: AggregationRule,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            selection_fraction: 1.0,
            local_personal_steps: None,
            local_shared_steps: None,
            lr: 0.01,
            momentum: 0.5,
            batch_size: 16,
            weights: LossWeights::default(),
            mix_statistics: true,
            aggregation: AggregationRule::Mean,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "selection fraction {} outside (0, 1]",
                self.selection_fraction
            )));
        }
        if self.local_personal_steps == Some(0) || self.local_shared_steps == Some(0) {
            return Err(Error::Config("local step counts must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} < 2", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "lr {} / momentum {} out of range",
                self.lr, self.momentum
            )));
        }
        self.weights.validate()
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            weights: self.weights,
            mixing: if self.mix_statistics {
                Mixing::Random
            } else {
                Mixing::Fixed(1.0)
            },
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

/// One federated participant. Its data and personalized parameters never
/// leave this struct.
#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    model: ForgeryModel,
    data: ClientData,
    rng: Rng,
    partition: PartitionedParams,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: ForgeryModel,
        data: ClientData,
        rng: Rng,
        partition: PartitionedParams,
    ) -> Result<Self> {
        partition.validate(&model)?;
        Ok(Self {
            id,
            model,
            data,
            rng,
            partition,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &ForgeryModel {
        &self.model
    }

    pub fn partition(&self) -> &PartitionedParams {
        &self.partition
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Replaces model and RNG, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, model: ForgeryModel, rng: Rng) -> Result<()> {
        self.partition.validate(&model)?;
        self.model = model;
        self.rng = rng;
        Ok(())
    }

    pub fn test_set(&self) -> &[LabeledSample] {
        &self.data.test
    }

    pub fn evaluate_self(&self) -> Result<EvalResult> {
        evaluate_model(&self.model, &self.data.test)
    }

    pub fn shared_snapshot(&self) -> SharedSnapshot {
        SharedSnapshot::capture(&self.model, &self.partition)
    }

    fn phase(&mut self, steps: Option<usize>, cfg: &RoundConfig, shared: bool) -> Result<Vec<StepLosses>> {
        let n = self.data.train.len();
        let steps = steps.unwrap_or_else(|| batches_per_epoch(n, cfg.batch_size));
        let step_cfg = cfg.step_config();
        let partition = &self.partition;
        let trainable = |name: &str| {
            if shared {
                partition.is_shared(name)
            } else {
                partition.is_personalized(name)
            }
        };
        let mut pending = Vec::new().into_iter();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = match pending.next() {
                Some(idx) => idx,
                None => {
                    pending = epoch_order(n, cfg.batch_size, &mut self.rng).into_iter();
                    pending
                        .next()
                        .ok_or_else(|| Error::Config(format!("client {} has too little data", self.id)))?
                }
            };
            let refs: Vec<&LabeledSample> = idx.iter().map(|&i| &self.data.train[i]).collect();
            let batch = stack(&refs)?;
            losses.push(train_step(&mut self.model, &batch, &mut self.rng, &step_cfg, &trainable)?);
        }
        Ok(losses)
    }

    /// Personalized phase then shared phase, without any server exchange.
    pub fn local_round(&mut self, cfg: &RoundConfig) -> Result<StepLosses> {
        let mut losses = Vec::new();
        if !self.partition.personalized.is_empty() {
            losses.extend(self.phase(cfg.local_personal_steps, cfg, false)?);
        }
        if !self.partition.shared.is_empty() {
            losses.extend(self.phase(cfg.local_shared_steps, cfg, true)?);
        }
        Ok(mean_losses(&losses))
    }
}

/// The only message a client sends to the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub shared: SharedSnapshot,
    pub train_loss: StepLosses,
}

fn mean_losses(losses: &[StepLosses]) -> StepLosses {
    if losses.is_empty() {
        return StepLosses::default();
    }
    let n = losses.len() as f64;
    let mut m = StepLosses::default();
    for l in losses {
        m.total += l.total;
        m.personalized += l.personalized;
        m.shared += l.shared;
        m.adversarial += l.adversarial;
    }
    StepLosses {
        total: m.total / n,
        personalized: m.personalized / n,
        shared: m.shared / n,
        adversarial: m.adversarial / n,
    }
}

/// Loads the global shared parameters, trains locally, and returns the
/// client's new shared parameters.
pub fn client_round(client: &mut ClientState, global: &SharedSnapshot, cfg: &RoundConfig) -> Result<ClientUpdate> {
    if global.names() != client.partition.shared {
        return Err(Error::Partition(format!(
            "client {} shares {:?} but received {:?}",
            client.id,
            client.partition.shared,
            global.names()
        )));
    }
    global.load_into(&mut client.model)?;
    let train_loss = client.local_round(cfg)?;
    Ok(ClientUpdate {
        client_id: client.id,
        shared: client.shared_snapshot(),
        train_loss,
    })
}

/// Per-round training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    pub mean_total_loss: f64,
    pub mean_personalized_loss: f64,
    pub mean_shared_loss: f64,
    pub mean_adversarial_loss: f64,
    /// Every client's personalized model on its own test set.
    pub client_eval: Vec<EvalResult>,
    pub wall_clock_ms: u64,
}

impl RoundReport {
    fn new(
        round: usize,
        selected: Vec<usize>,
        losses: &[StepLosses],
        client_eval: Vec<EvalResult>,
        started: Instant,
    ) -> Self {
        let m = mean_losses(losses);
        Self {
            round,
            selected,
            mean_total_loss: m.total,
            mean_personalized_loss: m.personalized,
            mean_shared_loss: m.shared,
            mean_adversarial_loss: m.adversarial,
            client_eval,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        }
    }
}

/// Everything crossing the client/server boundary, for auditing.
#[derive(Clone, Copy, Debug)]
pub enum Message<'a> {
    Upload(&'a ClientUpdate),
    Broadcast(&'a SharedSnapshot),
}

/// Server-side state of a federation in progress.
#[derive(Clone, Debug)]
pub struct Federation {
    pub round: usize,
    pub global: SharedSnapshot,
    pub clients: Vec<ClientState>,
    pub server_rng: Rng,
}

impl Federation {
    /// Starts from client 0's shared parameters and broadcasts them.
    pub fn new(mut clients: Vec<ClientState>, server_rng: Rng) -> Result<Self> {
        let first = clients.first().ok_or_else(|| Error::Config("no clients".into()))?;
        let partition = first.partition.clone();
        let global = first.shared_snapshot();
        for (i, c) in clients.iter_mut().enumerate() {
            if c.partition != partition {
                return Err(Error::Partition(format!("client {i} uses a different partition")));
            }
            if c.id != i {
                return Err(Error::Config(format!("client at position {i} has id {}", c.id)));
            }
            global.load_into(&mut c.model)?;
        }
        Ok(Self {
            round: 0,
            global,
            clients,
            server_rng,
        })
    }

    /// Runs `rounds` more rounds on at most `threads` worker threads.
    pub fn run(
        &mut self,
        rounds: usize,
        cfg: &RoundConfig,
        threads: usize,
        mut audit: impl FnMut(Message<'_>),
    ) -> Result<Vec<RoundReport>> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut history = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let started = Instant::now();
            let selected = select_clients(self.clients.len(), cfg.selection_fraction, &mut self.server_rng)?;
            let global = &self.global;
            let mut participants: Vec<&mut ClientState> = self
                .clients
                .iter_mut()
                .filter(|c| selected.binary_search(&c.id).is_ok())
                .collect();
            let updates: Vec<ClientUpdate> = pool.install(|| {
                participants
                    .par_iter_mut()
                    .map(|c| client_round(c, global, cfg))
                    .collect::<Result<_>>()
            })?;
            for u in &updates {
                audit(Message::Upload(u));
            }
            let snapshots: Vec<&SharedSnapshot> = updates.iter().map(|u| &u.shared).collect();
            self.global = aggregate(&snapshots, cfg.aggregation, cfg.selection_fraction)?;
            audit(Message::Broadcast(&self.global));
            for c in &mut self.clients {
                self.global.load_into(&mut c.model)?;
            }
            self.round += 1;
            let losses: Vec<StepLosses> = updates.iter().map(|u| u.train_loss).collect();
            let evals = self.clients.iter().map(ClientState::evaluate_self).collect::<Result<_>>()?;
            history.push(RoundReport::new(self.round, selected, &losses, evals, started));
        }
        Ok(history)
    }
}

/// Runs `cfg.rounds` rounds from scratch.
pub fn run_federation(
    clients: Vec<ClientState>,
    cfg: &RoundConfig,
    server_rng: Rng,
    threads: usize,
) -> Result<(Vec<ClientState>, Vec<RoundReport>)> {
    let mut fed = Federation::new(clients, server_rng)?;
    let history = fed.run(cfg.rounds, cfg, threads, |_| {})?;
    Ok((fed.clients, history))
}

/// Trains one client alone for `cfg.rounds` rounds of the same local
/// schedule, with no server exchange. Each round's report scores the model
/// on every set in `test_sets`.
pub fn run_local(
    mut client: ClientState,
    cfg: &RoundConfig,
    test_sets: &[&[LabeledSample]],
) -> Result<(ClientState, Vec<RoundReport>)> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let loss = client.local_round(cfg)?;
        let evals = test_sets
            .iter()
            .map(|t| evaluate_model(&client.model, t))
            .collect::<Result<_>>()?;
        history.push(RoundReport::new(round, vec![client.id], &[loss], evals, started));
    }
    Ok((client, history))
}

/// Cross-client evaluation of every client's personalized model.
pub fn cross_eval(clients: &[ClientState]) -> Result<crate::metrics::EvalMatrix> {
    let models: Vec<&ForgeryModel> = clients.iter().map(|c| &c.model).collect();
    let tests: Vec<&[LabeledSample]> = clients.iter().map(ClientState::test_set).collect();
    crate::metrics::cross_eval(&models, &tests)
}
