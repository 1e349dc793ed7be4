//! Experiment configuration, the three training modes, and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate, ClientData, LabeledSample, SyntheticSpec};
use crate::dataset_file;
use crate::error::{Error, Result};
use crate::federation::{
    cross_eval, run_local, ClientState, Federation, Message, PartitionedParams, RoundConfig,
    RoundReport,
};
use crate::metrics::EvalMatrix;
use crate::model::{ForgeryModel, LossWeights, ModelSpec};
use crate::rng::{derive, Domain};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shared extractor and head averaged, personalized head kept local.
    #[default]
    Fedpr,
    /// Everything averaged, no statistic mixing, personalized loss only.
    Fedavg,
    /// One model on the pooled data of all clients, no server.
    Centralized,
}

impl Mode {
    /// Round settings after applying the mode's overrides.
    pub fn round_config(self, base: RoundConfig) -> RoundConfig {
        match self {
            Mode::Fedpr | Mode::Centralized => base,
            Mode::Fedavg => RoundConfig {
                mix_statistics: false,
                weights: LossWeights {
                    alpha: 0.0,
                    beta: 1.0,
                    gamma: 0.0,
                },
                ..base
            },
        }
    }

    pub fn partition(self, model: &ForgeryModel) -> PartitionedParams {
        match self {
            Mode::Fedpr | Mode::Centralized => PartitionedParams::standard(model),
            Mode::Fedavg => PartitionedParams::all_shared(model),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedpr" => Ok(Mode::Fedpr),
            "fedavg" => Ok(Mode::Fedavg),
            "centralized" => Ok(Mode::Centralized),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}, expected fedpr, fedavg or centralized"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated per run; the spec's seed is replaced by the run seed.
    Synthetic(SyntheticSpec),
    /// A dataset file, shared by every run seed.
    File(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Vec<ClientData>> {
        match self {
            DataSource::Synthetic(spec) => generate(&SyntheticSpec { seed, ..*spec }),
            DataSource::File(path) => dataset_file::read(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataSource,
    pub model: ModelSpec,
    pub round: RoundConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fedpr,
            data: DataSource::default(),
            model: ModelSpec::default(),
            round: RoundConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            let (c, h, w) = spec.image_size;
            if (c, h, w) != (self.model.in_channels, self.model.height, self.model.width) {
                return Err(Error::Config(format!(
                    "image size {:?} does not match model input {}×{}×{}",
                    spec.image_size, self.model.in_channels, self.model.height, self.model.width
                )));
            }
        }
        self.model.validate()?;
        self.round.validate()
    }

    /// The configuration actually run for one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let data = match &self.data {
            DataSource::Synthetic(spec) => DataSource::Synthetic(SyntheticSpec { seed, ..*spec }),
            file => file.clone(),
        };
        Self {
            seeds: vec![seed],
            round: self.mode.round_config(self.round),
            data,
            ..self.clone()
        }
    }
}

/// Worker threads from `FEDPR_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("FEDPR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Client 0 draws the shared initialization from the server stream; every
/// client draws its personalized head from its own stream.
pub fn init_model(spec: ModelSpec, seed: u64, client: usize) -> Result<ForgeryModel> {
    let mut shared = derive(seed, Domain::ServerInit, 0);
    let mut personal = derive(seed, Domain::ClientInit, client as u32);
    ForgeryModel::init(spec, &mut shared, &mut personal)
}

pub fn build_federation(cfg: &ExperimentConfig, seed: u64, data: Vec<ClientData>) -> Result<Federation> {
    let clients = data
        .into_iter()
        .enumerate()
        .map(|(k, d)| {
            let model = init_model(cfg.model, seed, k)?;
            let partition = cfg.mode.partition(&model);
            ClientState::new(k, model, d, derive(seed, Domain::ClientTrain, k as u32), partition)
        })
        .collect::<Result<Vec<_>>>()?;
    Federation::new(clients, derive(seed, Domain::Server, 0))
}

/// Pools the training data of every client into one client. Test sets stay
/// separate.
pub fn pooled_client(cfg: &ExperimentConfig, seed: u64, data: &[ClientData]) -> Result<ClientState> {
    let model = init_model(cfg.model, seed, 0)?;
    let partition = cfg.mode.partition(&model);
    let pooled = ClientData {
        train: data.iter().flat_map(|d| d.train.iter().cloned()).collect(),
        test: data.iter().flat_map(|d| d.test.iter().cloned()).collect(),
    };
    ClientState::new(0, model, pooled, derive(seed, Domain::ClientTrain, 0), partition)
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub history: Vec<RoundReport>,
    pub matrix: EvalMatrix,
    pub checkpoint: Checkpoint,
}

impl SeedOutcome {
    /// Mean over clients of each personalized model on its own test set.
    pub fn mean_self_accuracy(&self) -> f64 {
        self.matrix.mean_diagonal_accuracy()
    }
}

/// Trains one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, threads: usize) -> Result<SeedOutcome> {
    run_seed_audited(cfg, seed, threads, |_| {})
}

/// [`run_seed`], passing every client/server message to `audit`.
pub fn run_seed_audited(
    cfg: &ExperimentConfig,
    seed: u64,
    threads: usize,
    audit: impl FnMut(Message<'_>),
) -> Result<SeedOutcome> {
    cfg.validate()?;
    let round = cfg.mode.round_config(cfg.round);
    let data = cfg.data.load(seed)?;
    match cfg.mode {
        Mode::Fedpr | Mode::Fedavg => {
            let mut fed = build_federation(cfg, seed, data)?;
            let history = fed.run(round.rounds, &round, threads, audit)?;
            let matrix = cross_eval(&fed.clients)?;
            let checkpoint = Checkpoint::capture(&fed);
            Ok(SeedOutcome {
                seed,
                history,
                matrix,
                checkpoint,
            })
        }
        Mode::Centralized => {
            let client = pooled_client(cfg, seed, &data)?;
            let tests: Vec<&[LabeledSample]> = data.iter().map(|d| d.test.as_slice()).collect();
            let (client, history) = run_local(client, &round, &tests)?;
            let matrix = crate::metrics::cross_eval(&vec![client.model(); tests.len()], &tests)?;
            let mut fed = Federation::new(vec![client], derive(seed, Domain::Server, 0))?;
            fed.round = round.rounds;
            Ok(SeedOutcome {
                seed,
                history,
                matrix,
                checkpoint: Checkpoint::capture(&fed),
            })
        }
    }
}

pub fn history_jsonl(history: &[RoundReport]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Self-test metrics aggregated over seeds, as CSV.
pub fn summary_csv(outcomes: &[SeedOutcome]) -> String {
    let per_seed = |f: &dyn Fn(&SeedOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
    let diag_mean = |o: &SeedOutcome, f: fn(&crate::metrics::EvalResult) -> f64| {
        let k = o.matrix.size();
        (0..k).map(|i| f(o.matrix.get(i, i))).sum::<f64>() / k as f64
    };
    let rows: [(&str, Vec<f64>); 4] = [
        ("self_accuracy", per_seed(&|o| diag_mean(o, |e| e.accuracy))),
        ("self_auc", per_seed(&|o| diag_mean(o, |e| e.auc))),
        ("self_eer", per_seed(&|o| diag_mean(o, |e| e.eer))),
        ("diagonal_dominant", per_seed(&|o| f64::from(u8::from(o.matrix.diagonal_dominant())))),
    ];
    let mut out = String::from("metric,mean,std,seeds\n");
    for (name, xs) in rows {
        let (m, s) = mean_std(&xs);
        writeln!(out, "{name},{m:.4},{s:.4},{}", xs.len()).unwrap();
    }
    out
}

/// Directory for one seed's files: the output directory itself for a
/// single-seed run, else `seed-<n>` inside it.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        cfg.output_dir.clone()
    } else {
        cfg.output_dir.join(format!("seed-{seed}"))
    }
}

pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &SeedOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.jsonl"), history_jsonl(&outcome.history))?;
    fs::write(dir.join("matrix.csv"), outcome.matrix.accuracy_csv())?;
    fs::write(dir.join("config.json"), cfg.for_seed(outcome.seed).to_json())?;
    outcome.checkpoint.save(&dir.join("checkpoint.fprc"))
}

/// Runs every seed and writes per-seed files plus `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let threads = thread_count();
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed, threads)?;
        write_outcome(&seed_dir(cfg, seed), cfg, &outcome)?;
        outcomes.push(outcome);
    }
    fs::write(cfg.output_dir.join("summary.csv"), summary_csv(&outcomes))?;
    Ok(outcomes)
}

/// Cross evaluation of a saved checkpoint against the test sets of `data`.
/// A single-model checkpoint is scored against every client.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, data: &[ClientData]) -> Result<EvalMatrix> {
    let tests: Vec<&[LabeledSample]> = data.iter().map(|d| d.test.as_slice()).collect();
    let models = checkpoint.models();
    let models = match models.as_slice() {
        [only] => vec![*only; tests.len()],
        _ => models,
    };
    crate::metrics::cross_eval(&models, &tests)
}
