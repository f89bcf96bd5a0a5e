//! Experiment configuration, the evaluation protocol and the CLI commands.
//!
//! Every stochastic component draws from `sub_seed(master_seed, name)`:
//!
//! | stream        | name               |
//! |---------------|--------------------|
//! | frozen encoders and renderer | `backbone` |
//! | dataset       | `data`             |
//! | client sampling and batches | `fed` |
//! | model init    | `model`            |

mod config;
mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datagen::{base_new_split, generate_dataset, partition_clients, Dataset, DatagenError};
use crate::encoders::{EncoderError, FrozenBackbone};
use crate::fedruntime::{
    configured_threads, read_checkpoint, restore_checkpoint, run_rounds, save_checkpoint, Client, FedError, RoundReport, ServerState,
};
use crate::model::{ClassContext, FedCsapModel, ImageBatch};
use crate::numerics::{finite_diff_check, GradCheckReport, NumericsError};

pub use config::{load_config, parse_config, BackboneSettings, DataSettings, ExperimentConfig, FedSettings};
pub use eval::{accuracy, Evaluator};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.fckp";
pub const CSV_HEADER: &str = "round,train_loss,ce,crp,acc_local,acc_base,acc_new,hm,bytes,participants";

/// Largest trainable parameter count `gradcheck` accepts.
pub const GRADCHECK_MAX_PARAMS: usize = 10_000;
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    NonFinite(String),
    #[error("gradient check failed: max relative error {0:.3e} exceeds {GRADCHECK_TOL:e}")]
    GradCheck(f64),
    #[error("{0}")]
    Runtime(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl HarnessError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }

    /// 2 for configuration problems, 3 for NaN/inf during training, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::NonFinite(_) => 3,
            _ => 1,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}

impl From<FedError> for HarnessError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::NonFinite { .. } => Self::NonFinite(e.to_string()),
            FedError::Config(m) => Self::config("fed", m),
            e => Self::Runtime(e.to_string()),
        }
    }
}

impl From<NumericsError> for HarnessError {
    fn from(e: NumericsError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<EncoderError> for HarnessError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(m) => Self::config("model", m),
            e => Self::Runtime(e.to_string()),
        }
    }
}

impl From<DatagenError> for HarnessError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(m) => Self::config("data", m),
            e => Self::Runtime(e.to_string()),
        }
    }
}

/// `3 / (1/a + 1/b + 1/c)`, or 0 if any accuracy is 0.
pub fn harmonic_mean(accs: &[f64; 3]) -> f64 {
    if accs.iter().any(|&a| a <= 0.0) {
        return 0.0;
    }
    3.0 / accs.iter().map(|a| 1.0 / a).sum::<f64>()
}

/// Everything an experiment needs before the first round.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub backbone: FrozenBackbone,
    pub dataset: Dataset,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub clients: Vec<Client>,
    pub model: FedCsapModel,
}

impl Experiment {
    /// Builds the world. Once the dataset exists, the text encoder records
    /// every class name it embeds, so callers can check which names the
    /// clients and model touched.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut backbone = FrozenBackbone::new(&cfg.backbone_config())?;
        let dataset = generate_dataset(&cfg.task_config(), &backbone.text, &backbone.renderer)?;
        backbone.text = backbone.text.clone().with_audit();
        let (base_classes, new_classes) = base_new_split(&(0..cfg.data.num_classes).collect::<Vec<_>>())?;
        let shards = partition_clients(&dataset, &base_classes, cfg.classes_per_client)
            .map_err(|e| HarnessError::config("classes_per_client", e.to_string()))?;
        let clients = shards.iter().map(|s| Client::new(s, &backbone)).collect::<Result<Vec<_>, _>>()?;
        let model = FedCsapModel::new(cfg.model.clone(), cfg.ablations, cfg.loss, &backbone.text, cfg.seed("model"))?;
        Ok(Self { cfg: cfg.clone(), backbone, dataset, base_classes, new_classes, clients, model })
    }

    pub fn evaluator(&self) -> Result<Evaluator, HarnessError> {
        Evaluator::new(self)
    }
}

/// Formats one CSV row; floats use Rust's shortest round-trip form.
pub fn csv_row(r: &RoundReport) -> String {
    let participants: Vec<String> = r.participants.iter().map(usize::to_string).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.round,
        r.train_loss,
        r.ce,
        r.crp,
        r.acc_local,
        r.acc_base,
        r.acc_new,
        r.hm,
        r.bytes,
        participants.join(";")
    )
}

pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub output_dir: PathBuf,
}

/// Trains per `cfg` and writes the config snapshot, metrics and checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let exp = Experiment::build(cfg)?;
    let evaluator = exp.evaluator()?;
    let threads = configured_threads().map_err(|e| HarnessError::config(crate::fedruntime::THREADS_ENV, e.to_string()))?;
    let Experiment { model, mut clients, .. } = exp;
    let round_cfg = cfg.round_config();
    let mut server = ServerState::new(model, &round_cfg);
    let reports = run_rounds(&mut server, &mut clients, &round_cfg, cfg.eval_cadence, threads, |m, c| {
        evaluator.scores(m, c).map_err(|e| FedError::Eval(e.to_string()))
    })?;

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(HarnessError::io(format!("creating {}", dir.display())))?;
    let snapshot = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_file(&dir.join(CONFIG_SNAPSHOT), snapshot.as_bytes())?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    write_file(&dir.join(METRICS_FILE), csv.as_bytes())?;
    let mut ckpt = Vec::new();
    save_checkpoint(&mut ckpt, &server.model, &clients)?;
    write_file(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    Ok(RunOutcome { reports, output_dir: dir.clone() })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let mut f = fs::File::create(path).map_err(HarnessError::io(format!("creating {}", path.display())))?;
    f.write_all(bytes).map_err(HarnessError::io(format!("writing {}", path.display())))
}

pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    /// Frozen parameter blocks, not checked.
    pub skipped: Vec<String>,
    pub trainable_scalars: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error() < GRADCHECK_TOL
    }

    /// One line per parameter block, checked or skipped.
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .report
            .blocks
            .iter()
            .map(|b| {
                let verdict = if b.max_rel_error < GRADCHECK_TOL { "ok" } else { "FAIL" };
                format!("{:<24} {:>6} coords  max rel err {:.3e}  {verdict}", b.name, b.coordinates, b.max_rel_error)
            })
            .collect();
        out.extend(self.skipped.iter().map(|n| format!("{n:<24} frozen/skipped")));
        out
    }
}

/// Finite-difference check of the full training loss on client 0's first
/// batch, over every trainable parameter.
pub fn gradcheck_command(cfg: &ExperimentConfig) -> Result<GradCheckOutcome, HarnessError> {
    let exp = Experiment::build(cfg)?;
    let mut model = exp.model;
    let trainable_scalars = model.store.num_trainable_scalars();
    if trainable_scalars > GRADCHECK_MAX_PARAMS {
        return Err(HarnessError::config(
            "model",
            format!("gradcheck needs at most {GRADCHECK_MAX_PARAMS} trainable scalars, this config has {trainable_scalars}"),
        ));
    }
    let client = &exp.clients[0];
    let n = cfg.fed.batch_size.map_or(client.train.len(), |b| b.min(client.train.len()));
    let idx: Vec<usize> = (0..n).collect();
    let images: ImageBatch = client.train.batch(&idx, client.train.style_of(&idx));
    let labels = client.train.labels_of(&idx);
    let classes: &ClassContext = &client.classes;
    let skipped = model.store.iter().filter(|p| !p.trainable).map(|p| p.name.clone()).collect();
    let frozen = model.clone();
    let report = finite_diff_check(&mut model.store, GRADCHECK_H, |tape, bound| {
        let fwd = frozen.forward(tape, bound, classes, &images)?;
        Ok(frozen.losses(tape, &fwd, &labels)?.total)
    })?;
    Ok(GradCheckOutcome { report, skipped, trainable_scalars })
}

/// Scores a saved checkpoint under `cfg`'s world.
pub fn eval_command(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<crate::fedruntime::EvalScores, HarnessError> {
    let exp = Experiment::build(cfg)?;
    let evaluator = exp.evaluator()?;
    let Experiment { mut model, mut clients, .. } = exp;
    let bytes = fs::read(checkpoint).map_err(HarnessError::io(format!("reading {}", checkpoint.display())))?;
    let entries = read_checkpoint(&bytes[..])?;
    let styles = restore_checkpoint(&mut model, entries)?;
    for c in &mut clients {
        match styles.get(&c.id) {
            Some(s) if s.shape() == c.style.value.shape() => c.style.value = s.clone(),
            _ => return Err(HarnessError::Runtime(format!("checkpoint has no style entry for client {}", c.id))),
        }
    }
    evaluator.scores(&model, &clients)
}
