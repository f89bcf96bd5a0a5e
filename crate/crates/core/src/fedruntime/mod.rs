//! Synchronous federated rounds: sample clients, broadcast, K local SGD
//! steps per client, FedAvg.
//!
//! A client's images never leave it. Their frozen features are cached once
//! in [`Client`] and the only thing a client hands back is a
//! [`ClientUpdate`]: parameters plus its loss trace.
//!
//! Client parallelism comes from a rayon pool capped by `FEDCSAP_THREADS`.
//! Results are gathered in client-id order and aggregation sums in that
//! order too, so runs are bitwise reproducible at any thread count.

mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientShard, Example};
use crate::encoders::{gap_multiscale, EncoderError, FrozenBackbone, FrozenVisionEncoder, RunningStyle};
use crate::model::{ClassContext, FedCsapModel, ImageBatch};
use crate::numerics::{NumericsError, ParameterStore, Tape, Tensor};
use crate::seed::rng_for;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

pub const THREADS_ENV: &str = "FEDCSAP_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("config: {0}")]
    Config(String),
    #[error("client {client_id}: {reason}")]
    Protocol { client_id: usize, reason: String },
    #[error("non-finite loss or parameter at round {round}, client {client_id}, local step {step}")]
    NonFinite { round: usize, client_id: usize, step: usize },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η_r = η · (1 + cos(π r / R)) / 2`
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// `R`
    pub rounds: usize,
    /// `K`
    pub local_steps: usize,
    /// `η`
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub participation: f64,
    /// `None` trains on the full shard every step.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Weight client updates by examples seen instead of a plain mean.
    #[serde(default)]
    pub weighted: bool,
    pub client_seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.batch_size == Some(0) {
            return Err("batch_size must be >= 1 when set".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine if self.rounds == 0 => self.lr,
            LrSchedule::Cosine => {
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * round as f64 / self.rounds as f64).cos())
            }
        }
    }
}

/// Frozen vision features of a list of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[n × d]`
    pub embeds: Tensor,
    /// `[n × ΣC]`
    pub pooled: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    /// `label_of` maps a global label to the label used for scoring.
    pub fn extract(
        vision: &FrozenVisionEncoder,
        examples: &[Example],
        label_of: impl Fn(usize) -> Option<usize>,
    ) -> Result<Self, EncoderError> {
        if examples.is_empty() {
            return Err(EncoderError::Input("cannot extract features of an empty example list".into()));
        }
        let (mut embeds, mut pooled, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for e in examples {
            let f = vision.features(&e.image)?;
            embeds.extend_from_slice(f.image_embed.data());
            pooled.extend_from_slice(gap_multiscale(&f.maps)?.data());
            labels.push(label_of(e.label).ok_or_else(|| EncoderError::Input(format!("label {} is not in the scored class set", e.label)))?);
        }
        let n = examples.len();
        let (d, c) = (embeds.len() / n, pooled.len() / n);
        Ok(Self {
            embeds: Tensor::from_parts(vec![n, d], embeds),
            pooled: Tensor::from_parts(vec![n, c], pooled),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-channel mean of the pooled features over `idx`.
    pub fn style_of(&self, idx: &[usize]) -> Tensor {
        let c = self.pooled.last_dim();
        let mut acc = vec![0.0; c];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(self.pooled.row(i)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= idx.len() as f64);
        Tensor::from_vec(acc)
    }

    pub fn batch(&self, idx: &[usize], style: Tensor) -> ImageBatch {
        let gather = |t: &Tensor| {
            let w = t.last_dim();
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::from_parts(vec![idx.len(), w], data)
        };
        ImageBatch { embeds: gather(&self.embeds), pooled: gather(&self.pooled), style }
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// A simulated client: its class list, cached training features and the
/// running style statistic of its domain.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    pub domain_id: usize,
    pub class_ids: Vec<usize>,
    pub classes: ClassContext,
    pub train: FeatureSet,
    /// Starts at the shard's mean pooled feature and tracks batch means.
    pub style: RunningStyle,
}

impl Client {
    pub fn new(shard: &ClientShard, backbone: &FrozenBackbone) -> Result<Self, FedError> {
        if shard.examples.is_empty() {
            return Err(FedError::Protocol { client_id: shard.client_id, reason: "shard has no training examples".into() });
        }
        let train = FeatureSet::extract(&backbone.vision, &shard.examples, |g| shard.local_label(g))?;
        let all: Vec<usize> = (0..train.len()).collect();
        let style = RunningStyle::with_initial(train.style_of(&all), backbone.vision.running_style.momentum);
        Ok(Self {
            id: shard.client_id,
            domain_id: shard.domain_id,
            class_ids: shard.class_ids.clone(),
            classes: ClassContext::new(&backbone.text, &shard.class_names)?,
            train,
            style,
        })
    }
}

/// Losses recorded before one local step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub crp: f64,
}

/// The only client-to-server payload.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub store: ParameterStore,
    /// One entry per local step; with `K = 0`, the loss of the received model.
    pub local_loss_trace: Vec<StepLosses>,
    pub examples_seen: usize,
}

/// `max(1, round(p·N))` distinct ids drawn uniformly, returned sorted.
pub fn sample_clients(n: usize, participation: f64, rng: &mut impl Rng) -> Result<Vec<usize>, FedError> {
    if n == 0 {
        return Err(FedError::Config("need at least one client".into()));
    }
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(FedError::Config(format!("participation must lie in (0, 1], got {participation}")));
    }
    let k = ((participation * n as f64).round() as usize).clamp(1, n);
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Without-replacement batches that reshuffle at every pass over the shard.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch_size: Option<usize>, rng: ChaCha8Rng) -> Self {
        let size = batch_size.map_or(n, |b| b.min(n));
        Self { order: (0..n).collect(), cursor: n, size, rng }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.size == n {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn batch_losses(model: &FedCsapModel, store: &ParameterStore, client: &Client, idx: &[usize]) -> Result<StepLosses, NumericsError> {
    let tape = Tape::new();
    let bound = store.bind(&tape)?;
    let images = client.train.batch(idx, client.train.style_of(idx));
    let fwd = model.forward(&tape, &bound, &client.classes, &images)?;
    let l = model.losses(&tape, &fwd, &client.train.labels_of(idx))?;
    Ok(StepLosses { total: l.total.item(), ce: l.ce.item(), crp: l.crp.item() })
}

/// K SGD steps from the global parameters on one client's data.
///
/// Returns the update and the client's advanced running style; the caller
/// keeps the latter on the client side.
pub fn local_train(
    model: &FedCsapModel,
    client: &Client,
    round: usize,
    cfg: &RoundConfig,
) -> Result<(ClientUpdate, RunningStyle), FedError> {
    let mut store = model.store.clone();
    let mut style = client.style.clone();
    let lr = cfg.lr_at(round);
    let rng = rng_for(cfg.client_seed, &format!("batch.client{}.round{round}", client.id));
    let mut batches = BatchSampler::new(client.train.len(), cfg.batch_size, rng);
    let nonfinite = |step| FedError::NonFinite { round, client_id: client.id, step };
    let lift = |step| {
        move |e: NumericsError| match e {
            NumericsError::NonFinite { .. } => nonfinite(step),
            e => e.into(),
        }
    };
    let mut trace = Vec::with_capacity(cfg.local_steps.max(1));
    let mut examples_seen = 0;
    if cfg.local_steps == 0 {
        let idx = batches.next_batch();
        trace.push(batch_losses(model, &store, client, &idx).map_err(lift(0))?);
    }
    for step in 0..cfg.local_steps {
        let idx = batches.next_batch();
        let mu = client.train.style_of(&idx);
        let images = client.train.batch(&idx, mu.clone());
        style.update(&mu);
        let tape = Tape::new();
        let bound = store.bind(&tape).map_err(lift(step))?;
        let fwd = model.forward(&tape, &bound, &client.classes, &images).map_err(lift(step))?;
        let l = model.losses(&tape, &fwd, &client.train.labels_of(&idx)).map_err(lift(step))?;
        let losses = StepLosses { total: l.total.item(), ce: l.ce.item(), crp: l.crp.item() };
        if !losses.total.is_finite() {
            return Err(nonfinite(step));
        }
        trace.push(losses);
        let grads = tape.backward(&l.total).map_err(|_| nonfinite(step))?;
        store.accumulate(&grads, &bound);
        store.sgd_step(lr).map_err(|_| nonfinite(step))?;
        examples_seen += idx.len();
    }
    Ok((ClientUpdate { client_id: client.id, store, local_loss_trace: trace, examples_seen }, style))
}

/// Mean of the trainable parameters over `updates`, summed in ascending
/// client-id order. Frozen parameters are copied from the lowest id.
pub fn aggregate_fedavg(updates: &[ClientUpdate], weighted: bool) -> Result<ParameterStore, FedError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = *sorted.first().ok_or_else(|| FedError::Config("FedAvg needs at least one update".into()))?;
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FedError::Protocol { client_id: pair[1].client_id, reason: "sent more than one update this round".into() });
        }
    }
    for u in &sorted[1..] {
        let same_trainable = u.store.iter().zip(first.store.iter()).all(|(a, b)| a.trainable == b.trainable);
        if !u.store.same_layout(&first.store) || !same_trainable {
            return Err(FedError::Protocol {
                client_id: u.client_id,
                reason: format!("parameter layout differs from client {}", first.client_id),
            });
        }
    }
    let weights: Vec<f64> = if weighted {
        let w: Vec<f64> = sorted.iter().map(|u| u.examples_seen as f64).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(FedError::Config("weighted FedAvg needs at least one example seen".into()));
        }
        w
    } else {
        vec![1.0; sorted.len()]
    };
    let total: f64 = weights.iter().sum();
    let mut out = first.store.clone();
    out.zero_grad();
    for (p, param) in out.iter_mut().enumerate() {
        if !param.trainable {
            continue;
        }
        let acc = param.value.data_mut();
        if weighted {
            acc.iter_mut().for_each(|a| *a *= weights[0]);
        }
        for (u, &w) in sorted[1..].iter().zip(&weights[1..]) {
            let src = u.store.iter().nth(p).expect("layout checked").value.data();
            for (a, v) in acc.iter_mut().zip(src) {
                *a += if weighted { w * v } else { *v };
            }
        }
        acc.iter_mut().for_each(|a| *a /= total);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalScores {
    pub local: f64,
    pub base: f64,
    pub new: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// 0-based round index.
    pub round: usize,
    /// Mean over participants of the loss at their first local step.
    pub train_loss: f64,
    pub ce: f64,
    pub crp: f64,
    pub acc_local: f64,
    pub acc_base: f64,
    pub acc_new: f64,
    pub hm: f64,
    /// `|S_r| · (|θ|+|φ|) · 8 · 2`
    pub bytes: u64,
    pub participants: Vec<usize>,
    /// Not part of the CSV, which must be reproducible.
    pub wall_seconds: f64,
}

pub struct ServerState {
    /// Completed rounds.
    pub round: usize,
    pub model: FedCsapModel,
    pub rng: ChaCha8Rng,
    pub history: Vec<RoundReport>,
}

impl ServerState {
    pub fn new(model: FedCsapModel, cfg: &RoundConfig) -> Self {
        Self { round: 0, model, rng: rng_for(cfg.client_seed, "server.sampling"), history: Vec::new() }
    }
}

/// Thread count from `FEDCSAP_THREADS`, else the machine's parallelism.
pub fn configured_threads() -> Result<usize, FedError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(FedError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `communicated scalars · 8 bytes · (down + up)` per participant.
pub fn round_bytes(model: &FedCsapModel, participants: usize) -> u64 {
    participants as u64 * model.communicated_scalars() as u64 * 8 * 2
}

/// Runs rounds `server.round .. cfg.rounds`. `eval` is called after
/// aggregation on every round `r` with `r % eval_cadence == 0`, and each such
/// round yields one report.
pub fn run_rounds(
    server: &mut ServerState,
    clients: &mut [Client],
    cfg: &RoundConfig,
    eval_cadence: usize,
    threads: usize,
    mut eval: impl FnMut(&FedCsapModel, &[Client]) -> Result<EvalScores, FedError>,
) -> Result<Vec<RoundReport>, FedError> {
    cfg.validate().map_err(FedError::Config)?;
    if eval_cadence == 0 {
        return Err(FedError::Config("eval_cadence must be >= 1".into()));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(FedError::Protocol { client_id: c.id, reason: format!("expected id {i} at position {i}") });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| FedError::Config(format!("thread pool: {e}")))?;
    let mut reports = Vec::new();
    while server.round < cfg.rounds {
        let r = server.round;
        let start = Instant::now();
        let participants = sample_clients(clients.len(), cfg.participation, &mut server.rng)?;
        let model = &server.model;
        let shared: &[Client] = clients;
        let results: Vec<Result<(ClientUpdate, RunningStyle), FedError>> =
            pool.install(|| participants.par_iter().map(|&i| local_train(model, &shared[i], r, cfg)).collect());
        let mut updates = Vec::with_capacity(results.len());
        let mut styles = BTreeMap::new();
        for (&i, res) in participants.iter().zip(results) {
            let (u, s) = res?;
            styles.insert(i, s);
            updates.push(u);
        }
        let store = aggregate_fedavg(&updates, cfg.weighted)?;
        for (i, s) in styles {
            clients[i].style = s;
        }
        let n = updates.len() as f64;
        let mean = |f: fn(&StepLosses) -> f64| updates.iter().map(|u| f(&u.local_loss_trace[0])).sum::<f64>() / n;
        let (train_loss, ce, crp) = (mean(|s| s.total), mean(|s| s.ce), mean(|s| s.crp));
        server.model.store = store;
        server.round += 1;
        if r.is_multiple_of(eval_cadence) {
            let scores = eval(&server.model, clients)?;
            let report = RoundReport {
                round: r,
                train_loss,
                ce,
                crp,
                acc_local: scores.local,
                acc_base: scores.base,
                acc_new: scores.new,
                hm: crate::harness::harmonic_mean(&[scores.local, scores.base, scores.new]),
                bytes: round_bytes(&server.model, participants.len()),
                participants,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            server.history.push(report.clone());
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Name under which a client's running style is checkpointed.
pub fn style_entry_name(client_id: usize) -> String {
    format!("state.client{client_id}.style")
}

/// Model parameters in store order, then each client's running style.
pub fn save_checkpoint(w: &mut impl std::io::Write, model: &FedCsapModel, clients: &[Client]) -> Result<(), FedError> {
    let names: Vec<String> = clients.iter().map(|c| style_entry_name(c.id)).collect();
    let entries = model
        .store
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(names.iter().map(String::as_str).zip(clients.iter().map(|c| &c.style.value)));
    write_checkpoint(w, entries)
}

/// Loads parameters into `model` and returns the saved client styles.
pub fn restore_checkpoint(model: &mut FedCsapModel, entries: Vec<(String, Tensor)>) -> Result<BTreeMap<usize, Tensor>, FedError> {
    let mut styles = BTreeMap::new();
    let mut seen = 0;
    for (name, t) in entries {
        if let Some(id) = model.store.id(&name) {
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(FedError::Checkpoint(format!("{name}: shape {:?} but the model expects {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
            seen += 1;
        } else if let Some(id) = name.strip_prefix("state.client").and_then(|s| s.strip_suffix(".style")).and_then(|s| s.parse().ok()) {
            styles.insert(id, t);
        } else {
            return Err(FedError::Checkpoint(format!("unknown entry {name:?}")));
        }
    }
    if seen != model.store.len() {
        return Err(FedError::Checkpoint(format!("checkpoint holds {seen} of the model's {} parameters", model.store.len())));
    }
    Ok(styles)
}
