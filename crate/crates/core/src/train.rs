//! Multi-task training: Adam on the supervised loss plus the contrastive
//! loss between two edge-dropout views, with checkpointing and resume.
//!
//! Everything runs on one thread. Given the same seed, config and data, the
//! loss log is bit-identical across runs and across a checkpoint/resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_min_interactions, load_qmatrix, load_responses, split_train_test, QMatrix, ResponseRecord,
    ResponseSet,
};
use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{Result, ScdError};
use crate::model::{gcn_forward, init_params, predict_on_tape, BoundParams, ModelParams, ModelShape};
use crate::objectives::{infonce, l2_penalty, main_loss, total_loss, total_on_tape, LossBreakdown, LossWeights};
use crate::relgraph::{build_relation_graph, directed_split, DirectedSplit};
use crate::viewgen::{generate_random_view_pair, generate_view_pair, matched_uniform_p, DropoutParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Contrastive task on degree-aware dropout views.
    Scd,
    /// Contrastive task on views that keep every edge with one probability.
    ScdRandom,
    /// No contrastive task.
    SupervisedOnly,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Scd => "scd",
            TrainMode::ScdRandom => "scd-random",
            TrainMode::SupervisedOnly => "supervised-only",
        }
    }
}

impl FromStr for TrainMode {
    type Err = ScdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scd" => Ok(TrainMode::Scd),
            "scd-random" => Ok(TrainMode::ScdRandom),
            "supervised-only" => Ok(TrainMode::SupervisedOnly),
            _ => Err(ScdError::invalid(format!(
                "unknown mode {s:?} (expected scd, scd-random or supervised-only)"
            ))),
        }
    }
}

/// Flat training configuration; every field has a default so a config file
/// only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout_k: f64,
    pub dropout_theta: f64,
    pub p_min: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub layers: usize,
    /// Embedding width; the concept count when absent.
    pub dim: Option<usize>,
    pub master_seed: u64,
    pub mode: TrainMode,
    pub include_positive_in_denominator: bool,
    /// Contrast over every student and exercise instead of the batch's.
    pub ssl_full_population: bool,
    pub responses: Option<PathBuf>,
    pub qmatrix: Option<PathBuf>,
    /// Students need strictly more records than this to be kept.
    pub min_interactions: usize,
    pub train_ratio: f64,
    pub output_dir: PathBuf,
    /// Also checkpoint every this many epochs; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dropout = DropoutParams::default();
        let weights = LossWeights::default();
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout_k: dropout.k,
            dropout_theta: dropout.theta,
            p_min: dropout.p_min,
            tau: weights.tau,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            layers: crate::model::DEFAULT_LAYERS,
            dim: None,
            master_seed: 0,
            mode: TrainMode::Scd,
            include_positive_in_denominator: false,
            ssl_full_population: false,
            responses: None,
            qmatrix: None,
            min_interactions: 5,
            train_ratio: 0.8,
            output_dir: PathBuf::from("out"),
            checkpoint_every: 0,
            resume_from: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ScdError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides. Values are read as JSON when they parse
    /// as JSON and as plain strings otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc = serde_json::to_value(&*self)?;
        let map = doc.as_object_mut().expect("config serializes to an object");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ScdError::invalid(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(ScdError::invalid(format!("unknown config key {key:?}")));
            }
            let value = serde_json::from_str(raw.trim())
                .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
            map.insert(key.to_string(), value);
        }
        *self = serde_json::from_value(doc)?;
        Ok(())
    }

    pub fn dropout(&self) -> DropoutParams {
        DropoutParams {
            k: self.dropout_k,
            theta: self.dropout_theta,
            p_min: self.p_min,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: if self.mode == TrainMode::SupervisedOnly { 0.0 } else { self.lambda1 },
            lambda2: self.lambda2,
            tau: self.tau,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ScdError::Invalid(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.layers == 0 {
            return bad("epochs, batch_size and layers must be at least 1".into());
        }
        if self.dim == Some(0) {
            return bad("dim must be at least 1".into());
        }
        self.adam().validate()?;
        if !(self.tau > 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!(
                "need tau > 0 and non-negative lambdas; got tau={} lambda1={} lambda2={}",
                self.tau, self.lambda1, self.lambda2
            ));
        }
        if self.mode != TrainMode::SupervisedOnly {
            self.dropout().validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.eps > 0.0 && in_unit(self.beta1) && in_unit(self.beta2)) {
            return Err(ScdError::invalid(format!("bad Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        let z: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { step: 0, m: z.clone(), v: z }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a shape does
/// not match or a gradient is not finite.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(ScdError::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(ScdError::Shape {
                op: "adam_step",
                detail: format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(ScdError::NonFinite(format!("gradient of tensor {i} at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, (w, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Options of the per-batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub include_positive: bool,
    pub full_population: bool,
}

impl From<&TrainConfig> for ObjectiveOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            weights: c.weights(),
            include_positive: c.include_positive_in_denominator,
            full_population: c.ssl_full_population,
        }
    }
}

/// Tape handles of one batch's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct BatchTerms {
    pub total: Var,
    pub main: Var,
    pub ssl_student: Option<Var>,
    pub ssl_exercise: Option<Var>,
    pub reg: Var,
}

impl BatchTerms {
    pub fn breakdown(&self, tape: &Tape, w: &LossWeights) -> Result<LossBreakdown> {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        total_loss(
            tape.scalar_value(self.main),
            val(self.ssl_student),
            val(self.ssl_exercise),
            tape.scalar_value(self.reg),
            w,
        )
    }
}

fn distinct(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = ids.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// The full objective of one mini-batch: supervised loss on `graph`, the
/// contrastive terms between `views` (skipped when `None` or when a node
/// subset has fewer than two members) and the L2 penalty over all
/// parameters.
pub fn batch_objective(
    tape: &Tape,
    params: &BoundParams,
    graph: &DirectedSplit,
    views: Option<(&DirectedSplit, &DirectedSplit)>,
    q: &QMatrix,
    batch: &[ResponseRecord],
    opts: &ObjectiveOptions,
) -> Result<BatchTerms> {
    if batch.is_empty() {
        return Err(ScdError::invalid("empty batch"));
    }
    let states = gcn_forward(tape, params, graph)?;
    let pairs: Vec<(usize, usize)> = batch.iter().map(|r| (r.student, r.exercise)).collect();
    let labels: Vec<f64> = batch.iter().map(|r| f64::from(r.score)).collect();
    let preds = predict_on_tape(tape, params, &states, q, &pairs)?;
    let main = main_loss(tape, preds, &labels)?;
    let reg = l2_penalty(tape, params.all())?;

    let mut ssl_student = None;
    let mut ssl_exercise = None;
    if let Some((v1, v2)) = views.filter(|_| opts.weights.lambda1 > 0.0) {
        let (students, exercises) = if opts.full_population {
            ((0..graph.n_students()).collect(), (0..graph.n_exercises()).collect())
        } else {
            (
                distinct(batch.iter().map(|r| r.student)),
                distinct(batch.iter().map(|r| r.exercise)),
            )
        };
        let s1 = gcn_forward(tape, params, v1)?;
        let s2 = gcn_forward(tape, params, v2)?;
        let tau = opts.weights.tau;
        if students.len() >= 2 {
            let a = tape.gather(s1.final_students(), students.clone())?;
            let b = tape.gather(s2.final_students(), students)?;
            ssl_student = Some(infonce(tape, a, b, tau, opts.include_positive)?);
        }
        if exercises.len() >= 2 {
            let a = tape.gather(s1.final_exercises(), exercises.clone())?;
            let b = tape.gather(s2.final_exercises(), exercises)?;
            ssl_exercise = Some(infonce(tape, a, b, tau, opts.include_positive)?);
        }
    }
    let ssl: Vec<Var> = ssl_student.iter().chain(&ssl_exercise).copied().collect();
    let total = total_on_tape(tape, main, &ssl, reg, &opts.weights)?;
    Ok(BatchTerms {
        total,
        main,
        ssl_student,
        ssl_exercise,
        reg,
    })
}

/// Loss breakdown and parameter gradients (in [`ModelParams::tensors`]
/// order) of one batch.
pub fn batch_gradients(
    params: &ModelParams,
    graph: &DirectedSplit,
    views: Option<(&DirectedSplit, &DirectedSplit)>,
    q: &QMatrix,
    batch: &[ResponseRecord],
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let terms = batch_objective(&tape, &bound, graph, views, q, batch, opts)?;
    let breakdown = terms.breakdown(&tape, &opts.weights)?;
    let mut grads = tape.backward(terms.total)?;
    let g = bound.all().iter().map(|&v| grads.take(v)).collect();
    Ok((breakdown, g))
}

/// Independent stream `purpose` of epoch `epoch` under `seed`.
fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + purpose);
    rng
}

const VIEW_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Model, optimizer and data of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    train: ResponseSet,
    q: QMatrix,
    graph: DirectedSplit,
    uniform_p: Option<f64>,
    params: ModelParams,
    adam: AdamState,
    history: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: ResponseSet, q: QMatrix) -> Result<Self> {
        let shape = ModelShape {
            n_students: train.n_students(),
            n_exercises: train.n_exercises(),
            n_concepts: q.n_concepts(),
            dim: config.dim,
            layers: config.layers,
        };
        let params = init_params(shape, config.master_seed)?;
        let adam = AdamState::zeros_like(&params.tensors());
        Self::assemble(config, train, q, params, adam, Vec::new())
    }

    fn assemble(
        config: TrainConfig,
        train: ResponseSet,
        q: QMatrix,
        params: ModelParams,
        adam: AdamState,
        history: Vec<LossBreakdown>,
    ) -> Result<Self> {
        config.validate()?;
        let graph = directed_split(&build_relation_graph(&train, &q)?);
        let uniform_p = match config.mode {
            TrainMode::ScdRandom => Some(matched_uniform_p(&graph, &config.dropout())?),
            _ => None,
        };
        Ok(Self {
            config,
            train,
            q,
            graph,
            uniform_p,
            params,
            adam,
            history,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.history.len() != ck.epoch {
            return Err(ScdError::invalid(format!(
                "checkpoint at epoch {} carries {} log rows",
                ck.epoch,
                ck.history.len()
            )));
        }
        Self::assemble(ck.config, ck.train, ck.q, ck.params, ck.adam, ck.history)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn graph(&self) -> &DirectedSplit {
        &self.graph
    }

    pub fn q(&self) -> &QMatrix {
        &self.q
    }

    pub fn train_set(&self) -> &ResponseSet {
        &self.train
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// The uniform keep probability used in `scd-random` mode.
    pub fn uniform_p(&self) -> Option<f64> {
        self.uniform_p
    }

    /// The view pair of `epoch`, or `None` without a contrastive task.
    pub fn epoch_views(&self, epoch: usize) -> Result<Option<(DirectedSplit, DirectedSplit)>> {
        let mut rng = epoch_rng(self.config.master_seed, epoch, VIEW_STREAM);
        let (a, b) = match self.config.mode {
            TrainMode::SupervisedOnly => return Ok(None),
            TrainMode::Scd => generate_view_pair(&self.graph, &self.config.dropout(), &mut rng)?,
            TrainMode::ScdRandom => {
                generate_random_view_pair(&self.graph, self.uniform_p.expect("set for scd-random"), &mut rng)?
            }
        };
        Ok(Some((a.apply(&self.graph)?, b.apply(&self.graph)?)))
    }

    /// Training records in the batch order of `epoch`.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<ResponseRecord>> {
        let mut rng = epoch_rng(self.config.master_seed, epoch, SHUFFLE_STREAM);
        let mut records = self.train.records().to_vec();
        records.shuffle(&mut rng);
        records.chunks(self.config.batch_size).map(<[_]>::to_vec).collect()
    }

    /// Runs the next epoch and returns its batch-averaged loss. On a
    /// non-finite loss or gradient the model is left as it was before the
    /// epoch and a divergence error is returned.
    pub fn train_epoch(&mut self) -> Result<LossBreakdown> {
        let epoch = self.history.len();
        let snapshot = (self.params.clone(), self.adam.clone());
        match self.run_epoch(epoch) {
            Ok(b) => {
                self.history.push(b);
                Ok(b)
            }
            Err(e) => {
                (self.params, self.adam) = snapshot;
                Err(match e {
                    ScdError::NonFinite(detail) => ScdError::Diverged { epoch, detail },
                    other => other,
                })
            }
        }
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let views = self.epoch_views(epoch)?;
        let opts = ObjectiveOptions::from(&self.config);
        let adam_cfg = self.config.adam();
        let batches = self.epoch_batches(epoch);
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            let (b, grads) = batch_gradients(
                &self.params,
                &self.graph,
                views.as_ref().map(|(a, b)| (a, b)),
                &self.q,
                batch,
                &opts,
            )?;
            if !b.total.is_finite() {
                return Err(ScdError::NonFinite(format!("batch loss {}", b.total)));
            }
            for (s, v) in sums.iter_mut().zip([b.main, b.ssl_student, b.ssl_exercise, b.reg]) {
                *s += v;
            }
            let mut tensors = self.params.tensors_mut();
            adam_step(&mut tensors, &grads, &mut self.adam, &adam_cfg)?;
        }
        let n = batches.len() as f64;
        total_loss(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, &opts.weights)
    }

    /// Trains until `config.epochs` epochs are done.
    pub fn run(&mut self) -> Result<&[LossBreakdown]> {
        while self.epochs_done() < self.config.epochs {
            self.train_epoch()?;
        }
        Ok(&self.history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.history.len(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            history: self.history.clone(),
            train: self.train.clone(),
            q: self.q.clone(),
        }
    }
}

/// Everything needed to evaluate a model or continue its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: Vec<LossBreakdown>,
    pub train: ResponseSet,
    pub q: QMatrix,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| ScdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ScdError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn graph(&self) -> Result<DirectedSplit> {
        Ok(directed_split(&build_relation_graph(&self.train, &self.q)?))
    }
}

pub const LOG_HEADER: &str = "epoch,main,ssl_s,ssl_e,reg,total";

/// The training log as CSV, epochs numbered from 1.
pub fn log_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for (i, b) in history.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            i + 1,
            b.main,
            b.ssl_student,
            b.ssl_exercise,
            b.reg,
            b.total
        );
    }
    out
}

/// Paths written by [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Held-out records, when the run started from raw data.
    pub test: Option<PathBuf>,
    pub history: Vec<LossBreakdown>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

/// Loads, filters and splits the data named in `config`, trains, and writes
/// the checkpoint, the log and the train/test records to `output_dir`. With
/// `resume_from` set, training continues from that checkpoint up to
/// `config.epochs`.
pub fn fit(config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| ScdError::io(out, e))?;
    let mut test_path = None;
    let mut trainer = if let Some(ck_path) = &config.resume_from {
        let mut t = Trainer::from_checkpoint(Checkpoint::load(ck_path)?)?;
        t.set_epochs(config.epochs);
        t
    } else {
        let (responses, qmatrix) = match (&config.responses, &config.qmatrix) {
            (Some(r), Some(q)) => (r, q),
            _ => return Err(ScdError::invalid("config needs both responses and qmatrix paths")),
        };
        let all = filter_min_interactions(&load_responses(responses)?, config.min_interactions)?;
        let q = load_qmatrix(qmatrix, &all)?;
        let split = split_train_test(&all, config.train_ratio, config.master_seed)?;
        split.train.write_csv(&out.join(TRAIN_FILE))?;
        let tp = out.join(TEST_FILE);
        split.test.write_csv(&tp)?;
        test_path = Some(tp);
        Trainer::new(config.clone(), split.train, q)?
    };

    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let write_log = |h: &[LossBreakdown]| fs::write(&log_path, log_csv(h)).map_err(|e| ScdError::io(&log_path, e));
    while trainer.epochs_done() < config.epochs {
        if let Err(e) = trainer.train_epoch() {
            if matches!(e, ScdError::Diverged { .. }) {
                trainer.checkpoint().save(&ck_path)?;
                write_log(trainer.history())?;
            }
            return Err(e);
        }
        let done = trainer.epochs_done();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.epochs {
            trainer.checkpoint().save(&ck_path)?;
            write_log(trainer.history())?;
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    write_log(trainer.history())?;
    Ok(FitOutcome {
        checkpoint: ck_path,
        log: log_path,
        test: test_path,
        history: trainer.history().to_vec(),
    })
}
