//! Training loops: vanilla memorization, static and continual unlearning,
//! the gradient-ascent baseline and loss-weight sweeps.

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape};
use crate::eval::{self, float17, EvalError, MetricsReport, StageMetrics};
use crate::linalg::Matrix;
use crate::losses::{self, LossBreakdown, LossError, LossWeights, NegativeQueue, PushKind};
use crate::model::{AdapterKind, ModelError, ToyModel, TrainScope};
use crate::ncu::{self, NcuError, NullSpaceBasis};
use crate::rng::{self, StreamRng};
use crate::world::{Modality, Sample, Split, World};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ncu(#[from] NcuError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training contract violated: {0}")]
    Contract(String),
    #[error("memorization threshold {threshold} not reached after {epochs} epochs (worst slice {worst_slice} = {worst_value})")]
    Memorization {
        threshold: f64,
        epochs: usize,
        worst_slice: &'static str,
        worst_value: f64,
        report: Box<MetricsReport>,
        loss_curve: Vec<f64>,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Contrastive forgetting through null-space adapters (only `B` trains).
    CvfNcu,
    /// Same objective, `A` spans a random subspace.
    CvfRandom,
    /// Same objective through standard low-rank adapters (`A` and `B` train).
    CvfOnly,
    /// Negative-MSE push instead of the contrastive term, null-space adapters.
    Nmse,
    /// Gradient ascent on forget VQA, visual module only.
    Ga,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::CvfNcu, Method::CvfRandom, Method::CvfOnly, Method::Nmse, Method::Ga];

    pub fn name(self) -> &'static str {
        match self {
            Method::CvfNcu => "cvf_ncu",
            Method::CvfRandom => "cvf_random",
            Method::CvfOnly => "cvf_only",
            Method::Nmse => "nmse",
            Method::Ga => "ga",
        }
    }

    pub fn needs_basis(self) -> bool {
        matches!(self, Method::CvfNcu | Method::Nmse)
    }

    /// Methods that must leave adapter `A` untouched.
    pub fn freezes_a(self) -> bool {
        matches!(self, Method::CvfNcu | Method::CvfRandom | Method::Nmse)
    }
}

impl FromStr for Method {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| EngineError::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which reference IVRs feed the negative queue after each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueSource {
    Forget,
    Retain,
}

impl FromStr for QueueSource {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget" => Ok(QueueSource::Forget),
            "retain" => Ok(QueueSource::Retain),
            _ => Err(EngineError::Config(format!("unknown queue source {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size_forget: usize,
    pub batch_size_retain: usize,
    pub weights: LossWeights,
    pub r: usize,
    pub queue_capacity: usize,
    pub queue_source: QueueSource,
    pub grad_clip_norm: f64,
    /// Clip norm used instead of `grad_clip_norm` by the unbounded
    /// negative-MSE objective.
    pub nmse_grad_clip_norm: f64,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size_forget: 4,
            batch_size_retain: 8,
            weights: LossWeights {
                alpha: 30.0,
                ..LossWeights::default()
            },
            r: 8,
            queue_capacity: 256,
            queue_source: QueueSource::Retain,
            grad_clip_norm: 5.0,
            nmse_grad_clip_norm: 0.5,
            seed: 0,
            method: Method::CvfNcu,
        }
    }
}

fn check_optim(lr: f64, momentum: f64, clip: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(EngineError::Config(format!("learning_rate must be finite and >= 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(EngineError::Config(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if !(clip > 0.0) {
        return Err(EngineError::Config(format!("grad_clip_norm must be > 0, got {clip}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_optim(self.learning_rate, self.momentum, self.grad_clip_norm)?;
        if !(self.nmse_grad_clip_norm > 0.0) {
            return Err(EngineError::Config(format!("nmse_grad_clip_norm must be > 0, got {}", self.nmse_grad_clip_norm)));
        }
        if self.batch_size_forget == 0 || self.batch_size_retain == 0 {
            return Err(EngineError::Config("batch sizes must be >= 1".into()));
        }
        if self.method != Method::Ga {
            self.weights.validate()?;
            if self.r == 0 {
                return Err(EngineError::Config("r must be >= 1".into()));
            }
            if self.queue_capacity == 0 {
                return Err(EngineError::Config("queue_capacity must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    /// Sampler seed; weights are initialized from `init_seed`.
    pub seed: u64,
    pub init_seed: u64,
    /// Minimum accuracy on every slice; `None` skips the check.
    pub threshold: Option<f64>,
}

impl Default for VanillaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 200,
            batch_size: 16,
            grad_clip_norm: 5.0,
            seed: 0,
            init_seed: 0,
            threshold: Some(0.95),
        }
    }
}

/// SGD with heavy-ball momentum over the trainable parameters of a store.
pub struct Sgd {
    velocity: Vec<Option<Matrix>>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: Vec::new(),
            learning_rate,
            momentum,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let v = self.velocity[k].get_or_insert_with(|| Matrix::zeros(p.value.rows(), p.value.cols()));
            let mut next = v.scale(self.momentum);
            next.axpy(1.0, &p.grad).map_err(AutodiffError::from)?;
            p.value.axpy(-self.learning_rate, &next).map_err(AutodiffError::from)?;
            *v = next;
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad = p.grad.scale(s);
        }
    }
    norm
}

/// Endless shuffled pass over `0..n`; reshuffles at every wrap.
pub struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl CyclingSampler {
    pub fn new(n: usize, rng: StreamRng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: usize,
    pub epoch: usize,
    #[serde(serialize_with = "float17::serialize")]
    pub push: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub pull: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub ret: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub gum: f64,
    #[serde(serialize_with = "float17::serialize")]
    pub total: f64,
    /// Mean global gradient norm before clipping.
    #[serde(serialize_with = "float17::serialize")]
    pub grad_norm: f64,
    /// Per-step totals, in order.
    pub step_totals: Vec<f64>,
}

impl EpochLoss {
    fn new(stage: usize, epoch: usize) -> Self {
        Self {
            stage,
            epoch,
            ..Self::default()
        }
    }

    fn add(&mut self, b: &LossBreakdown) {
        self.push += b.push;
        self.pull += b.pull;
        self.ret += b.ret;
        self.gum += b.gum;
        self.total += b.total;
        self.step_totals.push(b.total);
    }

    fn finish(mut self) -> Self {
        let n = self.step_totals.len().max(1) as f64;
        self.push /= n;
        self.pull /= n;
        self.ret /= n;
        self.gum /= n;
        self.total /= n;
        self.grad_norm /= n;
        self
    }
}

/// Everything a run produced besides the weights. Contains no wall-clock
/// data so that identical inputs give identical records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub vanilla_config: Option<VanillaConfig>,
    pub epochs: Vec<EpochLoss>,
    /// Adapters-disabled report of the input checkpoint.
    pub before: Option<MetricsReport>,
    pub stages: Vec<MetricsReport>,
    /// Per continual stage, Forget-VQA accuracy of tasks seen so far.
    pub task_forget_vqa: Vec<Vec<f64>>,
    pub basis_builds: usize,
}

impl RunRecord {
    fn new(kind: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            seed,
            train_config: None,
            vanilla_config: None,
            epochs: Vec::new(),
            before: None,
            stages: Vec::new(),
            task_forget_vqa: Vec::new(),
            basis_builds: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialization cannot fail")
    }

    pub fn last_report(&self) -> Option<&MetricsReport> {
        self.stages.last()
    }
}

fn check_finite(b: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    if [b.push, b.pull, b.ret, b.gum, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFinite {
            epoch,
            step,
            breakdown: *b,
        })
    }
}

fn pick<'a>(pool: &[&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| pool[i]).collect()
}

/// Fits a fresh model to every VQA and QA sample of every split.
pub fn train_vanilla(world: &World, config: &VanillaConfig) -> Result<(ToyModel, RunRecord)> {
    check_optim(config.learning_rate, config.momentum, config.grad_clip_norm)?;
    if config.batch_size == 0 {
        return Err(EngineError::Config("batch_size must be >= 1".into()));
    }
    let mut model = ToyModel::new(crate::model::ModelConfig::for_world(&world.config, config.init_seed))?;
    model.set_train_scope(TrainScope::AllBase);
    let pool: Vec<&Sample> = world.samples.iter().collect();
    let mut sampler = CyclingSampler::new(pool.len(), rng::stream(config.seed, "vanilla-sampler"));
    let steps = pool.len().div_ceil(config.batch_size);
    let mut sgd = Sgd::new(config.learning_rate, config.momentum);
    let mut record = RunRecord::new("train", config.seed);
    record.vanilla_config = Some(config.clone());

    for epoch in 0..config.epochs {
        let mut ep = EpochLoss::new(0, epoch);
        for step in 0..steps {
            let batch = pick(&pool, &sampler.next_batch(config.batch_size));
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(batch.len());
            for s in &batch {
                let logits = match &s.image {
                    Some(img) => model.vqa_on_tape(&mut tape, img, &s.question_tokens, false)?.logits,
                    None => model.qa_on_tape(&mut tape, &s.question_tokens)?,
                };
                terms.push(tape.softmax_cross_entropy(logits, s.answer_id)?);
            }
            let loss = mean_node(&mut tape, &terms)?;
            let value = tape.scalar(loss);
            let b = LossBreakdown {
                gum: value,
                total: value,
                ..LossBreakdown::default()
            };
            check_finite(&b, epoch, step)?;
            ep.add(&b);
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            ep.grad_norm += clip_grad_norm(&mut model.params, config.grad_clip_norm);
            sgd.step(&mut model.params)?;
        }
        record.epochs.push(ep.finish());
    }
    model.set_train_scope(TrainScope::Frozen);
    model.params.zero_grads();

    let report = eval::eval_suite_with(&model, world, false)?;
    record.stages.push(report.clone());
    if let Some(threshold) = config.threshold {
        let (worst_slice, worst_value) = report
            .accuracies()
            .into_iter()
            .fold(("", f64::INFINITY), |acc, (n, v)| if v < acc.1 { (n, v) } else { acc });
        if worst_value < threshold {
            return Err(EngineError::Memorization {
                threshold,
                epochs: config.epochs,
                worst_slice,
                worst_value,
                report: Box::new(report),
                loss_curve: record.epochs.iter().map(|e| e.total).collect(),
            });
        }
    }
    Ok((model, record))
}

fn mean_node(tape: &mut Tape, terms: &[crate::autodiff::NodeId]) -> Result<crate::autodiff::NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Retain-set calibration: activation dump plus null-space basis.
pub fn build_ncu_basis(model: &ToyModel, world: &World, r: usize, seed: u64) -> Result<(ncu::ActivationDump, NullSpaceBasis)> {
    let retain = world.samples_of(Split::Retain, Modality::Vqa);
    let dump = ncu::collect_activations(model, &retain, &model.adapted_layers(), seed)?;
    let basis = ncu::build_basis(&dump, r)?;
    Ok((dump, basis))
}

/// Clones the vanilla checkpoint and installs the method's adapters.
pub fn prepare_model(checkpoint: &ToyModel, config: &TrainConfig, basis: Option<&NullSpaceBasis>) -> Result<ToyModel> {
    if !checkpoint.adapters().is_empty() {
        return Err(EngineError::Contract("input checkpoint already carries adapters".into()));
    }
    let mut model = checkpoint.clone();
    match config.method {
        Method::CvfNcu | Method::Nmse => {
            let basis = basis.ok_or_else(|| EngineError::Contract(format!("{} needs a null-space basis", config.method)))?;
            if basis.r != config.r {
                return Err(EngineError::Config(format!("basis rank {} differs from r = {}", basis.r, config.r)));
            }
            ncu::init_lora_ncu(&mut model, basis)?;
            model.set_train_scope(TrainScope::AdapterB);
        }
        Method::CvfRandom => {
            ncu::init_lora_random(&mut model, config.r, config.seed)?;
            model.set_train_scope(TrainScope::AdapterB);
        }
        Method::CvfOnly => {
            let mut a_mats = Vec::new();
            for (k, layer) in model.adapted_layers().into_iter().enumerate() {
                let (d_in, _) = model.layer_dims(layer);
                if config.r >= d_in {
                    return Err(NcuError::RankOutOfRange { layer, r: config.r, d: d_in }.into());
                }
                a_mats.push((layer, ncu::random_orthonormal_rows(config.r, d_in, config.seed, k as u64)?));
            }
            model.attach_adapters(a_mats, AdapterKind::Standard)?;
            model.set_train_scope(TrainScope::AdapterAB);
        }
        Method::Ga => model.set_train_scope(TrainScope::VisualBase),
    }
    Ok(model)
}

/// Checks the per-step trainable mask for the method.
fn assert_scope(model: &ToyModel, method: Method) -> Result<()> {
    let lm = model.lm_param_ids();
    let adapter_b: Vec<ParamId> = model.adapters().iter().map(|a| a.b).collect();
    let adapter_a: Vec<ParamId> = model.adapters().iter().map(|a| a.a).collect();
    let visual = model.visual_param_ids();
    for (id, p) in model.params.iter() {
        if !p.trainable {
            continue;
        }
        let allowed = match method {
            Method::Ga => visual.contains(&id),
            Method::CvfOnly => adapter_a.contains(&id) || adapter_b.contains(&id),
            _ => adapter_b.contains(&id),
        };
        if !allowed || lm.contains(&id) {
            return Err(EngineError::Contract(format!("parameter {} is trainable under {method}", p.name)));
        }
    }
    Ok(())
}

fn snapshot(model: &ToyModel, ids: &[ParamId]) -> Vec<Matrix> {
    ids.iter().map(|&id| model.params.value(id).clone()).collect()
}

fn assert_unchanged(model: &ToyModel, ids: &[ParamId], before: &[Matrix], what: &str) -> Result<()> {
    for (&id, b) in ids.iter().zip(before) {
        if !crate::model::bits_equal(model.params.value(id), b) {
            return Err(EngineError::Contract(format!("{what} parameter {} changed", model.params.get(id).name)));
        }
    }
    Ok(())
}

/// Runs one unlearning task on an already prepared model.
fn run_task(
    model: &mut ToyModel,
    forget: &[&Sample],
    retain: &[&Sample],
    config: &TrainConfig,
    task: usize,
    record: &mut RunRecord,
) -> Result<()> {
    if forget.is_empty() || retain.is_empty() {
        return Err(EngineError::Contract("forget and retain sets must be non-empty".into()));
    }
    let mut f_sampler = CyclingSampler::new(forget.len(), rng::indexed_stream(config.seed, "forget-sampler", task as u64));
    let mut r_sampler = CyclingSampler::new(retain.len(), rng::indexed_stream(config.seed, "retain-sampler", task as u64));
    let steps = forget.len().div_ceil(config.batch_size_forget);
    let mut sgd = Sgd::new(config.learning_rate, config.momentum);
    let mut queue = NegativeQueue::new(config.queue_capacity, model.config.d_lm);
    let (push_kind, clip) = if config.method == Method::Nmse {
        (PushKind::NegativeMse, config.nmse_grad_clip_norm)
    } else {
        (PushKind::Contrastive, config.grad_clip_norm)
    };

    for epoch in 0..config.epochs {
        let mut ep = EpochLoss::new(task, epoch);
        for step in 0..steps {
            assert_scope(model, config.method)?;
            let fb = pick(forget, &f_sampler.next_batch(config.batch_size_forget));
            let mut tape = Tape::new();
            let (loss, breakdown) = if config.method == Method::Ga {
                let mut terms = Vec::with_capacity(fb.len());
                for s in &fb {
                    let image = s.image.as_ref().ok_or(ModelError::MissingImage)?;
                    let n = model.vqa_on_tape(&mut tape, image, &s.question_tokens, false)?;
                    terms.push(tape.softmax_cross_entropy(n.logits, s.answer_id)?);
                }
                let ce = mean_node(&mut tape, &terms)?;
                let loss = tape.scale(ce, -1.0);
                let b = LossBreakdown {
                    push: tape.scalar(ce),
                    total: tape.scalar(loss),
                    ..LossBreakdown::default()
                };
                (loss, b)
            } else {
                let rb = pick(retain, &r_sampler.next_batch(config.batch_size_retain));
                let t = losses::total_loss(&mut tape, model, &fb, &rb, &mut queue, &config.weights, push_kind)?;
                let fresh = match config.queue_source {
                    QueueSource::Forget => &t.forget_reference,
                    QueueSource::Retain => &t.retain_reference,
                };
                for z in fresh {
                    queue.enqueue(z.data())?;
                }
                (t.node, t.breakdown)
            };
            check_finite(&breakdown, epoch, step)?;
            ep.add(&breakdown);
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            ep.grad_norm += clip_grad_norm(&mut model.params, clip);
            sgd.step(&mut model.params)?;
        }
        record.epochs.push(ep.finish());
    }
    model.params.zero_grads();
    Ok(())
}

fn forget_vqa<'w>(world: &'w World, ids: &[usize]) -> Vec<&'w Sample> {
    world.samples_for_entities(ids, Modality::Vqa)
}

/// Static unlearning of the whole forget split.
///
/// `basis` is required by the null-space methods and ignored otherwise.
pub fn unlearn_static(checkpoint: &ToyModel, world: &World, config: &TrainConfig, basis: Option<&NullSpaceBasis>) -> Result<(ToyModel, RunRecord)> {
    config.validate()?;
    let mut model = prepare_model(checkpoint, config, basis)?;
    let mut record = RunRecord::new(config.method.name(), config.seed);
    record.train_config = Some(config.clone());
    record.basis_builds = usize::from(config.method.needs_basis());
    record.before = Some(eval::eval_suite_with(checkpoint, world, false)?);

    let lm = model.lm_param_ids();
    let lm_before = snapshot(&model, &lm);
    let a_ids: Vec<ParamId> = model.adapters().iter().map(|a| a.a).collect();
    let a_before = snapshot(&model, &a_ids);

    let forget = forget_vqa(world, world.entity_ids(Split::Forget));
    let retain = world.samples_of(Split::Retain, Modality::Vqa);
    run_task(&mut model, &forget, &retain, config, 0, &mut record)?;

    assert_unchanged(&model, &lm, &lm_before, "language-model")?;
    if config.method.freezes_a() {
        assert_unchanged(&model, &a_ids, &a_before, "adapter A")?;
    }
    model.set_train_scope(TrainScope::Frozen);
    record.stages.push(eval::eval_suite(&model, world)?);
    Ok((model, record))
}

/// Gradient ascent on forget VQA over the visual module.
pub fn unlearn_ga(checkpoint: &ToyModel, world: &World, config: &TrainConfig) -> Result<(ToyModel, RunRecord)> {
    let config = TrainConfig {
        method: Method::Ga,
        ..config.clone()
    };
    unlearn_static(checkpoint, world, &config, None)
}

/// One continual stage: the model after task `stage` and its metrics.
#[derive(Clone, Debug)]
pub struct ContinualStage {
    pub model: ToyModel,
    pub metrics: StageMetrics,
}

/// Sequential unlearning of `world.continual_tasks`; `A` is fixed once and
/// `B` carries over between tasks.
pub fn unlearn_continual(
    checkpoint: &ToyModel,
    world: &World,
    config: &TrainConfig,
    basis: Option<&NullSpaceBasis>,
) -> Result<(Vec<ContinualStage>, RunRecord)> {
    config.validate()?;
    if config.method == Method::Ga {
        return Err(EngineError::Config("continual unlearning needs an adapter method".into()));
    }
    let tasks = world
        .continual_tasks
        .as_ref()
        .ok_or_else(|| EngineError::Contract("world has no continual tasks".into()))?;
    let mut model = prepare_model(checkpoint, config, basis)?;
    let mut record = RunRecord::new("continual", config.seed);
    record.train_config = Some(config.clone());
    record.basis_builds = usize::from(config.method.needs_basis());
    record.before = Some(eval::eval_suite_with(checkpoint, world, false)?);

    let lm = model.lm_param_ids();
    let lm_before = snapshot(&model, &lm);
    let a_ids: Vec<ParamId> = model.adapters().iter().map(|a| a.a).collect();
    let a_before = snapshot(&model, &a_ids);
    let retain = world.samples_of(Split::Retain, Modality::Vqa);

    let mut stages = Vec::with_capacity(tasks.len());
    for (t, ids) in tasks.iter().enumerate() {
        let forget = forget_vqa(world, ids);
        run_task(&mut model, &forget, &retain, config, t, &mut record)?;
        assert_unchanged(&model, &lm, &lm_before, "language-model")?;
        if config.method.freezes_a() {
            assert_unchanged(&model, &a_ids, &a_before, "adapter A")?;
        }
        let mut report = eval::eval_suite(&model, world)?;
        report.stage = Some(t + 1);
        let per_task = eval::task_forget_vqa(&model, world, &tasks[..=t])?;
        record.stages.push(report.clone());
        record.task_forget_vqa.push(per_task.clone());
        let mut snapshot_model = model.clone();
        snapshot_model.set_train_scope(TrainScope::Frozen);
        stages.push(ContinualStage {
            model: snapshot_model,
            metrics: StageMetrics {
                stage: t + 1,
                report,
                task_forget_vqa: per_task,
            },
        });
    }
    Ok((stages, record))
}

/// Loss weights for one sweep cell; unset fields keep the base config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: Result<MetricsReport>,
}

/// One static run per cell from a shared checkpoint and basis. Cell
/// failures are reported in place.
pub fn sweep(checkpoint: &ToyModel, world: &World, base: &TrainConfig, basis: Option<&NullSpaceBasis>, cells: &[SweepCell]) -> Vec<SweepRow> {
    cells
        .iter()
        .map(|&cell| {
            let mut config = base.clone();
            config.weights.alpha = cell.alpha;
            config.weights.beta = cell.beta;
            config.weights.lambda = cell.lambda;
            let result = unlearn_static(checkpoint, world, &config, basis).map(|(_, rec)| rec.stages.last().cloned().expect("static run has a stage"));
            SweepRow { cell, result }
        })
        .collect()
}

/// CSV of sweep results; failed cells get an `error` column.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,beta,lambda,forget_vqa,forget_qa,retain_vqa,retain_qa,rw_vqa,rw_qa,error\n");
    for row in rows {
        let c = row.cell;
        out.push_str(&format!("{},{},{}", eval::fmt_f64(c.alpha), eval::fmt_f64(c.beta), eval::fmt_f64(c.lambda)));
        match &row.result {
            Ok(r) => {
                for (_, v) in r.accuracies() {
                    out.push(',');
                    out.push_str(&eval::fmt_f64(v));
                }
                out.push_str(",\n");
            }
            Err(e) => {
                out.push_str(&",".repeat(6));
                out.push_str(&format!(",\"{}\"\n", e.to_string().replace('"', "'")));
            }
        }
    }
    out
}
