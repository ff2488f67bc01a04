//! Cross-city distillation: a memory-aggregating teacher and a memory-free
//! student that share the prediction layer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::dnc::EncoderMode;
use crate::error::{Error, Result};
use crate::features::{Batch, Sample, Standardizer};
use crate::graph::{bce_logit, Graph, Var};
use crate::metrics::evaluate;
use crate::model::{bce_loss, predict_with, Forward, ModelConfig, MvModel, MvNet};
use crate::optim::AdamState;
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{
    divergence, labels_of, seeded, selection_score, shuffled_batches, EarlyStopping,
    TrainConfig, STREAM_INIT, STREAM_SHUFFLE,
};

/// Lower clamp on the label-loss weights α and β.
pub const WEIGHT_FLOOR: f64 = 0.01;
/// Norm floor inside the cosine similarity.
pub const COSINE_FLOOR: f64 = 1e-12;
/// Raw value whose softplus is 1.
pub const RAW_ONE: f64 = 0.541_324_854_612_918_1;

/// Frozen memory snapshots of the source cities.
#[derive(Debug, Clone, PartialEq)]
pub struct CityMemoryBank {
    pub cities: Vec<String>,
    pub memories: Vec<Tensor>,
}

impl CityMemoryBank {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(Error::Contract("memory bank needs at least one source city".into()));
        };
        let shape = first.shape();
        for (city, m) in &entries {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: "memory_bank",
                    lhs: shape,
                    rhs: m.shape(),
                });
            }
            if !m.is_finite() {
                return Err(Error::Contract(format!("memory of {city} is not finite")));
            }
        }
        let (cities, memories) = entries.into_iter().unzip();
        Ok(Self { cities, memories })
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.memories[0].shape()
    }
}

/// Per-source row attention `softmax((M W^q)(M_s W^k)ᵀ / √m)`.
fn bank_attention(g: &mut Graph, target: Var, source: Var, wq: Var, wk: Var) -> Result<Var> {
    let m = g.shape(target).1 as f64;
    let q = g.matmul(target, wq)?;
    let k = g.matmul(source, wk)?;
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / libm::sqrt(m));
    Ok(g.softmax_rows(s))
}

/// `M + Σ_j softmax((M W^q)(M_j W^k)ᵀ / √m) (M_j W^v)` on the tape.
pub fn aggregate_memories(
    g: &mut Graph,
    target: Var,
    bank: &[Var],
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::Contract("memory bank is empty".into()));
    }
    let mut out = target;
    for &source in bank {
        if g.shape(source) != g.shape(target) {
            return Err(Error::Dimension {
                op: "aggregate_memories",
                lhs: g.shape(target),
                rhs: g.shape(source),
            });
        }
        let attn = bank_attention(g, target, source, wq, wk)?;
        let v = g.matmul(source, wv)?;
        let add = g.matmul(attn, v)?;
        out = g.add(out, add)?;
    }
    Ok(out)
}

/// Plain-value aggregation and the per-source attention matrices.
pub fn aggregate_plain(
    target: &Tensor,
    bank: &CityMemoryBank,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let t = g.constant(target.clone());
    let sources: Vec<Var> = bank.memories.iter().map(|m| g.constant(m.clone())).collect();
    let (q, k, v) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let mut attn = Vec::with_capacity(sources.len());
    for &s in &sources {
        let a = bank_attention(&mut g, t, s, q, k)?;
        attn.push(g.value(a).clone());
    }
    let out = aggregate_memories(&mut g, t, &sources, q, k, v)?;
    Ok((g.value(out).clone(), attn))
}

#[derive(Debug, Clone, Copy)]
pub struct Aggregator {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Raw parameters behind α, β, γ.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl LossWeights {
    fn new(store: &mut ParamStore) -> Self {
        Self {
            alpha: store.add("kd.alpha", Tensor::scalar(RAW_ONE)),
            beta: store.add("kd.beta", Tensor::scalar(RAW_ONE)),
            gamma: store.add("kd.gamma", Tensor::scalar(RAW_ONE)),
        }
    }

    /// `(α, β, γ)` on the tape.
    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var, Var) {
        let mut weight = |id: ParamId, floor: Option<f64>| {
            let raw = g.param(id, store.get(id));
            let w = g.softplus(raw);
            match floor {
                Some(f) => g.clamp_min(w, f),
                None => w,
            }
        };
        (
            weight(self.alpha, Some(WEIGHT_FLOOR)),
            weight(self.beta, Some(WEIGHT_FLOOR)),
            weight(self.gamma, None),
        )
    }

    pub fn values(&self, store: &ParamStore) -> (f64, f64, f64) {
        let sp = |id: ParamId| crate::graph::scalar_softplus(store.get(id).item());
        (
            sp(self.alpha).max(WEIGHT_FLOOR),
            sp(self.beta).max(WEIGHT_FLOOR),
            sp(self.gamma),
        )
    }
}

/// Teacher, student, shared head, aggregation weights and loss weights.
#[derive(Debug, Clone)]
pub struct KdNet {
    pub teacher: MvNet,
    pub student: MvNet,
    pub aggregator: Aggregator,
    pub weights: LossWeights,
    /// Frozen source memories, in bank order.
    pub bank: Vec<ParamId>,
    pub bank_cities: Vec<String>,
}

/// Scalar terms of one distillation loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct KdTerms {
    pub total: Var,
    pub bce_teacher: Var,
    pub bce_student: Var,
    pub mean_cos: Var,
}

/// Row-wise cosine similarity with norms floored at [`COSINE_FLOOR`].
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let dot = g.sum_rows(ab);
    let mut norm = |v: Var| -> Result<Var> {
        let sq = g.square(v)?;
        let s = g.sum_rows(sq);
        let n = g.sqrt(s);
        Ok(g.clamp_min(n, COSINE_FLOOR))
    };
    let na = norm(a)?;
    let nb = norm(b)?;
    let den = g.mul(na, nb)?;
    g.div(dot, den)
}

impl KdNet {
    pub fn teacher_memory(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let target = self.teacher.memory.expect("teacher runs in full mode");
        let t = g.param(target, store.get(target));
        let bank: Vec<Var> = self.bank.iter().map(|&id| g.constant(store.get(id).clone())).collect();
        let a = self.aggregator;
        let wq = g.param(a.query, store.get(a.query));
        let wk = g.param(a.key, store.get(a.key));
        let wv = g.param(a.value, store.get(a.value));
        aggregate_memories(g, t, &bank, wq, wk, wv)
    }

    pub fn teacher_forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Forward> {
        let memory = self.teacher_memory(g, store)?;
        self.teacher.forward(g, store, batch, Some(memory))
    }

    pub fn student_forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Forward> {
        self.student.forward(g, store, batch, None)
    }

    /// `α·BCE_T + β·BCE_S − γ·mean cos(v^T, v^S)`.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        teacher: &Forward,
        student: &Forward,
        labels: &[f64],
    ) -> Result<KdTerms> {
        let (alpha, beta, gamma) = self.weights.vars(g, store);
        kd_loss(g, teacher, student, labels, alpha, beta, gamma)
    }
}

pub fn kd_loss(
    g: &mut Graph,
    teacher: &Forward,
    student: &Forward,
    labels: &[f64],
    alpha: Var,
    beta: Var,
    gamma: Var,
) -> Result<KdTerms> {
    if g.shape(teacher.repr) != g.shape(student.repr) {
        return Err(Error::Dimension {
            op: "kd_loss",
            lhs: g.shape(teacher.repr),
            rhs: g.shape(student.repr),
        });
    }
    let bce_teacher = bce_loss(g, teacher.logits, labels)?;
    let bce_student = bce_loss(g, student.logits, labels)?;
    let cos = cosine_rows(g, teacher.repr, student.repr)?;
    let mean_cos = g.mean(cos);
    let a = g.mul(alpha, bce_teacher)?;
    let b = g.mul(beta, bce_student)?;
    let c = g.mul(gamma, mean_cos)?;
    let ab = g.add(a, b)?;
    let total = g.sub(ab, c)?;
    Ok(KdTerms {
        total,
        bce_teacher,
        bce_student,
        mean_cos,
    })
}

/// The distillation loss on plain values: probabilities, labels and
/// representation rows.
pub fn kd_loss_value(
    p_teacher: &[f64],
    p_student: &[f64],
    labels: &[f64],
    v_teacher: &[Vec<f64>],
    v_student: &[Vec<f64>],
    (alpha, beta, gamma): (f64, f64, f64),
) -> f64 {
    let n = labels.len().max(1) as f64;
    let bce = |p: &[f64]| {
        p.iter()
            .zip(labels)
            .map(|(&p, &y)| bce_logit(libm::log(p) - libm::log1p(-p), y))
            .sum::<f64>()
            / n
    };
    let cos: f64 = v_teacher
        .iter()
        .zip(v_student)
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>()).max(COSINE_FLOOR);
            let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>()).max(COSINE_FLOOR);
            dot / (na * nb)
        })
        .sum::<f64>()
        / n;
    alpha * bce(p_teacher) + beta * bce(p_student) - gamma * cos
}

/// Parameters and input statistics of a distillation pair.
#[derive(Debug, Clone)]
pub struct KdModel {
    pub net: KdNet,
    pub store: ParamStore,
    pub stats: Standardizer,
}

impl KdModel {
    /// Builds teacher and student for one target city. `target_memory`
    /// initialises the teacher's own memory.
    pub fn new(
        config: ModelConfig,
        bank: &CityMemoryBank,
        target_memory: Option<&Tensor>,
        stats: Standardizer,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.ablation.plain_gru {
            return Err(Error::Contract("the teacher needs the memory encoder".into()));
        }
        if bank.shape() != (config.mem_rows, config.mem_cols) {
            return Err(Error::Dimension {
                op: "kd_model",
                lhs: (config.mem_rows, config.mem_cols),
                rhs: bank.shape(),
            });
        }
        let mut store = ParamStore::new();
        // the student draws first so that it starts exactly where a solo
        // student built from the same generator would
        let student = MvNet::new(config, EncoderMode::Student, "student", None, &mut store, rng)?;
        let teacher =
            MvNet::new(config, EncoderMode::Full, "teacher", Some(student.head), &mut store, rng)?;
        let m = config.mem_cols;
        let aggregator = Aggregator {
            query: store.add("teacher.aggregate.q", glorot(m, m, rng)),
            key: store.add("teacher.aggregate.k", glorot(m, m, rng)),
            value: store.add("teacher.aggregate.v", glorot(m, m, rng)),
        };
        let weights = LossWeights::new(&mut store);
        let ids = bank
            .cities
            .iter()
            .zip(&bank.memories)
            .map(|(c, mem)| store.add_frozen(format!("bank.{c}"), mem.clone()))
            .collect();
        if let Some(mem) = target_memory {
            if mem.shape() != bank.shape() {
                return Err(Error::Dimension {
                    op: "target_memory",
                    lhs: bank.shape(),
                    rhs: mem.shape(),
                });
            }
            let id = teacher.memory.expect("teacher runs in full mode");
            *store.get_mut(id) = mem.clone();
        }
        Ok(Self {
            net: KdNet {
                teacher,
                student,
                aggregator,
                weights,
                bank: ids,
                bank_cities: bank.cities.clone(),
            },
            store,
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.teacher.config
    }

    pub fn bank(&self) -> CityMemoryBank {
        CityMemoryBank {
            cities: self.net.bank_cities.clone(),
            memories: self.net.bank.iter().map(|&id| self.store.get(id).clone()).collect(),
        }
    }

    fn batch(&self, samples: &[Sample]) -> Result<Batch> {
        let refs: Vec<&Sample> = samples.iter().collect();
        Batch::build(&refs, &self.stats, self.config().vocab)
    }

    pub fn predict_teacher(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        predict_with(samples, |chunk| {
            let batch = self.batch(chunk)?;
            let mut g = Graph::new();
            let out = self.net.teacher_forward(&mut g, &self.store, &batch)?;
            let p = g.sigmoid(out.logits);
            Ok(g.value(p).data().to_vec())
        })
    }

    pub fn predict_student(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        predict_with(samples, |chunk| {
            let batch = self.batch(chunk)?;
            let mut g = Graph::new();
            let out = self.net.student_forward(&mut g, &self.store, &batch)?;
            let p = g.sigmoid(out.logits);
            Ok(g.value(p).data().to_vec())
        })
    }

    /// Scalar parameter counts of (teacher, student), each including the
    /// shared head.
    pub fn param_counts(&self) -> (usize, usize) {
        let head = self.net.student.head;
        let mut teacher = 0;
        let mut student = 0;
        for (id, p) in self.store.iter() {
            let n = p.value.len();
            if id == head.w || id == head.b {
                teacher += n;
                student += n;
            } else if p.name.starts_with("teacher.") {
                teacher += n;
            } else if p.name.starts_with("student.") {
                student += n;
            }
        }
        (teacher, student)
    }
}

/// Trains a plain multi-view model on the target city for `epochs` epochs
/// and returns its memory.
pub fn pretrain_target_memory(
    config: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Tensor> {
    if train.is_empty() {
        return Err(Error::Empty("target training split"));
    }
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..*cfg
    };
    let stats = Standardizer::fit(train);
    let mut model = MvModel::new(config, stats, &mut seeded(cfg.seed, STREAM_INIT))?;
    crate::train::train_mv(&mut model, train, val, &cfg, &mut ())?;
    model
        .memory()
        .cloned()
        .ok_or_else(|| Error::Contract("pretraining needs the memory encoder".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub bce_teacher: f64,
    pub bce_student: f64,
    /// Mean cosine between teacher and student representations over the
    /// epoch's training batches.
    pub mean_cos: f64,
    pub val_auc_teacher: Option<f64>,
    pub val_auc_student: Option<f64>,
    pub val_rmse_student: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdOutcome {
    pub history: Vec<KdEpochRecord>,
    /// Epoch whose parameters were kept, selected on student validation AUC.
    pub best_epoch: usize,
}

/// Hooks for distillation training, as [`crate::train::Monitor`].
pub trait KdMonitor {
    fn now(&mut self) -> f64 {
        0.0
    }

    fn epoch(&mut self, _record: &KdEpochRecord) {}
}

impl KdMonitor for () {}


/// Jointly trains teacher, student and loss weights. On return the model
/// holds the parameters of the best student validation epoch.
pub fn train_kd(
    model: &mut KdModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    monitor: &mut impl KdMonitor,
) -> Result<KdOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut rng = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let mut stop = EarlyStopping::new(cfg.patience);
    let val_labels = labels_of(val);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let started = monitor.now();
        let mut sums = [0.0; 4];
        for (b, idx) in shuffled_batches(train.len(), cfg.batch, &mut rng).into_iter().enumerate() {
            let rows: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::build(&rows, &model.stats, model.config().vocab)?;
            let mut g = Graph::new();
            let t = model.net.teacher_forward(&mut g, &model.store, &batch)?;
            let s = model.net.student_forward(&mut g, &model.store, &batch)?;
            let terms = model.net.loss(&mut g, &model.store, &t, &s, &batch.labels)?;
            let value = g.value(terms.total).item();
            if !value.is_finite() {
                return Err(divergence(epoch, b, value, &model.store));
            }
            let w = rows.len() as f64;
            for (acc, v) in sums.iter_mut().zip([
                terms.total,
                terms.bce_teacher,
                terms.bce_student,
                terms.mean_cos,
            ]) {
                *acc += g.value(v).item() * w;
            }
            let grads = g.backward(terms.total)?;
            let norm = adam.step(&mut model.store, &grads)?;
            if !norm.is_finite() {
                return Err(divergence(epoch, b, norm, &model.store));
            }
        }
        let n = train.len() as f64;
        let teacher = evaluate(&model.predict_teacher(val)?, &val_labels)?;
        let student = evaluate(&model.predict_student(val)?, &val_labels)?;
        let (alpha, beta, gamma) = model.net.weights.values(&model.store);
        if !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must stay positive, got ({alpha}, {beta}, {gamma})"
            )));
        }
        let record = KdEpochRecord {
            epoch,
            loss: sums[0] / n,
            bce_teacher: sums[1] / n,
            bce_student: sums[2] / n,
            mean_cos: sums[3] / n,
            val_auc_teacher: teacher.auc,
            val_auc_student: student.auc,
            val_rmse_student: student.rmse,
            alpha,
            beta,
            gamma,
            secs: monitor.now() - started,
        };
        monitor.epoch(&record);
        history.push(record);
        if stop.observe(selection_score(&student), epoch, &model.store) {
            break;
        }
    }
    let (_, best_epoch, store) = stop.best.expect("at least one epoch ran");
    model.store = store;
    Ok(KdOutcome {
        history,
        best_epoch,
    })
}
