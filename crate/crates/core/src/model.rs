//! The multi-view model.
//!
//! Passenger, driver and order views are embedded to a common width `d`;
//! the context sequence goes through the memory encoder. Pairwise
//! interactions between passenger, driver and context embeddings are
//! combined with the plain embeddings by an attention gate keyed on the
//! order embedding, and a logistic head predicts the success rate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::dnc::{ControllerKind, Encoder, EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::features::{
    Batch, DenseEmbed, OrderEmbed, Sample, Standardizer, Vocab, CONTEXT_WIDTH, COUNT_WIDTH,
};
use crate::graph::{bce_logit, Graph, Var};
use crate::params::{glorot, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ablation {
    /// S1: drop the cross-view interactions.
    pub no_interactions: bool,
    /// S2: concatenate instead of attention.
    pub concat: bool,
    /// S3: plain GRU context encoder, no external memory.
    pub plain_gru: bool,
    /// S4: LSTM controller inside the memory encoder.
    pub lstm: bool,
}

impl Ablation {
    pub fn parse(tag: &str) -> Option<Self> {
        let mut a = Self::default();
        match tag.to_ascii_lowercase().as_str() {
            "s1" => a.no_interactions = true,
            "s2" => a.concat = true,
            "s3" => a.plain_gru = true,
            "s4" => a.lstm = true,
            "" | "none" | "mv" => {}
            _ => return None,
        }
        Some(a)
    }

    pub fn tag(&self) -> &'static str {
        match (self.no_interactions, self.concat, self.plain_gru, self.lstm) {
            (false, false, false, false) => "mv",
            (true, false, false, false) => "s1",
            (false, true, false, false) => "s2",
            (false, false, true, false) => "s3",
            (false, false, false, true) => "s4",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
    pub read_heads: usize,
    pub ctx_len: usize,
    pub vocab: Vocab,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 64,
            layers: 1,
            mem_rows: 16,
            mem_cols: 16,
            read_heads: 2,
            ctx_len: 8,
            vocab: Vocab::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.hidden,
            self.layers,
            self.mem_rows,
            self.mem_cols,
            self.read_heads,
            self.ctx_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Contract(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder(&self, mode: EncoderMode) -> EncoderConfig {
        EncoderConfig {
            ctx_width: CONTEXT_WIDTH,
            hidden: self.hidden,
            layers: self.layers,
            mem_rows: self.mem_rows,
            mem_cols: self.mem_cols,
            read_heads: self.read_heads,
            embed_dim: self.embed_dim,
            controller: if self.ablation.lstm {
                ControllerKind::Lstm
            } else {
                ControllerKind::Gru
            },
            mode,
        }
    }

    /// Width of the combined representation `v`.
    pub fn repr_width(&self) -> usize {
        self.reps().len() * self.embed_dim
    }

    pub fn reps(&self) -> &'static [Rep] {
        if self.ablation.no_interactions {
            &[Rep::P, Rep::D, Rep::C]
        } else {
            &Rep::ALL
        }
    }
}

/// The six representations fed to the attention gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rep {
    Pd,
    Pc,
    Dc,
    P,
    D,
    C,
}

impl Rep {
    pub const ALL: [Rep; 6] = [Rep::Pd, Rep::Pc, Rep::Dc, Rep::P, Rep::D, Rep::C];

    pub fn name(self) -> &'static str {
        match self {
            Rep::Pd => "pd",
            Rep::Pc => "pc",
            Rep::Dc => "dc",
            Rep::P => "p",
            Rep::D => "d",
            Rep::C => "c",
        }
    }

    pub fn is_interaction(self) -> bool {
        matches!(self, Rep::Pd | Rep::Pc | Rep::Dc)
    }
}

/// `[<a,b> ; a ⊙ b ; rowsum(a b^T)]` per row, width `2d + 1`.
///
/// The outer product summed along its second dimension is `a * Σ_j b_j`.
pub fn interact_views(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension {
            op: "interact_views",
            lhs: g.shape(a),
            rhs: g.shape(b),
        });
    }
    let prod = g.mul(a, b)?;
    let inner = g.sum_rows(prod);
    let b_sum = g.sum_rows(b);
    let outer = g.mul(a, b_sum)?;
    g.concat_cols(&[inner, prod, outer])
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Prediction layer `(w, b)`; the distillation pair shares one instance.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn new(name: &str, width: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(width, 1, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, 1)),
        }
    }

    /// Logit `v w + b`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let w = g.param(self.w, store.get(self.w));
        let b = g.param(self.b, store.get(self.b));
        let z = g.matmul(v, w)?;
        g.add(z, b)
    }
}

/// Scores each representation against the order embedding, normalises the
/// scores jointly with a softmax, and concatenates the weighted value
/// projections. Returns `(v, weights)`.
pub fn attentive_combine(
    g: &mut Graph,
    store: &ParamStore,
    order: Var,
    reps: &[Var],
    params: &[AttentionParams],
) -> Result<(Var, Var)> {
    if reps.len() != params.len() || reps.is_empty() {
        return Err(Error::Contract(format!(
            "{} representations for {} attention triples",
            reps.len(),
            params.len()
        )));
    }
    let d = g.shape(order).1 as f64;
    let mut scores = Vec::with_capacity(reps.len());
    let mut values = Vec::with_capacity(reps.len());
    for (&e, p) in reps.iter().zip(params) {
        let wq = g.param(p.query, store.get(p.query));
        let wk = g.param(p.key, store.get(p.key));
        let wv = g.param(p.value, store.get(p.value));
        let q = g.matmul(order, wq)?;
        let k = g.matmul(e, wk)?;
        let qk = g.mul(q, k)?;
        let s = g.sum_rows(qk);
        scores.push(g.scale(s, 1.0 / libm::sqrt(d)));
        values.push(g.matmul(e, wv)?);
    }
    let scores = g.concat_cols(&scores)?;
    let weights = g.softmax_rows(scores);
    let mut weighted = Vec::with_capacity(values.len());
    for (f, &v) in values.iter().enumerate() {
        let w = g.slice_cols(weights, f, 1)?;
        weighted.push(g.mul(v, w)?);
    }
    Ok((g.concat_cols(&weighted)?, weights))
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    /// Combined representation `v`.
    pub repr: Var,
    /// Attention weights over representations, absent under concatenation.
    pub attention: Option<Var>,
    pub context: Var,
}

/// Parameter layout of one multi-view network.
#[derive(Debug, Clone)]
pub struct MvNet {
    pub config: ModelConfig,
    pub passenger: DenseEmbed,
    pub driver: DenseEmbed,
    pub order: OrderEmbed,
    pub encoder: Encoder,
    pub memory: Option<ParamId>,
    pub attention: Vec<AttentionParams>,
    pub head: Head,
}

impl MvNet {
    /// Registers a network's parameters under `prefix`. `mode` selects the
    /// context path; the plain-GRU ablation forces student mode. Pass an
    /// existing `head` to share the prediction layer.
    pub fn new(
        config: ModelConfig,
        mode: EncoderMode,
        prefix: &str,
        head: Option<Head>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let mode = if config.ablation.plain_gru {
            EncoderMode::Student
        } else {
            mode
        };
        let passenger = DenseEmbed::new(&name("passenger"), COUNT_WIDTH, d, store, rng);
        let driver = DenseEmbed::new(&name("driver"), COUNT_WIDTH, d, store, rng);
        let order = OrderEmbed::new(&name("order"), config.vocab, d, store, rng);
        if config.ablation.concat {
            // the order view only keys the attention, which concatenation drops
            for id in [order.start_poi, order.end_poi, order.product, order.dense.weight, order.dense.bias] {
                store.set_trainable(id, false);
            }
        }
        let encoder = Encoder::new(config.encoder(mode), &name("context"), store, rng);
        let memory = (mode == EncoderMode::Full).then(|| {
            store.add(
                name("memory"),
                uniform(config.mem_rows, config.mem_cols, 0.5, rng),
            )
        });
        let mut attention = Vec::new();
        for rep in config.reps() {
            let width = if rep.is_interaction() { 2 * d + 1 } else { d };
            let n = |s: &str| name(&format!("attn.{}.{s}", rep.name()));
            let query = store.add(n("q"), glorot(d, d, rng));
            let key = store.add(n("k"), glorot(width, d, rng));
            let value = store.add(n("v"), glorot(width, d, rng));
            if config.ablation.concat {
                store.set_trainable(query, false);
                store.set_trainable(key, false);
            }
            attention.push(AttentionParams { query, key, value });
        }
        let head = match head {
            Some(h) => h,
            None => Head::new(&name("head"), config.repr_width(), store, rng),
        };
        Ok(Self {
            config,
            passenger,
            driver,
            order,
            encoder,
            memory,
            attention,
            head,
        })
    }

    pub fn uses_memory(&self) -> bool {
        self.memory.is_some()
    }

    /// Builds the forward graph. `memory` overrides the network's own
    /// memory parameter (the teacher passes its aggregated memory).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        memory: Option<Var>,
    ) -> Result<Forward> {
        if batch.context.len() != self.config.ctx_len {
            return Err(Error::Contract(format!(
                "batch has {} context slots, model expects {}",
                batch.context.len(),
                self.config.ctx_len
            )));
        }
        let xp = g.constant(batch.passenger.clone());
        let xd = g.constant(batch.driver.clone());
        let e_p = self.passenger.forward(g, store, xp)?;
        let e_d = self.driver.forward(g, store, xd)?;
        let steps: Vec<Var> = batch.context.iter().map(|c| g.constant(c.clone())).collect();
        let memory = match (self.memory, memory) {
            (Some(_), Some(m)) => Some(m),
            (Some(id), None) => Some(g.param(id, store.get(id))),
            (None, _) => None,
        };
        let (e_c, _) = self.encoder.encode(g, store, &steps, memory)?;

        let mut reps = Vec::with_capacity(6);
        for rep in self.config.reps() {
            reps.push(match rep {
                Rep::Pd => interact_views(g, e_p, e_d)?,
                Rep::Pc => interact_views(g, e_p, e_c)?,
                Rep::Dc => interact_views(g, e_d, e_c)?,
                Rep::P => e_p,
                Rep::D => e_d,
                Rep::C => e_c,
            });
        }
        let (repr, attention) = if self.config.ablation.concat {
            let mut values = Vec::with_capacity(reps.len());
            for (&e, p) in reps.iter().zip(&self.attention) {
                let wv = g.param(p.value, store.get(p.value));
                values.push(g.matmul(e, wv)?);
            }
            (g.concat_cols(&values)?, None)
        } else {
            let e_o = self.order.forward(g, store, batch)?;
            let (v, w) = attentive_combine(g, store, e_o, &reps, &self.attention)?;
            (v, Some(w))
        };
        let logits = self.head.logits(g, store, repr)?;
        Ok(Forward {
            logits,
            repr,
            attention,
            context: e_c,
        })
    }
}

/// `σ(v w + b)` on plain values.
pub fn predict_msr(v: &[f64], w: &[f64], b: f64) -> f64 {
    let z: f64 = v.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b;
    crate::graph::scalar_sigmoid(z)
}

/// Mean binary cross entropy of probabilities against labels.
pub fn mv_loss(probs: &[f64], labels: &[f64]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            // logit form: z = ln(p / (1 - p))
            let z = libm::log(p) - libm::log1p(-p);
            bce_logit(z, y)
        })
        .sum::<f64>()
        / n
}

/// Mean binary cross entropy on the tape, from logits.
pub fn bce_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    let per = g.bce_with_logits(logits, labels)?;
    Ok(g.mean(per))
}

/// A trained network with its parameters and input statistics.
#[derive(Debug, Clone)]
pub struct MvModel {
    pub net: MvNet,
    pub store: ParamStore,
    pub stats: Standardizer,
}

/// Rows per forward pass at inference time.
pub const EVAL_CHUNK: usize = 512;

impl MvModel {
    pub fn new(config: ModelConfig, stats: Standardizer, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = MvNet::new(config, EncoderMode::Full, "mv", None, &mut store, rng)?;
        Ok(Self { net, store, stats })
    }

    /// A memory-free network with the student architecture, trained on its own.
    pub fn student(config: ModelConfig, stats: Standardizer, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = MvNet::new(config, EncoderMode::Student, "student", None, &mut store, rng)?;
        Ok(Self { net, store, stats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn memory(&self) -> Option<&Tensor> {
        self.net.memory.map(|id| self.store.get(id))
    }

    /// Success-rate predictions, evaluated in chunks.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        predict_with(samples, |chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::build(&refs, &self.stats, self.net.config.vocab)?;
            let mut g = Graph::new();
            let out = self.net.forward(&mut g, &self.store, &batch, None)?;
            let p = g.sigmoid(out.logits);
            Ok(g.value(p).data().to_vec())
        })
    }
}

pub(crate) fn predict_with(
    samples: &[Sample],
    mut f: impl FnMut(&[Sample]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        libm::fabs(a - b) <= tol
    }

    #[test]
    fn interaction_hand_expansion() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0, 0.0]));
        let b = g.constant(Tensor::row(&[0.0, 1.0]));
        let e = interact_views(&mut g, a, b).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        let z = g.constant(Tensor::zeros(1, 2));
        let e = interact_views(&mut g, z, z).unwrap();
        assert!(g.value(e).data().iter().all(|&x| x == 0.0));
        let c = g.constant(Tensor::zeros(1, 3));
        assert!(interact_views(&mut g, a, c).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_msr(&[1.0, -1.0], &[2.0, 2.0], 0.0), 0.5);
        assert!(predict_msr(&[1.0], &[1.0], 0.1) < predict_msr(&[1.0], &[1.0], 0.2));
        for z in [-50.0, -3.0, 0.7, 45.0] {
            let y = predict_msr(&[z], &[1.0], 0.0);
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn loss_examples() {
        assert!(close(mv_loss(&[0.5], &[1.0]), libm::log(2.0), 1e-15));
        assert!(close(mv_loss(&[0.5], &[0.0]), libm::log(2.0), 1e-15));
        assert!(mv_loss(&[1.0 - 1e-12], &[1.0]) < 1e-11);
        assert!(close(mv_loss(&[0.9, 0.1], &[1.0, 0.0]), 0.10536, 1e-5));
    }

    #[test]
    fn ablation_tags_round_trip() {
        for tag in ["mv", "s1", "s2", "s3", "s4"] {
            assert_eq!(Ablation::parse(tag).unwrap().tag(), tag);
        }
        assert!(Ablation::parse("s9").is_none());
    }

    #[test]
    fn attention_symmetry_and_saturation() {
        let mut store = ParamStore::new();
        let d = 2;
        let mut params = vec![];
        for i in 0..6 {
            params.push(AttentionParams {
                query: store.add(format!("q{i}"), Tensor::identity(d)),
                key: store.add(format!("k{i}"), Tensor::identity(d)),
                value: store.add(format!("v{i}"), Tensor::identity(d)),
            });
        }
        let mut g = Graph::new();
        let order = g.constant(Tensor::row(&[1.0, 0.0]));
        let reps: Vec<Var> = (0..6).map(|_| g.constant(Tensor::row(&[1.0, 1.0]))).collect();
        let (v, w) = attentive_combine(&mut g, &store, order, &reps, &params).unwrap();
        assert_eq!(g.shape(v), (1, 12));
        for &x in g.value(w).data() {
            assert!(close(x, 1.0 / 6.0, 1e-15));
        }
        let mut reps2 = reps.clone();
        reps2[2] = g.constant(Tensor::row(&[1.0 + 20.0 * libm::sqrt(2.0), 0.0]));
        let (_, w) = attentive_combine(&mut g, &store, order, &reps2, &params).unwrap();
        let wv = g.value(w);
        assert!(wv.get(0, 2) > 1.0 - 1e-7);
        assert!((0..6).filter(|&i| i != 2).all(|i| wv.get(0, i) < 1e-8));
    }
}
