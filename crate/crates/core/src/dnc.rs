//! Context encoder: a recurrent controller coupled to an external memory
//! matrix through simplex-constrained read and write heads.
//!
//! All tape functions are batched. A batch of `B` memories of shape `n x m`
//! is stored as one `(B*n) x m` matrix, sample `b` owning rows
//! `b*n .. (b+1)*n`. Head weights are `B x n`, keys and words `B x m`.
//!
//! Addressing is content based (cosine similarity sharpened by a strength
//! and softmaxed over locations) for reads, and a gated blend of content and
//! dynamic allocation for the single write head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::graph::Var;
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Norm floor inside the cosine similarity.
const COSINE_EPS: f64 = 1e-6;
/// Slack allowed when checking simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Gru,
    Lstm,
}

/// Which context path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// Controller plus external memory.
    Full,
    /// Plain recurrent network over the context, no memory interaction.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub ctx_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
    pub read_heads: usize,
    pub embed_dim: usize,
    pub controller: ControllerKind,
    pub mode: EncoderMode,
}

impl EncoderConfig {
    pub fn controller_input_width(&self) -> usize {
        match self.mode {
            EncoderMode::Full => self.ctx_width + self.read_heads * self.mem_cols,
            EncoderMode::Student => self.ctx_width,
        }
    }

    pub fn layout(&self) -> InterfaceLayout {
        InterfaceLayout {
            read_heads: self.read_heads,
            word: self.mem_cols,
        }
    }
}

/// Field layout of the controller's interface vector.
///
/// Order: read keys (`R*m`), read strengths (`R`), write key (`m`), write
/// strength (1), erase vector (`m`), write vector (`m`), free gates (`R`),
/// allocation gate (1), write gate (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterfaceLayout {
    pub read_heads: usize,
    pub word: usize,
}

impl InterfaceLayout {
    pub fn len(&self) -> usize {
        let (r, m) = (self.read_heads, self.word);
        r * (m + 1) + (m + 1) + m + m + r + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Parsed interface vector, one row per batch sample.
#[derive(Debug, Clone)]
pub struct Interface {
    pub read_keys: Vec<Var>,
    pub read_strengths: Vec<Var>,
    pub write_key: Var,
    pub write_strength: Var,
    pub erase: Var,
    pub write_vec: Var,
    pub free_gates: Vec<Var>,
    pub alloc_gate: Var,
    pub write_gate: Var,
}

/// Slices a raw `B x len` controller output into its fields and squashes
/// them: sigmoid for gates and erase, `1 + softplus` for strengths,
/// identity for keys and the write vector.
pub fn parse_interface(g: &mut Graph, raw: Var, layout: InterfaceLayout) -> Result<Interface> {
    let got = g.shape(raw).1;
    if got != layout.len() {
        return Err(Error::Layout {
            expected: layout.len(),
            got,
        });
    }
    let (r, m) = (layout.read_heads, layout.word);
    let mut at = 0;
    let mut take = |g: &mut Graph, len: usize| -> Result<Var> {
        let v = g.slice_cols(raw, at, len)?;
        at += len;
        Ok(v)
    };
    let strength = |g: &mut Graph, v: Var| {
        let s = g.softplus(v);
        g.add_scalar(s, 1.0)
    };
    let mut read_keys = Vec::with_capacity(r);
    for _ in 0..r {
        read_keys.push(take(g, m)?);
    }
    let mut read_strengths = Vec::with_capacity(r);
    for _ in 0..r {
        let s = take(g, 1)?;
        read_strengths.push(strength(g, s));
    }
    let write_key = take(g, m)?;
    let ws = take(g, 1)?;
    let write_strength = strength(g, ws);
    let e = take(g, m)?;
    let erase = g.sigmoid(e);
    let write_vec = take(g, m)?;
    let mut free_gates = Vec::with_capacity(r);
    for _ in 0..r {
        let f = take(g, 1)?;
        free_gates.push(g.sigmoid(f));
    }
    let a = take(g, 1)?;
    let alloc_gate = g.sigmoid(a);
    let w = take(g, 1)?;
    let write_gate = g.sigmoid(w);
    Ok(Interface {
        read_keys,
        read_strengths,
        write_key,
        write_strength,
        erase,
        write_vec,
        free_gates,
        alloc_gate,
        write_gate,
    })
}

/// Interface fields as plain vectors for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceVector {
    pub read_keys: Vec<Vec<f64>>,
    pub read_strengths: Vec<f64>,
    pub write_key: Vec<f64>,
    pub write_strength: f64,
    pub erase: Vec<f64>,
    pub write_vec: Vec<f64>,
    pub free_gates: Vec<f64>,
    pub alloc_gate: f64,
    pub write_gate: f64,
}

impl InterfaceVector {
    pub fn parse(raw: &[f64], layout: InterfaceLayout) -> Result<Self> {
        if raw.len() != layout.len() {
            return Err(Error::Layout {
                expected: layout.len(),
                got: raw.len(),
            });
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(raw));
        let i = parse_interface(&mut g, v, layout)?;
        let vec_of = |v: Var| g.value(v).data().to_vec();
        let one = |v: Var| g.value(v).item();
        Ok(Self {
            read_keys: i.read_keys.iter().map(|&k| vec_of(k)).collect(),
            read_strengths: i.read_strengths.iter().map(|&s| one(s)).collect(),
            write_key: vec_of(i.write_key),
            write_strength: one(i.write_strength),
            erase: vec_of(i.erase),
            write_vec: vec_of(i.write_vec),
            free_gates: i.free_gates.iter().map(|&f| one(f)).collect(),
            alloc_gate: one(i.alloc_gate),
            write_gate: one(i.write_gate),
        })
    }
}

/// Softmax over locations of `strength * cosine(M_row, key)`.
///
/// `memory` is `(B*n) x m`, `key` is `B x m`, `strength` is `B x 1`.
/// Rows with zero norm score a similarity of 0.
pub fn content_weighting(
    g: &mut Graph,
    memory: Var,
    key: Var,
    strength: Var,
    rows: usize,
) -> Result<Var> {
    let batch = g.shape(key).0;
    let keys = g.repeat_rows(key, rows);
    let prod = g.mul(memory, keys)?;
    let dot = g.sum_rows(prod);
    let msq = g.mul(memory, memory)?;
    let mnorm2 = g.sum_rows(msq);
    let ksq = g.mul(key, key)?;
    let knorm2 = g.sum_rows(ksq);
    let knorm2 = g.repeat_rows(knorm2, rows);
    let mn = g.add_scalar(mnorm2, COSINE_EPS);
    let mn = g.sqrt(mn);
    let kn = g.add_scalar(knorm2, COSINE_EPS);
    let kn = g.sqrt(kn);
    let denom = g.mul(mn, kn)?;
    let cos = g.div(dot, denom)?;
    let cos = g.reshape(cos, batch, rows)?;
    let sharpened = g.mul(cos, strength)?;
    Ok(g.softmax_rows(sharpened))
}

/// `r = M^T w` per sample: `(B*n) x m` memory, `B x n` weights -> `B x m`.
pub fn read_memory(g: &mut Graph, memory: Var, weights: Var) -> Result<Var> {
    let (batch, rows) = g.shape(weights);
    let col = g.reshape(weights, batch * rows, 1)?;
    let weighted = g.mul(memory, col)?;
    g.group_sum_rows(weighted, rows)
}

/// `M' = M ⊙ (E - w e^T) + w a^T` per sample.
pub fn write_memory(
    g: &mut Graph,
    memory: Var,
    weights: Var,
    erase: Var,
    add: Var,
) -> Result<Var> {
    let (batch, rows) = g.shape(weights);
    let col = g.reshape(weights, batch * rows, 1)?;
    let erase_rows = g.repeat_rows(erase, rows);
    let erase_outer = g.mul(erase_rows, col)?;
    let keep = g.rsub_scalar(1.0, erase_outer);
    let kept = g.mul(memory, keep)?;
    let add_rows = g.repeat_rows(add, rows);
    let add_outer = g.mul(add_rows, col)?;
    g.add(kept, add_outer)
}

fn check_simplex(w: &Tensor, what: &str) -> Result<()> {
    for r in 0..w.rows() {
        let row = w.row_slice(r);
        let sum: f64 = row.iter().sum();
        let bad = row
            .iter()
            .any(|&x| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&x));
        if bad || sum > 1.0 + SIMPLEX_TOL {
            return Err(Error::Contract(format!("{what} weight outside the simplex")));
        }
    }
    Ok(())
}

/// Whether every row of `w` lies in the weight simplex.
pub fn in_simplex(w: &Tensor) -> bool {
    check_simplex(w, "").is_ok()
}

fn as_row(t: &Tensor) -> Tensor {
    Tensor::row(t.data())
}

/// Reads one `n x m` memory with a single weight vector of length `n`.
pub fn memory_read(memory: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if weights.len() != memory.rows() {
        return Err(Error::Dimension {
            op: "memory_read",
            lhs: memory.shape(),
            rhs: weights.shape(),
        });
    }
    let w = as_row(weights);
    check_simplex(&w, "read")?;
    let mut g = Graph::new();
    let mv = g.constant(memory.clone());
    let wv = g.constant(w);
    let r = read_memory(&mut g, mv, wv)?;
    Ok(g.value(r).clone())
}

/// Writes one `n x m` memory with erase vector `erase` and word `add`.
pub fn memory_write(
    memory: &Tensor,
    weights: &Tensor,
    erase: &Tensor,
    add: &Tensor,
) -> Result<Tensor> {
    let (n, m) = memory.shape();
    if weights.len() != n || erase.len() != m || add.len() != m {
        return Err(Error::Dimension {
            op: "memory_write",
            lhs: memory.shape(),
            rhs: (weights.len(), erase.len()),
        });
    }
    let w = as_row(weights);
    check_simplex(&w, "write")?;
    if erase.data().iter().any(|&e| !(0.0..=1.0).contains(&e)) {
        return Err(Error::Contract("erase vector outside [0, 1]".into()));
    }
    let mut g = Graph::new();
    let mv = g.constant(memory.clone());
    let wv = g.constant(w);
    let ev = g.constant(as_row(erase));
    let av = g.constant(as_row(add));
    let out = write_memory(&mut g, mv, wv, ev, av)?;
    Ok(g.value(out).clone())
}

/// Content weighting of one `n x m` memory against a single key.
pub fn content_weights(memory: &Tensor, key: &[f64], strength: f64) -> Result<Tensor> {
    if key.len() != memory.cols() {
        return Err(Error::Dimension {
            op: "content_weighting",
            lhs: memory.shape(),
            rhs: (1, key.len()),
        });
    }
    let mut g = Graph::new();
    let mv = g.constant(memory.clone());
    let kv = g.constant(Tensor::row(key));
    let sv = g.constant(Tensor::scalar(strength));
    let w = content_weighting(&mut g, mv, kv, sv, memory.rows())?;
    Ok(g.value(w).clone())
}

/// Allocation weighting for a single usage vector.
pub fn allocation_weighting(usage: &[f64]) -> Tensor {
    let mut g = Graph::new();
    let u = g.constant(Tensor::row(usage));
    let a = g.allocation(u);
    g.value(a).clone()
}

#[derive(Debug, Clone)]
struct GruCell {
    w_x: ParamId,
    u_zr: ParamId,
    u_h: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct LstmCell {
    w_x: ParamId,
    u: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Cells {
    Gru(Vec<GruCell>),
    Lstm(Vec<LstmCell>),
}

/// One GRU update: update gate `z`, reset gate `r`, candidate `c`,
/// `h' = (1 - z) ⊙ h + z ⊙ c`. Weights are packed `[z | r | c]`.
pub fn gru_cell(
    g: &mut Graph,
    x: Var,
    h: Var,
    w_x: Var,
    u_zr: Var,
    u_h: Var,
    bias: Var,
) -> Result<Var> {
    let hidden = g.shape(h).1;
    let gx = g.matmul(x, w_x)?;
    let gx = g.add(gx, bias)?;
    let gh = g.matmul(h, u_zr)?;
    let xz = g.slice_cols(gx, 0, hidden)?;
    let xr = g.slice_cols(gx, hidden, hidden)?;
    let xc = g.slice_cols(gx, 2 * hidden, hidden)?;
    let hz = g.slice_cols(gh, 0, hidden)?;
    let hr = g.slice_cols(gh, hidden, hidden)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let hc = g.matmul(rh, u_h)?;
    let c = g.add(xc, hc)?;
    let c = g.tanh(c);
    let delta = g.sub(c, h)?;
    let step = g.mul(delta, z)?;
    g.add(h, step)
}

/// One LSTM update with packed gates `[i | f | o | g]`; returns `(h', c')`.
pub fn lstm_cell(
    g: &mut Graph,
    x: Var,
    h: Var,
    c: Var,
    w_x: Var,
    u: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let hidden = g.shape(h).1;
    let gx = g.matmul(x, w_x)?;
    let gh = g.matmul(h, u)?;
    let gates = g.add(gx, gh)?;
    let gates = g.add(gates, bias)?;
    let i = g.slice_cols(gates, 0, hidden)?;
    let i = g.sigmoid(i);
    let f = g.slice_cols(gates, hidden, hidden)?;
    let f = g.sigmoid(f);
    let o = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.sigmoid(o);
    let cand = g.slice_cols(gates, 3 * hidden, hidden)?;
    let cand = g.tanh(cand);
    let kept = g.mul(c, f)?;
    let fresh = g.mul(cand, i)?;
    let c_next = g.add(kept, fresh)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(tc, o)?;
    Ok((h_next, c_next))
}

/// Recurrent state for a batch.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub hidden: Vec<Var>,
    /// LSTM cell states; empty for GRU controllers.
    pub cell: Vec<Var>,
    pub memory: Option<MemoryState>,
}

#[derive(Debug, Clone)]
pub struct MemoryState {
    /// `(B*n) x m`.
    pub memory: Var,
    /// `B x n`.
    pub usage: Var,
    pub read_weights: Vec<Var>,
    pub reads: Vec<Var>,
    pub write_weight: Var,
}

/// Parameter handles of a context encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    cells: Cells,
    w_y: ParamId,
    w_xi: Option<ParamId>,
    w_r: Option<ParamId>,
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix`.
    pub fn new(
        config: EncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let h = config.hidden;
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let cells = match config.controller {
            ControllerKind::Gru => Cells::Gru(
                (0..config.layers)
                    .map(|l| {
                        let input = if l == 0 { config.controller_input_width() } else { h };
                        GruCell {
                            w_x: store.add(name(&format!("gru{l}.w_x")), glorot(input, 3 * h, rng)),
                            u_zr: store.add(name(&format!("gru{l}.u_zr")), glorot(h, 2 * h, rng)),
                            u_h: store.add(name(&format!("gru{l}.u_h")), glorot(h, h, rng)),
                            bias: store.add(name(&format!("gru{l}.b")), Tensor::zeros(1, 3 * h)),
                        }
                    })
                    .collect(),
            ),
            ControllerKind::Lstm => Cells::Lstm(
                (0..config.layers)
                    .map(|l| {
                        let input = if l == 0 { config.controller_input_width() } else { h };
                        // forget-gate bias starts at 1
                        let bias = Tensor::from_fn(1, 4 * h, |_, c| {
                            if (h..2 * h).contains(&c) {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        LstmCell {
                            w_x: store.add(name(&format!("lstm{l}.w_x")), glorot(input, 4 * h, rng)),
                            u: store.add(name(&format!("lstm{l}.u")), glorot(h, 4 * h, rng)),
                            bias: store.add(name(&format!("lstm{l}.b")), bias),
                        }
                    })
                    .collect(),
            ),
        };
        let lh = config.layers * h;
        let w_y = store.add(name("w_y"), glorot(lh, config.embed_dim, rng));
        let (w_xi, w_r) = match config.mode {
            EncoderMode::Full => {
                let xi = glorot(lh, config.layout().len(), rng);
                let r = glorot(config.read_heads * config.mem_cols, config.embed_dim, rng);
                (
                    Some(store.add(name("w_xi"), xi)),
                    Some(store.add(name("w_r"), r)),
                )
            }
            EncoderMode::Student => (None, None),
        };
        Self {
            config,
            cells,
            w_y,
            w_xi,
            w_r,
        }
    }

    pub fn uses_memory(&self) -> bool {
        self.config.mode == EncoderMode::Full
    }

    /// Fresh state for `batch` sequences. Full mode needs the `n x m`
    /// memory every sequence starts from.
    pub fn init_state(
        &self,
        g: &mut Graph,
        batch: usize,
        memory: Option<Var>,
    ) -> Result<EncoderState> {
        let c = &self.config;
        let zeros = |g: &mut Graph, cols| g.constant(Tensor::zeros(batch, cols));
        let hidden = (0..c.layers).map(|_| zeros(g, c.hidden)).collect();
        let cell = match self.cells {
            Cells::Gru(_) => Vec::new(),
            Cells::Lstm(_) => (0..c.layers).map(|_| zeros(g, c.hidden)).collect(),
        };
        let memory = match (c.mode, memory) {
            (EncoderMode::Student, _) => None,
            (EncoderMode::Full, None) => {
                return Err(Error::Contract("memory encoder needs an initial memory".into()))
            }
            (EncoderMode::Full, Some(m)) => {
                if g.shape(m) != (c.mem_rows, c.mem_cols) {
                    return Err(Error::Dimension {
                        op: "init_state",
                        lhs: (c.mem_rows, c.mem_cols),
                        rhs: g.shape(m),
                    });
                }
                let tiled = g.tile_rows(m, batch);
                Some(MemoryState {
                    memory: tiled,
                    usage: zeros(g, c.mem_rows),
                    read_weights: (0..c.read_heads).map(|_| zeros(g, c.mem_rows)).collect(),
                    reads: (0..c.read_heads).map(|_| zeros(g, c.mem_cols)).collect(),
                    write_weight: zeros(g, c.mem_rows),
                })
            }
        };
        Ok(EncoderState {
            hidden,
            cell,
            memory,
        })
    }

    fn controller(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        state: &EncoderState,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut x = input;
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut cell = Vec::new();
        match &self.cells {
            Cells::Gru(layers) => {
                for (l, p) in layers.iter().enumerate() {
                    let w_x = g.param(p.w_x, store.get(p.w_x));
                    let u_zr = g.param(p.u_zr, store.get(p.u_zr));
                    let u_h = g.param(p.u_h, store.get(p.u_h));
                    let b = g.param(p.bias, store.get(p.bias));
                    let h = gru_cell(g, x, state.hidden[l], w_x, u_zr, u_h, b)?;
                    hidden.push(h);
                    x = h;
                }
            }
            Cells::Lstm(layers) => {
                for (l, p) in layers.iter().enumerate() {
                    let w_x = g.param(p.w_x, store.get(p.w_x));
                    let u = g.param(p.u, store.get(p.u));
                    let b = g.param(p.bias, store.get(p.bias));
                    let (h, c) = lstm_cell(g, x, state.hidden[l], state.cell[l], w_x, u, b)?;
                    hidden.push(h);
                    cell.push(c);
                    x = h;
                }
            }
        }
        Ok((hidden, cell))
    }

    /// One time step; returns the step output `e_t` and the next state.
    ///
    /// Full mode order: controller input `[x; r_1..r_R]`, controller update,
    /// output and interface projections, write weighting (gated blend of
    /// allocation and content), memory write, usage update, content read
    /// weighting on the written memory, and the reads themselves.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: &EncoderState,
    ) -> Result<(Var, EncoderState)> {
        let c = &self.config;
        if g.shape(x).1 != c.ctx_width {
            return Err(Error::Dimension {
                op: "encoder_step",
                lhs: (g.shape(x).0, c.ctx_width),
                rhs: g.shape(x),
            });
        }
        let input = match &state.memory {
            Some(mem) => {
                let mut parts = Vec::with_capacity(1 + mem.reads.len());
                parts.push(x);
                parts.extend_from_slice(&mem.reads);
                g.concat_cols(&parts)?
            }
            None => x,
        };
        let (hidden, cell) = self.controller(g, store, input, state)?;
        let hcat = if hidden.len() == 1 {
            hidden[0]
        } else {
            g.concat_cols(&hidden)?
        };
        let w_y = g.param(self.w_y, store.get(self.w_y));
        let e_t = g.matmul(hcat, w_y)?;

        let memory = match (&state.memory, self.w_xi) {
            (Some(mem), Some(w_xi_id)) => {
                let w_xi = g.param(w_xi_id, store.get(w_xi_id));
                let raw = g.matmul(hcat, w_xi)?;
                let xi = parse_interface(g, raw, c.layout())?;
                Some(self.memory_step(g, mem, &xi)?)
            }
            _ => None,
        };
        Ok((
            e_t,
            EncoderState {
                hidden,
                cell,
                memory,
            },
        ))
    }

    fn memory_step(&self, g: &mut Graph, mem: &MemoryState, xi: &Interface) -> Result<MemoryState> {
        let n = self.config.mem_rows;
        let content = content_weighting(g, mem.memory, xi.write_key, xi.write_strength, n)?;
        let alloc = g.allocation(mem.usage);
        let a_part = g.mul(alloc, xi.alloc_gate)?;
        let inv_gate = g.rsub_scalar(1.0, xi.alloc_gate);
        let c_part = g.mul(content, inv_gate)?;
        let blend = g.add(a_part, c_part)?;
        let write_weight = g.mul(blend, xi.write_gate)?;

        let memory = write_memory(g, mem.memory, write_weight, xi.erase, xi.write_vec)?;

        // retention ψ = ∏ (1 - f_i w^r_{i,t-1})
        let mut retention: Option<Var> = None;
        for (w_prev, free) in mem.read_weights.iter().zip(&xi.free_gates) {
            let freed = g.mul(*w_prev, *free)?;
            let keep = g.rsub_scalar(1.0, freed);
            retention = Some(match retention {
                Some(r) => g.mul(r, keep)?,
                None => keep,
            });
        }
        let uw = g.mul(mem.usage, write_weight)?;
        let grown = g.add(mem.usage, write_weight)?;
        let grown = g.sub(grown, uw)?;
        let usage = match retention {
            Some(r) => g.mul(grown, r)?,
            None => grown,
        };

        let mut read_weights = Vec::with_capacity(xi.read_keys.len());
        let mut reads = Vec::with_capacity(xi.read_keys.len());
        for (key, strength) in xi.read_keys.iter().zip(&xi.read_strengths) {
            let w = content_weighting(g, memory, *key, *strength, n)?;
            reads.push(read_memory(g, memory, w)?);
            read_weights.push(w);
        }
        Ok(MemoryState {
            memory,
            usage,
            read_weights,
            reads,
            write_weight,
        })
    }

    /// Encodes a context sequence (`steps[t]` is `B x ctx_width`).
    ///
    /// Full mode returns `e_T + W_r [r_1; ..; r_R]` from the last step;
    /// student mode returns the last step output `W_y h_T`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[Var],
        memory: Option<Var>,
    ) -> Result<(Var, EncoderState)> {
        let first = *steps.first().ok_or(Error::Empty("context sequence"))?;
        let batch = g.shape(first).0;
        let mut state = self.init_state(g, batch, memory)?;
        let mut out = None;
        for &x in steps {
            let (e, next) = self.step(g, store, x, &state)?;
            out = Some(e);
            state = next;
        }
        let mut e = out.expect("non-empty sequence");
        if let (Some(mem), Some(w_r_id)) = (&state.memory, self.w_r) {
            let reads = if mem.reads.len() == 1 {
                mem.reads[0]
            } else {
                g.concat_cols(&mem.reads)?
            };
            let w_r = g.param(w_r_id, store.get(w_r_id));
            let mixed = g.matmul(reads, w_r)?;
            e = g.add(e, mixed)?;
        }
        Ok((e, state))
    }
}
