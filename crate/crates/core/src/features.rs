//! Passenger, driver and order records, windowed feature extraction from
//! historical logs, and the per-view embedding layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DAY: i64 = 86_400;
/// Count windows, shortest first: day, week, month.
pub const WINDOWS: [i64; 3] = [DAY, 7 * DAY, 30 * DAY];
pub const WINDOW_NAMES: [&str; 3] = ["day", "week", "month"];
/// Width of one context slot.
pub const CONTEXT_WIDTH: usize = 7;
/// Number of count features per passenger or driver view.
pub const COUNT_WIDTH: usize = EventKind::ALL.len() * WINDOWS.len();

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Contract(format!("invalid coordinate ({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }

    /// Great-circle distance in kilometres.
    pub fn haversine_km(&self, other: &LatLon) -> f64 {
        let rad = core::f64::consts::PI / 180.0;
        let (p1, p2) = (self.lat * rad, other.lat * rad);
        let dp = p2 - p1;
        let dl = (other.lon - self.lon) * rad;
        let (sp, sl) = (libm::sin(dp / 2.0), libm::sin(dl / 2.0));
        let a = sp * sp + libm::cos(p1) * libm::cos(p2) * sl * sl;
        2.0 * 6371.0 * libm::asin(libm::sqrt(a.min(1.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestStatus {
    Pending,
    Responded,
    Cancelled,
    Fulfilled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassengerRequest {
    pub passenger_id: u64,
    pub ts: i64,
    pub loc_current: LatLon,
    pub loc_origin: LatLon,
    pub loc_dest: LatLon,
    pub status: RequestStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverState {
    Empty,
    Occupied,
    EnroutePickup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverStatus {
    pub driver_id: u64,
    pub ts: i64,
    pub loc: LatLon,
    pub state: DriverState,
}

/// Categorical order attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OrderFeatures {
    pub start_poi: u32,
    pub end_poi: u32,
    pub product: u32,
}

/// One platform-proposed match.
#[derive(Debug, Clone, PartialEq)]
pub struct PassengerDriverPair {
    pub pair_id: String,
    pub passenger_id: u64,
    pub driver_id: u64,
    pub loc_origin: LatLon,
    pub loc_dest: LatLon,
    pub ts: i64,
    pub order: OrderFeatures,
    pub label: u8,
    pub city: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Request,
    Cancel,
    Finish,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [EventKind::Request, EventKind::Cancel, EventKind::Finish];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Request => "request",
            EventKind::Cancel => "cancel",
            EventKind::Finish => "finish",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub ts: i64,
    pub kind: EventKind,
}

/// Event counts per kind over the day/week/month windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViewCounts {
    /// `counts[kind][window]`.
    pub counts: [[u32; 3]; 3],
}

impl ViewCounts {
    pub fn get(&self, kind: EventKind, window: usize) -> u32 {
        self.counts[kind as usize][window]
    }

    /// Flattened kind-major: request day/week/month, cancel ..., finish ...
    pub fn to_vec(&self) -> Vec<f64> {
        self.counts
            .iter()
            .flat_map(|k| k.iter().map(|&c| c as f64))
            .collect()
    }

    /// Field names matching [`ViewCounts::to_vec`] order.
    pub fn field_names() -> Vec<String> {
        EventKind::ALL
            .iter()
            .flat_map(|k| WINDOW_NAMES.iter().map(move |w| format!("{}_{}", k.name(), w)))
            .collect()
    }
}

/// One context time slot.
///
/// Fields: pick-up distance (km), pick-up time (min), peak flag, holiday
/// flag, hot-spot flag, supply/demand ratio, 10-minute cancellation rate at
/// the origin.
pub type ContextSlot = [f64; CONTEXT_WIDTH];

pub fn validate_slot(slot: &ContextSlot) -> Result<()> {
    let ok = slot.iter().all(|v| v.is_finite())
        && slot[0] >= 0.0
        && slot[1] >= 0.0
        && slot[2..5].iter().all(|&f| f == 0.0 || f == 1.0)
        && slot[5] >= 0.0
        && (0.0..=1.0).contains(&slot[6]);
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("invalid context slot {slot:?}")))
    }
}

/// A model-ready row: the extracted views of one pair and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair_id: String,
    pub city: String,
    pub ts: i64,
    pub label: u8,
    /// Ground-truth success probability; only evaluators read it.
    pub latent: Option<f64>,
    pub passenger: ViewCounts,
    pub driver: ViewCounts,
    pub order: OrderFeatures,
    pub context: Vec<ContextSlot>,
}

/// Regular grid of zones over a city's bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneGrid {
    pub south_west: LatLon,
    pub north_east: LatLon,
    pub cells: u32,
}

impl ZoneGrid {
    pub fn zone_count(&self) -> u32 {
        self.cells * self.cells
    }

    pub fn zone_of(&self, p: &LatLon) -> u32 {
        let fy = (p.lat - self.south_west.lat) / (self.north_east.lat - self.south_west.lat);
        let fx = (p.lon - self.south_west.lon) / (self.north_east.lon - self.south_west.lon);
        let cell = |f: f64| ((f * self.cells as f64) as i64).clamp(0, self.cells as i64 - 1) as u32;
        cell(fy) * self.cells + cell(fx)
    }
}

/// Slot-level context observations for one zone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ZoneSeries {
    pub start_ts: i64,
    pub slots: Vec<ContextSlot>,
}

/// The event store feature extraction reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalLogs {
    /// Time range `[start, end]` the logs are complete for.
    pub coverage: (i64, i64),
    pub passengers: BTreeMap<u64, Vec<Event>>,
    pub drivers: BTreeMap<u64, Vec<Event>>,
    pub driver_status: BTreeMap<u64, Vec<DriverStatus>>,
    pub grid: ZoneGrid,
    pub slot_secs: i64,
    pub zones: BTreeMap<u32, ZoneSeries>,
}

impl HistoricalLogs {
    pub fn new(coverage: (i64, i64), grid: ZoneGrid, slot_secs: i64) -> Self {
        Self {
            coverage,
            passengers: BTreeMap::new(),
            drivers: BTreeMap::new(),
            driver_status: BTreeMap::new(),
            grid,
            slot_secs,
            zones: BTreeMap::new(),
        }
    }

    /// Sorts every per-entity stream by time.
    pub fn finalize(&mut self) {
        for events in self.passengers.values_mut().chain(self.drivers.values_mut()) {
            events.sort();
        }
        for s in self.driver_status.values_mut() {
            s.sort_by_key(|d| d.ts);
        }
    }
}

/// Counts over half-open windows `(ts - W, ts]`; `events` must be sorted.
pub fn window_counts(events: &[Event], ts: i64) -> ViewCounts {
    let mut out = ViewCounts::default();
    let end = events.partition_point(|e| e.ts <= ts);
    for (w, &len) in WINDOWS.iter().enumerate() {
        let start = events.partition_point(|e| e.ts <= ts - len);
        for e in &events[start..end] {
            out.counts[e.kind as usize][w] += 1;
        }
    }
    out
}

/// Extracts the passenger, driver, order and context views of a pair.
///
/// Context slots are the `ctx_len` most recent slots of the origin zone
/// ending at the slot containing `pair.ts`, oldest first. The newest slot's
/// pick-up distance and time are replaced by the estimate for the matched
/// driver's own position when a driver status is known.
pub fn extract_features(
    pair: &PassengerDriverPair,
    logs: &HistoricalLogs,
    ctx_len: usize,
) -> Result<(ViewCounts, ViewCounts, OrderFeatures, Vec<ContextSlot>)> {
    let month = WINDOWS[2];
    let (start, end) = logs.coverage;
    if pair.ts - month < start || pair.ts > end {
        return Err(Error::Coverage(format!(
            "logs cover [{start}, {end}], pair {} needs ({}, {}]",
            pair.pair_id,
            pair.ts - month,
            pair.ts
        )));
    }
    if ctx_len == 0 {
        return Err(Error::Contract("context length must be >= 1".into()));
    }
    let empty = Vec::new();
    let passenger = window_counts(logs.passengers.get(&pair.passenger_id).unwrap_or(&empty), pair.ts);
    let driver = window_counts(logs.drivers.get(&pair.driver_id).unwrap_or(&empty), pair.ts);

    let zone = logs.grid.zone_of(&pair.loc_origin);
    let series = logs
        .zones
        .get(&zone)
        .ok_or_else(|| Error::Coverage(format!("no context series for zone {zone}")))?;
    let offset = pair.ts - series.start_ts;
    let last = if offset >= 0 { (offset / logs.slot_secs) as usize } else { usize::MAX };
    if offset < 0 || last >= series.slots.len() || last + 1 < ctx_len {
        return Err(Error::Coverage(format!(
            "zone {zone} lacks {ctx_len} context slots ending at {}",
            pair.ts
        )));
    }
    let mut context: Vec<ContextSlot> = series.slots[last + 1 - ctx_len..=last].to_vec();

    let status = logs
        .driver_status
        .get(&pair.driver_id)
        .and_then(|s| s.iter().rev().find(|d| d.ts <= pair.ts));
    if let Some(status) = status {
        let newest = context.last_mut().expect("ctx_len >= 1");
        let minutes_per_km = if newest[0] > 1e-9 { newest[1] / newest[0] } else { 2.0 };
        let dist = status.loc.haversine_km(&pair.loc_origin);
        newest[0] = dist;
        newest[1] = dist * minutes_per_km;
    }
    Ok((passenger, driver, pair.order, context))
}

/// Mean and standard deviation per feature.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = alloc::vec![0.0; width];
        let mut sq = alloc::vec![0.0; width];
        for r in rows {
            n += 1;
            for (i, &v) in r.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                let s = libm::sqrt(var);
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: alloc::vec![0.0; width],
            std: alloc::vec![1.0; width],
        }
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        for ((v, m), s) in row.iter().zip(&self.mean).zip(&self.std) {
            out.push((v - m) / s);
        }
    }
}

/// Z-score statistics, fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Standardizer {
    pub passenger: Moments,
    pub driver: Moments,
    pub context: Moments,
}

impl Standardizer {
    pub fn fit(train: &[Sample]) -> Self {
        let p: Vec<Vec<f64>> = train.iter().map(|s| s.passenger.to_vec()).collect();
        let d: Vec<Vec<f64>> = train.iter().map(|s| s.driver.to_vec()).collect();
        Self {
            passenger: Moments::fit(p.iter().map(|r| r.as_slice()), COUNT_WIDTH),
            driver: Moments::fit(d.iter().map(|r| r.as_slice()), COUNT_WIDTH),
            context: Moments::fit(
                train.iter().flat_map(|s| s.context.iter().map(|c| c.as_slice())),
                CONTEXT_WIDTH,
            ),
        }
    }

    pub fn identity() -> Self {
        Self {
            passenger: Moments::identity(COUNT_WIDTH),
            driver: Moments::identity(COUNT_WIDTH),
            context: Moments::identity(CONTEXT_WIDTH),
        }
    }
}

/// Vocabulary sizes of the order view's categorical fields (excluding the
/// reserved unknown index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vocab {
    pub start_poi: usize,
    pub end_poi: usize,
    pub product: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            start_poi: 12,
            end_poi: 12,
            product: 4,
        }
    }
}

impl Vocab {
    /// Table index for a raw code: `code + 1`, or 0 when out of vocabulary.
    pub fn index(size: usize, code: u32) -> (usize, bool) {
        if (code as usize) < size {
            (code as usize + 1, false)
        } else {
            (0, true)
        }
    }
}

/// Model inputs for a batch, already standardized and indexed.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub passenger: Tensor,
    pub driver: Tensor,
    pub start_poi: Vec<usize>,
    pub end_poi: Vec<usize>,
    pub product: Vec<usize>,
    /// `context[t]` is `size x CONTEXT_WIDTH`.
    pub context: Vec<Tensor>,
    pub labels: Vec<f64>,
    /// Out-of-vocabulary codes mapped to the unknown index.
    pub oov: usize,
}

impl Batch {
    pub fn build(samples: &[&Sample], stats: &Standardizer, vocab: Vocab) -> Result<Self> {
        let size = samples.len();
        if size == 0 {
            return Err(Error::Empty("batch"));
        }
        let ctx_len = samples[0].context.len();
        if ctx_len == 0 {
            return Err(Error::Contract("context sequence must not be empty".into()));
        }
        let mut passenger = Vec::with_capacity(size * COUNT_WIDTH);
        let mut driver = Vec::with_capacity(size * COUNT_WIDTH);
        let mut context: Vec<Vec<f64>> =
            (0..ctx_len).map(|_| Vec::with_capacity(size * CONTEXT_WIDTH)).collect();
        let mut start_poi = Vec::with_capacity(size);
        let mut end_poi = Vec::with_capacity(size);
        let mut product = Vec::with_capacity(size);
        let mut oov = 0;
        let mut labels = Vec::with_capacity(size);
        for s in samples {
            if s.context.len() != ctx_len {
                return Err(Error::Contract(format!(
                    "pair {} has {} context slots, expected {ctx_len}",
                    s.pair_id,
                    s.context.len()
                )));
            }
            stats.passenger.apply(&s.passenger.to_vec(), &mut passenger);
            stats.driver.apply(&s.driver.to_vec(), &mut driver);
            for (t, slot) in s.context.iter().enumerate() {
                stats.context.apply(slot, &mut context[t]);
            }
            for (size, code, out) in [
                (vocab.start_poi, s.order.start_poi, &mut start_poi),
                (vocab.end_poi, s.order.end_poi, &mut end_poi),
                (vocab.product, s.order.product, &mut product),
            ] {
                let (idx, unknown) = Vocab::index(size, code);
                oov += unknown as usize;
                out.push(idx);
            }
            labels.push(s.label as f64);
        }
        Ok(Self {
            size,
            passenger: Tensor::new(size, COUNT_WIDTH, passenger)?,
            driver: Tensor::new(size, COUNT_WIDTH, driver)?,
            start_poi,
            end_poi,
            product,
            context: context
                .into_iter()
                .map(|c| Tensor::new(size, CONTEXT_WIDTH, c))
                .collect::<Result<_>>()?,
            labels,
            oov,
        })
    }
}

/// Dense projection of a numeric view to the common width.
#[derive(Debug, Clone)]
pub struct DenseEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseEmbed {
    pub fn new(name: &str, input: usize, dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), glorot(input, dim, rng)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight));
        let b = g.param(self.bias, store.get(self.bias));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Embedding tables for the order view followed by its dense projection.
#[derive(Debug, Clone)]
pub struct OrderEmbed {
    pub start_poi: ParamId,
    pub end_poi: ParamId,
    pub product: ParamId,
    pub dense: DenseEmbed,
}

/// Width of each categorical embedding before the dense projection.
pub const CATEGORY_WIDTH: usize = 8;

impl OrderEmbed {
    pub fn new(name: &str, vocab: Vocab, dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut table = |field: &str, size: usize| {
            store.add(
                format!("{name}.{field}"),
                uniform(size + 1, CATEGORY_WIDTH, 0.1, rng),
            )
        };
        let start_poi = table("start_poi", vocab.start_poi);
        let end_poi = table("end_poi", vocab.end_poi);
        let product = table("product", vocab.product);
        let dense = DenseEmbed::new(&format!("{name}.dense"), 3 * CATEGORY_WIDTH, dim, store, rng);
        Self {
            start_poi,
            end_poi,
            product,
            dense,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for (table, idx) in [
            (self.start_poi, &batch.start_poi),
            (self.end_poi, &batch.end_poi),
            (self.product, &batch.product),
        ] {
            let t = g.param(table, store.get(table));
            parts.push(g.gather_rows(t, idx)?);
        }
        let cat = g.concat_cols(&parts)?;
        self.dense.forward(g, store, cat)
    }
}
