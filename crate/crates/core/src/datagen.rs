//! Synthetic multi-city data with a known logistic label process.
//!
//! Every city simulates passenger and driver event logs, per-zone context
//! dynamics and matched pairs; features are then extracted from the logs
//! exactly as for real data. Labels are drawn from a latent success rate
//! `σ(bias - θ·φ)` where `θ = θ_global + θ_city` and `φ` is a fixed feature
//! map over the extracted views plus a few hidden quantities.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::features::{
    extract_features, DriverState, DriverStatus, Event, EventKind, HistoricalLogs,
    LatLon, OrderFeatures, PassengerDriverPair, Sample, ZoneGrid, ZoneSeries, DAY,
};
use crate::metrics::auc;
use crate::train::seeded;

/// Names of the label feature map's components.
pub const PHI_NAMES: [&str; 17] = [
    "passenger_cancel_rate",
    "driver_cancel_rate",
    "passenger_recent_cancels",
    "driver_recent_cancels",
    "cancel_rate_product",
    "distance_hump",
    "shortage",
    "distance_x_shortage",
    "origin_cancel_rate",
    "origin_cancel_trend",
    "peak_x_express",
    "holiday",
    "hotspot_x_passenger",
    "product_distance",
    "hub_destination",
    "passenger_propensity",
    "regime",
];
pub const PHI_WIDTH: usize = PHI_NAMES.len();

/// Shared label coefficients; larger values mean more cancellations.
pub const THETA_GLOBAL: [f64; PHI_WIDTH] = [
    0.7, 0.6, 0.35, 0.35, 1.2, 0.8, 0.35, 0.45, 0.5, 0.6, 1.0, 0.25, 0.8, 1.2, 1.0, 0.6, 0.7,
];

/// Seconds per context slot.
pub const SLOT_SECS: i64 = 60;
/// First second of every simulated calendar (a Monday, 00:00 UTC+8).
pub const EPOCH: i64 = 1_600_617_600;
const HISTORY_DAYS: i64 = 30;
const PAIR_DAYS: i64 = 7;
const GRID_CELLS: u32 = 4;
const VOCAB_POI: u32 = 12;
const PRODUCT_WEIGHTS: [f64; 4] = [0.1, 0.5, 0.25, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct CityProfile {
    pub city: String,
    pub n_samples: usize,
    /// Target fraction of `y = 0` rows.
    pub negative_rate: f64,
    pub theta_global: Vec<f64>,
    /// Unit-norm direction of the city's deviation; scaled by `delta`.
    pub theta_city: Vec<f64>,
    pub delta: f64,
    /// AR(1) coefficient of the zone demand and supply processes.
    pub ar_coef: f64,
    pub noise: f64,
    pub center: LatLon,
    pub ctx_len: usize,
    pub seed: u64,
}

impl CityProfile {
    /// A profile with the shared coefficients and a seeded city direction.
    pub fn new(city: &str, n_samples: usize, negative_rate: f64, delta: f64, seed: u64) -> Self {
        let mut rng = seeded(seed ^ name_hash(city), 7);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut dir: Vec<f64> = (0..PHI_WIDTH).map(|_| normal.sample(&mut rng)).collect();
        let norm = libm::sqrt(dir.iter().map(|x| x * x).sum());
        dir.iter_mut().for_each(|x| *x /= norm);
        let center = known_center(city).unwrap_or_else(|| {
            LatLon {
                lat: rng.random_range(22.0..40.0),
                lon: rng.random_range(104.0..121.0),
            }
        });
        Self {
            city: city.into(),
            n_samples,
            negative_rate,
            theta_global: THETA_GLOBAL.to_vec(),
            theta_city: dir,
            delta,
            ar_coef: rng.random_range(0.85..0.95),
            noise: rng.random_range(0.12..0.2),
            center,
            ctx_len: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::Contract(format!("city {}: {reason}", self.city)));
        if self.city.is_empty() {
            return bad("empty city id");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1");
        }
        if !(self.delta >= 0.0) {
            return bad("delta must be >= 0");
        }
        if self.theta_global.len() != PHI_WIDTH || self.theta_city.len() != PHI_WIDTH {
            return bad("coefficient vectors must match the feature map width");
        }
        if !(0.0..1.0).contains(&self.ar_coef) || !(self.noise >= 0.0) {
            return bad("AR(1) coefficient must be in [0, 1) and noise >= 0");
        }
        if self.ctx_len == 0 {
            return bad("ctx_len must be >= 1");
        }
        Ok(())
    }

    /// Effective coefficients `θ_global + δ ‖θ_global‖ θ_city`.
    pub fn theta(&self) -> Vec<f64> {
        let scale = self.delta * libm::sqrt(self.theta_global.iter().map(|x| x * x).sum());
        self.theta_global
            .iter()
            .zip(&self.theta_city)
            .map(|(g, c)| g + scale * c)
            .collect()
    }
}

fn name_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn known_center(city: &str) -> Option<LatLon> {
    let (lat, lon) = match city {
        "BJ" => (39.90, 116.40),
        "SH" => (31.23, 121.47),
        "SZ" => (22.54, 114.06),
        "CD" => (30.66, 104.06),
        "DZ" => (37.45, 116.36),
        "ZZ" => (34.75, 113.62),
        _ => return None,
    };
    Some(LatLon { lat, lon })
}

/// Quantities the label process sees but the model inputs do not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hidden {
    pub passenger_propensity: f64,
    pub regime: usize,
}

/// Context regimes: calm, busy, surge, disruption.
const REGIMES: usize = 4;
const REGIME_DEMAND: [f64; REGIMES] = [0.0, 0.25, 0.6, 0.1];
const REGIME_SUPPLY: [f64; REGIMES] = [0.0, -0.05, -0.2, -0.5];
const REGIME_CANCEL: [f64; REGIMES] = [0.0, 0.1, 0.3, 0.6];
const REGIME_EFFECT: [f64; REGIMES] = [0.0, 0.3, 0.8, 1.5];
const REGIME_ENTRY: [f64; REGIMES] = [0.5, 0.3, 0.15, 0.05];

fn count(c: &crate::features::ViewCounts, kind: EventKind, window: usize) -> f64 {
    c.get(kind, window) as f64
}

/// Rejection first rises with pick-up distance, peaks at 3 km, then falls.
fn distance_hump(km: f64) -> f64 {
    km * libm::exp(1.0 - km / 3.0) / 3.0
}

/// The label feature map.
pub fn phi(sample: &Sample, hidden: &Hidden) -> [f64; PHI_WIDTH] {
    let (p, d) = (&sample.passenger, &sample.driver);
    let p_rate = 4.0 * (count(p, EventKind::Cancel, 2) / (count(p, EventKind::Request, 2) + 1.0) - 0.15);
    let d_rate = 4.0 * (count(d, EventKind::Cancel, 2) / (count(d, EventKind::Request, 2) + 1.0) - 0.1);
    let p_recent = 0.5 * (count(p, EventKind::Cancel, 1) - 0.15 * count(p, EventKind::Request, 1));
    let d_recent = 0.3 * (count(d, EventKind::Cancel, 0) - 0.1 * count(d, EventKind::Request, 0));
    let last = sample.context.last().expect("non-empty context");
    let hump = distance_hump(last[0]);
    let shortage = -libm::log(last[5].max(1e-3));
    let mean_cancel =
        sample.context.iter().map(|c| c[6]).sum::<f64>() / sample.context.len() as f64;
    let product = sample.order.product;
    [
        p_rate,
        d_rate,
        p_recent,
        d_recent,
        p_rate * d_rate,
        hump,
        shortage,
        hump * shortage.max(0.0),
        5.0 * (last[6] - 0.15),
        5.0 * (last[6] - mean_cancel),
        last[2] * (product == 1) as u8 as f64,
        last[3],
        last[4] * p_rate,
        match product {
            0 => -1.0,
            3 => 2.0 * hump,
            _ => 0.0,
        },
        -((sample.order.end_poi < 2) as u8 as f64),
        4.0 * (hidden.passenger_propensity - 0.15),
        REGIME_EFFECT[hidden.regime],
    ]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Bias `b` with `mean(1 - σ(b - s_i)) = target`, found by bisection.
pub fn fit_bias(scores: &[f64], target: f64) -> Result<f64> {
    let infeasible = |reason: String| Error::InfeasibleTarget { target, reason };
    if !(target > 0.0 && target < 1.0) {
        return Err(infeasible("negative rate must lie in (0, 1)".into()));
    }
    if scores.is_empty() {
        return Err(infeasible("no rows".into()));
    }
    let rate = |b: f64| scores.iter().map(|s| 1.0 - sigmoid(b - s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) < target || rate(hi) > target {
        return Err(infeasible(format!(
            "reachable rates span [{:.4}, {:.4}]",
            rate(hi),
            rate(lo)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    if libm::fabs(rate(b) - target) > 1e-3 {
        return Err(infeasible(format!("bisection settled at rate {:.4}", rate(b))));
    }
    Ok(b)
}

/// One generated city.
#[derive(Debug, Clone)]
pub struct CityData {
    pub profile: CityProfile,
    /// Extracted rows in time order.
    pub samples: Vec<Sample>,
    pub pairs: Vec<PassengerDriverPair>,
    pub logs: HistoricalLogs,
    pub bias: f64,
}

impl CityData {
    pub fn negative_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.label == 0).count() as f64 / self.samples.len() as f64
    }

    /// AUC of the stored latent success rate against the sampled labels.
    pub fn oracle_auc(&self) -> Option<f64> {
        latent_auc(&self.samples)
    }
}

pub fn latent_auc(samples: &[Sample]) -> Option<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| s.latent.unwrap_or(0.5)).collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    auc(&scores, &labels)
}

struct Entity {
    rate_per_day: f64,
    cancel_prob: f64,
}

fn simulate_events(
    e: &Entity,
    start: i64,
    end: i64,
    gap: i64,
    rng: &mut ChaCha8Rng,
) -> Vec<Event> {
    let days = (end - start) as f64 / DAY as f64;
    let n = Poisson::new(e.rate_per_day * days).map(|p| p.sample(rng) as usize).unwrap_or(0);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let ts = rng.random_range(start..end);
        out.push(Event {
            ts,
            kind: EventKind::Request,
        });
        let kind = if rng.random_bool(e.cancel_prob) {
            EventKind::Cancel
        } else {
            EventKind::Finish
        };
        out.push(Event { ts: ts + gap, kind });
    }
    out.sort();
    out
}

/// Demand multiplier by hour of day, peaking near 9:00, 18:00 and midnight.
fn demand_profile(secs_of_day: i64) -> f64 {
    let h = secs_of_day as f64 / 3600.0;
    let bump = |c: f64, w: f64| {
        let mut d = libm::fabs(h - c);
        d = d.min(24.0 - d);
        libm::exp(-d * d / (2.0 * w * w))
    };
    1.0 + 0.8 * bump(9.0, 1.0) + 0.8 * bump(18.0, 1.2) + 0.5 * bump(0.0, 1.0)
}

struct ZoneSim {
    series: ZoneSeries,
    regimes: Vec<usize>,
}

fn simulate_zone(
    profile: &CityProfile,
    zone: u32,
    start: i64,
    slots: usize,
    rng: &mut ChaCha8Rng,
) -> ZoneSim {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let (row, col) = (zone / GRID_CELLS, zone % GRID_CELLS);
    let central = (1..=2).contains(&row) && (1..=2).contains(&col);
    let base_d = if central { 0.4 } else { 0.0 } + rng.random_range(-0.1..0.1);
    let base_s = rng.random_range(-0.1..0.2);
    let a = profile.ar_coef;
    let sd = profile.noise;
    let (mut xd, mut xs) = (0.0, 0.0);
    let mut regime = 0usize;
    let mut out = Vec::with_capacity(slots);
    let mut regimes = Vec::with_capacity(slots);
    for k in 0..slots {
        let ts = start + k as i64 * SLOT_SECS;
        if rng.random_bool(0.02) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (r, w) in REGIME_ENTRY.iter().enumerate() {
                acc += w;
                if u < acc {
                    regime = r;
                    break;
                }
            }
        }
        xd = a * xd + sd * n.sample(rng);
        xs = a * xs + sd * n.sample(rng);
        let of_day = (ts - EPOCH).rem_euclid(DAY);
        let day = (ts - EPOCH).div_euclid(DAY);
        let m = demand_profile(of_day);
        let ld = base_d + libm::log(m) + REGIME_DEMAND[regime] + xd;
        let ls = base_s + REGIME_SUPPLY[regime] + xs;
        let ratio = libm::exp(ls - ld);
        let dist = (0.4 + 1.4 / libm::sqrt(ratio) * (1.0 + 0.1 * n.sample(rng))).max(0.05);
        let peak = (m > 1.4) as u8 as f64;
        let minutes = dist * (2.0 + 1.5 * peak) + libm::fabs(0.5 * n.sample(rng));
        let holiday = (day.rem_euclid(7) >= 5) as u8 as f64;
        let hot = (central || ld - base_d > 0.9) as u8 as f64;
        let cancel = sigmoid(-1.9 + 0.7 * (ld - ls) + REGIME_CANCEL[regime] + 0.2 * n.sample(rng));
        out.push([dist, minutes, peak, holiday, hot, ratio, cancel]);
        regimes.push(regime);
    }
    ZoneSim {
        series: ZoneSeries {
            start_ts: start,
            slots: out,
        },
        regimes,
    }
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    weights.len() as u32 - 1
}

/// Point at `km` from `from` in a random direction.
fn offset_km(from: &LatLon, km: f64, rng: &mut ChaCha8Rng) -> LatLon {
    let bearing = rng.random_range(0.0..core::f64::consts::TAU);
    let dlat = km / 111.0 * libm::cos(bearing);
    let dlon = km / (111.0 * libm::cos(from.lat.to_radians())) * libm::sin(bearing);
    LatLon {
        lat: from.lat + dlat,
        lon: from.lon + dlon,
    }
}

/// Simulates one city and extracts its dataset.
pub fn generate_city(profile: &CityProfile) -> Result<CityData> {
    profile.validate()?;
    let mut rng = seeded(profile.seed ^ name_hash(&profile.city), 0);
    let n = profile.n_samples;
    let pair_start = EPOCH + HISTORY_DAYS * DAY;
    let pair_end = pair_start + PAIR_DAYS * DAY;
    let span = 0.08;
    let grid = ZoneGrid {
        south_west: LatLon {
            lat: profile.center.lat - span,
            lon: profile.center.lon - span,
        },
        north_east: LatLon {
            lat: profile.center.lat + span,
            lon: profile.center.lon + span,
        },
        cells: GRID_CELLS,
    };
    let mut logs = HistoricalLogs::new((EPOCH, pair_end), grid, SLOT_SECS);

    let passenger_beta = Beta::new(2.0, 11.0).expect("beta");
    let driver_beta = Beta::new(1.5, 13.5).expect("beta");
    let lognormal = Normal::new(0.0, 0.6).expect("normal");
    let n_passengers = (n / 3).max(20);
    let n_drivers = (n / 6).max(10);
    let mut propensity = Vec::with_capacity(n_passengers);
    for id in 0..n_passengers as u64 {
        let e = Entity {
            rate_per_day: 0.45 * libm::exp(lognormal.sample(&mut rng)),
            cancel_prob: passenger_beta.sample(&mut rng),
        };
        propensity.push(e.cancel_prob);
        logs.passengers.insert(id, simulate_events(&e, EPOCH, pair_end, 120, &mut rng));
    }
    for id in 0..n_drivers as u64 {
        let e = Entity {
            rate_per_day: 1.8 * libm::exp(lognormal.sample(&mut rng)),
            cancel_prob: driver_beta.sample(&mut rng),
        };
        logs.drivers.insert(id, simulate_events(&e, EPOCH, pair_end, 300, &mut rng));
    }

    let series_start = pair_start - (profile.ctx_len as i64 + 1) * SLOT_SECS;
    let slots = ((pair_end - series_start) / SLOT_SECS) as usize + 1;
    let mut regimes = BTreeMap::new();
    for zone in 0..grid.zone_count() {
        let sim = simulate_zone(profile, zone, series_start, slots, &mut rng);
        logs.zones.insert(zone, sim.series);
        regimes.insert(zone, sim.regimes);
    }

    let zone_weights: Vec<f64> = (0..grid.zone_count())
        .map(|z| {
            let (r, c) = (z / GRID_CELLS, z % GRID_CELLS);
            if (1..=2).contains(&r) && (1..=2).contains(&c) {
                3.0
            } else {
                1.0
            }
        })
        .collect();
    let cell_deg = 2.0 * span / GRID_CELLS as f64;
    let mut times: Vec<i64> = (0..n).map(|_| rng.random_range(pair_start..pair_end)).collect();
    times.sort();
    let mut pairs = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for (i, &ts) in times.iter().enumerate() {
        let zone = categorical(&zone_weights, &mut rng);
        let (r, c) = (zone / GRID_CELLS, zone % GRID_CELLS);
        let origin = LatLon {
            lat: grid.south_west.lat + (r as f64 + rng.random_range(0.05..0.95)) * cell_deg,
            lon: grid.south_west.lon + (c as f64 + rng.random_range(0.05..0.95)) * cell_deg,
        };
        let dest = offset_km(&origin, rng.random_range(1.0..20.0), &mut rng);
        let passenger_id = rng.random_range(0..n_passengers as u64);
        let driver_id = rng.random_range(0..n_drivers as u64);
        let slot = ((ts - series_start) / SLOT_SECS) as usize;
        let zone_dist = logs.zones[&zone].slots[slot][0];
        let pickup = zone_dist * libm::exp(0.35 * lognormal.sample(&mut rng));
        logs.driver_status.entry(driver_id).or_default().push(DriverStatus {
            driver_id,
            ts: ts - 30,
            loc: offset_km(&origin, pickup, &mut rng),
            state: DriverState::EnroutePickup,
        });
        let poi_bias = (zone % VOCAB_POI) as usize;
        let mut poi_weights = [1.0; VOCAB_POI as usize];
        poi_weights[poi_bias] = 4.0;
        let order = OrderFeatures {
            start_poi: categorical(&poi_weights, &mut rng),
            end_poi: rng.random_range(0..VOCAB_POI),
            product: categorical(&PRODUCT_WEIGHTS, &mut rng),
        };
        pairs.push(PassengerDriverPair {
            pair_id: format!("{}-{i:06}", profile.city),
            passenger_id,
            driver_id,
            loc_origin: origin,
            loc_dest: dest,
            ts,
            order,
            label: 0,
            city: profile.city.clone(),
        });
        hidden.push(Hidden {
            passenger_propensity: propensity[passenger_id as usize],
            regime: regimes[&zone][slot],
        });
    }
    logs.finalize();

    let theta = profile.theta();
    let mut samples = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (pair, h) in pairs.iter().zip(&hidden) {
        let (passenger, driver, order, context) = extract_features(pair, &logs, profile.ctx_len)?;
        let s = Sample {
            pair_id: pair.pair_id.clone(),
            city: pair.city.clone(),
            ts: pair.ts,
            label: 0,
            latent: None,
            passenger,
            driver,
            order,
            context,
        };
        scores.push(dot(&theta, &phi(&s, h)));
        samples.push(s);
    }
    let bias = fit_bias(&scores, profile.negative_rate)?;
    for ((s, pair), score) in samples.iter_mut().zip(pairs.iter_mut()).zip(&scores) {
        let msr = sigmoid(bias - score);
        s.latent = Some(msr);
        s.label = rng.random_bool(msr) as u8;
        pair.label = s.label;
    }
    Ok(CityData {
        profile: profile.clone(),
        samples,
        pairs,
        logs,
        bias,
    })
}

/// Chronological train / validation / test partition of one city.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Split {
    /// Last tenth as test, then the last tenth of the remainder as validation.
    pub fn chronological(samples: &[Sample]) -> Self {
        let mut rows = samples.to_vec();
        rows.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.pair_id.cmp(&b.pair_id)));
        let n_test = rows.len() / 10;
        let n_trainval = rows.len() - n_test;
        let n_val = n_trainval / 10;
        let test = rows.split_off(n_trainval);
        let val = rows.split_off(n_trainval - n_val);
        Self {
            train: rows,
            val,
            test,
        }
    }
}

/// Sizes and knobs of the six-city benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub sources: Vec<(String, f64)>,
    pub targets: Vec<(String, f64)>,
    pub source_rows: usize,
    pub target_rows: usize,
    pub delta: f64,
    pub ctx_len: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let named = |v: &[(&str, f64)]| v.iter().map(|(c, r)| (String::from(*c), *r)).collect();
        Self {
            sources: named(&[("BJ", 0.1145), ("SZ", 0.1216), ("SH", 0.1441), ("CD", 0.1127)]),
            targets: named(&[("DZ", 0.1104), ("ZZ", 0.0793)]),
            source_rows: 200_000,
            target_rows: 5_000,
            delta: 0.3,
            ctx_len: 8,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn profiles(&self) -> Vec<CityProfile> {
        let sources = self.sources.iter().map(|(c, r)| (c, r, self.source_rows));
        let targets = self.targets.iter().map(|(c, r)| (c, r, self.target_rows));
        sources
            .chain(targets)
            .map(|(city, &rate, rows)| {
                let mut p = CityProfile::new(city, rows, rate, self.delta, self.seed);
                p.ctx_len = self.ctx_len;
                p
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub sources: Vec<CityData>,
    pub targets: Vec<CityData>,
}

impl Benchmark {
    pub fn cities(&self) -> impl Iterator<Item = &CityData> {
        self.sources.iter().chain(&self.targets)
    }
}

pub fn make_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let mut cities = cfg
        .profiles()
        .iter()
        .map(generate_city)
        .collect::<Result<Vec<_>>>()?;
    let targets = cities.split_off(cfg.sources.len());
    Ok(Benchmark {
        sources: cities,
        targets,
    })
}
