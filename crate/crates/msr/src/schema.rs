//! JSON-lines row format shared by dataset files and serving requests.

use msr_core::features::{ContextSlot, OrderFeatures, Sample, ViewCounts, CONTEXT_WIDTH};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event counts of one view, by kind and window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub request_day: u32,
    pub request_week: u32,
    pub request_month: u32,
    pub cancel_day: u32,
    pub cancel_week: u32,
    pub cancel_month: u32,
    pub finish_day: u32,
    pub finish_week: u32,
    pub finish_month: u32,
}

impl From<&ViewCounts> for Counts {
    fn from(v: &ViewCounts) -> Self {
        let [r, c, f] = v.counts;
        Self {
            request_day: r[0],
            request_week: r[1],
            request_month: r[2],
            cancel_day: c[0],
            cancel_week: c[1],
            cancel_month: c[2],
            finish_day: f[0],
            finish_week: f[1],
            finish_month: f[2],
        }
    }
}

impl From<Counts> for ViewCounts {
    fn from(c: Counts) -> Self {
        ViewCounts {
            counts: [
                [c.request_day, c.request_week, c.request_month],
                [c.cancel_day, c.cancel_week, c.cancel_month],
                [c.finish_day, c.finish_week, c.finish_month],
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Order {
    pub start_poi: u32,
    pub end_poi: u32,
    pub product: u32,
}

/// One dataset row. Requests to the server use the same shape without
/// `label` and `latent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub pair_id: String,
    pub city: String,
    pub ts: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<f64>,
    pub passenger: Counts,
    pub driver: Counts,
    pub order: Order,
    pub context: Vec<Vec<f64>>,
}

impl From<&Sample> for Row {
    fn from(s: &Sample) -> Self {
        Self {
            pair_id: s.pair_id.clone(),
            city: s.city.clone(),
            ts: s.ts,
            label: Some(s.label),
            latent: s.latent,
            passenger: (&s.passenger).into(),
            driver: (&s.driver).into(),
            order: Order {
                start_poi: s.order.start_poi,
                end_poi: s.order.end_poi,
                product: s.order.product,
            },
            context: s.context.iter().map(|c| c.to_vec()).collect(),
        }
    }
}

impl Row {
    /// Converts a dataset row; the label is required.
    pub fn into_sample(self) -> Result<Sample> {
        let label = match self.label {
            Some(l @ (0 | 1)) => l,
            Some(l) => return Err(Error::Schema(format!("label must be 0 or 1, got {l}"))),
            None => return Err(Error::Schema("missing label".into())),
        };
        self.build_sample(label)
    }

    /// Converts a request row; any label or latent present is ignored.
    pub fn into_request(mut self) -> Result<Sample> {
        self.latent = None;
        self.build_sample(0)
    }

    fn build_sample(self, label: u8) -> Result<Sample> {
        if self.context.is_empty() {
            return Err(Error::Schema("context must hold at least one slot".into()));
        }
        let mut context = Vec::with_capacity(self.context.len());
        for (t, slot) in self.context.iter().enumerate() {
            let slot: ContextSlot = slot.as_slice().try_into().map_err(|_| {
                Error::Schema(format!(
                    "context slot {t} has {} values, expected {CONTEXT_WIDTH}",
                    slot.len()
                ))
            })?;
            if slot.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("context slot {t} is not finite")));
            }
            context.push(slot);
        }
        if let Some(l) = self.latent {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Schema(format!("latent {l} outside [0, 1]")));
            }
        }
        Ok(Sample {
            pair_id: self.pair_id,
            city: self.city,
            ts: self.ts,
            label,
            latent: self.latent,
            passenger: self.passenger.into(),
            driver: self.driver.into(),
            order: OrderFeatures {
                start_poi: self.order.start_poi,
                end_poi: self.order.end_poi,
                product: self.order.product,
            },
            context,
        })
    }
}
