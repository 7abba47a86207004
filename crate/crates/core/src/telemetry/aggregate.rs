//! Delayed per-second time series store.
//!
//! Writes land immediately, but a query issued at virtual time `t` only
//! sees points whose timestamp is at most `t - availability_delay`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::mesh::runtime::SimTime;

pub const DEFAULT_AVAILABILITY_DELAY_SECS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub metric: String,
    pub tags: BTreeMap<String, String>,
}

impl SeriesKey {
    pub fn new<'a>(
        metric: impl Into<String>,
        tags: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        Self {
            metric: metric.into(),
            tags: tags
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// How writes within one second combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Counter; seconds without writes read as zero.
    Sum,
    /// Average of the written values; seconds without writes are absent.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeriesId(u32);

#[derive(Debug, Clone)]
struct SeriesData {
    reduce: Reduce,
    origin: Option<u64>,
    buckets: Vec<(f64, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub metric_name: String,
    pub tags: BTreeMap<String, String>,
    pub points: Vec<(u64, f64)>,
    pub availability_delay: u64,
}

impl AggregateSeries {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|&(_, v)| v).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AggregateStore {
    delay_secs: u64,
    index: HashMap<SeriesKey, SeriesId>,
    keys: Vec<SeriesKey>,
    data: Vec<SeriesData>,
}

impl Default for AggregateStore {
    fn default() -> Self {
        Self::new(DEFAULT_AVAILABILITY_DELAY_SECS)
    }
}

impl AggregateStore {
    pub fn new(delay_secs: u64) -> Self {
        Self {
            delay_secs,
            index: HashMap::new(),
            keys: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn availability_delay(&self) -> u64 {
        self.delay_secs
    }

    pub fn series(&mut self, key: SeriesKey, reduce: Reduce) -> SeriesId {
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = SeriesId(self.data.len() as u32);
        self.index.insert(key.clone(), id);
        self.keys.push(key);
        self.data.push(SeriesData {
            reduce,
            origin: None,
            buckets: Vec::new(),
        });
        id
    }

    pub fn add(&mut self, id: SeriesId, at: SimTime, value: f64) {
        self.add_at_second(id, at.second(), value);
    }

    pub fn add_at_second(&mut self, id: SeriesId, sec: u64, value: f64) {
        let s = &mut self.data[id.0 as usize];
        let origin = *s.origin.get_or_insert(sec);
        if sec < origin {
            // writes arrive in time order; an earlier second only shows up
            // if a series is written out of order, so shift the buffer
            let shift = (origin - sec) as usize;
            s.buckets.splice(0..0, std::iter::repeat_n((0.0, 0), shift));
            s.origin = Some(sec);
        }
        let idx = (sec - s.origin.unwrap()) as usize;
        if s.buckets.len() <= idx {
            s.buckets.resize(idx + 1, (0.0, 0));
        }
        let b = &mut s.buckets[idx];
        b.0 += value;
        b.1 += 1;
    }

    /// Raw reduced value of one second, ignoring the delay.
    pub fn value_at(&self, id: SeriesId, sec: u64) -> Option<f64> {
        let s = &self.data[id.0 as usize];
        let (sum, n) = *s.buckets.get(sec.checked_sub(s.origin?)? as usize)?;
        match s.reduce {
            Reduce::Sum => Some(sum),
            Reduce::Mean if n > 0 => Some(sum / f64::from(n)),
            Reduce::Mean => None,
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &SeriesKey> {
        self.keys.iter()
    }

    /// Points in `[from_sec, to_sec)` visible at `now`.
    pub fn query(
        &self,
        key: &SeriesKey,
        from_sec: u64,
        to_sec: u64,
        now: SimTime,
    ) -> Option<AggregateSeries> {
        let visible_end = now
            .second()
            .checked_sub(self.delay_secs)
            .map(|s| s + 1)
            .unwrap_or(0);
        self.read(key, from_sec, to_sec.min(visible_end))
    }

    /// Same as [`query`](Self::query) but ignores the availability delay.
    /// Used by in-process consumers that read the raw counters.
    pub fn read(&self, key: &SeriesKey, from_sec: u64, to_sec: u64) -> Option<AggregateSeries> {
        let id = self.index.get(key)?;
        let s = &self.data[id.0 as usize];
        let mut points = Vec::new();
        for sec in from_sec..to_sec {
            let bucket = s
                .origin
                .and_then(|o| sec.checked_sub(o))
                .and_then(|i| s.buckets.get(i as usize))
                .copied();
            match (s.reduce, bucket) {
                (Reduce::Sum, b) => points.push((sec, b.map_or(0.0, |b| b.0))),
                (Reduce::Mean, Some((sum, n))) if n > 0 => points.push((sec, sum / f64::from(n))),
                (Reduce::Mean, _) => {}
            }
        }
        Some(AggregateSeries {
            metric_name: key.metric.clone(),
            tags: key.tags.clone(),
            points,
            availability_delay: self.delay_secs,
        })
    }

    /// Last second holding any write, if any.
    pub fn last_second(&self, key: &SeriesKey) -> Option<u64> {
        let s = &self.data[self.index.get(key)?.0 as usize];
        s.origin
            .map(|o| o + s.buckets.len().saturating_sub(1) as u64)
    }
}
