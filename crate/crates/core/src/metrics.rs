//! Run metrics, computed by folding the simulator's event stream.
//!
//! Every quantity is a pure function of the events, so a saved JSONL log
//! replays to bit-identical metrics. Time averages integrate the
//! piecewise-constant live byte counts over `[0, end]`.
//!
//! `device_mem_utilization` is time-averaged useful KV bytes (tokens actually
//! written) over total cluster capacity. `reservation_efficiency` is useful
//! bytes over reserved block bytes, both time-averaged.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::BucketTag;
use crate::engine::{self, EngineConfig, EngineError, Policy};
use crate::pool::Region;
use crate::workload::Request;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event {index}: {message}")]
    Inconsistent { index: usize, message: String },
    #[error("event log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event log has no header")]
    MissingHeader,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One simulator event. Serialized one per line in the JSONL event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum SimEvent {
    Header {
        policy: Policy,
        devices: usize,
        /// Sum over devices.
        capacity_bytes: u64,
        bytes_per_token: u64,
    },
    Reserve {
        t: f64,
        id: u64,
        device: usize,
        tag: BucketTag,
        region: Region,
        offset: u64,
        size: u64,
        tokens: u32,
        fallback: bool,
    },
    Step {
        t: f64,
        device: usize,
        /// Requests advanced by one token each.
        tokens: u32,
        kv_bytes: u64,
        duration: f64,
    },
    Migrate {
        t: f64,
        id: u64,
        device: usize,
        old_offset: u64,
        old_size: u64,
        new_offset: u64,
        new_size: u64,
        copied_bytes: u64,
        copy_time: f64,
    },
    Stall {
        t: f64,
        id: u64,
        device: usize,
    },
    Release {
        t: f64,
        id: u64,
        device: usize,
        offset: u64,
        size: u64,
        tokens_written: u32,
    },
    Complete {
        t: f64,
        id: u64,
        latency: f64,
        gen_tokens: u32,
        bucket_hit: bool,
        used_large: bool,
    },
    Refresh {
        t: f64,
        version: u64,
        bounds: Vec<u32>,
        window_size: usize,
    },
    Reject {
        t: f64,
        id: u64,
        reason: String,
    },
    End {
        t: f64,
    },
}

impl SimEvent {
    pub fn time(&self) -> Option<f64> {
        match self {
            SimEvent::Header { .. } => None,
            SimEvent::Reserve { t, .. }
            | SimEvent::Step { t, .. }
            | SimEvent::Migrate { t, .. }
            | SimEvent::Stall { t, .. }
            | SimEvent::Release { t, .. }
            | SimEvent::Complete { t, .. }
            | SimEvent::Refresh { t, .. }
            | SimEvent::Reject { t, .. }
            | SimEvent::End { t } => Some(*t),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub device_mem_utilization: f64,
    pub reservation_efficiency: f64,
    pub tps: f64,
    pub bucket_accuracy: f64,
    /// Migrations per completed request.
    pub overflow_rate: f64,
    /// Completed requests that held a large block at any point.
    pub large_bucket_rate: f64,
    /// Reservations served by a fallback class.
    pub fallback_rate: f64,
    pub latency_p50: f64,
    pub latency_p99: f64,
    pub sim_time: f64,
    pub completed: u64,
    pub rejected: u64,
    pub generated_tokens: u64,
    pub reserves: u64,
    pub fallbacks: u64,
    pub migrations: u64,
    pub stalls: u64,
    pub large_entries: u64,
    pub refreshes: u64,
    pub peak_live_requests: u64,
}

/// Streaming fold over [`SimEvent`]s.
#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    index: usize,
    header: Option<(u64, u64)>,
    last_t: f64,
    useful: u64,
    reserved: u64,
    live: u64,
    useful_integral: f64,
    reserved_integral: f64,
    latencies: Vec<f64>,
    hits: u64,
    m: SimMetrics,
    ended: bool,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    fn err(&self, message: impl Into<String>) -> MetricsError {
        MetricsError::Inconsistent {
            index: self.index,
            message: message.into(),
        }
    }

    pub fn push(&mut self, ev: &SimEvent) -> Result<(), MetricsError> {
        let (capacity, bpt) = match (ev, self.header) {
            (SimEvent::Header { capacity_bytes, bytes_per_token, .. }, None) => {
                self.header = Some((*capacity_bytes, *bytes_per_token));
                self.index += 1;
                return Ok(());
            }
            (SimEvent::Header { .. }, Some(_)) => return Err(self.err("second header")),
            (_, None) => return Err(MetricsError::MissingHeader),
            (_, Some(h)) => h,
        };
        if self.ended {
            return Err(self.err("event after end"));
        }
        let t = ev.time().expect("non-header events are timed");
        if !(t >= self.last_t) {
            return Err(self.err(format!("clock went backwards: {t} < {}", self.last_t)));
        }
        let dt = t - self.last_t;
        self.useful_integral += self.useful as f64 * dt;
        self.reserved_integral += self.reserved as f64 * dt;
        self.last_t = t;

        match ev {
            SimEvent::Header { .. } => unreachable!(),
            SimEvent::Reserve {
                size,
                tokens,
                fallback,
                region,
                ..
            } => {
                self.useful += *tokens as u64 * bpt;
                self.reserved += size;
                self.live += 1;
                self.m.peak_live_requests = self.m.peak_live_requests.max(self.live);
                self.m.reserves += 1;
                self.m.fallbacks += u64::from(*fallback);
                self.m.large_entries += u64::from(*region == Region::Large);
            }
            SimEvent::Step { tokens, .. } => {
                self.useful += *tokens as u64 * bpt;
            }
            SimEvent::Migrate { old_size, new_size, .. } => {
                self.reserved = self.reserved - old_size + new_size;
                self.m.migrations += 1;
                self.m.large_entries += 1;
            }
            SimEvent::Stall { .. } => self.m.stalls += 1,
            SimEvent::Release {
                size, tokens_written, ..
            } => {
                let useful = *tokens_written as u64 * bpt;
                if useful > self.useful || *size > self.reserved || self.live == 0 {
                    return Err(self.err("release of more than is live"));
                }
                self.useful -= useful;
                self.reserved -= size;
                self.live -= 1;
            }
            SimEvent::Complete {
                latency,
                gen_tokens,
                bucket_hit,
                used_large,
                ..
            } => {
                self.m.completed += 1;
                self.m.generated_tokens += *gen_tokens as u64;
                self.hits += u64::from(*bucket_hit);
                self.latencies.push(*latency);
                if *used_large {
                    self.m.large_bucket_rate += 1.0;
                }
            }
            SimEvent::Refresh { .. } => self.m.refreshes += 1,
            SimEvent::Reject { .. } => self.m.rejected += 1,
            SimEvent::End { .. } => self.ended = true,
        }
        if self.useful > self.reserved || self.reserved > capacity {
            return Err(self.err(format!(
                "useful {} <= reserved {} <= capacity {capacity} violated",
                self.useful, self.reserved
            )));
        }
        self.index += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SimMetrics, MetricsError> {
        let (capacity, _) = self.header.ok_or(MetricsError::MissingHeader)?;
        let mut m = self.m;
        let large_completed = m.large_bucket_rate;
        m.large_bucket_rate = 0.0;
        let total = self.last_t;
        if total <= 0.0 || m.completed == 0 {
            // zero-duration or empty run: rates and averages stay zero
            return Ok(SimMetrics {
                completed: m.completed,
                rejected: m.rejected,
                generated_tokens: m.generated_tokens,
                reserves: m.reserves,
                fallbacks: m.fallbacks,
                migrations: m.migrations,
                stalls: m.stalls,
                large_entries: m.large_entries,
                refreshes: m.refreshes,
                peak_live_requests: m.peak_live_requests,
                sim_time: total.max(0.0),
                ..SimMetrics::default()
            });
        }
        let completed = m.completed as f64;
        m.sim_time = total;
        m.device_mem_utilization = self.useful_integral / (capacity as f64 * total);
        m.reservation_efficiency = if self.reserved_integral > 0.0 {
            self.useful_integral / self.reserved_integral
        } else {
            0.0
        };
        m.tps = m.generated_tokens as f64 / total;
        m.bucket_accuracy = self.hits as f64 / completed;
        m.overflow_rate = m.migrations as f64 / completed;
        m.large_bucket_rate = large_completed / completed;
        m.fallback_rate = if m.reserves > 0 {
            m.fallbacks as f64 / m.reserves as f64
        } else {
            0.0
        };
        let mut lat = self.latencies;
        lat.sort_by(f64::total_cmp);
        m.latency_p50 = nearest_rank(&lat, 0.50);
        m.latency_p99 = nearest_rank(&lat, 0.99);
        Ok(m)
    }
}

/// Nearest-rank quantile of sorted data; 0 for empty input.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn aggregate<'a>(events: impl IntoIterator<Item = &'a SimEvent>) -> Result<SimMetrics, MetricsError> {
    let mut agg = Aggregator::new();
    for ev in events {
        agg.push(ev)?;
    }
    agg.finish()
}

pub fn write_events(path: impl AsRef<Path>, events: &[SimEvent]) -> Result<(), MetricsError> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for ev in events {
        serde_json::to_writer(&mut w, ev).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Re-aggregates a JSONL event log.
pub fn replay(path: impl AsRef<Path>) -> Result<(Policy, SimMetrics), MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut agg = Aggregator::new();
    let mut policy = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: SimEvent = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let SimEvent::Header { policy: p, .. } = &ev {
            policy = Some(*p);
        }
        agg.push(&ev)?;
    }
    Ok((policy.ok_or(MetricsError::MissingHeader)?, agg.finish()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub metrics: SimMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub base: Policy,
    pub other: Policy,
    pub metric: String,
    pub absolute: f64,
    /// `None` when the base value is zero.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub results: Vec<PolicyResult>,
    pub deltas: Vec<Delta>,
}

pub const CSV_COLUMNS: &[&str] = &[
    "policy",
    "device_mem_utilization",
    "reservation_efficiency",
    "tps",
    "bucket_accuracy",
    "overflow_rate",
    "large_bucket_rate",
    "fallback_rate",
    "latency_p50",
    "latency_p99",
    "sim_time",
    "completed",
    "rejected",
    "generated_tokens",
    "migrations",
    "stalls",
    "refreshes",
];

impl Comparison {
    pub fn from_results(results: Vec<PolicyResult>) -> Self {
        let mut deltas = Vec::new();
        for (i, a) in results.iter().enumerate() {
            for b in &results[i + 1..] {
                for (name, x, y) in [
                    ("device_mem_utilization", a.metrics.device_mem_utilization, b.metrics.device_mem_utilization),
                    ("reservation_efficiency", a.metrics.reservation_efficiency, b.metrics.reservation_efficiency),
                    ("tps", a.metrics.tps, b.metrics.tps),
                    ("bucket_accuracy", a.metrics.bucket_accuracy, b.metrics.bucket_accuracy),
                ] {
                    deltas.push(Delta {
                        base: a.policy,
                        other: b.policy,
                        metric: name.to_string(),
                        absolute: y - x,
                        percent: (x != 0.0).then(|| (y - x) / x * 100.0),
                    });
                }
            }
        }
        Self { results, deltas }
    }

    pub fn get(&self, policy: Policy) -> Option<&SimMetrics> {
        self.results.iter().find(|r| r.policy == policy).map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.results {
            let m = &r.metrics;
            let row = [
                r.policy.to_string(),
                m.device_mem_utilization.to_string(),
                m.reservation_efficiency.to_string(),
                m.tps.to_string(),
                m.bucket_accuracy.to_string(),
                m.overflow_rate.to_string(),
                m.large_bucket_rate.to_string(),
                m.fallback_rate.to_string(),
                m.latency_p50.to_string(),
                m.latency_p99.to_string(),
                m.sim_time.to_string(),
                m.completed.to_string(),
                m.rejected.to_string(),
                m.generated_tokens.to_string(),
                m.migrations.to_string(),
                m.stalls.to_string(),
                m.refreshes.to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Runs every policy on the same trace and config.
pub fn compare(policies: &[Policy], config: &EngineConfig, trace: &[Request]) -> Result<Comparison, EngineError> {
    let results = policies
        .iter()
        .map(|&policy| {
            let cfg = EngineConfig {
                policy,
                ..config.clone()
            };
            engine::run(&cfg, trace).map(|out| PolicyResult {
                policy,
                metrics: out.metrics,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::TagKind;

    fn tag(bound: u32) -> BucketTag {
        BucketTag {
            kind: TagKind::Regular(1),
            config_version: 0,
            bound,
        }
    }

    fn header(capacity_tokens: u64) -> SimEvent {
        SimEvent::Header {
            policy: Policy::Odma,
            devices: 1,
            capacity_bytes: capacity_tokens * 64,
            bytes_per_token: 64,
        }
    }

    #[test]
    fn constant_occupancy_integrates_exactly() {
        // one 100-token block holding 50 tokens for the whole run on a
        // 200-token device
        let events = vec![
            header(200),
            SimEvent::Reserve {
                t: 0.0,
                id: 1,
                device: 0,
                tag: tag(100),
                region: Region::Regular(1),
                offset: 0,
                size: 6400,
                tokens: 50,
                fallback: false,
            },
            SimEvent::Complete {
                t: 10.0,
                id: 1,
                latency: 10.0,
                gen_tokens: 0,
                bucket_hit: true,
                used_large: false,
            },
            SimEvent::Release {
                t: 10.0,
                id: 1,
                device: 0,
                offset: 0,
                size: 6400,
                tokens_written: 50,
            },
            SimEvent::End { t: 10.0 },
        ];
        let m = aggregate(&events).unwrap();
        assert!((m.device_mem_utilization - 0.25).abs() < 1e-15);
        assert!((m.reservation_efficiency - 0.5).abs() < 1e-15);
        assert_eq!(m.overflow_rate, 0.0);
    }

    #[test]
    fn empty_and_zero_duration_runs_are_zero() {
        let m = aggregate(&[header(100), SimEvent::End { t: 0.0 }]).unwrap();
        assert_eq!(m, SimMetrics::default());
    }

    #[test]
    fn rejects_inconsistent_streams() {
        assert!(matches!(aggregate(&[SimEvent::End { t: 0.0 }]), Err(MetricsError::MissingHeader)));
        let back = [header(100), SimEvent::Stall { t: 2.0, id: 1, device: 0 }, SimEvent::End { t: 1.0 }];
        assert!(matches!(aggregate(&back), Err(MetricsError::Inconsistent { .. })));
        let over = [
            header(100),
            SimEvent::Reserve {
                t: 0.0,
                id: 1,
                device: 0,
                tag: tag(200),
                region: Region::Regular(1),
                offset: 0,
                size: 200 * 64,
                tokens: 1,
                fallback: false,
            },
        ];
        assert!(matches!(aggregate(&over), Err(MetricsError::Inconsistent { .. })));
    }

    #[test]
    fn nearest_rank_quantiles() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&xs, 0.5), 50.0);
        assert_eq!(nearest_rank(&xs, 0.99), 99.0);
        assert_eq!(nearest_rank(&[], 0.5), 0.0);
        assert_eq!(nearest_rank(&[3.0], 0.99), 3.0);
    }

    #[test]
    fn deltas_and_csv() {
        let a = SimMetrics {
            tps: 100.0,
            device_mem_utilization: 0.4,
            ..SimMetrics::default()
        };
        let b = SimMetrics {
            tps: 125.0,
            device_mem_utilization: 0.6,
            ..SimMetrics::default()
        };
        let c = Comparison::from_results(vec![
            PolicyResult { policy: Policy::StaticWorstCase, metrics: a },
            PolicyResult { policy: Policy::Odma, metrics: b },
        ]);
        let tps = c.deltas.iter().find(|d| d.metric == "tps").unwrap();
        assert_eq!(tps.absolute, 25.0);
        assert_eq!(tps.percent, Some(25.0));
        let acc = c.deltas.iter().find(|d| d.metric == "bucket_accuracy").unwrap();
        assert_eq!(acc.percent, None);
        let csv = c.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("static,0.4,"));
        assert_eq!(lines.count(), 1);
    }
}
