//! Discrete-event decode simulator with continuous batching.
//!
//! Each device runs one decode step at a time over its current batch. New
//! requests join at the next step boundary. A step advances every batched
//! request by one token; a request whose block fills up before it finishes
//! is migrated to the large region, and the copy time is charged to the
//! device's next step.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::{select_bucket, BucketConfig, BucketError, BucketManager, BucketTag, ShareMode, TagKind};
use crate::metrics::{Aggregator, MetricsError, SimEvent, SimMetrics};
use crate::pool::{Block, ExactPool, ModelShape, PoolError, PoolOptions, PoolState, Region};
use crate::predictor::{LengthPredictor, Prediction, PredictorError, PredictorKind};
use crate::racm::{Layout, RacmParams};
use crate::workload::Request;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Bucket(#[from] BucketError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("livelock at t={t}: {queued} queued and {stalled} stalled requests can never progress")]
    Livelock { t: f64, queued: usize, stalled: usize },
    #[error("invariant violated at t={t}: {message}")]
    Invariant { t: f64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    /// Predicted length, bucketed contiguous blocks, large-region overflow.
    #[serde(rename = "odma")]
    Odma,
    /// Every request gets a `large_bound` block.
    #[serde(rename = "static", alias = "static-worst-case")]
    StaticWorstCase,
    /// Exact true footprint, first-fit. Upper reference.
    #[serde(rename = "oracle", alias = "oracle-allocation")]
    OracleAllocation,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Odma, Policy::StaticWorstCase, Policy::OracleAllocation];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Odma => "odma",
            Policy::StaticWorstCase => "static",
            Policy::OracleAllocation => "oracle",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "odma" => Ok(Policy::Odma),
            "static" | "static-worst-case" => Ok(Policy::StaticWorstCase),
            "oracle" | "oracle-allocation" => Ok(Policy::OracleAllocation),
            _ => Err(format!("unknown policy {s:?} (expected odma, static or oracle)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub policy: Policy,
    pub devices: usize,
    /// KV capacity of each device, bytes.
    pub device_capacity: u64,
    pub shape: ModelShape,
    pub racm: RacmParams,
    pub layout: Layout,
    pub predictor: PredictorKind,
    pub alpha: f64,
    pub tau: f64,
    pub buckets: usize,
    pub window: usize,
    /// Completions between refreshes; `None` means `window / 2`.
    pub refresh_period: Option<usize>,
    /// Stop refreshing after this many refreshes. `Some(0)` never refreshes.
    pub freeze_after: Option<u32>,
    pub share_mode: ShareMode,
    pub align: u32,
    pub large_bound: u32,
    pub reserve_fraction: f64,
    /// Initial regular bounds; geometric when `None`.
    pub initial_bounds: Option<Vec<u32>>,
    pub slab_tokens: Option<u32>,
    /// Per-device cap on concurrently decoding requests.
    pub max_batch: usize,
    pub seed: u64,
    /// Keep the full event list in [`RunOutput::events`].
    pub keep_events: bool,
    /// Check pool invariants after every event. Slow.
    pub check_invariants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Odma,
            devices: 1,
            device_capacity: 16 << 30,
            shape: ModelShape::QWEN_7B,
            racm: RacmParams::mlu370_like(0.005),
            layout: Layout::Contiguous,
            predictor: PredictorKind::NoisyOracle { sigma_rel: 0.2, bias: 0.0 },
            alpha: 0.5,
            tau: 0.5,
            buckets: 4,
            window: 1024,
            refresh_period: None,
            freeze_after: None,
            share_mode: ShareMode::Equal,
            align: 16,
            large_bound: 4096,
            reserve_fraction: 0.1,
            initial_bounds: None,
            slab_tokens: None,
            max_batch: 64,
            seed: 0,
            keep_events: false,
            check_invariants: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.devices == 0 {
            return bad("devices must be >= 1".into());
        }
        if self.max_batch == 0 {
            return bad("max_batch must be >= 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0 (got {})", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1] (got {})", self.tau));
        }
        if self.buckets == 0 || self.window == 0 || self.align == 0 {
            return bad("buckets, window and align must be >= 1".into());
        }
        if self.refresh_period == Some(0) {
            return bad("refresh_period must be >= 1".into());
        }
        if !self.large_bound.is_multiple_of(self.align) {
            return bad(format!(
                "large_bound {} must be a multiple of align {}",
                self.large_bound, self.align
            ));
        }
        self.shape.validate().map_err(EngineError::Config)?;
        self.racm.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        self.predictor.validate()?;
        Ok(())
    }

    fn initial_config(&self) -> Result<BucketConfig, EngineError> {
        Ok(match &self.initial_bounds {
            Some(b) => BucketConfig::new(b.clone(), self.large_bound, self.align, 0)?,
            None => BucketConfig::geometric(self.buckets, self.large_bound, self.align)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Queued,
    Running,
    Stalled,
    Done,
    Rejected,
}

/// Per-request outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: u64,
    pub state: TaskState,
    pub prediction: Option<Prediction>,
    pub tag: Option<BucketTag>,
    pub device: Option<usize>,
    pub admitted_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub generated: u32,
    /// Generation length after truncation to `large_bound`.
    pub target_gen: u32,
    pub migrations: u32,
    pub used_large: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: SimMetrics,
    /// Empty unless `keep_events` was set.
    pub events: Vec<SimEvent>,
    pub outcomes: Vec<Outcome>,
    /// Requests whose generation was cut to fit `large_bound`.
    pub truncated: usize,
}

#[derive(Debug, Clone)]
struct Task {
    req: Request,
    pred: Option<Prediction>,
    /// `prompt + l_eff`, clamped to `large_bound`.
    eff: u32,
    tag: Option<BucketTag>,
    tag_config: Option<Arc<BucketConfig>>,
    state: TaskState,
    device: Option<usize>,
    admitted_at: Option<f64>,
    finished_at: Option<f64>,
    generated: u32,
    migrations: u32,
    used_large: bool,
}

#[derive(Debug, Clone)]
enum DevicePool {
    Slab(PoolState),
    Exact(ExactPool),
}

impl DevicePool {
    fn reserve(&mut self, task: &Task, tag: BucketTag) -> Result<crate::pool::Reservation, PoolError> {
        match self {
            DevicePool::Slab(p) => p.reserve(task.req.id, tag, task.req.prompt_len),
            DevicePool::Exact(p) => p.reserve(task.req.id, tag, task.req.total_len(), task.req.prompt_len),
        }
    }

    fn append_token(&mut self, id: u64) -> Result<u32, PoolError> {
        match self {
            DevicePool::Slab(p) => p.append_token(id),
            DevicePool::Exact(p) => p.append_token(id),
        }
    }

    fn release(&mut self, id: u64) -> Result<Block, PoolError> {
        match self {
            DevicePool::Slab(p) => p.release(id),
            DevicePool::Exact(p) => p.release(id),
        }
    }

    fn block(&self, id: u64) -> Option<&Block> {
        match self {
            DevicePool::Slab(p) => p.block(id),
            DevicePool::Exact(p) => p.block(id),
        }
    }

    fn is_full(&self, id: u64, bpt: u64) -> bool {
        self.block(id).is_some_and(|b| (b.tokens_written as u64 + 1) * bpt > b.size)
    }

    fn free_bytes_for(&self, tag: &BucketTag) -> u64 {
        match self {
            DevicePool::Slab(p) => p.free_bytes_for(tag),
            DevicePool::Exact(p) => p.free_bytes(),
        }
    }

    fn live_snapshot(&self) -> Vec<Block> {
        match self {
            DevicePool::Slab(p) => p.live_blocks().cloned().collect(),
            DevicePool::Exact(p) => p.live_blocks().cloned().collect(),
        }
    }

    fn check_invariants(&self) -> Result<(), String> {
        match self {
            DevicePool::Slab(p) => p.check_invariants(),
            DevicePool::Exact(p) => p.check_invariants(),
        }
    }
}

#[derive(Debug, Clone)]
struct Device {
    pool: DevicePool,
    /// Requests in the step currently executing.
    batch: Vec<usize>,
    /// Admitted or resumed; join at the next step.
    pending: Vec<usize>,
    stalled: Vec<usize>,
    busy: bool,
    pending_copy: f64,
    step_kv: u64,
    step_duration: f64,
}

impl Device {
    fn active(&self) -> usize {
        self.batch.len() + self.pending.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepDone {
    t: f64,
    seq: u64,
    device: usize,
}

impl Eq for StepDone {}

impl Ord for StepDone {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for StepDone {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Sim<'a> {
    cfg: &'a EngineConfig,
    bpt: u64,
    clock: f64,
    seq: u64,
    tasks: Vec<Task>,
    queue: Vec<usize>,
    devices: Vec<Device>,
    steps: BinaryHeap<Reverse<StepDone>>,
    manager: Option<BucketManager>,
    static_config: Option<Arc<BucketConfig>>,
    predictor: Option<Box<dyn LengthPredictor>>,
    agg: Aggregator,
    events: Vec<SimEvent>,
}

/// Simulates `trace` under `config.policy`.
pub fn run(config: &EngineConfig, trace: &[Request]) -> Result<RunOutput, EngineError> {
    config.validate()?;
    let bpt = config.shape.bytes_per_token();
    let mut reqs = trace.to_vec();
    reqs.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    let mut truncated = 0;
    let lb = config.large_bound;
    let tasks = reqs
        .into_iter()
        .map(|mut req| {
            if req.prompt_len < lb && req.total_len() > lb {
                req.true_gen_len = lb - req.prompt_len;
                truncated += 1;
            }
            Task {
                req,
                pred: None,
                eff: 0,
                tag: None,
                tag_config: None,
                state: TaskState::Queued,
                device: None,
                admitted_at: None,
                finished_at: None,
                generated: 0,
                migrations: 0,
                used_large: false,
            }
        })
        .collect();

    let (manager, static_config, predictor) = match config.policy {
        Policy::Odma => {
            let initial = config.initial_config()?;
            let period = config.refresh_period.unwrap_or((config.window / 2).max(1));
            let m = BucketManager::new(initial, config.window, config.buckets, period)
                .with_freeze_after(config.freeze_after)
                .with_share_mode(config.share_mode);
            (Some(m), None, Some(config.predictor.build(config.seed)?))
        }
        Policy::StaticWorstCase => (
            None,
            Some(Arc::new(BucketConfig::new(vec![lb], lb, config.align, 0)?)),
            None,
        ),
        Policy::OracleAllocation => (None, None, None),
    };

    let mut devices = Vec::with_capacity(config.devices);
    for _ in 0..config.devices {
        let pool = match config.policy {
            Policy::Odma => {
                let m = manager.as_ref().expect("odma has a manager");
                DevicePool::Slab(PoolState::with_options(
                    config.device_capacity,
                    &m.current(),
                    bpt,
                    &m.shares(),
                    PoolOptions {
                        reserve_fraction: config.reserve_fraction,
                        slab_tokens: config.slab_tokens,
                        require_large: true,
                    },
                )?)
            }
            Policy::StaticWorstCase => DevicePool::Slab(PoolState::with_options(
                config.device_capacity,
                static_config.as_ref().expect("static has a config"),
                bpt,
                &[1.0],
                PoolOptions {
                    reserve_fraction: 0.0,
                    slab_tokens: None,
                    require_large: false,
                },
            )?),
            Policy::OracleAllocation => DevicePool::Exact(ExactPool::new(config.device_capacity, bpt, config.align)),
        };
        devices.push(Device {
            pool,
            batch: Vec::new(),
            pending: Vec::new(),
            stalled: Vec::new(),
            busy: false,
            pending_copy: 0.0,
            step_kv: 0,
            step_duration: 0.0,
        });
    }

    let mut sim = Sim {
        cfg: config,
        bpt,
        clock: 0.0,
        seq: 0,
        tasks,
        queue: Vec::new(),
        devices,
        steps: BinaryHeap::new(),
        manager,
        static_config,
        predictor,
        agg: Aggregator::new(),
        events: Vec::new(),
    };
    sim.emit(SimEvent::Header {
        policy: config.policy,
        devices: config.devices,
        capacity_bytes: config.device_capacity * config.devices as u64,
        bytes_per_token: bpt,
    })?;
    sim.run_loop()?;

    let Sim {
        agg, events, tasks, ..
    } = sim;
    let outcomes = tasks
        .iter()
        .map(|t| Outcome {
            id: t.req.id,
            state: t.state,
            prediction: t.pred,
            tag: t.tag,
            device: t.device,
            admitted_at: t.admitted_at,
            finished_at: t.finished_at,
            generated: t.generated,
            target_gen: t.req.true_gen_len,
            migrations: t.migrations,
            used_large: t.used_large,
        })
        .collect();
    Ok(RunOutput {
        metrics: agg.finish()?,
        events,
        outcomes,
        truncated,
    })
}

impl Sim<'_> {
    fn emit(&mut self, ev: SimEvent) -> Result<(), EngineError> {
        self.agg.push(&ev)?;
        if self.cfg.keep_events {
            self.events.push(ev);
        }
        Ok(())
    }

    fn run_loop(&mut self) -> Result<(), EngineError> {
        let mut next_arrival = 0;
        loop {
            let arrival_t = self.tasks.get(next_arrival).map(|t| t.req.arrival_time);
            let step_t = self.steps.peek().map(|Reverse(s)| s.t);
            // steps finishing at the same instant free memory before arrivals
            let take_step = match (step_t, arrival_t) {
                (Some(s), Some(a)) => s <= a,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_step {
                let Reverse(done) = self.steps.pop().expect("peeked");
                self.advance(done.t)?;
                self.on_step_done(done.device)?;
            } else {
                let a = arrival_t.expect("no step, so an arrival");
                self.advance(a)?;
                while self.tasks.get(next_arrival).is_some_and(|t| t.req.arrival_time <= a) {
                    self.on_arrival(next_arrival)?;
                    next_arrival += 1;
                }
            }
            self.admit()?;
            self.start_steps();
            if self.cfg.check_invariants {
                self.check()?;
            }
        }
        let queued = self.queue.len();
        let stalled: usize = self.devices.iter().map(|d| d.stalled.len()).sum();
        if queued + stalled > 0 {
            return Err(EngineError::Livelock {
                t: self.clock,
                queued,
                stalled,
            });
        }
        self.emit(SimEvent::End { t: self.clock })
    }

    fn advance(&mut self, t: f64) -> Result<(), EngineError> {
        if t < self.clock {
            return Err(EngineError::Invariant {
                t,
                message: format!("clock moved backwards from {}", self.clock),
            });
        }
        self.clock = t;
        Ok(())
    }

    fn check(&self) -> Result<(), EngineError> {
        for (d, dev) in self.devices.iter().enumerate() {
            dev.pool.check_invariants().map_err(|m| EngineError::Invariant {
                t: self.clock,
                message: format!("device {d}: {m}"),
            })?;
        }
        Ok(())
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), EngineError> {
        let lb = self.cfg.large_bound;
        let req = &self.tasks[i].req;
        if req.prompt_len >= lb {
            let reason = format!("prompt of {} tokens leaves no room under large_bound {lb}", req.prompt_len);
            let id = req.id;
            self.tasks[i].state = TaskState::Rejected;
            return self.emit(SimEvent::Reject {
                t: self.clock,
                id,
                reason,
            });
        }
        if let Some(p) = &self.predictor {
            let pred = p.predict(req).inflated(self.cfg.alpha);
            let eff = req.prompt_len.saturating_add(pred.l_eff).min(lb);
            self.tasks[i].pred = Some(pred);
            self.tasks[i].eff = eff;
        } else {
            self.tasks[i].eff = req.total_len();
        }
        self.queue.push(i);
        Ok(())
    }

    /// Tag under the current config, re-tagging queued requests whose tag is
    /// from an older config version.
    fn tag_for(&mut self, i: usize) -> Result<BucketTag, EngineError> {
        let lb = self.cfg.large_bound;
        let task = &self.tasks[i];
        let (tag, cfg) = match self.cfg.policy {
            Policy::Odma => {
                let cfg = self.manager.as_ref().expect("odma has a manager").current();
                if let (Some(tag), Some(tc)) = (task.tag, &task.tag_config) {
                    if tc.version() == cfg.version() {
                        return Ok(tag);
                    }
                }
                let u = task.pred.map_or(1.0, |p| p.u);
                (select_bucket(&cfg, task.eff, u, self.cfg.tau)?, Some(cfg))
            }
            Policy::StaticWorstCase => {
                let cfg = Arc::clone(self.static_config.as_ref().expect("static has a config"));
                (select_bucket(&cfg, lb, 0.0, 1.0)?, Some(cfg))
            }
            Policy::OracleAllocation => {
                let bound = task.eff.div_ceil(self.cfg.align) * self.cfg.align;
                (
                    BucketTag {
                        kind: TagKind::Regular(1),
                        config_version: 0,
                        bound,
                    },
                    None,
                )
            }
        };
        self.tasks[i].tag = Some(tag);
        self.tasks[i].tag_config = cfg;
        Ok(tag)
    }

    /// Queued requests are grouped by tag kind in FIFO order. Each group goes
    /// to the device with the most free bytes for that tag, spilling to the
    /// next device when it runs out of batch slots or memory.
    fn admit(&mut self) -> Result<(), EngineError> {
        if self.queue.is_empty() {
            return Ok(());
        }
        let mut groups: Vec<(TagKind, Vec<usize>)> = Vec::new();
        for qi in 0..self.queue.len() {
            let i = self.queue[qi];
            let kind = self.tag_for(i)?.kind;
            match groups.iter_mut().find(|(k, _)| *k == kind) {
                Some((_, g)) => g.push(i),
                None => groups.push((kind, vec![i])),
            }
        }
        let mut admitted = vec![false; self.tasks.len()];
        for (_, group) in groups {
            let tag = self.tasks[group[0]].tag.expect("tagged above");
            let mut rest: &[usize] = &group;
            let mut tried = vec![false; self.devices.len()];
            while !rest.is_empty() {
                let Some(d) = (0..self.devices.len())
                    .filter(|&d| !tried[d] && self.devices[d].active() < self.cfg.max_batch)
                    .max_by(|&a, &b| {
                        let fa = self.devices[a].pool.free_bytes_for(&tag);
                        let fb = self.devices[b].pool.free_bytes_for(&tag);
                        fa.cmp(&fb).then(b.cmp(&a))
                    })
                else {
                    break;
                };
                tried[d] = true;
                while let Some((&i, tail)) = rest.split_first() {
                    if self.devices[d].active() >= self.cfg.max_batch {
                        break;
                    }
                    let task_tag = self.tasks[i].tag.expect("tagged above");
                    match self.devices[d].pool.reserve(&self.tasks[i], task_tag) {
                        Ok(r) => {
                            admitted[i] = true;
                            rest = tail;
                            self.place(i, d, r)?;
                        }
                        Err(PoolError::OutOfMemory { .. } | PoolError::PromptTooLarge { .. }) => break,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        self.queue.retain(|&i| !admitted[i]);
        Ok(())
    }

    fn place(&mut self, i: usize, d: usize, r: crate::pool::Reservation) -> Result<(), EngineError> {
        let t = self.clock;
        let task = &mut self.tasks[i];
        task.state = TaskState::Running;
        task.device = Some(d);
        task.admitted_at = Some(t);
        task.used_large = r.block.region == Region::Large;
        let id = task.req.id;
        let full = self.devices[d].pool.is_full(id, self.bpt) && task.generated < task.req.true_gen_len;
        self.emit(SimEvent::Reserve {
            t,
            id,
            device: d,
            tag: r.block.tag,
            region: r.block.region,
            offset: r.block.offset,
            size: r.block.size,
            tokens: r.block.tokens_written,
            fallback: r.fallback,
        })?;
        if full && !self.try_migrate(i, d)? {
            return Ok(());
        }
        self.devices[d].pending.push(i);
        Ok(())
    }

    /// Moves a full request into a large block. On a stall the request is
    /// parked on the device and `false` is returned.
    fn try_migrate(&mut self, i: usize, d: usize) -> Result<bool, EngineError> {
        let id = self.tasks[i].req.id;
        let DevicePool::Slab(pool) = &mut self.devices[d].pool else {
            return Err(EngineError::Invariant {
                t: self.clock,
                message: format!("request {id} outgrew an exact-size block"),
            });
        };
        match pool.migrate_to_large(id) {
            Ok(m) => {
                let copy_time = self.cfg.racm.copy_time(m.copied_bytes);
                self.devices[d].pending_copy += copy_time;
                let task = &mut self.tasks[i];
                task.migrations += 1;
                task.used_large = true;
                task.state = TaskState::Running;
                self.emit(SimEvent::Migrate {
                    t: self.clock,
                    id,
                    device: d,
                    old_offset: m.old_block.offset,
                    old_size: m.old_block.size,
                    new_offset: m.block.offset,
                    new_size: m.block.size,
                    copied_bytes: m.copied_bytes,
                    copy_time,
                })?;
                Ok(true)
            }
            Err(PoolError::Stalled(_)) => {
                self.tasks[i].state = TaskState::Stalled;
                self.devices[d].stalled.push(i);
                self.emit(SimEvent::Stall { t: self.clock, id, device: d })?;
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn start_steps(&mut self) {
        for d in 0..self.devices.len() {
            let dev = &mut self.devices[d];
            if dev.busy || dev.active() == 0 {
                continue;
            }
            let pending = std::mem::take(&mut dev.pending);
            dev.batch.extend(pending);
            let kv: u64 = dev
                .batch
                .iter()
                .map(|&i| {
                    let id = self.tasks[i].req.id;
                    dev.pool.block(id).map_or(0, |b| b.tokens_written as u64) * self.bpt
                })
                .sum();
            let duration = self.cfg.racm.step_time(kv, self.cfg.layout) + dev.pending_copy;
            dev.pending_copy = 0.0;
            dev.step_kv = kv;
            dev.step_duration = duration;
            dev.busy = true;
            self.seq += 1;
            self.steps.push(Reverse(StepDone {
                t: self.clock + duration,
                seq: self.seq,
                device: d,
            }));
        }
    }

    fn on_step_done(&mut self, d: usize) -> Result<(), EngineError> {
        let dev = &mut self.devices[d];
        dev.busy = false;
        let batch = std::mem::take(&mut dev.batch);
        let (kv_bytes, duration) = (dev.step_kv, dev.step_duration);
        self.emit(SimEvent::Step {
            t: self.clock,
            device: d,
            tokens: batch.len() as u32,
            kv_bytes,
            duration,
        })?;
        let mut keep = Vec::with_capacity(batch.len());
        let mut done = Vec::new();
        for i in batch {
            let id = self.tasks[i].req.id;
            self.devices[d].pool.append_token(id)?;
            let task = &mut self.tasks[i];
            task.generated += 1;
            if task.generated == task.req.true_gen_len {
                done.push(i);
            } else if self.devices[d].pool.is_full(id, self.bpt) {
                if self.try_migrate(i, d)? {
                    keep.push(i);
                }
            } else {
                keep.push(i);
            }
        }
        self.devices[d].batch = keep;
        for &i in &done {
            self.finish(i, d)?;
        }
        if !done.is_empty() {
            self.resume_stalled(d)?;
        }
        Ok(())
    }

    fn finish(&mut self, i: usize, d: usize) -> Result<(), EngineError> {
        let t = self.clock;
        let block = self.devices[d].pool.release(self.tasks[i].req.id)?;
        let task = &mut self.tasks[i];
        task.state = TaskState::Done;
        task.finished_at = Some(t);
        let realized = task.req.total_len();
        let bucket_hit = match &task.tag_config {
            Some(c) if self.cfg.policy == Policy::Odma => c.class_index(task.eff) == c.class_index(realized),
            _ => true,
        };
        let (id, latency, gen_tokens, used_large) = (
            task.req.id,
            t - task.req.arrival_time,
            task.generated,
            task.used_large,
        );
        self.emit(SimEvent::Release {
            t,
            id,
            device: d,
            offset: block.offset,
            size: block.size,
            tokens_written: block.tokens_written,
        })?;
        self.emit(SimEvent::Complete {
            t,
            id,
            latency,
            gen_tokens,
            bucket_hit,
            used_large,
        })?;
        if let Some(p) = self.predictor.as_mut() {
            p.observe(&self.tasks[i].req, gen_tokens);
        }
        let record = self.manager.as_mut().and_then(|m| m.record(realized));
        if let Some(rec) = record {
            self.apply_refresh()?;
            self.emit(SimEvent::Refresh {
                t,
                version: rec.version,
                bounds: rec.bounds,
                window_size: rec.window_size,
            })?;
        }
        Ok(())
    }

    /// Installs the manager's new config on every device. Live blocks must
    /// come through untouched.
    fn apply_refresh(&mut self) -> Result<(), EngineError> {
        let m = self.manager.as_ref().expect("refresh implies a manager");
        let (config, shares) = (m.current(), m.shares());
        for (d, dev) in self.devices.iter_mut().enumerate() {
            let DevicePool::Slab(pool) = &mut dev.pool else {
                continue;
            };
            let before: Vec<Block> = pool.live_blocks().cloned().collect();
            pool.apply_config(&config, &shares);
            if self.cfg.check_invariants && dev.pool.live_snapshot() != before {
                return Err(EngineError::Invariant {
                    t: self.clock,
                    message: format!("refresh moved a live block on device {d}"),
                });
            }
        }
        Ok(())
    }

    fn resume_stalled(&mut self, d: usize) -> Result<(), EngineError> {
        while !self.devices[d].stalled.is_empty() {
            if let DevicePool::Slab(p) = &self.devices[d].pool {
                if p.large_free() == 0 {
                    break;
                }
            }
            let i = self.devices[d].stalled.remove(0);
            if !self.try_migrate(i, d)? {
                break;
            }
            self.devices[d].pending.push(i);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(policy: Policy) -> EngineConfig {
        EngineConfig {
            policy,
            shape: ModelShape {
                layers: 1,
                kv_heads: 1,
                head_dim: 16,
                dtype_bytes: 2,
            },
            racm: RacmParams::new(64_000.0, 0.5, 0.01).unwrap(),
            predictor: PredictorKind::Oracle,
            alpha: 0.0,
            tau: 0.5,
            buckets: 2,
            window: 8,
            align: 16,
            large_bound: 256,
            reserve_fraction: 0.25,
            device_capacity: 256 * 64 * 8,
            max_batch: 8,
            check_invariants: true,
            keep_events: true,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn single_request_closed_form() {
        for policy in Policy::ALL {
            let cfg = small(policy);
            let out = run(&cfg, &[Request::new(1, 0.0, 10, 5)]).unwrap();
            let o = &out.outcomes[0];
            assert_eq!(o.state, TaskState::Done);
            assert_eq!(o.generated, 5);
            let bpt = cfg.shape.bytes_per_token() as f64;
            let expect: f64 = (0..5).map(|k| 0.01 + (10 + k) as f64 * bpt / 64_000.0).sum();
            assert!((o.finished_at.unwrap() - expect).abs() < 1e-12, "{policy}");
            let steps = out.events.iter().filter(|e| matches!(e, SimEvent::Step { .. })).count();
            assert_eq!(steps, 5);
            assert_eq!(out.metrics.generated_tokens, 5);
        }
    }

    #[test]
    fn underestimate_migrates_once() {
        let mut cfg = small(Policy::Odma);
        cfg.predictor = PredictorKind::NoisyOracle {
            sigma_rel: 0.0,
            bias: -0.5,
        };
        cfg.initial_bounds = Some(vec![64, 128]);
        cfg.freeze_after = Some(0);
        // predicted 50, true 100: 10 + 50 fits the 64 bucket, 110 does not
        let out = run(&cfg, &[Request::new(7, 0.0, 10, 100)]).unwrap();
        let o = &out.outcomes[0];
        assert_eq!(o.prediction.unwrap().l_hat, 50);
        assert_eq!(o.migrations, 1);
        assert!(o.used_large);
        assert_eq!(o.generated, 100);
        let copied: Vec<u64> = out
            .events
            .iter()
            .filter_map(|e| match e {
                SimEvent::Migrate { copied_bytes, .. } => Some(*copied_bytes),
                _ => None,
            })
            .collect();
        assert_eq!(copied, vec![64 * cfg.shape.bytes_per_token()]);
        assert_eq!(out.metrics.overflow_rate, 1.0);
        assert_eq!(out.metrics.bucket_accuracy, 0.0);
    }

    #[test]
    fn stalled_request_resumes_after_release() {
        let mut cfg = small(Policy::Odma);
        cfg.predictor = PredictorKind::NoisyOracle {
            sigma_rel: 0.0,
            bias: -0.5,
        };
        cfg.initial_bounds = Some(vec![64, 128]);
        cfg.freeze_after = Some(0);
        // two large blocks; three under-predicted requests overflow together
        let trace: Vec<Request> = (0..3).map(|i| Request::new(i, 0.0, 10, 100)).collect();
        let out = run(&cfg, &trace).unwrap();
        assert!(out.outcomes.iter().all(|o| o.state == TaskState::Done && o.generated == 100));
        assert_eq!(out.metrics.stalls, 1);
        assert_eq!(out.metrics.migrations, 3);
    }

    #[test]
    fn identical_requests_share_a_device() {
        let mut cfg = small(Policy::Odma);
        cfg.devices = 2;
        let trace: Vec<Request> = (0..3).map(|i| Request::new(i, 0.0, 10, 20)).collect();
        let out = run(&cfg, &trace).unwrap();
        assert!(out.outcomes.iter().all(|o| o.device == Some(0)));
        assert!(out.outcomes.windows(2).all(|w| w[0].finished_at == w[1].finished_at));
    }

    #[test]
    fn admission_tie_breaks_to_lowest_index() {
        let mut cfg = small(Policy::StaticWorstCase);
        cfg.devices = 3;
        cfg.max_batch = 1;
        let trace: Vec<Request> = (0..3).map(|i| Request::new(i, 0.0, 4, 4)).collect();
        let out = run(&cfg, &trace).unwrap();
        let devices: Vec<_> = out.outcomes.iter().map(|o| o.device.unwrap()).collect();
        assert_eq!(devices, vec![0, 1, 2]);
    }

    #[test]
    fn over_long_requests_are_truncated_or_rejected() {
        let cfg = small(Policy::Odma);
        let out = run(&cfg, &[Request::new(1, 0.0, 200, 100), Request::new(2, 0.0, 256, 1)]).unwrap();
        assert_eq!(out.truncated, 1);
        assert_eq!(out.outcomes[0].generated, 56);
        assert_eq!(out.outcomes[1].state, TaskState::Rejected);
        assert_eq!(out.metrics.rejected, 1);
    }

    #[test]
    fn livelock_is_reported() {
        let mut cfg = small(Policy::OracleAllocation);
        cfg.device_capacity = 64 * 64;
        let err = run(&cfg, &[Request::new(1, 0.0, 100, 10)]).unwrap_err();
        assert!(matches!(err, EngineError::Livelock { queued: 1, .. }));
    }

    #[test]
    fn empty_trace_gives_zero_metrics() {
        let out = run(&small(Policy::Odma), &[]).unwrap();
        assert_eq!(out.metrics, SimMetrics::default());
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut cfg = small(Policy::Odma);
        cfg.tau = 1.5;
        assert!(matches!(run(&cfg, &[]), Err(EngineError::Config(m)) if m.contains("tau")));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
    }
}
