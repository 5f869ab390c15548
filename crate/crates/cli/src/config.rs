//! Experiment configuration: one TOML file, every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use odma_core::bucket::{BucketConfig, ShareMode};
use odma_core::engine::{EngineConfig, Policy};
use odma_core::pool::ModelShape;
use odma_core::predictor::{default_bin_edges, PredictorKind};
use odma_core::racm::{Layout, RacmParams, MLU370_BANDWIDTH};
use odma_core::workload::{load_trace, synth_trace, DriftSchedule, LengthDist, Request, Segment, WorkloadError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid<T>(key: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub policies: Vec<Policy>,
    pub model: ModelSection,
    pub racm: RacmSection,
    pub cluster: ClusterSection,
    pub predictor: PredictorSection,
    pub bucket: BucketSection,
    pub scheduler: SchedulerSection,
    pub workload: WorkloadSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policies: Policy::ALL.to_vec(),
            model: ModelSection::default(),
            racm: RacmSection::default(),
            cluster: ClusterSection::default(),
            predictor: PredictorSection::default(),
            bucket: BucketSection::default(),
            scheduler: SchedulerSection::default(),
            workload: WorkloadSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// KV geometry of the served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: u32,
    pub kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelShape::QWEN_7B;
        Self {
            layers: s.layers,
            kv_heads: s.kv_heads,
            head_dim: s.head_dim,
            dtype_bytes: s.dtype_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RacmPreset {
    #[default]
    Mlu370Like,
    HbmLike,
}

/// Memory cost model. The preset fills `b_seq` and `alpha_ratio`; explicit
/// values override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RacmSection {
    pub preset: RacmPreset,
    /// Streaming bandwidth, bytes/s.
    pub b_seq: Option<f64>,
    /// Random-access over streaming bandwidth.
    pub alpha_ratio: Option<f64>,
    /// Seconds of compute per decode step.
    pub compute_base: f64,
    pub copy_read_write: bool,
    pub layout: Layout,
}

impl Default for RacmSection {
    fn default() -> Self {
        Self {
            preset: RacmPreset::default(),
            b_seq: None,
            alpha_ratio: None,
            compute_base: 0.005,
            copy_read_write: true,
            layout: Layout::Contiguous,
        }
    }
}

impl RacmSection {
    pub fn params(&self) -> RacmParams {
        let ratio = match self.preset {
            RacmPreset::Mlu370Like => 0.5,
            RacmPreset::HbmLike => 1.0,
        };
        let b_seq = self.b_seq.unwrap_or(MLU370_BANDWIDTH);
        RacmParams {
            b_seq,
            b_rand: b_seq * self.alpha_ratio.unwrap_or(ratio),
            compute_base: self.compute_base,
            copy_read_write: self.copy_read_write,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub devices: usize,
    /// KV capacity per device, bytes.
    pub device_capacity: u64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            devices: 1,
            device_capacity: 16 << 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorName {
    Oracle,
    #[default]
    NoisyOracle,
    OnlineHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub kind: PredictorName,
    /// Inflation factor applied as `l_hat * (1 + alpha * u)`.
    pub alpha: f64,
    /// Uncertainty above which requests go straight to the large region.
    pub tau: f64,
    pub sigma_rel: f64,
    pub bias: f64,
    pub bin_edges: Vec<u32>,
    pub bin_window: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            kind: PredictorName::default(),
            alpha: 0.5,
            tau: 0.5,
            sigma_rel: 0.2,
            bias: 0.0,
            bin_edges: default_bin_edges(),
            bin_window: 512,
        }
    }
}

impl PredictorSection {
    pub fn kind(&self) -> PredictorKind {
        match self.kind {
            PredictorName::Oracle => PredictorKind::Oracle,
            PredictorName::NoisyOracle => PredictorKind::NoisyOracle {
                sigma_rel: self.sigma_rel,
                bias: self.bias,
            },
            PredictorName::OnlineHistogram => PredictorKind::OnlineHistogram {
                bin_edges: self.bin_edges.clone(),
                bin_window: self.bin_window,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketSection {
    pub buckets: usize,
    /// Completed lengths kept for boundary refresh.
    pub window: usize,
    pub align: u32,
    /// Completions between refreshes; half the window when unset.
    pub refresh_period: Option<usize>,
    /// Stop refreshing after this many refreshes.
    pub freeze_after: Option<u32>,
    pub large_bound: u32,
    pub reserve_fraction: f64,
    pub share_mode: ShareMode,
    /// Regular bounds before the first refresh; geometric when unset.
    pub initial_bounds: Option<Vec<u32>>,
    pub slab_tokens: Option<u32>,
}

impl Default for BucketSection {
    fn default() -> Self {
        Self {
            buckets: 4,
            window: 1024,
            align: 16,
            refresh_period: None,
            freeze_after: None,
            large_bound: 4096,
            reserve_fraction: 0.1,
            share_mode: ShareMode::Equal,
            initial_bounds: None,
            slab_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    /// Concurrent decoding requests per device.
    pub max_batch: usize,
    /// Verify pool invariants after every event.
    pub check_invariants: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            max_batch: 64,
            check_invariants: false,
        }
    }
}

/// Either a JSONL trace or a synthetic drift schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    /// Relative paths resolve against the config file's directory.
    pub trace: Option<PathBuf>,
    pub n: usize,
    /// Poisson arrival rate, requests/s.
    pub rate: f64,
    pub segments: Vec<Segment>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            trace: None,
            n: 1000,
            rate: 10.0,
            segments: vec![Segment::new(0.0, LengthDist::Lognormal { mu: 5.0, sigma: 1.0 })],
        }
    }
}

impl WorkloadSection {
    pub fn schedule(&self) -> DriftSchedule {
        DriftSchedule {
            segments: self.segments.clone(),
        }
    }

    pub fn requests(&self, seed: u64) -> Result<Vec<Request>, WorkloadError> {
        match &self.trace {
            Some(path) => load_trace(path),
            None => synth_trace(&self.schedule(), self.n, self.rate, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write `events-<policy>.jsonl` next to the metrics.
    pub events: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            events: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file and makes a relative trace path absolute.
    /// Does not validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        if let Some(trace) = &cfg.workload.trace {
            if trace.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.workload.trace = Some(base.join(trace));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.model.layers,
            kv_heads: self.model.kv_heads,
            head_dim: self.model.head_dim,
            dtype_bytes: self.model.dtype_bytes,
        }
    }

    pub fn engine_config(&self, policy: Policy) -> EngineConfig {
        let b = &self.bucket;
        EngineConfig {
            policy,
            devices: self.cluster.devices,
            device_capacity: self.cluster.device_capacity,
            shape: self.shape(),
            racm: self.racm.params(),
            layout: self.racm.layout,
            predictor: self.predictor.kind(),
            alpha: self.predictor.alpha,
            tau: self.predictor.tau,
            buckets: b.buckets,
            window: b.window,
            refresh_period: b.refresh_period,
            freeze_after: b.freeze_after,
            share_mode: b.share_mode,
            align: b.align,
            large_bound: b.large_bound,
            reserve_fraction: b.reserve_fraction,
            initial_bounds: b.initial_bounds.clone(),
            slab_tokens: b.slab_tokens,
            max_batch: self.scheduler.max_batch,
            seed: self.seed,
            keep_events: self.output.events,
            check_invariants: self.scheduler.check_invariants,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.policies.is_empty() {
            return invalid("policies", "at least one policy is required");
        }
        if self.policies.iter().enumerate().any(|(i, p)| self.policies[..i].contains(p)) {
            return invalid("policies", "policies must not repeat");
        }
        for (key, v) in [
            ("model.layers", self.model.layers),
            ("model.kv_heads", self.model.kv_heads),
            ("model.head_dim", self.model.head_dim),
            ("model.dtype_bytes", self.model.dtype_bytes),
        ] {
            if v == 0 {
                return invalid(key, "must be >= 1");
            }
        }

        let r = &self.racm;
        if let Some(b) = r.b_seq {
            if !(b.is_finite() && b > 0.0) {
                return invalid("racm.b_seq", format!("must be > 0 (got {b})"));
            }
        }
        if let Some(a) = r.alpha_ratio {
            if !(a > 0.0 && a <= 1.0) {
                return invalid("racm.alpha_ratio", format!("must be in (0, 1] (got {a})"));
            }
        }
        if !(r.compute_base.is_finite() && r.compute_base >= 0.0) {
            return invalid("racm.compute_base", format!("must be >= 0 (got {})", r.compute_base));
        }

        if self.cluster.devices == 0 {
            return invalid("cluster.devices", "must be >= 1");
        }

        let p = &self.predictor;
        if !(p.alpha.is_finite() && p.alpha >= 0.0) {
            return invalid("predictor.alpha", format!("must be >= 0 (got {})", p.alpha));
        }
        if !(0.0..=1.0).contains(&p.tau) {
            return invalid("predictor.tau", format!("tau must be in [0, 1] (got {})", p.tau));
        }
        if let Err(e) = p.kind().validate() {
            let msg = e.to_string();
            let field = ["sigma_rel", "bias", "bin_edges", "bin_window"]
                .into_iter()
                .find(|f| msg.contains(f))
                .unwrap_or("kind");
            return invalid(&format!("predictor.{field}"), msg);
        }

        let b = &self.bucket;
        if b.buckets == 0 {
            return invalid("bucket.buckets", "must be >= 1");
        }
        if b.window == 0 {
            return invalid("bucket.window", "must be >= 1");
        }
        if b.align == 0 {
            return invalid("bucket.align", "must be >= 1");
        }
        if b.refresh_period == Some(0) {
            return invalid("bucket.refresh_period", "must be >= 1");
        }
        if b.large_bound == 0 || !b.large_bound.is_multiple_of(b.align) {
            return invalid(
                "bucket.large_bound",
                format!("must be a positive multiple of align {} (got {})", b.align, b.large_bound),
            );
        }
        if !(b.reserve_fraction > 0.0 && b.reserve_fraction < 1.0) {
            return invalid(
                "bucket.reserve_fraction",
                format!("must be in (0, 1) (got {})", b.reserve_fraction),
            );
        }
        if let Some(bounds) = &b.initial_bounds {
            if let Err(e) = BucketConfig::new(bounds.clone(), b.large_bound, b.align, 0) {
                return invalid("bucket.initial_bounds", e.to_string());
            }
        }
        let large_bytes = b.large_bound as u64 * self.shape().bytes_per_token();
        if (self.cluster.device_capacity as f64 * b.reserve_fraction) < large_bytes as f64 {
            return invalid(
                "cluster.device_capacity",
                format!(
                    "{} bytes with reserve_fraction {} cannot hold one large block of {large_bytes} bytes",
                    self.cluster.device_capacity, b.reserve_fraction
                ),
            );
        }

        if self.scheduler.max_batch == 0 {
            return invalid("scheduler.max_batch", "must be >= 1");
        }

        let w = &self.workload;
        match &w.trace {
            Some(path) if !path.is_file() => {
                return invalid("workload.trace", format!("{} does not exist", path.display()));
            }
            Some(_) => {}
            None => {
                if !(w.rate.is_finite() && w.rate > 0.0) {
                    return invalid("workload.rate", format!("must be > 0 (got {})", w.rate));
                }
                if let Err(e) = w.schedule().validate() {
                    return invalid("workload.segments", e.to_string());
                }
            }
        }

        for &policy in &self.policies {
            if let Err(e) = self.engine_config(policy).validate() {
                return invalid("config", e.to_string());
            }
        }
        Ok(())
    }
}
