//! Request traces: JSONL ingestion and synthetic drifting workloads.
//!
//! Synthetic traces are piecewise-stationary: a [`DriftSchedule`] is a list of
//! segments, each active from its `start_time` until the next one begins.
//! Arrivals follow a Poisson process, and every length is drawn continuously,
//! rounded up, and floored at one token.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate request id {id}")]
    DuplicateId { id: u64, line: usize },
    #[error("line {line}: {field} must be >= 1 (got {value})")]
    NonPositiveLength {
        line: usize,
        field: &'static str,
        value: i64,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("arrival rate must be positive and finite (got {0})")]
    InvalidRate(f64),
}

/// One serving request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub true_gen_len: u32,
    #[serde(default, rename = "meta", skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Request {
    pub fn new(id: u64, arrival_time: f64, prompt_len: u32, true_gen_len: u32) -> Self {
        Self {
            id,
            arrival_time,
            prompt_len,
            true_gen_len,
            metadata: BTreeMap::new(),
        }
    }

    /// Prompt plus generation, i.e. the KV footprint at completion.
    pub fn total_len(&self) -> u32 {
        self.prompt_len + self.true_gen_len
    }
}

// Lengths are parsed signed so that `0` and negatives get a dedicated error
// instead of a generic integer-range parse failure.
#[derive(Deserialize)]
struct RawRequest {
    id: u64,
    arrival_time: f64,
    prompt_len: i64,
    true_gen_len: i64,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Reads a JSONL trace. Blank lines are skipped; the result is sorted by
/// arrival time (stable, so ties keep file order).
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, WorkloadError> {
    let path = path.as_ref();
    let io_err = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRequest = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !raw.arrival_time.is_finite() || raw.arrival_time < 0.0 {
            return Err(WorkloadError::Parse {
                line: line_no,
                message: format!("arrival_time must be finite and >= 0 (got {})", raw.arrival_time),
            });
        }
        for (field, value) in [("prompt_len", raw.prompt_len), ("true_gen_len", raw.true_gen_len)] {
            if value < 1 {
                return Err(WorkloadError::NonPositiveLength {
                    line: line_no,
                    field,
                    value,
                });
            }
            if value > i64::from(u32::MAX) {
                return Err(WorkloadError::Parse {
                    line: line_no,
                    message: format!("{field} out of range ({value})"),
                });
            }
        }
        if seen.insert(raw.id, line_no).is_some() {
            return Err(WorkloadError::DuplicateId {
                id: raw.id,
                line: line_no,
            });
        }
        out.push(Request {
            id: raw.id,
            arrival_time: raw.arrival_time,
            prompt_len: raw.prompt_len as u32,
            true_gen_len: raw.true_gen_len as u32,
            metadata: raw.meta,
        });
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

pub fn write_trace(path: impl AsRef<Path>, requests: &[Request]) -> Result<(), WorkloadError> {
    let path = path.as_ref();
    let io_err = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in requests {
        let line = serde_json::to_string(r).expect("request serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower edge.
    pub lo: f64,
    /// Exclusive upper edge.
    pub hi: f64,
    pub weight: f64,
}

/// Length distribution family. `mu`/`sigma` are the parameters of the
/// underlying normal, so the median of `LogNormal { mu, .. }` is `e^mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LengthDist {
    Lognormal { mu: f64, sigma: f64 },
    Mixture { components: Vec<MixtureComponent> },
    EmpiricalHistogram { bins: Vec<HistogramBin> },
}

impl LengthDist {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidDistribution(m));
        match self {
            LengthDist::Lognormal { mu, sigma } => check_lognormal(*mu, *sigma),
            LengthDist::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture has no components".into());
                }
                for c in components {
                    if !(c.weight.is_finite() && c.weight > 0.0) {
                        return bad(format!("mixture weight must be > 0 (got {})", c.weight));
                    }
                    check_lognormal(c.mu, c.sigma)?;
                }
                Ok(())
            }
            LengthDist::EmpiricalHistogram { bins } => {
                if bins.is_empty() {
                    return bad("histogram has no bins".into());
                }
                for b in bins {
                    if !(b.lo.is_finite() && b.hi.is_finite() && b.lo >= 0.0 && b.lo < b.hi) {
                        return bad(format!("histogram bin [{}, {}) is empty or invalid", b.lo, b.hi));
                    }
                    if !(b.weight.is_finite() && b.weight > 0.0) {
                        return bad(format!("histogram weight must be > 0 (got {})", b.weight));
                    }
                }
                Ok(())
            }
        }
    }

    fn sampler(&self) -> Result<LengthSampler, WorkloadError> {
        self.validate()?;
        let lognormal = |mu: f64, sigma: f64| {
            LogNormal::new(mu, sigma).map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))
        };
        Ok(match self {
            LengthDist::Lognormal { mu, sigma } => LengthSampler::Lognormal(lognormal(*mu, *sigma)?),
            LengthDist::Mixture { components } => {
                let pick = WeightedIndex::new(components.iter().map(|c| c.weight))
                    .map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;
                let parts = components
                    .iter()
                    .map(|c| lognormal(c.mu, c.sigma))
                    .collect::<Result<Vec<_>, _>>()?;
                LengthSampler::Mixture(pick, parts)
            }
            LengthDist::EmpiricalHistogram { bins } => {
                let pick = WeightedIndex::new(bins.iter().map(|b| b.weight))
                    .map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;
                LengthSampler::Histogram(pick, bins.iter().map(|b| (b.lo, b.hi)).collect())
            }
        })
    }
}

fn check_lognormal(mu: f64, sigma: f64) -> Result<(), WorkloadError> {
    if !mu.is_finite() {
        return Err(WorkloadError::InvalidDistribution(format!("lognormal mu must be finite (got {mu})")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(WorkloadError::InvalidDistribution(format!(
            "lognormal sigma must be > 0 (got {sigma})"
        )));
    }
    Ok(())
}

enum LengthSampler {
    Lognormal(LogNormal<f64>),
    Mixture(WeightedIndex<f64>, Vec<LogNormal<f64>>),
    Histogram(WeightedIndex<f64>, Vec<(f64, f64)>),
}

impl LengthSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let x = match self {
            LengthSampler::Lognormal(d) => d.sample(rng),
            LengthSampler::Mixture(pick, parts) => parts[pick.sample(rng)].sample(rng),
            LengthSampler::Histogram(pick, bins) => {
                let (lo, hi) = bins[pick.sample(rng)];
                rng.random_range(lo..hi)
            }
        };
        to_tokens(x)
    }
}

/// Round up to whole tokens with a floor of one.
fn to_tokens(x: f64) -> u32 {
    if !x.is_finite() || x >= u32::MAX as f64 {
        return u32::MAX;
    }
    (x.ceil() as u32).max(1)
}

fn default_prompt_dist() -> LengthDist {
    LengthDist::Lognormal { mu: 3.0, sigma: 0.5 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_time: f64,
    /// Generation-length distribution.
    pub gen: LengthDist,
    #[serde(default = "default_prompt_dist")]
    pub prompt: LengthDist,
}

impl Segment {
    pub fn new(start_time: f64, gen: LengthDist) -> Self {
        Self {
            start_time,
            gen,
            prompt: default_prompt_dist(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub segments: Vec<Segment>,
}

impl DriftSchedule {
    pub fn stationary(gen: LengthDist) -> Self {
        Self {
            segments: vec![Segment::new(0.0, gen)],
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| WorkloadError::InvalidSchedule("schedule has no segments".into()))?;
        if first.start_time != 0.0 {
            return Err(WorkloadError::InvalidSchedule(format!(
                "first segment must start at 0 (got {})",
                first.start_time
            )));
        }
        for pair in self.segments.windows(2) {
            if !(pair[1].start_time > pair[0].start_time) || !pair[1].start_time.is_finite() {
                return Err(WorkloadError::InvalidSchedule(format!(
                    "segment start times must be strictly increasing ({} then {})",
                    pair[0].start_time, pair[1].start_time
                )));
            }
        }
        for s in &self.segments {
            s.gen.validate()?;
            s.prompt.validate()?;
        }
        Ok(())
    }

    /// Index of the segment active at time `t`.
    pub fn segment_at(&self, t: f64) -> usize {
        self.segments
            .partition_point(|s| s.start_time <= t)
            .saturating_sub(1)
    }
}

/// Synthesizes `n` requests with Poisson arrivals at `arrival_rate` per
/// second. Identical arguments give a bit-identical trace.
pub fn synth_trace(
    schedule: &DriftSchedule,
    n: usize,
    arrival_rate: f64,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    if !(arrival_rate.is_finite() && arrival_rate > 0.0) {
        return Err(WorkloadError::InvalidRate(arrival_rate));
    }
    schedule.validate()?;
    let samplers = schedule
        .segments
        .iter()
        .map(|s| Ok((s.gen.sampler()?, s.prompt.sampler()?)))
        .collect::<Result<Vec<_>, WorkloadError>>()?;
    let gap = Exp::new(arrival_rate).map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        t += gap.sample(&mut rng);
        let seg = schedule.segment_at(t);
        let (gen, prompt) = &samplers[seg];
        let prompt_len = prompt.sample(&mut rng);
        let true_gen_len = gen.sample(&mut rng);
        let mut req = Request::new(id, t, prompt_len, true_gen_len);
        req.metadata.insert("segment".into(), seg.to_string());
        out.push(req);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn median(mut v: Vec<u32>) -> f64 {
        v.sort_unstable();
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
        }
    }

    #[test]
    fn parses_single_line() {
        let f = write_lines(&[r#"{"id":1,"arrival_time":0.0,"prompt_len":10,"true_gen_len":50}"#]);
        let reqs = load_trace(f.path()).unwrap();
        assert_eq!(reqs, vec![Request::new(1, 0.0, 10, 50)]);
    }

    #[test]
    fn empty_file_is_empty_trace() {
        let f = write_lines(&[]);
        assert!(load_trace(f.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_second_line() {
        let mut lines = Vec::new();
        for i in 1..=10u64 {
            let id = if i == 3 || i == 9 { 7 } else { 100 + i };
            lines.push(format!(
                r#"{{"id":{id},"arrival_time":{}.0,"prompt_len":4,"true_gen_len":8}}"#,
                i
            ));
        }
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write_lines(&refs);
        match load_trace(f.path()) {
            Err(WorkloadError::DuplicateId { id: 7, line: 9 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_length_and_reports_parse_line() {
        let f = write_lines(&[
            r#"{"id":1,"arrival_time":0.0,"prompt_len":10,"true_gen_len":50}"#,
            r#"{"id":2,"arrival_time":0.5,"prompt_len":0,"true_gen_len":50}"#,
        ]);
        assert!(matches!(
            load_trace(f.path()),
            Err(WorkloadError::NonPositiveLength { line: 2, field: "prompt_len", value: 0 })
        ));
        let f = write_lines(&[r#"{"id":1,"arrival_time":0.0,"prompt_len":10,"true_gen_len":50}"#, "{not json"]);
        assert!(matches!(load_trace(f.path()), Err(WorkloadError::Parse { line: 2, .. })));
    }

    #[test]
    fn sorts_by_arrival_and_keeps_meta_ignores_unknown() {
        let f = write_lines(&[
            r#"{"id":1,"arrival_time":2.0,"prompt_len":10,"true_gen_len":50,"extra":true}"#,
            r#"{"id":2,"arrival_time":1.0,"prompt_len":3,"true_gen_len":5,"meta":{"type":"qa"}}"#,
        ]);
        let reqs = load_trace(f.path()).unwrap();
        assert_eq!(reqs[0].id, 2);
        assert_eq!(reqs[0].metadata.get("type").map(String::as_str), Some("qa"));
        assert_eq!(reqs[1].id, 1);
    }

    #[test]
    fn synth_zero_requests() {
        let s = DriftSchedule::stationary(LengthDist::Lognormal { mu: 4.0, sigma: 1.0 });
        assert!(synth_trace(&s, 0, 1.0, 1).unwrap().is_empty());
    }

    #[test]
    fn synth_lognormal_median() {
        let s = DriftSchedule::stationary(LengthDist::Lognormal { mu: 4.0, sigma: 1.0 });
        let reqs = synth_trace(&s, 10_000, 10.0, 42).unwrap();
        let m = median(reqs.iter().map(|r| r.true_gen_len).collect());
        let target = 4f64.exp();
        assert!((m - target).abs() <= 0.05 * target, "median {m} vs {target}");
    }

    #[test]
    fn synth_two_segment_drift() {
        let s = DriftSchedule {
            segments: vec![
                Segment::new(0.0, LengthDist::Lognormal { mu: 4.0, sigma: 1.0 }),
                Segment::new(100.0, LengthDist::Lognormal { mu: 6.0, sigma: 1.0 }),
            ],
        };
        let reqs = synth_trace(&s, 4000, 20.0, 7).unwrap();
        let (pre, post): (Vec<_>, Vec<_>) = reqs.iter().partition(|r| r.arrival_time < 100.0);
        assert!(pre.len() > 500 && post.len() > 500);
        let m_pre = median(pre.iter().map(|r| r.true_gen_len).collect());
        let m_post = median(post.iter().map(|r| r.true_gen_len).collect());
        assert!(m_post >= 2.0 * m_pre, "{m_pre} -> {m_post}");
    }

    #[test]
    fn synth_is_deterministic_and_poisson() {
        let s = DriftSchedule::stationary(LengthDist::Mixture {
            components: vec![
                MixtureComponent { weight: 0.7, mu: 3.0, sigma: 0.5 },
                MixtureComponent { weight: 0.3, mu: 6.0, sigma: 1.0 },
            ],
        });
        let a = synth_trace(&s, 10_000, 4.0, 9).unwrap();
        let b = synth_trace(&s, 10_000, 4.0, 9).unwrap();
        assert_eq!(a, b);
        // Exp(rate) gaps: mean 1/rate, sd 1/rate.
        let n = a.len() as f64;
        let mean_gap = a.last().unwrap().arrival_time / n;
        let se = 0.25 / n.sqrt();
        assert!((mean_gap - 0.25).abs() < 3.0 * se, "mean gap {mean_gap}");
        assert!(a.iter().all(|r| r.prompt_len >= 1 && r.true_gen_len >= 1));
        assert!(a.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    }

    #[test]
    fn histogram_family_stays_in_bins() {
        let s = DriftSchedule::stationary(LengthDist::EmpiricalHistogram {
            bins: vec![
                HistogramBin { lo: 0.0, hi: 10.0, weight: 1.0 },
                HistogramBin { lo: 100.0, hi: 110.0, weight: 1.0 },
            ],
        });
        let reqs = synth_trace(&s, 500, 1.0, 3).unwrap();
        for r in &reqs {
            let l = r.true_gen_len;
            assert!((1..=10).contains(&l) || (100..=110).contains(&l), "{l}");
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let s = DriftSchedule::stationary(LengthDist::Lognormal { mu: 4.0, sigma: 0.0 });
        assert!(matches!(synth_trace(&s, 1, 1.0, 0), Err(WorkloadError::InvalidDistribution(_))));
        let s = DriftSchedule::stationary(LengthDist::Lognormal { mu: 4.0, sigma: 1.0 });
        assert!(matches!(synth_trace(&s, 1, 0.0, 0), Err(WorkloadError::InvalidRate(_))));
        let s = DriftSchedule {
            segments: vec![Segment::new(5.0, LengthDist::Lognormal { mu: 4.0, sigma: 1.0 })],
        };
        assert!(matches!(synth_trace(&s, 1, 1.0, 0), Err(WorkloadError::InvalidSchedule(_))));
    }

    #[test]
    fn trace_roundtrip_through_file() {
        let s = DriftSchedule::stationary(LengthDist::Lognormal { mu: 4.0, sigma: 1.0 });
        let reqs = synth_trace(&s, 50, 2.0, 11).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trace(f.path(), &reqs).unwrap();
        assert_eq!(load_trace(f.path()).unwrap(), reqs);
    }
}
