//! Dynamic bucket boundaries.
//!
//! Realized lengths flow into a sliding [`LengthWindow`]. On refresh the
//! window's equal-mass nearest-rank quantiles `Q_{i/B}` become the new
//! regular-bucket upper bounds, rounded up to the alignment unit, merged when
//! equal, and capped at the large-bucket bound. A refresh produces a new
//! immutable [`BucketConfig`] snapshot; tags and blocks handed out under an
//! older version are never touched.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BucketError {
    #[error("invalid bucket config: {0}")]
    InvalidConfig(String),
    #[error("cannot refresh from an empty window")]
    EmptyWindow,
    #[error("request needs {needed} tokens but the large bucket holds {large_bound}")]
    Unsatisfiable { needed: u32, large_bound: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketConfig {
    bounds: Vec<u32>,
    large_bound: u32,
    align: u32,
    version: u64,
}

impl BucketConfig {
    pub fn new(bounds: Vec<u32>, large_bound: u32, align: u32, version: u64) -> Result<Self, BucketError> {
        let bad = |m: String| Err(BucketError::InvalidConfig(m));
        if align == 0 {
            return bad("align must be >= 1".into());
        }
        if bounds.is_empty() {
            return bad("at least one regular bound is required".into());
        }
        if !large_bound.is_multiple_of(align) {
            return bad(format!("large_bound {large_bound} is not a multiple of align {align}"));
        }
        if bounds[0] == 0 {
            return bad("bounds must be positive".into());
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("bounds must be strictly increasing: {bounds:?}"));
        }
        if let Some(b) = bounds.iter().find(|b| *b % align != 0) {
            return bad(format!("bound {b} is not a multiple of align {align}"));
        }
        if *bounds.last().unwrap() > large_bound {
            return bad(format!("bounds {bounds:?} exceed large_bound {large_bound}"));
        }
        Ok(Self {
            bounds,
            large_bound,
            align,
            version,
        })
    }

    /// Geometric bounds `large_bound / 2^(B-i)` for use before any lengths
    /// have been observed.
    pub fn geometric(buckets: usize, large_bound: u32, align: u32) -> Result<Self, BucketError> {
        if buckets == 0 {
            return Err(BucketError::InvalidConfig("bucket count must be >= 1".into()));
        }
        let mut bounds: Vec<u32> = (0..buckets)
            .map(|i| {
                let shift = (buckets - 1 - i).min(31) as u32;
                round_up(large_bound >> shift, align).clamp(align, large_bound)
            })
            .collect();
        bounds.dedup();
        Self::new(bounds, large_bound, align, 0)
    }

    pub fn bounds(&self) -> &[u32] {
        &self.bounds
    }

    pub fn large_bound(&self) -> u32 {
        self.large_bound
    }

    pub fn align(&self) -> u32 {
        self.align
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bucket_count(&self) -> usize {
        self.bounds.len()
    }

    /// Zero-based index of the smallest bound `>= len`; `bucket_count()` when
    /// `len` exceeds every regular bound.
    pub fn class_index(&self, len: u32) -> usize {
        self.bounds.partition_point(|&b| b < len)
    }

    /// Bound in tokens of the regular bucket with 1-based index `i`.
    pub fn bound_of(&self, i: usize) -> Option<u32> {
        i.checked_sub(1).and_then(|k| self.bounds.get(k)).copied()
    }
}

pub(crate) fn round_up(x: u32, align: u32) -> u32 {
    x.div_ceil(align) * align
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagKind {
    /// 1-based regular bucket index.
    Regular(usize),
    Large,
}

/// Allocation class decided before decoding. `bound` is the token capacity
/// the tag guarantees under its config version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketTag {
    pub kind: TagKind,
    pub config_version: u64,
    pub bound: u32,
}

impl BucketTag {
    pub fn is_large(&self) -> bool {
        self.kind == TagKind::Large
    }
}

impl fmt::Display for BucketTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TagKind::Regular(i) => write!(f, "regular({i})@v{}", self.config_version),
            TagKind::Large => write!(f, "large@v{}", self.config_version),
        }
    }
}

/// Routes an effective length to a bucket. `u > tau` bypasses the regular
/// buckets; so does any `l_eff` above the largest regular bound.
pub fn select_bucket(config: &BucketConfig, l_eff: u32, u: f64, tau: f64) -> Result<BucketTag, BucketError> {
    if l_eff > config.large_bound {
        return Err(BucketError::Unsatisfiable {
            needed: l_eff,
            large_bound: config.large_bound,
        });
    }
    let large = BucketTag {
        kind: TagKind::Large,
        config_version: config.version,
        bound: config.large_bound,
    };
    if u > tau {
        return Ok(large);
    }
    let idx = config.class_index(l_eff);
    Ok(match config.bounds.get(idx) {
        Some(&bound) => BucketTag {
            kind: TagKind::Regular(idx + 1),
            config_version: config.version,
            bound,
        },
        None => large,
    })
}

/// Sliding window of realized lengths with an exact per-length histogram.
#[derive(Debug, Clone)]
pub struct LengthWindow {
    capacity: usize,
    samples: VecDeque<u32>,
    histogram: BTreeMap<u32, usize>,
}

impl LengthWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be >= 1");
        Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            histogram: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, len: u32) {
        if self.samples.len() == self.capacity {
            if let Some(old) = self.samples.pop_front() {
                let slot = self.histogram.get_mut(&old).expect("histogram tracks samples");
                *slot -= 1;
                if *slot == 0 {
                    self.histogram.remove(&old);
                }
            }
        }
        self.samples.push_back(len);
        *self.histogram.entry(len).or_insert(0) += 1;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> impl Iterator<Item = u32> + '_ {
        self.samples.iter().copied()
    }

    /// Count of samples equal to `len`.
    pub fn count(&self, len: u32) -> usize {
        self.histogram.get(&len).copied().unwrap_or(0)
    }

    /// Equal-mass nearest-rank quantiles `Q_{i/B}` for `i = 1..=B`, before
    /// alignment or merging. `Q_p` is the smallest sample whose 1-based rank
    /// in sorted order is `>= ceil(p * n)`.
    pub fn quantile_bounds(&self, buckets: usize) -> Result<Vec<u32>, BucketError> {
        let n = self.samples.len();
        if n == 0 {
            return Err(BucketError::EmptyWindow);
        }
        let mut out = Vec::with_capacity(buckets);
        let mut hist = self.histogram.iter();
        let (mut value, mut cum) = hist.next().map(|(&v, &c)| (v, c)).expect("non-empty");
        for i in 1..=buckets {
            // ceil(i * n / B), with ranks clamped to at least 1
            let rank = (i * n).div_ceil(buckets).max(1);
            while cum < rank {
                let (&v, &c) = hist.next().expect("rank within window");
                value = v;
                cum += c;
            }
            out.push(value);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefreshParams {
    pub buckets: usize,
    pub align: u32,
    pub large_bound: u32,
}

/// Derives a new config from the window's quantiles.
pub fn refresh(window: &LengthWindow, params: RefreshParams, version: u64) -> Result<BucketConfig, BucketError> {
    if params.buckets == 0 || params.align == 0 {
        return Err(BucketError::InvalidConfig("bucket count and align must be >= 1".into()));
    }
    let raw = window.quantile_bounds(params.buckets)?;
    let mut bounds: Vec<u32> = raw
        .into_iter()
        .map(|q| round_up(q, params.align).min(params.large_bound))
        .collect();
    bounds.dedup();
    BucketConfig::new(bounds, params.large_bound, params.align, version)
}

/// How regular-region capacity is divided among bucket classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareMode {
    /// Equal byte share per class.
    #[default]
    Equal,
    /// Share proportional to expected resident bytes: block size times the
    /// summed lengths of window samples in the class, since residence time
    /// grows with length.
    Demand,
}

/// Structured record of a boundary refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub version: u64,
    pub bounds: Vec<u32>,
    pub window_size: usize,
}

/// Owns the window and the current config snapshot, and refreshes every
/// `refresh_period` recorded completions.
#[derive(Debug, Clone)]
pub struct BucketManager {
    window: LengthWindow,
    config: Arc<BucketConfig>,
    params: RefreshParams,
    refresh_period: usize,
    since_refresh: usize,
    refreshes: u32,
    freeze_after: Option<u32>,
    share_mode: ShareMode,
}

impl BucketManager {
    pub fn new(initial: BucketConfig, window_capacity: usize, buckets: usize, refresh_period: usize) -> Self {
        let params = RefreshParams {
            buckets,
            align: initial.align,
            large_bound: initial.large_bound,
        };
        Self {
            window: LengthWindow::new(window_capacity),
            config: Arc::new(initial),
            params,
            refresh_period: refresh_period.max(1),
            since_refresh: 0,
            refreshes: 0,
            freeze_after: None,
            share_mode: ShareMode::Equal,
        }
    }

    /// Stop refreshing once `n` refreshes have happened.
    pub fn with_freeze_after(mut self, n: Option<u32>) -> Self {
        self.freeze_after = n;
        self
    }

    pub fn with_share_mode(mut self, mode: ShareMode) -> Self {
        self.share_mode = mode;
        self
    }

    pub fn current(&self) -> Arc<BucketConfig> {
        Arc::clone(&self.config)
    }

    pub fn window(&self) -> &LengthWindow {
        &self.window
    }

    pub fn refresh_count(&self) -> u32 {
        self.refreshes
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze_after.is_some_and(|n| self.refreshes >= n)
    }

    /// Records one realized length; returns the refresh record when this
    /// completion triggered a refresh.
    pub fn record(&mut self, len: u32) -> Option<RefreshRecord> {
        self.window.record(len);
        self.since_refresh += 1;
        if self.since_refresh < self.refresh_period || self.is_frozen() {
            return None;
        }
        self.force_refresh()
    }

    /// Refreshes immediately. An empty window keeps the previous config.
    pub fn force_refresh(&mut self) -> Option<RefreshRecord> {
        let next = refresh(&self.window, self.params, self.config.version + 1).ok()?;
        self.since_refresh = 0;
        self.refreshes += 1;
        let record = RefreshRecord {
            version: next.version,
            bounds: next.bounds.clone(),
            window_size: self.window.len(),
        };
        self.config = Arc::new(next);
        Some(record)
    }

    /// Per-class capacity shares for the current config, summing to 1.
    pub fn shares(&self) -> Vec<f64> {
        let b = self.config.bucket_count();
        let equal = vec![1.0 / b as f64; b];
        if self.share_mode == ShareMode::Equal || self.window.is_empty() {
            return equal;
        }
        let mut weight = vec![0.0; b];
        for s in self.window.samples() {
            let i = self.config.class_index(s);
            if i < b {
                weight[i] += self.config.bounds[i] as f64 * s as f64;
            }
        }
        let total: f64 = weight.iter().sum();
        if total <= 0.0 {
            return equal;
        }
        weight.iter().map(|w| w / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(bounds: &[u32], large: u32) -> BucketConfig {
        BucketConfig::new(bounds.to_vec(), large, 1, 0).unwrap()
    }

    fn window_of(cap: usize, xs: &[u32]) -> LengthWindow {
        let mut w = LengthWindow::new(cap);
        for &x in xs {
            w.record(x);
        }
        w
    }

    /// Brute force: sort, then index rank ceil(p*n) (1-based).
    fn nearest_rank_oracle(xs: &[u32], buckets: usize) -> Vec<u32> {
        let mut s = xs.to_vec();
        s.sort_unstable();
        let n = s.len() as f64;
        (1..=buckets)
            .map(|i| {
                let rank = ((i as f64 * n / buckets as f64).ceil() as usize).max(1);
                s[rank - 1]
            })
            .collect()
    }

    #[test]
    fn record_appends_and_evicts_fifo() {
        let w = window_of(4, &[10]);
        assert_eq!(w.samples().collect::<Vec<_>>(), vec![10]);
        let w = window_of(4, &[10, 20, 30, 40, 50]);
        assert_eq!(w.samples().collect::<Vec<_>>(), vec![20, 30, 40, 50]);
        assert_eq!(w.count(10), 0);
        let w = window_of(8, &[5, 5, 5]);
        assert_eq!(w.count(5), 3);
    }

    #[test]
    fn refresh_examples() {
        let w = window_of(16, &[10, 20, 30, 40]);
        let p = |buckets, align| RefreshParams {
            buckets,
            align,
            large_bound: 10_000 / align * align,
        };
        assert_eq!(refresh(&w, p(2, 1), 1).unwrap().bounds(), &[20, 40]);
        assert_eq!(refresh(&w, p(2, 16), 1).unwrap().bounds(), &[32, 48]);
        let w = window_of(16, &[7, 7, 7, 7]);
        assert_eq!(refresh(&w, p(3, 1), 1).unwrap().bounds(), &[7]);
    }

    #[test]
    fn refresh_caps_at_large_bound_and_rejects_empty() {
        let w = window_of(16, &[10, 20, 5000]);
        let c = refresh(
            &w,
            RefreshParams {
                buckets: 3,
                align: 8,
                large_bound: 4096,
            },
            3,
        )
        .unwrap();
        assert_eq!(c.bounds(), &[16, 24, 4096]);
        assert_eq!(c.version(), 3);
        let empty = LengthWindow::new(4);
        assert_eq!(
            refresh(&empty, RefreshParams { buckets: 2, align: 1, large_bound: 10 }, 1),
            Err(BucketError::EmptyWindow)
        );
    }

    #[test]
    fn select_examples() {
        let c = BucketConfig::new(vec![128, 512, 2048], 8192, 1, 4).unwrap();
        let t = select_bucket(&c, 300, 0.1, 0.8).unwrap();
        assert_eq!(t.kind, TagKind::Regular(2));
        assert_eq!(t.bound, 512);
        assert_eq!(t.config_version, 4);
        assert_eq!(select_bucket(&c, 300, 0.9, 0.8).unwrap().kind, TagKind::Large);
        assert_eq!(select_bucket(&c, 3000, 0.0, 0.8).unwrap().kind, TagKind::Large);
        assert_eq!(
            select_bucket(&c, 9000, 0.0, 0.8),
            Err(BucketError::Unsatisfiable { needed: 9000, large_bound: 8192 })
        );
        assert_eq!(select_bucket(&c, 0, 0.0, 0.8).unwrap().kind, TagKind::Regular(1));
    }

    #[test]
    fn config_validation() {
        assert!(BucketConfig::new(vec![], 10, 1, 0).is_err());
        assert!(BucketConfig::new(vec![5, 5], 10, 1, 0).is_err());
        assert!(BucketConfig::new(vec![4, 12], 16, 8, 0).is_err());
        assert!(BucketConfig::new(vec![8, 32], 16, 8, 0).is_err());
        assert!(BucketConfig::new(vec![8], 20, 8, 0).is_err());
        let g = BucketConfig::geometric(4, 4096, 16).unwrap();
        assert_eq!(g.bounds(), &[512, 1024, 2048, 4096]);
    }

    #[test]
    fn manager_refreshes_on_period_and_freezes() {
        let init = BucketConfig::geometric(2, 1024, 1).unwrap();
        let mut m = BucketManager::new(init, 8, 2, 4).with_freeze_after(Some(1));
        for x in [10, 20, 30] {
            assert!(m.record(x).is_none());
        }
        let rec = m.record(40).unwrap();
        assert_eq!(rec.version, 1);
        assert_eq!(rec.bounds, vec![20, 40]);
        assert_eq!(rec.window_size, 4);
        for x in [100, 200, 300, 400, 500] {
            assert!(m.record(x).is_none());
        }
        assert_eq!(m.current().bounds(), &[20, 40]);
        assert!(m.is_frozen());
    }

    #[test]
    fn demand_shares_follow_bytes() {
        let init = BucketConfig::new(vec![10, 30], 100, 1, 0).unwrap();
        let mut m = BucketManager::new(init, 8, 2, 100).with_share_mode(ShareMode::Demand);
        for x in [5, 10, 25, 30] {
            m.record(x);
        }
        // 10 * (5 + 10) against 30 * (25 + 30)
        let s = m.shares();
        assert!((s[0] - 150.0 / 1800.0).abs() < 1e-12 && (s[1] - 1650.0 / 1800.0).abs() < 1e-12, "{s:?}");
    }

    proptest! {
        #[test]
        fn quantiles_match_sort_oracle(xs in prop::collection::vec(1u32..5000, 1..=64), b in 1usize..=8) {
            let w = window_of(64, &xs);
            prop_assert_eq!(w.quantile_bounds(b).unwrap(), nearest_rank_oracle(&xs, b));
        }

        #[test]
        fn refreshed_bounds_are_aligned_and_increasing(
            xs in prop::collection::vec(1u32..5000, 1..=64),
            b in 1usize..=8,
            align in 1u32..=64,
        ) {
            let w = window_of(64, &xs);
            let large = 4096 / align * align;
            let c = refresh(&w, RefreshParams { buckets: b, align, large_bound: large }, 1).unwrap();
            prop_assert!(c.bounds().windows(2).all(|p| p[0] < p[1]));
            prop_assert!(c.bounds().iter().all(|x| x % align == 0 && *x <= large));
            let max = *xs.iter().max().unwrap();
            prop_assert_eq!(*c.bounds().last().unwrap(), round_up(max, align).min(large));
        }

        #[test]
        fn histogram_sums_to_window(xs in prop::collection::vec(1u32..50, 0..200), cap in 1usize..40) {
            let w = window_of(cap, &xs);
            prop_assert!(w.len() <= cap);
            let total: usize = w.histogram.values().sum();
            prop_assert_eq!(total, w.len());
            let tail: Vec<u32> = xs.iter().rev().take(cap).rev().copied().collect();
            prop_assert_eq!(w.samples().collect::<Vec<_>>(), tail);
        }

        #[test]
        fn occupancy_is_balanced(mut xs in prop::collection::btree_set(1u32..100_000, 8..=256), b in 1usize..=8) {
            let xs: Vec<u32> = std::mem::take(&mut xs).into_iter().collect();
            let w = window_of(xs.len(), &xs);
            let c = refresh(&w, RefreshParams { buckets: b, align: 1, large_bound: 100_000 }, 1).unwrap();
            let mut counts = vec![0usize; c.bucket_count()];
            for &x in &xs {
                counts[c.class_index(x)] += 1;
            }
            let n = xs.len() as f64;
            for cnt in counts {
                let frac = cnt as f64 / n;
                prop_assert!((frac - 1.0 / b as f64).abs() <= 2.0 / b as f64);
            }
        }

        #[test]
        fn select_is_monotone(l1 in 0u32..5000, l2 in 0u32..5000, u in 0.0f64..1.0) {
            let c = BucketConfig::new(vec![128, 512, 2048], 8192, 1, 0).unwrap();
            let (lo, hi) = (l1.min(l2), l1.max(l2));
            let a = select_bucket(&c, lo, u, 0.5).unwrap();
            let b = select_bucket(&c, hi, u, 0.5).unwrap();
            prop_assert!(a.bound <= b.bound);
        }
    }

    #[test]
    fn large_tag_carries_large_bound() {
        let c = cfg(&[10], 50);
        assert_eq!(select_bucket(&c, 11, 0.0, 1.0).unwrap().bound, 50);
    }
}
