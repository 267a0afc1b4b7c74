//! Epsilon-equivalence checking by bisection of the input box.
//!
//! Each region is analysed independently with a fresh variable table. The
//! calling thread owns the work queue and the outcome; worker threads only
//! run forward passes and report back over a channel. A subregion's output
//! bounds are clipped to its parent's, so refinement never loosens them.

use crate::absbounds::{AbsPass, NeuronState};
use crate::deltabounds::{forward_diff, CaseHistogram, Mode, SymVarOptions};
use crate::error::{Error, Result};
use crate::model::{InputBox, NetworkPair};
use crate::symexpr::ConcreteInterval;
use crossbeam_channel::{unbounded, Receiver, Sender};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    #[default]
    Smear,
    Widest,
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::Smear => "smear",
            SplitStrategy::Widest => "widest",
        })
    }
}

impl FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "smear" => Ok(SplitStrategy::Smear),
            "widest" => Ok(SplitStrategy::Widest),
            _ => Err(format!("unknown split strategy '{s}' (expected smear or widest)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerificationTask {
    pub pair: NetworkPair,
    pub input_box: InputBox,
    pub epsilon: f64,
    pub mode: Mode,
    pub symvars: SymVarOptions,
    pub max_depth: usize,
    pub timeout: Duration,
    pub threads: usize,
    pub split: SplitStrategy,
    /// Stop dispatching work after the first unresolved region. The status is
    /// still correct but the explored-region count depends on scheduling.
    pub stop_on_failure: bool,
    /// Keep a record of every analysed region in the outcome.
    pub record_nodes: bool,
}

impl VerificationTask {
    pub const DEFAULT_MAX_DEPTH: usize = 25;
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(1800);
    pub const DEFAULT_THREADS: usize = 12;

    pub fn new(pair: NetworkPair, input_box: InputBox, epsilon: f64) -> Self {
        Self {
            pair,
            input_box,
            epsilon,
            mode: Mode::Full,
            symvars: SymVarOptions::default(),
            max_depth: Self::DEFAULT_MAX_DEPTH,
            timeout: Self::DEFAULT_TIMEOUT,
            threads: Self::DEFAULT_THREADS,
            split: SplitStrategy::Smear,
            stop_on_failure: false,
            record_nodes: false,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_max_depth(mut self, max_depth: usize) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_split(mut self, split: SplitStrategy) -> Self {
        self.split = split;
        self
    }

    pub fn with_symvars(mut self, symvars: SymVarOptions) -> Self {
        self.symvars = symvars;
        self
    }

    pub fn recording_nodes(mut self) -> Self {
        self.record_nodes = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidTask(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_depth > 120 {
            return Err(Error::InvalidTask(format!("max depth {} exceeds 120", self.max_depth)));
        }
        if self.input_box.dims() != self.pair.input_count() {
            return Err(Error::Dimension {
                expected: self.pair.input_count(),
                actual: self.input_box.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Verified,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafReason {
    DepthLimit,
    Timeout,
    /// Every dimension has zero width; nothing left to bisect.
    Unsplittable,
    /// Dropped after an earlier failure with `stop_on_failure`.
    Abandoned,
}

/// One analysed region.
#[derive(Debug, Clone, Serialize)]
pub struct NodeRecord {
    /// Heap-style path key: root is 1, children of `k` are `2k` and `2k + 1`.
    pub key: u128,
    pub depth: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Bounds of this region, clipped to the parent's.
    pub output: Vec<ConcreteInterval>,
    /// Bounds from this region's own forward pass.
    pub raw_output: Vec<ConcreteInterval>,
    pub verified: bool,
    pub split_dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnresolvedRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub depth: usize,
    pub reason: LeafReason,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationOutcome {
    pub status: Status,
    /// Hull of the output bounds over every leaf that was analysed.
    pub output: Vec<ConcreteInterval>,
    /// Leaves of the explored tree.
    pub subregions_explored: usize,
    /// Forward passes run, including interior regions.
    pub regions_analysed: usize,
    pub max_depth_reached: usize,
    pub wall_time: Duration,
    pub symvars_introduced: usize,
    pub case_histogram: CaseHistogram,
    pub timed_out: bool,
    pub unresolved: Vec<UnresolvedRegion>,
    pub nodes: Vec<NodeRecord>,
}

impl VerificationOutcome {
    pub fn verified(&self) -> bool {
        self.status == Status::Verified
    }
}

/// Strict check `-eps < lo` and `hi < eps` for every output.
pub fn check_epsilon(output: &[ConcreteInterval], epsilon: f64) -> bool {
    output.iter().all(|iv| -epsilon < iv.lo && iv.hi < epsilon)
}

/// Interval Jacobian of a network or of a network difference, one row per
/// output and one column per input.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGradient {
    pub lo: Array2<f64>,
    pub hi: Array2<f64>,
}

impl IntervalGradient {
    pub fn outputs(&self) -> usize {
        self.lo.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.lo.ncols()
    }

    pub fn entry(&self, output: usize, input: usize) -> ConcreteInterval {
        ConcreteInterval::new(self.lo[[output, input]], self.hi[[output, input]])
    }

    /// `self - other` in interval arithmetic.
    pub fn sub(&self, other: &IntervalGradient) -> IntervalGradient {
        IntervalGradient {
            lo: &self.lo - &other.hi,
            hi: &self.hi - &other.lo,
        }
    }

    /// Per input, `sum_j |G[j, i]|` over outputs.
    pub fn per_input(&self) -> Vec<ConcreteInterval> {
        (0..self.inputs())
            .map(|i| {
                (0..self.outputs())
                    .map(|j| self.entry(j, i).abs())
                    .fold(ConcreteInterval::point(0.0), |acc, v| acc.add(&v))
            })
            .collect()
    }
}

fn network_gradient(net: &crate::model::Network, pass: &AbsPass) -> IntervalGradient {
    let layers = net.layers();
    let last = layers.len() - 1;
    let top = layers[last].weights.t().to_owned();
    let mut lo = top.clone();
    let mut hi = top;
    for k in (0..last).rev() {
        for (col, state) in pass.hidden()[k].states.iter().enumerate() {
            match state {
                NeuronState::Active => {}
                NeuronState::Inactive => {
                    lo.column_mut(col).fill(0.0);
                    hi.column_mut(col).fill(0.0);
                }
                NeuronState::Unstable => {
                    lo.column_mut(col).mapv_inplace(|v| v.min(0.0));
                    hi.column_mut(col).mapv_inplace(|v| v.max(0.0));
                }
            }
        }
        let wt = layers[k].weights.t();
        let pos = wt.mapv(|w| w.max(0.0));
        let neg = wt.mapv(|w| w.min(0.0));
        let next_lo = lo.dot(&pos) + hi.dot(&neg);
        let next_hi = hi.dot(&pos) + lo.dot(&neg);
        lo = next_lo;
        hi = next_hi;
    }
    IntervalGradient { lo, hi }
}

/// Interval gradient of `f'(x) - f(x)` over the box the two passes were
/// computed on, using ReLU derivative masks `[1,1]`, `[0,0]` or `[0,1]`.
pub fn interval_gradient(pair: &NetworkPair, original: &AbsPass, variant: &AbsPass) -> IntervalGradient {
    network_gradient(pair.variant(), variant).sub(&network_gradient(pair.original(), original))
}

/// Dimension to bisect under `strategy`; `gradient` is per input.
pub fn split_dimension(input_box: &InputBox, strategy: SplitStrategy, gradient: &[ConcreteInterval]) -> Result<usize> {
    let widths: Vec<f64> = (0..input_box.dims()).map(|i| input_box.width(i)).collect();
    let widest = argmax(&widths);
    if widths[widest] <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    if strategy == SplitStrategy::Widest {
        return Ok(widest);
    }
    let smear: Vec<f64> = widths
        .iter()
        .zip(gradient)
        .map(|(w, g)| w * g.magnitude())
        .collect();
    let best = argmax(&smear);
    Ok(if smear[best] > 0.0 { best } else { widest })
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn split(input_box: &InputBox, strategy: SplitStrategy, gradient: &[ConcreteInterval]) -> Result<(InputBox, InputBox)> {
    let dim = split_dimension(input_box, strategy, gradient)?;
    Ok(input_box.bisect(dim))
}

/// A subregion's true outputs also lie in its parent's bounds.
fn tighten(own: &[ConcreteInterval], parent: &[ConcreteInterval]) -> Vec<ConcreteInterval> {
    own.iter()
        .zip(parent)
        .map(|(a, p)| {
            let (lo, hi) = (a.lo.max(p.lo), a.hi.min(p.hi));
            if lo <= hi {
                ConcreteInterval { lo, hi }
            } else {
                *a
            }
        })
        .collect()
}

struct Job {
    key: u128,
    depth: usize,
    region: InputBox,
    /// Bounds already proven for the enclosing region.
    parent: Option<Vec<ConcreteInterval>>,
}

struct JobResult {
    key: u128,
    depth: usize,
    region: InputBox,
    output: Vec<ConcreteInterval>,
    raw_output: Vec<ConcreteInterval>,
    verified: bool,
    split: Option<(usize, InputBox, InputBox)>,
    symvars: usize,
    histogram: CaseHistogram,
}

fn analyse(task: &VerificationTask, job: Job) -> JobResult {
    let pass = forward_diff(&task.pair, &job.region, task.mode, task.symvars);
    let output = match &job.parent {
        Some(parent) => tighten(&pass.output, parent),
        None => pass.output.clone(),
    };
    let verified = check_epsilon(&output, task.epsilon);
    let split = if verified || job.depth >= task.max_depth {
        None
    } else {
        let gradient = interval_gradient(&task.pair, &pass.original, &pass.variant).per_input();
        split_dimension(&job.region, task.split, &gradient).ok().map(|dim| {
            let (a, b) = job.region.bisect(dim);
            (dim, a, b)
        })
    };
    JobResult {
        key: job.key,
        depth: job.depth,
        region: job.region,
        output,
        raw_output: pass.output,
        verified,
        split,
        symvars: pass.stats.symvars_introduced,
        histogram: pass.stats.histogram,
    }
}

fn worker(task: &VerificationTask, jobs: Receiver<Job>, results: Sender<JobResult>) {
    for job in jobs {
        if results.send(analyse(task, job)).is_err() {
            break;
        }
    }
}

struct Aggregator {
    output: Vec<ConcreteInterval>,
    leaves: usize,
    analysed: usize,
    max_depth: usize,
    symvars: usize,
    histogram: CaseHistogram,
    timed_out: bool,
    failed: bool,
    unresolved: Vec<(u128, UnresolvedRegion)>,
    nodes: Vec<NodeRecord>,
}

impl Aggregator {
    fn leaf(&mut self, output: &[ConcreteInterval]) {
        self.leaves += 1;
        if self.output.is_empty() {
            self.output = output.to_vec();
        } else {
            for (acc, iv) in self.output.iter_mut().zip(output) {
                *acc = acc.hull(iv);
            }
        }
    }

    fn unresolved(&mut self, key: u128, depth: usize, region: &InputBox, reason: LeafReason) {
        self.failed = true;
        self.unresolved.push((
            key,
            UnresolvedRegion {
                lo: region.lo().to_vec(),
                hi: region.hi().to_vec(),
                depth,
                reason,
            },
        ));
    }
}

pub fn verify(task: &VerificationTask) -> Result<VerificationOutcome> {
    task.validate()?;
    let start = Instant::now();
    let threads = task.threads.max(1);
    let mut agg = Aggregator {
        output: Vec::new(),
        leaves: 0,
        analysed: 0,
        max_depth: 0,
        symvars: 0,
        histogram: CaseHistogram::default(),
        timed_out: false,
        failed: false,
        unresolved: Vec::new(),
        nodes: Vec::new(),
    };

    let (job_tx, job_rx) = unbounded::<Job>();
    let (res_tx, res_rx) = unbounded::<JobResult>();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let (jobs, results) = (job_rx.clone(), res_tx.clone());
            scope.spawn(move || worker(task, jobs, results));
        }
        drop(res_tx);

        let mut queue = VecDeque::from([Job {
            key: 1,
            depth: 0,
            region: task.input_box.clone(),
            parent: None,
        }]);
        let mut in_flight = 0usize;
        loop {
            while let Some(job) = queue.pop_front() {
                let expired = start.elapsed() >= task.timeout;
                if expired || (task.stop_on_failure && agg.failed) {
                    agg.timed_out |= expired;
                    let reason = if expired { LeafReason::Timeout } else { LeafReason::Abandoned };
                    agg.unresolved(job.key, job.depth, &job.region, reason);
                    continue;
                }
                job_tx.send(job).expect("workers alive");
                in_flight += 1;
            }
            if in_flight == 0 {
                break;
            }
            let r = res_rx.recv().expect("workers alive");
            in_flight -= 1;
            agg.analysed += 1;
            agg.max_depth = agg.max_depth.max(r.depth);
            agg.symvars += r.symvars;
            agg.histogram.merge(&r.histogram);
            if task.record_nodes {
                agg.nodes.push(NodeRecord {
                    key: r.key,
                    depth: r.depth,
                    lo: r.region.lo().to_vec(),
                    hi: r.region.hi().to_vec(),
                    output: r.output.clone(),
                    raw_output: r.raw_output.clone(),
                    verified: r.verified,
                    split_dim: r.split.as_ref().map(|s| s.0),
                });
            }
            match r.split {
                _ if r.verified => agg.leaf(&r.output),
                Some((_, a, b)) => {
                    for (key, region) in [(2 * r.key, a), (2 * r.key + 1, b)] {
                        queue.push_back(Job {
                            key,
                            depth: r.depth + 1,
                            region,
                            parent: Some(r.output.clone()),
                        });
                    }
                }
                None => {
                    agg.leaf(&r.output);
                    let reason = if r.depth >= task.max_depth {
                        LeafReason::DepthLimit
                    } else {
                        LeafReason::Unsplittable
                    };
                    agg.unresolved(r.key, r.depth, &r.region, reason);
                }
            }
        }
        drop(job_tx);
    });

    agg.unresolved.sort_by_key(|(k, _)| *k);
    agg.nodes.sort_by_key(|n| n.key);
    Ok(VerificationOutcome {
        status: if agg.failed { Status::Undetermined } else { Status::Verified },
        output: agg.output,
        subregions_explored: agg.leaves,
        regions_analysed: agg.analysed,
        max_depth_reached: agg.max_depth,
        wall_time: start.elapsed(),
        symvars_introduced: agg.symvars,
        case_histogram: agg.histogram,
        timed_out: agg.timed_out,
        unresolved: agg.unresolved.into_iter().map(|(_, u)| u).collect(),
        nodes: agg.nodes,
    })
}
