//! Brute-force ground truth: plain-loop evaluation, sampled bound checks,
//! vertex enumeration for ReLU-difference planes, finite differences and
//! random network pairs.

use crate::absbounds::{AbsPass, Relaxation};
use crate::deltabounds::DiffPass;
use crate::error::{Error, Result};
use crate::model::{InputBox, Layer, Network, NetworkPair};
use crate::symexpr::{concretize_row, BoundBlock, ConcreteInterval, Direction};
use crate::symvars::SymVarTable;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Absolute slack used when comparing a value with a bound, scaled by
/// `1 + |value|`.
pub const SAMPLE_TOLERANCE: f64 = 1e-9;

/// Most corners enumerated by [`sample_check`].
pub const MAX_CORNER_DIMS: usize = 12;

/// Recorded violations are capped; [`SoundnessReport::violation_count`] is not.
pub const MAX_RECORDED_VIOLATIONS: usize = 64;

/// Pre- and post-activation values of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub pre: Vec<Vec<f64>>,
    /// Empty for the output layer.
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

pub fn trace(net: &Network, x: &[f64]) -> Trace {
    let layers = net.layers();
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut h = x.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        let mut z = vec![0.0; layer.outputs()];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = layer.bias[j];
            for (i, hi) in h.iter().enumerate() {
                acc += layer.weights[[i, j]] * hi;
            }
            *zj = acc;
        }
        if k + 1 < layers.len() {
            let a: Vec<f64> = z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
            post.push(a.clone());
            h = a;
        } else {
            post.push(Vec::new());
        }
        pre.push(z);
    }
    Trace { pre, post }
}

pub fn evaluate(net: &Network, x: &[f64]) -> Vec<f64> {
    trace(net, x).output().to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Original,
    Variant,
    Delta,
    /// Definition of an intermediate variable (`layer` is its table index).
    SymVar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    SymbolicLower,
    SymbolicUpper,
    ConcreteLower,
    ConcreteUpper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub x: Vec<f64>,
    pub quantity: Quantity,
    /// 0-based layer; the last layer is the output layer.
    pub layer: usize,
    pub neuron: usize,
    pub stage: Stage,
    pub bound: BoundKind,
    /// How far past the bound the true value was.
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoundnessReport {
    pub samples_tested: usize,
    pub checks: usize,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
    /// Per output, largest `|f'(x) - f(x)|` seen.
    pub max_observed_diff: Vec<f64>,
}

impl SoundnessReport {
    pub fn is_sound(&self) -> bool {
        self.violation_count == 0
    }
}

struct Checker<'a> {
    x: &'a [f64],
    report: SoundnessReport,
}

impl Checker<'_> {
    #[allow(clippy::too_many_arguments)]
    fn check(&mut self, value: f64, lo: f64, hi: f64, symbolic: bool, q: Quantity, layer: usize, neuron: usize, stage: Stage) {
        let slack = SAMPLE_TOLERANCE * (1.0 + value.abs());
        let (lk, hk) = if symbolic {
            (BoundKind::SymbolicLower, BoundKind::SymbolicUpper)
        } else {
            (BoundKind::ConcreteLower, BoundKind::ConcreteUpper)
        };
        self.report.checks += 2;
        for (amount, bound) in [(lo - value, lk), (value - hi, hk)] {
            if amount > slack || amount.is_nan() {
                self.report.violation_count += 1;
                if self.report.violations.len() < MAX_RECORDED_VIOLATIONS {
                    self.report.violations.push(Violation {
                        x: self.x.to_vec(),
                        quantity: q,
                        layer,
                        neuron,
                        stage,
                        bound,
                        amount,
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(&mut self, block: &BoundBlock, concrete: &[ConcreteInterval], values: &[f64], vars: &[f64], q: Quantity, layer: usize, stage: Stage) {
        for (j, v) in values.iter().enumerate() {
            let lo = block.eval_row(Direction::Lower, j, self.x, vars);
            let hi = block.eval_row(Direction::Upper, j, self.x, vars);
            self.check(*v, lo, hi, true, q, layer, j, stage);
            self.check(*v, concrete[j].lo, concrete[j].hi, false, q, layer, j, stage);
        }
    }
}

/// Concrete range of row `j`, without assuming the bounds are ordered.
fn raw_range(b: &BoundBlock, j: usize, input_box: &InputBox, table: &SymVarTable) -> ConcreteInterval {
    ConcreteInterval {
        lo: concretize_row(b.row(Direction::Lower, j), input_box, table, Direction::Lower),
        hi: concretize_row(b.row(Direction::Upper, j), input_box, table, Direction::Upper),
    }
}

/// Concrete ranges of every block in a snapshot, computed once.
struct Concrete {
    pre: Vec<Vec<ConcreteInterval>>,
    post: Vec<Vec<ConcreteInterval>>,
}

fn abs_concrete(pass: &AbsPass, input_box: &InputBox, diff: &DiffPass) -> Concrete {
    let conc = |b: &BoundBlock| (0..b.rows()).map(|j| raw_range(b, j, input_box, &diff.table)).collect::<Vec<_>>();
    Concrete {
        pre: pass.layers.iter().map(|l| conc(&l.pre)).collect(),
        post: pass.layers.iter().map(|l| l.post.as_ref().map(conc).unwrap_or_default()).collect(),
    }
}

fn sample_points(input_box: &InputBox, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = input_box.dims();
    let mut points: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|i| {
                    let (lo, hi) = (input_box.lo()[i], input_box.hi()[i]);
                    if hi > lo {
                        rng.gen_range(lo..=hi)
                    } else {
                        lo
                    }
                })
                .collect()
        })
        .collect();
    if d <= MAX_CORNER_DIMS {
        for mask in 0u32..(1 << d) {
            points.push(
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { input_box.hi()[i] } else { input_box.lo()[i] })
                    .collect(),
            );
        }
    }
    points
}

/// Evaluate both networks at `n` seeded random points plus the box corners
/// and check every bound recorded in `snapshot` against the true values.
/// Intermediate variables take the true value of the delta they name.
pub fn sample_check(pair: &NetworkPair, input_box: &InputBox, snapshot: &DiffPass, n: usize, seed: u64) -> SoundnessReport {
    let hidden = pair.original().hidden_count();
    let c_orig = abs_concrete(&snapshot.original, input_box, snapshot);
    let c_var = abs_concrete(&snapshot.variant, input_box, snapshot);
    let c_delta: Vec<(Vec<ConcreteInterval>, Vec<ConcreteInterval>)> = snapshot
        .layers
        .iter()
        .map(|l| {
            let pre = (0..l.pre.rows()).map(|j| raw_range(&l.pre, j, input_box, &snapshot.table)).collect();
            let post = l
                .post
                .as_ref()
                .map(|b| (0..b.rows()).map(|j| raw_range(b, j, input_box, &snapshot.table)).collect())
                .unwrap_or_default();
            (pre, post)
        })
        .collect();

    let mut report = SoundnessReport {
        samples_tested: 0,
        checks: 0,
        violation_count: 0,
        violations: Vec::new(),
        max_observed_diff: vec![0.0; pair.output_count()],
    };
    for x in sample_points(input_box, n, seed) {
        let tf = trace(pair.original(), &x);
        let tg = trace(pair.variant(), &x);
        let vars: Vec<f64> = snapshot
            .table
            .defs()
            .iter()
            .map(|d| tg.post[d.origin.layer][d.origin.neuron] - tf.post[d.origin.layer][d.origin.neuron])
            .collect();
        let mut ck = Checker { x: &x, report };

        for (pass, t, c, q) in [
            (&snapshot.original, &tf, &c_orig, Quantity::Original),
            (&snapshot.variant, &tg, &c_var, Quantity::Variant),
        ] {
            for (k, layer) in pass.layers.iter().enumerate() {
                ck.block(&layer.pre, &c.pre[k], &t.pre[k], &[], q, k, Stage::Pre);
                if let Some(post) = &layer.post {
                    ck.block(post, &c.post[k], &t.post[k], &[], q, k, Stage::Post);
                }
            }
        }
        for (k, layer) in snapshot.layers.iter().enumerate() {
            let pre: Vec<f64> = tg.pre[k].iter().zip(&tf.pre[k]).map(|(a, b)| a - b).collect();
            ck.block(&layer.pre, &c_delta[k].0, &pre, &vars, Quantity::Delta, k, Stage::Pre);
            if let Some(post_block) = &layer.post {
                let post: Vec<f64> = tg.post[k].iter().zip(&tf.post[k]).map(|(a, b)| a - b).collect();
                ck.block(post_block, &c_delta[k].1, &post, &vars, Quantity::Delta, k, Stage::Post);
            }
        }
        for (j, iv) in snapshot.output.iter().enumerate() {
            let d = tg.pre[hidden][j] - tf.pre[hidden][j];
            ck.check(d, iv.lo, iv.hi, false, Quantity::Delta, hidden, j, Stage::Pre);
            ck.report.max_observed_diff[j] = ck.report.max_observed_diff[j].max(d.abs());
        }
        for (id, def) in snapshot.table.defs().iter().enumerate() {
            let at = |row: &Array1<f64>| {
                let n = x.len();
                row[n] + (0..n).map(|i| row[i] * x[i]).sum::<f64>()
            };
            ck.check(vars[id], at(&def.lower), at(&def.upper), true, Quantity::SymVar, id, 0, Stage::Post);
        }
        report = ck.report;
        report.samples_tested += 1;
    }
    report
}

/// Affine function `a_n * n + a_d * d + c` of a frame coordinate `n` and the
/// difference `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub a_n: f64,
    pub a_d: f64,
    pub c: f64,
}

impl Plane {
    pub fn new(a_n: f64, a_d: f64, c: f64) -> Self {
        Self { a_n, a_d, c }
    }

    pub fn at(&self, n: f64, d: f64) -> f64 {
        self.a_n * n + self.a_d * d + self.c
    }
}

impl From<Relaxation> for Plane {
    fn from(r: Relaxation) -> Self {
        match r {
            Relaxation::Keep => Plane::new(0.0, 1.0, 0.0),
            Relaxation::Zero => Plane::new(0.0, 0.0, 0.0),
            Relaxation::Affine { scale, shift } => Plane::new(0.0, scale, shift),
            Relaxation::Constant(c) => Plane::new(0.0, 0.0, c),
        }
    }
}

/// Which neuron of the pair the frame coordinate is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Coordinate `n`; `z = ReLU(n + d) - ReLU(n)`.
    Original,
    /// Coordinate `n'`; `z = ReLU(n') - ReLU(n' - d)`.
    Variant,
}

impl Frame {
    pub fn z(self, n: f64, d: f64) -> f64 {
        let relu = |v: f64| v.max(0.0);
        match self {
            Frame::Original => relu(n + d) - relu(n),
            Frame::Variant => relu(n) - relu(n - d),
        }
    }

    /// Sign of `d` in the second kink line `n + s * d = 0`.
    fn kink_sign(self) -> f64 {
        match self {
            Frame::Original => 1.0,
            Frame::Variant => -1.0,
        }
    }
}

/// Vertices of the subdivision of `[n_lo, n_hi] x [l, u]` by the two kink
/// lines of `frame`.
pub fn subdivision_vertices(frame: Frame, l: f64, u: f64, n_lo: f64, n_hi: f64) -> Result<Vec<(f64, f64)>> {
    if !(l <= u) || !(n_lo <= n_hi) {
        return Err(Error::EmptyBox);
    }
    let s = frame.kink_sign();
    let in_n = |n: f64| n_lo <= n && n <= n_hi;
    let in_d = |d: f64| l <= d && d <= u;
    let mut v = vec![(n_lo, l), (n_lo, u), (n_hi, l), (n_hi, u)];
    if in_n(0.0) {
        v.push((0.0, l));
        v.push((0.0, u));
    }
    for n in [n_lo, n_hi] {
        let d = -n / s;
        if in_d(d) {
            v.push((n, d));
        }
    }
    for d in [l, u] {
        let n = -s * d;
        if in_n(n) {
            v.push((n, d));
        }
    }
    if in_n(0.0) && in_d(0.0) {
        v.push((0.0, 0.0));
    }
    Ok(v)
}

/// `lower <= z <= upper` at every subdivision vertex, within `tol`.
pub fn plane_vertex_check_in(frame: Frame, l: f64, u: f64, n_lo: f64, n_hi: f64, lower: Plane, upper: Plane, tol: f64) -> Result<bool> {
    Ok(subdivision_vertices(frame, l, u, n_lo, n_hi)?.into_iter().all(|(n, d)| {
        let z = frame.z(n, d);
        lower.at(n, d) <= z + tol && z <= upper.at(n, d) + tol
    }))
}

/// [`plane_vertex_check_in`] in the `(n, d)` frame with tolerance `1e-9`.
pub fn plane_vertex_check(l: f64, u: f64, n_lo: f64, n_hi: f64, lower: Plane, upper: Plane) -> Result<bool> {
    plane_vertex_check_in(Frame::Original, l, u, n_lo, n_hi, lower, upper, 1e-9)
}

/// Central-difference Jacobian of `f'(x) - f(x)`, outputs by inputs.
pub fn fd_gradient(pair: &NetworkPair, x: &[f64], h: f64) -> Array2<f64> {
    let diff = |p: &[f64]| -> Vec<f64> {
        evaluate(pair.variant(), p)
            .iter()
            .zip(evaluate(pair.original(), p))
            .map(|(a, b)| a - b)
            .collect()
    };
    let mut g = Array2::zeros((pair.output_count(), x.len()));
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = diff(&p);
        p[i] = x[i] - h;
        let down = diff(&p);
        p[i] = x[i];
        for j in 0..up.len() {
            g[[j, i]] = (up[j] - down[j]) / (2.0 * h);
        }
    }
    g
}

/// No hidden pre-activation of either network changes sign within `h` of
/// `x` along any axis, so both networks are affine around `x`.
pub fn kink_free(pair: &NetworkPair, x: &[f64], h: f64) -> bool {
    let signs = |net: &Network, p: &[f64]| -> Vec<bool> {
        let t = trace(net, p);
        t.pre[..t.pre.len() - 1].iter().flatten().map(|v| *v > 0.0).collect()
    };
    let base = [signs(pair.original(), x), signs(pair.variant(), x)];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        for step in [h, -h] {
            p[i] = x[i] + step;
            if signs(pair.original(), &p) != base[0] || signs(pair.variant(), &p) != base[1] {
                return false;
            }
        }
        p[i] = x[i];
    }
    true
}

/// Dense network with weights uniform in `[-scale, scale]` and biases in
/// `[-scale / 2, scale / 2]`.
pub fn random_network<R: Rng>(rng: &mut R, inputs: usize, hidden: &[usize], outputs: usize, scale: f64) -> Network {
    let mut sizes = vec![inputs];
    sizes.extend_from_slice(hidden);
    sizes.push(outputs);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let weights = Array2::from_shape_fn((w[0], w[1]), |_| rng.gen_range(-scale..=scale));
            let bias = Array1::from_shape_fn(w[1], |_| rng.gen_range(-scale / 2.0..=scale / 2.0));
            Layer::new(weights, bias)
        })
        .collect();
    Network::new(inputs, layers).expect("well-formed random network")
}

/// Random network and its binary16-truncated copy: 2 to 4 hidden layers of
/// 2 to 8 neurons, 1 to 3 inputs and outputs.
pub fn random_truncated_pair<R: Rng>(rng: &mut R) -> NetworkPair {
    let inputs = rng.gen_range(1..=3);
    let outputs = rng.gen_range(1..=3);
    let depth = rng.gen_range(2..=4);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=8)).collect();
    let f = random_network(rng, inputs, &hidden, outputs, 1.0);
    let g = f.truncate_weights(16).expect("weights within binary16 range");
    NetworkPair::new(f, g).expect("same topology")
}

/// Box with each side drawn inside `[-2, 2]`, widths at least `0.05`.
pub fn random_box<R: Rng>(rng: &mut R, dims: usize) -> InputBox {
    let mut lo = Vec::with_capacity(dims);
    let mut hi = Vec::with_capacity(dims);
    for _ in 0..dims {
        let a = rng.gen_range(-2.0..1.95);
        let b = rng.gen_range(a + 0.05..=2.0);
        lo.push(a);
        hi.push(b);
    }
    InputBox::new(lo, hi).expect("ordered bounds")
}

/// Truncated pair and box drawn from `seed`.
pub fn random_task(seed: u64) -> (NetworkPair, InputBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = random_truncated_pair(&mut rng);
    let b = random_box(&mut rng, pair.input_count());
    (pair, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltabounds::{forward_diff, Mode, SymVarOptions};

    #[test]
    fn trace_matches_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pair = random_truncated_pair(&mut rng);
            let b = random_box(&mut rng, pair.input_count());
            for x in sample_points(&b, 10, 9) {
                let a = evaluate(pair.original(), &x);
                let m = pair.original().evaluate(&x).unwrap();
                for (p, q) in a.iter().zip(&m) {
                    assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
                }
            }
        }
    }

    #[test]
    fn corrupted_snapshot_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random_truncated_pair(&mut rng);
        let b = random_box(&mut rng, pair.input_count());
        let mut snap = forward_diff(&pair, &b, Mode::Full, SymVarOptions::default());
        assert!(sample_check(&pair, &b, &snap, 200, 1).is_sound());
        let out = snap.layers.last_mut().unwrap();
        let n = out.pre.inputs();
        out.pre.upper[[0, n]] = -1e6;
        assert!(!sample_check(&pair, &b, &snap, 200, 1).is_sound());
    }

    #[test]
    fn identical_networks_have_no_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_network(&mut rng, 2, &[3, 3], 2, 1.0);
        let pair = NetworkPair::new(f.clone(), f).unwrap();
        let b = InputBox::uniform(2, -1.0, 1.0).unwrap();
        let snap = forward_diff(&pair, &b, Mode::Full, SymVarOptions::default());
        let r = sample_check(&pair, &b, &snap, 100, 2);
        assert!(r.is_sound());
        assert_eq!(r.max_observed_diff, vec![0.0, 0.0]);
    }

    #[test]
    fn example_planes_by_vertices() {
        let upper = Plane::new(0.0, 0.5, 0.2);
        let lower = Plane::new(0.0, 0.5, -0.2);
        assert!(plane_vertex_check(-0.4, 0.4, -7.6, 7.6, lower, upper).unwrap());
        let low = Plane::new(0.0, 0.5, 0.19);
        assert!(!plane_vertex_check(-0.4, 0.4, -7.6, 7.6, lower, low).unwrap());
        let zero = Plane::new(0.0, 0.0, 0.0);
        assert!(plane_vertex_check(-1.0, -0.5, -3.0, 3.0, Plane::new(0.0, 1.0, 0.0), zero).unwrap());
        assert!(matches!(plane_vertex_check(1.0, 0.0, 0.0, 1.0, zero, zero), Err(Error::EmptyBox)));
    }

    #[test]
    fn vertices_include_kink_crossing() {
        let v = subdivision_vertices(Frame::Original, -1.0, 1.0, -1.0, 1.0).unwrap();
        assert!(v.contains(&(0.0, 0.0)));
        assert!(v.contains(&(1.0, -1.0)));
        assert!(v.contains(&(-1.0, 1.0)));
        let w = subdivision_vertices(Frame::Variant, -1.0, 1.0, -1.0, 1.0).unwrap();
        assert!(w.contains(&(1.0, 1.0)));
    }

    #[test]
    fn finite_difference_on_linear_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = random_truncated_pair(&mut rng);
        let x = vec![0.1; pair.input_count()];
        let g = fd_gradient(&pair, &x, 1e-4);
        assert_eq!(g.dim(), (pair.output_count(), pair.input_count()));
    }
}
