//! Linear symbolic expressions over the input variables and intermediate
//! variables, symbolic intervals, and their concretization.
//!
//! Two representations coexist. [`LinExpr`] is the standalone value type with
//! dense input coefficients and sparse intermediate coefficients. Layer passes
//! use [`BoundBlock`], which stores a whole layer of lower and upper equations
//! as dense matrices so that affine transforms become matrix products.
//!
//! Block column layout: `[x_1 .. x_n | constant | v_0 .. v_{V-1}]`, where
//! `v_k` is the intermediate variable with id `n + k` in the [`SymVarTable`].

use crate::error::{Error, Result};
use crate::model::InputBox;
use crate::symvars::SymVarTable;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Absolute tolerance for internal bound comparisons.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Upper,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Lower => Direction::Upper,
            Direction::Upper => Direction::Lower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcreteInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ConcreteInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi || (lo - hi).abs() <= TOLERANCE, "[{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Largest absolute value in the interval.
    pub fn magnitude(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        self.lo - tol <= v && v <= self.hi + tol
    }

    pub fn hull(&self, other: &ConcreteInterval) -> ConcreteInterval {
        ConcreteInterval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn add(&self, other: &ConcreteInterval) -> ConcreteInterval {
        ConcreteInterval {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    pub fn sub(&self, other: &ConcreteInterval) -> ConcreteInterval {
        ConcreteInterval {
            lo: self.lo - other.hi,
            hi: self.hi - other.lo,
        }
    }

    pub fn scale(&self, c: f64) -> ConcreteInterval {
        if c >= 0.0 {
            ConcreteInterval { lo: c * self.lo, hi: c * self.hi }
        } else {
            ConcreteInterval { lo: c * self.hi, hi: c * self.lo }
        }
    }

    /// `{|v| : v in self}`.
    pub fn abs(&self) -> ConcreteInterval {
        if self.lo >= 0.0 {
            *self
        } else if self.hi <= 0.0 {
            ConcreteInterval { lo: -self.hi, hi: -self.lo }
        } else {
            ConcreteInterval { lo: 0.0, hi: self.magnitude() }
        }
    }
}

/// The four concretizations of a symbolic interval: lower and upper extremes
/// of the upper equation, then of the lower equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub ub_lo: f64,
    pub ub_hi: f64,
    pub lb_lo: f64,
    pub lb_hi: f64,
}

impl Corners {
    /// `[LB_L, UB_U]`, the concrete range of the bounded quantity.
    pub fn range(&self) -> ConcreteInterval {
        ConcreteInterval::new(self.lb_lo, self.ub_hi)
    }
}

/// `constant + sum_i input_coeffs[i] * x_i + sum_v sym_coeffs[v] * v`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinExpr {
    pub input_coeffs: Vec<f64>,
    pub sym_coeffs: BTreeMap<usize, f64>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero(inputs: usize) -> Self {
        Self {
            input_coeffs: vec![0.0; inputs],
            sym_coeffs: BTreeMap::new(),
            constant: 0.0,
        }
    }

    pub fn constant(inputs: usize, c: f64) -> Self {
        Self {
            constant: c,
            ..Self::zero(inputs)
        }
    }

    /// The input variable `x_i` (0-based).
    pub fn input(inputs: usize, i: usize) -> Self {
        let mut e = Self::zero(inputs);
        e.input_coeffs[i] = 1.0;
        e
    }

    /// The intermediate variable with the given id.
    pub fn var(inputs: usize, id: usize) -> Self {
        let mut e = Self::zero(inputs);
        e.sym_coeffs.insert(id, 1.0);
        e
    }

    pub fn from_parts(input_coeffs: Vec<f64>, constant: f64) -> Self {
        Self {
            input_coeffs,
            sym_coeffs: BTreeMap::new(),
            constant,
        }
    }

    pub fn inputs(&self) -> usize {
        self.input_coeffs.len()
    }

    pub fn has_intermediates(&self) -> bool {
        self.sym_coeffs.values().any(|&c| c != 0.0)
    }

    pub fn add(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        for (a, b) in out.input_coeffs.iter_mut().zip(&other.input_coeffs) {
            *a += b;
        }
        for (&id, &c) in &other.sym_coeffs {
            *out.sym_coeffs.entry(id).or_insert(0.0) += c;
        }
        out.constant += other.constant;
        out
    }

    pub fn scale(&self, c: f64) -> LinExpr {
        LinExpr {
            input_coeffs: self.input_coeffs.iter().map(|v| v * c).collect(),
            sym_coeffs: self.sym_coeffs.iter().map(|(&id, v)| (id, v * c)).collect(),
            constant: self.constant * c,
        }
    }

    pub fn sub(&self, other: &LinExpr) -> LinExpr {
        self.add(&other.scale(-1.0))
    }

    /// Exact affine evaluation at an input point and intermediate valuation.
    pub fn eval(&self, x: &[f64], sym_values: &BTreeMap<usize, f64>) -> Result<f64> {
        if x.len() != self.inputs() {
            return Err(Error::Dimension {
                expected: self.inputs(),
                actual: x.len(),
            });
        }
        let mut acc = self.constant;
        for (c, v) in self.input_coeffs.iter().zip(x) {
            acc += c * v;
        }
        for (&id, &c) in &self.sym_coeffs {
            if c != 0.0 {
                acc += c * sym_values.get(&id).ok_or(Error::MissingValue(id + 1))?;
            }
        }
        Ok(acc)
    }

    /// Sound extreme of the expression over `input_box`, with each
    /// intermediate variable replaced by the table definition that bounds it
    /// in the requested direction before the box corners are taken.
    pub fn concretize(&self, input_box: &InputBox, table: &SymVarTable, dir: Direction) -> Result<f64> {
        let row = self.to_row(table)?;
        Ok(concretize_row(row.view(), input_box, table, dir))
    }

    /// Dense block row for the current table size.
    pub(crate) fn to_row(&self, table: &SymVarTable) -> Result<Array1<f64>> {
        let n = self.inputs();
        let mut row = Array1::zeros(n + 1 + table.len());
        for (i, c) in self.input_coeffs.iter().enumerate() {
            row[i] = *c;
        }
        row[n] = self.constant;
        for (&id, &c) in &self.sym_coeffs {
            let k = table.index_of(id).ok_or(Error::UnknownVariable(id + 1))?;
            row[n + 1 + k] += c;
        }
        Ok(row)
    }

    pub(crate) fn from_row(row: ArrayView1<f64>, inputs: usize) -> LinExpr {
        let mut sym_coeffs = BTreeMap::new();
        for (k, &c) in row.iter().enumerate().skip(inputs + 1) {
            if c != 0.0 {
                sym_coeffs.insert(inputs + (k - inputs - 1), c);
            }
        }
        LinExpr {
            input_coeffs: row.slice(s![..inputs]).to_vec(),
            sym_coeffs,
            constant: row[inputs],
        }
    }
}

/// Terms with zero coefficients are omitted; variables print as `x{id+1}`.
impl fmt::Display for LinExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms = self
            .input_coeffs
            .iter()
            .enumerate()
            .chain(self.sym_coeffs.iter().map(|(id, c)| (*id, c)))
            .filter(|(_, c)| **c != 0.0);
        let mut first = true;
        for (id, c) in terms {
            let sign = if *c < 0.0 { "-" } else { "+" };
            match (first, *c < 0.0) {
                (true, false) => write!(f, "{}*x{}", c, id + 1)?,
                (true, true) => write!(f, "-{}*x{}", -c, id + 1)?,
                _ => write!(f, " {sign} {}*x{}", c.abs(), id + 1)?,
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant != 0.0 {
            let sign = if self.constant < 0.0 { "-" } else { "+" };
            write!(f, " {sign} {}", self.constant.abs())
        } else {
            Ok(())
        }
    }
}

/// Corner formula over the box for an input-only row `[coeffs | constant]`.
pub(crate) fn box_extreme(coeffs: ArrayView1<f64>, constant: f64, input_box: &InputBox, dir: Direction) -> f64 {
    let mut acc = constant;
    for ((c, lo), hi) in coeffs.iter().zip(input_box.lo()).zip(input_box.hi()) {
        let (a, b) = (c * lo, c * hi);
        acc += match dir {
            Direction::Upper => a.max(b),
            Direction::Lower => a.min(b),
        };
    }
    acc
}

/// Concretize a block row (see module docs for the layout).
pub(crate) fn concretize_row(row: ArrayView1<f64>, input_box: &InputBox, table: &SymVarTable, dir: Direction) -> f64 {
    let n = input_box.dims();
    if row.len() == n + 1 {
        return box_extreme(row.slice(s![..n]), row[n], input_box, dir);
    }
    let flat = table.eliminate_row(row, dir);
    box_extreme(flat.slice(s![..n]), flat[n], input_box, dir)
}

/// A lower and an upper bound equation for one quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymInterval {
    pub lb: LinExpr,
    pub ub: LinExpr,
}

impl SymInterval {
    pub fn new(lb: LinExpr, ub: LinExpr) -> Self {
        Self { lb, ub }
    }

    /// `[e, e]`.
    pub fn exact(e: LinExpr) -> Self {
        Self { lb: e.clone(), ub: e }
    }

    pub fn zero(inputs: usize) -> Self {
        Self::exact(LinExpr::zero(inputs))
    }

    pub fn add(&self, other: &SymInterval) -> SymInterval {
        SymInterval {
            lb: self.lb.add(&other.lb),
            ub: self.ub.add(&other.ub),
        }
    }

    /// Interval subtraction `[a.lb - b.ub, a.ub - b.lb]`.
    pub fn sub(&self, other: &SymInterval) -> SymInterval {
        SymInterval {
            lb: self.lb.sub(&other.ub),
            ub: self.ub.sub(&other.lb),
        }
    }

    pub fn scale(&self, c: f64) -> SymInterval {
        if c >= 0.0 {
            SymInterval {
                lb: self.lb.scale(c),
                ub: self.ub.scale(c),
            }
        } else {
            SymInterval {
                lb: self.ub.scale(c),
                ub: self.lb.scale(c),
            }
        }
    }

    pub fn corners(&self, input_box: &InputBox, table: &SymVarTable) -> Result<Corners> {
        Ok(Corners {
            ub_lo: self.ub.concretize(input_box, table, Direction::Lower)?,
            ub_hi: self.ub.concretize(input_box, table, Direction::Upper)?,
            lb_lo: self.lb.concretize(input_box, table, Direction::Lower)?,
            lb_hi: self.lb.concretize(input_box, table, Direction::Upper)?,
        })
    }

    /// `[LB_L, UB_U]`.
    pub fn concretize(&self, input_box: &InputBox, table: &SymVarTable) -> Result<ConcreteInterval> {
        Ok(ConcreteInterval::new(
            self.lb.concretize(input_box, table, Direction::Lower)?,
            self.ub.concretize(input_box, table, Direction::Upper)?,
        ))
    }
}

/// One layer of symbolic intervals stored as dense coefficient matrices,
/// one row per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundBlock {
    inputs: usize,
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl BoundBlock {
    pub fn zeros(inputs: usize, rows: usize, vars: usize) -> Self {
        Self {
            inputs,
            lower: Array2::zeros((rows, inputs + 1 + vars)),
            upper: Array2::zeros((rows, inputs + 1 + vars)),
        }
    }

    /// `[x_i, x_i]` for every input.
    pub fn identity(inputs: usize) -> Self {
        let mut m = Array2::zeros((inputs, inputs + 1));
        for i in 0..inputs {
            m[[i, i]] = 1.0;
        }
        Self {
            inputs,
            lower: m.clone(),
            upper: m,
        }
    }

    pub fn from_intervals(inputs: usize, intervals: &[SymInterval], table: &SymVarTable) -> Result<Self> {
        let mut block = Self::zeros(inputs, intervals.len(), table.len());
        for (j, iv) in intervals.iter().enumerate() {
            block.lower.row_mut(j).assign(&iv.lb.to_row(table)?);
            block.upper.row_mut(j).assign(&iv.ub.to_row(table)?);
        }
        Ok(block)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn rows(&self) -> usize {
        self.lower.nrows()
    }

    pub fn var_count(&self) -> usize {
        self.lower.ncols() - self.inputs - 1
    }

    pub fn interval(&self, j: usize) -> SymInterval {
        SymInterval {
            lb: LinExpr::from_row(self.lower.row(j), self.inputs),
            ub: LinExpr::from_row(self.upper.row(j), self.inputs),
        }
    }

    pub fn row(&self, dir: Direction, j: usize) -> ArrayView1<'_, f64> {
        match dir {
            Direction::Lower => self.lower.row(j),
            Direction::Upper => self.upper.row(j),
        }
    }

    /// Affine image `weights^T . self + bias` under interval scaling: positive
    /// weights keep bound sides, negative weights swap them.
    pub fn affine(&self, weights: &Array2<f64>, bias: Option<&Array1<f64>>) -> BoundBlock {
        let pos = weights.mapv(|w| w.max(0.0)).reversed_axes();
        let neg = weights.mapv(|w| w.min(0.0)).reversed_axes();
        let mut lower = pos.dot(&self.lower) + neg.dot(&self.upper);
        let mut upper = pos.dot(&self.upper) + neg.dot(&self.lower);
        if let Some(b) = bias {
            let n = self.inputs;
            lower.column_mut(n).scaled_add(1.0, b);
            upper.column_mut(n).scaled_add(1.0, b);
        }
        BoundBlock {
            inputs: self.inputs,
            lower,
            upper,
        }
    }

    /// Add a block whose columns are a prefix of ours (fewer variables).
    pub fn add_prefix(&mut self, other: &BoundBlock) {
        let cols = other.lower.ncols();
        debug_assert!(cols <= self.lower.ncols());
        self.lower.slice_mut(s![.., ..cols]).scaled_add(1.0, &other.lower);
        self.upper.slice_mut(s![.., ..cols]).scaled_add(1.0, &other.upper);
    }

    /// Interval subtraction `self - other`; the result has the wider layout.
    pub fn sub(&self, other: &BoundBlock) -> BoundBlock {
        let cols = self.lower.ncols().max(other.lower.ncols());
        let mut out = BoundBlock::zeros(self.inputs, self.rows(), cols - self.inputs - 1);
        let (a, b) = (self.lower.ncols(), other.lower.ncols());
        out.lower.slice_mut(s![.., ..a]).assign(&self.lower);
        out.upper.slice_mut(s![.., ..a]).assign(&self.upper);
        out.lower.slice_mut(s![.., ..b]).scaled_add(-1.0, &other.upper);
        out.upper.slice_mut(s![.., ..b]).scaled_add(-1.0, &other.lower);
        out
    }

    /// Append one zero column for a newly registered variable.
    pub fn push_var_column(&mut self) {
        let z = Array1::<f64>::zeros(self.rows());
        self.lower.push_column(z.view()).expect("row count matches");
        self.upper.push_column(z.view()).expect("row count matches");
    }

    /// Widen to `vars` intermediate columns.
    pub fn pad_vars(&self, vars: usize) -> BoundBlock {
        let have = self.var_count();
        if have >= vars {
            return self.clone();
        }
        let mut out = BoundBlock::zeros(self.inputs, self.rows(), vars);
        let cols = self.lower.ncols();
        out.lower.slice_mut(s![.., ..cols]).assign(&self.lower);
        out.upper.slice_mut(s![.., ..cols]).assign(&self.upper);
        out
    }

    pub fn corners(&self, j: usize, input_box: &InputBox, table: &SymVarTable) -> Corners {
        Corners {
            ub_lo: concretize_row(self.upper.row(j), input_box, table, Direction::Lower),
            ub_hi: concretize_row(self.upper.row(j), input_box, table, Direction::Upper),
            lb_lo: concretize_row(self.lower.row(j), input_box, table, Direction::Lower),
            lb_hi: concretize_row(self.lower.row(j), input_box, table, Direction::Upper),
        }
    }

    pub fn all_corners(&self, input_box: &InputBox, table: &SymVarTable) -> Vec<Corners> {
        (0..self.rows()).map(|j| self.corners(j, input_box, table)).collect()
    }

    pub fn concretize(&self, j: usize, input_box: &InputBox, table: &SymVarTable) -> ConcreteInterval {
        ConcreteInterval::new(
            concretize_row(self.lower.row(j), input_box, table, Direction::Lower),
            concretize_row(self.upper.row(j), input_box, table, Direction::Upper),
        )
    }

    /// Evaluate bound `dir` of neuron `j` at `x` with intermediate values
    /// `vars` (indexed by table position).
    pub fn eval_row(&self, dir: Direction, j: usize, x: &[f64], vars: &[f64]) -> f64 {
        let row = self.row(dir, j);
        let n = self.inputs;
        let mut acc = row[n];
        for i in 0..n {
            acc += row[i] * x[i];
        }
        for (k, v) in vars.iter().enumerate().take(self.var_count()) {
            acc += row[n + 1 + k] * v;
        }
        acc
    }

    pub(crate) fn row_mut(&mut self, dir: Direction, j: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        match dir {
            Direction::Lower => self.lower.row_mut(j),
            Direction::Upper => self.upper.row_mut(j),
        }
    }

    /// Rows `rows` only, as a new block.
    pub fn select(&self, rows: &[usize]) -> BoundBlock {
        BoundBlock {
            inputs: self.inputs,
            lower: self.lower.select(Axis(0), rows),
            upper: self.upper.select(Axis(0), rows),
        }
    }
}
