//! Intermediate symbolic variables standing for the post-ReLU difference of
//! an unstable neuron pair.
//!
//! Every definition in a [`SymVarTable`] is a pair of bound equations over the
//! input variables only. Back-references are removed when a variable is
//! registered, so concretizing any expression needs at most one substitution
//! step per variable.

use crate::error::{Error, Result};
use crate::symexpr::{BoundBlock, Direction, LinExpr, SymInterval};
use ndarray::{s, Array1, ArrayView1};

/// Where a variable came from: hidden layer (0-based) and neuron index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct VarOrigin {
    pub layer: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymVarDef {
    /// `[coeffs | constant]` over the inputs.
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub origin: VarOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymVarTable {
    inputs: usize,
    defs: Vec<SymVarDef>,
}

impl SymVarTable {
    pub fn new(inputs: usize) -> Self {
        Self {
            inputs,
            defs: Vec::new(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    /// Id the next registered variable will receive.
    pub fn next_id(&self) -> usize {
        self.inputs + self.defs.len()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.inputs).filter(|&k| k < self.defs.len())
    }

    pub fn defs(&self) -> &[SymVarDef] {
        &self.defs
    }

    pub fn def(&self, id: usize) -> Option<&SymVarDef> {
        self.index_of(id).map(|k| &self.defs[k])
    }

    /// Definition `dir` of variable `id` as an expression.
    pub fn def_expr(&self, id: usize, dir: Direction) -> Result<LinExpr> {
        let d = self.def(id).ok_or(Error::UnknownVariable(id + 1))?;
        let row = match dir {
            Direction::Lower => &d.lower,
            Direction::Upper => &d.upper,
        };
        Ok(LinExpr::from_parts(row.slice(s![..self.inputs]).to_vec(), row[self.inputs]))
    }

    /// Register a variable with input-only definitions; returns its id.
    pub fn register(&mut self, lower: Array1<f64>, upper: Array1<f64>, origin: VarOrigin) -> usize {
        assert_eq!(lower.len(), self.inputs + 1, "definitions must be input-only");
        assert_eq!(upper.len(), self.inputs + 1, "definitions must be input-only");
        let id = self.next_id();
        self.defs.push(SymVarDef { lower, upper, origin });
        id
    }

    /// Substitute every variable in a block row by the definition that keeps
    /// the row a sound bound in direction `dir`. Returns `[coeffs | constant]`.
    pub(crate) fn eliminate_row(&self, row: ArrayView1<f64>, dir: Direction) -> Array1<f64> {
        let n = self.inputs;
        let mut out = row.slice(s![..n + 1]).to_owned();
        for (k, &c) in row.iter().enumerate().skip(n + 1) {
            if c == 0.0 {
                continue;
            }
            let d = &self.defs[k - n - 1];
            let use_lower = (dir == Direction::Lower) == (c > 0.0);
            out.scaled_add(c, if use_lower { &d.lower } else { &d.upper });
        }
        out
    }
}

/// Replace each intermediate `c * v` in `e` by `c * lb_def(v)` when that keeps
/// the bound sound in direction `dir` (lower with `c > 0`, upper with
/// `c < 0`), and by `c * ub_def(v)` otherwise.
pub fn eliminate_back_refs(e: &LinExpr, dir: Direction, table: &SymVarTable) -> Result<LinExpr> {
    let row = e.to_row(table)?;
    let flat = table.eliminate_row(row.view(), dir);
    let n = table.inputs();
    Ok(LinExpr::from_parts(flat.slice(s![..n]).to_vec(), flat[n]))
}

/// `ceil(sum_k N_k / k)` over hidden layers `k = 1..`.
pub fn compute_budget(per_layer_unstable: &[usize]) -> usize {
    let weighted: f64 = per_layer_unstable
        .iter()
        .enumerate()
        .map(|(k, &n)| n as f64 / (k + 1) as f64)
        .sum();
    // Guard against sums such as 3 * (1/3) landing a hair above an integer.
    (weighted - 1e-9 * weighted.max(1.0)).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    limit: usize,
    used: usize,
    per_layer_unstable: Vec<usize>,
}

impl Budget {
    /// Budget from unstable-pair counts per hidden layer.
    pub fn from_unstable(per_layer_unstable: Vec<usize>) -> Self {
        Self {
            limit: compute_budget(&per_layer_unstable),
            used: 0,
            per_layer_unstable,
        }
    }

    pub fn fixed(limit: usize) -> Self {
        Self {
            limit,
            used: 0,
            per_layer_unstable: Vec::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn per_layer_unstable(&self) -> &[usize] {
        &self.per_layer_unstable
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.limit
    }

    fn take(&mut self) -> bool {
        if self.exhausted() {
            false
        } else {
            self.used += 1;
            true
        }
    }
}

/// Name `delta_post` with a fresh variable `v` and return `[v, v]`. When the
/// budget is exhausted the interval is returned unchanged.
pub fn introduce(
    delta_post: &SymInterval,
    table: &mut SymVarTable,
    budget: &mut Budget,
    origin: VarOrigin,
) -> Result<SymInterval> {
    if !budget.take() {
        return Ok(delta_post.clone());
    }
    let lower = table.eliminate_row(delta_post.lb.to_row(table)?.view(), Direction::Lower);
    let upper = table.eliminate_row(delta_post.ub.to_row(table)?.view(), Direction::Upper);
    let id = table.register(lower, upper, origin);
    Ok(SymInterval::exact(LinExpr::var(table.inputs(), id)))
}

/// Block form of [`introduce`]: row `j` of `post` becomes `[v, v]`. Every
/// block that will later be combined with `post` must be widened by the
/// caller. Returns `false` when the budget is exhausted.
pub(crate) fn introduce_in_block(
    post: &mut BoundBlock,
    j: usize,
    table: &mut SymVarTable,
    budget: &mut Budget,
    origin: VarOrigin,
) -> bool {
    if !budget.take() {
        return false;
    }
    let lower = table.eliminate_row(post.lower.row(j), Direction::Lower);
    let upper = table.eliminate_row(post.upper.row(j), Direction::Upper);
    table.register(lower, upper, origin);
    post.push_var_column();
    let col = post.lower.ncols() - 1;
    for dir in [Direction::Lower, Direction::Upper] {
        let mut row = post.row_mut(dir, j);
        row.fill(0.0);
        row[col] = 1.0;
    }
    true
}
