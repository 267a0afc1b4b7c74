//! Single-network symbolic bound propagation.
//!
//! Each hidden neuron gets symbolic pre- and post-ReLU intervals. Unstable
//! neurons are relaxed per equation: the upper equation by the chord through
//! `(l, 0)` and `(u, u)`, the lower equation by the line through the origin
//! with the same slope, each with the concrete range `(l, u)` of its own
//! equation.

use crate::model::{InputBox, Network};
use crate::symexpr::{BoundBlock, Corners, Direction, LinExpr, SymInterval, TOLERANCE};
use crate::symvars::SymVarTable;
use ndarray::ArrayViewMut1;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronState {
    Active,
    Inactive,
    Unstable,
}

impl NeuronState {
    /// Active iff `LB_L >= 0`, inactive iff `UB_U <= 0`.
    pub fn classify(corners: &Corners) -> Self {
        if corners.lb_lo >= 0.0 {
            NeuronState::Active
        } else if corners.ub_hi <= 0.0 {
            NeuronState::Inactive
        } else {
            NeuronState::Unstable
        }
    }

    pub fn is_stable(self) -> bool {
        self != NeuronState::Unstable
    }
}

/// Affine post-processing of one bound equation `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relaxation {
    Keep,
    Zero,
    /// `scale * y + shift`.
    Affine { scale: f64, shift: f64 },
    Constant(f64),
}

impl Relaxation {
    pub fn apply(&self, e: &LinExpr) -> LinExpr {
        match *self {
            Relaxation::Keep => e.clone(),
            Relaxation::Zero => LinExpr::zero(e.inputs()),
            Relaxation::Affine { scale, shift } => {
                let mut out = e.scale(scale);
                out.constant += shift;
                out
            }
            Relaxation::Constant(c) => LinExpr::constant(e.inputs(), c),
        }
    }

    /// Same as [`Relaxation::apply`] on a block row whose constant sits in
    /// column `const_col`.
    pub(crate) fn apply_row(&self, mut row: ArrayViewMut1<f64>, const_col: usize) {
        match *self {
            Relaxation::Keep => {}
            Relaxation::Zero => row.fill(0.0),
            Relaxation::Affine { scale, shift } => {
                row.mapv_inplace(|v| v * scale);
                row[const_col] += shift;
            }
            Relaxation::Constant(c) => {
                row.fill(0.0);
                row[const_col] = c;
            }
        }
    }

    /// Value of the relaxed equation when the original evaluates to `y`.
    pub fn at(&self, y: f64) -> f64 {
        match *self {
            Relaxation::Keep => y,
            Relaxation::Zero => 0.0,
            Relaxation::Affine { scale, shift } => scale * y + shift,
            Relaxation::Constant(c) => c,
        }
    }
}

/// Upper equation with concrete range `(l, u)`.
fn relax_upper(l: f64, u: f64) -> Relaxation {
    if l >= 0.0 {
        Relaxation::Keep
    } else if u <= 0.0 {
        Relaxation::Zero
    } else if u - l < TOLERANCE {
        Relaxation::Constant(u)
    } else {
        let scale = u / (u - l);
        Relaxation::Affine { scale, shift: -l * scale }
    }
}

/// Lower equation with concrete range `(l, u)`.
fn relax_lower(l: f64, u: f64) -> Relaxation {
    if l >= 0.0 {
        Relaxation::Keep
    } else if u <= 0.0 || u - l < TOLERANCE {
        Relaxation::Zero
    } else {
        Relaxation::Affine { scale: u / (u - l), shift: 0.0 }
    }
}

/// Relaxations for (lower, upper) equations of a neuron.
pub fn relu_relaxations(corners: &Corners) -> (NeuronState, Relaxation, Relaxation) {
    let state = NeuronState::classify(corners);
    match state {
        NeuronState::Active => (state, Relaxation::Keep, Relaxation::Keep),
        NeuronState::Inactive => (state, Relaxation::Zero, Relaxation::Zero),
        NeuronState::Unstable => (
            state,
            relax_lower(corners.lb_lo, corners.lb_hi),
            relax_upper(corners.ub_lo, corners.ub_hi),
        ),
    }
}

/// ReLU relaxation of one neuron given sound corners of its pre-activation.
pub fn relu_single(pre: &SymInterval, corners: &Corners) -> (SymInterval, NeuronState) {
    let (state, lower, upper) = relu_relaxations(corners);
    (SymInterval::new(lower.apply(&pre.lb), upper.apply(&pre.ub)), state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronAbs {
    pub pre: SymInterval,
    pub post: SymInterval,
    pub pre_corners: Corners,
    pub state: NeuronState,
}

#[derive(Debug, Clone)]
pub struct AbsLayer {
    pub pre: BoundBlock,
    /// `None` for the output layer.
    pub post: Option<BoundBlock>,
    pub corners: Vec<Corners>,
    /// Empty for the output layer.
    pub states: Vec<NeuronState>,
}

/// Result of one single-network pass; the last layer is the output layer.
#[derive(Debug, Clone)]
pub struct AbsPass {
    pub layers: Vec<AbsLayer>,
}

impl AbsPass {
    pub fn hidden(&self) -> &[AbsLayer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output(&self) -> &AbsLayer {
        self.layers.last().expect("at least one layer")
    }

    /// Hidden neuron `j` of hidden layer `k` (both 0-based).
    pub fn neuron(&self, k: usize, j: usize) -> NeuronAbs {
        let layer = &self.hidden()[k];
        NeuronAbs {
            pre: layer.pre.interval(j),
            post: layer.post.as_ref().expect("hidden layer").interval(j),
            pre_corners: layer.corners[j],
            state: layer.states[j],
        }
    }

    pub fn unstable_count(&self, k: usize) -> usize {
        self.hidden()[k]
            .states
            .iter()
            .filter(|s| **s == NeuronState::Unstable)
            .count()
    }
}

pub fn forward_abs(net: &Network, input_box: &InputBox) -> AbsPass {
    let n = net.input_count();
    let table = SymVarTable::new(n);
    let last = net.layers().len() - 1;
    let mut current = BoundBlock::identity(n);
    let mut layers = Vec::with_capacity(net.layers().len());
    for (k, layer) in net.layers().iter().enumerate() {
        let pre = current.affine(&layer.weights, Some(&layer.bias));
        let corners = pre.all_corners(input_box, &table);
        if k == last {
            layers.push(AbsLayer {
                pre,
                post: None,
                corners,
                states: Vec::new(),
            });
            break;
        }
        let mut post = pre.clone();
        let mut states = Vec::with_capacity(corners.len());
        for (j, c) in corners.iter().enumerate() {
            let (state, lower, upper) = relu_relaxations(c);
            lower.apply_row(post.row_mut(Direction::Lower, j), n);
            upper.apply_row(post.row_mut(Direction::Upper, j), n);
            states.push(state);
        }
        current = post.clone();
        layers.push(AbsLayer {
            pre,
            post: Some(post),
            corners,
            states,
        });
    }
    AbsPass { layers }
}
