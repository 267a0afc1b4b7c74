//! Differential forward pass: symbolic intervals on `n' - n` for every
//! neuron pair, relaxed through the ReLU pair by bounding planes of
//! `z = ReLU(n + d) - ReLU(n)`.
//!
//! Rule order per direction is first-match:
//!
//! | upper (`l, u` = corners of the upper equation) | lower (`l, u` = corners of the lower equation) |
//! |---|---|
//! | `n'` inactive: `0` | `n` inactive: `0` |
//! | `n'` active: keep | `n` active: keep |
//! | `n` active: upper hull of `max(y, -LB_L(n))` | `n'` active: lower hull of `min(y, LB_L(n'))` |
//! | `l >= 0`: keep; `u <= 0`: `0`; else chord | `u <= 0`: keep; `l >= 0`: `0`; else chord |

use crate::absbounds::{forward_abs, AbsPass, NeuronAbs, NeuronState, Relaxation};
use crate::model::{InputBox, NetworkPair};
use crate::symexpr::{BoundBlock, ConcreteInterval, Corners, Direction, SymInterval, TOLERANCE};
use crate::symvars::{introduce_in_block, Budget, SymVarTable, VarOrigin};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Bound each network separately and subtract at the output.
    Naive,
    /// Difference intervals with horizontal planes for unstable pairs.
    Concretize,
    ConvexOnly,
    SymvarsOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Naive,
        Mode::Concretize,
        Mode::ConvexOnly,
        Mode::SymvarsOnly,
        Mode::Full,
    ];

    pub fn uses_convex(self) -> bool {
        matches!(self, Mode::ConvexOnly | Mode::Full)
    }

    pub fn uses_symvars(self) -> bool {
        matches!(self, Mode::SymvarsOnly | Mode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Concretize => "concretize",
            Mode::ConvexOnly => "convex-only",
            Mode::SymvarsOnly => "symvars-only",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-").to_ascii_lowercase();
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| format!("unknown mode '{s}' (expected naive, concretize, convex-only, symvars-only or full)"))
    }
}

/// Which bounding rule produced one side of a post-ReLU difference interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// The paired neuron is inactive, so the difference is one-signed.
    PairInactive,
    /// The paired neuron is active; the pre-ReLU bound carries over.
    PairActive,
    /// Plane through the paired neuron's concrete bound.
    Tightened,
    PassThrough,
    Zero,
    /// General-case tilted plane.
    Chord,
    /// Concrete bound replacing the equation.
    Horizontal,
    /// Straddling range narrower than the tolerance; concrete bound used.
    Degenerate,
    /// Naive mode: difference of the two single-network intervals.
    Subtraction,
}

impl Rule {
    /// Whether the rule loses precision relative to the pre-ReLU equation.
    pub fn approximates(self) -> bool {
        matches!(
            self,
            Rule::Tightened | Rule::Chord | Rule::Horizontal | Rule::Degenerate
        )
    }
}

/// Per-direction rule usage counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseHistogram {
    pub upper: BTreeMap<Rule, usize>,
    pub lower: BTreeMap<Rule, usize>,
}

impl CaseHistogram {
    pub fn record(&mut self, dir: Direction, rule: Rule) {
        let map = match dir {
            Direction::Lower => &mut self.lower,
            Direction::Upper => &mut self.upper,
        };
        *map.entry(rule).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &CaseHistogram) {
        for (k, v) in &other.upper {
            *self.upper.entry(*k).or_insert(0) += v;
        }
        for (k, v) in &other.lower {
            *self.lower.entry(*k).or_insert(0) += v;
        }
    }

    pub fn count(&self, dir: Direction, rule: Rule) -> usize {
        let map = match dir {
            Direction::Lower => &self.lower,
            Direction::Upper => &self.upper,
        };
        map.get(&rule).copied().unwrap_or(0)
    }
}

/// What the rules need to know about one neuron of the pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronFacts {
    pub state: NeuronState,
    /// `LB_L` of the neuron's pre-activation interval.
    pub lb_lo: f64,
}

impl NeuronFacts {
    pub fn new(state: NeuronState, lb_lo: f64) -> Self {
        Self { state, lb_lo }
    }

    fn of(pass: &AbsPass, k: usize, j: usize) -> Self {
        let layer = &pass.hidden()[k];
        Self::new(layer.states[j], layer.corners[j].lb_lo)
    }
}

impl From<&NeuronAbs> for NeuronFacts {
    fn from(n: &NeuronAbs) -> Self {
        Self::new(n.state, n.pre_corners.lb_lo)
    }
}

/// A chosen rule and the transformation it applies to the pre-ReLU equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub rule: Rule,
    pub relaxation: Relaxation,
}

impl Choice {
    fn new(rule: Rule, relaxation: Relaxation) -> Self {
        Self { rule, relaxation }
    }
}

fn convex_plane(scale: f64, l: f64, anchor: f64) -> Relaxation {
    // scale * (y - l) + anchor
    Relaxation::Affine {
        scale,
        shift: anchor - l * scale,
    }
}

/// Upper-bound rule for the difference of a neuron pair, where `(l, u)` are
/// `(UB_L, UB_U)` of the pre-ReLU difference interval.
pub fn upper_choice(l: f64, u: f64, n: NeuronFacts, n_prime: NeuronFacts, mode: Mode) -> Choice {
    match n_prime.state {
        NeuronState::Inactive => return Choice::new(Rule::PairInactive, Relaxation::Zero),
        NeuronState::Active => return Choice::new(Rule::PairActive, Relaxation::Keep),
        NeuronState::Unstable => {}
    }
    if mode.uses_convex() && n.state == NeuronState::Active {
        // z = max(d, -n) <= max(y, floor)
        let floor = -n.lb_lo;
        return if floor <= l {
            Choice::new(Rule::PassThrough, Relaxation::Keep)
        } else if floor >= u {
            Choice::new(Rule::Tightened, Relaxation::Constant(floor))
        } else if u - l < TOLERANCE {
            Choice::new(Rule::Degenerate, Relaxation::Constant(u))
        } else {
            Choice::new(Rule::Tightened, convex_plane((u - floor) / (u - l), l, floor))
        };
    }
    if l >= 0.0 {
        Choice::new(Rule::PassThrough, Relaxation::Keep)
    } else if u <= 0.0 {
        Choice::new(Rule::Zero, Relaxation::Zero)
    } else if u - l < TOLERANCE {
        Choice::new(Rule::Degenerate, Relaxation::Constant(u))
    } else if mode.uses_convex() {
        Choice::new(Rule::Chord, convex_plane(u / (u - l), l, 0.0))
    } else {
        Choice::new(Rule::Horizontal, Relaxation::Constant(u))
    }
}

/// Lower-bound rule, where `(l, u)` are `(LB_L, LB_U)` of the pre-ReLU
/// difference interval.
pub fn lower_choice(l: f64, u: f64, n: NeuronFacts, n_prime: NeuronFacts, mode: Mode) -> Choice {
    match n.state {
        NeuronState::Inactive => return Choice::new(Rule::PairInactive, Relaxation::Zero),
        NeuronState::Active => return Choice::new(Rule::PairActive, Relaxation::Keep),
        NeuronState::Unstable => {}
    }
    if mode.uses_convex() && n_prime.state == NeuronState::Active {
        // z = min(d, n') >= min(y, ceiling)
        let ceiling = n_prime.lb_lo;
        return if ceiling >= u {
            Choice::new(Rule::PassThrough, Relaxation::Keep)
        } else if ceiling <= l {
            Choice::new(Rule::Tightened, Relaxation::Constant(ceiling))
        } else if u - l < TOLERANCE {
            Choice::new(Rule::Degenerate, Relaxation::Constant(l))
        } else {
            Choice::new(Rule::Tightened, convex_plane((ceiling - l) / (u - l), u, ceiling))
        };
    }
    if u <= 0.0 {
        Choice::new(Rule::PassThrough, Relaxation::Keep)
    } else if l >= 0.0 {
        Choice::new(Rule::Zero, Relaxation::Zero)
    } else if u - l < TOLERANCE {
        Choice::new(Rule::Degenerate, Relaxation::Constant(l))
    } else if mode.uses_convex() {
        Choice::new(Rule::Chord, convex_plane(-l / (u - l), u, 0.0))
    } else {
        Choice::new(Rule::Horizontal, Relaxation::Constant(l))
    }
}

/// Difference interval of one neuron pair, before and after the ReLUs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBounds {
    pub pre: SymInterval,
    pub post: SymInterval,
    pub pre_corners: Corners,
    pub lower_rule: Rule,
    pub upper_rule: Rule,
}

/// Apply the pair relaxation to one pre-ReLU difference interval.
pub fn relu_delta(
    pre: &SymInterval,
    pre_corners: &Corners,
    n: &NeuronAbs,
    n_prime: &NeuronAbs,
    mode: Mode,
) -> DeltaBounds {
    if mode == Mode::Naive {
        return DeltaBounds {
            pre: pre.clone(),
            post: n_prime.post.sub(&n.post),
            pre_corners: *pre_corners,
            lower_rule: Rule::Subtraction,
            upper_rule: Rule::Subtraction,
        };
    }
    let (nf, npf) = (NeuronFacts::from(n), NeuronFacts::from(n_prime));
    let up = upper_choice(pre_corners.ub_lo, pre_corners.ub_hi, nf, npf, mode);
    let lo = lower_choice(pre_corners.lb_lo, pre_corners.lb_hi, nf, npf, mode);
    DeltaBounds {
        pre: pre.clone(),
        post: SymInterval::new(lo.relaxation.apply(&pre.lb), up.relaxation.apply(&pre.ub)),
        pre_corners: *pre_corners,
        lower_rule: lo.rule,
        upper_rule: up.rule,
    }
}

/// Pre-ReLU difference intervals of layer `k` (0-based):
/// `sum_i Delta_post[i] * W'[i, j] + n_post[i] * (W' - W)[i, j] + (b' - b)[j]`.
pub fn delta_affine(
    k: usize,
    prev_delta_post: &BoundBlock,
    prev_original_post: &BoundBlock,
    pair: &NetworkPair,
) -> BoundBlock {
    let variant = &pair.variant().layers()[k];
    let mut pre = prev_delta_post.affine(&variant.weights, Some(pair.bias_delta(k)));
    let from_weights = prev_original_post.affine(pair.weight_delta(k), None);
    pre.add_prefix(&from_weights);
    pre
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "limit")]
pub enum BudgetPolicy {
    /// Discounted count of unstable pairs.
    #[default]
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SymVarOptions {
    pub budget: BudgetPolicy,
}

#[derive(Debug, Clone)]
pub struct DeltaLayer {
    pub pre: BoundBlock,
    /// `None` for the output layer.
    pub post: Option<BoundBlock>,
    pub corners: Vec<Corners>,
    pub lower_rules: Vec<Rule>,
    pub upper_rules: Vec<Rule>,
    /// Neurons whose post interval was replaced by a fresh variable.
    pub introduced: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassStats {
    pub mode: Mode,
    /// Pairs per hidden layer in which either neuron is unstable.
    pub unstable_pairs: Vec<usize>,
    pub budget: usize,
    pub symvars_introduced: usize,
    pub histogram: CaseHistogram,
}

/// Everything one differential pass computed; doubles as the snapshot the
/// sampling oracle checks.
#[derive(Debug, Clone)]
pub struct DiffPass {
    pub original: AbsPass,
    pub variant: AbsPass,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<DeltaLayer>,
    pub table: SymVarTable,
    pub output: Vec<ConcreteInterval>,
    pub stats: PassStats,
}

impl DiffPass {
    pub fn output_layer(&self) -> &DeltaLayer {
        self.layers.last().expect("output layer")
    }

    /// Symbolic output difference bounds for output `j`.
    pub fn output_interval(&self, j: usize) -> SymInterval {
        self.output_layer().pre.interval(j)
    }

    /// Largest `|bound|` over all outputs.
    pub fn max_magnitude(&self) -> f64 {
        self.output.iter().map(ConcreteInterval::magnitude).fold(0.0, f64::max)
    }
}

fn count_unstable_pairs(original: &AbsPass, variant: &AbsPass) -> Vec<usize> {
    original
        .hidden()
        .iter()
        .zip(variant.hidden())
        .map(|(a, b)| {
            a.states
                .iter()
                .zip(&b.states)
                .filter(|(x, y)| !x.is_stable() || !y.is_stable())
                .count()
        })
        .collect()
}

pub fn forward_diff(pair: &NetworkPair, input_box: &InputBox, mode: Mode, opts: SymVarOptions) -> DiffPass {
    let original = forward_abs(pair.original(), input_box);
    let variant = forward_abs(pair.variant(), input_box);
    let unstable_pairs = count_unstable_pairs(&original, &variant);
    if mode == Mode::Naive {
        return naive_pass(original, variant, unstable_pairs, input_box);
    }

    let n = pair.input_count();
    let hidden = pair.original().hidden_count();
    let mut budget = match (mode.uses_symvars(), opts.budget) {
        (false, _) => Budget::fixed(0),
        (true, BudgetPolicy::Auto) => Budget::from_unstable(unstable_pairs.clone()),
        (true, BudgetPolicy::Fixed(limit)) => Budget::fixed(limit),
    };
    let mut table = SymVarTable::new(n);
    let mut histogram = CaseHistogram::default();
    let mut layers = Vec::with_capacity(hidden + 1);
    let mut delta_post = BoundBlock::zeros(n, n, 0);
    let mut original_post = BoundBlock::identity(n);

    for k in 0..=hidden {
        let pre = delta_affine(k, &delta_post, &original_post, pair);
        let corners = pre.all_corners(input_box, &table);
        if k == hidden {
            layers.push(DeltaLayer {
                pre,
                post: None,
                corners,
                lower_rules: Vec::new(),
                upper_rules: Vec::new(),
                introduced: Vec::new(),
            });
            break;
        }

        let mut post = pre.clone();
        let mut lower_rules = Vec::with_capacity(corners.len());
        let mut upper_rules = Vec::with_capacity(corners.len());
        for (j, c) in corners.iter().enumerate() {
            let nf = NeuronFacts::of(&original, k, j);
            let npf = NeuronFacts::of(&variant, k, j);
            let up = upper_choice(c.ub_lo, c.ub_hi, nf, npf, mode);
            let lo = lower_choice(c.lb_lo, c.lb_hi, nf, npf, mode);
            up.relaxation.apply_row(post.row_mut(Direction::Upper, j), n);
            lo.relaxation.apply_row(post.row_mut(Direction::Lower, j), n);
            histogram.record(Direction::Upper, up.rule);
            histogram.record(Direction::Lower, lo.rule);
            upper_rules.push(up.rule);
            lower_rules.push(lo.rule);
        }

        // A variable in the last hidden layer is only ever substituted back
        // into the output, so it cannot cancel anything.
        let mut introduced = Vec::new();
        if mode.uses_symvars() && k + 1 < hidden {
            for j in 0..post.rows() {
                if !(upper_rules[j].approximates() || lower_rules[j].approximates()) {
                    continue;
                }
                let origin = VarOrigin { layer: k, neuron: j };
                if !introduce_in_block(&mut post, j, &mut table, &mut budget, origin) {
                    break;
                }
                introduced.push(j);
            }
        }

        original_post = original.hidden()[k].post.clone().expect("hidden layer");
        delta_post = post.clone();
        layers.push(DeltaLayer {
            pre,
            post: Some(post),
            corners,
            lower_rules,
            upper_rules,
            introduced,
        });
    }

    let out_layer = layers.last().expect("output layer");
    let output = (0..out_layer.pre.rows())
        .map(|j| out_layer.pre.concretize(j, input_box, &table))
        .collect();
    DiffPass {
        original,
        variant,
        layers,
        output,
        stats: PassStats {
            mode,
            unstable_pairs,
            budget: budget.limit(),
            symvars_introduced: budget.used(),
            histogram,
        },
        table,
    }
}

fn naive_pass(original: AbsPass, variant: AbsPass, unstable_pairs: Vec<usize>, input_box: &InputBox) -> DiffPass {
    let table = SymVarTable::new(input_box.dims());
    let mut histogram = CaseHistogram::default();
    let mut layers = Vec::with_capacity(original.layers.len());
    for (a, b) in original.layers.iter().zip(&variant.layers) {
        let pre = b.pre.sub(&a.pre);
        let corners = pre.all_corners(input_box, &table);
        let post = match (&a.post, &b.post) {
            (Some(pa), Some(pb)) => Some(pb.sub(pa)),
            _ => None,
        };
        let rules = if post.is_some() {
            vec![Rule::Subtraction; pre.rows()]
        } else {
            Vec::new()
        };
        for _ in &rules {
            histogram.record(Direction::Upper, Rule::Subtraction);
            histogram.record(Direction::Lower, Rule::Subtraction);
        }
        layers.push(DeltaLayer {
            pre,
            post,
            corners,
            lower_rules: rules.clone(),
            upper_rules: rules,
            introduced: Vec::new(),
        });
    }
    let out = &layers.last().expect("output layer").pre;
    let output = (0..out.rows()).map(|j| out.concretize(j, input_box, &table)).collect();
    DiffPass {
        original,
        variant,
        layers,
        table,
        output,
        stats: PassStats {
            mode: Mode::Naive,
            unstable_pairs,
            budget: 0,
            symvars_introduced: 0,
            histogram,
        },
    }
}
