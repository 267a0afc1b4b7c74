use diffcert::absbounds::{relu_relaxations, NeuronState};
use diffcert::deltabounds::{lower_choice, upper_choice, NeuronFacts};
use diffcert::model::Layer;
use diffcert::oracle::{self, random_network, random_task, sample_check};
use diffcert::symexpr::{BoundBlock, ConcreteInterval, Corners, Direction, LinExpr};
use diffcert::symvars::SymVarTable;
use diffcert::{forward_diff, verify, InputBox, Mode, Network, NetworkPair, SymVarOptions, VerificationTask};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn state_of(lo: f64, hi: f64) -> NeuronState {
    if lo >= 0.0 {
        NeuronState::Active
    } else if hi <= 0.0 {
        NeuronState::Inactive
    } else {
        NeuronState::Unstable
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    (a.min(b), a.max(b))
}

fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo + (hi - lo) * t
}

/// Reference binary16 rounding: nearest, ties to even; `None` on overflow.
fn half_reference(v: f64) -> Option<f64> {
    if v == 0.0 {
        return Some(v);
    }
    let exp = (((v.to_bits() >> 52) & 0x7ff) as i32 - 1023).max(-14);
    let quantum = 2f64.powi(exp - 10);
    let r = (v / quantum).round_ties_even() * quantum;
    if r.abs() > 65504.0 {
        None
    } else {
        Some(r)
    }
}

fn box_strategy(dims: usize) -> impl Strategy<Value = InputBox> {
    prop::collection::vec((-3.0f64..3.0, 0.01f64..3.0), dims).prop_map(|sides| {
        let lo = sides.iter().map(|(a, _)| *a).collect();
        let hi = sides.iter().map(|(a, w)| a + w).collect();
        InputBox::new(lo, hi).unwrap()
    })
}

fn point_in(b: &InputBox, ts: &[f64]) -> Vec<f64> {
    (0..b.dims()).map(|i| lerp(b.lo()[i], b.hi()[i], ts[i])).collect()
}

/// Per-output width of `finer` is at most that of `coarser`, up to 1e-9.
fn dominates(seed: u64, finer: Mode, coarser: Mode) -> Result<(), TestCaseError> {
    let (pair, b) = random_task(seed);
    let fine = forward_diff(&pair, &b, finer, SymVarOptions::default());
    let coarse = forward_diff(&pair, &b, coarser, SymVarOptions::default());
    for (j, (p, q)) in fine.output.iter().zip(&coarse.output).enumerate() {
        prop_assert!(p.width() <= q.width() + 1e-9, "output {j}: {finer} {p:?} wider than {coarser} {q:?}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn concrete_interval_arithmetic_contains_pointwise(
        a in -5.0f64..5.0, wa in 0.0f64..4.0, b in -5.0f64..5.0, wb in 0.0f64..4.0,
        s in 0.0f64..1.0, t in 0.0f64..1.0, c in -3.0f64..3.0,
    ) {
        let x = ConcreteInterval::new(a, a + wa);
        let y = ConcreteInterval::new(b, b + wb);
        let (p, q) = (lerp(a, a + wa, s), lerp(b, b + wb, t));
        let tol = 1e-12;
        prop_assert!(x.add(&y).contains(p + q, tol));
        prop_assert!(x.sub(&y).contains(p - q, tol));
        prop_assert!(x.scale(c).contains(c * p, tol));
        prop_assert!(x.abs().contains(p.abs(), tol));
        prop_assert!(x.hull(&y).contains(p, 0.0) && x.hull(&y).contains(q, 0.0));
    }

    #[test]
    fn linexpr_concretization_contains_evaluations(
        coeffs in prop::collection::vec(-4.0f64..4.0, 3),
        constant in -2.0f64..2.0,
        b in box_strategy(3),
        ts in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let e = LinExpr::from_parts(coeffs, constant);
        let table = SymVarTable::new(3);
        let lo = e.concretize(&b, &table, Direction::Lower).unwrap();
        let hi = e.concretize(&b, &table, Direction::Upper).unwrap();
        let v = e.eval(&point_in(&b, &ts), &BTreeMap::new()).unwrap();
        prop_assert!(lo - 1e-9 <= v && v <= hi + 1e-9);
        // Tight: some corner attains each side.
        let corner: Vec<f64> = (0..3).map(|i| if e.input_coeffs[i] >= 0.0 { b.hi()[i] } else { b.lo()[i] }).collect();
        let at = e.eval(&corner, &BTreeMap::new()).unwrap();
        prop_assert!((at - hi).abs() <= 1e-9 * (1.0 + hi.abs()));
    }

    #[test]
    fn block_affine_is_sound_for_interval_rows(
        w in prop::collection::vec(-2.0f64..2.0, 6),
        bias in prop::collection::vec(-1.0f64..1.0, 3),
        ts in prop::collection::vec(0.0f64..1.0, 2),
        b in box_strategy(2),
    ) {
        // Rows of the input block are exact, so the image must also be exact.
        let weights = Array2::from_shape_vec((2, 3), w).unwrap();
        let bias = Array1::from(bias);
        let img = BoundBlock::identity(2).affine(&weights, Some(&bias));
        let x = point_in(&b, &ts);
        for j in 0..3 {
            let expect = weights[[0, j]] * x[0] + weights[[1, j]] * x[1] + bias[j];
            let lo = img.eval_row(Direction::Lower, j, &x, &[]);
            let hi = img.eval_row(Direction::Upper, j, &x, &[]);
            prop_assert!((lo - expect).abs() < 1e-12 && (hi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_network_relaxation_brackets_relu(
        lb in (-4.0f64..4.0, -4.0f64..4.0), ub in (-4.0f64..4.0, -4.0f64..4.0),
        s in 0.0f64..1.0, t in 0.0f64..1.0, m in 0.0f64..1.0,
    ) {
        let (lb_lo, lb_hi) = ordered(lb.0, lb.1);
        let (ub_lo, ub_hi) = ordered(ub.0, ub.1);
        prop_assume!(lb_lo <= ub_lo && lb_hi <= ub_hi);
        let corners = Corners { ub_lo, ub_hi, lb_lo, lb_hi };
        let (_, lower, upper) = relu_relaxations(&corners);
        let y_l = lerp(lb_lo, lb_hi, s);
        let y_u = lerp(ub_lo, ub_hi, t);
        prop_assume!(y_l <= y_u);
        let x = lerp(y_l, y_u, m);
        prop_assert!(lower.at(y_l) <= relu(x) + 1e-9);
        prop_assert!(upper.at(y_u) >= relu(x) - 1e-9);
    }

    #[test]
    fn delta_rules_bracket_relu_difference(
        n_range in (-4.0f64..4.0, -4.0f64..4.0),
        np_range in (-4.0f64..4.0, -4.0f64..4.0),
        d_range in (-3.0f64..3.0, -3.0f64..3.0),
        mode_ix in 0usize..Mode::ALL.len(),
    ) {
        let mode = Mode::ALL[mode_ix];
        let (a, b) = ordered(n_range.0, n_range.1);
        let (ap, bp) = ordered(np_range.0, np_range.1);
        let (l, u) = ordered(d_range.0, d_range.1);
        let n = NeuronFacts::new(state_of(a, b), a);
        let np = NeuronFacts::new(state_of(ap, bp), ap);
        let up = upper_choice(l, u, n, np, mode).relaxation;
        let lo = lower_choice(l, u, n, np, mode).relaxation;
        let steps = 12;
        let mut feasible = 0;
        for i in 0..=steps {
            for k in 0..=steps {
                let x = lerp(a, b, i as f64 / steps as f64);
                let d = lerp(l, u, k as f64 / steps as f64);
                if x + d < ap || x + d > bp {
                    continue;
                }
                feasible += 1;
                let truth = relu(x + d) - relu(x);
                prop_assert!(up.at(d) >= truth - 1e-9, "upper {:?} at d={d}, n={x}: {} < {truth}", up, up.at(d));
                prop_assert!(lo.at(d) <= truth + 1e-9, "lower {:?} at d={d}, n={x}: {} > {truth}", lo, lo.at(d));
            }
        }
        prop_assume!(feasible > 0);
    }

    #[test]
    fn bisect_halves_cover_parent(b in box_strategy(3), dim in 0usize..3) {
        let (left, right) = b.bisect(dim);
        prop_assert_eq!(left.hi()[dim], right.lo()[dim]);
        prop_assert_eq!(left.lo()[dim], b.lo()[dim]);
        prop_assert_eq!(right.hi()[dim], b.hi()[dim]);
        for i in (0..3).filter(|&i| i != dim) {
            prop_assert_eq!(left.lo()[i], b.lo()[i]);
            prop_assert_eq!(right.hi()[i], b.hi()[i]);
        }
        prop_assert!((left.width(dim) + right.width(dim) - b.width(dim)).abs() < 1e-12);
    }

    #[test]
    fn truncation_matches_reference_rounding_and_is_idempotent(
        ws in prop::collection::vec(prop_oneof![-70000.0f64..70000.0, -2.0f64..2.0, -1e-4f64..1e-4], 4),
    ) {
        let net = Network::new(2, vec![Layer::new(Array2::from_shape_vec((2, 2), ws.clone()).unwrap(), Array1::zeros(2))]).unwrap();
        let expected: Option<Vec<f64>> = ws.iter().map(|w| half_reference(*w)).collect();
        match (net.truncate_weights(16), expected) {
            (Ok(t), Some(exp)) => {
                let got: Vec<f64> = t.layers()[0].weights.iter().copied().collect();
                prop_assert_eq!(&got, &exp);
                let again = t.truncate_weights(16).unwrap();
                prop_assert_eq!(again.layers()[0].weights.clone(), t.layers()[0].weights.clone());
            }
            (Err(_), None) => {}
            (got, exp) => prop_assert!(false, "truncation {:?} vs reference {:?}", got.map(|_| ()), exp),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn network_evaluate_matches_plain_loops(seed in any::<u64>(), ts in prop::collection::vec(-2.0f64..2.0, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, 3, &[5, 4], 2, 1.0);
        let a = net.evaluate(&ts).unwrap();
        let b = oracle::evaluate(&net, &ts);
        let tr = oracle::trace(&net, &ts);
        for j in 0..2 {
            prop_assert!((a[j] - b[j]).abs() <= 1e-12 * (1.0 + a[j].abs()));
            prop_assert_eq!(tr.output()[j], b[j]);
        }
    }

    #[test]
    fn every_mode_is_sound_on_random_pairs(seed in any::<u64>(), mode_ix in 0usize..Mode::ALL.len()) {
        let (pair, b) = random_task(seed);
        let pass = forward_diff(&pair, &b, Mode::ALL[mode_ix], SymVarOptions::default());
        let report = sample_check(&pair, &b, &pass, 200, seed ^ 0x5eed);
        prop_assert!(report.is_sound(), "{:?}", report.violations.first());
    }

    #[test]
    fn identical_networks_have_zero_difference(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let same = NetworkPair::new(pair.original().clone(), pair.original().clone()).unwrap();
        for mode in Mode::ALL.into_iter().filter(|m| *m != Mode::Naive) {
            let pass = forward_diff(&same, &b, mode, SymVarOptions::default());
            for iv in &pass.output {
                prop_assert!(iv.lo == 0.0 && iv.hi == 0.0, "{mode}: {iv:?}");
            }
            for layer in &pass.layers {
                if let Some(post) = &layer.post {
                    for j in 0..post.rows() {
                        let c = post.concretize(j, &b, &pass.table);
                        prop_assert!(c.lo == 0.0 && c.hi == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn concretize_is_no_wider_than_naive(seed in any::<u64>()) {
        dominates(seed, Mode::Concretize, Mode::Naive)?;
    }

    #[test]
    fn convex_only_is_no_wider_than_concretize(seed in any::<u64>()) {
        dominates(seed, Mode::ConvexOnly, Mode::Concretize)?;
    }

    #[test]
    fn full_is_no_wider_than_convex_only(seed in any::<u64>()) {
        dominates(seed, Mode::Full, Mode::ConvexOnly)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn verified_results_hold_on_samples(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..400 {
            let x: Vec<f64> = (0..b.dims()).map(|i| rng.gen_range(b.lo()[i]..=b.hi()[i])).collect();
            let f = pair.original().evaluate(&x).unwrap();
            let g = pair.variant().evaluate(&x).unwrap();
            for (p, q) in f.iter().zip(&g) {
                worst = worst.max((q - p).abs());
            }
        }
        let single = forward_diff(&pair, &b, Mode::Full, SymVarOptions::default()).max_magnitude();
        // Somewhere between the observed gap and the one-pass bound.
        let epsilon = worst + 0.5 * (single - worst) + 1e-6;
        let task = VerificationTask::new(pair.clone(), b.clone(), epsilon)
            .with_max_depth(6)
            .with_threads(2)
            .recording_nodes();
        let out = verify(&task).unwrap();
        prop_assert!(worst < epsilon);
        for node in &out.nodes {
            for (o, iv) in node.output.iter().enumerate() {
                // No sampled point of a node may escape the node's bounds.
                let nb = InputBox::new(node.lo.clone(), node.hi.clone()).unwrap();
                for k in 0..8 {
                    let x: Vec<f64> = (0..nb.dims()).map(|i| lerp(nb.lo()[i], nb.hi()[i], ((k * (i + 3)) % 8) as f64 / 7.0)).collect();
                    let d = pair.variant().evaluate(&x).unwrap()[o] - pair.original().evaluate(&x).unwrap()[o];
                    prop_assert!(iv.contains(d, 1e-9), "node {} output {o}: {d} outside {iv:?}", node.key);
                }
            }
        }
    }
}
