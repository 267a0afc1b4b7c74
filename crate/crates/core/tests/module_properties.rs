use diffcert::absbounds::{forward_abs, NeuronState};
use diffcert::model::{parse_network, NetworkFormat};
use diffcert::oracle::{fd_gradient, kink_free, random_network, random_task, sample_check, Frame};
use diffcert::symexpr::{Direction, LinExpr};
use diffcert::symvars::{SymVarTable, VarOrigin};
use diffcert::verifier::interval_gradient;
use diffcert::{forward_diff, verify, BudgetPolicy, InputBox, Mode, NetworkPair, SymVarOptions, VerificationTask};
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample_in<R: Rng>(r: &mut R, b: &InputBox) -> Vec<f64> {
    (0..b.dims()).map(|i| r.gen_range(b.lo()[i]..=b.hi()[i])).collect()
}

fn sub_box<R: Rng>(r: &mut R, b: &InputBox) -> InputBox {
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for i in 0..b.dims() {
        let s: f64 = r.gen_range(0.0..1.0);
        let t: f64 = r.gen_range(0.0..1.0);
        let (s, t) = (s.min(t), s.max(t));
        lo.push(b.lo()[i] + s * b.width(i));
        hi.push(b.lo()[i] + t * b.width(i));
    }
    InputBox::new(lo, hi).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_pair_variant_evaluates_like_original(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_network(&mut r, 3, &[6, 5], 2, 1.0);
        let pair = NetworkPair::new(f.clone(), f.clone()).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-3.0..3.0)).collect();
            prop_assert_eq!(pair.variant().evaluate(&x).unwrap(), f.evaluate(&x).unwrap());
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_network(&mut r, 4, &[7, 3], 2, 3.0);
        let back = parse_network(&f.to_json(), NetworkFormat::Json).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn truncation_error_is_within_half_ulp(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_network(&mut r, 3, &[8], 2, 100.0);
        let t = f.truncate_weights(16).unwrap();
        for (a, b) in f.layers().iter().zip(t.layers()) {
            for (w, v) in a.weights.iter().zip(&b.weights) {
                if w.abs() >= 2f64.powi(-14) {
                    prop_assert!((w - v).abs() <= 2f64.powi(-11) * w.abs(), "{w} -> {v}");
                }
            }
        }
    }

    #[test]
    fn concretization_with_variables_is_sound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 3;
        let b = InputBox::new(vec![-1.0, 0.0, -2.0], vec![1.5, 0.5, -1.0]).unwrap();
        let mut table = SymVarTable::new(n);
        let mut ids = Vec::new();
        for k in 0..3 {
            let lower: Vec<f64> = (0..=n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let mut upper = lower.clone();
            upper[n] += r.gen_range(0.0..1.0);
            ids.push(table.register(Array1::from(lower), Array1::from(upper), VarOrigin { layer: k, neuron: 0 }));
        }
        let mut e = LinExpr::from_parts((0..n).map(|_| r.gen_range(-3.0..3.0)).collect(), r.gen_range(-1.0..1.0));
        for &id in &ids {
            e = e.add(&LinExpr::var(n, id).scale(r.gen_range(-2.0..2.0)));
        }
        let lo = e.concretize(&b, &table, Direction::Lower).unwrap();
        let hi = e.concretize(&b, &table, Direction::Upper).unwrap();
        for _ in 0..50 {
            let x = sample_in(&mut r, &b);
            let mut vals = BTreeMap::new();
            for &id in &ids {
                let dl = table.def_expr(id, Direction::Lower).unwrap().eval(&x, &BTreeMap::new()).unwrap();
                let du = table.def_expr(id, Direction::Upper).unwrap().eval(&x, &BTreeMap::new()).unwrap();
                vals.insert(id, dl + r.gen_range(0.0..=1.0) * (du - dl));
            }
            let v = e.eval(&x, &vals).unwrap();
            let tol = 1e-9 * (1.0 + v.abs());
            prop_assert!(lo - tol <= v && v <= hi + tol, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn expression_arithmetic_distributes_over_eval(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mk = |r: &mut ChaCha8Rng| LinExpr::from_parts((0..4).map(|_| r.gen_range(-5.0..5.0)).collect(), r.gen_range(-5.0..5.0));
        let (a, b) = (mk(&mut r), mk(&mut r));
        let c: f64 = r.gen_range(-3.0..3.0);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let none = BTreeMap::new();
        let (va, vb) = (a.eval(&x, &none).unwrap(), b.eval(&x, &none).unwrap());
        prop_assert!((a.add(&b).eval(&x, &none).unwrap() - (va + vb)).abs() < 1e-12);
        prop_assert!((a.sub(&b).eval(&x, &none).unwrap() - (va - vb)).abs() < 1e-12);
        prop_assert!((a.scale(c).eval(&x, &none).unwrap() - c * va).abs() < 1e-12);
    }

    #[test]
    fn single_network_states_match_post_bounds(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let pass = forward_abs(pair.original(), &b);
        for layer in pass.hidden() {
            let post = layer.post.as_ref().unwrap();
            for (j, state) in layer.states.iter().enumerate() {
                let (pre, out) = (layer.pre.interval(j), post.interval(j));
                match state {
                    NeuronState::Active => prop_assert_eq!(pre, out),
                    NeuronState::Inactive => {
                        prop_assert!(out.lb.input_coeffs.iter().chain(&out.ub.input_coeffs).all(|c| *c == 0.0));
                        prop_assert!(out.lb.constant == 0.0 && out.ub.constant == 0.0);
                    }
                    NeuronState::Unstable => {}
                }
            }
        }
    }

    #[test]
    fn shrinking_the_box_never_widens_single_network_bounds(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let mut r = rng(seed);
        let inner = sub_box(&mut r, &b);
        let outer_pass = forward_abs(pair.original(), &b);
        let inner_pass = forward_abs(pair.original(), &inner);
        let table = SymVarTable::new(b.dims());
        for (k, (o, i)) in outer_pass.hidden().iter().zip(inner_pass.hidden()).enumerate() {
            let (op, ip) = (o.post.as_ref().unwrap(), i.post.as_ref().unwrap());
            for j in 0..op.rows() {
                let co = op.concretize(j, &b, &table);
                let ci = ip.concretize(j, &inner, &table);
                prop_assert!(ci.lo >= co.lo - 1e-6 && ci.hi <= co.hi + 1e-6, "layer {k} neuron {j}: {ci:?} vs {co:?}");
            }
        }
    }

    #[test]
    fn difference_parametrizations_agree(n in -10.0f64..10.0, d in -10.0f64..10.0) {
        let z1 = Frame::Original.z(n, d);
        let z2 = Frame::Variant.z(n + d, d);
        prop_assert!((z1 - z2).abs() <= 1e-12 * (1.0 + n.abs() + d.abs()));
    }

    #[test]
    fn variables_reference_inputs_only_and_keep_layer_bounds(seed in any::<u64>(), budget in 0usize..6) {
        let (pair, b) = random_task(seed);
        let pass = forward_diff(&pair, &b, Mode::Full, SymVarOptions { budget: BudgetPolicy::Fixed(budget) });
        let n = b.dims();
        prop_assert!(pass.table.len() <= budget);
        prop_assert_eq!(pass.table.len(), pass.stats.symvars_introduced);
        let mut last_layer = 0;
        for def in pass.table.defs() {
            prop_assert_eq!(def.lower.len(), n + 1);
            prop_assert_eq!(def.upper.len(), n + 1);
            prop_assert!(def.origin.layer >= last_layer);
            last_layer = def.origin.layer;
        }
        for layer in &pass.layers {
            let Some(post) = &layer.post else { continue };
            for &j in &layer.introduced {
                let c = post.concretize(j, &b, &pass.table);
                let id = (0..pass.table.len())
                    .map(|k| n + k)
                    .find(|id| post.interval(j).ub.sym_coeffs.get(id) == Some(&1.0))
                    .unwrap();
                let lo = pass.table.def_expr(id, Direction::Lower).unwrap().concretize(&b, &pass.table, Direction::Lower).unwrap();
                let hi = pass.table.def_expr(id, Direction::Upper).unwrap().concretize(&b, &pass.table, Direction::Upper).unwrap();
                prop_assert!((c.lo - lo).abs() <= 1e-9 && (c.hi - hi).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let pass = forward_diff(&pair, &b, Mode::Full, SymVarOptions::default());
        let a = sample_check(&pair, &b, &pass, 100, seed);
        let c = sample_check(&pair, &b, &pass, 100, seed);
        prop_assert_eq!(a.max_observed_diff, c.max_observed_diff);
        prop_assert_eq!(a.checks, c.checks);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interval_gradient_contains_finite_differences(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let g = interval_gradient(&pair, &forward_abs(pair.original(), &b), &forward_abs(pair.variant(), &b));
        let mut r = rng(seed);
        let h = 1e-6;
        let mut tested = 0;
        for _ in 0..40 {
            let x = sample_in(&mut r, &b);
            if !kink_free(&pair, &x, h) {
                continue;
            }
            tested += 1;
            let fd = fd_gradient(&pair, &x, h);
            for o in 0..g.outputs() {
                for i in 0..g.inputs() {
                    let v = fd[[o, i]];
                    prop_assert!(g.entry(o, i).contains(v, 1e-5 * (1.0 + v.abs())), "d{o}/dx{i} = {v} outside {:?}", g.entry(o, i));
                }
            }
        }
        prop_assume!(tested > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn verification_is_deterministic_and_refines(seed in any::<u64>()) {
        let (pair, b) = random_task(seed);
        let single = forward_diff(&pair, &b, Mode::Full, SymVarOptions::default()).max_magnitude();
        let epsilon = 0.6 * single + 1e-9;
        let run = |threads: usize| {
            let task = VerificationTask::new(pair.clone(), b.clone(), epsilon)
                .with_max_depth(6)
                .with_threads(threads)
                .recording_nodes();
            verify(&task).unwrap()
        };
        let base = run(1);
        for threads in [4, 12] {
            let other = run(threads);
            prop_assert_eq!(other.status, base.status);
            prop_assert_eq!(other.subregions_explored, base.subregions_explored);
        }
        let by_key: BTreeMap<u128, _> = base.nodes.iter().map(|n| (n.key, n)).collect();
        for node in &base.nodes {
            let Some(parent) = by_key.get(&(node.key / 2)) else { continue };
            for (c, p) in node.output.iter().zip(&parent.output) {
                prop_assert!(c.lo >= p.lo - 1e-6 && c.hi <= p.hi + 1e-6);
            }
        }
        if base.verified() {
            let mut r = rng(seed ^ 1);
            for _ in 0..10_000 {
                let x = sample_in(&mut r, &b);
                let f = pair.original().evaluate(&x).unwrap();
                let g = pair.variant().evaluate(&x).unwrap();
                prop_assert!(f.iter().zip(&g).all(|(p, q)| (q - p).abs() < epsilon));
            }
        }
    }
}
