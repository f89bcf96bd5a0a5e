use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Gradient check of `f` applied to fresh leaves with the given shapes.
fn check_op<F>(shapes: &[Vec<usize>], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("x{i}"), random_tensor(&mut rng, s)).unwrap())
        .collect();
    // Weighted sum with fixed random weights so every output coordinate matters.
    let report = finite_diff_check(&mut store, 1e-5, |tape, b| {
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| b.var(id)).collect();
        let out = f(&vars)?;
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let w = random_tensor(&mut wrng, &out.shape());
        out.mul(&tape.constant(w)?)?.sum_all()
    })
    .unwrap();
    report.max_rel_error()
}

#[test]
fn matmul_identity_and_definition() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2)).unwrap();
    let v = tape.constant(t(&[2, 1], &[5.0, 7.0])).unwrap();
    assert_eq!(i2.matmul(&v).unwrap().value().data(), &[5.0, 7.0]);
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
    assert_eq!(a.matmul(&ones).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_broadcast_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let av = tape.leaf(a).unwrap();
    let bv = tape.constant(b.clone()).unwrap();
    let loss = av.matmul(&bv).unwrap().sum_all().unwrap();
    let g = tape.backward(&loss).unwrap().get(&av);
    for i in 0..3 {
        for k in 0..4 {
            let row_sum = b.row(k).iter().sum::<f64>();
            assert!((g.data()[i * 4 + k] - row_sum).abs() < 1e-14);
        }
    }
    let err = check_op(&[vec![3, 4], vec![4, 2]], 3, |v| v[0].matmul(&v[1])?.sum_all());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_closed_forms() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    assert!(close(v.softmax(0).unwrap().value().data(), &[0.5, 0.5], 1e-15));
    let v = tape.constant(Tensor::from_vec(vec![0.0, 3f64.ln()])).unwrap();
    assert!(close(v.softmax(0).unwrap().value().data(), &[0.25, 0.75], 1e-12));
    let err = tape.constant(Tensor::from_vec(vec![1.0])).unwrap().softmax(1).unwrap_err();
    assert!(matches!(err, NumericsError::Axis { .. }));
}

#[test]
fn elementwise_closed_forms() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let s = z.sigmoid().unwrap();
    assert_eq!(s.item(), 0.5);
    let g = tape.backward(&s).unwrap().get(&z);
    assert_eq!(g.item(), 0.25);

    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-3.0, 2.0])).unwrap();
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);

    // finite-difference derivative of sigmoid at 0
    let h = 1e-5;
    let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
    assert!((fd - 0.25).abs() < 1e-8);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, -1.0])).unwrap();
    let loss = x.relu().unwrap().sum_all().unwrap();
    let g = tape.backward(&loss).unwrap().get(&x);
    assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn binary_ops_only_broadcast_scalars() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let row = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(a.add(&row).unwrap_err(), NumericsError::Shape { .. }));
    let s = tape.constant(Tensor::scalar(2.0)).unwrap();
    assert_eq!(a.add(&s).unwrap().value().data(), &[2.0; 6]);
    assert_eq!(s.sub(&a).unwrap().value().data(), &[2.0; 6]);
}

#[test]
fn layer_norm_closed_forms() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let x = tape.constant(Tensor::from_vec(vec![1.0, 3.0])).unwrap();
    let y = x.layer_norm(&g, &b, 1e-5).unwrap().value();
    assert!(close(y.data(), &[-1.0, 1.0], 1e-4), "{y:?}");
    let g3 = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let b3 = tape.constant(Tensor::zeros(&[3])).unwrap();
    let c = tape.constant(Tensor::full(&[3], 4.2)).unwrap();
    assert_eq!(c.layer_norm(&g3, &b3, 1e-5).unwrap().value().data(), &[0.0; 3]);
    assert!(x.layer_norm(&g, &b, 0.0).is_err());
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
    assert_eq!(x.mean_all().unwrap().item(), 4.0);
    assert_eq!(x.sum(&[]).unwrap().value(), x.value());
    assert_eq!(x.sum(&[0]).unwrap().value().data(), &[6.0, 10.0]);
    assert_eq!(x.mean(&[1]).unwrap().value().data(), &[2.0, 6.0]);
    assert!(x.sum(&[0, 0]).is_err());
    assert!(x.sum(&[2]).is_err());
    let a = 2.5;
    let lhs = x.scale(a).unwrap().mean_all().unwrap().item();
    assert!((lhs - a * 4.0).abs() < 1e-12);
}

#[test]
fn l2_normalize_contract() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    let y = x.l2_normalize(1e-12).unwrap();
    assert!(close(y.value().data(), &[0.6, 0.8], 1e-15));
    let yy = y.l2_normalize(1e-12).unwrap();
    assert!(close(yy.value().data(), y.value().data(), 1e-12));
    let cos = y.mul(&y).unwrap().sum_all().unwrap().item();
    assert!((cos - 1.0).abs() < 1e-12);
    let z = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert_eq!(z.l2_normalize(1e-12).unwrap().value().data(), &[0.0; 3]);
}

#[test]
fn backward_closed_forms_and_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let unused = tape.leaf(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let loss = x.mul(&x).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.get(&x).item(), 6.0);
    assert_eq!(grads.get(&unused).data(), &[0.0, 0.0]);
    assert_eq!(tape.backward(&loss).unwrap_err(), NumericsError::StaleTape);
    assert_eq!(x.scale(2.0).unwrap_err(), NumericsError::StaleTape);
    tape.reset();
    let y = tape.leaf(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(&y).unwrap_err(), NumericsError::NonScalarLoss { .. }));
}

#[test]
fn foreign_vars_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::scalar(1.0)).unwrap();
    let b = t2.constant(Tensor::scalar(1.0)).unwrap();
    assert_eq!(a.add(&b).unwrap_err(), NumericsError::ForeignVar);
}

#[test]
fn non_finite_values_are_rejected() {
    let tape = Tape::new();
    assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    let big = tape.constant(Tensor::scalar(1e300)).unwrap();
    assert_eq!(big.mul(&big).unwrap_err(), NumericsError::NonFinite { op: "mul" });
}

#[test]
fn sigmoid_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParameterStore::new();
    let w = store.insert("W", random_tensor(&mut rng, &[3, 3])).unwrap();
    let x = random_tensor(&mut rng, &[3, 1]);
    let report = finite_diff_check(&mut store, 1e-5, |tape, b| {
        b.var(w).matmul(&tape.constant(x.clone())?)?.sigmoid()?.sum_all()
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn finite_diff_exactness_on_polynomials() {
    let mut store = ParameterStore::new();
    let p = store.insert("p", Tensor::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
    let lin = finite_diff_check(&mut store, 1e-5, |tape, b| {
        let c = tape.constant(Tensor::from_vec(vec![1.5, -2.0, 0.25]))?;
        b.var(p).mul(&c)?.sum_all()
    })
    .unwrap();
    assert!(lin.max_rel_error() < 1e-9, "{lin:?}");
    let quad = finite_diff_check(&mut store, 1e-5, |_, b| b.var(p).mul(&b.var(p))?.sum_all()).unwrap();
    assert!(quad.max_rel_error() < 1e-7, "{quad:?}");
    // store restored
    assert_eq!(store.get(p).value.data(), &[0.3, -1.2, 2.0]);
}

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let w = store.insert("W", random_tensor(&mut rng, &[2, 2])).unwrap();
    let report = fault::with_corrupted_backward(fault::Fault::SigmoidBackward, || {
        finite_diff_check(&mut store, 1e-5, |_, b| b.var(w).sigmoid()?.sum_all()).unwrap()
    });
    assert!(report.max_rel_error() > 1e-3);
    let clean = finite_diff_check(&mut store, 1e-5, |_, b| b.var(w).sigmoid()?.sum_all()).unwrap();
    assert!(clean.max_rel_error() < 1e-6);
}

#[test]
fn shape_ops_forward() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    assert_eq!(x.transpose().unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    assert_eq!(x.slice(1, 1, 2).unwrap().value().data(), &[2.0, 3.0, 5.0, 6.0]);
    assert_eq!(x.slice(0, 1, 1).unwrap().value().data(), &[4.0, 5.0, 6.0]);
    assert_eq!(x.tile(2).unwrap().value().shape(), &[4, 3]);
    assert_eq!(x.repeat_rows(2).unwrap().value().data()[..6], [1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let c = Var::concat(&[x, x.slice(1, 0, 1).unwrap()], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 1.0, 4.0, 5.0, 6.0, 4.0]);
    assert_eq!(x.gather(&[5, 0]).unwrap().value().data(), &[6.0, 1.0]);
    assert!(x.gather(&[6]).is_err());
    assert!(x.slice(1, 2, 2).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, &[4, 5])).unwrap();
        let b = tape.leaf(random_tensor(&mut rng, &[5, 3])).unwrap();
        let y = a.matmul(&b).unwrap().softmax(1).unwrap().l2_normalize(1e-12).unwrap();
        let loss = y.mul(&y.relu().unwrap()).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        (g.get(&a), g.get(&b))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1, b2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-100.0f64..100.0, 1..12), shift in -50.0f64..50.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(v.clone())).unwrap();
        let s = x.softmax(0).unwrap().value();
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        let shifted = x.add_scalar(shift).unwrap().softmax(0).unwrap().value();
        prop_assert!(close(s.data(), shifted.data(), 1e-12));
    }

    #[test]
    fn elementwise_grads(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5) {
        let s = vec![r, c];
        prop_assert!(check_op(&[s.clone(), s.clone()], seed, |v| v[0].mul(&v[1])) < 1e-5);
        prop_assert!(check_op(&[s.clone(), s.clone()], seed, |v| v[0].sub(&v[1])?.add(&v[0])) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].sigmoid()?.scale(1.7)) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].relu()) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].abs()) < 1e-5);
        prop_assert!(check_op(&[vec![], s.clone()], seed, |v| v[0].mul(&v[1])) < 1e-5);
        prop_assert!(check_op(&[s.clone(), vec![]], seed, |v| v[0].sub(&v[1])) < 1e-5);
    }

    #[test]
    fn matmul_grads(seed in 0u64..10_000, p in 1usize..4, q in 1usize..4, r in 1usize..4) {
        prop_assert!(check_op(&[vec![p, q], vec![q, r]], seed, |v| v[0].matmul(&v[1])) < 1e-5);
    }

    #[test]
    fn softmax_family_grads(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5, axis in 0usize..2) {
        let s = vec![r, c];
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].softmax(axis)) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].log_softmax(axis)) < 1e-5);
    }

    // Width 2 is excluded: its output is ±1 whatever the input, so the true
    // gradient is O(eps) and the difference quotient is pure rounding noise.
    #[test]
    fn layer_norm_grads(seed in 0u64..10_000, r in 1usize..4, c in 3usize..7) {
        prop_assert!(check_op(&[vec![r, c], vec![c], vec![c]], seed, |v| v[0].layer_norm(&v[1], &v[2], 1e-5)) < 1e-5);
    }

    #[test]
    fn reduce_and_normalize_grads(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5) {
        let s = vec![r, c];
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].mean(&[0])) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].sum(&[1])) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].l2_normalize(1e-12)) < 1e-5);
    }

    #[test]
    fn shape_op_grads(seed in 0u64..10_000, r in 1usize..4, c in 2usize..5) {
        let s = vec![r, c];
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].transpose()) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].reshape(&[r * c])) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].slice(1, 1, c - 1)) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].tile(3)) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].repeat_rows(2)) < 1e-5);
        prop_assert!(check_op(&[s.clone()], seed, |v| v[0].gather(&[0, r * c - 1, 0])) < 1e-5);
        prop_assert!(check_op(&[s.clone(), vec![r, 1]], seed, |v| Var::concat(&[v[0], v[1]], 1)) < 1e-5);
        prop_assert!(check_op(&[s.clone(), vec![1, c]], seed, |v| Var::concat(&[v[0], v[1]], 0)) < 1e-5);
    }
}

