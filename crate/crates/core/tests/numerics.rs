use gad_core::numerics::{grad_check, softmax_rows, Axis, Mask, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use gad_core::rng::SplitMix64;
use proptest::prelude::*;

fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
}

fn store_with(rng: &mut SplitMix64, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.add(format!("p{i}"), random(rng, r, c)))
        .collect();
    (s, ids)
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the scalar.
fn project<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>, NumericsError> {
    let (r, c) = v.dims();
    let mut rng = SplitMix64::new(seed);
    let w = v.tape().constant(random(&mut rng, r, c));
    Ok(v.mul(&w)?.sum())
}

const TOL: f64 = 1e-5;

fn check<F>(shapes: &[(usize, usize)], seed: u64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let mut rng = SplitMix64::new(seed);
    let (mut store, ids) = store_with(&mut rng, shapes);
    let report = grad_check(&mut store, &ids, 1e-5, TOL, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        project(f(tape, &vars)?, seed ^ 0xABCD)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1000.0, 0.0, 1000.0]]).unwrap();
    let y = softmax_rows(&x, None).unwrap();
    for r in 0..2 {
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let shifted = x.map(|v| v + 50.0);
    let y2 = softmax_rows(&shifted, None).unwrap();
    for (a, b) in y.data().iter().zip(y2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // e / (1 + e + e^2) for the middle entry of [1, 2, 3]
    let e = std::f64::consts::E;
    assert!((y.get(0, 1) - e / (1.0 + e + e * e)).abs() < 1e-12);
}

#[test]
fn masked_softmax_examples() {
    let x = Tensor::from_rows(&[vec![0.0, 5.0, 0.0]]).unwrap();
    let m = Mask::new(1, 3, vec![true, false, true]).unwrap();
    let y = softmax_rows(&x, Some(&m)).unwrap();
    assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
    let none = Mask::new(1, 3, vec![false; 3]).unwrap();
    assert_eq!(softmax_rows(&x, Some(&none)), Err(NumericsError::AllMaskedRow(0)));
}

#[test]
fn matmul_example() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    assert!(matches!(b.matmul(&b), Err(NumericsError::Shape(_))));
}

#[test]
fn concat_and_slice_values() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
    let rows = tape.concat(&[a, b], Axis::Rows).unwrap();
    assert_eq!(rows.dims(), (2, 2));
    assert_eq!(rows.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let cols = tape.concat(&[a, b], Axis::Cols).unwrap();
    assert_eq!(cols.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(cols.dims(), (1, 4));
    let s = rows.slice(Axis::Cols, 1, 2).unwrap();
    assert_eq!(s.value().data(), &[2.0, 4.0]);
}

#[test]
fn simple_gradients() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
    let tape = Tape::new();
    let v = tape.param(&store, x);
    // d/dx sum(x*x) = 2x
    let loss = v.mul(&v).unwrap().sum();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(x).data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::zeros(2, 2));
    let tape = Tape::new();
    let v = tape.param(&store, x);
    assert_eq!(tape.backward(v, &mut store), Err(NumericsError::NonScalarLoss(vec![2, 2])));
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x + x*x + exp(x), reused three times
    check(&[(3, 4)], 7, |_, v| {
        let x = v[0];
        x.add(&x.mul(&x)?)?.add(&x.exp())
    });
}

#[test]
fn gradcheck_matmul_transpose() {
    check(&[(3, 5), (4, 5)], 1, |_, v| v[0].matmul(&v[1].t()));
}

#[test]
fn gradcheck_elementwise() {
    check(&[(4, 3), (4, 3)], 2, |_, v| v[0].sub(&v[1])?.mul(&v[1]));
    check(&[(4, 3)], 3, |_, v| Ok(v[0].sigmoid()));
    check(&[(4, 3)], 4, |_, v| Ok(v[0].log_sigmoid().scale(-1.5)));
    check(&[(4, 3)], 5, |_, v| Ok(v[0].tanh().add_scalar(2.0)));
    check(&[(4, 3)], 6, |_, v| Ok(v[0].gelu()));
    check(&[(4, 3)], 8, |_, v| Ok(v[0].exp().add_scalar(1.0).ln().neg()));
}

#[test]
fn gradcheck_row_broadcasts() {
    check(&[(5, 3), (1, 3)], 9, |_, v| v[0].add_row(&v[1]));
    check(&[(5, 3), (1, 3)], 10, |_, v| v[0].mul_row(&v[1]));
}

#[test]
fn gradcheck_softmax_family() {
    check(&[(3, 6)], 11, |_, v| v[0].softmax());
    check(&[(3, 6)], 12, |_, v| v[0].log_softmax());
    let mask = Mask::from_fn(3, 6, |r, c| (r + c) % 3 != 0);
    check(&[(3, 6)], 13, move |_, v| v[0].masked_softmax(&mask));
    let mask = Mask::from_fn(3, 6, |r, c| c != r);
    check(&[(3, 6)], 14, move |_, v| v[0].masked_logsumexp(&mask));
}

#[test]
fn gradcheck_normalizations() {
    check(&[(4, 6)], 15, |_, v| v[0].layer_norm());
    check(&[(4, 6)], 16, |_, v| v[0].l2_normalize_rows());
}

#[test]
fn gradcheck_structure_ops() {
    check(&[(2, 3), (4, 3)], 17, |t, v| t.concat(&[v[0], v[1]], Axis::Rows));
    check(&[(2, 3), (2, 5)], 18, |t, v| t.concat(&[v[0], v[1]], Axis::Cols));
    check(&[(5, 4)], 19, |_, v| v[0].slice(Axis::Rows, 1, 4));
    check(&[(5, 4)], 20, |_, v| v[0].slice(Axis::Cols, 2, 4));
    check(&[(5, 4)], 21, |_, v| {
        let p = v[0].pick(&[(0, 0), (4, 3), (2, 1), (0, 0)])?;
        Ok(p.mean())
    });
}

#[test]
fn gradcheck_detects_wrong_derivative() {
    let mut rng = SplitMix64::new(99);
    let (mut store, ids) = store_with(&mut rng, &[(3, 3)]);
    let report = grad_check(&mut store, &ids, 1e-5, TOL, |tape, store| {
        let x = tape.param(store, ids[0]);
        // claims d/dx sin(x) = sin(x)
        Ok(x.map_with_grad(f64::sin, f64::sin).sum())
    })
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1e-2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradcheck_random_shapes(seed in any::<u64>(), n in 1usize..=8, k in 1usize..=8, m in 1usize..=8) {
        let mut rng = SplitMix64::new(seed);
        let (mut store, ids) = store_with(&mut rng, &[(n, k), (k, m), (1, m)]);
        let report = grad_check(&mut store, &ids, 1e-5, TOL, |tape, store| {
            let a = tape.param(store, ids[0]);
            let b = tape.param(store, ids[1]);
            let bias = tape.param(store, ids[2]);
            let h = a.matmul(&b)?.add_row(&bias)?.gelu();
            project(h.log_softmax()?, seed)
        })
        .unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..=8, m in 1usize..=8, scale in 0.1f64..100.0) {
        let mut rng = SplitMix64::new(seed);
        let x = random(&mut rng, n, m).map(|v| v * scale);
        let y = softmax_rows(&x, None).unwrap();
        for r in 0..n {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|p| *p >= 0.0));
        }
    }
}
