use proptest::prelude::*;

use crckd::gradcheck;
use crckd::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 5)) {
        let tape = Tape::new();
        let p = tape.constant(x).softmax(1).unwrap().data();
        for row in p.chunks(5) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(x in matrix(3, 4), c in -50.0f64..50.0) {
        let tape = Tape::new();
        let shifted = Tensor::new(vec![3, 4], x.data().iter().map(|v| v + c).collect()).unwrap();
        let a = tape.constant(x).softmax(1).unwrap().data();
        let b = tape.constant(shifted).softmax(1).unwrap().data();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(x in matrix(3, 6)) {
        let tape = Tape::new();
        let v = tape.constant(x);
        let a = v.log_softmax(1).unwrap().data();
        let b = v.softmax(1).unwrap().data();
        for (u, p) in a.iter().zip(&b) {
            prop_assert!((u - p.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn l2_rows_are_unit(x in matrix(5, 3)) {
        prop_assume!(x.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let tape = Tape::new();
        let g = tape.constant(x).l2_normalize().unwrap().data();
        for row in g.chunks(3) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_chain_gradient(a in matrix(3, 4), b in matrix(4, 2)) {
        let check = gradcheck::check(&a, 1e-5, |tape, x| {
            let w = tape.constant(b.clone());
            Ok(x.matmul(&w)?.log_sigmoid().sum())
        })
        .unwrap();
        prop_assert!(check.passes(1e-4), "rel err {}", check.rel_err);
    }

    #[test]
    fn normalized_softmax_gradient(x in matrix(2, 5)) {
        prop_assume!(x.data().chunks(5).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2));
        let check = gradcheck::check(&x, 1e-5, |_, v| {
            let g = v.l2_normalize()?;
            Ok(g.scale(3.0).log_softmax(1)?.mean())
        })
        .unwrap();
        prop_assert!(check.passes(1e-4), "rel err {}", check.rel_err);
    }
}

#[test]
fn backward_through_shared_subexpression() {
    // y = x·x + x  ⇒  dy/dx = 2x + 1
    let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let tape = Tape::new();
    let v = tape.param(&x);
    let y = v.mul(&v).unwrap().add(&v).unwrap().sum();
    tape.backward(y).unwrap();
    assert_eq!(v.grad().unwrap(), vec![2.0, -3.0, 7.0]);
}

#[test]
fn conv_pool_stack_gradient() {
    let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.71).cos() * 0.5).collect()).unwrap();
    let bias = Tensor::vector(vec![0.1, -0.2]);
    let check = gradcheck::check(&w, 1e-5, |tape, wv| {
        let xv = tape.constant(x.clone());
        let bv = tape.constant(bias.clone());
        Ok(xv.conv2d(&wv, &bv, 1)?.avg_pool2()?.exp().mean())
    })
    .unwrap();
    assert!(check.passes(1e-4), "rel err {}", check.rel_err);
}
