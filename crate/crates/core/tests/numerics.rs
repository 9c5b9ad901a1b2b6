use std::sync::Arc;

use composer_lab::numerics::{primitive_suite, Mask, SeededRng, Tape, Tensor, Var};

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeededRng::new(11);
    let a = rng.randn::<f64>(&[5, 7], 1.0);
    let b = rng.randn::<f64>(&[7, 2], 1.0);
    let got = a.matmul(&b).unwrap();
    for (g, o) in got.data().iter().zip(triple_loop(&a, &b)) {
        assert!((g - o).abs() <= 1e-6 * o.abs().max(1e-12));
    }
    for _ in 0..50 {
        let (m, k, n) = (rng.index(1, 33), rng.index(1, 33), rng.index(1, 33));
        let a = rng.randn::<f32>(&[m, k], 1.0);
        let b = rng.randn::<f32>(&[k, n], 1.0);
        let tape = Tape::inference();
        let got = tape
            .matmul(&Var::constant(a.clone()), &Var::constant(b.clone()))
            .unwrap();
        let oracle = triple_loop(&a.cast(), &b.cast());
        for (g, o) in got.value().data().iter().zip(oracle) {
            // accumulated f32 rounding, scaled by the magnitude of the terms
            assert!((*g as f64 - o).abs() <= 1e-6 * (k as f64).sqrt() * 4.0 + 1e-6 * o.abs());
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = SeededRng::new(5);
    let tape = Tape::<f64>::inference();
    for _ in 0..20 {
        let x = rng.randn::<f64>(&[3, 6], 3.0);
        let mask = Arc::new(Mask::from_fn(3, 6, |q, k| (q + k) % 3 != 1));
        let p = tape.softmax_masked(&Var::constant(x.clone()), Some(&mask)).unwrap();
        for q in 0..3 {
            let z: f64 = (0..6).filter(|&k| mask.get(q, k)).map(|k| x.at(&[q, k]).exp()).sum();
            let mut row_sum = 0.0;
            for k in 0..6 {
                let want = if mask.get(q, k) { x.at(&[q, k]).exp() / z } else { 0.0 };
                let got = p.value().at(&[q, k]);
                if !mask.get(q, k) {
                    assert_eq!(got, 0.0);
                }
                assert!((got - want).abs() <= 1e-12);
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn two_layer_net_gradient() {
    let mut rng = SeededRng::new(9);
    let x = rng.randn::<f64>(&[4, 3], 1.0);
    let w1 = rng.randn::<f64>(&[5, 3], 0.7);
    let w2 = rng.randn::<f64>(&[2, 5], 0.7);
    let report = composer_lab::numerics::finite_diff_check_many(
        |t, v| {
            let h = t.unary(&t.matmul_nt(&v[0], &v[1])?, composer_lab::numerics::Unary::Tanh)?;
            let y = t.matmul_nt(&h, &v[2])?;
            t.sum(&t.square(&y)?)
        },
        &[x, w1, w2],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel <= 1e-6, "{report:?}");
}

#[test]
fn every_primitive_passes_finite_differences() {
    for (name, report) in primitive_suite(100, 2024, 1e-5).unwrap() {
        assert!(report.max_rel <= 1e-6, "{name}: {report:?}");
    }
}
