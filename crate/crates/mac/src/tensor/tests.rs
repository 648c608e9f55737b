use super::*;
use crate::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::param(rows, cols, uniform_values(rng, rows * cols, 1.0))
}

#[test]
fn tensor_accessors() {
    let t = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(t.shape(), (2, 3));
    assert_eq!(t.len(), 6);
    assert_eq!(t.value_at(1, 2), 6.0);
    assert_eq!(t.row_vec(0), vec![1.0, 2.0, 3.0]);
    assert!(!t.requires_grad());
    assert!(t.grad().is_none());

    let p = Tensor::param(1, 2, vec![0.5, -0.5]);
    assert!(p.requires_grad());
    assert_eq!(p.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn deep_clone_is_independent() {
    let p = Tensor::param(1, 2, vec![1.0, 2.0]);
    let q = p.deep_clone();
    p.nudge(0, 10.0);
    assert_eq!(q.values(), vec![1.0, 2.0]);
    assert_eq!(p.values(), vec![11.0, 2.0]);
}

#[test]
fn matmul_identity_and_values() {
    let tape = Tape::new();
    let eye = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let out = tape.matmul(&eye, &a).unwrap();
    assert_eq!(out.values(), a.values());

    let row = Tensor::new(1, 2, vec![1.0, 2.0]);
    let col = Tensor::new(2, 1, vec![3.0, 4.0]);
    let dot = tape.matmul(&row, &col).unwrap();
    assert_eq!(dot.values(), vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let tape = Tape::new();
    let a = Tensor::zeros(2, 3);
    let b = Tensor::zeros(2, 3);
    let err = tape.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_param(&mut rng, 3, 2);
    let b = rand_param(&mut rng, 2, 4);
    let worst = grad_check(
        |tape| {
            let m = tape.matmul(&a, &b)?;
            tape.sum_all(&m)
        },
        &[&a, &b],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn concat_cols_values_and_empty() {
    let tape = Tape::new();
    let a = Tensor::new(2, 1, vec![1.0, 2.0]);
    let b = Tensor::new(2, 1, vec![3.0, 4.0]);
    let out = tape.concat_cols(&a, &b).unwrap();
    assert_eq!(out.shape(), (2, 2));
    assert_eq!(out.values(), vec![1.0, 3.0, 2.0, 4.0]);

    let none = Tensor::zeros(2, 0);
    let same = tape.concat_cols(&a, &none).unwrap();
    assert_eq!(same.values(), a.values());

    let short = Tensor::zeros(3, 1);
    assert!(matches!(
        tape.concat_cols(&a, &short),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn concat_cols_routes_gradients_to_both_sides() {
    let a = Tensor::param(2, 2, vec![1.0; 4]);
    let b = Tensor::param(2, 1, vec![1.0; 2]);
    let tape = Tape::new();
    let out = tape.concat_cols(&a, &b).unwrap();
    let loss = tape.sum_all(&out).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    assert_eq!(b.grad().unwrap(), vec![1.0; 2]);
}

#[test]
fn softmax_columns_values() {
    let tape = Tape::new();
    let uniform = Tensor::new(3, 1, vec![0.0, 0.0, 0.0]);
    let out = tape.softmax_columns(&uniform, None).unwrap();
    for v in out.values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let two = Tensor::new(2, 1, vec![0.0, 3.0f64.ln()]);
    let out = tape.softmax_columns(&two, None).unwrap();
    let v = out.values();
    assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_columns_masked_rows_are_exact_zeros() {
    let tape = Tape::new();
    let x = Tensor::new(3, 1, vec![5.0, 2.0, 7.0]);
    let out = tape
        .softmax_columns(&x, Some(&[true, true, false]))
        .unwrap();
    let v = out.values();
    let z = (5.0f64.exp() + 2.0f64.exp()).ln();
    assert!((v[0] - (5.0 - z).exp()).abs() < 1e-12);
    assert!((v[1] - (2.0 - z).exp()).abs() < 1e-12);
    assert_eq!(v[2], 0.0);

    assert!(matches!(
        tape.softmax_columns(&x, Some(&[false, false, false])),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn softmax_columns_survives_large_inputs() {
    let tape = Tape::new();
    let x = Tensor::new(2, 1, vec![1000.0, 1000.0]);
    let out = tape.softmax_columns(&x, None).unwrap();
    for v in out.values() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn softmax_gradients_match_finite_differences_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_param(&mut rng, 4, 3);
    let w = Tensor::new(4, 3, uniform_values(&mut rng, 12, 1.0));
    let mask = [true, false, true, true];
    let worst = grad_check(
        |tape| {
            let s = tape.softmax_columns(&x, Some(&mask))?;
            let weighted = tape.mul(&s, &w)?;
            tape.sum_all(&weighted)
        },
        &[&x],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");

    // Masked coordinates get exactly zero gradient.
    x.zero_grad();
    let tape = Tape::new();
    let s = tape.softmax_columns(&x, Some(&mask)).unwrap();
    let loss = tape.sum_all(&tape.mul(&s, &w).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    let g = x.grad().unwrap();
    assert_eq!(&g[3..6], &[0.0, 0.0, 0.0]);
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let x = Tensor::new(1, 3, vec![0.0, 38.0, -38.0]);
    let t = tape.tanh(&x).unwrap();
    assert_eq!(t.value_at(0, 0), 0.0);

    let s = tape.sigmoid(&x).unwrap();
    assert_eq!(s.value_at(0, 0), 0.5);
    assert_eq!(s.value_at(0, 1), 1.0);
    let tiny = s.value_at(0, 2);
    assert!(tiny > 0.0 && tiny < 1e-15);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_param(&mut rng, 2, 3);
    let y = rand_param(&mut rng, 2, 3);
    let worst = grad_check(
        |tape| {
            let t = tape.tanh(&x)?;
            let s = tape.sigmoid(&y)?;
            let sum = tape.add(&t, &s)?;
            let prod = tape.mul(&sum, &sum)?;
            let scaled = tape.scale(&prod, 0.7)?;
            tape.sum_all(&scaled)
        },
        &[&x, &y],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn add_and_mul_reject_shape_mismatch() {
    let tape = Tape::new();
    let a = Tensor::zeros(2, 2);
    let b = Tensor::zeros(2, 3);
    assert!(matches!(tape.add(&a, &b), Err(Error::Shape { .. })));
    assert!(matches!(tape.mul(&a, &b), Err(Error::Shape { .. })));
}

#[test]
fn add_row_broadcasts_and_checks_shape() {
    let tape = Tape::new();
    let m = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let r = Tensor::new(1, 2, vec![10.0, 20.0]);
    let out = tape.add_row(&m, &r).unwrap();
    assert_eq!(out.values(), vec![11.0, 22.0, 13.0, 24.0]);

    let bad = Tensor::new(1, 3, vec![0.0; 3]);
    assert!(matches!(tape.add_row(&m, &bad), Err(Error::Shape { .. })));
}

#[test]
fn add_row_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = rand_param(&mut rng, 3, 2);
    let r = rand_param(&mut rng, 1, 2);
    let worst = grad_check(
        |tape| {
            let out = tape.add_row(&m, &r)?;
            let sq = tape.mul(&out, &out)?;
            tape.sum_all(&sq)
        },
        &[&m, &r],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn mean_rows_uses_valid_count_as_divisor() {
    let tape = Tape::new();
    let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.mean_rows(&a, None).unwrap().values(), vec![2.0, 3.0]);

    let single = Tensor::new(1, 2, vec![7.0, 8.0]);
    assert_eq!(
        tape.mean_rows(&single, None).unwrap().values(),
        vec![7.0, 8.0]
    );

    let padded = Tensor::new(3, 2, vec![1.0, 2.0, 9.0, 9.0, 3.0, 4.0]);
    let out = tape
        .mean_rows(&padded, Some(&[true, false, true]))
        .unwrap();
    assert_eq!(out.values(), vec![2.0, 3.0]);

    assert!(matches!(
        tape.mean_rows(&padded, Some(&[false, false, false])),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn mean_rows_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_param(&mut rng, 4, 3);
    let mask = [true, false, true, true];
    let worst = grad_check(
        |tape| {
            let m = tape.mean_rows(&a, Some(&mask))?;
            let sq = tape.mul(&m, &m)?;
            tape.sum_all(&sq)
        },
        &[&a],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn flatten_and_stack_values() {
    let tape = Tape::new();
    let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let flat = tape.flatten(&a).unwrap();
    assert_eq!(flat.shape(), (1, 4));
    assert_eq!(flat.values(), vec![1.0, 2.0, 3.0, 4.0]);

    let r0 = Tensor::new(1, 2, vec![1.0, 2.0]);
    let r1 = Tensor::new(1, 2, vec![3.0, 4.0]);
    let stacked = tape.stack_rows(&[r0.clone(), r1]).unwrap();
    assert_eq!(stacked.values(), vec![1.0, 2.0, 3.0, 4.0]);

    let only = tape.stack_rows(&[r0.clone()]).unwrap();
    assert_eq!(only.values(), r0.values());

    let wide = Tensor::new(1, 3, vec![0.0; 3]);
    assert!(matches!(
        tape.stack_rows(&[r0, wide]),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(tape.stack_rows(&[]), Err(Error::Contract(_))));
}

#[test]
fn stack_rows_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let r0 = rand_param(&mut rng, 1, 3);
    let r1 = rand_param(&mut rng, 1, 3);
    let worst = grad_check(
        |tape| {
            let s = tape.stack_rows(&[r0.clone(), r1.clone(), r0.clone()])?;
            let f = tape.flatten(&s)?;
            let sq = tape.mul(&f, &f)?;
            tape.sum_all(&sq)
        },
        &[&r0, &r1],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn transpose_values_and_gradients() {
    let tape = Tape::new();
    let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let t = tape.transpose(&a).unwrap();
    assert_eq!(t.shape(), (3, 2));
    assert_eq!(t.values(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let back = tape.transpose(&t).unwrap();
    assert_eq!(back.values(), a.values());

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = rand_param(&mut rng, 2, 3);
    let w = Tensor::new(3, 2, uniform_values(&mut rng, 6, 1.0));
    let worst = grad_check(
        |tape| {
            let t = tape.transpose(&p)?;
            let prod = tape.mul(&t, &w)?;
            tape.sum_all(&prod)
        },
        &[&p],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-6, "rel err {worst}");
}

#[test]
fn gather_rows_looks_up_and_scatters_gradient()
{
    let table = Tensor::param(
        4,
        2,
        vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0],
    );
    let tape = Tape::new();
    let out = tape.gather_rows(&table, &[3, 1, 3]).unwrap();
    assert_eq!(out.values(), vec![30.0, 31.0, 10.0, 11.0, 30.0, 31.0]);

    let loss = tape.sum_all(&out).unwrap();
    tape.backward(&loss).unwrap();
    let g = table.grad().unwrap();
    // Row 3 was fetched twice, row 1 once, rows 0 and 2 never.
    assert_eq!(g, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    assert!(matches!(
        tape.gather_rows(&table, &[4]),
        Err(Error::Index { .. })
    ));
}

#[test]
fn bce_values_and_target_validation() {
    let tape = Tape::new();
    let half = Tensor::scalar(0.5);
    let loss = tape.bce(&half, 1.0).unwrap();
    assert!((loss.item() - 2.0f64.ln()).abs() < 1e-15);

    // Saturated probabilities stay finite through the internal clamp.
    let one = Tensor::scalar(1.0);
    let hit = tape.bce(&one, 1.0).unwrap();
    assert!(hit.item().abs() < 1e-11);
    let miss = tape.bce(&one, 0.0).unwrap();
    assert!(miss.item().is_finite() && miss.item() > 20.0);

    assert!(matches!(tape.bce(&half, 0.5), Err(Error::Contract(_))));
    let wide = Tensor::new(1, 2, vec![0.5, 0.5]);
    assert!(matches!(tape.bce(&wide, 1.0), Err(Error::Contract(_))));
}

#[test]
fn sigmoid_bce_composition_gives_prob_minus_target() {
    // d loss / d logit through sigmoid then cross-entropy is p - y.
    for (z, y) in [(1.0, 0.0), (-0.3, 1.0), (2.5, 1.0), (0.0, 0.0)] {
        let logit = Tensor::param(1, 1, vec![z]);
        let tape = Tape::new();
        let p = tape.sigmoid(&logit).unwrap();
        let loss = tape.bce(&p, y).unwrap();
        tape.backward(&loss).unwrap();
        let g = logit.grad().unwrap()[0];
        let expect = 1.0 / (1.0 + (-z).exp()) - y;
        assert!((g - expect).abs() < 1e-12, "z={z} y={y} g={g}");
    }
}

#[test]
fn bce_gradients_match_finite_differences() {
    let x = Tensor::param(1, 1, vec![0.4]);
    let worst = grad_check(
        |tape| {
            let s = tape.sum_all(&x)?;
            let p = tape.sigmoid(&s)?;
            tape.bce(&p, 1.0)
        },
        &[&x],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-8, "rel err {worst}");
}

#[test]
fn backward_on_bare_leaf_gives_unit_gradient() {
    let x = Tensor::param(1, 1, vec![5.0]);
    let tape = Tape::new();
    tape.backward(&x).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}

#[test]
fn fan_out_accumulates() {
    let x = Tensor::param(1, 1, vec![3.0]);
    let tape = Tape::new();
    let y = tape.add(&x, &x).unwrap();
    tape.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0]);
}

#[test]
fn repeated_backward_exactly_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = rand_param(&mut rng, 3, 3);
    let tape = Tape::new();
    let t = tape.tanh(&x).unwrap();
    let m = tape.matmul(&t, &t).unwrap();
    let loss = tape.sum_all(&m).unwrap();
    tape.backward(&loss).unwrap();
    let once = x.grad().unwrap();
    tape.backward(&loss).unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(twice.iter()) {
        assert_eq!(*b, 2.0 * *a);
    }
}

#[test]
fn constant_branches_produce_no_gradient() {
    let c = Tensor::new(2, 2, vec![1.0; 4]);
    let p = Tensor::param(2, 2, vec![1.0; 4]);
    let tape = Tape::new();
    let prod = tape.matmul(&c, &p).unwrap();
    let loss = tape.sum_all(&prod).unwrap();
    tape.backward(&loss).unwrap();
    assert!(c.grad().is_none());
    assert_eq!(p.grad().unwrap(), vec![2.0; 4]);
}

#[test]
fn tensors_from_another_tape_are_rejected() {
    let first = Tape::new();
    let x = Tensor::param(1, 1, vec![1.0]);
    let y = first.tanh(&x).unwrap();

    let second = Tape::new();
    assert!(matches!(second.tanh(&y), Err(Error::Contract(_))));
    assert!(matches!(second.backward(&y), Err(Error::Contract(_))));

    // Leaves migrate freely between tapes.
    let z = second.tanh(&x).unwrap();
    assert_eq!(z.values(), y.values());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::param(1, 2, vec![1.0, 2.0]);
    let tape = Tape::new();
    let y = tape.tanh(&x).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn grad_check_catches_simple_square() {
    let x = Tensor::param(1, 1, vec![3.0]);
    let worst = grad_check(
        |tape| {
            let sq = tape.mul(&x, &x)?;
            tape.sum_all(&sq)
        },
        &[&x],
        DEFAULT_GRAD_CHECK_EPS,
    )
    .unwrap();
    assert!(worst < 1e-9, "rel err {worst}");
    // Analytic gradient of x^2 at 3 is 6; the check leaves it in place.
    assert!((x.grad().unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn every_op_composed_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = rand_param(&mut rng, 5, 3);
        let w = rand_param(&mut rng, 3, 4);
        let v = rand_param(&mut rng, 1, 4);
        let worst = grad_check(
            |tape| {
                let g = tape.gather_rows(&table, &[0, 2, 4, 2])?;
                let gt = tape.transpose(&g)?;
                let s = tape.add(&w, &gt)?;
                let m = tape.mul(&s, &s)?;
                let ar = tape.add_row(&m, &v)?;
                let sm = tape.softmax_columns(&ar, Some(&[true, true, false]))?;
                let th = tape.tanh(&sm)?;
                let tht = tape.transpose(&th)?;
                let mm = tape.matmul(&th, &tht)?;
                let cc = tape.concat_cols(&mm, &sm)?;
                let mr = tape.mean_rows(&cc, Some(&[true, false, true]))?;
                let half = tape.scale(&mr, 0.5)?;
                let st = tape.stack_rows(&[mr.clone(), half])?;
                let fl = tape.flatten(&st)?;
                let sg = tape.sigmoid(&fl)?;
                let su = tape.sum_all(&sg)?;
                let shrunk = tape.scale(&su, 0.1)?;
                let p = tape.sigmoid(&shrunk)?;
                tape.bce(&p, 1.0)
            },
            &[&table, &w, &v],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(worst < 1e-4, "seed {seed}: rel err {worst}");
    }
}

proptest! {
    #[test]
    fn softmax_columns_sum_to_one_over_valid_rows(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        mask in proptest::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(mask.iter().any(|&b| b));
        let x = Tensor::new(4, 3, vals);
        let tape = Tape::new();
        let s = tape.softmax_columns(&x, Some(&mask)).unwrap();
        let v = s.values();
        for j in 0..3 {
            let mut sum = 0.0;
            for i in 0..4 {
                if mask[i] {
                    sum += v[i * 3 + j];
                } else {
                    prop_assert_eq!(v[i * 3 + j], 0.0);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_columns_invariant_to_row_shift(
        vals in proptest::collection::vec(-20.0f64..20.0, 6),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::new(3, 2, vals.clone());
        let shifted = Tensor::new(3, 2, vals.iter().map(|v| v + shift).collect());
        let tape = Tape::new();
        let a = tape.softmax_columns(&x, None).unwrap().values();
        let b = tape.softmax_columns(&shifted, None).unwrap().values();
        for (p, q) in a.iter().zip(b.iter()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn flatten_of_stack_equals_concatenation(
        r0 in proptest::collection::vec(-5.0f64..5.0, 3),
        r1 in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let a = Tensor::new(1, 3, r0.clone());
        let b = Tensor::new(1, 3, r1.clone());
        let tape = Tape::new();
        let st = tape.stack_rows(&[a, b]).unwrap();
        let fl = tape.flatten(&st).unwrap();
        let mut expect = r0;
        expect.extend(r1);
        prop_assert_eq!(fl.values(), expect);
    }

    #[test]
    fn matmul_transpose_identity(
        av in proptest::collection::vec(-3.0f64..3.0, 6),
        bv in proptest::collection::vec(-3.0f64..3.0, 12),
    ) {
        let a = Tensor::new(2, 3, av);
        let b = Tensor::new(3, 4, bv);
        let tape = Tape::new();
        let ab = tape.matmul(&a, &b).unwrap();
        let abt = tape.transpose(&ab).unwrap();
        let bt = tape.transpose(&b).unwrap();
        let at = tape.transpose(&a).unwrap();
        let btat = tape.matmul(&bt, &at).unwrap();
        for (x, y) in abt.values().iter().zip(btat.values().iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
