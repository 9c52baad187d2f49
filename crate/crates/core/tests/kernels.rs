use approx::assert_relative_eq;
use proptest::prelude::*;

use dtsim::engine::{kernels, DType, Data, Tensor};

fn ints(shape: &[usize], v: Vec<i64>) -> Tensor {
    Tensor::from_i64(shape, v).unwrap()
}

fn i64s(t: &Tensor) -> Vec<i64> {
    match t.data() {
        Data::I64(v) => v.clone(),
        other => panic!("expected i64, got {:?}", other.dtype()),
    }
}

fn naive_mm(a: &[i64], b: &[i64], m: usize, k: usize, n: usize) -> Vec<i64> {
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] = out[i * n + j].wrapping_add(a[i * k + p].wrapping_mul(b[p * n + j]));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn integer_mm_wraps_like_the_triple_loop(
        (m, k, n) in (1usize..=5, 1usize..=5, 1usize..=5),
        seed in prop::collection::vec(any::<i64>(), 50),
    ) {
        let a: Vec<i64> = (0..m * k).map(|i| seed[i % 50]).collect();
        let b: Vec<i64> = (0..k * n).map(|i| seed[(i + 25) % 50].rotate_left(i as u32)).collect();
        let got = kernels::mm(&ints(&[m, k], a.clone()), &ints(&[k, n], b.clone())).unwrap();
        prop_assert_eq!(i64s(&got), naive_mm(&a, &b, m, k, n));
    }

    #[test]
    fn integer_sum_is_order_free(mut v in prop::collection::vec(any::<i64>(), 1..40), rot in 0usize..40) {
        let fwd = i64s(&kernels::sum(&ints(&[v.len()], v.clone())).unwrap());
        let r = rot % v.len();
        v.rotate_left(r);
        v.reverse();
        prop_assert_eq!(fwd, i64s(&kernels::sum(&ints(&[v.len()], v)).unwrap()));
    }

    #[test]
    fn integer_sgd_shift(w in prop::collection::vec(-1000i64..1000, 1..20), k in 0u32..8) {
        let g: Vec<i64> = w.iter().map(|x| x.wrapping_mul(37) - 11).collect();
        let n = w.len();
        let out = kernels::sgd_update(&ints(&[n], w.clone()), &ints(&[n], g.clone()), 1.0 / f64::from(1u32 << k)).unwrap();
        let want: Vec<i64> = w.iter().zip(&g).map(|(a, b)| a - (b >> k)).collect();
        prop_assert_eq!(i64s(&out), want);
    }
}

#[test]
fn wrapping_elementwise() {
    let a = ints(&[2], vec![i64::MAX, i64::MIN]);
    let b = ints(&[2], vec![1, -1]);
    assert_eq!(i64s(&kernels::add(&a, &b).unwrap()), [i64::MIN, i64::MAX]);
    assert_eq!(i64s(&kernels::mul(&a, &ints(&[2], vec![2, 2])).unwrap()), [-2, 0]);
}

#[test]
fn integer_losses_skip_division() {
    let x = ints(&[2, 2], vec![1, 2, 3, 4]);
    let y = ints(&[2, 2], vec![0, 0, 5, 4]);
    assert_eq!(i64s(&kernels::mean(&x, 4).unwrap()), [10]);
    assert_eq!(i64s(&kernels::mse_loss(&x, &y, 4).unwrap()), [1 + 4 + 4]);
    let g = ints(&[], vec![3]);
    assert_eq!(i64s(&kernels::mse_grad(&x, &y, &g, 4).unwrap()), [6, 12, -12, 0]);
}

#[test]
fn integer_sgd_rejects_fractional_rates() {
    let w = ints(&[1], vec![5]);
    assert_eq!(i64s(&kernels::sgd_update(&w, &w, 3.0).unwrap()), [-10]);
    assert!(kernels::sgd_update(&w, &w, 0.3).is_err());
    assert!(kernels::sgd_update(&w, &w, -0.5).is_err());
}

#[test]
fn integer_dropout_needs_integral_scale() {
    let x = ints(&[3], vec![1, 2, 3]);
    let mask = Tensor::from_bool(&[3], vec![true, false, true]).unwrap();
    assert_eq!(i64s(&kernels::dropout_apply(&x, &mask, 2.0).unwrap()), [2, 0, 6]);
    assert!(kernels::dropout_apply(&x, &mask, 1.0 / 0.9).is_err());
}

#[test]
fn float_losses_divide_by_global_count() {
    let x = Tensor::from_f64(&[3], vec![0.1, 0.2, 0.7]).unwrap();
    let y = Tensor::from_f64(&[3], vec![0.0, 0.0, 1.0]).unwrap();
    assert_relative_eq!(kernels::mean(&x, 3).unwrap().item().unwrap(), 1.0 / 3.0, max_relative = 1e-15);
    assert_relative_eq!(kernels::mean(&x, 6).unwrap().item().unwrap(), 1.0 / 6.0, max_relative = 1e-15);
    assert_relative_eq!(kernels::mse_loss(&x, &y, 3).unwrap().item().unwrap(), (0.01 + 0.04 + 0.09) / 3.0, max_relative = 1e-14);
    assert_eq!(kernels::mse_loss(&x, &y, 3).unwrap().dtype(), DType::F64);
}
