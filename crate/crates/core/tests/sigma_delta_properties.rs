mod common;

use framequant::bounds::{vector_bound, vector_bound_generic};
use framequant::frames::{find_permutation, frame_variation, Frame};
use framequant::sigma_delta::{quantize_vector, sd_quantize_sequence, Alphabet};
use proptest::prelude::*;

fn alphabet() -> impl Strategy<Value = Alphabet> {
    (prop::sample::select(vec![1u32, 2, 4, 8]), 0u32..=4)
        .prop_map(|(k, e)| Alphabet::new(k, 1.0 / f64::from(1u32 << e)).unwrap())
}

fn in_range(a: &Alphabet) -> impl Strategy<Value = Vec<f64>> {
    let m = a.max_value();
    prop::collection::vec(-m..=m, 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn state_stays_within_half_step((a, x) in alphabet().prop_flat_map(|a| (Just(a), in_range(&a)))) {
        let t = sd_quantize_sequence(&x, &a);
        prop_assert!(!t.unstable_input);
        prop_assert_eq!(t.u[0], 0.0);
        for u in &t.u {
            prop_assert!(u.abs() <= a.step() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn telescoping_and_determinism((a, x) in alphabet().prop_flat_map(|a| (Just(a), in_range(&a)))) {
        let t = sd_quantize_sequence(&x, &a);
        let mut acc = 0.0;
        for (n, (xn, qn)) in x.iter().zip(&t.q).enumerate() {
            acc = acc + xn - qn;
            prop_assert_eq!(acc, t.u[n + 1]);
        }
        prop_assert_eq!(sd_quantize_sequence(&x, &a), t);
    }

    #[test]
    fn vector_error_dominated(
        d in prop::sample::select(vec![3usize, 4, 6, 8]),
        extra in 0usize..200,
        a in alphabet(),
        seed in any::<u64>(),
        harmonic in any::<bool>(),
    ) {
        let n = d + extra;
        let mut rng = common::rng(seed);
        let f = if harmonic { Frame::harmonic(d, n).unwrap() } else { common::random_funtf(&mut rng, d, n) };
        let p = find_permutation(&f).unwrap();
        let x = common::vector_in_ball(&mut rng, d, a.max_value());
        let q = quantize_vector(&x, &f, &p, &a).unwrap();
        let err = (&x - &q.reconstruction).norm();
        let variation = frame_variation(&f, &p).unwrap();
        prop_assert!(err <= vector_bound(a.step(), d, n, variation).unwrap() + 1e-12);
        if !harmonic {
            prop_assert!(err <= vector_bound_generic(a.step(), d, n).unwrap() + 1e-12);
        }
    }
}

#[test]
fn harmonic_three_dim_example_bound() {
    let mut rng = common::rng(11);
    for n in [3usize, 7, 16, 64, 200] {
        let f = Frame::harmonic(3, n).unwrap();
        let p = find_permutation(&f).unwrap();
        for _ in 0..50 {
            let a = Alphabet::new(2, 0.25).unwrap();
            let x = common::vector_in_ball(&mut rng, 3, a.max_value());
            let q = quantize_vector(&x, &f, &p, &a).unwrap();
            let bound = 0.25 * 3.0 / (2.0 * n as f64) * (2.0 * std::f64::consts::PI * 4.0 / 3f64.sqrt() + 1.0);
            assert!((&x - &q.reconstruction).norm() <= bound);
        }
    }
}
