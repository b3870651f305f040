use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use qwg_core::circuits::{to_unitary, CircuitSpec};
use qwg_core::fock::{
    coupler_unitary, distinguishable_distribution, output_amplitude, output_distribution,
    partially_distinguishable_distribution, permanent, FockState, ModeUnitary, C64,
};
use qwg_core::tcspc::count_coincidences;
use qwg_core::timestamps::TimestampStream;

fn haar(m: usize, seed: u64) -> ModeUnitary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    let z = DMatrix::from_fn(m, m, |_, _| C64::new(g(), g()) * FRAC_1_SQRT_2);
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..m {
        let ph = r[(j, j)] / r[(j, j)].norm();
        for i in 0..m {
            q[(i, j)] *= ph;
        }
    }
    ModeUnitary::new(q).unwrap()
}

/// Permanent by expansion over all permutations.
fn permanent_by_permutations(a: &DMatrix<C64>) -> C64 {
    fn rec(a: &DMatrix<C64>, row: usize, used: &mut Vec<bool>) -> C64 {
        if row == a.nrows() {
            return C64::new(1.0, 0.0);
        }
        let mut s = C64::new(0.0, 0.0);
        for c in 0..a.ncols() {
            if !used[c] {
                used[c] = true;
                s += a[(row, c)] * rec(a, row + 1, used);
                used[c] = false;
            }
        }
        s
    }
    rec(a, 0, &mut vec![false; a.ncols()])
}

fn fock(m: usize) -> impl Strategy<Value = FockState> {
    (1u32..=3).prop_flat_map(move |n| {
        prop::collection::vec(0..m, n as usize).prop_map(move |modes| {
            let mut occ = vec![0u32; m];
            for k in modes {
                occ[k] += 1;
            }
            FockState::new(occ).unwrap()
        })
    })
}

fn circuit() -> impl Strategy<Value = CircuitSpec> {
    (2usize..=6).prop_flat_map(|m| {
        prop::collection::vec(
            (0.0f64..=1.0, 0..m, 0..m, -6.3f64..6.3, any::<bool>()),
            1..12,
        )
        .prop_map(move |els| {
            let mut spec = CircuitSpec::new("random", m);
            for (r, a, b, phi, is_phase) in els {
                spec = if is_phase || a == b {
                    spec.phase(a, phi)
                } else {
                    spec.coupler(r, a, b)
                };
            }
            spec
        })
    })
}

fn sorted_times(max_len: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0u64..200_000, 0..max_len).prop_map(|mut v| {
        v.sort_unstable();
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permanent_matches_permutation_sum(n in 1usize..=5, seed in any::<u64>()) {
        let u = haar(n, seed);
        let got = permanent(u.matrix());
        let want = permanent_by_permutations(u.matrix());
        prop_assert!((got - want).norm() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized((m, input) in (2usize..=6).prop_flat_map(|m| (Just(m), fock(m))),
                                    seed in any::<u64>(), overlap in 0.0f64..=1.0) {
        let u = haar(m, seed);
        let q: f64 = output_distribution(&u, &input).unwrap().values().sum();
        let c: f64 = distinguishable_distribution(&u, &input).unwrap().values().sum();
        prop_assert!((q - 1.0).abs() < 1e-10);
        prop_assert!((c - 1.0).abs() < 1e-10);
        if input.photon_count() <= 2 {
            let d = partially_distinguishable_distribution(&u, &input, overlap).unwrap();
            prop_assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(d.values().all(|&p| p >= -1e-12));
        }
    }

    #[test]
    fn adjoint_reverses_amplitudes((m, s, t) in (2usize..=5).prop_flat_map(|m| {
                                       (Just(m), fock(m), fock(m))
                                   }), seed in any::<u64>()) {
        prop_assume!(s.photon_count() == t.photon_count());
        let u = haar(m, seed);
        let forward = output_amplitude(&u, &s, &t).unwrap();
        let back = output_amplitude(&u.adjoint(), &t, &s).unwrap();
        prop_assert!((forward - back.conj()).norm() < 1e-10);
    }

    #[test]
    fn couplers_are_unitary(r in 0.0f64..=1.0) {
        prop_assert!(coupler_unitary(r).unwrap().unitarity_deviation() < 1e-12);
    }

    #[test]
    fn random_circuits_are_unitary(spec in circuit()) {
        prop_assert!(to_unitary(&spec).unwrap().unitarity_deviation() < 1e-12);
    }

    #[test]
    fn coincidences_symmetric(a in sorted_times(200), b in sorted_times(200),
                              w in 0u64..5_000, off in -20_000i64..20_000) {
        let sa = TimestampStream::new("a", a).unwrap();
        let sb = TimestampStream::new("b", b).unwrap();
        let ab = count_coincidences(&sa, &sb, w, off, 1.0).count;
        let ba = count_coincidences(&sb, &sa, w, -off, 1.0).count;
        prop_assert_eq!(ab, ba);
        prop_assert!(ab as usize <= sa.len().min(sb.len()));
    }
}
