use modestruct::forward_model::{full_jpd, ModeSpec, ProbMatrix, SourceModel};
use modestruct::reduction::{marginalize, marginalize_counts, Arm};
use modestruct::sampling::{sample_counts, to_probabilities, CountMatrix};
use modestruct::statistics::ModeType;
use proptest::prelude::*;

fn source() -> ProbMatrix {
    let m = SourceModel::new(
        vec![
            ModeSpec::conjugated(ModeType::Thermal, 3.0, 0.5, 0.6),
            ModeSpec::signal(ModeType::Poissonian, 0.2),
        ],
        8,
    )
    .unwrap();
    full_jpd(&m).unwrap()
}

fn max_norm_error(jpd: &ProbMatrix, n_tot: u64, seed: u64) -> f64 {
    let c = sample_counts(jpd, n_tot, seed).unwrap();
    let (p, _) = to_probabilities(&c).unwrap();
    p.max_abs_diff(jpd)
}

#[test]
fn law_of_large_numbers() {
    let jpd = source();
    let median = |n_tot: u64| {
        let mut e: Vec<f64> = (0..9).map(|s| max_norm_error(&jpd, n_tot, s)).collect();
        e.sort_by(f64::total_cmp);
        e[4]
    };
    let (a, b, c) = (median(1_000), median(100_000), median(10_000_000));
    assert!(a > b && b > c, "{a} {b} {c}");
    // O(1/sqrt(n)): a hundredfold more trials shrinks the error about tenfold
    for (big, small) in [(a, b), (b, c)] {
        let ratio = big / small;
        assert!((3.0..30.0).contains(&ratio), "ratio {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn estimates_keep_total_mass(n_tot in 1u64..200_000, seed in any::<u64>()) {
        let jpd = source();
        let c = sample_counts(&jpd, n_tot, seed).unwrap();
        let (p, _) = to_probabilities(&c).unwrap();
        let overflow = c.overflow() as f64 / n_tot as f64;
        prop_assert_eq!(c.in_range() + c.overflow(), n_tot);
        prop_assert!((p.total() + overflow - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reproducible(n_tot in 1u64..50_000, seed in any::<u64>()) {
        let jpd = source();
        prop_assert_eq!(sample_counts(&jpd, n_tot, seed).unwrap(), sample_counts(&jpd, n_tot, seed).unwrap());
    }

    #[test]
    fn marginals_conserve_mass(n_tot in 1u64..50_000, seed in any::<u64>()) {
        let jpd = source();
        for arm in [Arm::Signal, Arm::Idler] {
            let r = marginalize(&jpd, arm);
            prop_assert!((r.total() - jpd.total()).abs() < 1e-14);
        }
        let c = sample_counts(&jpd, n_tot, seed).unwrap();
        for arm in [Arm::Signal, Arm::Idler] {
            let r = marginalize_counts(&c, arm);
            prop_assert_eq!(r.counts.as_ref().unwrap().iter().sum::<u64>(), c.in_range());
            let sigma = r.uncertainties.as_ref().unwrap();
            for (p, s) in r.probs.iter().zip(sigma) {
                let want = (p / n_tot as f64).sqrt().max(1.0 / n_tot as f64);
                prop_assert!((s - want).abs() <= 1e-15 * want.max(1.0));
            }
        }
    }
}

#[test]
fn count_matrix_contracts() {
    assert!(CountMatrix::new(1, vec![1, 2, 3], 10).is_err());
    assert!(CountMatrix::new(1, vec![1, 2, 3, 4], 5).is_err());
    assert!(sample_counts(&source(), 0, 1).is_err());
    let c = CountMatrix::new(1, vec![1, 2, 3, 4], 12).unwrap();
    assert_eq!(c.overflow(), 2);
    assert!((c.overflow_fraction() - 2.0 / 12.0).abs() < 1e-15);
}
