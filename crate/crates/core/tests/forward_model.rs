use modestruct::forward_model::{experiment_jpd, full_jpd, ExperimentParams, ModeSpec, Occupancy, SourceModel};
use modestruct::reduction::{marginalize, Arm};
use modestruct::statistics::{apply_loss, convolve, pmf, ModeType, Pmf};
use proptest::prelude::*;

fn mode_spec() -> impl Strategy<Value = ModeSpec> {
    let t = prop_oneof![Just(ModeType::Thermal), Just(ModeType::Poissonian), Just(ModeType::SinglePhoton)];
    (t, 0.0..2.0f64, 0usize..3, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(t, mu, occ, es, ei)| {
        let mu = if t == ModeType::SinglePhoton { mu.min(1.0) } else { mu };
        match occ {
            0 => ModeSpec::conjugated(t, mu, es, ei),
            1 => ModeSpec::signal(t, mu),
            _ => ModeSpec::idler(t, mu),
        }
    })
}

fn source_model() -> impl Strategy<Value = SourceModel> {
    (prop::collection::vec(mode_spec(), 0..4), 1usize..14).prop_map(|(m, n)| SourceModel::new(m, n).unwrap())
}

/// Arm distribution predicted from the modes directly.
fn predicted_arm(model: &SourceModel, arm: Arm) -> Pmf {
    let n_max = model.n_max;
    let mut acc = Pmf::vacuum(n_max);
    for m in &model.modes {
        let part = match (m.occupancy, arm) {
            (Occupancy::Conjugated, Arm::Signal) => apply_loss(&pmf(m.mode_type, m.mu, 2000).unwrap(), m.eta_s, n_max),
            (Occupancy::Conjugated, Arm::Idler) => apply_loss(&pmf(m.mode_type, m.mu, 2000).unwrap(), m.eta_i, n_max),
            (Occupancy::Signal, Arm::Signal) | (Occupancy::Idler, Arm::Idler) => pmf(m.mode_type, m.mu, n_max),
            _ => continue,
        }
        .unwrap();
        acc = convolve(&acc, &part, n_max);
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_and_nonnegative(model in source_model()) {
        let m = full_jpd(&model).unwrap();
        prop_assert!((m.total() + m.tail_mass() - 1.0).abs() < 1e-10);
        prop_assert!(m.entries().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn marginals_match_arm_prediction(model in source_model()) {
        // the row sums only see idler photons inside the window, so the
        // window must hold essentially all of both arms
        let model = SourceModel { n_max: 100, ..model };
        let m = full_jpd(&model).unwrap();
        for arm in [Arm::Signal, Arm::Idler] {
            let got = marginalize(&m, arm);
            let want = predicted_arm(&model, arm);
            for (a, b) in got.probs.iter().zip(want.probs()) {
                prop_assert!((a - b).abs() < 1e-10, "{arm:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mirroring_transposes(model in source_model()) {
        let a = full_jpd(&model).unwrap().transpose();
        let b = full_jpd(&model.mirrored()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn widening_the_window_moves_only_tail_mass(model in source_model(), extra in 1usize..6) {
        let narrow = full_jpd(&model).unwrap();
        let wide_model = SourceModel { n_max: model.n_max + extra, ..model.clone() };
        let wide = full_jpd(&wide_model).unwrap();
        let slack = narrow.tail_mass() + 1e-14;
        for ns in 0..narrow.dim() {
            for ni in 0..narrow.dim() {
                prop_assert!((narrow.get(ns, ni) - wide.get(ns, ni)).abs() <= slack);
            }
        }
    }

    #[test]
    fn lossless_conjugated_light_has_even_totals(
        mus in prop::collection::vec(0.0..2.0f64, 1..4),
        n_max in 1usize..14,
    ) {
        let modes = mus.iter().map(|&mu| ModeSpec::conjugated(ModeType::Thermal, mu, 1.0, 1.0)).collect();
        let m = full_jpd(&SourceModel::new(modes, n_max).unwrap()).unwrap();
        for ns in 0..m.dim() {
            for ni in 0..m.dim() {
                if (ns + ni) % 2 == 1 {
                    prop_assert_eq!(m.get(ns, ni), 0.0);
                }
            }
        }
    }

    #[test]
    fn shared_loss_routes_agree(
        mu1 in 0.0..20.0f64, mu2 in 0.0..3.0f64,
        eta_s in 0.05..1.0f64, eta_i in 0.05..1.0f64,
        mu_bs in 0.0..0.5f64, mu_bi in 0.0..0.5f64,
    ) {
        let p = ExperimentParams { mu1, mu2, eta_s, eta_i, mu_bs, mu_bi };
        let a = experiment_jpd(&p, 40).unwrap();
        let b = full_jpd(&p.to_model(40).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn canonical_order_is_stable(model in source_model()) {
        let mut a = model.clone();
        a.canonicalize();
        let mut b = a.clone();
        b.modes.reverse();
        b.canonicalize();
        prop_assert_eq!(&a, &b);
        let before = full_jpd(&model).unwrap();
        let after = full_jpd(&a).unwrap();
        prop_assert!(before.max_abs_diff(&after) < 1e-14);
    }
}

#[test]
fn invalid_modes_are_rejected() {
    assert!(SourceModel::new(vec![ModeSpec::conjugated(ModeType::Thermal, 1.0, 1.2, 0.5)], 5).is_err());
    assert!(SourceModel::new(vec![ModeSpec::signal(ModeType::SinglePhoton, 1.2)], 5).is_err());
    assert!(SourceModel::new(vec![ModeSpec::idler(ModeType::Poissonian, -1.0)], 5).is_err());
}
