use modestruct::fitting::{
    fit_jpd, minimize, JpdData, JpdFitOptions, JpdTemplate, LossSharing, MinimizeOptions, ParamRole, ParamVector,
    SqrtResiduals, Tolerances, Weighting,
};
use modestruct::forward_model::{full_jpd, ModeSpec, SourceModel};
use modestruct::pipeline::{reconstruct_known_structure, relative_error, KnownStructureOptions, Observed};
use modestruct::sampling::sample_counts;
use modestruct::statistics::ModeType::{self, Poissonian, SinglePhoton, Thermal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(modes: Vec<ModeSpec>, n_max: usize) -> SourceModel {
    SourceModel::new(modes, n_max).unwrap()
}

fn max_param_deviation(a: &SourceModel, b: &SourceModel) -> f64 {
    let (mut a, mut b) = (a.clone(), b.clone());
    a.canonicalize();
    b.canonicalize();
    assert_eq!(a.modes.len(), b.modes.len());
    a.modes
        .iter()
        .zip(&b.modes)
        .map(|(x, y)| {
            let rel = |u: f64, v: f64| (u - v).abs() / v.abs().max(1e-12);
            let mut d = rel(x.mu, y.mu);
            if x.occupancy == modestruct::forward_model::Occupancy::Conjugated {
                d = d.max(rel(x.eta_s, y.eta_s)).max(rel(x.eta_i, y.eta_i));
            }
            d
        })
        .fold(0.0, f64::max)
}

#[test]
fn self_inversion_on_random_small_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let types = [Thermal, Poissonian, SinglePhoton];
    for _ in 0..4 {
        let (es, ei) = (rng.random_range(0.3..0.9), rng.random_range(0.3..0.9));
        let mut modes = vec![ModeSpec::conjugated(Thermal, rng.random_range(1.0..4.0), es, ei)];
        let extra = rng.random_range(1..=3);
        for j in 0..extra {
            let t = types[rng.random_range(0..3)];
            let mu = if t == SinglePhoton { rng.random_range(0.2..0.8) } else { rng.random_range(0.2..1.5) };
            modes.push(if j % 2 == 0 { ModeSpec::signal(t, mu) } else { ModeSpec::idler(t, mu) });
        }
        let truth = model(modes, 25);
        let jpd = full_jpd(&truth).unwrap();
        let mut opts = KnownStructureOptions::default();
        opts.minimize.tolerances = Tolerances { max_evaluations: 40_000, ..Tolerances::default() };
        let fit = reconstruct_known_structure(&Observed::Exact(jpd), &truth, &opts).unwrap();
        let d = max_param_deviation(&fit.model, &truth);
        assert!(d < 1e-4, "deviation {d}: {:?} vs {:?}", fit.model, truth);
    }
}

#[test]
fn score_at_truth_is_chi_squared_like() {
    let truth = model(
        vec![ModeSpec::conjugated(Thermal, 1.0, 0.7, 0.8), ModeSpec::signal(Poissonian, 0.3)],
        5,
    );
    let jpd = full_jpd(&truth).unwrap();
    let cells = jpd.entries().len() as f64;
    let mut scores: Vec<f64> = (0..21)
        .map(|s| {
            let c = sample_counts(&jpd, 1_000_000, s).unwrap();
            let data = JpdData::from_counts(&c);
            SqrtResiduals::new(&data.values, data.weighting).unwrap().eval(jpd.entries())
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let median = scores[10];
    assert!((0.5 * cells..=2.0 * cells).contains(&median), "median {median} for {cells} cells");
}

#[test]
fn permuted_template_gives_same_model() {
    let truth = model(
        vec![
            ModeSpec::conjugated(Thermal, 3.0, 0.6, 0.5),
            ModeSpec::conjugated(Thermal, 0.8, 0.6, 0.5),
            ModeSpec::signal(Poissonian, 0.3),
        ],
        20,
    );
    let data = JpdData::exact(&full_jpd(&truth).unwrap(), 1e6);
    let mut start = truth.clone();
    for m in &mut start.modes {
        m.mu *= 1.2;
    }
    let mut swapped = start.clone();
    swapped.modes.swap(0, 1);
    let opts = JpdFitOptions { minimize: MinimizeOptions { restarts: 4, ..Default::default() }, ..Default::default() };
    let a = fit_jpd(&data, &JpdTemplate::from_model(&start, LossSharing::SharedArm), &opts).unwrap();
    let b = fit_jpd(&data, &JpdTemplate::from_model(&swapped, LossSharing::SharedArm), &opts).unwrap();
    assert!(max_param_deviation(&a.model, &b.model) < 1e-5, "{:?} vs {:?}", a.model, b.model);
    assert!(max_param_deviation(&a.model, &truth) < 1e-4);
}

#[test]
fn more_trials_give_smaller_errors() {
    let truth = model(
        vec![ModeSpec::conjugated(Thermal, 1.5, 0.6, 0.7), ModeSpec::idler(Poissonian, 0.3)],
        12,
    );
    let jpd = full_jpd(&truth).unwrap();
    let median_error = |n_tot: u64| {
        let mut e: Vec<f64> = (0..20)
            .map(|s| {
                let obs = Observed::Counts(sample_counts(&jpd, n_tot, 100 + s).unwrap());
                let fit = reconstruct_known_structure(&obs, &truth, &KnownStructureOptions::default()).unwrap();
                relative_error(&fit.model, &truth).unwrap()
            })
            .collect();
        e.sort_by(f64::total_cmp);
        (e[9] + e[10]) / 2.0
    };
    let (low, high) = (median_error(10_000), median_error(1_000_000));
    assert!(high < low, "{low} -> {high}");
}

#[test]
fn minimizer_respects_bounds() {
    // a single-photon mean is confined to [0, 1] whatever the objective wants
    let p = ParamVector::new(vec![modestruct::fitting::Param {
        role: ParamRole::ModeMu,
        mode: 0,
        value: 0.5,
        bound: modestruct::fitting::Bound::UnitInterval,
    }]);
    let f = |q: &ParamVector| (q.value(0) - 3.0).powi(2);
    let fit = minimize(&f, &p, &MinimizeOptions { restarts: 3, ..Default::default() }).unwrap();
    let v = fit.params.value(0);
    assert!(v > 0.99 && v <= 1.0, "{v}");
}

#[test]
fn weighting_and_shape_contracts() {
    assert!(SqrtResiduals::new(&[0.0, 0.0], Weighting::Reference).is_err());
    let truth = model(vec![ModeSpec::signal(ModeType::Thermal, 1.0)], 6);
    let data = JpdData::exact(&full_jpd(&truth).unwrap(), 1e6);
    let wrong = JpdTemplate::from_model(&model(truth.modes.clone(), 7), LossSharing::SharedArm);
    assert!(fit_jpd(&data, &wrong, &JpdFitOptions::default()).is_err());
}
