use modestruct::diagnostics::uncertainty_curve;
use modestruct::forward_model::{full_jpd, ModeSpec, Occupancy, SourceModel};
use modestruct::pipeline::{reconstruct, reconstruct_exact, relative_error, ReconstructionConfig, RunStatus, StageState};
use modestruct::sampling::{sample_counts, CountMatrix};
use modestruct::statistics::ModeType::{Poissonian, Thermal};

fn four_mode_model() -> SourceModel {
    SourceModel::new(
        vec![
            ModeSpec::conjugated(Thermal, 19.0, 0.43, 0.52),
            ModeSpec::conjugated(Thermal, 1.0, 0.43, 0.52),
            ModeSpec::signal(Poissonian, 0.1),
            ModeSpec::idler(Poissonian, 0.2),
        ],
        40,
    )
    .unwrap()
}

#[test]
fn round_trip_at_ten_million_trials() {
    let truth = four_mode_model();
    let jpd = full_jpd(&truth).unwrap();
    let counts = sample_counts(&jpd, 10_000_000, 31).unwrap();
    let rec = reconstruct(&counts, &ReconstructionConfig { seed: 31, ..Default::default() }).unwrap();
    assert_eq!(rec.report.status, RunStatus::Complete);
    let err = relative_error(&rec.report.model, &truth).expect("same mode count and types");
    let curve = uncertainty_curve(&truth, &[10_000_000], 4, 31).unwrap();
    let reference = curve[0].mean_relative_error.unwrap();
    assert!(err <= 3.0 * reference, "error {err} against curve value {reference}");
}

#[test]
fn report_numbers_trace_to_artifacts() {
    let truth = SourceModel::new(
        vec![ModeSpec::conjugated(Thermal, 2.0, 0.6, 0.7), ModeSpec::signal(Poissonian, 0.3)],
        15,
    )
    .unwrap();
    let counts = sample_counts(&full_jpd(&truth).unwrap(), 200_000, 2).unwrap();
    let rec = reconstruct(&counts, &ReconstructionConfig { seed: 2, bootstrap_samples: 10, ..Default::default() })
        .unwrap();
    let (r, a) = (&rec.report, &rec.artifacts);
    let final_fit = a.final_fit.as_ref().unwrap();
    let result = r.result.as_ref().unwrap();
    assert_eq!(r.model, final_fit.model);
    assert_eq!(result.fit, final_fit.fit);
    let detection = a.signal_detection.as_ref().unwrap();
    assert_eq!(r.signal.as_ref().unwrap().detected, detection.modes);
    let ranking = &a.assignment.as_ref().unwrap().ranking;
    assert_eq!(r.assignments.len(), ranking.len());
    for (entry, ranked) in r.assignments.iter().zip(ranking) {
        assert_eq!(entry.score, ranked.fit.fit.score);
    }
    assert_eq!(r.refinement.len(), a.refinement_fits.len());
    let h = r.hillery.as_ref().unwrap();
    assert_eq!(h.bootstrap_samples, a.bootstrap.len());
    assert!(h.lossless.as_ref().unwrap().even_sigma.is_some());
    let conj: Vec<_> = r.model.with_occupancy(Occupancy::Conjugated).collect();
    assert_eq!(conj.len(), 1);
    assert!((conj[0].mu - 2.0).abs() < 0.1, "{:?}", r.model);
}

#[test]
fn vacuum_input_skips_the_fits() {
    let mut counts = vec![0u64; 9];
    counts[0] = 500;
    let rec = reconstruct(&CountMatrix::new(2, counts, 500).unwrap(), &ReconstructionConfig::default()).unwrap();
    assert!(rec.report.model.modes.is_empty());
    assert_eq!(rec.report.status, RunStatus::Complete);
    assert!(rec.report.stages.iter().any(|s| s.state == StageState::Skipped));
}

#[test]
fn exact_input_recovers_the_source() {
    let truth = SourceModel::new(
        vec![ModeSpec::conjugated(Thermal, 3.0, 0.5, 0.6), ModeSpec::idler(Poissonian, 0.4)],
        20,
    )
    .unwrap();
    let rec = reconstruct_exact(&full_jpd(&truth).unwrap(), &ReconstructionConfig::default()).unwrap();
    let err = relative_error(&rec.report.model, &truth).expect("same structure");
    assert!(err < 1e-4, "{err}: {:?}", rec.report.model);
}

#[test]
fn invalid_configurations_are_rejected() {
    let counts = CountMatrix::new(1, vec![3, 1, 1, 5], 10).unwrap();
    let bad = [
        ReconstructionConfig { prune_threshold: 0.0, ..Default::default() },
        ReconstructionConfig { final_restarts: 0, ..Default::default() },
        ReconstructionConfig { candidate_types: vec![], ..Default::default() },
        ReconstructionConfig { bootstrap_samples: 1, ..Default::default() },
        ReconstructionConfig { nominal_trials: 0.5, ..Default::default() },
    ];
    for c in bad {
        assert!(reconstruct(&counts, &c).is_err(), "{c:?}");
    }
}
