use std::path::PathBuf;

use nalgebra::DVector;
use packstate::app_io::{
    load_config, read_sim_csv, synthesize_profile, write_sim_csv, SeriesKind, SyntheticProfileSpec,
};
use packstate::*;

fn ocv() -> OcvModel {
    OcvModel::graphite_nmc()
}

fn reference() -> PackSystem {
    assemble_system(&PackTopology::reference_2p2s(ocv())).unwrap()
}

fn reference_soc() -> DVector<f64> {
    DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22])
}

fn shipped_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/2p2s_reference.json")
}

#[test]
fn shipped_config_has_reference_values() {
    let c = load_config(&shipped_config()).unwrap();
    let t = c.topology().unwrap();
    let r: Vec<f64> = t.cells.iter().map(|c| c.r_ohmic).collect();
    let q: Vec<f64> = t.cells.iter().map(|c| c.q_capacity).collect();
    assert_eq!(r, vec![0.1, 0.22, 0.3, 0.13]);
    assert_eq!(q, vec![1500.0, 1800.0, 1200.0, 2000.0]);
    assert_eq!(c.scenario.initial_soc, vec![0.2, 0.25, 0.15, 0.22]);
    assert_eq!(
        c.scenario.estimate_initial_soc.as_deref(),
        Some(&[0.3, 0.375, 0.225, 0.33][..])
    );
    assert_eq!(c.gain().unwrap().k.shape(), (8, 3));
}

#[test]
fn shipped_profile_keeps_socs_in_range() {
    let c = load_config(&shipped_config()).unwrap();
    let run = simulate(
        &c.system().unwrap(),
        &c.initial_state(),
        &c.profile().unwrap(),
        0.1,
        1372.0,
        Integrator::Rk4,
    )
    .unwrap();
    for st in &run.states {
        assert!(st.s.iter().all(|&z| (0.05..=0.95).contains(&z)));
    }
}

#[test]
fn charge_is_conserved_per_module() {
    let sys = reference();
    let profile = synthesize_profile(&SyntheticProfileSpec::udds_like(3)).unwrap();
    let run = simulate(&sys, &reference_soc(), &profile, 0.1, 600.0, Integrator::Rk4).unwrap();
    let drawn: f64 = profile
        .times()
        .windows(2)
        .zip(profile.currents())
        .take_while(|(w, _)| w[1] <= 600.0)
        .map(|(w, i)| (w[1] - w[0]) * i)
        .sum();
    let last = run.states.last().unwrap();
    for j in 0..2 {
        let stored: f64 = (0..2)
            .map(|i| {
                let k = sys.topology.index(i, j);
                sys.topology.cells[k].q_capacity * (last.s[k] - run.states[0].s[k])
            })
            .sum();
        assert!(
            (stored - drawn).abs() <= 1e-6 * drawn.abs().max(1.0),
            "{stored} vs {drawn}"
        );
    }
    assert!(run.residuals.iter().all(|&r| r < 1e-8));
}

#[test]
fn rk4_converges_at_fourth_order() {
    let sys = reference();
    let times: Vec<f64> = (0..50).map(|k| 4.0 * k as f64).collect();
    let currents: Vec<f64> = times.iter().map(|t| 0.3 * (t / 40.0).sin()).collect();
    let profile = CurrentProfile::new(times, currents).unwrap();
    let s0 = DVector::from_vec(vec![0.05, 0.08, 0.04, 0.06]);
    let end = |dt: f64| {
        simulate(&sys, &s0, &profile, dt, 200.0, Integrator::Rk4)
            .unwrap()
            .states
            .last()
            .unwrap()
            .to_vector()
    };
    let reference = end(0.5);
    let coarse = (end(4.0) - &reference).amax();
    let fine = (end(2.0) - &reference).amax();
    assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
}

#[test]
fn parallel_cells_balance_at_rest() {
    let cells = vec![
        CellParams::resistive(0.05, 1500.0, ocv()),
        CellParams::resistive(0.12, 1000.0, ocv()),
    ];
    let sys = assemble_system(&PackTopology::new(1, 2, cells, false).unwrap()).unwrap();
    let s0 = DVector::from_vec(vec![0.7, 0.3]);
    let run = simulate(
        &sys,
        &s0,
        &CurrentProfile::constant(0.0),
        1.0,
        600.0,
        Integrator::Rk4,
    )
    .unwrap();
    let first = &run.states[0];
    assert!(first.u[0] < 0.0 && first.u[1] > 0.0);
    assert_eq!(first.u[0], -first.u[1]);
    for st in &run.states {
        let v = |k: usize| ocv().value(st.s[k]) + sys.topology.cells[k].r_ohmic * st.u[k];
        assert!((v(0) - v(1)).abs() < 1e-10);
    }
    let last = run.states.last().unwrap();
    assert!((last.s[0] - last.s[1]).abs() < (s0[0] - s0[1]).abs());
}

#[test]
fn jets_match_simulated_derivatives() {
    let sys = reference();
    let current = -1.5;
    let s0 = DVector::from_vec(vec![0.06, 0.09, 0.05, 0.07]);
    let dt = 0.01;
    let run = simulate(
        &sys,
        &s0,
        &CurrentProfile::constant(current),
        dt,
        20.0,
        Integrator::Rk4,
    )
    .unwrap();
    let c = 1000;
    let point = AnalysisPoint::new(run.states[c].s.clone(), vec![current]);
    let jets = consistent_jets(&sys, &point, 3).unwrap();
    let x = |k: isize| run.states[(c as isize + k) as usize].to_vector();
    let step = 200;
    let h = step as f64 * dt;
    let s = step as isize;
    let fd = [
        (x(-2 * s) - 8.0 * x(-s) + 8.0 * x(s) - x(2 * s)) / (12.0 * h),
        (-x(2 * s) + 16.0 * x(s) - 30.0 * x(0) + 16.0 * x(-s) - x(-2 * s)) / (12.0 * h * h),
        (-x(3 * s) + 8.0 * x(2 * s) - 13.0 * x(s) + 13.0 * x(-s) - 8.0 * x(-2 * s) + x(-3 * s))
            / (8.0 * h * h * h),
    ];
    for k in 1..=3 {
        let exact = &jets[k] * jet::factorial(k);
        let err = (&exact - &fd[k - 1]).amax() / exact.amax();
        assert!(err < 1e-4, "order {k}: {err}");
    }
    assert_eq!(jets[0], x(0));
}

#[test]
fn observability_rank_grows_with_orders() {
    let sys = reference();
    let point = AnalysisPoint::new(reference_soc(), vec![0.0]);
    let tol = RankTolerance::default();
    let rank = |g: usize, d: usize| {
        let arrays = build_derivative_arrays(&sys, &point, g, d).unwrap();
        numerical_rank(&arrays.j_o(), tol).rank
    };
    for g in 0..4 {
        for d in 0..4 {
            assert!(rank(g + 1, d) >= rank(g, d), "gamma {g} delta {d}");
            assert!(rank(g, d + 1) >= rank(g, d), "gamma {g} delta {d}");
        }
    }
}

#[test]
fn reports_are_deterministic() {
    let sys = reference();
    let point = AnalysisPoint::new(reference_soc(), vec![0.0]);
    let opts = AnalysisOptions {
        seed: 42,
        ..Default::default()
    };
    let a = find_least_orders(&sys, &point, 3, 3, &opts).unwrap();
    let b = find_least_orders(&sys, &point, 3, 3, &opts).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(
        serde_json::to_string(&a.1).unwrap(),
        serde_json::to_string(&b.1).unwrap()
    );
    assert_eq!(a.1.neighborhood.as_ref().unwrap().seed, 42);
}

#[test]
fn replayed_measurements_give_identical_estimates() {
    let sys = reference();
    let profile = synthesize_profile(&SyntheticProfileSpec {
        duration: 60.0,
        ..SyntheticProfileSpec::udds_like(4)
    })
    .unwrap();
    let truth = simulate(&sys, &reference_soc(), &profile, 0.05, 60.0, Integrator::Rk4).unwrap();
    let k = load_config(&shipped_config()).unwrap().gain().unwrap();
    let s_hat = &reference_soc() * 1.5;
    let direct = estimate(&sys, &k, &truth, &profile, &s_hat).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.csv");
    write_sim_csv(&path, &truth, SeriesKind::Truth).unwrap();
    let (replayed, _) = read_sim_csv(&path).unwrap();
    let again = estimate(&sys, &k, &replayed, &profile, &s_hat).unwrap();
    assert_eq!(direct, again);
    assert_eq!(direct.estimate.times, truth.times);
}

#[test]
fn perfect_initialization_tracks_exactly() {
    let sys = reference();
    let profile = synthesize_profile(&SyntheticProfileSpec {
        duration: 300.0,
        ..SyntheticProfileSpec::udds_like(8)
    })
    .unwrap();
    let truth = simulate(&sys, &reference_soc(), &profile, 0.05, 300.0, Integrator::Rk4).unwrap();
    let k = load_config(&shipped_config()).unwrap().gain().unwrap();
    let run = estimate(&sys, &k, &truth, &profile, &reference_soc()).unwrap();
    for (a, b) in truth.states.iter().zip(&run.estimate.states) {
        assert!((a.to_vector() - b.to_vector()).amax() < 1e-8);
    }
}

#[test]
fn certified_gain_converges() {
    let cell = CellParams::resistive(0.08, 1500.0, ocv());
    let sys = assemble_system(&PackTopology::homogeneous(1, 1, cell, false)).unwrap();
    let region = SocRegion::uniform(1, 0.3, 0.7);
    let ranges = GainRanges {
        ks: (0.0, 0.05),
        ku: (0.0, 0.0),
    };
    let opts = CertifyOptions {
        samples: 256,
        ..Default::default()
    };
    let (k, cert) = search_gain(&sys, &region, &opts, &ranges, 1, 64, None)
        .unwrap()
        .expect("a certifiable gain exists for one cell");
    assert!(cert.verdict);

    let s0 = DVector::from_vec(vec![0.4]);
    let profile = CurrentProfile::new(vec![0.0, 300.0, 700.0], vec![0.2, -0.3, 0.1]).unwrap();
    let truth = simulate(&sys, &s0, &profile, 0.5, 1372.0, Integrator::Rk4).unwrap();
    let run = estimate(&sys, &k, &truth, &profile, &(&s0 * 1.5)).unwrap();
    let err: Vec<f64> = truth
        .states
        .iter()
        .zip(&run.estimate.states)
        .map(|(a, b)| (a.s[0] - b.s[0]).abs())
        .collect();
    assert!(*err.last().unwrap() < 1e-3);
    for w in err.chunks(100).collect::<Vec<_>>().windows(2) {
        let a = w[0].iter().copied().fold(0.0, f64::max);
        let b = w[1].iter().copied().fold(0.0, f64::max);
        assert!(b <= a);
    }
}
