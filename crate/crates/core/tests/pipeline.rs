use qwg_core::experiments::{
    run_cnot_truth_table, run_fringe_scan, run_hom_scan, CnotConfig, FringeConfig, FringeKind,
    HomScanConfig, Mode,
};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn hom_monte_carlo_matches_expectation() {
    let mut mc = HomScanConfig::calibrated("sspd").unwrap();
    mc.acquisition_s = 20.0;
    mc.seed = 31;
    let mut an = mc.clone();
    an.mode = Mode::Analytic;
    let (m, a) = (run_hom_scan(&mc).unwrap(), run_hom_scan(&an).unwrap());
    let mut chi2 = 0.0;
    for (p, q) in m.points.iter().zip(&a.points) {
        let z = (p.count - q.count) / q.count.sqrt();
        assert!(
            z.abs() < 5.0,
            "delay {}: {} vs {}",
            p.delay_ps,
            p.count,
            q.count
        );
        chi2 += z * z;
    }
    // 13 points: chi2 beyond 40 would be p < 1e-4.
    assert!(chi2 < 40.0, "chi2 {chi2}");
}

#[test]
fn si_spad_accidentals_match_singles_product() {
    let mut mc = HomScanConfig::calibrated("si_spad").unwrap();
    mc.acquisition_s = 10.0;
    mc.seed = 4;
    mc.delays_ps = vec![-3.0, -2.5, -2.0, 2.5, 3.0];
    let mut an = mc.clone();
    an.mode = Mode::Analytic;
    let m = run_hom_scan(&mc).unwrap();
    let a = run_hom_scan(&an).unwrap();
    let (ma, aa) = (m.mean_accidentals(), a.mean_accidentals());
    // Ten delayed windows per point, five points.
    let sigma = (aa / 50.0).sqrt();
    assert!((ma - aa).abs() < 5.0 * sigma, "{ma} vs {aa}");
}

#[test]
fn fringe_monte_carlo_matches_expectation() {
    for kind in [FringeKind::SinglePhoton, FringeKind::TwoPhoton] {
        let mut mc = FringeConfig::calibrated(kind, "sspd").unwrap();
        mc.acquisition_s = 2.0;
        mc.seed = 8;
        let mut an = mc.clone();
        an.mode = Mode::Analytic;
        let (m, a) = (run_fringe_scan(&mc).unwrap(), run_fringe_scan(&an).unwrap());
        for (p, q) in m.points.iter().zip(&a.points) {
            let z = (p.count - q.count) / q.count.max(1.0).sqrt();
            assert!(
                z.abs() < 5.0,
                "{kind:?} phase {}: {} vs {}",
                p.phase_rad,
                p.count,
                q.count
            );
        }
    }
}

#[test]
fn cnot_monte_carlo_tracks_analytic() {
    let mut mc = CnotConfig::calibrated("si_spad").unwrap();
    mc.post_selected_events = 4000;
    mc.seed = 2;
    let mut an = mc.clone();
    an.mode = Mode::Analytic;
    let (m, a) = (
        run_cnot_truth_table(&mc).unwrap(),
        run_cnot_truth_table(&an).unwrap(),
    );
    for i in 0..4 {
        for j in 0..4 {
            let p = a.table.rows[i][j];
            let sigma = (p * (1.0 - p) / m.events[i] as f64).sqrt().max(1e-3);
            assert!((m.table.rows[i][j] - p).abs() < 5.0 * sigma, "[{i}][{j}]");
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut cfg = HomScanConfig::calibrated("si_spad").unwrap();
    cfg.acquisition_s = 0.5;
    cfg.seed = 77;
    let one = in_pool(1, || run_hom_scan(&cfg).unwrap());
    let four = in_pool(4, || run_hom_scan(&cfg).unwrap());
    assert_eq!(one, four);

    let mut cnot = CnotConfig::calibrated("sspd").unwrap();
    cnot.post_selected_events = 100;
    let one = in_pool(1, || run_cnot_truth_table(&cnot).unwrap());
    let four = in_pool(3, || run_cnot_truth_table(&cnot).unwrap());
    assert_eq!(one, four);
}

#[test]
fn seeds_change_monte_carlo_output() {
    let mut cfg = HomScanConfig::calibrated("sspd").unwrap();
    cfg.acquisition_s = 1.0;
    cfg.seed = 1;
    let a = run_hom_scan(&cfg).unwrap();
    cfg.seed = 2;
    let b = run_hom_scan(&cfg).unwrap();
    assert_ne!(a, b);
}
