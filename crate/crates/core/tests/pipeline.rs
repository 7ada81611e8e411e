use lowrank_bn::experiment::{compute_mb_metrics, run_sweep, ExperimentConfig, Regime};
use lowrank_bn::markov_blanket::{
    assemble_system, estimate_moments, exact_moments, psd_check, solve_mb, unreduced_system, MbOptions,
};
use lowrank_bn::network::BayesNet;
use lowrank_bn::oracle::{sample_observational, Dataset};
use lowrank_bn::rng;
use lowrank_bn::subset::SubsetMask;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

/// `q` of a terminal node from its CPT, in system column order.
fn q_true(bn: &BayesNet, i: usize) -> DVector<f64> {
    let n = bn.n();
    let cpt = bn.cpt(i);
    let mut q = DVector::zeros(n);
    let mut constant = cpt.q_node[0];
    let cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    for (&j, t) in &cpt.q_pair {
        let c = cols.iter().position(|&x| x == j).unwrap();
        q[c] = t[0][0] - t[0][1];
        constant += t[0][1];
    }
    q[n - 1] = constant;
    q
}

#[test]
fn network_and_dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bn = BayesNet::random(10, 4, 0.02, 8).unwrap();
    let path = dir.path().join("net.json");
    bn.save(&path).unwrap();
    let back = BayesNet::load(&path).unwrap();
    assert_eq!(back.joint_table().unwrap(), bn.joint_table().unwrap());

    let data = sample_observational(&bn, 300, 4);
    let dpath = dir.path().join("data.txt");
    data.save(&dpath).unwrap();
    assert_eq!(Dataset::load(&dpath).unwrap(), data);
}

#[test]
fn terminal_nodes_satisfy_the_moment_system() {
    for seed in 1..=3 {
        let bn = BayesNet::random(12, 4, 0.02, seed).unwrap();
        let m = exact_moments(&bn).unwrap();
        for t in bn.dag().terminal_nodes_within(bn.dag().nodes()) {
            let sys = assemble_system(&m, t).unwrap();
            let r = (&sys.y - &sys.a * q_true(&bn, t)).amax();
            assert!(r <= 1e-10, "seed {seed} node {t}: residual {r:e}");
        }
    }
}

#[test]
fn reduced_and_unreduced_systems_share_solutions() {
    let bn = BayesNet::random(10, 4, 0.02, 2).unwrap();
    let m = exact_moments(&bn).unwrap();
    for i in 0..10 {
        let sys = assemble_system(&m, i).unwrap();
        let q = sys.a.clone().lu().solve(&sys.y).unwrap();
        let (a, y) = unreduced_system(&m, i).unwrap();
        assert!((&a * &q - &y).norm() <= 1e-10);
        // and the least-squares solution of the tall system is the same q
        let ls = a.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        assert!((ls - &q).amax() <= 1e-8);
    }
}

#[test]
fn population_moment_matrices_are_psd() {
    for seed in 1..=10 {
        let bn = BayesNet::random(10, 4, 0.02, seed).unwrap();
        let m = exact_moments(&bn).unwrap();
        for i in 0..10 {
            assert!(psd_check(&assemble_system(&m, i).unwrap().a) >= -1e-10);
        }
    }
}

#[test]
fn million_samples_match_population_moments() {
    let bn = BayesNet::random(20, 4, 0.02, 3).unwrap();
    let est = estimate_moments(&sample_observational(&bn, 1_000_000, 11)).unwrap();
    let truth = exact_moments(&bn).unwrap();
    let d = est.max_abs_diff(&truth);
    assert!(d <= 0.005, "max deviation {d}");
}

#[test]
fn small_perturbations_keep_the_sign_pattern() {
    let bn = BayesNet::random(12, 4, 0.02, 6).unwrap();
    let truth = exact_moments(&bn).unwrap();
    let n = 12;
    for t in bn.dag().terminal_nodes_within(bn.dag().nodes()) {
        let q = q_true(&bn, t);
        let clean = solve_mb(&assemble_system(&truth, t).unwrap(), &MbOptions::default()).unwrap();
        let p0_others: f64 = (0..n).filter(|&j| j != t).map(|j| truth.p0[j]).sum();
        let scale = (n as f64 / (p0_others + 1.0)).max(1.0 / truth.p0[t]);
        // accuracy with eta * kappa = 0.01
        let eps = 0.01 / (clean.diagnostics.kappa_inf * scale);
        let mut r = rng::stream(t as u64, &[]);
        let mut noisy = truth.clone();
        for j in 0..n {
            for l in j..n {
                let v = truth.p00[(j, l)] + r.random_range(-eps..eps);
                noisy.p00[(j, l)] = v;
                noisy.p00[(l, j)] = v;
            }
            noisy.p0[j] = noisy.p00[(j, j)];
        }
        let sys = assemble_system(&noisy, t).unwrap();
        let got = solve_mb(&sys, &MbOptions { eps: Some(eps), ..Default::default() }).unwrap();
        assert!(got.diagnostics.eta.unwrap() * got.diagnostics.kappa_inf <= 0.011);
        for (c, &j) in sys.columns.iter().enumerate() {
            if q[c] != 0.0 {
                assert_eq!(got.q_hat[j].signum(), q[c].signum(), "node {t} member {j}");
            }
        }
    }
}

#[test]
fn sweep_tables_written_twice_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        n: 7,
        k: 3,
        seeds: vec![1, 2],
        c_grid: vec![-1.0, 0.0, 1.0],
        regime: Regime::BlanketsOnly,
        ..Default::default()
    };
    let a = run_sweep(&cfg).unwrap();
    let b = run_sweep(&cfg).unwrap();
    a.write_tables(&dir.path().join("a")).unwrap();
    b.write_tables(&dir.path().join("b")).unwrap();
    for name in ["results.tsv", "averages.tsv", "mb_f1_vs_c.tsv"] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

fn masks(max: u64) -> impl Strategy<Value = Vec<SubsetMask>> {
    prop::collection::vec((0..max).prop_map(SubsetMask::from_bits), 6)
}

proptest! {
    #[test]
    fn metrics_match_set_arithmetic(truth in masks(64), recovered in masks(64)) {
        let m = compute_mb_metrics(&truth, &recovered).unwrap();
        let sym: u32 = truth.iter().zip(&recovered).map(|(t, r)| (t.bits() ^ r.bits()).count_ones()).sum();
        let tp: u32 = truth.iter().zip(&recovered).map(|(t, r)| (t.bits() & r.bits()).count_ones()).sum();
        prop_assert_eq!(m.hamming as u32, sym);
        prop_assert_eq!(m.true_positives as u32, tp);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
    }
}
