use num_complex::Complex64 as C64;
use otoc_tn::circuits::{build_instance, build_pruned_instance, prune_exact_cancellations, prune_geometric_lightcones, EnsembleSpec, GateFamily, Geometry, OtocCircuit, OtocOrder, Site};
use otoc_tn::metrics::{bootstrap_snr, snr, snr_uncorrelated_baseline, EnsembleResults};
use otoc_tn::mps::otoc_mps;
use otoc_tn::peps::{evolve_peps_bp, BpConfig};
use otoc_tn::statevector::{evolve_exact, otoc_exact};
use otoc_tn::tensor::{contract_names, qr_split, svd_truncate, DenseTensor, IndexLabel};
use proptest::prelude::*;

fn tensor_from(vals: &[f64], dims: &[(&str, usize)]) -> DenseTensor {
    let labels: Vec<IndexLabel> = dims.iter().map(|(n, d)| IndexLabel::new(*n, *d)).collect();
    let len: usize = dims.iter().map(|d| d.1).product();
    let data = (0..len).map(|i| C64::new(vals[(2 * i) % vals.len()], vals[(2 * i + 1) % vals.len()])).collect();
    DenseTensor::new(labels, data).unwrap()
}

fn line_spec(t: usize, family: GateFamily, seed: u64) -> EnsembleSpec {
    let m = 2 * t as i32 + 3;
    let b = m + (0.6 * t as f64).round() as i32;
    EnsembleSpec { geometry: Geometry::Line { width: 5 * t + 8 }, depth: t, m_site: Site(0, m), b_site: Site(0, b), family, num_instances: 8, master_seed: seed }
}

fn grid_circuit(t: usize, seed: u64, instance: usize) -> OtocCircuit {
    let spec = EnsembleSpec {
        geometry: Geometry::Grid { rows: 10, cols: 10 },
        depth: t,
        m_site: Site(4, 4),
        b_site: Site(4, 5),
        family: GateFamily::default(),
        num_instances: 8,
        master_seed: seed,
    };
    build_pruned_instance(&spec, OtocOrder::Otoc1, instance).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn contraction_matches_explicit_sum(vals in prop::collection::vec(-1.0f64..1.0, 8..40), a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let x = tensor_from(&vals, &[("i", a), ("k", b)]);
        let y = tensor_from(&vals[1..], &[("k", b), ("j", c)]);
        let z = contract_names(&x, &y, &["k"]).unwrap().permute_names(&["i", "j"]).unwrap();
        for i in 0..a {
            for j in 0..c {
                let mut s = C64::new(0.0, 0.0);
                for k in 0..b {
                    s += x.get(&[i, k]) * y.get(&[k, j]);
                }
                prop_assert!((z.get(&[i, j]) - s).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_truncation_accounts_for_dropped_weight(vals in prop::collection::vec(-1.0f64..1.0, 12..64), keep in 1usize..6) {
        let t = tensor_from(&vals, &[("a", 2), ("b", 3), ("c", 4)]);
        let full = svd_truncate(&t, &["a", "b"], usize::MAX, 0.0, "s").unwrap();
        prop_assert!(full.reconstruct().unwrap().permute_names(&["a", "b", "c"]).unwrap().distance(&t).unwrap() < 1e-10);
        let cut = svd_truncate(&t, &["a", "b"], keep, 0.0, "s").unwrap();
        let err = cut.reconstruct().unwrap().permute_names(&["a", "b", "c"]).unwrap().distance(&t).unwrap();
        prop_assert!((err * err - cut.discarded_weight).abs() < 1e-9 * (1.0 + cut.discarded_weight));
        prop_assert!(cut.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn qr_reconstructs(vals in prop::collection::vec(-1.0f64..1.0, 12..64)) {
        let t = tensor_from(&vals, &[("a", 3), ("b", 2), ("c", 4)]);
        let (q, r) = qr_split(&t, &["a", "c"], "q").unwrap();
        let back = contract_names(&q, &r, &["q"]).unwrap().permute_names(&["a", "b", "c"]).unwrap();
        prop_assert!(back.distance(&t).unwrap() < 1e-10);
    }

    #[test]
    fn permute_round_trip(vals in prop::collection::vec(-1.0f64..1.0, 8..30)) {
        let t = tensor_from(&vals, &[("a", 2), ("b", 3), ("c", 2)]);
        let back = t.permute_names(&["c", "a", "b"]).unwrap().permute_names(&["a", "b", "c"]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn snr_affine_invariant(e in prop::collection::vec(-1.0f64..1.0, 5..40), noise in prop::collection::vec(-0.3f64..0.3, 40), a in 0.01f64..100.0, b in -10.0f64..10.0) {
        let approx: Vec<f64> = e.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let mapped: Vec<f64> = approx.iter().map(|x| a * x + b).collect();
        if let (Ok(s1), Ok(s2)) = (snr(&e, &approx), snr(&e, &mapped)) {
            prop_assert!((s1 - s2).abs() <= 1e-6 * s1.max(1.0));
        }
    }

    #[test]
    fn snr_symmetric_after_standardization(e in prop::collection::vec(-1.0f64..1.0, 5..40), noise in prop::collection::vec(-0.5f64..0.5, 40)) {
        let approx: Vec<f64> = e.iter().zip(&noise).map(|(x, n)| x + n).collect();
        if let (Ok(s1), Ok(s2)) = (snr(&e, &approx), snr(&approx, &e)) {
            prop_assert!((s1 - s2).abs() <= 1e-9 * s1.max(1.0));
        }
    }

    #[test]
    fn bootstrap_rerun_identical(e in prop::collection::vec(-1.0f64..1.0, 30..50), seed in 0u64..1000) {
        let approx: Vec<f64> = e.iter().enumerate().map(|(i, x)| x + 0.1 * ((i * 7 % 5) as f64 - 2.0)).collect();
        let r = EnsembleResults::from_values(&e, &approx).unwrap();
        let a = bootstrap_snr(&r, 20, 30, seed);
        let b = bootstrap_snr(&r, 20, 30, seed);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn exact_pruning_preserves_otoc(seed in 0u64..10_000, t in 2usize..7, b in 5i32..10, haar in any::<bool>()) {
        let family = if haar { GateFamily::Haar { single_qubit_layers: false } } else { GateFamily::default() };
        let spec = EnsembleSpec { geometry: Geometry::Line { width: 12 }, depth: t, m_site: Site(0, 4), b_site: Site(0, b), family, num_instances: 4, master_seed: seed };
        let full = build_instance(&spec, OtocOrder::Otoc1, 1).unwrap();
        let exact = prune_exact_cancellations(&full);
        prop_assert!(exact.gates.len() <= full.gates.len());
        prop_assert!((otoc_exact(&full).unwrap() - otoc_exact(&exact).unwrap()).abs() < 1e-10);
        // The final stage only drops gates of the first U.
        let pruned = prune_geometric_lightcones(&full);
        let after_b = |c: &OtocCircuit| c.gates.iter().filter(|g| g.layer >= 2 * t as u32).cloned().collect::<Vec<_>>();
        prop_assert_eq!(after_b(&pruned), after_b(&exact));
    }

    #[test]
    fn evolution_preserves_norm(seed in 0u64..10_000, t in 2usize..7) {
        let c = grid_circuit(t, seed, 0);
        prop_assert!((evolve_exact(&c).unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circuit_file_round_trip(seed in 0u64..10_000, t in 2usize..7) {
        let c = grid_circuit(t, seed, 2);
        let back = OtocCircuit::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), c.to_json());
        prop_assert!((otoc_exact(&back).unwrap() - otoc_exact(&c).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn untruncated_mps_matches_statevector(seed in 0u64..10_000, t in 3usize..10) {
        let spec = line_spec(t, GateFamily::Haar { single_qubit_layers: false }, seed);
        let c = build_pruned_instance(&spec, OtocOrder::Otoc1, 0).unwrap();
        let (v, diag) = otoc_mps(&c, usize::MAX, 1e-14).unwrap();
        prop_assert!((v - otoc_exact(&c).unwrap()).abs() < 1e-9);
        prop_assert_eq!(diag.gate_bound_violations, 0);
    }

    #[test]
    fn bp_messages_stay_positive(seed in 0u64..10_000, t in 3usize..6, d in 1usize..5) {
        let c = grid_circuit(t, seed, 1);
        let (p, msgs, diag) = evolve_peps_bp(&c, &BpConfig::with_max_d(d), 1).unwrap();
        prop_assert!(p.is_finite());
        prop_assert!(p.max_bond_dim() <= d);
        prop_assert_eq!(diag.bound_violations, 0);
        for k in 0..msgs.len() {
            for m in msgs.edge(k) {
                prop_assert!(m.min_eigenvalue().unwrap() > -1e-10);
            }
        }
    }
}

#[test]
fn uncorrelated_baseline_strictly_decreasing() {
    let mut prev = snr_uncorrelated_baseline(3).unwrap();
    for m in 4..3000 {
        let v = snr_uncorrelated_baseline(m).unwrap();
        assert!(v < prev, "m={m}");
        assert!(v > std::f64::consts::FRAC_1_SQRT_2);
        prev = v;
    }
}
