mod common;

use common::*;
use fedsmooth::client::{zeta_value, Method, ZetaMode};
use fedsmooth::config::RunConfig;
use fedsmooth::data::{generate_synthetic, largest_remainder, PartitionSpec};
use fedsmooth::linalg::{svd_approx, svd_exact, FactorPair, Matrix, SvdMode};
use fedsmooth::model::ModelSpec;
use fedsmooth::orchestrator::{decode_checkpoint, encode_checkpoint, Checkpoint, Federation, RunOptions};
use fedsmooth::server::{aggregate_full_rank, ClientUpload};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..9, 1usize..9).prop_flat_map(|(m, n)| matrix(m, n))
}

fn uploads(count: usize, rows: usize, cols: usize, rank: usize) -> impl Strategy<Value = Vec<ClientUpload>> {
    prop::collection::vec((1usize..50, matrix(rows, rank), matrix(rank, cols)), count).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (size, b, a))| ClientUpload {
                client_id: i,
                size,
                factors: vec![FactorPair::new(b, a).unwrap()],
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn svd_reconstructs_and_orders(m in sized_matrix()) {
        let svd = svd_exact(&m).unwrap();
        let back = svd.reconstruct().unwrap();
        let scale = m.frobenius_norm().max(1.0);
        prop_assert!(back.sub(&m).unwrap().frobenius_norm() <= 1e-10 * scale);
        prop_assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(svd.sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn truncation_error_is_tail_energy(m in sized_matrix(), r in 1usize..5) {
        let k = m.rows().min(m.cols());
        let r = r.min(k);
        let f = svd_approx(&m, r, &SvdMode::Exact).unwrap();
        let err = m.sub(&f.product().unwrap()).unwrap().frobenius_norm();
        let s = svd_exact(&m).unwrap().sigma;
        let tail = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((err - tail).abs() <= 1e-9 * m.frobenius_norm().max(1.0));
    }

    #[test]
    fn aggregation_ignores_arrival_order(ups in uploads(4, 5, 3, 2), rot in 0usize..4) {
        let mut shuffled = ups.clone();
        shuffled.rotate_left(rot);
        shuffled.swap(0, 3);
        let a = aggregate_full_rank(&ups).unwrap();
        let b = aggregate_full_rank(&shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn aggregate_is_a_convex_combination(ups in uploads(3, 4, 4, 1)) {
        let agg = &aggregate_full_rank(&ups).unwrap()[0];
        let products: Vec<Matrix> = ups.iter().map(|u| u.factors[0].product().unwrap()).collect();
        for (i, v) in agg.data().iter().enumerate() {
            let lo = products.iter().map(|p| p.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = products.iter().map(|p| p.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let n: usize = ups.iter().map(|u| u.size).sum();
        let mut expected = Matrix::zeros(4, 4).unwrap();
        for (u, p) in ups.iter().zip(&products) {
            expected = expected.add_scaled(u.size as f64 / n as f64, p).unwrap();
        }
        prop_assert!(agg.sub(&expected).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn partitions_conserve_samples(
        n in 20usize..200,
        k in 1usize..8,
        beta in prop::option::of(0.05f64..5.0),
        seed in any::<u64>(),
    ) {
        prop_assume!(n >= k);
        let mut r = rng(seed);
        let ds = generate_synthetic(n, 3, 4.min(n), 2.0, &mut r).unwrap();
        let spec = beta.map_or_else(PartitionSpec::iid, PartitionSpec::dirichlet);
        let shards = spec.apply(&ds, k, &mut r).unwrap();
        prop_assert_eq!(shards.len(), k);
        prop_assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), n);
        let mut keys: Vec<_> = shards.iter().flat_map(|s| (0..s.len()).map(|i| s.sample_key(i))).collect();
        let mut original: Vec<_> = (0..n).map(|i| ds.sample_key(i)).collect();
        keys.sort();
        original.sort();
        prop_assert_eq!(keys, original);
        if beta.is_none() {
            let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn largest_remainder_hits_total(total in 0usize..1000, p in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let sum: f64 = p.iter().sum();
        prop_assume!(sum > 0.0);
        let props: Vec<f64> = p.iter().map(|x| x / sum).collect();
        let counts = largest_remainder(total, &props);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, q) in counts.iter().zip(&props) {
            prop_assert!((*c as f64 - q * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn zeta_stays_in_range(total in 1usize..200, frac in 0.0f64..1.0) {
        let t = ((total - 1) as f64 * frac) as usize;
        let z = zeta_value(t, total, ZetaMode::Decay);
        prop_assert!((0.6..=1.0).contains(&z));
        prop_assert_eq!(zeta_value(0, total, ZetaMode::Decay), 1.0);
        prop_assert_eq!(zeta_value(t, total, ZetaMode::Constant), 1.0);
        if t + 1 < total {
            prop_assert!(zeta_value(t + 1, total, ZetaMode::Decay) <= z + 1e-15);
        }
    }

    #[test]
    fn resolved_config_round_trips(
        clients in 1usize..20,
        rounds in 1usize..50,
        rank in 1usize..3,
        method_ix in 0usize..Method::ALL.len(),
        seed in any::<u64>(),
        fraction in 0.05f64..1.0,
    ) {
        let mut cfg = RunConfig::new(ModelSpec::mlp2(6, 8, 3), clients, rounds);
        cfg.rank = rank;
        cfg.method = Method::ALL[method_ix];
        cfg.seed = seed;
        cfg.participation_fraction = fraction;
        let resolved = cfg.resolved();
        let again = RunConfig::from_json(&resolved.to_json_pretty()).unwrap();
        prop_assert_eq!(&again, &resolved);
        prop_assert_eq!(again.resolved().to_json_pretty(), resolved.to_json_pretty());
    }

    #[test]
    fn checkpoint_round_trips(
        layers in prop::collection::vec((1usize..6, 1usize..6, 1usize..3, any::<u64>()), 1..4),
        round in any::<u32>(),
    ) {
        let mut backbones = Vec::new();
        let mut factors = Vec::new();
        for (m, n, r, seed) in layers {
            let mut g = rng(seed);
            backbones.push(random_matrix(m, n, &mut g));
            factors.push(FactorPair::new(random_matrix(m, r, &mut g), random_matrix(r, n, &mut g)).unwrap());
        }
        let ckpt = Checkpoint { backbones, factors, round };
        let bytes = encode_checkpoint(&ckpt);
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn discrepancy_identity_holds(
        seed in any::<u64>(),
        clients in 2usize..5,
        rank in 1usize..4,
        decay in any::<bool>(),
        partial in any::<bool>(),
    ) {
        let mut cfg = small_config(ModelSpec::mlp2(6, 8, 3), clients, 4);
        cfg.seed = seed;
        cfg.rank = rank;
        cfg.partition = PartitionSpec::dirichlet(0.5);
        cfg.zeta_mode = Some(if decay { ZetaMode::Decay } else { ZetaMode::Constant });
        cfg.verification = true;
        if partial {
            cfg.participation_fraction = 0.5;
        }
        let mut fed = Federation::new(&cfg, RunOptions { jobs: 1, corrupt_trace: false }).unwrap();
        fed.run().unwrap();
        let report = fed.verify().unwrap();
        prop_assert!(report.max_residual() < 1e-8, "residual {}", report.max_residual());
        prop_assert!(report.min_slack() >= -1e-9 || report.rows.is_empty());
    }
}
