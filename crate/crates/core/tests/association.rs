use trackmill::association::{associate, IdentityEncoder, DEFAULT_WINDOW};
use trackmill::cluster::ClusterConfig;
use trackmill::eval::cluster_quality;
use trackmill::oracle::{embed_dataset, synthetic_clean, OracleConfig, SyntheticSpec};
use trackmill::simulate::{generate_noisy_dataset, plan_simulation, IdsPerNoisyDist};
use trackmill::{Dataset, NoiseRates};

/// Fragmented but switch-free oracle data.
fn fragmented(seed: u64) -> Dataset {
    let clean = synthetic_clean(&SyntheticSpec::default(), seed).unwrap();
    let plan = plan_simulation(
        &clean,
        NoiseRates::new(2.0, 1.0).unwrap(),
        &IdsPerNoisyDist::default(),
        seed,
    )
    .unwrap();
    let noisy = generate_noisy_dataset(&clean, &plan).unwrap();
    let cfg = OracleConfig {
        separation_ratio: Some(4.0),
        seed,
        ..OracleConfig::default()
    };
    embed_dataset(&noisy, &cfg).unwrap().0
}

#[test]
fn switch_free_input_clusters_purely() {
    for seed in 0..20 {
        let ds = fragmented(seed);
        let labels = associate(
            &ds,
            &IdentityEncoder,
            &ClusterConfig::inter(),
            DEFAULT_WINDOW,
            seed,
            0,
        )
        .unwrap();
        let q = cluster_quality(&labels, &ds).unwrap();
        assert!(q.purity >= 0.95, "seed {seed}: purity {}", q.purity);
        if seed < 3 {
            let again = associate(
                &ds,
                &IdentityEncoder,
                &ClusterConfig::inter(),
                DEFAULT_WINDOW,
                seed,
                0,
            )
            .unwrap();
            assert_eq!(again, labels);
        }
    }
}
