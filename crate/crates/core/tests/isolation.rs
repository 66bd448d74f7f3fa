use proptest::prelude::*;
use trackmill::cluster::ClusterConfig;
use trackmill::isolation::isolate_tracklets;
use trackmill::noise::{measure_rates, IdCounting};
use trackmill::oracle::{embed_dataset, synthetic_clean, OracleConfig, SyntheticSpec};
use trackmill::pipeline::frame_embeddings;
use trackmill::simulate::{generate_noisy_dataset, plan_simulation, IdsPerNoisyDist};
use trackmill::{Dataset, NoiseRates};

fn noisy_oracle(n_ids: usize, rates: (f64, f64), separation: f64, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_ids,
        n_cameras: 4,
        cameras_per_id: 4,
        min_len: 40,
        max_len: 120,
        first_pid: 0,
    };
    let clean = synthetic_clean(&spec, seed).unwrap();
    let plan = plan_simulation(
        &clean,
        NoiseRates::new(rates.0, rates.1).unwrap(),
        &IdsPerNoisyDist::default(),
        seed,
    )
    .unwrap();
    let noisy = generate_noisy_dataset(&clean, &plan).unwrap();
    let cfg = OracleConfig {
        separation_ratio: Some(separation),
        seed,
        ..OracleConfig::default()
    };
    embed_dataset(&noisy, &cfg).unwrap().0
}

fn refs(ds: &Dataset) -> Vec<String> {
    let mut v: Vec<String> = ds.frames().map(|f| f.image_ref.clone().unwrap()).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frames_conserved_and_fragmentation_never_drops(
        seed in any::<u64>(),
        sep in 1.0f64..6.0,
        eps in 0.2f64..0.8,
        min_pts in 2usize..6,
    ) {
        let ds = noisy_oracle(12, (2.0, 1.4), sep, seed);
        let out = isolate_tracklets(&ds, &frame_embeddings(&ds).unwrap(), &ClusterConfig::fixed(eps, min_pts)).unwrap();
        prop_assert_eq!(refs(&out.dataset), refs(&ds));
        let before = measure_rates(&ds, IdCounting::PerCamera).unwrap();
        let after = measure_rates(&out.dataset, IdCounting::PerCamera).unwrap();
        if out.report.n_split > 0 {
            prop_assert!(after.r_fm >= before.r_fm);
            prop_assert!(out.dataset.n_tracklets() > ds.n_tracklets());
        } else {
            prop_assert_eq!(&out.dataset, &ds);
        }
    }
}

#[test]
fn switch_rate_falls_on_average() {
    let (mut rsw_in, mut rsw_out) = (0.0, 0.0);
    for seed in 0..50 {
        let ds = noisy_oracle(40, (2.5, 1.5), 4.0, 1000 + seed);
        let out = isolate_tracklets(
            &ds,
            &frame_embeddings(&ds).unwrap(),
            &ClusterConfig::intra(),
        )
        .unwrap();
        rsw_in += measure_rates(&ds, IdCounting::PerCamera).unwrap().r_sw / 50.0;
        rsw_out += measure_rates(&out.dataset, IdCounting::PerCamera)
            .unwrap()
            .r_sw
            / 50.0;
    }
    assert!(rsw_out < rsw_in, "{rsw_out} vs {rsw_in}");
    assert!(rsw_out <= 1.05, "mean output r_sw {rsw_out}");
}
