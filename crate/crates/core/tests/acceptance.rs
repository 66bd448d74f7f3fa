//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use trackmill::cluster::{dbscan, ClusterConfig, EmbeddingMatrix};
use trackmill::eval::{average_precision, evaluate_retrieval, RetrievalSet};
use trackmill::isolation::isolate_tracklets;
use trackmill::losses::{
    hard_id_loss, hard_triplet_loss, soft_id_loss, soft_triplet_loss, total_loss, Batch, LossConfig,
};
use trackmill::model::{ema_update, EmaState, ModelState};
use trackmill::noise::{measure_rates, IdCounting};
use trackmill::oracle::{embed_dataset, synthetic_clean, OracleConfig, SyntheticSpec};
use trackmill::pipeline::{frame_embeddings, run, PipelineConfig, SimulateConfig};
use trackmill::rng::stream;
use trackmill::simulate::{generate_noisy_dataset, plan_simulation, IdsPerNoisyDist};
use trackmill::trainer::TrainConfig;
use trackmill::{Dataset, NoiseRates};

const TABLE1: [(f64, f64); 3] = [(2.5, 1.2), (1.7, 1.2), (2.5, 1.5)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn gaussian(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(r))
}

fn clean(n_ids: usize, n_cameras: usize, min_len: usize, max_len: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_ids,
        n_cameras,
        cameras_per_id: n_cameras,
        min_len,
        max_len,
        first_pid: 0,
    };
    synthetic_clean(&spec, seed).unwrap()
}

type FrameKey = (Option<u32>, u32, Option<String>);

fn frame_multiset(ds: &Dataset) -> Vec<FrameKey> {
    let mut v: Vec<FrameKey> = ds
        .frames()
        .map(|f| (f.gt_pid, f.camera_id, f.image_ref.clone()))
        .collect();
    v.sort();
    v
}

fn c1_simulator_fidelity() -> Outcome {
    let start = Instant::now();
    let input = clean(250, 4, 20, 40, 11);
    let units = measure_rates(&input, IdCounting::PerCamera).unwrap().n_ids;
    let before = frame_multiset(&input);
    let mut within_tol = BTreeMap::new();
    let mut identity = true;
    let mut bijection = true;
    for &(rfm, rsw) in &TABLE1 {
        let mut ok = 0;
        for seed in 0..100 {
            let target = NoiseRates::new(rfm, rsw).unwrap();
            let plan = plan_simulation(&input, target, &IdsPerNoisyDist::default(), seed).unwrap();
            let noisy = generate_noisy_dataset(&input, &plan).unwrap();
            let m = measure_rates(&noisy, IdCounting::PerCamera).unwrap();
            // Incidence counted directly from the output.
            let p: usize = noisy
                .tracklets
                .iter()
                .map(|t| t.distinct_ids().unwrap().len())
                .sum();
            let n = noisy.n_tracklets();
            identity &= m.incidence_pairs == p
                && m.n_ids == units
                && m.r_fm == p as f64 / units as f64
                && m.r_sw == p as f64 / n as f64
                && (n as f64 * m.r_sw - units as f64 * m.r_fm).abs() <= 1e-9 * p as f64;
            bijection &= frame_multiset(&noisy) == before;
            if (m.r_fm - rfm).abs() <= 0.05 && (m.r_sw - rsw).abs() <= 0.05 {
                ok += 1;
            }
        }
        within_tol.insert(format!("({rfm},{rsw})"), ok);
    }
    let el = start.elapsed();
    let rates_ok = within_tol.values().all(|&k| k >= 95);
    outcome(
        rates_ok && identity && bijection && within(el, 30),
        format!(
            "M={units}, runs within ±0.05 per target {within_tol:?} (need ≥95), identity {identity}, bijection {bijection}, {el:.1?} (< 30s)"
        ),
    )
}

fn c2_table_arithmetic() -> Outcome {
    let cases = [
        (1931, 2.5, 1.2, 4023.0),
        (2001, 1.7, 1.2, 2835.0),
        (1963, 2.5, 1.5, 3272.0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, rfm, rsw, published) in cases {
        let input = clean(m, 1, 20, 40, 2);
        let plan = plan_simulation(
            &input,
            NoiseRates::new(rfm, rsw).unwrap(),
            &IdsPerNoisyDist::default(),
            0,
        )
        .unwrap();
        let rel = (plan.n_total as f64 - published).abs() / published;
        pass &= plan.m_units == m && rel <= 0.03;
        parts.push(format!(
            "M={m} ({rfm},{rsw}) N={} vs {published} ({:.2}%)",
            plan.n_total,
            100.0 * rel
        ));
    }
    outcome(pass, parts.join("; ") + " (tolerance 3%)")
}

/// Textbook DBSCAN with a per-query scan over raw vectors.
fn reference_dbscan(x: &Array2<f64>, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = x.nrows();
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let mut dot = 0.0;
                for k in 0..x.ncols() {
                    dot += x[[i, k]] * x[[j, k]];
                }
                let d = if i == j { 0.0 } else { 1.0 - dot };
                d <= eps
            })
            .collect()
    };
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = region(i);
        if nb.len() < min_pts {
            continue;
        }
        let c = next;
        next += 1;
        label[i] = Some(c);
        let mut queue = nb;
        let mut q = 0;
        while q < queue.len() {
            let j = queue[q];
            q += 1;
            if label[j].is_none() {
                label[j] = Some(c);
            }
            if !visited[j] {
                visited[j] = true;
                let nj = region(j);
                if nj.len() >= min_pts {
                    queue.extend(nj);
                }
            }
        }
    }
    label
}

fn same_up_to_renumbering(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => {
            *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x
        }
        _ => false,
    })
}

fn c3_dbscan_oracle() -> Outcome {
    let start = Instant::now();
    let mut agree = 0;
    let mut clusters = 0;
    for seed in 0..100u64 {
        let mut r = stream(seed, &[3]);
        let n = r.random_range(20..=500);
        let dim = r.random_range(2..=8);
        let k = r.random_range(1..=10);
        let centers = gaussian(&mut r, k, dim);
        let spread = r.random_range(0.05..0.5);
        let mut x = Array2::zeros((n, dim));
        for i in 0..n {
            let c = r.random_range(0..k);
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut r);
                x[[i, j]] = centers[[c, j]] + spread * z;
            }
        }
        let x = EmbeddingMatrix::normalized(x).unwrap();
        let eps = r.random_range(0.005..0.3);
        let min_pts = r.random_range(1..=10);
        let got = dbscan(&x, eps, min_pts);
        let want = reference_dbscan(&x.view().to_owned(), eps, min_pts);
        clusters += got.n_clusters;
        if same_up_to_renumbering(&got.labels, &want) {
            agree += 1;
        }
    }
    let el = start.elapsed();
    outcome(
        agree == 100 && within(el, 10),
        format!("{agree}/100 labelings identical ({clusters} clusters total), {el:.1?} (< 10s)"),
    )
}

fn random_batch(seed: u64) -> Batch {
    let mut r = stream(seed, &[4]);
    let (n, d, k) = (16, 6, 4);
    Batch {
        features_net: gaussian(&mut r, n, d),
        logits_net: gaussian(&mut r, n, k),
        features_mean: gaussian(&mut r, n, d),
        logits_mean: gaussian(&mut r, n, k),
        labels: (0..n).map(|i| i / 4).collect(),
    }
}

fn euclid(f: &Array2<f64>, i: usize, j: usize) -> f64 {
    f.row(i)
        .iter()
        .zip(f.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Distance to the nearest hinge corner or mining tie over all anchors.
fn clearance(f: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let mut c = f64::INFINITY;
    for i in 0..n {
        let mut pos: Vec<f64> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| euclid(f, i, j))
            .collect();
        let mut neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[i])
            .map(|j| euclid(f, i, j))
            .collect();
        pos.sort_by(|a, b| b.total_cmp(a));
        neg.sort_by(|a, b| a.total_cmp(b));
        c = c.min((pos[0] + margin - neg[0]).abs());
        if pos.len() > 1 {
            c = c.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            c = c.min(neg[1] - neg[0]);
        }
    }
    c
}

fn fd_rel_err(x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for idx in ndarray::indices(x.dim()) {
        let mut p = x.clone();
        p[idx] += h;
        let mut m = x.clone();
        m[idx] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max((num - analytic[idx]).abs());
        scale = scale.max(num.abs());
    }
    worst / scale.max(1e-8)
}

fn c4_losses() -> Outcome {
    let start = Instant::now();
    let cfg = LossConfig::default();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut linear = true;
    let mut seed = 0;
    while checked < 50 && seed < 5000 {
        let b = random_batch(seed);
        seed += 1;
        if clearance(&b.features_net, &b.labels, cfg.margin) < 1e-2 {
            continue;
        }
        let with_logits = |x: &Array2<f64>| Batch {
            logits_net: x.clone(),
            ..b.clone()
        };
        let with_feats = |x: &Array2<f64>| Batch {
            features_net: x.clone(),
            ..b.clone()
        };
        let id = hard_id_loss(&b).unwrap();
        let sid = soft_id_loss(&b).unwrap();
        let tri = hard_triplet_loss(&b, cfg.margin).unwrap();
        let stri = soft_triplet_loss(&b).unwrap();
        worst = worst
            .max(fd_rel_err(&b.logits_net, &id.grad, |x| {
                hard_id_loss(&with_logits(x)).unwrap().value
            }))
            .max(fd_rel_err(&b.logits_net, &sid.grad, |x| {
                soft_id_loss(&with_logits(x)).unwrap().value
            }))
            .max(fd_rel_err(&b.features_net, &tri.grad, |x| {
                hard_triplet_loss(&with_feats(x), cfg.margin).unwrap().value
            }))
            .max(fd_rel_err(&b.features_net, &stri.grad, |x| {
                soft_triplet_loss(&with_feats(x)).unwrap().value
            }));
        let t = total_loss(&b, &cfg).unwrap();
        let (wi, wt) = (cfg.lambda_id, cfg.lambda_tri);
        linear &= t.values.total
            == (1.0 - wi) * id.value + wi * sid.value + (1.0 - wt) * tri.value + wt * stri.value
            && t.grad_logits == &id.grad * (1.0 - wi) + &sid.grad * wi
            && t.grad_features == &tri.grad * (1.0 - wt) + &stri.grad * wt;
        checked += 1;
    }
    let mut b = random_batch(9999);
    b.logits_net.fill(0.7);
    let ln_k = (hard_id_loss(&b).unwrap().value - 4f64.ln()).abs();
    let mut b = random_batch(9998);
    b.features_net.fill(0.25);
    let deg = (hard_triplet_loss(&b, 0.5).unwrap().value - 0.5).abs();
    let el = start.elapsed();
    outcome(
        checked == 50 && worst < 1e-3 && linear && ln_k < 1e-9 && deg < 1e-9 && within(el, 10),
        format!(
            "{checked}/50 batches (clearance ≥ 1e-2), worst FD rel err {worst:.2e} (< 1e-3), total linear {linear}, |CE−ln K| {ln_k:.1e}, |triplet−m| {deg:.1e} (< 1e-9), {el:.1?} (< 10s)"
        ),
    )
}

fn param_distance(a: &ModelState, b: &ModelState) -> f64 {
    let sq = |x: f64| x * x;
    ((&a.projection - &b.projection).mapv(sq).sum()
        + (&a.classifier - &b.classifier).mapv(sq).sum()
        + (&a.bias - &b.bias).mapv(sq).sum())
    .sqrt()
}

fn c5_ema() -> Outcome {
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.5, 0.999] {
        for t in [1u32, 10, 100, 1000] {
            let theta = {
                let mut m = ModelState::new(6, 4, 3, 1);
                m.classifier = gaussian(&mut stream(2, &[]), 4, 3);
                m
            };
            let mut start = ModelState::new(6, 4, 3, 7);
            start.projection = gaussian(&mut stream(8, &[]), 6, 4);
            start.classifier = gaussian(&mut stream(9, &[]), 4, 3);
            let d0 = param_distance(&start, &theta);
            let mut ema = EmaState {
                model: start,
                alpha,
            };
            for _ in 0..t {
                ema = ema_update(ema, &theta).unwrap();
            }
            let ratio = param_distance(&ema.model, &theta) / d0;
            worst = worst.max((ratio - alpha.powi(t as i32)).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!(
            "max |ratio − α^T| {worst:.2e} over α∈{{0,0.5,0.999}}, T∈{{1,10,100,1000}} (≤ 1e-12)"
        ),
    )
}

/// Rank of a gallery item is one plus the number of valid items ahead of it.
fn reference_retrieval(q: &RetrievalSet, g: &RetrievalSet, ranks: &[usize]) -> (f64, Vec<f64>) {
    let sim = |i: usize, j: usize| -> f64 {
        (0..q.features.dim())
            .map(|k| q.features.row(i)[k] * g.features.row(j)[k])
            .sum()
    };
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for i in 0..q.len() {
        let valid: Vec<usize> = (0..g.len())
            .filter(|&j| !(g.labels[j] == q.labels[i] && g.cameras[j] == q.cameras[i]))
            .collect();
        let rank = |j: usize| {
            1 + valid
                .iter()
                .filter(|&&o| sim(i, o) > sim(i, j) || (sim(i, o) == sim(i, j) && o < j))
                .count()
        };
        let hits: Vec<usize> = valid
            .iter()
            .filter(|&&j| g.labels[j] == q.labels[i])
            .map(|&j| rank(j))
            .collect();
        if hits.is_empty() {
            continue;
        }
        let ap = hits
            .iter()
            .map(|&r| hits.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / hits.len() as f64;
        aps.push(ap);
        firsts.push(*hits.iter().min().unwrap());
    }
    let n = aps.len() as f64;
    (
        aps.iter().sum::<f64>() / n,
        ranks
            .iter()
            .map(|&r| firsts.iter().filter(|&&f| f <= r).count() as f64 / n)
            .collect(),
    )
}

fn random_set(r: &mut impl Rng, n: usize) -> RetrievalSet {
    let x = gaussian(r, n, 5);
    let labels = (0..n).map(|_| r.random_range(0..6)).collect();
    let cams = (0..n).map(|_| r.random_range(0..3)).collect();
    RetrievalSet::new(EmbeddingMatrix::normalized(x).unwrap(), labels, cams).unwrap()
}

fn c6_retrieval() -> Outcome {
    let ranks = [1, 2, 5, 10];
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = stream(seed, &[6]);
        let nq = r.random_range(5..=20);
        let ng = r.random_range(10..=50);
        let q = random_set(&mut r, nq);
        let g = random_set(&mut r, ng);
        let got = evaluate_retrieval(&q, &g, &ranks).unwrap();
        let (map, cmc) = reference_retrieval(&q, &g, &ranks);
        worst = worst.max((got.map - map).abs());
        for (k, c) in ranks.iter().zip(cmc) {
            worst = worst.max((got.cmc[k] - c).abs());
        }
    }
    let ap = average_precision(&[true, false, true]).unwrap();
    outcome(
        worst <= 1e-9 && ap == 5.0 / 6.0,
        format!("max deviation from reference {worst:.1e} over 50 instances (≤ 1e-9), AP(1,3) = {ap} (5/6 exact)"),
    )
}

fn ablation_config(seed: u64, skip_isolation: bool) -> PipelineConfig {
    PipelineConfig {
        seed,
        simulate: Some(SimulateConfig {
            r_fm: 2.5,
            r_sw: 1.5,
            ..SimulateConfig::default()
        }),
        embed: Some(OracleConfig {
            separation_ratio: Some(4.0),
            ..OracleConfig::default()
        }),
        skip_isolation,
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        eval: None,
        ..PipelineConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c7_ablation() -> Outcome {
    let start = Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    let mut drops = Vec::new();
    for seed in 0..20 {
        let purity = |skip| {
            run(&ablation_config(seed, skip), None)
                .unwrap()
                .summary
                .final_quality
                .expect("labeled input")
                .purity
        };
        let (a, b) = (purity(false), purity(true));
        with.push(a);
        without.push(b);
        drops.push((a - b) / a);
    }
    let el = start.elapsed();
    let (mw, mo, md) = (median(with), median(without), median(drops));
    outcome(
        mw >= 0.90 && md >= 0.20 && within(el, 300),
        format!(
            "median purity {mw:.4} with isolation (≥ 0.90), {mo:.4} without; median relative drop {:.1}% (≥ 20%), {el:.1?} (< 5min)",
            100.0 * md
        ),
    )
}

fn c8_eps_sweep() -> Outcome {
    let start = Instant::now();
    let input = clean(200, 4, 40, 120, 8);
    let plan = plan_simulation(
        &input,
        NoiseRates::new(2.5, 1.5).unwrap(),
        &IdsPerNoisyDist::default(),
        8,
    )
    .unwrap();
    let noisy = generate_noisy_dataset(&input, &plan).unwrap();
    let (ds, _) = embed_dataset(
        &noisy,
        &OracleConfig {
            separation_ratio: Some(4.0),
            seed: 8,
            ..OracleConfig::default()
        },
    )
    .unwrap();
    let feats = frame_embeddings(&ds).unwrap();
    let mut rows = Vec::new();
    for eps in [0.4, 0.5, 0.6, 0.7] {
        let rep = isolate_tracklets(&ds, &feats, &ClusterConfig::fixed(eps, 4))
            .unwrap()
            .report;
        rows.push((eps, rep.n_clusters, rep.noise_pct.unwrap()));
    }
    let el = start.elapsed();
    let clusters_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    let noise_ok = rows.windows(2).all(|w| w[1].2 >= w[0].2);
    let table: Vec<String> = rows
        .iter()
        .map(|(e, c, n)| format!("eps {e}: {c} clusters, noise {n:.2}%"))
        .collect();
    outcome(
        clusters_ok && noise_ok && within(el, 60),
        format!("{} (clusters non-increasing {clusters_ok}, noise non-decreasing {noise_ok}), {el:.1?} (< 1min)", table.join("; ")),
    )
}

fn dir_contents(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn c9_determinism() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig {
        seed: 42,
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        embed: Some(OracleConfig {
            separation_ratio: Some(4.0),
            ..OracleConfig::default()
        }),
        ..PipelineConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&cfg, Some(a.path())).unwrap();
    run(&cfg, Some(b.path())).unwrap();
    let (fa, fb) = (dir_contents(a.path()), dir_contents(b.path()));
    let reports = fa.keys().filter(|k| k.ends_with(".report.json")).count();
    let el = start.elapsed();
    outcome(
        fa == fb && reports >= 6 && within(el, 300),
        format!(
            "{} files ({reports} reports) bit-identical: {}, {el:.1?} (< 5min)",
            fa.len(),
            fa == fb
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        (
            "counting identity and simulator fidelity",
            c1_simulator_fidelity,
        ),
        ("fragment-count arithmetic", c2_table_arithmetic),
        ("DBSCAN oracle equivalence", c3_dbscan_oracle),
        ("loss and gradient suite", c4_losses),
        ("EMA contraction", c5_ema),
        ("retrieval metric oracle", c6_retrieval),
        ("isolation ablation trend", c7_ablation),
        ("eps_intra trend", c8_eps_sweep),
        ("pipeline determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!(
            "criterion {} {name}: {} | {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
