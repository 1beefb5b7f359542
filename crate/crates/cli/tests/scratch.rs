//! Scratch scouting for reference-run constants; not part of the suite.

use ndarray::Array2;
use topoflow::data::{derive_seed, euclidean_distances, gen_synthetic, stack_rows, SyntheticStructure};
use topoflow::metrics::{betti_correlation, bottleneck_distance, wasserstein_distance};
use topoflow::persistence::betti_curve;
use topoflow::pipeline::{prepare_dataset, signature_with};
use topoflow::training::{embed_dataset, train, FlowModel, Targets};
use topoflow::{compute_persistence, FilteredComplex, PersistenceDiagram, PipelineConfig, PointCloud, TrainConfig};

fn make_clouds(sigma: f64, root: u64) -> Vec<PointCloud> {
    let structures = [SyntheticStructure::Circle, SyntheticStructure::TwoCircles];
    let mut clouds = Vec::new();
    for (k, st) in structures.iter().enumerate() {
        for i in 0..20u64 {
            let seed = derive_seed(root, ((k as u64) << 32) | i);
            clouds.push(gen_synthetic(*st, 18, 2, sigma, seed).unwrap());
        }
    }
    clouds
}

fn cloud_diagrams(m: &Array2<f64>) -> Vec<PersistenceDiagram> {
    let w = euclidean_distances(m);
    let cx = FilteredComplex::build_rips(&w, 2, None).unwrap();
    compute_persistence(&cx, 1).unwrap().diagrams
}

fn compare_dims(a: &[PersistenceDiagram], b: &[PersistenceDiagram]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for p in 0..=1 {
        let (db, _) = bottleneck_distance(&a[p], &b[p]).unwrap();
        let (w1, _) = wasserstein_distance(&a[p], &b[p], 1.0).unwrap();
        let hi = a[p]
            .pairs
            .iter()
            .chain(&b[p].pairs)
            .flat_map(|&(x, y)| [x, y])
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(a[p].truncation.unwrap_or(0.0))
            .max(b[p].truncation.unwrap_or(0.0));
        let span = if hi > 0.0 { hi } else { 1.0 };
        let grid: Vec<f64> = (0..64).map(|i| span * i as f64 / 63.0).collect();
        let ca = betti_curve(&a[p], &grid).unwrap();
        let cb = betti_curve(&b[p], &grid).unwrap();
        let rho = betti_correlation(&ca, &cb).unwrap_or(f64::NAN);
        out.push((db, w1, rho));
    }
    out
}

#[test]
fn scout_circle_dominance() {
    for seed in 0..8u64 {
        let cloud = gen_synthetic(SyntheticStructure::Circle, 100, 2, 0.05, seed).unwrap();
        let w = euclidean_distances(cloud.points());
        let cx = FilteredComplex::build_rips(&w, 2, None).unwrap();
        let d1 = compute_persistence(&cx, 1).unwrap().diagrams.remove(1);
        let mut pers: Vec<f64> = d1
            .pairs
            .iter()
            .filter(|(_, d)| d.is_finite())
            .map(|(b, d)| d - b)
            .collect();
        pers.sort_by(|a, b| b.total_cmp(a));
        let top = pers.first().copied().unwrap_or(0.0);
        let second = pers.get(1).copied().unwrap_or(0.0);
        eprintln!(
            "seed {seed}: {} bars, top {top:.4}, second {second:.6}, ratio {:.1}",
            pers.len(),
            top / second.max(1e-300)
        );
    }
}

#[test]
fn scout_two_class() {
    let t0 = std::time::Instant::now();
    let structures = [SyntheticStructure::Circle, SyntheticStructure::TwoCircles];
    let mut clouds = Vec::new();
    for (k, st) in structures.iter().enumerate() {
        for i in 0..100u64 {
            let seed = derive_seed(42, ((k as u64) << 32) | i);
            clouds.push(gen_synthetic(*st, 12, 2, 0.05, seed).unwrap());
        }
    }
    let pipeline = PipelineConfig::default();
    let ds = prepare_dataset(&clouds, &pipeline).unwrap();
    eprintln!("prepared at {:?}", t0.elapsed());
    let targets = Targets::Classes(ds.labels.clone());
    let cfg = TrainConfig::with_seed(7);
    let out = train(&ds, &targets, &cfg, None).unwrap();
    for row in &out.log {
        let composite = row.task_loss + cfg.lambda * row.topo_loss + cfg.beta * row.ridge;
        eprintln!(
            "epoch {:2}: task {:.4} topo {:.4} ridge {:.1} acc {:.3} composite {:.4}",
            row.epoch, row.task_loss, row.topo_loss, row.ridge, row.accuracy, composite
        );
    }
    eprintln!("two-class total {:?}", t0.elapsed());
}

#[test]
fn scout_per_sample_drift() {
    let t0 = std::time::Instant::now();
    let pipeline = PipelineConfig::default();
    let clean = prepare_dataset(&make_clouds(0.0, 42), &pipeline).unwrap();
    for &sigma in &[0.01f64, 0.05, 0.1] {
        let noisy = prepare_dataset(&make_clouds(sigma, 42), &pipeline).unwrap();
        for p in 0..=1usize {
            let mut sum_db = 0.0;
            let mut sum_w1 = 0.0;
            let mut sum_rho = 0.0;
            let mut n_rho = 0usize;
            let n = clean.samples.len();
            for i in 0..n {
                let da = &clean.samples[i].diagrams[p];
                let db = &noisy.samples[i].diagrams[p];
                sum_db += bottleneck_distance(da, db).unwrap().0;
                sum_w1 += wasserstein_distance(da, db, 1.0).unwrap().0;
                let hi = da
                    .truncation
                    .unwrap_or(0.0)
                    .max(db.truncation.unwrap_or(0.0));
                let span = if hi > 0.0 { hi } else { 1.0 };
                let grid: Vec<f64> = (0..64).map(|k| span * k as f64 / 63.0).collect();
                let ca = betti_curve(da, &grid).unwrap();
                let cb = betti_curve(db, &grid).unwrap();
                if let Ok(r) = betti_correlation(&ca, &cb) {
                    sum_rho += r;
                    n_rho += 1;
                }
            }
            eprintln!(
                "sigma {sigma} dim {p}: mean dB {:.5}, mean W1 {:.5}, mean rho {:.5} ({n_rho}/{n} defined)",
                sum_db / n as f64,
                sum_w1 / n as f64,
                sum_rho / n_rho.max(1) as f64
            );
        }
    }
    eprintln!("drift total {:?}", t0.elapsed());
}

#[test]
fn scout_noise_trend() {
    let t0 = std::time::Instant::now();
    let pipeline = PipelineConfig::default();
    let clean = prepare_dataset(&make_clouds(0.0, 42), &pipeline).unwrap();
    let targets = Targets::Classes(clean.labels.clone());

    let mut cfg = TrainConfig::with_seed(7);
    cfg.epochs = 12;
    cfg.batch_size = 8;
    let trained = train(&clean, &targets, &cfg, None).unwrap().checkpoint.model;
    let random = FlowModel::init(&clean, &cfg).unwrap();
    eprintln!("train done at {:?}", t0.elapsed());

    let s0 = clean.signature_matrix().unwrap();
    let dgm_s0 = cloud_diagrams(&s0);

    for &sigma in &[0.01f64, 0.05, 0.1] {
        let mut ds = prepare_dataset(&make_clouds(sigma, 42), &pipeline).unwrap();
        ds.image_params = clean.image_params.clone();
        for i in 0..ds.samples.len() {
            ds.signatures[i] = signature_with(&ds.samples[i], &ds.image_params).unwrap();
        }
        let s_sig = ds.signature_matrix().unwrap();
        let dgm_ss = cloud_diagrams(&s_sig);

        for (name, model) in [("trained", &trained), ("random", &random)] {
            let z = stack_rows(&embed_dataset(model, &ds).unwrap()).unwrap();
            let dgm_z = cloud_diagrams(&z);
            let vs_clean = compare_dims(&dgm_z, &dgm_s0);
            let vs_input = compare_dims(&dgm_z, &dgm_ss);
            eprintln!(
                "sigma {sigma} {name}: vs_clean dim0 (dB {:.4}, W1 {:.4}, rho {:.6}) dim1 (dB {:.4}, W1 {:.4}, rho {:.6})",
                vs_clean[0].0, vs_clean[0].1, vs_clean[0].2, vs_clean[1].0, vs_clean[1].1, vs_clean[1].2
            );
            eprintln!(
                "sigma {sigma} {name}: vs_input dim0 (dB {:.4}, W1 {:.4}, rho {:.6}) dim1 (dB {:.4}, W1 {:.4}, rho {:.6})",
                vs_input[0].0, vs_input[0].1, vs_input[0].2, vs_input[1].0, vs_input[1].1, vs_input[1].2
            );
        }
        // Input-level drift from the clean reference for context.
        let drift = compare_dims(&dgm_ss, &dgm_s0);
        eprintln!(
            "sigma {sigma} input drift: dim0 (dB {:.4}, W1 {:.4}, rho {:.6}) dim1 (dB {:.4}, W1 {:.4}, rho {:.6})",
            drift[0].0, drift[0].1, drift[0].2, drift[1].0, drift[1].1, drift[1].2
        );
    }
    eprintln!("total {:?}", t0.elapsed());
}
