use std::collections::BTreeSet;

use dip_core::incontext::LabelMap;
use dip_core::retrieval::{
    build_memory_bank, dot_f64, evaluate, propagate_labels, topk_search, BankConfig, ConfusionMatrix, EvalConfig,
    LabelMode, MemoryBank,
};
use dip_core::synthetic::{generate, random_unit_rows, write_dataset, SyntheticConfig, WriteOptions};
use dip_core::tensor_store::{write_f32, DatasetManifest, IGNORE};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(dir: &std::path::Path, images: usize) -> DatasetManifest {
    let cfg = SyntheticConfig { images, ..SyntheticConfig::default() };
    write_dataset(&generate(&cfg).unwrap(), dir, WriteOptions::default()).unwrap()
}

fn bank_config(target_size: usize, seed: u64) -> BankConfig {
    BankConfig {
        target_size,
        mode: LabelMode::Discrete,
        data_fraction: 1.0,
        seed,
    }
}

#[test]
fn oversized_target_keeps_every_patch_once() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(tmp.path(), 5);
    let bank = build_memory_bank(&m, None, &bank_config(10_000, 1)).unwrap();
    assert_eq!(bank.len(), 5 * 64);
    let seen: BTreeSet<(u32, u32)> = bank.provenance.iter().copied().collect();
    assert_eq!(seen.len(), 5 * 64);
    for row in bank.labels.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn sampling_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(tmp.path(), 8);
    let a = build_memory_bank(&m, None, &bank_config(100, 3)).unwrap();
    let b = build_memory_bank(&m, None, &bank_config(100, 3)).unwrap();
    let c = build_memory_bank(&m, None, &bank_config(100, 4)).unwrap();
    assert_eq!(a.len(), 100);
    assert_eq!(a.provenance, b.provenance);
    assert_eq!(a.features, b.features);
    assert_ne!(a.provenance, c.provenance);
}

#[test]
fn bank_round_trips_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(&tmp.path().join("data"), 4);
    let bank = build_memory_bank(&m, None, &bank_config(150, 2)).unwrap();
    bank.save(&tmp.path().join("bank")).unwrap();
    let back = MemoryBank::load(&tmp.path().join("bank")).unwrap();
    assert_eq!(back.features, bank.features);
    assert_eq!(back.labels, bank.labels);
    assert_eq!(back.provenance, bank.provenance);
    assert_eq!(back.meta, bank.meta);
}

#[test]
fn self_bank_with_one_neighbour_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let m = dataset(tmp.path(), 6);
    let bank = build_memory_bank(&m, None, &bank_config(10_000, 0)).unwrap();
    let report = evaluate(&m, &bank, None, &EvalConfig { k: 1, tau: 0.07 }).unwrap();
    assert_eq!(report.miou, Some(1.0));
    assert_eq!(report.evaluated_pixels, 6 * 256);
    for c in &report.classes {
        if c.iou.is_some() {
            assert_eq!(c.fp + c.fn_, 0);
        }
    }
}

#[test]
fn continuous_self_bank_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = dataset(tmp.path(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for rec in &mut m.records {
        // depth constant over each 2x2 patch
        let patch_depth: Vec<f32> = (0..64).map(|_| rng.random_range(0.5f32..10.0)).collect();
        let depth: Vec<f32> = (0..256).map(|i| patch_depth[(i / 16 / 2) * 8 + (i % 16) / 2]).collect();
        let path = tmp.path().join(format!("depth-{}.dipt", rec.id));
        write_f32(&path, &[16, 16], &depth).unwrap();
        rec.labels = Some(path);
    }
    m.num_classes = None;
    let cfg = BankConfig { mode: LabelMode::Continuous, ..bank_config(10_000, 0) };
    let bank = build_memory_bank(&m, None, &cfg).unwrap();
    assert_eq!(bank.label_dim(), 1);
    let report = evaluate(&m, &bank, None, &EvalConfig { k: 1, tau: 0.07 }).unwrap();
    assert!(report.rmse.unwrap() < 1e-6, "{:?}", report.rmse);
}

#[test]
fn dataset_miou_sums_confusions_before_dividing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let classes = 4;
    let mut total = ConfusionMatrix::new(classes);
    let (mut tp, mut fp, mut fn_) = ([0u64; 4], [0u64; 4], [0u64; 4]);
    let mut per_image_means = Vec::new();
    for _ in 0..10 {
        let gt: Vec<u16> = (0..48)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..3) })
            .collect();
        let pred: Vec<u16> = (0..48).map(|_| rng.random_range(0..4)).collect();
        for (&g, &p) in gt.iter().zip(&pred) {
            if g == IGNORE {
                continue;
            }
            if g == p {
                tp[g as usize] += 1;
            } else {
                fn_[g as usize] += 1;
                fp[p as usize] += 1;
            }
        }
        let (g, p) = (LabelMap::new(6, 8, gt).unwrap(), LabelMap::new(6, 8, pred).unwrap());
        let mut single = ConfusionMatrix::new(classes);
        single.add(&p, &g).unwrap();
        per_image_means.push(single.mean_iou());
        total.merge(&single);
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    let want = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!((total.mean_iou() - want).abs() < 1e-12);
    let averaged = per_image_means.iter().sum::<f64>() / per_image_means.len() as f64;
    assert!((averaged - want).abs() > 1e-6, "averaging per image should differ here");
}

#[test]
fn propagation_matches_a_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let bank = random_unit_rows(&mut rng, 400, 16).mapv(|v| v as f32);
    let queries = random_unit_rows(&mut rng, 12, 16).mapv(|v| v as f32);
    let labels = Array2::from_shape_simple_fn((400, 5), || rng.random_range(0.0f32..1.0));
    let (k, tau) = (30, 0.07);
    let res = topk_search(bank.view(), queries.view(), k).unwrap();
    let pred = propagate_labels(&res, labels.view(), tau).unwrap();
    for q in 0..12 {
        let qrow = queries.row(q).to_vec();
        let mut sims: Vec<(usize, f64)> = (0..400).map(|i| (i, dot_f64(&qrow, &bank.row(i).to_vec()))).collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top = &sims[..k];
        let m = top[0].1;
        let weights: Vec<f64> = top.iter().map(|(_, s)| ((s - m) / tau).exp()).collect();
        let z: f64 = weights.iter().sum();
        for c in 0..5 {
            let want: f64 = top.iter().zip(&weights).map(|((i, _), w)| w / z * f64::from(labels[[*i, c]])).sum();
            assert!((pred[[q, c]] - want).abs() < 1e-12, "query {q} class {c}");
        }
    }
}
