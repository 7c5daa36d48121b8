use std::collections::BTreeMap;
use std::path::Path;

use n3f::apps::{evaluate_retrieval, FeatureSource};
use n3f::dataset::{self, AnnotatedObject, Annotations, CameraRecord, Dataset, SceneMeta, Split, SplitFile};
use n3f::geom::Aabb;
use n3f::imageio;
use n3f::renderer::Camera;
use n3f::teacher::{self, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A dataset directory with one training view, the given query and gallery
/// views, per-view features under `teacher/`, and object masks.
fn write_dataset(
    root: &Path,
    (width, height): (usize, usize),
    query: &[usize],
    gallery: &[usize],
    features: &[FeatureMap],
    masks: &BTreeMap<u32, BTreeMap<usize, Vec<bool>>>,
) -> Dataset {
    let views = features.len();
    let cam = Camera::identity(10.0, 10.0, width as f64 / 2.0, height as f64 / 2.0, width, height);
    let records: Vec<CameraRecord> = (0..views)
        .map(|v| CameraRecord {
            camera: cam.clone(),
            split: if query.contains(&v) {
                Split::Query
            } else if gallery.contains(&v) {
                Split::Gallery
            } else {
                Split::Train
            },
        })
        .collect();
    let train: Vec<usize> = (0..views).filter(|v| !query.contains(v) && !gallery.contains(v)).collect();
    dataset::write_json(&root.join("cameras.json"), &records).unwrap();
    dataset::write_json(&root.join("split.json"), &SplitFile { train, query: query.to_vec(), gallery: gallery.to_vec() })
        .unwrap();
    let meta = SceneMeta { bounds: Aabb::new([-1.0; 3], [1.0; 3]), background: [1.0; 3] };
    dataset::write_json(&root.join("scene.json"), &meta).unwrap();
    std::fs::create_dir_all(root.join("teacher")).unwrap();
    for (v, f) in features.iter().enumerate() {
        teacher::write_feature_map(f, &root.join(dataset::teacher_rel(v))).unwrap();
    }
    let mut objects = Vec::new();
    for (&id, per_view) in masks {
        std::fs::create_dir_all(root.join(format!("masks/obj{id}"))).unwrap();
        let mut entries = BTreeMap::new();
        for (&v, m) in per_view {
            let rel = dataset::mask_rel(id, v);
            imageio::write_mask(&root.join(&rel), width, height, m).unwrap();
            entries.insert(v.to_string(), rel);
        }
        objects.push(AnnotatedObject { id, masks: entries });
    }
    dataset::write_json(&root.join("annotations.json"), &Annotations { objects }).unwrap();
    Dataset::open(root).unwrap()
}

fn teacher_source(ds: &Dataset) -> impl Fn(usize) -> Result<FeatureMap, n3f::apps::AppError> + Sync + '_ {
    |v| Ok(teacher::read_feature_map(&ds.path(&dataset::teacher_rel(v)))?)
}

#[test]
fn hand_enumerated_toy_case() {
    let dir = tempfile::tempdir().unwrap();
    let q = FeatureMap::from_pixels(2, 2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    #[rustfmt::skip]
    let g = FeatureMap::from_pixels(2, 2, 3, &[
        1.0, 0.1,   0.0, 1.0,   1.0, -0.5,
        0.0, 0.0,   0.9, 0.0,  -1.0, 0.0,
    ]).unwrap();
    let train = FeatureMap::zeros(2, 2, 3);
    let mut masks = BTreeMap::new();
    masks.insert(
        1,
        BTreeMap::from([
            (1, vec![true, true, false, false, false, false]),
            (2, vec![false, true, false, false, true, false]),
        ]),
    );
    let ds = write_dataset(dir.path(), (3, 2), &[1], &[2], &[train, q, g], &masks);
    let report = evaluate_retrieval(&ds, FeatureSource::Teacher, teacher_source(&ds)).unwrap();
    // distances: p4 0, p0 ≈0.0998, p2 ≈0.459, p1 √2, p5 2, p3 sentinel
    // labels in that order: 1 0 0 1 0 0, so AP = (1/1 + 2/4) / 2
    assert_eq!(report.triples.len(), 1);
    assert_eq!(report.triples[0].ap, 0.75);
    assert_eq!(report.scene_map, 0.75);
    assert!(report.skipped.is_empty());
}

fn brute_force_ap(features: &FeatureMap, desc: &[f64], labels: &[bool]) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let d = unit(desc);
    let mut scored: Vec<(f64, usize)> = (0..features.pixel_count())
        .map(|i| {
            let f = unit(&features.pixel_at(i));
            (f.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i)
        })
        .collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let positives = labels.iter().filter(|&&l| l).count();
    let mut precisions = Vec::new();
    for k in 0..scored.len() {
        if labels[scored[k].1] {
            let hits = scored[..=k].iter().filter(|(_, i)| labels[*i]).count();
            precisions.push(hits as f64 / (k + 1) as f64);
        }
    }
    precisions.iter().sum::<f64>() / positives as f64
}

#[test]
fn random_features_match_brute_force_and_prevalence() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h, c) = (16, 12, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let features: Vec<FeatureMap> = (0..5)
        .map(|_| {
            let px: Vec<f64> = (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::from_pixels(c, h, w, &px).unwrap()
        })
        .collect();
    let mut masks = BTreeMap::new();
    for id in [1u32, 2] {
        let mut per_view = BTreeMap::new();
        for v in 1..5 {
            per_view.insert(v, (0..w * h).map(|_| rng.random_bool(0.25)).collect::<Vec<bool>>());
        }
        masks.insert(id, per_view);
    }
    let ds = write_dataset(dir.path(), (w, h), &[1, 2], &[3, 4], &features, &masks);
    let report = evaluate_retrieval(&ds, FeatureSource::Teacher, teacher_source(&ds)).unwrap();
    assert_eq!(report.triples.len(), 2 * 2 * 2);

    let mut prevalence_gap = 0.0;
    for t in &report.triples {
        let qmask = &masks[&t.object][&t.query];
        let qmap = &features[t.query];
        let mut desc = vec![0.0; c];
        let n = qmask.iter().filter(|&&m| m).count() as f64;
        for (i, _) in qmask.iter().enumerate().filter(|(_, &m)| m) {
            for (d, v) in desc.iter_mut().zip(qmap.pixel_at(i)) {
                *d += v / n;
            }
        }
        let labels = &masks[&t.object][&t.gallery];
        let expected = brute_force_ap(&features[t.gallery], &desc, labels);
        assert!((t.ap - expected).abs() < 1e-12, "{t:?} vs {expected}");
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        prevalence_gap += (t.ap - prevalence) / report.triples.len() as f64;
    }
    assert!(prevalence_gap.abs() < 0.1, "mean AP − prevalence = {prevalence_gap}");

    // scene mAP is the mean over objects of the mean over queries of the mean over galleries
    let mut per_object = Vec::new();
    for id in [1u32, 2] {
        let per_query: Vec<f64> = [1usize, 2]
            .iter()
            .map(|&q| {
                let aps: Vec<f64> = report.triples.iter().filter(|t| t.object == id && t.query == q).map(|t| t.ap).collect();
                aps.iter().sum::<f64>() / aps.len() as f64
            })
            .collect();
        per_object.push(per_query.iter().sum::<f64>() / per_query.len() as f64);
    }
    let scene = per_object.iter().sum::<f64>() / per_object.len() as f64;
    assert!((report.scene_map - scene).abs() < 1e-15);
}

#[test]
fn missing_masks_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let features = vec![FeatureMap::zeros(2, 2, 2), FeatureMap::from_pixels(2, 2, 2, &[1.0; 8]).unwrap(), FeatureMap::zeros(2, 2, 2)];
    let mut masks = BTreeMap::new();
    masks.insert(1, BTreeMap::from([(1, vec![true, false, false, false]), (2, vec![false, true, false, false])]));
    let ds = write_dataset(dir.path(), (2, 2), &[1], &[2], &features, &masks);
    std::fs::remove_file(ds.path(&dataset::mask_rel(1, 2))).unwrap();
    let report = evaluate_retrieval(&ds, FeatureSource::Teacher, teacher_source(&ds)).unwrap();
    assert!(report.triples.is_empty());
    assert_eq!(report.skipped.len(), 1);
    assert_eq!((report.skipped[0].object, report.skipped[0].view), (1, 2));
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    let features = vec![FeatureMap::zeros(2, 2, 2), FeatureMap::from_pixels(2, 2, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), FeatureMap::from_pixels(2, 2, 2, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap()];
    let mut masks = BTreeMap::new();
    masks.insert(4, BTreeMap::from([(1, vec![true, false, false, false]), (2, vec![true, false, false, false])]));
    let ds = write_dataset(dir.path(), (2, 2), &[1], &[2], &features, &masks);
    let report = evaluate_retrieval(&ds, FeatureSource::Teacher, teacher_source(&ds)).unwrap();
    let json = dir.path().join("report.json");
    report.write_json(&json).unwrap();
    let back: n3f::apps::EvalReport = dataset::read_json(&json).unwrap();
    assert_eq!(back, report);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("object,query,gallery,ap"));
    assert_eq!(lines.next().unwrap().split(',').take(3).collect::<Vec<_>>(), vec!["4", "1", "2"]);
}
