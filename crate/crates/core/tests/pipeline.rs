mod common {
    pub mod fixtures;
    pub mod onnx_fixture;
}

use std::fs;
use std::path::Path;

use common::fixtures::{geojson, rect_ring, write_lookup, write_synthetic_slide};
use common::onnx_fixture::LinearFixture;
use tilegrade_core::annotation::GleasonClass;
use tilegrade_core::dataset::{assign_label, read_manifest, Split};
use tilegrade_core::exec::Execution;
use tilegrade_core::inference::{BackendKind, BackendSpec, BatchItem, Classifier, InferenceError, LookupBackend};
use tilegrade_core::overlay::{blend_tile, read_sidecar, reconstruct_overlay, write_sidecar};
use tilegrade_core::pipeline::{evaluate, predict, predict_with, prepare, PipelineConfig, PipelineError};
use tilegrade_core::wsi_io::{open_slide, read_tile, TileCoord};
use tilegrade_core::{ClassProbabilities, Prediction};

fn prepare_inputs(root: &Path) {
    let (slides, ann) = (root.join("slides"), root.join("ann"));
    fs::create_dir_all(&slides).unwrap();
    fs::create_dir_all(&ann).unwrap();
    write_synthetic_slide(&slides.join("alpha.tif"), 2048, 2048, 1);
    write_synthetic_slide(&slides.join("beta.tif"), 2048, 1800, 2);
    fs::write(
        ann.join("alpha.geojson"),
        geojson(&[
            ("Gleason 3", &rect_ring(0.0, 0.0, 1024.0, 1024.0)),
            ("Regular", &rect_ring(1024.0, 0.0, 2048.0, 2048.0)),
            ("Artefact Sponge", &rect_ring(0.0, 1024.0, 1024.0, 2048.0)),
        ]),
    )
    .unwrap();
    fs::write(
        ann.join("beta.geojson"),
        geojson(&[
            ("Gleason 4", &rect_ring(0.0, 0.0, 1024.0, 1800.0)),
            ("Gleason 5", &[(1024.0, 0.0), (2048.0, 0.0), (1024.0, 1024.0)]),
            ("Questionable", &rect_ring(1536.0, 1536.0, 2048.0, 1800.0)),
        ]),
    )
    .unwrap();
}

fn small_cfg(workers: usize) -> PipelineConfig {
    PipelineConfig { tile_size_px: 512, workers, ..PipelineConfig::default() }
}

#[test]
fn prepare_labels_splits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    prepare_inputs(dir.path());
    let mut manifests = Vec::new();
    for workers in [1, 4] {
        let out = dir.path().join(format!("out{workers}"));
        let s = prepare(&dir.path().join("slides"), &dir.path().join("ann"), &out, &small_cfg(workers)).unwrap();
        assert_eq!(s.slides, 2);
        assert_eq!(s.tiles_scanned, 32);
        assert!(s.tiles_written <= s.tiles_labeled && s.tiles_labeled < s.tiles_scanned);
        manifests.push(fs::read(&s.manifest).unwrap());
        let rows = read_manifest(&s.manifest).unwrap();
        assert_eq!(rows.len(), s.tiles_written);
        let slide_alpha = open_slide(dir.path().join("slides/alpha.tif")).unwrap();
        for r in &rows {
            let tile = r.to_tile();
            assert_eq!(assign_label(&tile.coverage), tile.label, "{r:?}");
            assert_ne!(tile.split, Split::None);
            let png = image::open(out.join(&r.path)).unwrap().to_rgb8();
            assert_eq!((png.width(), png.height()), (512, 512));
            if r.slide_id == "alpha" {
                let t = read_tile(&slide_alpha, r.coord(), 512).unwrap();
                assert_eq!(png.as_raw(), &t.pixels);
            }
        }
        // Pure tiles carry their annotation's label.
        let at = |slide: &str, c, r| rows.iter().find(|x| x.slide_id == slide && x.col == c && x.row == r);
        assert_eq!(at("alpha", 0, 0).unwrap().class(), Some(GleasonClass::Gleason3));
        assert_eq!(at("alpha", 3, 3).unwrap().class(), Some(GleasonClass::Regular));
        assert_eq!(at("beta", 1, 3).unwrap().class(), Some(GleasonClass::Gleason4));
        // Uncovered beta tiles are dropped.
        assert!(at("beta", 3, 2).is_none());
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn prepare_rejects_slide_without_annotation() {
    let dir = tempfile::tempdir().unwrap();
    prepare_inputs(dir.path());
    fs::remove_file(dir.path().join("ann/beta.geojson")).unwrap();
    let err = prepare(&dir.path().join("slides"), &dir.path().join("ann"), &dir.path().join("o"), &small_cfg(1))
        .unwrap_err();
    assert!(matches!(err, PipelineError::UnmatchedSlide(ref s) if s == "beta"), "{err}");
}

#[test]
fn questionable_only_annotations_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (slides, ann) = (dir.path().join("slides"), dir.path().join("ann"));
    fs::create_dir_all(&slides).unwrap();
    fs::create_dir_all(&ann).unwrap();
    write_synthetic_slide(&slides.join("q.tif"), 1024, 1024, 6);
    fs::write(ann.join("q.geojson"), geojson(&[("Questionable", &rect_ring(0.0, 0.0, 1024.0, 1024.0))])).unwrap();
    let out = dir.path().join("out");
    let s = prepare(&slides, &ann, &out, &small_cfg(1)).unwrap();
    assert_eq!((s.tiles_scanned, s.tiles_written), (4, 0));
    assert!(!s.warnings.is_empty());
    assert_eq!(read_manifest(&s.manifest).unwrap().len(), 0);
}

#[test]
fn prepare_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    prepare_inputs(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let s = prepare(&dir.path().join("slides"), &dir.path().join("ann"), &out, &small_cfg(0)).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(out.join("tiles"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        (fs::read(s.manifest).unwrap(), files)
    };
    assert!(run("a") == run("b"));
}

fn lookup_cfg(lut: &Path, workers: usize, batch: usize, queue_depth: usize) -> PipelineConfig {
    let mut backend = BackendSpec::new(BackendKind::Lookup { path: lut.to_path_buf() });
    backend.batch_size = batch;
    PipelineConfig { backend: Some(backend), queue_depth, ..small_cfg(workers) }
}

#[test]
fn predict_is_deterministic_and_blends_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let slide_path = dir.path().join("s.tif");
    write_synthetic_slide(&slide_path, 2600, 1700, 5);
    let slide = open_slide(&slide_path).unwrap();
    let lut = dir.path().join("lut.csv");
    write_lookup(&lut, "s", &slide.grid(512), 9);

    let mut outputs = Vec::new();
    for (workers, batch, depth) in [(1, 5, 1), (2, 5, 3), (8, 3, 1), (3, 28, 32)] {
        let (ov, csv) = (dir.path().join(format!("o{workers}.tif")), dir.path().join(format!("p{workers}.csv")));
        let s = predict(&slide_path, &lookup_cfg(&lut, workers, batch, depth), &ov, &csv).unwrap();
        assert_eq!((s.tiles, s.workers), (24, workers));
        assert!(!dir.path().join(format!("p{workers}.csv.partial")).exists());
        outputs.push((fs::read(&ov).unwrap(), fs::read(&csv).unwrap(), ov, csv));
    }
    for o in &outputs[1..] {
        assert!(o.0 == outputs[0].0, "overlay bytes differ");
        assert!(o.1 == outputs[0].1, "csv bytes differ");
    }

    let preds = read_sidecar(&outputs[0].3).unwrap();
    let coords: Vec<TileCoord> = slide.grid(512).coords().collect();
    assert_eq!(preds.iter().map(|p| p.coord).collect::<Vec<_>>(), coords);
    let lookup = LookupBackend::load(&lut).unwrap();
    let overlay = open_slide(&outputs[0].2).unwrap();
    let map = PipelineConfig::default().overlay;
    for p in &preds {
        let raw = lookup.classify_raw(&[BatchItem { slide_id: "s", coord: p.coord, tensor: None }]).unwrap();
        let want = ClassProbabilities::normalize(&raw[0]).unwrap();
        assert_eq!(p.probs, want);
        let src = read_tile(&slide, p.coord, 512).unwrap();
        let (color, alpha) = map.tint_for(&p.probs).unwrap();
        assert_eq!(read_tile(&overlay, p.coord, 512).unwrap(), blend_tile(&src, color, alpha));
    }

    // Rebuilding the overlay from the CSV gives the same file.
    let rebuilt = dir.path().join("rebuilt.tif");
    reconstruct_overlay(&slide, &preds, &map, 512, &rebuilt, Execution::default()).unwrap();
    assert!(fs::read(&rebuilt).unwrap() == outputs[0].0);
}

struct FailAt(TileCoord);

impl Classifier for FailAt {
    fn classify_raw(&self, batch: &[BatchItem<'_>]) -> Result<Vec<Vec<f64>>, InferenceError> {
        if batch.iter().any(|b| b.coord == self.0) {
            return Err(InferenceError::Unavailable("injected".into()));
        }
        Ok(vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]; batch.len()])
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}

#[test]
fn failed_predict_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let slide_path = dir.path().join("s.tif");
    write_synthetic_slide(&slide_path, 2048, 2048, 3);
    let slide = open_slide(&slide_path).unwrap();
    for workers in [1, 4] {
        let (ov, csv) = (dir.path().join("o.tif"), dir.path().join("p.csv"));
        let cfg = PipelineConfig { queue_depth: 1, ..small_cfg(workers) };
        let err = predict_with(&slide, &FailAt(TileCoord::new(2, 3)), 2, None, &cfg, &ov, &csv).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("slide s") && msg.contains("(2, 3)"), "{msg}");
        let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(left, vec![std::ffi::OsString::from("s.tif")], "leftovers for {workers} workers");
    }
}

#[test]
fn model_backend_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let slide_path = dir.path().join("m.tif");
    write_synthetic_slide(&slide_path, 1024, 1536, 4);
    let model = dir.path().join("model.onnx");
    let weights = vec![[1.0, -0.5, 0.2], [0.3, 0.8, -1.0], [-0.7, 0.1, 0.4], [0.0, 0.5, 0.5], [0.9, 0.9, 0.9], [-0.2, -0.4, 0.6]];
    LinearFixture::new(weights, vec![0.1, -0.2, 0.0, 0.3, -0.1, 0.05]).write(&model);
    let mut csvs = Vec::new();
    for (workers, batch) in [(1, 1), (3, 4)] {
        let mut backend = BackendSpec::new(BackendKind::ModelFile { path: model.clone(), output: Default::default() });
        backend.batch_size = batch;
        let cfg = PipelineConfig { backend: Some(backend), ..small_cfg(workers) };
        let csv = dir.path().join(format!("m{workers}.csv"));
        predict(&slide_path, &cfg, &dir.path().join(format!("m{workers}.tif")), &csv).unwrap();
        csvs.push(read_sidecar(&csv).unwrap());
    }
    assert_eq!(csvs[0].len(), 6);
    for (a, b) in csvs[0].iter().zip(&csvs[1]) {
        assert_eq!(a.coord, b.coord);
        let sum: f64 = a.probs.as_array().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (x, y) in a.probs.as_array().iter().zip(b.probs.as_array()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn evaluate_perfect_predictions_and_empty_join() {
    let dir = tempfile::tempdir().unwrap();
    prepare_inputs(dir.path());
    let out = dir.path().join("out");
    let cfg = PipelineConfig { balance_enabled: false, ..small_cfg(2) };
    let s = prepare(&dir.path().join("slides"), &dir.path().join("ann"), &out, &cfg).unwrap();
    let rows = read_manifest(&s.manifest).unwrap();
    let preds: Vec<Prediction> = rows
        .iter()
        .map(|r| {
            let mut p = [0.0; 6];
            p[r.class().unwrap().model_index().unwrap()] = 1.0;
            Prediction::new(r.slide_id.clone(), r.coord(), ClassProbabilities::normalize(&p).unwrap())
        })
        .collect();
    let pred_csv = dir.path().join("pred.csv");
    write_sidecar(&preds, &pred_csv).unwrap();
    let report = dir.path().join("report.json");
    let e = evaluate(&pred_csv, &s.manifest, &report, Default::default()).unwrap();
    assert_eq!(e.joined, rows.len());
    assert_eq!(e.report.macro_avg.accuracy, Some(1.0));
    assert_eq!(e.report.macro_avg.f1, Some(1.0));
    assert!(report.with_extension("txt").exists());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["n_tiles"], rows.len());

    let stranger: Vec<Prediction> = preds
        .iter()
        .map(|p| Prediction::new("other", p.coord, p.probs))
        .collect();
    write_sidecar(&stranger, &pred_csv).unwrap();
    assert!(matches!(
        evaluate(&pred_csv, &s.manifest, &report, Default::default()),
        Err(PipelineError::EmptyJoin { .. })
    ));
}
