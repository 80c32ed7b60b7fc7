use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tilegrade_core::pipeline::PipelineConfig;
use tilegrade_core::wsi_io::{tile_grid, write_slide, SlideMeta, Tile};

fn tilegrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilegrade"))
        .args(args)
        .env_remove("TILEGRADE_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn effective(args: &[&str]) -> PipelineConfig {
    let mut all = vec!["config"];
    all.extend_from_slice(args);
    let o = tilegrade(&all);
    assert!(o.status.success(), "{}", stderr(&o));
    PipelineConfig::from_toml_str(&stdout(&o)).expect("config output parses")
}

fn pick<T>(in_file: bool, in_flag: bool, default: T, file: T, flag: T) -> T {
    match (in_file, in_flag) {
        (_, true) => flag,
        (true, false) => file,
        _ => default,
    }
}

#[test]
fn config_precedence_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = PipelineConfig::default();
    // (file value, flag value) per key; each key is independently absent,
    // file-only, flag-only or both.
    let (file_ws, flag_ws) = (3usize, 5usize);
    let (file_ts, flag_ts) = (512u32, 256u32);
    let (file_seed, flag_seed) = (7u64, 99u64);
    for mask in 0..64u32 {
        let state = |k: u32| (mask >> (2 * k)) & 3;
        let in_file = |k: u32| state(k) & 1 == 1;
        let in_flag = |k: u32| state(k) & 2 == 2;
        let mut toml = String::new();
        let mut args: Vec<String> = Vec::new();
        if in_file(0) {
            toml += &format!("workers = {file_ws}\n");
        }
        if in_file(1) {
            toml += &format!("tile_size_px = {file_ts}\n");
        }
        if in_file(2) {
            toml += &format!("[split]\nseed = {file_seed}\n");
        }
        if in_flag(0) {
            args.extend(["--workers".into(), flag_ws.to_string()]);
        }
        if in_flag(1) {
            args.extend(["--tile-size".into(), flag_ts.to_string()]);
        }
        if in_flag(2) {
            args.extend(["--seed".into(), flag_seed.to_string()]);
        }
        let cfg_path = dir.path().join(format!("c{mask}.toml"));
        fs::write(&cfg_path, &toml).unwrap();
        args.extend(["--config".into(), cfg_path.display().to_string()]);
        let got = effective(&args.iter().map(String::as_str).collect::<Vec<_>>());

        assert_eq!(got.workers, pick(in_file(0), in_flag(0), defaults.workers, file_ws, flag_ws), "mask {mask}");
        assert_eq!(got.tile_size_px, pick(in_file(1), in_flag(1), defaults.tile_size_px, file_ts, flag_ts), "mask {mask}");
        assert_eq!(got.split.seed, pick(in_file(2), in_flag(2), defaults.split.seed, file_seed, flag_seed), "mask {mask}");
        // Untouched keys keep their defaults.
        assert_eq!(got.queue_depth, defaults.queue_depth);
    }
}

#[test]
fn config_output_round_trips_as_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let first = tilegrade(&["config", "--alpha", "0.5", "--workers", "2"]);
    assert!(first.status.success());
    let path = dir.path().join("dump.toml");
    fs::write(&path, first.stdout.clone()).unwrap();
    let second = tilegrade(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = dir.path().join("bad.toml");
    fs::write(&bad_key, "no_such_key = 1\n").unwrap();
    let o = tilegrade(&["config", "--config", bad_key.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));

    let o = tilegrade(&["config", "--tile-size", "100"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("multiple of 16"), "{}", stderr(&o));

    let o = tilegrade(&[
        "predict", "--slide", "/nonexistent.tif", "--backend", "gpu:x", "--out", "o.tif", "--csv", "p.csv",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown backend kind"), "{}", stderr(&o));

    let missing = dir.path().join("missing.tif");
    let lut = dir.path().join("lut.csv");
    fs::write(&lut, "slide_id,col,row,p_regular,p_g3,p_g4,p_g5,p_art_empty,p_art_sponge\n").unwrap();
    let o = tilegrade(&[
        "predict",
        "--slide",
        missing.to_str().unwrap(),
        "--backend",
        &format!("lookup:{}", lut.display()),
        "--out",
        dir.path().join("o.tif").to_str().unwrap(),
        "--csv",
        dir.path().join("p.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:") && stderr(&o).contains("missing.tif"), "{}", stderr(&o));
}

fn write_slide_file(path: &Path, w: u32, h: u32) {
    let meta = SlideMeta::new(w, h, None);
    let grid = tile_grid(&meta, 256);
    let tiles: Vec<Tile> = grid
        .coords()
        .map(|c| {
            let r = grid.tile_rect(c);
            let mut t = Tile::blank(c, 256, r.w, r.h);
            for y in 0..r.h {
                for x in 0..r.w {
                    let (gx, gy) = (r.x + x, r.y + y);
                    t.set_pixel(x, y, [(gx % 251) as u8, (gy % 241) as u8, ((gx ^ gy) % 239) as u8]);
                }
            }
            t
        })
        .collect();
    write_slide(tiles, &meta, 256, path).unwrap();
}

#[test]
fn prepare_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (slides, ann, out) = (dir.path().join("slides"), dir.path().join("ann"), dir.path().join("dataset"));
    fs::create_dir_all(&slides).unwrap();
    fs::create_dir_all(&ann).unwrap();
    write_slide_file(&slides.join("case1.tif"), 1024, 1024);
    fs::write(
        ann.join("case1.geojson"),
        r#"{"type":"FeatureCollection","features":[
          {"type":"Feature","properties":{"classification":{"name":"Gleason 4"}},
           "geometry":{"type":"Polygon","coordinates":[[[0,0],[1024,0],[1024,512],[0,512],[0,0]]]}},
          {"type":"Feature","properties":{"classification":{"name":"Regular"}},
           "geometry":{"type":"Polygon","coordinates":[[[0,512],[1024,512],[1024,1024],[0,1024],[0,512]]]}}]}"#,
    )
    .unwrap();

    let o = tilegrade(&[
        "prepare",
        "--slides",
        slides.to_str().unwrap(),
        "--annotations",
        ann.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--tile-size",
        "256",
        "--ratios",
        "50,25,25",
        "--balance",
        "none",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("labeled: 16, written: 16"), "{}", stdout(&o));
    let manifest = out.join("manifest.csv");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 17);

    // Lookup table that predicts Gleason 4 everywhere.
    let lut = dir.path().join("lut.csv");
    let mut rows = String::from("slide_id,col,row,p_regular,p_g3,p_g4,p_g5,p_art_empty,p_art_sponge\n");
    for row in 0..4 {
        for col in 0..4 {
            rows += &format!("case1,{col},{row},0.1,0.1,0.6,0.1,0.05,0.05\n");
        }
    }
    fs::write(&lut, rows).unwrap();
    let (overlay, csv) = (dir.path().join("overlay.tif"), dir.path().join("pred.csv"));
    let o = tilegrade(&[
        "predict",
        "--slide",
        slides.join("case1.tif").to_str().unwrap(),
        "--backend",
        &format!("lookup:{}", lut.display()),
        "--out",
        overlay.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--tile-size",
        "256",
        "--workers",
        "2",
        "--batch-size",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("16 tiles in 6 batches on 2 workers"), "{}", stdout(&o));
    assert!(overlay.exists());

    let report = dir.path().join("report.json");
    let o = tilegrade(&[
        "evaluate",
        "--pred",
        csv.to_str().unwrap(),
        "--truth",
        manifest.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--binary-mode",
        "benign-artefacts",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"n_tiles\": 16"), "{json}");
    assert!(report.with_extension("txt").exists());
    assert!(stdout(&o).contains("Gleason 4"));
}
