//! End-to-end checks of the binary: exit codes, JSON outputs, and the
//! objective ordering on a hand-built adversarial candidate file.

use std::path::Path;
use std::process::Command;

use crossview_core::encoder::Embedding;
use crossview_core::geodata::manifest::ingest;
use crossview_core::retrieval::{GalleryIndex, GeoRecord, RetrievalResult};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
}

fn gen_dataset(dir: &Path) {
    let out = bin()
        .args(["gen", "--out"])
        .arg(dir)
        .args(["--videos", "3", "--frames", "5", "--tile", "16", "--k", "3", "--grid", "2x2", "--seed", "9"])
        .output()
        .expect("run gen");
    assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = bin().args(["gen", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage") || text.contains("usage"), "no usage text: {text}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let out = bin()
        .args(["build-gallery", "--data", "/nonexistent", "--models", "/nonexistent", "--level", "small", "--out", "/tmp/x.tmgx"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_on_exact_predictions_reports_perfect_recall() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_dataset(&data);
    let ingested = ingest(&data.join("manifest.json")).unwrap();

    // Orthonormal gallery rows keyed by the manifest's large ids, plus
    // results that rank every video's true large tile first.
    let n = ingested.manifest.large_tiles.len();
    let embeddings: Vec<Embedding> = ingested
        .manifest
        .large_tiles
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut v = vec![0.0f32; n];
            v[i] = 1.0;
            Embedding { id: l.id.clone(), vec: v }
        })
        .collect();
    let geo: Vec<GeoRecord> = ingested
        .manifest
        .large_tiles
        .iter()
        .map(|l| GeoRecord { lat: l.lat, lon: l.lon, children: l.children.clone() })
        .collect();
    let gallery = GalleryIndex::build(&embeddings, geo).unwrap();
    let gallery_path = tmp.path().join("large.tmgx");
    gallery.save(&gallery_path).unwrap();

    let results: Vec<RetrievalResult> = ingested
        .manifest
        .videos
        .iter()
        .map(|v| RetrievalResult {
            query_id: v.id.clone(),
            ids: vec![v.large_id.clone()],
            scores: vec![1.0],
        })
        .collect();
    let results_path = tmp.path().join("seq.json");
    std::fs::write(&results_path, serde_json::to_string(&results).unwrap()).unwrap();

    let out = bin()
        .args(["eval", "--mode", "seq"])
        .arg("--data")
        .arg(&data)
        .arg("--results")
        .arg(&results_path)
        .arg("--gallery")
        .arg(&gallery_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let payload: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(payload["subcommand"], "eval");
    for key in ["r_at_1", "r_at_5", "r_at_10", "r_at_1pct"] {
        assert_eq!(payload[key].as_f64().unwrap(), 1.0, "{key}");
    }
}

fn adversarial_candidates() -> serde_json::Value {
    // Tight west-east chain with one far-off high-similarity outlier.
    let mut frames = Vec::new();
    for i in 0..9 {
        let x = 500000.0 + i as f64 * 20.0;
        let y = 4500000.0;
        let (chain_sim, outlier_sim) = if i == 4 { (0.6, 0.95) } else { (0.8, 0.3) };
        frames.push(serde_json::json!([
            {"id": format!("chain{i}"), "lat": 40.0, "lon": -74.0, "utm_x": x, "utm_y": y, "sim": chain_sim},
            {"id": format!("far{i}"),   "lat": 40.1, "lon": -74.1, "utm_x": x + 2500.0, "utm_y": y + 2500.0, "sim": outlier_sim},
        ]));
    }
    serde_json::Value::Array(frames)
}

#[test]
fn dp_dominates_nn_on_the_adversarial_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let cands = tmp.path().join("cands.json");
    std::fs::write(&cands, adversarial_candidates().to_string()).unwrap();

    let run = |method: &str| -> serde_json::Value {
        let out_json = tmp.path().join(format!("{method}.json"));
        let out = bin()
            .args(["retrieve", "--method", method])
            .arg("--candidates")
            .arg(&cands)
            .arg("--out-json")
            .arg(&out_json)
            .arg("--out")
            .arg(tmp.path().join(format!("{method}.geojson")))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap()
    };
    let dp = run("dp");
    let nn = run("nn");
    let ds = run("ds");
    let obj = |v: &serde_json::Value| v["objective"].as_f64().unwrap();
    assert!(obj(&dp) <= obj(&nn), "dp {} vs nn {}", obj(&dp), obj(&nn));
    assert!(obj(&dp) <= obj(&ds), "dp {} vs ds {}", obj(&dp), obj(&ds));
    // NN must fall for the outlier at frame 2.
    assert_eq!(nn["choices"][4], 1);
    assert_eq!(dp["choices"][4], 0);
}

#[test]
fn plot_renders_jump_for_nn_but_not_dp() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen_dataset(&data);
    let cands = tmp.path().join("cands.json");
    std::fs::write(&cands, adversarial_candidates().to_string()).unwrap();
    for method in ["dp", "nn"] {
        let st = bin()
            .args(["retrieve", "--method", method])
            .arg("--candidates")
            .arg(&cands)
            .arg("--out")
            .arg(tmp.path().join(format!("{method}.geojson")))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let svg_path = tmp.path().join("traj.svg");
    let out = bin()
        .args(["plot", "--video", "v_0000"])
        .arg("--data")
        .arg(&data)
        .arg("--pred")
        .arg(tmp.path().join("dp.geojson"))
        .arg("--pred")
        .arg(tmp.path().join("nn.geojson"))
        .arg("--out")
        .arg(&svg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));

    let seg_stats = |idx: usize| -> (f64, f64) {
        let pts = crossview_core::plot::parse_polyline(&svg, idx).unwrap();
        let mut lens: Vec<f64> = pts
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .collect();
        lens.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (lens[lens.len() / 2], *lens.last().unwrap())
    };
    // Polyline 0 = truth, 1 = dp, 2 = nn.
    let (dp_median, dp_max) = seg_stats(1);
    let (nn_median, nn_max) = seg_stats(2);
    assert!(nn_max > 3.0 * nn_median, "nn jump invisible: {nn_max} vs median {nn_median}");
    assert!(dp_max <= 3.0 * dp_median, "dp should be smooth: {dp_max} vs median {dp_median}");
}

#[test]
fn config_file_supplies_defaults_and_cli_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "videos=2\nframes=4\ntile=16\nk=3\ngrid=2x1\nseed=5\n").unwrap();
    let data = tmp.path().join("ds");
    let out = bin()
        .args(["gen"])
        .arg("--config")
        .arg(&conf)
        .arg("--out")
        .arg(&data)
        .args(["--videos", "3"]) // CLI wins over config's 2
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ingested = ingest(&data.join("manifest.json")).unwrap();
    assert_eq!(ingested.manifest.videos.len(), 3);
    assert_eq!(ingested.manifest.videos[0].frames.len(), 4);
    assert_eq!(ingested.manifest.k, 3);
}
