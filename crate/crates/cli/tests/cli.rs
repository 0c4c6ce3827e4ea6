use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchace_core::anomaly_map::AnomalyMap;
use patchace_core::pipeline::ScoredSplit;
use patchace_core::synth::Split;
use patchace_core::{
    assemble_embedding, auroc, score_volume, toy_extract, Archive, DType, Dataset, Detector,
    EvalReport, ModelBundle, PatchScoreMap, Tensor,
};
use tempfile::TempDir;

fn patchace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = patchace(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    patchace(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Temporary directory holding the 10 normal + 4 anomalous dataset.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.npz");
        ok(&[
            "synth",
            "--out",
            s(&data),
            "--n-normal",
            "10",
            "--n-anomalous",
            "4",
            "--seed",
            "7",
        ]);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data.npz")
    }

    fn dataset(&self) -> Dataset {
        Dataset::load(self.data()).unwrap()
    }
}

fn report(path: &Path) -> EvalReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_counts_and_digest() {
    let f = Fixture::new();
    let a = Archive::load(f.data()).unwrap();
    assert_eq!(a.names().filter(|n| n.starts_with("img/")).count(), 14);
    assert_eq!(a.names().filter(|n| n.starts_with("mask/")).count(), 14);
    let again = f.path("again.npz");
    ok(&[
        "synth",
        "--out",
        s(&again),
        "--n-normal",
        "10",
        "--n-anomalous",
        "4",
        "--seed",
        "7",
    ]);
    assert_eq!(fs::read(f.data()).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let f = Fixture::new();
    let d = s(&f.dir.path().join("x")).to_string();
    assert_eq!(code(&["synth", "--n-normal", "10"]), 2);
    assert_eq!(code(&["synth", "--out", &d, "--n-normal", "3"]), 2);
    assert_eq!(code(&["synth", "--out", &d, "--height", "60"]), 2);
    assert_eq!(
        code(&[
            "fit",
            "--data",
            s(&f.data()),
            "--out",
            &d,
            "--cov",
            "banded"
        ]),
        2
    );
    assert_eq!(
        code(&["fit", "--data", s(&f.data()), "--out", &d, "--d", "0"]),
        2
    );
    assert_eq!(
        code(&[
            "ablate",
            "--axis",
            "cov",
            "--values",
            "full,bogus",
            "--data",
            s(&f.data()),
            "--out-dir",
            &d
        ]),
        2
    );
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&[]), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let f = Fixture::new();
    let b = f.path("b.npz");
    assert_eq!(
        code(&["fit", "--data", s(&f.path("missing.npz")), "--out", s(&b)]),
        1
    );
    // 200 channels requested from the 112 the toy extractor provides
    assert_eq!(
        code(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "200"]),
        1
    );
}

#[test]
fn fit_shapes_and_manifest_echo() {
    let f = Fixture::new();
    let b = f.path("b.npz");
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&b),
        "--cov",
        "isotropic",
        "--agg",
        "determinant",
    ]);
    let a = Archive::load(&b).unwrap();
    assert_eq!(a.tensor("means").unwrap().shape(), &[32, 32, 100]);
    assert_eq!(a.tensor("covariance").unwrap().shape(), &[32, 32]);
    let manifest: serde_json::Value = a.json("manifest.json").unwrap();
    assert_eq!(manifest["cov_type"], "isotropic");
    assert_eq!(manifest["aggregation"], "determinant");
    assert_eq!(manifest["d"], 100);
    assert_eq!(manifest["channel_indices"].as_array().unwrap().len(), 100);
    assert_eq!(manifest["sample_count"], 8);

    let full = f.path("full.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&full)]);
    assert_eq!(
        Archive::load(&full)
            .unwrap()
            .tensor("covariance")
            .unwrap()
            .shape(),
        &[32, 32, 100, 100]
    );
}

#[test]
fn refit_is_byte_identical() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.npz"), f.path("b.npz"));
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&a),
        "--seed",
        "3",
        "--d",
        "40",
    ]);
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&b),
        "--seed",
        "3",
        "--d",
        "40",
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = f.path("c.npz");
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&c),
        "--seed",
        "4",
        "--d",
        "40",
    ]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_file_precedence() {
    let f = Fixture::new();
    let cfg = f.path("cfg.json");
    fs::write(&cfg, r#"{"cov_type": "diagonal", "d": 20}"#).unwrap();
    let b = f.path("b.npz");
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&b),
        "--config",
        s(&cfg),
        "--cov",
        "isotropic",
    ]);
    let m = ModelBundle::load(&b).unwrap().manifest;
    assert_eq!(m.cov_type.to_string(), "isotropic");
    assert_eq!(m.d, 20);
}

#[test]
fn ace_without_signature_exits_1() {
    let f = Fixture::new();
    let b = f.path("b.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "16"]);
    let out = patchace(&[
        "score",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("r.npz")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patchace signature"));
    ok(&[
        "score",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("r.npz")),
        "--detector",
        "mahalanobis",
    ]);
}

/// Mask-positive cells counted directly: each 2×2 pixel block of a 64×64
/// mask is one cell of the 32×32 grid, positive with ≥ 2 positive pixels.
fn positive_cells(mask: &Tensor) -> usize {
    let m = mask.as_u8().unwrap();
    let mut k = 0;
    for cy in 0..32 {
        for cx in 0..32 {
            let n: usize = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dy, dx)| m[(2 * cy + dy) * 64 + 2 * cx + dx] as usize)
                .sum();
            k += usize::from(n >= 2);
        }
    }
    k
}

#[test]
fn signature_source_counts_and_shapes() {
    let f = Fixture::new();
    let ds = f.dataset();
    let b = f.path("b.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "12"]);

    ok(&["signature", "--bundle", s(&b), "--data", s(&f.data())]);
    let m = ModelBundle::load(&b).unwrap().manifest;
    // two anomalous validation images, 32×32 cells each
    assert_eq!(m.signature_source_count, Some(2 * 32 * 32));

    ok(&[
        "signature",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--signature-masks",
    ]);
    let expected: usize = ds
        .split(Split::Val)
        .iter()
        .filter(|e| e.label == 1)
        .map(|e| positive_cells(ds.mask(e).unwrap()))
        .sum();
    assert!(expected > 0);
    assert_eq!(
        ModelBundle::load(&b)
            .unwrap()
            .manifest
            .signature_source_count,
        Some(expected)
    );

    ok(&[
        "signature",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--signature-mode",
        "per-location",
    ]);
    let a = Archive::load(&b).unwrap();
    assert_eq!(a.tensor("signature").unwrap().shape(), &[32, 32, 12]);
}

#[test]
fn signature_rejects_mismatched_features() {
    let f = Fixture::new();
    let b = f.path("b.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "12"]);
    // 12 channels in total where the bundle selected from 112
    let mut feats = Archive::new();
    let ds = f.dataset();
    for e in ds
        .manifest
        .train
        .iter()
        .chain(&ds.manifest.val)
        .chain(&ds.manifest.test)
    {
        feats.insert_tensor(
            format!("level1/{}", e.id),
            Tensor::zeros(vec![4, 32, 32], DType::F32),
        );
        feats.insert_tensor(
            format!("level2/{}", e.id),
            Tensor::zeros(vec![4, 16, 16], DType::F32),
        );
        feats.insert_tensor(
            format!("level3/{}", e.id),
            Tensor::zeros(vec![4, 8, 8], DType::F32),
        );
    }
    let fp = f.path("feats.npz");
    feats.save(&fp).unwrap();
    assert_eq!(
        code(&[
            "signature",
            "--bundle",
            s(&b),
            "--data",
            s(&f.data()),
            "--features",
            s(&fp)
        ]),
        1
    );
}

#[test]
fn extracted_features_match_toy_path() {
    let f = Fixture::new();
    let feats = f.path("feats.npz");
    ok(&["extract", "--data", s(&f.data()), "--out", s(&feats)]);
    let (a, b) = (f.path("a.npz"), f.path("b.npz"));
    ok(&["fit", "--data", s(&f.data()), "--out", s(&a), "--d", "30"]);
    ok(&[
        "fit",
        "--data",
        s(&f.data()),
        "--out",
        s(&b),
        "--d",
        "30",
        "--features",
        s(&feats),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn scores_match_library_and_bounds() {
    let f = Fixture::new();
    let ds = f.dataset();
    let b = f.path("b.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "24"]);
    ok(&["signature", "--bundle", s(&b), "--data", s(&f.data())]);
    let bundle = ModelBundle::load(&b).unwrap();

    for (detector, split) in [("ace", "test"), ("mahalanobis", "train")] {
        let r = f.path(&format!("r-{detector}.npz"));
        ok(&[
            "score",
            "--bundle",
            s(&b),
            "--data",
            s(&f.data()),
            "--out",
            s(&r),
            "--detector",
            detector,
            "--split",
            split,
        ]);
        let results = ScoredSplit::from_archive(&Archive::load(&r).unwrap()).unwrap();
        let det: Detector = detector.parse().unwrap();
        let split: Split = split.parse().unwrap();
        for (entry, patch) in ds.split(split).iter().zip(&results.patches) {
            let pyr =
                toy_extract(ds.image(entry).unwrap(), bundle.manifest.extractor_seed).unwrap();
            let vol = assemble_embedding(&pyr, &bundle.manifest.channel_indices).unwrap();
            let lib = score_volume(
                &vol,
                &bundle.field,
                &bundle.whiten,
                bundle.signature.as_ref(),
                det,
            )
            .unwrap();
            let lib = PatchScoreMap::from_tensor(&lib.to_tensor(), det).unwrap();
            assert_eq!(patch.scores(), lib.scores(), "{}", entry.id);
        }
        let all = results
            .patches
            .iter()
            .flat_map(|p| p.scores().iter().copied());
        match det {
            Detector::Ace => assert!(all.clone().all(|v| (-1.0..=1.0).contains(&v))),
            Detector::Mahalanobis => assert!(results.image_scores().iter().all(|&v| v >= 0.0)),
        }
    }
}

#[test]
fn pgm_export() {
    let f = Fixture::new();
    let b = f.path("b.npz");
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "8"]);
    let dir = f.path("pgm");
    ok(&[
        "score",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--out",
        s(&f.path("r.npz")),
        "--detector",
        "mahalanobis",
        "--pgm-dir",
        s(&dir),
    ]);
    let bytes = fs::read(dir.join("anomalous_0003.pgm")).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 64 * 64);
}

#[test]
fn eval_matches_library_auroc() {
    let f = Fixture::new();
    let ds = f.dataset();
    let (b, r, rep) = (f.path("b.npz"), f.path("r.npz"), f.path("rep.json"));
    ok(&["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "16"]);
    ok(&[
        "score",
        "--bundle",
        s(&b),
        "--data",
        s(&f.data()),
        "--out",
        s(&r),
        "--detector",
        "mahalanobis",
    ]);
    ok(&[
        "eval",
        "--data",
        s(&f.data()),
        "--results",
        s(&r),
        "--out",
        s(&rep),
    ]);
    let results = ScoredSplit::from_archive(&Archive::load(&r).unwrap()).unwrap();
    let labels: Vec<bool> = results.labels.iter().map(|&l| l == 1).collect();
    let expected = auroc(&results.image_scores(), &labels).unwrap();
    let got = report(&rep);
    assert_eq!(got.image_auroc, expected);
    assert_eq!(got.runs.len(), 1);
    assert_eq!(got.std.image_auroc, 0.0);
    assert_eq!(results.ids.len(), ds.split(Split::Test).len());
}

#[test]
fn eval_perfect_maps_and_single_class() {
    let f = Fixture::new();
    let ds = f.dataset();
    let test = ds.split(Split::Test);
    let masks: Vec<AnomalyMap> = test
        .iter()
        .map(|e| AnomalyMap::from_tensor(ds.mask(e).unwrap(), 0.0).unwrap())
        .collect();
    let perfect = ScoredSplit {
        detector: Detector::Mahalanobis,
        sigma: 0.0,
        ids: test.iter().map(|e| e.id.clone()).collect(),
        labels: test.iter().map(|e| e.label).collect(),
        patches: test
            .iter()
            .map(|_| PatchScoreMap::new((2, 2), vec![0.0; 4], Detector::Mahalanobis).unwrap())
            .collect(),
        maps: masks,
    };
    let r = f.path("perfect.npz");
    perfect.to_archive().unwrap().save(&r).unwrap();
    let rep = f.path("rep.json");
    ok(&[
        "eval",
        "--data",
        s(&f.data()),
        "--results",
        s(&r),
        "--out",
        s(&rep),
    ]);
    let got = report(&rep);
    assert_eq!(got.pixel_auroc, Some(1.0));
    assert_eq!(got.image_auroc, 1.0);

    let keep: Vec<usize> = (0..perfect.ids.len())
        .filter(|&i| perfect.labels[i] == 0)
        .collect();
    let normals_only = ScoredSplit {
        ids: keep.iter().map(|&i| perfect.ids[i].clone()).collect(),
        labels: keep.iter().map(|&i| perfect.labels[i]).collect(),
        patches: keep.iter().map(|&i| perfect.patches[i].clone()).collect(),
        maps: keep.iter().map(|&i| perfect.maps[i].clone()).collect(),
        ..perfect
    };
    let r1 = f.path("single.npz");
    normals_only.to_archive().unwrap().save(&r1).unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--data",
            s(&f.data()),
            "--results",
            s(&r1),
            "--out",
            s(&rep)
        ]),
        1
    );
}

#[test]
fn three_seeds_report_structure() {
    let f = Fixture::new();
    let rep = f.path("rep.json");
    let out = ok(&[
        "eval",
        "--data",
        s(&f.data()),
        "--seeds",
        "0,1,2",
        "--d",
        "20",
        "--out",
        s(&rep),
    ]);
    let got = report(&rep);
    assert_eq!(
        got.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
    let n = got.runs.len() as f64;
    let mean = got.runs.iter().map(|r| r.image_auroc).sum::<f64>() / n;
    assert!((got.mean.image_auroc - mean).abs() < 1e-15);
    assert_eq!(got.config["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(got.config["d"], 20);
    assert_eq!(got.config_fingerprint.len(), 64);
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(raw["runs"].as_array().unwrap().len(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("over 3 run(s)"));
}

#[test]
fn thread_cap_does_not_change_output() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.npz"), f.path("b.npz"));
    ok(&["fit", "--data", s(&f.data()), "--out", s(&a), "--d", "16"]);
    let out = Command::new(env!("CARGO_BIN_EXE_patchace"))
        .env("PATCH_ACE_THREADS", "1")
        .args(["fit", "--data", s(&f.data()), "--out", s(&b), "--d", "16"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let bad = Command::new(env!("CARGO_BIN_EXE_patchace"))
        .env("PATCH_ACE_THREADS", "zero")
        .args(["fit", "--data", s(&f.data()), "--out", s(&b)])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

fn csv_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("table.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ablation_over_covariance_types() {
    let f = Fixture::new();
    let dir = f.path("abl");
    ok(&[
        "ablate",
        "--axis",
        "cov",
        "--values",
        "full,diagonal,isotropic",
        "--seeds",
        "0,1,2",
        "--d",
        "16",
        "--data",
        s(&f.data()),
        "--out-dir",
        s(&dir),
    ]);
    let rows = csv_rows(&dir);
    assert_eq!(rows[0], vec!["metric", "full", "diagonal", "isotropic"]);
    assert_eq!(rows.len(), 3);
    for (row, key) in rows[1..].iter().zip(["image_auroc", "pixel_auroc"]) {
        assert_eq!(row[0], key);
        assert_eq!(row.len(), 4);
    }
    // every cell reproduces from the persisted report
    for (j, v) in ["full", "diagonal", "isotropic"].iter().enumerate() {
        let r = report(&dir.join(v).join("report.json"));
        assert_eq!(r.runs.len(), 3);
        let cell = format!(
            "{:.2}±{:.2}",
            100.0 * r.mean.image_auroc,
            100.0 * r.std.image_auroc
        );
        assert_eq!(rows[1][j + 1], cell);
        assert_eq!(r.config["cov_type"], *v);
    }
    assert!(fs::read_to_string(dir.join("table.txt"))
        .unwrap()
        .contains("pixel AUROC"));
}

#[test]
fn ablation_over_detectors() {
    let f = Fixture::new();
    let dir = f.path("abl");
    ok(&[
        "ablate",
        "--axis",
        "detector",
        "--values",
        "ace,mahalanobis",
        "--seeds",
        "5",
        "--d",
        "16",
        "--data",
        s(&f.data()),
        "--out-dir",
        s(&dir),
    ]);
    let rows = csv_rows(&dir);
    assert_eq!(rows[0], vec!["metric", "ace", "mahalanobis"]);
    assert!(rows[1..].iter().all(|r| r.len() == 3));
}

#[test]
fn ace_isotropic_ablation_is_aggregation_invariant() {
    let f = Fixture::new();
    let dir = f.path("abl");
    let aggs = ["mean-diagonal", "mean-full", "determinant", "trace"];
    ok(&[
        "ablate",
        "--axis",
        "agg",
        "--values",
        &aggs.join(","),
        "--cov",
        "isotropic",
        "--detector",
        "ace",
        "--seeds",
        "0,1",
        "--d",
        "32",
        "--data",
        s(&f.data()),
        "--out-dir",
        s(&dir),
    ]);
    let rows = csv_rows(&dir);
    for row in &rows[1..] {
        assert!(row[2..].iter().all(|c| c == &row[1]), "{row:?}");
    }
    let reference = report(&dir.join(aggs[0]).join("report.json"));
    for agg in &aggs[1..] {
        let r = report(&dir.join(agg).join("report.json"));
        assert_eq!(r.runs, reference.runs, "{agg}");
        for seed in [0, 1] {
            let name = format!("results-seed{seed}.npz");
            let a = Archive::load(dir.join(aggs[0]).join(&name)).unwrap();
            let b = Archive::load(dir.join(agg).join(&name)).unwrap();
            for id in a.names().filter(|n| n.starts_with("map/")) {
                assert_eq!(a.tensor(id).unwrap(), b.tensor(id).unwrap(), "{agg} {id}");
            }
        }
    }
}

#[test]
fn failed_ablation_runs_are_marked() {
    let f = Fixture::new();
    let dir = f.path("abl");
    let out = patchace(&[
        "ablate",
        "--axis",
        "cov",
        "--values",
        "full,diagonal",
        "--seeds",
        "0",
        "--d",
        "500",
        "--data",
        s(&f.data()),
        "--out-dir",
        s(&dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let rows = csv_rows(&dir);
    assert_eq!(rows[0], vec!["metric", "full", "diagonal"]);
    assert!(rows[1..]
        .iter()
        .all(|r| r[1..].iter().all(|c| c == "FAILED")));
}
