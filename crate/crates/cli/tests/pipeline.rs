use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cppcl::curriculum::SketchRaster;

fn cppcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cppcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cppcl(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_pipeline(dir: &Path) -> String {
    ok(
        &[
            "gen-synth",
            "--out",
            "d",
            "--sketches",
            "30",
            "--images",
            "30",
            "--dim-sketch",
            "10",
            "--dim-image",
            "10",
            "--n-true",
            "10",
            "--classes",
            "5",
            "--test-pairs",
            "15",
            "--seed",
            "3",
        ],
        dir,
    );
    ok(
        &[
            "build-laplacian",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--groups",
            "d/groups.csv",
            "--out",
            "d/lap.cpm",
        ],
        dir,
    );
    ok(
        &[
            "build-curriculum",
            "--sketch-scores",
            "d/scores_sketch.csv",
            "--image-scores",
            "d/scores_image.csv",
            "--rho-sketch",
            "0.3",
            "--rho-image",
            "0.3",
            "--seed",
            "5",
            "--out",
            "d/cons.csv",
        ],
        dir,
    );
    ok(
        &[
            "train",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--laplacian",
            "d/lap.cpm",
            "--groups",
            "d/groups.csv",
            "--constraints",
            "d/cons.csv",
            "--atoms",
            "8",
            "--max-iters",
            "15",
            "--out",
            "ck",
        ],
        dir,
    );
    ok(
        &[
            "encode",
            "--dictionary",
            "ck/dict_sketch.cpm",
            "--features",
            "d/test_fs.cpm",
            "--alpha",
            "0.1",
            "--out",
            "q.cpm",
        ],
        dir,
    );
    ok(
        &[
            "encode",
            "--dictionary",
            "ck/dict_image.cpm",
            "--features",
            "d/test_fi.cpm",
            "--alpha",
            "0.1",
            "--out",
            "g.cpm",
        ],
        dir,
    );
    ok(
        &[
            "retrieve",
            "--queries",
            "q.cpm",
            "--gallery",
            "g.cpm",
            "--groups",
            "d/test_groups.csv",
            "--out",
            "res.csv",
        ],
        dir,
    );
    ok(
        &[
            "evaluate",
            "--results",
            "res.csv",
            "--groups",
            "d/test_groups.csv",
            "--matches",
            "d/test_matches.csv",
            "--out-dir",
            "ev",
        ],
        dir,
    )
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report_a = run_pipeline(a.path());
    let report_b = run_pipeline(b.path());
    assert_eq!(report_a, report_b);
    assert!(report_a.contains("map = "));

    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() >= 20, "{:?}", sa.keys());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }
}

#[test]
fn ablation_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-synth",
            "--out",
            "d",
            "--sketches",
            "20",
            "--images",
            "20",
            "--dim-sketch",
            "8",
            "--dim-image",
            "8",
            "--n-true",
            "6",
            "--test-pairs",
            "0",
        ],
        d,
    );
    assert!(!d.join("d/test_fs.cpm").exists());
    ok(
        &[
            "build-laplacian",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--groups",
            "d/groups.csv",
            "--out",
            "lap.cpm",
        ],
        d,
    );
    ok(
        &[
            "train",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--laplacian",
            "lap.cpm",
            "--gamma0",
            "0",
            "--mu",
            "0",
            "--atoms",
            "6",
            "--max-iters",
            "10",
            "--out",
            "ck",
        ],
        d,
    );
    let pacing = std::fs::read_to_string(d.join("ck/pacing.csv")).unwrap();
    let weights: Vec<&str> = pacing
        .lines()
        .filter(|l| !l.starts_with("modality"))
        .collect();
    assert!(!weights.is_empty());
    assert!(weights.iter().all(|l| l.ends_with(",1.0")), "{pacing}");
}

#[test]
fn config_file_preset_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-synth",
            "--out",
            "d",
            "--sketches",
            "12",
            "--images",
            "12",
            "--dim-sketch",
            "6",
            "--dim-image",
            "6",
            "--n-true",
            "5",
            "--test-pairs",
            "0",
        ],
        d,
    );
    ok(
        &[
            "build-laplacian",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--groups",
            "d/groups.csv",
            "--out",
            "lap.cpm",
        ],
        d,
    );
    std::fs::write(
        d.join("cfg.txt"),
        "# run settings\neta = 1.5\nalpha = 9\nmax_outer_iters = 3\n",
    )
    .unwrap();
    ok(
        &[
            "train",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--laplacian",
            "lap.cpm",
            "--config",
            "cfg.txt",
            "--preset",
            "cufs",
            "--atoms",
            "4",
            "--out",
            "ck",
        ],
        d,
    );
    let cfg = std::fs::read_to_string(d.join("ck/config.txt")).unwrap();
    // file sets eta, preset overrides alpha and beta, flag overrides the preset's dictionary size
    for line in [
        "eta = 1.5",
        "alpha = 1.0",
        "beta = 5.0",
        "n_atoms = 4",
        "max_outer_iters = 3",
    ] {
        assert!(cfg.lines().any(|l| l == line), "missing {line:?} in\n{cfg}");
    }
}

#[test]
fn curriculum_from_pgm_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("sk")).unwrap();
    // denser strokes read as more detail, hence easier
    for (name, stride) in [("a.pgm", 2), ("b.pgm", 7), ("c.pgm", 4)] {
        let pixels = (0..32 * 32)
            .map(|i| if (i % 32) % stride == 0 { 255 } else { 0 })
            .collect();
        let r = SketchRaster::new(32, 32, pixels).unwrap();
        std::fs::write(d.join("sk").join(name), r.to_pgm()).unwrap();
    }
    ok(
        &[
            "build-curriculum",
            "--pgm-dir",
            "sk",
            "--scores-out",
            "s.csv",
            "--delta-sketch",
            "0",
            "--out",
            "c.csv",
        ],
        d,
    );
    let scores = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(
        scores.lines().filter(|l| !l.trim().is_empty()).count(),
        3,
        "{scores}"
    );
    let cons = std::fs::read_to_string(d.join("c.csv")).unwrap();
    let mut rows: Vec<&str> = cons.lines().filter(|l| l.starts_with("S,")).collect();
    rows.sort();
    assert_eq!(rows, ["S,1,0", "S,1,2", "S,2,0"]);
}

#[test]
fn evaluate_perfect_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("res.csv"),
        "query_id,rank,gallery_id,distance,relevant\n0,1,0,0.1,1\n0,2,1,0.5,0\n1,1,1,0.2,1\n1,2,0,0.3,0\n",
    )
    .unwrap();
    std::fs::write(d.join("m.csv"), "0,0\n1,1\n").unwrap();
    let out = ok(
        &[
            "evaluate",
            "--results",
            "res.csv",
            "--matches",
            "m.csv",
            "--out-dir",
            "ev",
        ],
        d,
    );
    assert!(out.contains("map = 1.0\n"), "{out}");
    assert!(out.contains("recognition_rate = 1.0\n"), "{out}");
    let metrics = std::fs::read_to_string(d.join("ev/metrics.txt")).unwrap();
    assert_eq!(metrics, out);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| cppcl(args, d).status.code();

    // usage errors
    assert_eq!(code(&["train", "--bogus"]), Some(2));
    assert_eq!(code(&["build-curriculum", "--out", "x.csv"]), Some(2));
    assert_eq!(
        code(&[
            "gen-synth",
            "--out",
            "d",
            "--noise-easy",
            "0.5",
            "--noise-hard",
            "0.1"
        ]),
        Some(2)
    );

    // data errors
    assert_eq!(
        code(&[
            "build-laplacian",
            "--fs",
            "nope.cpm",
            "--fi",
            "nope.cpm",
            "--groups",
            "g.csv",
            "--out",
            "l.cpm"
        ]),
        Some(1)
    );
    std::fs::write(d.join("bad.csv"), "query_id,rank\n0,x\n").unwrap();
    let out = cppcl(&["evaluate", "--results", "bad.csv", "--out-dir", "ev"], d);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));

    // invalid hyperparameter on otherwise valid data
    ok(
        &[
            "gen-synth",
            "--out",
            "d",
            "--sketches",
            "6",
            "--images",
            "6",
            "--dim-sketch",
            "4",
            "--dim-image",
            "4",
            "--n-true",
            "3",
            "--test-pairs",
            "0",
        ],
        d,
    );
    ok(
        &[
            "build-laplacian",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--groups",
            "d/groups.csv",
            "--out",
            "lap.cpm",
        ],
        d,
    );
    assert_eq!(
        code(&[
            "train",
            "--fs",
            "d/fs.cpm",
            "--fi",
            "d/fi.cpm",
            "--laplacian",
            "lap.cpm",
            "--eta",
            "0.5",
            "--out",
            "ck"
        ]),
        Some(2)
    );
}
