use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use augsel_cli::{Cli, Command as Sub};
use augsel_core::augment::{sample_distribution, AugDistribution};
use augsel_core::corpus::load_waveform;
use augsel_core::kernelstats::DependenceScore;
use augsel_core::rng::seeded_rng;
use augsel_core::selector::{ScoredCandidate, ScoringConfig, SearchConfig, SearchResult};
use clap::Parser;

fn augsel(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augsel"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AUGSEL_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = augsel(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn corpus(dir: &Path, samples: &str) -> PathBuf {
    ok(&["synth", "--out", "corpus", "--samples", samples, "--duration", "1.5"], dir);
    dir.join("corpus/manifest.jsonl")
}

fn write_dist(dir: &Path, name: &str, d: &AugDistribution) -> String {
    fs::write(dir.join(name), d.to_json()).unwrap();
    name.to_string()
}

fn small_search(dir: &Path, out: &str, seed: &str, extra: &[&str]) -> Vec<u8> {
    let mut args = vec![
        "search", "--manifest", "corpus/manifest.jsonl", "--out", out, "--candidates", "4",
        "--views", "3", "--seed", seed,
    ];
    args.extend_from_slice(extra);
    ok(&args, dir);
    fs::read(dir.join(out).join("search.jsonl")).unwrap()
}

#[test]
fn search_defaults_follow_experiment_constants() {
    let cli = Cli::try_parse_from(["augsel", "search", "--manifest", "m.jsonl", "--out", "o"]).unwrap();
    match cli.command {
        Sub::Search(a) => {
            assert_eq!(a.n_candidates, 100);
            assert_eq!(a.scoring.n_views, 20);
            assert_eq!(a.scoring.epsilon, 1e-3);
            assert_eq!(a.scoring.max_origins, 100);
        }
        _ => unreachable!(),
    }
    let cli = Cli::try_parse_from(["augsel", "med", "--result", "r", "--out", "o"]).unwrap();
    assert!(matches!(cli.command, Sub::Med(a) if a.k == 10));
}

#[test]
fn search_is_byte_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "8");
    let a = small_search(dir.path(), "run", "11", &["--workers", "1"]);
    let b = small_search(dir.path(), "run", "11", &["--workers", "3"]);
    assert_eq!(a, b);
    let out = Command::new(env!("CARGO_BIN_EXE_augsel"))
        .args([
            "search", "--manifest", "corpus/manifest.jsonl", "--out", "run", "--candidates", "4",
            "--views", "3", "--seed", "11",
        ])
        .current_dir(dir.path())
        .env("AUGSEL_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(dir.path().join("run/search.jsonl")).unwrap(), a);

    let (result, run) = SearchResult::read(dir.path().join("run/search.jsonl")).unwrap();
    assert_eq!(result.len(), 4);
    let run = run.expect("run config embedded");
    assert_eq!(run["command"], "search");
    assert_eq!(run["seed"], 11);
    assert_eq!(run["n_views"], 3);

    let other = small_search(dir.path(), "run", "12", &[]);
    assert_ne!(other, a);
}

#[test]
fn single_candidate_is_selected() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "6");
    let stdout = ok(
        &["search", "--manifest", "corpus/manifest.jsonl", "--out", "one", "--candidates", "1", "--views", "2"],
        dir.path(),
    );
    assert!(stdout.contains("selected candidate 0 of 1"));
    let (result, _) = SearchResult::read(dir.path().join("one/search.jsonl")).unwrap();
    assert_eq!(result.best().index, 0);
}

#[test]
fn score_writes_self_describing_record() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "6");
    let d = write_dist(dir.path(), "none.json", &AugDistribution::no_augmentation());
    let run = |out: &str| {
        ok(
            &["score", "--manifest", "corpus/manifest.jsonl", "--distribution", &d, "--out", out, "--views", "3"],
            dir.path(),
        );
        fs::read_to_string(dir.path().join(out).join("score.json")).unwrap()
    };
    let text = run("s");
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["run"]["command"], "score");
    assert_eq!(v["score"]["n"], 18);
    assert!(v["score"]["value"].as_f64().unwrap().is_finite());
    assert_eq!(run("s"), text);
}

fn write_result(path: &Path, dists: Vec<AugDistribution>) {
    let candidates = dists
        .into_iter()
        .enumerate()
        .map(|(index, distribution)| ScoredCandidate {
            index,
            seed: index as u64,
            score: DependenceScore {
                value: index as f64 * 0.5,
                n: 10,
                epsilon: 1e-3,
            },
            distribution,
        })
        .collect::<Vec<_>>();
    let n = candidates.len();
    let result = SearchResult::new(
        SearchConfig {
            n_candidates: n,
            master_seed: 0,
            scoring: ScoringConfig::default(),
        },
        candidates,
    )
    .unwrap();
    result.write(path, None).unwrap();
}

#[test]
fn med_tables_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded_rng(5);
    write_result(
        &dir.path().join("r.jsonl"),
        (0..100).map(|_| sample_distribution(&mut rng)).collect(),
    );
    ok(&["med", "--result", "r.jsonl", "--out", "m"], dir.path());
    let csv = fs::read_to_string(dir.path().join("m/med.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "parameter,med");
    assert_eq!(lines.len(), 14);
    let txt = fs::read_to_string(dir.path().join("m/med.txt")).unwrap();
    let rows = txt.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 14);
    assert!(fs::read_to_string(dir.path().join("m/med.jsonl")).unwrap().contains("\"command\":\"med\""));

    let out = augsel(&["med", "--result", "r.jsonl", "--out", "m2", "--k", "51"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k = 51"));

    let same = sample_distribution(&mut rng);
    write_result(&dir.path().join("same.jsonl"), vec![same; 20]);
    ok(&["med", "--result", "same.jsonl", "--out", "z"], dir.path());
    let csv = fs::read_to_string(dir.path().join("z/med.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
}

#[test]
fn preview_contract() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "2");
    let none = write_dist(dir.path(), "none.json", &AugDistribution::no_augmentation());
    let audio = "corpus/syn_0000.wav";
    ok(&["preview", "--audio", audio, "--distribution", &none, "--count", "5", "--out", "p"], dir.path());
    let files: Vec<_> = fs::read_dir(dir.path().join("p")).unwrap().map(|e| e.unwrap().file_name()).collect();
    let wavs = files.iter().filter(|f| f.to_string_lossy().ends_with(".wav")).count();
    let chains = files.iter().filter(|f| f.to_string_lossy().ends_with(".chain.json")).count();
    assert_eq!((wavs, chains), (5, 5));

    let src = load_waveform(dir.path().join(audio)).unwrap();
    for i in 0..5 {
        let v = load_waveform(dir.path().join(format!("p/preview_{i:03}.wav"))).unwrap();
        assert_eq!(v.len(), 16000);
        let s = src.samples();
        assert!((0..=s.len() - 16000).any(|o| s[o..o + 16000] == *v.samples()));
        let chain: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join(format!("p/preview_{i:03}.chain.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(chain["chain"], serde_json::json!([]));
        assert_eq!(chain["run"]["command"], "preview");
    }

    let mut rng = seeded_rng(1);
    let d = write_dist(dir.path(), "d.json", &sample_distribution(&mut rng));
    ok(&["preview", "--audio", audio, "--distribution", &d, "--count", "3", "--out", "a", "--seed", "4"], dir.path());
    ok(&["preview", "--audio", audio, "--distribution", &d, "--count", "3", "--out", "b", "--seed", "4"], dir.path());
    for i in 0..3 {
        let name = format!("preview_{i:03}.wav");
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
}

fn losses(path: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["step"].as_u64().unwrap() as usize, v["loss"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn toytrain_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "10");
    let mut rng = seeded_rng(2);
    let d = write_dist(dir.path(), "d.json", &sample_distribution(&mut rng));
    let base = ["toytrain", "--manifest", "corpus/manifest.jsonl", "--distribution", &d, "--batch", "4", "--seed", "3"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        ok(&a, dir.path());
    };
    with(&["--steps", "6", "--out", "full"]);
    with(&["--steps", "3", "--out", "half"]);
    with(&["--steps", "6", "--out", "rest", "--resume", "half/checkpoint.json"]);
    let full = losses(&dir.path().join("full/losses.jsonl"));
    let rest = losses(&dir.path().join("rest/losses.jsonl"));
    assert_eq!(full.len(), 6);
    assert_eq!(rest.len(), 3);
    for (a, b) in full[3..].iter().zip(&rest) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
    let ck_full = augsel_core::contrastive::Checkpoint::read(dir.path().join("full/checkpoint.json")).unwrap();
    let ck_rest = augsel_core::contrastive::Checkpoint::read(dir.path().join("rest/checkpoint.json")).unwrap();
    assert_eq!(ck_full.params, ck_rest.params);
    assert_eq!(ck_full.step, 6);
    assert_eq!(ck_full.run.unwrap()["command"], "toytrain");
}

#[test]
fn toytrain_zero_lr_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "8");
    let d = write_dist(dir.path(), "none.json", &AugDistribution::no_augmentation());
    ok(
        &["toytrain", "--manifest", "corpus/manifest.jsonl", "--distribution", &d, "--out", "t", "--steps", "20", "--lr", "0"],
        dir.path(),
    );
    let l: Vec<f64> = losses(&dir.path().join("t/losses.jsonl")).into_iter().map(|x| x.1).collect();
    assert_eq!(l.len(), 20);
    let spread = l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.02, "{l:?}");
    assert!(l.iter().all(|x| (x - 8f64.ln()).abs() < 0.15), "{l:?}");
    ok(
        &["toytrain", "--manifest", "corpus/manifest.jsonl", "--distribution", &d, "--out", "t1", "--steps", "1", "--lr", "0"],
        dir.path(),
    );
    let read = |p: &str| augsel_core::contrastive::Checkpoint::read(dir.path().join(p)).unwrap().params;
    assert_eq!(read("t/checkpoint.json"), read("t1/checkpoint.json"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(augsel(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(augsel(&["search"], dir.path()).status.code(), Some(1));
    assert_eq!(augsel(&["search", "--manifest", "m", "--out", "o", "--views", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(
        augsel(&["search", "--manifest", "missing.jsonl", "--out", "o"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        augsel(&["search", "--manifest", "missing.jsonl", "--out", "o", "--epsilon", "0"], dir.path()).status.code(),
        Some(1)
    );
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    assert_eq!(augsel(&["search", "--manifest", "bad.jsonl", "--out", "o"], dir.path()).status.code(), Some(2));

    corpus(dir.path(), "8");
    let d = write_dist(dir.path(), "none.json", &AugDistribution::no_augmentation());
    let out = augsel(
        &["toytrain", "--manifest", "corpus/manifest.jsonl", "--distribution", &d, "--out", "t", "--steps", "3", "--lr", "1e300"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
