use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use textcav_core::cav::{RankingEntry, SensitivityRanking};
use textcav_core::concepts::{save_annotations, AnnotationRecord, AnnotationSet};
use textcav_core::store::{load_concepts, read_fmx, save_concepts, ConceptEntry, ConceptList};
use textcav_core::trainer::{initial_maps, load_checkpoint};

fn textcav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textcav"))
        .args(args)
        .env_remove("TEXTCAV_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = textcav(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", "5", "--dims", "16", "--samples", "1000", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &["--bias", "class_1:marker"]);
    synth(&b, &["--bias", "class_1:marker"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("target_image.fmx")));
    assert!(ta.contains_key(Path::new("concepts.jsonl")));
    assert_eq!(ta, tb);

    let c = dir.path().join("c");
    ok(&["synth", "--seed", "6", "--dims", "16", "--samples", "1000", "--out-dir", p(&c)]);
    assert_ne!(tree(&c)[Path::new("target_image.fmx")], ta[Path::new("target_image.fmx")]);
}

#[test]
fn synth_bias_leaves_no_positive_without_the_attribute() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--bias", "class_1:marker"]);
    let world: Value = serde_json::from_slice(&std::fs::read(dir.path().join("world.json")).unwrap()).unwrap();
    let classes = world["labels"]["classes"].as_array().unwrap();
    let attrs = world["labels"]["attributes"].as_array().unwrap();
    let mut positives = 0;
    for (c, a) in classes.iter().zip(attrs) {
        if c[1] == true {
            positives += 1;
            assert_eq!(a[1], true, "class_1 positive without marker survived");
        }
    }
    assert!(positives > 0);
    assert!(dir.path().join("heads/biased.fmx").exists());
}

#[test]
fn synth_without_bias_writes_only_the_clean_head() {
    let dir = tempfile::tempdir().unwrap();
    let out = {
        let o = textcav(&["synth", "--seed", "5", "--dims", "16", "--samples", "1000", "--out-dir", p(dir.path())]);
        stdout(&o)
    };
    assert!(out.contains("heads: clean"));
    let mut heads: Vec<String> = std::fs::read_dir(dir.path().join("heads"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".fmx"))
        .collect();
    heads.sort();
    assert_eq!(heads, ["clean.fmx"]);
}

fn train_args<'a>(ws: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "train".into(),
        "--target-features".into(),
        p(&ws.join("target_image.fmx")).into(),
        "--vl-image-features".into(),
        p(&ws.join("vl_image.fmx")).into(),
        "--out".into(),
        p(out).into(),
    ];
    args.extend(extra.iter().map(|s| (*s).to_owned()));
    args
}

fn run_strings(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    textcav(&refs)
}

#[test]
fn train_on_noiseless_world_reaches_small_mse() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    synth(&ws, &[]);
    let out = ws.join("maps/main");
    let o = run_strings(&train_args(&ws, &out, &["--epochs", "60", "--batch-size", "64", "--learning-rate", "1e-2"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let mse = report["epochs"].as_array().unwrap().last().unwrap()["train"]["mse"].as_f64().unwrap();
    assert!(mse <= 1e-3, "final mse {mse}");
    assert!(stdout(&o).contains("mse"));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    synth(&ws, &[]);
    let out = dir.path().join("init");
    let o = run_strings(&train_args(&ws, &out, &["--epochs", "0", "--seed", "9"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(load_checkpoint(&out).unwrap(), initial_maps(16, 16, 9));
}

#[test]
fn missing_feature_file_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nowhere");
    let o = run_strings(&train_args(&ghost, &dir.path().join("m"), &[]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&ghost)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(textcav(&["train"]).status.code(), Some(1));
    assert_eq!(textcav(&["synth", "--out-dir", "x", "--bias", "nocolon"]).status.code(), Some(1));
    assert_eq!(textcav(&["--version"]).status.code(), Some(0));
}

#[test]
fn rank_puts_planted_concept_first() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    synth(&ws, &[]);
    let map = ws.join("maps/main");
    ok(&train_args(&ws, &map, &["--epochs", "60", "--batch-size", "64", "--learning-rate", "1e-2"])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
    let json = dir.path().join("out/rank.json");
    let table = ok(&[
        "rank",
        "--map",
        p(&map),
        "--head",
        p(&ws.join("heads/clean.fmx")),
        "--concepts",
        p(&ws.join("concepts.jsonl")),
        "--class",
        "class_2",
        "--out",
        p(&json),
    ]);
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].ends_with("class_2 planted"), "{table}");

    let ranking: SensitivityRanking = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(ranking.entries.len(), 10);
    assert_eq!(ranking.entries[0].text, "class_2 planted");
    assert_eq!((ranking.map_id.as_str(), ranking.head_id.as_str()), ("main", "clean"));

    let o = textcav(&[
        "rank",
        "--map",
        p(&map),
        "--head",
        p(&ws.join("heads/clean.fmx")),
        "--concepts",
        p(&ws.join("concepts.jsonl")),
        "--class",
        "zebra",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("class_0, class_1, class_2, class_3"), "{}", stderr(&o));
}

#[test]
fn relative_paths_resolve_against_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_textcav"))
        .args(["synth", "--seed", "1", "--dims", "8", "--samples", "200", "--out-dir", "w"])
        .env("TEXTCAV_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("w/vl_image.fmx").exists());
    assert_eq!(read_fmx(dir.path().join("w/vl_image.fmx")).unwrap().rows(), 200);
}

fn unit(i: usize, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[test]
fn concept_prep_reports_each_rule_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let texts = ["wheel", "wheels", "the", "long thin striped tail", "savanna", "hoof"];
    let list = ConceptList::new(
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| ConceptEntry::with_embedding(*t, unit(i, 8)))
            .collect(),
    )
    .unwrap();
    let raw = dir.path().join("raw.jsonl");
    save_concepts(&list, &raw).unwrap();

    let first = dir.path().join("first.jsonl");
    let report = ok(&["concepts", "prep", "--in", p(&raw), "--out", p(&first)]);
    let count = |report: &str, rule: &str| -> usize {
        report
            .lines()
            .find(|l| l.starts_with(rule))
            .and_then(|l| l.split_whitespace().last())
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(count(&report, "articles"), 1);
    assert_eq!(count(&report, "too long"), 1);
    assert_eq!(count(&report, "plurals"), 1);
    assert_eq!(count(&report, "duplicates"), 0);
    let kept: Vec<String> = load_concepts(&first).unwrap().texts().map(str::to_owned).collect();
    assert_eq!(kept, ["wheel", "savanna", "hoof"]);

    let second = dir.path().join("second.jsonl");
    let again = ok(&["concepts", "prep", "--in", p(&first), "--out", p(&second)]);
    for rule in ["articles", "too long", "plurals", "duplicates"] {
        assert_eq!(count(&again, rule), 0, "{rule}");
    }
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn dedup_threshold_one_keeps_near_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let near = {
        let mut v = vec![0.95f32, 0.0, 0.0];
        v[1] = (1.0f32 - 0.95 * 0.95).sqrt();
        v
    };
    let list = ConceptList::new(vec![
        ConceptEntry::with_embedding("mane", vec![1.0, 0.0, 0.0]),
        ConceptEntry::with_embedding("lion mane", near),
    ])
    .unwrap();
    let raw = dir.path().join("raw.jsonl");
    save_concepts(&list, &raw).unwrap();
    let out = dir.path().join("out.jsonl");

    let strict = ok(&["concepts", "prep", "--in", p(&raw), "--out", p(&out)]);
    assert!(strict.lines().any(|l| l.starts_with("duplicates") && l.ends_with(" 1")), "{strict}");
    let loose = ok(&["concepts", "prep", "--in", p(&raw), "--out", p(&out), "--dedup-threshold", "1.0"]);
    assert!(loose.lines().any(|l| l.starts_with("duplicates") && l.ends_with(" 0")), "{loose}");
    assert_eq!(load_concepts(&out).unwrap().len(), 2);
}

fn ranking(texts: &[String], head: &str) -> SensitivityRanking {
    SensitivityRanking {
        class_name: "atelectasis".into(),
        map_id: "m".into(),
        head_id: head.into(),
        entries: texts
            .iter()
            .enumerate()
            .map(|(i, t)| RankingEntry {
                text: t.clone(),
                score: 1.0 - i as f64 / 100.0,
            })
            .collect(),
    }
}

fn record(text: &str, relevant: bool, device: bool) -> AnnotationRecord {
    AnnotationRecord {
        class: "atelectasis".into(),
        text: text.into(),
        relevant,
        categories: [("support_device".to_owned(), device)].into(),
    }
}

#[test]
fn crs_and_compare_on_fixture_rankings() {
    let dir = tempfile::tempdir().unwrap();
    let a_texts: Vec<String> = (0..50).map(|i| format!("a{i:02}")).collect();
    let b_texts: Vec<String> = (0..50).map(|i| format!("b{i:02}")).collect();
    let mut records = Vec::new();
    for (i, t) in a_texts.iter().enumerate() {
        records.push(record(t, i < 2, i < 13));
    }
    for (i, t) in b_texts.iter().enumerate() {
        records.push(record(t, true, i < 44));
    }
    let ann = dir.path().join("ann.jsonl");
    save_annotations(&AnnotationSet::new(records).unwrap(), &ann).unwrap();
    let (ra, rb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    std::fs::write(&ra, ranking(&a_texts, "standard").to_json()).unwrap();
    std::fs::write(&rb, ranking(&b_texts, "biased").to_json()).unwrap();

    let out = ok(&["crs", "--ranking", p(&ra), "--annotations", p(&ann)]);
    assert!(out.contains("CRS@50 = 0.04 (2/50)"), "{out}");
    let full = ok(&["crs", "--ranking", p(&rb), "--annotations", p(&ann), "--top", "50"]);
    assert!(full.contains("CRS@50 = 1 (50/50)"), "{full}");

    let json = dir.path().join("cmp.json");
    let cmp = ok(&[
        "compare",
        "--a",
        p(&ra),
        "--b",
        p(&rb),
        "--category",
        "support_device",
        "--annotations",
        p(&ann),
        "--out",
        p(&json),
    ]);
    assert!(cmp.contains("13/50"), "{cmp}");
    assert!(cmp.contains("44/50"), "{cmp}");
    let report: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["a"]["categories"][1]["count"], 13);
}

#[test]
fn incomplete_annotations_exit_2_listing_missing() {
    let dir = tempfile::tempdir().unwrap();
    let texts: Vec<String> = ["x", "y", "z"].iter().map(|s| (*s).to_owned()).collect();
    let ann = dir.path().join("ann.jsonl");
    save_annotations(&AnnotationSet::new(vec![record("x", true, false)]).unwrap(), &ann).unwrap();
    let r = dir.path().join("r.json");
    std::fs::write(&r, ranking(&texts, "h").to_json()).unwrap();
    let o = textcav(&["crs", "--ranking", p(&r), "--annotations", p(&ann)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("\"y\"") && err.contains("\"z\""), "{err}");
}
