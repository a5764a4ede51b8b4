use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use transfer_curate::rng::SeededRng;
use transfer_curate::{EmbeddingStore, ItemRecord};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transfer-curate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn transfer-curate")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

fn jitter(rng: &mut SeededRng, v: &[f32], eps: f64) -> Vec<f32> {
    let w: Vec<f64> = v.iter().map(|&x| f64::from(x) + eps * rng.normal()).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter().map(|x| (x / norm) as f32).collect()
}

fn save(path: &Path, records: Vec<ItemRecord>, rows: &[Vec<f32>], encoder: &str) {
    let d = rows[0].len();
    let flat = rows.iter().flatten().copied().collect();
    EmbeddingStore::from_parts(records, flat, d, true, encoder).unwrap().write(path).unwrap();
}

fn recs(n: usize, base: u64, prefix: &str, tag: &str) -> Vec<ItemRecord> {
    (0..n)
        .map(|i| ItemRecord::whole_image(base + i as u64, format!("{prefix}{i:04}"), tag))
        .collect()
}

/// Dual-encoder stores with three planted near-duplicate pairs in the gallery
/// and, optionally, one gallery image copied from the task set.
struct Scene {
    dir: TempDir,
}

const GALLERY: usize = 120;
const QUERIES: usize = 5;
const DUP_PAIRS: [(usize, usize); 3] = [(3, 40), (17, 90), (55, 56)];
const LEAK_ROW: usize = 70;

impl Scene {
    fn new(with_leak: bool, with_dups: bool) -> Scene {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(9, 42);
        let d = 32;
        let task_a = unit_rows(&mut rng, 6, d);
        let task_b = unit_rows(&mut rng, 6, d);
        let mut gal_a = unit_rows(&mut rng, GALLERY, d);
        let mut gal_b = unit_rows(&mut rng, GALLERY, d);
        if with_dups {
            for (i, j) in DUP_PAIRS {
                gal_a[j] = jitter(&mut rng, &gal_a[i], 0.01);
                gal_b[j] = jitter(&mut rng, &gal_b[i], 0.01);
            }
        }
        if with_leak {
            gal_a[LEAK_ROW] = task_a[2].clone();
            gal_b[LEAK_ROW] = task_b[2].clone();
        }
        let q_a = unit_rows(&mut rng, QUERIES, d);
        let q_b = unit_rows(&mut rng, QUERIES, d);
        let root = dir.path();
        for (name, recs, a, b) in [
            ("gallery", recs(GALLERY, 0, "g", "gallery"), &gal_a, &gal_b),
            ("query", recs(QUERIES, 10_000, "q", "query"), &q_a, &q_b),
            ("task", recs(6, 20_000, "t", "task-test"), &task_a, &task_b),
        ] {
            save(&root.join(format!("{name}_a.tsf")), recs.clone(), a, "enc-a");
            save(&root.join(format!("{name}_b.tsf")), recs, b, "enc-b");
        }
        Scene { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn curate_args(&self, n: usize, out: &Path) -> Vec<String> {
        let mut args = vec!["curate".to_owned()];
        for role in ["query", "gallery", "task"] {
            args.push(format!("--{role}"));
            args.push(p(&self.path(&format!("{role}_a.tsf"))).to_owned());
            args.push(format!("--{role}-b"));
            args.push(p(&self.path(&format!("{role}_b.tsf"))).to_owned());
        }
        args.extend(["--metric", "dual-avg-cosine", "-n", &n.to_string(), "--seed", "3", "--out", p(out)].map(String::from));
        args
    }

    /// curate (all of G) then hygiene; returns the output directory.
    fn through_hygiene(&self) -> PathBuf {
        let out = self.path("run");
        let args = self.curate_args(GALLERY, &out);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        ok(&["hygiene", "--manifest", p(&out.join("curation.json"))]);
        out
    }
}

fn review(report: &Path, status_of: impl Fn(&str) -> &'static str) -> PathBuf {
    let mut v = read(report);
    for f in v["flagged"].as_array_mut().unwrap() {
        let src = f["source_image_id"].as_str().unwrap().to_owned();
        f["status"] = Value::from(status_of(&src));
    }
    let reviewed = report.with_file_name("reviewed.json");
    write(&reviewed, &v);
    reviewed
}

#[test]
fn build_store_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("v.csv");
    let rows: Vec<String> = (0..10).map(|i| format!("{i},1.5,-2,{}", i * i)).collect();
    std::fs::write(&csv, rows.join("\n")).unwrap();
    let store = dir.path().join("v.tsf");
    let out = ok(&["build-store", "--csv", p(&csv), "--out", p(&store), "--encoder", "toy"]);
    assert!(out.contains("count=10 dim=4"), "{out}");
    let out = ok(&["validate", p(&store)]);
    assert!(out.trim_end().ends_with("OK"), "{out}");

    let normalized = dir.path().join("n.tsf");
    ok(&["build-store", "--csv", p(&csv), "--out", p(&normalized), "--normalize"]);
    assert!(ok(&["validate", p(&normalized)]).contains("normalized=true"));

    std::fs::write(&csv, "1,2,3,4\n5,NaN,7,8\n").unwrap();
    let bad = run(&["build-store", "--csv", p(&csv), "--out", p(&dir.path().join("bad.tsf"))]);
    assert_eq!(code(&bad), 2);
    let msg = stderr(&bad);
    assert!(msg.contains("row 1") && msg.contains("column 1"), "{msg}");
    assert!(!dir.path().join("bad.tsf").exists());

    std::fs::write(&csv, "1,2,3\n4,5\n").unwrap();
    assert_eq!(code(&run(&["build-store", "--csv", p(&csv), "--out", p(&dir.path().join("r.tsf"))])), 2);
}

#[test]
fn random_strategy_with_n_equal_to_gallery_takes_everything() {
    let scene = Scene::new(false, false);
    let out = scene.path("rand");
    let gallery = scene.path("gallery_a.tsf");
    ok(&["curate", "--gallery", p(&gallery), "--strategy", "random", "-n", &GALLERY.to_string(), "--out", p(&out)]);
    let m = read(&out.join("curation.json"));
    let mut ids: Vec<u64> = m["selected"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..GALLERY as u64).collect::<Vec<_>>());

    let again = scene.path("rand2");
    ok(&["curate", "--gallery", p(&gallery), "--strategy", "random", "-n", "7", "--seed", "5", "--out", p(&again)]);
    let third = scene.path("rand3");
    ok(&["curate", "--gallery", p(&gallery), "--strategy", "random", "-n", "7", "--seed", "5", "--out", p(&third)]);
    assert_eq!(read(&again.join("curation.json"))["selected"], read(&third.join("curation.json"))["selected"]);
}

#[test]
fn large_query_balanced_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(1, 77);
    let d = 8;
    let gallery = dir.path().join("g.tsf");
    let queries = dir.path().join("q.tsf");
    save(&gallery, recs(60_000, 0, "g", "gallery"), &unit_rows(&mut rng, 60_000, d), "enc");
    save(&queries, recs(100, 1_000_000, "q", "query"), &unit_rows(&mut rng, 100, d), "enc");
    let out = dir.path().join("out");
    let text = ok(&["curate", "--query", p(&queries), "--gallery", p(&gallery), "-n", "51000", "--out", p(&out)]);
    assert!(text.contains("selected=51000"), "{text}");
    let m = read(&out.join("curation.json"));
    assert_eq!(m["selected"].as_array().unwrap().len(), 51_000);
    assert_eq!(m["attribution"].as_object().unwrap().len(), 100);

    let too_many = run(&["curate", "--query", p(&queries), "--gallery", p(&gallery), "-n", "60001", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&too_many), 3, "{}", stderr(&too_many));
}

#[test]
fn hygiene_removes_planted_duplicates_and_flags_the_leak() {
    let scene = Scene::new(true, true);
    let out = scene.through_hygiene();
    let h = read(&out.join("hygiene.json"));
    let counts = &h["counts"];
    assert_eq!(counts["retrieved"], GALLERY);
    assert_eq!(counts["duplicate_clusters"], 3);
    assert_eq!(counts["removed_by_dedup"], 3);
    assert_eq!(counts["flagged"], 1);
    let pairs: Vec<(String, String)> = h["dedup"]["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["a"].as_str().unwrap().to_owned(), p["b"].as_str().unwrap().to_owned()))
        .collect();
    let want: Vec<(String, String)> = DUP_PAIRS.iter().map(|(i, j)| (format!("g{i:04}"), format!("g{j:04}"))).collect();
    assert_eq!(pairs, want);
    let retained: Vec<&str> = h["retained"].as_array().unwrap().iter().map(|e| e["source_image_id"].as_str().unwrap()).collect();
    for (i, j) in DUP_PAIRS {
        assert!(retained.contains(&format!("g{i:04}").as_str()));
        assert!(!retained.contains(&format!("g{j:04}").as_str()));
    }
    let report = read(&out.join("contamination.json"));
    let flagged = &report["flagged"][0];
    assert_eq!(flagged["source_image_id"], format!("g{LEAK_ROW:04}"));
    assert_eq!(flagged["status"], "pending");
    assert_eq!(flagged["evidence"].as_array().unwrap().len(), 5);
    assert_eq!(flagged["evidence"][0]["source_image_id"], "t0002");
}

#[test]
fn hygiene_on_clean_data_changes_nothing() {
    let scene = Scene::new(false, false);
    let out = scene.through_hygiene();
    let h = read(&out.join("hygiene.json"));
    assert_eq!(h["counts"]["removed_by_dedup"], 0);
    assert_eq!(h["counts"]["flagged"], 0);
    let reviewed = out.join("contamination.json");
    let text = ok(&["finalize", "--manifest", p(&out.join("hygiene.json")), "--confirmations", p(&reviewed)]);
    assert!(text.contains(&format!("final={}", GALLERY + QUERIES)), "{text}");
}

#[test]
fn finalize_with_every_flag_cleared() {
    let scene = Scene::new(true, true);
    let out = scene.through_hygiene();
    let reviewed = review(&out.join("contamination.json"), |_| "cleared");
    ok(&["finalize", "--manifest", p(&out.join("hygiene.json")), "--confirmations", p(&reviewed)]);
    let f = read(&out.join("final.json"));
    assert_eq!(f["counts"]["final_size"], GALLERY - 3 + QUERIES);
    assert_eq!(f["counts"]["removed_by_confirmation"], 0);
    assert_eq!(f["transfer_set"].as_array().unwrap().len(), GALLERY - 3 + QUERIES);
    assert_eq!(f["stage"], "final");
}

#[test]
fn finalize_drops_a_confirmed_leak() {
    let scene = Scene::new(true, true);
    let out = scene.through_hygiene();
    let reviewed = review(&out.join("contamination.json"), |_| "confirmed-leak");
    ok(&["finalize", "--manifest", p(&out.join("hygiene.json")), "--confirmations", p(&reviewed)]);
    let f = read(&out.join("final.json"));
    assert_eq!(f["counts"]["final_size"], GALLERY - 3 - 1 + QUERIES);
    assert_eq!(f["counts"]["removed_by_confirmation"], 1);
    let leak = format!("g{LEAK_ROW:04}");
    assert!(f["transfer_set"].as_array().unwrap().iter().all(|e| e["source_image_id"] != leak.as_str()));
    let queries = f["transfer_set"].as_array().unwrap().iter().filter(|e| e["split_tag"] == "query").count();
    assert_eq!(queries, QUERIES);
}

#[test]
fn finalize_refuses_pending_reviews() {
    let scene = Scene::new(true, false);
    let out = scene.through_hygiene();
    let res = run(&[
        "finalize",
        "--manifest",
        p(&out.join("hygiene.json")),
        "--confirmations",
        p(&out.join("contamination.json")),
    ]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    assert!(!out.join("final.json").exists());
}

#[test]
fn tampering_is_detected() {
    let scene = Scene::new(true, false);
    let out = scene.through_hygiene();
    let reviewed = review(&out.join("contamination.json"), |_| "cleared");

    let hygiene = out.join("hygiene.json");
    let mut h = read(&hygiene);
    h["retained"].as_array_mut().unwrap().pop();
    write(&hygiene, &h);
    let res = run(&["finalize", "--manifest", p(&hygiene), "--confirmations", p(&reviewed)]);
    assert_eq!(code(&res), 5, "{}", stderr(&res));

    let curation = out.join("curation.json");
    let mut c = read(&curation);
    c["seed"] = Value::from(99);
    write(&curation, &c);
    assert_eq!(code(&run(&["hygiene", "--manifest", p(&curation), "--out", p(&scene.path("h2"))])), 5);

    // A store edited after curation no longer matches its recorded digest.
    let scene = Scene::new(false, false);
    let out = scene.path("run");
    let args = scene.curate_args(10, &out);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    save(
        &scene.path("task_a.tsf"),
        recs(6, 20_000, "t", "task-test"),
        &unit_rows(&mut SeededRng::new(1, 1), 6, 32),
        "enc-a",
    );
    let res = run(&["hygiene", "--manifest", p(&out.join("curation.json"))]);
    assert_eq!(code(&res), 5, "{}", stderr(&res));
}

#[test]
fn stats_reports_attribution() {
    let scene = Scene::new(false, true);
    let out = scene.through_hygiene();
    let curation = out.join("curation.json");
    let text = ok(&["stats", "--manifest", p(&curation)]);
    assert!(text.contains("items per query") && text.contains("rank distribution"), "{text}");
    let json: Value = serde_json::from_str(&ok(&["stats", "--manifest", p(&curation), "--json"])).unwrap();
    assert_eq!(json["selected"], GALLERY);
    let per_query: u64 = json["per_query"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert!(per_query >= GALLERY as u64);
    let with_h: Value = serde_json::from_str(&ok(&[
        "stats",
        "--manifest",
        p(&curation),
        "--hygiene",
        p(&out.join("hygiene.json")),
        "--json",
    ]))
    .unwrap();
    assert_eq!(with_h["cluster_sizes"]["2"], 3);
}

#[test]
fn exit_codes_for_bad_input_and_locks() {
    let scene = Scene::new(false, false);
    let usage = run(&["curate", "--no-such-flag"]);
    assert_eq!(code(&usage), 2);

    let out = scene.path("locked");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".transfer-curate.lock"), "").unwrap();
    let args = scene.curate_args(10, &out);
    let res = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&res), 1, "{}", stderr(&res));

    let zero = scene.curate_args(0, &scene.path("zero"));
    assert_eq!(code(&run(&zero.iter().map(String::as_str).collect::<Vec<_>>())), 2);

    let missing = run(&["validate", p(&scene.path("nope.tsf"))]);
    assert_eq!(code(&missing), 1);

    let mismatched = run(&["validate", p(&scene.path("gallery_a.tsf")), p(&scene.path("query_b.tsf"))]);
    assert_eq!(code(&mismatched), 2);
}

#[test]
fn losses_check_and_fixture_commands() {
    let text = ok(&["losses", "check", "--cases", "3"]);
    assert_eq!(text.matches("PASS").count(), 9, "{text}");
    let dir = tempfile::tempdir().unwrap();
    ok(&["fixture", "--out", p(dir.path())]);
    let out = dir.path().join("run");
    let text = ok(&["curate", "--config", p(&dir.path().join("config.json")), "--out", p(&out)]);
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden/DIGEST")).unwrap();
    assert!(text.contains(golden.trim()), "{text}");
}

#[test]
fn plan_crops_writes_one_line_per_crop() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.csv");
    std::fs::write(&images, "a,640,480\nb,100,300\n").unwrap();
    let out = dir.path().join("crops.jsonl");
    ok(&["plan-crops", "--images", p(&images), "--seed", "4", "--out", p(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 20);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["source_image_id"], "a");
    assert_eq!(first["out_size"], 224);
}
