use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};

use kgned::context::ContextConfig;
use kgned::kg::{EntityId, Hop, LabelKind, LabelRecord, RelationId, Tail, TripleStore};
use kgned::model::{Checkpoint, Classifier, ModelConfig};
use kgned::tokenize::Vocab;

fn kgned(args: &[&str]) -> Output {
    kgned_env(args, &[])
}

fn kgned_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kgned"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("KGNED_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn e(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&kgned(&["--help"])), 0);
    assert_eq!(code(&kgned(&["frobnicate"])), 1);
    assert_eq!(code(&kgned(&["train", "--data", "x.jsonl"])), 1);
    assert_eq!(code(&kgned(&["eval", "--data", "d", "--checkpoint", "c", "--report", "r", "--protocol", "mean"])), 1);
}

// ---- fetch -------------------------------------------------------------

const LABELS: &str = r#"{"head":{"vars":[]},"results":{"bindings":[
  {"kind":{"type":"literal","value":"label"},"text":{"type":"literal","value":"Thing"}}]}}"#;

fn hop1_rows(n: usize) -> String {
    let rows: Vec<String> = (0..n)
        .map(|i| {
            format!(
                r#"{{"rel":{{"type":"uri","value":"http://www.wikidata.org/prop/direct/P{i}"}},"tail":{{"type":"literal","value":"value {i}"}}}}"#
            )
        })
        .collect();
    format!(r#"{{"head":{{"vars":[]}},"results":{{"bindings":[{}]}}}}"#, rows.join(","))
}

/// Local endpoint answering every hop-1 query with 8 rows. Returns the URL
/// and a counter of label queries (one per fetched entity).
fn endpoint() -> (String, std::sync::Arc<std::sync::atomic::AtomicUsize>) {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/sparql", listener.local_addr().unwrap());
    let entity_hits = std::sync::Arc::new(AtomicUsize::new(0));
    let hits = entity_hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(&mut stream);
            let mut request = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                request.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            request.push_str(&String::from_utf8_lossy(&body));
            let body = if request.contains("kind") {
                hits.fetch_add(1, Ordering::SeqCst);
                LABELS.to_owned()
            } else {
                hop1_rows(8)
            };
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, entity_hits)
}

#[test]
fn fetch_skips_cached_and_honours_cap() {
    use std::sync::atomic::Ordering;
    let dir = tempfile::tempdir().unwrap();
    let kg = dir.path().join("kg");
    let (url, hits) = endpoint();

    let one = dir.path().join("one.txt");
    fs::write(&one, "Q1\n").unwrap();
    let o = kgned(&["fetch", "--endpoint", &url, "--entities", p(&one), "--cap", "5", "--out", p(&kg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let three = dir.path().join("three.txt");
    fs::write(&three, "Q1\nQ2\n# comment\nQ3\n").unwrap();
    let o = kgned_env(
        &["fetch", "--entities", p(&three), "--cap", "5", "--out", p(&kg)],
        &[("KGNED_ENDPOINT", &url)],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert!(stdout(&o).contains("Q1\tcached"));

    let store = TripleStore::load_dir(&kg).unwrap();
    for id in ["Q1", "Q2", "Q3"] {
        let n = store.triples().filter(|t| t.head.as_str() == id).count();
        assert_eq!(n, 5, "{id}");
    }
}

#[test]
fn fetch_empty_list_is_a_noop_and_total_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let kg = dir.path().join("kg");
    let o = kgned(&["fetch", "--endpoint", "http://127.0.0.1:9/", "--entities", p(&empty), "--out", p(&kg)]);
    assert_eq!(code(&o), 0);
    assert!(!kg.exists());

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let list = dir.path().join("l.txt");
    fs::write(&list, "Q1\nQ2\n").unwrap();
    let url = format!("http://127.0.0.1:{port}/sparql");
    let o = kgned(&["fetch", "--endpoint", &url, "--entities", p(&list), "--out", p(&kg)]);
    assert_eq!(code(&o), 3);
}

// ---- train / eval ------------------------------------------------------

fn synth(dir: &Path, labels: &str, train: &str, test: &str) -> PathBuf {
    let out = dir.join("corpus");
    let o = kgned(&[
        "synth", "--labels", labels, "--train", train, "--test", test, "--distractors", "1", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn small_model_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("model.json");
    fs::write(&path, r#"{"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 16, "dropout": 0.1}"#).unwrap();
    path
}

#[test]
fn same_seed_gives_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "4", "16", "4");
    let model = small_model_cfg(dir.path());
    let run = |name: &str, max_triples: &str| {
        let out = dir.path().join(name);
        let o = kgned(&[
            "train", "--data", p(&corpus.join("train.jsonl")), "--kg", p(&corpus.join("kg")), "--vocab",
            p(&corpus.join("vocab.txt")), "--max-triples", max_triples, "--max-seq-len", "48", "--model-cfg", p(&model),
            "--epochs", "3", "--seed", "5", "--out", p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join(format!("{name}.history.json"))).unwrap()
    };
    let a = run("a.ckpt", "15");
    let b = run("b.ckpt", "15");
    assert_eq!(a, b);
    let losses: Vec<f64> = serde_json::from_slice(&a).unwrap();
    assert_eq!(losses.len(), 3);

    // the no-context baseline trains without touching the KG
    let o = kgned(&[
        "train", "--data", p(&corpus.join("train.jsonl")), "--vocab", p(&corpus.join("vocab.txt")), "--max-triples",
        "0", "--max-seq-len", "48", "--model-cfg", p(&model), "--epochs", "1", "--out", p(&dir.path().join("c.ckpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&dir.path().join("c.ckpt")).unwrap();
    assert_eq!(ck.context.max_triples, 0);
}

#[test]
fn missing_kg_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "2", "4", "2");
    let (data, vocab, out) = (corpus.join("train.jsonl"), corpus.join("vocab.txt"), dir.path().join("m.ckpt"));
    let base = ["train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&out)];
    let o = kgned(&base);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("nope");
    let mut args = base.to_vec();
    args.extend(["--kg", p(&missing)]);
    let o = kgned(&args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

/// Two mentions, each with its gold entity and one negative.
fn eval_fixture(dir: &Path, single_candidate: bool) -> (PathBuf, PathBuf, PathBuf) {
    let mut store = TripleStore::new();
    for (id, d) in [("Q1", "a bridge"), ("Q2", "a tower"), ("Q3", "a lake")] {
        store.push_triple(e(id), RelationId::new("description").unwrap(), Tail::Literal(d.into()), Hop::One);
    }
    let kg = dir.join("kg");
    store.write_dir(&kg).unwrap();
    let rows = if single_candidate {
        vec![
            json!({"id": "m1", "sentence": "see the bridge", "surface": "bridge", "span": [8, 14], "gold": "Q1", "candidates": ["Q1"]}),
            json!({"id": "m2", "sentence": "see the tower", "surface": "tower", "span": [8, 13], "gold": "Q2", "candidates": ["Q2"]}),
        ]
    } else {
        vec![
            json!({"id": "m1", "sentence": "see the bridge", "surface": "bridge", "span": [8, 14], "gold": "Q1", "candidates": ["Q1", "Q3"], "negatives": ["Q3"]}),
            json!({"id": "m2", "sentence": "see the tower", "surface": "tower", "span": [8, 13], "gold": "Q2", "candidates": ["Q2", "Q3"], "negatives": ["Q3"]}),
        ]
    };
    let data = dir.join("data.jsonl");
    fs::write(&data, rows.iter().map(|r| format!("{r}\n")).collect::<String>()).unwrap();

    // every parameter zero: each pair scores exactly 0.5 and counts as positive
    let vocab = Vocab::build(["see the bridge tower lake a description"], 1).unwrap();
    let ctx = ContextConfig {
        max_seq_len: 32,
        max_triples: 4,
        ..ContextConfig::default()
    };
    let mut cfg = ModelConfig::for_context(vocab.len(), &ctx);
    cfg.d_model = 8;
    cfg.ffn_dim = 8;
    let mut model = Classifier::new(cfg, 0).unwrap();
    model.params_mut().iter_mut().for_each(|x| *x = 0.0);
    let ckpt = dir.join("stub.ckpt");
    Checkpoint::new(model, vocab, ctx, None).unwrap().save(&ckpt).unwrap();
    (kg, data, ckpt)
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stub_checkpoint_gives_hand_scored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (kg, data, ckpt) = eval_fixture(dir.path(), false);
    let out = dir.path().join("r.json");
    let o = kgned(&[
        "eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--kg", p(&kg), "--protocol", "pairs", "--report", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 2 positive pairs and 2 negative pairs, all predicted positive:
    // P = 2/4, R = 2/2, F1 = 2 * 0.5 * 1 / 1.5
    let r = report(&out);
    assert_eq!(r["metrics"]["precision"], json!(50.0));
    assert_eq!(r["metrics"]["recall"], json!(100.0));
    assert_eq!(r["metrics"]["f1"], json!(66.67));
    assert_eq!(r["counts"]["fp"], json!(2));
    assert_eq!(r["schema_version"], json!(1));
    assert!(stdout(&o).contains("66.67"));

    let o = kgned(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--report", p(&out)]);
    assert_eq!(code(&o), 2, "context checkpoint without --kg");
}

#[test]
fn argmax_on_single_candidates_equals_pair_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (kg, data, ckpt) = eval_fixture(dir.path(), true);
    let metric = |protocol: &str, name: &str| {
        let out = dir.path().join(format!("{protocol}.json"));
        let o = kgned(&[
            "eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--kg", p(&kg), "--protocol", protocol, "--report",
            p(&out),
        ]);
        assert_eq!(code(&o), 0);
        report(&out)["metrics"][name].clone()
    };
    assert_eq!(metric("argmax", "inkb_accuracy"), metric("pairs", "pair_accuracy"));
}

// ---- diff --------------------------------------------------------------

fn predictions(path: &Path, rows: &[(&str, &str)]) {
    let text: String = rows
        .iter()
        .map(|(m, e)| format!("{}\n", json!({"mention_id": m, "predicted": e, "score": 0.9})))
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn diff_counts_flips() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    let rows: String = ["Q1", "Q2", "Q3", "Q4", "Q5"]
        .iter()
        .enumerate()
        .map(|(i, g)| {
            format!(
                "{}\n",
                json!({"id": format!("m{i}"), "sentence": "x y", "surface": "x", "span": [0, 1], "gold": g, "candidates": [g, "Q9"]})
            )
        })
        .collect();
    fs::write(&gold, rows).unwrap();
    let before = dir.path().join("before.jsonl");
    let after = dir.path().join("after.jsonl");
    predictions(&before, &[("m0", "Q9"), ("m1", "Q9"), ("m2", "Q3"), ("m3", "Q4"), ("m4", "Q9")]);
    predictions(&after, &[("m0", "Q1"), ("m1", "Q2"), ("m2", "Q9"), ("m3", "Q4"), ("m4", "Q9")]);
    let out = dir.path().join("diff.json");
    let o = kgned(&["diff", "--before", p(&before), "--after", p(&after), "--gold", p(&gold), "--report", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["flips"]["wrong_to_right"], json!(["m0", "m1"]));
    assert_eq!(r["flips"]["right_to_wrong"], json!(["m2"]));
    let fixed: Vec<&Value> = r["flips"]["wrong_to_right"].as_array().unwrap().iter().collect();
    assert!(r["flips"]["right_to_wrong"].as_array().unwrap().iter().all(|m| !fixed.contains(&m)));

    let o = kgned(&["diff", "--before", p(&before), "--after", p(&before), "--gold", p(&gold), "--report", p(&out)]);
    assert_eq!(code(&o), 0);
    let r = report(&out);
    assert_eq!(r["counts"]["wrong_to_right"], json!(0));
    assert_eq!(r["counts"]["right_to_wrong"], json!(0));

    predictions(&after, &[("m0", "Q1")]);
    let o = kgned(&["diff", "--before", p(&before), "--after", p(&after), "--gold", p(&gold), "--report", p(&out)]);
    assert_eq!(code(&o), 2);
}

// ---- disambiguate ------------------------------------------------------

const AU_CITIES: &[&str] = &["sydney", "canberra", "melbourne", "brisbane", "perth", "adelaide"];
const IN_CITIES: &[&str] = &["delhi", "mumbai", "chennai", "kolkata", "jaipur", "pune"];
const SHARED: &[&str] = &[
    "National Highway", "Parliament House", "High Court", "National Museum", "State Library", "Royal Hospital",
    "Central Station", "Grand Theatre", "National Gallery", "City Council",
];

/// Every shared label names one Australian and one Indian entity; a
/// sentence mentions two cities of its gold entity's country.
fn demo_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut store = TripleStore::new();
    let mut data = String::new();
    let mut n = 0;
    for (k, label) in SHARED.iter().enumerate() {
        let au = if k == 0 { "Q1967298".to_owned() } else { format!("Q{}", 100 + k) };
        let ind = format!("Q{}", 200 + k);
        for (id, country) in [(&au, "Australia"), (&ind, "India")] {
            let noun = label.split(' ').next_back().unwrap().to_lowercase();
            for (rel, v) in [("description", format!("{noun} system in {country}")), ("label", label.to_string())] {
                store.push_triple(e(id), RelationId::new(rel).unwrap(), Tail::Literal(v), Hop::One);
            }
            store.push_label(LabelRecord {
                subject: id.clone(),
                label: label.to_string(),
                kind: LabelKind::Label,
            });
        }
        for i in 0..AU_CITIES.len() {
            let j = (i + 1 + k) % AU_CITIES.len();
            for (cities, gold, neg) in [(AU_CITIES, &au, &ind), (IN_CITIES, &ind, &au)] {
                let (a, b) = (cities[i], cities[j]);
                let sentence = match i % 3 {
                    0 => format!("it is part of {a}–{b} {label} link"),
                    1 => format!("the {label} between {a} and {b} was repaved"),
                    _ => format!("from {a} the {label} reaches {b}"),
                };
                let m = kgned::tokenize::Mention::find(sentence.clone(), label).unwrap();
                data.push_str(&format!(
                    "{}\n",
                    json!({"id": format!("m{n}"), "sentence": sentence, "surface": label, "span": [m.start, m.end],
                           "gold": gold, "candidates": [gold, neg], "negatives": [neg]})
                ));
                n += 1;
            }
        }
    }
    store.push_triple(e("Q555"), RelationId::new("description").unwrap(), Tail::Literal("a lonely lighthouse".into()), Hop::One);
    store.push_label(LabelRecord {
        subject: "Q555".into(),
        label: "Cape Lighthouse".into(),
        kind: LabelKind::Label,
    });
    let kg = dir.join("kg");
    store.write_dir(&kg).unwrap();
    let train = dir.join("train.jsonl");
    fs::write(&train, data).unwrap();
    (kg, train)
}

#[test]
fn disambiguate_ranks_the_australian_highway_first() {
    let dir = tempfile::tempdir().unwrap();
    let (kg, train) = demo_fixture(dir.path());
    let model = dir.path().join("model.json");
    fs::write(&model, r#"{"d_model": 32, "n_layers": 2, "n_heads": 4, "ffn_dim": 64, "dropout": 0.0}"#).unwrap();
    let ckpt = dir.path().join("demo.ckpt");
    let o = kgned(&[
        "train", "--data", p(&train), "--kg", p(&kg), "--vocab", p(&dir.path().join("vocab.txt")), "--max-seq-len",
        "40", "--model-cfg", p(&model), "--epochs", "40", "--lr", "0.003", "--batch-size", "8", "--seed", "0", "--out",
        p(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = kgned(&[
        "disambiguate", "--sentence", "It is part of Sydney–Canberra National Highway link", "--surface",
        "National Highway", "--kg", p(&kg), "--checkpoint", p(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("1\tQ1967298\t"), "{out}");
    assert_eq!(out.lines().count(), 2);

    let o = kgned(&[
        "disambiguate", "--sentence", "nothing to see", "--surface", "Atlantis", "--kg", p(&kg), "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "no candidates");

    let o = kgned(&[
        "disambiguate", "--sentence", "we walked to Cape Lighthouse", "--surface", "Cape Lighthouse", "--kg", p(&kg),
        "--checkpoint", p(&ckpt),
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("1\tQ555\t"));
}

// ---- convert -----------------------------------------------------------

#[test]
fn convert_resolves_titles_through_the_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let mapping = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/title_mapping.json");
    let input = dir.path().join("raw.jsonl");
    fs::write(
        &input,
        format!(
            "{}\n",
            json!({"doc": "d1", "text": "Germany beat Italy", "mention": "Germany", "begin": 0, "stop": 7,
                   "answer": "Germany", "choices": ["Germany", "Germany national football team"]})
        ),
    )
    .unwrap();
    let alignment = dir.path().join("align.tsv");
    fs::write(&alignment, "Germany\tQ183\nGermany national football team\tQ43310\n").unwrap();
    let out = dir.path().join("out.jsonl");
    let o = kgned(&[
        "convert", "--input", p(&input), "--mapping", p(&mapping), "--alignment", p(&alignment), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(row["id"], json!("d1"));
    assert_eq!(row["gold"], json!("Q183"));
    assert_eq!(row["candidates"], json!(["Q183", "Q43310"]));
    assert_eq!(row["span"], json!([0, 7]));

    let o = kgned(&["convert", "--input", p(&input), "--mapping", p(&mapping), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "title mapping without alignment");
}

// ---- configuration -----------------------------------------------------

#[test]
fn flags_beat_env_beat_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let make = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join(name);
        let mut args = vec!["synth", "--labels", "3", "--train", "6", "--test", "2", "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = kgned_env(&args, env);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("train.jsonl")).unwrap()
    };
    let s1 = make("s1", &["--seed", "1"], &[]);
    let s2 = make("s2", &["--seed", "2"], &[]);
    let s3 = make("s3", &["--seed", "3"], &[]);
    assert_ne!(s1, s2);
    assert_eq!(make("file", &["--config", p(&cfg)], &[]), s1);
    assert_eq!(make("env", &["--config", p(&cfg)], &[("KGNED_SEED", "2")]), s2);
    assert_eq!(make("flag", &["--config", p(&cfg), "--seed", "3"], &[("KGNED_SEED", "2")]), s3);

    let json_cfg = dir.path().join("cfg.json");
    fs::write(&json_cfg, r#"{"seed": 2}"#).unwrap();
    assert_eq!(make("json", &["--config", p(&json_cfg)], &[]), s2);

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "seed\n").unwrap();
    let o = kgned(&["--config", p(&bad), "synth", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
}
