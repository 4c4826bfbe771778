//! Acceptance criteria C1 to C10. Each test writes one `C<n> PASS|FAIL` line
//! to stderr (visible without `--nocapture`) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use malfam_core::callgraph::{build_call_graph, ApiVocabulary};
use malfam_core::cluster::{kmeans, KMeansParams, WeightVector};
use malfam_core::ensemble::{adaptive_weights, train_adaboost, train_ensemble, BoostConfig};
use malfam_core::eval::{adjusted_rand_index, compute_metrics, metrics_from_confusion};
use malfam_core::features::{candidate_apis, FeatureDictionary, FeatureVector, LabeledDataset, DEFAULT_API_PREFIXES};
use malfam_core::forest::{importances, train_forest, ForestConfig, MaxFeatures, NoiseMode};
use malfam_core::ingest::{ingest_app, ingest_corpus, parse_manifest, parse_smali, read_labels, ApiId, AppSample, ManifestFacts};
use malfam_core::pipeline::{fold_plan, CorpusFolds};
use malfam_core::{seed, Dataset, ModelBundle, PipelineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
}

fn summary(problems: &[String]) -> String {
    if problems.is_empty() {
        "no discrepancies".into()
    } else {
        problems.join("; ")
    }
}

fn malfam(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_malfam"))
        .args(args)
        .arg("--log-level=error")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "malfam {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// The planted corpus shared by C1 and C10, with the time `synth` took.
fn planted() -> &'static (PathBuf, Duration) {
    static CORPUS: OnceLock<(PathBuf, Duration)> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let corpus = scratch("planted").join("corpus");
        let start = Instant::now();
        malfam(&["synth", "--out", s(&corpus), "--preset", "drebin", "--samples", "1000", "--seed", "42"]);
        (corpus, start.elapsed())
    })
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn c1_end_to_end_planted_accuracy() {
    let (corpus, synth_time) = planted();
    let out = scratch("c1").join("report");
    let start = Instant::now();
    malfam(&["evaluate", s(corpus), "--out", s(&out)]);
    let elapsed = *synth_time + start.elapsed();
    let json = read_json(&out.join("report.json"));
    let avg = &json["report"]["averaged"];
    let acc = avg["accuracy"].as_f64().unwrap();
    let f1 = avg["macro_f1"].as_f64().unwrap();
    let families = json["report"]["averaged"]["per_family"].as_array().unwrap().len();
    let pass = acc >= 0.95 && f1 >= 0.95 && elapsed < Duration::from_secs(300) && families == 10;
    verdict(
        "C1",
        pass,
        format!(
            "accuracy={acc:.4} macro_f1={f1:.4} (both need >= 0.95) families={families} elapsed={:.1}s (< 300s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn labeled(rows: &[(Vec<u32>, usize)], dim: usize) -> LabeledDataset {
    let dict = FeatureDictionary::from_tokens((0..dim).map(|c| format!("perm:p{c:03}")));
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, (cols, l))| (format!("r{i:04}"), FeatureVector::new(cols.clone(), dim).unwrap(), format!("fam{l}")))
        .collect();
    LabeledDataset::new(dict, rows).unwrap()
}

#[test]
fn c2_importance_correctness() {
    // column 0 carries the label, column 7 is always set, column 8 never
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rows: Vec<(Vec<u32>, usize)> = (0..60)
        .map(|i| {
            let label = i % 2;
            let mut cols: Vec<u32> = if label == 1 { vec![0] } else { vec![] };
            cols.extend((1..7).filter(|_| rng.random_bool(0.5)));
            cols.push(7);
            (cols, label)
        })
        .collect();
    let ds = labeled(&rows, 9);
    let mut problems = Vec::new();
    let mut unused_checked = 0;
    for forest_seed in 0..5u64 {
        let cfg = ForestConfig {
            n_trees: 50,
            max_depth: 10,
            max_features: MaxFeatures::Sqrt,
            seed: forest_seed,
        };
        let model = train_forest::<f64>(&ds, &cfg).unwrap();
        let imp = importances(&model, &ds, forest_seed + 100, NoiseMode::Permute).values;
        if !(1..9).all(|c| imp[0] > imp[c]) || imp[0] <= 0.0 {
            problems.push(format!("seed {forest_seed}: column 0 not the strict max {imp:?}"));
        }
        if imp[7] != 0.0 || imp[8] != 0.0 {
            problems.push(format!("seed {forest_seed}: constant columns {} {}", imp[7], imp[8]));
        }
        let used: BTreeSet<usize> = model.trees().iter().flat_map(|t| t.used_columns()).collect();
        for c in (0..9).filter(|c| !used.contains(c)) {
            unused_checked += 1;
            if imp[c] != 0.0 {
                problems.push(format!("seed {forest_seed}: never-split column {c} = {}", imp[c]));
            }
        }
    }
    verdict(
        "C2",
        problems.is_empty(),
        format!("5 forests, {unused_checked} never-split columns checked; {}", summary(&problems)),
    );
}

#[test]
fn c3_clustering_recovery() {
    let mut worst_ari = f64::INFINITY;
    let mut sse_ok = true;
    for run in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|b| (0..20).map(|d| if d % 3 == b { 4.0 } else { 0.0 } + rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let b = (i * 7 + run as usize) % 3;
            rows.push(centers[b].iter().map(|c| c + rng.random_range(-0.6..0.6)).collect::<Vec<f64>>());
            truth.push(b);
        }
        let model = kmeans(&rows, 3, &WeightVector::uniform(20), KMeansParams::default()).unwrap();
        worst_ari = worst_ari.min(adjusted_rand_index(&truth, &model.assignments).unwrap());
        sse_ok &= model.sse_history.windows(2).all(|w| w[1] <= w[0]);
    }
    verdict(
        "C3",
        worst_ari >= 0.9 && sse_ok,
        format!("worst ARI over 10 runs {worst_ari:.4} (>= 0.9), SSE non-increasing on every run: {sse_ok}"),
    );
}

#[test]
fn c4_single_cluster_is_plain_boosting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 40;
    let rows: Vec<(Vec<u32>, usize)> = (0..240)
        .map(|i| {
            let label = i % 4;
            let cols = (0..dim as u32)
                .filter(|&c| rng.random_bool(if c as usize % 4 == label { 0.6 } else { 0.2 }))
                .collect();
            (cols, label)
        })
        .collect();
    let ds = labeled(&rows, dim);
    let w = WeightVector::uniform(dim);
    let dense: Vec<Vec<f64>> = ds.to_dense();
    let clusters = kmeans(&dense, 1, &w, KMeansParams::default()).unwrap();
    let cfg = BoostConfig {
        rounds: 30,
        weak_depth: 3,
        seed: 42,
    };
    let ensemble = train_ensemble(&ds, &clusters, &cfg).unwrap();
    let vectors: Vec<&FeatureVector> = ds.rows.iter().map(|r| &r.vector).collect();
    let plain_cfg = BoostConfig {
        seed: seed::derive_index(42, "ensemble/cluster", 0),
        ..cfg
    };
    let plain = train_adaboost::<f64>(&vectors, &ds.labels(), ds.n_families(), dim, &plain_cfg);
    let mut mismatches = 0;
    for _ in 0..500 {
        let cols = (0..dim as u32).filter(|_| rng.random_bool(0.3)).collect();
        let x = FeatureVector::new(cols, dim).unwrap();
        if ensemble.predict(&x).unwrap().0 != plain.predict(&x) {
            mismatches += 1;
        }
    }
    verdict(
        "C4",
        mismatches == 0 && !plain.rounds.is_empty(),
        format!("{mismatches} of 500 probe labels differ, {} boosting rounds", plain.rounds.len()),
    );
}

#[test]
fn c5_adaptive_weight_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut range_ok, mut order_ok) = (0.0f64, true, true);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=12);
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
        let w = adaptive_weights(&d);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        range_ok &= w.iter().all(|&x| x > 0.0 && x <= 1.0);
        for a in 0..k {
            for b in 0..k {
                if d[a] < d[b] {
                    order_ok &= w[a] > w[b];
                }
            }
        }
    }
    verdict(
        "C5",
        worst_sum <= 1e-12 && range_ok && order_ok,
        format!("max |sum - 1| = {worst_sum:.2e} (<= 1e-12), weights in (0,1]: {range_ok}, strictly decreasing: {order_ok}"),
    );
}

#[test]
fn c6_metric_oracle() {
    let families = vec!["a".to_string(), "b".to_string()];
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (t, p, n) in [(0, 0, 8), (0, 1, 2), (1, 0, 3), (1, 1, 7)] {
        truth.extend(std::iter::repeat_n(t, n));
        pred.extend(std::iter::repeat_n(p, n));
    }
    let r = compute_metrics(&truth, &pred, &families).unwrap();
    let (p0, p1, r0, r1) = (8.0 / 11.0, 7.0 / 9.0, 8.0 / 10.0, 7.0 / 10.0);
    let mp = (p0 + p1) / 2.0;
    let mr = (r0 + r1) / 2.0;
    let mf = 2.0 * mp * mr / (mp + mr);
    let fixed_err = [
        (r.accuracy - 0.75).abs(),
        (r.macro_precision - mp).abs(),
        (r.macro_recall - mr).abs(),
        (r.macro_f1 - mf).abs(),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random_err = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let m: Vec<Vec<u64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..50)).collect()).collect();
        let total: u64 = m.iter().flatten().sum::<u64>().max(1);
        let trace: u64 = (0..n).map(|i| m[i][i]).sum();
        let names: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
        let rep = metrics_from_confusion(m, &names);
        random_err = random_err.max((rep.accuracy - trace as f64 / total as f64).abs());
    }
    verdict(
        "C6",
        fixed_err <= 1e-12 && random_err <= 1e-12,
        format!("[[8,2],[3,7]] max error {fixed_err:.2e}, trace/total max error over 100 matrices {random_err:.2e}"),
    );
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

#[test]
fn c7_parser_fidelity() {
    let root = fixtures();
    let files = walk(&root);
    let mut problems = Vec::new();

    let app = ingest_app(&root.join("app"), "app", None).unwrap();
    if app.manifest.counts() != (3, 1, 4, 6) {
        problems.push(format!("app manifest counts {:?} != (3, 1, 4, 6)", app.manifest.counts()));
    }
    let vocab = ApiVocabulary::new(candidate_apis(
        [&app],
        &DEFAULT_API_PREFIXES.map(String::from),
    ));
    let edges = build_call_graph(&app, &vocab).edge_count();
    if edges != 8 {
        problems.push(format!("app edges {edges} != 8"));
    }
    let invokes: usize = app.methods.iter().map(|m| m.invocations.len()).sum();
    if invokes != 17 {
        problems.push(format!("app invokes {invokes} != 17"));
    }

    let multi = parse_manifest(&std::fs::read_to_string(root.join("standalone/manifest_multi.xml")).unwrap()).unwrap();
    if multi.counts() != (2, 2, 2, 5) {
        problems.push(format!("multi-filter manifest counts {:?} != (2, 2, 2, 5)", multi.counts()));
    }

    let api = |t: &str| ApiId::parse(t).unwrap();
    let (a, b, c) = (api("Landroid/a/A;->a()V"), api("Landroid/b/B;->b()V"), api("Landroid/c/C;->c()V"));
    let abc = ApiVocabulary::new([a.clone(), b.clone(), c.clone()]);
    let graph_of = |file: &str| {
        let text = std::fs::read_to_string(root.join("standalone").join(file)).unwrap();
        let sample = AppSample {
            id: file.into(),
            family: None,
            manifest: ManifestFacts::default(),
            methods: parse_smali(&text, file),
        };
        let g = build_call_graph(&sample, &abc);
        g.edges().map(|(x, y)| (x.clone(), y.clone())).collect::<BTreeSet<_>>()
    };
    let chain: BTreeSet<_> = [(a.clone(), b.clone()), (b.clone(), c.clone())].into();
    if graph_of("chain.smali") != chain {
        problems.push("[A,B,C] chain".into());
    }
    let filtered: BTreeSet<_> = [(a.clone(), b.clone())].into();
    if graph_of("filtered.smali") != filtered {
        problems.push("[A,X,B] filter".into());
    }
    verdict(
        "C7",
        problems.is_empty() && files >= 10,
        format!("{files} fixture files (>= 10); {}", summary(&problems)),
    );
}

fn walk(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| if e.path().is_dir() { walk(&e.path()) } else { 1 })
        .sum()
}

const SMALL: [&str; 10] = [
    "--api-vocab-size", "60",
    "--n-trees", "30",
    "--boost-rounds", "10",
    "--k-clusters", "3",
    "--seed", "8",
];

fn small_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    malfam(&[
        "synth", "--out", s(&corpus), "--preset", "balanced", "--families", "4", "--samples", "25",
        "--noise-tokens", "80", "--noise-per-sample", "10", "--seed", "8",
    ]);
    corpus
}

#[test]
fn c8_determinism_and_persistence() {
    let mut problems = Vec::new();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let dir = scratch(&format!("c8-{run}"));
        let corpus = small_corpus(&dir);
        let data = dir.join("data.bin");
        let model = dir.join("model.bin");
        let report = dir.join("report");
        malfam(&[&["extract", s(&corpus), "--out", s(&data)][..], &SMALL].concat());
        malfam(&[&["train", s(&data), "--out", s(&model)][..], &SMALL].concat());
        malfam(&[&["evaluate", s(&corpus), "--out", s(&report)][..], &SMALL].concat());
        malfam(&["predict", s(&model), s(&corpus), "--out", s(&dir.join("pred.csv"))]);
        runs.push(dir);
    }
    for file in [
        "data.bin",
        "model.bin",
        "pred.csv",
        "report/report.json",
        "report/confusion.csv",
        "report/family_accuracy.csv",
        "report/table.txt",
    ] {
        let x = std::fs::read(runs[0].join(file)).unwrap();
        let y = std::fs::read(runs[1].join(file)).unwrap();
        if x != y {
            problems.push(format!("{file} differs"));
        }
    }

    let bundle = ModelBundle::load(&runs[0].join("model.bin")).unwrap();
    let copy = runs[0].join("model-copy.bin");
    bundle.save(&copy).unwrap();
    let reloaded = ModelBundle::load(&copy).unwrap();
    let data = Dataset::load(&runs[0].join("data.bin")).unwrap();
    let labels = read_labels(&runs[0].join("corpus/labels.tsv")).unwrap();
    let samples = ingest_corpus(&runs[0].join("corpus"), Some(&labels)).unwrap();
    let mut checked = 0;
    for sample in &samples {
        let (l1, s1) = bundle.predict_sample(sample).unwrap();
        let (l2, s2) = reloaded.predict_sample(sample).unwrap();
        let same_bits = s1.iter().zip(&s2).all(|(p, q)| p.to_bits() == q.to_bits());
        if l1 != l2 || !same_bits {
            problems.push(format!("prediction of {} changed after save/load", sample.id));
        }
        checked += 1;
    }
    if std::fs::read(&copy).unwrap() != std::fs::read(runs[0].join("model.bin")).unwrap() {
        problems.push("re-saved bundle differs".into());
    }
    if Dataset::from_bytes(&data.to_bytes().unwrap(), Path::new("mem")).unwrap() != data {
        problems.push("dataset round trip".into());
    }
    verdict(
        "C8",
        problems.is_empty(),
        format!("7 artifacts compared across two runs, {checked} predictions after reload; {}", summary(&problems)),
    );
}

#[test]
fn c9_no_leakage() {
    let dir = scratch("c9");
    let corpus = small_corpus(&dir);
    let cfg = PipelineConfig {
        seed: 8,
        ..PipelineConfig::default()
    };
    let labels = read_labels(&corpus.join("labels.tsv")).unwrap();
    let samples = ingest_corpus(&corpus, Some(&labels)).unwrap();
    let source = CorpusFolds::new(&samples, &cfg).unwrap();
    let plan = fold_plan(&source, &cfg).unwrap();
    // each fold gets its own canary, planted only in that fold's held-out apps
    for fold in 0..plan.n_folds {
        for i in plan.test_rows(fold) {
            let path = corpus.join(&source.samples()[i].id).join("AndroidManifest.xml");
            let text = std::fs::read_to_string(&path).unwrap();
            let canary = format!("<uses-permission android:name=\"canary.FOLD_{fold}\"/>\n    <application");
            std::fs::write(&path, text.replacen("<application", &canary, 1)).unwrap();
        }
    }
    let report = dir.join("report");
    malfam(&["evaluate", s(&corpus), "--out", s(&report), "--seed", "8", "--top-k-features", "100000"]);
    let json = read_json(&report.join("report.json"));
    let selected = json["report"]["selected_tokens"].as_array().unwrap();
    let mut leaks = Vec::new();
    let mut visible_elsewhere = 0;
    for (fold, tokens) in selected.iter().enumerate() {
        let tokens: BTreeSet<&str> = tokens.as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
        if tokens.contains(format!("perm:canary.FOLD_{fold}").as_str()) {
            leaks.push(fold);
        }
        visible_elsewhere += (0..plan.n_folds)
            .filter(|&g| g != fold && tokens.contains(format!("perm:canary.FOLD_{g}").as_str()))
            .count();
    }
    verdict(
        "C9",
        leaks.is_empty() && visible_elsewhere > 0,
        format!(
            "{} folds, held-out canaries leaked in folds {leaks:?}; canaries seen by folds that train on them: {visible_elsewhere}",
            selected.len()
        ),
    );
}

#[test]
fn c10_feature_count_sweep() {
    let (corpus, _) = planted();
    let out = scratch("c10").join("sweep.csv");
    malfam(&["sweep", s(corpus), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<(String, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    let best = |col: fn(&(String, f64, f64)) -> f64| {
        rows.iter().fold(&rows[0], |b, r| if col(r) > col(b) { r } else { b })
    };
    let best_acc = best(|r| r.1);
    let best_f1 = best(|r| r.2);
    let all = rows.last().unwrap();
    let pass = all.0 == "all" && best_acc.0 != "all" && best_f1.0 != "all";
    verdict(
        "C10",
        pass,
        format!(
            "{} sweep points; best accuracy {:.4} at top_k={}, best macro F1 {:.4} at top_k={}; all features: accuracy {:.4}, macro F1 {:.4}",
            rows.len(),
            best_acc.1,
            best_acc.0,
            best_f1.2,
            best_f1.0,
            all.1,
            all.2
        ),
    );
}
