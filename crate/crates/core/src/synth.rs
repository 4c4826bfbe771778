//! Deterministic generator of labeled decompiled-app corpora.
//!
//! Each family owns a disjoint signature: permissions, components, intent
//! actions and a chain of framework APIs whose consecutive pairs are invoked
//! back to back. Every app shows each of its family's signature items with a
//! fixed probability, plus a random draw from a shared noise pool. App-local
//! helper calls are interleaved with the planted invokes; they fall outside
//! the framework prefixes and must be filtered out before pairing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::callgraph::pair_token;
use crate::error::{Error, Result};
use crate::ingest::{ApiId, ComponentKind};
use crate::seed;

pub const LABELS_FILE: &str = "labels.tsv";

/// Ten largest families of the Drebin corpus and their sample counts.
pub const DREBIN_TOP10: [(&str, usize); 10] = [
    ("FakeInstaller", 898),
    ("DroidKungFu", 665),
    ("Plankton", 623),
    ("Opfake", 590),
    ("GinMaster", 338),
    ("BaseBridge", 323),
    ("Iconosys", 150),
    ("Kmin", 147),
    ("Fakedoc", 75),
    ("Geinimi", 92),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub families: Vec<(String, usize)>,
    /// Planted items per kind and family (permissions, components, intent
    /// actions, API pairs).
    pub signature_size: usize,
    /// Probability that an app shows any single item of its signature.
    pub signature_presence: f64,
    /// Size of the shared noise pool.
    pub noise_tokens: usize,
    /// Noise items drawn per app.
    pub noise_per_sample: usize,
    /// Probability that an app's recorded label is replaced by a family drawn
    /// uniformly from all families (possibly its own).
    pub label_flip_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Ten families in Drebin proportions, scaled to `total` samples by
    /// largest remainder.
    pub fn drebin_like(total: usize, seed: u64) -> Self {
        let sum: usize = DREBIN_TOP10.iter().map(|(_, n)| n).sum();
        let mut sizes: Vec<(usize, usize, usize)> = DREBIN_TOP10
            .iter()
            .enumerate()
            .map(|(i, (_, n))| (i, n * total / sum, n * total % sum))
            .collect();
        let short = total - sizes.iter().map(|s| s.1).sum::<usize>();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].2.cmp(&sizes[a].2).then(a.cmp(&b)));
        for &i in order.iter().take(short) {
            sizes[i].1 += 1;
        }
        SyntheticSpec {
            families: sizes.iter().map(|&(i, n, _)| (DREBIN_TOP10[i].0.to_string(), n)).collect(),
            ..Self::balanced(0, 0, seed)
        }
    }

    pub fn balanced(n_families: usize, per_family: usize, seed: u64) -> Self {
        SyntheticSpec {
            families: (0..n_families).map(|f| (format!("family{f:02}"), per_family)).collect(),
            signature_size: 6,
            signature_presence: 0.75,
            noise_tokens: 400,
            noise_per_sample: 30,
            label_flip_rate: 0.05,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.families.iter().map(|(_, n)| n).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.total() == 0 {
            return Err(Error::Config("synthetic spec has no samples".into()));
        }
        for (name, p) in [
            ("signature_presence", self.signature_presence),
            ("label_flip_rate", self.label_flip_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.noise_per_sample > self.noise_tokens {
            return Err(Error::Config("noise_per_sample exceeds noise_tokens".into()));
        }
        Ok(())
    }
}

/// One invoke in a generated method body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invoke {
    Framework(ApiId),
    /// Call into the app's own code.
    Internal(ApiId),
}

/// Everything about one generated app before it is rendered to files.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedApp {
    pub id: String,
    pub package: String,
    pub true_family: usize,
    pub label: usize,
    pub permissions: BTreeSet<String>,
    pub hardware: BTreeSet<String>,
    pub components: BTreeSet<(ComponentKind, String)>,
    /// Actions of the extra intent filter (the launcher filter is implicit).
    pub actions: BTreeSet<String>,
    pub methods: Vec<Vec<Invoke>>,
}

impl PlannedApp {
    fn main_activity(&self) -> String {
        format!("{}.MainActivity", self.package)
    }

    /// Feature tokens this app must produce when every framework API is in
    /// the vocabulary accepted by `keep`.
    pub fn expected_tokens(&self, keep: impl Fn(&ApiId) -> bool) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        out.extend(self.permissions.iter().map(|p| format!("perm:{p}")));
        out.extend(self.hardware.iter().map(|h| format!("hw:{h}")));
        out.extend(self.components.iter().map(|(k, n)| format!("{}:{n}", k.as_str())));
        out.insert(format!("activity:{}", self.main_activity()));
        out.insert("intent:android.intent.action.MAIN".into());
        out.insert("intent:android.intent.category.LAUNCHER".into());
        out.extend(self.actions.iter().map(|a| format!("intent:{a}")));
        for m in &self.methods {
            let apis: Vec<&ApiId> = m
                .iter()
                .filter_map(|i| match i {
                    Invoke::Framework(a) if keep(a) => Some(a),
                    _ => None,
                })
                .collect();
            for w in apis.windows(2) {
                out.insert(pair_token(w[0], w[1]));
            }
        }
        out
    }

    pub fn framework_apis(&self) -> BTreeSet<&ApiId> {
        self.methods
            .iter()
            .flatten()
            .filter_map(|i| match i {
                Invoke::Framework(a) => Some(a),
                Invoke::Internal(_) => None,
            })
            .collect()
    }
}

fn signature_api(family: usize, i: usize) -> ApiId {
    ApiId::parse(&format!("Landroid/fam{family}/Sig{i};->call{i}(Ljava/lang/String;I)V")).expect("valid api")
}

enum NoiseItem {
    Perm(String),
    Hw(String),
    Action(String),
    Api(ApiId),
}

fn noise_item(j: usize) -> NoiseItem {
    match j % 4 {
        0 => NoiseItem::Perm(format!("android.permission.NOISE_{j}")),
        1 => NoiseItem::Hw(format!("android.hardware.noise.n{j}")),
        2 => NoiseItem::Action(format!("android.intent.action.NOISE_{j}")),
        _ => NoiseItem::Api(ApiId::parse(&format!("Landroid/noise/Noise{j};->op()Ljava/lang/Object;")).expect("valid api")),
    }
}

/// Builds the full plan of the corpus. Pure function of the synthetic spec.
pub fn plan_corpus(spec: &SyntheticSpec) -> Result<Vec<PlannedApp>> {
    spec.validate()?;
    let n_fam = spec.families.len();
    let mut order: Vec<usize> = spec
        .families
        .iter()
        .enumerate()
        .flat_map(|(f, (_, n))| std::iter::repeat(f).take(*n))
        .collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, "synth/order")));
    let s = spec.signature_size;
    let p = spec.signature_presence;
    let kinds = ComponentKind::ALL;
    let mut apps = Vec::with_capacity(order.len());
    for (i, &f) in order.iter().enumerate() {
        let mut rng = seed::rng(seed::derive_index(spec.seed, "synth/app", i as u64));
        let package = format!("com.synth.app{i:05}");
        let class = format!("Lcom/synth/app{i:05}/Main;");
        let helper = |n: usize| ApiId::parse(&format!("{class}->helper{n}()V")).expect("valid api");
        let mut app = PlannedApp {
            id: format!("app{i:05}"),
            package: package.clone(),
            true_family: f,
            label: f,
            permissions: BTreeSet::new(),
            hardware: BTreeSet::new(),
            components: BTreeSet::new(),
            actions: BTreeSet::new(),
            methods: Vec::new(),
        };
        for j in 0..s {
            if rng.random_bool(p) {
                app.permissions.insert(format!("com.fam{f}.permission.SIG_{j}"));
            }
            if rng.random_bool(p) {
                app.components.insert((kinds[j % 4], format!("com.fam{f}.core.Part{j}")));
            }
            if rng.random_bool(p) {
                app.actions.insert(format!("com.fam{f}.action.SIG_{j}"));
            }
            if rng.random_bool(p) {
                app.methods.push(vec![
                    Invoke::Framework(signature_api(f, j)),
                    Invoke::Internal(helper(j)),
                    Invoke::Framework(signature_api(f, j + 1)),
                ]);
            }
        }
        let mut noise_apis = Vec::new();
        for j in index::sample(&mut rng, spec.noise_tokens, spec.noise_per_sample).into_vec() {
            match noise_item(j) {
                NoiseItem::Perm(x) => drop(app.permissions.insert(x)),
                NoiseItem::Hw(x) => drop(app.hardware.insert(x)),
                NoiseItem::Action(x) => drop(app.actions.insert(x)),
                NoiseItem::Api(a) => noise_apis.push(a),
            }
        }
        for chunk in noise_apis.chunks(2) {
            let mut body: Vec<Invoke> = chunk.iter().cloned().map(Invoke::Framework).collect();
            body.insert(1.min(body.len()), Invoke::Internal(helper(100)));
            app.methods.push(body);
        }
        app.methods.shuffle(&mut rng);
        if rng.random_bool(spec.label_flip_rate) {
            app.label = rng.random_range(0..n_fam);
        }
        apps.push(app);
    }
    Ok(apps)
}

fn render_manifest(app: &PlannedApp) -> String {
    let mut x = String::new();
    let _ = writeln!(x, r#"<?xml version="1.0" encoding="utf-8" standalone="no"?>"#);
    let _ = writeln!(
        x,
        r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android" package="{}">"#,
        app.package
    );
    for perm in &app.permissions {
        let _ = writeln!(x, r#"    <uses-permission android:name="{perm}"/>"#);
    }
    for hw in &app.hardware {
        let _ = writeln!(x, r#"    <uses-feature android:name="{hw}" android:required="false"/>"#);
    }
    let _ = writeln!(x, r#"    <application android:label="@string/app_name">"#);
    let _ = writeln!(x, r#"        <activity android:name="{}">"#, app.main_activity());
    let _ = writeln!(x, "            <intent-filter>");
    let _ = writeln!(x, r#"                <action android:name="android.intent.action.MAIN"/>"#);
    let _ = writeln!(x, r#"                <category android:name="android.intent.category.LAUNCHER"/>"#);
    let _ = writeln!(x, "            </intent-filter>");
    if !app.actions.is_empty() {
        let _ = writeln!(x, "            <intent-filter>");
        for a in &app.actions {
            let _ = writeln!(x, r#"                <action android:name="{a}"/>"#);
        }
        let _ = writeln!(x, "            </intent-filter>");
    }
    let _ = writeln!(x, "        </activity>");
    for (kind, name) in &app.components {
        let _ = writeln!(x, r#"        <{} android:name="{name}" android:exported="false"/>"#, kind.as_str());
    }
    let _ = writeln!(x, "    </application>");
    let _ = writeln!(x, "</manifest>");
    x
}

fn render_invoke(out: &mut String, call: &Invoke, n: usize) {
    let (api, form) = match call {
        Invoke::Framework(a) => (a, n % 4),
        Invoke::Internal(a) => (a, 4),
    };
    let line = match form {
        0 => format!("invoke-static {{v0, v1}}, {api}"),
        1 => format!("invoke-virtual {{p0, v1, v2}}, {api}"),
        2 => format!("invoke-interface/range {{v0 .. v2}}, {api}"),
        3 => format!("invoke-direct {{p0}}, {api}"),
        _ => format!("invoke-direct {{p0}}, {api}"),
    };
    let _ = writeln!(out, "    {line}");
    let _ = writeln!(out, "    move-result-object v0");
    let _ = writeln!(out);
}

fn render_smali(app: &PlannedApp, methods: &[(usize, &Vec<Invoke>)], class_suffix: &str) -> String {
    let pkg_path = app.package.replace('.', "/");
    let mut s = String::new();
    let _ = writeln!(s, ".class public L{pkg_path}/{class_suffix};");
    let _ = writeln!(s, ".super Ljava/lang/Object;");
    let _ = writeln!(s, ".source \"{class_suffix}.java\"");
    let _ = writeln!(s);
    for (m, body) in methods {
        let _ = writeln!(s, ".method public run{m}(Ljava/lang/String;)V");
        let _ = writeln!(s, "    .registers 4");
        let _ = writeln!(s);
        for (n, call) in body.iter().enumerate() {
            render_invoke(&mut s, call, m + n);
        }
        let _ = writeln!(s, "    return-void");
        let _ = writeln!(s, ".end method");
        let _ = writeln!(s);
    }
    s
}

fn write_app(root: &Path, app: &PlannedApp) -> Result<()> {
    let dir = root.join(&app.id);
    let smali_dir = dir.join("smali").join(app.package.replace('.', "/"));
    fs::create_dir_all(&smali_dir).map_err(|e| Error::io(&smali_dir, e))?;
    let write = |path: &Path, text: &str| fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&dir.join("AndroidManifest.xml"), &render_manifest(app))?;
    let indexed: Vec<(usize, &Vec<Invoke>)> = app.methods.iter().enumerate().collect();
    let (first, second) = indexed.split_at(indexed.len() / 2);
    write(&smali_dir.join("Main.smali"), &render_smali(app, first, "Main"))?;
    write(&smali_dir.join("Worker.smali"), &render_smali(app, second, "Worker"))?;
    Ok(())
}

/// Writes the corpus and its label file under `root`, which must be absent
/// or empty. Returns the plan.
pub fn write_corpus(spec: &SyntheticSpec, root: &Path) -> Result<Vec<PlannedApp>> {
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::ExistingNonEmptyTarget(root.to_path_buf()));
        }
    }
    let apps = plan_corpus(spec)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for app in &apps {
        write_app(root, app)?;
    }
    let mut labels = String::from("# app_id\tfamily\n");
    for app in &apps {
        let _ = writeln!(labels, "{}\t{}", app.id, spec.families[app.label].0);
    }
    let path = root.join(LABELS_FILE);
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    Ok(apps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drebin_preset_scales_to_total() {
        let spec = SyntheticSpec::drebin_like(1000, 42);
        assert_eq!(spec.total(), 1000);
        assert_eq!(spec.families[0], ("FakeInstaller".to_string(), 230));
        assert_eq!(spec.families.len(), 10);
        assert!(spec.families.iter().all(|(_, n)| *n >= 19));
    }

    #[test]
    fn plan_is_pure() {
        let spec = SyntheticSpec::balanced(3, 10, 1);
        assert_eq!(plan_corpus(&spec).unwrap(), plan_corpus(&spec).unwrap());
    }

    #[test]
    fn signatures_are_disjoint() {
        let mut spec = SyntheticSpec::balanced(4, 20, 3);
        spec.noise_per_sample = 0;
        spec.label_flip_rate = 0.0;
        let apps = plan_corpus(&spec).unwrap();
        let mut by_family: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 4];
        for a in &apps {
            let mut t = a.expected_tokens(|_| true);
            t.remove(&format!("activity:{}", a.main_activity()));
            t.remove("intent:android.intent.action.MAIN");
            t.remove("intent:android.intent.category.LAUNCHER");
            by_family[a.true_family].extend(t);
        }
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(by_family[i].is_disjoint(&by_family[j]));
            }
        }
    }

    #[test]
    fn refuses_non_empty_target() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "").unwrap();
        let spec = SyntheticSpec::balanced(2, 2, 0);
        assert!(matches!(write_corpus(&spec, dir.path()), Err(Error::ExistingNonEmptyTarget(_))));
    }
}
