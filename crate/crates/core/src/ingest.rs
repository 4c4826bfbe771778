//! Decompiled-app ingestion.
//!
//! The input is the directory layout a decompiler such as apktool leaves
//! behind: one directory per app holding a decoded `AndroidManifest.xml` and
//! a `smali/` tree. Manifests are reduced to [`ManifestFacts`]; smali method
//! bodies are reduced to the ordered list of invoked methods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::{debug, warn};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

/// Canonical method reference `Lpkg/Class;->name(Args)Ret`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApiId(String);

impl ApiId {
    /// Builds an id from its three parts, stripping any whitespace.
    pub fn new(class: &str, method: &str, descriptor: &str) -> Option<Self> {
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        let id = format!("{}->{}{}", strip(class), strip(method), strip(descriptor));
        Self::parse(&id)
    }

    /// Accepts a string only if it matches the canonical grammar.
    pub fn parse(s: &str) -> Option<Self> {
        api_grammar().is_match(s).then(|| ApiId(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Class part, e.g. `Landroid/telephony/SmsManager;`.
    pub fn class(&self) -> &str {
        self.0.split("->").next().unwrap_or("")
    }
}

impl fmt::Display for ApiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn api_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^L[\w/$]+;->[\w<>$]+\(.*\).*$").unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Activity,
    Service,
    Receiver,
    Provider,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] = [
        ComponentKind::Activity,
        ComponentKind::Service,
        ComponentKind::Receiver,
        ComponentKind::Provider,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Activity => "activity",
            ComponentKind::Service => "service",
            ComponentKind::Receiver => "receiver",
            ComponentKind::Provider => "provider",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == tag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFacts {
    pub permissions: BTreeSet<String>,
    pub hardware: BTreeSet<String>,
    pub components: BTreeSet<(ComponentKind, String)>,
    pub intent_filters: BTreeSet<String>,
}

impl ManifestFacts {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.permissions.len(),
            self.hardware.len(),
            self.components.len(),
            self.intent_filters.len(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodInvocations {
    pub method_id: String,
    pub invocations: Vec<ApiId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSample {
    pub id: String,
    pub family: Option<String>,
    pub manifest: ManifestFacts,
    pub methods: Vec<MethodInvocations>,
}

impl AppSample {
    /// Distinct APIs invoked anywhere in the app.
    pub fn invoked_apis(&self) -> BTreeSet<&ApiId> {
        self.methods.iter().flat_map(|m| m.invocations.iter()).collect()
    }
}

/// Extracts manifest facts from a decoded (text) AndroidManifest.xml.
pub fn parse_manifest(xml_text: &str) -> Result<ManifestFacts> {
    let doc = roxmltree::Document::parse(xml_text).map_err(|e| Error::MalformedManifest {
        path: String::new(),
        reason: e.to_string(),
    })?;
    let mut facts = ManifestFacts::default();
    for node in doc.descendants().filter(|n| n.is_element()) {
        let tag = node.tag_name().name();
        let Some(name) = android_name(&node) else {
            continue;
        };
        match tag {
            "uses-permission" | "uses-permission-sdk-23" | "uses-permission-sdk-m" => {
                facts.permissions.insert(name);
            }
            "uses-feature" => {
                facts.hardware.insert(name);
            }
            "action" | "category" if in_intent_filter(&node) => {
                facts.intent_filters.insert(name);
            }
            _ => {
                if let Some(kind) = ComponentKind::from_tag(tag) {
                    facts.components.insert((kind, name));
                }
            }
        }
    }
    Ok(facts)
}

fn android_name(node: &roxmltree::Node<'_, '_>) -> Option<String> {
    let raw = node
        .attribute((ANDROID_NS, "name"))
        .or_else(|| node.attributes().find(|a| a.name() == "name").map(|a| a.value()))?;
    let trimmed = raw.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

fn in_intent_filter(node: &roxmltree::Node<'_, '_>) -> bool {
    node.parent_element()
        .is_some_and(|p| p.tag_name().name() == "intent-filter")
}

fn invoke_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^invoke-(?:virtual|super|direct|static|interface)(?:/range)?\s*\{[^}]*\}\s*,\s*(\S+?)\s*->\s*([^\s(]+)\s*(\(.*)$",
        )
        .unwrap()
    })
}

fn class_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\.class\b.*?(L[^;\s]+;)\s*$").unwrap())
}

/// Parses the text of one `.smali` file. `origin` is used only for logging.
pub fn parse_smali(text: &str, origin: &str) -> Vec<MethodInvocations> {
    let mut class = String::new();
    let mut out = Vec::new();
    let mut current: Option<MethodInvocations> = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with(".class") {
            if let Some(c) = class_re().captures(line) {
                class = c[1].to_string();
            }
        } else if let Some(rest) = line.strip_prefix(".method") {
            if let Some(open) = current.take() {
                warn!("{origin}: method {} not closed before next .method", open.method_id);
                out.push(open);
            }
            let signature = rest.split_whitespace().last().unwrap_or("");
            current = Some(MethodInvocations {
                method_id: format!("{class}->{signature}"),
                invocations: Vec::new(),
            });
        } else if line.starts_with(".end method") {
            if let Some(done) = current.take() {
                out.push(done);
            }
        } else if line.starts_with("invoke-") {
            let Some(method) = current.as_mut() else {
                continue;
            };
            let stmt = line.split('#').next().unwrap_or("").trim_end();
            match invoke_re().captures(stmt) {
                Some(c) => match ApiId::new(&c[1], &c[2], &c[3]) {
                    Some(api) => method.invocations.push(api),
                    None => debug!("{origin}: non-canonical invoke target skipped: {line}"),
                },
                None => debug!("{origin}: unrecognized invoke form: {line}"),
            }
        }
    }
    if let Some(open) = current {
        warn!("{origin}: truncated method block {}", open.method_id);
        out.push(open);
    }
    out
}

/// Smali files under `root` in lexicographic path order.
fn smali_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| match e {
            Ok(e) => Some(e),
            Err(err) => {
                warn!("skipping unreadable entry under {}: {err}", root.display());
                None
            }
        })
        .filter(|e| e.file_type().is_file())
        .filter(|e| e.path().extension().is_some_and(|x| x == "smali"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

pub fn parse_smali_dir(root: &Path) -> Vec<MethodInvocations> {
    let mut out = Vec::new();
    for path in smali_files(root) {
        match fs::read_to_string(&path) {
            Ok(text) => out.extend(parse_smali(&text, &path.display().to_string())),
            Err(e) => warn!("skipping unreadable file {}: {e}", path.display()),
        }
    }
    out
}

/// Reads `app_id<TAB>family` lines; `#` starts a comment.
pub fn parse_labels(text: &str) -> BTreeMap<String, String> {
    let mut labels = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, fam)) if !id.trim().is_empty() && !fam.trim().is_empty() => {
                labels.insert(id.trim().to_string(), fam.trim().to_string());
            }
            _ => warn!("label file line {}: expected `id<TAB>family`", lineno + 1),
        }
    }
    labels
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_labels(&text))
}

/// Parses one app directory.
pub fn ingest_app(dir: &Path, id: &str, family: Option<String>) -> Result<AppSample> {
    let manifest_path = dir.join("AndroidManifest.xml");
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = parse_manifest(&text).map_err(|e| match e {
        Error::MalformedManifest { reason, .. } => Error::MalformedManifest {
            path: manifest_path.display().to_string(),
            reason,
        },
        other => other,
    })?;
    let mut methods = Vec::new();
    // apktool writes secondary dex files to smali_classes2, smali_classes3, ...
    for smali_root in smali_roots(dir) {
        methods.extend(parse_smali_dir(&smali_root));
    }
    Ok(AppSample {
        id: id.to_string(),
        family,
        manifest,
        methods,
    })
}

fn smali_roots(dir: &Path) -> Vec<PathBuf> {
    let mut roots: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name == "smali" || name.starts_with("smali_classes")
        })
        .map(|e| e.path())
        .collect();
    roots.sort();
    roots
}

/// Ingests every app directory under `root`, in lexicographic id order.
///
/// Apps with a missing or malformed manifest are skipped with a warning.
pub fn ingest_corpus(root: &Path, labels: Option<&BTreeMap<String, String>>) -> Result<Vec<AppSample>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut apps: Vec<(String, PathBuf)> = entries
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    apps.sort();
    let samples: Vec<Option<AppSample>> = apps
        .par_iter()
        .map(|(id, dir)| {
            let family = labels.and_then(|l| l.get(id).cloned());
            match ingest_app(dir, id, family) {
                Ok(s) => Some(s),
                Err(e) => {
                    warn!("skipping app {id}: {e}");
                    None
                }
            }
        })
        .collect();
    let samples: Vec<AppSample> = samples.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_permission() {
        let xml = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android">
            <uses-permission android:name="android.permission.SEND_SMS"/></manifest>"#;
        let f = parse_manifest(xml).unwrap();
        assert_eq!(
            f.permissions.iter().collect::<Vec<_>>(),
            vec!["android.permission.SEND_SMS"]
        );
    }

    #[test]
    fn no_components() {
        let xml = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android">
            <uses-permission android:name="a.P"/><uses-feature android:name="android.hardware.camera"/>
            <application/></manifest>"#;
        let f = parse_manifest(xml).unwrap();
        assert!(f.components.is_empty());
        assert_eq!(f.counts(), (1, 1, 0, 0));
    }

    #[test]
    fn names_are_trimmed_and_deduplicated() {
        let xml = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android">
            <uses-permission android:name=" a.P "/><uses-permission android:name="a.P"/>
            <uses-permission android:name="a.p"/></manifest>"#;
        let f = parse_manifest(xml).unwrap();
        assert_eq!(f.permissions.len(), 2);
        assert!(f.permissions.contains("a.P"));
    }

    #[test]
    fn actions_outside_intent_filters_are_ignored() {
        let xml = r#"<manifest xmlns:android="http://schemas.android.com/apk/res/android">
            <action android:name="stray"/></manifest>"#;
        assert!(parse_manifest(xml).unwrap().intent_filters.is_empty());
    }

    #[test]
    fn malformed_manifest_errors() {
        assert!(matches!(
            parse_manifest("<manifest><unclosed></manifest>"),
            Err(Error::MalformedManifest { .. })
        ));
    }

    #[test]
    fn single_invoke() {
        let smali = ".class public Lcom/x/A;\n.method public run()V\n    \
            invoke-virtual {v0, v1, v2, v3, v4, v5}, Landroid/telephony/SmsManager;->sendTextMessage(Ljava/lang/String;Ljava/lang/String;Ljava/lang/String;Landroid/app/PendingIntent;Landroid/app/PendingIntent;)V\n\
            .end method\n";
        let m = parse_smali(smali, "t");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].method_id, "Lcom/x/A;->run()V");
        assert_eq!(
            m[0].invocations[0].as_str(),
            "Landroid/telephony/SmsManager;->sendTextMessage(Ljava/lang/String;Ljava/lang/String;Ljava/lang/String;Landroid/app/PendingIntent;Landroid/app/PendingIntent;)V"
        );
    }

    #[test]
    fn file_without_methods() {
        assert!(parse_smali(".class public Lcom/x/A;\n.super Ljava/lang/Object;\n", "t").is_empty());
    }

    #[test]
    fn truncated_method_keeps_invocations() {
        let smali = ".class public Lcom/x/A;\n.method static f()V\ninvoke-static {}, Ljava/lang/System;->gc()V\n";
        let m = parse_smali(smali, "t");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].invocations.len(), 1);
    }

    #[test]
    fn array_receivers_are_not_canonical() {
        let smali = ".class public Lcom/x/A;\n.method f()V\n\
            invoke-virtual {v0}, [Ljava/lang/Object;->clone()Ljava/lang/Object;\n.end method\n";
        assert!(parse_smali(smali, "t")[0].invocations.is_empty());
    }

    #[test]
    fn label_file_comments_and_blanks() {
        let l = parse_labels("# header\napp1\tFamA\n\napp2\tFamB # trailing\nbroken line\n");
        assert_eq!(l.len(), 2);
        assert_eq!(l["app2"], "FamB");
    }

    #[test]
    fn api_grammar_accepts_constructors() {
        assert!(ApiId::parse("Ljava/lang/Object;-><init>()V").is_some());
        assert!(ApiId::parse("Lfoo;->bar").is_none());
    }
}
