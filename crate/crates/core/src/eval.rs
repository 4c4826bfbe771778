//! Stratified k-fold cross-validation and classification metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Stratified assignment: each family's rows are shuffled and dealt round
/// robin, starting where the previous family stopped so fold sizes stay
/// balanced overall.
pub fn make_folds(labels: &[usize], families: &[String], n_folds: usize, seed_value: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut by_family: Vec<Vec<usize>> = vec![Vec::new(); families.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_family[l].push(i);
    }
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0usize;
    for (f, rows) in by_family.iter_mut().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < n_folds {
            return Err(Error::FamilyTooSmall {
                family: families[f].clone(),
                count: rows.len(),
                folds: n_folds,
            });
        }
        rows.shuffle(&mut seed::rng(seed::derive_index(seed_value, "folds/family", f as u64)));
        for &r in rows.iter() {
            fold_of[r] = next % n_folds;
            next += 1;
        }
    }
    Ok(FoldPlan {
        n_folds,
        fold_of,
        seed: seed_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub family: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Precision or recall had an empty denominator and was set to 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of macro precision and macro recall.
    pub macro_f1: f64,
    /// Unweighted mean of per-family F1.
    pub mean_family_f1: f64,
    pub per_family: Vec<FamilyStats>,
    /// Rows are true families, columns predicted.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn compute_metrics(truth: &[usize], predicted: &[usize], families: &[String]) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch(truth.len(), predicted.len()));
    }
    let n = families.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    Ok(metrics_from_confusion(confusion, families))
}

pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>, families: &[String]) -> EvalReport {
    let n = families.len();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let per_family: Vec<FamilyStats> = (0..n)
        .map(|f| {
            let tp = confusion[f][f];
            let support: u64 = confusion[f].iter().sum();
            let predicted: u64 = (0..n).map(|t| confusion[t][f]).sum();
            let (precision, zp) = ratio(tp, predicted);
            let (recall, zr) = ratio(tp, support);
            FamilyStats {
                family: families[f].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
                zero_division: zp || zr,
            }
        })
        .collect();
    let mean = |g: fn(&FamilyStats) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_family.iter().map(g).sum::<f64>() / n as f64
        }
    };
    let macro_precision = mean(|s| s.precision);
    let macro_recall = mean(|s| s.recall);
    EvalReport {
        accuracy: ratio(trace, total).0,
        macro_precision,
        macro_recall,
        macro_f1: harmonic(macro_precision, macro_recall),
        mean_family_f1: mean(|s| s.f1),
        per_family,
        confusion,
    }
}

impl EvalReport {
    pub fn families(&self) -> Vec<String> {
        self.per_family.iter().map(|s| s.family.clone()).collect()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn confusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.families());
        w.write_record(&header)?;
        for (s, row) in self.per_family.iter().zip(&self.confusion) {
            let mut rec = vec![s.family.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        into_string(w)
    }

    /// Per-family accuracy (recall) for bar plots.
    pub fn family_accuracy_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["family", "support", "accuracy"])?;
        for s in &self.per_family {
            w.write_record([s.family.clone(), s.support.to_string(), format!("{:.6}", s.recall)])?;
        }
        into_string(w)
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean of the fold metrics; confusion and supports are summed.
pub fn average_reports(reports: &[EvalReport]) -> EvalReport {
    let Some(first) = reports.first() else {
        return metrics_from_confusion(Vec::new(), &[]);
    };
    let n = first.per_family.len();
    let k = reports.len() as f64;
    let avg = |g: &dyn Fn(&EvalReport) -> f64| reports.iter().map(g).sum::<f64>() / k;
    let mut confusion = vec![vec![0u64; n]; n];
    for r in reports {
        for i in 0..n {
            for j in 0..n {
                confusion[i][j] += r.confusion[i][j];
            }
        }
    }
    let per_family = (0..n)
        .map(|f| FamilyStats {
            family: first.per_family[f].family.clone(),
            precision: avg(&|r| r.per_family[f].precision),
            recall: avg(&|r| r.per_family[f].recall),
            f1: avg(&|r| r.per_family[f].f1),
            support: reports.iter().map(|r| r.per_family[f].support).sum(),
            zero_division: reports.iter().any(|r| r.per_family[f].zero_division),
        })
        .collect();
    EvalReport {
        accuracy: avg(&|r| r.accuracy),
        macro_precision: avg(&|r| r.macro_precision),
        macro_recall: avg(&|r| r.macro_recall),
        macro_f1: avg(&|r| r.macro_f1),
        mean_family_f1: avg(&|r| r.mean_family_f1),
        per_family,
        confusion,
    }
}

/// What one fold of a pipeline hands back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutput {
    /// Predicted family index per test row, in the order given.
    pub predictions: Vec<usize>,
    /// Feature tokens the fold's model ended up using.
    pub selected_tokens: Vec<String>,
}

pub trait FoldPipeline {
    fn run_fold(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<FoldOutput>;
}

impl<F> FoldPipeline for F
where
    F: Fn(usize, &[usize], &[usize]) -> Result<FoldOutput>,
{
    fn run_fold(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<FoldOutput> {
        self(fold, train, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub averaged: EvalReport,
    /// Metrics over all out-of-fold predictions at once.
    pub pooled: EvalReport,
    pub selected_tokens: Vec<Vec<String>>,
}

impl CvReport {
    /// Plain-text `model ACC F1` table.
    pub fn table(&self, model: &str) -> String {
        let mut out = String::new();
        let width = model.len().max(5);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "Model", "ACC", "F1");
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}%  {:>7.2}%",
            model,
            100.0 * self.averaged.accuracy,
            100.0 * self.averaged.macro_f1
        );
        out
    }
}

pub fn cross_validate<P: FoldPipeline + ?Sized>(
    labels: &[usize],
    families: &[String],
    plan: &FoldPlan,
    pipeline: &P,
) -> Result<CvReport> {
    if plan.fold_of.len() != labels.len() {
        return Err(Error::LengthMismatch(plan.fold_of.len(), labels.len()));
    }
    let mut folds = Vec::with_capacity(plan.n_folds);
    let mut selected_tokens = Vec::with_capacity(plan.n_folds);
    let mut all_pred = vec![usize::MAX; labels.len()];
    for fold in 0..plan.n_folds {
        let (train, test) = (plan.train_rows(fold), plan.test_rows(fold));
        let out = pipeline.run_fold(fold, &train, &test)?;
        if out.predictions.len() != test.len() {
            return Err(Error::LengthMismatch(out.predictions.len(), test.len()));
        }
        let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        folds.push(compute_metrics(&truth, &out.predictions, families)?);
        for (&i, &p) in test.iter().zip(&out.predictions) {
            all_pred[i] = p;
        }
        selected_tokens.push(out.selected_tokens);
    }
    let pooled = compute_metrics(labels, &all_pred, families)?;
    Ok(CvReport {
        averaged: average_reports(&folds),
        folds,
        pooled,
        selected_tokens,
    })
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let choose2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sa: f64 = ra.values().map(|&n| choose2(n)).sum();
    let sb: f64 = rb.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fams(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn exact_stratification() {
        let labels: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let plan = make_folds(&labels, &fams(2), 5, 7).unwrap();
        for f in 0..5 {
            let rows = plan.test_rows(f);
            assert_eq!(rows.len(), 2);
            assert_eq!(rows.iter().filter(|&&r| labels[r] == 0).count(), 1);
        }
        assert_eq!(plan, make_folds(&labels, &fams(2), 5, 7).unwrap());
    }

    #[test]
    fn small_family_is_rejected() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1];
        match make_folds(&labels, &fams(2), 5, 0) {
            Err(Error::FamilyTooSmall { family, count, .. }) => assert_eq!((family.as_str(), count), ("f1", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 1];
        let r = compute_metrics(&t, &t, &fams(3)).unwrap();
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn zero_division_is_flagged() {
        let r = compute_metrics(&[0, 0], &[0, 0], &fams(2)).unwrap();
        assert!(r.per_family[1].zero_division);
        assert_eq!(r.per_family[1].precision, 0.0);
        assert_eq!(r.macro_recall, 0.5);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(compute_metrics(&[0], &[], &fams(1)), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn oracle_pipeline_scores_one() {
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let plan = make_folds(&labels, &fams(4), 5, 1).unwrap();
        let oracle = |_f: usize, _tr: &[usize], te: &[usize]| -> Result<FoldOutput> {
            Ok(FoldOutput {
                predictions: te.iter().map(|&i| labels[i]).collect(),
                selected_tokens: vec![],
            })
        };
        let cv = cross_validate(&labels, &fams(4), &plan, &oracle).unwrap();
        assert_eq!(cv.averaged.accuracy, 1.0);
        assert_eq!(cv.pooled.total(), 20);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn exports() {
        let r = compute_metrics(&[0, 1], &[0, 0], &fams(2)).unwrap();
        assert_eq!(r.confusion_csv().unwrap(), "true\\predicted,f0,f1\nf0,1,0\nf1,1,0\n");
        assert_eq!(
            r.family_accuracy_csv().unwrap(),
            "family,support,accuracy\nf0,1,1.000000\nf1,1,0.000000\n"
        );
    }
}
