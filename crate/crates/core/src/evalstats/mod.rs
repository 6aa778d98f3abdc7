//! Scoring against ground truth and the study statistics: confusion
//! metrics, paired t-test, Cohen's d, power and sample size, SUS and
//! inverse NASA-TLX.

pub mod dist;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Finding;
use crate::query::{Condition, ReviewSession, Verdict};
use crate::synthgen::TruthFile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("differences have zero variance; effect is undefined")]
    ZeroVariance,
    #[error("{0}")]
    OutOfRange(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("power {power} is not reachable below n = {limit}")]
    Unreachable { power: f64, limit: usize },
    #[error("decision on {0} has no ground truth")]
    UnknownFinding(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Fractions in [0, 1]. `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1_score: Option<f64>,
    pub error_rate: f64,
    /// False positives as a share of all classifications.
    pub false_positive_share: f64,
}

pub fn confusion_metrics(cm: &ConfusionMatrix) -> Result<Metrics, StatsError> {
    let total = cm.total();
    if total == 0 {
        return Err(StatsError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1_score = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1_score,
        error_rate: 1.0 - accuracy,
        false_positive_share: cm.fp as f64 / total as f64,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Effect size of paired differences: mean / sample sd.
pub fn paired_cohens_d(differences: &[f64]) -> Result<f64, StatsError> {
    if differences.len() < 2 {
        return Err(StatsError::TooFew(differences.len()));
    }
    let sd = sample_sd(differences);
    if sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean(differences) / sd)
}

fn check_alpha(alpha: f64) -> Result<(), StatsError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(StatsError::OutOfRange(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// Power of the two-sided paired t-test with `n` pairs and effect size `d`.
pub fn power_paired_t(n: usize, d: f64, alpha: f64) -> Result<f64, StatsError> {
    if n < 2 {
        return Err(StatsError::TooFew(n));
    }
    check_alpha(alpha)?;
    let df = (n - 1) as f64;
    let ncp = d * (n as f64).sqrt();
    let crit = dist::t_quantile(1.0 - alpha / 2.0, df);
    Ok(1.0 - dist::nct_cdf(crit, df, ncp) + dist::nct_cdf(-crit, df, ncp))
}

const MAX_N: usize = 1_000_000;

/// Smallest n with `power_paired_t(n, d, alpha) >= power`.
pub fn required_n(d: f64, alpha: f64, power: f64) -> Result<usize, StatsError> {
    check_alpha(alpha)?;
    if !(power > 0.0 && power < 1.0) {
        return Err(StatsError::OutOfRange(format!("power {power} outside (0, 1)")));
    }
    if d == 0.0 && power > alpha {
        return Err(StatsError::Unreachable { power, limit: MAX_N });
    }
    // power grows with n: double to bracket, then bisect
    let mut hi = 2;
    while power_paired_t(hi, d, alpha)? < power {
        if hi >= MAX_N {
            return Err(StatsError::Unreachable { power, limit: MAX_N });
        }
        hi = (hi * 2).min(MAX_N);
    }
    let mut lo = hi / 2;
    if lo < 2 {
        return Ok(hi);
    }
    // invariant: power(lo) < target <= power(hi)
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if power_paired_t(mid, d, alpha)? >= power {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub df: f64,
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub t: f64,
    pub p_two_sided: f64,
}

/// Paired t-test on `after − before`.
pub fn paired_t_test(before: &[f64], after: &[f64]) -> Result<TTest, StatsError> {
    if before.len() != after.len() {
        return Err(StatsError::LengthMismatch(before.len(), after.len()));
    }
    let n = before.len();
    if n < 2 {
        return Err(StatsError::TooFew(n));
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - b).collect();
    let sd = sample_sd(&diffs);
    if sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let m = mean(&diffs);
    let df = (n - 1) as f64;
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTest {
        n,
        df,
        mean_difference: m,
        sd_difference: sd,
        t,
        p_two_sided: dist::t_two_sided_p(t, df),
    })
}

/// System Usability Scale from ten 1–5 ratings.
pub fn sus_score(items: &[u8]) -> Result<f64, StatsError> {
    if items.len() != 10 {
        return Err(StatsError::OutOfRange(format!("SUS needs 10 items, got {}", items.len())));
    }
    if let Some(bad) = items.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(StatsError::OutOfRange(format!("SUS rating {bad} outside 1-5")));
    }
    let sum: u32 = items
        .iter()
        .enumerate()
        .map(|(i, &r)| if i % 2 == 0 { r as u32 - 1 } else { 5 - r as u32 })
        .sum();
    Ok(sum as f64 * 2.5)
}

/// 100 minus the unweighted mean of the six NASA-TLX ratings, so higher
/// means less load.
pub fn inverse_tlx(ratings: &[f64]) -> Result<f64, StatsError> {
    if ratings.len() != 6 {
        return Err(StatsError::OutOfRange(format!("TLX needs 6 ratings, got {}", ratings.len())));
    }
    if let Some(bad) = ratings.iter().find(|r| !(0.0..=100.0).contains(*r)) {
        return Err(StatsError::OutOfRange(format!("TLX rating {bad} outside 0-100")));
    }
    Ok(100.0 - mean(ratings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub injected: usize,
    pub detected: usize,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub eligible_points: usize,
    pub annotations: usize,
    pub findings: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Share of true-positive findings labelled with an injected category.
    pub category_fidelity: Option<f64>,
    pub per_category: BTreeMap<u8, CategoryEval>,
}

fn cites(f: &Finding, patient_id: &str, record_id: &str) -> bool {
    f.patient_id == patient_id && f.record_ids.iter().any(|r| r == record_id)
}

/// Scores findings against a truth file. An annotation counts as detected
/// when any finding cites its record; a finding citing no annotated record
/// is a false positive; the rest of the eligible points are true negatives.
pub fn evaluate_detection(findings: &[Finding], truth: &TruthFile) -> Result<DetectionEval, StatsError> {
    let mut per_category: BTreeMap<u8, CategoryEval> = BTreeMap::new();
    let mut tp = 0u64;
    for a in &truth.annotations {
        let detected = findings.iter().any(|f| cites(f, &a.patient_id, &a.record_id));
        let e = per_category.entry(a.category.number()).or_insert(CategoryEval {
            injected: 0,
            detected: 0,
            recall: None,
        });
        e.injected += 1;
        if detected {
            e.detected += 1;
            tp += 1;
        }
    }
    for e in per_category.values_mut() {
        e.recall = Some(e.detected as f64 / e.injected as f64);
    }
    let mut true_findings = 0usize;
    let mut labelled = 0usize;
    for f in findings {
        let matched: Vec<_> = truth
            .annotations
            .iter()
            .filter(|a| cites(f, &a.patient_id, &a.record_id))
            .collect();
        if !matched.is_empty() {
            true_findings += 1;
            if matched.iter().any(|a| f.category == Some(a.category)) {
                labelled += 1;
            }
        }
    }
    let fp = (findings.len() - true_findings) as u64;
    let n_truth = truth.annotations.len() as u64;
    let confusion = ConfusionMatrix {
        tp,
        fp,
        fn_: n_truth - tp,
        tn: (truth.eligible_points as u64).saturating_sub(n_truth + fp),
    };
    Ok(DetectionEval {
        eligible_points: truth.eligible_points,
        annotations: truth.annotations.len(),
        findings: findings.len(),
        metrics: confusion_metrics(&confusion)?,
        confusion,
        category_fidelity: (true_findings > 0).then(|| labelled as f64 / true_findings as f64),
        per_category,
    })
}

/// Whether each finding is a real discrepancy according to `truth`.
pub fn finding_truth(findings: &[Finding], truth: &TruthFile) -> BTreeMap<String, bool> {
    findings
        .iter()
        .map(|f| {
            let real = truth.annotations.iter().any(|a| cites(f, &a.patient_id, &a.record_id));
            (f.finding_id.clone(), real)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub reviewer_id: String,
    pub condition: Condition,
    pub decisions: usize,
    /// Correct decisions in the session.
    pub throughput: u64,
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub duration_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerComparison {
    pub reviewer_id: String,
    /// Mean throughput over the reviewer's sessions in each condition.
    pub baseline: f64,
    pub assisted: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub sessions: Vec<SessionScore>,
    pub reviewers: Vec<ReviewerComparison>,
    pub baseline_mean: Option<f64>,
    pub baseline_median: Option<f64>,
    pub assisted_mean: Option<f64>,
    pub assisted_median: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub median_ratio: Option<f64>,
    pub t_test: Option<TTest>,
    pub cohens_d: Option<f64>,
    pub confusion_by_condition: BTreeMap<String, ConfusionMatrix>,
}

fn condition_key(c: Condition) -> &'static str {
    match c {
        Condition::Baseline => "baseline",
        Condition::Assisted => "assisted",
    }
}

pub fn score_session(session: &ReviewSession, truth: &BTreeMap<String, bool>) -> Result<SessionScore, StatsError> {
    let mut cm = ConfusionMatrix::default();
    for d in &session.decisions {
        let real = *truth
            .get(&d.finding_id)
            .ok_or_else(|| StatsError::UnknownFinding(d.finding_id.clone()))?;
        match (d.verdict, real) {
            (Verdict::Confirm, true) => cm.tp += 1,
            (Verdict::Confirm, false) => cm.fp += 1,
            (Verdict::Dismiss, true) => cm.fn_ += 1,
            (Verdict::Dismiss, false) => cm.tn += 1,
        }
    }
    Ok(SessionScore {
        session_id: session.session_id.clone(),
        reviewer_id: session.reviewer_id.clone(),
        condition: session.condition,
        decisions: session.decisions.len(),
        throughput: cm.tp + cm.tn,
        accuracy: confusion_metrics(&cm).ok().map(|m| m.accuracy),
        confusion: cm,
        duration_minutes: session.duration_minutes(),
    })
}

/// Scores every session and pairs reviewers across the two conditions.
pub fn score_sessions(sessions: &[ReviewSession], truth: &BTreeMap<String, bool>) -> Result<SessionReport, StatsError> {
    let scores = sessions
        .iter()
        .map(|s| score_session(s, truth))
        .collect::<Result<Vec<_>, _>>()?;
    let mut by_reviewer: BTreeMap<&str, HashMap<Condition, Vec<f64>>> = BTreeMap::new();
    let mut confusion_by_condition: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    for s in &scores {
        by_reviewer
            .entry(&s.reviewer_id)
            .or_default()
            .entry(s.condition)
            .or_default()
            .push(s.throughput as f64);
        confusion_by_condition
            .entry(condition_key(s.condition).to_string())
            .or_default()
            .add(&s.confusion);
    }
    let reviewers: Vec<ReviewerComparison> = by_reviewer
        .into_iter()
        .filter_map(|(r, m)| {
            let baseline = mean(m.get(&Condition::Baseline)?);
            let assisted = mean(m.get(&Condition::Assisted)?);
            Some(ReviewerComparison {
                reviewer_id: r.to_string(),
                baseline,
                assisted,
                ratio: (baseline > 0.0).then(|| assisted / baseline),
            })
        })
        .collect();
    let base: Vec<f64> = reviewers.iter().map(|r| r.baseline).collect();
    let assist: Vec<f64> = reviewers.iter().map(|r| r.assisted).collect();
    let ratios: Vec<f64> = reviewers.iter().filter_map(|r| r.ratio).collect();
    let diffs: Vec<f64> = assist.iter().zip(&base).map(|(a, b)| a - b).collect();
    let opt_mean = |xs: &[f64]| (!xs.is_empty()).then(|| mean(xs));
    Ok(SessionReport {
        baseline_mean: opt_mean(&base),
        baseline_median: median(&base),
        assisted_mean: opt_mean(&assist),
        assisted_median: median(&assist),
        mean_ratio: opt_mean(&ratios),
        median_ratio: median(&ratios),
        t_test: paired_t_test(&base, &assist).ok(),
        cohens_d: paired_cohens_d(&diffs).ok(),
        sessions: scores,
        reviewers,
        confusion_by_condition,
    })
}
