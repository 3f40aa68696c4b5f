//! Trial scoring, EER, and minDCF.
//!
//! ROC convention: a trial is accepted when its score is `>= threshold`, so
//! `P_miss` is the fraction of targets scoring strictly below the threshold.
//! EER interpolates linearly between the two bracketing ROC points.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// One verification trial: an (enrollment, test) pair with a truth label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Labeled trials, optionally with attached scores.
#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub scores: Option<Vec<f64>>,
}

/// Detection-cost parameters; defaults follow `p_target` 0.05 with unit costs.
#[derive(Clone, Copy, Debug)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

/// Cosine similarity of two embeddings.
pub fn cosine_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!(
            "cosine_score length mismatch: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let n1: f64 = e1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = e2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Numeric("cosine_score of zero-norm vector".into()));
    }
    Ok(dot / (n1 * n2))
}

fn check_two_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let n_target = labels.iter().filter(|&&l| l).count();
    let n_nontarget = labels.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Input(format!(
            "both classes required: {n_target} targets, {n_nontarget} nontargets"
        )));
    }
    Ok((n_target, n_nontarget))
}

/// Candidate thresholds: below every score, each distinct score, above every
/// score. At each, `(P_miss, P_fa)` under the accept-on-`>=` convention.
fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_t, n_n) = check_two_classes(labels)?;
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut targets: Vec<f64> = Vec::with_capacity(n_t);
    let mut nontargets: Vec<f64> = Vec::with_capacity(n_n);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push((0.0, 1.0)); // accept everything
    for &th in &thresholds {
        let miss = targets.partition_point(|&s| s < th) as f64 / n_t as f64;
        let fa = (n_n - nontargets.partition_point(|&s| s < th)) as f64 / n_n as f64;
        points.push((miss, fa));
    }
    points.push((1.0, 0.0)); // reject everything
    Ok(points)
}

/// Equal error rate with linear interpolation between bracketing ROC points.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = roc_points(scores, labels)?;
    for w in points.windows(2) {
        let (m1, f1) = w[0];
        let (m2, f2) = w[1];
        let d1 = f1 - m1;
        let d2 = f2 - m2;
        if d1 >= 0.0 && d2 <= 0.0 {
            if d1 == d2 {
                return Ok(m1);
            }
            let t = d1 / (d1 - d2);
            return Ok(m1 + t * (m2 - m1));
        }
    }
    // miss - fa is monotone from -1 to 1 over the sweep; a crossing always exists
    unreachable!("no EER crossing found")
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<f64> {
    let points = roc_points(scores, labels)?;
    let denom = (params.p_target * params.c_miss).min((1.0 - params.p_target) * params.c_fa);
    if denom <= 0.0 {
        return Err(Error::Config("degenerate DCF parameters".into()));
    }
    let mut best = f64::INFINITY;
    for (miss, fa) in points {
        let cost = params.p_target * params.c_miss * miss
            + (1.0 - params.p_target) * params.c_fa * fa;
        best = best.min(cost / denom);
    }
    Ok(best)
}

/// Attach a cosine score to every trial via the embedding lookup.
pub fn score_trials<L>(trials: &TrialSet, lookup: L) -> Result<TrialSet>
where
    L: Fn(&str) -> Option<Vec<f64>>,
{
    let mut ids = BTreeSet::new();
    for t in &trials.trials {
        ids.insert(t.enroll.as_str());
        ids.insert(t.test.as_str());
    }
    for id in ids {
        if lookup(id).is_none() {
            return Err(Error::Lookup(format!("no embedding for utterance `{id}`")));
        }
    }
    let mut scores = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let e1 = lookup(&t.enroll).unwrap();
        let e2 = lookup(&t.test).unwrap();
        scores.push(cosine_score(&e1, &e2)?);
    }
    Ok(TrialSet { trials: trials.trials.clone(), scores: Some(scores) })
}

/// Trial list format: one `label enroll_id test_id` per line, label 1 = target.
pub fn parse_trial_list(text: &str) -> Result<TrialSet> {
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let (label, enroll, test) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(l), Some(e), Some(t), None) => (l, e, t),
            _ => {
                return Err(Error::Input(format!(
                    "trial list line {}: expected `label enroll test`",
                    lineno + 1
                )))
            }
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Input(format!(
                    "trial list line {}: bad label `{other}`",
                    lineno + 1
                )))
            }
        };
        trials.push(Trial { target, enroll: enroll.to_string(), test: test.to_string() });
    }
    Ok(TrialSet { trials, scores: None })
}

pub fn format_trial_list(trials: &TrialSet) -> String {
    let mut out = String::new();
    for t in &trials.trials {
        let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    out
}

/// Score file format: `enroll_id test_id score`, score to 6 decimals.
pub fn format_score_file(trials: &TrialSet) -> Result<String> {
    let scores = trials
        .scores
        .as_ref()
        .ok_or_else(|| Error::Contract("score file requested before scoring".into()))?;
    let mut out = String::new();
    for (t, s) in trials.trials.iter().zip(scores) {
        let _ = writeln!(out, "{} {} {:.6}", t.enroll, t.test, s);
    }
    Ok(out)
}

/// Parse a score file back to `(enroll, test, score)` rows.
pub fn parse_score_file(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(e), Some(t), Some(s), None) => {
                let score: f64 = s.parse().map_err(|_| {
                    Error::Input(format!("score file line {}: bad score `{s}`", lineno + 1))
                })?;
                out.push((e.to_string(), t.to_string(), score));
            }
            _ => {
                return Err(Error::Input(format!(
                    "score file line {}: expected `enroll test score`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_limits() {
        let v = vec![1.0, 2.0, 3.0];
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_score(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_score(&v, &w).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(matches!(
            cosine_score(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn eer_hand_examples() {
        // perfect separation
        let eer = compute_eer(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(eer, 0.0);
        // interleaved
        let eer = compute_eer(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12, "eer {eer}");
        // fully inverted
        let eer = compute_eer(&[0.1, 0.9], &[true, false]).unwrap();
        assert!((eer - 1.0).abs() < 1e-12, "eer {eer}");
    }

    #[test]
    fn min_dcf_extremes() {
        let p = DcfParams::default();
        let dcf = compute_min_dcf(&[0.9, 0.1], &[true, false], &p).unwrap();
        assert_eq!(dcf, 0.0);
        // degenerate all-same scores: best trivial system
        let dcf = compute_min_dcf(&[0.5, 0.5, 0.5], &[true, false, false], &p).unwrap();
        assert!((dcf - 1.0).abs() < 1e-12, "dcf {dcf}");
    }

    #[test]
    fn single_class_is_input_error() {
        assert!(matches!(
            compute_eer(&[0.5, 0.6], &[true, true]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            compute_min_dcf(&[0.5], &[false], &DcfParams::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn score_trials_symmetric_and_missing_id() {
        let trials = parse_trial_list("1 a b\n0 b a\n").unwrap();
        let lookup = |id: &str| match id {
            "a" => Some(vec![1.0, 2.0]),
            "b" => Some(vec![2.0, 1.0]),
            _ => None,
        };
        let scored = score_trials(&trials, lookup).unwrap();
        let s = scored.scores.as_ref().unwrap();
        assert!((s[0] - s[1]).abs() < 1e-12);

        let bad = parse_trial_list("1 a missing\n").unwrap();
        match score_trials(&bad, lookup) {
            Err(Error::Lookup(msg)) => assert!(msg.contains("missing")),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[test]
    fn score_file_roundtrip_at_six_decimals() {
        let trials = parse_trial_list("1 a b\n0 a c\n").unwrap();
        let scored = TrialSet {
            trials: trials.trials,
            scores: Some(vec![0.12345678, -0.9]),
        };
        let text = format_score_file(&scored).unwrap();
        let rows = parse_score_file(&text).unwrap();
        assert_eq!(rows[0].2, 0.123457);
        assert_eq!(rows[1].2, -0.9);
    }

    #[test]
    fn empty_trial_list_gives_empty_score_file() {
        let empty = TrialSet { trials: vec![], scores: Some(vec![]) };
        assert_eq!(format_score_file(&empty).unwrap(), "");
    }
}
