//! Verification metrics and the trial/score text formats.
//!
//! A trial is accepted when its score is strictly above the threshold.
//! Sweeping the threshold across the distinct scores gives the ROC vertices
//! `(p_miss, p_fa)`; equal scores move together. The EER is read off the
//! first segment between adjacent vertices that reaches `p_miss >= p_fa`,
//! by linear interpolation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl DcfParams {
    pub fn new(p_target: f64) -> Self {
        Self { p_target, c_miss: 1.0, c_fa: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }
}

/// ROC vertex after rejecting every score `<= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// All ROC vertices from accept-all (threshold `-inf`) to reject-all.
pub fn roc_points(scores: &[f64], targets: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != targets.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), targets.len())));
    }
    if scores.is_empty() {
        return Err(Error::NoTrials);
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::DegenerateTrials(format!("non-finite score {s}")));
    }
    let n_tar = targets.iter().filter(|&&t| t).count();
    let n_non = targets.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::DegenerateTrials(format!("{n_tar} targets and {n_non} nontargets")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = vec![RocPoint { threshold: f64::NEG_INFINITY, p_miss: 0.0, p_fa: 1.0 }];
    let (mut miss, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if targets[order[i]] {
                miss += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            p_miss: miss as f64 / n_tar as f64,
            p_fa: (n_non - rejected_non) as f64 / n_non as f64,
        });
    }
    Ok(points)
}

/// Equal error rate as a fraction.
pub fn compute_eer(scores: &[f64], targets: &[bool]) -> Result<f64> {
    let pts = roc_points(scores, targets)?;
    let k = pts.iter().position(|p| p.p_miss >= p.p_fa).expect("reject-all vertex has p_fa = 0");
    let (a, b) = (pts[k - 1], pts[k]);
    let gap = a.p_fa - a.p_miss;
    let t = gap / ((b.p_miss - a.p_miss) - (b.p_fa - a.p_fa));
    Ok(a.p_miss + t * (b.p_miss - a.p_miss))
}

/// Minimum detection cost over all thresholds, normalized by the cost of
/// the better trivial system.
pub fn compute_min_dcf(scores: &[f64], targets: &[bool], p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let pts = roc_points(scores, targets)?;
    let cost = |pt: &RocPoint| p.c_miss * pt.p_miss * p.p_target + p.c_fa * pt.p_fa * (1.0 - p.p_target);
    let best = pts.iter().map(cost).fold(f64::INFINITY, f64::min);
    Ok(best / (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub eer: f64,
    /// `(p_target, normalized minDCF)` pairs.
    pub min_dcf: Vec<(f64, f64)>,
}

impl MetricSummary {
    pub fn compute(scores: &[f64], targets: &[bool], p_targets: &[f64]) -> Result<Self> {
        let eer = compute_eer(scores, targets)?;
        let min_dcf = p_targets
            .iter()
            .map(|&pt| Ok((pt, compute_min_dcf(scores, targets, &DcfParams::new(pt))?)))
            .collect::<Result<_>>()?;
        let n_target = targets.iter().filter(|&&t| t).count();
        Ok(Self { n_target, n_nontarget: targets.len() - n_target, eer, min_dcf })
    }

    /// `(metric name, value)` records.
    pub fn records(&self) -> Vec<(String, f64)> {
        let mut out = vec![("eer".to_string(), self.eer)];
        for (pt, v) in &self.min_dcf {
            out.push((format!("min_dcf@{pt:e}"), *v));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trials   {} target / {} nontarget", self.n_target, self.n_nontarget);
        let _ = writeln!(s, "EER      {:.3}%", 100.0 * self.eer);
        for (pt, v) in &self.min_dcf {
            let _ = writeln!(s, "minDCF   {v:.4} (p_target {pt:e})");
        }
        s
    }
}

fn parse_label(tok: &str, line: usize) -> Result<bool> {
    match tok {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("expected target|nontarget, got {tok:?}") }),
    }
}

fn label(t: bool) -> &'static str {
    if t {
        "target"
    } else {
        "nontarget"
    }
}

/// Parses `enroll test target|nontarget` lines; blank lines are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            [e, t, l] => out.push(Trial { enroll: e.to_string(), test: t.to_string(), target: parse_label(l, i + 1)? }),
            _ => return Err(Error::Parse { line: i + 1, msg: format!("expected 3 fields, got {}", toks.len()) }),
        }
    }
    if out.is_empty() {
        return Err(Error::NoTrials);
    }
    Ok(out)
}

pub fn write_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", t.enroll, t.test, label(t.target));
    }
    s
}

/// Trial lines with a fourth score column. Scores use the shortest decimal
/// form that parses back to the same `f64`.
pub fn write_scores(scores: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for st in scores {
        let t = &st.trial;
        let _ = writeln!(s, "{} {} {} {}", t.enroll, t.test, label(t.target), st.score);
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            [e, t, l, v] => {
                let score: f64 = v.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad score {v:?}") })?;
                if !score.is_finite() {
                    return Err(Error::Parse { line: i + 1, msg: "score is not finite".into() });
                }
                out.push(ScoredTrial {
                    trial: Trial { enroll: e.to_string(), test: t.to_string(), target: parse_label(l, i + 1)? },
                    score,
                });
            }
            _ => return Err(Error::Parse { line: i + 1, msg: format!("expected 4 fields, got {}", toks.len()) }),
        }
    }
    if out.is_empty() {
        return Err(Error::NoTrials);
    }
    Ok(out)
}

/// Splits scored trials into the parallel arrays the metrics take.
pub fn split_scored(scores: &[ScoredTrial]) -> (Vec<f64>, Vec<bool>) {
    scores.iter().map(|s| (s.score, s.trial.target)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(nt: usize, nn: usize) -> Vec<bool> {
        [vec![true; nt], vec![false; nn]].concat()
    }

    /// Counts errors at every candidate threshold directly, then walks the
    /// resulting curve in threshold order.
    fn oracle_curve(scores: &[f64], targets: &[bool]) -> Vec<(f64, f64)> {
        let mut th: Vec<f64> = scores.to_vec();
        th.sort_by(f64::total_cmp);
        th.dedup();
        th.insert(0, f64::NEG_INFINITY);
        let nt = targets.iter().filter(|&&t| t).count() as f64;
        let nn = targets.len() as f64 - nt;
        th.iter()
            .map(|&h| {
                let miss = scores.iter().zip(targets).filter(|(s, &t)| t && **s <= h).count() as f64;
                let fa = scores.iter().zip(targets).filter(|(s, &t)| !t && **s > h).count() as f64;
                (miss / nt, fa / nn)
            })
            .collect()
    }

    fn oracle_eer(scores: &[f64], targets: &[bool]) -> f64 {
        let c = oracle_curve(scores, targets);
        for w in c.windows(2) {
            let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
            if d0 < 0.0 && d1 >= 0.0 {
                let t = -d0 / (d1 - d0);
                return w[0].0 + t * (w[1].0 - w[0].0);
            }
        }
        unreachable!()
    }

    fn oracle_dcf(scores: &[f64], targets: &[bool], p: f64) -> f64 {
        oracle_curve(scores, targets)
            .iter()
            .map(|(m, f)| m * p + f * (1.0 - p))
            .fold(f64::INFINITY, f64::min)
            / p.min(1.0 - p)
    }

    #[test]
    fn perfect_separation() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = labels(2, 2);
        assert_eq!(compute_eer(&s, &l).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&s, &l, &DcfParams::new(0.01)).unwrap(), 0.0);
    }

    #[test]
    fn identical_distributions_give_chance() {
        let s = [0.3, 0.5, 0.9, 0.3, 0.5, 0.9];
        assert!((compute_eer(&s, &labels(3, 3)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_equal_scores_cost_one() {
        let s = [0.4; 7];
        let l = labels(3, 4);
        for p in [1e-2, 1e-3, 0.5] {
            assert!((compute_min_dcf(&s, &l, &DcfParams::new(p)).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn small_hand_set_matches_oracle() {
        let s = [0.7, 0.5, 0.4, 0.6, 0.3, 0.2];
        let l = labels(3, 3);
        let e = compute_eer(&s, &l).unwrap();
        assert!((e - oracle_eer(&s, &l)).abs() < 1e-15);
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(compute_eer(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateTrials(_))));
        assert!(matches!(compute_eer(&[], &[]), Err(Error::NoTrials)));
        assert!(compute_min_dcf(&[0.1, 0.2], &[true, false], &DcfParams::new(0.0)).is_err());
    }

    #[test]
    fn random_sets_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..=50);
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            l[0] = true;
            l[1] = false;
            // Coarse grid to force ties.
            let s: Vec<f64> = l.iter().map(|&t| (rng.random_range(0..20) as f64 + if t { 4.0 } else { 0.0 }) / 7.0).collect();
            assert!((compute_eer(&s, &l).unwrap() - oracle_eer(&s, &l)).abs() < 1e-12);
            for p in [1e-2, 1e-3] {
                assert!((compute_min_dcf(&s, &l, &DcfParams::new(p)).unwrap() - oracle_dcf(&s, &l, p)).abs() < 1e-12);
            }
        }
    }

    fn scored(seed_scores: Vec<(f64, bool)>) -> (Vec<f64>, Vec<bool>) {
        let mut v = seed_scores;
        v.push((0.0, true));
        v.push((0.0, false));
        v.into_iter().unzip()
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 0..200)) {
            let (s, l) = scored(raw);
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(compute_eer(&s, &l).unwrap(), compute_eer(&t, &l).unwrap());
            for p in [1e-2, 1e-3] {
                let d = DcfParams::new(p);
                prop_assert_eq!(compute_min_dcf(&s, &l, &d).unwrap(), compute_min_dcf(&t, &l, &d).unwrap());
            }
        }

        #[test]
        fn bounds_hold(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 0..200)) {
            let (s, l) = scored(raw);
            let e = compute_eer(&s, &l).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            for p in [1e-2, 1e-3] {
                let d = compute_min_dcf(&s, &l, &DcfParams::new(p)).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
            }
        }

        #[test]
        fn negating_scores_and_swapping_classes_keeps_eer(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 0..200)) {
            let (s, l) = scored(raw);
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let swapped: Vec<bool> = l.iter().map(|t| !t).collect();
            let (a, b) = (compute_eer(&s, &l).unwrap(), compute_eer(&neg, &swapped).unwrap());
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }

        #[test]
        fn dominating_targets_stay_below_chance(raw in prop::collection::vec(0.0f64..1.0, 1..100)) {
            // Each target score is a nontarget score shifted up.
            let s: Vec<f64> = raw.iter().map(|x| x + 0.25).chain(raw.iter().copied()).collect();
            let l = labels(raw.len(), raw.len());
            prop_assert!(compute_eer(&s, &l).unwrap() <= 0.5 + 1e-12);
        }

        #[test]
        fn dcf_at_eer_threshold_bounds_min(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 0..100)) {
            let (s, l) = scored(raw);
            let pts = roc_points(&s, &l).unwrap();
            let k = pts.iter().position(|p| p.p_miss >= p.p_fa).unwrap();
            let p = 1e-2;
            let at_eer = (pts[k].p_miss * p + pts[k].p_fa * (1.0 - p)) / p;
            prop_assert!(compute_min_dcf(&s, &l, &DcfParams::new(p)).unwrap() <= at_eer + 1e-12);
        }
    }

    #[test]
    fn trial_parsing() {
        let t = parse_trials("e1 t1 target\n").unwrap();
        assert_eq!(t, vec![Trial { enroll: "e1".into(), test: "t1".into(), target: true }]);
        assert!(matches!(parse_trials(""), Err(Error::NoTrials)));
        assert!(matches!(parse_trials("a b target\na b maybe\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_trials("a b\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn score_file_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<ScoredTrial> = (0..1000)
            .map(|i| ScoredTrial {
                trial: Trial { enroll: format!("spk{}_u{}", i % 17, i), test: format!("x{}", rng.random::<u32>()), target: rng.random() },
                score: rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-20..5)),
            })
            .collect();
        let text = write_scores(&scores);
        let back = parse_scores(&text).unwrap();
        assert_eq!(back, scores);
        assert_eq!(write_scores(&back), text);
        let trials: Vec<Trial> = scores.iter().map(|s| s.trial.clone()).collect();
        assert_eq!(parse_trials(&write_trials(&trials)).unwrap(), trials);
    }

    #[test]
    fn summary_table_formats_percent() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let m = MetricSummary::compute(&s, &labels(2, 2), &[1e-2, 1e-3]).unwrap();
        assert!(m.table().contains("EER      0.000%"));
        assert_eq!(m.records()[0], ("eer".to_string(), 0.0));
        assert_eq!(m.records().len(), 3);
    }
}
