//! Detection metrics: EER, minimum normalized DCF and DET points.
//!
//! A trial is accepted when `score >= threshold`. Thresholds range over every
//! distinct score plus `+inf` (reject everything), so
//! `P_miss(t) = #{target < t} / N_target` and
//! `P_fa(t) = #{nontarget >= t} / N_nontarget`.

use std::path::Path;

use crate::codec;
use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub trial_id: String,
    pub score: f64,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Anonymous labelled scores.
    pub fn from_labeled(scores: &[f64], targets: &[bool]) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Shape {
                op: "ScoreSet::from_labeled",
                left: format!("{} scores", scores.len()),
                right: format!("{} labels", targets.len()),
            });
        }
        Ok(ScoreSet {
            records: scores
                .iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (&score, &t))| ScoreRecord {
                    trial_id: format!("trial{i}"),
                    score,
                    label: Some(Label::from_bool(t)),
                })
                .collect(),
        })
    }

    pub fn push(&mut self, trial_id: impl Into<String>, score: f64, label: Option<Label>) {
        self.records.push(ScoreRecord {
            trial_id: trial_id.into(),
            score,
            label,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits into target and nontarget score lists, rejecting unlabelled or
    /// non-finite records and sets lacking either class.
    pub fn split_by_label(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if !r.score.is_finite() {
                return Err(Error::NonFinite {
                    context: "score set",
                    index: i,
                });
            }
            match r.label {
                Some(Label::Target) => tar.push(r.score),
                Some(Label::Nontarget) => non.push(r.score),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "trial {} has no label; metrics need a labelled score file",
                        r.trial_id
                    )))
                }
            }
        }
        if tar.is_empty() || non.is_empty() {
            return Err(Error::Degenerate(format!(
                "need at least one target and one nontarget, got {} and {}",
                tar.len(),
                non.len()
            )));
        }
        Ok((tar, non))
    }
}

/// Detection cost parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl OperatingPoint {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        if !(p_target > 0.0 && p_target < 1.0) || !(c_miss > 0.0) || !(c_fa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "operating point needs 0 < p_target < 1 and positive costs, got ({p_target}, {c_miss}, {c_fa})"
            )));
        }
        Ok(OperatingPoint {
            p_target,
            c_miss,
            c_fa,
        })
    }

    /// Unit costs at the given prior.
    pub fn with_prior(p_target: f64) -> Result<Self> {
        Self::new(p_target, 1.0, 1.0)
    }

    fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Normalized detection cost of the given error rates.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target))
            / self.normalizer()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfResult {
    pub min_dcf: f64,
    pub threshold: f64,
}

/// Error rates at every distinct score and at `+inf`, in ascending threshold order.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (tar, non) = scores.split_by_label()?;
    let mut all: Vec<(f64, bool)> = tar
        .iter()
        .map(|&s| (s, true))
        .chain(non.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(DetPoint {
            threshold: t,
            p_fa: (non.len() - non_below) as f64 / nn,
            p_miss: tar_below as f64 / nt,
        });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two thresholds where
/// the miss and false-alarm curves cross.
pub fn eer(scores: &ScoreSet) -> Result<EerResult> {
    let pts = det_points(scores)?;
    // p_miss - p_fa rises from -1 at the lowest threshold to +1 at +inf
    let i = pts
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("last DET point has p_miss = 1 >= p_fa = 0");
    let cur = pts[i];
    if cur.p_miss == cur.p_fa || i == 0 {
        return Ok(EerResult {
            eer: cur.p_miss,
            threshold: cur.threshold,
        });
    }
    let prev = pts[i - 1];
    let gap_prev = prev.p_fa - prev.p_miss;
    let gap_cur = cur.p_miss - cur.p_fa;
    let alpha = gap_prev / (gap_prev + gap_cur);
    let threshold = if cur.threshold.is_finite() {
        prev.threshold + alpha * (cur.threshold - prev.threshold)
    } else {
        prev.threshold
    };
    Ok(EerResult {
        eer: prev.p_miss + alpha * (cur.p_miss - prev.p_miss),
        threshold,
    })
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(scores: &ScoreSet, op: &OperatingPoint) -> Result<DcfResult> {
    let pts = det_points(scores)?;
    let mut best = DcfResult {
        min_dcf: f64::INFINITY,
        threshold: f64::INFINITY,
    };
    for p in &pts {
        let c = op.normalized_cost(p.p_miss, p.p_fa);
        if c < best.min_dcf {
            best = DcfResult {
                min_dcf: c,
                threshold: p.threshold,
            };
        }
    }
    Ok(best)
}

/// `trial-id<TAB>score[<TAB>target|nontarget]` per line.
pub fn format_scores(scores: &ScoreSet) -> Result<String> {
    let mut out = String::new();
    for r in &scores.records {
        if r.trial_id.is_empty() || r.trial_id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "unencodable trial id {:?}",
                r.trial_id
            )));
        }
        out.push_str(&r.trial_id);
        out.push('\t');
        // shortest representation that parses back to the same f64
        out.push_str(&format!("{:?}", r.score));
        if let Some(l) = r.label {
            out.push('\t');
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let mut set = ScoreSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
            return Err(err(format!(
                "expected trial-id, score and optional label, got {line:?}"
            )));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad score {:?}", fields[1])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        let label = match fields.get(2) {
            Some(l) => Some(l.parse::<Label>().map_err(err)?),
            None => None,
        };
        set.push(fields[0], score, label);
    }
    Ok(set)
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let bytes = codec::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        line: 0,
        message: format!("{} is not UTF-8", path.display()),
    })?;
    parse_scores(&text)
}

pub fn write_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    codec::write_atomic(path, format_scores(scores)?.as_bytes())
}

/// `P_fa<TAB>P_miss` per line.
pub fn format_det(points: &[DetPoint]) -> String {
    points
        .iter()
        .map(|p| format!("{:?}\t{:?}\n", p.p_fa, p.p_miss))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn set(tar: &[f64], non: &[f64]) -> ScoreSet {
        let scores: Vec<f64> = tar.iter().chain(non).copied().collect();
        let labels: Vec<bool> = tar
            .iter()
            .map(|_| true)
            .chain(non.iter().map(|_| false))
            .collect();
        ScoreSet::from_labeled(&scores, &labels).unwrap()
    }

    fn random_set(rng: &mut Rng, n: usize, shift: f64) -> ScoreSet {
        let mut s = ScoreSet::new();
        for i in 0..n {
            let target = rng.uniform() < 0.3 || i == 0;
            let target = target && i != 1;
            // coarse rounding produces ties
            let raw = rng.normal() + if target { shift } else { 0.0 };
            s.push(
                format!("t{i}"),
                (raw * 20.0).round() / 20.0,
                Some(Label::from_bool(target)),
            );
        }
        s
    }

    /// Candidate thresholds: every score and +inf; rates counted directly.
    fn scan(s: &ScoreSet) -> Vec<(f64, f64, f64)> {
        let (tar, non) = s.split_by_label().unwrap();
        let mut th: Vec<f64> = s.records.iter().map(|r| r.score).collect();
        th.push(f64::INFINITY);
        th.sort_by(|a, b| a.total_cmp(b));
        th.dedup();
        th.iter()
            .map(|&t| {
                let miss = tar.iter().filter(|&&x| x < t).count() as f64 / tar.len() as f64;
                let fa = non.iter().filter(|&&x| x >= t).count() as f64 / non.len() as f64;
                (t, miss, fa)
            })
            .collect()
    }

    fn eer_oracle(s: &ScoreSet) -> f64 {
        let rows = scan(s);
        for w in 0..rows.len() {
            let (_, miss, fa) = rows[w];
            if miss >= fa {
                if miss == fa || w == 0 {
                    return miss;
                }
                let (_, m0, f0) = rows[w - 1];
                // intersect the segment (f0, m0) -> (fa, miss) with the diagonal
                let a = (f0 - m0) / ((f0 - m0) - (fa - miss));
                return m0 + a * (miss - m0);
            }
        }
        unreachable!()
    }

    fn dcf_oracle(s: &ScoreSet, op: &OperatingPoint) -> f64 {
        scan(s)
            .iter()
            .map(|&(_, miss, fa)| {
                (op.c_miss * miss * op.p_target + op.c_fa * fa * (1.0 - op.p_target))
                    / (op.c_miss * op.p_target).min(op.c_fa * (1.0 - op.p_target))
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(eer(&s).unwrap().eer, 0.0);
        assert_eq!(
            min_dcf(&s, &OperatingPoint::with_prior(0.01).unwrap())
                .unwrap()
                .min_dcf,
            0.0
        );
    }

    #[test]
    fn identical_distributions_give_chance() {
        let vals = [0.1, 0.5, 0.3, 0.9, 0.7];
        assert!((eer(&set(&vals, &vals)).unwrap().eer - 0.5).abs() < 1e-12);
        let vals = [1.0, 2.0];
        assert!((eer(&set(&vals, &vals)).unwrap().eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let s = random_set(&mut rng, 200, 1.0);
            assert!((eer(&s).unwrap().eer - eer_oracle(&s)).abs() < 1e-9);
            let op = OperatingPoint::with_prior(0.01).unwrap();
            assert!((min_dcf(&s, &op).unwrap().min_dcf - dcf_oracle(&s, &op)).abs() < 1e-9);
        }
    }

    #[test]
    fn dcf_is_bounded_by_trivial_decisions() {
        let mut rng = Rng::new(2);
        for p in [0.5, 0.01, 0.001, 0.9] {
            let s = random_set(&mut rng, 50, -1.0);
            assert!(
                min_dcf(&s, &OperatingPoint::with_prior(p).unwrap())
                    .unwrap()
                    .min_dcf
                    <= 1.0 + 1e-12
            );
        }
    }

    #[test]
    fn det_single_pair() {
        let s = set(&[0.9], &[0.1]);
        let pts = det_points(&s).unwrap();
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.p_fa, p.p_miss)).collect();
        assert_eq!(pairs, vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn det_staircase_over_random_sets() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let n = 2 + rng.below(60);
            let s = random_set(&mut rng, n, 0.5);
            let pts = det_points(&s).unwrap();
            let mut distinct: Vec<f64> = s.records.iter().map(|r| r.score).collect();
            distinct.sort_by(|a, b| a.total_cmp(b));
            distinct.dedup();
            assert!(pts.len() <= distinct.len() + 1);
            for w in pts.windows(2) {
                assert!(w[1].p_fa <= w[0].p_fa && w[1].p_miss >= w[0].p_miss);
                assert!(w[1].threshold > w[0].threshold);
            }
        }
    }

    #[test]
    fn eer_lies_on_crossing_segment() {
        let mut rng = Rng::new(5);
        for _ in 0..30 {
            let s = random_set(&mut rng, 120, 1.2);
            let e = eer(&s).unwrap().eer;
            let pts = det_points(&s).unwrap();
            let i = pts.iter().position(|p| p.p_miss >= p.p_fa).unwrap();
            let lo = pts[i].p_fa.min(pts[i.saturating_sub(1)].p_fa);
            let hi = pts[i].p_fa.max(pts[i.saturating_sub(1)].p_fa);
            assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
        }
    }

    #[test]
    fn dcf_not_above_cost_at_eer_threshold() {
        let mut rng = Rng::new(6);
        for _ in 0..30 {
            let s = random_set(&mut rng, 100, 1.0);
            let op = OperatingPoint::with_prior(0.01).unwrap();
            let thr = eer(&s).unwrap().threshold;
            let (tar, non) = s.split_by_label().unwrap();
            let miss = tar.iter().filter(|&&x| x < thr).count() as f64 / tar.len() as f64;
            let fa = non.iter().filter(|&&x| x >= thr).count() as f64 / non.len() as f64;
            assert!(min_dcf(&s, &op).unwrap().min_dcf <= op.normalized_cost(miss, fa) + 1e-12);
        }
    }

    #[test]
    fn degenerate_sets_rejected() {
        assert!(eer(&set(&[0.1], &[])).is_err());
        assert!(eer(&set(&[], &[0.1])).is_err());
        let mut s = set(&[0.1], &[0.2]);
        s.push("x", 0.3, None);
        assert!(eer(&s).is_err());
        assert!(OperatingPoint::new(0.0, 1.0, 1.0).is_err());
        assert!(OperatingPoint::new(0.1, -1.0, 1.0).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let mut s = set(&[0.1 + 0.2, -1e-17], &[3.0]);
        s.push("unlabelled", 2.5, None);
        let text = format_scores(&s).unwrap();
        assert_eq!(parse_scores(&text).unwrap(), s);
        assert!(matches!(
            parse_scores("a\tnotanumber\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_scores("a\t1\ttarget\nb\t2\tyes\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transforms(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let s = random_set(&mut rng, 80, 0.8);
            let warp = |f: &dyn Fn(f64) -> f64| ScoreSet {
                records: s.records.iter().map(|r| ScoreRecord { score: f(r.score), ..r.clone() }).collect(),
            };
            let op = OperatingPoint::with_prior(0.01).unwrap();
            let base_eer = eer(&s).unwrap().eer;
            let base_dcf = min_dcf(&s, &op).unwrap().min_dcf;
            let base_det: Vec<(f64, f64)> = det_points(&s).unwrap().iter().map(|p| (p.p_fa, p.p_miss)).collect();
            for w in [warp(&|x| a * x + b), warp(&|x| 1.0 / (1.0 + (-x).exp()))] {
                prop_assert!((eer(&w).unwrap().eer - base_eer).abs() < 1e-12);
                prop_assert!((min_dcf(&w, &op).unwrap().min_dcf - base_dcf).abs() < 1e-12);
                let det: Vec<(f64, f64)> = det_points(&w).unwrap().iter().map(|p| (p.p_fa, p.p_miss)).collect();
                prop_assert_eq!(&det, &base_det);
            }
        }
    }
}
