use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::embeddings::EmbeddingSet;
use super::trials::{Label, Trial, TrialList};

/// Which unit draws its own within-speaker scale in heteroscedastic mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleScope {
    #[default]
    Speaker,
    Utterance,
}

/// Hierarchical Gaussian generator: speaker mean `~ N(0, between^2 I)`,
/// utterance `~ N(mean, within^2 I)`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    pub between_scale: f64,
    pub within_scale: f64,
    /// When set, the within scale is drawn uniformly from this range instead,
    /// once per speaker or once per utterance according to `scope`.
    pub within_range: Option<(f64, f64)>,
    pub scope: ScaleScope,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            speakers: 100,
            utts_per_speaker: 8,
            dim: 32,
            between_scale: 1.0,
            within_scale: 0.5,
            within_range: None,
            scope: ScaleScope::Speaker,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub set: EmbeddingSet,
    /// Ground-truth mean of each speaker, in generation order.
    pub speaker_means: Vec<Vec<f64>>,
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:04}")
}

pub fn utterance_id(s: usize, u: usize) -> String {
    format!("spk{s:04}-utt{u:03}")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("synthetic dim must be >= 1".into()));
        }
        if !(self.between_scale > 0.0) || !(self.within_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance scales must be positive, got between {} within {}",
                self.between_scale, self.within_scale
            )));
        }
        if let Some((lo, hi)) = self.within_range {
            if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bad within-scale range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic per seed. Scale draws come from a separate substream, so a
/// range collapsed to `(within, within)` reproduces the homoscedastic output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut scale_rng = rng.substream(1);
    let draw_scale = |rng: &mut Rng| match spec.within_range {
        Some((lo, hi)) => rng.uniform_range(lo, hi),
        None => spec.within_scale,
    };
    let mut set = EmbeddingSet::new(spec.dim);
    let mut means = Vec::with_capacity(spec.speakers);
    for s in 0..spec.speakers {
        let mean: Vec<f64> = (0..spec.dim)
            .map(|_| spec.between_scale * rng.normal())
            .collect();
        let speaker_scale = match spec.scope {
            ScaleScope::Speaker => draw_scale(&mut scale_rng),
            ScaleScope::Utterance => spec.within_scale,
        };
        for u in 0..spec.utts_per_speaker {
            let scale = match spec.scope {
                ScaleScope::Speaker => speaker_scale,
                ScaleScope::Utterance => draw_scale(&mut scale_rng),
            };
            let v = mean.iter().map(|&m| m + scale * rng.normal()).collect();
            set.push(speaker_id(s), utterance_id(s, u), v)?;
        }
        means.push(mean);
    }
    Ok(SyntheticData {
        set,
        speaker_means: means,
    })
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: EmbeddingSet,
    /// All records of the held-out speakers.
    pub eval: EmbeddingSet,
    pub trials: TrialList,
}

/// Speaker-disjoint split. Each held-out speaker gets `enrollments` random
/// enrollment utterances; the rest are test utterances, and every test
/// utterance is scored against every held-out speaker's enrollment set.
pub fn split_train_eval(
    set: &EmbeddingSet,
    eval_fraction: f64,
    enrollments: usize,
    rng: &mut Rng,
) -> Result<Split> {
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {eval_fraction} outside [0, 1]"
        )));
    }
    if enrollments == 0 {
        return Err(Error::InvalidArgument(
            "need at least one enrollment utterance".into(),
        ));
    }
    let mut speakers = set.speakers();
    let n_eval = (speakers.len() as f64 * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= speakers.len() {
        return Err(Error::InsufficientData(format!(
            "fraction {eval_fraction} of {} speakers leaves an empty train or eval side",
            speakers.len()
        )));
    }
    rng.shuffle(&mut speakers);
    let (eval_spk, train_spk) = speakers.split_at(n_eval);

    let mut enroll_sets = Vec::with_capacity(n_eval);
    let mut tests = Vec::new();
    for (spk, idx) in eval_spk {
        if idx.len() <= enrollments {
            return Err(Error::InsufficientData(format!(
                "speaker {spk} has {} utterances; need more than {enrollments}",
                idx.len()
            )));
        }
        let mut idx = idx.clone();
        rng.shuffle(&mut idx);
        let ids = |ix: &[usize]| {
            ix.iter()
                .map(|&i| set.records()[i].utterance.clone())
                .collect::<Vec<_>>()
        };
        enroll_sets.push((spk.clone(), ids(&idx[..enrollments])));
        for u in ids(&idx[enrollments..]) {
            tests.push((spk.clone(), u));
        }
    }

    let mut trials = Vec::with_capacity(tests.len() * n_eval);
    for (test_spk, test_utt) in &tests {
        for (enroll_spk, enroll_utts) in &enroll_sets {
            trials.push(Trial {
                enroll_speaker: enroll_spk.clone(),
                enroll_utterances: enroll_utts.clone(),
                test_utterance: test_utt.clone(),
                label: Some(Label::from_bool(test_spk == enroll_spk)),
            });
        }
    }

    let train_ids: std::collections::HashSet<&str> =
        train_spk.iter().map(|(s, _)| s.as_str()).collect();
    Ok(Split {
        train: set.filter_speakers(&|s| train_ids.contains(s)),
        eval: set.filter_speakers(&|s| !train_ids.contains(s)),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(speakers: usize, utts: usize, dim: usize) -> SyntheticSpec {
        SyntheticSpec {
            speakers,
            utts_per_speaker: utts,
            dim,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn vanishing_within_scale() {
        let mut s = spec(5, 4, 6);
        s.within_scale = 1e-9;
        let data = generate_synthetic(&s).unwrap();
        for r in data.set.records() {
            let spk: usize = r.speaker[3..].parse().unwrap();
            for (x, m) in r.vector.iter().zip(&data.speaker_means[spk]) {
                assert!((x - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn moments_match_scales() {
        let mut s = spec(100, 10, 8);
        s.between_scale = 1.5;
        s.within_scale = 0.7;
        let data = generate_synthetic(&s).unwrap();
        let d = 8;
        // per-dimension variance estimates, averaged over the diagonal
        let mut within = 0.0;
        let mut spk_means = Vec::new();
        for (_, idx) in data.set.speakers() {
            let n = idx.len() as f64;
            let mut mean = vec![0.0; d];
            for &i in &idx {
                for (m, x) in mean.iter_mut().zip(&data.set.records()[i].vector) {
                    *m += x / n;
                }
            }
            for &i in &idx {
                for (m, x) in mean.iter().zip(&data.set.records()[i].vector) {
                    within += (x - m).powi(2);
                }
            }
            spk_means.push(mean);
        }
        within /= (100 * 9 * d) as f64;
        let mut between = 0.0;
        for m in &spk_means {
            between += m.iter().map(|x| x * x).sum::<f64>();
        }
        between = between / (100 * d) as f64 - within / 10.0;
        assert!((within / 0.49 - 1.0).abs() < 0.15, "within {within}");
        assert!((between / 2.25 - 1.0).abs() < 0.15, "between {between}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&spec(10, 3, 4)).unwrap();
        let b = generate_synthetic(&spec(10, 3, 4)).unwrap();
        assert_eq!(a.set, b.set);
        let mut other = spec(10, 3, 4);
        other.seed = 6;
        assert_ne!(generate_synthetic(&other).unwrap().set, a.set);
    }

    #[test]
    fn collapsed_range_equals_homoscedastic() {
        let base = spec(12, 5, 4);
        let plain = generate_synthetic(&base).unwrap();
        for scope in [ScaleScope::Speaker, ScaleScope::Utterance] {
            let mut h = base.clone();
            h.within_range = Some((base.within_scale, base.within_scale));
            h.scope = scope;
            assert_eq!(generate_synthetic(&h).unwrap().set, plain.set);
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = spec(2, 2, 2);
        s.within_scale = 0.0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(2, 2, 2);
        s.within_range = Some((0.5, 0.1));
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn split_counts() {
        let data = generate_synthetic(&spec(10, 6, 3)).unwrap();
        let split = split_train_eval(&data.set, 0.2, 2, &mut Rng::new(1)).unwrap();
        let train_spk = split.train.speakers();
        let eval_spk = split.eval.speakers();
        assert_eq!((train_spk.len(), eval_spk.len()), (8, 2));
        // 2 eval speakers x 4 test utterances, each vs 2 enrollment sets
        assert_eq!(split.trials.len(), 8 * 2);
        assert_eq!(
            split
                .trials
                .iter()
                .filter(|t| t.label == Some(Label::Target))
                .count(),
            8
        );
        for t in &split.trials {
            assert!(!t.enroll_utterances.contains(&t.test_utterance));
            assert_eq!(t.enroll_utterances.len(), 2);
        }
    }

    #[test]
    fn split_is_speaker_disjoint_over_seeds() {
        let data = generate_synthetic(&spec(15, 4, 2)).unwrap();
        for seed in 0..50 {
            let split = split_train_eval(&data.set, 0.3, 1, &mut Rng::new(seed)).unwrap();
            let train: std::collections::HashSet<_> =
                split.train.speakers().into_iter().map(|s| s.0).collect();
            for (spk, _) in split.eval.speakers() {
                assert!(!train.contains(&spk));
            }
            for t in &split.trials {
                assert!(!train.contains(&t.enroll_speaker));
            }
            assert_eq!(split.train.len() + split.eval.len(), data.set.len());
        }
    }

    #[test]
    fn split_infeasible() {
        let data = generate_synthetic(&spec(10, 2, 2)).unwrap();
        assert!(split_train_eval(&data.set, 0.2, 2, &mut Rng::new(0)).is_err());
        assert!(split_train_eval(&data.set, 0.0, 1, &mut Rng::new(0)).is_err());
    }
}
