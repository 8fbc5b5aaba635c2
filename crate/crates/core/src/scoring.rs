//! Scoring trial lists against an embedding set with any back-end.

use crate::baselines::{
    aggregate_enrollment, cosine_score, plda_score_multi, EnrollAggregation, PldaModel, PldaMulti,
};
use crate::data::{EmbeddingSet, TrialList};
use crate::error::{Error, Result};
use crate::metrics::ScoreSet;
use crate::model::{self, AttentionBackendParams};

/// Enrollment handling requested for the cosine and PLDA back-ends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Mean,
    Concat,
}

pub enum Scorer<'a> {
    /// Consumes the full enrollment list; aggregation mode is not used.
    Attention(&'a AttentionBackendParams),
    Cosine(Aggregation),
    Plda(&'a PldaModel, Aggregation),
}

/// Key under which a precomputed embedding of concatenated enrollment audio
/// is looked up: the enrollment utterance ids joined with `+`.
pub fn concat_utterance_id<S: AsRef<str>>(utterances: &[S]) -> String {
    utterances
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join("+")
}

fn lookup<'s>(
    set: &'s EmbeddingSet,
    speaker: Option<&str>,
    utt: &str,
    line: usize,
) -> Result<&'s [f64]> {
    if let Some(r) = speaker.and_then(|s| set.get(s, utt)) {
        return Ok(&r.vector);
    }
    set.find_utterance(utt)
        .map(|r| r.vector.as_slice())
        .map_err(|e| Error::Parse {
            line,
            message: format!("cannot resolve utterance {utt:?}: {e}"),
        })
}

/// Scores every trial in order. Trial lines are reported 1-based in errors.
///
/// With [`Aggregation::Concat`] the cosine back-end expects an embedding
/// stored under [`concat_utterance_id`] for the enrollment speaker, and falls
/// back to the mean when it is missing.
pub fn score_trials(scorer: &Scorer, set: &EmbeddingSet, trials: &TrialList) -> Result<ScoreSet> {
    let mut out = ScoreSet::new();
    let mut fallbacks = 0usize;
    for (i, t) in trials.iter().enumerate() {
        let line = i + 1;
        let enroll = t
            .enroll_utterances
            .iter()
            .map(|u| lookup(set, Some(&t.enroll_speaker), u, line))
            .collect::<Result<Vec<_>>>()?;
        let test = lookup(set, None, &t.test_utterance, line)?;
        let with_line = |e: Error| match e {
            Error::Parse { .. } => e,
            other => Error::Parse {
                line,
                message: other.to_string(),
            },
        };
        let score = match scorer {
            Scorer::Attention(params) => {
                model::backend_forward(&enroll, test, params).map(|(p, _)| p)
            }
            Scorer::Cosine(Aggregation::Mean) => {
                aggregate_enrollment(&enroll, EnrollAggregation::Mean)
                    .and_then(|h| cosine_score(&h, test))
            }
            Scorer::Cosine(Aggregation::Concat) => match set.get(
                &t.enroll_speaker,
                &concat_utterance_id(&t.enroll_utterances),
            ) {
                Some(r) => aggregate_enrollment(&[&r.vector], EnrollAggregation::ConcatFeatures),
                None => {
                    fallbacks += 1;
                    aggregate_enrollment(&enroll, EnrollAggregation::Mean)
                }
            }
            .and_then(|h| cosine_score(&h, test)),
            Scorer::Plda(m, agg) => {
                let mode = match agg {
                    Aggregation::Mean => PldaMulti::Mean,
                    Aggregation::Concat => PldaMulti::ConcatEmbeddings,
                };
                plda_score_multi(m, &enroll, test, mode)
            }
        }
        .map_err(with_line)?;
        out.push(t.id(), score, t.label);
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} trials had no concatenated-audio enrollment embedding; used the mean instead");
    }
    Ok(out)
}
