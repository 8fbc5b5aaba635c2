use crate::data::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Balanced batch layout: `speakers` speakers with `utts` embeddings each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BatchSpec {
    pub speakers: usize,
    pub utts: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub const DEFAULT_SPEAKERS: usize = 256;
    pub const DEFAULT_UTTS: usize = 5;

    pub fn new(speakers: usize, utts: usize, seed: u64) -> Result<Self> {
        let spec = BatchSpec {
            speakers,
            utts,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 || self.utts < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch needs >= 2 speakers and >= 2 utterances per speaker, got {}x{}",
                self.speakers, self.utts
            )));
        }
        Ok(())
    }

    /// Trials per batch: every held-out test against every speaker's set.
    pub fn pair_count(&self) -> usize {
        self.speakers * self.utts * self.speakers
    }
}

/// One `(test, enrollment set)` pair of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchTrial {
    pub test_speaker: usize,
    /// Held-out utterance index `m`; it is also the index left out of every
    /// enrollment set of this trial row.
    pub test_index: usize,
    pub enroll_speaker: usize,
    pub enroll_indices: Vec<usize>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub speakers: Vec<String>,
    /// `embeddings[l][k]`: utterance `k` of batch speaker `l`.
    pub embeddings: Vec<Vec<Vec<f64>>>,
}

impl TrainingBatch {
    pub fn num_speakers(&self) -> usize {
        self.embeddings.len()
    }

    pub fn utts(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    /// Indices `0..K` without `held_out`.
    pub fn enroll_indices(&self, held_out: usize) -> Vec<usize> {
        (0..self.utts()).filter(|&k| k != held_out).collect()
    }

    /// All trials ordered by test speaker, held-out index, then enrollment
    /// speaker. Test `(l, m)` is paired with the set of speaker `n` that leaves
    /// out the same index `m`; the pair is a target exactly when `l == n`.
    pub fn trials(&self) -> Vec<BatchTrial> {
        let (m_spk, k) = (self.num_speakers(), self.utts());
        let mut out = Vec::with_capacity(m_spk * k * m_spk);
        for l in 0..m_spk {
            for m in 0..k {
                for n in 0..m_spk {
                    out.push(BatchTrial {
                        test_speaker: l,
                        test_index: m,
                        enroll_speaker: n,
                        enroll_indices: self.enroll_indices(m),
                        label: Label::from_bool(l == n),
                    });
                }
            }
        }
        out
    }
}

/// Speakers of `pool` with at least `utts` utterances, as record-index lists.
pub(crate) fn eligible_speakers(pool: &EmbeddingSet, utts: usize) -> Vec<(String, Vec<usize>)> {
    pool.speakers()
        .into_iter()
        .filter(|(_, idx)| idx.len() >= utts)
        .collect()
}

pub(crate) fn insufficient(pool: &EmbeddingSet, spec: &BatchSpec, eligible: usize) -> Error {
    Error::InsufficientData(format!(
        "batch of {} speakers x {} utterances needs {} speakers with >= {} utterances; \
         the pool ({} records) has {eligible}. Try smaller --batch-speakers or --batch-utts",
        spec.speakers,
        spec.utts,
        spec.speakers,
        spec.utts,
        pool.len()
    ))
}

/// Draws `utts` random utterances from each of the given speakers.
pub(crate) fn batch_from_speakers(
    pool: &EmbeddingSet,
    speakers: &[(String, Vec<usize>)],
    utts: usize,
    rng: &mut Rng,
) -> TrainingBatch {
    let mut names = Vec::with_capacity(speakers.len());
    let mut embeddings = Vec::with_capacity(speakers.len());
    for (name, idx) in speakers {
        let picks = rng.sample_indices(idx.len(), utts);
        embeddings.push(
            picks
                .iter()
                .map(|&p| pool.records()[idx[p]].vector.clone())
                .collect(),
        );
        names.push(name.clone());
    }
    TrainingBatch {
        speakers: names,
        embeddings,
    }
}

/// Samples `spec.speakers` distinct speakers and `spec.utts` utterances of
/// each. Speakers with fewer than `spec.utts` utterances are never chosen.
pub fn compose_batch(
    pool: &EmbeddingSet,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<TrainingBatch> {
    spec.validate()?;
    let eligible = eligible_speakers(pool, spec.utts);
    if eligible.len() < spec.speakers {
        return Err(insufficient(pool, spec, eligible.len()));
    }
    let chosen: Vec<_> = rng
        .sample_indices(eligible.len(), spec.speakers)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    Ok(batch_from_speakers(pool, &chosen, spec.utts, rng))
}
