use std::collections::HashMap;
use std::path::Path;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub speaker: String,
    pub utterance: String,
    pub vector: Vec<f64>,
}

/// Labelled embeddings keyed by `(speaker, utterance)`, in insertion order.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    by_key: HashMap<(String, String), usize>,
    by_utterance: HashMap<String, Vec<usize>>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            records: Vec::new(),
            by_key: HashMap::new(),
            by_utterance: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn push(
        &mut self,
        speaker: impl Into<String>,
        utterance: impl Into<String>,
        vector: Vec<f64>,
    ) -> Result<()> {
        let speaker = speaker.into();
        let utterance = utterance.into();
        if vector.len() != self.dim {
            return Err(Error::Shape {
                op: "EmbeddingSet::push",
                left: format!("dim {}", self.dim),
                right: format!(
                    "vector of length {} for {speaker}/{utterance}",
                    vector.len()
                ),
            });
        }
        if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding vector",
                index: i,
            });
        }
        let key = (speaker.clone(), utterance.clone());
        if self.by_key.contains_key(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate embedding key {speaker}/{utterance}"
            )));
        }
        let idx = self.records.len();
        self.by_key.insert(key, idx);
        self.by_utterance
            .entry(utterance.clone())
            .or_default()
            .push(idx);
        self.records.push(EmbeddingRecord {
            speaker,
            utterance,
            vector,
        });
        Ok(())
    }

    pub fn get(&self, speaker: &str, utterance: &str) -> Option<&EmbeddingRecord> {
        self.by_key
            .get(&(speaker.to_owned(), utterance.to_owned()))
            .map(|&i| &self.records[i])
    }

    /// Looks up an utterance id that must be unique across speakers.
    pub fn find_utterance(&self, utterance: &str) -> Result<&EmbeddingRecord> {
        match self.by_utterance.get(utterance).map(Vec::as_slice) {
            Some([i]) => Ok(&self.records[*i]),
            Some(many) if many.len() > 1 => Err(Error::InvalidArgument(format!(
                "utterance id {utterance} is ambiguous ({} speakers)",
                many.len()
            ))),
            _ => Err(Error::InvalidArgument(format!(
                "unknown utterance id {utterance}"
            ))),
        }
    }

    /// Speaker ids in order of first appearance, each with its record indices.
    pub fn speakers(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            match pos.get(r.speaker.as_str()) {
                Some(&p) => order[p].1.push(i),
                None => {
                    pos.insert(&r.speaker, order.len());
                    order.push((r.speaker.clone(), vec![i]));
                }
            }
        }
        order
    }

    /// New set containing only the given speakers, in this set's order.
    pub fn filter_speakers(&self, keep: &dyn Fn(&str) -> bool) -> EmbeddingSet {
        let mut out = EmbeddingSet::new(self.dim);
        for r in self.records.iter().filter(|r| keep(&r.speaker)) {
            out.push(r.speaker.clone(), r.utterance.clone(), r.vector.clone())
                .expect("records of a valid set are valid");
        }
        out
    }

    /// Applies `f` to every vector, e.g. a projection. The output dimension is
    /// taken from the first result.
    pub fn map_vectors(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<EmbeddingSet> {
        let mapped: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| f(&r.vector))
            .collect::<Result<_>>()?;
        let dim = mapped.first().map_or(self.dim, Vec::len);
        let mut out = EmbeddingSet::new(dim);
        for (r, v) in self.records.iter().zip(mapped) {
            out.push(r.speaker.clone(), r.utterance.clone(), v)?;
        }
        Ok(out)
    }
}

// Layout (little-endian):
//   "EMBV1" | dim u32 | count u32 |
//   count x (spk_len u16 | spk utf8 | utt_len u16 | utt utf8 | dim x f32)
pub const EMBEDDINGS_MAGIC: &[u8; 5] = b"EMBV1";

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(EMBEDDINGS_MAGIC);
    w.len_u32(set.dim, "dimension")?;
    w.len_u32(set.len(), "record count")?;
    for r in &set.records {
        for id in [&r.speaker, &r.utterance] {
            let len = u16::try_from(id.len()).map_err(|_| {
                Error::InvalidArgument(format!("id longer than 65535 bytes: {id:.32}..."))
            })?;
            w.u16(len);
            w.bytes(id.as_bytes());
        }
        for &x in &r.vector {
            w.f32(x as f32);
        }
    }
    Ok(w.into_inner())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(EMBEDDINGS_MAGIC)?;
    let dim = r.u32("dimension")? as usize;
    let count = r.u32("record count")? as usize;
    let mut set = EmbeddingSet::new(dim);
    for _ in 0..count {
        let record_at = r.offset();
        let speaker = read_id(&mut r, "speaker id")?;
        let utterance = read_id(&mut r, "utterance id")?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset();
            let x = r.f32("embedding value")?;
            if !x.is_finite() {
                return Err(Error::format(at, "non-finite embedding value"));
            }
            vector.push(x as f64);
        }
        set.push(speaker, utterance, vector)
            .map_err(|e| Error::format(record_at, e.to_string()))?;
    }
    r.finish()?;
    Ok(set)
}

fn read_id(r: &mut ByteReader<'_>, what: &str) -> Result<String> {
    let len = r.u16(what)? as usize;
    let at = r.offset();
    let raw = r.take(len, what)?;
    String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(&codec::read_file(path)?)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    codec::write_atomic(path, &encode_embeddings(set)?)
}
