//! Conventional back-ends: cosine scoring, LDA and two-covariance PLDA.

mod lda;
mod plda;

pub use lda::{lda_apply, lda_fit, LdaFit, LdaProjection, LDA_MAGIC};
pub use plda::{
    plda_fit, plda_fit_from, plda_score, plda_score_multi, PldaFit, PldaInit, PldaModel,
    PldaOptions, PLDA_MAGIC,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// How several enrollment embeddings become one vector for cosine scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnrollAggregation {
    Mean,
    /// The single embedding was extracted from concatenated enrollment audio
    /// upstream and is passed through unchanged.
    ConcatFeatures,
}

/// How several enrollment embeddings are combined before PLDA scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PldaMulti {
    Mean,
    /// Length-normalize each embedding, then average.
    ConcatEmbeddings,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_score",
            left: format!("{}", a.len()),
            right: format!("{}", b.len()),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine score of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn aggregate_enrollment<R: AsRef<[f64]>>(
    embeds: &[R],
    mode: EnrollAggregation,
) -> Result<Vec<f64>> {
    let first = embeds
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty enrollment list".into()))?
        .as_ref();
    match mode {
        EnrollAggregation::ConcatFeatures => {
            if embeds.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "concatenated-feature enrollment expects one precomputed embedding, got {}",
                    embeds.len()
                )));
            }
            Ok(first.to_vec())
        }
        EnrollAggregation::Mean => mean_of(embeds),
    }
}

pub(crate) fn mean_of<R: AsRef<[f64]>>(embeds: &[R]) -> Result<Vec<f64>> {
    let d = embeds.first().map_or(0, |e| e.as_ref().len());
    let mut out = vec![0.0; d];
    for e in embeds {
        let e = e.as_ref();
        if e.len() != d {
            return Err(Error::Shape {
                op: "aggregate_enrollment",
                left: format!("{d}"),
                right: format!("{}", e.len()),
            });
        }
        for (o, x) in out.iter_mut().zip(e) {
            *o += x;
        }
    }
    let n = embeds.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Scales `v` to unit Euclidean norm.
pub fn length_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Degenerate(
            "length normalization of a zero vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub(crate) fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}
