use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{from_na, symmetrize};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const LDA_MAGIC: &[u8; 5] = b"LDA01";

/// Centering followed by `y = W^T (x - mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaProjection {
    /// `d_in x d_out`; columns sorted by descending generalized eigenvalue.
    pub weights: Matrix,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LdaFit {
    pub projection: LdaProjection,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
    /// Ridge added to the within-class scatter, zero when none was needed.
    pub ridge: f64,
}

impl LdaProjection {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub(crate) fn encode_into(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(LDA_MAGIC);
        w.len_u32(self.input_dim(), "lda input dim")?;
        w.len_u32(self.output_dim(), "lda output dim")?;
        w.f64s(&self.mean);
        w.f64s(self.weights.as_slice());
        Ok(())
    }

    pub(crate) fn decode_from(r: &mut ByteReader) -> Result<Self> {
        r.expect_magic(LDA_MAGIC)?;
        let at = r.offset();
        let d_in = r.u32("lda input dim")? as usize;
        let d_out = r.u32("lda output dim")? as usize;
        if d_out == 0 || d_out > d_in {
            return Err(Error::format(at, format!("bad LDA dims {d_in} -> {d_out}")));
        }
        if r.remaining() < d_in.saturating_mul(d_out + 1).saturating_mul(8) {
            return Err(Error::format(r.offset(), "truncated LDA tensors"));
        }
        let mean = r.f64s(d_in, "lda mean")?;
        let weights = Matrix::from_vec(d_in, d_out, r.f64s(d_in * d_out, "lda weights")?)?;
        Ok(LdaProjection { weights, mean })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        self.encode_into(&mut w)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let out = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

/// Pooled mean, within-class and between-class scatter (both divided by the
/// number of records).
pub(crate) struct ClassStats {
    pub mean: DVector<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub speakers: usize,
}

pub(crate) fn class_stats(pool: &EmbeddingSet) -> Result<ClassStats> {
    let d = pool.dim();
    let groups = pool.speakers();
    if groups.len() < 2 || groups.iter().any(|(_, idx)| idx.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "need >= 2 speakers with >= 2 utterances each, got {} speakers",
            groups.len()
        )));
    }
    let vec_of = |i: usize| DVector::from_column_slice(&pool.records()[i].vector);
    let n = pool.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in pool.records() {
        mean += DVector::from_column_slice(&r.vector);
    }
    mean /= n;
    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for (_, idx) in &groups {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += vec_of(i);
        }
        m /= idx.len() as f64;
        for &i in idx {
            let c = vec_of(i) - &m;
            within.ger(1.0, &c, &c, 1.0);
        }
        let c = &m - &mean;
        between.ger(idx.len() as f64, &c, &c, 1.0);
    }
    within /= n;
    between /= n;
    Ok(ClassStats {
        mean,
        within,
        between,
        speakers: groups.len(),
    })
}

/// Fisher LDA by whitening the within-class scatter and diagonalizing the
/// whitened between-class scatter.
pub fn lda_fit(pool: &EmbeddingSet, d_out: usize) -> Result<LdaFit> {
    let stats = class_stats(pool)?;
    let d = pool.dim();
    let max_out = d.min(stats.speakers - 1);
    if d_out == 0 || d_out > max_out {
        return Err(Error::InvalidArgument(format!(
            "LDA output dim must be in 1..={max_out} for {d}-dim data with {} speakers, got {d_out}",
            stats.speakers
        )));
    }

    let mut sw = stats.within;
    let trace = sw.trace();
    let mut eig = SymmetricEigen::new(sw.clone());
    let max_ev = eig.eigenvalues.max();
    let mut ridge = 0.0;
    if eig.eigenvalues.min() <= 1e-12 * max_ev.max(f64::MIN_POSITIVE) {
        ridge = if trace > 0.0 {
            1e-6 * trace / d as f64
        } else {
            1e-6
        };
        log::warn!("within-class scatter is singular; adding ridge {ridge:e}");
        for i in 0..d {
            sw[(i, i)] += ridge;
        }
        eig = SymmetricEigen::new(sw);
    }
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let whiten = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt);
    let mut sb = whiten.transpose() * &stats.between * &whiten;
    symmetrize(&mut sb);
    let beig = SymmetricEigen::new(sb);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| beig.eigenvalues[b].total_cmp(&beig.eigenvalues[a]));
    let keep = &order[..d_out];
    let v = DMatrix::from_fn(d, d_out, |r, c| beig.eigenvectors[(r, keep[c])]);
    let weights = &whiten * v;
    Ok(LdaFit {
        projection: LdaProjection {
            weights: from_na(&weights),
            mean: stats.mean.iter().copied().collect(),
        },
        eigenvalues: keep.iter().map(|&i| beig.eigenvalues[i]).collect(),
        ridge,
    })
}

pub fn lda_apply(proj: &LdaProjection, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != proj.input_dim() {
        return Err(Error::Shape {
            op: "lda_apply",
            left: format!("input {}", x.len()),
            right: format!("projection {}x{}", proj.input_dim(), proj.output_dim()),
        });
    }
    let centered: Vec<f64> = x.iter().zip(&proj.mean).map(|(a, m)| a - m).collect();
    proj.weights.transpose().matvec(&centered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::to_na;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::numerics::Rng;

    fn fisher_ratio(stats: &ClassStats, w: &DVector<f64>) -> f64 {
        (w.transpose() * &stats.between * w)[0] / (w.transpose() * &stats.within * w)[0]
    }

    #[test]
    fn two_point_masses() {
        // zero within-class scatter: the ridge makes it isotropic, so the
        // direction is the mean difference
        let mut set = EmbeddingSet::new(2);
        for (s, c) in [(0, [0.0, 0.0]), (1, [3.0, 1.0])] {
            for u in 0..20 {
                set.push(format!("s{s}"), format!("s{s}u{u}"), c.to_vec())
                    .unwrap();
            }
        }
        let fit = lda_fit(&set, 1).unwrap();
        assert!(fit.ridge > 0.0);
        let w = fit.projection.weights.as_slice();
        let cos = (w[0] * 3.0 + w[1] * 1.0) / ((w[0] * w[0] + w[1] * w[1]).sqrt() * 10f64.sqrt());
        assert!(cos.abs() > 0.999, "{cos}");
    }

    #[test]
    fn within_class_whitened_and_sorted() {
        let data = generate_synthetic(&SyntheticSpec {
            speakers: 30,
            utts_per_speaker: 6,
            dim: 10,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let fit = lda_fit(&data.set, 6).unwrap();
        let projected = data
            .set
            .map_vectors(|x| lda_apply(&fit.projection, x))
            .unwrap();
        let stats = class_stats(&projected).unwrap();
        let err = (stats.within - DMatrix::identity(6, 6)).abs().max();
        assert!(err < 1e-6, "{err}");
        assert!(fit.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(fit.ridge, 0.0);
        assert_eq!(projected.dim(), 6);
    }

    #[test]
    fn random_labels_stay_orthonormal() {
        // labels independent of the data: between-class scatter is only noise
        let mut rng = Rng::new(9);
        let mut set = EmbeddingSet::new(5);
        for s in 0..20 {
            for u in 0..10 {
                set.push(
                    format!("s{s}"),
                    format!("s{s}u{u}"),
                    (0..5).map(|_| rng.normal()).collect(),
                )
                .unwrap();
            }
        }
        let fit = lda_fit(&set, 4).unwrap();
        // each between-class eigenvalue of pure noise is on the order of (S - 1) / N per dimension
        let floor = 19.0 / 200.0;
        assert!(
            fit.eigenvalues.iter().all(|&e| e < 4.0 * floor),
            "{:?}",
            fit.eigenvalues
        );
        let stats = class_stats(&set).unwrap();
        let w = to_na(&fit.projection.weights);
        let gram = w.transpose() * stats.within * &w;
        assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-8);
    }

    #[test]
    fn beats_random_directions() {
        let data = generate_synthetic(&SyntheticSpec {
            speakers: 3,
            utts_per_speaker: 30,
            dim: 4,
            within_scale: 0.8,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let stats = class_stats(&data.set).unwrap();
        let fit = lda_fit(&data.set, 1).unwrap();
        let best = fisher_ratio(
            &stats,
            &DVector::from_column_slice(fit.projection.weights.as_slice()),
        );
        let mut rng = Rng::new(5);
        let mut scan = 0.0f64;
        for _ in 0..20000 {
            let w = DVector::from_fn(4, |_, _| rng.normal());
            scan = scan.max(fisher_ratio(&stats, &w));
        }
        assert!(best >= scan - 1e-9, "{best} < {scan}");
        assert!(
            best <= scan * 1.05,
            "random search should approach the optimum: {best} vs {scan}"
        );
    }

    #[test]
    fn singular_within_scatter_gets_ridge() {
        // third coordinate constant: within-class scatter has a null direction
        let mut rng = Rng::new(6);
        let mut set = EmbeddingSet::new(3);
        for s in 0..4 {
            for u in 0..5 {
                set.push(
                    format!("s{s}"),
                    format!("u{s}{u}"),
                    vec![s as f64 + rng.normal(), rng.normal(), 1.0],
                )
                .unwrap();
            }
        }
        let fit = lda_fit(&set, 2).unwrap();
        assert!(fit.ridge > 0.0);
        assert!(fit.projection.weights.is_finite());
    }

    #[test]
    fn rejects_bad_requests() {
        let data = generate_synthetic(&SyntheticSpec {
            speakers: 3,
            utts_per_speaker: 4,
            dim: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(lda_fit(&data.set, 3).is_err());
        assert!(lda_fit(&data.set, 0).is_err());
        let fit = lda_fit(&data.set, 2).unwrap();
        assert!(lda_apply(&fit.projection, &[1.0; 4]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let data = generate_synthetic(&SyntheticSpec {
            speakers: 6,
            utts_per_speaker: 4,
            dim: 5,
            ..Default::default()
        })
        .unwrap();
        let proj = lda_fit(&data.set, 3).unwrap().projection;
        let bytes = proj.to_bytes().unwrap();
        assert_eq!(bytes.len(), 5 + 8 + 8 * (5 + 15));
        let back = LdaProjection::from_bytes(&bytes).unwrap();
        assert_eq!(back, proj);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(LdaProjection::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            LdaProjection::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
