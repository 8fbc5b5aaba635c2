use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::lda::{class_stats, LdaProjection};
use super::{from_na, lda_apply, length_normalize, mean_of, symmetrize, to_na, PldaMulti};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

pub const PLDA_MAGIC: &[u8; 5] = b"PLDA1";

const FLAG_LDA: u32 = 1;
const FLAG_LENGTH_NORM: u32 = 2;

/// Two-covariance Gaussian PLDA: `x = mu + F h + eps`, `h ~ N(0, I)`,
/// `eps ~ N(0, Sigma)`, held as `Sigma_tot = F F^T + Sigma` and
/// `Sigma_ac = F F^T`.
///
/// An optional LDA projection and length normalization are applied to raw
/// embeddings, in that order, before centering by `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    mean: Vec<f64>,
    sigma_tot: Matrix,
    sigma_ac: Matrix,
    latent_dim: usize,
    lda: Option<LdaProjection>,
    length_norm: bool,
    p: Matrix,
    q: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PldaOptions {
    pub latent_dim: usize,
    pub iters: usize,
    /// Apply LDA down to this many dimensions first.
    pub lda_dim: Option<usize>,
    pub length_norm: bool,
}

impl PldaOptions {
    pub fn new(latent_dim: usize, iters: usize) -> Self {
        PldaOptions {
            latent_dim,
            iters,
            lda_dim: None,
            length_norm: false,
        }
    }
}

/// Starting point for EM.
#[derive(Clone, Debug)]
pub struct PldaInit {
    /// `d x r` speaker loading matrix.
    pub loading: Matrix,
    /// `d x d` residual covariance.
    pub residual: Matrix,
}

#[derive(Clone, Debug)]
pub struct PldaFit {
    pub model: PldaModel,
    pub loading: Matrix,
    pub residual: Matrix,
    /// Total log-likelihood before the first and after every EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl PldaModel {
    /// Builds a model from its covariances and precomputes the scoring
    /// matrices. `Sigma_tot` and `Sigma_tot - Sigma_ac` must be positive
    /// definite.
    pub fn from_covariances(
        mean: Vec<f64>,
        sigma_tot: Matrix,
        sigma_ac: Matrix,
        latent_dim: usize,
    ) -> Result<Self> {
        let d = mean.len();
        for (name, m) in [("sigma_tot", &sigma_tot), ("sigma_ac", &sigma_ac)] {
            if m.shape() != (d, d) {
                return Err(Error::Shape {
                    op: "PldaModel::from_covariances",
                    left: format!("mean {d}"),
                    right: format!("{name} {:?}", m.shape()),
                });
            }
        }
        let (p, q) = scoring_matrices(&to_na(&sigma_tot), &to_na(&sigma_ac))?;
        Ok(PldaModel {
            mean,
            sigma_tot,
            sigma_ac,
            latent_dim,
            lda: None,
            length_norm: false,
            p: from_na(&p),
            q: from_na(&q),
        })
    }

    pub fn with_preprocessing(
        mut self,
        lda: Option<LdaProjection>,
        length_norm: bool,
    ) -> Result<Self> {
        if let Some(l) = &lda {
            if l.output_dim() != self.dim() {
                return Err(Error::Shape {
                    op: "PldaModel::with_preprocessing",
                    left: format!("lda output {}", l.output_dim()),
                    right: format!("plda dim {}", self.dim()),
                });
            }
        }
        self.lda = lda;
        self.length_norm = length_norm;
        Ok(self)
    }

    /// Dimension of the PLDA space (after LDA).
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dimension of raw embeddings accepted by the scoring functions.
    pub fn input_dim(&self) -> usize {
        self.lda
            .as_ref()
            .map_or(self.dim(), LdaProjection::input_dim)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma_tot(&self) -> &Matrix {
        &self.sigma_tot
    }

    pub fn sigma_ac(&self) -> &Matrix {
        &self.sigma_ac
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn lda(&self) -> Option<&LdaProjection> {
        self.lda.as_ref()
    }

    pub fn length_norm(&self) -> bool {
        self.length_norm
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    /// Raw embedding to the PLDA input space (LDA, then length norm).
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                op: "plda transform",
                left: format!("embedding {}", x.len()),
                right: format!("model input {}", self.input_dim()),
            });
        }
        let y = match &self.lda {
            Some(l) => lda_apply(l, x)?,
            None => x.to_vec(),
        };
        if self.length_norm {
            length_normalize(&y)
        } else {
            Ok(y)
        }
    }

    /// `a^T Q a + b^T Q b + 2 a^T P b` on transformed, uncentered vectors.
    fn score_transformed(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let a: Vec<f64> = a.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let b: Vec<f64> = b.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let qa = self.q.matvec(&a)?;
        let qb = self.q.matvec(&b)?;
        let pb = self.p.matvec(&b)?;
        Ok(dot(&a, &qa) + dot(&b, &qb) + 2.0 * dot(&a, &pb))
    }

    pub(crate) fn encode_into(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(PLDA_MAGIC);
        w.len_u32(self.dim(), "plda dim")?;
        w.len_u32(self.latent_dim, "plda latent dim")?;
        let flags = if self.lda.is_some() { FLAG_LDA } else { 0 }
            | if self.length_norm {
                FLAG_LENGTH_NORM
            } else {
                0
            };
        w.u32(flags);
        w.f64s(&self.mean);
        w.f64s(self.sigma_tot.as_slice());
        w.f64s(self.sigma_ac.as_slice());
        if let Some(l) = &self.lda {
            l.encode_into(w)?;
        }
        Ok(())
    }

    pub(crate) fn decode_from(r: &mut ByteReader) -> Result<Self> {
        r.expect_magic(PLDA_MAGIC)?;
        let at = r.offset();
        let d = r.u32("plda dim")? as usize;
        let latent = r.u32("plda latent dim")? as usize;
        let flags_at = r.offset();
        let flags = r.u32("plda flags")?;
        if d == 0 || latent > d {
            return Err(Error::format(
                at,
                format!("bad PLDA dims {d} / latent {latent}"),
            ));
        }
        if flags & !(FLAG_LDA | FLAG_LENGTH_NORM) != 0 {
            return Err(Error::format(
                flags_at,
                format!("unknown PLDA flags {flags:#x}"),
            ));
        }
        if r.remaining() < d.saturating_mul(2 * d + 1).saturating_mul(8) {
            return Err(Error::format(r.offset(), "truncated PLDA tensors"));
        }
        let mean = r.f64s(d, "plda mean")?;
        let tot = Matrix::from_vec(d, d, r.f64s(d * d, "sigma_tot")?)?;
        let ac_at = r.offset();
        let ac = Matrix::from_vec(d, d, r.f64s(d * d, "sigma_ac")?)?;
        let lda = if flags & FLAG_LDA != 0 {
            Some(LdaProjection::decode_from(r)?)
        } else {
            None
        };
        PldaModel::from_covariances(mean, tot, ac, latent)
            .and_then(|m| m.with_preprocessing(lda, flags & FLAG_LENGTH_NORM != 0))
            .map_err(|e| Error::format(ac_at, format!("inconsistent PLDA model: {e}")))
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

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::Degenerate(format!("{what} is not positive definite")))
}

/// `P = T^-1 A B^-1`, `Q = T^-1 - B^-1` with `B = T - A T^-1 A`, computed
/// with Cholesky solves.
fn scoring_matrices(tot: &DMatrix<f64>, ac: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = tot.nrows();
    let tc = cholesky(tot, "Sigma_tot")?;
    let t_inv_a = tc.solve(ac);
    let mut b = tot - ac * &t_inv_a;
    symmetrize(&mut b);
    let bc = cholesky(&b, "Sigma_tot - Sigma_ac Sigma_tot^-1 Sigma_ac")?;
    let b_inv = bc.solve(&DMatrix::identity(d, d));
    let mut p = t_inv_a * &b_inv;
    let mut q = tc.solve(&DMatrix::identity(d, d)) - b_inv;
    symmetrize(&mut p);
    symmetrize(&mut q);
    Ok((p, q))
}

/// Sufficient statistics of the centered training data.
struct EmStats {
    /// Per speaker: utterance count and sum of centered vectors.
    speakers: Vec<(f64, DVector<f64>)>,
    /// Sum of `x x^T` over all centered records.
    sxx: DMatrix<f64>,
    records: f64,
}

fn em_stats(pool: &EmbeddingSet, mean: &DVector<f64>) -> EmStats {
    let d = pool.dim();
    let mut sxx = DMatrix::zeros(d, d);
    let mut speakers = Vec::new();
    for (_, idx) in pool.speakers() {
        let mut s = DVector::zeros(d);
        for &i in &idx {
            let x = DVector::from_column_slice(&pool.records()[i].vector) - mean;
            sxx.ger(1.0, &x, &x, 1.0);
            s += x;
        }
        speakers.push((idx.len() as f64, s));
    }
    EmStats {
        speakers,
        sxx,
        records: pool.len() as f64,
    }
}

fn regularized_cholesky(sigma: &mut DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(sigma.clone()) {
        return Ok(c);
    }
    let d = sigma.nrows();
    let ridge = 1e-8 * (sigma.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
    log::warn!("residual covariance not positive definite; adding ridge {ridge:e}");
    for i in 0..d {
        sigma[(i, i)] += ridge;
    }
    cholesky(sigma, "residual covariance")
}

/// One E-step evaluation: total log-likelihood of the data under `(F, Sigma)`
/// plus the statistics needed by the M-step.
struct EStep {
    log_likelihood: f64,
    /// `sum_i s_i m_i^T`, `d x r`.
    s_m: DMatrix<f64>,
    /// `sum_i n_i E[h_i h_i^T]`, `r x r`.
    n_hh: DMatrix<f64>,
}

fn e_step(stats: &EmStats, f: &DMatrix<f64>, sigma: &mut DMatrix<f64>) -> Result<EStep> {
    let (d, r) = (f.nrows(), f.ncols());
    let sc = regularized_cholesky(sigma)?;
    let log_det_sigma = 2.0 * sc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sinv_f = sc.solve(f);
    let g = f.transpose() * &sinv_f;
    // trace(Sigma^-1 Sxx) covers sum x^T Sigma^-1 x over all records
    let quad_all = sc.solve(&stats.sxx).trace();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut ll = -0.5 * (stats.records * (d as f64 * ln_2pi + log_det_sigma) + quad_all);
    let mut s_m = DMatrix::zeros(d, r);
    let mut n_hh = DMatrix::zeros(r, r);
    for (n, s) in &stats.speakers {
        let lambda = DMatrix::identity(r, r) + &g * *n;
        let lc = cholesky(&lambda, "speaker posterior precision")?;
        let b = sinv_f.transpose() * s;
        let m = lc.solve(&b);
        let log_det_lambda = 2.0 * lc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        ll -= 0.5 * (log_det_lambda - b.dot(&m));
        s_m.ger(1.0, s, &m, 1.0);
        let mut hh = lc.inverse();
        hh.ger(1.0, &m, &m, 1.0);
        n_hh += hh * *n;
    }
    Ok(EStep {
        log_likelihood: ll,
        s_m,
        n_hh,
    })
}

fn m_step(stats: &EmStats, e: &EStep) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nc = cholesky(&e.n_hh, "accumulated latent second moment")?;
    // F = S_m (N_hh)^-1, solved from the symmetric side
    let f = nc.solve(&e.s_m.transpose()).transpose();
    let mut sigma = (&stats.sxx - &f * e.s_m.transpose()) / stats.records;
    symmetrize(&mut sigma);
    Ok((f, sigma))
}

/// Default starting point: loading from the leading eigenvectors of the
/// between-class scatter, residual from the within-class scatter.
fn default_init(pool: &EmbeddingSet, latent_dim: usize) -> Result<PldaInit> {
    let stats = class_stats(pool)?;
    let d = pool.dim();
    let eig = SymmetricEigen::new(stats.between);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let f = DMatrix::from_fn(d, latent_dim, |row, c| {
        let k = order[c];
        eig.eigenvectors[(row, k)] * eig.eigenvalues[k].max(0.0).sqrt()
    });
    Ok(PldaInit {
        loading: from_na(&f),
        residual: from_na(&stats.within),
    })
}

fn check_latent(d: usize, latent_dim: usize) -> Result<()> {
    if latent_dim == 0 || latent_dim > d {
        return Err(Error::InvalidArgument(format!(
            "PLDA latent dim must be in 1..={d}, got {latent_dim}"
        )));
    }
    Ok(())
}

/// EM from an explicit starting point on already-transformed data. Fails
/// with [`Error::NonMonotoneLikelihood`] if an iteration lowers the
/// log-likelihood by more than `1e-8 * max(1, |ll|)`.
pub fn plda_fit_from(pool: &EmbeddingSet, init: &PldaInit, iters: usize) -> Result<PldaFit> {
    let d = pool.dim();
    let r = init.loading.cols();
    check_latent(d, r)?;
    if init.loading.rows() != d || init.residual.shape() != (d, d) {
        return Err(Error::Shape {
            op: "plda_fit_from",
            left: format!("data dim {d}"),
            right: format!(
                "loading {:?}, residual {:?}",
                init.loading.shape(),
                init.residual.shape()
            ),
        });
    }
    let groups = pool.speakers();
    if groups.len() < 2 || groups.iter().any(|(_, idx)| idx.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "PLDA needs >= 2 speakers with >= 2 utterances each, got {} speakers",
            groups.len()
        )));
    }
    let mut mean = DVector::zeros(d);
    for rec in pool.records() {
        mean += DVector::from_column_slice(&rec.vector);
    }
    mean /= pool.len() as f64;
    let stats = em_stats(pool, &mean);

    let mut f = to_na(&init.loading);
    let mut sigma = to_na(&init.residual);
    symmetrize(&mut sigma);
    let mut e = e_step(&stats, &f, &mut sigma)?;
    let mut history = vec![e.log_likelihood];
    for it in 1..=iters {
        let (nf, mut ns) = m_step(&stats, &e)?;
        let next = e_step(&stats, &nf, &mut ns)?;
        let before = e.log_likelihood;
        let after = next.log_likelihood;
        if after < before - 1e-8 * before.abs().max(1.0) {
            return Err(Error::NonMonotoneLikelihood {
                iteration: it,
                before,
                after,
            });
        }
        log::debug!("plda em iteration {it}: log-likelihood {after:.6}");
        history.push(after);
        f = nf;
        sigma = ns;
        e = next;
    }

    let mut ac = &f * f.transpose();
    symmetrize(&mut ac);
    let tot = &ac + &sigma;
    let model = PldaModel::from_covariances(
        mean.iter().copied().collect(),
        from_na(&tot),
        from_na(&ac),
        r,
    )?;
    Ok(PldaFit {
        model,
        loading: from_na(&f),
        residual: from_na(&sigma),
        log_likelihood: history,
    })
}

/// Fits optional LDA, optional length normalization and PLDA on `pool`.
pub fn plda_fit(pool: &EmbeddingSet, options: &PldaOptions) -> Result<PldaFit> {
    let lda = match options.lda_dim {
        Some(k) => Some(super::lda_fit(pool, k)?.projection),
        None => None,
    };
    let transformed = pool.map_vectors(|x| {
        let y = match &lda {
            Some(l) => lda_apply(l, x)?,
            None => x.to_vec(),
        };
        if options.length_norm {
            length_normalize(&y)
        } else {
            Ok(y)
        }
    })?;
    check_latent(transformed.dim(), options.latent_dim)?;
    let init = default_init(&transformed, options.latent_dim)?;
    let mut fit = plda_fit_from(&transformed, &init, options.iters)?;
    fit.model = fit.model.with_preprocessing(lda, options.length_norm)?;
    Ok(fit)
}

/// Symmetric PLDA verification score of two raw embeddings.
pub fn plda_score(model: &PldaModel, a: &[f64], b: &[f64]) -> Result<f64> {
    model.score_transformed(&model.transform(a)?, &model.transform(b)?)
}

/// Scores a multi-utterance enrollment by reducing it to one vector in the
/// PLDA space first.
pub fn plda_score_multi<R: AsRef<[f64]>>(
    model: &PldaModel,
    enroll: &[R],
    test: &[f64],
    mode: PldaMulti,
) -> Result<f64> {
    if enroll.is_empty() {
        return Err(Error::InvalidArgument("empty enrollment list".into()));
    }
    let vecs = enroll
        .iter()
        .map(|e| {
            let t = model.transform(e.as_ref())?;
            match mode {
                PldaMulti::Mean => Ok(t),
                PldaMulti::ConcatEmbeddings => length_normalize(&t),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let enrolled = if vecs.len() == 1 {
        vecs.into_iter().next().expect("one element")
    } else {
        mean_of(&vecs)?
    };
    model.score_transformed(&enrolled, &model.transform(test)?)
}
