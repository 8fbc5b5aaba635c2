//! Forward and analytic backward passes of the attention back-end.
//!
//! Enrollment embeddings are stacked into `E (K x D)`. A residual multi-head
//! scaled-dot self-attention block maps `E` to `H`, a multi-head feed-forward
//! attention pooling maps `H` to one vector `h`, and a test embedding `q` is
//! scored with `sigmoid(scale * cos(q, h) + offset)`.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sigmoid, softmax_in_place, softmax_rows, Matrix};

use super::params::AttentionBackendParams;

#[derive(Clone, Debug)]
pub struct SdsaHeadTrace {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// Row-stochastic `K x K` attention probabilities.
    pub attention: Matrix,
}

#[derive(Clone, Debug)]
pub struct SdsaTrace {
    pub input: Matrix,
    pub heads: Vec<SdsaHeadTrace>,
    /// Concatenated head outputs, `K x D`.
    pub concat: Matrix,
}

#[derive(Clone, Debug)]
pub struct PoolHeadTrace {
    /// Column slice of `H` owned by this head, `K x D/heads`.
    pub slice: Matrix,
    /// `tanh(slice · projᵀ)`, `K x hidden`.
    pub activation: Matrix,
    /// Convex weights over the `K` rows.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PoolTrace {
    pub heads: Vec<PoolHeadTrace>,
}

#[derive(Clone, Debug)]
pub struct ScoreTrace {
    pub test: Vec<f64>,
    pub pooled: Vec<f64>,
    pub test_norm: f64,
    pub pooled_norm: f64,
    pub cosine: f64,
    pub logit: f64,
    pub prob: f64,
}

/// Intermediates of the enrollment aggregation (self-attention + pooling).
#[derive(Clone, Debug)]
pub struct AggregateTrace {
    pub sdsa: SdsaTrace,
    pub hidden: Matrix,
    pub pool: PoolTrace,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub aggregate: AggregateTrace,
    pub score: ScoreTrace,
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct BackendGradients {
    pub params: AttentionBackendParams,
    /// `dP/dE`, `K x D`.
    pub enroll: Matrix,
    pub test: Vec<f64>,
}

fn check_input(e: &Matrix, params: &AttentionBackendParams, op: &'static str) -> Result<()> {
    let d = params.config().dim;
    if e.rows() == 0 || e.cols() != d {
        return Err(Error::Shape {
            op,
            left: format!("{}x{}", e.rows(), e.cols()),
            right: format!("Kx{d} with K >= 1"),
        });
    }
    Ok(())
}

/// `H = Concat(H_1..H_heads) · W_out + E` with
/// `H_i = softmax(E Wq_i (E Wk_i)ᵀ / sqrt(D/heads)) · E Wv_i`.
pub fn sdsa_forward(e: &Matrix, params: &AttentionBackendParams) -> Result<(Matrix, SdsaTrace)> {
    check_input(e, params, "sdsa_forward")?;
    let cfg = params.config();
    let hd = cfg.sdsa_head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut concat = Matrix::zeros(e.rows(), cfg.dim);
    let mut heads = Vec::with_capacity(cfg.sdsa_heads);
    for i in 0..cfg.sdsa_heads {
        let query = e.matmul(&params.query[i])?;
        let key = e.matmul(&params.key[i])?;
        let value = e.matmul(&params.value[i])?;
        let attention = softmax_rows(&query.matmul_t(&key)?.scale(inv_sqrt));
        concat.set_column_block(i * hd, &attention.matmul(&value)?);
        heads.push(SdsaHeadTrace {
            query,
            key,
            value,
            attention,
        });
    }
    let h = concat.matmul(&params.output)?.add(e)?;
    Ok((
        h,
        SdsaTrace {
            input: e.clone(),
            heads,
            concat,
        },
    ))
}

/// `h = Concat(h_1..h_heads)` with `h_j = softmax(v_j · tanh(W_j H̃_jᵀ)) H̃_j`.
pub fn ffsa_forward(h: &Matrix, params: &AttentionBackendParams) -> Result<(Vec<f64>, PoolTrace)> {
    check_input(h, params, "ffsa_forward")?;
    let cfg = params.config();
    let pd = cfg.ffsa_head_dim();
    let mut pooled = vec![0.0; cfg.dim];
    let mut heads = Vec::with_capacity(cfg.ffsa_heads);
    for j in 0..cfg.ffsa_heads {
        let slice = h.column_block(j * pd, pd);
        let activation = slice.matmul_t(&params.pool_proj[j])?.map(f64::tanh);
        let mut weights = activation.matvec(&params.pool_context[j])?;
        softmax_in_place(&mut weights);
        let out = &mut pooled[j * pd..(j + 1) * pd];
        for (k, &w) in weights.iter().enumerate() {
            crate::numerics::axpy(out, w, slice.row(k));
        }
        heads.push(PoolHeadTrace {
            slice,
            activation,
            weights,
        });
    }
    Ok((pooled, PoolTrace { heads }))
}

/// Calibrated cosine score; returns `(P, s)`.
pub fn score(test: &[f64], pooled: &[f64], params: &AttentionBackendParams) -> Result<(f64, f64)> {
    let t = score_traced(test, pooled, params)?;
    Ok((t.prob, t.logit))
}

pub fn score_traced(
    test: &[f64],
    pooled: &[f64],
    params: &AttentionBackendParams,
) -> Result<ScoreTrace> {
    let d = params.config().dim;
    if test.len() != d || pooled.len() != d {
        return Err(Error::Shape {
            op: "score",
            left: format!("test of length {}", test.len()),
            right: format!("pooled of length {} (dim {d})", pooled.len()),
        });
    }
    let test_norm = norm(test);
    let pooled_norm = norm(pooled);
    if !(test_norm > 0.0) || !(pooled_norm > 0.0) {
        return Err(Error::Degenerate(
            "zero-norm embedding cannot be scored".into(),
        ));
    }
    let cosine = dot(test, pooled) / (test_norm * pooled_norm);
    let logit = params.scale * cosine + params.offset;
    Ok(ScoreTrace {
        test: test.to_vec(),
        pooled: pooled.to_vec(),
        test_norm,
        pooled_norm,
        cosine,
        logit,
        prob: sigmoid(logit),
    })
}

/// Self-attention followed by pooling: `E -> h`.
pub fn aggregate(
    e: &Matrix,
    params: &AttentionBackendParams,
) -> Result<(Vec<f64>, AggregateTrace)> {
    let (hidden, sdsa) = sdsa_forward(e, params)?;
    let (pooled, pool) = ffsa_forward(&hidden, params)?;
    Ok((
        pooled.clone(),
        AggregateTrace {
            sdsa,
            hidden,
            pool,
            pooled,
        },
    ))
}

/// End-to-end probability that `test` belongs to the speaker of `enroll`.
pub fn backend_forward<R: AsRef<[f64]>>(
    enroll: &[R],
    test: &[f64],
    params: &AttentionBackendParams,
) -> Result<(f64, ForwardTrace)> {
    let e = Matrix::from_rows(enroll)?;
    let (pooled, aggregate_trace) = aggregate(&e, params)?;
    let score = score_traced(test, &pooled, params)?;
    Ok((
        score.prob,
        ForwardTrace {
            aggregate: aggregate_trace,
            score,
        },
    ))
}

/// Backward through the calibrated cosine. Accumulates into `grads.scale` and
/// `grads.offset`; returns `(dP/dq, dP/dh)` scaled by `dp`.
pub fn score_backward(
    trace: &ScoreTrace,
    dp: f64,
    params: &AttentionBackendParams,
    grads: &mut AttentionBackendParams,
) -> (Vec<f64>, Vec<f64>) {
    let ds = dp * trace.prob * (1.0 - trace.prob);
    grads.scale += ds * trace.cosine;
    grads.offset += ds;
    let dc = ds * params.scale;
    let inv = 1.0 / (trace.test_norm * trace.pooled_norm);
    let c = trace.cosine;
    let qq = trace.test_norm * trace.test_norm;
    let hh = trace.pooled_norm * trace.pooled_norm;
    let dtest = trace
        .test
        .iter()
        .zip(&trace.pooled)
        .map(|(&q, &h)| dc * (h * inv - c * q / qq))
        .collect();
    let dpooled = trace
        .test
        .iter()
        .zip(&trace.pooled)
        .map(|(&q, &h)| dc * (q * inv - c * h / hh))
        .collect();
    (dtest, dpooled)
}

/// Backward through pooling; accumulates into `grads`, returns `dH`.
pub fn ffsa_backward(
    trace: &PoolTrace,
    dpooled: &[f64],
    params: &AttentionBackendParams,
    grads: &mut AttentionBackendParams,
) -> Result<Matrix> {
    let cfg = params.config();
    let pd = cfg.ffsa_head_dim();
    let k = trace.heads.first().map_or(0, |h| h.slice.rows());
    let mut dh = Matrix::zeros(k, cfg.dim);
    for (j, head) in trace.heads.iter().enumerate() {
        let g = &dpooled[j * pd..(j + 1) * pd];
        // pooled_j = Σ_k w_k x_k
        let mut dslice = Matrix::from_fn(k, pd, |r, c| head.weights[r] * g[c]);
        let dw: Vec<f64> = (0..k).map(|r| dot(head.slice.row(r), g)).collect();
        let mean: f64 = head.weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
        let dz: Vec<f64> = head
            .weights
            .iter()
            .zip(&dw)
            .map(|(w, d)| w * (d - mean))
            .collect();
        // z = activation · context
        let dcontext = head
            .activation
            .t_matmul(&Matrix::from_vec(k, 1, dz.clone())?)?;
        crate::numerics::axpy(&mut grads.pool_context[j], 1.0, dcontext.as_slice());
        let ctx = &params.pool_context[j];
        let du = Matrix::from_fn(k, cfg.ffsa_hidden, |r, c| {
            let t = head.activation[(r, c)];
            dz[r] * ctx[c] * (1.0 - t * t)
        });
        // activation = tanh(slice · projᵀ)
        grads.pool_proj[j].axpy(1.0, &du.t_matmul(&head.slice)?);
        dslice.axpy(1.0, &du.matmul(&params.pool_proj[j])?);
        dh.set_column_block(j * pd, &dslice);
    }
    Ok(dh)
}

/// Backward through residual self-attention; accumulates into `grads`,
/// returns `dE`.
pub fn sdsa_backward(
    trace: &SdsaTrace,
    dh: &Matrix,
    params: &AttentionBackendParams,
    grads: &mut AttentionBackendParams,
) -> Result<Matrix> {
    let cfg = params.config();
    let hd = cfg.sdsa_head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let e = &trace.input;
    let mut de = dh.clone();
    grads.output.axpy(1.0, &trace.concat.t_matmul(dh)?);
    let dconcat = dh.matmul_t(&params.output)?;
    for (i, head) in trace.heads.iter().enumerate() {
        let dhead = dconcat.column_block(i * hd, hd);
        let dattn = dhead.matmul_t(&head.value)?;
        let dvalue = head.attention.t_matmul(&dhead)?;
        // row-wise softmax backward, folded with the 1/sqrt(d) scaling
        let mut dscores = Matrix::zeros(dattn.rows(), dattn.cols());
        for r in 0..dattn.rows() {
            let a = head.attention.row(r);
            let g = dattn.row(r);
            let m = dot(a, g);
            for (c, out) in dscores.row_mut(r).iter_mut().enumerate() {
                *out = a[c] * (g[c] - m) * inv_sqrt;
            }
        }
        let dquery = dscores.matmul(&head.key)?;
        let dkey = dscores.t_matmul(&head.query)?;
        grads.query[i].axpy(1.0, &e.t_matmul(&dquery)?);
        grads.key[i].axpy(1.0, &e.t_matmul(&dkey)?);
        grads.value[i].axpy(1.0, &e.t_matmul(&dvalue)?);
        de.axpy(1.0, &dquery.matmul_t(&params.query[i])?);
        de.axpy(1.0, &dkey.matmul_t(&params.key[i])?);
        de.axpy(1.0, &dvalue.matmul_t(&params.value[i])?);
    }
    Ok(de)
}

/// Backward through [`aggregate`]; accumulates into `grads`, returns `dE`.
pub fn aggregate_backward(
    trace: &AggregateTrace,
    dpooled: &[f64],
    params: &AttentionBackendParams,
    grads: &mut AttentionBackendParams,
) -> Result<Matrix> {
    let dhidden = ffsa_backward(&trace.pool, dpooled, params, grads)?;
    sdsa_backward(&trace.sdsa, &dhidden, params, grads)
}

/// Gradients of `dp · P` with respect to every parameter and both inputs.
pub fn backend_backward(
    trace: &ForwardTrace,
    dp: f64,
    params: &AttentionBackendParams,
) -> Result<BackendGradients> {
    let mut grads = params.zeros_like();
    let (dtest, dpooled) = score_backward(&trace.score, dp, params, &mut grads);
    let denroll = aggregate_backward(&trace.aggregate, &dpooled, params, &mut grads)?;
    Ok(BackendGradients {
        params: grads,
        enroll: denroll,
        test: dtest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackendConfig;
    use crate::numerics::{grad_check, Rng};

    fn setup(
        seed: u64,
        d: usize,
        d1: usize,
        d2: usize,
        hidden: usize,
    ) -> (AttentionBackendParams, Rng) {
        let cfg = BackendConfig::new(d, d1, d2, hidden).unwrap();
        let mut rng = Rng::new(seed);
        let p = AttentionBackendParams::init(cfg, &mut rng).unwrap();
        (p, rng)
    }

    fn random_rows(rng: &mut Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (mut p, mut rng) = setup(1, 8, 2, 2, 5);
        p.output = Matrix::zeros(8, 8);
        let e = Matrix::from_rows(&random_rows(&mut rng, 4, 8)).unwrap();
        let (h, _) = sdsa_forward(&e, &p).unwrap();
        assert_eq!(h, e);
    }

    #[test]
    fn singleton_self_attention() {
        let (p, mut rng) = setup(2, 8, 2, 2, 5);
        let e = Matrix::from_rows(&random_rows(&mut rng, 1, 8)).unwrap();
        let (h, trace) = sdsa_forward(&e, &p).unwrap();
        for head in &trace.heads {
            assert_eq!(head.attention.as_slice(), &[1.0]);
        }
        let mut concat = Matrix::zeros(1, 8);
        for i in 0..2 {
            concat.set_column_block(i * 4, &e.matmul(&p.value[i]).unwrap());
        }
        let want = concat.matmul(&p.output).unwrap().add(&e).unwrap();
        assert_eq!(h, want);
    }

    #[test]
    fn sdsa_is_permutation_equivariant() {
        let (p, mut rng) = setup(3, 8, 2, 2, 5);
        let rows = random_rows(&mut rng, 4, 8);
        let perm = [2, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| rows[i].clone()).collect();
        let (h, _) = sdsa_forward(&Matrix::from_rows(&rows).unwrap(), &p).unwrap();
        let (hp, _) = sdsa_forward(&Matrix::from_rows(&permuted).unwrap(), &p).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in hp.row(r).iter().zip(h.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_singleton_and_identical_rows() {
        let (p, mut rng) = setup(4, 8, 2, 2, 5);
        let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let (h1, _) =
            ffsa_forward(&Matrix::from_rows(std::slice::from_ref(&row)).unwrap(), &p).unwrap();
        assert_eq!(h1, row);
        let same = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let (h3, _) = ffsa_forward(&same, &p).unwrap();
        for (a, b) in h3.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant_and_convex() {
        let (p, mut rng) = setup(5, 8, 2, 2, 5);
        let rows = random_rows(&mut rng, 5, 8);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let (h, trace) = ffsa_forward(&Matrix::from_rows(&rows).unwrap(), &p).unwrap();
        let (hs, _) = ffsa_forward(&Matrix::from_rows(&shuffled).unwrap(), &p).unwrap();
        for (a, b) in h.iter().zip(&hs) {
            assert!((a - b).abs() < 1e-12);
        }
        for head in &trace.heads {
            assert!(head.weights.iter().all(|&w| w >= 0.0));
            assert!((head.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // every coordinate lies between the min and max of its column
        for c in 0..8 {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(h[c] >= lo - 1e-12 && h[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn score_closed_forms() {
        let cfg = BackendConfig::new(2, 1, 1, 1).unwrap();
        let mut p = AttentionBackendParams::zeros(cfg).unwrap();
        p.scale = 1.0;
        p.offset = 0.0;
        let (prob, s) = score(&[1.0, 2.0], &[1.0, 2.0], &p).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!((prob - 0.731_058_578_630_004_9).abs() < 1e-12);
        let (prob, _) = score(&[1.0, 0.0], &[0.0, 3.0], &p).unwrap();
        assert_eq!(prob, 0.5);
        p.scale = 2.0;
        p.offset = 1.0;
        let (prob, s) = score(&[1.0, -1.0], &[-1.0, 1.0], &p).unwrap();
        assert!((s + 1.0).abs() < 1e-15);
        assert!((prob - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(matches!(
            score(&[0.0, 0.0], &[1.0, 0.0], &p),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn end_to_end_special_cases() {
        let (mut p, mut rng) = setup(6, 8, 2, 2, 5);
        p.output = Matrix::zeros(8, 8);
        let test: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let enroll = random_rows(&mut rng, 1, 8);
        let (prob, _) = backend_forward(&enroll, &test, &p).unwrap();
        let (direct, _) = score(&test, &enroll[0], &p).unwrap();
        assert_eq!(prob, direct);

        p.scale = 1.0;
        p.offset = 0.0;
        let repeated = vec![test.clone(); 3];
        let (prob, _) = backend_forward(&repeated, &test, &p).unwrap();
        assert!((prob - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient() {
        let (p, mut rng) = setup(7, 8, 2, 2, 5);
        let enroll = random_rows(&mut rng, 3, 8);
        let test: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let (_, trace) = backend_forward(&enroll, &test, &p).unwrap();
        let g = backend_backward(&trace, 0.0, &p).unwrap();
        assert!(g.params.to_flat().iter().all(|&x| x == 0.0));
        assert!(g.enroll.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.test.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn offset_gradient_is_logistic_derivative() {
        let (p, mut rng) = setup(8, 8, 2, 2, 5);
        let enroll = random_rows(&mut rng, 3, 8);
        let test: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let (prob, trace) = backend_forward(&enroll, &test, &p).unwrap();
        let g = backend_backward(&trace, 0.7, &p).unwrap();
        assert!((g.params.offset - 0.7 * prob * (1.0 - prob)).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (p, mut rng) = setup(100 + seed, 8, 2, 2, 5);
            let enroll = random_rows(&mut rng, 3, 8);
            let test: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let (_, trace) = backend_forward(&enroll, &test, &p).unwrap();
            let g = backend_backward(&trace, 1.0, &p).unwrap();

            let mut probe = p.clone();
            let err = grad_check(
                |x| {
                    probe.set_from_flat(x).unwrap();
                    backend_forward(&enroll, &test, &probe).unwrap().0
                },
                &p.to_flat(),
                &g.params.to_flat(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: parameter gradient error {err}");

            let flat_e: Vec<f64> = enroll.concat();
            let err = grad_check(
                |x| {
                    let rows: Vec<&[f64]> = x.chunks(8).collect();
                    backend_forward(&rows, &test, &p).unwrap().0
                },
                &flat_e,
                g.enroll.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: enrollment gradient error {err}");

            let err = grad_check(
                |x| backend_forward(&enroll, x, &p).unwrap().0,
                &test,
                &g.test,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: test gradient error {err}");
        }
    }

    #[test]
    fn init_smoke_sweep() {
        for seed in 0..100 {
            let (p, mut rng) = setup(seed, 16, 4, 4, 8);
            let k = 1 + rng.below(5);
            let enroll = random_rows(&mut rng, k, 16);
            let test: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let (prob, _) = backend_forward(&enroll, &test, &p).unwrap();
            assert!(prob > 0.0 && prob < 1.0 && prob.is_finite());
        }
    }

    #[test]
    fn shape_errors() {
        let (p, _) = setup(9, 8, 2, 2, 5);
        assert!(sdsa_forward(&Matrix::zeros(3, 4), &p).is_err());
        assert!(sdsa_forward(&Matrix::zeros(0, 8), &p).is_err());
        assert!(backend_forward(&[vec![1.0; 8]], &[1.0; 7], &p).is_err());
    }
}
