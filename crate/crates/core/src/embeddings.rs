//! Kernel mean embeddings of adjustment-variable distributions, expressed as
//! weight vectors over a set of anchor points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_gram, gram, KernelSpec};
use crate::numerics::{jittered_cholesky, psd_solve, PsdFactor};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Fitted conditional mean embedding operator `(K_ZZ + λ'I)⁻¹`.
#[derive(Debug, Clone)]
pub struct CmeOperatorFit {
    pub anchor_conditioning: DMatrix<f64>,
    pub anchor_adjustment: DMatrix<f64>,
    pub conditioning_kernel: KernelSpec,
    pub adjustment_kernel: KernelSpec,
    pub lambda: f64,
    pub scale_lambda_by_n: bool,
    factor: PsdFactor,
}

impl CmeOperatorFit {
    pub fn len(&self) -> usize {
        self.anchor_conditioning.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn factor(&self) -> &PsdFactor {
        &self.factor
    }

    /// Ridge actually added to the diagonal.
    pub fn effective_lambda(&self) -> f64 {
        effective_lambda(self.lambda, self.len(), self.scale_lambda_by_n)
    }
}

fn effective_lambda(lambda: f64, n: usize, scale: bool) -> f64 {
    if scale {
        lambda * n as f64
    } else {
        lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Conditional,
    MarginalUniform,
    ShiftedUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights {
    pub weights: DVector<f64>,
    pub kind: EmbeddingKind,
}

impl EmbeddingWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Same weights, tagged as an embedding of target-population samples.
    pub fn into_shifted(self) -> Self {
        Self {
            kind: EmbeddingKind::ShiftedUniform,
            ..self
        }
    }
}

pub fn fit_cme(
    conditioning: &DMatrix<f64>,
    adjustment: &DMatrix<f64>,
    conditioning_kernel: KernelSpec,
    adjustment_kernel: KernelSpec,
    lambda: f64,
    scale_lambda_by_n: bool,
) -> Result<CmeOperatorFit> {
    let n = conditioning.nrows();
    if n == 0 {
        return Err(Error::EmptyTraining);
    }
    if adjustment.nrows() != n {
        return Err(Error::LengthMismatch(n, adjustment.nrows()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidScale(lambda));
    }
    conditioning_kernel.validate()?;
    adjustment_kernel.validate()?;
    let mut k = gram(&conditioning_kernel, conditioning);
    let ridge = effective_lambda(lambda, n, scale_lambda_by_n);
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    let factor = jittered_cholesky(&k, 0.0).map_err(|e| Error::FactorizationFailure(e.to_string()))?;
    Ok(CmeOperatorFit {
        anchor_conditioning: conditioning.clone(),
        anchor_adjustment: adjustment.clone(),
        conditioning_kernel,
        adjustment_kernel,
        lambda,
        scale_lambda_by_n,
        factor,
    })
}

pub fn cme_weights(fit: &CmeOperatorFit, query: &[f64]) -> Result<EmbeddingWeights> {
    let q = DMatrix::from_row_slice(1, query.len(), query);
    let w = cme_weights_batch(fit, &q)?;
    Ok(EmbeddingWeights {
        weights: w.column(0).into_owned(),
        kind: EmbeddingKind::Conditional,
    })
}

/// Weights for several queries at once; column `j` belongs to query row `j`.
pub fn cme_weights_batch(fit: &CmeOperatorFit, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if queries.ncols() != fit.anchor_conditioning.ncols() {
        return Err(Error::DimensionMismatch {
            expected: fit.anchor_conditioning.ncols(),
            got: queries.ncols(),
        });
    }
    let k = cross_gram(&fit.conditioning_kernel, &fit.anchor_conditioning, queries)?;
    psd_solve(&fit.factor, &k)
}

pub fn uniform_weights(n: usize) -> Result<EmbeddingWeights> {
    if n == 0 {
        return Err(Error::ZeroCount);
    }
    Ok(EmbeddingWeights {
        weights: DVector::from_element(n, 1.0 / n as f64),
        kind: EmbeddingKind::MarginalUniform,
    })
}

/// An embedding together with the anchors and kernel it lives on.
#[derive(Debug, Clone, Copy)]
pub struct AnchoredEmbedding<'a> {
    pub weights: &'a EmbeddingWeights,
    pub anchors: &'a DMatrix<f64>,
    pub kernel: &'a KernelSpec,
}

/// `wᵀ K_{S S₂} w₂`.
pub fn embedding_inner(left: AnchoredEmbedding<'_>, right: AnchoredEmbedding<'_>) -> Result<f64> {
    if left.kernel != right.kernel {
        return Err(Error::KernelMismatch);
    }
    for side in [&left, &right] {
        if side.weights.len() != side.anchors.nrows() {
            return Err(Error::LengthMismatch(side.weights.len(), side.anchors.nrows()));
        }
    }
    let k = cross_gram(left.kernel, left.anchors, right.anchors)?;
    Ok(left.weights.weights.dot(&(k * &right.weights.weights)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_eval;
    use crate::rng::RandomStream;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn single_anchor_weight() {
        let fit = fit_cme(&col(&[0.3]), &col(&[1.0]), KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 0.2, false).unwrap();
        let w = cme_weights(&fit, &[0.3]).unwrap();
        assert!((w.weights[0] - 1.0 / 1.2).abs() < 1e-15);
        assert_eq!(w.kind, EmbeddingKind::Conditional);
        // n = 1 so the scaled ridge matches.
        let scaled = fit_cme(&col(&[0.3]), &col(&[1.0]), KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 0.2, true).unwrap();
        assert_eq!(scaled.effective_lambda(), 0.2);
    }

    #[test]
    fn far_query_vanishes() {
        let fit = fit_cme(&col(&[0.0, 1.0]), &col(&[0.0, 1.0]), KernelSpec::rbf(0.5), KernelSpec::rbf(1.0), 0.01, true).unwrap();
        let w = cme_weights(&fit, &[1e3]).unwrap();
        assert!(w.weights.iter().all(|v| v.abs() < 1e-300));
        assert!(matches!(cme_weights(&fit, &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn interpolation_limit() {
        let z = col(&[-1.0, -0.3, 0.2, 0.9, 1.7]);
        let fit = fit_cme(&z, &z, KernelSpec::rbf(0.5), KernelSpec::rbf(1.0), 1e-10, false).unwrap();
        for j in 0..5 {
            let w = cme_weights(&fit, &[z[(j, 0)]]).unwrap();
            for i in 0..5 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((w.weights[i] - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicated_anchors_and_determinism() {
        let z = col(&[0.5, 0.5, 0.5]);
        let a = fit_cme(&z, &z, KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 1e-14, false).unwrap();
        let b = fit_cme(&z, &z, KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 1e-14, false).unwrap();
        assert_eq!(a.factor().lower_triangular(), b.factor().lower_triangular());
    }

    #[test]
    fn ridge_shrinkage() {
        let mut rng = RandomStream::new(1, 0);
        let z = DMatrix::from_fn(20, 1, |_, _| rng.normal());
        let small = fit_cme(&z, &z, KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 1.0, false).unwrap();
        let big = fit_cme(&z, &z, KernelSpec::rbf(1.0), KernelSpec::rbf(1.0), 1e3, false).unwrap();
        let ws = cme_weights(&small, &[0.1]).unwrap().weights;
        let wb = cme_weights(&big, &[0.1]).unwrap().weights;
        assert!(wb.amax() < ws.amax());
        assert!(wb.amax() < 1e-3);
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_weights(1).unwrap().weights.as_slice(), &[1.0]);
        assert_eq!(uniform_weights(4).unwrap().weights.as_slice(), &[0.25; 4]);
        assert!((uniform_weights(7).unwrap().weights.sum() - 1.0).abs() <= 1e-15);
        assert!(matches!(uniform_weights(0), Err(Error::ZeroCount)));
        assert_eq!(uniform_weights(3).unwrap().into_shifted().kind, EmbeddingKind::ShiftedUniform);
    }

    #[test]
    fn inner_product_examples() {
        let k = KernelSpec::rbf(1.0);
        let s = col(&[0.4]);
        let point = EmbeddingWeights {
            weights: DVector::from_element(1, 1.0),
            kind: EmbeddingKind::Conditional,
        };
        let pe = AnchoredEmbedding { weights: &point, anchors: &s, kernel: &k };
        assert!((embedding_inner(pe, pe).unwrap() - 1.0).abs() < 1e-15);
        let u1 = uniform_weights(1).unwrap();
        let ue = AnchoredEmbedding { weights: &u1, anchors: &s, kernel: &k };
        assert!((embedding_inner(ue, pe).unwrap() - 1.0).abs() < 1e-15);

        // Two anchors with k = 0.5: r² = 2 ln 2 for unit RBF.
        let two = col(&[0.0, (2.0 * 2f64.ln()).sqrt()]);
        assert!((kernel_eval(&k, &[two[(0, 0)]], &[two[(1, 0)]]).unwrap() - 0.5).abs() < 1e-15);
        let u2 = uniform_weights(2).unwrap();
        let e2 = AnchoredEmbedding { weights: &u2, anchors: &two, kernel: &k };
        assert!((embedding_inner(e2, e2).unwrap() - 0.75).abs() < 1e-15);

        let other = KernelSpec::rbf(2.0);
        let eo = AnchoredEmbedding { weights: &u2, anchors: &two, kernel: &other };
        assert!(matches!(embedding_inner(e2, eo), Err(Error::KernelMismatch)));
    }

    #[test]
    fn deterministic_conditional_embedding() {
        // s = sin(2z), noiseless; the embedding of s|z should sit near φ(g(z)).
        let mut rng = RandomStream::new(2, 0);
        let n = 500;
        let z = DMatrix::from_fn(n, 1, |_, _| rng.uniform_range(-2.0, 2.0));
        let s = z.map(|v| (2.0 * v).sin());
        let ks = KernelSpec::rbf(1.0);
        let fit = fit_cme(&z, &s, KernelSpec::rbf(0.3), ks, 1e-3, false).unwrap();
        for q in [-1.5, -0.4, 0.0, 0.7, 1.6] {
            let w = cme_weights(&fit, &[q]).unwrap();
            let point = EmbeddingWeights {
                weights: DVector::from_element(1, 1.0),
                kind: EmbeddingKind::Conditional,
            };
            let g = col(&[(2.0 * q).sin()]);
            let a = AnchoredEmbedding { weights: &w, anchors: &s, kernel: &ks };
            let b = AnchoredEmbedding { weights: &point, anchors: &g, kernel: &ks };
            let mmd = embedding_inner(a, a).unwrap() - 2.0 * embedding_inner(a, b).unwrap() + embedding_inner(b, b).unwrap();
            assert!(mmd <= 0.05, "query {q}: {mmd}");
        }
    }

    proptest! {
        #[test]
        fn inner_is_psd_and_bilinear(
            s in proptest::collection::vec(-3.0f64..3.0, 5),
            w1 in proptest::collection::vec(-2.0f64..2.0, 5),
            w2 in proptest::collection::vec(-2.0f64..2.0, 5),
            c in -3.0f64..3.0,
        ) {
            let k = KernelSpec::rbf(0.8);
            let anchors = col(&s);
            let mk = |w: &[f64]| EmbeddingWeights { weights: DVector::from_column_slice(w), kind: EmbeddingKind::Conditional };
            let (a, b) = (mk(&w1), mk(&w2));
            let combo = mk(&(DVector::from_column_slice(&w1) * c + DVector::from_column_slice(&w2)).as_slice().to_vec());
            let e = |w| AnchoredEmbedding { weights: w, anchors: &anchors, kernel: &k };
            prop_assert!(embedding_inner(e(&a), e(&a)).unwrap() >= -1e-12);
            let lhs = embedding_inner(e(&combo), e(&b)).unwrap();
            let rhs = c * embedding_inner(e(&a), e(&b)).unwrap() + embedding_inner(e(&b), e(&b)).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
