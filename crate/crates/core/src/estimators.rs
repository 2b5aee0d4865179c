//! Posterior mean and covariance of causal quantities over an interest set.
//!
//! Every interest point is represented as an "embedded" input: a treatment
//! value, an optional conditioning value, and a weighted set of adjustment
//! anchors. The CME estimator uses ridge weights over the observed
//! adjustment rows; the Monte-Carlo estimator uses uniform weights over
//! sampled adjustment values. Both then share the same linear algebra.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embeddings::{cme_weights_batch, CmeOperatorFit, EmbeddingWeights};
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::kernels::{cross_gram, pairwise_sqdist, KernelSpec, ProductKernelSpec, Rows};
use crate::numerics::{median_heuristic_or_default, symmetrize};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CqKind {
    Cate,
    Ate,
    Att,
    Ateds,
}

impl CqKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CqKind::Cate => "cate",
            CqKind::Ate => "ate",
            CqKind::Att => "att",
            CqKind::Ateds => "ateds",
        }
    }
}

impl fmt::Display for CqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CqKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cate" => Ok(CqKind::Cate),
            "ate" => Ok(CqKind::Ate),
            "att" => Ok(CqKind::Att),
            "ateds" => Ok(CqKind::Ateds),
            other => Err(Error::InvalidArgument(format!("unknown causal quantity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestPoint {
    pub treatment: f64,
    /// Effect-modifier value `z` (CATE only).
    pub conditioning: Option<Vec<f64>>,
    /// Treatment defining the treated subpopulation `ã` (ATT only).
    pub prior_treatment: Option<f64>,
}

impl InterestPoint {
    pub fn cate(treatment: f64, z: Vec<f64>) -> Self {
        Self {
            treatment,
            conditioning: Some(z),
            prior_treatment: None,
        }
    }

    pub fn marginal(treatment: f64) -> Self {
        Self {
            treatment,
            conditioning: None,
            prior_treatment: None,
        }
    }

    pub fn att(treatment: f64, prior_treatment: f64) -> Self {
        Self {
            treatment,
            conditioning: None,
            prior_treatment: Some(prior_treatment),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestSet {
    pub kind: CqKind,
    pub points: Vec<InterestPoint>,
}

impl InterestSet {
    pub fn new(kind: CqKind, points: Vec<InterestPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::ZeroCount);
        }
        let dz = points[0].conditioning.as_ref().map(Vec::len);
        for p in &points {
            let ok = match kind {
                CqKind::Cate => {
                    p.prior_treatment.is_none() && p.conditioning.as_ref().map(Vec::len) == dz && dz.unwrap_or(0) > 0
                }
                CqKind::Att => p.conditioning.is_none() && p.prior_treatment.is_some(),
                CqKind::Ate | CqKind::Ateds => p.conditioning.is_none() && p.prior_treatment.is_none(),
            };
            if !ok {
                return Err(Error::InconsistentKind(format!("{kind} interest point {p:?}")));
            }
        }
        Ok(Self { kind, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The value the adjustment distribution is conditioned on at point `i`.
    fn embedding_query(&self, i: usize) -> Option<Vec<f64>> {
        let p = &self.points[i];
        match self.kind {
            CqKind::Cate => p.conditioning.clone(),
            CqKind::Att => p.prior_treatment.map(|t| vec![t]),
            CqKind::Ate | CqKind::Ateds => None,
        }
    }

    fn query_matrix(&self) -> Option<DMatrix<f64>> {
        let first = self.embedding_query(0)?;
        let d = first.len();
        let mut m = DMatrix::zeros(self.len(), d);
        for i in 0..self.len() {
            let q = self.embedding_query(i).unwrap();
            for (k, v) in q.iter().enumerate() {
                m[(i, k)] = *v;
            }
        }
        Some(m)
    }

    /// Treatment and (for CATE) conditioning blocks; the adjustment block is
    /// empty because it is replaced by an embedding.
    fn outer_rows(&self) -> Rows {
        let a: Vec<f64> = self.points.iter().map(|p| p.treatment).collect();
        let z = if self.kind == CqKind::Cate {
            let d = self.points[0].conditioning.as_ref().unwrap().len();
            Some(DMatrix::from_fn(self.len(), d, |i, k| self.points[i].conditioning.as_ref().unwrap()[k]))
        } else {
            None
        };
        Rows::new(&a, z, DMatrix::zeros(self.len(), 0)).expect("consistent interest rows")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSource {
    CmeClosedForm,
    McSampling,
}

/// Interest points as weighted sets of adjustment anchors.
#[derive(Debug, Clone)]
pub struct EmbeddedInterest {
    outer: Rows,
    groups: Vec<DMatrix<f64>>,
    /// Per group: member point indices and their weights as columns.
    members: Vec<(Vec<usize>, DMatrix<f64>)>,
}

impl EmbeddedInterest {
    fn new(outer: Rows, groups: Vec<DMatrix<f64>>, membership: &[usize], weights: &[DVector<f64>]) -> Result<Self> {
        let mut members: Vec<(Vec<usize>, Vec<DVector<f64>>)> = vec![(Vec::new(), Vec::new()); groups.len()];
        for (i, (&g, w)) in membership.iter().zip(weights).enumerate() {
            if w.len() != groups[g].nrows() {
                return Err(Error::LengthMismatch(w.len(), groups[g].nrows()));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("embedding weight"));
            }
            members[g].0.push(i);
            members[g].1.push(w.clone());
        }
        let members = members
            .into_iter()
            .zip(&groups)
            .map(|((idx, ws), anchors)| {
                let m = if ws.is_empty() {
                    DMatrix::zeros(anchors.nrows(), 0)
                } else {
                    DMatrix::from_columns(&ws)
                };
                (idx, m)
            })
            .collect();
        Ok(Self { outer, groups, members })
    }

    pub fn len(&self) -> usize {
        self.outer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outer.is_empty()
    }

    /// Prior covariance between the embedded points and raw rows (m × n).
    pub fn prior_cross(&self, kernel: &ProductKernelSpec, rows: &Rows) -> Result<DMatrix<f64>> {
        let outer = kernel.outer_cross(&self.outer, rows)?;
        let mut emb = DMatrix::zeros(self.len(), rows.len());
        for (anchors, (idx, w)) in self.groups.iter().zip(&self.members) {
            if idx.is_empty() {
                continue;
            }
            let ks = cross_gram(&kernel.adjustment, anchors, &rows.adjustment)?;
            let part = w.transpose() * ks;
            for (r, &i) in idx.iter().enumerate() {
                emb.row_mut(i).copy_from(&part.row(r));
            }
        }
        Ok(outer.component_mul(&emb))
    }

    /// Prior covariance among the embedded points (m × m).
    pub fn prior_self(&self, kernel: &ProductKernelSpec) -> Result<DMatrix<f64>> {
        let outer = kernel.outer_cross(&self.outer, &self.outer)?;
        let mut emb = DMatrix::zeros(self.len(), self.len());
        for g in 0..self.groups.len() {
            for h in g..self.groups.len() {
                let (ig, wg) = &self.members[g];
                let (ih, wh) = &self.members[h];
                if ig.is_empty() || ih.is_empty() {
                    continue;
                }
                let k = cross_gram(&kernel.adjustment, &self.groups[g], &self.groups[h])?;
                let block = wg.transpose() * k * wh;
                for (r, &i) in ig.iter().enumerate() {
                    for (c, &j) in ih.iter().enumerate() {
                        emb[(i, j)] = block[(r, c)];
                        emb[(j, i)] = block[(r, c)];
                    }
                }
            }
        }
        Ok(outer.component_mul(&emb))
    }
}

#[derive(Debug, Clone)]
pub struct CqPosterior {
    pub nu: DVector<f64>,
    pub q: DMatrix<f64>,
    pub source: PosteriorSource,
    embedded: EmbeddedInterest,
    /// `L⁻¹ k(X_T, x̄)` for the GP this posterior was computed from.
    whitened: DMatrix<f64>,
}

impl CqPosterior {
    pub fn embedded(&self) -> &EmbeddedInterest {
        &self.embedded
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }
}

fn posterior_from_embedding(gp: &GpPosterior, embedded: EmbeddedInterest, source: PosteriorSource) -> Result<CqPosterior> {
    let kernel = &gp.model().kernel;
    let cross = embedded.prior_cross(kernel, gp.train_rows())?.transpose();
    let nu = cross.transpose() * gp.alpha();
    if nu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("causal-quantity mean"));
    }
    let whitened = gp.factor().solve_lower(&cross)?;
    let mut q = embedded.prior_self(kernel)? - whitened.transpose() * &whitened;
    symmetrize(&mut q);
    Ok(CqPosterior {
        nu,
        q,
        source,
        embedded,
        whitened,
    })
}

/// Distribution information the CME estimator needs for each kind.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingContext<'a> {
    /// CATE (operator fit on `(Z, S)`) or ATT (fit on `(A, S)`).
    Conditional(&'a CmeOperatorFit),
    /// ATE: uniform weights over the adjustment rows of the full dataset.
    Marginal { anchors: &'a DMatrix<f64> },
    /// ATEDS: uniform weights over target-population adjustment samples.
    Shifted { anchors: &'a DMatrix<f64> },
    /// Caller-supplied weights, one per interest point, over shared anchors.
    Explicit {
        anchors: &'a DMatrix<f64>,
        weights: &'a [EmbeddingWeights],
    },
}

pub fn cq_posterior_cme(gp: &GpPosterior, interest: &InterestSet, context: EmbeddingContext<'_>) -> Result<CqPosterior> {
    let m = interest.len();
    let outer = interest.outer_rows();
    let (anchors, weights): (DMatrix<f64>, Vec<DVector<f64>>) = match (interest.kind, context) {
        (CqKind::Cate | CqKind::Att, EmbeddingContext::Conditional(fit)) => {
            let queries = interest.query_matrix().expect("conditional kinds carry queries");
            let w = cme_weights_batch(fit, &queries)?;
            (fit.anchor_adjustment.clone(), w.column_iter().map(|c| c.into_owned()).collect())
        }
        (CqKind::Ate, EmbeddingContext::Marginal { anchors }) | (CqKind::Ateds, EmbeddingContext::Shifted { anchors }) => {
            if anchors.nrows() == 0 {
                return Err(Error::ZeroCount);
            }
            let w = DVector::from_element(anchors.nrows(), 1.0 / anchors.nrows() as f64);
            (anchors.clone(), vec![w; m])
        }
        (_, EmbeddingContext::Explicit { anchors, weights }) => {
            if weights.len() != m {
                return Err(Error::LengthMismatch(m, weights.len()));
            }
            (anchors.clone(), weights.iter().map(|w| w.weights.clone()).collect())
        }
        (kind, _) => {
            let need = match kind {
                CqKind::Cate => "a conditional embedding fit on (z, s)",
                CqKind::Att => "a conditional embedding fit on (a, s)",
                CqKind::Ate => "marginal adjustment anchors",
                CqKind::Ateds => "target-population adjustment samples",
            };
            return Err(Error::MissingContext(format!("{kind} needs {need}")));
        }
    };
    let embedded = EmbeddedInterest::new(outer, vec![anchors], &vec![0; m], &weights)?;
    posterior_from_embedding(gp, embedded, PosteriorSource::CmeClosedForm)
}

/// Kernel-weighted resampler standing in for a conditional density model.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    anchor_conditioning: Option<DMatrix<f64>>,
    anchor_adjustment: DMatrix<f64>,
    kernel: KernelSpec,
    smoothing: f64,
}

const BANDWIDTH_GRID: [f64; 12] = [0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0];

/// Bandwidth for the resampler's conditioning kernel: the multiple of the
/// median heuristic with the smallest leave-one-out error of the kernel
/// regression of `adjustment` on `conditioning`. Ties go to the narrower one.
pub fn default_sampler_bandwidth(conditioning: &DMatrix<f64>, adjustment: &DMatrix<f64>) -> f64 {
    let base = median_heuristic_or_default(conditioning).0;
    let n = conditioning.nrows();
    if n < 3 || adjustment.nrows() != n {
        return 0.1 * base;
    }
    let Ok(sq) = pairwise_sqdist(conditioning, conditioning, false) else {
        return 0.1 * base;
    };
    let mean = adjustment.row_mean();
    let mut best = (f64::INFINITY, 0.1 * base);
    for factor in BANDWIDTH_GRID {
        let h = factor * base;
        let spec = KernelSpec::rbf(h);
        let mut err = 0.0;
        for i in 0..n {
            let mut total = 0.0;
            let mut fitted = DVector::zeros(adjustment.ncols());
            for j in (0..n).filter(|&j| j != i) {
                let w = spec.eval_sqdist(sq[(i, j)]);
                total += w;
                fitted.axpy(w, &adjustment.row(j).transpose(), 1.0);
            }
            let residual = if total > 1e-300 {
                adjustment.row(i).transpose() - fitted / total
            } else {
                (adjustment.row(i) - &mean).transpose()
            };
            err += residual.norm_squared();
        }
        if err < best.0 {
            best = (err, h);
        }
    }
    best.1
}

/// `conditioning = None` gives a marginal sampler (uniform anchor draws).
pub fn fit_conditional_sampler(
    conditioning: Option<&DMatrix<f64>>,
    adjustment: &DMatrix<f64>,
    kernel: KernelSpec,
) -> Result<ConditionalSampler> {
    if adjustment.nrows() == 0 {
        return Err(Error::EmptyAnchors);
    }
    if let Some(z) = conditioning {
        if z.nrows() != adjustment.nrows() {
            return Err(Error::LengthMismatch(z.nrows(), adjustment.nrows()));
        }
    }
    kernel.validate()?;
    let smoothing = 0.1 * median_heuristic_or_default(adjustment).0;
    Ok(ConditionalSampler {
        anchor_conditioning: conditioning.cloned(),
        anchor_adjustment: adjustment.clone(),
        kernel,
        smoothing,
    })
}

impl ConditionalSampler {
    pub fn conditioning_dim(&self) -> Option<usize> {
        self.anchor_conditioning.as_ref().map(|z| z.ncols())
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// `n` draws of the adjustment vector given `query` (n × d_s).
    pub fn sample(&self, rng: &mut RandomStream, query: Option<&[f64]>, n: usize) -> Result<DMatrix<f64>> {
        let na = self.anchor_adjustment.nrows();
        let cumulative: Option<Vec<f64>> = match (&self.anchor_conditioning, query) {
            (Some(z), Some(q)) => {
                if q.len() != z.ncols() {
                    return Err(Error::DimensionMismatch {
                        expected: z.ncols(),
                        got: q.len(),
                    });
                }
                let qm = DMatrix::from_row_slice(1, q.len(), q);
                let k = cross_gram(&self.kernel, z, &qm)?;
                let mut acc = 0.0;
                let cum: Vec<f64> = k
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect();
                if acc > 0.0 && acc.is_finite() {
                    Some(cum)
                } else {
                    log::debug!("query {q:?} has no kernel mass on the anchors; drawing uniformly");
                    None
                }
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::SamplerUnavailable("a conditional sampler needs a query".into())),
            (None, Some(_)) => return Err(Error::SamplerUnavailable("a marginal sampler takes no query".into())),
        };
        let ds = self.anchor_adjustment.ncols();
        let mut out = DMatrix::zeros(n, ds);
        for r in 0..n {
            let idx = match &cumulative {
                Some(cum) => {
                    let target = rng.uniform() * cum[na - 1];
                    cum.partition_point(|c| *c <= target).min(na - 1)
                }
                None => rng.index(na),
            };
            for k in 0..ds {
                out[(r, k)] = self.anchor_adjustment[(idx, k)] + self.smoothing * rng.normal();
            }
        }
        Ok(out)
    }
}

/// Monte-Carlo estimator: averages the GP posterior over `n_s` sampled
/// adjustment values per distinct conditioning value.
pub fn cq_posterior_mc(
    gp: &GpPosterior,
    interest: &InterestSet,
    sampler: &ConditionalSampler,
    n_s: usize,
    rng: &mut RandomStream,
) -> Result<CqPosterior> {
    if n_s == 0 {
        return Err(Error::ZeroCount);
    }
    let expected_dim = interest.embedding_query(0).map(|q| q.len());
    if sampler.conditioning_dim() != expected_dim {
        return Err(Error::SamplerUnavailable(format!(
            "{} needs a sampler conditioned on {} dimension(s), got {:?}",
            interest.kind,
            expected_dim.unwrap_or(0),
            sampler.conditioning_dim()
        )));
    }
    let mut keys: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups = Vec::new();
    let mut membership = Vec::with_capacity(interest.len());
    for i in 0..interest.len() {
        let query = interest.embedding_query(i);
        let key: Vec<u64> = query.iter().flatten().map(|v| v.to_bits()).collect();
        let g = match keys.get(&key) {
            Some(&g) => g,
            None => {
                let samples = sampler.sample(rng, query.as_deref(), n_s)?;
                groups.push(samples);
                keys.insert(key, groups.len() - 1);
                groups.len() - 1
            }
        };
        membership.push(g);
    }
    let w = DVector::from_element(n_s, 1.0 / n_s as f64);
    let weights = vec![w; interest.len()];
    let embedded = EmbeddedInterest::new(interest.outer_rows(), groups, &membership, &weights)?;
    posterior_from_embedding(gp, embedded, PosteriorSource::McSampling)
}

/// Posterior covariance between each interest point and one pool row.
pub fn cross_covariance_with_pool(gp: &GpPosterior, cq: &CqPosterior, pool_row: &Rows) -> Result<DVector<f64>> {
    Ok(cross_covariance_with_pool_batch(gp, cq, pool_row)?.column(0).into_owned())
}

/// Posterior covariance between the interest points and every pool row
/// (n_I × n_P).
pub fn cross_covariance_with_pool_batch(gp: &GpPosterior, cq: &CqPosterior, pool: &Rows) -> Result<DMatrix<f64>> {
    let whitened_pool = gp.whitened_cross(pool)?;
    cross_covariance_whitened(gp, cq, pool, &whitened_pool)
}

/// Same as [`cross_covariance_with_pool_batch`] with `L⁻¹ K_{X_T, pool}`
/// already available.
pub fn cross_covariance_whitened(
    gp: &GpPosterior,
    cq: &CqPosterior,
    pool: &Rows,
    whitened_pool: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    pool.conditioning_for(&gp.model().kernel)?;
    if cq.whitened.nrows() != gp.len() {
        return Err(Error::DimensionMismatch {
            expected: gp.len(),
            got: cq.whitened.nrows(),
        });
    }
    let prior = cq.embedded.prior_cross(&gp.model().kernel, pool)?;
    Ok(prior - cq.whitened.transpose() * whitened_pool)
}
