//! Exact Gaussian-process regression over the product kernel.
//!
//! The same noise variance σ² regularizes both the GP posterior and the
//! effective-input estimators built on top of it (the causal-quantity
//! posterior uses one `(K + σ²I)⁻¹`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{pairwise_sqdist, product_gram, KernelFamily, KernelSpec, ProductKernelSpec, Rows};
use crate::numerics::{jittered_cholesky, median_heuristic_or_default, psd_logdet, PsdFactor};

const LN_2PI: f64 = 1.8378770664093453;
/// Bounds on every log-hyperparameter during optimization.
const LOG_PARAM_MIN: f64 = -9.0;
const LOG_PARAM_MAX: f64 = 9.0;
const LOG_NOISE_MIN: f64 = -13.815510557964274; // ln 1e-6

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModel {
    pub kernel: ProductKernelSpec,
    pub noise_variance: f64,
}

impl GpModel {
    pub fn new(kernel: ProductKernelSpec, noise_variance: f64) -> Result<Self> {
        let model = Self {
            kernel,
            noise_variance,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidScale(self.noise_variance));
        }
        Ok(())
    }

    /// Free hyperparameters in log space: lengthscales of the stationary
    /// blocks (treatment, conditioning, adjustment order), the output scale,
    /// then the noise variance.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(5);
        for spec in self.blocks().into_iter().flatten() {
            if spec.is_stationary() {
                p.push(spec.lengthscale.ln());
            }
        }
        p.push(self.kernel.output_scale.ln());
        p.push(self.noise_variance.ln());
        p
    }

    pub fn with_log_params(&self, params: &[f64]) -> GpModel {
        let mut out = *self;
        let mut it = params.iter();
        for spec in [
            Some(&mut out.kernel.treatment),
            out.kernel.conditioning.as_mut(),
            Some(&mut out.kernel.adjustment),
        ]
        .into_iter()
        .flatten()
        {
            if spec.is_stationary() {
                spec.lengthscale = it.next().expect("parameter count").exp();
            }
        }
        out.kernel.output_scale = it.next().expect("parameter count").exp();
        out.noise_variance = it.next().expect("parameter count").exp();
        out
    }

    fn blocks(&self) -> [Option<&KernelSpec>; 3] {
        [
            Some(&self.kernel.treatment),
            self.kernel.conditioning.as_ref(),
            Some(&self.kernel.adjustment),
        ]
    }

    /// Starting point for optimization: median-heuristic lengthscales per
    /// block, output scale from the second moment of `y`, noise at a tenth of
    /// the outcome variance.
    pub fn initial(
        template: ProductKernelSpec,
        rows: &Rows,
        outcomes: &DVector<f64>,
    ) -> Result<GpModel> {
        let mut kernel = template;
        let fit = |spec: &mut KernelSpec, x: &DMatrix<f64>| {
            if spec.is_stationary() {
                spec.lengthscale = median_heuristic_or_default(x).0;
            }
        };
        fit(&mut kernel.treatment, &rows.treatment);
        if let Some(spec) = kernel.conditioning.as_mut() {
            let z = rows
                .conditioning
                .as_ref()
                .ok_or(Error::MissingBlock("conditioning"))?;
            fit(spec, z);
        }
        fit(&mut kernel.adjustment, &rows.adjustment);
        let n = outcomes.len().max(1) as f64;
        let mean = outcomes.sum() / n;
        let second = outcomes.iter().map(|v| v * v).sum::<f64>() / n;
        let var = (second - mean * mean).max(0.0);
        kernel.output_scale = second.max(1e-2);
        GpModel::new(kernel, (0.1 * var).max(1e-4))
    }
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    model: GpModel,
    train_rows: Rows,
    train_outcomes: DVector<f64>,
    factor: PsdFactor,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Covariance {
    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(d) => d.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub covariance: Covariance,
}

fn check_training(rows: &Rows, outcomes: &DVector<f64>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyTraining);
    }
    if rows.len() != outcomes.len() {
        return Err(Error::LengthMismatch(rows.len(), outcomes.len()));
    }
    if outcomes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training outcome"));
    }
    Ok(())
}

fn noisy_gram(model: &GpModel, rows: &Rows) -> Result<DMatrix<f64>> {
    let mut k = product_gram(&model.kernel, rows, rows)?;
    for i in 0..k.nrows() {
        k[(i, i)] += model.noise_variance;
    }
    Ok(k)
}

fn factorize(k: &DMatrix<f64>) -> Result<PsdFactor> {
    jittered_cholesky(k, 0.0).map_err(|e| Error::FactorizationFailure(e.to_string()))
}

pub fn fit(model: &GpModel, rows: &Rows, outcomes: &DVector<f64>) -> Result<GpPosterior> {
    check_training(rows, outcomes)?;
    model.validate()?;
    rows.conditioning_for(&model.kernel)?;
    let factor = factorize(&noisy_gram(model, rows)?)?;
    let alpha = factor.solve_vec(outcomes)?;
    Ok(GpPosterior {
        model: *model,
        train_rows: rows.clone(),
        train_outcomes: outcomes.clone(),
        factor,
        alpha,
    })
}

impl GpPosterior {
    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn train_rows(&self) -> &Rows {
        &self.train_rows
    }

    pub fn train_outcomes(&self) -> &DVector<f64> {
        &self.train_outcomes
    }

    pub fn factor(&self) -> &PsdFactor {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn noise_variance(&self) -> f64 {
        self.model.noise_variance
    }

    pub fn len(&self) -> usize {
        self.train_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_rows.is_empty()
    }

    /// `K_{X_T, query}` (n_T × m).
    pub fn train_cross(&self, query: &Rows) -> Result<DMatrix<f64>> {
        product_gram(&self.model.kernel, &self.train_rows, query)
    }

    /// `L⁻¹ K_{X_T, query}`, so that posterior covariances are `prior − BᵀB'`.
    pub fn whitened_cross(&self, query: &Rows) -> Result<DMatrix<f64>> {
        self.factor.solve_lower(&self.train_cross(query)?)
    }

    /// Posterior covariance of the latent function between two row sets.
    pub fn latent_covariance(&self, left: &Rows, right: &Rows) -> Result<DMatrix<f64>> {
        let prior = product_gram(&self.model.kernel, left, right)?;
        let vl = self.whitened_cross(left)?;
        let vr = self.whitened_cross(right)?;
        Ok(prior - vl.transpose() * vr)
    }
}

pub fn predict(posterior: &GpPosterior, query: &Rows, with_covariance: bool) -> Result<Prediction> {
    query.conditioning_for(&posterior.model.kernel)?;
    let cross = posterior.train_cross(query)?;
    let mean = cross.transpose() * &posterior.alpha;
    let v = posterior.factor.solve_lower(&cross)?;
    let covariance = if with_covariance {
        let prior = product_gram(&posterior.model.kernel, query, query)?;
        let mut cov = prior - v.transpose() * &v;
        crate::numerics::symmetrize(&mut cov);
        Covariance::Full(cov)
    } else {
        let prior = posterior.model.kernel.diagonal_value();
        let diag = DVector::from_iterator(
            query.len(),
            v.column_iter().map(|c| prior - c.norm_squared()),
        );
        Covariance::Diagonal(diag)
    };
    Ok(Prediction { mean, covariance })
}

pub fn marginal_log_likelihood(model: &GpModel, rows: &Rows, outcomes: &DVector<f64>) -> Result<f64> {
    check_training(rows, outcomes)?;
    let factor = factorize(&noisy_gram(model, rows)?)?;
    let alpha = factor.solve_vec(outcomes)?;
    let n = outcomes.len() as f64;
    Ok(-0.5 * outcomes.dot(&alpha) - 0.5 * psd_logdet(&factor) - 0.5 * n * LN_2PI)
}

/// Squared-distance matrices of the training rows, one per kernel block, so
/// repeated likelihood evaluations only redo the elementwise kernel maps.
struct DistanceCache {
    blocks: Vec<(usize, DMatrix<f64>)>,
}

impl DistanceCache {
    fn new(model: &GpModel, rows: &Rows) -> Result<Self> {
        let mut blocks = Vec::new();
        let mats: [Option<&DMatrix<f64>>; 3] = [
            Some(&rows.treatment),
            rows.conditioning_for(&model.kernel)?,
            Some(&rows.adjustment),
        ];
        for (b, (spec, x)) in model.blocks().into_iter().zip(mats).enumerate() {
            if let (Some(spec), Some(x)) = (spec, x) {
                blocks.push((b, pairwise_sqdist(x, x, spec.family == KernelFamily::Delta)?));
            }
        }
        Ok(Self { blocks })
    }
}

/// MLL and its gradient with respect to [`GpModel::log_params`].
fn mll_with_gradient(
    model: &GpModel,
    cache: &DistanceCache,
    outcomes: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let n = outcomes.len();
    let specs = model.blocks();
    let block_grams: Vec<DMatrix<f64>> = cache
        .blocks
        .iter()
        .map(|(b, sq)| {
            let spec = specs[*b].unwrap();
            sq.map(|r2| spec.eval_sqdist(r2))
        })
        .collect();
    let mut latent = DMatrix::from_element(n, n, model.kernel.output_scale);
    for g in &block_grams {
        latent.component_mul_assign(g);
    }
    let mut noisy = latent.clone();
    for i in 0..n {
        noisy[(i, i)] += model.noise_variance;
    }
    let factor = factorize(&noisy)?;
    let alpha = factor.solve_vec(outcomes)?;
    let mll = -0.5 * outcomes.dot(&alpha) - 0.5 * psd_logdet(&factor) - 0.5 * n as f64 * LN_2PI;

    // W = ααᵀ − K⁻¹; dMLL/dθ = ½ Σ W ⊙ dK/dθ
    let mut w = alpha.clone() * alpha.transpose();
    w -= factor.inverse();

    let mut grad = Vec::with_capacity(cache.blocks.len() + 2);
    for (b, sq) in &cache.blocks {
        let spec = specs[*b].unwrap();
        if !spec.is_stationary() {
            continue;
        }
        let g: f64 = w
            .iter()
            .zip(latent.iter())
            .zip(sq.iter())
            .map(|((w, k), r2)| w * k * spec.dlog_lengthscale_ratio(*r2))
            .sum();
        grad.push(0.5 * g);
    }
    grad.push(0.5 * w.component_mul(&latent).sum());
    grad.push(0.5 * model.noise_variance * w.trace());
    Ok((mll, grad))
}

/// MLL and analytic gradient in log-parameter space.
pub fn mll_gradient(model: &GpModel, rows: &Rows, outcomes: &DVector<f64>) -> Result<(f64, Vec<f64>)> {
    check_training(rows, outcomes)?;
    let cache = DistanceCache::new(model, rows)?;
    mll_with_gradient(model, &cache, outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_iterations() -> usize {
    500
}

fn default_step() -> f64 {
    0.05
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            step: default_step(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub initial_mll: f64,
    pub best_mll: f64,
    pub iterations_run: usize,
    pub aborted: bool,
}

/// Maximizes the exact MLL over log-lengthscales, log output scale and log
/// noise with Adam (β₁ = 0.9, β₂ = 0.999) on the per-point MLL. Returns the
/// best model seen, so the result never scores below the input.
pub fn optimize_hyperparameters(
    model: &GpModel,
    rows: &Rows,
    outcomes: &DVector<f64>,
    settings: &OptimizerSettings,
) -> Result<(GpModel, OptimizationReport)> {
    check_training(rows, outcomes)?;
    model.validate()?;
    let cache = DistanceCache::new(model, rows)?;
    let (initial_mll, mut grad) = mll_with_gradient(model, &cache, outcomes)?;
    let mut report = OptimizationReport {
        initial_mll,
        best_mll: initial_mll,
        iterations_run: 0,
        aborted: false,
    };
    if settings.iterations == 0 {
        return Ok((*model, report));
    }
    let scale = 1.0 / outcomes.len() as f64;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut params = model.log_params();
    let np = params.len();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut best = *model;

    for t in 1..=settings.iterations {
        if grad.iter().any(|g| !g.is_finite()) {
            report.aborted = true;
            log::warn!("non-finite MLL gradient at iteration {t}; keeping best-seen model");
            break;
        }
        for k in 0..np {
            let g = grad[k] * scale;
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let mh = m[k] / (1.0 - b1.powi(t as i32));
            let vh = v[k] / (1.0 - b2.powi(t as i32));
            params[k] += settings.step * mh / (vh.sqrt() + eps);
            let lo = if k == np - 1 { LOG_NOISE_MIN } else { LOG_PARAM_MIN };
            params[k] = params[k].clamp(lo, LOG_PARAM_MAX);
        }
        let candidate = model.with_log_params(&params);
        report.iterations_run = t;
        match mll_with_gradient(&candidate, &cache, outcomes) {
            Ok((mll, g)) if mll.is_finite() => {
                if mll > report.best_mll {
                    report.best_mll = mll;
                    best = candidate;
                }
                grad = g;
            }
            _ => {
                report.aborted = true;
                log::warn!("likelihood evaluation failed at iteration {t}; keeping best-seen model");
                break;
            }
        }
    }
    Ok((best, report))
}
