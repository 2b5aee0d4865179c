//! Kernel families, Gram matrices and the product kernel over the
//! treatment / conditioning / adjustment blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern52,
    RationalQuadratic,
    /// `variance · 1[x = x']`, for discrete codes.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub variance: f64,
    #[serde(default = "one")]
    pub rq_alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64) -> Self {
        Self {
            family,
            lengthscale,
            variance: 1.0,
            rq_alpha: 1.0,
        }
    }

    pub fn rbf(lengthscale: f64) -> Self {
        Self::new(KernelFamily::Rbf, lengthscale)
    }

    pub fn delta() -> Self {
        Self::new(KernelFamily::Delta, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidScale(self.variance));
        }
        if self.family != KernelFamily::Delta && !(self.lengthscale > 0.0) {
            return Err(Error::InvalidScale(self.lengthscale));
        }
        if self.family == KernelFamily::RationalQuadratic && !(self.rq_alpha > 0.0) {
            return Err(Error::InvalidScale(self.rq_alpha));
        }
        Ok(())
    }

    pub fn is_stationary(&self) -> bool {
        self.family != KernelFamily::Delta
    }

    /// Kernel value as a function of the squared distance (stationary families).
    /// For `Delta`, `sqdist` is interpreted as 0 for equal inputs.
    pub fn eval_sqdist(&self, sqdist: f64) -> f64 {
        let v = self.variance;
        let l2 = self.lengthscale * self.lengthscale;
        match self.family {
            KernelFamily::Rbf => v * (-0.5 * sqdist / l2).exp(),
            KernelFamily::Matern52 => {
                let r = (5.0 * sqdist / l2).sqrt();
                v * (1.0 + r + r * r / 3.0) * (-r).exp()
            }
            KernelFamily::RationalQuadratic => {
                v * (1.0 + sqdist / (2.0 * self.rq_alpha * l2)).powf(-self.rq_alpha)
            }
            KernelFamily::Delta => {
                if sqdist == 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of the kernel value with respect to `ln(lengthscale)`.
    pub fn dlog_lengthscale_sqdist(&self, sqdist: f64) -> f64 {
        let v = self.variance;
        let l2 = self.lengthscale * self.lengthscale;
        match self.family {
            KernelFamily::Rbf => v * (-0.5 * sqdist / l2).exp() * sqdist / l2,
            KernelFamily::Matern52 => {
                let r = (5.0 * sqdist / l2).sqrt();
                v * (r * r / 3.0) * (1.0 + r) * (-r).exp()
            }
            KernelFamily::RationalQuadratic => {
                let base = 1.0 + sqdist / (2.0 * self.rq_alpha * l2);
                v * (sqdist / l2) * base.powf(-self.rq_alpha - 1.0)
            }
            KernelFamily::Delta => 0.0,
        }
    }

    /// `(dk/d ln ℓ) / k`, finite even where the kernel value underflows.
    pub fn dlog_lengthscale_ratio(&self, sqdist: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        match self.family {
            KernelFamily::Rbf => sqdist / l2,
            KernelFamily::Matern52 => {
                let r = (5.0 * sqdist / l2).sqrt();
                (r * r / 3.0) * (1.0 + r) / (1.0 + r + r * r / 3.0)
            }
            KernelFamily::RationalQuadratic => (sqdist / l2) / (1.0 + sqdist / (2.0 * self.rq_alpha * l2)),
            KernelFamily::Delta => 0.0,
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x2.len(),
        });
    }
    if spec.family == KernelFamily::Delta {
        let equal = x.iter().zip(x2).all(|(a, b)| a == b);
        return Ok(if equal { spec.variance } else { 0.0 });
    }
    let sq: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(spec.eval_sqdist(sq))
}

/// Squared distances between rows of `x` and rows of `x2`; for Delta use,
/// unequal rows are marked with `f64::INFINITY` and equal rows with 0.
pub fn pairwise_sqdist(x: &DMatrix<f64>, x2: &DMatrix<f64>, exact_match: bool) -> Result<DMatrix<f64>> {
    if x.ncols() != x2.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: x2.ncols(),
        });
    }
    let (n, m, d) = (x.nrows(), x2.nrows(), x.ncols());
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            if exact_match {
                let equal = (0..d).all(|k| x[(i, k)] == x2[(j, k)]);
                out[(i, j)] = if equal { 0.0 } else { f64::INFINITY };
            } else {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = x[(i, k)] - x2[(j, k)];
                    s += diff * diff;
                }
                out[(i, j)] = s;
            }
        }
    }
    Ok(out)
}

pub fn cross_gram(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sq = pairwise_sqdist(x, x2, spec.family == KernelFamily::Delta)?;
    Ok(sq.map(|r2| spec.eval_sqdist(r2)))
}

pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let exact = spec.family == KernelFamily::Delta;
    let d = x.ncols();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = spec.eval_sqdist(0.0);
        for i in (j + 1)..n {
            let r2 = if exact {
                if (0..d).all(|k| x[(i, k)] == x[(j, k)]) {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (0..d).map(|k| (x[(i, k)] - x[(j, k)]).powi(2)).sum()
            };
            let v = spec.eval_sqdist(r2);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Input rows split into the three kernel blocks. The treatment block is a
/// single column.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub treatment: DMatrix<f64>,
    pub conditioning: Option<DMatrix<f64>>,
    pub adjustment: DMatrix<f64>,
}

impl Rows {
    pub fn new(
        treatment: &[f64],
        conditioning: Option<DMatrix<f64>>,
        adjustment: DMatrix<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        if adjustment.nrows() != n {
            return Err(Error::LengthMismatch(n, adjustment.nrows()));
        }
        if let Some(z) = &conditioning {
            if z.nrows() != n {
                return Err(Error::LengthMismatch(n, z.nrows()));
            }
        }
        Ok(Self {
            treatment: DMatrix::from_column_slice(n, 1, treatment),
            conditioning,
            adjustment,
        })
    }

    pub fn len(&self) -> usize {
        self.treatment.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Rows {
        Rows {
            treatment: self.treatment.select_rows(indices),
            conditioning: self.conditioning.as_ref().map(|z| z.select_rows(indices)),
            adjustment: self.adjustment.select_rows(indices),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Rows) -> Result<Rows> {
        fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            if a.ncols() != b.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: a.ncols(),
                    got: b.ncols(),
                });
            }
            let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            out.rows_mut(0, a.nrows()).copy_from(a);
            out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            Ok(out)
        }
        let conditioning = match (&self.conditioning, &other.conditioning) {
            (Some(a), Some(b)) => Some(stack(a, b)?),
            (None, None) => None,
            _ => return Err(Error::MissingBlock("conditioning")),
        };
        Ok(Rows {
            treatment: stack(&self.treatment, &other.treatment)?,
            conditioning,
            adjustment: stack(&self.adjustment, &other.adjustment)?,
        })
    }

    pub fn conditioning_for(&self, spec: &ProductKernelSpec) -> Result<Option<&DMatrix<f64>>> {
        match (&spec.conditioning, &self.conditioning) {
            (None, _) => Ok(None),
            (Some(_), Some(z)) => Ok(Some(z)),
            (Some(_), None) => Err(Error::MissingBlock("conditioning")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductKernelSpec {
    pub treatment: KernelSpec,
    #[serde(default)]
    pub conditioning: Option<KernelSpec>,
    pub adjustment: KernelSpec,
    /// Single output scale on the product; block variances stay at 1.
    #[serde(default = "one")]
    pub output_scale: f64,
}

impl ProductKernelSpec {
    pub fn validate(&self) -> Result<()> {
        self.treatment.validate()?;
        if let Some(c) = &self.conditioning {
            c.validate()?;
        }
        self.adjustment.validate()?;
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::InvalidScale(self.output_scale));
        }
        Ok(())
    }

    /// Prior variance `k(x, x)` of the joint kernel.
    pub fn diagonal_value(&self) -> f64 {
        let cond = self.conditioning.map_or(1.0, |c| c.variance);
        self.output_scale * self.treatment.variance * cond * self.adjustment.variance
    }

    /// Output scale times the treatment and conditioning factors, i.e. the
    /// joint kernel with the adjustment block left out.
    pub fn outer_cross(&self, rows: &Rows, rows2: &Rows) -> Result<DMatrix<f64>> {
        let mut k = cross_gram(&self.treatment, &rows.treatment, &rows2.treatment)?;
        k *= self.output_scale;
        if let Some(spec) = &self.conditioning {
            let z1 = rows.conditioning_for(self)?.unwrap();
            let z2 = rows2.conditioning_for(self)?.unwrap();
            k.component_mul_assign(&cross_gram(spec, z1, z2)?);
        }
        Ok(k)
    }
}

/// Hadamard product of the per-block cross-Grams, times the output scale.
pub fn product_gram(spec: &ProductKernelSpec, rows: &Rows, rows2: &Rows) -> Result<DMatrix<f64>> {
    let mut k = spec.outer_cross(rows, rows2)?;
    k.component_mul_assign(&cross_gram(&spec.adjustment, &rows.adjustment, &rows2.adjustment)?);
    Ok(k)
}
