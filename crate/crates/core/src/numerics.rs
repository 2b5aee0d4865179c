//! Dense linear algebra and special functions shared by the other modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Default first rung of the jitter ladder when the caller passes zero and
/// the exact factorization fails.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Number of ×10 escalations after the first rung.
const JITTER_STEPS: i32 = 6;
const SYMMETRY_TOL: f64 = 1e-12;

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl PsdFactor {
    pub fn dimension(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower_triangular(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// `L⁻¹·rhs`.
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows(self.dimension(), rhs.nrows())?;
        let mut out = rhs.clone();
        if !self.lower.solve_lower_triangular_mut(&mut out) {
            return Err(Error::FactorizationFailure("zero pivot in triangular solve".into()));
        }
        Ok(out)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        check_rows(self.dimension(), rhs.nrows())?;
        let mut out = rhs.clone();
        self.lower.solve_lower_triangular_mut(&mut out);
        self.lower.tr_solve_lower_triangular_mut(&mut out);
        Ok(out)
    }

    /// `(A + jitter·I)⁻¹`, formed explicitly.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dimension();
        let mut out = DMatrix::identity(n, n);
        self.lower.solve_lower_triangular_mut(&mut out);
        self.lower.tr_solve_lower_triangular_mut(&mut out);
        out
    }
}

fn check_rows(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Right-looking Cholesky on a copy of the lower triangle. Returns `None` on
/// a non-positive or non-finite pivot.
fn cholesky_lower(matrix: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = matrix.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            l[(i, j)] = matrix[(i, j)];
        }
        l[(j, j)] += jitter;
    }
    // Column-major storage: column j occupies data[j*n..(j+1)*n].
    let data = l.as_mut_slice();
    for j in 0..n {
        let pivot = data[j * n + j];
        if !(pivot > 0.0 && pivot.is_finite()) {
            return None;
        }
        let d = pivot.sqrt();
        data[j * n + j] = d;
        for v in &mut data[j * n + j + 1..(j + 1) * n] {
            *v /= d;
        }
        let (left, right) = data.split_at_mut((j + 1) * n);
        let col_j = &left[j * n..];
        for (offset, col_m) in right.chunks_exact_mut(n).enumerate() {
            let m = j + 1 + offset;
            let f = col_j[m];
            if f == 0.0 {
                continue;
            }
            for (dst, src) in col_m[m..].iter_mut().zip(&col_j[m..]) {
                *dst -= src * f;
            }
        }
    }
    Some(l)
}

/// Factors `matrix + jitter·I`, escalating the jitter ×10 from `base_jitter`
/// up to `1e6·base_jitter`. A zero base tries the exact factorization first
/// and then climbs from [`DEFAULT_JITTER`].
pub fn jittered_cholesky(matrix: &DMatrix<f64>, base_jitter: f64) -> Result<PsdFactor> {
    let n = matrix.nrows();
    check_rows(n, matrix.ncols())?;
    let mut asym: f64 = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            let d = (matrix[(i, j)] - matrix[(j, i)]).abs();
            if !d.is_finite() {
                return Err(Error::NonFinite("matrix entry"));
            }
            asym = asym.max(d);
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }

    let mut ladder = Vec::with_capacity(JITTER_STEPS as usize + 2);
    if base_jitter > 0.0 {
        ladder.extend((0..=JITTER_STEPS).map(|k| base_jitter * 10f64.powi(k)));
    } else {
        ladder.push(0.0);
        ladder.extend((0..=JITTER_STEPS).map(|k| DEFAULT_JITTER * 10f64.powi(k)));
    }
    for &jitter in &ladder {
        if let Some(lower) = cholesky_lower(matrix, jitter) {
            if jitter > 0.0 && jitter > base_jitter {
                log::debug!("cholesky needed jitter {jitter:e} (n = {n})");
            }
            return Ok(PsdFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotFactorizable(*ladder.last().unwrap()))
}

/// Solves `(A + jitter·I)·X = rhs` with two triangular solves.
pub fn psd_solve(factor: &PsdFactor, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(factor.dimension(), rhs.nrows())?;
    let mut out = rhs.clone();
    factor.lower.solve_lower_triangular_mut(&mut out);
    factor.lower.tr_solve_lower_triangular_mut(&mut out);
    Ok(out)
}

pub fn psd_logdet(factor: &PsdFactor) -> f64 {
    2.0 * factor.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Differential entropy of a zero-mean Gaussian with the factored covariance.
pub fn gaussian_entropy(covariance_factor: &PsdFactor) -> f64 {
    let m = covariance_factor.dimension() as f64;
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    0.5 * (m * two_pi_e.ln() + psd_logdet(covariance_factor))
}

/// Φ(x) through the complementary error function.
pub fn standard_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("standard_normal_cdf argument"));
    }
    Ok(0.5 * libm::erfc(-x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skew-normal draw with location `xi`, scale `omega` and shape `alpha`,
/// via the `δ|U₀| + √(1−δ²)·U₁` representation.
pub fn skew_normal_sample(rng: &mut RandomStream, xi: f64, omega: f64, alpha: f64) -> Result<f64> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidScale(omega));
    }
    let delta = alpha / (1.0 + alpha * alpha).sqrt();
    let u0 = rng.normal();
    let u1 = rng.normal();
    Ok(xi + omega * (delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1))
}

/// Mean of the skew-normal distribution above.
pub fn skew_normal_mean(xi: f64, omega: f64, alpha: f64) -> f64 {
    let delta = alpha / (1.0 + alpha * alpha).sqrt();
    xi + omega * delta * (2.0 / std::f64::consts::PI).sqrt()
}

/// Median of all pairwise Euclidean distances between rows (lower median
/// for an even number of pairs).
pub fn median_heuristic(points: &DMatrix<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::DegeneratePoints);
    }
    let d = points.ncols();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = points[(i, k)] - points[(j, k)];
                s += diff * diff;
            }
            dists.push(s.sqrt());
        }
    }
    let mid = (dists.len() - 1) / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let median = *median;
    if median > 0.0 && median.is_finite() {
        Ok(median)
    } else {
        Err(Error::DegeneratePoints)
    }
}

/// [`median_heuristic`] with the 1.0 fallback; the flag is `true` when the
/// fallback was used.
pub fn median_heuristic_or_default(points: &DMatrix<f64>) -> (f64, bool) {
    match median_heuristic(points) {
        Ok(v) => (v, false),
        Err(_) => {
            log::warn!("median heuristic degenerate over {} points; using 1.0", points.nrows());
            (1.0, true)
        }
    }
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
