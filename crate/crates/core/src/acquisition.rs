//! Batch acquisition: utilities over the causal-quantity posterior, rank-one
//! fantasy conditioning, batch selection rules and baseline strategies.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{cross_covariance_whitened, CqPosterior};
use crate::gp::GpPosterior;
use crate::kernels::{product_gram, Rows};
use crate::numerics::{jittered_cholesky, psd_logdet, PsdFactor};
use crate::rng::RandomStream;

/// Diagonal jitter applied to Q before every log-determinant.
pub const IG_JITTER: f64 = 1e-8;
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    Ig,
    Tvr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TopB,
    Greedy,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilitySpec {
    pub kind: UtilityKind,
    pub selection: Selection,
    pub batch_size: usize,
    /// Softmax temperature; `None` uses max − median of the round's scores.
    pub softmax_temperature: Option<f64>,
}

/// Interest-set covariance conditioned on fantasized observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FantasyState {
    base_q: DMatrix<f64>,
    q: DMatrix<f64>,
    crosses: Vec<DVector<f64>>,
    variances: Vec<f64>,
}

impl FantasyState {
    pub fn new(q: DMatrix<f64>) -> Self {
        Self {
            base_q: q.clone(),
            q,
            crosses: Vec::new(),
            variances: Vec::new(),
        }
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn base_q(&self) -> &DMatrix<f64> {
        &self.base_q
    }

    /// Number of fantasized observations.
    pub fn depth(&self) -> usize {
        self.crosses.len()
    }

    /// `Q ← Q − c cᵀ / (v + σ²)`.
    pub fn downdate(&mut self, cross: &DVector<f64>, variance: f64, noise: f64) -> Result<()> {
        let denom = variance + noise;
        if !(denom > VARIANCE_FLOOR) {
            return Err(Error::NegativeVariance(denom));
        }
        if cross.len() != self.q.nrows() {
            return Err(Error::LengthMismatch(self.q.nrows(), cross.len()));
        }
        self.q -= cross * cross.transpose() / denom;
        self.crosses.push(cross.clone());
        self.variances.push(variance);
        Ok(())
    }
}

pub fn fantasy_downdate(state: &FantasyState, cross: &DVector<f64>, variance: f64, noise: f64) -> Result<FantasyState> {
    let mut next = state.clone();
    next.downdate(cross, variance, noise)?;
    Ok(next)
}

fn jittered_factor(q: &DMatrix<f64>) -> Result<PsdFactor> {
    let n = q.nrows();
    jittered_cholesky(&(q + DMatrix::identity(n, n) * IG_JITTER), 0.0)
        .map_err(|e| Error::FactorizationFailure(e.to_string()))
}

/// `−log det(Q + 1e-8 I)` for IG, `−tr Q` for TVR.
pub fn utility(kind: UtilityKind, state: &FantasyState) -> Result<f64> {
    match kind {
        UtilityKind::Tvr => Ok(-state.q.trace()),
        UtilityKind::Ig => Ok(-psd_logdet(&jittered_factor(&state.q)?)),
    }
}

/// Pool quantities that change as candidates are fantasized.
struct PoolState<'a> {
    gp: &'a GpPosterior,
    pool: &'a Rows,
    whitened: DMatrix<f64>,
    /// Current latent variance per candidate.
    variance: DVector<f64>,
    /// Current cross-covariance with the interest set (n_I × n_P).
    cross: DMatrix<f64>,
    /// Scaled rows `k_cur(j, ·) / sqrt(v_j + σ²)` of fantasized candidates.
    updates: Vec<DVector<f64>>,
}

impl<'a> PoolState<'a> {
    fn new(gp: &'a GpPosterior, cq: &CqPosterior, pool: &'a Rows) -> Result<Self> {
        let whitened = gp.whitened_cross(pool)?;
        let cross = cross_covariance_whitened(gp, cq, pool, &whitened)?;
        let prior = gp.model().kernel.diagonal_value();
        let variance = DVector::from_iterator(
            pool.len(),
            whitened.column_iter().map(|c| (prior - c.norm_squared()).max(0.0)),
        );
        Ok(Self {
            gp,
            pool,
            whitened,
            variance,
            cross,
            updates: Vec::new(),
        })
    }

    /// Current posterior covariance between candidate `j` and every candidate.
    fn covariance_column(&self, j: usize) -> Result<DVector<f64>> {
        let kernel = &self.gp.model().kernel;
        let prior = product_gram(kernel, self.pool, &self.pool.select(&[j]))?;
        let mut col = prior.column(0) - self.whitened.transpose() * self.whitened.column(j);
        for u in &self.updates {
            col.axpy(-u[j], u, 1.0);
        }
        Ok(col)
    }

    /// Fantasizes candidate `j` and returns its cross vector and variance
    /// before the update.
    fn condition_on(&mut self, j: usize) -> Result<(DVector<f64>, f64)> {
        let noise = self.gp.noise_variance();
        let v = self.variance[j];
        let denom = v + noise;
        if !(denom > VARIANCE_FLOOR) {
            return Err(Error::NegativeVariance(denom));
        }
        let c = self.cross.column(j).into_owned();
        let u = self.covariance_column(j)? / denom.sqrt();
        self.cross -= &c * u.transpose() / denom.sqrt();
        for x in 0..self.variance.len() {
            self.variance[x] = (self.variance[x] - u[x] * u[x]).max(0.0);
        }
        self.updates.push(u);
        Ok((c, v))
    }
}

/// Singleton utility gain of each candidate against `state`.
fn singleton_gains(kind: UtilityKind, state: &FantasyState, pool: &PoolState<'_>, noise: f64) -> Result<DVector<f64>> {
    let n = pool.variance.len();
    match kind {
        UtilityKind::Tvr => Ok(DVector::from_fn(n, |x, _| {
            pool.cross.column(x).norm_squared() / (pool.variance[x] + noise)
        })),
        UtilityKind::Ig => {
            // Matrix determinant lemma on Q + jI.
            let factor = jittered_factor(&state.q)?;
            let white = factor.solve_lower(&pool.cross)?;
            Ok(DVector::from_fn(n, |x, _| {
                let r = white.column(x).norm_squared() / (pool.variance[x] + noise);
                -(1.0 - r).max(f64::MIN_POSITIVE).ln()
            }))
        }
    }
}

/// Index of the largest finite entry among `allowed`; ties go to the lowest index.
fn argmax(scores: &DVector<f64>, allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !allowed[i] || !s.is_finite() {
            continue;
        }
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Indices of the `k` largest scores, ties broken by lowest index.
fn top_k(scores: &DVector<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a], scores[b]);
        let sa = if sa.is_finite() { sa } else { f64::NEG_INFINITY };
        let sb = if sb.is_finite() { sb } else { f64::NEG_INFINITY };
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Temperature `max − median` of the scores, floored at 1e-6.
pub fn default_softmax_temperature(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 1e-6;
    }
    (max - median(scores)).max(1e-6)
}

fn softmax_sample(scores: &DVector<f64>, k: usize, temperature: f64, rng: &mut RandomStream) -> Vec<usize> {
    let max = scores.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores
        .iter()
        .map(|s| if s.is_finite() { ((s - max) / temperature).exp() } else { 0.0 })
        .collect();
    let mut allowed = vec![true; scores.len()];
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let idx = match rng.weighted_index(&weights) {
            Some(i) => i,
            None => match argmax(scores, &allowed) {
                Some(i) => i,
                None => (0..scores.len()).find(|&i| allowed[i]).expect("pool larger than batch"),
            },
        };
        picks.push(idx);
        allowed[idx] = false;
        weights[idx] = 0.0;
    }
    picks
}

/// Outcome of a batch selection.
#[derive(Debug, Clone)]
pub struct BatchSelection {
    pub indices: Vec<usize>,
    /// Utility gain credited to each pick when it was chosen.
    pub gains: Vec<f64>,
    /// Interest-set covariance after fantasizing the whole batch.
    pub state: FantasyState,
}

pub fn select_batch(spec: &UtilitySpec, gp: &GpPosterior, cq: &CqPosterior, pool: &Rows, rng: &mut RandomStream) -> Result<Vec<usize>> {
    Ok(select_batch_detailed(spec, gp, cq, pool, rng)?.indices)
}

pub fn select_batch_detailed(
    spec: &UtilitySpec,
    gp: &GpPosterior,
    cq: &CqPosterior,
    pool: &Rows,
    rng: &mut RandomStream,
) -> Result<BatchSelection> {
    let b = spec.batch_size;
    if b == 0 {
        return Err(Error::ZeroCount);
    }
    if pool.len() < b {
        return Err(Error::PoolExhausted {
            requested: b,
            available: pool.len(),
        });
    }
    let noise = gp.noise_variance();
    let mut state = FantasyState::new(cq.q.clone());
    let mut pool_state = PoolState::new(gp, cq, pool)?;
    let mut gains = Vec::with_capacity(b);

    let indices = match spec.selection {
        Selection::Greedy => {
            let mut allowed = vec![true; pool.len()];
            let mut picks = Vec::with_capacity(b);
            for _ in 0..b {
                let scores = singleton_gains(spec.kind, &state, &pool_state, noise)?;
                let j = argmax(&scores, &allowed).ok_or(Error::PoolExhausted {
                    requested: b,
                    available: picks.len(),
                })?;
                gains.push(scores[j]);
                allowed[j] = false;
                picks.push(j);
                let (c, v) = pool_state.condition_on(j)?;
                state.downdate(&c, v, noise)?;
            }
            return Ok(BatchSelection {
                indices: picks,
                gains,
                state,
            });
        }
        Selection::TopB => {
            let scores = singleton_gains(spec.kind, &state, &pool_state, noise)?;
            let picks = top_k(&scores, b);
            gains.extend(picks.iter().map(|&j| scores[j]));
            picks
        }
        Selection::Softmax => {
            let scores = singleton_gains(spec.kind, &state, &pool_state, noise)?;
            let t = spec
                .softmax_temperature
                .unwrap_or_else(|| default_softmax_temperature(scores.as_slice()));
            let picks = softmax_sample(&scores, b, t, rng);
            gains.extend(picks.iter().map(|&j| scores[j]));
            picks
        }
    };
    for &j in &indices {
        let (c, v) = pool_state.condition_on(j)?;
        state.downdate(&c, v, noise)?;
    }
    Ok(BatchSelection { indices, gains, state })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    PoolVariance,
    MuBald,
    Coreset,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineOutput {
    Scores(DVector<f64>),
    Indices(Vec<usize>),
}

/// Predictive-entropy score `½ log(1 + v/σ²)`.
pub fn mu_bald_score(latent_variance: f64, noise: f64) -> f64 {
    0.5 * (latent_variance / noise).ln_1p()
}

pub fn baseline_scores(
    kind: BaselineKind,
    gp: &GpPosterior,
    pool: &Rows,
    batch_size: usize,
    rng: &mut RandomStream,
) -> Result<BaselineOutput> {
    if pool.is_empty() || pool.len() < batch_size {
        return Err(Error::PoolExhausted {
            requested: batch_size.max(1),
            available: pool.len(),
        });
    }
    let noise = gp.noise_variance();
    match kind {
        BaselineKind::Random => Ok(BaselineOutput::Indices(rng.sample_without_replacement(pool.len(), batch_size))),
        BaselineKind::MuBald => {
            let w = gp.whitened_cross(pool)?;
            let prior = gp.model().kernel.diagonal_value();
            Ok(BaselineOutput::Scores(DVector::from_iterator(
                pool.len(),
                w.column_iter().map(|c| mu_bald_score((prior - c.norm_squared()).max(0.0), noise)),
            )))
        }
        BaselineKind::PoolVariance => {
            let cov = gp.latent_covariance(pool, pool)?;
            Ok(BaselineOutput::Scores(DVector::from_fn(pool.len(), |x, _| {
                cov.column(x).norm_squared() / (cov[(x, x)].max(0.0) + noise)
            })))
        }
        BaselineKind::Coreset => {
            let cov = gp.latent_covariance(pool, pool)?;
            let sd: Vec<f64> = (0..pool.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            let dist = |i: usize, j: usize| {
                let s = sd[i] * sd[j];
                if s > 0.0 {
                    1.0 - cov[(i, j)] / s
                } else {
                    1.0
                }
            };
            let variances = DVector::from_iterator(pool.len(), sd.iter().map(|s| s * s));
            let mut allowed = vec![true; pool.len()];
            let first = argmax(&variances, &allowed).unwrap_or(0);
            let mut picks = vec![first];
            allowed[first] = false;
            let mut nearest = DVector::from_fn(pool.len(), |x, _| dist(x, first));
            while picks.len() < batch_size {
                let j = argmax(&nearest, &allowed).unwrap_or_else(|| allowed.iter().position(|a| *a).unwrap());
                picks.push(j);
                allowed[j] = false;
                for x in 0..pool.len() {
                    nearest[x] = nearest[x].min(dist(x, j));
                }
            }
            Ok(BaselineOutput::Indices(picks))
        }
    }
}

/// Applies a baseline and returns the chosen pool indices (top-b for scores).
pub fn select_baseline(kind: BaselineKind, gp: &GpPosterior, pool: &Rows, batch_size: usize, rng: &mut RandomStream) -> Result<Vec<usize>> {
    match baseline_scores(kind, gp, pool, batch_size, rng)? {
        BaselineOutput::Indices(i) => Ok(i),
        BaselineOutput::Scores(s) => Ok(top_k(&s, batch_size)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Cme,
    Mc,
}

/// A named acquisition strategy as it appears in configs and CSVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Baseline(BaselineKind),
    Targeted {
        utility: UtilityKind,
        estimator: EstimatorKind,
        selection: Selection,
    },
}

impl Strategy {
    pub fn estimator(&self) -> EstimatorKind {
        match self {
            Strategy::Targeted { estimator, .. } => *estimator,
            Strategy::Baseline(_) => EstimatorKind::Cme,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Baseline(b) => f.write_str(match b {
                BaselineKind::Random => "random",
                BaselineKind::PoolVariance => "pool_variance",
                BaselineKind::MuBald => "mu_bald",
                BaselineKind::Coreset => "coreset",
            }),
            Strategy::Targeted {
                utility,
                estimator,
                selection,
            } => {
                let u = match utility {
                    UtilityKind::Ig => "ig",
                    UtilityKind::Tvr => "tvr",
                };
                let e = match estimator {
                    EstimatorKind::Cme => "cme",
                    EstimatorKind::Mc => "mc",
                };
                let s = match selection {
                    Selection::TopB => "",
                    Selection::Greedy => "_g",
                    Selection::Softmax => "_s",
                };
                write!(f, "{u}_{e}{s}")
            }
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let baseline = match s {
            "random" => Some(BaselineKind::Random),
            "pool_variance" => Some(BaselineKind::PoolVariance),
            "mu_bald" => Some(BaselineKind::MuBald),
            "coreset" => Some(BaselineKind::Coreset),
            _ => None,
        };
        if let Some(b) = baseline {
            return Ok(Strategy::Baseline(b));
        }
        let unknown = || Error::InvalidArgument(format!("unknown strategy `{s}`"));
        let parts: Vec<&str> = s.split('_').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(unknown());
        }
        let utility = match parts[0] {
            "ig" => UtilityKind::Ig,
            "tvr" => UtilityKind::Tvr,
            _ => return Err(unknown()),
        };
        let estimator = match parts[1] {
            "cme" => EstimatorKind::Cme,
            "mc" => EstimatorKind::Mc,
            _ => return Err(unknown()),
        };
        let selection = match parts.get(2) {
            None => Selection::TopB,
            Some(&"g") => Selection::Greedy,
            Some(&"s") => Selection::Softmax,
            Some(_) => return Err(unknown()),
        };
        Ok(Strategy::Targeted {
            utility,
            estimator,
            selection,
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
