//! Active-learning loop, interest-set construction, AMSE evaluation and
//! multi-seed orchestration.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{select_baseline, select_batch, utility, FantasyState, Strategy, UtilityKind, UtilitySpec};
use crate::datagen::{
    gen_shift_target, generate, load_covariates_csv, semisynthetic_oracle, semisynthetic_outcomes, true_cq_oracle, Covariates,
    Dataset, GenSpec, Generator, TreatmentMode, DEFAULT_NOISE_SD, DEFAULT_ORACLE_SAMPLES,
};
use crate::embeddings::{fit_cme, CmeOperatorFit, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::estimators::{
    cq_posterior_cme, cq_posterior_mc, default_sampler_bandwidth, fit_conditional_sampler, ConditionalSampler, CqKind, CqPosterior,
    EmbeddingContext, InterestPoint, InterestSet,
};
use crate::gp::{fit, optimize_hyperparameters, GpModel, GpPosterior, OptimizerSettings};
use crate::kernels::{KernelFamily, KernelSpec, ProductKernelSpec, Rows};
use crate::numerics::median_heuristic_or_default;
use crate::rng::{streams, RandomStream};

pub const MAX_INTEREST_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentChoice {
    /// One treatment value (configured, or drawn from the grid per trial).
    Fixed,
    /// Every value of the treatment grid.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningChoice {
    /// One `z*` drawn per trial from the training range.
    Fixed,
    /// `n_conditioning` values drawn uniformly from the training range.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterestSettings {
    pub treatments: TreatmentChoice,
    pub conditioning: ConditioningChoice,
    pub fixed_treatment: Option<f64>,
    pub n_conditioning: usize,
    pub max_points: usize,
}

impl Default for InterestSettings {
    fn default() -> Self {
        Self {
            treatments: TreatmentChoice::All,
            conditioning: ConditioningChoice::Fixed,
            fixed_treatment: None,
            n_conditioning: 10,
            max_points: MAX_INTEREST_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub n_samples: usize,
    /// Conditioning-kernel bandwidth of the resampler; `None` uses the
    /// default rule.
    pub bandwidth: Option<f64>,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_samples: 200,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSettings {
    pub kernel: KernelFamily,
    /// Optimizer iterations in the first round.
    pub iterations: usize,
    /// Optimizer iterations in later rounds, warm-started from the previous
    /// round's hyperparameters.
    pub warm_iterations: usize,
    pub step: f64,
    pub freeze_hyperparameters: bool,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Rbf,
            iterations: 500,
            warm_iterations: 20,
            step: 0.05,
            freeze_hyperparameters: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmeSettings {
    pub lambda: f64,
    pub scale_lambda_by_n: bool,
}

impl Default for CmeSettings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            scale_lambda_by_n: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub generator: Generator,
    pub treatment_mode: TreatmentMode,
    /// Rows in the full dataset (warm start plus pool).
    pub n: usize,
    pub noise_sd: f64,
    /// Target-population sample count for the shifted ATE.
    pub target_n: usize,
    /// Covariate table for semi-synthetic runs.
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub cq_kind: CqKind,
    pub data: DataSettings,
    pub strategy: Strategy,
    pub warm_start: usize,
    pub batch_size: usize,
    pub budget: usize,
    pub interest: InterestSettings,
    pub seeds: Vec<u64>,
    pub mc: McSettings,
    pub gp: GpSettings,
    pub cme: CmeSettings,
    pub oracle_samples: usize,
    pub softmax_temperature: Option<f64>,
    pub record_wall_time: bool,
}

impl TrialConfig {
    /// Visualization-scale defaults for a kind and generator.
    pub fn defaults(cq_kind: CqKind, generator: Generator, strategy: Strategy) -> Self {
        let (n, warm_start, budget, mode) = match generator {
            Generator::Visualization => (500, 20, 180, TreatmentMode::Continuous),
            _ => (600, 100, 100, TreatmentMode::Binary),
        };
        Self {
            cq_kind,
            data: DataSettings {
                generator,
                treatment_mode: mode,
                n,
                noise_sd: DEFAULT_NOISE_SD,
                target_n: 500,
                covariates: None,
            },
            strategy,
            warm_start,
            batch_size: 5,
            budget,
            interest: InterestSettings::default(),
            seeds: (0..20).collect(),
            mc: McSettings::default(),
            gp: GpSettings::default(),
            cme: CmeSettings::default(),
            oracle_samples: DEFAULT_ORACLE_SAMPLES,
            softmax_temperature: None,
            record_wall_time: false,
        }
    }

    pub fn rounds(&self) -> usize {
        self.budget / self.batch_size.max(1)
    }

    /// Checks the invariants that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::schema("batch_size", "must be at least 1"));
        }
        if self.budget % self.batch_size != 0 {
            return Err(Error::schema(
                "budget",
                format!("{} is not divisible by batch_size {}", self.budget, self.batch_size),
            ));
        }
        if self.warm_start == 0 {
            return Err(Error::schema("warm_start", "must be at least 1"));
        }
        if self.data.generator != Generator::SemiSynthetic && self.warm_start + self.budget > self.data.n {
            return Err(Error::schema(
                "budget",
                format!("warm_start + budget = {} exceeds n = {}", self.warm_start + self.budget, self.data.n),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::schema("seeds", "at least one seed is required"));
        }
        if self.interest.max_points == 0 {
            return Err(Error::schema("interest.max_points", "must be at least 1"));
        }
        if self.interest.n_conditioning == 0 {
            return Err(Error::schema("interest.n_conditioning", "must be at least 1"));
        }
        if self.mc.n_samples == 0 {
            return Err(Error::schema("mc.n_samples", "must be at least 1"));
        }
        if self.oracle_samples == 0 {
            return Err(Error::schema("oracle_samples", "must be at least 1"));
        }
        if !(self.gp.step > 0.0 && self.gp.step.is_finite()) {
            return Err(Error::schema("gp.step", "must be positive"));
        }
        if !(self.cme.lambda > 0.0 && self.cme.lambda.is_finite()) {
            return Err(Error::schema("cme.lambda", "must be positive"));
        }
        match (self.data.generator, self.cq_kind) {
            (Generator::ShiftTarget, _) => {
                return Err(Error::schema("generator", "shift_target is a target population, not a training generator"))
            }
            (Generator::Visualization, CqKind::Ateds) => {
                return Err(Error::schema("cq_kind", "ateds needs the simulation generator"))
            }
            (Generator::SemiSynthetic, CqKind::Cate | CqKind::Ateds) => {
                return Err(Error::schema("cq_kind", "semi-synthetic runs support ate and att"))
            }
            (Generator::SemiSynthetic, _) if self.data.covariates.is_none() => {
                return Err(Error::schema("covariates", "semi-synthetic runs need a covariate CSV"))
            }
            (Generator::Visualization, _) if self.data.treatment_mode == TreatmentMode::Binary => {
                return Err(Error::schema("treatment_mode", "visualization data has continuous or discrete treatments"))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled: usize,
    pub amse: f64,
    pub trace_q: f64,
    pub logdet_q: f64,
    pub wall_time: f64,
    /// Dataset row indices acquired in this round.
    pub selected: Vec<usize>,
}

impl RoundRecord {
    pub fn sqrt_amse(&self) -> f64 {
        self.amse.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// Reason the trial stopped early, if it did.
    pub aborted: Option<String>,
    pub wall_time: f64,
}

pub fn amse(estimated: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch(estimated.len(), truth.len()));
    }
    if estimated.is_empty() {
        return Err(Error::ZeroCount);
    }
    Ok((estimated - truth).norm_squared() / estimated.len() as f64)
}

pub fn build_interest_set(config: &TrialConfig, data: &Dataset, rng: &mut RandomStream) -> Result<InterestSet> {
    let settings = &config.interest;
    let grid = data.meta.treatment_mode.grid();
    let treatments = match settings.treatments {
        TreatmentChoice::All => grid.clone(),
        TreatmentChoice::Fixed => vec![settings.fixed_treatment.unwrap_or_else(|| grid[rng.index(grid.len())])],
    };
    let points: Vec<InterestPoint> = match config.cq_kind {
        CqKind::Cate => {
            let (lo, hi) = data
                .conditioning_range()
                .ok_or_else(|| Error::InconsistentKind("cate needs a conditioning variable".into()))?;
            let count = match settings.conditioning {
                ConditioningChoice::Fixed => 1,
                ConditioningChoice::Random => settings.n_conditioning,
            };
            let zs: Vec<f64> = (0..count).map(|_| rng.uniform_range(lo, hi)).collect();
            zs.iter()
                .flat_map(|z| treatments.iter().map(move |a| InterestPoint::cate(*a, vec![*z])))
                .collect()
        }
        CqKind::Ate | CqKind::Ateds => treatments.iter().map(|a| InterestPoint::marginal(*a)).collect(),
        CqKind::Att => match settings.treatments {
            TreatmentChoice::All => grid
                .iter()
                .flat_map(|prior| grid.iter().map(move |a| InterestPoint::att(*a, *prior)))
                .collect(),
            TreatmentChoice::Fixed => grid.iter().map(|a| InterestPoint::att(*a, treatments[0])).collect(),
        },
    };
    let points = if points.len() > settings.max_points {
        let mut keep = rng.sample_without_replacement(points.len(), settings.max_points);
        keep.sort_unstable();
        keep.into_iter().map(|i| points[i].clone()).collect()
    } else {
        points
    };
    InterestSet::new(config.cq_kind, points)
}

fn kernel_template(config: &TrialConfig) -> ProductKernelSpec {
    let family = config.gp.kernel;
    let treatment = if config.data.treatment_mode == TreatmentMode::Binary {
        KernelSpec::delta()
    } else {
        KernelSpec::new(family, 1.0)
    };
    ProductKernelSpec {
        treatment,
        conditioning: (config.cq_kind == CqKind::Cate).then(|| KernelSpec::new(family, 1.0)),
        adjustment: KernelSpec::new(family, 1.0),
        output_scale: 1.0,
    }
}

/// Kernel on the variable a conditional embedding or sampler conditions on.
fn conditioning_kernel(config: &TrialConfig, bandwidth: f64) -> KernelSpec {
    if config.cq_kind == CqKind::Att && config.data.treatment_mode == TreatmentMode::Binary {
        KernelSpec::delta()
    } else {
        KernelSpec::new(config.gp.kernel, bandwidth)
    }
}

enum Estimator {
    Conditional(CmeOperatorFit),
    Anchors(DMatrix<f64>),
    Sampler(ConditionalSampler),
}

impl Estimator {
    fn posterior(&self, config: &TrialConfig, gp: &GpPosterior, interest: &InterestSet, seed: u64) -> Result<CqPosterior> {
        match self {
            Estimator::Conditional(fit) => cq_posterior_cme(gp, interest, EmbeddingContext::Conditional(fit)),
            Estimator::Anchors(anchors) => {
                let ctx = if config.cq_kind == CqKind::Ateds {
                    EmbeddingContext::Shifted { anchors }
                } else {
                    EmbeddingContext::Marginal { anchors }
                };
                cq_posterior_cme(gp, interest, ctx)
            }
            Estimator::Sampler(sampler) => {
                // The same sample sets every round, so rounds differ only
                // through the GP.
                let mut rng = RandomStream::new(seed, streams::ESTIMATOR);
                cq_posterior_mc(gp, interest, sampler, config.mc.n_samples, &mut rng)
            }
        }
    }
}

/// The variable the adjustment distribution is conditioned on, if any.
fn embedding_conditioning(config: &TrialConfig, data: &Dataset) -> Result<Option<DMatrix<f64>>> {
    Ok(match config.cq_kind {
        CqKind::Cate => Some(data.conditioning.clone().ok_or(Error::MissingBlock("conditioning"))?),
        CqKind::Att => {
            let a = data.treatments()?;
            Some(DMatrix::from_column_slice(a.len(), 1, a.as_slice()))
        }
        CqKind::Ate | CqKind::Ateds => None,
    })
}

fn build_estimator(config: &TrialConfig, data: &Dataset, target: Option<&Dataset>, adjustment_kernel: KernelSpec) -> Result<Estimator> {
    let anchors = match (config.cq_kind, target) {
        (CqKind::Ateds, Some(t)) => t.marginal_adjustment(),
        (CqKind::Ateds, None) => return Err(Error::MissingContext("ateds needs target samples".into())),
        (CqKind::Cate, _) => data.adjustment.clone(),
        _ => data.marginal_adjustment(),
    };
    let cond = embedding_conditioning(config, data)?;
    match config.strategy.estimator() {
        crate::acquisition::EstimatorKind::Cme => match cond {
            Some(c) => {
                let kernel = conditioning_kernel(config, median_heuristic_or_default(&c).0);
                Ok(Estimator::Conditional(fit_cme(
                    &c,
                    &anchors,
                    kernel,
                    adjustment_kernel,
                    config.cme.lambda,
                    config.cme.scale_lambda_by_n,
                )?))
            }
            None => Ok(Estimator::Anchors(anchors)),
        },
        crate::acquisition::EstimatorKind::Mc => {
            let kernel = match &cond {
                Some(c) => conditioning_kernel(config, config.mc.bandwidth.unwrap_or_else(|| default_sampler_bandwidth(c, &anchors))),
                None => KernelSpec::rbf(1.0),
            };
            Ok(Estimator::Sampler(fit_conditional_sampler(cond.as_ref(), &anchors, kernel)?))
        }
    }
}

struct TrialData {
    data: Dataset,
    covariates: Option<Covariates>,
    target: Option<Dataset>,
}

fn load_trial_data(config: &TrialConfig, seed: u64) -> Result<TrialData> {
    let d = &config.data;
    match d.generator {
        Generator::SemiSynthetic => {
            let path = d.covariates.as_ref().ok_or_else(|| Error::schema("covariates", "missing"))?;
            let cov = load_covariates_csv(path)?;
            let data = semisynthetic_outcomes(&cov, d.treatment_mode, seed, d.noise_sd)?;
            Ok(TrialData {
                data,
                covariates: Some(cov),
                target: None,
            })
        }
        generator => {
            let data = generate(&GenSpec {
                generator,
                n: d.n,
                treatment_mode: d.treatment_mode,
                seed,
                noise_sd: d.noise_sd,
            })?;
            let target = if config.cq_kind == CqKind::Ateds {
                Some(gen_shift_target(&GenSpec::new(Generator::ShiftTarget, d.target_n, d.treatment_mode, seed))?)
            } else {
                None
            };
            Ok(TrialData {
                data,
                covariates: None,
                target,
            })
        }
    }
}

fn truth_for(config: &TrialConfig, trial: &TrialData, interest: &InterestSet, seed: u64) -> Result<DVector<f64>> {
    match &trial.covariates {
        Some(cov) => semisynthetic_oracle(cov, &trial.data, interest),
        None => {
            let spec = GenSpec {
                generator: config.data.generator,
                n: config.data.n,
                treatment_mode: config.data.treatment_mode,
                seed,
                noise_sd: config.data.noise_sd,
            };
            true_cq_oracle(&spec, interest, config.oracle_samples, &mut RandomStream::new(seed, streams::ORACLE))
        }
    }
}

fn logdet_q(q: &DMatrix<f64>) -> Result<f64> {
    Ok(-utility(UtilityKind::Ig, &FantasyState::new(q.clone()))?)
}

/// Everything fixed for the duration of one trial.
struct TrialSetup {
    rows: Rows,
    outcomes: DVector<f64>,
    interest: InterestSet,
    truth: DVector<f64>,
    estimator: Estimator,
    warm: Vec<usize>,
    pool: Vec<usize>,
}

fn setup_trial(config: &TrialConfig, seed: u64) -> Result<TrialSetup> {
    config.validate()?;
    let trial = load_trial_data(config, seed)?;
    let n = trial.data.len();
    if config.warm_start + config.budget > n {
        return Err(Error::PoolExhausted {
            requested: config.warm_start + config.budget,
            available: n,
        });
    }
    let warm = RandomStream::new(seed, streams::WARM_START).sample_without_replacement(n, config.warm_start);
    let mut in_warm = vec![false; n];
    for &i in &warm {
        in_warm[i] = true;
    }
    let pool: Vec<usize> = (0..n).filter(|&i| !in_warm[i]).collect();
    let interest = build_interest_set(config, &trial.data, &mut RandomStream::new(seed, streams::INTEREST))?;
    let truth = truth_for(config, &trial, &interest, seed)?;
    let rows = trial.data.rows(config.cq_kind)?;
    let outcomes = trial.data.outcomes()?.clone();
    let estimator = build_estimator(config, &trial.data, trial.target.as_ref(), kernel_template(config).adjustment)?;
    Ok(TrialSetup {
        rows,
        outcomes,
        interest,
        truth,
        estimator,
        warm,
        pool,
    })
}

fn select_round(
    config: &TrialConfig,
    gp: &GpPosterior,
    cq: &CqPosterior,
    pool_rows: &Rows,
    rng: &mut RandomStream,
) -> Result<Vec<usize>> {
    match config.strategy {
        Strategy::Baseline(kind) => select_baseline(kind, gp, pool_rows, config.batch_size, rng),
        Strategy::Targeted { utility, selection, .. } => {
            let spec = UtilitySpec {
                kind: utility,
                selection,
                batch_size: config.batch_size,
                softmax_temperature: config.softmax_temperature,
            };
            select_batch(&spec, gp, cq, pool_rows, rng)
        }
    }
}

/// Runs one trial, keeping the records of completed rounds if a later
/// round fails.
pub fn run_trial(config: &TrialConfig, seed: u64) -> TrialResult {
    let start = Instant::now();
    let mut records = Vec::new();
    let outcome = run_rounds(config, seed, &mut records);
    let aborted = outcome.err().map(|e| {
        log::warn!("trial {} seed {seed} aborted after {} rounds: {e}", config.strategy, records.len());
        e.to_string()
    });
    TrialResult {
        seed,
        records,
        aborted,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

fn run_rounds(config: &TrialConfig, seed: u64, records: &mut Vec<RoundRecord>) -> Result<()> {
    let setup = setup_trial(config, seed)?;
    let mut labeled = setup.warm.clone();
    let mut pool = setup.pool.clone();
    let mut acquisition_rng = RandomStream::new(seed, streams::ACQUISITION);
    let mut model: Option<GpModel> = None;
    let mut state: Option<(GpPosterior, CqPosterior)> = None;

    for round in 0..=config.rounds() {
        let round_start = Instant::now();
        let mut selected = Vec::new();
        if let Some((gp, cq)) = &state {
            let pool_rows = setup.rows.select(&pool);
            let mut picks = select_round(config, gp, cq, &pool_rows, &mut acquisition_rng)?;
            selected = picks.iter().map(|&p| pool[p]).collect();
            labeled.extend(&selected);
            picks.sort_unstable_by(|a, b| b.cmp(a));
            for p in picks {
                pool.remove(p);
            }
        }
        let train = setup.rows.select(&labeled);
        let y = setup.outcomes.select_rows(&labeled);
        let iterations = match (round, config.gp.freeze_hyperparameters) {
            (0, _) => config.gp.iterations,
            (_, true) => 0,
            _ => config.gp.warm_iterations,
        };
        let start_model = match model {
            Some(m) => m,
            None => GpModel::initial(kernel_template(config), &train, &y)?,
        };
        let settings = OptimizerSettings {
            iterations,
            step: config.gp.step,
        };
        let (fitted, _) = optimize_hyperparameters(&start_model, &train, &y, &settings)?;
        model = Some(fitted);
        let gp = fit(&fitted, &train, &y)?;
        let cq = setup.estimator.posterior(config, &gp, &setup.interest, seed)?;
        let record = RoundRecord {
            round,
            labeled: labeled.len(),
            amse: amse(&cq.nu, &setup.truth)?,
            trace_q: cq.q.trace(),
            logdet_q: logdet_q(&cq.q)?,
            wall_time: if config.record_wall_time {
                round_start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            selected,
        };
        log::debug!(
            "{} seed {seed} round {round}: labeled {} sqrt_amse {:.4}",
            config.strategy,
            record.labeled,
            record.sqrt_amse()
        );
        records.push(record);
        state = Some((gp, cq));
    }
    Ok(())
}

pub fn run_active_loop(config: &TrialConfig, seed: u64) -> Result<Vec<RoundRecord>> {
    let result = run_trial(config, seed);
    match result.aborted {
        None => Ok(result.records),
        Some(reason) => Err(Error::InvalidArgument(format!("trial aborted: {reason}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub round: usize,
    pub labeled: usize,
    pub mean_sqrt_amse: f64,
    pub se_sqrt_amse: f64,
    pub n_trials: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<AggregateRow>,
}

#[derive(Debug, Clone)]
pub struct TrialSet {
    pub config: TrialConfig,
    pub trials: Vec<TrialResult>,
    pub table: MetricsTable,
}

impl TrialSet {
    pub fn aborted(&self) -> usize {
        self.trials.iter().filter(|t| t.aborted.is_some()).count()
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn aggregate(strategy: &str, trials: &[TrialResult]) -> MetricsTable {
    let complete: Vec<&TrialResult> = trials.iter().filter(|t| t.aborted.is_none()).collect();
    let aborted = trials.len() - complete.len();
    let rounds = complete.iter().map(|t| t.records.len()).min().unwrap_or(0);
    let rows = (0..rounds)
        .map(|r| {
            let values: Vec<f64> = complete.iter().map(|t| t.records[r].sqrt_amse()).collect();
            let (mean, se) = mean_and_se(&values);
            AggregateRow {
                strategy: strategy.to_string(),
                round: r,
                labeled: complete[0].records[r].labeled,
                mean_sqrt_amse: mean,
                se_sqrt_amse: se,
                n_trials: values.len(),
                aborted,
            }
        })
        .collect();
    MetricsTable { rows }
}

/// Runs every seed (up to `parallel` at once) and aggregates √AMSE per round.
pub fn run_trials(config: &TrialConfig, parallel: usize) -> Result<TrialSet> {
    config.validate()?;
    let run = || -> Vec<TrialResult> { config.seeds.par_iter().map(|&s| run_trial(config, s)).collect() };
    let trials = if parallel <= 1 {
        config.seeds.iter().map(|&s| run_trial(config, s)).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run)
    };
    let table = aggregate(&config.strategy.to_string(), &trials);
    Ok(TrialSet {
        config: config.clone(),
        trials,
        table,
    })
}

pub const TRIAL_COLUMNS: [&str; 10] = [
    "strategy",
    "cq_kind",
    "seed",
    "round",
    "labeled",
    "sqrt_amse",
    "trace_q",
    "logdet_q",
    "wall_time_s",
    "aborted",
];

pub const AGGREGATE_COLUMNS: [&str; 7] = [
    "strategy",
    "round",
    "labeled",
    "mean_sqrt_amse",
    "se_sqrt_amse",
    "n_trials",
    "aborted",
];

pub fn write_trial_csv<W: Write>(config: &TrialConfig, trial: &TrialResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRIAL_COLUMNS)?;
    let aborted = if trial.aborted.is_some() { "1" } else { "0" };
    for r in &trial.records {
        w.write_record([
            config.strategy.to_string(),
            config.cq_kind.to_string(),
            trial.seed.to_string(),
            r.round.to_string(),
            r.labeled.to_string(),
            r.sqrt_amse().to_string(),
            r.trace_q.to_string(),
            r.logdet_q.to_string(),
            r.wall_time.to_string(),
            aborted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(tables: &[&MetricsTable], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AGGREGATE_COLUMNS)?;
    for t in tables {
        for r in &t.rows {
            w.write_record([
                r.strategy.clone(),
                r.round.to_string(),
                r.labeled.to_string(),
                r.mean_sqrt_amse.to_string(),
                r.se_sqrt_amse.to_string(),
                r.n_trials.to_string(),
                r.aborted.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-trial wall-clock timings (kept apart from the deterministic CSVs).
pub fn write_timings_csv<W: Write>(sets: &[&TrialSet], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "seed", "rounds", "wall_time_s"])?;
    for set in sets {
        for t in &set.trials {
            w.write_record([
                set.config.strategy.to_string(),
                t.seed.to_string(),
                t.records.len().to_string(),
                format!("{:.3}", t.wall_time),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: CqKind, generator: Generator, strategy: &str) -> TrialConfig {
        let mut c = TrialConfig::defaults(kind, generator, strategy.parse().unwrap());
        c.data.n = 80;
        c.warm_start = 10;
        c.batch_size = 5;
        c.budget = 10;
        c.seeds = vec![0];
        c.oracle_samples = 2000;
        c.gp.iterations = 60;
        c.gp.warm_iterations = 10;
        c.mc.n_samples = 30;
        c
    }

    #[test]
    fn amse_examples() {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        assert_eq!(amse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(amse(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(amse(&v(&[0.0, 3.0]), &v(&[0.0, 0.0])).unwrap(), 4.5);
        assert!(matches!(amse(&v(&[0.0]), &v(&[0.0, 1.0])), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn interest_set_shapes() {
        let mut c = small(CqKind::Cate, Generator::Simulation, "random");
        let data = generate(&GenSpec::new(Generator::Simulation, 50, TreatmentMode::Binary, 0)).unwrap();
        let mut rng = RandomStream::new(0, streams::INTEREST);
        let s = build_interest_set(&c, &data, &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.points[0].conditioning, s.points[1].conditioning);

        c.cq_kind = CqKind::Att;
        assert_eq!(build_interest_set(&c, &data, &mut rng).unwrap().len(), 4);

        let cont = generate(&GenSpec::new(Generator::Visualization, 50, TreatmentMode::Discrete, 0)).unwrap();
        let c = small(CqKind::Cate, Generator::Visualization, "random");
        let s = build_interest_set(&c, &cont, &mut rng).unwrap();
        assert_eq!(s.len(), 9);
        let (lo, hi) = cont.conditioning_range().unwrap();
        let z = s.points[0].conditioning.as_ref().unwrap()[0];
        assert!(lo <= z && z <= hi);

        let mut c = small(CqKind::Att, Generator::Visualization, "random");
        assert_eq!(build_interest_set(&c, &cont, &mut rng).unwrap().len(), 64);
        c.interest.treatments = TreatmentChoice::Fixed;
        c.interest.fixed_treatment = Some(0.3);
        let s = build_interest_set(&c, &cont, &mut rng).unwrap();
        assert_eq!(s.len(), 9);
        assert!(s.points.iter().all(|p| p.prior_treatment == Some(0.3)));

        let mut c = small(CqKind::Cate, Generator::Visualization, "random");
        c.interest.treatments = TreatmentChoice::Fixed;
        c.interest.conditioning = ConditioningChoice::Random;
        let s = build_interest_set(&c, &cont, &mut rng).unwrap();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn zero_budget_gives_warm_record_only() {
        let mut c = small(CqKind::Cate, Generator::Visualization, "tvr_cme");
        c.budget = 0;
        let r = run_active_loop(&c, 0).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].labeled, 10);
        assert!(r[0].selected.is_empty());
    }

    #[test]
    fn loop_is_deterministic_and_disjoint() {
        for strategy in ["random", "tvr_cme_g", "ig_mc", "coreset", "mu_bald", "pool_variance", "tvr_cme_s"] {
            let c = small(CqKind::Cate, Generator::Visualization, strategy);
            let a = run_active_loop(&c, 3).unwrap();
            let b = run_active_loop(&c, 3).unwrap();
            assert_eq!(a, b, "{strategy}");
            assert_eq!(a.len(), 3);
            let warm = RandomStream::new(3, streams::WARM_START).sample_without_replacement(80, 10);
            let mut seen: Vec<usize> = warm.clone();
            for (r, rec) in a.iter().enumerate() {
                assert_eq!(rec.labeled, 10 + 5 * r);
                for s in &rec.selected {
                    assert!(!seen.contains(s), "{strategy}: {s} repeated");
                    seen.push(*s);
                }
                assert!(rec.amse >= 0.0 && rec.trace_q >= 0.0);
            }
        }
    }

    #[test]
    fn every_kind_runs() {
        for (kind, generator, strategy) in [
            (CqKind::Ate, Generator::Simulation, "tvr_cme"),
            (CqKind::Att, Generator::Simulation, "ig_cme"),
            (CqKind::Att, Generator::Simulation, "tvr_mc"),
            (CqKind::Ateds, Generator::Simulation, "ig_cme"),
            (CqKind::Ateds, Generator::Simulation, "tvr_mc_g"),
            (CqKind::Cate, Generator::Simulation, "ig_cme_g"),
        ] {
            let c = small(kind, generator, strategy);
            let r = run_active_loop(&c, 1).unwrap_or_else(|e| panic!("{kind} {strategy}: {e}"));
            assert_eq!(r.len(), 3);
        }
    }

    #[test]
    fn frozen_hyperparameters_shrink_trace() {
        let mut c = small(CqKind::Cate, Generator::Visualization, "tvr_cme_g");
        c.gp.freeze_hyperparameters = true;
        c.budget = 20;
        let r = run_active_loop(&c, 2).unwrap();
        for w in r.windows(2) {
            assert!(w[1].trace_q <= w[0].trace_q + 1e-10);
        }
    }

    #[test]
    fn aggregation() {
        let rec = |round, v: f64| RoundRecord {
            round,
            labeled: 10 + 5 * round,
            amse: v * v,
            trace_q: 0.0,
            logdet_q: 0.0,
            wall_time: 0.0,
            selected: vec![],
        };
        let t = |seed, vals: &[f64], aborted: bool| TrialResult {
            seed,
            records: vals.iter().enumerate().map(|(r, v)| rec(r, *v)).collect(),
            aborted: aborted.then(|| "x".to_string()),
            wall_time: 0.0,
        };
        let one = aggregate("random", &[t(0, &[2.0, 1.0], false)]);
        assert_eq!(one.rows.len(), 2);
        assert_eq!(one.rows[1].mean_sqrt_amse, 1.0);
        assert_eq!(one.rows[1].se_sqrt_amse, 0.0);
        let many = aggregate("random", &[t(0, &[3.0], false), t(1, &[3.0], false), t(2, &[9.0], true)]);
        assert_eq!(many.rows[0].mean_sqrt_amse, 3.0);
        assert_eq!(many.rows[0].n_trials, 2);
        assert_eq!(many.rows[0].aborted, 1);
    }

    #[test]
    fn config_validation() {
        let mut c = small(CqKind::Cate, Generator::Visualization, "random");
        c.budget = 12;
        assert!(matches!(c.validate(), Err(Error::Schema { key, .. }) if key == "budget"));
        let mut c = small(CqKind::Cate, Generator::Visualization, "random");
        c.budget = 100;
        assert!(matches!(c.validate(), Err(Error::Schema { key, .. }) if key == "budget"));
        let c = small(CqKind::Ateds, Generator::Visualization, "random");
        assert!(c.validate().is_err());
    }

    #[test]
    fn failed_trial_is_counted_as_aborted() {
        let mut c = small(CqKind::Ate, Generator::SemiSynthetic, "random");
        c.data.covariates = Some(PathBuf::from("/nonexistent/covariates.csv"));
        let t = run_trial(&c, 0);
        assert!(t.aborted.is_some());
        assert!(t.records.is_empty());
    }

    #[test]
    fn trial_csv_format() {
        let c = small(CqKind::Cate, Generator::Visualization, "random");
        let set = run_trials(&c, 1).unwrap();
        let mut buf = Vec::new();
        write_trial_csv(&c, &set.trials[0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRIAL_COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("random,cate,0,0,10,"));
        let mut buf = Vec::new();
        write_aggregate_csv(&[&set.table], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
