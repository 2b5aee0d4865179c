//! Synthetic benchmark generators, semi-synthetic outcome attachment and
//! the Monte-Carlo ground-truth oracle.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CqKind, InterestSet};
use crate::kernels::Rows;
use crate::numerics::{sigmoid, skew_normal_sample, standard_normal_cdf};
use crate::rng::{streams, RandomStream, RNG_VERSION};

pub const DEFAULT_NOISE_SD: f64 = 0.4;
pub const DEFAULT_ORACLE_SAMPLES: usize = 100_000;
/// Half-width of the acceptance window for continuous-treatment ATT truths.
pub const ATT_WINDOW: f64 = 0.05;
pub const SIMULATION_OUTCOME_VARIANT: &str = "spec_v1";
const SIMULATION_BETA: [f64; 4] = [1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0];
const VISUALIZATION_BETA: [f64; 2] = [1.0, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Visualization,
    Simulation,
    ShiftTarget,
    SemiSynthetic,
}

impl Generator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Generator::Visualization => "visualization",
            Generator::Simulation => "simulation",
            Generator::ShiftTarget => "shift_target",
            Generator::SemiSynthetic => "semi_synthetic",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visualization" => Ok(Generator::Visualization),
            "simulation" => Ok(Generator::Simulation),
            "shift_target" => Ok(Generator::ShiftTarget),
            "semi_synthetic" => Ok(Generator::SemiSynthetic),
            other => Err(Error::InvalidArgument(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentMode {
    Binary,
    Discrete,
    Continuous,
}

impl TreatmentMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TreatmentMode::Binary => "binary",
            TreatmentMode::Discrete => "discrete",
            TreatmentMode::Continuous => "continuous",
        }
    }

    /// Treatment values the interest set is built on.
    pub fn grid(&self) -> Vec<f64> {
        match self {
            TreatmentMode::Binary => vec![0.0, 1.0],
            _ => (1..=9).map(|k| k as f64 / 10.0).collect(),
        }
    }

    fn assign(&self, a_org: f64) -> f64 {
        match self {
            TreatmentMode::Binary => {
                if a_org > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TreatmentMode::Continuous => sigmoid(a_org),
            TreatmentMode::Discrete => round_to_grid(sigmoid(a_org)),
        }
    }
}

impl FromStr for TreatmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TreatmentMode::Binary),
            "discrete" => Ok(TreatmentMode::Discrete),
            "continuous" => Ok(TreatmentMode::Continuous),
            other => Err(Error::InvalidArgument(format!("unknown treatment mode `{other}`"))),
        }
    }
}

fn round_to_grid(a: f64) -> f64 {
    (a * 10.0).round() / 10.0
}

fn default_noise_sd() -> f64 {
    DEFAULT_NOISE_SD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub generator: Generator,
    pub n: usize,
    pub treatment_mode: TreatmentMode,
    pub seed: u64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

impl GenSpec {
    pub fn new(generator: Generator, n: usize, treatment_mode: TreatmentMode, seed: u64) -> Self {
        Self {
            generator,
            n,
            treatment_mode,
            seed,
            noise_sd: DEFAULT_NOISE_SD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::ZeroCount);
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidScale(self.noise_sd));
        }
        if self.generator == Generator::Visualization && self.treatment_mode == TreatmentMode::Binary {
            return Err(Error::InvalidArgument(
                "the visualization generator supports continuous or discrete treatments".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: Generator,
    pub seed: u64,
    pub treatment_mode: TreatmentMode,
    pub noise_sd: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outcome_variant: Option<String>,
    pub rng_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Absent for target-population samples.
    pub treatment: Option<DVector<f64>>,
    pub conditioning: Option<DMatrix<f64>>,
    pub adjustment: DMatrix<f64>,
    pub outcome: Option<DVector<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.adjustment.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outcomes(&self) -> Result<&DVector<f64>> {
        self.outcome
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no outcomes".into()))
    }

    pub fn treatments(&self) -> Result<&DVector<f64>> {
        self.treatment
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no treatments".into()))
    }

    /// Adjustment set used when `z` is not a conditioning variable: `z`
    /// joined with the informative adjustment columns.
    pub fn marginal_adjustment(&self) -> DMatrix<f64> {
        let keep = match self.meta.generator {
            Generator::Simulation | Generator::ShiftTarget => self.adjustment.ncols().min(3),
            _ => self.adjustment.ncols(),
        };
        let s = self.adjustment.columns(0, keep);
        match &self.conditioning {
            Some(z) => {
                let mut out = DMatrix::zeros(self.len(), z.ncols() + keep);
                out.columns_mut(0, z.ncols()).copy_from(z);
                out.columns_mut(z.ncols(), keep).copy_from(&s);
                out
            }
            None => s.into_owned(),
        }
    }

    /// GP input rows for a causal-quantity kind.
    pub fn rows(&self, kind: CqKind) -> Result<Rows> {
        let a = self.treatments()?;
        match kind {
            CqKind::Cate => {
                let z = self.conditioning.clone().ok_or(Error::MissingBlock("conditioning"))?;
                Rows::new(a.as_slice(), Some(z), self.adjustment.clone())
            }
            _ => Rows::new(a.as_slice(), None, self.marginal_adjustment()),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            treatment: self.treatment.as_ref().map(|a| a.select_rows(indices)),
            conditioning: self.conditioning.as_ref().map(|z| z.select_rows(indices)),
            adjustment: self.adjustment.select_rows(indices),
            outcome: self.outcome.as_ref().map(|y| y.select_rows(indices)),
            meta: self.meta.clone(),
        }
    }

    /// Empirical range of the conditioning variable's first column.
    pub fn conditioning_range(&self) -> Option<(f64, f64)> {
        let z = self.conditioning.as_ref()?;
        let col = z.column(0);
        Some((col.min(), col.max()))
    }
}

fn meta(spec: &GenSpec, variant: Option<&str>) -> DatasetMeta {
    DatasetMeta {
        generator: spec.generator,
        seed: spec.seed,
        treatment_mode: spec.treatment_mode,
        noise_sd: spec.noise_sd,
        outcome_variant: variant.map(str::to_string),
        rng_version: RNG_VERSION.to_string(),
    }
}

/// Draws `s₁ | z` for the visualization mechanism.
fn visualization_s1(rng: &mut RandomStream, z: f64) -> Result<f64> {
    let x = 2.5 * z;
    skew_normal_sample(rng, 0.1 * x, 0.1 * x.abs() + 0.05, -8.0 + 8.0 * sigmoid(x))
}

/// `E[s₁ | z]` for the visualization mechanism.
pub fn visualization_s1_mean(z: f64) -> f64 {
    let x = 2.5 * z;
    crate::numerics::skew_normal_mean(0.1 * x, 0.1 * x.abs() + 0.05, -8.0 + 8.0 * sigmoid(x))
}

fn visualization_outcome(a: f64, z: f64, s1: f64) -> f64 {
    a * z * s1 + 2.0 * z + s1
}

fn simulation_outcome(a: f64, z: f64, s: &[f64]) -> f64 {
    a * z + a * s[0] + s[1] + s[2].sin()
}

/// Simulation covariates `(s₁, s₂, s₃, s₄)` given `z`.
fn simulation_adjustment(rng: &mut RandomStream, z: f64) -> [f64; 4] {
    let e: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    [
        z.cos() + z + e[0],
        -1.0 + 0.25 * z * z + e[1],
        z.sin().powi(2) + e[2],
        (2.0 * e[3]).exp() + e[4],
    ]
}

fn propensity_org(rng: &mut RandomStream, x_beta: f64) -> Result<f64> {
    Ok(standard_normal_cdf(3.0 * x_beta)? + 1.5 * rng.normal() - 0.5)
}

struct VisRow {
    z: f64,
    s1: f64,
    s2: f64,
    a: f64,
}

fn visualization_row(rng: &mut RandomStream, mode: TreatmentMode) -> Result<VisRow> {
    let z = rng.uniform_range(-2.0, 2.0);
    let s1 = visualization_s1(rng, z)?;
    let s2 = (2.0 * rng.normal()).exp() + rng.normal();
    let a_org = propensity_org(rng, VISUALIZATION_BETA[0] * z + VISUALIZATION_BETA[1] * s1)?;
    Ok(VisRow {
        z,
        s1,
        s2,
        a: mode.assign(a_org),
    })
}

struct SimRow {
    z: f64,
    s: [f64; 4],
    a: f64,
}

fn simulation_row(rng: &mut RandomStream, mode: TreatmentMode) -> Result<SimRow> {
    let z = rng.uniform_range(-2.0, 2.0);
    let s = simulation_adjustment(rng, z);
    let xb = SIMULATION_BETA[0] * z + SIMULATION_BETA[1] * s[0] + SIMULATION_BETA[2] * s[1] + SIMULATION_BETA[3] * s[2];
    let a_org = propensity_org(rng, xb)?;
    Ok(SimRow {
        z,
        s,
        a: mode.assign(a_org),
    })
}

pub fn gen_visualization(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RandomStream::new(spec.seed, streams::DATA);
    let n = spec.n;
    let (mut a, mut z, mut s, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), DMatrix::zeros(n, 2), Vec::with_capacity(n));
    for i in 0..n {
        let row = visualization_row(&mut rng, spec.treatment_mode)?;
        s[(i, 0)] = row.s1;
        s[(i, 1)] = row.s2;
        y.push(visualization_outcome(row.a, row.z, row.s1) + spec.noise_sd * rng.normal());
        a.push(row.a);
        z.push(row.z);
    }
    Ok(Dataset {
        treatment: Some(DVector::from_vec(a)),
        conditioning: Some(DMatrix::from_vec(n, 1, z)),
        adjustment: s,
        outcome: Some(DVector::from_vec(y)),
        meta: meta(spec, None),
    })
}

pub fn gen_simulation(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RandomStream::new(spec.seed, streams::DATA);
    let n = spec.n;
    let (mut a, mut z, mut s, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), DMatrix::zeros(n, 4), Vec::with_capacity(n));
    for i in 0..n {
        let row = simulation_row(&mut rng, spec.treatment_mode)?;
        for k in 0..4 {
            s[(i, k)] = row.s[k];
        }
        y.push(simulation_outcome(row.a, row.z, &row.s) + spec.noise_sd * rng.normal());
        a.push(row.a);
        z.push(row.z);
    }
    if spec.treatment_mode == TreatmentMode::Binary {
        let treated = a.iter().filter(|v| **v == 1.0).count() as f64 / n as f64;
        if n >= 100 && !(0.05..=0.95).contains(&treated) {
            log::warn!("positivity check: treated fraction {treated:.3} at seed {}", spec.seed);
        }
    }
    Ok(Dataset {
        treatment: Some(DVector::from_vec(a)),
        conditioning: Some(DMatrix::from_vec(n, 1, z)),
        adjustment: s,
        outcome: Some(DVector::from_vec(y)),
        meta: meta(spec, Some(SIMULATION_OUTCOME_VARIANT)),
    })
}

fn shift_target_row(rng: &mut RandomStream) -> (f64, [f64; 3]) {
    let z = rng.uniform_range(-1.0, 1.0);
    let s = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-0.5, 0.0), rng.uniform_range(0.0, 0.5)];
    (z, s)
}

/// Target-population covariates `(z, s₁, s₂, s₃)` for the shifted ATE.
pub fn gen_shift_target(spec: &GenSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::ZeroCount);
    }
    let mut rng = RandomStream::new(spec.seed, streams::TARGET);
    let n = spec.n;
    let mut z = DMatrix::zeros(n, 1);
    let mut s = DMatrix::zeros(n, 3);
    for i in 0..n {
        let (zi, si) = shift_target_row(&mut rng);
        z[(i, 0)] = zi;
        for k in 0..3 {
            s[(i, k)] = si[k];
        }
    }
    Ok(Dataset {
        treatment: None,
        conditioning: Some(z),
        adjustment: s,
        outcome: None,
        meta: meta(spec, None),
    })
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    match spec.generator {
        Generator::Visualization => gen_visualization(spec),
        Generator::Simulation => gen_simulation(spec),
        Generator::ShiftTarget => gen_shift_target(spec),
        Generator::SemiSynthetic => Err(Error::InvalidArgument(
            "semi-synthetic datasets are built from a covariate table".into(),
        )),
    }
}

/// Typed covariate table.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub continuous_names: Vec<String>,
    pub continuous: DMatrix<f64>,
    pub binary_names: Vec<String>,
    pub binary: DMatrix<f64>,
    /// Observed treatments, when the table carries a `treatment` column.
    pub treatment: Option<DVector<f64>>,
}

impl Covariates {
    pub fn len(&self) -> usize {
        self.continuous.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_cell(value: &str, row: usize, column: &str) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

/// Reads a covariate CSV. Columns prefixed `c_` are continuous, `b_` binary,
/// and an optional `treatment` column holds observed treatments. Row numbers
/// in errors are file line numbers (the header is line 1).
pub fn read_covariates_csv<R: Read>(reader: R) -> Result<Covariates> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile);
    }
    enum Role {
        Continuous,
        Binary,
        Treatment,
    }
    let mut roles = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        let role = if h == "treatment" {
            Role::Treatment
        } else if h.starts_with("c_") {
            Role::Continuous
        } else if h.starts_with("b_") {
            Role::Binary
        } else {
            return Err(Error::Parse {
                row: 1,
                column: h.to_string(),
                message: "column role unknown (expected prefix c_ or b_, or `treatment`)".into(),
            });
        };
        roles.push(role);
    }
    let mut cont: Vec<Vec<f64>> = Vec::new();
    let mut bin: Vec<Vec<f64>> = Vec::new();
    let mut treat: Vec<f64> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 2;
        let (mut c, mut b) = (Vec::new(), Vec::new());
        for ((value, role), name) in record.iter().zip(&roles).zip(headers.iter()) {
            let v = parse_cell(value, line, name)?;
            match role {
                Role::Continuous => c.push(v),
                Role::Binary => b.push(v),
                Role::Treatment => treat.push(v),
            }
        }
        cont.push(c);
        bin.push(b);
    }
    if cont.is_empty() {
        return Err(Error::EmptyFile);
    }
    let n = cont.len();
    let names = |prefix: Option<&str>| -> Vec<String> {
        headers
            .iter()
            .filter(|h| match prefix {
                Some(p) => h.starts_with(p) && *h != "treatment",
                None => false,
            })
            .map(str::to_string)
            .collect()
    };
    let continuous_names = names(Some("c_"));
    let binary_names = names(Some("b_"));
    let to_matrix = |rows: &[Vec<f64>], d: usize| DMatrix::from_fn(n, d, |i, k| rows[i][k]);
    Ok(Covariates {
        continuous: to_matrix(&cont, continuous_names.len()),
        binary: to_matrix(&bin, binary_names.len()),
        continuous_names,
        binary_names,
        treatment: if treat.is_empty() { None } else { Some(DVector::from_vec(treat)) },
    })
}

pub fn load_covariates_csv(path: &Path) -> Result<Covariates> {
    let file = std::fs::File::open(path)?;
    if file.metadata()?.len() == 0 {
        return Err(Error::EmptyFile);
    }
    read_covariates_csv(file)
}

pub fn write_covariates_csv<W: Write>(cov: &Covariates, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = cov.continuous_names.clone();
    header.extend(cov.binary_names.iter().cloned());
    if cov.treatment.is_some() {
        header.push("treatment".into());
    }
    w.write_record(&header)?;
    for i in 0..cov.len() {
        let mut rec: Vec<String> = cov.continuous.row(i).iter().map(|v| v.to_string()).collect();
        rec.extend(cov.binary.row(i).iter().map(|v| v.to_string()));
        if let Some(t) = &cov.treatment {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn semisynthetic_x_beta(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum()
}

/// Noiseless semi-synthetic outcome for continuous covariates `x` (first
/// column is `bw`) under treatment `t`.
pub fn semisynthetic_mean(mode: TreatmentMode, x: &[f64], t: f64) -> f64 {
    let xb = semisynthetic_x_beta(x);
    let bw = x[0];
    match mode {
        TreatmentMode::Binary => {
            if t == 0.0 {
                1.2 * xb + 1.0
            } else {
                let shifted: f64 = x.iter().enumerate().map(|(j, v)| (v + 0.5).exp() / (j + 1) as f64).sum();
                1.2 * xb + shifted + 3.0 * bw + 1.0
            }
        }
        _ => 1.2 * xb + 1.2 * t + bw * bw + t * bw,
    }
}

/// Attaches treatments (unless binary treatments are supplied) and outcomes
/// to a covariate table. The first continuous column becomes the
/// conditioning variable; the remaining columns form the adjustment set.
pub fn semisynthetic_outcomes(cov: &Covariates, mode: TreatmentMode, seed: u64, noise_sd: f64) -> Result<Dataset> {
    let d = cov.continuous.ncols();
    if d == 0 {
        return Err(Error::NoContinuousColumns);
    }
    let n = cov.len();
    if n == 0 {
        return Err(Error::EmptyFile);
    }
    let mut rng = RandomStream::new(seed, streams::DATA);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let supplied = match (&cov.treatment, mode) {
        (Some(t), TreatmentMode::Binary) => Some(t),
        _ => None,
    };
    for i in 0..n {
        let x: Vec<f64> = cov.continuous.row(i).iter().copied().collect();
        let t = match supplied {
            Some(t) => t[i],
            None => mode.assign(propensity_org(&mut rng, semisynthetic_x_beta(&x))?),
        };
        y.push(semisynthetic_mean(mode, &x, t) + noise_sd * rng.normal());
        a.push(t);
    }
    let rest = d - 1 + cov.binary.ncols();
    let mut s = DMatrix::zeros(n, rest);
    if d > 1 {
        s.columns_mut(0, d - 1).copy_from(&cov.continuous.columns(1, d - 1));
    }
    if cov.binary.ncols() > 0 {
        s.columns_mut(d - 1, cov.binary.ncols()).copy_from(&cov.binary);
    }
    Ok(Dataset {
        treatment: Some(DVector::from_vec(a)),
        conditioning: Some(cov.continuous.columns(0, 1).into_owned()),
        adjustment: s,
        outcome: Some(DVector::from_vec(y)),
        meta: DatasetMeta {
            generator: Generator::SemiSynthetic,
            seed,
            treatment_mode: mode,
            noise_sd,
            outcome_variant: None,
            rng_version: RNG_VERSION.to_string(),
        },
    })
}

/// Writes `a, z_1.., s_1.., y` with full round-trip precision.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dz = ds.conditioning.as_ref().map_or(0, |z| z.ncols());
    let mut header = Vec::new();
    if ds.treatment.is_some() {
        header.push("a".to_string());
    }
    header.extend((1..=dz).map(|k| format!("z_{k}")));
    header.extend((1..=ds.adjustment.ncols()).map(|k| format!("s_{k}")));
    if ds.outcome.is_some() {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(a) = &ds.treatment {
            rec.push(a[i].to_string());
        }
        if let Some(z) = &ds.conditioning {
            rec.extend(z.row(i).iter().map(|v| v.to_string()));
        }
        rec.extend(ds.adjustment.row(i).iter().map(|v| v.to_string()));
        if let Some(y) = &ds.outcome {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub values: DVector<f64>,
    pub standard_errors: DVector<f64>,
}

#[derive(Default)]
struct Accumulator {
    sum: f64,
    sum_sq: f64,
    count: usize,
}

impl Accumulator {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    fn standard_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

/// A draw from the population the causal quantity integrates over.
enum Draw {
    Vis(VisRow),
    Sim(SimRow),
    Target(f64, [f64; 3]),
}

fn noiseless(draw: &Draw, a: f64) -> f64 {
    match draw {
        Draw::Vis(r) => visualization_outcome(a, r.z, r.s1),
        Draw::Sim(r) => simulation_outcome(a, r.z, &r.s),
        Draw::Target(z, s) => simulation_outcome(a, *z, s),
    }
}

fn draw_population(spec: &GenSpec, rng: &mut RandomStream) -> Result<Draw> {
    Ok(match spec.generator {
        Generator::Visualization => Draw::Vis(visualization_row(rng, spec.treatment_mode)?),
        Generator::Simulation => Draw::Sim(simulation_row(rng, spec.treatment_mode)?),
        _ => unreachable!("checked by caller"),
    })
}

fn draw_given_z(spec: &GenSpec, rng: &mut RandomStream, z: f64) -> Result<Draw> {
    Ok(match spec.generator {
        Generator::Visualization => Draw::Vis(VisRow {
            z,
            s1: visualization_s1(rng, z)?,
            s2: 0.0,
            a: f64::NAN,
        }),
        Generator::Simulation => Draw::Sim(SimRow {
            z,
            s: simulation_adjustment(rng, z),
            a: f64::NAN,
        }),
        _ => unreachable!("checked by caller"),
    })
}

fn draw_treatment(draw: &Draw) -> f64 {
    match draw {
        Draw::Vis(r) => r.a,
        Draw::Sim(r) => r.a,
        Draw::Target(..) => f64::NAN,
    }
}

fn att_accepts(mode: TreatmentMode, drawn: f64, target: f64) -> bool {
    match mode {
        TreatmentMode::Continuous => (drawn - target).abs() <= ATT_WINDOW,
        _ => drawn == target,
    }
}

/// Ground-truth causal quantities by brute-force Monte Carlo over the known
/// mechanism. Interest points that share a conditioning value (or a prior
/// treatment, for ATT) share one sample set.
pub fn true_cq_oracle_detailed(spec: &GenSpec, interest: &InterestSet, mc_n: usize, rng: &mut RandomStream) -> Result<OracleEstimate> {
    if mc_n == 0 {
        return Err(Error::ZeroCount);
    }
    match (spec.generator, interest.kind) {
        (Generator::SemiSynthetic, _) => {
            return Err(Error::UnknownMechanism(
                "semi-synthetic truths are averages over the covariate table".into(),
            ))
        }
        (Generator::ShiftTarget, _) => {
            return Err(Error::UnknownMechanism("the shift target carries no outcome mechanism".into()))
        }
        (Generator::Visualization, CqKind::Ateds) => {
            return Err(Error::UnknownMechanism("no shifted population is defined for the visualization data".into()))
        }
        _ => {}
    }
    let m = interest.len();
    let mut acc: Vec<Accumulator> = (0..m).map(|_| Accumulator::default()).collect();

    let mut groups: Vec<(Vec<u64>, Vec<usize>)> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, p) in interest.points.iter().enumerate() {
        let key: Vec<u64> = match interest.kind {
            CqKind::Cate => p.conditioning.iter().flatten().map(|v| v.to_bits()).collect(),
            CqKind::Att => vec![p.prior_treatment.unwrap().to_bits()],
            CqKind::Ate | CqKind::Ateds => Vec::new(),
        };
        let g = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }

    match interest.kind {
        CqKind::Cate => {
            for (key, members) in &groups {
                let z = f64::from_bits(key[0]);
                for _ in 0..mc_n {
                    let draw = draw_given_z(spec, rng, z)?;
                    for &i in members {
                        acc[i].push(noiseless(&draw, interest.points[i].treatment));
                    }
                }
            }
        }
        CqKind::Ate | CqKind::Ateds => {
            for _ in 0..mc_n {
                let draw = if interest.kind == CqKind::Ateds {
                    let (z, s) = shift_target_row(rng);
                    Draw::Target(z, s)
                } else {
                    draw_population(spec, rng)?
                };
                for (i, p) in interest.points.iter().enumerate() {
                    acc[i].push(noiseless(&draw, p.treatment));
                }
            }
        }
        CqKind::Att => {
            let targets: Vec<f64> = groups.iter().map(|(k, _)| f64::from_bits(k[0])).collect();
            let mut counts = vec![0usize; groups.len()];
            let cap = mc_n.saturating_mul(1000).max(1_000_000);
            let mut drawn = 0usize;
            while counts.iter().any(|c| *c < mc_n) {
                if drawn >= cap {
                    return Err(Error::UnknownMechanism(format!(
                        "treated subpopulation too rare to sample ({} of {} accepted)",
                        counts.iter().min().unwrap(),
                        mc_n
                    )));
                }
                drawn += 1;
                let draw = draw_population(spec, rng)?;
                let a = draw_treatment(&draw);
                for (g, (_, members)) in groups.iter().enumerate() {
                    if counts[g] < mc_n && att_accepts(spec.treatment_mode, a, targets[g]) {
                        counts[g] += 1;
                        for &i in members {
                            acc[i].push(noiseless(&draw, interest.points[i].treatment));
                        }
                    }
                }
            }
        }
    }
    Ok(OracleEstimate {
        values: DVector::from_iterator(m, acc.iter().map(Accumulator::mean)),
        standard_errors: DVector::from_iterator(m, acc.iter().map(Accumulator::standard_error)),
    })
}

pub fn true_cq_oracle(spec: &GenSpec, interest: &InterestSet, mc_n: usize, rng: &mut RandomStream) -> Result<DVector<f64>> {
    Ok(true_cq_oracle_detailed(spec, interest, mc_n, rng)?.values)
}

/// Semi-synthetic truths: the noiseless outcome averaged over the empirical
/// covariates (all rows for ATE, rows whose treatment matches `ã` for ATT).
pub fn semisynthetic_oracle(cov: &Covariates, data: &Dataset, interest: &InterestSet) -> Result<DVector<f64>> {
    let mode = data.meta.treatment_mode;
    let a = data.treatments()?;
    let mut out = DVector::zeros(interest.len());
    for (i, p) in interest.points.iter().enumerate() {
        let rows: Vec<usize> = match interest.kind {
            CqKind::Ate => (0..cov.len()).collect(),
            CqKind::Att => {
                let target = p.prior_treatment.unwrap();
                (0..cov.len()).filter(|&r| att_accepts(mode, a[r], target)).collect()
            }
            other => {
                return Err(Error::UnknownMechanism(format!(
                    "{other} truth is not defined for semi-synthetic data"
                )))
            }
        };
        if rows.is_empty() {
            return Err(Error::UnknownMechanism("no rows in the treated subpopulation".into()));
        }
        let total: f64 = rows
            .iter()
            .map(|&r| {
                let x: Vec<f64> = cov.continuous.row(r).iter().copied().collect();
                semisynthetic_mean(mode, &x, p.treatment)
            })
            .sum();
        out[i] = total / rows.len() as f64;
    }
    Ok(out)
}

/// Closed-form visualization CATE.
pub fn visualization_cate(a: f64, z: f64) -> f64 {
    let m = visualization_s1_mean(z);
    a * z * m + 2.0 * z + m
}

/// Closed-form simulation CATE for the `spec_v1` outcome.
pub fn simulation_cate(a: f64, z: f64) -> f64 {
    a * z + a * (z.cos() + z) + (-1.0 + 0.25 * z * z) + (z.sin().powi(2)).sin() * (-0.5f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::InterestPoint;

    fn vis(n: usize, seed: u64, mode: TreatmentMode) -> Dataset {
        gen_visualization(&GenSpec::new(Generator::Visualization, n, mode, seed)).unwrap()
    }

    fn sim(n: usize, seed: u64, mode: TreatmentMode) -> Dataset {
        gen_simulation(&GenSpec::new(Generator::Simulation, n, mode, seed)).unwrap()
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn visualization_properties() {
        let a = vis(300, 4, TreatmentMode::Continuous);
        assert_eq!(a, vis(300, 4, TreatmentMode::Continuous));
        assert!(a.treatments().unwrap().iter().all(|v| *v > 0.0 && *v < 1.0));
        let d = vis(300, 4, TreatmentMode::Discrete);
        assert!(d.treatments().unwrap().iter().all(|v| ((v * 10.0).round() - v * 10.0).abs() < 1e-12));
        assert!(gen_visualization(&GenSpec::new(Generator::Visualization, 3, TreatmentMode::Binary, 0)).is_err());
    }

    #[test]
    fn visualization_s2_mean() {
        // Heavy tail: use a large sample and the analytic variance for the SE.
        let d = vis(100_000, 5, TreatmentMode::Continuous);
        let s2: Vec<f64> = d.adjustment.column(1).iter().copied().collect();
        let (m, _) = mean_se(&s2);
        let e2 = 2f64.exp();
        let var = (4f64.exp() - 1.0) * 4f64.exp() + 1.0;
        let se = (var / 1e5).sqrt();
        assert!((m - e2).abs() <= 3.0 * se, "{m} vs {e2} (se {se})");
    }

    #[test]
    fn simulation_properties() {
        let b = sim(500, 6, TreatmentMode::Binary);
        let a = b.treatments().unwrap();
        assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0));
        let frac = a.sum() / 500.0;
        assert!((0.05..=0.95).contains(&frac));
        assert_eq!(SIMULATION_BETA, [1.0, 1.0 / 4.0, 1.0 / 9.0, 1.0 / 16.0]);
        assert_eq!(b.meta.outcome_variant.as_deref(), Some("spec_v1"));

        let big = sim(200_000, 7, TreatmentMode::Continuous);
        let z = big.conditioning.as_ref().unwrap();
        let near: Vec<f64> = (0..big.len()).filter(|&i| z[(i, 0)].abs() < 0.05).map(|i| big.adjustment[(i, 1)]).collect();
        let (m, se) = mean_se(&near);
        assert!((m + 1.0).abs() <= 3.0 * se + 0.25 * 0.05 * 0.05, "{m} ± {se}");
    }

    #[test]
    fn shift_target_properties() {
        let spec = GenSpec::new(Generator::ShiftTarget, 20_000, TreatmentMode::Continuous, 3);
        let t = gen_shift_target(&spec).unwrap();
        assert_eq!(t, gen_shift_target(&spec).unwrap());
        assert!(t.adjustment.column(1).iter().all(|v| (-0.5..=0.0).contains(v)));
        let s3: Vec<f64> = t.adjustment.column(2).iter().copied().collect();
        let (m, se) = mean_se(&s3);
        assert!((m - 0.25).abs() <= 3.0 * se);
        assert_eq!(t.marginal_adjustment().ncols(), 4);
        assert!(t.treatment.is_none());
    }

    #[test]
    fn views_per_kind() {
        let d = sim(10, 1, TreatmentMode::Binary);
        let cate = d.rows(CqKind::Cate).unwrap();
        assert_eq!(cate.adjustment.ncols(), 4);
        assert!(cate.conditioning.is_some());
        let ate = d.rows(CqKind::Ate).unwrap();
        assert_eq!(ate.adjustment.ncols(), 4);
        assert!(ate.conditioning.is_none());
        assert_eq!(ate.adjustment[(3, 0)], d.conditioning.as_ref().unwrap()[(3, 0)]);
        let v = vis(10, 1, TreatmentMode::Continuous);
        assert_eq!(v.rows(CqKind::Ate).unwrap().adjustment.ncols(), 3);
    }

    fn covariates(rows: &[[f64; 2]], treat: Option<Vec<f64>>) -> Covariates {
        Covariates {
            continuous_names: vec!["c_bw".into(), "c_age".into()],
            continuous: DMatrix::from_fn(rows.len(), 2, |i, k| rows[i][k]),
            binary_names: vec!["b_flag".into()],
            binary: DMatrix::from_fn(rows.len(), 1, |i, _| (i % 2) as f64),
            treatment: treat.map(DVector::from_vec),
        }
    }

    #[test]
    fn semisynthetic_examples() {
        let cov = covariates(&[[0.0, 0.0]], Some(vec![0.0]));
        let noiseless = semisynthetic_outcomes(&cov, TreatmentMode::Binary, 1, 0.0).unwrap();
        assert_eq!(noiseless.outcomes().unwrap()[0], 1.0);
        let noisy = semisynthetic_outcomes(&cov, TreatmentMode::Binary, 1, 0.4).unwrap();
        let mut rng = RandomStream::new(1, streams::DATA);
        assert!((noisy.outcomes().unwrap()[0] - (1.0 + 0.4 * rng.normal())).abs() < 1e-15);
        assert_eq!(semisynthetic_mean(TreatmentMode::Continuous, &[0.0, 0.0], 0.0), 0.0);
        assert_eq!(
            semisynthetic_outcomes(&cov, TreatmentMode::Continuous, 9, 0.4).unwrap(),
            semisynthetic_outcomes(&cov, TreatmentMode::Continuous, 9, 0.4).unwrap()
        );
        let empty = Covariates {
            continuous_names: vec![],
            continuous: DMatrix::zeros(2, 0),
            binary_names: vec!["b_x".into()],
            binary: DMatrix::zeros(2, 1),
            treatment: None,
        };
        assert!(matches!(
            semisynthetic_outcomes(&empty, TreatmentMode::Binary, 0, 0.4),
            Err(Error::NoContinuousColumns)
        ));
        let ds = semisynthetic_outcomes(&covariates(&[[1.0, 2.0], [3.0, 4.0]], None), TreatmentMode::Continuous, 0, 0.4).unwrap();
        assert_eq!(ds.conditioning.as_ref().unwrap()[(1, 0)], 3.0);
        assert_eq!(ds.adjustment.ncols(), 2);
    }

    #[test]
    fn covariate_csv_io() {
        let text = "c_bw,b_flag\n1.5,0\n2.25,1\n";
        let cov = read_covariates_csv(text.as_bytes()).unwrap();
        assert_eq!(cov.len(), 2);
        assert_eq!(cov.continuous.ncols(), 1);
        assert_eq!(cov.binary.ncols(), 1);

        let bad = "c_bw,b_flag\n1.5,0\nabc,1\n";
        match read_covariates_csv(bad.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "c_bw");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_covariates_csv("".as_bytes()), Err(Error::EmptyFile)));
        assert!(matches!(read_covariates_csv("c_bw\n".as_bytes()), Err(Error::EmptyFile)));

        let mut rng = RandomStream::new(3, 0);
        let rows: Vec<[f64; 2]> = (0..5).map(|_| [rng.normal() * 1e3, rng.uniform()]).collect();
        let cov = covariates(&rows, Some(vec![0.0, 1.0, 0.0, 1.0, 1.0]));
        let mut buf = Vec::new();
        write_covariates_csv(&cov, &mut buf).unwrap();
        assert_eq!(read_covariates_csv(buf.as_slice()).unwrap(), cov);
    }

    #[test]
    fn dataset_csv_header() {
        let d = sim(3, 1, TreatmentMode::Binary);
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,z_1,s_1,s_2,s_3,s_4,y\n"));
        assert_eq!(text.lines().count(), 4);
    }

    fn cate_interest(points: &[(f64, f64)]) -> InterestSet {
        InterestSet::new(CqKind::Cate, points.iter().map(|(a, z)| InterestPoint::cate(*a, vec![*z])).collect()).unwrap()
    }

    #[test]
    fn oracle_matches_closed_forms() {
        let points = [(0.2, -1.5), (0.5, -0.3), (0.9, 0.0), (0.3, 0.8), (0.7, 1.7)];
        let interest = cate_interest(&points);
        for (generator, closed) in [
            (Generator::Visualization, visualization_cate as fn(f64, f64) -> f64),
            (Generator::Simulation, simulation_cate),
        ] {
            let spec = GenSpec::new(generator, 1, TreatmentMode::Continuous, 0);
            let est = true_cq_oracle_detailed(&spec, &interest, 100_000, &mut RandomStream::new(1, streams::ORACLE)).unwrap();
            for (i, (a, z)) in points.iter().enumerate() {
                let truth = closed(*a, *z);
                let err = (est.values[i] - truth).abs();
                assert!(err <= 3.0 * est.standard_errors[i].max(1e-12), "{generator} ({a},{z}): {} vs {truth}", est.values[i]);
            }
        }
    }

    #[test]
    fn oracle_single_sample_is_direct_evaluation() {
        let spec = GenSpec::new(Generator::Visualization, 1, TreatmentMode::Continuous, 0);
        let interest = cate_interest(&[(0.4, 0.7)]);
        let v = true_cq_oracle(&spec, &interest, 1, &mut RandomStream::new(2, 4)).unwrap();
        let mut rng = RandomStream::new(2, 4);
        let s1 = visualization_s1(&mut rng, 0.7).unwrap();
        assert_eq!(v[0], visualization_outcome(0.4, 0.7, s1));
    }

    #[test]
    fn oracle_standard_error_scaling() {
        let spec = GenSpec::new(Generator::Simulation, 1, TreatmentMode::Continuous, 0);
        let interest = InterestSet::new(CqKind::Ate, vec![InterestPoint::marginal(0.5)]).unwrap();
        let se1 = true_cq_oracle_detailed(&spec, &interest, 20_000, &mut RandomStream::new(3, 4)).unwrap().standard_errors[0];
        let se2 = true_cq_oracle_detailed(&spec, &interest, 40_000, &mut RandomStream::new(4, 4)).unwrap().standard_errors[0];
        let ratio = se1 / se2;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn oracle_kinds() {
        let spec = GenSpec::new(Generator::Simulation, 1, TreatmentMode::Binary, 0);
        let att = InterestSet::new(
            CqKind::Att,
            vec![InterestPoint::att(1.0, 1.0), InterestPoint::att(0.0, 1.0), InterestPoint::att(1.0, 0.0), InterestPoint::att(0.0, 0.0)],
        )
        .unwrap();
        let v = true_cq_oracle(&spec, &att, 5_000, &mut RandomStream::new(5, 4)).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let ateds = InterestSet::new(CqKind::Ateds, vec![InterestPoint::marginal(0.0), InterestPoint::marginal(1.0)]).unwrap();
        let d = true_cq_oracle_detailed(&spec, &ateds, 50_000, &mut RandomStream::new(6, 4)).unwrap();
        // Under the target, E[z] = E[s1] = 0, E[s2] = -0.25, E[sin s3] ≈ 0.2448.
        let sin_mean = (1.0 - 0.5f64.cos()) / 0.5;
        assert!((d.values[0] - (-0.25 + sin_mean)).abs() <= 3.0 * d.standard_errors[0] + 1e-3);
        assert!((d.values[1] - d.values[0]).abs() < 0.05);

        let vis_spec = GenSpec::new(Generator::Visualization, 1, TreatmentMode::Continuous, 0);
        assert!(matches!(
            true_cq_oracle(&vis_spec, &ateds, 10, &mut RandomStream::new(0, 0)),
            Err(Error::UnknownMechanism(_))
        ));
        let semi = GenSpec::new(Generator::SemiSynthetic, 1, TreatmentMode::Binary, 0);
        assert!(matches!(
            true_cq_oracle(&semi, &ateds, 10, &mut RandomStream::new(0, 0)),
            Err(Error::UnknownMechanism(_))
        ));
    }

    #[test]
    fn semisynthetic_truth() {
        let cov = covariates(&[[0.0, 0.0], [1.0, 1.0]], Some(vec![0.0, 1.0]));
        let ds = semisynthetic_outcomes(&cov, TreatmentMode::Binary, 0, 0.4).unwrap();
        let ate = InterestSet::new(CqKind::Ate, vec![InterestPoint::marginal(0.0)]).unwrap();
        let v = semisynthetic_oracle(&cov, &ds, &ate).unwrap();
        assert!((v[0] - (1.0 + 1.2 * 1.5 + 1.0) / 2.0).abs() < 1e-12);
        let att = InterestSet::new(CqKind::Att, vec![InterestPoint::att(0.0, 1.0)]).unwrap();
        assert!((semisynthetic_oracle(&cov, &ds, &att).unwrap()[0] - 2.8).abs() < 1e-12);
        let cate = cate_interest(&[(0.0, 0.0)]);
        assert!(matches!(semisynthetic_oracle(&cov, &ds, &cate), Err(Error::UnknownMechanism(_))));
    }
}
