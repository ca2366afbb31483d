//! Evaluation metrics and the Monte-Carlo sweep harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{kmax_ctd, kmax_kruskal};
use crate::channel::{
    ls_channel_estimate, make_frugal_pilot, make_orthogonal_pilot, sample_paths, synthesize_channel, transmit,
    ChannelMatrix, PathParams, PilotKind, PilotMatrix, ReceivedData,
};
use crate::cpd::{parafac_pipeline, CpdOptions, ParamEstimate};
use crate::ctd::{ctd_pipeline, DodOptions};
use crate::error::{Error, Result, Theorem};
use crate::exec::{derive_seed, map_indexed, map_indexed_seq, rng_for};
use crate::linalg::frob_norm_sq;
use crate::manifolds::{AngleRanges, ArrayGeometry, PathAngles};

/// `‖Ĥ − H‖_F² / ‖H‖_F²`.
pub fn nmse(estimate: &ChannelMatrix, truth: &ChannelMatrix) -> Result<f64> {
    if estimate.h.shape() != truth.h.shape() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.h.shape(),
            truth.h.shape()
        )));
    }
    let denom = frob_norm_sq(&truth.h);
    if denom == 0.0 {
        return Err(Error::Domain("NMSE against an all-zero channel is undefined".into()));
    }
    Ok(frob_norm_sq(&(&estimate.h - &truth.h)) / denom)
}

/// Optimal estimate-to-truth assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMatch {
    /// `truth_of[k]` is the true path matched to estimate `k`.
    pub truth_of: Vec<usize>,
    /// Absolute `(θ, ϑ, φ)` errors per estimate.
    pub errors: Vec<[f64; 3]>,
    pub total_cost: f64,
}

impl PathMatch {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().copied().fold(0.0, f64::max)
    }
}

fn angle_errors(a: &PathAngles, b: &PathAngles) -> [f64; 3] {
    [(a.doa - b.doa).abs(), (a.dod_az - b.dod_az).abs(), (a.dod_el - b.dod_el).abs()]
}

/// Minimum-cost assignment of a square cost matrix (Hungarian method with
/// potentials). Returns `col_of[row]`.
pub fn assign(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Matches estimated to true angles minimizing the summed absolute differences.
pub fn match_angles(est: &[PathAngles], truth: &[PathAngles]) -> Result<PathMatch> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated paths against {} true paths",
            est.len(),
            truth.len()
        )));
    }
    let cost: Vec<Vec<f64>> =
        est.iter().map(|e| truth.iter().map(|t| angle_errors(e, t).iter().sum()).collect()).collect();
    let truth_of = assign(&cost);
    let errors: Vec<[f64; 3]> = truth_of.iter().enumerate().map(|(k, &j)| angle_errors(&est[k], &truth[j])).collect();
    let total_cost = truth_of.iter().enumerate().map(|(k, &j)| cost[k][j]).sum();
    Ok(PathMatch { truth_of, errors, total_cost })
}

pub fn match_paths(est: &ParamEstimate, truth: &PathParams) -> Result<PathMatch> {
    match_angles(&est.angles, &truth.angles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Parafac,
    Ctd,
    Ls,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Parafac => "parafac",
            Method::Ctd => "ctd",
            Method::Ls => "ls",
        }
    }
}

/// How many paths each trial draws, and how many the estimators are told.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KPolicy {
    /// Fixed, known path count.
    Known { k: usize },
    /// `K ~ U{min..=max}` per trial, known to the estimators.
    Uniform { min: usize, max: usize },
    /// `K ~ U{min..=max}` per trial; estimators always assume `assumed` paths.
    Overestimate { min: usize, max: usize, assumed: usize },
}

impl KPolicy {
    fn assumed(&self) -> Option<usize> {
        match *self {
            KPolicy::Overestimate { assumed, .. } => Some(assumed),
            _ => None,
        }
    }

    fn largest(&self) -> usize {
        match *self {
            KPolicy::Known { k } => k,
            KPolicy::Uniform { max, .. } => max,
            KPolicy::Overestimate { assumed, .. } => assumed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub k: KPolicy,
    #[serde(default = "default_kappa_db")]
    pub kappa_db: f64,
    #[serde(default)]
    pub ranges: AngleRanges,
    /// SNR for axes other than SNR; `None` is noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

fn default_kappa_db() -> f64 {
    13.2
}

/// Swept quantity. For the `k` axis the drawn path count is the axis value and
/// only an overestimate policy changes what the estimators assume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Axis {
    Snr(Vec<f64>),
    /// Transmit URA sizes `(Mx, My)`; reported as `Mt = Mx·My`.
    Mt(Vec<(usize, usize)>),
    K(Vec<usize>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Snr(_) => "snr_db",
            Axis::Mt(_) => "mt",
            Axis::K(_) => "k",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Snr(v) => v.len(),
            Axis::Mt(v) => v.len(),
            Axis::K(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, i: usize) -> f64 {
        match self {
            Axis::Snr(v) => v[i],
            Axis::Mt(v) => (v[i].0 * v[i].1) as f64,
            Axis::K(v) => v[i] as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConfig {
    pub kind: PilotKind,
    /// Training length; required for the frugal pilot.
    #[serde(default)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub geometry: ArrayGeometry,
    pub scenario: Scenario,
    pub axis: Axis,
    pub methods: Vec<Method>,
    pub pilot: PilotConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub als: CpdOptions,
    #[serde(default)]
    pub dod: DodOptions,
}

fn default_trials() -> usize {
    200
}

/// One point of the sweep: geometry plus drawn/assumed path counts.
struct Point {
    geom: ArrayGeometry,
    snr_db: Option<f64>,
    fixed_k: Option<usize>,
}

impl SweepConfig {
    fn point(&self, i: usize) -> Result<Point> {
        let mut geom = self.geometry;
        let mut snr_db = self.scenario.snr_db;
        let mut fixed_k = None;
        match &self.axis {
            Axis::Snr(v) => snr_db = Some(v[i]),
            Axis::Mt(v) => {
                geom.mx = v[i].0;
                geom.my = v[i].1;
                geom.validate()?;
            }
            Axis::K(v) => fixed_k = Some(v[i]),
        }
        Ok(Point { geom, snr_db, fixed_k })
    }

    /// Largest path count any estimator is asked for at axis point `i`.
    fn largest_assumed(&self, p: &Point) -> usize {
        self.scenario.k.assumed().or(p.fixed_k).unwrap_or_else(|| self.scenario.k.largest())
    }

    /// Rejects configurations that cannot run; returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        self.geometry.validate()?;
        self.scenario.ranges.validate()?;
        if !(self.scenario.kappa_db.is_finite()) {
            return Err(Error::Domain("scenario.kappa_db must be finite".into()));
        }
        if self.trials == 0 {
            return Err(Error::Domain("trials must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Domain("methods must not be empty".into()));
        }
        if self.axis.is_empty() {
            return Err(Error::Domain("axis.values must not be empty".into()));
        }
        match self.scenario.k {
            KPolicy::Known { k: 0 } => return Err(Error::Domain("scenario.k.k must be at least 1".into())),
            KPolicy::Uniform { min, max } | KPolicy::Overestimate { min, max, .. } if min == 0 || min > max => {
                return Err(Error::Domain(format!("scenario.k range [{min}, {max}] is invalid")))
            }
            KPolicy::Overestimate { max, assumed, .. } if assumed < max => {
                return Err(Error::Domain(format!("scenario.k.assumed={assumed} is below the largest drawn K={max}")))
            }
            _ => {}
        }
        if let Axis::K(v) = &self.axis {
            if v.contains(&0) {
                return Err(Error::Domain("axis K values must be at least 1".into()));
            }
            if let Some(assumed) = self.scenario.k.assumed() {
                if let Some(&worst) = v.iter().max().filter(|&&m| m > assumed) {
                    return Err(Error::Domain(format!("axis K={worst} exceeds scenario.k.assumed={assumed}")));
                }
            }
        }
        let frugal = self.pilot.kind == PilotKind::Frugal;
        if frugal && self.pilot.n.is_none() {
            return Err(Error::Domain("pilot.n is required for the frugal pilot".into()));
        }
        for &m in &self.methods {
            match (m, self.pilot.kind) {
                (Method::Parafac, PilotKind::Frugal) => {
                    return Err(Error::Domain("method parafac needs pilot.kind row-orthogonal".into()))
                }
                (Method::Ctd, PilotKind::RowOrthogonal) => {
                    return Err(Error::Domain("method ctd needs pilot.kind frugal".into()))
                }
                _ => {}
            }
        }
        for i in 0..self.axis.len() {
            let p = self.point(i)?;
            p.geom.check_no_wrap(&self.scenario.ranges)?;
            if let Some(s) = p.snr_db {
                if !s.is_finite() {
                    return Err(Error::Domain("SNR values must be finite".into()));
                }
            }
            let k = self.largest_assumed(&p);
            if frugal {
                let n = self.pilot.n.expect("checked above");
                if !n.is_multiple_of(2) || n < 4 || n >= 2 * p.geom.mt() {
                    return Err(Error::Domain(format!(
                        "pilot.n={n} must be even, at least 4 and below 2Mt={}",
                        2 * p.geom.mt()
                    )));
                }
                if self.methods.contains(&Method::Ctd) {
                    let bound = kmax_ctd(p.geom.mr, n);
                    if k > bound.kmax {
                        return Err(Error::Infeasible { theorem: Theorem::Ctd, k, kmax: bound.kmax });
                    }
                }
            }
            if self.methods.contains(&Method::Parafac) {
                let bound = kmax_kruskal(p.geom.mr, p.geom.mx, p.geom.my);
                if k > bound.kmax {
                    warnings.push(format!(
                        "K={k} exceeds the kruskal bound {} at Mt={}; uniqueness is not guaranteed",
                        bound.kmax,
                        p.geom.mt()
                    ));
                }
            }
        }
        Ok(warnings)
    }
}

/// Outcome of one method on one trial. `nmse` is `None` when the method failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub axis_value: f64,
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    pub k_true: usize,
    pub k_assumed: usize,
    pub nmse: Option<f64>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub axis_value: f64,
    pub method: Method,
    /// Successful trials entering the aggregates.
    pub trials: usize,
    pub failures: usize,
    pub nmse_mean: f64,
    pub nmse_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: &'static str,
    pub rows: Vec<AggregateRow>,
    pub records: Vec<TrialRecord>,
}

impl SweepResult {
    pub fn row(&self, axis_value: f64, method: Method) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.axis_value == axis_value && r.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Parallel,
    Sequential,
}

fn draw_k<R: Rng + ?Sized>(policy: &KPolicy, fixed: Option<usize>, rng: &mut R) -> (usize, usize) {
    let k_true = fixed.unwrap_or_else(|| match *policy {
        KPolicy::Known { k } => k,
        KPolicy::Uniform { min, max } | KPolicy::Overestimate { min, max, .. } => rng.random_range(min..=max),
    });
    (k_true, policy.assumed().unwrap_or(k_true))
}

/// Per-trial seed. Independent of the axis index, so every axis point sees the
/// same path draws for a given trial.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, trial as u64)
}

const STREAM_PATHS: u64 = 0;
const STREAM_PILOT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_ALS: u64 = 3;

/// Everything one trial draws: paths, channel, pilot and received data.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub params: PathParams,
    /// Path count handed to the estimators.
    pub k_assumed: usize,
    pub h: ChannelMatrix,
    pub pilot: PilotMatrix,
    pub rx: ReceivedData,
    /// Seed for the decomposition restarts.
    pub als_seed: u64,
}

/// Draws one trial from its seed (see [`trial_seed`]). `fixed_k` overrides the
/// drawn path count, as the `k` axis does.
pub fn realize(
    scenario: &Scenario,
    geom: &ArrayGeometry,
    pilot: &PilotConfig,
    snr_db: Option<f64>,
    fixed_k: Option<usize>,
    seed: u64,
) -> Result<TrialData> {
    let mut path_rng = rng_for(seed, STREAM_PATHS);
    let (k_true, k_assumed) = draw_k(&scenario.k, fixed_k, &mut path_rng);
    let kappa = crate::channel::db_to_linear(scenario.kappa_db);
    let params = sample_paths(k_true, kappa, &scenario.ranges, &mut path_rng)?;
    let h = synthesize_channel(&params, geom)?;
    let mut pilot_rng = rng_for(seed, STREAM_PILOT);
    let pilot = match pilot.kind {
        PilotKind::RowOrthogonal => make_orthogonal_pilot(geom.mt(), &mut pilot_rng)?,
        PilotKind::Frugal => make_frugal_pilot(geom.mt(), pilot.n.unwrap_or(0), &mut pilot_rng)?,
    };
    let rx = transmit(&h, &pilot, snr_db, &mut rng_for(seed, STREAM_NOISE))?;
    Ok(TrialData { params, k_assumed, h, pilot, rx, als_seed: derive_seed(seed, STREAM_ALS) })
}

fn run_trial(cfg: &SweepConfig, point: &Point, axis_value: f64, trial: usize, master: u64) -> Vec<TrialRecord> {
    let seed = trial_seed(master, trial);
    // The path count is the first draw of the path stream, so it is known even
    // when the rest of the realization fails.
    let (k_true, k_assumed) = draw_k(&cfg.scenario.k, point.fixed_k, &mut rng_for(seed, STREAM_PATHS));
    let record = |method: Method, nmse: Option<f64>, wall_time_s: f64, warnings: Vec<String>| TrialRecord {
        axis_value,
        method,
        trial,
        seed,
        k_true,
        k_assumed,
        nmse,
        wall_time_s,
        warnings,
    };
    let fail_all = |e: Error| -> Vec<TrialRecord> {
        cfg.methods.iter().map(|&m| record(m, None, 0.0, vec![e.to_string()])).collect()
    };
    let TrialData { h, pilot, rx, als_seed, .. } =
        match realize(&cfg.scenario, &point.geom, &cfg.pilot, point.snr_db, point.fixed_k, seed) {
            Ok(d) => d,
            Err(e) => return fail_all(e),
        };

    let als = CpdOptions { seed: als_seed, ..cfg.als };
    cfg.methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let out: Result<(ChannelMatrix, Vec<String>)> = match method {
                Method::Ls => ls_channel_estimate(&rx, &pilot).map(|c| (c, Vec::new())),
                Method::Parafac => {
                    parafac_pipeline(&rx, &pilot, k_assumed, &point.geom, &als).map(|e| (e.channel, e.warnings))
                }
                Method::Ctd => {
                    ctd_pipeline(&rx, &pilot, k_assumed, &point.geom, &cfg.dod).map(|e| (e.channel, e.warnings))
                }
            };
            let elapsed = start.elapsed().as_secs_f64();
            match out.and_then(|(c, w)| Ok((nmse(&c, &h)?, w))) {
                Ok((v, w)) if v.is_finite() => record(method, Some(v), elapsed, w),
                Ok((v, mut w)) => {
                    w.push(format!("non-finite NMSE {v}"));
                    record(method, None, elapsed, w)
                }
                Err(e) => record(method, None, elapsed, vec![e.to_string()]),
            }
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

fn aggregate(cfg: &SweepConfig, records: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for i in 0..cfg.axis.len() {
        let axis_value = cfg.axis.value(i);
        for &method in &cfg.methods {
            let picked: Vec<&TrialRecord> =
                records.iter().filter(|r| r.axis_value == axis_value && r.method == method).collect();
            let mut vals: Vec<f64> = picked.iter().filter_map(|r| r.nmse).collect();
            let failures = picked.len() - vals.len();
            // Summation in trial order keeps the mean independent of scheduling.
            let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            vals.sort_by(f64::total_cmp);
            rows.push(AggregateRow {
                axis_value,
                method,
                trials: vals.len(),
                failures,
                nmse_mean: mean,
                nmse_median: median(&vals),
            });
        }
    }
    rows
}

/// Runs every (axis point, trial) pair and aggregates per (axis point, method).
pub fn run_sweep_with(cfg: &SweepConfig, master: u64, exec: Execution) -> Result<SweepResult> {
    cfg.validate()?;
    let points: Vec<Point> = (0..cfg.axis.len()).map(|i| cfg.point(i)).collect::<Result<_>>()?;
    let jobs = points.len() * cfg.trials;
    let job = |j: usize| {
        let (i, t) = (j / cfg.trials, j % cfg.trials);
        run_trial(cfg, &points[i], cfg.axis.value(i), t, master)
    };
    let per_job = match exec {
        Execution::Parallel => map_indexed(jobs, job),
        Execution::Sequential => map_indexed_seq(jobs, job),
    };
    let records: Vec<TrialRecord> = per_job.into_iter().flatten().collect();
    Ok(SweepResult { axis: cfg.axis.name(), rows: aggregate(cfg, &records), records })
}

pub fn run_sweep(cfg: &SweepConfig, master: u64) -> Result<SweepResult> {
    run_sweep_with(cfg, master, Execution::Parallel)
}

pub const SUMMARY_HEADER: &str = "axis_value,method,trials,failures,nmse_mean,nmse_median";
pub const TRIALS_HEADER: &str = "axis_value,method,trial,seed,nmse,wall_time_s";

pub fn summary_csv(result: &SweepResult) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e}",
            r.axis_value,
            r.method.name(),
            r.trials,
            r.failures,
            r.nmse_mean,
            r.nmse_median
        );
    }
    out
}

/// Per-trial rows. Wall times make this file non-reproducible by design.
pub fn trials_csv(result: &SweepResult) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for r in &result.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e}",
            r.axis_value,
            r.method.name(),
            r.trial,
            r.seed,
            r.nmse.unwrap_or(f64::NAN),
            r.wall_time_s
        );
    }
    out
}
