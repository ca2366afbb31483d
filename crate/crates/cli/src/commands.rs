use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ddpol_core::bench::{
    match_paths, nmse, realize, run_sweep, summary_csv, trial_seed, trials_csv, PilotConfig, TrialData,
};
use ddpol_core::bounds::{kmax_ctd, kmax_imdf, kmax_kruskal, BoundReport};
use ddpol_core::channel::{ChannelMatrix, PathParams, PilotKind};
use ddpol_core::cpd::{parafac_pipeline, CpdOptions, ParamEstimate};
use ddpol_core::ctd::ctd_pipeline;
use ddpol_core::manifolds::{ArrayGeometry, PathAngles, PhaseTriple};
use ddpol_core::CMat;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{BoundsArgs, CliError, EstimateArgs, SweepArgs, SynthArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Parafac,
    Ctd,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn bounds(a: &BoundsArgs) -> Result<(), CliError> {
    for (name, m) in [("--mr", a.mr), ("--mx", a.mx), ("--my", a.my)] {
        if m == 0 {
            return Err(CliError::config(name, "must be at least 1"));
        }
    }
    let mut reports = vec![kmax_kruskal(a.mr, a.mx, a.my), kmax_imdf(a.mr, a.mx, a.my)];
    if let Some(n) = a.n {
        if n < 4 || n % 2 != 0 {
            return Err(CliError::config("--n", format!("must be even and at least 4, got {n}")));
        }
        reports.push(kmax_ctd(a.mr, n));
    }
    if a.json {
        println!("{}", to_json(&reports));
    } else {
        for r in &reports {
            println!("{}", describe_bound(r));
        }
    }
    Ok(())
}

fn describe_bound(r: &BoundReport) -> String {
    let mut line = format!("{:<8} Mr={}", r.theorem.to_string(), r.mr);
    if let (Some(mx), Some(my)) = (r.mx, r.my) {
        let _ = write!(line, " Mx={mx} My={my}");
    }
    if let Some(n) = r.n {
        let _ = write!(line, " N={n}");
    }
    let _ = write!(line, " Kmax={}", r.kmax);
    if let Some(w) = r.witness {
        let _ = write!(line, " (Pr={}", w.pr);
        if let (Some(px), Some(py)) = (w.px, w.py) {
            let _ = write!(line, " Px={px} Py={py}");
        }
        line.push(')');
    }
    line
}

fn master_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64, CliError> {
    flag.or(cfg.seed).ok_or_else(|| CliError::config("seed", "pass --seed or set `seed` in the config"))
}

/// Trial 0 of a sweep over the same configuration and master seed.
fn draw(
    cfg: &RunConfig,
    pilot: &PilotConfig,
    snr_db: Option<f64>,
    master: u64,
) -> Result<(ArrayGeometry, TrialData), CliError> {
    let geom = cfg.geometry.to_geometry()?;
    cfg.scenario.ranges.validate().map_err(|e| CliError::from_core("scenario.ranges", e))?;
    geom.check_no_wrap(&cfg.scenario.ranges).map_err(|e| CliError::from_core("geometry", e))?;
    let data = realize(&cfg.scenario, &geom, pilot, snr_db, None, trial_seed(master, 0))
        .map_err(|e| CliError::from_core("scenario", e))?;
    Ok((geom, data))
}

/// Header line, then one line per row with `re,im` pairs per column.
pub fn channel_csv(h: &ChannelMatrix) -> String {
    let mut out = format!(
        "# channel {}x{} (2Mr x 2Mt, Mr={} Mt={}); entry (r,c) is re_c,im_c on line r\n",
        h.h.nrows(),
        h.h.ncols(),
        h.mr,
        h.mt
    );
    let cols: Vec<String> = (0..h.h.ncols()).map(|c| format!("re_{c},im_{c}")).collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for r in 0..h.h.nrows() {
        let row: Vec<String> = (0..h.h.ncols()).map(|c| format!("{},{}", h.h[(r, c)].re, h.h[(r, c)].im)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn pairs(m: &CMat) -> Vec<Vec<[f64; 2]>> {
    m.row_iter().map(|row| row.iter().map(|z| [z.re, z.im]).collect()).collect()
}

#[derive(Serialize)]
struct Truth<'a> {
    seed: u64,
    geometry: ArrayGeometry,
    k: usize,
    kappa_db: f64,
    angles: &'a [PathAngles],
    phases: Vec<PhaseTriple>,
    /// Rows VV, VH, HV, HH; one `[re, im]` per path.
    b: Vec<Vec<[f64; 2]>>,
}

fn truth_json(params: &PathParams, geom: &ArrayGeometry, seed: u64, kappa_db: f64) -> Result<String, CliError> {
    let truth = Truth {
        seed,
        geometry: *geom,
        k: params.k(),
        kappa_db,
        angles: &params.angles,
        phases: params.phases(geom)?,
        b: pairs(&params.b),
    };
    Ok(to_json(&truth))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let master = master_seed(a.seed, &cfg)?;
    let pilot = cfg.pilot_or(PilotKind::RowOrthogonal);
    let (geom, data) = draw(&cfg, &pilot, cfg.scenario.snr_db, master)?;
    let truth_path = a.truth.clone().unwrap_or_else(|| default_truth_path(&a.out));
    write_file(&a.out, &channel_csv(&data.h))?;
    write_file(&truth_path, &truth_json(&data.params, &geom, master, cfg.scenario.kappa_db)?)?;
    println!("wrote {} and {} (K={})", a.out.display(), truth_path.display(), data.params.k());
    Ok(())
}

fn default_truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct PathReport {
    angles: PathAngles,
    phases: PhaseTriple,
}

#[derive(Serialize)]
struct EstimateReport {
    method: Estimator,
    seed: u64,
    snr_db: Option<f64>,
    k_true: usize,
    k_assumed: usize,
    nmse: f64,
    nmse_db: f64,
    /// Largest matched angle error (radians) when the path counts agree.
    max_angle_error: Option<f64>,
    estimates: Vec<PathReport>,
    truth: Vec<PathReport>,
    warnings: Vec<String>,
}

pub fn estimate(a: &EstimateArgs, which: Estimator) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let master = master_seed(a.seed, &cfg)?;
    let snr_db = a.snr.or(cfg.scenario.snr_db);
    let pilot = match which {
        Estimator::Parafac => cfg.pilot_or(PilotKind::RowOrthogonal),
        Estimator::Ctd => cfg.pilot.ok_or_else(|| CliError::config("pilot", "the frugal pilot block is required"))?,
    };
    let want = match which {
        Estimator::Parafac => PilotKind::RowOrthogonal,
        Estimator::Ctd => PilotKind::Frugal,
    };
    if pilot.kind != want {
        return Err(CliError::config("pilot.kind", format!("this estimator needs the {want:?} pilot")));
    }
    let geom = cfg.geometry.to_geometry()?;
    let mut warnings = Vec::new();
    match which {
        Estimator::Parafac => {
            let k = cfg_k_upper(&cfg);
            let b = kmax_kruskal(geom.mr, geom.mx, geom.my);
            if k > b.kmax {
                warnings.push(format!("K={k} exceeds the kruskal bound {}; uniqueness is not guaranteed", b.kmax));
            }
        }
        Estimator::Ctd => {
            let n = pilot.n.ok_or_else(|| CliError::config("pilot.n", "required for the frugal pilot"))?;
            if n % 2 != 0 || n < 4 || n >= 2 * geom.mt() {
                return Err(CliError::config(
                    "pilot.n",
                    format!("must be even, at least 4 and below 2Mt={}, got {n}", 2 * geom.mt()),
                ));
            }
            let b = kmax_ctd(geom.mr, n);
            let k = cfg_k_upper(&cfg);
            if k > b.kmax {
                return Err(CliError::Infeasible(ddpol_core::Error::Infeasible {
                    theorem: b.theorem,
                    k,
                    kmax: b.kmax,
                }));
            }
        }
    }
    let (geom, data) = draw(&cfg, &pilot, snr_db, master)?;
    let est: ParamEstimate = match which {
        Estimator::Parafac => {
            let opts = CpdOptions { seed: data.als_seed, ..cfg.als };
            parafac_pipeline(&data.rx, &data.pilot, data.k_assumed, &geom, &opts)?
        }
        Estimator::Ctd => ctd_pipeline(&data.rx, &data.pilot, data.k_assumed, &geom, &cfg.dod)?,
    };
    let e = nmse(&est.channel, &data.h)?;
    warnings.extend(est.warnings.iter().cloned());
    let report = EstimateReport {
        method: which,
        seed: master,
        snr_db,
        k_true: data.params.k(),
        k_assumed: data.k_assumed,
        nmse: e,
        nmse_db: 10.0 * e.log10(),
        max_angle_error: match_paths(&est, &data.params).ok().map(|m| m.max_error()),
        estimates: est.angles.iter().zip(&est.phases).map(|(&angles, &phases)| PathReport { angles, phases }).collect(),
        truth: data
            .params
            .angles
            .iter()
            .zip(data.params.phases(&geom)?)
            .map(|(&angles, phases)| PathReport { angles, phases })
            .collect(),
        warnings,
    };
    if a.json {
        println!("{}", to_json(&report));
    } else {
        print!("{}", describe_estimate(&report));
    }
    Ok(())
}

/// Largest path count the estimators can be asked for under the K policy.
fn cfg_k_upper(cfg: &RunConfig) -> usize {
    use ddpol_core::bench::KPolicy;
    match cfg.scenario.k {
        KPolicy::Known { k } => k,
        KPolicy::Uniform { max, .. } => max,
        KPolicy::Overestimate { assumed, .. } => assumed,
    }
}

fn describe_estimate(r: &EstimateReport) -> String {
    let mut out = String::new();
    let snr = r.snr_db.map_or("noiseless".to_string(), |s| format!("{s} dB"));
    let _ = writeln!(
        out,
        "method {:?}, seed {}, SNR {snr}, K assumed {} (true {})",
        r.method, r.seed, r.k_assumed, r.k_true
    );
    for (label, paths) in [("estimate", &r.estimates), ("truth", &r.truth)] {
        let _ = writeln!(out, "{label}:");
        let _ = writeln!(out, "  path      doa   dod_az   dod_el  omega_r  omega_x  omega_y");
        for (i, p) in paths.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {i:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                p.angles.doa, p.angles.dod_az, p.angles.dod_el, p.phases.omega_r, p.phases.omega_x, p.phases.omega_y
            );
        }
    }
    if let Some(m) = r.max_angle_error {
        let _ = writeln!(out, "max matched angle error {m:.3e} rad");
    }
    let _ = writeln!(out, "nmse {:.6e} ({:.2} dB)", r.nmse, r.nmse_db);
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output.summary.clone())
        .ok_or_else(|| CliError::config("output.summary", "pass --out or set output.summary"))?;
    let trials_out = a.trials_out.clone().or_else(|| cfg.output.trials.clone());
    let (sweep, warnings) = cfg.to_sweep()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let result = run_sweep(&sweep, a.seed)?;
    write_file(&out, &summary_csv(&result))?;
    if let Some(p) = &trials_out {
        write_file(p, &trials_csv(&result))?;
    }
    let failures: usize = result.rows.iter().map(|r| r.failures).sum();
    println!(
        "wrote {} ({} rows, {} failed trials){}",
        out.display(),
        result.rows.len(),
        failures,
        trials_out.map(|p| format!(" and {}", p.display())).unwrap_or_default()
    );
    Ok(())
}
