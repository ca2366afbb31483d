//! Release gate: noiseless round trips of both estimators and the analytic
//! gradient of the departure-direction objective.

use std::f64::consts::PI;

use ddpol_core::bench::nmse;
use ddpol_core::channel::{
    db_to_linear, make_frugal_pilot, make_orthogonal_pilot, sample_paths, synthesize_channel, transmit,
};
use ddpol_core::cpd::{parafac_pipeline, CpdOptions};
use ddpol_core::ctd::{choose_pr, ctd_pipeline, DodObjective, DodOptions};
use ddpol_core::exec::rng_for;
use ddpol_core::manifolds::{AngleRanges, ArrayGeometry};
use ddpol_core::{CVec, C64};
use nalgebra::DMatrix;
use rand::Rng;

use crate::CliError;

const KAPPA_DB: f64 = 13.2;
const NMSE_LIMIT: f64 = 1e-8;
const DRAWS: u64 = 10;
/// Successes required out of `DRAWS` per path count.
const REQUIRED: usize = 9;

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn round_trips(
    name: &str,
    ks: impl Iterator<Item = usize>,
    trial: impl Fn(usize, u64) -> Result<f64, ddpol_core::Error>,
) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in ks {
        let ok = (0..DRAWS).filter(|&s| matches!(trial(k, s), Ok(e) if e <= NMSE_LIMIT)).count();
        pass &= ok >= REQUIRED;
        parts.push(format!("K={k}:{ok}/{DRAWS}"));
    }
    Check { name: name.to_string(), pass, detail: parts.join(" ") }
}

fn parafac_check() -> Result<Check, CliError> {
    let geom = ArrayGeometry::half_wavelength(4, 8, 2)?;
    Ok(round_trips("parafac noiseless round trip", 1..=6, |k, s| {
        let mut rng = rng_for(s, k as u64);
        let params = sample_paths(k, db_to_linear(KAPPA_DB), &AngleRanges::default(), &mut rng)?;
        let h = synthesize_channel(&params, &geom)?;
        let pilot = make_orthogonal_pilot(geom.mt(), &mut rng)?;
        let rx = transmit(&h, &pilot, None, &mut rng)?;
        let est = parafac_pipeline(&rx, &pilot, k, &geom, &CpdOptions { seed: s, restarts: 20, ..Default::default() })?;
        nmse(&est.channel, &h)
    }))
}

fn ctd_check() -> Result<Check, CliError> {
    let geom = ArrayGeometry::half_wavelength(8, 8, 3)?;
    let n = 16;
    let kmax = choose_pr(geom.mr, n)?.kmax;
    Ok(round_trips("ctd noiseless round trip", 1..=kmax, |k, s| {
        let mut rng = rng_for(s, 100 + k as u64);
        let params = sample_paths(k, db_to_linear(KAPPA_DB), &AngleRanges::default(), &mut rng)?;
        let h = synthesize_channel(&params, &geom)?;
        let pilot = make_frugal_pilot(geom.mt(), n, &mut rng)?;
        let rx = transmit(&h, &pilot, None, &mut rng)?;
        let est = ctd_pipeline(&rx, &pilot, k, &geom, &DodOptions::default())?;
        nmse(&est.channel, &h)
    }))
}

fn gradient_check() -> Result<Check, CliError> {
    let geom = ArrayGeometry::half_wavelength(8, 8, 3)?;
    let mut rng = rng_for(7, 0);
    let q = DMatrix::from_fn(geom.mt(), 8, |_, _| rng.random_range(-1.0..1.0));
    let e = CVec::from_fn(8, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let obj = DodObjective::new(&e, &q, &geom)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (wx, wy) = (rng.random_range(-PI..PI), rng.random_range(-PI..PI));
        let (_, g) = obj.value_grad(wx, wy);
        let fx = (obj.value(wx + h, wy) - obj.value(wx - h, wy)) / (2.0 * h);
        let fy = (obj.value(wx, wy + h) - obj.value(wx, wy - h)) / (2.0 * h);
        let err = (g[0] - fx).hypot(g[1] - fy) / g[0].hypot(g[1]).max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    Ok(Check {
        name: "objective gradient".into(),
        pass: worst < 1e-5,
        detail: format!("max relative error {worst:.2e} over 100 points"),
    })
}

pub fn run() -> Result<(), CliError> {
    let checks = [parafac_check()?, ctd_check()?, gradient_check()?];
    for c in &checks {
        println!("{}: {} | {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfTest(failed.join(", ")))
    }
}
