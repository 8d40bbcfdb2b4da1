//! Finite-difference verification of every loss term with respect to raw
//! head outputs, at random points away from clamps and kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{finite_diff_check, Tape, Var};
use crate::error::Result;
use crate::evidential::{dirichlet_on_tape, dirichlet_from_logits, nig_from_raw, nig_on_tape, DirichletVars, NigVars};
use crate::losses::{focal_on_tape, kl_on_tape, nig_terms_on_tape, presence_on_tape, selected_abs_on_tape, theta_on_tape, topk_indices};
use crate::tensor::Tensor;

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-3;
/// Pixels per point for the selection terms, and how many are selected.
const TOPK_PIXELS: usize = 8;
const TOPK_K: usize = 3;
/// Minimum distance from the `|·|` kink.
const KINK_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

/// Logit pairs laid out `[L₁, L₂, L₁, L₂, …]`.
fn dirichlet_of(tape: &mut Tape, x: Var, n: usize) -> Result<DirichletVars> {
    let pairs = tape.reshape(x, &[n, 2])?;
    let a = tape.narrow(pairs, 1, 0, 1)?;
    let a = tape.reshape(a, &[n])?;
    let p = tape.narrow(pairs, 1, 1, 1)?;
    let p = tape.reshape(p, &[n])?;
    dirichlet_on_tape(tape, a, p)
}

/// Raw NIG channels laid out `[γ…, r_v…, r_α…, r_β…]`, `n` of each.
fn nig_of(tape: &mut Tape, x: Var, n: usize) -> Result<NigVars> {
    let mut raw = [x; 4];
    for (c, r) in raw.iter_mut().enumerate() {
        *r = tape.narrow(x, 0, c * n, n)?;
    }
    nig_on_tape(tape, raw)
}

fn logits<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..2 * n).map(|_| rng.random_range(-4.0..4.0)).collect()
}

fn nig_raw<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    v.extend((0..3 * n).map(|_| rng.random_range(-2.0..3.0)));
    v
}

/// Target at least `KINK_MARGIN` away from `pred`.
fn away_from<R: Rng>(rng: &mut R, pred: f64, lo: f64, hi: f64) -> f64 {
    loop {
        let y = rng.random_range(lo..hi);
        if (y - pred).abs() > KINK_MARGIN {
            return y;
        }
    }
}

fn run<F>(name: &'static str, points: usize, mut make: F) -> Result<SuiteEntry>
where
    F: FnMut() -> Result<f64>,
{
    let mut worst = 0.0f64;
    for _ in 0..points {
        worst = worst.max(make()?);
    }
    Ok(SuiteEntry {
        name,
        points,
        max_rel_error: worst,
    })
}

/// Runs every check at `points` random points each.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(run("l_theta", points, || {
        let x = Tensor::from_vec(logits(&mut rng, 1));
        let y2 = [f64::from(rng.random_bool(0.5))];
        let c = finite_diff_check(
            |t, x| {
                let d = dirichlet_of(t, x, 1)?;
                let l = theta_on_tape(t, &d, &y2)?;
                t.sum(l)
            },
            &x,
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("l_kl", points, || {
        let x = Tensor::from_vec(logits(&mut rng, 1));
        let y2 = [f64::from(rng.random_bool(0.5))];
        let c = finite_diff_check(
            |t, x| {
                let d = dirichlet_of(t, x, 1)?;
                let l = kl_on_tape(t, &d, &y2)?;
                t.sum(l)
            },
            &x,
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("focal_negative", points, || {
        let x = Tensor::from_vec(logits(&mut rng, 1));
        let heat = [rng.random_range(0.0..0.99)];
        let c = finite_diff_check(
            |t, x| {
                let d = dirichlet_of(t, x, 1)?;
                let p = presence_on_tape(t, &d)?;
                let l = focal_on_tape(t, p, &heat, 2.0, 4.0)?;
                t.sum(l)
            },
            &x,
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("l_nll", points, || {
        let x = Tensor::from_vec(nig_raw(&mut rng, 1));
        let y = [rng.random_range(-3.0..3.0)];
        let c = finite_diff_check(
            |t, x| {
                let nig = nig_of(t, x, 1)?;
                let (nll, _) = nig_terms_on_tape(t, &nig, &y)?;
                t.sum(nll)
            },
            &x,
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("l_reg", points, || {
        let raw = nig_raw(&mut rng, 1);
        let y = [away_from(&mut rng, raw[0], -3.0, 3.0)];
        let c = finite_diff_check(
            |t, x| {
                let nig = nig_of(t, x, 1)?;
                let (_, reg) = nig_terms_on_tape(t, &nig, &y)?;
                t.sum(reg)
            },
            &Tensor::from_vec(raw.clone()),
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("topk_cls", points, || {
        let raw = logits(&mut rng, TOPK_PIXELS);
        let states: Vec<_> = raw
            .chunks(2)
            .map(|l| dirichlet_from_logits([l[0], l[1]]))
            .collect::<Result<_>>()?;
        let unc: Vec<f64> = states.iter().map(|s| s.uncertainty).collect();
        let idx = topk_indices(&unc, TOPK_K);
        let targets: Vec<f64> = idx.iter().map(|&i| away_from(&mut rng, states[i].presence(), 0.0, 1.0)).collect();
        let weights = vec![1.0 / TOPK_K as f64; TOPK_K];
        let c = finite_diff_check(
            |t, x| {
                let d = dirichlet_of(t, x, TOPK_PIXELS)?;
                let p = presence_on_tape(t, &d)?;
                selected_abs_on_tape(t, p, &idx, &targets, &weights)
            },
            &Tensor::from_vec(raw.clone()),
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    out.push(run("topk_reg", points, || {
        let n = TOPK_PIXELS;
        let raw = nig_raw(&mut rng, n);
        let states: Vec<_> = (0..n)
            .map(|i| nig_from_raw([raw[i], raw[n + i], raw[2 * n + i], raw[3 * n + i]]))
            .collect::<Result<_>>()?;
        let unc: Vec<f64> = states.iter().map(|s| s.uncertainty()).collect();
        let idx = topk_indices(&unc, TOPK_K);
        let targets: Vec<f64> = idx.iter().map(|&i| away_from(&mut rng, states[i].gamma, -3.0, 3.0)).collect();
        let weights = vec![1.0 / TOPK_K as f64; TOPK_K];
        let c = finite_diff_check(
            |t, x| {
                let nig = nig_of(t, x, n)?;
                selected_abs_on_tape(t, nig.gamma, &idx, &targets, &weights)
            },
            &Tensor::from_vec(raw.clone()),
            SUITE_STEP,
        )?;
        Ok(c.max_rel_error)
    })?);

    Ok(out)
}
