//! Mapping raw head outputs to Dirichlet (objectness) and Normal-Inverse-Gamma
//! (box dimension) evidence.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::special::softplus;

/// Number of Dirichlet outcomes per class and pixel: no-center, center.
pub const OUTCOMES: usize = 2;

/// Lower bound applied to `v` and `beta`, and to `alpha - 1`.
pub const NIG_FLOOR: f64 = 1e-4;

/// Two-outcome Dirichlet for one class at one pixel. Index 0 is "no object
/// centred here", index 1 is "object centred here".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletState {
    pub alpha: [f64; 2],
    pub strength: f64,
    pub prob: [f64; 2],
    pub uncertainty: f64,
}

impl DirichletState {
    pub fn from_alpha(alpha: [f64; 2]) -> Self {
        let strength = alpha[0] + alpha[1];
        Self {
            alpha,
            strength,
            prob: [alpha[0] / strength, alpha[1] / strength],
            uncertainty: OUTCOMES as f64 / strength,
        }
    }

    /// Object-presence probability.
    pub fn presence(&self) -> f64 {
        self.prob[1]
    }
}

/// `alpha_k = softplus(L_k) + 1`, `p = alpha / S`, `U = 2 / S`.
pub fn dirichlet_from_logits(logits: [f64; 2]) -> Result<DirichletState> {
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::NumericDomain {
            op: "dirichlet_from_logits",
        });
    }
    Ok(DirichletState::from_alpha([
        softplus(logits[0]) + 1.0,
        softplus(logits[1]) + 1.0,
    ]))
}

/// Normal-Inverse-Gamma evidence for one box dimension at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigState {
    pub gamma: f64,
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigState {
    pub fn prediction(&self) -> f64 {
        self.gamma
    }

    /// `sqrt(beta / (v (alpha - 1)))`.
    pub fn uncertainty(&self) -> f64 {
        (self.beta / (self.v * (self.alpha - 1.0))).sqrt()
    }
}

/// Raw `[gamma, v, alpha, beta]` channels to a clamped NIG state.
pub fn nig_from_raw(raw: [f64; 4]) -> Result<NigState> {
    if !raw.iter().all(|r| r.is_finite()) {
        return Err(Error::NumericDomain { op: "nig_from_raw" });
    }
    Ok(NigState {
        gamma: raw[0],
        v: softplus(raw[1]).max(NIG_FLOOR),
        alpha: (softplus(raw[2]) + 1.0).max(1.0 + NIG_FLOOR),
        beta: softplus(raw[3]).max(NIG_FLOOR),
    })
}

/// Inverse of softplus for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Dirichlet parameters built on a tape from logit columns.
#[derive(Debug, Clone, Copy)]
pub struct DirichletVars {
    pub alpha_absent: Var,
    pub alpha_present: Var,
    pub strength: Var,
}

pub fn dirichlet_on_tape(tape: &mut Tape, logit_absent: Var, logit_present: Var) -> Result<DirichletVars> {
    let a1 = tape.softplus(logit_absent)?;
    let a1 = tape.add_scalar(a1, 1.0)?;
    let a2 = tape.softplus(logit_present)?;
    let a2 = tape.add_scalar(a2, 1.0)?;
    let strength = tape.add(a1, a2)?;
    Ok(DirichletVars {
        alpha_absent: a1,
        alpha_present: a2,
        strength,
    })
}

/// NIG parameters built on a tape from the four raw channels.
#[derive(Debug, Clone, Copy)]
pub struct NigVars {
    pub gamma: Var,
    pub v: Var,
    pub alpha: Var,
    pub beta: Var,
}

pub fn nig_on_tape(tape: &mut Tape, raw: [Var; 4]) -> Result<NigVars> {
    let v = tape.softplus(raw[1])?;
    let v = tape.clamp_min(v, NIG_FLOOR)?;
    let alpha = tape.softplus(raw[2])?;
    let alpha = tape.add_scalar(alpha, 1.0)?;
    let alpha = tape.clamp_min(alpha, 1.0 + NIG_FLOOR)?;
    let beta = tape.softplus(raw[3])?;
    let beta = tape.clamp_min(beta, NIG_FLOOR)?;
    Ok(NigVars {
        gamma: raw[0],
        v,
        alpha,
        beta,
    })
}

/// Values of a [`NigVars`] element-wise as plain states.
pub fn nig_states(tape: &Tape, vars: &NigVars) -> Vec<NigState> {
    let (g, v, a, b) = (
        tape.value(vars.gamma).data(),
        tape.value(vars.v).data(),
        tape.value(vars.alpha).data(),
        tape.value(vars.beta).data(),
    );
    (0..g.len())
        .map(|i| NigState {
            gamma: g[i],
            v: v[i],
            alpha: a[i],
            beta: b[i],
        })
        .collect()
}
