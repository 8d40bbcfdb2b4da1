//! Training objective: evidential classification with class-balanced
//! weighting, one-sided focal and uncertainty-selected terms; evidential
//! width/height regression with sparse-target weighting; L1 offsets.
//!
//! Scalar functions mirror the per-pixel formulas and are what the unit tests
//! and the gradient suite pin down. [`final_loss`] builds the same quantities
//! on a [`Tape`] for a batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::evidential::{dirichlet_on_tape, nig_on_tape, DirichletVars, NigState, NigVars};
use crate::model::{HeadOutputs, OFFSET_CHANNELS, WH_CHANNELS};
use crate::special::{digamma, lgamma};
use crate::targets::TrainingSample;
use crate::tensor::Tensor;

/// Probability clamp applied before the focal log.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationLossConfig {
    pub lambda_un_cls: f64,
    /// Fraction of the (per-class) pixel batch taken as most uncertain.
    pub n_cls_fraction: f64,
    pub zeta: f64,
    pub eta: f64,
    pub beta_cb: f64,
    pub class_balanced: bool,
    /// Leave a class that has no centres in the batch at weights `[1, 1]`
    /// instead of `[2, 0]`.
    pub uniform_when_absent: bool,
    pub focal: bool,
    pub uncertainty_topk: bool,
    /// Select the most uncertain pixels within each class rather than over
    /// all classes at once.
    pub topk_per_class: bool,
}

impl Default for ClassificationLossConfig {
    fn default() -> Self {
        Self {
            lambda_un_cls: 0.1,
            n_cls_fraction: 0.4,
            zeta: 2.0,
            eta: 4.0,
            beta_cb: 0.99,
            class_balanced: true,
            uniform_when_absent: false,
            focal: true,
            uncertainty_topk: true,
            topk_per_class: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionLossConfig {
    pub lambda_w: f64,
    pub lambda_un_reg: f64,
    pub n_w: usize,
    pub n_obj_max: usize,
    pub kappa2: f64,
    pub uncertainty_topk: bool,
}

impl Default for RegressionLossConfig {
    fn default() -> Self {
        Self {
            lambda_w: 1.0,
            lambda_un_reg: 0.1,
            n_w: 55,
            n_obj_max: 50,
            kappa2: 1e-3,
            uncertainty_topk: true,
        }
    }
}

/// Weights of the four heads in the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadWeights {
    pub cls: f64,
    pub w: f64,
    pub h: f64,
    pub off: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            w: 0.27,
            h: 0.27,
            off: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub classification: ClassificationLossConfig,
    pub regression: RegressionLossConfig,
    pub head_weights: HeadWeights,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.classification;
        let r = &self.regression;
        let hw = &self.head_weights;
        let weights = [c.lambda_un_cls, r.lambda_w, r.lambda_un_reg, r.kappa2, hw.cls, hw.w, hw.h, hw.off];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        if !(c.n_cls_fraction > 0.0 && c.n_cls_fraction <= 1.0) {
            return Err(Error::validation(format!("n_cls_fraction {} outside (0, 1]", c.n_cls_fraction)));
        }
        if !(c.zeta > 0.0 && c.eta > 0.0) {
            return Err(Error::validation("focal exponents must be positive"));
        }
        if !(c.beta_cb > 0.0 && c.beta_cb < 1.0) {
            return Err(Error::validation(format!("beta_cb {} outside (0, 1)", c.beta_cb)));
        }
        if r.n_w == 0 || r.n_obj_max == 0 {
            return Err(Error::validation("n_w and n_obj_max must be at least 1"));
        }
        Ok(())
    }
}

/// Every term of the objective for one batch. Sums over pixels are averaged
/// over images; `l_kl` is reported before the annealing factor and the
/// `l_un_*` terms before their regularisation weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_theta: f64,
    pub l_kl: f64,
    pub l_focal_neg: f64,
    pub l_un_cls: f64,
    pub l_nll_w: f64,
    pub l_reg_w: f64,
    pub l_un_w: f64,
    pub l_nll_h: f64,
    pub l_reg_h: f64,
    pub l_un_h: f64,
    pub l_off: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 12] = [
        "l_theta",
        "l_kl",
        "l_focal_neg",
        "l_un_cls",
        "l_nll_w",
        "l_reg_w",
        "l_un_w",
        "l_nll_h",
        "l_reg_h",
        "l_un_h",
        "l_off",
        "total",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.l_theta,
            self.l_kl,
            self.l_focal_neg,
            self.l_un_cls,
            self.l_nll_w,
            self.l_reg_w,
            self.l_un_w,
            self.l_nll_h,
            self.l_reg_h,
            self.l_un_h,
            self.l_off,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 12]) -> Self {
        Self {
            l_theta: v[0],
            l_kl: v[1],
            l_focal_neg: v[2],
            l_un_cls: v[3],
            l_nll_w: v[4],
            l_reg_w: v[5],
            l_un_w: v[6],
            l_nll_h: v[7],
            l_reg_h: v[8],
            l_un_h: v[9],
            l_off: v[10],
            total: v[11],
        }
    }

    /// Recombines the itemised terms into the total.
    pub fn combine(&mut self, config: &LossConfig, lambda_cls: f64) {
        let c = &config.classification;
        let r = &config.regression;
        let hw = &config.head_weights;
        let cls = self.l_theta + lambda_cls * self.l_kl + self.l_focal_neg + c.lambda_un_cls * self.l_un_cls;
        let w = self.l_nll_w + r.lambda_w * self.l_reg_w + r.lambda_un_reg * self.l_un_w;
        let h = self.l_nll_h + r.lambda_w * self.l_reg_h + r.lambda_un_reg * self.l_un_h;
        self.total = hw.cls * cls + hw.w * w + hw.h * h + hw.off * self.l_off;
    }
}

fn check_onehot(y: [f64; 2]) -> Result<()> {
    if y == [1.0, 0.0] || y == [0.0, 1.0] {
        Ok(())
    } else {
        Err(Error::validation(format!("target {y:?} is not one-hot")))
    }
}

/// `Σ_k y_k (ψ(S) − ψ(α_k))`.
pub fn theta_term(alpha: [f64; 2], y: [f64; 2]) -> f64 {
    let s = digamma(alpha[0] + alpha[1]);
    y[0] * (s - digamma(alpha[0])) + y[1] * (s - digamma(alpha[1]))
}

/// `α̃ = y + (1 − y) ⊙ α`.
pub fn alpha_tilde(alpha: [f64; 2], y: [f64; 2]) -> [f64; 2] {
    [y[0] + (1.0 - y[0]) * alpha[0], y[1] + (1.0 - y[1]) * alpha[1]]
}

/// KL divergence from `Dir(α̃)` to the uniform Dirichlet.
pub fn kl_term(alpha_tilde: [f64; 2]) -> f64 {
    let s = alpha_tilde[0] + alpha_tilde[1];
    let mut kl = lgamma(s) - lgamma(2.0) - lgamma(alpha_tilde[0]) - lgamma(alpha_tilde[1]);
    for a in alpha_tilde {
        kl += (a - 1.0) * (digamma(a) - digamma(s));
    }
    kl
}

/// Per-pixel `(L_theta, L_KL)` for Dirichlet parameters `alpha` and one-hot
/// targets `y`.
pub fn evidential_class_terms(alpha: &[[f64; 2]], y: &[[f64; 2]]) -> Result<(Vec<f64>, Vec<f64>)> {
    if alpha.len() != y.len() {
        return Err(Error::Shape {
            op: "evidential_class_terms",
            shapes: vec![vec![alpha.len(), 2], vec![y.len(), 2]],
        });
    }
    let mut theta = Vec::with_capacity(alpha.len());
    let mut kl = Vec::with_capacity(alpha.len());
    for (&a, &t) in alpha.iter().zip(y) {
        check_onehot(t)?;
        theta.push(theta_term(a, t));
        kl.push(kl_term(alpha_tilde(a, t)));
    }
    Ok((theta, kl))
}

/// `[W₁, W₂]` from the effective number of samples; a class with no pixels
/// contributes `e_k = 0`.
pub fn class_balanced_weights(n1: usize, n2: usize, beta: f64) -> Result<[f64; 2]> {
    if n1 == 0 && n2 == 0 {
        return Err(Error::validation("class-balanced weights need at least one pixel"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::validation(format!("beta {beta} outside (0, 1)")));
    }
    let effective = |n: usize| {
        if n == 0 {
            0.0
        } else {
            (1.0 - beta) / (1.0 - beta.powi(n.min(i32::MAX as usize) as i32))
        }
    };
    let (e1, e2) = (effective(n1), effective(n2));
    Ok([2.0 * e1 / (e1 + e2), 2.0 * e2 / (e1 + e2)])
}

/// One-sided focal penalty on the object-presence probability `p` at a pixel
/// whose heatmap value is `y`.
pub fn focal_negative(y: f64, p: f64, zeta: f64, eta: f64) -> f64 {
    if y == 1.0 {
        return 0.0;
    }
    let p = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    -(1.0 - y).powf(eta) * p.powf(zeta) * (1.0 - p).ln()
}

/// Indices of the `k` largest `uncertainty` values, largest first; ties go to
/// the lower index. `k` beyond the length selects everything.
pub fn topk_indices(uncertainty: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..uncertainty.len()).collect();
    idx.sort_unstable_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean absolute deviation over the `k` most uncertain entries.
pub fn topk_uncertainty_mse(values: &[f64], targets: &[f64], uncertainty: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("top-k selection over an empty grid"));
    }
    if values.len() != targets.len() || values.len() != uncertainty.len() {
        return Err(Error::Shape {
            op: "topk_uncertainty_mse",
            shapes: vec![vec![values.len()], vec![targets.len()], vec![uncertainty.len()]],
        });
    }
    if k == 0 {
        return Err(Error::validation("top-k selection needs k >= 1"));
    }
    let idx = topk_indices(uncertainty, k);
    Ok(idx.iter().map(|&i| (targets[i] - values[i]).abs()).sum::<f64>() / idx.len() as f64)
}

/// `ln((2·N_max − n) / n)` with `n` clamped to `[1, 2·N_max − 1]`; `None` when
/// the image has no centred objects.
pub fn kappa1(n_centered: usize, n_obj_max: usize) -> Option<f64> {
    if n_centered == 0 {
        return None;
    }
    let cap = 2 * n_obj_max;
    let n = n_centered.clamp(1, cap - 1) as f64;
    Some(((cap as f64 - n) / n).ln())
}

/// `κ₁` where the target dimension is positive, `κ₂` elsewhere.
pub fn regression_weights(y_dim: &[f64], n_centered: usize, n_obj_max: usize, kappa2: f64) -> Option<Vec<f64>> {
    let k1 = kappa1(n_centered, n_obj_max)?;
    Some(y_dim.iter().map(|&y| if y > 0.0 { k1 } else { kappa2 }).collect())
}

/// Negative log-likelihood of `y` under the Student-t marginal of the NIG.
pub fn nig_nll(s: &NigState, y: f64) -> f64 {
    let omega = 2.0 * s.beta * (1.0 + s.v);
    let d = y - s.gamma;
    0.5 * (std::f64::consts::PI / s.v).ln() - s.alpha * omega.ln() + (s.alpha + 0.5) * (d * d * s.v + omega).ln()
        + lgamma(s.alpha)
        - lgamma(s.alpha + 0.5)
}

/// `|y − γ| · (2v + α)`.
pub fn nig_reg(s: &NigState, y: f64) -> f64 {
    (y - s.gamma).abs() * (2.0 * s.v + s.alpha)
}

// ---- tape versions -------------------------------------------------------

fn constant(tape: &mut Tape, data: Vec<f64>) -> Var {
    let n = data.len();
    tape.constant(Tensor::from_parts(vec![n], data))
}

/// Per-pixel `L_theta` given presence targets `y2 ∈ {0, 1}`.
pub fn theta_on_tape(tape: &mut Tape, d: &DirichletVars, y2: &[f64]) -> Result<Var> {
    let y1 = constant(tape, y2.iter().map(|y| 1.0 - y).collect());
    let y2 = constant(tape, y2.to_vec());
    let ps = tape.digamma(d.strength)?;
    let p1 = tape.digamma(d.alpha_absent)?;
    let p2 = tape.digamma(d.alpha_present)?;
    let t1 = tape.mul(y1, p1)?;
    let t2 = tape.mul(y2, p2)?;
    let t = tape.sub(ps, t1)?;
    tape.sub(t, t2)
}

/// Per-pixel `L_KL` given presence targets `y2 ∈ {0, 1}`.
pub fn kl_on_tape(tape: &mut Tape, d: &DirichletVars, y2: &[f64]) -> Result<Var> {
    let y1v: Vec<f64> = y2.iter().map(|y| 1.0 - y).collect();
    let (c_y1, c_y2) = (constant(tape, y1v.clone()), constant(tape, y2.to_vec()));
    let (m_y1, m_y2) = (constant(tape, y1v), constant(tape, y2.to_vec()));
    // α̃₁ = y₁ + y₂·α₁, α̃₂ = y₂ + y₁·α₂
    let t1 = tape.mul(m_y2, d.alpha_absent)?;
    let t1 = tape.add(t1, c_y1)?;
    let t2 = tape.mul(m_y1, d.alpha_present)?;
    let t2 = tape.add(t2, c_y2)?;
    let s = tape.add(t1, t2)?;

    let lg_s = tape.lgamma(s)?;
    let lg1 = tape.lgamma(t1)?;
    let lg2 = tape.lgamma(t2)?;
    let ps = tape.digamma(s)?;
    let mut kl = tape.sub(lg_s, lg1)?;
    kl = tape.sub(kl, lg2)?;
    kl = tape.add_scalar(kl, -lgamma(2.0))?;
    for t in [t1, t2] {
        let pt = tape.digamma(t)?;
        let diff = tape.sub(pt, ps)?;
        let am1 = tape.add_scalar(t, -1.0)?;
        let term = tape.mul(am1, diff)?;
        kl = tape.add(kl, term)?;
    }
    Ok(kl)
}

/// Object-presence probability `α₂ / S`.
pub fn presence_on_tape(tape: &mut Tape, d: &DirichletVars) -> Result<Var> {
    tape.div(d.alpha_present, d.strength)
}

/// Per-pixel one-sided focal loss against heatmap `heat`.
pub fn focal_on_tape(tape: &mut Tape, presence: Var, heat: &[f64], zeta: f64, eta: f64) -> Result<Var> {
    let c: Vec<f64> = heat.iter().map(|&y| if y == 1.0 { 0.0 } else { -(1.0 - y).powf(eta) }).collect();
    let c = constant(tape, c);
    let p = tape.clamp(presence, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)?;
    let pz = tape.powf(p, zeta)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let lq = tape.log(q)?;
    let f = tape.mul(pz, lq)?;
    tape.mul(c, f)
}

/// Per-pixel NIG negative log-likelihood and regulariser.
pub fn nig_terms_on_tape(tape: &mut Tape, nig: &NigVars, y: &[f64]) -> Result<(Var, Var)> {
    let yv = constant(tape, y.to_vec());
    let bv = tape.mul(nig.beta, nig.v)?;
    let omega = tape.add(nig.beta, bv)?;
    let omega = tape.scale(omega, 2.0)?;
    let diff = tape.sub(yv, nig.gamma)?;
    let d2 = tape.mul(diff, diff)?;
    let d2v = tape.mul(d2, nig.v)?;
    let inner = tape.add(d2v, omega)?;

    let log_v = tape.log(nig.v)?;
    let log_omega = tape.log(omega)?;
    let log_inner = tape.log(inner)?;
    let a_half = tape.add_scalar(nig.alpha, 0.5)?;
    let lg_a = tape.lgamma(nig.alpha)?;
    let lg_ah = tape.lgamma(a_half)?;

    let mut nll = tape.affine(log_v, -0.5, 0.5 * std::f64::consts::PI.ln())?;
    let t = tape.mul(nig.alpha, log_omega)?;
    nll = tape.sub(nll, t)?;
    let t = tape.mul(a_half, log_inner)?;
    nll = tape.add(nll, t)?;
    nll = tape.add(nll, lg_a)?;
    nll = tape.sub(nll, lg_ah)?;

    let abs = tape.abs(diff)?;
    let two_v = tape.scale(nig.v, 2.0)?;
    let spread = tape.add(two_v, nig.alpha)?;
    let reg = tape.mul(abs, spread)?;
    Ok((nll, reg))
}

/// `Σ_i weight_i · |target_i − pred[idx_i]|` over a frozen selection.
pub fn selected_abs_on_tape(tape: &mut Tape, pred: Var, idx: &[usize], targets: &[f64], weights: &[f64]) -> Result<Var> {
    let picked = tape.gather(pred, idx)?;
    let t = constant(tape, targets.to_vec());
    let diff = tape.sub(picked, t)?;
    let abs = tape.abs(diff)?;
    let w = constant(tape, weights.to_vec());
    let weighted = tape.mul(abs, w)?;
    tape.sum(weighted)
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: Vec<f64>, scale: f64) -> Result<Var> {
    let w = constant(tape, weights);
    let wx = tape.mul(x, w)?;
    let s = tape.sum(wx)?;
    tape.scale(s, scale)
}

/// Result of [`final_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn column(tape: &mut Tape, x: Var, col: usize, n: usize) -> Result<Var> {
    let c = tape.narrow(x, 1, col, 1)?;
    tape.reshape(c, &[n])
}

/// Channel `c` of a `[B, C, h, w]` output as a flat `[B·h·w]` vector.
fn plane(tape: &mut Tape, x: Var, c: usize, n: usize) -> Result<Var> {
    let p = tape.narrow(x, 1, c, 1)?;
    tape.reshape(p, &[n])
}

/// Full objective for a batch. `samples[b]` supplies the targets for image
/// `b` of `outputs`.
pub fn final_loss(
    tape: &mut Tape,
    outputs: &HeadOutputs,
    samples: &[&TrainingSample],
    config: &LossConfig,
    lambda_cls: f64,
) -> Result<LossOutput> {
    config.validate()?;
    let first = samples.first().ok_or_else(|| Error::validation("loss over an empty batch"))?;
    let grid = first.grid;
    if samples.iter().any(|s| s.grid != grid) {
        return Err(Error::validation("all samples in a batch must share one grid"));
    }
    let (batch, classes, hw) = (samples.len(), grid.classes, grid.pixels());
    let (gh, gw) = (grid.height, grid.width);
    let expect = [
        (outputs.objectness, vec![batch * classes * hw, 2]),
        (outputs.wh, vec![batch, WH_CHANNELS, gh, gw]),
        (outputs.offset, vec![batch, OFFSET_CHANNELS, gh, gw]),
    ];
    for (var, shape) in expect {
        if tape.value(var).shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "final_loss",
                shapes: vec![tape.value(var).shape().to_vec(), shape],
            });
        }
    }
    let inv_b = 1.0 / batch as f64;
    let cc = &config.classification;
    let rc = &config.regression;
    let mut br = LossBreakdown::default();

    // ---- classification: rows ordered (b, k, pixel) ----
    let n = batch * classes * hw;
    let mut heat = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    let mut w_cls = Vec::with_capacity(n);
    // centre / background counts per class over the whole batch
    let mut class_w = Vec::with_capacity(classes);
    for k in 0..classes {
        let centres: usize = samples
            .iter()
            .map(|s| s.heatmap.data()[k * hw..(k + 1) * hw].iter().filter(|&&v| v == 1.0).count())
            .sum();
        class_w.push(if cc.class_balanced && (centres > 0 || !cc.uniform_when_absent) {
            class_balanced_weights(batch * hw - centres, centres, cc.beta_cb)?
        } else {
            [1.0, 1.0]
        });
    }
    for s in samples {
        for (k, w) in class_w.iter().enumerate() {
            let plane = &s.heatmap.data()[k * hw..(k + 1) * hw];
            for &v in plane {
                heat.push(v);
                y2.push(if v == 1.0 { 1.0 } else { 0.0 });
                w_cls.push(if v == 1.0 { w[1] } else { w[0] });
            }
        }
    }
    let la = column(tape, outputs.objectness, 0, n)?;
    let lp = column(tape, outputs.objectness, 1, n)?;
    let dir = dirichlet_on_tape(tape, la, lp)?;

    let theta = theta_on_tape(tape, &dir, &y2)?;
    let theta = weighted_sum(tape, theta, w_cls.clone(), inv_b)?;
    let kl = kl_on_tape(tape, &dir, &y2)?;
    let kl = weighted_sum(tape, kl, w_cls, inv_b)?;
    br.l_theta = tape.value(theta).item();
    br.l_kl = tape.value(kl).item();
    let kl_scaled = tape.scale(kl, lambda_cls)?;
    let mut cls = tape.add(theta, kl_scaled)?;

    let presence = presence_on_tape(tape, &dir)?;
    if cc.focal {
        let focal = focal_on_tape(tape, presence, &heat, cc.zeta, cc.eta)?;
        let focal = tape.sum(focal)?;
        let focal = tape.scale(focal, inv_b)?;
        br.l_focal_neg = tape.value(focal).item();
        cls = tape.add(cls, focal)?;
    }
    if cc.uncertainty_topk {
        let strength = tape.value(dir.strength).data();
        let groups: Vec<Vec<usize>> = if cc.topk_per_class {
            (0..classes)
                .map(|k| (0..batch).flat_map(|b| ((b * classes + k) * hw)..((b * classes + k + 1) * hw)).collect())
                .collect()
        } else {
            vec![(0..n).collect()]
        };
        let (mut idx, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for group in groups {
            let unc: Vec<f64> = group.iter().map(|&i| 2.0 / strength[i]).collect();
            let k = ((cc.n_cls_fraction * group.len() as f64).round() as usize).max(1);
            let chosen = topk_indices(&unc, k);
            let w = 1.0 / chosen.len() as f64;
            for c in chosen {
                idx.push(group[c]);
                targets.push(heat[group[c]]);
                weights.push(w);
            }
        }
        let un = selected_abs_on_tape(tape, presence, &idx, &targets, &weights)?;
        br.l_un_cls = tape.value(un).item();
        let un = tape.scale(un, cc.lambda_un_cls)?;
        cls = tape.add(cls, un)?;
    }

    // ---- width / height regression over the dense grid ----
    let m = batch * hw;
    let mut reg_weights = Vec::with_capacity(m);
    let mut active = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        match kappa1(s.object_pixels.len(), rc.n_obj_max) {
            Some(k1) => {
                let size_w = &s.size.data()[..hw];
                reg_weights.extend(size_w.iter().map(|&y| if y > 0.0 { k1 } else { rc.kappa2 }));
                active.extend(b * hw..(b + 1) * hw);
            }
            None => reg_weights.extend(std::iter::repeat_n(0.0, hw)),
        }
    }
    let mut dims = Vec::with_capacity(2);
    for d in 0..2 {
        let y: Vec<f64> = samples.iter().flat_map(|s| s.size.data()[d * hw..(d + 1) * hw].iter().copied()).collect();
        let mut raw = [outputs.wh; 4];
        for (c, r) in raw.iter_mut().enumerate() {
            *r = plane(tape, outputs.wh, 4 * d + c, m)?;
        }
        let nig = nig_on_tape(tape, raw)?;
        let (nll, reg) = nig_terms_on_tape(tape, &nig, &y)?;
        let nll = weighted_sum(tape, nll, reg_weights.clone(), inv_b)?;
        let reg = weighted_sum(tape, reg, reg_weights.clone(), inv_b)?;
        let (l_nll, l_reg) = (tape.value(nll).item(), tape.value(reg).item());
        let reg_scaled = tape.scale(reg, rc.lambda_w)?;
        let mut total = tape.add(nll, reg_scaled)?;
        let mut l_un = 0.0;
        if rc.uncertainty_topk && !active.is_empty() {
            let (v, a, be) = (tape.value(nig.v).data(), tape.value(nig.alpha).data(), tape.value(nig.beta).data());
            let unc: Vec<f64> = active.iter().map(|&i| (be[i] / (v[i] * (a[i] - 1.0))).sqrt()).collect();
            let chosen: Vec<usize> = topk_indices(&unc, rc.n_w).into_iter().map(|c| active[c]).collect();
            let targets: Vec<f64> = chosen.iter().map(|&i| y[i]).collect();
            let weights = vec![1.0 / chosen.len() as f64; chosen.len()];
            let un = selected_abs_on_tape(tape, nig.gamma, &chosen, &targets, &weights)?;
            l_un = tape.value(un).item();
            let un = tape.scale(un, rc.lambda_un_reg)?;
            total = tape.add(total, un)?;
        }
        dims.push((total, l_nll, l_reg, l_un));
    }
    (br.l_nll_w, br.l_reg_w, br.l_un_w) = (dims[0].1, dims[0].2, dims[0].3);
    (br.l_nll_h, br.l_reg_h, br.l_un_h) = (dims[1].1, dims[1].2, dims[1].3);

    // ---- offsets: L1 averaged over gathered entries ----
    let (mut idx, mut targets) = (Vec::new(), Vec::new());
    for (b, s) in samples.iter().enumerate() {
        for c in 0..OFFSET_CHANNELS {
            for &p in &s.object_pixels {
                idx.push((b * OFFSET_CHANNELS + c) * hw + p);
                targets.push(s.offset.data()[c * hw + p]);
            }
        }
    }
    let off = if idx.is_empty() {
        None
    } else {
        let flat = tape.reshape(outputs.offset, &[batch * OFFSET_CHANNELS * hw])?;
        let weights = vec![1.0 / idx.len() as f64; idx.len()];
        let off = selected_abs_on_tape(tape, flat, &idx, &targets, &weights)?;
        br.l_off = tape.value(off).item();
        Some(off)
    };

    let hwt = &config.head_weights;
    let mut total = tape.scale(cls, hwt.cls)?;
    for (&(var, ..), weight) in dims.iter().zip([hwt.w, hwt.h]) {
        let t = tape.scale(var, weight)?;
        total = tape.add(total, t)?;
    }
    if let Some(off) = off {
        let t = tape.scale(off, hwt.off)?;
        total = tape.add(total, t)?;
    }
    br.total = tape.value(total).item();
    Ok(LossOutput { total, breakdown: br })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::nig_from_raw;
    use crate::evidential::inverse_softplus;
    use proptest::prelude::*;

    #[test]
    fn theta_example_uses_digamma_recurrence() {
        let (theta, _) = evidential_class_terms(&[[1.0, 100.0]], &[[0.0, 1.0]]).unwrap();
        assert!((theta[0] - 0.01).abs() < 1e-9, "{}", theta[0]);
    }

    #[test]
    fn kl_examples() {
        assert!(kl_term([1.0, 1.0]).abs() < 1e-12);
        assert!((kl_term([2.0, 1.0]) - (std::f64::consts::LN_2 - 0.5)).abs() < 1e-12);
        assert!((kl_term([2.0, 1.0]) - 0.1931).abs() < 1e-4);
    }

    #[test]
    fn non_onehot_rejected() {
        assert!(evidential_class_terms(&[[1.0, 1.0]], &[[0.5, 0.5]]).is_err());
        assert!(evidential_class_terms(&[[1.0, 1.0]], &[[1.0, 1.0]]).is_err());
    }

    #[test]
    fn class_balanced_examples() {
        assert_eq!(class_balanced_weights(100, 100, 0.99).unwrap(), [1.0, 1.0]);
        let w = class_balanced_weights(30000, 20, 0.99).unwrap();
        assert!((w[0] - 0.3081).abs() < 1e-4 && (w[1] - 1.6919).abs() < 1e-4, "{w:?}");
        assert_eq!(class_balanced_weights(1024, 0, 0.99).unwrap(), [2.0, 0.0]);
        assert!(class_balanced_weights(0, 0, 0.99).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_negative(1.0, 0.7, 2.0, 4.0), 0.0);
        assert!((focal_negative(0.0, 0.5, 2.0, 4.0) - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(focal_negative(0.0, 0.0, 2.0, 4.0) < 1e-20);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_uncertainty_mse(&[0.0, 0.0], &[3.0, 1.0], &[0.9, 0.1], 1).unwrap(), 3.0);
        assert_eq!(topk_uncertainty_mse(&[1.0, 2.0], &[1.0, 2.0], &[0.3, 0.2], 2).unwrap(), 0.0);
        assert_eq!(topk_uncertainty_mse(&[0.0, 0.0], &[3.0, 1.0], &[0.9, 0.1], 10).unwrap(), 2.0);
        assert!(topk_uncertainty_mse(&[], &[], &[], 1).is_err());
        assert_eq!(topk_indices(&[0.5, 0.7, 0.5, 0.7], 3), vec![1, 3, 0]);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa1(50, 50), Some(0.0));
        assert!((kappa1(1, 50).unwrap() - 99f64.ln()).abs() < 1e-15);
        assert!((kappa1(1, 50).unwrap() - 4.595).abs() < 1e-3);
        assert_eq!(kappa1(0, 50), None);
        assert_eq!(kappa1(500, 50), Some((1.0f64 / 99.0).ln()));
        let w = regression_weights(&[0.0, 3.0, 0.0], 2, 50, 1e-3).unwrap();
        assert_eq!(w, vec![1e-3, (98.0f64 / 2.0).ln(), 1e-3]);
    }

    #[test]
    fn nig_examples() {
        let s = NigState {
            gamma: 0.0,
            v: 1.0,
            alpha: 1.0 + 1e-12,
            beta: 1.0,
        };
        assert!((nig_nll(&s, 0.0) - 4f64.ln()).abs() < 1e-6);
        assert_eq!(nig_reg(&s, 0.0), 0.0);
        let s = NigState {
            gamma: 1.0,
            v: 1.0,
            alpha: 2.0,
            beta: 1.0,
        };
        assert_eq!(nig_reg(&s, 3.0), 8.0);
    }

    #[test]
    fn nig_nll_matches_student_t_density() {
        // The NIG marginal is Student-t with 2α dof, location γ, scale² β(1+v)/(vα).
        let s = nig_from_raw([0.7, inverse_softplus(2.5), inverse_softplus(1.8), inverse_softplus(0.6)]).unwrap();
        let y = 1.9;
        let nu = 2.0 * s.alpha;
        let scale2 = s.beta * (1.0 + s.v) / (s.v * s.alpha);
        let z = (y - s.gamma) * (y - s.gamma) / scale2;
        let log_pdf = lgamma((nu + 1.0) / 2.0) - lgamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
            - (nu + 1.0) / 2.0 * (1.0 + z / nu).ln();
        assert!((nig_nll(&s, y) + log_pdf).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn class_weights_sum_to_two(n1 in 0usize..100_000, n2 in 0usize..1000) {
            prop_assume!(n1 + n2 > 0);
            let w = class_balanced_weights(n1, n2, 0.99).unwrap();
            prop_assert!((w[0] + w[1] - 2.0).abs() <= 1e-9);
        }

        #[test]
        fn rarer_class_weighted_higher(n2 in 1usize..500, extra in 1usize..50_000) {
            let w = class_balanced_weights(n2 + extra, n2, 0.99).unwrap();
            prop_assert!(w[1] > w[0]);
        }

        #[test]
        fn kl_non_negative_and_zero_only_at_uniform(a in 1.0f64..50.0, b in 1.0f64..50.0) {
            let kl = kl_term([a, b]);
            prop_assert!(kl >= -1e-12);
            if (a - 1.0).abs() > 1e-3 || (b - 1.0).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn focal_decreases_in_heatmap(p in 0.01f64..0.99, y1 in 0.0f64..0.98, dy in 0.001f64..0.02) {
            prop_assert!(focal_negative(y1 + dy, p, 2.0, 4.0) < focal_negative(y1, p, 2.0, 4.0));
        }

        #[test]
        fn topk_permutation_invariant(
            data in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40),
            k in 1usize..40,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = data.len();
            // distinct uncertainties
            let unc: Vec<f64> = (0..n).map(|i| (i as f64 * 0.6180339887).fract()).collect();
            let vals: Vec<f64> = data.iter().map(|d| d.0).collect();
            let tgts: Vec<f64> = data.iter().map(|d| d.1).collect();
            let a = topk_uncertainty_mse(&vals, &tgts, &unc, k).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pv: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let pt: Vec<f64> = perm.iter().map(|&i| tgts[i]).collect();
            let pu: Vec<f64> = perm.iter().map(|&i| unc[i]).collect();
            let b = topk_uncertainty_mse(&pv, &pt, &pu, k).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
