//! Shared helpers for the integration tests: a loop-by-loop reference for the
//! training objective and random toy batches to feed it.

#![allow(dead_code, clippy::needless_range_loop)]

use evidet::losses::{LossBreakdown, LossConfig};
use evidet::special::{digamma, lgamma, softplus};
use evidet::synth::{ObjectAnnotation, SceneAnnotation};
use evidet::targets::{build_targets, TrainingSample};
use evidet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-4;
const P_CLAMP: f64 = 1e-7;

/// Raw head outputs for one batch, laid out as the model emits them.
pub struct RawHeads {
    /// `[B·K·hw, 2]` row-major.
    pub objectness: Vec<f64>,
    /// `[B, 8, h, w]`.
    pub wh: Vec<f64>,
    /// `[B, 2, h, w]`.
    pub offset: Vec<f64>,
}

fn cb_effective(n: usize, beta: f64) -> f64 {
    if n == 0 {
        0.0
    } else {
        (1.0 - beta) / (1.0 - beta.powi(n as i32))
    }
}

/// Indices of the `k` largest values, ties to the lower index.
fn top(values: &[(f64, usize)], k: usize) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Straight-line evaluation of every term of the objective.
pub fn oracle_loss(raw: &RawHeads, samples: &[&TrainingSample], cfg: &LossConfig, lambda_cls: f64) -> LossBreakdown {
    let grid = samples[0].grid;
    let (bsz, classes, hw) = (samples.len(), grid.classes, grid.pixels());
    let nb = bsz as f64;
    let cc = &cfg.classification;
    let rc = &cfg.regression;
    let mut out = LossBreakdown::default();

    // classification
    let mut presence = vec![0.0; bsz * classes * hw];
    let mut unc = vec![0.0; bsz * classes * hw];
    let mut weights = Vec::new();
    for k in 0..classes {
        let mut n2 = 0;
        for s in samples {
            for p in 0..hw {
                if s.heatmap.data()[k * hw + p] == 1.0 {
                    n2 += 1;
                }
            }
        }
        let n1 = bsz * hw - n2;
        weights.push(if cc.class_balanced && (n2 > 0 || !cc.uniform_when_absent) {
            let (e1, e2) = (cb_effective(n1, cc.beta_cb), cb_effective(n2, cc.beta_cb));
            (2.0 * e1 / (e1 + e2), 2.0 * e2 / (e1 + e2))
        } else {
            (1.0, 1.0)
        });
    }
    for (b, s) in samples.iter().enumerate() {
        for k in 0..classes {
            let heat = &s.heatmap.data()[k * hw..(k + 1) * hw];
            let (w1, w2) = weights[k];
            for p in 0..hw {
                let row = (b * classes + k) * hw + p;
                let a1 = softplus(raw.objectness[2 * row]) + 1.0;
                let a2 = softplus(raw.objectness[2 * row + 1]) + 1.0;
                let strength = a1 + a2;
                presence[row] = a2 / strength;
                unc[row] = 2.0 / strength;
                let centre = heat[p] == 1.0;
                let w = if centre { w2 } else { w1 };

                let a_true = if centre { a2 } else { a1 };
                out.l_theta += w * (digamma(strength) - digamma(a_true)) / nb;

                // the true-class evidence is replaced by 1
                let at = if centre { [a1, 1.0] } else { [1.0, a2] };
                let st = at[0] + at[1];
                let mut kl = lgamma(st) - lgamma(2.0);
                for a in at {
                    kl += -lgamma(a) + (a - 1.0) * (digamma(a) - digamma(st));
                }
                out.l_kl += w * kl / nb;

                if cc.focal && !centre {
                    let q = presence[row].clamp(P_CLAMP, 1.0 - P_CLAMP);
                    out.l_focal_neg += -(1.0 - heat[p]).powf(cc.eta) * q.powf(cc.zeta) * (1.0 - q).ln() / nb;
                }
            }
        }
    }
    if cc.uncertainty_topk {
        let groups: Vec<Vec<usize>> = if cc.topk_per_class {
            (0..classes)
                .map(|k| {
                    let mut g = Vec::new();
                    for b in 0..bsz {
                        for p in 0..hw {
                            g.push((b * classes + k) * hw + p);
                        }
                    }
                    g
                })
                .collect()
        } else {
            vec![(0..bsz * classes * hw).collect()]
        };
        for g in groups {
            let k = ((cc.n_cls_fraction * g.len() as f64).round() as usize).max(1);
            let scored: Vec<(f64, usize)> = g.iter().map(|&r| (unc[r], r)).collect();
            let chosen = top(&scored, k);
            let mut acc = 0.0;
            for &r in &chosen {
                let (b, rest) = (r / (classes * hw), r % (classes * hw));
                let y = samples[b].heatmap.data()[rest];
                acc += (y - presence[r]).abs();
            }
            out.l_un_cls += acc / chosen.len() as f64;
        }
    }

    // width and height
    for d in 0..2 {
        let (mut nll_sum, mut reg_sum) = (0.0, 0.0);
        let mut pool: Vec<(f64, usize)> = Vec::new();
        let mut gamma_at = vec![0.0; bsz * hw];
        let mut target_at = vec![0.0; bsz * hw];
        for (b, s) in samples.iter().enumerate() {
            let n = s.object_pixels.len();
            let kappa1 = if n == 0 {
                None
            } else {
                let nc = n.min(rc.n_obj_max) as f64;
                Some(((2.0 * rc.n_obj_max as f64 - nc) / nc).ln())
            };
            for p in 0..hw {
                let ch = |c: usize| raw.wh[(b * 8 + 4 * d + c) * hw + p];
                let gamma = ch(0);
                let v = softplus(ch(1)).max(FLOOR);
                let alpha = (softplus(ch(2)) + 1.0).max(1.0 + FLOOR);
                let beta = softplus(ch(3)).max(FLOOR);
                let y = s.size.data()[d * hw + p];
                gamma_at[b * hw + p] = gamma;
                target_at[b * hw + p] = y;
                let Some(k1) = kappa1 else { continue };
                let w = if s.size.data()[p] > 0.0 { k1 } else { rc.kappa2 };
                let omega = 2.0 * beta * (1.0 + v);
                let nll = 0.5 * (std::f64::consts::PI / v).ln() - alpha * omega.ln()
                    + (alpha + 0.5) * ((y - gamma).powi(2) * v + omega).ln()
                    + lgamma(alpha)
                    - lgamma(alpha + 0.5);
                nll_sum += w * nll;
                reg_sum += w * (y - gamma).abs() * (2.0 * v + alpha);
                pool.push(((beta / (v * (alpha - 1.0))).sqrt(), b * hw + p));
            }
        }
        let mut un = 0.0;
        if rc.uncertainty_topk && !pool.is_empty() {
            let chosen = top(&pool, rc.n_w);
            un = chosen.iter().map(|&i| (target_at[i] - gamma_at[i]).abs()).sum::<f64>() / chosen.len() as f64;
        }
        let (nll, reg) = (nll_sum / nb, reg_sum / nb);
        if d == 0 {
            (out.l_nll_w, out.l_reg_w, out.l_un_w) = (nll, reg, un);
        } else {
            (out.l_nll_h, out.l_reg_h, out.l_un_h) = (nll, reg, un);
        }
    }

    // offsets
    let (mut acc, mut count) = (0.0, 0usize);
    for (b, s) in samples.iter().enumerate() {
        for c in 0..2 {
            for &p in &s.object_pixels {
                acc += (s.offset.data()[c * hw + p] - raw.offset[(b * 2 + c) * hw + p]).abs();
                count += 1;
            }
        }
    }
    if count > 0 {
        out.l_off = acc / count as f64;
    }

    let cls = out.l_theta
        + lambda_cls * out.l_kl
        + out.l_focal_neg
        + cc.lambda_un_cls * out.l_un_cls;
    let w = out.l_nll_w + rc.lambda_w * out.l_reg_w + rc.lambda_un_reg * out.l_un_w;
    let h = out.l_nll_h + rc.lambda_w * out.l_reg_h + rc.lambda_un_reg * out.l_un_h;
    let hwt = &cfg.head_weights;
    out.total = hwt.cls * cls + hwt.w * w + hwt.h * h + hwt.off * out.l_off;
    out
}

/// A random annotated scene of `size × size` pixels with up to `max_objects`
/// objects (possibly none).
pub fn random_scene(rng: &mut ChaCha8Rng, size: usize, classes: usize, max_objects: usize) -> SceneAnnotation {
    let n = rng.random_range(0..=max_objects);
    let s = size as f64;
    let objects = (0..n)
        .map(|_| ObjectAnnotation {
            cls: rng.random_range(0..classes),
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            w: rng.random_range(2.0..s / 2.0),
            h: rng.random_range(2.0..s / 2.0),
        })
        .collect();
    SceneAnnotation {
        id: "toy".into(),
        width: size,
        height: size,
        objects,
        ood_objects: Vec::new(),
    }
}

/// Targets for a random batch on a `grid × grid` output grid (stride 4).
pub fn random_batch(seed: u64, batch: usize, grid: usize, classes: usize) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = grid * 4;
    (0..batch)
        .map(|_| {
            let ann = random_scene(&mut rng, size, classes, 4);
            build_targets(Tensor::zeros(&[1, size, size]), &ann, classes, 4).unwrap()
        })
        .collect()
}

/// Random head outputs matching `samples`.
pub fn random_heads(seed: u64, samples: &[&TrainingSample]) -> RawHeads {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = samples[0].grid;
    let (b, hw) = (samples.len(), g.pixels());
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    RawHeads {
        objectness: draw(b * g.classes * hw * 2, -4.0, 4.0),
        wh: draw(b * 8 * hw, -3.0, 3.0),
        offset: draw(b * 2 * hw, -0.5, 1.5),
    }
}

/// `|a − b| ≤ tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
