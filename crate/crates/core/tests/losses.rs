mod support;

use evidet::autograd::{Tape, Var};
use evidet::losses::{final_loss, LossBreakdown, LossConfig};
use evidet::model::HeadOutputs;
use evidet::targets::TrainingSample;
use evidet::Tensor;
use support::{close, oracle_loss, random_batch, random_heads, RawHeads};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CLASSES: usize = 3;
const GRID: usize = 8;

fn on_tape(raw: &RawHeads, samples: &[&TrainingSample], cfg: &LossConfig, lambda: f64) -> (Tape, HeadOutputs, Var, LossBreakdown) {
    let b = samples.len();
    let mut tape = Tape::new();
    let objectness = tape.param(Tensor::new(vec![b * CLASSES * GRID * GRID, 2], raw.objectness.clone()).unwrap());
    let wh = tape.param(Tensor::new(vec![b, 8, GRID, GRID], raw.wh.clone()).unwrap());
    let offset = tape.param(Tensor::new(vec![b, 2, GRID, GRID], raw.offset.clone()).unwrap());
    let heads = HeadOutputs { objectness, wh, offset };
    let out = final_loss(&mut tape, &heads, samples, cfg, lambda).unwrap();
    (tape, heads, out.total, out.breakdown)
}

fn assert_matches(got: &LossBreakdown, want: &LossBreakdown, tol: f64, ctx: &str) {
    for ((name, g), w) in LossBreakdown::FIELDS.iter().zip(got.values()).zip(want.values()) {
        assert!(close(g, w, tol), "{ctx}: {name} tape {g} oracle {w}");
    }
}

#[test]
fn tape_objective_matches_reference_on_random_grids() {
    let cfg = LossConfig::default();
    for case in 0..20u64 {
        let batch = random_batch(100 + case, 2, GRID, CLASSES);
        let refs: Vec<&TrainingSample> = batch.iter().collect();
        let raw = random_heads(200 + case, &refs);
        let lambda = 0.06 * case as f64 / 19.0;
        let (tape, _, total, br) = on_tape(&raw, &refs, &cfg, lambda);
        let total = tape.value(total).item();
        let want = oracle_loss(&raw, &refs, &cfg, lambda);
        assert_matches(&br, &want, 1e-9, &format!("case {case}"));
        assert!(close(total, want.total, 1e-9));
    }
}

#[test]
fn ablation_switches_match_reference() {
    let mut variants = Vec::new();
    let mut c = LossConfig::default();
    c.classification.class_balanced = false;
    variants.push(c);
    let mut c = LossConfig::default();
    c.classification.focal = false;
    c.classification.uncertainty_topk = false;
    c.regression.uncertainty_topk = false;
    variants.push(c);
    let mut c = LossConfig::default();
    c.classification.topk_per_class = false;
    c.regression.n_w = 3;
    variants.push(c);
    let mut c = LossConfig::default();
    c.classification.uniform_when_absent = true;
    variants.push(c);
    for (v, cfg) in variants.iter().enumerate() {
        for case in 0..5u64 {
            let batch = random_batch(300 + case, 3, GRID, CLASSES);
            let refs: Vec<&TrainingSample> = batch.iter().collect();
            let raw = random_heads(400 + case, &refs);
            let (_, _, _, br) = on_tape(&raw, &refs, cfg, 0.03);
            assert_matches(&br, &oracle_loss(&raw, &refs, cfg, 0.03), 1e-9, &format!("variant {v} case {case}"));
        }
    }
}

#[test]
fn absent_class_weighting() {
    use evidet::synth::{ObjectAnnotation, SceneAnnotation};
    // classes 1 and 2 have no centre, so their planes are all background
    let ann = SceneAnnotation {
        id: "absent".into(),
        width: 32,
        height: 32,
        objects: vec![ObjectAnnotation { cls: 0, cx: 13.0, cy: 17.0, w: 8.0, h: 12.0 }],
        ood_objects: vec![],
    };
    let s = evidet::targets::build_targets(Tensor::zeros(&[1, 32, 32]), &ann, CLASSES, 4).unwrap();
    let refs = [&s];
    let hw = GRID * GRID;
    let raw = RawHeads {
        objectness: vec![0.0; CLASSES * hw * 2],
        wh: vec![0.0; 8 * hw],
        offset: vec![0.0; 2 * hw],
    };
    let spec = LossConfig::default();
    let mut uniform = spec.clone();
    uniform.classification.uniform_when_absent = true;
    let a = oracle_loss(&raw, &refs, &spec, 0.0);
    let b = oracle_loss(&raw, &refs, &uniform, 0.0);
    // at zero logits every pixel costs psi(S) - psi(alpha) = psi(2*a) - psi(a)
    let a0 = evidet::special::softplus(0.0) + 1.0;
    let per_pixel = evidet::special::digamma(2.0 * a0) - evidet::special::digamma(a0);
    let absent = 2.0 * (2.0 - 1.0) * hw as f64 * per_pixel;
    assert!(close(a.l_theta - b.l_theta, absent, 1e-12), "{} vs {absent}", a.l_theta - b.l_theta);
    let (_, _, _, br) = on_tape(&raw, &refs, &uniform, 0.0);
    assert_matches(&br, &b, 1e-9, "uniform when absent");
}

#[test]
fn single_object_toy_grid() {
    use evidet::synth::{ObjectAnnotation, SceneAnnotation};
    let ann = SceneAnnotation {
        id: "one".into(),
        width: 32,
        height: 32,
        objects: vec![ObjectAnnotation { cls: 0, cx: 13.0, cy: 17.0, w: 8.0, h: 12.0 }],
        ood_objects: vec![],
    };
    let s = evidet::targets::build_targets(Tensor::zeros(&[1, 32, 32]), &ann, 1, 4).unwrap();
    assert_eq!(s.object_pixels, vec![4 * 8 + 3]);
    let refs = [&s];
    let hw = GRID * GRID;
    let raw = RawHeads {
        objectness: vec![0.0; hw * 2],
        wh: vec![0.0; 8 * hw],
        offset: vec![0.0; 2 * hw],
    };
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let objectness = tape.param(Tensor::zeros(&[hw, 2]));
    let wh = tape.param(Tensor::zeros(&[1, 8, GRID, GRID]));
    let offset = tape.param(Tensor::zeros(&[1, 2, GRID, GRID]));
    let out = final_loss(&mut tape, &HeadOutputs { objectness, wh, offset }, &refs, &cfg, 0.0).unwrap();
    assert_matches(&out.breakdown, &oracle_loss(&raw, &refs, &cfg, 0.0), 1e-9, "toy");
    // offsets are (13/4 - 3, 17/4 - 4) against zero predictions
    assert!((out.breakdown.l_off - 0.25).abs() < 1e-12);
}

#[test]
fn gradient_agrees_with_reference_differences() {
    let cfg = LossConfig::default();
    let batch = random_batch(7, 2, GRID, CLASSES);
    let refs: Vec<&TrainingSample> = batch.iter().collect();
    let raw = random_heads(8, &refs);
    let (tape, heads, total, _) = on_tape(&raw, &refs, &cfg, 0.05);
    let grads = tape.backward(total).unwrap();
    let h = 1e-6;
    let probe = |field: fn(&mut RawHeads) -> &mut Vec<f64>, i: usize| {
        let mut plus = RawHeads { objectness: raw.objectness.clone(), wh: raw.wh.clone(), offset: raw.offset.clone() };
        let mut minus = RawHeads { objectness: raw.objectness.clone(), wh: raw.wh.clone(), offset: raw.offset.clone() };
        field(&mut plus)[i] += h;
        field(&mut minus)[i] -= h;
        (oracle_loss(&plus, &refs, &cfg, 0.05).total - oracle_loss(&minus, &refs, &cfg, 0.05).total) / (2.0 * h)
    };
    let g_obj = grads.get(heads.objectness).unwrap().data().to_vec();
    let g_wh = grads.get(heads.wh).unwrap().data().to_vec();
    for i in (0..g_obj.len()).step_by(37) {
        let fd = probe(|r| &mut r.objectness, i);
        assert!((fd - g_obj[i]).abs() <= 1e-5 * fd.abs().max(1.0), "objectness[{i}] {fd} vs {}", g_obj[i]);
    }
    for i in (0..g_wh.len()).step_by(29) {
        let fd = probe(|r| &mut r.wh, i);
        assert!((fd - g_wh[i]).abs() <= 1e-5 * fd.abs().max(1.0), "wh[{i}] {fd} vs {}", g_wh[i]);
    }
}
