use evidet::autograd::Tape;
use evidet::dataset::{Dataset, Split, SynthSpec};
use evidet::losses::{final_loss, LossConfig};
use evidet::model::{forward, predict, predictions, stack_images, ModelConfig, ModelParams};
use evidet::synth::SceneConfig;
use evidet::targets::TrainingSample;
use evidet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: [4, 6, 6, 6],
        head_channels: 4,
        mlp_hidden: 8,
        ..ModelConfig::default()
    }
}

fn small_data() -> Dataset {
    Dataset::from_spec(&SynthSpec {
        n_train: 4,
        n_val: 3,
        ood_frac: 0.0,
        seed: 5,
        scene: SceneConfig {
            width: 64,
            height: 64,
            max_objects: 4,
        },
    })
    .unwrap()
}

fn loss_at(cfg: &ModelConfig, params: &ModelParams, batch: &[&TrainingSample]) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(stack_images(&images).unwrap());
    let heads = forward(&mut tape, cfg, &bound, x, None).unwrap();
    final_loss(&mut tape, &heads, batch, &LossConfig::default(), 0.03).unwrap().breakdown.total
}

#[test]
fn backprop_through_the_whole_model_matches_differences() {
    let cfg = small_model();
    let data = small_data();
    let samples = data.training_samples(Split::Train, cfg.classes, 4).unwrap();
    let batch: Vec<&TrainingSample> = samples.iter().take(2).collect();
    let params = ModelParams::init(&cfg, 11).unwrap();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(stack_images(&images).unwrap());
    let heads = forward(&mut tape, &cfg, &bound, x, None).unwrap();
    let out = final_loss(&mut tape, &heads, &batch, &LossConfig::default(), 0.03).unwrap();
    let grads = tape.backward(out.total).unwrap();

    // one scalar from each of ten tensors spread over backbone and heads
    let names = params.names();
    let picks: Vec<usize> = (0..10).map(|i| i * (names.len() - 1) / 9).collect();
    for t in picks {
        let analytic = grads.get(bound.vars[t]).map_or(0.0, |g| g.data()[0]);
        let h = 1e-5;
        let mut plus = params.clone();
        plus.entries_mut()[t].tensor.data_mut()[0] += h;
        let mut minus = params.clone();
        minus.entries_mut()[t].tensor.data_mut()[0] -= h;
        let numeric = (loss_at(&cfg, &plus, &batch) - loss_at(&cfg, &minus, &batch)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-2, "{}: analytic {analytic} numeric {numeric}", names[t]);
    }
}

#[test]
fn zero_weights_give_the_uniform_prior() {
    let cfg = small_model();
    let data = small_data();
    let images: Vec<&Tensor> = data.split(Split::Val).iter().map(|s| &s.image).collect();
    let preds = predict(&cfg, &ModelParams::zeros(&cfg), &images, 2).unwrap();
    let expect = 2.0 / (2.0 + 2.0 * std::f64::consts::LN_2);
    for p in &preds {
        for d in &p.dirichlet {
            assert!((d.uncertainty - expect).abs() < 1e-12);
            assert!((d.uncertainty - 0.5906).abs() < 1e-4);
        }
    }
}

#[test]
fn parameter_count_and_predictions_do_not_depend_on_batch_size() {
    let cfg = small_model();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let layout: usize = cfg.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(params.scalar_count(), layout);
    let data = small_data();
    let images: Vec<&Tensor> = data.split(Split::Val).iter().map(|s| &s.image).collect();
    let one = predict(&cfg, &params, &images, 1).unwrap();
    let all = predict(&cfg, &params, &images, 3).unwrap();
    for (a, b) in one.iter().zip(&all) {
        assert_eq!(a.dirichlet, b.dirichlet);
        assert_eq!(a.nig_w, b.nig_w);
        assert_eq!(a.offset, b.offset);
    }
}

#[test]
fn eval_is_deterministic_and_train_mode_follows_the_seed() {
    let cfg = small_model();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let data = small_data();
    let images: Vec<&Tensor> = data.split(Split::Val).iter().map(|s| &s.image).collect();
    let a = predict(&cfg, &params, &images, 3).unwrap();
    let b = predict(&cfg, &params, &images, 3).unwrap();
    assert_eq!(a[0].dirichlet, b[0].dirichlet);

    let run = |seed: u64| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(stack_images(&images).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = forward(&mut tape, &cfg, &bound, x, Some(&mut rng)).unwrap();
        predictions(&tape, &heads, cfg.classes).unwrap()
    };
    assert_eq!(run(1)[0].dirichlet, run(1)[0].dirichlet);
    assert_ne!(run(1)[0].dirichlet, run(2)[0].dirichlet);
    // only the objectness head sees dropout by default
    assert_eq!(run(1)[0].nig_w, a[0].nig_w);
}
