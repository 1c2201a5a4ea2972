mod common;

use common::uniform;
use resattnet::checkpoint;
use resattnet::data::{normalize, PhantomSpec};
use resattnet::layers::Mode;
use resattnet::train::{adam_step, evaluate, lr_at, train, AdamState, Dataset, LrSchedule, TrainConfig};
use resattnet::{ArchitectureSpec, Model, Shape, Tensor};

#[test]
fn adam_follows_scalar_recurrence_to_minimum() {
    let mut w = Tensor::<f64>::scalar(0.0);
    let mut state = AdamState::new(&[&w]);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let (mut ow, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = Tensor::scalar(2.0 * (w.data()[0] - 3.0));
        adam_step(&mut [&mut w], &[g], &mut state, lr).unwrap();
        let og = 2.0 * (ow - 3.0);
        m = b1 * m + (1.0 - b1) * og;
        v = b2 * v + (1.0 - b2) * og * og;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        ow -= lr * mh / (vh.sqrt() + eps);
        assert!((w.data()[0] - ow).abs() < 1e-12);
    }
    assert!((w.data()[0] - 3.0).abs() < 0.1);
}

#[test]
fn schedule_runs_from_start_to_end_rate() {
    for lr_schedule in [LrSchedule::Cosine, LrSchedule::Linear] {
        let cfg = TrainConfig { epochs: 50, lr_schedule, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert!((lr_at(49, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        let rates: Vec<f64> = (0..50).map(|e| lr_at(e, &cfg).unwrap()).collect();
        assert!(rates.windows(2).all(|p| p[1] <= p[0]));
    }
}

fn tiny_phantoms(n_per_class: usize, seed: u64) -> Dataset<f64> {
    let spec = PhantomSpec { grid: 16, radius_min: 2.0, radius_max: 3.0, seed, ..PhantomSpec::default() };
    let (inputs, labels) = spec
        .generate(n_per_class)
        .unwrap()
        .into_iter()
        .map(|p| {
            let data: Vec<f64> = normalize(&p.volume.data).into_iter().map(f64::from).collect();
            (Tensor::from_vec(Shape::new(1, 1, 16, 16, 16), data).unwrap(), p.label)
        })
        .unzip();
    Dataset::new(inputs, labels).unwrap()
}

fn tiny_model(seed: u64) -> Model<f64> {
    let spec = ArchitectureSpec::preset("micro-resattnet", 0.125).unwrap();
    Model::build(&spec, [16, 16, 16], seed).unwrap()
}

#[test]
fn training_reruns_are_bit_identical() {
    let data = tiny_phantoms(6, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, lr_start: 1e-3, lr_end: 1e-4, seed: 8, ..TrainConfig::default() };
    let run = || {
        let mut m = tiny_model(2);
        let report = train(&mut m, &data, None, &cfg, None, &mut |_| {}).unwrap();
        let eval = evaluate(&m, &data, 5, Mode::Eval).unwrap();
        (report, eval, checkpoint::encode(&m))
    };
    let (r1, e1, c1) = run();
    let (r2, e2, c2) = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1.epochs.iter().map(|e| e.loss).collect::<Vec<_>>()), bits(&r2.epochs.iter().map(|e| e.loss).collect::<Vec<_>>()));
    assert_eq!(bits(&e1.losses), bits(&e2.losses));
    assert_eq!(c1, c2);
}

#[test]
fn evaluation_does_not_depend_on_batching() {
    let data = tiny_phantoms(4, 5);
    let m = tiny_model(6);
    let one = evaluate(&m, &data, 1, Mode::Eval).unwrap();
    let three = evaluate(&m, &data, 3, Mode::Eval).unwrap();
    let all = evaluate(&m, &data, data.len(), Mode::Eval).unwrap();
    for other in [&three, &all] {
        assert_eq!(one.predicted, other.predicted);
        for (a, b) in one.losses.iter().zip(&other.losses) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_restores_identical_logits() {
    let mut m = tiny_model(7);
    for a in m.attention_layers_mut() {
        a.set_gamma(0.3);
    }
    for b in m.buffers_mut() {
        let s = b.shape();
        *b = uniform(s, 17).map(|v| 1.0 + 0.2 * v);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vnet");
    checkpoint::save(&m, &path).unwrap();
    let back: Model<f64> = checkpoint::load(&path).unwrap();
    let x = uniform(Shape::new(3, 1, 16, 16, 16), 18);
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = back.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
