use std::time::Instant;

use ynet_core::layers::Mode;
use ynet_core::model::{ArchConfig, YNetModel};
use ynet_core::optim::Adam;
use ynet_core::{Rng, Tensor};

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let hits = probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn tiny_model_memorizes_twelve_noise_images() {
    let start = Instant::now();
    let mut rng = Rng::new(12, 0);
    let mut model = YNetModel::new(ArchConfig::tiny(3), &mut rng).unwrap();
    let x = Tensor::new(vec![12, 32, 32, 3], (0..12 * 32 * 32 * 3).map(|_| rng.uniform()).collect()).unwrap();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut onehot = Tensor::zeros(&[12, 3]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * 3 + l] = 1.0;
    }
    let mut adam = Adam::new(1e-3);
    let mut first_full = None;
    for step in 0..300 {
        let out = model.train_step(&mut adam, &x, &onehot, &mut rng.derive(step + 1)).unwrap();
        if first_full.is_none() && accuracy(&out.probs, &labels) == 1.0 {
            first_full = Some(step);
        }
    }
    let eval = model.predict(&x).unwrap();
    let train_acc = accuracy(&model.forward(&x, Mode::Train, &mut rng).unwrap().probs, &labels);
    println!(
        "first 100% train-mode batch at step {first_full:?}; eval acc {}; train-mode acc {train_acc}; {:.1}s",
        accuracy(&eval, &labels),
        start.elapsed().as_secs_f64()
    );
    assert_eq!(accuracy(&eval, &labels), 1.0);
}
