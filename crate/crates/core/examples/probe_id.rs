// temporary probe: per-dimension R2 of the identity encoder
use counterfact_core::encoders::*;
use counterfact_core::synthetic::{generate_dataset, Dataset, GenerateConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenerateConfig {
        n_train: 4000,
        n_test: 400,
        class_frequencies: vec![0.3, 0.3, 0.3, 0.3],
        image_size: 64,
        seed: 21,
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let train = Dataset::load(dir.path(), "train").unwrap();
    let test = Dataset::load(dir.path(), "test").unwrap();
    let tc = EncoderTrainConfig {
        epochs: 6,
        lr: 2e-3,
        min_identity_r2: -10.0,
        min_class_acc: 0.0,
        ..Default::default()
    };
    let bundle = train_encoders(&train, &test, &tc).unwrap();
    println!("pooled R2 = {:.3}", bundle.identity_r2);

    // per-dimension R2
    let s = test.image_size() as f64;
    let names = ["center_r", "center_c", "scale", "sin", "cos"];
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut targets = vec![vec![0.0f64; test.len()]; 5];
    for (i, &ti) in idx.iter().enumerate() {
        let id = test.samples[ti].identity.as_ref().unwrap();
        targets[0][i] = (id.center.0 / s - 0.5) * 8.0;
        targets[1][i] = (id.center.1 / s - 0.5) * 8.0;
        targets[2][i] = (id.scale - 0.75) * 4.0;
        targets[3][i] = id.texture_phase.sin();
        targets[4][i] = id.texture_phase.cos();
    }
    let mut preds = vec![vec![0.0f64; test.len()]; 5];
    for batch in idx.chunks(64) {
        let imgs = test.batch_images(batch);
        let reg = bundle.identity.regress(&imgs);
        for (bi, &ti) in batch.iter().enumerate() {
            for k in 0..5 {
                preds[k][ti] = reg[[bi, k]];
            }
        }
    }
    for k in 0..5 {
        let mean: f64 = targets[k].iter().sum::<f64>() / targets[k].len() as f64;
        let sst: f64 = targets[k].iter().map(|t| (t - mean) * (t - mean)).sum();
        let ssr: f64 = targets[k]
            .iter()
            .zip(preds[k].iter())
            .map(|(t, p)| (t - p) * (t - p))
            .sum();
        println!("{}: R2 = {:.3}", names[k], 1.0 - ssr / sst);
    }
}
