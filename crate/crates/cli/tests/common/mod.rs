#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ynet_core::data::{write_ppm, RgbImage};
use ynet_core::Rng;

pub const CLASSES: [(&str, [u8; 3]); 3] = [("alpha", [200, 40, 40]), ("beta", [40, 200, 40]), ("gamma", [40, 40, 200])];

/// `per_class` noisy 32x32 images around one base colour per class.
pub fn synthetic_dataset(root: &Path, per_class: usize, seed: u64) {
    let mut rng = Rng::new(seed, 0);
    for (name, base) in CLASSES {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let pixels = (0..32 * 32)
                .flat_map(|_| base.map(|c| (f64::from(c) + rng.uniform_range(-30.0, 30.0)).clamp(0.0, 255.0) as u8))
                .collect();
            write_ppm(dir.join(format!("{i:03}.ppm")), &RgbImage::new(32, 32, pixels).unwrap()).unwrap();
        }
    }
}

pub fn ynet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ynet"))
        .args(args)
        .env("YNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn tiny_train_args<'a>(data: &'a Path, out: &'a Path, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--tiny",
        "--data-root",
        path_str(data),
        "--out-dir",
        path_str(out),
        "--epochs",
        epochs,
        "--batch-size",
        "4",
        "--seed",
        "5",
    ]
}

pub fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
