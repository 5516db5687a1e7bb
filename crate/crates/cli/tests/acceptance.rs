//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{path_str, synthetic_dataset, tiny_train_args, ynet};
use ynet_cli::config::ConfigBuilder;
use ynet_core::data::{augment, hflip, rot90, vflip, AugmentPolicy, Sample};
use ynet_core::gradcheck::tiny_arch;
use ynet_core::io::{load_tensor, save_tensor};
use ynet_core::layers::{global_avg_pool, Activation, Conv2d, Mode};
use ynet_core::metrics::{compute_report, ConfusionMatrix};
use ynet_core::model::{ArchConfig, Attention, Checkpoint, YNetModel};
use ynet_core::optim::{Adam, SgdrSchedule};
use ynet_core::{Rng, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

fn full_run_recipe() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let readme = fs::read_to_string(root.join("README.md")).map_err(|e| format!("README.md: {e}"))?;
    ensure(readme.contains("## Full-run recipe"), "README has no full-run recipe section")?;
    ensure(readme.contains("configs/default.conf"), "recipe does not reference configs/default.conf")?;
    let mut b = ConfigBuilder::new();
    b.apply_file(&root.join("configs/default.conf")).map_err(|e| e.to_string())?;
    let cfg = b.build().map_err(|e| e.to_string())?;
    let got = (
        cfg.epochs,
        cfg.batch_size,
        cfg.optimizer.as_str(),
        cfg.loss.as_str(),
        cfg.lr,
        cfg.lr_min,
        cfg.restart_period,
        cfg.input_size,
        cfg.augment,
    );
    let want = (200, 32, "adam", "categorical_crossentropy", 1e-3, 1e-6, 50.0, 224, true);
    ensure(got == want, format!("default.conf resolves to {got:?}, expected {want:?}"))?;
    Ok("accuracy replaced by property suites; recipe in README, default.conf holds reference hyperparameters".into())
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let o = ynet(&["gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    ensure(o.status.success(), format!("gradcheck failed:\n{out}{}", String::from_utf8_lossy(&o.stderr)))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    let summary = out.lines().last().unwrap_or_default().to_string();

    // negative control: a 1% error in the conv backward must be caught
    let bad = ynet(&["gradcheck", "--corrupt-conv-backward"]);
    let err = String::from_utf8_lossy(&bad.stderr).into_owned();
    ensure(bad.status.code() == Some(4), "corrupted conv backward was not rejected")?;
    ensure(err.contains("conv"), format!("failure does not name conv: {err}"))?;
    Ok(format!("{summary}; wall {secs:.1}s; corrupted conv rejected"))
}

fn shape_conformance() -> Outcome {
    let mut rng = Rng::new(0, 0);
    let model = YNetModel::new(ArchConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let x = uniform(&[1, 224, 224, 3], &mut rng);
    let trace = model.forward(&x, Mode::Eval, &mut rng).map_err(|e| e.to_string())?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for branch in 1..=2 {
        for (k, c) in [64, 128, 256, 512].into_iter().enumerate() {
            let side = 224 >> (k + 1);
            expected.push((format!("branch{branch}.block{}", k + 1), vec![1, side, side, c]));
        }
    }
    expected.push(("fusam.attention".into(), vec![1, 112, 112, 1]));
    expected.push(("gap".into(), vec![1, 1024]));
    expected.push(("logits".into(), vec![1, 30]));
    for (name, shape) in &expected {
        let got = trace.shape_of(name).ok_or(format!("{name} missing from trace"))?;
        ensure(got == shape.as_slice(), format!("{name}: {got:?} != {shape:?}"))?;
    }
    ensure(trace.logits.shape() == [1, 30], "logits tensor shape")?;
    ensure(trace.embedding.shape() == [1, 1024], "embedding tensor shape")?;
    Ok(format!("{} named shapes match", expected.len()))
}

/// Independent dual-branch path with no attention at all.
fn attention_free_logits(model: &YNetModel, x: &Tensor) -> Tensor {
    let mut feats = Vec::new();
    for branch in [&model.branch1, &model.branch2] {
        let mut f = x.clone();
        for block in &branch.blocks {
            f = block.forward(&f, Mode::Eval).unwrap().0;
        }
        feats.push(f);
    }
    let pooled = global_avg_pool(&Tensor::concat_last(&[&feats[0], &feats[1]]).unwrap()).unwrap();
    let h = &model.head;
    let a1 = Activation::Relu.forward(&h.dense1.forward(&pooled).unwrap());
    let a2 = Activation::Relu.forward(&h.dense2.forward(&a1).unwrap());
    h.dense3.forward(&a2).unwrap()
}

fn fusam_identity_and_damping() -> Outcome {
    let mut rng = Rng::new(1, 0);
    let mut model = YNetModel::new(ArchConfig::tiny(3), &mut rng).map_err(|e| e.to_string())?;
    let x = uniform(&[3, 32, 32, 3], &mut rng);

    model.attention = Attention::Constant(1.0);
    let trace = model.forward(&x, Mode::Eval, &mut rng).map_err(|e| e.to_string())?;
    let plain = attention_free_logits(&model, &x);
    ensure(trace.logits.data() == plain.data(), "bypass logits differ from the attention-free dual branch")?;

    model.attention = Attention::Learned;
    model.fusam.conv.weight.fill(0.0);
    model.fusam.conv.bias.fill(0.0);
    for mode in [Mode::Eval, Mode::Train] {
        let trace = model.forward(&x, mode, &mut rng).map_err(|e| e.to_string())?;
        ensure(trace.attention_map.data().iter().all(|&a| a == 0.5), "attention map is not 0.5")?;
        for (r, y) in trace.recalibrated.iter().zip(&trace.block1_out) {
            let half: Vec<f64> = y.data().iter().map(|v| 0.5 * v).collect();
            ensure(r.data() == half.as_slice(), "recalibrated map is not exactly half its input")?;
        }
    }
    Ok("bypass bit-identical; zero weights give exactly 0.5x on both branches".into())
}

fn scheduler_closed_form() -> Outcome {
    let sched = SgdrSchedule::default();
    let oracle = |e: f64| {
        let t_cur = e - 50.0 * (e / 50.0).floor();
        1e-6 + 0.5 * (1e-3 - 1e-6) * (1.0 + (PI * t_cur / 50.0).cos())
    };
    let points = [(0.0, 1e-3), (25.0, 5.005e-4), (49.999, 1e-6), (50.0, 1e-3), (75.0, 5.005e-4)];
    let mut worst: f64 = 0.0;
    for (epoch, stated) in points {
        let lr = sched.lr_at(epoch).map_err(|e| e.to_string())?;
        let err = (lr - oracle(epoch)).abs().max((lr - stated).abs());
        worst = worst.max(err);
        ensure(err <= 1e-9, format!("epoch {epoch}: {lr} vs formula {} / stated {stated}", oracle(epoch)))?;
    }
    Ok(format!("5 epochs, worst deviation {worst:.2e}"))
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(12, 0);
    let mut model = YNetModel::new(ArchConfig::tiny(3), &mut rng).map_err(|e| e.to_string())?;
    let x = uniform(&[12, 32, 32, 3], &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut onehot = Tensor::zeros(&[12, 3]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * 3 + l] = 1.0;
    }
    let accuracy = |probs: &Tensor| {
        probs.data().chunks(3).zip(&labels).filter(|(row, &l)| argmax(row) == l).count() as f64 / 12.0
    };
    let mut adam = Adam::new(1e-3);
    for step in 0..300 {
        model
            .train_step(&mut adam, &x, &onehot, &mut rng.derive(step + 1))
            .map_err(|e| e.to_string())?;
    }
    let acc = accuracy(&model.predict(&x).map_err(|e| e.to_string())?);
    let secs = start.elapsed().as_secs_f64();
    ensure(acc == 1.0, format!("train accuracy {:.1}% after 300 steps", 100.0 * acc))?;
    ensure(secs < 300.0, format!("took {secs:.1}s"))?;
    Ok(format!("100% on 12 samples after 300 steps in {secs:.1}s"))
}

/// Direct six-loop cross-correlation with zero "same" padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Tensor {
    let [n, h, wd, cin] = x.shape().try_into().unwrap();
    let [k, _, _, cout] = w.shape().try_into().unwrap();
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut out = vec![0.0; n * h * wd * cout];
    let at = |t: &Tensor, i: &[usize]| t.get(i).unwrap();
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..wd {
                for co in 0..cout {
                    let mut acc = at(b, &[co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + (dilation * ky) as isize - pad;
                            let ix = ox as isize + (dilation * kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += at(x, &[ni, iy as usize, ix as usize, ci]) * at(w, &[ky, kx, ci, co]);
                            }
                        }
                    }
                    out[((ni * h + oy) * wd + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, h, wd, cout], out).unwrap()
}

fn conv_oracle() -> Outcome {
    let mut rng = Rng::new(2024, 0);
    let mut worst: f64 = 0.0;
    let mut dilated = 0;
    for case in 0..200 {
        let k = [1, 3, 5][rng.below(3)];
        let dilation = 1 + rng.below(2);
        dilated += usize::from(dilation == 2);
        let (n, h, w) = (1 + rng.below(2), 1 + rng.below(8), 1 + rng.below(8));
        let (cin, cout) = (1 + rng.below(4), 1 + rng.below(4));
        let conv = Conv2d::new(normal(&[k, k, cin, cout], &mut rng), normal(&[cout], &mut rng), dilation)
            .map_err(|e| e.to_string())?;
        let x = normal(&[n, h, w, cin], &mut rng);
        let fast = conv.forward(&x).map_err(|e| e.to_string())?;
        let slow = naive_conv(&x, &conv.weight, &conv.bias, dilation);
        ensure(fast.shape() == slow.shape(), format!("case {case}: shape {:?}", fast.shape()))?;
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
        ensure(worst <= 1e-10, format!("case {case}: relative error {worst:e}"))?;
    }
    Ok(format!("200 cases ({dilated} dilated), worst relative error {worst:.1e}"))
}

fn brute_force(k: usize, pairs: &[(usize, usize)]) -> Vec<(f64, f64, f64)> {
    (0..k)
        .map(|c| {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
            let actual = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
            let p = if predicted > 0.0 { 100.0 * tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { 100.0 * tp / actual } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect()
}

fn metrics_oracle() -> Outcome {
    let mut rng = Rng::new(77, 0);
    for set in 0..100 {
        let k = 1 + rng.below(10);
        let n = 1 + rng.below(1000);
        let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.below(k), rng.below(k))).collect();
        let names = (0..k).map(|c| format!("c{c}")).collect();
        let mut cm = ConfusionMatrix::new(names);
        for &(t, p) in &pairs {
            cm.accumulate(t, p).map_err(|e| e.to_string())?;
        }
        let report = compute_report(&cm).map_err(|e| e.to_string())?;
        let expect = brute_force(k, &pairs);
        for (c, (m, &(p, r, f))) in report.classes.iter().zip(&expect).enumerate() {
            ensure(
                (m.precision, m.recall, m.f1) == (p, r, f),
                format!("set {set} class {c}: {:?} vs {:?}", (m.precision, m.recall, m.f1), (p, r, f)),
            )?;
        }
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        ensure(report.accuracy == 100.0 * correct as f64 / n as f64, format!("set {set}: accuracy"))?;
        let macro_f1 = expect.iter().map(|e| e.2).sum::<f64>() / k as f64;
        ensure((report.macro_f1 - macro_f1).abs() <= 1e-12, format!("set {set}: macro f1"))?;
    }
    let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], &[vec![2, 1], vec![0, 3]]).unwrap();
    let r = compute_report(&cm).map_err(|e| e.to_string())?;
    let hand = (format!("{:.2}", r.accuracy), format!("{:.2}", r.macro_f1));
    ensure(hand == ("83.33".into(), "82.86".into()), format!("hand case gives {hand:?}"))?;
    Ok("100 random sets exact; hand case 83.33 / 82.86".into())
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let o = ynet(args);
    ensure(o.status.success(), format!("ynet {args:?} failed: {}", String::from_utf8_lossy(&o.stderr)))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    synthetic_dataset(&data, 8, 9);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&tiny_train_args(&data, &a, "10"))?;
    run_ok(&tiny_train_args(&data, &b, "10"))?;
    ensure(read(&a.join("history.csv"))? == read(&b.join("history.csv"))?, "repeated runs differ")?;
    ensure(read(&a.join("final.ync"))? == read(&b.join("final.ync"))?, "repeated checkpoints differ")?;

    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    run_ok(&tiny_train_args(&data, &full, "20"))?;
    run_ok(&tiny_train_args(&data, &split, "10"))?;
    let resume = split.join("resume.ynr");
    let mut args = tiny_train_args(&data, &split, "20");
    args.extend(["--resume", path_str(&resume)]);
    run_ok(&args)?;
    let history = read(&full.join("history.csv"))?;
    ensure(history == read(&split.join("history.csv"))?, "resumed history differs")?;
    ensure(read(&full.join("final.ync"))? == read(&split.join("final.ync"))?, "resumed weights differ")?;
    let rows = String::from_utf8_lossy(&history).lines().count() - 1;
    Ok(format!("identical histories; 10+10 resume equals 20 uninterrupted ({rows} epochs, same weights)"))
}

fn augmentation_contract() -> Outcome {
    let mut rng = Rng::new(5, 0);
    let sample = Sample {
        image: uniform(&[8, 8, 3], &mut rng),
        label: 2,
        id: 17,
    };
    for trial in 0..100 {
        let (out, applied) = augment(&sample, &AugmentPolicy::none(), &mut rng.derive(trial));
        ensure(out == sample && applied == Default::default(), "probability-0 policy changed the sample")?;
    }

    let policy = AugmentPolicy::default();
    let trials = 10_000;
    let mut fired = [0usize; 6];
    for t in 0..trials {
        let (_, a) = augment(&sample, &policy, &mut Rng::new(99, t));
        let flags = [a.hflip, a.vflip, a.rot90, a.brightness_contrast, a.rgb_shift, a.median_blur];
        for (count, f) in fired.iter_mut().zip(flags) {
            *count += usize::from(f);
        }
    }
    let want = [0.5, 0.5, 0.5, 0.3, 0.5, 0.4];
    let rates: Vec<f64> = fired.iter().map(|&c| c as f64 / trials as f64).collect();
    for (name, (rate, p)) in ["hflip", "vflip", "rot90", "brightness_contrast", "rgb_shift", "median_blur"]
        .iter()
        .zip(rates.iter().zip(want))
    {
        ensure((rate - p).abs() <= 0.02, format!("{name} fired at {rate}, expected {p}"))?;
    }

    let img = uniform(&[5, 7, 3], &mut rng);
    ensure(hflip(&hflip(&img)) == img, "hflip twice is not the identity")?;
    ensure(vflip(&vflip(&img)) == img, "vflip twice is not the identity")?;
    ensure(rot90(&rot90(&rot90(&rot90(&img)))) == img, "four rotations are not the identity")?;
    ensure(rot90(&rot90(&img)) == hflip(&vflip(&img)), "two rotations differ from both flips")?;
    Ok(format!("identity at p=0; rates {rates:?}; involutions exact"))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Rng::new(31, 0);
    let t = normal(&[2, 3, 4, 5], &mut rng).map(|v| v * 1e-300 + v);
    let ytf = dir.path().join("t.ytf");
    save_tensor(&ytf, &t).map_err(|e| e.to_string())?;
    let back = load_tensor(&ytf).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(back.shape() == t.shape() && bits(&back) == bits(&t), "YTF round trip is not bit-exact")?;

    // train a little so running statistics and weights are non-trivial
    let mut model = YNetModel::new(tiny_arch(), &mut rng).map_err(|e| e.to_string())?;
    let x = uniform(&[4, 16, 16, 3], &mut rng);
    let mut labels = Tensor::zeros(&[4, 3]);
    for i in 0..4 {
        labels.data_mut()[i * 3 + i % 3] = 1.0;
    }
    let mut adam = Adam::new(1e-3);
    for s in 0..3 {
        model.train_step(&mut adam, &x, &labels, &mut rng.derive(s)).map_err(|e| e.to_string())?;
    }
    let before = model.predict(&x).map_err(|e| e.to_string())?;
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let path = dir.path().join("m.ync");
    model.save_checkpoint(&path, &names).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.class_names == names, "class names lost")?;
    for ((na, a), (nb, b)) in model.named_tensors().into_iter().zip(loaded.model.named_tensors()) {
        ensure(na == nb && bits(a) == bits(b), format!("{na} changed in the round trip"))?;
    }
    let after = loaded.model.predict(&x).map_err(|e| e.to_string())?;
    ensure(bits(&before) == bits(&after), "eval forward after load differs")?;
    let again = dir.path().join("m2.ync");
    loaded.model.save_checkpoint(&again, &names).map_err(|e| e.to_string())?;
    ensure(read(&path)? == read(&again)?, "re-saved checkpoint differs byte-wise")?;
    Ok("YTF and checkpoint bit-exact; eval forward identical after load".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("full-run recipe", full_run_recipe),
        ("gradient oracle", gradient_oracle),
        ("shape conformance", shape_conformance),
        ("attention identity and damping", fusam_identity_and_damping),
        ("scheduler closed form", scheduler_closed_form),
        ("overfit sanity", overfit_sanity),
        ("conv oracle", conv_oracle),
        ("metrics oracle", metrics_oracle),
        ("determinism and resume", determinism),
        ("augmentation contract", augmentation_contract),
        ("persistence", persistence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
