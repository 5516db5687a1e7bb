//! Finite-difference verification of every analytic backward pass.
//!
//! Each check defines a scalar objective, perturbs one coordinate at a time
//! by `±FD_STEP` and compares the central difference with the analytic
//! partial derivative. Coordinates whose perturbation flips a ReLU sign or
//! a max-pool argmax are skipped: the objective is not differentiable
//! across those boundaries.

use std::time::Instant;

use crate::error::Result;
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, softmax_cross_entropy,
    softmax_cross_entropy_backward, Activation, BatchNorm2d, Conv2d, Dense, Dropout, Mode,
};
use crate::model::{ArchConfig, YNetModel};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error. Central differences of an
/// O(1) loss at `h = 1e-5` carry up to a few 1e-10 of rounding noise, so a
/// partial that is exactly zero (a batchnorm-cancelled bias, say) would
/// otherwise be judged on noise alone. Partials below the floor are
/// compared on the absolute scale `REL_TOL * REL_FLOOR = 1e-9`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Deliberate faults, used to prove the harness catches broken kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Scales analytic convolution gradients by 1.01.
    ConvBackward,
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < REL_TOL
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !g.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<36} {:>8} {:>8} {:>12}  status\n", "group", "checked", "skipped", "max_rel_err");
        for g in &self.groups {
            s.push_str(&format!(
                "{:<36} {:>8} {:>8} {:>12.3e}  {}\n",
                g.name,
                g.checked,
                g.skipped,
                g.max_rel_error,
                if g.passed() { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} groups, {} failed, {:.1}s\n",
            self.groups.len(),
            self.failures().len(),
            self.seconds
        ));
        s
    }
}

/// Compares `analytic` with central differences of `objective` around
/// `point`. `objective` returns the scalar value and a kink signature.
pub fn check_coordinates(
    name: &str,
    point: &Tensor,
    analytic: &Tensor,
    mut objective: impl FnMut(&Tensor) -> Result<(f64, u64)>,
) -> Result<GroupResult> {
    let (_, base_sig) = objective(point)?;
    let mut probe = point.clone();
    let mut result = GroupResult {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let (plus, sig_p) = objective(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let (minus, sig_m) = objective(&probe)?;
        probe.data_mut()[i] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            result.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic.data()[i], numeric);
        result.max_rel_error = result.max_rel_error.max(err);
        result.checked += 1;
    }
    Ok(result)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    t
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn sign_signature(t: &Tensor) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for &v in t.data() {
        (v > 0.0).hash(&mut h);
    }
    h.finish()
}

fn corrupt(t: Tensor, on: bool) -> Tensor {
    if on {
        t.scale(1.01)
    } else {
        t
    }
}

fn conv_suite(label: &str, kernel: usize, dilation: usize, corruption: Corruption, rng: &mut Rng) -> Result<Vec<GroupResult>> {
    let x = random(&[2, 5, 6, 3], rng);
    let conv = Conv2d::new(random(&[kernel, kernel, 3, 4], rng), random(&[4], rng), dilation)?;
    let r = random(&[2, 5, 6, 4], rng);
    let grads = conv.backward(&x, &r)?;
    let bad = corruption == Corruption::ConvBackward;
    let gi = corrupt(grads.input, bad);
    let gw = corrupt(grads.weight, bad);
    Ok(vec![
        check_coordinates(&format!("{label}.input"), &x, &gi, |xp| Ok((dot(&conv.forward(xp)?, &r), 0)))?,
        check_coordinates(&format!("{label}.weight"), &conv.weight, &gw, |wp| {
            let c = Conv2d::new(wp.clone(), conv.bias.clone(), dilation)?;
            Ok((dot(&c.forward(&x)?, &r), 0))
        })?,
        check_coordinates(&format!("{label}.bias"), &conv.bias, &grads.bias, |bp| {
            let c = Conv2d::new(conv.weight.clone(), bp.clone(), dilation)?;
            Ok((dot(&c.forward(&x)?, &r), 0))
        })?,
    ])
}

fn batchnorm_suite(mode: Mode, rng: &mut Rng) -> Result<Vec<GroupResult>> {
    let label = match mode {
        Mode::Train => "batchnorm.train",
        Mode::Eval => "batchnorm.eval",
    };
    let x = random(&[3, 3, 2, 4], rng).scale(2.0).add(&Tensor::from_vec(vec![0.5, -1.0, 0.0, 3.0]))?;
    let mut bn = BatchNorm2d::new(4);
    bn.gamma = random(&[4], rng);
    bn.beta = random(&[4], rng);
    bn.running_mean = random(&[4], rng);
    bn.running_var = random(&[4], rng).map(|v| 0.5 + v * v);
    let r = random(x.shape(), rng);
    let (_, cache) = bn.forward(&x, mode)?;
    let grads = bn.backward(&cache, &r)?;
    let eval = |b: &BatchNorm2d, xp: &Tensor| -> Result<(f64, u64)> { Ok((dot(&b.forward(xp, mode)?.0, &r), 0)) };
    Ok(vec![
        check_coordinates(&format!("{label}.input"), &x, &grads.input, |xp| eval(&bn, xp))?,
        check_coordinates(&format!("{label}.gamma"), &bn.gamma, &grads.gamma, |gp| {
            let mut b = bn.clone();
            b.gamma = gp.clone();
            eval(&b, &x)
        })?,
        check_coordinates(&format!("{label}.beta"), &bn.beta, &grads.beta, |bp| {
            let mut b = bn.clone();
            b.beta = bp.clone();
            eval(&b, &x)
        })?,
    ])
}

fn pooling_suite(rng: &mut Rng) -> Result<Vec<GroupResult>> {
    let x = random(&[2, 5, 6, 3], rng);
    let (y, cache) = maxpool2d(&x)?;
    let r = random(y.shape(), rng);
    let g = maxpool2d_backward(&cache, &r)?;
    let argmax_sig = |c: &crate::layers::PoolCache| {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        c.argmax.hash(&mut h);
        h.finish()
    };
    let maxpool = check_coordinates("maxpool.input", &x, &g, |xp| {
        let (y, c) = maxpool2d(xp)?;
        Ok((dot(&y, &r), argmax_sig(&c)))
    })?;

    let x = random(&[2, 4, 3, 5], rng);
    let r = random(&[2, 5], rng);
    let g = global_avg_pool_backward(x.shape(), &r)?;
    let gap = check_coordinates("gap.input", &x, &g, |xp| Ok((dot(&global_avg_pool(xp)?, &r), 0)))?;
    Ok(vec![maxpool, gap])
}

fn dense_suite(rng: &mut Rng) -> Result<Vec<GroupResult>> {
    let x = random(&[3, 5], rng);
    let d = Dense::new(random(&[5, 4], rng), random(&[4], rng))?;
    let r = random(&[3, 4], rng);
    let g = d.backward(&x, &r)?;
    Ok(vec![
        check_coordinates("dense.input", &x, &g.input, |xp| Ok((dot(&d.forward(xp)?, &r), 0)))?,
        check_coordinates("dense.weight", &d.weight, &g.weight, |wp| {
            Ok((dot(&Dense::new(wp.clone(), d.bias.clone())?.forward(&x)?, &r), 0))
        })?,
        check_coordinates("dense.bias", &d.bias, &g.bias, |bp| {
            Ok((dot(&Dense::new(d.weight.clone(), bp.clone())?.forward(&x)?, &r), 0))
        })?,
    ])
}

fn pointwise_suite(rng: &mut Rng) -> Result<Vec<GroupResult>> {
    let mut out = Vec::new();
    let x = random(&[4, 6], rng).scale(3.0);
    let r = random(&[4, 6], rng);
    for (kind, label) in [(Activation::Relu, "relu.input"), (Activation::Sigmoid, "sigmoid.input")] {
        let y = kind.forward(&x);
        let g = kind.backward(&x, &y, &r)?;
        let sig = |xp: &Tensor| if kind == Activation::Relu { sign_signature(xp) } else { 0 };
        out.push(check_coordinates(label, &x, &g, |xp| Ok((dot(&kind.forward(xp), &r), sig(xp))))?);
    }

    let drop = Dropout::new(0.3)?;
    let dropout_rng = Rng::new(77, 5);
    let (_, mask) = drop.forward(&x, Mode::Train, &mut dropout_rng.clone());
    let g = Dropout::backward(&mask, &r)?;
    out.push(check_coordinates("dropout.input", &x, &g, |xp| {
        Ok((dot(&drop.forward(xp, Mode::Train, &mut dropout_rng.clone()).0, &r), 0))
    })?);

    let logits = random(&[3, 5], rng).scale(2.0);
    let mut labels = Tensor::zeros(&[3, 5]);
    for (i, c) in [1usize, 4, 0].into_iter().enumerate() {
        labels.data_mut()[i * 5 + c] = 1.0;
    }
    let (_, probs) = softmax_cross_entropy(&logits, &labels)?;
    let g = softmax_cross_entropy_backward(&probs, &labels)?;
    out.push(check_coordinates("softmax_xent.logits", &logits, &g, |lp| {
        Ok((softmax_cross_entropy(lp, &labels)?.0, 0))
    })?);
    Ok(out)
}

/// Every layer kernel on small random tensors (all dimensions <= 6).
pub fn layer_suite(seed: u64, corruption: Corruption) -> Result<Vec<GroupResult>> {
    let mut rng = Rng::new(seed, 0x6772_6164);
    let mut out = Vec::new();
    out.extend(conv_suite("conv.k3d1", 3, 1, corruption, &mut rng)?);
    out.extend(conv_suite("conv.k5d1", 5, 1, corruption, &mut rng)?);
    out.extend(conv_suite("conv.k3d2", 3, 2, corruption, &mut rng)?);
    out.extend(batchnorm_suite(Mode::Train, &mut rng)?);
    out.extend(batchnorm_suite(Mode::Eval, &mut rng)?);
    out.extend(pooling_suite(&mut rng)?);
    out.extend(dense_suite(&mut rng)?);
    out.extend(pointwise_suite(&mut rng)?);
    Ok(out)
}

/// Architecture used by the whole-model check: 16x16x3 input, channels
/// (4, 8, 12, 16), head (10, 5), three classes.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig::tiny(3).with_input_size(16)
}

/// Whole-model check of every trainable parameter against the train-mode
/// cross-entropy of a fixed batch (batchnorm batch statistics and a fixed
/// dropout stream included).
pub fn model_suite(model: &YNetModel, x: &Tensor, labels: &Tensor, dropout_seed: u64, corruption: Corruption) -> Result<Vec<GroupResult>> {
    let dropout_rng = Rng::new(dropout_seed, 0x6d6f_6465);
    let (_, _, grads) = model.loss_and_grads(x, labels, &mut dropout_rng.clone())?;
    let mut out = Vec::new();
    let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
    for (idx, name) in names.iter().enumerate() {
        let point = model.trainable()[idx].1.clone();
        let mut analytic = grads.get(name).expect("gradient for every parameter").clone();
        if corruption == Corruption::ConvBackward && name.contains("conv") {
            analytic = analytic.scale(1.01);
        }
        let mut probe_model = model.clone();
        let group = check_coordinates(&format!("model.{name}"), &point, &analytic, |p| {
            *probe_model.trainable_mut().swap_remove(idx).1 = p.clone();
            let trace = probe_model.forward(x, Mode::Train, &mut dropout_rng.clone())?;
            let (loss, _) = softmax_cross_entropy(&trace.logits, labels)?;
            Ok((loss, trace.kink_signature()))
        })?;
        out.push(group);
    }
    Ok(out)
}

/// Builds the tiny model and a fixed batch, then runs [`model_suite`].
pub fn tiny_model_suite(seed: u64, corruption: Corruption) -> Result<Vec<GroupResult>> {
    let mut rng = Rng::new(seed, 0x7469_6e79);
    let model = YNetModel::new(tiny_arch(), &mut rng)?;
    let x = {
        let mut t = Tensor::zeros(&[2, 16, 16, 3]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform());
        t
    };
    let mut labels = Tensor::zeros(&[2, 3]);
    labels.data_mut()[0] = 1.0;
    labels.data_mut()[3 + 2] = 1.0;
    model_suite(&model, &x, &labels, seed, corruption)
}

/// Layer suites plus the tiny whole-model suite.
pub fn run_all(seed: u64, corruption: Corruption) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut groups = layer_suite(seed, corruption)?;
    groups.extend(tiny_model_suite(seed, corruption)?);
    Ok(GradcheckReport {
        groups,
        seconds: start.elapsed().as_secs_f64(),
    })
}
