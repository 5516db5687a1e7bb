//! The dual-branch network with the fusion spatial attention bridge.
//!
//! Dataflow for an `N x S x S x 3` input:
//!
//! 1. block 1 of each branch (3x3 and 5x5 kernels) on the input;
//! 2. attention: concat both block-1 outputs on channels, dilated conv to
//!    one channel, sigmoid -> map `A` of shape `N x S/2 x S/2 x 1`;
//! 3. both block-1 outputs are multiplied by `A` (broadcast over channels);
//! 4. blocks 2-4 of each branch on their recalibrated maps;
//! 5. concat the final maps on channels, global average pool;
//! 6. head: dropout -> dense -> relu -> dropout -> dense -> relu -> dense
//!    -> softmax.

mod arch;
mod blocks;
mod checkpoint;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub use arch::ArchConfig;
pub use blocks::{BlockCache, BlockGrads, Branch, ConvBlock, Fusam, FusamCache};
pub use checkpoint::{load_resume, save_resume, Checkpoint, ResumeState, CHECKPOINT_MAGIC, RESUME_MAGIC};

use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, he_normal, softmax, softmax_cross_entropy,
    softmax_cross_entropy_backward, Activation, Dense, Dropout, DropoutMask, Mode,
};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the attention map is produced.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    #[default]
    /// The learned attention module.
    Learned,
    /// A constant map. `Constant(1.0)` bypasses attention entirely.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub dense1: Dense,
    pub dense2: Dense,
    pub dense3: Dense,
    pub drop1: Dropout,
    pub drop2: Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YNetModel {
    arch: ArchConfig,
    pub branch1: Branch,
    pub branch2: Branch,
    pub fusam: Fusam,
    pub head: Head,
    pub attention: Attention,
    version: u64,
}

/// Everything recorded by a forward pass that backward needs, plus the
/// named intermediate shapes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    version: u64,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub branch1: Vec<BlockCache>,
    pub branch2: Vec<BlockCache>,
    /// Block-1 outputs before recalibration.
    pub block1_out: [Tensor; 2],
    /// Attention map, `N x H x W x 1`.
    pub attention_map: Tensor,
    pub fusam: Option<FusamCache>,
    /// Recalibrated block-1 outputs fed to block 2.
    pub recalibrated: [Tensor; 2],
    pub fused_shape: Vec<usize>,
    /// Pooled fusion vector, `N x 2*C4`.
    pub embedding: Tensor,
    drop1: DropoutMask,
    head_in1: Tensor,
    pre1: Tensor,
    act1: Tensor,
    drop2: DropoutMask,
    head_in2: Tensor,
    pre2: Tensor,
    act2: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ForwardTrace {
    /// Hash of every ReLU sign pattern and max-pool argmax in the pass.
    /// Two passes with equal signatures sit in the same linear region of
    /// the network's piecewise-smooth loss.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for cache in self.branch1.iter().chain(&self.branch2) {
            for &v in cache.conv_out.data() {
                (v > 0.0).hash(&mut h);
            }
            cache.pool.argmax.hash(&mut h);
        }
        for t in [&self.pre1, &self.pre2] {
            for &v in t.data() {
                (v > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.shapes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

/// Named parameter gradients, in the model's parameter order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<(String, Tensor)>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Zeroes every gradient whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.0.iter_mut() {
            if n.starts_with(prefix) {
                t.fill(0.0);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|(_, t)| t.all_finite())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub probs: Tensor,
}

/// One row of a parameter-count table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub shape: String,
    pub trainable: usize,
    pub buffers: usize,
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("×")
}

/// `sum_c grad[n,h,w,c] * features[n,h,w,c]` as an `N x H x W x 1` tensor.
fn channel_dot(grad: &Tensor, features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    let c = shape[3];
    let data = grad
        .data()
        .chunks_exact(c)
        .zip(features.data().chunks_exact(c))
        .map(|(g, f)| g.iter().zip(f).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![shape[0], shape[1], shape[2], 1], data)
}

impl YNetModel {
    pub fn new(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (eps, mom) = (arch.bn_eps, arch.bn_momentum);
        let branch1 = Branch::new(arch.kernel_sizes[0], arch.in_channels, &arch.channels, eps, mom, rng)?;
        let branch2 = Branch::new(arch.kernel_sizes[1], arch.in_channels, &arch.channels, eps, mom, rng)?;
        let fusam = Fusam::new(arch.fusam_kernel, arch.fusam_dilation, 2 * arch.channels[0], rng)?;
        let widths = [arch.fused_width(), arch.head_widths[0], arch.head_widths[1], arch.num_classes];
        let mut dense = Vec::with_capacity(3);
        for pair in widths.windows(2) {
            dense.push(Dense::new(
                he_normal(&[pair[0], pair[1]], pair[0], rng),
                Tensor::zeros(&[pair[1]]),
            )?);
        }
        let dense3 = dense.pop().unwrap();
        let dense2 = dense.pop().unwrap();
        let dense1 = dense.pop().unwrap();
        let head = Head {
            dense1,
            dense2,
            dense3,
            drop1: Dropout::new(arch.dropout[0])?,
            drop2: Dropout::new(arch.dropout[1])?,
        };
        Ok(Self {
            arch,
            branch1,
            branch2,
            fusam,
            head,
            attention: Attention::Learned,
            version: 0,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Bumped whenever parameters are handed out mutably.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn branches(&self) -> [&Branch; 2] {
        [&self.branch1, &self.branch2]
    }

    /// All tensors (trainable and running statistics) in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (bi, branch) in self.branches().into_iter().enumerate() {
            for (k, block) in branch.blocks.iter().enumerate() {
                let p = format!("branch{}.block{}", bi + 1, k + 1);
                out.push((format!("{p}.conv.w"), &block.conv.weight));
                out.push((format!("{p}.conv.b"), &block.conv.bias));
                out.push((format!("{p}.bn.gamma"), &block.bn.gamma));
                out.push((format!("{p}.bn.beta"), &block.bn.beta));
                out.push((format!("{p}.bn.running_mean"), &block.bn.running_mean));
                out.push((format!("{p}.bn.running_var"), &block.bn.running_var));
            }
        }
        out.push(("fusam.conv.w".into(), &self.fusam.conv.weight));
        out.push(("fusam.conv.b".into(), &self.fusam.conv.bias));
        for (i, d) in [&self.head.dense1, &self.head.dense2, &self.head.dense3].into_iter().enumerate() {
            out.push((format!("head.dense{}.w", i + 1), &d.weight));
            out.push((format!("head.dense{}.b", i + 1), &d.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.version += 1;
        let mut out = Vec::new();
        for (bi, branch) in [&mut self.branch1, &mut self.branch2].into_iter().enumerate() {
            for (k, block) in branch.blocks.iter_mut().enumerate() {
                let p = format!("branch{}.block{}", bi + 1, k + 1);
                out.push((format!("{p}.conv.w"), &mut block.conv.weight));
                out.push((format!("{p}.conv.b"), &mut block.conv.bias));
                out.push((format!("{p}.bn.gamma"), &mut block.bn.gamma));
                out.push((format!("{p}.bn.beta"), &mut block.bn.beta));
                out.push((format!("{p}.bn.running_mean"), &mut block.bn.running_mean));
                out.push((format!("{p}.bn.running_var"), &mut block.bn.running_var));
            }
        }
        out.push(("fusam.conv.w".into(), &mut self.fusam.conv.weight));
        out.push(("fusam.conv.b".into(), &mut self.fusam.conv.bias));
        let head = &mut self.head;
        for (i, d) in [&mut head.dense1, &mut head.dense2, &mut head.dense3].into_iter().enumerate() {
            out.push((format!("head.dense{}.w", i + 1), &mut d.weight));
            out.push((format!("head.dense{}.b", i + 1), &mut d.bias));
        }
        out
    }

    fn is_trainable(name: &str) -> bool {
        !name.contains("running_")
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [n, h, w, c] if n > 0 && h == w && h % 16 == 0 && c == self.arch.in_channels && h > 0 => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "model input must be N x S x S x {} with N > 0 and S a multiple of 16, got {:?}",
                self.arch.in_channels,
                x.shape()
            ))),
        }
    }

    /// Runs the network. In train mode dropout draws from `rng`; batch
    /// statistics are recorded in the trace but running statistics are
    /// only updated by [`YNetModel::commit_batch_stats`].
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut shapes = vec![("input".to_string(), x.shape().to_vec())];

        let (y1, c11) = self.branch1.blocks[0].forward(x, mode)?;
        let (y2, c21) = self.branch2.blocks[0].forward(x, mode)?;
        shapes.push(("branch1.block1".into(), y1.shape().to_vec()));
        shapes.push(("branch2.block1".into(), y2.shape().to_vec()));

        let (map, fusam) = match self.attention {
            Attention::Learned => {
                let (map, cache) = self.fusam.forward(&y1, &y2)?;
                shapes.push(("fusam.concat".into(), cache.concat.shape().to_vec()));
                (map, Some(cache))
            }
            Attention::Constant(c) => {
                let s = y1.shape();
                (Tensor::full(&[s[0], s[1], s[2], 1], c), None)
            }
        };
        shapes.push(("fusam.attention".into(), map.shape().to_vec()));
        let r1 = y1.mul(&map)?;
        let r2 = y2.mul(&map)?;

        let mut caches = [vec![c11], vec![c21]];
        let mut feats = [r1.clone(), r2.clone()];
        for (bi, branch) in self.branches().into_iter().enumerate() {
            for (k, block) in branch.blocks.iter().enumerate().skip(1) {
                let (out, cache) = block.forward(&feats[bi], mode)?;
                shapes.push((format!("branch{}.block{}", bi + 1, k + 1), out.shape().to_vec()));
                caches[bi].push(cache);
                feats[bi] = out;
            }
        }
        let fused = Tensor::concat_last(&[&feats[0], &feats[1]])?;
        shapes.push(("fused".into(), fused.shape().to_vec()));
        let embedding = global_avg_pool(&fused)?;
        shapes.push(("gap".into(), embedding.shape().to_vec()));

        let h = &self.head;
        let (head_in1, drop1) = h.drop1.forward(&embedding, mode, rng);
        let pre1 = h.dense1.forward(&head_in1)?;
        let act1 = Activation::Relu.forward(&pre1);
        shapes.push(("head.dense1".into(), pre1.shape().to_vec()));
        let (head_in2, drop2) = h.drop2.forward(&act1, mode, rng);
        let pre2 = h.dense2.forward(&head_in2)?;
        let act2 = Activation::Relu.forward(&pre2);
        shapes.push(("head.dense2".into(), pre2.shape().to_vec()));
        let logits = h.dense3.forward(&act2)?;
        shapes.push(("logits".into(), logits.shape().to_vec()));
        let probs = softmax(&logits)?;

        let [b1, b2] = caches;
        Ok(ForwardTrace {
            mode,
            version: self.version,
            shapes,
            branch1: b1,
            branch2: b2,
            block1_out: [y1, y2],
            attention_map: map,
            fusam,
            recalibrated: [r1, r2],
            fused_shape: fused.shape().to_vec(),
            embedding,
            drop1,
            head_in1,
            pre1,
            act1,
            drop2,
            head_in2,
            pre2,
            act2,
            logits,
            probs,
        })
    }

    /// Gradients of every trainable parameter given `d loss / d logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<Gradients> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        if trace.mode != Mode::Train {
            return Err(Error::InvalidArgument(
                "backward needs a train-mode trace (batchnorm used running statistics)".into(),
            ));
        }
        if grad_logits.shape() != trace.logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "model backward",
                left: trace.logits.shape().to_vec(),
                right: grad_logits.shape().to_vec(),
            });
        }
        let h = &self.head;
        let g3 = h.dense3.backward(&trace.act2, grad_logits)?;
        let g_pre2 = Activation::Relu.backward(&trace.pre2, &trace.act2, &g3.input)?;
        let g2 = h.dense2.backward(&trace.head_in2, &g_pre2)?;
        let g_act1 = Dropout::backward(&trace.drop2, &g2.input)?;
        let g_pre1 = Activation::Relu.backward(&trace.pre1, &trace.act1, &g_act1)?;
        let g1 = h.dense1.backward(&trace.head_in1, &g_pre1)?;
        let g_emb = Dropout::backward(&trace.drop1, &g1.input)?;

        let g_fused = global_avg_pool_backward(&trace.fused_shape, &g_emb)?;
        let c4 = self.arch.channels[3];
        let mut g_feat: Vec<Tensor> = g_fused.split_last(&[c4, c4])?;

        let mut block_grads: [Vec<Option<BlockGrads>>; 2] = [vec![None; 4], vec![None; 4]];
        let caches = [&trace.branch1, &trace.branch2];
        for (bi, branch) in self.branches().into_iter().enumerate() {
            for k in (1..4).rev() {
                let bg = branch.blocks[k].backward(&caches[bi][k], &g_feat[bi])?;
                g_feat[bi] = bg.input.clone();
                block_grads[bi][k] = Some(bg);
            }
        }
        // g_feat now holds d loss / d recalibrated block-1 outputs
        let map = &trace.attention_map;
        let mut g_y = [g_feat[0].mul(map)?, g_feat[1].mul(map)?];

        let mut fusam_grads = (
            Tensor::zeros(self.fusam.conv.weight.shape()),
            Tensor::zeros(self.fusam.conv.bias.shape()),
        );
        if let Some(fc) = &trace.fusam {
            let mut g_map = channel_dot(&g_feat[0], &trace.block1_out[0])?;
            g_map.add_assign(&channel_dot(&g_feat[1], &trace.block1_out[1])?)?;
            let g_logits = Activation::Sigmoid.backward(&fc.logits, map, &g_map)?;
            let cg = self.fusam.conv.backward(&fc.concat, &g_logits)?;
            let c1 = self.arch.channels[0];
            let parts = cg.input.split_last(&[c1, c1])?;
            g_y[0].add_assign(&parts[0])?;
            g_y[1].add_assign(&parts[1])?;
            fusam_grads = (cg.weight, cg.bias);
        }
        for (bi, branch) in self.branches().into_iter().enumerate() {
            block_grads[bi][0] = Some(branch.blocks[0].backward(&caches[bi][0], &g_y[bi])?);
        }

        let mut out = Vec::new();
        for (bi, grads) in block_grads.into_iter().enumerate() {
            for (k, g) in grads.into_iter().enumerate() {
                let g = g.expect("every block visited");
                let p = format!("branch{}.block{}", bi + 1, k + 1);
                out.push((format!("{p}.conv.w"), g.conv_w));
                out.push((format!("{p}.conv.b"), g.conv_b));
                out.push((format!("{p}.bn.gamma"), g.bn_gamma));
                out.push((format!("{p}.bn.beta"), g.bn_beta));
            }
        }
        out.push(("fusam.conv.w".into(), fusam_grads.0));
        out.push(("fusam.conv.b".into(), fusam_grads.1));
        for (i, g) in [g1, g2, g3].into_iter().enumerate() {
            out.push((format!("head.dense{}.w", i + 1), g.weight));
            out.push((format!("head.dense{}.b", i + 1), g.bias));
        }
        Ok(Gradients(out))
    }

    /// Folds the batch statistics of a train-mode trace into every
    /// batchnorm layer's running estimates.
    pub fn commit_batch_stats(&mut self, trace: &ForwardTrace) {
        for (branch, caches) in [(&mut self.branch1, &trace.branch1), (&mut self.branch2, &trace.branch2)] {
            for (block, cache) in branch.blocks.iter_mut().zip(caches) {
                block.bn.update_running(&cache.bn);
            }
        }
    }

    /// Train-mode forward, loss and backward without touching the model.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &Tensor, rng: &mut Rng) -> Result<(f64, ForwardTrace, Gradients)> {
        let trace = self.forward(x, Mode::Train, rng)?;
        let (loss, _) = softmax_cross_entropy(&trace.logits, labels)?;
        let grad_logits = softmax_cross_entropy_backward(&trace.probs, labels)?;
        let grads = self.backward(&trace, &grad_logits)?;
        Ok((loss, trace, grads))
    }

    /// One optimisation step: forward, backward, running-stat update, Adam.
    pub fn train_step(&mut self, adam: &mut Adam, x: &Tensor, labels: &Tensor, rng: &mut Rng) -> Result<StepOutput> {
        let (loss, trace, grads) = self.loss_and_grads(x, labels, rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        self.commit_batch_stats(&trace);
        let mut params = self.trainable_mut();
        adam.step(&mut params, &grads.0)?;
        Ok(StepOutput {
            loss,
            probs: trace.probs,
        })
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = Rng::new(0, 0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.probs)
    }

    /// Eval-mode pooled fusion vector (`N x 2*C4`).
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = Rng::new(0, 0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.embedding)
    }

    /// Shapes the network produces for a batch of `n`, without running it.
    pub fn shape_trace(&self, n: usize) -> Vec<(String, Vec<usize>)> {
        let a = &self.arch;
        let s = a.input_size;
        let mut out = vec![("input".to_string(), vec![n, s, s, a.in_channels])];
        let mut side = s;
        let mut per_block = Vec::new();
        for &c in &a.channels {
            side /= 2;
            per_block.push(vec![n, side, side, c]);
        }
        out.push(("branch1.block1".into(), per_block[0].clone()));
        out.push(("branch2.block1".into(), per_block[0].clone()));
        if self.attention == Attention::Learned {
            out.push(("fusam.concat".into(), vec![n, s / 2, s / 2, 2 * a.channels[0]]));
        }
        out.push(("fusam.attention".into(), vec![n, s / 2, s / 2, 1]));
        for b in 1..=2 {
            for (k, shape) in per_block.iter().enumerate().skip(1) {
                out.push((format!("branch{b}.block{}", k + 1), shape.clone()));
            }
        }
        out.push(("fused".into(), vec![n, side, side, a.fused_width()]));
        out.push(("gap".into(), vec![n, a.fused_width()]));
        out.push(("head.dense1".into(), vec![n, a.head_widths[0]]));
        out.push(("head.dense2".into(), vec![n, a.head_widths[1]]));
        out.push(("logits".into(), vec![n, a.num_classes]));
        out
    }

    /// Per-layer parameter counts. Conv: `k*k*Cin*Cout + Cout`; dense:
    /// `in*out + out`; batchnorm: `2C` trainable plus `2C` running buffers.
    pub fn parameter_counts(&self) -> Vec<LayerCount> {
        let mut out = Vec::new();
        for (bi, branch) in self.branches().into_iter().enumerate() {
            for (k, block) in branch.blocks.iter().enumerate() {
                let p = format!("branch{}.block{}", bi + 1, k + 1);
                out.push(LayerCount {
                    name: format!("{p}.conv"),
                    shape: shape_string(block.conv.weight.shape()),
                    trainable: block.conv.param_count(),
                    buffers: 0,
                });
                let c = block.bn.channels();
                out.push(LayerCount {
                    name: format!("{p}.bn"),
                    shape: c.to_string(),
                    trainable: 2 * c,
                    buffers: 2 * c,
                });
            }
        }
        out.push(LayerCount {
            name: "fusam.conv".into(),
            shape: format!("{} dilation {}", shape_string(self.fusam.conv.weight.shape()), self.fusam.conv.dilation),
            trainable: self.fusam.conv.param_count(),
            buffers: 0,
        });
        for (i, d) in [&self.head.dense1, &self.head.dense2, &self.head.dense3].into_iter().enumerate() {
            out.push(LayerCount {
                name: format!("head.dense{}", i + 1),
                shape: format!("{}→{}", d.inputs(), d.outputs()),
                trainable: d.param_count(),
                buffers: 0,
            });
        }
        out
    }

    pub fn total_trainable(&self) -> usize {
        self.parameter_counts().iter().map(|c| c.trainable).sum()
    }
}
