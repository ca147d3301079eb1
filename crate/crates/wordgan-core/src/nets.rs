//! Generator and discriminator networks plus the adversarial objectives.
//!
//! Both nets follow the standard deep-convolutional-GAN recipe: 4x4 kernels
//! with stride 2, batch norm, ReLU in the generator and leaky ReLU (0.2) in
//! the discriminator. The sentence condition enters the discriminator at the
//! penultimate 4x4 feature map, projected and replicated spatially, then
//! concatenated along channels.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::lstm::{self, LstmParams};
use crate::rng;
use crate::tensor::{BnMode, Tape, Tensor, TensorId};
use crate::text::{embed_words, tokenize, WordEmbeddingTable};

/// Probabilities are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]` before any
/// log so the objectives stay finite.
pub const PROB_EPSILON: f64 = 1e-7;

/// Condition channels appended at the discriminator's 4x4 feature map.
pub const DEFAULT_COND_CHANNELS: usize = 16;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STDDEV: f64 = 0.02;

/// How a network forward treats batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    /// Batch statistics, and fold them into the running stats (the net's own
    /// update step).
    TrainCommit,
    /// Batch statistics, but leave the running stats untouched (forwarding a
    /// net inside the *other* player's update keeps its parameters
    /// bit-identical).
    TrainFrozen,
    /// Running statistics only.
    Eval,
}

/// Batch-norm affine parameters plus running statistics. The running stats
/// sit behind a `RefCell` so eval-mode forwards can share the net immutably.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RefCell<crate::tensor::RunningStats>,
}

impl BatchNormLayer {
    fn new(channels: usize) -> BatchNormLayer {
        BatchNormLayer {
            gamma: Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::zeros(&[channels]),
            running: RefCell::new(crate::tensor::RunningStats::identity(channels)),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: NetMode,
    ) -> Result<TensorId> {
        match mode {
            NetMode::TrainCommit => {
                let mut running = self.running.borrow_mut();
                tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Train {
                        running: Some(&mut running),
                        momentum: BN_MOMENTUM,
                    },
                    BN_EPSILON,
                )
            }
            NetMode::TrainFrozen => tape.batch_norm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    running: None,
                    momentum: BN_MOMENTUM,
                },
                BN_EPSILON,
            ),
            NetMode::Eval => {
                let running = self.running.borrow();
                tape.batch_norm(x, gamma, beta, BnMode::Eval { running: &running }, BN_EPSILON)
            }
        }
    }
}

fn check_extent(image_extent: usize) -> Result<usize> {
    if image_extent >= 8 && image_extent.is_multiple_of(4) && (image_extent / 4).is_power_of_two() {
        Ok((image_extent / 4).trailing_zeros() as usize)
    } else {
        Err(Error::arg(format!(
            "unsupported image extent {image_extent}: must be 4 * 2^k with k >= 1"
        )))
    }
}

// ── Generator ───────────────────────────────────────────────────────────

/// Upsampling block: transposed conv (stride 2, pad 1, 4x4) + batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct GenBlock {
    pub kernel: Tensor, // [C_in, C_out, 4, 4]
    pub bn: BatchNormLayer,
}

/// Dense projection from the hidden state to a 4x4 feature map, a chain of
/// upsampling blocks, and a final transposed conv into tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub z_dim: usize,
    pub image_extent: usize,
    pub channels: usize,
    pub base_channels: usize,
    pub proj: Tensor, // [Z, start*16]
    pub proj_bn: BatchNormLayer,
    pub blocks: Vec<GenBlock>,
    pub out_kernel: Tensor, // [C_last, channels, 4, 4]
}

/// Seeded init: weights normal with stddev 0.02, batch-norm gamma one and
/// beta zero. The upsampling chain doubles 4x4 up to the image extent, so
/// `log2(extent/4)` transposed-conv layers in total.
pub fn init_generator(
    z_dim: usize,
    image_extent: usize,
    channels: usize,
    base_channels: usize,
    seed: u64,
) -> Result<GeneratorParams> {
    if z_dim == 0 || channels == 0 || base_channels == 0 {
        return Err(Error::arg("generator dims must be positive".to_string()));
    }
    let levels = check_extent(image_extent)?;
    let start = base_channels << (levels - 1);
    let mut r = rng::stream(seed, "gen-init", 0);
    let proj = Tensor::new(
        vec![z_dim, start * 16],
        rng::normal_vec(&mut r, z_dim * start * 16, INIT_STDDEV),
    )?;
    let mut blocks = Vec::new();
    let mut ch = start;
    for _ in 0..levels - 1 {
        let next = ch / 2;
        blocks.push(GenBlock {
            kernel: Tensor::new(
                vec![ch, next, 4, 4],
                rng::normal_vec(&mut r, ch * next * 16, INIT_STDDEV),
            )?,
            bn: BatchNormLayer::new(next),
        });
        ch = next;
    }
    let out_kernel = Tensor::new(
        vec![ch, channels, 4, 4],
        rng::normal_vec(&mut r, ch * channels * 16, INIT_STDDEV),
    )?;
    Ok(GeneratorParams {
        z_dim,
        image_extent,
        channels,
        base_channels,
        proj,
        proj_bn: BatchNormLayer::new(start),
        blocks,
        out_kernel,
    })
}

impl GeneratorParams {
    pub fn start_channels(&self) -> usize {
        self.base_channels << (check_extent(self.image_extent).unwrap() - 1)
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj.weight".to_string(), &self.proj),
            ("proj_bn.gamma".to_string(), &self.proj_bn.gamma),
            ("proj_bn.beta".to_string(), &self.proj_bn.beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.kernel"), &b.kernel));
            out.push((format!("block{i}.bn.gamma"), &b.bn.gamma));
            out.push((format!("block{i}.bn.beta"), &b.bn.beta));
        }
        out.push(("out.kernel".to_string(), &self.out_kernel));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("proj.weight".to_string(), &mut self.proj),
            ("proj_bn.gamma".to_string(), &mut self.proj_bn.gamma),
            ("proj_bn.beta".to_string(), &mut self.proj_bn.beta),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.kernel"), &mut b.kernel));
            out.push((format!("block{i}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.bn.beta));
        }
        out.push(("out.kernel".to_string(), &mut self.out_kernel));
        out
    }

    /// Batch-norm running buffers, named for checkpointing.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<(String, Vec<f64>)>, prefix: &str, bn: &BatchNormLayer| {
            let r = bn.running.borrow();
            out.push((format!("{prefix}.running_mean"), r.mean.clone()));
            out.push((format!("{prefix}.running_var"), r.var.clone()));
        };
        push(&mut out, "proj_bn", &self.proj_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            push(&mut out, &format!("block{i}.bn"), &b.bn);
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let (prefix, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let bn = if prefix == "proj_bn" {
            &self.proj_bn
        } else if let Some(rest) = prefix.strip_prefix("block") {
            let idx: usize = rest
                .strip_suffix(".bn")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
            &self
                .blocks
                .get(idx)
                .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?
                .bn
        } else {
            return Err(Error::Checkpoint(format!("unknown buffer {name:?}")));
        };
        let mut running = bn.running.borrow_mut();
        let slot = match field {
            "running_mean" => &mut running.mean,
            "running_var" => &mut running.var,
            _ => return Err(Error::Checkpoint(format!("unknown buffer {name:?}"))),
        };
        if slot.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "buffer {name:?} expects {} values, got {}",
                slot.len(),
                data.len()
            )));
        }
        *slot = data;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> GeneratorBinding {
        let proj = tape.leaf_tensor(&self.proj, track);
        let proj_bn = (
            tape.leaf_tensor(&self.proj_bn.gamma, track),
            tape.leaf_tensor(&self.proj_bn.beta, track),
        );
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                (
                    tape.leaf_tensor(&b.kernel, track),
                    tape.leaf_tensor(&b.bn.gamma, track),
                    tape.leaf_tensor(&b.bn.beta, track),
                )
            })
            .collect();
        let out_kernel = tape.leaf_tensor(&self.out_kernel, track);
        GeneratorBinding {
            proj,
            proj_bn,
            blocks,
            out_kernel,
        }
    }
}

/// On-tape leaf ids for one generator forward pass.
pub struct GeneratorBinding {
    proj: TensorId,
    proj_bn: (TensorId, TensorId),
    blocks: Vec<(TensorId, TensorId, TensorId)>,
    out_kernel: TensorId,
}

impl GeneratorBinding {
    /// Flat ids in [`GeneratorParams::trainable`] order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.proj, self.proj_bn.0, self.proj_bn.1];
        for (k, g, b) in &self.blocks {
            out.extend([*k, *g, *b]);
        }
        out.push(self.out_kernel);
        out
    }

    /// Rebuilds a binding from leaves already on the tape, in
    /// [`GeneratorParams::trainable`] order.
    pub fn from_leaves(gp: &GeneratorParams, ids: &[TensorId]) -> GeneratorBinding {
        let mut it = ids.iter().copied();
        let proj = it.next().expect("proj leaf");
        let proj_bn = (it.next().unwrap(), it.next().unwrap());
        let blocks = gp
            .blocks
            .iter()
            .map(|_| (it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
            .collect();
        GeneratorBinding {
            proj,
            proj_bn,
            blocks,
            out_kernel: it.next().unwrap(),
        }
    }
}

/// Forward pass: `h` is `[N,Z]`, output is `[N,channels,extent,extent]`
/// inside `(-1,1)` (tanh).
pub fn generator_forward(
    tape: &mut Tape,
    gp: &GeneratorParams,
    gb: &GeneratorBinding,
    h: TensorId,
    mode: NetMode,
) -> Result<TensorId> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 2 || hs[1] != gp.z_dim {
        return Err(Error::shape(format!(
            "generator input must be [N,{}], got {hs:?}",
            gp.z_dim
        )));
    }
    let n = hs[0];
    let start = gp.start_channels();
    let x = tape.matmul(h, gb.proj)?;
    let mut x = tape.reshape(x, &[n, start, 4, 4])?;
    x = gp.proj_bn.apply(tape, x, gb.proj_bn.0, gb.proj_bn.1, mode)?;
    x = tape.leaky_relu(x, 0.0)?; // plain ReLU
    for (block, &(k, g, b)) in gp.blocks.iter().zip(&gb.blocks) {
        x = tape.conv_transpose2d(x, k, 2, 1)?;
        x = block.bn.apply(tape, x, g, b, mode)?;
        x = tape.leaky_relu(x, 0.0)?;
    }
    x = tape.conv_transpose2d(x, gb.out_kernel, 2, 1)?;
    tape.tanh(x)
}

// ── Discriminator ───────────────────────────────────────────────────────

/// Downsampling block: strided conv; batch norm from the second layer on.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscBlock {
    pub kernel: Tensor, // [C_out, C_in, 4, 4]
    pub bn: Option<BatchNormLayer>,
}

/// Strided-conv stack down to 4x4, condition projection + concat, a 1x1
/// fusion conv, and a dense layer into sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub image_extent: usize,
    pub channels: usize,
    pub base_channels: usize,
    pub condition_dim: usize,
    pub cond_channels: usize,
    pub convs: Vec<DiscBlock>,
    pub cond_weight: Tensor, // [T, cond_channels]
    pub cond_bias: Tensor,   // [cond_channels]
    pub post_kernel: Tensor, // [feat, feat+cond_channels, 1, 1]
    pub post_bn: BatchNormLayer,
    pub out_weight: Tensor, // [feat*16, 1]
    pub out_bias: Tensor,   // [1]
}

pub fn init_discriminator(
    image_extent: usize,
    channels: usize,
    base_channels: usize,
    condition_dim: usize,
    seed: u64,
) -> Result<DiscriminatorParams> {
    init_discriminator_with(
        image_extent,
        channels,
        base_channels,
        condition_dim,
        DEFAULT_COND_CHANNELS,
        seed,
    )
}

/// As [`init_discriminator`] with an explicit condition-channel count.
pub fn init_discriminator_with(
    image_extent: usize,
    channels: usize,
    base_channels: usize,
    condition_dim: usize,
    cond_channels: usize,
    seed: u64,
) -> Result<DiscriminatorParams> {
    if channels == 0 || base_channels == 0 || condition_dim == 0 || cond_channels == 0 {
        return Err(Error::arg("discriminator dims must be positive".to_string()));
    }
    let levels = check_extent(image_extent)?;
    let mut r = rng::stream(seed, "disc-init", 0);
    let mut convs = Vec::new();
    let mut ch_in = channels;
    let mut ch_out = base_channels;
    for i in 0..levels {
        convs.push(DiscBlock {
            kernel: Tensor::new(
                vec![ch_out, ch_in, 4, 4],
                rng::normal_vec(&mut r, ch_out * ch_in * 16, INIT_STDDEV),
            )?,
            bn: if i == 0 {
                None
            } else {
                Some(BatchNormLayer::new(ch_out))
            },
        });
        ch_in = ch_out;
        ch_out *= 2;
    }
    let feat = ch_in;
    let cond_weight = Tensor::new(
        vec![condition_dim, cond_channels],
        rng::normal_vec(&mut r, condition_dim * cond_channels, INIT_STDDEV),
    )?;
    let post_kernel = Tensor::new(
        vec![feat, feat + cond_channels, 1, 1],
        rng::normal_vec(&mut r, feat * (feat + cond_channels), INIT_STDDEV),
    )?;
    let out_weight = Tensor::new(
        vec![feat * 16, 1],
        rng::normal_vec(&mut r, feat * 16, INIT_STDDEV),
    )?;
    Ok(DiscriminatorParams {
        image_extent,
        channels,
        base_channels,
        condition_dim,
        cond_channels,
        convs,
        cond_weight,
        cond_bias: Tensor::zeros(&[cond_channels]),
        post_kernel,
        post_bn: BatchNormLayer::new(feat),
        out_weight,
        out_bias: Tensor::zeros(&[1]),
    })
}

impl DiscriminatorParams {
    fn feat_channels(&self) -> usize {
        self.convs.last().map(|b| b.kernel.shape()[0]).unwrap_or(0)
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &b.kernel));
            if let Some(bn) = &b.bn {
                out.push((format!("conv{i}.bn.gamma"), &bn.gamma));
                out.push((format!("conv{i}.bn.beta"), &bn.beta));
            }
        }
        out.push(("cond.weight".to_string(), &self.cond_weight));
        out.push(("cond.bias".to_string(), &self.cond_bias));
        out.push(("post.kernel".to_string(), &self.post_kernel));
        out.push(("post_bn.gamma".to_string(), &self.post_bn.gamma));
        out.push(("post_bn.beta".to_string(), &self.post_bn.beta));
        out.push(("out.weight".to_string(), &self.out_weight));
        out.push(("out.bias".to_string(), &self.out_bias));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut b.kernel));
            if let Some(bn) = &mut b.bn {
                out.push((format!("conv{i}.bn.gamma"), &mut bn.gamma));
                out.push((format!("conv{i}.bn.beta"), &mut bn.beta));
            }
        }
        out.push(("cond.weight".to_string(), &mut self.cond_weight));
        out.push(("cond.bias".to_string(), &mut self.cond_bias));
        out.push(("post.kernel".to_string(), &mut self.post_kernel));
        out.push(("post_bn.gamma".to_string(), &mut self.post_bn.gamma));
        out.push(("post_bn.beta".to_string(), &mut self.post_bn.beta));
        out.push(("out.weight".to_string(), &mut self.out_weight));
        out.push(("out.bias".to_string(), &mut self.out_bias));
        out
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.convs.iter().enumerate() {
            if let Some(bn) = &b.bn {
                let r = bn.running.borrow();
                out.push((format!("conv{i}.bn.running_mean"), r.mean.clone()));
                out.push((format!("conv{i}.bn.running_var"), r.var.clone()));
            }
        }
        let r = self.post_bn.running.borrow();
        out.push(("post_bn.running_mean".to_string(), r.mean.clone()));
        out.push(("post_bn.running_var".to_string(), r.var.clone()));
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let (prefix, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let bn = if prefix == "post_bn" {
            Some(&self.post_bn)
        } else if let Some(rest) = prefix.strip_prefix("conv") {
            rest.strip_suffix(".bn")
                .and_then(|s| s.parse::<usize>().ok())
                .and_then(|idx| self.convs.get(idx))
                .and_then(|b| b.bn.as_ref())
        } else {
            None
        };
        let bn = bn.ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let mut running = bn.running.borrow_mut();
        let slot = match field {
            "running_mean" => &mut running.mean,
            "running_var" => &mut running.var,
            _ => return Err(Error::Checkpoint(format!("unknown buffer {name:?}"))),
        };
        if slot.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "buffer {name:?} expects {} values, got {}",
                slot.len(),
                data.len()
            )));
        }
        *slot = data;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> DiscriminatorBinding {
        let convs = self
            .convs
            .iter()
            .map(|b| {
                (
                    tape.leaf_tensor(&b.kernel, track),
                    b.bn.as_ref().map(|bn| {
                        (
                            tape.leaf_tensor(&bn.gamma, track),
                            tape.leaf_tensor(&bn.beta, track),
                        )
                    }),
                )
            })
            .collect();
        DiscriminatorBinding {
            convs,
            cond_weight: tape.leaf_tensor(&self.cond_weight, track),
            cond_bias: tape.leaf_tensor(&self.cond_bias, track),
            post_kernel: tape.leaf_tensor(&self.post_kernel, track),
            post_bn: (
                tape.leaf_tensor(&self.post_bn.gamma, track),
                tape.leaf_tensor(&self.post_bn.beta, track),
            ),
            out_weight: tape.leaf_tensor(&self.out_weight, track),
            out_bias: tape.leaf_tensor(&self.out_bias, track),
        }
    }
}

/// On-tape leaf ids for one discriminator forward pass.
pub struct DiscriminatorBinding {
    convs: Vec<(TensorId, Option<(TensorId, TensorId)>)>,
    cond_weight: TensorId,
    cond_bias: TensorId,
    post_kernel: TensorId,
    post_bn: (TensorId, TensorId),
    out_weight: TensorId,
    out_bias: TensorId,
}

impl DiscriminatorBinding {
    /// Rebuilds a binding from leaves already on the tape, in
    /// [`DiscriminatorParams::trainable`] order.
    pub fn from_leaves(dp: &DiscriminatorParams, ids: &[TensorId]) -> DiscriminatorBinding {
        let mut it = ids.iter().copied();
        let convs = dp
            .convs
            .iter()
            .map(|b| {
                let k = it.next().expect("conv kernel leaf");
                let bn = b
                    .bn
                    .as_ref()
                    .map(|_| (it.next().unwrap(), it.next().unwrap()));
                (k, bn)
            })
            .collect();
        DiscriminatorBinding {
            convs,
            cond_weight: it.next().unwrap(),
            cond_bias: it.next().unwrap(),
            post_kernel: it.next().unwrap(),
            post_bn: (it.next().unwrap(), it.next().unwrap()),
            out_weight: it.next().unwrap(),
            out_bias: it.next().unwrap(),
        }
    }

    /// Flat ids in [`DiscriminatorParams::trainable`] order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for (k, bn) in &self.convs {
            out.push(*k);
            if let Some((g, b)) = bn {
                out.extend([*g, *b]);
            }
        }
        out.extend([
            self.cond_weight,
            self.cond_bias,
            self.post_kernel,
            self.post_bn.0,
            self.post_bn.1,
            self.out_weight,
            self.out_bias,
        ]);
        out
    }
}

/// Forward pass: `images` is `[N,C,H,W]`, `y` is `[N,T]`; returns `[N]`
/// probabilities in the open interval `(0,1)`.
pub fn discriminator_forward(
    tape: &mut Tape,
    dp: &DiscriminatorParams,
    db: &DiscriminatorBinding,
    images: TensorId,
    y: TensorId,
    mode: NetMode,
) -> Result<TensorId> {
    let si = tape.shape(images).to_vec();
    if si.len() != 4
        || si[1] != dp.channels
        || si[2] != dp.image_extent
        || si[3] != dp.image_extent
    {
        return Err(Error::shape(format!(
            "discriminator expects [N,{},{},{}] images, got {si:?}",
            dp.channels, dp.image_extent, dp.image_extent
        )));
    }
    let sy = tape.shape(y).to_vec();
    if sy.len() != 2 || sy[0] != si[0] || sy[1] != dp.condition_dim {
        return Err(Error::shape(format!(
            "discriminator expects [N,{}] conditions, got {sy:?}",
            dp.condition_dim
        )));
    }
    let n = si[0];

    let mut x = images;
    for (block, (k, bn_ids)) in dp.convs.iter().zip(&db.convs) {
        x = tape.conv2d(x, *k, 2, 1)?;
        if let (Some(bn), Some((g, b))) = (&block.bn, bn_ids) {
            x = bn.apply(tape, x, *g, *b, mode)?;
        }
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
    }

    // Condition: project, nonlinearity, replicate over the 4x4 map, concat.
    let yp = tape.matmul(y, db.cond_weight)?;
    let yp = tape.add(yp, db.cond_bias)?;
    let yp = tape.leaky_relu(yp, LEAKY_SLOPE)?;
    let ymap = tape.broadcast_hw(yp, 4, 4)?;
    x = tape.concat(&[x, ymap], 1)?;

    x = tape.conv2d(x, db.post_kernel, 1, 0)?;
    x = dp.post_bn.apply(tape, x, db.post_bn.0, db.post_bn.1, mode)?;
    x = tape.leaky_relu(x, LEAKY_SLOPE)?;

    let feat = dp.feat_channels();
    let flat = tape.reshape(x, &[n, feat * 16])?;
    let logits = tape.matmul(flat, db.out_weight)?;
    let logits = tape.add(logits, db.out_bias)?;
    let probs = tape.sigmoid(logits)?;
    tape.reshape(probs, &[n])
}

// ── Objectives ──────────────────────────────────────────────────────────

/// `log(p)` (or `log(1 - p)`) with `p` clamped away from 0 and 1.
pub fn clamped_log(tape: &mut Tape, p: TensorId, one_minus: bool) -> Result<TensorId> {
    let clamped = tape.clamp(p, PROB_EPSILON, 1.0 - PROB_EPSILON)?;
    let arg = if one_minus {
        let ones = tape.filled(tape.shape(clamped).to_vec().as_slice(), 1.0);
        tape.sub(ones, clamped)?
    } else {
        clamped
    };
    tape.log(arg)
}

/// The discriminator's three-term objective, averaged over the batch:
/// `mean[ log d_real + (1/n) sum_t log(1 - d_fake_t) + log(1 - d_mismatch) ]`.
/// The discriminator ascends this value.
pub fn discriminator_objective(
    tape: &mut Tape,
    d_real: TensorId,
    d_fake_per_word: &[TensorId],
    d_mismatch: TensorId,
) -> Result<TensorId> {
    if d_fake_per_word.is_empty() {
        return Err(Error::arg("objective needs at least one word term".to_string()));
    }
    let shape = tape.shape(d_real).to_vec();
    for &t in d_fake_per_word.iter().chain([&d_mismatch]) {
        if tape.shape(t) != shape.as_slice() {
            return Err(Error::shape(format!(
                "objective probability shapes differ: {:?} vs {shape:?}",
                tape.shape(t)
            )));
        }
    }
    let real_log = clamped_log(tape, d_real, false)?;
    let mut total = tape.mean_all(real_log)?;

    let inv_n = 1.0 / d_fake_per_word.len() as f64;
    for &d_fake in d_fake_per_word {
        let fake_log = clamped_log(tape, d_fake, true)?;
        let fake_mean = tape.mean_all(fake_log)?;
        let scaled = tape.scale(fake_mean, inv_n)?;
        total = tape.add(total, scaled)?;
    }

    let mm_log = clamped_log(tape, d_mismatch, true)?;
    let mm_mean = tape.mean_all(mm_log)?;
    tape.add(total, mm_mean)
}

/// The generator/LSTM objective `mean[(1/n) sum_t log(1 - d_fake_t)]`,
/// descended by both.
pub fn generator_objective(tape: &mut Tape, d_fake_per_word: &[TensorId]) -> Result<TensorId> {
    if d_fake_per_word.is_empty() {
        return Err(Error::arg("objective needs at least one word term".to_string()));
    }
    let shape = tape.shape(d_fake_per_word[0]).to_vec();
    let inv_n = 1.0 / d_fake_per_word.len() as f64;
    let mut total: Option<TensorId> = None;
    for &d_fake in d_fake_per_word {
        if tape.shape(d_fake) != shape.as_slice() {
            return Err(Error::shape(format!(
                "objective probability shapes differ: {:?} vs {shape:?}",
                tape.shape(d_fake)
            )));
        }
        let fake_log = clamped_log(tape, d_fake, true)?;
        let fake_mean = tape.mean_all(fake_log)?;
        let scaled = tape.scale(fake_mean, inv_n)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap())
}

// ── Per-word sequence generation ────────────────────────────────────────

/// Tokenizes a sentence and produces one image per word prefix: token `k`'s
/// image is generated from the hidden state after consuming words `1..=k`.
/// Runs in eval mode; deterministic for a fixed parameter set.
pub fn generate_sequence(
    lstm_params: &LstmParams,
    gp: &GeneratorParams,
    table: &WordEmbeddingTable,
    sentence: &str,
) -> Result<Vec<Tensor>> {
    let tokens = tokenize(sentence);
    if tokens.is_empty() {
        return Err(Error::arg(format!(
            "sentence {sentence:?} contains no words"
        )));
    }
    let vectors = embed_words(table, &tokens)?;
    let xs: Vec<Tensor> = vectors
        .iter()
        .map(|v| Tensor::new(vec![1, table.dimension()], v.data().to_vec()))
        .collect::<Result<_>>()?;
    let hs = lstm::unroll_values(lstm_params, &xs)?;

    // Stack hidden states into one [n, Z] batch; eval-mode batch norm keeps
    // rows independent, so this matches per-word forwards exactly.
    let n = hs.len();
    let z = lstm_params.hidden_dim;
    let mut stacked = Vec::with_capacity(n * z);
    for h in &hs {
        stacked.extend_from_slice(h.data());
    }
    let mut tape = Tape::new();
    let gb = gp.bind(&mut tape, false);
    let h_id = tape.new_tensor(vec![n, z], stacked, false)?;
    let imgs = generator_forward(&mut tape, gp, &gb, h_id, NetMode::Eval)?;
    let data = tape.value(imgs);
    let (c, e) = (gp.channels, gp.image_extent);
    let img_sz = c * e * e;
    (0..n)
        .map(|i| Tensor::new(vec![c, e, e], data[i * img_sz..(i + 1) * img_sz].to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn generator_layer_counts_follow_extent() {
        let g64 = init_generator(16, 64, 3, 8, 0).unwrap();
        assert_eq!(g64.blocks.len() + 1, 4);
        assert_eq!(g64.start_channels(), 8 * 8);
        let g32 = init_generator(16, 32, 3, 8, 0).unwrap();
        assert_eq!(g32.blocks.len() + 1, 3);
        let g8 = init_generator(16, 8, 3, 4, 0).unwrap();
        assert_eq!(g8.blocks.len() + 1, 1);
        assert!(init_generator(16, 48, 3, 8, 0).is_err());
        assert!(init_generator(16, 4, 3, 8, 0).is_err());
    }

    #[test]
    fn inits_are_seed_deterministic() {
        let a = init_generator(8, 32, 3, 4, 5).unwrap();
        let b = init_generator(8, 32, 3, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_generator(8, 32, 3, 4, 6).unwrap());
        let d1 = init_discriminator(32, 3, 4, 8, 5).unwrap();
        let d2 = init_discriminator(32, 3, 4, 8, 5).unwrap();
        assert_eq!(d1, d2);
        assert_ne!(d1, init_discriminator(32, 3, 4, 8, 6).unwrap());
    }

    #[test]
    fn discriminator_layer_counts_follow_extent() {
        let d64 = init_discriminator(64, 3, 8, 16, 0).unwrap();
        assert_eq!(d64.convs.len(), 4);
        assert!(d64.convs[0].bn.is_none());
        assert!(d64.convs[1..].iter().all(|b| b.bn.is_some()));
        assert_eq!(d64.cond_weight.shape(), &[16, DEFAULT_COND_CHANNELS]);
        let d32 = init_discriminator(32, 3, 8, 16, 0).unwrap();
        assert_eq!(d32.convs.len(), 3);
    }

    #[test]
    fn zeroed_generator_emits_zero_images_with_default_shape() {
        let mut gp = init_generator(8, 64, 3, 4, 0).unwrap();
        for (_, t) in gp.trainable_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let gb = gp.bind(&mut tape, false);
        let h = tape.new_tensor(vec![2, 8], vec![0.3; 16], false).unwrap();
        let img = generator_forward(&mut tape, &gp, &gb, h, NetMode::Eval).unwrap();
        assert_eq!(tape.shape(img), &[2, 3, 64, 64]);
        assert!(tape.value(img).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_output_stays_in_range() {
        let gp = init_generator(6, 16, 3, 4, 3).unwrap();
        let mut tape = Tape::new();
        let gb = gp.bind(&mut tape, false);
        let mut r = rng::stream(1, "range", 0);
        let h = tape
            .new_tensor(vec![3, 6], rng::normal_vec(&mut r, 18, 2.0), false)
            .unwrap();
        let img = generator_forward(&mut tape, &gp, &gb, h, NetMode::TrainFrozen).unwrap();
        assert!(tape.value(img).iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn zeroed_discriminator_outputs_half() {
        let mut dp = init_discriminator(16, 3, 4, 6, 0).unwrap();
        for (_, t) in dp.trainable_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let db = dp.bind(&mut tape, false);
        let imgs = tape.new_tensor(vec![2, 3, 16, 16], vec![0.25; 2 * 3 * 256], false).unwrap();
        let y = tape.new_tensor(vec![2, 6], vec![0.5; 12], false).unwrap();
        let p = discriminator_forward(&mut tape, &dp, &db, imgs, y, NetMode::Eval).unwrap();
        assert_eq!(tape.shape(p), &[2]);
        assert!(tape.value(p).iter().all(|&v| close(v, 0.5, 1e-15)));
    }

    #[test]
    fn discriminator_outputs_open_interval_and_reads_condition() {
        let dp = init_discriminator(16, 3, 4, 6, 9).unwrap();
        let mut r = rng::stream(2, "dsens", 0);
        let img_data = rng::uniform_vec(&mut r, 2 * 3 * 256, 1.0);
        let y1_data = rng::normal_vec(&mut r, 12, 1.0);
        let mut y2_data = y1_data.clone();
        y2_data[0] += 1.0;

        let run = |y_data: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let db = dp.bind(&mut tape, false);
            let imgs = tape
                .new_tensor(vec![2, 3, 16, 16], img_data.clone(), false)
                .unwrap();
            let y = tape.new_tensor(vec![2, 6], y_data.to_vec(), false).unwrap();
            let p = discriminator_forward(&mut tape, &dp, &db, imgs, y, NetMode::TrainFrozen).unwrap();
            tape.value(p).to_vec()
        };
        let p1 = run(&y1_data);
        let p2 = run(&y2_data);
        assert!(p1.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_ne!(p1, p2, "condition vector must influence the output");
    }

    #[test]
    fn objective_analytic_anchors() {
        let mut tape = Tape::new();
        let half = tape.new_tensor(vec![4], vec![0.5; 4], false).unwrap();
        let obj = discriminator_objective(&mut tape, half, &[half, half, half], half).unwrap();
        assert!(close(tape.value(obj)[0], 3.0 * 0.5f64.ln(), 1e-12));
        assert!(close(tape.value(obj)[0], -2.07944, 1e-5));

        let gobj = generator_objective(&mut tape, &[half]).unwrap();
        assert!(close(tape.value(gobj)[0], 0.5f64.ln(), 1e-12));
        assert!(close(tape.value(gobj)[0], -0.69315, 1e-5));
    }

    #[test]
    fn objective_two_word_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.new_tensor(vec![1], vec![0.25], false).unwrap();
        let b = tape.new_tensor(vec![1], vec![0.75], false).unwrap();
        let gobj = generator_objective(&mut tape, &[a, b]).unwrap();
        let want = (0.75f64.ln() + 0.25f64.ln()) / 2.0;
        assert!(close(tape.value(gobj)[0], want, 1e-12));
        assert!(close(want, -0.83699, 1e-5));
    }

    #[test]
    fn objective_supremum_at_confident_corner() {
        // d_real -> 1, d_fake -> 0, d_mismatch -> 0 drives the objective to
        // its supremum of 0 (up to the probability clamp).
        let mut tape = Tape::new();
        let one = tape.new_tensor(vec![1], vec![1.0], false).unwrap();
        let zero = tape.new_tensor(vec![1], vec![0.0], false).unwrap();
        let obj = discriminator_objective(&mut tape, one, &[zero], zero).unwrap();
        assert!(tape.value(obj)[0].abs() < 1e-6);

        // generator objective at d_fake -> 1 is bounded by the clamp
        let gobj = generator_objective(&mut tape, &[one]).unwrap();
        assert!(close(tape.value(gobj)[0], PROB_EPSILON.ln(), 1e-6));
    }

    #[test]
    fn objective_grid_maximum_sits_at_corner() {
        let grid = [0.05, 0.3, 0.5, 0.7, 0.95];
        let mut best = f64::NEG_INFINITY;
        let mut best_at = (0.0, 0.0, 0.0);
        for &dr in &grid {
            for &df in &grid {
                for &dm in &grid {
                    let mut tape = Tape::new();
                    let r = tape.new_tensor(vec![1], vec![dr], false).unwrap();
                    let f = tape.new_tensor(vec![1], vec![df], false).unwrap();
                    let m = tape.new_tensor(vec![1], vec![dm], false).unwrap();
                    let obj = discriminator_objective(&mut tape, r, &[f], m).unwrap();
                    let v = tape.value(obj)[0];
                    if v > best {
                        best = v;
                        best_at = (dr, df, dm);
                    }
                }
            }
        }
        assert_eq!(best_at, (0.95, 0.05, 0.05));
    }

    #[test]
    fn objective_matches_direct_formula_oracle() {
        // Direct evaluation with plain loops, no tape involved.
        let mut r = rng::stream(3, "obj-oracle", 0);
        let m = 5;
        let n = 4;
        let rand_probs = |r: &mut rand_chacha::ChaCha20Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| rand::Rng::random_range(r, 0.01..0.99)).collect()
        };
        let d_real = rand_probs(&mut r, m);
        let d_mm = rand_probs(&mut r, m);
        let d_fakes: Vec<Vec<f64>> = (0..n).map(|_| rand_probs(&mut r, m)).collect();

        let mut want_d = 0.0;
        let mut want_g = 0.0;
        for i in 0..m {
            let mut s = d_real[i].ln() + (1.0 - d_mm[i]).ln();
            let mut fsum = 0.0;
            for t in 0..n {
                fsum += (1.0 - d_fakes[t][i]).ln();
            }
            s += fsum / n as f64;
            want_d += s;
            want_g += fsum / n as f64;
        }
        want_d /= m as f64;
        want_g /= m as f64;

        let mut tape = Tape::new();
        let real = tape.new_tensor(vec![m], d_real, false).unwrap();
        let mm = tape.new_tensor(vec![m], d_mm, false).unwrap();
        let fakes: Vec<TensorId> = d_fakes
            .iter()
            .map(|f| tape.new_tensor(vec![m], f.clone(), false).unwrap())
            .collect();
        let obj = discriminator_objective(&mut tape, real, &fakes, mm).unwrap();
        assert!(close(tape.value(obj)[0], want_d, 1e-12));
        let gobj = generator_objective(&mut tape, &fakes).unwrap();
        assert!(close(tape.value(gobj)[0], want_g, 1e-12));
    }

    #[test]
    fn generate_sequence_counts_and_prefix_consistency() {
        let table = WordEmbeddingTable::new(6, 11).unwrap();
        let lstm_params = crate::lstm::init_lstm(6, 5, 21, 0.2).unwrap();
        let gp = init_generator(5, 16, 3, 4, 22).unwrap();
        let sentence = "one small red circle on a white background";
        let imgs = generate_sequence(&lstm_params, &gp, &table, sentence).unwrap();
        assert_eq!(imgs.len(), 8);
        for img in &imgs {
            assert_eq!(img.shape(), &[3, 16, 16]);
        }
        let again = generate_sequence(&lstm_params, &gp, &table, sentence).unwrap();
        assert_eq!(imgs, again);

        // image k of the full sentence equals image k of the k-word prefix
        let prefix = "one small red";
        let trunc = generate_sequence(&lstm_params, &gp, &table, prefix).unwrap();
        assert_eq!(trunc.len(), 3);
        for k in 0..3 {
            assert_eq!(trunc[k], imgs[k], "prefix image {k} differs");
        }

        assert!(generate_sequence(&lstm_params, &gp, &table, "  !!  ").is_err());
    }
}
