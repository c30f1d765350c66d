//! The network forward passes: encoder, multi-kernel deformable unit,
//! cross-branch attention, multiplicative reweighting, residual blocks, and
//! the quality head. One `Forward` instance runs one computation over a
//! shared weight map and remembers which parameters it touched so the
//! caller can collect their gradients by path afterwards.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{PbanError, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

use super::config::{AttentionMode, PBANConfig, Variant};
use super::params::{branch_has_key, is_trainable, join, NamedWeights};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Guard added to the logit variance before the reciprocal square root.
pub const VARIANCE_EPS: f64 = 1e-8;

/// Stage names used by the feature-dump capture hook, in pipeline order.
pub const STAGE_LABELS: [&str; 5] = [
    "image before PBA",
    "K after GMDC",
    "after Bi-Atten",
    "after SubEC",
    "after PBA block",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Observer invoked with (branch, block index, stage label, feature map).
pub type Capture<'a, T> = dyn FnMut(&str, usize, &str, &Tensor<T>) + 'a;

/// One forward computation. Train mode tracks parameters on the tape,
/// normalizes with batch statistics (collecting running-stat proposals), and
/// draws dropout masks from the supplied stream; eval mode records nothing
/// and is deterministic.
pub struct Forward<'a, T: Scalar> {
    weights: &'a NamedWeights<T>,
    cfg: &'a PBANConfig,
    mode: RunMode,
    tape: Option<Tape<T>>,
    rng: Option<&'a mut ChaCha8Rng>,
    vars: BTreeMap<String, Var<T>>,
    bn_updates: Vec<(String, Tensor<T>, Tensor<T>)>,
    capture: Option<&'a mut Capture<'a, T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn eval(weights: &'a NamedWeights<T>, cfg: &'a PBANConfig) -> Self {
        Forward {
            weights,
            cfg,
            mode: RunMode::Eval,
            tape: None,
            rng: None,
            vars: BTreeMap::new(),
            bn_updates: Vec::new(),
            capture: None,
        }
    }

    pub fn train(
        weights: &'a NamedWeights<T>,
        cfg: &'a PBANConfig,
        tape: Tape<T>,
        rng: Option<&'a mut ChaCha8Rng>,
    ) -> Self {
        Forward {
            weights,
            cfg,
            mode: RunMode::Train,
            tape: Some(tape),
            rng,
            vars: BTreeMap::new(),
            bn_updates: Vec::new(),
            capture: None,
        }
    }

    pub fn with_capture(mut self, capture: &'a mut Capture<'a, T>) -> Self {
        self.capture = Some(capture);
        self
    }

    fn observe(&mut self, branch: &str, block: usize, label: &str, x: &Var<T>) {
        if let Some(cb) = self.capture.as_mut() {
            cb(branch, block, label, x.value());
        }
    }

    /// Fetches a parameter as a tape leaf (train) or constant (eval),
    /// caching so repeated use shares one node and gradients accumulate.
    fn param(&mut self, path: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.get(path) {
            return Ok(v.clone());
        }
        let tensor = self.weights.require(path)?.clone();
        let var = match &self.tape {
            Some(tape) if is_trainable(path) => tape.leaf(tensor),
            _ => Var::constant(tensor),
        };
        self.vars.insert(path.to_string(), var.clone());
        Ok(var)
    }

    fn conv(&mut self, x: &Var<T>, prefix: &str, groups: usize) -> Result<Var<T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        ops::conv2d(x, &w, &b, groups)
    }

    fn linear(&mut self, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        ops::linear(x, &w, &b)
    }

    fn batch_norm(&mut self, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean = self.weights.require(&format!("{prefix}.running_mean"))?;
        let var = self.weights.require(&format!("{prefix}.running_var"))?;
        let mode = match self.mode {
            RunMode::Train => ops::BatchNormMode::Train,
            RunMode::Eval => ops::BatchNormMode::Eval,
        };
        let out = ops::batch_norm(
            x,
            &gamma,
            &beta,
            mean,
            var,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        if let Some((new_mean, new_var)) = out.stat_updates {
            self.bn_updates.push((prefix.to_string(), new_mean, new_var));
        }
        Ok(out.y)
    }

    fn dropout(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let p = self.cfg.dropout_p;
        if self.mode == RunMode::Eval || p == 0.0 {
            return Ok(x.clone());
        }
        let rng = self.rng.as_mut().ok_or_else(|| {
            PbanError::Contract("train-mode dropout requires an RNG stream".into())
        })?;
        ops::dropout(x, p, true, rng)
    }

    /// 3x3 conv, batch norm, ReLU. Accepts any spatial size the head can
    /// pool (the training pipeline feeds fixed-size patches; gradient checks
    /// use smaller ones).
    fn encoder(&mut self, x: &Var<T>, branch: &str) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(PbanError::Dimension {
                op: "encoder",
                msg: format!("expected [B,3,H,W] patches, got {shape:?}"),
            });
        }
        if shape[2] < self.cfg.pool_out.0 || shape[3] < self.cfg.pool_out.1 {
            return Err(PbanError::Dimension {
                op: "encoder",
                msg: format!(
                    "spatial size {}x{} is smaller than the head pool {:?}",
                    shape[2], shape[3], self.cfg.pool_out
                ),
            });
        }
        let y = self.conv(x, &join(branch, "encoder.conv"), 1)?;
        let y = self.batch_norm(&y, &join(branch, "encoder.bn"))?;
        ops::relu(&y)
    }

    /// Multi-kernel deformable unit: per channel group, a conv predicts
    /// per-tap offsets and modulation logits from the group's own features,
    /// a deformable conv of that group's kernel edge consumes them, and a
    /// point-wise conv fuses the concatenated groups.
    fn gmdc(&mut self, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        let cg = self.cfg.gmdc_group_width();
        let kernels = self.cfg.gmdc_kernels.clone();
        let mut parts = Vec::with_capacity(kernels.len());
        for (gi, &edge) in kernels.iter().enumerate() {
            let taps = edge * edge;
            let xg = ops::narrow(x, 1, gi * cg, cg)?;
            let field = self.conv(&xg, &format!("{prefix}.group{gi}.offset_conv"), 1)?;
            let offsets = ops::narrow(&field, 1, 0, 2 * taps)?;
            let modulation = ops::sigmoid(&ops::narrow(&field, 1, 2 * taps, taps)?)?;
            let w = self.param(&format!("{prefix}.group{gi}.deform.weight"))?;
            let b = self.param(&format!("{prefix}.group{gi}.deform.bias"))?;
            parts.push(ops::deform_conv2d(&xg, &w, &b, &offsets, &modulation, 1)?);
        }
        let refs: Vec<&Var<T>> = parts.iter().collect();
        let cat = ops::concat(&refs, 1)?;
        self.conv(&cat, &format!("{prefix}.fuse"), 1)
    }

    /// Key production for one branch: 3x3 conv then the deformable unit.
    fn key(&mut self, x: &Var<T>, branch: &str, block: usize) -> Result<Var<T>> {
        let prefix = join(branch, &format!("block{block}.biatten"));
        let k = self.conv(x, &format!("{prefix}.k_conv"), 1)?;
        let k = self.gmdc(&k, &format!("{prefix}.gmdc"))?;
        self.observe(branch, block, STAGE_LABELS[1], &k);
        Ok(k)
    }

    /// Scaled token attention for one branch given its Query source and the
    /// Key/Value feature maps routed to it.
    fn attend(&mut self, x: &Var<T>, k: &Var<T>, v: &Var<T>, branch: &str, block: usize) -> Result<Var<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let prefix = join(branch, &format!("block{block}.biatten"));
        let q = self.conv(x, &format!("{prefix}.q_conv"), 1)?;
        let map = attention_weights(&ops::nchw_to_tokens(&q)?, &ops::nchw_to_tokens(k)?)?;
        let out = attention_apply(&map, &ops::nchw_to_tokens(v)?)?;
        let out = ops::tokens_to_nchw(&out, h, w)?;
        self.observe(branch, block, STAGE_LABELS[2], &out);
        Ok(out)
    }

    /// Cross-branch attention of one block. Queries stay home; the mode
    /// decides which branch's Key (and, for `KvHomology`, Value) each side
    /// consumes.
    fn bi_atten(&mut self, x_hr: &Var<T>, x_sr: &Var<T>, block: usize) -> Result<(Var<T>, Var<T>)> {
        let mode = self.cfg.attention_mode;
        let v_hr = self.conv(x_hr, &format!("hr.block{block}.biatten.v_conv"), 1)?;
        let v_sr = self.conv(x_sr, &format!("sr.block{block}.biatten.v_conv"), 1)?;
        let k_hr = if branch_has_key(self.cfg, "hr") {
            Some(self.key(x_hr, "hr", block)?)
        } else {
            None
        };
        let k_sr = if branch_has_key(self.cfg, "sr") {
            Some(self.key(x_sr, "sr", block)?)
        } else {
            None
        };
        let own = |k: &Option<Var<T>>| k.clone().expect("key path present by enumeration");
        let (k_for_hr, k_for_sr) = match mode {
            AttentionMode::Bidirectional | AttentionMode::KvHomology => (own(&k_sr), own(&k_hr)),
            AttentionMode::SelfAttention => (own(&k_hr), own(&k_sr)),
            AttentionMode::HrToSr => (own(&k_hr), own(&k_hr)),
            AttentionMode::SrToHr => (own(&k_sr), own(&k_sr)),
        };
        let (v_for_hr, v_for_sr) = match mode {
            AttentionMode::KvHomology => (&v_sr, &v_hr),
            _ => (&v_hr, &v_sr),
        };
        let o_hr = self.attend(x_hr, &k_for_hr, v_for_hr, "hr", block)?;
        let o_sr = self.attend(x_sr, &k_for_sr, v_for_sr, "sr", block)?;
        Ok((o_hr, o_sr))
    }

    /// Multiplicative reweighting: a sub-pixel spatial weight (channel
    /// squeeze, shuffle up, pool back down) and a sub-channel weight (global
    /// pool, grouped expansion, shuffle, fuse) scale the input map.
    fn subec(&mut self, x: &Var<T>, prefix: &str) -> Result<Var<T>> {
        let s = self.cfg.subec_upscale;
        let g = self.cfg.subec_groups;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let px = self.conv(x, &format!("{prefix}.px_conv1"), 1)?;
        let px = ops::relu(&px)?;
        let px = self.conv(&px, &format!("{prefix}.px_conv2"), 1)?;
        let px = ops::pixel_shuffle(&px, s)?;
        let w_px = ops::adaptive_avg_pool(&px, h, w)?;

        let ch = ops::adaptive_avg_pool(x, 1, 1)?;
        let ch = self.conv(&ch, &format!("{prefix}.ch_expand"), g)?;
        let ch = ops::channel_shuffle(&ch, g)?;
        let w_ch = self.conv(&ch, &format!("{prefix}.ch_fuse"), 1)?;

        let y = ops::mul(x, &w_ch)?;
        ops::mul(&y, &w_px)
    }

    fn block_branch_tail(
        &mut self,
        attended: &Var<T>,
        input: &Var<T>,
        branch: &str,
        block: usize,
    ) -> Result<Var<T>> {
        let prefix = join(branch, &format!("block{block}.subec"));
        let s = self.subec(attended, &prefix)?;
        self.observe(branch, block, STAGE_LABELS[3], &s);
        let o = ops::add(&s, input)?;
        self.observe(branch, block, STAGE_LABELS[4], &o);
        Ok(o)
    }

    fn block_fr(&mut self, x_hr: &Var<T>, x_sr: &Var<T>, block: usize) -> Result<(Var<T>, Var<T>)> {
        self.observe("hr", block, STAGE_LABELS[0], x_hr);
        self.observe("sr", block, STAGE_LABELS[0], x_sr);
        let (a_hr, a_sr) = self.bi_atten(x_hr, x_sr, block)?;
        let o_hr = self.block_branch_tail(&a_hr, x_hr, "hr", block)?;
        let o_sr = self.block_branch_tail(&a_sr, x_sr, "sr", block)?;
        Ok((o_hr, o_sr))
    }

    fn block_nr(&mut self, x: &Var<T>, block: usize) -> Result<Var<T>> {
        self.observe("", block, STAGE_LABELS[0], x);
        let v = self.conv(x, &format!("block{block}.biatten.v_conv"), 1)?;
        let k = self.key(x, "", block)?;
        let a = self.attend(x, &k, &v, "", block)?;
        self.block_branch_tail(&a, x, "", block)
    }

    /// Pool, flatten, two dropout-regularized linear+ReLU stages.
    fn head_branch(&mut self, o: &Var<T>, branch: &str) -> Result<Var<T>> {
        let (ph, pw) = self.cfg.pool_out;
        let pooled = ops::adaptive_avg_pool(o, ph, pw)?;
        let b = pooled.shape()[0];
        let flat = ops::reshape(&pooled, &[b, self.cfg.head_dims[0]])?;
        let h = self.linear(&flat, &join(branch, "head.fc1"))?;
        let h = ops::relu(&h)?;
        let h = self.dropout(&h)?;
        let h = self.linear(&h, &join(branch, "head.fc2"))?;
        let h = ops::relu(&h)?;
        self.dropout(&h)
    }

    /// Two stacked linear layers with no activation between them.
    fn fusion(&mut self, f: &Var<T>) -> Result<Var<T>> {
        let z = self.linear(f, "fusion.fc1")?;
        self.linear(&z, "fusion.fc2")
    }

    /// Two-branch forward: reference and distorted patches to [B,1] scores.
    pub fn fr(&mut self, hr: &Var<T>, sr: &Var<T>) -> Result<Var<T>> {
        if self.cfg.variant != Variant::Fr {
            return Err(PbanError::Contract(
                "two-branch forward invoked on a single-branch config".into(),
            ));
        }
        if hr.shape() != sr.shape() {
            return Err(PbanError::ShapeMismatch {
                op: "pban_forward",
                lhs: hr.shape().to_vec(),
                rhs: sr.shape().to_vec(),
            });
        }
        let mut x_hr = self.encoder(hr, "hr")?;
        let mut x_sr = self.encoder(sr, "sr")?;
        for b in 0..self.cfg.blocks {
            let (o_hr, o_sr) = self.block_fr(&x_hr, &x_sr, b)?;
            x_hr = o_hr;
            x_sr = o_sr;
        }
        let f_hr = self.head_branch(&x_hr, "hr")?;
        let f_sr = self.head_branch(&x_sr, "sr")?;
        let f = ops::concat(&[&f_hr, &f_sr], 1)?;
        self.fusion(&f)
    }

    /// Single-branch forward for the no-reference variant.
    pub fn nr(&mut self, x: &Var<T>) -> Result<Var<T>> {
        if self.cfg.variant != Variant::Nr {
            return Err(PbanError::Contract(
                "single-branch forward invoked on a two-branch config".into(),
            ));
        }
        let mut y = self.encoder(x, "")?;
        for b in 0..self.cfg.blocks {
            y = self.block_nr(&y, b)?;
        }
        let f = self.head_branch(&y, "")?;
        self.fusion(&f)
    }

    /// Gradients of every tracked parameter, keyed by path. Parameters the
    /// loss never touched come back as zeros.
    pub fn gradients_by_path(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(path, var)| is_trainable(path) && var.is_tracked())
            .map(|(path, var)| (path.clone(), grads.get_or_zeros(var)))
            .collect()
    }

    /// Running-stat proposals collected by train-mode batch norms, keyed by
    /// layer prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies collected batch-norm running-stat proposals to the weight map.
pub fn apply_bn_updates<T: Scalar>(
    weights: &mut NamedWeights<T>,
    updates: Vec<(String, Tensor<T>, Tensor<T>)>,
) {
    for (prefix, mean, var) in updates {
        weights.insert(format!("{prefix}.running_mean"), mean);
        weights.insert(format!("{prefix}.running_var"), var);
    }
}

/// Variance-scaled attention map over pixel tokens: row-softmax of
/// QK^T / sqrt(Var + eps), the variance taken per batch item over all of
/// that item's logits.
pub fn attention_weights<T: Scalar>(q_tokens: &Var<T>, k_tokens: &Var<T>) -> Result<Var<T>> {
    let logits = ops::bmm_nt(q_tokens, k_tokens)?;
    let d = ops::variance_per_item(&logits)?;
    let scale = ops::rsqrt_shift(&d, T::from_f64(VARIANCE_EPS))?;
    let b = logits.shape()[0];
    let scale = ops::reshape(&scale, &[b, 1, 1])?;
    let scaled = ops::mul(&logits, &scale)?;
    ops::softmax_rows(&scaled)
}

/// Applies an attention map to Value tokens.
pub fn attention_apply<T: Scalar>(map: &Var<T>, v_tokens: &Var<T>) -> Result<Var<T>> {
    ops::bmm(map, v_tokens)
}
