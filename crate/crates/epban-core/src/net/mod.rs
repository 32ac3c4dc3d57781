//! The full-reference quality network: a shared convolutional stem,
//! per-input residual branches, bi-directional axial cross-attention with
//! std-normalized scores, gated sub-pixel/sub-channel fusion, and a
//! pooled regression head producing one quality score per pair.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DropoutMode, Tensor};

/// Which input branch a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Sr,
    Hr,
}

/// Attention axis: H attends within columns, W within rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    H,
    W,
}

/// Cross-attention direction, named by which branch supplies the keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HrToSr,
    SrToHr,
}

/// Dropout behaviour for a whole forward pass.
pub enum RunMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl RunMode<'_> {
    fn dropout<T: Scalar>(&mut self, x: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
        match self {
            RunMode::Eval => x.dropout(p, DropoutMode::Eval),
            RunMode::Train(rng) => x.dropout(p, DropoutMode::Train(rng)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PbanConfig {
    /// Feature channels C; must be a multiple of 4 and at least 8.
    pub channels: usize,
    /// Stabilizer added to the per-matrix score std.
    pub eps: f64,
    /// Dropout probability in the quality head.
    pub dropout: f64,
}

impl Default for PbanConfig {
    fn default() -> Self {
        PbanConfig { channels: 16, eps: 1e-8, dropout: 0.2 }
    }
}

impl PbanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::InvalidArgument(format!(
                "channels {} too small: the head needs C >= 8",
                self.channels
            )));
        }
        if self.channels % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {} must be divisible by 4 (channel shuffle groups)",
                self.channels
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

pub(crate) struct ConvParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub(crate) struct LinearParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub(crate) struct ResidualBlock<T: Scalar> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.conv2d(&self.conv1.w, Some(&self.conv1.b), 1, 1)?.relu()?;
        let h = h.conv2d(&self.conv2.w, Some(&self.conv2.b), 1, 1)?;
        x.add(&h)?.relu()
    }
}

pub(crate) struct QkvProjection<T: Scalar> {
    pub q: ConvParams<T>,
    pub k: ConvParams<T>,
    pub v: ConvParams<T>,
}

pub(crate) struct SubecGates<T: Scalar> {
    /// Channel cue: shuffle -> pooled vector -> C-to-C linear -> sigmoid.
    pub channel_fc: LinearParams<T>,
    /// Spatial cue: unshuffle -> 4C 1x1 conv -> shuffle -> 1-channel 1x1 conv -> sigmoid.
    pub spatial_conv1: ConvParams<T>,
    pub spatial_conv2: ConvParams<T>,
}

pub(crate) struct DirectionHead<T: Scalar> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

/// Both attention outputs of the PBA+ block, same shape as the features.
pub struct AxialAttentionOutput<T: Scalar> {
    pub o_hr_to_sr: Tensor<T>,
    pub o_sr_to_hr: Tensor<T>,
}

/// All learnable parameters, grouped by the stage-freezable blocks.
pub struct PbanModel<T: Scalar> {
    pub cfg: PbanConfig,
    pub(crate) stem_conv: ConvParams<T>,
    pub(crate) stem_block: ResidualBlock<T>,
    pub(crate) branch_sr: ResidualBlock<T>,
    pub(crate) branch_hr: ResidualBlock<T>,
    pub(crate) proj_sr_h: QkvProjection<T>,
    pub(crate) proj_sr_w: QkvProjection<T>,
    pub(crate) proj_hr_h: QkvProjection<T>,
    pub(crate) proj_hr_w: QkvProjection<T>,
    pub(crate) subec_hr_to_sr: SubecGates<T>,
    pub(crate) subec_sr_to_hr: SubecGates<T>,
    pub(crate) head_hr_to_sr: DirectionHead<T>,
    pub(crate) head_sr_to_hr: DirectionHead<T>,
    pub(crate) joint_fc1: LinearParams<T>,
    pub(crate) joint_fc2: LinearParams<T>,
    trainable: bool,
}

impl<T: Scalar> std::fmt::Debug for PbanModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "PbanModel(C={}, eps={}, params={}, trainable={})",
            self.cfg.channels,
            self.cfg.eps,
            self.parameter_count(),
            self.trainable
        )
    }
}

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect()
}

// He-style uniform bound sqrt(6/fan_in): keeps activation variance
// roughly constant through the ReLU stacks so the pooled head stays
// sensitive to its inputs at initialization. Biases start at zero.
pub(crate) fn conv_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<ConvParams<T>> {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Ok(ConvParams {
        w: Tensor::from_vec(uniform_init(rng, c_out * c_in * k * k, bound), &[c_out, c_in, k, k])?
            .with_grad()?,
        b: Tensor::zeros(&[c_out]).with_grad()?,
    })
}

pub(crate) fn linear_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    dim_out: usize,
    dim_in: usize,
) -> Result<LinearParams<T>> {
    let bound = (6.0 / dim_in as f64).sqrt();
    Ok(LinearParams {
        w: Tensor::from_vec(uniform_init(rng, dim_out * dim_in, bound), &[dim_out, dim_in])?
            .with_grad()?,
        b: Tensor::zeros(&[dim_out]).with_grad()?,
    })
}

fn residual_init<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> Result<ResidualBlock<T>> {
    Ok(ResidualBlock {
        conv1: conv_init(rng, c, c, 3)?,
        conv2: conv_init(rng, c, c, 3)?,
    })
}

fn qkv_init<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> Result<QkvProjection<T>> {
    Ok(QkvProjection {
        q: conv_init(rng, c, c, 1)?,
        k: conv_init(rng, c, c, 1)?,
        v: conv_init(rng, c, c, 1)?,
    })
}

fn subec_init<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> Result<SubecGates<T>> {
    Ok(SubecGates {
        channel_fc: linear_init(rng, c, c)?,
        spatial_conv1: conv_init(rng, 4 * c, 4 * c, 1)?,
        spatial_conv2: conv_init(rng, 1, c, 1)?,
    })
}

fn head_init<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> Result<DirectionHead<T>> {
    Ok(DirectionHead {
        fc1: linear_init(rng, c / 2, c)?,
        fc2: linear_init(rng, c / 4, c / 2)?,
    })
}

impl<T: Scalar> PbanModel<T> {
    /// Fresh model with uniform +/- 1/sqrt(fan_in) init. The final joint
    /// bias starts at the middle of the MOS scale so regression does not
    /// spend epochs drifting from zero.
    pub fn new(cfg: PbanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let model = PbanModel {
            stem_conv: conv_init(rng, c, 3, 3)?,
            stem_block: residual_init(rng, c)?,
            branch_sr: residual_init(rng, c)?,
            branch_hr: residual_init(rng, c)?,
            proj_sr_h: qkv_init(rng, c)?,
            proj_sr_w: qkv_init(rng, c)?,
            proj_hr_h: qkv_init(rng, c)?,
            proj_hr_w: qkv_init(rng, c)?,
            subec_hr_to_sr: subec_init(rng, c)?,
            subec_sr_to_hr: subec_init(rng, c)?,
            head_hr_to_sr: head_init(rng, c)?,
            head_sr_to_hr: head_init(rng, c)?,
            joint_fc1: linear_init(rng, c / 4, c / 2)?,
            joint_fc2: linear_init(rng, 1, c / 4)?,
            cfg,
            trainable: true,
        };
        let mut bias = model.joint_fc2.b.to_vec();
        bias[0] = T::from_f64(3.0);
        model.joint_fc2.b.set_data(bias)?;
        Ok(model)
    }

    /// Every parameter with its stable name, in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Tensor<T>)>, name: &str, p: &ConvParams<T>| {
            out.push((format!("{name}.w"), p.w.clone()));
            out.push((format!("{name}.b"), p.b.clone()));
        };
        let lin = |out: &mut Vec<(String, Tensor<T>)>, name: &str, p: &LinearParams<T>| {
            out.push((format!("{name}.w"), p.w.clone()));
            out.push((format!("{name}.b"), p.b.clone()));
        };
        conv(&mut out, "stem.conv", &self.stem_conv);
        conv(&mut out, "stem.res.conv1", &self.stem_block.conv1);
        conv(&mut out, "stem.res.conv2", &self.stem_block.conv2);
        conv(&mut out, "branch_sr.conv1", &self.branch_sr.conv1);
        conv(&mut out, "branch_sr.conv2", &self.branch_sr.conv2);
        conv(&mut out, "branch_hr.conv1", &self.branch_hr.conv1);
        conv(&mut out, "branch_hr.conv2", &self.branch_hr.conv2);
        for (tag, proj) in [
            ("sr.h", &self.proj_sr_h),
            ("sr.w", &self.proj_sr_w),
            ("hr.h", &self.proj_hr_h),
            ("hr.w", &self.proj_hr_w),
        ] {
            conv(&mut out, &format!("proj.{tag}.q"), &proj.q);
            conv(&mut out, &format!("proj.{tag}.k"), &proj.k);
            conv(&mut out, &format!("proj.{tag}.v"), &proj.v);
        }
        for (tag, gates) in [
            ("hr2sr", &self.subec_hr_to_sr),
            ("sr2hr", &self.subec_sr_to_hr),
        ] {
            lin(&mut out, &format!("subec.{tag}.channel_fc"), &gates.channel_fc);
            conv(&mut out, &format!("subec.{tag}.spatial_conv1"), &gates.spatial_conv1);
            conv(&mut out, &format!("subec.{tag}.spatial_conv2"), &gates.spatial_conv2);
        }
        for (tag, head) in [
            ("hr2sr", &self.head_hr_to_sr),
            ("sr2hr", &self.head_sr_to_hr),
        ] {
            lin(&mut out, &format!("head.{tag}.fc1"), &head.fc1);
            lin(&mut out, &format!("head.{tag}.fc2"), &head.fc2);
        }
        lin(&mut out, "head.joint.fc1", &self.joint_fc1);
        lin(&mut out, "head.joint.fc2", &self.joint_fc2);
        out
    }

    /// Shared-stem parameters (the group frozen in training stage 1).
    pub fn stem_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("stem."))
            .collect()
    }

    pub fn non_stem_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("stem."))
            .collect()
    }

    /// Total learnable scalar count (independent of input H and W).
    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Freeze or thaw every parameter. Frozen parameters are excluded
    /// from gradient flow entirely.
    pub fn set_trainable(&mut self, trainable: bool) -> Result<()> {
        for (_, p) in self.named_parameters() {
            p.set_requires_grad(trainable)?;
        }
        self.trainable = trainable;
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Shared stem, then the per-branch residual blocks. Spatial dims
    /// must be equal and divisible by 4 (stride-2 stem times the
    /// sub-pixel shuffle factor downstream).
    pub fn extract_features(
        &self,
        x_sr: &Tensor<T>,
        x_hr: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if x_sr.shape() != x_hr.shape() {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: x_sr.shape().to_vec(),
                rhs: x_hr.shape().to_vec(),
            });
        }
        if x_sr.rank() != 4 || x_sr.shape()[1] != 3 {
            return Err(Error::InvalidShape {
                op: "extract_features",
                shape: x_sr.shape().to_vec(),
                msg: "expected [B,3,H,W]".into(),
            });
        }
        let (h, w) = (x_sr.shape()[2], x_sr.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "extract_features",
                shape: x_sr.shape().to_vec(),
                msg: "H and W must be divisible by 4 (stem stride x shuffle factor)".into(),
            });
        }
        let stem = |x: &Tensor<T>| -> Result<Tensor<T>> {
            let y = x
                .conv2d(&self.stem_conv.w, Some(&self.stem_conv.b), 2, 1)?
                .relu()?;
            self.stem_block.forward(&y)
        };
        let f_sr = self.branch_sr.forward(&stem(x_sr)?)?;
        let f_hr = self.branch_hr.forward(&stem(x_hr)?)?;
        Ok((f_sr, f_hr))
    }

    fn projection(&self, branch: Branch, axis: Axis) -> &QkvProjection<T> {
        match (branch, axis) {
            (Branch::Sr, Axis::H) => &self.proj_sr_h,
            (Branch::Sr, Axis::W) => &self.proj_sr_w,
            (Branch::Hr, Axis::H) => &self.proj_hr_h,
            (Branch::Hr, Axis::W) => &self.proj_hr_w,
        }
    }

    /// Channel-preserving 1x1 query/key/value projections for one branch
    /// and one attention axis.
    pub fn qkv_project(
        &self,
        f: &Tensor<T>,
        branch: Branch,
        axis: Axis,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let p = self.projection(branch, axis);
        Ok((
            f.conv2d(&p.q.w, Some(&p.q.b), 1, 0)?,
            f.conv2d(&p.k.w, Some(&p.k.b), 1, 0)?,
            f.conv2d(&p.v.w, Some(&p.v.b), 1, 0)?,
        ))
    }

    fn attention_direction(
        &self,
        f_q: &Tensor<T>,
        f_k: &Tensor<T>,
        q_branch: Branch,
        k_branch: Branch,
    ) -> Result<Tensor<T>> {
        let eps = T::from_f64(self.cfg.eps);
        let mut per_axis = Vec::with_capacity(2);
        for axis in [Axis::H, Axis::W] {
            let (q, _, v) = self.qkv_project(f_q, q_branch, axis)?;
            let (_, k, _) = self.qkv_project(f_k, k_branch, axis)?;
            per_axis.push(axial_cross_attention(&q, &k, &v, axis, eps)?);
        }
        per_axis[0].add(&per_axis[1])?.scale(T::from_f64(0.5))
    }

    /// Bi-directional PBA+ block: averages H- and W-axis attention, with
    /// queries/values from one branch and keys from the other.
    pub fn pba_plus_forward(
        &self,
        f_sr: &Tensor<T>,
        f_hr: &Tensor<T>,
    ) -> Result<AxialAttentionOutput<T>> {
        Ok(AxialAttentionOutput {
            o_hr_to_sr: self.attention_direction(f_sr, f_hr, Branch::Sr, Branch::Hr)?,
            o_sr_to_hr: self.attention_direction(f_hr, f_sr, Branch::Hr, Branch::Sr)?,
        })
    }

    fn subec_direction(
        &self,
        gates: &SubecGates<T>,
        attn: &Tensor<T>,
        base: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (b, c, h, w) = (
            attn.shape()[0],
            attn.shape()[1],
            attn.shape()[2],
            attn.shape()[3],
        );
        if c % 4 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "subec_fuse",
                shape: attn.shape().to_vec(),
                msg: "need C % 4 == 0 and even H, W".into(),
            });
        }
        // channel cue, broadcast over space
        let pooled = attn.channel_shuffle(4)?.global_avg_pool2d()?;
        let cg = pooled
            .linear(&gates.channel_fc.w, Some(&gates.channel_fc.b))?
            .sigmoid()?
            .reshape(&[b, c, 1, 1])?;
        // spatial cue, broadcast over channels
        let sg = attn
            .pixel_unshuffle(2)?
            .conv2d(&gates.spatial_conv1.w, Some(&gates.spatial_conv1.b), 1, 0)?
            .pixel_shuffle(2)?
            .conv2d(&gates.spatial_conv2.w, Some(&gates.spatial_conv2.b), 1, 0)?
            .sigmoid()?;
        base.add(&attn.mul(&cg)?.mul(&sg)?)
    }

    /// Residual gated fusion of the attention outputs onto the features.
    pub fn subec_fuse(
        &self,
        attn: &AxialAttentionOutput<T>,
        f_sr: &Tensor<T>,
        f_hr: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((
            self.subec_direction(&self.subec_hr_to_sr, &attn.o_hr_to_sr, f_sr)?,
            self.subec_direction(&self.subec_sr_to_hr, &attn.o_sr_to_hr, f_hr)?,
        ))
    }

    fn head_direction(
        &self,
        head: &DirectionHead<T>,
        fused: &Tensor<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<Tensor<T>> {
        let p = self.cfg.dropout;
        let x = fused.global_avg_pool2d()?.flatten(1)?;
        let x = x.linear(&head.fc1.w, Some(&head.fc1.b))?.relu()?;
        let x = mode.dropout(&x, p)?;
        let x = x.linear(&head.fc2.w, Some(&head.fc2.b))?.relu()?;
        mode.dropout(&x, p)
    }

    /// Pooled two-branch MLP head; returns one score per batch item.
    pub fn quality_head_forward(
        &self,
        fused_hr_to_sr: &Tensor<T>,
        fused_sr_to_hr: &Tensor<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<Tensor<T>> {
        let a = self.head_direction(&self.head_hr_to_sr, fused_hr_to_sr, mode)?;
        let b = self.head_direction(&self.head_sr_to_hr, fused_sr_to_hr, mode)?;
        let joint = Tensor::concat(&[a, b], 1)?;
        let batch = joint.shape()[0];
        joint
            .linear(&self.joint_fc1.w, Some(&self.joint_fc1.b))?
            .linear(&self.joint_fc2.w, Some(&self.joint_fc2.b))?
            .reshape(&[batch])
    }

    /// Full pass: images in, per-item quality scores out.
    pub fn forward(
        &self,
        x_sr: &Tensor<T>,
        x_hr: &Tensor<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<Tensor<T>> {
        let (f_sr, f_hr) = self.extract_features(x_sr, x_hr)?;
        let attn = self.pba_plus_forward(&f_sr, &f_hr)?;
        let (o1, o2) = self.subec_fuse(&attn, &f_sr, &f_hr)?;
        self.quality_head_forward(&o1, &o2, mode)
    }

    /// Copy the SR-side and HR->SR-side parameters over their mirrors so
    /// the two inputs become interchangeable. Diagnostic helper backing
    /// the tied-weight symmetry checks.
    pub fn tie_symmetric(&self) -> Result<()> {
        let pairs = [
            ("branch_sr.", "branch_hr."),
            ("proj.sr.h.", "proj.hr.h."),
            ("proj.sr.w.", "proj.hr.w."),
            ("subec.hr2sr.", "subec.sr2hr."),
            ("head.hr2sr.", "head.sr2hr."),
        ];
        let params = self.named_parameters();
        let find = |name: &str| params.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        for (src_prefix, dst_prefix) in pairs {
            for (name, src) in &params {
                if let Some(rest) = name.strip_prefix(src_prefix) {
                    let dst_name = format!("{dst_prefix}{rest}");
                    let dst = find(&dst_name).ok_or_else(|| {
                        Error::Contract(format!("missing mirror parameter {dst_name}"))
                    })?;
                    dst.set_data(src.to_vec())?;
                }
            }
        }
        // the joint layer sees the two direction vectors concatenated;
        // mirror its left half onto the right so swapping them is neutral
        let c4 = self.cfg.channels / 4;
        let mut w = self.joint_fc1.w.to_vec();
        for row in 0..c4 {
            for col in 0..c4 {
                w[row * 2 * c4 + c4 + col] = w[row * 2 * c4 + col];
            }
        }
        self.joint_fc1.w.set_data(w)?;
        Ok(())
    }
}

fn slice_perm(axis: Axis) -> [usize; 4] {
    match axis {
        Axis::H => [0, 3, 1, 2], // [B,C,H,W] -> [B,W,C,H]
        Axis::W => [0, 2, 1, 3], // [B,C,H,W] -> [B,H,C,W]
    }
}

/// View a feature map as a batch of per-column (H axis) or per-row
/// (W axis) C x L matrices: [B,C,H,W] -> [B*S, C, L].
fn to_slices<T: Scalar>(t: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let p = t.permute(&slice_perm(axis))?;
    let s = p.shape().to_vec();
    p.reshape(&[s[0] * s[1], s[2], s[3]])
}

/// Inverse of [`to_slices`].
fn from_slices<T: Scalar>(t: &Tensor<T>, axis: Axis, batch: usize) -> Result<Tensor<T>> {
    let s = t.shape().to_vec();
    let unflat = t.reshape(&[batch, s[0] / batch, s[1], s[2]])?;
    unflat.permute(&kernels_inverse(slice_perm(axis)))
}

fn kernels_inverse(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_attended_extent<T: Scalar>(q: &Tensor<T>, axis: Axis) -> Result<()> {
    let len = match axis {
        Axis::H => q.shape()[2],
        Axis::W => q.shape()[3],
    };
    if len < 2 {
        return Err(Error::Degenerate {
            op: "axial_cross_attention",
            msg: format!("attended axis has extent {}; need at least 2", len),
        });
    }
    Ok(())
}

/// One axial cross-attention pass. For every slice along the chosen axis
/// the score matrix S = Q^T K is normalized by its population std plus
/// eps, column-softmaxed, and applied to the values: O = V A.
pub fn axial_cross_attention<T: Scalar>(
    q_src: &Tensor<T>,
    k_other: &Tensor<T>,
    v_src: &Tensor<T>,
    axis: Axis,
    eps: T,
) -> Result<Tensor<T>> {
    if q_src.shape() != k_other.shape() || q_src.shape() != v_src.shape() {
        return Err(Error::ShapeMismatch {
            op: "axial_cross_attention",
            lhs: q_src.shape().to_vec(),
            rhs: k_other.shape().to_vec(),
        });
    }
    check_attended_extent(q_src, axis)?;
    let batch = q_src.shape()[0];
    let a = attention_scores(q_src, k_other, axis, eps)?;
    let vs = to_slices(v_src, axis)?;
    let o = vs.matmul(&a)?;
    from_slices(&o, axis, batch)
}

/// The normalized attention matrices A (shape [B*S, L, L], columns
/// summing to one). Shared by the forward pass and the invariant probes.
pub fn attention_scores<T: Scalar>(
    q_src: &Tensor<T>,
    k_other: &Tensor<T>,
    axis: Axis,
    eps: T,
) -> Result<Tensor<T>> {
    check_attended_extent(q_src, axis)?;
    let qs = to_slices(q_src, axis)?;
    let ks = to_slices(k_other, axis)?;
    let s = qs.transpose_last2()?.matmul(&ks)?;
    normalized_softmax(&s, eps)
}

/// softmax over the first matrix index of S / (Std(S) + eps), one Std
/// scalar per batch slice.
pub fn normalized_softmax<T: Scalar>(s: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let n = s.shape()[0];
    let std = s.std_all(&[0])?.reshape(&[n, 1, 1])?;
    s.div(&std.add_scalar(eps)?)?.softmax(1)
}

#[cfg(test)]
mod tests;
