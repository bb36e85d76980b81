//! The full multi-task network: a residual 3D-conv global pathway with an
//! attention module per level, plus saliency, action and summarization heads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, RunningStats};
use crate::dsam::{apply_attention, dsam_forward, DsamParams};
use crate::error::{Error, Result};
use crate::task::{Task, TaskSet};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const LEVELS: usize = 4;
/// Input pixels in `[0, 1]` are normalized as `(v - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;
/// Space is halved at every level, time at levels 3 and 4.
pub const LEVEL_STRIDES: [[usize; 3]; LEVELS] = [[1, 2, 2], [1, 2, 2], [2, 2, 2], [2, 2, 2]];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Channel widths of conv1..conv4.
    pub widths: [usize; LEVELS],
    /// Width of the conv5-style blocks in the action and summarization heads.
    pub head_width: usize,
    pub classes: usize,
    /// Saliency feature channels per attention module.
    pub sal_channels: usize,
    /// Hidden channels of the saliency fusion head.
    pub fuse_channels: usize,
    /// Heads to construct.
    pub heads: TaskSet,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frames: 16,
            height: 112,
            width: 112,
            widths: [16, 32, 64, 128],
            head_width: 128,
            classes: 51,
            sal_channels: 16,
            fuse_channels: 16,
            heads: TaskSet::all(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("head_width", self.head_width),
            ("classes", self.classes),
            ("sal_channels", self.sal_channels),
            ("fuse_channels", self.fuse_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        let [_, h, w] = self.level_size(LEVELS);
        if self.heads.contains(Task::Saliency) && (h < 2 || w < 2) {
            return Err(Error::Config(format!(
                "{}x{} input leaves a {h}x{w} deepest map; saliency supervision needs at least 2x2",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `[T, H, W]` of the features after `level` residual blocks.
    pub fn level_size(&self, level: usize) -> [usize; 3] {
        let mut size = [self.frames, self.height, self.width];
        for stride in &LEVEL_STRIDES[..level] {
            for (d, s) in size.iter_mut().zip(stride) {
                *d = (*d - 1) / s + 1;
            }
        }
        size
    }

    /// `(key, value)` pairs in the plain-text config syntax.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = self.widths;
        vec![
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3])),
            ("head_width", self.head_width.to_string()),
            ("classes", self.classes.to_string()),
            ("sal_channels", self.sal_channels.to_string()),
            ("fuse_channels", self.fuse_channels.to_string()),
            ("heads", self.heads.to_string()),
        ]
    }

    /// Applies one config entry; `Ok(false)` when the key is not a network key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{v}'")))
        };
        match key {
            "frames" => self.frames = num(value)?,
            "height" => self.height = num(value)?,
            "width" => self.width = num(value)?,
            "head_width" => self.head_width = num(value)?,
            "classes" => self.classes = num(value)?,
            "sal_channels" => self.sal_channels = num(value)?,
            "fuse_channels" => self.fuse_channels = num(value)?,
            "heads" => self.heads = value.parse()?,
            "widths" => {
                let parts: Vec<usize> = value.split(',').map(num).collect::<Result<_>>()?;
                self.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("widths needs exactly four values".into()))?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Which parameter group a tensor belongs to: the shared global pathway and
/// attention modules, or one of the three task heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Shared,
    Saliency,
    Action,
    Summary,
}

impl Partition {
    pub fn of_task(task: Task) -> Self {
        match task {
            Task::Saliency => Partition::Saliency,
            Task::Action => Partition::Action,
            Task::Summary => Partition::Summary,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Partition::Shared => "shared",
            Partition::Saliency => "sal",
            Partition::Action => "act",
            Partition::Summary => "sum",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "shared" => Partition::Shared,
            "sal" => Partition::Saliency,
            "act" => Partition::Action,
            "sum" => Partition::Summary,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub partition: Partition,
    pub requires_grad: bool,
}

/// Flat, ordered parameter store plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    bn_stats: Vec<(String, RunningStats)>,
}

/// Parameter indices of each partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartitionViews {
    pub shared: Vec<usize>,
    pub sal: Vec<usize>,
    pub act: Vec<usize>,
    pub sum: Vec<usize>,
}

impl PartitionViews {
    pub fn get(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Shared => &self.shared,
            Partition::Saliency => &self.sal,
            Partition::Action => &self.act,
            Partition::Summary => &self.sum,
        }
    }
}

impl ModelParams {
    fn push(&mut self, name: String, value: Tensor, partition: Partition) -> usize {
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            value,
            partition,
            requires_grad: true,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, idx: usize, value: Tensor) -> Result<()> {
        self.params[idx].value.check_same_shape(&value, &self.params[idx].name)?;
        self.params[idx].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn bn_stats(&self) -> &[(String, RunningStats)] {
        &self.bn_stats
    }

    pub fn set_bn_stats(&mut self, idx: usize, stats: RunningStats) -> Result<()> {
        if stats.mean.len() != self.bn_stats[idx].1.mean.len() {
            return Err(Error::dim(format!("running stats of {} change channel count", self.bn_stats[idx].0)));
        }
        self.bn_stats[idx].1 = stats;
        Ok(())
    }

    pub fn partition(&self) -> PartitionViews {
        let mut v = PartitionViews::default();
        for (i, p) in self.params.iter().enumerate() {
            match p.partition {
                Partition::Shared => v.shared.push(i),
                Partition::Saliency => v.sal.push(i),
                Partition::Action => v.act.push(i),
                Partition::Summary => v.sum.push(i),
            }
        }
        v
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    a: usize,
    bn_a: BnSlot,
    b: usize,
    bn_b: BnSlot,
    shortcut: Option<(usize, BnSlot)>,
    stride: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct DsamSlots {
    feat_w: usize,
    feat_b: usize,
    act_w: usize,
    act_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct SalSlots {
    fuse_w: usize,
    fuse_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ClipHeadSlots {
    block: BlockSlots,
    fc_w: usize,
    fc_b: usize,
}

/// Graph handles of a batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub stats: RunningStats,
}

/// Graph handles of a basic residual block:
/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub a: NodeId,
    pub bn_a: BnParams,
    pub b: NodeId,
    pub bn_b: BnParams,
    pub shortcut: Option<(NodeId, BnParams)>,
    pub stride: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct SaliencyHeadParams {
    /// `[F, 4·Cs, 1, 1]`
    pub fuse_w: NodeId,
    pub fuse_b: NodeId,
    /// `[1, F, 3, 3]`
    pub out_w: NodeId,
    pub out_b: NodeId,
}

#[derive(Debug, Clone)]
pub struct ClipHeadParams {
    pub block: ResBlockParams,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

fn batch_norm(g: &mut Graph, x: NodeId, p: &BnParams) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let mut batched = vec![1];
    batched.extend_from_slice(&shape);
    let xb = g.reshape(x, &batched)?;
    let (y, _) = g.batch_norm(xb, p.gamma, p.beta, &p.stats, false)?;
    g.reshape(y, &shape)
}

pub fn residual_block(g: &mut Graph, x: NodeId, p: &ResBlockParams) -> Result<NodeId> {
    let h = g.conv3d(x, p.a, p.stride, [1, 1, 1])?;
    let h = batch_norm(g, h, &p.bn_a)?;
    let h = g.relu(h)?;
    let h = g.conv3d(h, p.b, [1, 1, 1], [1, 1, 1])?;
    let h = batch_norm(g, h, &p.bn_b)?;
    let skip = match &p.shortcut {
        Some((w, bn)) => {
            let s = g.conv3d(x, *w, p.stride, [0, 0, 0])?;
            batch_norm(g, s, bn)?
        }
        None => x,
    };
    let sum = g.add(h, skip)?;
    g.relu(sum)
}

/// Fuses the concatenated multi-level saliency features `[4·Cs, H0, W0]` into
/// a single logit map `[H0, W0]`: 1×1 conv + ReLU, then 3×3 conv.
pub fn saliency_head(g: &mut Graph, s_concat: NodeId, p: &SaliencyHeadParams) -> Result<NodeId> {
    let expected = g.value(p.fuse_w).shape()[1];
    let got = g.value(s_concat).shape()[0];
    if got != expected {
        return Err(Error::dim(format!("saliency head expects {expected} channels, got {got}")));
    }
    let h = g.conv2d_spatial(s_concat, p.fuse_w, [1, 1], [0, 0])?;
    let h = g.bias_add(h, p.fuse_b)?;
    let h = g.relu(h)?;
    let out = g.conv2d_spatial(h, p.out_w, [1, 1], [1, 1])?;
    let out = g.bias_add(out, p.out_b)?;
    let shape = g.value(out).shape().to_vec();
    g.reshape(out, &shape[1..])
}

fn clip_head(g: &mut Graph, x4: NodeId, p: &ClipHeadParams) -> Result<NodeId> {
    let h = residual_block(g, x4, &p.block)?;
    let pooled = g.global_temporal_avg_pool(h)?;
    g.fully_connected(pooled, p.fc_w, p.fc_b)
}

/// conv5-style block, global average pool, fully connected layer to `C_a`
/// logits.
pub fn action_head(g: &mut Graph, x4: NodeId, p: &ClipHeadParams) -> Result<NodeId> {
    clip_head(g, x4, p)
}

/// Same structure as [`action_head`] with a single output logit; the
/// importance score is its sigmoid.
pub fn summarization_head(g: &mut Graph, x4: NodeId, p: &ClipHeadParams) -> Result<NodeId> {
    let out = clip_head(g, x4, p)?;
    if g.value(out).len() != 1 {
        return Err(Error::dim("summarization head must produce one logit"));
    }
    Ok(out)
}

/// Lazily inserts model parameters into a graph.
#[derive(Debug, Clone)]
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new(params: &ModelParams) -> Self {
        Binding {
            nodes: vec![None; params.len()],
        }
    }

    pub fn node(&mut self, g: &mut Graph, params: &ModelParams, idx: usize) -> NodeId {
        *self.nodes[idx].get_or_insert_with(|| {
            let p = &params.params[idx];
            g.leaf(p.value.clone(), p.requires_grad)
        })
    }

    pub fn node_of(&self, idx: usize) -> Option<NodeId> {
        self.nodes[idx]
    }

    /// Gradients of every bound parameter, keyed by parameter index.
    pub fn grads(&self, g: &Graph) -> Vec<(usize, Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.and_then(|id| g.grad(id).map(|t| (i, t.clone()))))
            .collect()
    }
}

/// Per-clip network outputs as graph handles. Heads that were not requested
/// are `None`.
#[derive(Debug, Clone)]
pub struct TaskOutputs {
    /// Fused saliency logits `[H0, W0]`.
    pub s_f: Option<NodeId>,
    /// Upsampled activation logits `A^1..A^4`, each `[H0, W0]`.
    pub a_levels: Option<[NodeId; LEVELS]>,
    pub action_logits: Option<NodeId>,
    /// Scalar summarization logit.
    pub sum_logit: Option<NodeId>,
    /// Attention maps at native resolution.
    pub attention: [NodeId; LEVELS],
}

/// Plain-tensor copy of [`TaskOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskValues {
    pub s_f: Option<Tensor>,
    pub a_levels: Option<Vec<Tensor>>,
    pub action_logits: Option<Tensor>,
    pub sum_logit: Option<f64>,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Susinet {
    config: NetworkConfig,
    params: ModelParams,
    levels: Vec<BlockSlots>,
    dsam: Vec<DsamSlots>,
    sal: Option<SalSlots>,
    act: Option<ClipHeadSlots>,
    sum: Option<ClipHeadSlots>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Centered uniform with variance `gain / fan_in`.
    fn uniform(&mut self, shape: &[usize], gain: f64) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }
}

const HE_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

impl Susinet {
    /// Builds a freshly initialized network; the same seed always yields the
    /// same weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ModelParams::default();

        let mut levels = Vec::with_capacity(LEVELS);
        let mut dsam = Vec::with_capacity(LEVELS);
        let mut c_in = INPUT_CHANNELS;
        for m in 0..LEVELS {
            let c_out = config.widths[m];
            let prefix = format!("gl.conv{}", m + 1);
            levels.push(Self::make_block(&mut params, &mut init, &prefix, c_in, c_out, LEVEL_STRIDES[m], Partition::Shared));
            let cs = config.sal_channels;
            let am = format!("am{}", m + 1);
            dsam.push(DsamSlots {
                feat_w: params.push(format!("{am}.feat.weight"), init.uniform(&[cs, c_out, 3, 3], HE_GAIN), Partition::Shared),
                feat_b: params.push(format!("{am}.feat.bias"), Tensor::zeros(&[cs]), Partition::Shared),
                act_w: params.push(format!("{am}.act.weight"), init.uniform(&[1, cs, 1, 1], LINEAR_GAIN), Partition::Shared),
                act_b: params.push(format!("{am}.act.bias"), Tensor::zeros(&[1]), Partition::Shared),
            });
            c_in = c_out;
        }

        let sal = config.heads.contains(Task::Saliency).then(|| {
            let (f, cat) = (config.fuse_channels, LEVELS * config.sal_channels);
            SalSlots {
                fuse_w: params.push("sal.fuse.weight".into(), init.uniform(&[f, cat, 1, 1], HE_GAIN), Partition::Saliency),
                fuse_b: params.push("sal.fuse.bias".into(), Tensor::zeros(&[f]), Partition::Saliency),
                out_w: params.push("sal.out.weight".into(), init.uniform(&[1, f, 3, 3], LINEAR_GAIN), Partition::Saliency),
                out_b: params.push("sal.out.bias".into(), Tensor::zeros(&[1]), Partition::Saliency),
            }
        });
        let mut clip_head = |name: &str, outputs: usize, partition: Partition| {
            let hw = config.head_width;
            let block = Self::make_block(&mut params, &mut init, &format!("{name}.conv5"), c_in, hw, [1, 1, 1], partition);
            ClipHeadSlots {
                block,
                fc_w: params.push(format!("{name}.fc.weight"), init.uniform(&[outputs, hw], LINEAR_GAIN), partition),
                fc_b: params.push(format!("{name}.fc.bias"), Tensor::zeros(&[outputs]), partition),
            }
        };
        let act = config
            .heads
            .contains(Task::Action)
            .then(|| clip_head("act", config.classes, Partition::Action));
        let sum = config
            .heads
            .contains(Task::Summary)
            .then(|| clip_head("sum", 1, Partition::Summary));

        Ok(Susinet {
            config,
            params,
            levels,
            dsam,
            sal,
            act,
            sum,
        })
    }

    fn make_block(
        params: &mut ModelParams,
        init: &mut Init,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: [usize; 3],
        partition: Partition,
    ) -> BlockSlots {
        let bn = |params: &mut ModelParams, name: &str| {
            let stats = params.bn_stats.len();
            params.bn_stats.push((format!("{prefix}.{name}"), RunningStats::new(c_out)));
            BnSlot {
                gamma: params.push(format!("{prefix}.{name}.gamma"), Tensor::full(&[c_out], 1.0), partition),
                beta: params.push(format!("{prefix}.{name}.beta"), Tensor::zeros(&[c_out]), partition),
                stats,
            }
        };
        let a = params.push(format!("{prefix}.a.weight"), init.uniform(&[c_out, c_in, 3, 3, 3], HE_GAIN), partition);
        let bn_a = bn(params, "bn_a");
        let b = params.push(format!("{prefix}.b.weight"), init.uniform(&[c_out, c_out, 3, 3, 3], HE_GAIN), partition);
        let bn_b = bn(params, "bn_b");
        let shortcut = (c_in != c_out || stride != [1, 1, 1]).then(|| {
            let w = params.push(format!("{prefix}.skip.weight"), init.uniform(&[c_out, c_in, 1, 1, 1], LINEAR_GAIN), partition);
            (w, bn(params, "bn_skip"))
        });
        BlockSlots {
            a,
            bn_a,
            b,
            bn_b,
            shortcut,
            stride,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [INPUT_CHANNELS, self.config.frames, self.config.height, self.config.width]
    }

    fn bn_params(&self, g: &mut Graph, b: &mut Binding, s: BnSlot) -> BnParams {
        BnParams {
            gamma: b.node(g, &self.params, s.gamma),
            beta: b.node(g, &self.params, s.beta),
            stats: self.params.bn_stats[s.stats].1.clone(),
        }
    }

    fn block_params(&self, g: &mut Graph, b: &mut Binding, s: &BlockSlots) -> ResBlockParams {
        ResBlockParams {
            a: b.node(g, &self.params, s.a),
            bn_a: self.bn_params(g, b, s.bn_a),
            b: b.node(g, &self.params, s.b),
            bn_b: self.bn_params(g, b, s.bn_b),
            shortcut: s
                .shortcut
                .map(|(w, bn)| (b.node(g, &self.params, w), self.bn_params(g, b, bn))),
            stride: s.stride,
        }
    }

    fn clip_head_params(&self, g: &mut Graph, b: &mut Binding, s: &ClipHeadSlots) -> ClipHeadParams {
        ClipHeadParams {
            block: self.block_params(g, b, &s.block),
            fc_w: b.node(g, &self.params, s.fc_w),
            fc_b: b.node(g, &self.params, s.fc_b),
        }
    }

    /// Records the forward pass of one clip `[3, T, H0, W0]` into `g`.
    ///
    /// Attended features `(1 + M^m) ⊙ X^m` feed the next level. Only the
    /// requested heads are evaluated, and the attention modules' upsampling
    /// branch runs only when saliency is requested.
    pub fn forward(&self, g: &mut Graph, clip: &Tensor, tasks: TaskSet) -> Result<(TaskOutputs, Binding)> {
        if clip.shape() != self.input_shape() {
            return Err(Error::dim(format!(
                "clip shape {:?} does not match network input {:?}",
                clip.shape(),
                self.input_shape()
            )));
        }
        for t in tasks.iter() {
            if !self.config.heads.contains(t) {
                return Err(Error::Config(format!("{t} head requested but not constructed")));
            }
        }
        let mut b = Binding::new(&self.params);
        let target = (self.config.height, self.config.width);
        let want_sal = tasks.contains(Task::Saliency);

        let mut x = g.constant(clip.map(|v| (v - INPUT_MEAN) / INPUT_STD));
        let mut s_up = Vec::with_capacity(LEVELS);
        let mut a_up = Vec::with_capacity(LEVELS);
        let mut attention = Vec::with_capacity(LEVELS);
        for m in 0..LEVELS {
            let block = self.block_params(g, &mut b, &self.levels[m]);
            let xm = residual_block(g, x, &block)?;
            let d = self.dsam[m];
            let dp = DsamParams {
                feat_w: b.node(g, &self.params, d.feat_w),
                feat_b: b.node(g, &self.params, d.feat_b),
                act_w: b.node(g, &self.params, d.act_w),
                act_b: b.node(g, &self.params, d.act_b),
                level: m + 1,
            };
            let out = dsam_forward(g, xm, &dp, want_sal.then_some(target))?;
            if let (Some(s), Some(a)) = (out.s_up, out.a_up) {
                s_up.push(s);
                a_up.push(a);
            }
            attention.push(out.m);
            x = apply_attention(g, xm, out.m)?;
        }

        let (s_f, a_levels) = match (want_sal, &self.sal) {
            (true, Some(sal)) => {
                let p = SaliencyHeadParams {
                    fuse_w: b.node(g, &self.params, sal.fuse_w),
                    fuse_b: b.node(g, &self.params, sal.fuse_b),
                    out_w: b.node(g, &self.params, sal.out_w),
                    out_b: b.node(g, &self.params, sal.out_b),
                };
                let cat = g.concat_channels(&s_up)?;
                let s_f = saliency_head(g, cat, &p)?;
                (Some(s_f), Some(a_up.try_into().expect("one map per level")))
            }
            _ => (None, None),
        };
        let action_logits = match (tasks.contains(Task::Action), &self.act) {
            (true, Some(slots)) => {
                let p = self.clip_head_params(g, &mut b, slots);
                Some(action_head(g, x, &p)?)
            }
            _ => None,
        };
        let sum_logit = match (tasks.contains(Task::Summary), &self.sum) {
            (true, Some(slots)) => {
                let p = self.clip_head_params(g, &mut b, slots);
                Some(summarization_head(g, x, &p)?)
            }
            _ => None,
        };
        Ok((
            TaskOutputs {
                s_f,
                a_levels,
                action_logits,
                sum_logit,
                attention: attention.try_into().expect("one map per level"),
            },
            b,
        ))
    }

    /// Forward pass returning plain tensors.
    pub fn evaluate(&self, clip: &Tensor, tasks: TaskSet) -> Result<TaskValues> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, clip, tasks)?;
        Ok(TaskValues {
            s_f: out.s_f.map(|id| g.value(id).clone()),
            a_levels: out.a_levels.map(|ids| ids.iter().map(|&id| g.value(id).clone()).collect()),
            action_logits: out.action_logits.map(|id| g.value(id).clone()),
            sum_logit: out.sum_logit.map(|id| g.value(id).item()),
            attention: out.attention.iter().map(|&id| g.value(id).clone()).collect(),
        })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub(crate) fn with_params(config: NetworkConfig, params: ModelParams) -> Result<Self> {
        let mut model = Susinet::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (fresh, loaded) in model.params.params.iter().zip(&params.params) {
            if fresh.name != loaded.name || fresh.value.shape() != loaded.value.shape() || fresh.partition != loaded.partition {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?} [{}], found {} {:?} [{}]",
                    fresh.name,
                    fresh.value.shape(),
                    fresh.partition.tag(),
                    loaded.name,
                    loaded.value.shape(),
                    loaded.partition.tag()
                )));
            }
        }
        if params.bn_stats.len() != model.params.bn_stats.len() {
            return Err(Error::Config("batch-norm layer count mismatch".into()));
        }
        model.params = params;
        Ok(model)
    }
}

impl ModelParams {
    pub(crate) fn from_parts(params: Vec<Parameter>, bn_stats: Vec<(String, RunningStats)>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelParams { params, index, bn_stats }
    }
}
