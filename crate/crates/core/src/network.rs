//! Two-stream gait embedding network.
//!
//! Each modality has its own first convolution (`conv_s` for silhouettes, `conv_p`
//! for depth images of point clouds); everything after it is shared: a residual
//! stack, horizontal pooling into parts, max over time, and an independent linear
//! head per part.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive_seed, name_key, Stream};
use crate::synth::Modality;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input spatial downsampling of the whole network (stem plus two strided blocks).
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct NetConfig {
    /// Side of the square input frames.
    pub input_size: usize,
    /// Output channels of the stem and the three residual blocks' last two stages.
    pub channels: [usize; 3],
    /// Number of horizontal parts.
    pub parts: usize,
    /// Per-part embedding dimension.
    pub embed_dim: usize,
    /// Linear layers per head (ReLU between them).
    pub head_depth: usize,
    /// Identity classes of the per-part classifier; 0 builds no classifier.
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { input_size: 64, channels: [32, 64, 128], parts: 8, embed_dim: 64, head_depth: 1, num_classes: 0 }
    }
}

impl NetConfig {
    pub fn feature_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Invalid(format!("input size {} is not a positive multiple of {DOWNSAMPLE}", self.input_size)));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.head_depth == 0 {
            return Err(Error::Invalid("channel counts, embedding dim and head depth must be positive".into()));
        }
        let h = self.feature_size();
        if self.parts == 0 || !h.is_multiple_of(self.parts) {
            return Err(Error::Invalid(format!(
                "{} parts do not divide the {h}-row feature map",
                self.parts
            )));
        }
        Ok(())
    }

    /// Embedding length when all parts are concatenated.
    pub fn embedding_len(&self) -> usize {
        self.parts * self.embed_dim
    }
}

fn head_name(k: usize, j: usize) -> String {
    if j == 0 {
        format!("head{k}.w")
    } else {
        format!("head{k}.w{j}")
    }
}

/// Named weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<R = f32> {
    pub tensors: BTreeMap<String, Tensor<R>>,
}

/// Weight names of the modality stems and the shared residual stack.
pub fn backbone_names(cfg: &NetConfig) -> Vec<String> {
    let mut names: Vec<String> = ["conv_s.w", "conv_s.b", "conv_p.w", "conv_p.b"].iter().map(|s| s.to_string()).collect();
    for (i, _) in block_channels(cfg).iter().enumerate() {
        for suffix in ["conv1.w", "conv1.b", "conv2.w", "conv2.b"] {
            names.push(format!("block{i}.{suffix}"));
        }
        if block_has_shortcut(cfg, i) {
            names.push(format!("block{i}.shortcut.w"));
        }
    }
    names
}

/// `(in, out, stride)` of each residual block.
fn block_channels(cfg: &NetConfig) -> [(usize, usize, usize); 3] {
    let [c1, c2, c3] = cfg.channels;
    [(c1, c1, 1), (c1, c2, 2), (c2, c3, 2)]
}

fn block_has_shortcut(cfg: &NetConfig, i: usize) -> bool {
    let (cin, cout, stride) = block_channels(cfg)[i];
    cin != cout || stride != 1
}

impl<R: Real> NetworkWeights<R> {
    /// Gaussian fan-in initialization; each tensor draws from its own stream keyed
    /// by name, so adding a tensor does not perturb the others.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        let mut put = |name: String, shape: &[usize], std: f64| {
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                let mut s = Stream::new(derive_seed(seed, &[name_key(&name)]), 0);
                Tensor::from_fn(shape, |_| R::from_f64(std * s.normal()))
            };
            tensors.insert(name, t);
        };
        let he = |fan_in: usize| libm::sqrt(2.0 / fan_in as f64);
        let c1 = cfg.channels[0];
        for stem in ["conv_s", "conv_p"] {
            put(format!("{stem}.w"), &[c1, 3, 3, 3], he(27));
            put(format!("{stem}.b"), &[c1], 0.0);
        }
        for (i, (cin, cout, _)) in block_channels(cfg).into_iter().enumerate() {
            put(format!("block{i}.conv1.w"), &[cout, cin, 3, 3], he(cin * 9));
            put(format!("block{i}.conv1.b"), &[cout], 0.0);
            put(format!("block{i}.conv2.w"), &[cout, cout, 3, 3], he(cout * 9));
            put(format!("block{i}.conv2.b"), &[cout], 0.0);
            if block_has_shortcut(cfg, i) {
                put(format!("block{i}.shortcut.w"), &[cout, cin, 1, 1], he(cin));
            }
        }
        let c3 = cfg.channels[2];
        for k in 0..cfg.parts {
            for j in 0..cfg.head_depth {
                let fan_in = if j == 0 { c3 } else { cfg.embed_dim };
                put(head_name(k, j), &[cfg.embed_dim, fan_in], libm::sqrt(1.0 / fan_in as f64));
            }
        }
        if cfg.num_classes > 0 {
            for k in 0..cfg.parts {
                put(format!("cls{k}.w"), &[cfg.num_classes, cfg.embed_dim], libm::sqrt(1.0 / cfg.embed_dim as f64));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.tensors.get(name).ok_or_else(|| Error::Invalid(format!("missing weight {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Invalid(format!("missing weight {name}")))
    }

    pub fn cast<S: Real>(&self) -> NetworkWeights<S> {
        NetworkWeights { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Recovers the architecture from tensor shapes and checks every expected tensor
    /// is present with a consistent shape.
    pub fn config(&self, input_size: usize) -> Result<NetConfig> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            let t = self.get(name)?;
            t.shape().get(axis).copied().ok_or_else(|| Error::Invalid(format!("weight {name} has shape {:?}", t.shape())))
        };
        let channels = [dim("conv_s.w", 0)?, dim("block1.conv1.w", 0)?, dim("block2.conv1.w", 0)?];
        let parts = (0..).take_while(|k| self.tensors.contains_key(&head_name(*k, 0))).count();
        let head_depth = (0..).take_while(|j| self.tensors.contains_key(&head_name(0, *j))).count();
        let embed_dim = if parts > 0 { dim("head0.w", 0)? } else { 0 };
        let num_classes = if self.tensors.contains_key("cls0.w") { dim("cls0.w", 0)? } else { 0 };
        let cfg = NetConfig { input_size, channels, parts, embed_dim, head_depth, num_classes };
        cfg.validate()?;
        let reference = NetworkWeights::<R>::init(&cfg, 0)?;
        for (name, t) in &reference.tensors {
            let have = self.get(name)?;
            have.expect_shape("network weight", t.shape())
                .map_err(|_| Error::Invalid(format!("weight {name} has shape {:?}, expected {:?}", have.shape(), t.shape())))?;
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Invalid(format!("unexpected weight {extra}")));
        }
        Ok(cfg)
    }
}

/// Weights placed on a tape. Trainable tensors are leaves, the rest constants.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
    /// Leaves in name order.
    pub trainable: Vec<(String, Var)>,
}

impl BoundWeights {
    pub fn bind<R: Real>(tape: &mut Tape<R>, weights: &NetworkWeights<R>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut leaves = Vec::new();
        for (name, t) in &weights.tensors {
            let v = if trainable(name) {
                let v = tape.leaf(t.clone());
                leaves.push((name.clone(), v));
                v
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Self { vars, trainable: leaves }
    }

    /// Wraps variables already on a tape; all of them count as trainable.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        let trainable: Vec<(String, Var)> = vars.into_iter().collect();
        Self { vars: trainable.iter().cloned().collect(), trainable }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invalid(format!("missing weight {name}")))
    }
}

/// Forward pieces of the network on a tape.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    pub cfg: &'a NetConfig,
    pub w: &'a BoundWeights,
}

impl Network<'_> {
    fn check_input<R: Real>(&self, tape: &Tape<R>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let n = self.cfg.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Shape {
                operand: "network input",
                expected: format!("[T, 3, {n}, {n}]"),
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Modality-specific first convolution on `x: [T, 3, H, W]`.
    pub fn stem<R: Real>(&self, tape: &mut Tape<R>, x: Var, modality: Modality) -> Result<Var> {
        self.check_input(tape, x)?;
        let prefix = match modality {
            Modality::Silhouette => "conv_s",
            Modality::PointCloud => "conv_p",
        };
        let y = tape.conv2d(x, self.w.var(&format!("{prefix}.w"))?, Some(self.w.var(&format!("{prefix}.b"))?), 2, 1)?;
        Ok(tape.relu(y))
    }

    /// Shared residual stack. `[T, c1, H/2, W/2]` → `[T, c3, H/8, W/8]`.
    pub fn backbone<R: Real>(&self, tape: &mut Tape<R>, f: Var) -> Result<Var> {
        let sum = self.backbone_preact(tape, f)?;
        Ok(tape.relu(sum))
    }

    /// [`Network::backbone`] without the ReLU after the last residual sum.
    pub fn backbone_preact<R: Real>(&self, tape: &mut Tape<R>, f: Var) -> Result<Var> {
        let mut x = f;
        let blocks = block_channels(self.cfg);
        for (i, (_, _, stride)) in blocks.into_iter().enumerate() {
            let w = |s: &str| self.w.var(&format!("block{i}.{s}"));
            let h = tape.conv2d(x, w("conv1.w")?, Some(w("conv1.b")?), stride, 1)?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, w("conv2.w")?, Some(w("conv2.b")?), 1, 1)?;
            let skip = if block_has_shortcut(self.cfg, i) { tape.conv2d(x, w("shortcut.w")?, None, stride, 0)? } else { x };
            let sum = tape.add(h, skip)?;
            x = if i + 1 < blocks.len() { tape.relu(sum) } else { sum };
        }
        Ok(x)
    }

    /// Stem followed by the shared stack.
    pub fn encode<R: Real>(&self, tape: &mut Tape<R>, x: Var, modality: Modality) -> Result<Var> {
        let f = self.stem(tape, x, modality)?;
        self.backbone(tape, f)
    }

    /// Frame features for contrastive pre-training: the shared stack's last residual
    /// sum before its ReLU. A band of the rectified map can be exactly zero, which
    /// leaves its cosine similarity undefined; the pre-activation sum keeps the
    /// gradient alive and the rectified map still follows it.
    pub fn encode_preact<R: Real>(&self, tape: &mut Tape<R>, x: Var, modality: Modality) -> Result<Var> {
        let f = self.stem(tape, x, modality)?;
        self.backbone_preact(tape, f)
    }

    /// Horizontal pooling then max over each sequence's frames: `[S, P, C]`.
    pub fn part_pool<R: Real>(&self, tape: &mut Tape<R>, fmap: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let hp = tape.horizontal_pool(fmap, self.cfg.parts)?;
        tape.segment_max(hp, segments)
    }

    /// Spatial mean then max over each sequence's frames: `[S, C]`.
    pub fn global_pool<R: Real>(&self, tape: &mut Tape<R>, fmap: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let g = tape.spatial_mean(fmap)?;
        tape.segment_max(g, segments)
    }

    /// Part `k` of `pooled: [S, P, C]` goes through head `k` only. Output `[S, P, d]`.
    pub fn heads<R: Real>(&self, tape: &mut Tape<R>, pooled: Var) -> Result<Var> {
        let p = tape.shape(pooled).get(1).copied().unwrap_or(0);
        if p != self.cfg.parts {
            return Err(Error::Shape {
                operand: "part heads input",
                expected: format!("[S, {}, C]", self.cfg.parts),
                got: tape.shape(pooled).to_vec(),
            });
        }
        let mut x = pooled;
        for j in 0..self.cfg.head_depth {
            let ws = (0..p).map(|k| self.w.var(&head_name(k, j))).collect::<Result<Vec<_>>>()?;
            let w = tape.stack(&ws)?;
            if j > 0 {
                x = tape.relu(x);
            }
            x = tape.part_linear(x, w)?;
        }
        Ok(x)
    }

    /// Per-part identity logits from head outputs `[S, P, d]`: `[S, P, K]`.
    pub fn classify<R: Real>(&self, tape: &mut Tape<R>, parts: Var) -> Result<Var> {
        let ws = (0..self.cfg.parts).map(|k| self.w.var(&format!("cls{k}.w"))).collect::<Result<Vec<_>>>()?;
        let w = tape.stack(&ws)?;
        tape.part_linear(parts, w)
    }

    /// Full embedding of sequences whose frames are stacked in `x`. Output `[S, P, d]`.
    pub fn embed<R: Real>(&self, tape: &mut Tape<R>, x: Var, modality: Modality, segments: &[(usize, usize)]) -> Result<Var> {
        let fmap = self.encode(tape, x, modality)?;
        let pooled = self.part_pool(tape, fmap, segments)?;
        self.heads(tape, pooled)
    }
}

/// Sequence-level embedding: `parts` vectors of length `dim`, concatenated in part order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PartEmbedding {
    pub parts: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl PartEmbedding {
    pub fn part(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Stacks preprocessed `[3, H, W]` frames into one `[T, 3, H, W]` tensor.
pub fn frames_tensor<R: Real>(frames: &[Vec<f32>], size: usize) -> Result<Tensor<R>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per = 3 * size * size;
    let mut data = Vec::with_capacity(frames.len() * per);
    for f in frames {
        if f.len() != per {
            return Err(Error::Shape { operand: "frame", expected: format!("[3, {size}, {size}]"), got: alloc::vec![f.len()] });
        }
        data.extend(f.iter().map(|&v| R::from_f64(v as f64)));
    }
    Tensor::new(&[frames.len(), 3, size, size], data)
}

/// Embeds one sequence of preprocessed frames `[T, 3, H, W]` without recording gradients.
pub fn embed_sequence<R: Real>(weights: &NetworkWeights<R>, cfg: &NetConfig, frames: &Tensor<R>, modality: Modality) -> Result<PartEmbedding> {
    let t = frames.shape().first().copied().unwrap_or(0);
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, |_| false);
    let net = Network { cfg, w: &bound };
    let x = tape.constant(frames.clone());
    let e = net.embed(&mut tape, x, modality, &[(0, t)])?;
    let values: Vec<f32> = tape.value(e).data().iter().map(|v| v.to_f64() as f32).collect();
    Ok(PartEmbedding { parts: cfg.parts, dim: cfg.embed_dim, values })
}
