//! Batch sampling, contrastive pre-training and cross-modality fine-tuning.
//!
//! The random stream of iteration `i` is derived from `(seed, stage, i)`, so a run
//! resumed from a checkpoint replays exactly the batches of an uninterrupted run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use clgait_core::adam::AdamState;
use clgait_core::losses::{alignment_metric, combined_loss, contrastive_loss, part_contrastive_loss, similarity_matrix, BatchLabels};
use clgait_core::network::{backbone_names, BoundWeights, NetConfig, Network, NetworkWeights};
use clgait_core::rng::{derive_seed, name_key, Stream};
use clgait_core::synth::Modality;
use clgait_core::{Tape, Tensor, Var};

use crate::config::{Granularity, TrainConfig};
use crate::dataset::{Dataset, Sequence, Split, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::formats::{decode_clgw, encode_clgw, read_clgw, write_bytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// One fine-tuning sample: a sequence and the frames drawn from it. Both
/// modalities of the sequence use the same frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sequence: usize,
    pub frames: Vec<usize>,
    pub class: usize,
}

/// Frame-level pairs `(sequence, frame)`; carries no identity information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
}

/// Training sequences with their identity classes.
pub struct TrainPool<'a> {
    pub sequences: Vec<&'a Sequence>,
    /// Identity label to class index, in ascending identity order.
    pub classes: BTreeMap<u32, usize>,
}

impl<'a> TrainPool<'a> {
    pub fn new(sequences: Vec<&'a Sequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if let Some(s) = sequences.iter().find(|s| !s.is_paired()) {
            return Err(Error::Dataset(format!("sequence {} has no paired point-cloud frames", s.entry.id)));
        }
        let ids: BTreeSet<u32> = sequences.iter().map(|s| s.entry.identity).collect();
        let classes = ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect();
        Ok(Self { sequences, classes })
    }

    pub fn from_split(ds: &'a Dataset, split: Split) -> Result<Self> {
        Self::new(ds.split(split))
    }
}

/// `p` distinct identities with `k` sequences each (without replacement when the
/// identity has enough sequences) and up to `frames` distinct frames per sequence.
pub fn sample_finetune(pool: &TrainPool, p: usize, k: usize, frames: usize, rng: &mut Stream) -> Result<Vec<Sample>> {
    let ids: Vec<u32> = pool.classes.keys().copied().collect();
    if ids.len() < p {
        return Err(Error::Dataset(format!("batch needs {p} identities, training split has {}", ids.len())));
    }
    let mut out = Vec::with_capacity(p * k);
    for i in rng.choose_distinct(ids.len(), p) {
        let id = ids[i];
        let seqs: Vec<usize> = (0..pool.sequences.len()).filter(|&j| pool.sequences[j].entry.identity == id).collect();
        let picks: Vec<usize> =
            if seqs.len() >= k { rng.choose_distinct(seqs.len(), k) } else { (0..k).map(|_| rng.below(seqs.len())).collect() };
        for j in picks {
            let seq = seqs[j];
            let len = pool.sequences[seq].len();
            let mut f = rng.choose_distinct(len, frames.min(len));
            f.sort_unstable();
            out.push(Sample { sequence: seq, frames: f, class: pool.classes[&id] });
        }
    }
    Ok(out)
}

/// `n` distinct aligned frame pairs drawn uniformly over all frames of `seqs`.
pub fn sample_pairs(seqs: &[&Sequence], n: usize, rng: &mut Stream) -> Result<PairBatch> {
    let offsets: Vec<usize> = seqs
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.len();
            Some(o)
        })
        .collect();
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    if total < n {
        return Err(Error::Dataset(format!("need {n} frame pairs, only {total} available")));
    }
    let pairs = rng
        .choose_distinct(total, n)
        .into_iter()
        .map(|flat| {
            let s = offsets.partition_point(|&o| o <= flat) - 1;
            (s, flat - offsets[s])
        })
        .collect();
    Ok(PairBatch { pairs })
}

/// Stacks the given frames of `modality` into `[T, 3, H, W]`, replicating the
/// single input plane over three channels.
pub fn frames_input<'a>(frames: impl IntoIterator<Item = (&'a Sequence, usize)>, modality: Modality) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut t = 0;
    for (seq, f) in frames {
        let plane = seq.plane(modality, f)?;
        if plane.len() != FRAME_SIZE * FRAME_SIZE {
            return Err(Error::Dataset(format!("sequence {} frame {f} is not {FRAME_SIZE}x{FRAME_SIZE}", seq.entry.id)));
        }
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        t += 1;
    }
    if t == 0 {
        return Err(clgait_core::Error::EmptySequence.into());
    }
    Ok(Tensor::new(&[t, 3, FRAME_SIZE, FRAME_SIZE], data)?)
}

fn segments(lens: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.into_iter()
        .map(|l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect()
}

/// Weights, optimizer moments and progress of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub weights: NetworkWeights<f32>,
    /// Names of the optimized tensors, in Adam slot order.
    pub trainable: Vec<String>,
    pub adam: AdamState<f32>,
    pub iteration: usize,
    pub losses: Vec<f32>,
    /// Alignment metric at initialization (pre-training only).
    pub alignment_before: Option<f64>,
}

impl TrainState {
    pub fn new(stage: Stage, weights: NetworkWeights<f32>, mut trainable: Vec<String>, cfg: &TrainConfig) -> Result<Self> {
        // moments follow the name order in which weights are bound and updated
        trainable.sort();
        trainable.dedup();
        let params = trainable.iter().map(|n| weights.get(n)).collect::<clgait_core::Result<Vec<_>>>()?;
        let adam = AdamState::new(cfg.adam(), &params);
        Ok(Self { stage, weights, trainable, adam, iteration: 0, losses: Vec::new(), alignment_before: None })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut extra: Vec<(String, Tensor<f32>)> = Vec::new();
        for (i, name) in self.trainable.iter().enumerate() {
            extra.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            extra.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        let meta = |key: &str, v: u64| (format!("meta.{key}"), Tensor::new(&[2], split_u64(v)).unwrap());
        extra.push(meta("iteration", self.iteration as u64));
        extra.push(meta("adam_step", self.adam.step));
        extra.push(meta("stage", self.stage as u64));
        extra.push(("meta.losses".into(), Tensor::new(&[self.losses.len()], self.losses.clone()).unwrap()));
        if let Some(a) = self.alignment_before {
            extra.push(meta("alignment_before", a.to_bits()));
        }
        let all = self.weights.tensors.iter().map(|(k, v)| (k.as_str(), v)).chain(extra.iter().map(|(k, v)| (k.as_str(), v)));
        encode_clgw(all)
    }

    pub fn decode(bytes: &[u8], cfg: &TrainConfig) -> std::result::Result<Self, String> {
        let list = decode_clgw(bytes).map_err(|e| e.0)?;
        let mut weights = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut losses = Vec::new();
        for (name, t) in list {
            if let Some(n) = name.strip_prefix("adam.m/") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.insert(n.to_string(), t);
            } else if name == "meta.losses" {
                losses = t.into_data();
            } else if let Some(k) = name.strip_prefix("meta.") {
                if t.len() != 2 {
                    return Err(format!("malformed {name}"));
                }
                meta.insert(k.to_string(), join_u64(t.data()));
            } else {
                weights.insert(name, t);
            }
        }
        let field = |k: &str| meta.get(k).copied().ok_or_else(|| format!("checkpoint lacks meta.{k}"));
        let stage = match field("stage")? {
            0 => Stage::Pretrain,
            1 => Stage::Finetune,
            s => return Err(format!("unknown stage {s}")),
        };
        let trainable: Vec<String> = m.keys().cloned().collect();
        if v.keys().ne(m.keys()) {
            return Err("adam moments are incomplete".into());
        }
        let adam = AdamState {
            step: field("adam_step")?,
            m: m.into_values().collect(),
            v: v.into_values().collect(),
            config: cfg.adam(),
        };
        Ok(Self {
            stage,
            weights: NetworkWeights { tensors: weights },
            trainable,
            adam,
            iteration: field("iteration")? as usize,
            losses,
            alignment_before: meta.get("alignment_before").map(|b| f64::from_bits(*b)),
        })
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(crate::error::io_err(path))?;
        Self::decode(&bytes, cfg).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }
}

// integers travel through f32 tensors as two 32-bit halves
fn split_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits((v >> 32) as u32), f32::from_bits(v as u32)]
}

fn join_u64(d: &[f32]) -> u64 {
    ((d[0].to_bits() as u64) << 32) | d[1].to_bits() as u64
}

/// Applies one Adam step to the trainable weights.
fn apply(state: &mut TrainState, grads: Vec<Tensor<f32>>) -> Result<()> {
    let TrainState { weights, trainable, adam, .. } = state;
    let names: BTreeSet<&str> = trainable.iter().map(String::as_str).collect();
    // BTreeMap iteration is name-ordered, matching `trainable`
    let mut params: Vec<&mut Tensor<f32>> =
        weights.tensors.iter_mut().filter(|(k, _)| names.contains(k.as_str())).map(|(_, v)| v).collect();
    let grads: Vec<&Tensor<f32>> = grads.iter().collect();
    adam.update(&mut params, &grads)?;
    Ok(())
}

fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> Stream {
    Stream::new(derive_seed(seed, &[name_key(stage.as_str()), iteration as u64]), 0)
}

/// Contrastive features of aligned frame pairs: `[N, P, C]` for part granularity,
/// `[N, C]` for global.
fn pair_features(
    tape: &mut Tape<f32>,
    net: &Network,
    seqs: &[&Sequence],
    batch: &PairBatch,
    granularity: Granularity,
) -> Result<(Var, Var)> {
    let frames = |m| frames_input(batch.pairs.iter().map(|&(s, f)| (seqs[s], f)), m);
    let xs = tape.constant(frames(Modality::Silhouette)?);
    let xp = tape.constant(frames(Modality::PointCloud)?);
    let single: Vec<(usize, usize)> = (0..batch.pairs.len()).map(|i| (i, 1)).collect();
    let fs = net.encode_preact(tape, xs, Modality::Silhouette)?;
    let fp = net.encode_preact(tape, xp, Modality::PointCloud)?;
    Ok(match granularity {
        Granularity::Part => (net.part_pool(tape, fs, &single)?, net.part_pool(tape, fp, &single)?),
        Granularity::Global => (net.global_pool(tape, fs, &single)?, net.global_pool(tape, fp, &single)?),
    })
}

/// Mean diagonal minus mean off-diagonal cosine similarity between the silhouette
/// and point-cloud features of `batch`; part features are scored per part and averaged.
pub fn alignment(weights: &NetworkWeights<f32>, net_cfg: &NetConfig, seqs: &[&Sequence], batch: &PairBatch, granularity: Granularity) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, |_| false);
    let net = Network { cfg: net_cfg, w: &bound };
    let (s, p) = pair_features(&mut tape, &net, seqs, batch, granularity)?;
    let (s, p) = (tape.value(s).clone(), tape.value(p).clone());
    match granularity {
        Granularity::Global => Ok(alignment_metric(&similarity_matrix(&s, &p)?)?),
        Granularity::Part => {
            let (n, parts, c) = (s.shape()[0], s.shape()[1], s.shape()[2]);
            let slice = |t: &Tensor<f32>, k: usize| {
                let mut d = Vec::with_capacity(n * c);
                for i in 0..n {
                    d.extend_from_slice(&t.data()[(i * parts + k) * c..(i * parts + k + 1) * c]);
                }
                Tensor::new(&[n, c], d)
            };
            let mut total = 0.0;
            for k in 0..parts {
                total += alignment_metric(&similarity_matrix(&slice(&s, k)?, &slice(&p, k)?)?)?;
            }
            Ok(total / parts as f64)
        }
    }
}

/// Held-out pairs for the alignment metric: validation and test sequences, or the
/// training split when the dataset holds nothing else.
pub fn heldout_pairs<'a>(ds: &'a Dataset, cfg: &TrainConfig) -> Result<(Vec<&'a Sequence>, PairBatch)> {
    let mut seqs = ds.split(Split::Val);
    seqs.extend(ds.split(Split::Test));
    if seqs.is_empty() {
        seqs = ds.split(Split::Train);
    }
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut rng = Stream::new(cfg.seed, name_key("alignment"));
    let batch = sample_pairs(&seqs, cfg.alignment_pairs.min(total), &mut rng)?;
    Ok((seqs, batch))
}

/// Called after every checkpointed iteration.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(&TrainState) -> Result<()>;

/// Runs contrastive pre-training up to `cfg.iterations_pretrain`, continuing from
/// `resume` if given. Only the modality stems and the shared stack are optimized.
pub fn pretrain_cspp(ds: &Dataset, cfg: &TrainConfig, resume: Option<TrainState>, hook: CheckpointHook) -> Result<TrainState> {
    cfg.validate()?;
    let pool = TrainPool::from_split(ds, Split::Train)?;
    let net_cfg = cfg.net(0);
    let (held_seqs, held) = heldout_pairs(ds, cfg)?;
    let mut state = match resume {
        Some(s) => check_resume(s, Stage::Pretrain)?,
        None => {
            let weights = NetworkWeights::init(&net_cfg, cfg.seed)?;
            let mut s = TrainState::new(Stage::Pretrain, weights, backbone_names(&net_cfg), cfg)?;
            s.alignment_before = Some(alignment(&s.weights, &net_cfg, &held_seqs, &held, cfg.granularity)?);
            s
        }
    };
    let tau = cfg.tau as f32;
    while state.iteration < cfg.iterations_pretrain {
        let i = state.iteration + 1;
        let mut rng = iteration_rng(cfg.seed, Stage::Pretrain, i);
        let batch = sample_pairs(&pool.sequences, cfg.pretrain_pairs, &mut rng)?;
        let mut tape = Tape::new();
        let trainable: BTreeSet<&str> = state.trainable.iter().map(String::as_str).collect();
        let bound = BoundWeights::bind(&mut tape, &state.weights, |n| trainable.contains(n));
        let net = Network { cfg: &net_cfg, w: &bound };
        let (s, p) = pair_features(&mut tape, &net, &pool.sequences, &batch, cfg.granularity)?;
        let loss = match cfg.granularity {
            Granularity::Part => part_contrastive_loss(&mut tape, s, p, tau)?,
            Granularity::Global => contrastive_loss(&mut tape, s, p, tau)?,
        };
        let leaves: Vec<Var> = bound.trainable.iter().map(|(_, v)| *v).collect();
        let grads = tape.gradient(loss, &leaves)?;
        let value = tape.value(loss).item()?;
        drop(tape);
        apply(&mut state, grads)?;
        state.losses.push(value);
        state.iteration = i;
        if i % cfg.checkpoint_every == 0 || i == cfg.iterations_pretrain {
            hook(&state)?;
        }
    }
    Ok(state)
}

fn check_resume(s: TrainState, stage: Stage) -> Result<TrainState> {
    if s.stage != stage {
        return Err(Error::Config(format!("checkpoint is from {}, not {}", s.stage.as_str(), stage.as_str())));
    }
    Ok(s)
}

/// Fresh fine-tuning weights; the stems and shared stack are copied from `init`
/// by name when given, heads and classifiers are always newly initialized.
pub fn finetune_init(cfg: &TrainConfig, num_classes: usize, init: Option<&NetworkWeights<f32>>) -> Result<NetworkWeights<f32>> {
    let net_cfg = cfg.net(num_classes);
    let mut weights = NetworkWeights::init(&net_cfg, cfg.seed)?;
    if let Some(src) = init {
        for name in backbone_names(&net_cfg) {
            let t = src.get(&name)?;
            let dst = weights.get_mut(&name)?;
            if t.shape() != dst.shape() {
                return Err(Error::Config(format!(
                    "pre-trained {name} has shape {:?}, network expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
    }
    Ok(weights)
}

/// One fine-tuning loss evaluation on a sampled batch. Returns the loss and, when
/// `leaves` is requested, the gradients of the bound trainable weights.
fn finetune_step(
    pool: &TrainPool,
    weights: &NetworkWeights<f32>,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    batch: &[Sample],
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, |_| true);
    let net = Network { cfg: net_cfg, w: &bound };
    let frames = |m| frames_input(batch.iter().flat_map(|s| s.frames.iter().map(move |&f| (pool.sequences[s.sequence], f))), m);
    let xs = tape.constant(frames(Modality::Silhouette)?);
    let xp = tape.constant(frames(Modality::PointCloud)?);
    let fs = net.stem(&mut tape, xs, Modality::Silhouette)?;
    let fp = net.stem(&mut tape, xp, Modality::PointCloud)?;
    let f = tape.concat_rows(&[fs, fp])?;
    let fmap = net.backbone(&mut tape, f)?;
    let segs = segments(batch.iter().chain(batch).map(|s| s.frames.len()));
    let pooled = net.part_pool(&mut tape, fmap, &segs)?;
    let parts = net.heads(&mut tape, pooled)?;
    let logits = if cfg.gamma > 0.0 { Some(net.classify(&mut tape, parts)?) } else { None };
    let n = 2 * batch.len();
    let emb = tape.reshape(parts, &[n, net_cfg.embedding_len()])?;
    let labels = BatchLabels {
        identities: batch.iter().chain(batch).map(|s| s.class).collect(),
        modalities: batch.iter().map(|_| Modality::Silhouette).chain(batch.iter().map(|_| Modality::PointCloud)).collect(),
    };
    let loss = combined_loss(&mut tape, emb, logits, &labels, cfg.gamma as f32, cfg.margin as f32)?;
    let leaves: Vec<Var> = bound.trainable.iter().map(|(_, v)| *v).collect();
    let grads = tape.gradient(loss, &leaves)?;
    Ok((tape.value(loss).item()?, grads))
}

/// Runs cross-modality fine-tuning up to `cfg.iterations_finetune` with all weights
/// trainable.
pub fn finetune(
    ds: &Dataset,
    init: Option<&NetworkWeights<f32>>,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    hook: CheckpointHook,
) -> Result<TrainState> {
    cfg.validate()?;
    let pool = TrainPool::from_split(ds, Split::Train)?;
    let net_cfg = cfg.net(pool.classes.len());
    let mut state = match resume {
        Some(s) => check_resume(s, Stage::Finetune)?,
        None => {
            let weights = finetune_init(cfg, pool.classes.len(), init)?;
            let names = weights.tensors.keys().cloned().collect();
            TrainState::new(Stage::Finetune, weights, names, cfg)?
        }
    };
    while state.iteration < cfg.iterations_finetune {
        let i = state.iteration + 1;
        let mut rng = iteration_rng(cfg.seed, Stage::Finetune, i);
        let batch = sample_finetune(&pool, cfg.batch_p, cfg.batch_k, cfg.frames_per_sample, &mut rng)?;
        let (value, grads) = finetune_step(&pool, &state.weights, &net_cfg, cfg, &batch)?;
        apply(&mut state, grads)?;
        state.losses.push(value);
        state.iteration = i;
        if i % cfg.checkpoint_every == 0 || i == cfg.iterations_finetune {
            hook(&state)?;
        }
    }
    Ok(state)
}

/// Writes `checkpoints/<stage>-<iteration>.clgw` under `out`.
pub fn write_checkpoint(out: &Path, state: &TrainState) -> Result<()> {
    let path = out.join("checkpoints").join(format!("{}-{:06}.clgw", state.stage.as_str(), state.iteration));
    write_bytes(&path, &state.encode())
}

pub fn save_weights(path: &Path, weights: &NetworkWeights<f32>) -> Result<()> {
    write_bytes(path, &encode_clgw(weights.tensors.iter().map(|(k, v)| (k.as_str(), v))))
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights<f32>> {
    let list = read_clgw(path)?;
    Ok(NetworkWeights { tensors: list.into_iter().filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with("meta.")).collect() })
}

/// `iteration,loss` rows; with `alignment` given, a third column holds the
/// post-training alignment metric on the last row.
pub fn loss_csv(losses: &[f32], alignment: Option<f64>) -> String {
    let mut s = String::from(if alignment.is_some() { "iteration,loss,alignment\n" } else { "iteration,loss\n" });
    for (i, l) in losses.iter().enumerate() {
        let _ = write!(s, "{},{l}", i + 1);
        if let Some(a) = alignment {
            s.push(',');
            if i + 1 == losses.len() {
                let _ = write!(s, "{a}");
            }
        }
        s.push('\n');
    }
    s
}
