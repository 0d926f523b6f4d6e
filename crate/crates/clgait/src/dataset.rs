//! Paired gait datasets on disk.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>/<seq-id>/sil/%04d.pgm     8-bit silhouettes
//! <root>/<id>/<seq-id>/pcd/%04d.ply     ASCII point clouds
//! <root>/<id>/<seq-id>/depth/%04d.pgm   16-bit depth, millimeters
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clgait_core::geometry::{DepthImage, PointCloud, SilhouetteFrame};
use clgait_core::rng::{name_key, Stream};
use clgait_core::synth::{sequence_seed, synth_walker, Condition, DepthRender, IdentityParams, Modality, SynthOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::formats::{
    decode_pgm, decode_ply, depth_to_pgm, encode_pgm, encode_ply, pgm_to_depth, pgm_to_silhouette, quantize_cloud,
    quantize_depth, silhouette_to_pgm, write_bytes,
};

/// Side of the stored silhouette and depth frames.
pub const FRAME_SIZE: usize = 64;
pub const DEPTH_NEAR: f64 = 1.0;
pub const DEPTH_FAR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How sequences are assigned to splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Identities are partitioned; no identity appears in two splits.
    #[default]
    Identity,
    /// Every identity is in train and test: even repeats train, odd repeats test.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    /// Path of the sequence directory relative to the root, `<id>/<seq-id>`.
    pub id: String,
    pub identity: u32,
    pub view: u16,
    pub condition: Condition,
    pub repeat: u32,
    pub frames: usize,
    pub modalities: Vec<Modality>,
    pub timestamps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn of(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub identities: Vec<u32>,
    pub sequences: Vec<SequenceEntry>,
    pub split_mode: SplitMode,
    /// Sequence ids per split.
    pub splits: Splits,
    /// SHA-256 of every frame file, keyed by path relative to the root.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<&str> = self.sequences.iter().map(|s| s.id.as_str()).collect();
        if known.len() != self.sequences.len() {
            return Err(Error::Dataset("duplicate sequence id in manifest".into()));
        }
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.splits.of(split) {
                if !known.contains(id.as_str()) {
                    return Err(Error::Dataset(format!("split references unknown sequence {id}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Dataset(format!("sequence {id} is in more than one split")));
                }
            }
        }
        if self.split_mode == SplitMode::Identity {
            let mut owner: BTreeMap<u32, Split> = BTreeMap::new();
            let by_id: BTreeMap<&str, u32> = self.sequences.iter().map(|s| (s.id.as_str(), s.identity)).collect();
            for split in [Split::Train, Split::Val, Split::Test] {
                for id in self.splits.of(split) {
                    let identity = by_id[id.as_str()];
                    if *owner.entry(identity).or_insert(split) != split {
                        return Err(Error::Dataset(format!("identity {identity} appears in more than one split")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One paired sequence with frame-aligned silhouettes, depth images and point clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub entry: SequenceEntry,
    pub silhouettes: Vec<SilhouetteFrame>,
    pub depths: Vec<DepthImage>,
    pub clouds: Vec<PointCloud>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.silhouettes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.silhouettes.is_empty()
    }

    pub fn is_paired(&self) -> bool {
        !self.is_empty() && self.depths.len() == self.len()
    }

    /// One network input plane for frame `t`: the binary mask for silhouettes, the
    /// depth channel encoding for point clouds.
    pub fn plane(&self, modality: Modality, t: usize) -> Result<Vec<f32>> {
        Ok(match modality {
            Modality::Silhouette => self.silhouettes[t].mask.clone(),
            Modality::PointCloud => {
                let c = clgait_core::geometry::depth_to_channels(&self.depths[t], DEPTH_NEAR, DEPTH_FAR)?;
                let n = self.depths[t].width * self.depths[t].height;
                c[..n].to_vec()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sequence> {
        let ids: BTreeSet<&str> = self.manifest.splits.of(split).iter().map(String::as_str).collect();
        self.sequences.iter().filter(|s| ids.contains(s.entry.id.as_str())).collect()
    }
}

/// What to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthPlan {
    pub ids: u32,
    pub seqs_per_id: u32,
    pub frames: usize,
    pub seed: u64,
    pub views: Vec<u16>,
    pub conditions: Vec<Condition>,
    pub split_mode: SplitMode,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            ids: 16,
            seqs_per_id: 8,
            frames: 24,
            seed: 0,
            views: vec![0, 90],
            conditions: vec![Condition::Normal, Condition::Bag],
            split_mode: SplitMode::Identity,
        }
    }
}

impl SynthPlan {
    pub fn validate(&self) -> Result<()> {
        if self.ids < 2 || self.seqs_per_id == 0 {
            return Err(Error::Config("need at least 2 identities and 1 sequence per identity".into()));
        }
        if self.views.is_empty() || self.conditions.is_empty() {
            return Err(Error::Config("views and conditions must be nonempty".into()));
        }
        if let Some(v) = self.views.iter().find(|v| **v % 45 != 0 || **v >= 360) {
            return Err(Error::Config(format!("view {v} is not a multiple of 45 in [0, 360)")));
        }
        Ok(())
    }

    /// `(view, condition, repeat)` of each of one identity's sequences. Views vary
    /// slowest; once every combination is used the repeat index increments.
    pub fn sequence_labels(&self) -> Vec<(u16, Condition, u32)> {
        let combos: Vec<(u16, Condition)> =
            self.views.iter().flat_map(|&v| self.conditions.iter().map(move |&c| (v, c))).collect();
        (0..self.seqs_per_id as usize)
            .map(|j| {
                let (v, c) = combos[j % combos.len()];
                (v, c, (j / combos.len()) as u32)
            })
            .collect()
    }
}

pub fn sequence_id(identity: u32, view: u16, condition: Condition, repeat: u32) -> String {
    format!("{identity:04}/v{view:03}-{}-r{repeat}", condition.as_str())
}

/// Renders one sequence and converts it to the stored representation.
pub fn synth_sequence(plan: &SynthPlan, identity: u32, view: u16, condition: Condition, repeat: u32, opts: &SynthOptions) -> Result<Sequence> {
    let params = IdentityParams::sample(plan.seed, identity as u64);
    let seed = sequence_seed(plan.seed, identity, view, condition, repeat);
    let (sil, pcd) = synth_walker(identity, &params, view, condition, plan.frames, seed, opts)?;
    let render = DepthRender::default();
    let silhouettes = sil.frames.iter().map(|f| f.normalize_crop(FRAME_SIZE)).collect::<clgait_core::Result<Vec<_>>>()?;
    let mut depths = Vec::with_capacity(pcd.frames.len());
    let mut clouds = Vec::with_capacity(pcd.frames.len());
    for cloud in &pcd.frames {
        let cloud = quantize_cloud(cloud);
        depths.push(quantize_depth(&render.render(&cloud)?.normalize_crop(FRAME_SIZE)?));
        clouds.push(cloud);
    }
    Ok(Sequence {
        entry: SequenceEntry {
            id: sequence_id(identity, view, condition, repeat),
            identity,
            view,
            condition,
            repeat,
            frames: plan.frames,
            modalities: vec![Modality::Silhouette, Modality::PointCloud],
            timestamps: sil.timestamps,
        },
        silhouettes,
        depths,
        clouds,
    })
}

/// Synthesizes the whole plan. Sequences are generated in parallel on the current
/// rayon pool; each has its own seed, so the result does not depend on the pool size.
pub fn synth_dataset(plan: &SynthPlan, opts: &SynthOptions) -> Result<Dataset> {
    plan.validate()?;
    let labels = plan.sequence_labels();
    let jobs: Vec<(u32, u16, Condition, u32)> =
        (0..plan.ids).flat_map(|id| labels.iter().map(move |&(v, c, r)| (id, v, c, r))).collect();
    let sequences = jobs
        .par_iter()
        .map(|&(id, v, c, r)| synth_sequence(plan, id, v, c, r, opts))
        .collect::<Result<Vec<_>>>()?;
    let identities: Vec<u32> = (0..plan.ids).collect();
    let splits = assign_splits(&sequences, &identities, plan.split_mode, plan.seed);
    let manifest = Manifest {
        seed: plan.seed,
        identities,
        sequences: sequences.iter().map(|s| s.entry.clone()).collect(),
        split_mode: plan.split_mode,
        splits,
        checksums: BTreeMap::new(),
    };
    Ok(Dataset { manifest, sequences })
}

/// Identity mode shuffles identities and gives a quarter to test, a quarter to
/// validation and the rest to training.
pub fn assign_splits(seqs: &[Sequence], identities: &[u32], mode: SplitMode, seed: u64) -> Splits {
    let mut splits = Splits::default();
    match mode {
        SplitMode::Identity => {
            let mut order = identities.to_vec();
            let mut rng = Stream::new(seed, name_key("splits"));
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let n = order.len();
            let n_test = (n / 4).max(1);
            let n_val = if n >= 4 { n / 4 } else { 0 };
            let test: BTreeSet<u32> = order[..n_test].iter().copied().collect();
            let val: BTreeSet<u32> = order[n_test..n_test + n_val].iter().copied().collect();
            for s in seqs {
                let bucket = if test.contains(&s.entry.identity) {
                    &mut splits.test
                } else if val.contains(&s.entry.identity) {
                    &mut splits.val
                } else {
                    &mut splits.train
                };
                bucket.push(s.entry.id.clone());
            }
        }
        SplitMode::Sequence => {
            for s in seqs {
                let bucket = if s.entry.repeat % 2 == 0 { &mut splits.train } else { &mut splits.test };
                bucket.push(s.entry.id.clone());
            }
        }
    }
    splits
}

fn frame_files(seq: &SequenceEntry, t: usize) -> [String; 3] {
    [
        format!("{}/sil/{t:04}.pgm", seq.id),
        format!("{}/pcd/{t:04}.ply", seq.id),
        format!("{}/depth/{t:04}.pgm", seq.id),
    ]
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes all frames and `manifest.json`, returning the manifest with checksums.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<Manifest> {
    ds.manifest.validate()?;
    let mut manifest = ds.manifest.clone();
    manifest.sequences = ds.sequences.iter().map(|s| s.entry.clone()).collect();
    let per_seq = ds
        .sequences
        .par_iter()
        .map(|seq| -> Result<Vec<(String, String)>> {
            let mut sums = Vec::new();
            if seq.depths.len() != seq.len() || seq.clouds.len() != seq.len() {
                return Err(Error::Dataset(format!("sequence {} is not frame-aligned", seq.entry.id)));
            }
            for t in 0..seq.len() {
                let [sil, pcd, depth] = frame_files(&seq.entry, t);
                let payloads = [
                    (sil, encode_pgm(&silhouette_to_pgm(&seq.silhouettes[t]))),
                    (pcd, encode_ply(&seq.clouds[t])),
                    (depth, encode_pgm(&depth_to_pgm(&seq.depths[t]))),
                ];
                for (rel, bytes) in payloads {
                    write_bytes(&root.join(&rel), &bytes)?;
                    sums.push((rel, sha256_hex(&bytes)));
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    manifest.checksums = per_seq.into_iter().flatten().collect();
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json { path: root.join("manifest.json"), source })?;
    write_bytes(&root.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn read_checked(root: &Path, rel: &str, manifest: &Manifest) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    match manifest.checksums.get(rel) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
        Some(_) => Err(Error::Checksum { path }),
        None => Err(Error::Format { path, msg: "file has no checksum in the manifest".into() }),
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every sequence, verifying each file against its manifest checksum.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let sequences = manifest
        .sequences
        .par_iter()
        .map(|entry| -> Result<Sequence> {
            let mut seq = Sequence { entry: entry.clone(), silhouettes: vec![], depths: vec![], clouds: vec![] };
            for t in 0..entry.frames {
                let [sil, pcd, depth] = frame_files(entry, t);
                let decode_at = |rel: &str| root.join(rel);
                let b = read_checked(root, &sil, &manifest)?;
                seq.silhouettes.push(pgm_to_silhouette(&decode_pgm(&b).map_err(|e| e.at(decode_at(&sil)))?));
                let b = read_checked(root, &pcd, &manifest)?;
                seq.clouds.push(decode_ply(&b).map_err(|e| e.at(decode_at(&pcd)))?);
                let b = read_checked(root, &depth, &manifest)?;
                seq.depths.push(pgm_to_depth(&decode_pgm(&b).map_err(|e| e.at(decode_at(&depth)))?));
            }
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, sequences })
}

/// Path of a frame file, for diagnostics.
pub fn frame_path(root: &Path, seq: &SequenceEntry, modality_dir: &str, t: usize) -> PathBuf {
    let ext = if modality_dir == "pcd" { "ply" } else { "pgm" };
    root.join(format!("{}/{modality_dir}/{t:04}.{ext}", seq.id))
}

/// A silhouette and an externally estimated depth map of the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInput {
    pub name: String,
    pub silhouette: SilhouetteFrame,
    pub depth: DepthImage,
}

/// Turns each input into a one-frame paired sequence (for contrastive pre-training)
/// through the pseudo point-cloud pipeline. `k` defaults to the virtual camera of
/// each image's size. Every sequence lands in the training split.
pub fn pseudo_dataset(
    inputs: &[PseudoInput],
    k: Option<clgait_core::geometry::CameraIntrinsics>,
    voxel: f64,
    radius: usize,
    seed: u64,
) -> Result<Dataset> {
    let sequences = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| -> Result<Sequence> {
            let k = k.unwrap_or_else(|| {
                clgait_core::geometry::CameraIntrinsics::virtual_default(input.depth.width, input.depth.height)
            });
            let pair = clgait_core::synth::pseudo_pairs_from_depth(&input.silhouette, &input.depth, &k, voxel, radius, FRAME_SIZE)
                .map_err(|e| Error::Dataset(format!("{}: {e}", input.name)))?;
            let name: String =
                input.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
            Ok(Sequence {
                entry: SequenceEntry {
                    id: format!("{i:04}/pseudo-{name}"),
                    identity: i as u32,
                    view: 0,
                    condition: Condition::Normal,
                    repeat: 0,
                    frames: 1,
                    modalities: vec![Modality::Silhouette, Modality::PointCloud],
                    timestamps: vec![0.0],
                },
                silhouettes: vec![pair.silhouette],
                depths: vec![quantize_depth(&pair.depth)],
                clouds: vec![quantize_cloud(&pair.points)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        identities: (0..inputs.len() as u32).collect(),
        splits: Splits { train: sequences.iter().map(|s| s.entry.id.clone()).collect(), ..Splits::default() },
        sequences: sequences.iter().map(|s| s.entry.clone()).collect(),
        split_mode: SplitMode::Identity,
        checksums: BTreeMap::new(),
    };
    Ok(Dataset { manifest, sequences })
}
