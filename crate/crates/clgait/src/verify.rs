//! Finite-difference verification of the full network under both training losses.

use clgait_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use clgait_core::losses::{combined_loss, part_contrastive_loss, BatchLabels};
use clgait_core::network::{BoundWeights, NetConfig, Network, NetworkWeights};
use clgait_core::rng::Stream;
use clgait_core::synth::Modality;
use clgait_core::{Tape, Tensor, Var};

use crate::error::Result;

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn micro_config() -> NetConfig {
    NetConfig { input_size: 16, channels: [2, 3, 4], parts: 2, embed_dim: 3, head_depth: 1, num_classes: 3 }
}

fn micro_weights(cfg: &NetConfig, seed: u64) -> Result<NetworkWeights<f64>> {
    let mut w = NetworkWeights::<f64>::init(cfg, seed)?;
    // nonzero biases keep ReLU inputs away from exact zeros
    let mut s = Stream::new(seed, 1);
    for (name, t) in w.tensors.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * s.normal());
        }
    }
    Ok(w)
}

fn inputs(t: usize, seed: u64, stream: u64) -> Tensor<f64> {
    let mut s = Stream::new(seed, stream);
    Tensor::from_fn(&[t, 3, 16, 16], |_| s.uniform())
}

fn run(
    cfg: &NetConfig,
    w: &NetworkWeights<f64>,
    seed: u64,
    mut loss: impl FnMut(&mut Tape<f64>, &Network) -> clgait_core::Result<Var>,
) -> Result<GradCheckReport> {
    let (names, values): (Vec<String>, Vec<Tensor<f64>>) = w.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
    let opts = GradCheckOptions { h: 1e-5, max_coords_per_param: 8, seed, ..GradCheckOptions::default() };
    Ok(grad_check(
        |tape, leaves| {
            let bound = BoundWeights::from_vars(names.iter().cloned().zip(leaves.iter().copied()));
            let net = Network { cfg, w: &bound };
            loss(tape, &net)
        },
        &values,
        &opts,
    )?)
}

/// Gradient check of every weight under the combined fine-tuning loss (γ = 1).
pub fn check_combined(seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let w = micro_weights(&cfg, seed)?;
    let (sil, pts) = (inputs(4, seed, 10), inputs(4, seed, 11));
    let segs = [(0, 2), (2, 2)];
    let labels = BatchLabels {
        identities: vec![0, 1, 0, 1],
        modalities: vec![Modality::Silhouette, Modality::Silhouette, Modality::PointCloud, Modality::PointCloud],
    };
    run(&cfg, &w, seed, |tape, net| {
        let xs = tape.constant(sil.clone());
        let xp = tape.constant(pts.clone());
        let es = net.embed(tape, xs, Modality::Silhouette, &segs)?;
        let ep = net.embed(tape, xp, Modality::PointCloud, &segs)?;
        let parts = tape.concat_rows(&[es, ep])?;
        let logits = net.classify(tape, parts)?;
        let flat = tape.reshape(parts, &[4, cfg.embedding_len()])?;
        // a wide margin keeps the hinges active so every weight gets gradient
        combined_loss(tape, flat, Some(logits), &labels, 1.0, 10.0)
    })
}

/// Gradient check of the stems and shared stack under the part-level contrastive loss.
pub fn check_part_contrastive(seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let w = micro_weights(&cfg, seed)?;
    let (sil, pts) = (inputs(3, seed, 20), inputs(3, seed, 21));
    let single = [(0, 1), (1, 1), (2, 1)];
    run(&cfg, &w, seed, |tape, net| {
        let xs = tape.constant(sil.clone());
        let xp = tape.constant(pts.clone());
        let fs = net.encode_preact(tape, xs, Modality::Silhouette)?;
        let fp = net.encode_preact(tape, xp, Modality::PointCloud)?;
        let s = net.part_pool(tape, fs, &single)?;
        let p = net.part_pool(tape, fp, &single)?;
        part_contrastive_loss(tape, s, p, 1.0)
    })
}
