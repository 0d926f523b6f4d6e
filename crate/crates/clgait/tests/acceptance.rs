//! Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails. `CLGAIT_ACCEPTANCE=1,3` restricts the run to those criteria.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use clgait::config::TrainConfig;
use clgait::core::eval::{distance_matrix, rank_k, Direction};
use clgait::core::geometry::{back_project, project_points, DepthImage, PointCloud, SilhouetteFrame};
use clgait::core::losses::{contrastive_loss_value, cross_modality_triplet_value, BatchLabels};
use clgait::core::network::{embed_sequence, NetConfig, NetworkWeights};
use clgait::core::rng::Stream;
use clgait::core::synth::{pseudo_pairs_from_depth, synth_walker, Condition, DepthRender, IdentityParams, Modality, SynthOptions};
use clgait::core::Tensor;
use clgait::dataset::{synth_dataset, Dataset, Split, SplitMode, SynthPlan};
use clgait::report::evaluate;
use clgait::train::{alignment, finetune, heldout_pairs, pretrain_cspp, TrainState};
use clgait::verify::{check_combined, check_part_contrastive, GRADCHECK_TOL};

type Outcome = Result<(bool, String), String>;

const RANK1_TARGET: f64 = 90.0;
const BASELINE_CEILING: f64 = 15.0;
const ALIGNMENT_GAIN: f64 = 0.1;
const EVAL_EVERY: usize = 250;
const SEED: u64 = 2024;

fn main() {
    clgait::tune_allocator();
    let only: Option<Vec<u32>> =
        std::env::var("CLGAIT_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {n} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    };
    if want(1) {
        report(1, "gradient integrity", gradient_integrity());
    }
    if want(2) {
        report(2, "loss oracles", loss_oracles());
    }
    if want(3) {
        report(3, "geometry round trip", geometry_round_trip());
    }
    if want(4) {
        report(4, "structural invariants", structural_invariants());
    }
    let mut scratch = None;
    if want(5) || want(6) {
        match end_to_end() {
            Ok((outcome, curve)) => {
                if want(5) {
                    report(5, "end-to-end synthetic experiment", Ok(outcome));
                }
                scratch = Some(curve);
            }
            Err(e) => report(5, "end-to-end synthetic experiment", Err(e)),
        }
    }
    if want(6) {
        report(6, "contrastive pre-training effect", cspp_effect(scratch.as_ref()));
    }
    if want(7) {
        report(7, "determinism", determinism());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let combined = check_combined(SEED).map_err(err)?;
    let contrastive = check_part_contrastive(SEED).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = combined.max_rel_error.max(contrastive.max_rel_error);
    let ok = worst < GRADCHECK_TOL && secs < 120.0 && combined.checked > 0 && contrastive.checked > 0;
    Ok((
        ok,
        format!(
            "max relative error {:.2e} combined / {:.2e} part contrastive over {} coordinates (< {GRADCHECK_TOL:e}); {secs:.1} s (< 120 s)",
            combined.max_rel_error,
            contrastive.max_rel_error,
            combined.checked + contrastive.checked
        ),
    ))
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

fn cross_labels(ids: usize, per: usize) -> BatchLabels {
    let mut identities = Vec::new();
    let mut modalities = Vec::new();
    for m in [Modality::Silhouette, Modality::PointCloud] {
        for i in 0..ids {
            for _ in 0..per {
                identities.push(i);
                modalities.push(m);
            }
        }
    }
    BatchLabels { identities, modalities }
}

fn triplet_oracle(e: &Tensor<f64>, labels: &BatchLabels, margin: f64) -> f64 {
    let d = e.shape()[1];
    let dist = |i: usize, j: usize| {
        let mut acc = 0.0;
        for k in 0..d {
            let t = e.data()[i * d + k] - e.data()[j * d + k];
            acc += t * t;
        }
        acc.sqrt()
    };
    let n = labels.len();
    let direction = |anchor: Modality| {
        let (mut total, mut count) = (0.0, 0usize);
        for a in (0..n).filter(|&a| labels.modalities[a] == anchor) {
            for p in (0..n).filter(|&p| labels.modalities[p] != anchor && labels.identities[p] == labels.identities[a]) {
                for q in (0..n).filter(|&q| labels.modalities[q] != anchor && labels.identities[q] != labels.identities[a]) {
                    let v = margin + dist(a, p) - dist(a, q);
                    if v > 0.0 {
                        total += v;
                    }
                    count += 1;
                }
            }
        }
        total / count as f64
    };
    (direction(Modality::PointCloud) + direction(Modality::Silhouette)) * 0.5
}

fn rank_k_oracle(d: &[Vec<f64>], pid: &[u32], gid: &[u32], k: usize) -> f64 {
    let mut hits = 0;
    for (i, row) in d.iter().enumerate() {
        let best = (0..row.len()).filter(|&j| gid[j] == pid[i]).min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        if let Some(b) = best {
            let ahead = (0..row.len()).filter(|&j| row[j] < row[b] || (row[j] == row[b] && j < b)).count();
            if ahead < k {
                hits += 1;
            }
        }
    }
    100.0 * hits as f64 / d.len() as f64
}

fn loss_oracles() -> Outcome {
    let single = contrastive_loss_value(&mat(1, 3, &[0.3, -1.0, 2.0]), &mat(1, 3, &[1.0, 0.5, 0.0]), 1.0).map_err(err)?;
    let eye = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let ortho = contrastive_loss_value(&eye, &eye, 1.0).map_err(err)?;
    let same = mat(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let identical = contrastive_loss_value(&same, &same, 1.0).map_err(err)?;
    let ortho_want = (1.0 + (-1.0f64).exp()).ln();
    let closed = single == 0.0 && (ortho - ortho_want).abs() <= 1e-9 && (identical - 2f64.ln()).abs() <= 1e-9;

    let mut triplet_mismatch = 0;
    let mut rank_mismatch = 0;
    for seed in 0..100u64 {
        let mut s = Stream::new(seed, 1);
        let ids = 2 + s.below(6);
        let labels = cross_labels(ids, 1 + s.below(25 / ids));
        let d = 1 + s.below(8);
        let margin = s.uniform_in(0.0, 1.0);
        let e = Tensor::from_fn(&[labels.len(), d], |_| s.normal());
        let got = cross_modality_triplet_value(&e, &labels, margin).map_err(err)?;
        if got.to_bits() != triplet_oracle(&e, &labels, margin).to_bits() {
            triplet_mismatch += 1;
        }

        let (np, ng) = (1 + s.below(50), 1 + s.below(50));
        let nid = 1 + s.below(10);
        let pid: Vec<u32> = (0..np).map(|_| s.below(nid) as u32).collect();
        let gid: Vec<u32> = (0..ng).map(|_| s.below(nid) as u32).collect();
        let probes: Vec<Vec<f32>> = (0..np).map(|_| vec![s.below(4) as f32, s.below(4) as f32]).collect();
        let gallery: Vec<Vec<f32>> = (0..ng).map(|_| vec![s.below(4) as f32, s.below(4) as f32]).collect();
        let dm = distance_matrix(&probes, &gallery).map_err(err)?;
        let rows: Vec<Vec<f64>> = (0..np).map(|i| (0..ng).map(|j| dm.at(i, j)).collect()).collect();
        for k in [1, 5, 10] {
            if rank_k(&dm, &pid, &gid, k) != rank_k_oracle(&rows, &pid, &gid, k) {
                rank_mismatch += 1;
            }
        }
    }
    Ok((
        closed && triplet_mismatch == 0 && rank_mismatch == 0,
        format!(
            "N=1 {single:e}, orthonormal {ortho:.12} vs {ortho_want:.12}, identical {identical:.12} vs ln 2; \
             100 seeds: {triplet_mismatch} triplet and {rank_mismatch} rank-k mismatches"
        ),
    ))
}

fn geometry_round_trip() -> Outcome {
    let t = Instant::now();
    let render = DepthRender::default();
    let k = render.intrinsics;
    let (w, h) = (render.width, render.height);
    let mut s = Stream::new(SEED, 3);
    let (mut worst_px, mut depth_misses) = (0.0f64, 0);
    for _ in 0..1000 {
        let z = s.uniform_in(1.0, 10.0);
        let (u, v) = (s.uniform_in(-0.5, w as f64 - 0.5), s.uniform_in(-0.5, h as f64 - 0.5));
        let p = k.unproject(u, v, z);
        let img = project_points(&PointCloud::new(vec![p]), &k, w, h);
        let back = back_project(&img, &k, None).map_err(err)?;
        if back.len() != 1 || back.points[0][2] != p[2] {
            depth_misses += 1;
            continue;
        }
        let (pu, pv) = k.project(p);
        let (qu, qv) = k.project(back.points[0]);
        worst_px = worst_px.max((pu - qu).abs()).max((pv - qv).abs());
    }

    // a rendered walker silhouette and its depth, re-projected through 1 mm voxels
    let params = IdentityParams::sample(SEED, 0);
    let (_, pcd) = synth_walker(0, &params, 90, Condition::Normal, 8, SEED, &SynthOptions::default()).map_err(err)?;
    let depth = render.render(&pcd.frames[3]).map_err(err)?;
    let mask = SilhouetteFrame::new(w, h, depth.depth.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect()).map_err(err)?;
    let pair = pseudo_pairs_from_depth(&mask, &depth, &k, 0.001, 2, 64).map_err(err)?;
    let (filled, close) = masked_agreement(&depth, &mask, &pair.reprojected);
    let frac = close as f64 / filled as f64;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        depth_misses == 0 && worst_px <= 0.5 && frac >= 0.99 && secs < 60.0,
        format!(
            "1000 points: worst reprojection {worst_px:.3} px (<= 0.5), {depth_misses} depth mismatches; \
             pseudo pairs at 1 mm voxels: {:.2}% of {filled} filled pixels within 1 mm (>= 99%); {secs:.1} s (< 60 s)",
            100.0 * frac
        ),
    ))
}

fn masked_agreement(input: &DepthImage, mask: &SilhouetteFrame, out: &DepthImage) -> (usize, usize) {
    let (mut filled, mut close) = (0, 0);
    for i in 0..input.depth.len() {
        if input.depth[i] > 0.0 && mask.mask[i] > 0.5 {
            filled += 1;
            if (out.depth[i] - input.depth[i]).abs() <= 0.001 {
                close += 1;
            }
        }
    }
    (filled, close)
}

fn small_net() -> NetConfig {
    NetConfig { channels: [8, 16, 32], embed_dim: 16, ..NetConfig::default() }
}

fn walker_frames(seed: u64) -> Result<(Tensor<f32>, Tensor<f32>), String> {
    let plan = SynthPlan { ids: 2, seqs_per_id: 1, frames: 8, seed, ..SynthPlan::default() };
    let ds = synth_dataset(&plan, &SynthOptions::default()).map_err(err)?;
    let seq = &ds.sequences[0];
    let f = |m| clgait::train::frames_input((0..seq.len()).map(|t| (seq, t)), m).map_err(err);
    Ok((f(Modality::Silhouette)?, f(Modality::PointCloud)?))
}

fn select_frames(x: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let per = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(order.len() * per);
    for &i in order {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = order.len();
    Tensor::new(&shape, data).unwrap()
}

fn structural_invariants() -> Outcome {
    let cfg = small_net();
    let weights = NetworkWeights::<f32>::init(&cfg, SEED).map_err(err)?;
    let (sil, pts) = walker_frames(SEED)?;
    let embed = |w: &NetworkWeights<f32>, x: &Tensor<f32>, m| embed_sequence(w, &cfg, x, m).map(|e| e.values).map_err(err);
    let base = embed(&weights, &sil, Modality::Silhouette)?;

    let mut perturbed = weights.clone();
    for name in ["conv_p.w", "conv_p.b"] {
        for v in perturbed.get_mut(name).map_err(err)?.data_mut() {
            *v += 0.37;
        }
    }
    let routing = embed(&perturbed, &sil, Modality::Silhouette)? == base
        && embed(&perturbed, &pts, Modality::PointCloud)? != embed(&weights, &pts, Modality::PointCloud)?;

    let mut tied = weights.clone();
    for (s, p) in [("conv_s.w", "conv_p.w"), ("conv_s.b", "conv_p.b")] {
        let t = tied.get(s).map_err(err)?.clone();
        *tied.get_mut(p).map_err(err)? = t;
    }
    let shared = embed(&tied, &sil, Modality::Silhouette)? == embed(&tied, &sil, Modality::PointCloud)?;

    let t = sil.shape()[0];
    let mut order: Vec<usize> = (0..t).rev().collect();
    order.swap(1, 4);
    let permuted = embed(&weights, &select_frames(&sil, &order), Modality::Silhouette)? == base;
    let dup: Vec<usize> = (0..t).chain([2, 2, 5]).collect();
    let duplicated = embed(&weights, &select_frames(&sil, &dup), Modality::Silhouette)? == base;

    let mut asym = 0;
    for seed in 0..100u64 {
        let mut s = Stream::new(seed, 4);
        let (n, d) = (1 + s.below(12), 1 + s.below(16));
        let a = Tensor::<f64>::from_fn(&[n, d], |_| s.normal());
        let b = Tensor::<f64>::from_fn(&[n, d], |_| s.normal());
        let tau = s.uniform_in(0.05, 2.0);
        let ab = contrastive_loss_value(&a, &b, tau).map_err(err)?;
        let ba = contrastive_loss_value(&b, &a, tau).map_err(err)?;
        if ab.to_bits() != ba.to_bits() {
            asym += 1;
        }
    }
    Ok((
        routing && shared && permuted && duplicated && asym == 0,
        format!(
            "routing {routing}, shared stack {shared}, permutation {permuted}, duplication {duplicated}, \
             contrastive asymmetries {asym}/100"
        ),
    ))
}

fn experiment_dataset() -> Result<Dataset, String> {
    let plan = SynthPlan { ids: 16, seqs_per_id: 8, seed: SEED, split_mode: SplitMode::Sequence, ..SynthPlan::default() };
    synth_dataset(&plan, &SynthOptions::default()).map_err(err)
}

fn experiment_config() -> TrainConfig {
    TrainConfig {
        seed: SEED,
        channels: [16, 32, 64],
        frames_per_sample: 4,
        iterations_pretrain: 1000,
        iterations_finetune: 2000,
        checkpoint_every: EVAL_EVERY,
        ..TrainConfig::default()
    }
}

fn rank1(ds: &Dataset, weights: &NetworkWeights<f32>) -> clgait::Result<(f64, f64)> {
    let r = evaluate(ds, weights, Split::Test, &Direction::BOTH, false)?;
    Ok((r[0].rank1(), r[1].rank1()))
}

/// Rank-1 accuracy of both directions at each checkpoint.
struct Curve {
    points: Vec<(usize, f64, f64)>,
    seconds: f64,
}

impl Curve {
    fn first_reaching(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|p| p.1 >= target && p.2 >= target).map(|p| p.0)
    }

    fn describe(&self) -> String {
        self.points.iter().map(|(i, a, b)| format!("{i}:{a:.0}/{b:.0}")).collect::<Vec<_>>().join(" ")
    }
}

fn tracked_finetune(ds: &Dataset, init: Option<&NetworkWeights<f32>>, cfg: &TrainConfig) -> Result<(TrainState, Curve), String> {
    let t = Instant::now();
    let mut points = Vec::new();
    // checkpoint evaluation is not part of the fine-tuning time
    let mut eval_time = Duration::ZERO;
    let state = finetune(ds, init, cfg, None, &mut |s| {
        let e = Instant::now();
        let (a, b) = rank1(ds, &s.weights)?;
        eval_time += e.elapsed();
        eprintln!("  finetune {:>5}: rank-1 L-to-C {a:.2}% C-to-L {b:.2}%", s.iteration);
        points.push((s.iteration, a, b));
        Ok(())
    })
    .map_err(err)?;
    Ok((state, Curve { points, seconds: (t.elapsed() - eval_time).as_secs_f64() }))
}

fn end_to_end() -> Result<((bool, String), Curve), String> {
    let ds = experiment_dataset()?;
    let cfg = experiment_config();
    let classes = ds.split(Split::Train).iter().map(|s| s.entry.identity).collect::<std::collections::BTreeSet<_>>().len();
    let untrained = clgait::train::finetune_init(&cfg, classes, None).map_err(err)?;
    let (b_l2c, b_c2l) = rank1(&ds, &untrained).map_err(err)?;
    let (_, curve) = tracked_finetune(&ds, None, &cfg)?;
    let &(_, l2c, c2l) = curve.points.last().ok_or("no checkpoint evaluated")?;
    // the wall-clock budget is 15 min on 4 cores; scale it to the cores present
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let budget = 15.0 * 60.0 * 4.0 / cores as f64;
    let ok = l2c >= RANK1_TARGET && c2l >= RANK1_TARGET && b_l2c <= BASELINE_CEILING && b_c2l <= BASELINE_CEILING && curve.seconds <= budget;
    let detail = format!(
        "rank-1 after {} iterations L-to-C {l2c:.2}% C-to-L {c2l:.2}% (>= {RANK1_TARGET}%); untrained {b_l2c:.2}% / {b_c2l:.2}% \
         (<= {BASELINE_CEILING}%); fine-tuning {:.0} s (<= {budget:.0} s on {cores} core(s)); curve {}",
        cfg.iterations_finetune,
        curve.seconds,
        curve.describe()
    );
    Ok(((ok, detail), curve))
}

fn cspp_effect(scratch: Option<&Curve>) -> Outcome {
    let ds = experiment_dataset()?;
    let cfg = experiment_config();
    let t = Instant::now();
    let pre = pretrain_cspp(&ds, &cfg, None, &mut |s| {
        eprintln!("  pretrain {:>5}: loss {:.4}", s.iteration, s.losses.last().copied().unwrap_or(f32::NAN));
        Ok(())
    })
    .map_err(err)?;
    let (held_seqs, held) = heldout_pairs(&ds, &cfg).map_err(err)?;
    let before = pre.alignment_before.ok_or("pre-training recorded no initial alignment")?;
    let after = alignment(&pre.weights, &cfg.net(0), &held_seqs, &held, cfg.granularity).map_err(err)?;
    let pre_secs = t.elapsed().as_secs_f64();
    let gain = after - before;

    let scratch_hit = scratch.and_then(|c| c.first_reaching(RANK1_TARGET));
    let budget = scratch_hit.unwrap_or(cfg.iterations_finetune);
    let warm_cfg = TrainConfig { iterations_finetune: budget, ..cfg.clone() };
    let (_, warm) = tracked_finetune(&ds, Some(&pre.weights), &warm_cfg)?;
    let warm_hit = warm.first_reaching(RANK1_TARGET);
    // a scratch run that never gets there needs more than its whole budget
    let faster = match (warm_hit, scratch_hit) {
        (Some(w), Some(s)) => w <= s,
        (Some(w), None) => w <= budget,
        (None, _) => false,
    };
    let show = |h: Option<usize>| h.map_or(format!("not reached in {budget}"), |i| i.to_string());
    Ok((
        gain >= ALIGNMENT_GAIN && faster,
        format!(
            "alignment {before:.4} -> {after:.4} (gain {gain:.4} >= {ALIGNMENT_GAIN}) after {} iterations in {pre_secs:.0} s; \
             iterations to {RANK1_TARGET}% rank-1: pre-trained {} vs scratch {} (evaluated every {EVAL_EVERY}); curve {}",
            pre.iteration,
            show(warm_hit),
            show(scratch_hit),
            warm.describe()
        ),
    ))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.json") {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path, jobs: &str) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let net = ["--channels", "8,16,32", "--seed", "17", "--jobs", jobs, "--checkpoint-every", "10"];
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--out", &p("data"), "--ids", "4", "--seqs-per-id", "8", "--frames", "8", "--seed", "17", "--split-mode", "sequence", "--jobs", jobs]
            .into_iter()
            .map(String::from)
            .collect(),
        ["pretrain", "--data", &p("data"), "--out", &p("pretrain"), "--iterations", "20", "--pairs", "8"]
            .iter()
            .chain(net.iter())
            .map(|s| s.to_string())
            .collect(),
        ["finetune", "--data", &p("data"), "--out", &p("finetune"), "--init", &p("pretrain/weights.clgw"), "--iterations", "20", "--batch-p", "4", "--frames-per-sample", "4"]
            .iter()
            .chain(net.iter())
            .map(|s| s.to_string())
            .collect(),
        vec!["eval", "--data", &p("data"), "--weights", &p("finetune/weights.clgw"), "--out", &p("eval"), "--jobs", jobs]
            .into_iter()
            .map(String::from)
            .collect(),
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_clgait")).args(&args).env_remove("CLGAIT_SEED").output().map_err(err)?;
        if !out.status.success() {
            return Err(format!("{} exited with {}: {}", args[0], out.status, String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, jobs) in runs {
        pipeline(&dir.path().join(name), jobs)?;
    }
    let trees: Vec<_> = runs.iter().map(|(n, _)| tree(&dir.path().join(n))).collect();
    let files = trees[0].len();
    let weights_present = trees[0].iter().any(|(n, _)| n.ends_with("finetune/weights.clgw"));
    let reports_present = trees[0].iter().any(|(n, _)| n.ends_with("eval/report.json"));
    let repeat = trees[0] == trees[1];
    let jobs = trees[0] == trees[2];
    Ok((
        repeat && jobs && weights_present && reports_present,
        format!("{files} output files; repeated run identical {repeat}; --jobs 4 identical to --jobs 1 {jobs}"),
    ))
}
