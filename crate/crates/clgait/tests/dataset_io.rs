use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use clgait::core::synth::{Condition, SynthOptions};
use clgait::dataset::{read_dataset, synth_dataset, write_dataset, Dataset, Split, SplitMode, SynthPlan};
use clgait::Error;

fn plan(ids: u32, seqs_per_id: u32, split_mode: SplitMode) -> SynthPlan {
    SynthPlan { ids, seqs_per_id, frames: 8, seed: 11, split_mode, ..SynthPlan::default() }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn two_identity_dataset_round_trips() {
    let ds = synth_dataset(&plan(2, 2, SplitMode::Identity), &SynthOptions::default()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&ds, a.path()).unwrap();
    assert_eq!(manifest.checksums.len(), 2 * 2 * 8 * 3);
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back.sequences, ds.sequences);
    write_dataset(&back, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn corrupted_frame_is_reported_with_its_path() {
    let ds = synth_dataset(&plan(2, 1, SplitMode::Identity), &SynthOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join(&ds.sequences[1].entry.id).join("pcd/0003.ply");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    fs::write(&victim, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checksum { ref path } if *path == victim), "{err}");
    assert!(err.to_string().contains("0003.ply"));
}

#[test]
fn missing_frame_is_reported_with_its_path() {
    let ds = synth_dataset(&plan(2, 1, SplitMode::Identity), &SynthOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join(&ds.sequences[0].entry.id).join("sil/0005.pgm");
    fs::remove_file(&victim).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
}

#[test]
fn malformed_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.json"), b"{\"seed\": 1").unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest.json"), "{err}");
}

fn split_sets(ds: &Dataset) -> [BTreeSet<String>; 3] {
    [Split::Train, Split::Val, Split::Test].map(|s| ds.manifest.splits.of(s).iter().cloned().collect())
}

#[test]
fn identity_splits_cover_every_sequence_and_share_no_identity() {
    for ids in [2, 3, 4, 9, 16] {
        let ds = synth_dataset(&plan(ids, 2, SplitMode::Identity), &SynthOptions::default()).unwrap();
        let sets = split_sets(&ds);
        let total: usize = sets.iter().map(BTreeSet::len).sum();
        assert_eq!(total, ds.sequences.len());
        let all: BTreeSet<&String> = sets.iter().flatten().collect();
        assert_eq!(all.len(), ds.sequences.len());
        let owners: Vec<BTreeSet<u32>> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| ds.split(s).iter().map(|q| q.entry.identity).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(owners[i].is_disjoint(&owners[j]), "{ids} identities");
            }
        }
        assert!(!owners[0].is_empty() && !owners[2].is_empty());
    }
}

#[test]
fn sequence_splits_hold_out_odd_repeats() {
    let ds = synth_dataset(&plan(3, 8, SplitMode::Sequence), &SynthOptions::default()).unwrap();
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    assert_eq!(train.len() + test.len(), ds.sequences.len());
    assert!(train.iter().all(|s| s.entry.repeat % 2 == 0));
    assert!(test.iter().all(|s| s.entry.repeat % 2 == 1));
    for id in 0..3 {
        for cond in [Condition::Normal, Condition::Bag] {
            for view in [0, 90] {
                let hit = |v: &[&clgait::dataset::Sequence]| {
                    v.iter().any(|s| s.entry.identity == id && s.entry.condition == cond && s.entry.view == view)
                };
                assert!(hit(&train) && hit(&test));
            }
        }
    }
}

#[test]
fn synthesis_is_independent_of_pool_size() {
    let p = plan(3, 2, SplitMode::Identity);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| synth_dataset(&p, &SynthOptions::default())).unwrap();
    let b = four.install(|| synth_dataset(&p, &SynthOptions::default())).unwrap();
    assert_eq!(a, b);
}
