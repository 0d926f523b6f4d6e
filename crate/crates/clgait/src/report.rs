//! Embedding extraction and report files.

use std::fmt::Write as _;
use std::path::Path;

use clgait_core::eval::{cross_view_report, Direction, EvalReport, SequenceMeta, CMC_LEN, REPORT_KS};
use clgait_core::network::{embed_sequence, NetworkWeights};
use clgait_core::synth::Modality;
use rayon::prelude::*;

use crate::dataset::{Dataset, Sequence, Split, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::train::frames_input;

/// Embeds every sequence in both modalities using all of its frames. Work is spread
/// over the current rayon pool; results keep the input order.
pub fn embed_sequences(seqs: &[&Sequence], weights: &NetworkWeights<f32>) -> Result<(Vec<SequenceMeta>, Vec<Vec<f32>>)> {
    let cfg = weights.config(FRAME_SIZE)?;
    let jobs: Vec<(&Sequence, Modality)> =
        seqs.iter().flat_map(|&s| [Modality::Silhouette, Modality::PointCloud].map(|m| (s, m))).collect();
    let out = jobs
        .par_iter()
        .map(|&(seq, modality)| -> Result<(SequenceMeta, Vec<f32>)> {
            let x = frames_input((0..seq.len()).map(|t| (seq, t)), modality)?;
            let e = embed_sequence(weights, &cfg, &x, modality)?;
            let meta = SequenceMeta { identity: seq.entry.identity, view: seq.entry.view, condition: seq.entry.condition, modality };
            Ok((meta, e.values))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

/// Reports for each requested direction on one split.
pub fn evaluate(ds: &Dataset, weights: &NetworkWeights<f32>, split: Split, directions: &[Direction], exclude_same_view: bool) -> Result<Vec<EvalReport>> {
    let seqs = ds.split(split);
    if seqs.is_empty() {
        return Err(Error::Dataset(format!("{split:?} split is empty")));
    }
    let (metas, embs) = embed_sequences(&seqs, weights)?;
    directions
        .iter()
        .map(|&d| cross_view_report(&metas, &embs, d, exclude_same_view).map_err(Error::from))
        .collect()
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("direction,k,accuracy\n");
    for r in reports {
        for (j, k) in REPORT_KS.iter().enumerate() {
            let _ = writeln!(s, "{},{k},{:.4}", r.direction.as_str(), r.average[j]);
        }
    }
    s
}

/// Gnuplot data: one row per rank with one accuracy column per report.
pub fn cmc_dat(reports: &[EvalReport]) -> String {
    let mut s = String::from("# k");
    for r in reports {
        let _ = write!(s, " {}", r.direction.as_str());
    }
    s.push('\n');
    for k in 0..CMC_LEN {
        let _ = write!(s, "{}", k + 1);
        for r in reports {
            let _ = write!(s, " {:.4}", r.average_cmc[k]);
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `summary.csv` and `cmc.dat` into `out`.
pub fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    let json = serde_json::to_vec_pretty(reports).map_err(|source| Error::Json { path: out.join("report.json"), source })?;
    write_bytes(&out.join("report.json"), &json)?;
    write_bytes(&out.join("summary.csv"), summary_csv(reports).as_bytes())?;
    write_bytes(&out.join("cmc.dat"), cmc_dat(reports).as_bytes())
}
