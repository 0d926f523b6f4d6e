//! Cross-view, cross-modality retrieval scoring.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::synth::{Condition, Modality};

/// Retrieval direction: `LToC` probes with point clouds against a silhouette gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Direction {
    #[cfg_attr(feature = "serde", serde(rename = "l2c"))]
    LToC,
    #[cfg_attr(feature = "serde", serde(rename = "c2l"))]
    CToL,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::LToC, Direction::CToL];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LToC => "l2c",
            Direction::CToL => "c2l",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2c" => Ok(Direction::LToC),
            "c2l" => Ok(Direction::CToL),
            _ => Err(Error::Invalid(format!("unknown direction {s:?}, expected l2c or c2l"))),
        }
    }

    pub fn probe_modality(self) -> Modality {
        match self {
            Direction::LToC => Modality::PointCloud,
            Direction::CToL => Modality::Silhouette,
        }
    }

    pub fn gallery_modality(self) -> Modality {
        match self {
            Direction::LToC => Modality::Silhouette,
            Direction::CToL => Modality::PointCloud,
        }
    }
}

/// Labels of one embedded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceMeta {
    pub identity: u32,
    pub view: u16,
    pub condition: Condition,
    pub modality: Modality,
}

/// Indices into the sequence list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GalleryProbe {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Normal-condition sequences of the gallery modality form the gallery; variant-condition
/// sequences of the probe modality are probes. Probes whose identity has no gallery
/// sequence are dropped with a warning.
pub fn build_gallery_probe(seqs: &[SequenceMeta], direction: Direction) -> Result<GalleryProbe> {
    let gallery: Vec<usize> = (0..seqs.len())
        .filter(|&i| seqs[i].modality == direction.gallery_modality() && seqs[i].condition == Condition::Normal)
        .collect();
    let candidates: Vec<usize> = (0..seqs.len())
        .filter(|&i| seqs[i].modality == direction.probe_modality() && seqs[i].condition != Condition::Normal)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoVariantProbes);
    }
    let enrolled: BTreeSet<u32> = gallery.iter().map(|&i| seqs[i].identity).collect();
    let mut missing = BTreeSet::new();
    let probes = candidates
        .into_iter()
        .filter(|&i| {
            let ok = enrolled.contains(&seqs[i].identity);
            if !ok {
                missing.insert(seqs[i].identity);
            }
            ok
        })
        .collect();
    let warnings = missing
        .into_iter()
        .map(|id| format!("identity {id} has no gallery sequence; its probes are excluded"))
        .collect();
    Ok(GalleryProbe { gallery, probes, warnings })
}

/// Row-major `rows × cols` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.at(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// Euclidean distances between every probe and gallery embedding.
pub fn distance_matrix<E: AsRef<[f32]>>(probes: &[E], gallery: &[E]) -> Result<DistanceMatrix> {
    let dim = probes.first().or(gallery.first()).map_or(0, |e| e.as_ref().len());
    if let Some(bad) = probes.iter().chain(gallery).find(|e| e.as_ref().len() != dim) {
        return Err(Error::Invalid(format!("embedding of length {} among length-{dim} embeddings", bad.as_ref().len())));
    }
    let mut data = Vec::with_capacity(probes.len() * gallery.len());
    for p in probes {
        for g in gallery {
            let s: f64 = p.as_ref().iter().zip(g.as_ref()).map(|(a, b)| {
                let t = *a as f64 - *b as f64;
                t * t
            }).sum();
            data.push(libm::sqrt(s));
        }
    }
    Ok(DistanceMatrix { rows: probes.len(), cols: gallery.len(), data })
}

/// For each probe, the 0-based position of the first same-identity entry in its
/// gallery ranking (ascending distance, ties by gallery index), if any.
pub fn first_hit_ranks(d: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = Vec::with_capacity(d.cols);
    (0..d.rows)
        .map(|i| {
            order.clear();
            order.extend(0..d.cols);
            order.sort_by(|&a, &b| d.at(i, a).total_cmp(&d.at(i, b)).then(a.cmp(&b)));
            order.iter().position(|&j| gallery_ids[j] == probe_ids[i])
        })
        .collect()
}

/// Percentage of probes with a same-identity gallery entry among their `k` nearest.
pub fn rank_k(d: &DistanceMatrix, probe_ids: &[u32], gallery_ids: &[u32], k: usize) -> f64 {
    accuracy(&first_hit_ranks(d, probe_ids, gallery_ids), k)
}

fn accuracy(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
    100.0 * hits as f64 / ranks.len() as f64
}

pub const REPORT_KS: [usize; 3] = [1, 3, 5];
/// Length of the reported CMC curve.
pub const CMC_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellReport {
    pub probe_view: u16,
    pub gallery_view: u16,
    pub probes: usize,
    pub gallery: usize,
    /// Rank-1, rank-3 and rank-5 accuracy in percent.
    pub rank: [f64; 3],
    /// Rank-1 to rank-10 accuracy in percent.
    pub cmc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub direction: Direction,
    pub exclude_same_view: bool,
    pub cells: Vec<CellReport>,
    /// Mean over the averaged cells of rank-1/3/5.
    pub average: [f64; 3],
    pub average_cmc: Vec<f64>,
    pub probes: usize,
    pub gallery: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.average[0]
    }
}

/// Scores every (probe view, gallery view) cell and averages them. Same-view cells
/// are included unless `exclude_same_view` is set; they are always listed.
pub fn cross_view_report<E: AsRef<[f32]>>(
    seqs: &[SequenceMeta],
    embeddings: &[E],
    direction: Direction,
    exclude_same_view: bool,
) -> Result<EvalReport> {
    if seqs.len() != embeddings.len() {
        return Err(Error::Invalid(format!("{} sequences but {} embeddings", seqs.len(), embeddings.len())));
    }
    let split = build_gallery_probe(seqs, direction)?;
    let by_view = |idx: &[usize]| {
        let mut m: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for &i in idx {
            m.entry(seqs[i].view).or_default().push(i);
        }
        m
    };
    let probe_views = by_view(&split.probes);
    let gallery_views = by_view(&split.gallery);
    let mut cells = Vec::new();
    for (&pv, probes) in &probe_views {
        for (&gv, gallery) in &gallery_views {
            let pe: Vec<&[f32]> = probes.iter().map(|&i| embeddings[i].as_ref()).collect();
            let ge: Vec<&[f32]> = gallery.iter().map(|&i| embeddings[i].as_ref()).collect();
            let d = distance_matrix(&pe, &ge)?;
            let pid: Vec<u32> = probes.iter().map(|&i| seqs[i].identity).collect();
            let gid: Vec<u32> = gallery.iter().map(|&i| seqs[i].identity).collect();
            let ranks = first_hit_ranks(&d, &pid, &gid);
            cells.push(CellReport {
                probe_view: pv,
                gallery_view: gv,
                probes: probes.len(),
                gallery: gallery.len(),
                rank: REPORT_KS.map(|k| accuracy(&ranks, k)),
                cmc: (1..=CMC_LEN).map(|k| accuracy(&ranks, k)).collect(),
            });
        }
    }
    let counted: Vec<&CellReport> =
        cells.iter().filter(|c| !(exclude_same_view && c.probe_view == c.gallery_view)).collect();
    if counted.is_empty() {
        return Err(Error::Invalid("no view pair left to average".into()));
    }
    let n = counted.len() as f64;
    let average = [0, 1, 2].map(|j| counted.iter().map(|c| c.rank[j]).sum::<f64>() / n);
    let average_cmc = (0..CMC_LEN).map(|j| counted.iter().map(|c| c.cmc[j]).sum::<f64>() / n).collect();
    Ok(EvalReport {
        direction,
        exclude_same_view,
        cells,
        average,
        average_cmc,
        probes: split.probes.len(),
        gallery: split.gallery.len(),
        warnings: split.warnings,
    })
}
