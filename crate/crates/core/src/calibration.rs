//! Per-block distance statistics of a frozen recognizer under face swaps,
//! and the margins derived from them.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::Path;

use gradtape::{no_grad, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::backbone::{cosine_distance, BackboneAdapter};
use crate::error::{Error, Result};
use crate::face::AlignedFace;
use crate::generator::Generator;
use crate::pipeline::FaceStore;

/// Block range regularized by default: blocks 2 to 13 of a 16-block
/// recognizer, scaled proportionally for other depths.
pub fn default_ifsr_blocks(block_count: usize) -> RangeInclusive<usize> {
    let last = ((13 * block_count + 8) / 16).clamp(2.min(block_count), block_count);
    2.min(last)..=last
}

/// Per-block margins plus their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct IfsrMargins {
    margins: BTreeMap<usize, f64>,
    pub sample_count: usize,
    pub swap_model_id: String,
    pub backbone_id: String,
    pub statistic: String,
}

impl IfsrMargins {
    pub fn new(
        margins: BTreeMap<usize, f64>,
        sample_count: usize,
        swap_model_id: impl Into<String>,
        backbone_id: impl Into<String>,
    ) -> Result<Self> {
        if margins.is_empty() {
            return Err(Error::Parse("margins table is empty".into()));
        }
        for (b, m) in &margins {
            if !(0.0..=2.0).contains(m) {
                return Err(Error::Parse(format!("margin {m} of block {b} is outside [0, 2]")));
            }
        }
        let (first, last) = (*margins.keys().next().unwrap(), *margins.keys().last().unwrap());
        if last - first + 1 != margins.len() {
            return Err(Error::Parse(format!("margin blocks {:?} are not contiguous", margins.keys())));
        }
        Ok(Self {
            margins,
            sample_count,
            swap_model_id: swap_model_id.into(),
            backbone_id: backbone_id.into(),
            statistic: "mean_c2t".into(),
        })
    }

    pub fn margin(&self, block: usize) -> Option<f64> {
        self.margins.get(&block).copied()
    }

    pub fn margins(&self) -> &BTreeMap<usize, f64> {
        &self.margins
    }

    pub fn blocks(&self) -> RangeInclusive<usize> {
        *self.margins.keys().next().unwrap()..=*self.margins.keys().last().unwrap()
    }

    /// Restricts to `range`, failing if any block in it is missing.
    pub fn restrict(&self, range: RangeInclusive<usize>) -> Result<Self> {
        let mut out = self.clone();
        out.margins = range
            .map(|b| self.margin(b).map(|m| (b, m)).ok_or(Error::MissingMargin(b)))
            .collect::<Result<_>>()?;
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s += &format!("# swap_model_id\t{}\n", self.swap_model_id);
        s += &format!("# backbone_id\t{}\n", self.backbone_id);
        s += &format!("# statistic\t{}\n", self.statistic);
        s += "block_index\tmargin\tn_samples\n";
        for (b, m) in &self.margins {
            s += &format!("{b}\t{m:?}\t{}\n", self.sample_count);
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut margins = BTreeMap::new();
        let mut count = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('\t') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line.starts_with("block_index") {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("margins row `{line}` needs three columns")));
            }
            let bad = |_| Error::Parse(format!("bad margins row `{line}`"));
            let b: usize = cols[0].parse().map_err(bad)?;
            let m: f64 = cols[1].parse().map_err(|_| Error::Parse(format!("bad margin in `{line}`")))?;
            let n: usize = cols[2].parse().map_err(|_| Error::Parse(format!("bad count in `{line}`")))?;
            if margins.insert(b, m).is_some() {
                return Err(Error::Parse(format!("block {b} listed twice")));
            }
            count = Some(count.map_or(n, |c: usize| c.min(n)));
        }
        let mut out = Self::new(
            margins,
            count.unwrap_or(0),
            header.remove("swap_model_id").unwrap_or_default(),
            header.remove("backbone_id").unwrap_or_default(),
        )?;
        if let Some(s) = header.remove("statistic") {
            out.statistic = s;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::CheckpointNotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse_tsv(&text)
    }
}

/// Distances of one triplet at one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub block_index: usize,
    pub c2t: f64,
    pub c2s: f64,
    pub neg: f64,
}

/// Anything that turns (target, source) into a changed face.
pub trait SwapModel<T: Scalar> {
    fn id(&self) -> String;
    fn swap(&self, target: &AlignedFace<T>, source: &AlignedFace<T>) -> Result<AlignedFace<T>>;
}

/// Returns the target unchanged.
pub struct TargetPassThrough;

impl<T: Scalar> SwapModel<T> for TargetPassThrough {
    fn id(&self) -> String {
        "target-pass-through".into()
    }

    fn swap(&self, target: &AlignedFace<T>, _: &AlignedFace<T>) -> Result<AlignedFace<T>> {
        Ok(target.clone())
    }
}

/// Returns the source unchanged.
pub struct SourcePassThrough;

impl<T: Scalar> SwapModel<T> for SourcePassThrough {
    fn id(&self) -> String {
        "source-pass-through".into()
    }

    fn swap(&self, _: &AlignedFace<T>, source: &AlignedFace<T>) -> Result<AlignedFace<T>> {
        Ok(source.clone())
    }
}

/// A trained generator conditioned on the source embedding from `backbone`.
pub struct GeneratorSwap<'a, T: Scalar> {
    pub generator: &'a Generator<T>,
    pub backbone: &'a BackboneAdapter<T>,
    pub label: String,
}

impl<T: Scalar> SwapModel<T> for GeneratorSwap<'_, T> {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn swap(&self, target: &AlignedFace<T>, source: &AlignedFace<T>) -> Result<AlignedFace<T>> {
        let z = self.backbone.embed(source)?;
        self.generator.generate(target, &z)
    }
}

fn pick_other<R: Rng + ?Sized>(count: usize, exclude: &[usize], rng: &mut R) -> usize {
    loop {
        let i = rng.random_range(0..count);
        if !exclude.contains(&i) {
            return i;
        }
    }
}

/// Samples `n_triplets` (target, source, impostor) faces from three distinct
/// identities and records, for every block, the distance of the changed face
/// to the target (`c2t`) and to the source (`c2s`), and the distance between
/// the target and the impostor (`neg`). Returns one list per block, in order.
pub fn collect_distances<T: Scalar, R: Rng + ?Sized>(
    swap: &dyn SwapModel<T>,
    backbone: &BackboneAdapter<T>,
    store: &FaceStore<T>,
    n_triplets: usize,
    rng: &mut R,
) -> Result<Vec<Vec<DistanceSample>>> {
    if n_triplets == 0 {
        return Err(Error::InvalidConfig("need at least one triplet".into()));
    }
    let ids: Vec<(&str, &[AlignedFace<T>])> = store.identities().collect();
    if ids.len() < 3 {
        return Err(Error::InsufficientIdentities {
            needed: 3,
            found: ids.len(),
        });
    }
    let blocks = backbone.block_count();
    let mut out = vec![Vec::with_capacity(n_triplets); blocks];
    for _ in 0..n_triplets {
        let a = rng.random_range(0..ids.len());
        let b = pick_other(ids.len(), &[a], rng);
        let c = pick_other(ids.len(), &[a, b], rng);
        let face = |i: usize, rng: &mut R| {
            let faces = ids[i].1;
            faces[rng.random_range(0..faces.len())].clone()
        };
        let (t, s, n) = (face(a, rng), face(b, rng), face(c, rng));
        let changed = swap.swap(&t, &s)?;
        let batch = AlignedFace::batch(&[&changed, &t, &s, &n])?;
        let feats = no_grad(|| backbone.forward(&Var::constant(batch)))?;
        for (k, f) in feats.blocks.iter().enumerate() {
            let v = f.value();
            let per = v.numel() / 4;
            let row = |i: usize| &v.data()[i * per..(i + 1) * per];
            out[k].push(DistanceSample {
                block_index: k + 1,
                c2t: cosine_distance(row(0), row(1))?,
                c2s: cosine_distance(row(0), row(2))?,
                neg: cosine_distance(row(1), row(3))?,
            });
        }
    }
    Ok(out)
}

/// `m_i` = mean of the `c2t` distances at block `i`, for every block in `range`.
pub fn derive_margins(
    samples: &[Vec<DistanceSample>],
    range: RangeInclusive<usize>,
    swap_model_id: &str,
    backbone_id: &str,
) -> Result<IfsrMargins> {
    let mut margins = BTreeMap::new();
    let mut count = usize::MAX;
    for b in range {
        let list = b
            .checked_sub(1)
            .and_then(|i| samples.get(i))
            .filter(|l| !l.is_empty())
            .ok_or(Error::EmptyBlock(b))?;
        let mean = list.iter().map(|s| s.c2t).sum::<f64>() / list.len() as f64;
        margins.insert(b, mean.clamp(0.0, 2.0));
        count = count.min(list.len());
    }
    IfsrMargins::new(margins, count, swap_model_id, backbone_id)
}

/// Equal error rate with `genuine` as the low-distance class.
///
/// Thresholds run over the sorted union of both lists followed by +∞. At
/// each, FAR is the fraction of impostors strictly below it and FRR the
/// fraction of genuine values at or above it. The result is the common
/// value where the two step curves cross, interpolating linearly between the
/// last threshold with FAR < FRR and the first with FAR ≥ FRR.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut ts: Vec<f64> = g.iter().chain(&i).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    // Sweep with two cursors: `gi` genuine values below t, `ii` impostors below t.
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    for t in ts {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < i.len() && i[ii] < t {
            ii += 1;
        }
        let far = ii as f64 / ni;
        let frr = (g.len() - gi) as f64 / ng;
        if far >= frr {
            return Ok(match prev {
                None => far,
                Some((pf, pr)) => {
                    let (d0, d1) = (pf - pr, far - frr);
                    let a = -d0 / (d1 - d0);
                    pf + a * (far - pf)
                }
            });
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR reaches 1 and FRR reaches 0 at +∞")
}

pub const HISTOGRAM_BINS: usize = 50;

/// Counts over 50 equal bins spanning `[0, 2]`; 2.0 falls in the last bin.
pub fn histogram(values: &[f64]) -> Vec<u64> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v / 2.0) * HISTOGRAM_BINS as f64).floor();
        h[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block_index: usize,
    pub n: usize,
    pub c2t_mean: f64,
    pub c2s_mean: f64,
    pub neg_mean: f64,
    pub c2t_hist: Vec<u64>,
    pub c2s_hist: Vec<u64>,
    pub neg_hist: Vec<u64>,
    /// EER between the c2t (genuine) and c2s (impostor) distributions.
    pub eer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: u32,
    pub swap_model_id: String,
    pub backbone_id: String,
    pub histogram_range: (f64, f64),
    pub blocks: Vec<BlockSummary>,
    pub margins: BTreeMap<usize, f64>,
    pub metadata: BTreeMap<String, String>,
}

impl CalibrationReport {
    pub fn build(samples: &[Vec<DistanceSample>], margins: &IfsrMargins) -> Result<Self> {
        let mut blocks = Vec::with_capacity(samples.len());
        for (k, list) in samples.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::EmptyBlock(k + 1));
            }
            let col = |f: fn(&DistanceSample) -> f64| list.iter().map(f).collect::<Vec<f64>>();
            let (c2t, c2s, neg) = (col(|s| s.c2t), col(|s| s.c2s), col(|s| s.neg));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            blocks.push(BlockSummary {
                block_index: k + 1,
                n: list.len(),
                c2t_mean: mean(&c2t),
                c2s_mean: mean(&c2s),
                neg_mean: mean(&neg),
                c2t_hist: histogram(&c2t),
                c2s_hist: histogram(&c2s),
                neg_hist: histogram(&neg),
                eer: compute_eer(&c2t, &c2s)?,
            });
        }
        Ok(Self {
            version: 1,
            swap_model_id: margins.swap_model_id.clone(),
            backbone_id: margins.backbone_id.clone(),
            histogram_range: (0.0, 2.0),
            blocks,
            margins: margins.margins().clone(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn eer_curve(&self) -> Vec<(usize, f64)> {
        self.blocks.iter().map(|b| (b.block_index, b.eer)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Writes the report JSON and the margins table.
pub fn emit_report(report: &CalibrationReport, margins: &IfsrMargins, report_path: &Path, margins_path: &Path) -> Result<()> {
    report.save(report_path)?;
    margins.save(margins_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic::SynthConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&[0.1, 0.1], &[0.9, 0.9]).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7]).unwrap(), 0.5);
        assert_eq!(compute_eer(&[0.4], &[0.4]).unwrap(), 0.5);
        assert_eq!(compute_eer(&[0.1, 0.3], &[0.2, 0.4]).unwrap(), 0.5);
        assert_eq!(compute_eer(&[0.9], &[0.1]).unwrap(), 1.0);
        assert!(matches!(compute_eer(&[], &[0.1]), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn default_block_ranges() {
        assert_eq!(default_ifsr_blocks(16), 2..=13);
        assert_eq!(default_ifsr_blocks(8), 2..=7);
    }

    #[test]
    fn margins_round_trip_and_validate() {
        let m = IfsrMargins::new([(2, 0.25), (3, 0.1 + 0.2)].into(), 17, "swap", "bb").unwrap();
        let back = IfsrMargins::parse_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back, m);
        assert!(IfsrMargins::new([(2, 2.5)].into(), 1, "", "").is_err());
        assert!(IfsrMargins::new([(2, 0.1), (4, 0.1)].into(), 1, "", "").is_err());
        assert!(matches!(m.restrict(1..=3), Err(Error::MissingMargin(1))));
    }

    #[test]
    fn derive_margins_takes_c2t_mean() {
        let s = |c2t| DistanceSample {
            block_index: 1,
            c2t,
            c2s: 1.0,
            neg: 1.0,
        };
        let m = derive_margins(&[vec![s(0.2), s(0.6)]], 1..=1, "x", "y").unwrap();
        assert!((m.margin(1).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(derive_margins(&[vec![]], 1..=1, "x", "y"), Err(Error::EmptyBlock(1))));
    }

    #[test]
    fn pass_through_models() {
        let store = SynthConfig {
            identities: 3,
            per_identity: 2,
            resolution: 32,
            seed: 9,
        }
        .store::<f64>();
        let bb = BackboneAdapter::from_spec("stub").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = collect_distances(&TargetPassThrough, &bb, &store, 5, &mut rng).unwrap();
        assert_eq!(t.len(), bb.block_count());
        assert!(t.iter().flatten().all(|s| s.c2t < 1e-12));
        let s = collect_distances(&SourcePassThrough, &bb, &store, 5, &mut rng).unwrap();
        assert!(s.iter().flatten().all(|s| s.c2s < 1e-12));
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = collect_distances(&TargetPassThrough, &bb, &store, 4, &mut r1).unwrap();
        let b = collect_distances(&TargetPassThrough, &bb, &store, 4, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_identities() {
        let store = SynthConfig {
            identities: 2,
            per_identity: 1,
            resolution: 32,
            seed: 1,
        }
        .store::<f32>();
        let bb = BackboneAdapter::from_spec("stub").unwrap();
        let r = collect_distances(&TargetPassThrough, &bb, &store, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InsufficientIdentities { needed: 3, found: 2 })));
    }
}
