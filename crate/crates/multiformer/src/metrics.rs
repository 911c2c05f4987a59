//! Evaluation metrics: panoptic quality (PQ), video panoptic quality (VPQ)
//! over sliding tube windows, depth-aware VPQ (DVPQ), and depth errors.
//!
//! PQ follows the canonical reference rules: segments match iff same class
//! and IoU > 0.5; GT void is ignored; unmatched predictions more than half
//! covered by GT void are dropped rather than counted as false positives.

use std::collections::HashMap;

use ndarray::{concatenate, Array2, Axis};
use serde::Serialize;

use crate::dataset::{decode_id, VOID};
use crate::error::{Error, Result};

/// Per-class matching counts. `iou_sum` accumulates IoU over true positives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassStat {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

/// Per-class PQ statistics, accumulated over one or more frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqStats {
    /// Keyed by class id; BTreeMap keeps reduction order deterministic.
    pub per_class: std::collections::BTreeMap<u32, ClassStat>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    /// Class-averaged PQ in percent, split by thing/stuff. Classes with no
    /// observations are excluded; splits with no classes are `None`.
    pub fn summary(&self, is_thing: &dyn Fn(u32) -> bool) -> SplitScores {
        let mut all = MeanAcc::default();
        let mut things = MeanAcc::default();
        let mut stuff = MeanAcc::default();
        for (&c, s) in &self.per_class {
            if s.tp + s.fp + s.fn_ == 0 {
                continue;
            }
            let denom = s.tp as f64 + 0.5 * (s.fp + s.fn_) as f64;
            let pq = 100.0 * s.iou_sum / denom;
            all.push(pq);
            if is_thing(c) {
                things.push(pq);
            } else {
                stuff.push(pq);
            }
        }
        SplitScores { all: all.mean(), things: things.mean(), stuff: stuff.mean() }
    }

    /// Per-class PQ table (classes with observations only).
    pub fn per_class_table(&self) -> Vec<PerClassPq> {
        self.per_class
            .iter()
            .filter(|(_, s)| s.tp + s.fp + s.fn_ > 0)
            .map(|(&c, s)| {
                let denom = s.tp as f64 + 0.5 * (s.fp + s.fn_) as f64;
                PerClassPq {
                    class_id: c,
                    pq: 100.0 * s.iou_sum / denom,
                    tp: s.tp,
                    fp: s.fp,
                    fn_: s.fn_,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerClassPq {
    pub class_id: u32,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// A score with thing/stuff splits; `None` where no classes contribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitScores {
    pub all: Option<f64>,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn push_opt(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.push(v);
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn check_same_shape(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Eval(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// PQ matching statistics for one frame (or one stacked tube window).
pub fn pq_stats(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<PqStats> {
    check_same_shape(pred, gt)?;
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut gt_area: HashMap<u32, usize> = HashMap::new();
    let mut pred_area: HashMap<u32, usize> = HashMap::new();
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        *inter.entry((g, p)).or_default() += 1;
        *gt_area.entry(g).or_default() += 1;
        *pred_area.entry(p).or_default() += 1;
    }
    let mut gt_ids: Vec<u32> = gt_area.keys().copied().filter(|&g| g != VOID).collect();
    let mut pred_ids: Vec<u32> = pred_area.keys().copied().filter(|&p| p != VOID).collect();
    gt_ids.sort_unstable();
    pred_ids.sort_unstable();

    let mut stats = PqStats::default();
    let mut pred_matched: Vec<bool> = vec![false; pred_ids.len()];
    for &g in &gt_ids {
        let (g_class, _) = decode_id(g);
        let mut matched = false;
        for (pi, &p) in pred_ids.iter().enumerate() {
            if pred_matched[pi] {
                continue;
            }
            let (p_class, _) = decode_id(p);
            if p_class != g_class {
                continue;
            }
            let i = *inter.get(&(g, p)).unwrap_or(&0);
            if i == 0 {
                continue;
            }
            let void_p = *inter.get(&(VOID, p)).unwrap_or(&0);
            let union = gt_area[&g] + pred_area[&p] - i - void_p;
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                let e = stats.per_class.entry(g_class).or_default();
                e.tp += 1;
                e.iou_sum += iou;
                pred_matched[pi] = true;
                matched = true;
                break;
            }
        }
        if !matched {
            stats.per_class.entry(g_class).or_default().fn_ += 1;
        }
    }
    for (pi, &p) in pred_ids.iter().enumerate() {
        if pred_matched[pi] {
            continue;
        }
        let void_p = *inter.get(&(VOID, p)).unwrap_or(&0);
        if 2 * void_p > pred_area[&p] {
            continue;
        }
        let (p_class, _) = decode_id(p);
        stats.per_class.entry(p_class).or_default().fp += 1;
    }
    Ok(stats)
}

/// Stack frames vertically so per-id tubes become single 2-d segments.
fn stack_window(frames: &[&Array2<u32>]) -> Array2<u32> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    concatenate(Axis(0), &views).expect("frames share width")
}

/// Per-window tube PQ statistics over all sliding windows of length `kappa`.
pub fn vpq_window_stats(
    preds: &[&Array2<u32>],
    gts: &[&Array2<u32>],
    kappa: usize,
) -> Result<Vec<PqStats>> {
    if preds.len() != gts.len() {
        return Err(Error::Eval(format!(
            "{} predicted frames vs {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if kappa == 0 {
        return Err(Error::Eval("window size must be at least 1".to_string()));
    }
    let mut out = Vec::new();
    if preds.len() < kappa {
        return Ok(out);
    }
    for t in 0..=preds.len() - kappa {
        let p = stack_window(&preds[t..t + kappa]);
        let g = stack_window(&gts[t..t + kappa]);
        out.push(pq_stats(&p, &g)?);
    }
    Ok(out)
}

/// Relabel predicted pixels to void wherever the predicted depth misses the
/// valid ground-truth depth by a relative error above `lambda`.
pub fn relabel_by_depth(
    pred_pan: &Array2<u32>,
    pred_depth: &Array2<f32>,
    gt_depth: &Array2<f32>,
    lambda: f64,
) -> Array2<u32> {
    let mut out = pred_pan.clone();
    for ((p, &d), &dg) in out.iter_mut().zip(pred_depth.iter()).zip(gt_depth.iter()) {
        if dg > 0.0 {
            let rel = ((d - dg).abs() / dg) as f64;
            if rel > lambda {
                *p = VOID;
            }
        }
    }
    out
}

/// AbsRel and RMSE over pixels with valid (positive) ground-truth depth.
/// `None` when no pixel is valid.
pub fn depth_errors(pred: &Array2<f32>, gt: &Array2<f32>) -> Option<(f64, f64)> {
    let mut acc = DepthAcc::default();
    acc.add(pred, gt);
    acc.finish()
}

/// Streaming accumulator for depth errors across frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct DepthAcc {
    abs_rel_sum: f64,
    sq_sum: f64,
    n: usize,
}

impl DepthAcc {
    pub fn add(&mut self, pred: &Array2<f32>, gt: &Array2<f32>) {
        debug_assert_eq!(pred.dim(), gt.dim());
        for (&d, &dg) in pred.iter().zip(gt.iter()) {
            if dg > 0.0 {
                let d = d as f64;
                let dg = dg as f64;
                self.abs_rel_sum += (d - dg).abs() / dg;
                self.sq_sum += (d - dg) * (d - dg);
                self.n += 1;
            }
        }
    }

    pub fn finish(&self) -> Option<(f64, f64)> {
        (self.n > 0).then(|| {
            (
                self.abs_rel_sum / self.n as f64,
                (self.sq_sum / self.n as f64).sqrt(),
            )
        })
    }
}

/// Evaluation grid: which VPQ windows and DVPQ thresholds to report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalGrid {
    pub kappas: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid { kappas: vec![1, 2, 3, 4], lambdas: vec![0.10, 0.25, 0.50] }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VpqCell {
    pub kappa: usize,
    pub windows: usize,
    pub scores: SplitScores,
}

#[derive(Debug, Clone, Serialize)]
pub struct DvpqCell {
    pub kappa: usize,
    pub lambda: f64,
    pub windows: usize,
    pub scores: SplitScores,
}

/// Full evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// Dataset-level PQ (stats pooled over all frames, then class-averaged).
    pub pq: SplitScores,
    pub per_class: Vec<PerClassPq>,
    pub vpq: Vec<VpqCell>,
    pub dvpq: Vec<DvpqCell>,
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub num_frames: usize,
}

#[derive(Debug, Clone, Default)]
struct SplitMean {
    all: MeanAcc,
    things: MeanAcc,
    stuff: MeanAcc,
    windows: usize,
}

impl SplitMean {
    fn push(&mut self, s: SplitScores) {
        self.all.push_opt(s.all);
        self.things.push_opt(s.things);
        self.stuff.push_opt(s.stuff);
        self.windows += 1;
    }

    fn scores(&self) -> SplitScores {
        SplitScores {
            all: self.all.mean(),
            things: self.things.mean(),
            stuff: self.stuff.mean(),
        }
    }
}

/// Accumulates per-sequence predictions into a [`MetricsReport`]. Sequences
/// must be added in a fixed order for bit-identical reports.
pub struct MetricsAccumulator {
    grid: EvalGrid,
    /// `thing_table[class_id]` says whether the class is a thing.
    thing_table: Vec<bool>,
    pq: PqStats,
    vpq: Vec<SplitMean>,
    dvpq: Vec<SplitMean>,
    depth: DepthAcc,
    num_frames: usize,
}

impl MetricsAccumulator {
    pub fn new(grid: EvalGrid, thing_table: Vec<bool>) -> Self {
        let nv = grid.kappas.len();
        let nd = grid.kappas.len() * grid.lambdas.len();
        MetricsAccumulator {
            grid,
            thing_table,
            pq: PqStats::default(),
            vpq: vec![SplitMean::default(); nv],
            dvpq: vec![SplitMean::default(); nd],
            depth: DepthAcc::default(),
            num_frames: 0,
        }
    }

    fn is_thing(&self, c: u32) -> bool {
        self.thing_table.get(c as usize).copied().unwrap_or(false)
    }

    /// Add one whole sequence: per-frame predicted panoptic maps and depth
    /// maps against the ground truth.
    pub fn add_sequence(
        &mut self,
        pred_pan: &[Array2<u32>],
        pred_depth: &[Array2<f32>],
        gt_pan: &[Array2<u32>],
        gt_depth: &[Array2<f32>],
    ) -> Result<()> {
        let n = pred_pan.len();
        if pred_depth.len() != n || gt_pan.len() != n || gt_depth.len() != n {
            return Err(Error::Eval("sequence stream lengths differ".to_string()));
        }
        for i in 0..n {
            let s = pq_stats(&pred_pan[i], &gt_pan[i])?;
            self.pq.merge(&s);
            self.depth.add(&pred_depth[i], &gt_depth[i]);
        }
        self.num_frames += n;

        let pred_refs: Vec<&Array2<u32>> = pred_pan.iter().collect();
        let gt_refs: Vec<&Array2<u32>> = gt_pan.iter().collect();
        let thing_table = self.thing_table.clone();
        let is_thing = |c: u32| thing_table.get(c as usize).copied().unwrap_or(false);

        for (ki, &kappa) in self.grid.kappas.iter().enumerate() {
            for stats in vpq_window_stats(&pred_refs, &gt_refs, kappa)? {
                self.vpq[ki].push(stats.summary(&is_thing));
            }
        }
        for (ki, &kappa) in self.grid.kappas.iter().enumerate() {
            for (li, &lambda) in self.grid.lambdas.iter().enumerate() {
                let relabeled: Vec<Array2<u32>> = (0..n)
                    .map(|i| relabel_by_depth(&pred_pan[i], &pred_depth[i], &gt_depth[i], lambda))
                    .collect();
                let rel_refs: Vec<&Array2<u32>> = relabeled.iter().collect();
                let idx = ki * self.grid.lambdas.len() + li;
                for stats in vpq_window_stats(&rel_refs, &gt_refs, kappa)? {
                    self.dvpq[idx].push(stats.summary(&is_thing));
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> MetricsReport {
        let is_thing = |c: u32| self.is_thing(c);
        let pq = self.pq.summary(&is_thing);
        let per_class = self.pq.per_class_table();
        let (abs_rel, rmse) = match self.depth.finish() {
            Some((a, r)) => (Some(a), Some(r)),
            None => (None, None),
        };
        let vpq = self
            .grid
            .kappas
            .iter()
            .zip(&self.vpq)
            .map(|(&kappa, m)| VpqCell { kappa, windows: m.windows, scores: m.scores() })
            .collect();
        let mut dvpq = Vec::new();
        for (ki, &kappa) in self.grid.kappas.iter().enumerate() {
            for (li, &lambda) in self.grid.lambdas.iter().enumerate() {
                let m = &self.dvpq[ki * self.grid.lambdas.len() + li];
                dvpq.push(DvpqCell { kappa, lambda, windows: m.windows, scores: m.scores() });
            }
        }
        MetricsReport {
            pq,
            per_class,
            vpq,
            dvpq,
            abs_rel,
            rmse,
            num_frames: self.num_frames,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:6.2}"),
        None => "     -".to_string(),
    }
}

impl MetricsReport {
    /// Aligned text table: PQ and depth errors, then VPQ/DVPQ over the grid
    /// with all | things | stuff in each cell.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let cell = |sc: &SplitScores| {
            format!("{} |{} |{}", fmt_opt(sc.all), fmt_opt(sc.things), fmt_opt(sc.stuff))
        };
        s.push_str(&format!(
            "frames: {:<6} PQ [{}]   AbsRel {}   RMSE {}\n",
            self.num_frames,
            cell(&self.pq),
            fmt_opt(self.abs_rel),
            fmt_opt(self.rmse),
        ));
        s.push_str("\nVPQ (all | things | stuff)\n");
        for c in &self.vpq {
            s.push_str(&format!("  k={:<2} [{}]  ({} windows)\n", c.kappa, cell(&c.scores), c.windows));
        }
        s.push_str("\nDVPQ (all | things | stuff)\n");
        for c in &self.dvpq {
            s.push_str(&format!(
                "  k={:<2} lambda={:<5} [{}]  ({} windows)\n",
                c.kappa,
                format!("{:.2}", c.lambda),
                cell(&c.scores),
                c.windows
            ));
        }
        if !self.per_class.is_empty() {
            s.push_str("\nper-class PQ\n");
            for p in &self.per_class {
                s.push_str(&format!(
                    "  class {:<3} PQ {:6.2}  (tp {} fp {} fn {})\n",
                    p.class_id, p.pq, p.tp, p.fp, p.fn_
                ));
            }
        }
        s
    }
}

/// Slow reference implementations used as independent test oracles.
pub mod reference {
    use super::*;

    /// PQ statistics by explicit double loop over all (gt, pred) segment
    /// pairs, recomputing every intersection with a full-map scan.
    pub fn pq_stats_slow(pred: &Array2<u32>, gt: &Array2<u32>) -> PqStats {
        assert_eq!(pred.dim(), gt.dim());
        let mut gt_ids: Vec<u32> = gt.iter().copied().filter(|&v| v != VOID).collect();
        gt_ids.sort_unstable();
        gt_ids.dedup();
        let mut pred_ids: Vec<u32> = pred.iter().copied().filter(|&v| v != VOID).collect();
        pred_ids.sort_unstable();
        pred_ids.dedup();

        let area = |map: &Array2<u32>, id: u32| map.iter().filter(|&&v| v == id).count();
        let inter2 = |a: u32, b: u32| {
            gt.iter()
                .zip(pred.iter())
                .filter(|(&g, &p)| g == a && p == b)
                .count()
        };
        let void_overlap = |p: u32| {
            gt.iter()
                .zip(pred.iter())
                .filter(|(&g, &pp)| g == VOID && pp == p)
                .count()
        };

        let mut stats = PqStats::default();
        let mut matched_pred: Vec<bool> = vec![false; pred_ids.len()];
        for &g in &gt_ids {
            let (gc, _) = decode_id(g);
            let ga = area(gt, g);
            let mut found = false;
            for (pi, &p) in pred_ids.iter().enumerate() {
                if matched_pred[pi] {
                    continue;
                }
                let (pc, _) = decode_id(p);
                if pc != gc {
                    continue;
                }
                let i = inter2(g, p);
                if i == 0 {
                    continue;
                }
                let union = ga + area(pred, p) - i - void_overlap(p);
                let iou = i as f64 / union as f64;
                if iou > 0.5 {
                    let e = stats.per_class.entry(gc).or_default();
                    e.tp += 1;
                    e.iou_sum += iou;
                    matched_pred[pi] = true;
                    found = true;
                    break;
                }
            }
            if !found {
                stats.per_class.entry(gc).or_default().fn_ += 1;
            }
        }
        for (pi, &p) in pred_ids.iter().enumerate() {
            if matched_pred[pi] {
                continue;
            }
            if 2 * void_overlap(p) > area(pred, p) {
                continue;
            }
            let (pc, _) = decode_id(p);
            stats.per_class.entry(pc).or_default().fp += 1;
        }
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_id, generate_sequence, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u32) -> Array2<u32> {
        Array2::from_shape_fn((h, w), |(y, x)| f(y, x))
    }

    fn no_things(_: u32) -> bool {
        false
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let cfg = SynthConfig { num_sequences: 1, seed: 11, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let is_thing = |c: u32| manifest.is_thing(c);
        for s in &samples {
            let stats = pq_stats(&s.panoptic_gt, &s.panoptic_gt).unwrap();
            let sum = stats.summary(&is_thing);
            assert!((sum.all.unwrap() - 100.0).abs() < 1e-9);
            assert!((sum.things.unwrap() - 100.0).abs() < 1e-9);
            assert!((sum.stuff.unwrap() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_exactly_half_is_unmatched() {
        // GT: class 1 on rows 0-1, class 0 on rows 2-3.
        let gt = ids(4, 4, |y, _| if y < 2 { encode_id(1, 0) } else { encode_id(0, 0) });
        // Pred: class 1 on row 0 only (IoU 4/8 = 0.5, strict > rejects it).
        let pred = ids(4, 4, |y, _| if y == 0 { encode_id(1, 0) } else { encode_id(0, 0) });
        let stats = pq_stats(&pred, &gt).unwrap();
        let c1 = stats.per_class[&1];
        assert_eq!((c1.tp, c1.fp, c1.fn_), (0, 1, 1));
        // Class 0: inter 8, union 12 -> IoU 2/3 matched.
        let c0 = stats.per_class[&0];
        assert_eq!((c0.tp, c0.fp, c0.fn_), (1, 0, 0));
        assert!((c0.iou_sum - 2.0 / 3.0).abs() < 1e-12);
        let sum = stats.summary(&no_things);
        assert!((sum.all.unwrap() - (0.0 + 100.0 * 2.0 / 3.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn single_tp_iou_two_thirds() {
        // GT: one 6-pixel segment, rest void. Pred: 4 pixels inside it.
        let gt = ids(4, 4, |y, x| {
            if y == 0 || (y == 1 && x < 2) {
                encode_id(3, 1)
            } else {
                VOID
            }
        });
        let pred = ids(4, 4, |y, _| if y == 0 { encode_id(3, 1) } else { VOID });
        let stats = pq_stats(&pred, &gt).unwrap();
        let c = stats.per_class[&3];
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
        assert!((c.iou_sum - 2.0 / 3.0).abs() < 1e-12);
        let sum = stats.summary(&|_| true);
        assert!((sum.all.unwrap() - 100.0 * 2.0 / 3.0).abs() < 1e-9);
        assert!(sum.stuff.is_none());
    }

    #[test]
    fn void_majority_prediction_dropped() {
        // GT: left half class 2, right half void.
        let gt = ids(4, 4, |_, x| if x < 2 { encode_id(2, 0) } else { VOID });
        // Pred: one segment covering 1 left pixel + 3 void pixels (75% void),
        // plus a perfect match for the rest of class 2.
        let pred = ids(4, 4, |y, x| {
            if y == 0 && x >= 1 {
                encode_id(2, 7)
            } else if x < 2 {
                encode_id(2, 1)
            } else {
                VOID
            }
        });
        let stats = pq_stats(&pred, &gt).unwrap();
        let c = stats.per_class[&2];
        // Segment (2,7): 1 of 4 pixels on GT, 3 on void -> dropped, not FP.
        // Segment (2,1): covers 7 of 8 GT pixels; union 8 -> IoU 7/8 -> TP.
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
        assert!((c.iou_sum - 7.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop_reference_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..60 {
            let n_class = rng.gen_range(1..4u32);
            let map = |rng: &mut ChaCha8Rng| {
                ids(16, 16, |_, _| {
                    if rng.gen_bool(0.1) {
                        VOID
                    } else {
                        let c = rng.gen_range(0..n_class);
                        let i = rng.gen_range(0..3u32);
                        encode_id(c, i)
                    }
                })
            };
            // Correlated pair: gt plus block noise, so some segments match.
            let gt = map(&mut rng);
            let mut pred = gt.clone();
            for _ in 0..rng.gen_range(0..6) {
                let y = rng.gen_range(0..12);
                let x = rng.gen_range(0..12);
                let v = if rng.gen_bool(0.2) {
                    VOID
                } else {
                    encode_id(rng.gen_range(0..n_class), rng.gen_range(0..3))
                };
                for dy in 0..rng.gen_range(1..5) {
                    for dx in 0..rng.gen_range(1..5) {
                        pred[[y + dy, x + dx]] = v;
                    }
                }
            }
            let fast = pq_stats(&pred, &gt).unwrap();
            let slow = reference::pq_stats_slow(&pred, &gt);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn vpq_kappa_1_is_frame_averaged_pq() {
        let cfg = SynthConfig { num_sequences: 1, seed: 5, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let is_thing = |c: u32| manifest.is_thing(c);
        // Degrade predictions: drop one object's segment in every frame.
        let victim = samples
            .iter()
            .flat_map(|s| s.panoptic_gt.iter().copied())
            .find(|&v| manifest.is_thing(decode_id(v).0))
            .unwrap();
        let preds: Vec<Array2<u32>> = samples
            .iter()
            .map(|s| s.panoptic_gt.mapv(|v| if v == victim { VOID } else { v }))
            .collect();
        let gts: Vec<&Array2<u32>> = samples.iter().map(|s| &s.panoptic_gt).collect();
        let pred_refs: Vec<&Array2<u32>> = preds.iter().collect();

        let windows = vpq_window_stats(&pred_refs, &gts, 1).unwrap();
        let mut mean = MeanAcc::default();
        for w in &windows {
            mean.push(w.summary(&is_thing).all.unwrap());
        }
        let mut frame_mean = MeanAcc::default();
        for (p, g) in preds.iter().zip(&gts) {
            frame_mean.push(pq_stats(p, g).unwrap().summary(&is_thing).all.unwrap());
        }
        assert_eq!(mean.mean(), frame_mean.mean());
    }

    #[test]
    fn vpq_invariant_to_consistent_id_permutation() {
        let cfg = SynthConfig { num_sequences: 1, seed: 9, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let is_thing = |c: u32| manifest.is_thing(c);
        // Shift every thing instance id by 7, consistently across frames.
        let preds: Vec<Array2<u32>> = samples
            .iter()
            .map(|s| {
                s.panoptic_gt.mapv(|v| {
                    let (c, i) = decode_id(v);
                    if v != VOID && manifest.is_thing(c) {
                        encode_id(c, i + 7)
                    } else {
                        v
                    }
                })
            })
            .collect();
        let gts: Vec<&Array2<u32>> = samples.iter().map(|s| &s.panoptic_gt).collect();
        let pred_refs: Vec<&Array2<u32>> = preds.iter().collect();
        for kappa in [1, 2, 3] {
            for w in vpq_window_stats(&pred_refs, &gts, kappa).unwrap() {
                let s = w.summary(&is_thing);
                assert!((s.all.unwrap() - 100.0).abs() < 1e-9, "kappa {kappa}");
            }
        }
    }

    #[test]
    fn id_swap_mid_window_drops_tube_iou() {
        // Two equal-area objects of the same class on a stuff background;
        // prediction swaps their ids in the second frame.
        let gt_frame = ids(8, 8, |y, x| {
            if y < 4 && x < 4 {
                encode_id(5, 1)
            } else if y < 4 {
                encode_id(5, 2)
            } else {
                encode_id(0, 0)
            }
        });
        let swapped = gt_frame.mapv(|v| match decode_id(v) {
            (5, 1) => encode_id(5, 2),
            (5, 2) => encode_id(5, 1),
            _ => v,
        });
        let gts = vec![&gt_frame, &gt_frame];
        let preds = vec![gt_frame.clone(), swapped];
        let pred_refs: Vec<&Array2<u32>> = preds.iter().collect();
        let w = vpq_window_stats(&pred_refs, &gts, 2).unwrap();
        assert_eq!(w.len(), 1);
        // Each pred tube overlaps each gt tube on exactly one frame:
        // inter 16, union 48 -> IoU 1/3 -> everything unmatched for class 5.
        let c5 = w[0].per_class[&5];
        assert_eq!((c5.tp, c5.fp, c5.fn_), (0, 2, 2));
        // Background matches perfectly; class-average = (0 + 100)/2.
        let is_thing = |c: u32| c == 5;
        let s = w[0].summary(&is_thing);
        assert!((s.all.unwrap() - 50.0).abs() < 1e-9);
        assert!((s.things.unwrap() - 0.0).abs() < 1e-9);
        assert!((s.stuff.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn dvpq_threshold_constructions() {
        let cfg = SynthConfig { num_sequences: 1, seed: 13, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let thing_table: Vec<bool> = (0..manifest.num_classes)
            .map(|c| manifest.is_thing(c))
            .collect();
        let gt_pan: Vec<Array2<u32>> = samples.iter().map(|s| s.panoptic_gt.clone()).collect();
        let gt_dep: Vec<Array2<f32>> = samples.iter().map(|s| s.depth_gt.clone()).collect();
        // Perfect segmentation, depth off by exactly 30% everywhere.
        let off_dep: Vec<Array2<f32>> = gt_dep.iter().map(|d| d.mapv(|v| v * 1.3)).collect();

        let grid = EvalGrid { kappas: vec![1, 2], lambdas: vec![0.10, 0.25, 0.50] };
        let mut acc = MetricsAccumulator::new(grid, thing_table);
        acc.add_sequence(&gt_pan, &off_dep, &gt_pan, &gt_dep).unwrap();
        let report = acc.finish();
        for cell in &report.dvpq {
            let v = cell.scores.all.unwrap();
            if cell.lambda < 0.30 {
                assert!(v.abs() < 1e-9, "lambda {} gave {v}", cell.lambda);
            } else {
                assert!((v - 100.0).abs() < 1e-9, "lambda {} gave {v}", cell.lambda);
            }
        }
        // VPQ untouched by depth.
        for cell in &report.vpq {
            assert!((cell.scores.all.unwrap() - 100.0).abs() < 1e-9);
        }
        // AbsRel 0.3 up to f32 rounding of the 1.3x construction.
        assert!((report.abs_rel.unwrap() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn dvpq_monotone_in_lambda_and_bounded_by_vpq() {
        let cfg = SynthConfig { num_sequences: 1, seed: 21, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let thing_table: Vec<bool> = (0..manifest.num_classes)
            .map(|c| manifest.is_thing(c))
            .collect();
        let gt_pan: Vec<Array2<u32>> = samples.iter().map(|s| s.panoptic_gt.clone()).collect();
        let gt_dep: Vec<Array2<f32>> = samples.iter().map(|s| s.depth_gt.clone()).collect();
        // Noisy depth: multiplicative error growing with x.
        let noisy: Vec<Array2<f32>> = gt_dep
            .iter()
            .map(|d| {
                let w = d.ncols();
                Array2::from_shape_fn(d.dim(), |(y, x)| {
                    d[[y, x]] * (1.0 + 0.6 * x as f32 / w as f32)
                })
            })
            .collect();
        let grid = EvalGrid { kappas: vec![1, 3], lambdas: vec![0.10, 0.25, 0.50] };
        let mut acc = MetricsAccumulator::new(grid.clone(), thing_table);
        acc.add_sequence(&gt_pan, &noisy, &gt_pan, &gt_dep).unwrap();
        let report = acc.finish();
        for (ki, _) in grid.kappas.iter().enumerate() {
            let vpq = report.vpq[ki].scores.all.unwrap();
            let mut prev = -1.0;
            for li in 0..grid.lambdas.len() {
                let v = report.dvpq[ki * grid.lambdas.len() + li].scores.all.unwrap();
                assert!(v >= prev - 1e-9, "not monotone in lambda");
                assert!(v <= vpq + 1e-9, "DVPQ exceeded VPQ");
                prev = v;
            }
        }
    }

    #[test]
    fn sparse_gt_pixels_never_relabel() {
        let pan = ids(4, 4, |_, _| encode_id(1, 0));
        let pred_depth = Array2::from_elem((4, 4), 99.0f32);
        let mut gt_depth = Array2::from_elem((4, 4), 10.0f32);
        gt_depth[[0, 0]] = 0.0;
        let out = relabel_by_depth(&pan, &pred_depth, &gt_depth, 0.1);
        assert_eq!(out[[0, 0]], encode_id(1, 0), "invalid GT pixel must keep its label");
        assert!(out.iter().skip(1).all(|&v| v == VOID));
    }

    #[test]
    fn depth_error_analytic_cases() {
        let gt = Array2::from_elem((3, 3), 10.0f32);
        assert_eq!(depth_errors(&gt, &gt), Some((0.0, 0.0)));
        let pred = gt.mapv(|v| v * 1.1);
        let (abs_rel, _) = depth_errors(&pred, &gt).unwrap();
        assert!((abs_rel - 0.1).abs() < 1e-6);
        let pred13 = Array2::from_elem((3, 3), 13.0f32);
        let (a, r) = depth_errors(&pred13, &gt).unwrap();
        assert!((a - 0.3).abs() < 1e-9);
        assert!((r - 3.0).abs() < 1e-9);
        let invalid = Array2::from_elem((3, 3), 0.0f32);
        assert_eq!(depth_errors(&pred, &invalid), None);
    }

    #[test]
    fn gt_self_evaluation_is_perfect() {
        let cfg = SynthConfig { num_sequences: 1, seed: 33, ..SynthConfig::default() };
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        let thing_table: Vec<bool> = (0..manifest.num_classes)
            .map(|c| manifest.is_thing(c))
            .collect();
        let pan: Vec<Array2<u32>> = samples.iter().map(|s| s.panoptic_gt.clone()).collect();
        let dep: Vec<Array2<f32>> = samples.iter().map(|s| s.depth_gt.clone()).collect();
        let mut acc = MetricsAccumulator::new(EvalGrid::default(), thing_table);
        acc.add_sequence(&pan, &dep, &pan, &dep).unwrap();
        let r = acc.finish();
        assert!((r.pq.all.unwrap() - 100.0).abs() < 1e-9);
        for c in &r.vpq {
            assert!((c.scores.all.unwrap() - 100.0).abs() < 1e-9);
        }
        for c in &r.dvpq {
            assert!((c.scores.all.unwrap() - 100.0).abs() < 1e-9);
        }
        assert_eq!(r.abs_rel, Some(0.0));
        assert_eq!(r.rmse, Some(0.0));
        assert!(!r.to_table().is_empty());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ids(4, 4, |_, _| 0);
        let b = ids(4, 5, |_, _| 0);
        assert!(pq_stats(&a, &b).is_err());
    }
}
