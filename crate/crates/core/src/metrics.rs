//! Tracking metrics: per-frame matching, CLEAR-MOT counts, and the
//! recall-averaged AMOTA/AMOTP summary.
//!
//! Matching is greedy on bird's-eye-view center distance with a continuity
//! preference: a ground-truth object that was previously paired with some
//! track keeps that pairing as long as the track is present and within the
//! gate, even when another track is momentarily closer. Identity switches
//! are counted whenever the track id matched to a ground-truth object
//! differs from the id it was most recently matched to, gaps included.
//!
//! The summary sweeps track-confidence cutoffs to hit each point of a recall
//! grid, computes the recall-normalized MOTA (MOTAR) at every reached point,
//! and averages: AMOTA over MOTAR, AMOTP over the mean true-positive center
//! distance. Grid points below the minimum recall are dropped; unreachable
//! points contribute the worst case (MOTAR 0, distance at the gate).

use crate::config::EvalConfig;
use std::collections::BTreeMap;

/// One box as seen by the evaluator: a track (or ground-truth) id and the
/// BEV center. `score` is the per-frame detection score; ground truth can
/// leave it at 1.0.
#[derive(Debug, Clone, Copy)]
pub struct MotBox {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl MotBox {
    pub fn new(id: u64, x: f64, y: f64, score: f64) -> Self {
        MotBox { id, x, y, score }
    }
}

fn dist(a: &MotBox, b: &MotBox) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Matches one frame. Returns `(pred index, gt index)` pairs; unpaired
/// predictions are false positives, unpaired ground truths are misses.
/// `prev` maps each ground-truth id to the track id it was most recently
/// matched with; those pairings are kept first when still within the gate.
pub fn match_frame(
    pred: &[MotBox],
    gt: &[MotBox],
    threshold: f64,
    prev: &BTreeMap<u64, u64>,
) -> Vec<(usize, usize)> {
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();

    for (g, gb) in gt.iter().enumerate() {
        let Some(want) = prev.get(&gb.id) else {
            continue;
        };
        let Some(p) = pred.iter().position(|pb| pb.id == *want) else {
            continue;
        };
        if !pred_used[p] && dist(&pred[p], gb) <= threshold {
            pred_used[p] = true;
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pb) in pred.iter().enumerate() {
        if pred_used[p] {
            continue;
        }
        for (g, gb) in gt.iter().enumerate() {
            if gt_used[g] {
                continue;
            }
            let d = dist(pb, gb);
            if d <= threshold {
                candidates.push((d, p, g));
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (_, p, g) in candidates {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }
    pairs.sort_unstable_by_key(|&(_, g)| g);
    pairs
}

/// Aggregate CLEAR-MOT counts over a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearMot {
    pub mota: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub tp: usize,
    pub gt_count: usize,
    /// Sum of matched center distances, for MOTP-style averages.
    pub dist_sum: f64,
}

impl ClearMot {
    /// Mean true-positive center distance; 0 when nothing matched.
    pub fn motp(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.dist_sum / self.tp as f64
        }
    }
}

/// Runs CLEAR-MOT over aligned per-frame box lists.
pub fn clear_mot(pred: &[Vec<MotBox>], gt: &[Vec<MotBox>], threshold: f64) -> ClearMot {
    assert_eq!(pred.len(), gt.len(), "prediction/ground-truth frame counts differ");
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut ids = 0usize;
    let mut fp = 0usize;
    let mut fn_count = 0usize;
    let mut tp = 0usize;
    let mut gt_count = 0usize;
    let mut dist_sum = 0.0;
    for (pf, gf) in pred.iter().zip(gt) {
        let pairs = match_frame(pf, gf, threshold, &last);
        tp += pairs.len();
        fp += pf.len() - pairs.len();
        fn_count += gf.len() - pairs.len();
        gt_count += gf.len();
        for (p, g) in pairs {
            dist_sum += dist(&pf[p], &gf[g]);
            let gid = gf[g].id;
            let pid = pf[p].id;
            if let Some(old) = last.get(&gid) {
                if *old != pid {
                    ids += 1;
                }
            }
            last.insert(gid, pid);
        }
    }
    let mota = 1.0 - (ids + fp + fn_count) as f64 / gt_count.max(1) as f64;
    ClearMot {
        mota,
        ids,
        fp,
        fn_count,
        tp,
        gt_count,
        dist_sum,
    }
}

/// Mean per-frame score of every predicted track id.
pub fn track_confidences(pred: &[Vec<MotBox>]) -> BTreeMap<u64, f64> {
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for frame in pred {
        for b in frame {
            let e = sums.entry(b.id).or_insert((0.0, 0));
            e.0 += b.score;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect()
}

fn filter_by_confidence(
    pred: &[Vec<MotBox>],
    conf: &BTreeMap<u64, f64>,
    cutoff: f64,
) -> Vec<Vec<MotBox>> {
    pred.iter()
        .map(|f| f.iter().filter(|b| conf[&b.id] >= cutoff).copied().collect())
        .collect()
}

/// One operating point of the recall sweep.
#[derive(Debug, Clone, Copy)]
pub struct RecallPoint {
    /// Grid recall this point was selected for.
    pub target: f64,
    /// Confidence cutoff in force; infinite when the target is unreachable.
    pub threshold: f64,
    pub motar: f64,
    pub mota: f64,
    /// Achieved recall at the cutoff.
    pub recall: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub tp: usize,
    /// Mean TP center distance; the gate distance when unreachable.
    pub motp: f64,
}

/// Evaluation summary: recall-averaged metrics plus the CLEAR-MOT numbers at
/// the grid point where MOTA peaks.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub amota: f64,
    pub amotp: f64,
    /// Grid recall at which MOTA is highest.
    pub best_recall: f64,
    pub mota: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub tp: usize,
    /// Achieved recall at the best-MOTA point.
    pub recall: f64,
    pub curve: Vec<RecallPoint>,
}

const RECALL_EPS: f64 = 1e-12;

/// Sweeps confidence cutoffs over the recall grid and aggregates.
pub fn evaluate(pred: &[Vec<MotBox>], gt: &[Vec<MotBox>], cfg: &EvalConfig) -> EvalReport {
    assert_eq!(pred.len(), gt.len(), "prediction/ground-truth frame counts differ");
    let p_total: usize = gt.iter().map(|f| f.len()).sum();
    let p = p_total.max(1) as f64;
    let conf = track_confidences(pred);

    let mut cutoffs: Vec<f64> = conf.values().copied().collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();

    struct Op {
        cutoff: f64,
        cm: ClearMot,
        recall: f64,
    }
    let ops: Vec<Op> = cutoffs
        .iter()
        .map(|&c| {
            let cm = clear_mot(&filter_by_confidence(pred, &conf, c), gt, cfg.match_threshold);
            let recall = cm.tp as f64 / p;
            Op { cutoff: c, cm, recall }
        })
        .collect();

    let mut curve = Vec::new();
    for k in 1..=cfg.recall_points {
        let target = k as f64 / cfg.recall_points as f64;
        if target + RECALL_EPS < cfg.min_recall {
            continue;
        }
        // Highest cutoff whose achieved recall reaches the target keeps the
        // prediction set as small as possible.
        match ops.iter().find(|o| o.recall + RECALL_EPS >= target) {
            Some(op) => {
                let r = op.recall;
                let num =
                    (op.cm.ids + op.cm.fp) as f64 + (op.cm.fn_count as f64 - (1.0 - r) * p);
                let motar = if r > 0.0 {
                    (1.0 - num / (r * p)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                curve.push(RecallPoint {
                    target,
                    threshold: op.cutoff,
                    motar,
                    mota: op.cm.mota,
                    recall: r,
                    ids: op.cm.ids,
                    fp: op.cm.fp,
                    fn_count: op.cm.fn_count,
                    tp: op.cm.tp,
                    motp: op.cm.motp(),
                });
            }
            None => curve.push(RecallPoint {
                target,
                threshold: f64::INFINITY,
                motar: 0.0,
                mota: 0.0,
                recall: 0.0,
                ids: 0,
                fp: 0,
                fn_count: p_total,
                tp: 0,
                motp: cfg.match_threshold,
            }),
        }
    }

    let n = curve.len().max(1) as f64;
    let amota = curve.iter().map(|c| c.motar).sum::<f64>() / n;
    let amotp = curve.iter().map(|c| c.motp).sum::<f64>() / n;

    let best = curve
        .iter()
        .filter(|c| c.threshold.is_finite())
        .fold(None::<&RecallPoint>, |acc, c| match acc {
            Some(b) if b.mota >= c.mota => Some(b),
            _ => Some(c),
        });
    match best {
        Some(b) => EvalReport {
            amota,
            amotp,
            best_recall: b.target,
            mota: b.mota,
            ids: b.ids,
            fp: b.fp,
            fn_count: b.fn_count,
            tp: b.tp,
            recall: b.recall,
            curve,
        },
        // Nothing reaches any grid point (e.g. no predictions at all): report
        // the empty-prediction CLEAR numbers.
        None => EvalReport {
            amota,
            amotp,
            best_recall: 0.0,
            mota: if p_total == 0 { 1.0 } else { 0.0 },
            ids: 0,
            fp: 0,
            fn_count: p_total,
            tp: 0,
            recall: 0.0,
            curve,
        },
    }
}
