//! Track lifecycle management.
//!
//! The tracker owns the persistent track set between frames. Each frame it
//! hands the decoder its track embeddings and reference points, receives the
//! refined tracks plus the detections and their affinity scores, matches the
//! two sets one-to-one, and then updates, coasts, spawns, or terminates
//! tracks. Matching runs on a minimum-cost assignment over activated affinity
//! scores; a teacher variant matches by ground-truth identity instead so that
//! training can follow the ideal association.

use crate::config::TrackerConfig;
use crate::geometry::{ego_compensate_box, propagate_reference, BoxState, EgoPose};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Cost assigned to pairs below the score threshold. Large enough that the
/// solver only picks such a pair when forced to, and the post-filter then
/// discards it.
pub const INFEASIBLE: f64 = 1e6;

const NONE: usize = usize::MAX;

/// Solves min-cost assignment for a rectangular matrix with `rows <= cols`
/// by successive shortest augmenting paths. Returns the column assigned to
/// each row. Ties prefer unassigned columns, which together with the reversed
/// column scan keeps the result deterministic (a constant matrix yields the
/// identity pairing).
fn solve_rect(cost: &Tensor) -> Vec<usize> {
    let nr = cost.rows();
    let nc = cost.cols();
    debug_assert!(nr <= nc);
    let c = cost.data();

    let mut u = vec![0.0; nr];
    let mut v = vec![0.0; nc];
    let mut shortest = vec![0.0; nc];
    let mut path = vec![NONE; nc];
    let mut col4row = vec![NONE; nr];
    let mut row4col = vec![NONE; nc];
    let mut sr = vec![false; nr];
    let mut sc = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur_row in 0..nr {
        let mut min_val = 0.0;
        let mut num_remaining = nc;
        for (it, slot) in remaining.iter_mut().enumerate() {
            *slot = nc - it - 1;
        }
        sr.iter_mut().for_each(|b| *b = false);
        sc.iter_mut().for_each(|b| *b = false);
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);

        let mut i = cur_row;
        let mut sink = NONE;
        while sink == NONE {
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            sr[i] = true;

            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val + c[i * nc + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }

            min_val = lowest;
            assert!(min_val.is_finite(), "assignment cost matrix is infeasible");

            let j = remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur_row] += min_val;
        for (i, visited) in sr.iter().enumerate() {
            if *visited && i != cur_row {
                u[i] += min_val - shortest[col4row[i]];
            }
        }
        for (j, visited) in sc.iter().enumerate() {
            if *visited {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            std::mem::swap(&mut col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Minimum-cost one-to-one assignment on a finite cost matrix. Returns
/// `min(rows, cols)` pairs `(row, col)` sorted by row. Every index on the
/// smaller side is assigned exactly once.
pub fn min_cost_assignment(cost: &Tensor) -> Vec<(usize, usize)> {
    let nr = cost.rows();
    let nc = cost.cols();
    if nr == 0 || nc == 0 {
        return Vec::new();
    }
    if nr > nc {
        let mut pairs: Vec<(usize, usize)> = solve_rect(&cost.transpose2())
            .iter()
            .enumerate()
            .map(|(col, &row)| (row, col))
            .collect();
        pairs.sort_unstable();
        pairs
    } else {
        solve_rect(cost)
            .iter()
            .enumerate()
            .map(|(row, &col)| (row, col))
            .collect()
    }
}

/// Matches tracks to detections from raw affinity logits.
///
/// `affinity` has one row per detection and one column per track key; columns
/// at or beyond `n_tracks` (the auxiliary key) are ignored. A pair is
/// feasible when its activated score reaches `tau_score`; feasible pairs cost
/// `1 - score` and the assignment minimises total cost. Returns, per track,
/// the matched detection index.
pub fn associate_scores(affinity: &Tensor, n_tracks: usize, tau_score: f64) -> Vec<Option<usize>> {
    let n_d = affinity.rows();
    assert!(
        affinity.cols() >= n_tracks,
        "affinity has {} columns for {} tracks",
        affinity.cols(),
        n_tracks
    );
    let mut matches = vec![None; n_tracks];
    if n_tracks == 0 || n_d == 0 {
        return matches;
    }

    let mut score = Tensor::zeros(&[n_tracks, n_d]);
    let mut cost = Tensor::zeros(&[n_tracks, n_d]);
    for t in 0..n_tracks {
        for d in 0..n_d {
            let p = sigmoid_scalar(affinity.at2(d, t));
            score.set2(t, d, p);
            let c = if p >= tau_score { 1.0 - p } else { INFEASIBLE };
            cost.set2(t, d, c);
        }
    }
    for (t, d) in min_cost_assignment(&cost) {
        if score.at2(t, d) >= tau_score {
            matches[t] = Some(d);
        }
    }
    matches
}

/// Matches tracks to detections by shared ground-truth identity. Each
/// detection is used at most once; tracks without an identity stay unmatched.
pub fn associate_by_identity(
    track_ids: &[Option<u64>],
    det_ids: &[Option<u64>],
) -> Vec<Option<usize>> {
    let mut used = vec![false; det_ids.len()];
    track_ids
        .iter()
        .map(|tid| {
            let tid = (*tid)?;
            for (d, did) in det_ids.iter().enumerate() {
                if !used[d] && *did == Some(tid) {
                    used[d] = true;
                    return Some(d);
                }
            }
            None
        })
        .collect()
}

/// One persistent track.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    /// Query embedding carried to the next frame, shape `[1, d]`.
    pub embedding: Tensor,
    /// Most recent box in the current vehicle frame. Its center doubles as
    /// the reference point handed to the decoder.
    pub last_box: BoxState,
    pub score: f64,
    /// Consecutive frames without a matched detection.
    pub misses: usize,
    /// Frames since birth, counting the spawning frame.
    pub age: usize,
    /// Ground-truth identity, if known (teacher mode and diagnostics).
    pub gt_id: Option<u64>,
}

/// Refined per-track decoder outputs for the current frame, in track order.
#[derive(Debug, Clone)]
pub struct RefinedTracks {
    pub boxes: Vec<BoxState>,
    pub scores: Vec<f64>,
    /// Shape `[num_tracks, d]`.
    pub embeddings: Tensor,
}

/// Detection outputs for the current frame, in detection-slot order.
#[derive(Debug, Clone)]
pub struct Detections {
    pub boxes: Vec<BoxState>,
    pub scores: Vec<f64>,
    /// Shape `[num_detections, d]`.
    pub embeddings: Tensor,
}

/// Where each surviving track came from this frame. Indices refer to the
/// pre-step track order and the detection-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackSource {
    Matched { track: usize, det: usize },
    Coasted { track: usize },
    Spawned { det: usize },
}

/// One reported object for the current frame.
#[derive(Debug, Clone)]
pub struct FrameEstimate {
    pub id: u64,
    pub box_state: BoxState,
    pub score: f64,
}

/// Outcome of one tracker step. `sources` is aligned with the post-step
/// track order. Only detection-backed tracks produce estimates; coasting
/// tracks are carried silently.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub sources: Vec<TrackSource>,
    pub terminated: Vec<u64>,
    pub estimates: Vec<FrameEstimate>,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    pub tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Tracker {
            cfg,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    /// Stacks the track embeddings `[n, d]` and reference points `[n, 3]`
    /// in track order, ready for the decoder.
    pub fn decoder_inputs(&self, d: usize) -> (Tensor, Tensor) {
        let n = self.tracks.len();
        let mut emb = Tensor::zeros(&[n, d]);
        let mut refs = Tensor::zeros(&[n, 3]);
        for (i, track) in self.tracks.iter().enumerate() {
            assert_eq!(track.embedding.shape(), &[1, d], "track embedding width");
            for k in 0..d {
                emb.set2(i, k, track.embedding.at2(0, k));
            }
            for k in 0..3 {
                refs.set2(i, k, track.last_box.center[k]);
            }
        }
        (emb, refs)
    }

    /// Advances every track box by its own velocity for `dt` seconds and
    /// re-expresses it in the next frame's vehicle coordinates.
    pub fn propagate(&mut self, from: &EgoPose, to: &EgoPose, dt: f64) {
        for track in &mut self.tracks {
            let mut b = track.last_box;
            b.center = propagate_reference(b.center, b.velocity, dt);
            track.last_box = ego_compensate_box(&b, from, to);
        }
    }

    /// Applies an externally computed match (track index -> detection index)
    /// using the configured score threshold for spawning and the configured
    /// patience for termination.
    pub fn step(
        &mut self,
        matches: &[Option<usize>],
        refined: &RefinedTracks,
        dets: &Detections,
    ) -> StepReport {
        self.apply(matches, refined, dets, self.cfg.patience, None)
    }

    /// Teacher-forcing step: matches by ground-truth identity, terminates
    /// unmatched tracks immediately, and spawns a track for every detection
    /// that carries an identity.
    pub fn step_teacher(
        &mut self,
        det_gt_ids: &[Option<u64>],
        refined: &RefinedTracks,
        dets: &Detections,
    ) -> StepReport {
        let track_ids: Vec<Option<u64>> = self.tracks.iter().map(|t| t.gt_id).collect();
        let matches = associate_by_identity(&track_ids, det_gt_ids);
        self.apply(&matches, refined, dets, 0, Some(det_gt_ids))
    }

    fn apply(
        &mut self,
        matches: &[Option<usize>],
        refined: &RefinedTracks,
        dets: &Detections,
        patience: usize,
        det_gt_ids: Option<&[Option<u64>]>,
    ) -> StepReport {
        let n_old = self.tracks.len();
        let n_d = dets.boxes.len();
        assert_eq!(matches.len(), n_old, "one match slot per track");
        assert_eq!(refined.boxes.len(), n_old, "refined boxes per track");
        assert_eq!(refined.scores.len(), n_old, "refined scores per track");
        assert_eq!(refined.embeddings.rows(), n_old, "refined embeddings per track");
        assert_eq!(dets.scores.len(), n_d, "detection scores per slot");
        assert_eq!(dets.embeddings.rows(), n_d, "detection embeddings per slot");
        if let Some(ids) = det_gt_ids {
            assert_eq!(ids.len(), n_d, "detection identities per slot");
        }

        let w = self.cfg.track_update_weight;
        let mut used_det = vec![false; n_d];
        let mut survivors = Vec::new();
        let mut sources = Vec::new();
        let mut terminated = Vec::new();
        let mut estimates = Vec::new();

        for (t, track) in self.tracks.drain(..).enumerate() {
            match matches[t] {
                Some(d) => {
                    assert!(d < n_d, "match target out of range");
                    assert!(!used_det[d], "detection matched twice");
                    used_det[d] = true;
                    let emb = refined
                        .embeddings
                        .row_slice(t, t + 1)
                        .scale(w)
                        .add(&dets.embeddings.row_slice(d, d + 1).scale(1.0 - w));
                    estimates.push(FrameEstimate {
                        id: track.id,
                        box_state: dets.boxes[d],
                        score: dets.scores[d],
                    });
                    sources.push(TrackSource::Matched { track: t, det: d });
                    survivors.push(Track {
                        id: track.id,
                        embedding: emb,
                        last_box: dets.boxes[d],
                        score: dets.scores[d],
                        misses: 0,
                        age: track.age + 1,
                        gt_id: track.gt_id,
                    });
                }
                None => {
                    let misses = track.misses + 1;
                    if misses > patience {
                        terminated.push(track.id);
                    } else {
                        sources.push(TrackSource::Coasted { track: t });
                        survivors.push(Track {
                            id: track.id,
                            embedding: refined.embeddings.row_slice(t, t + 1),
                            last_box: refined.boxes[t],
                            score: refined.scores[t],
                            misses,
                            age: track.age + 1,
                            gt_id: track.gt_id,
                        });
                    }
                }
            }
        }

        for d in 0..n_d {
            if used_det[d] {
                continue;
            }
            let spawn = match det_gt_ids {
                Some(ids) => ids[d].is_some(),
                None => dets.scores[d] > self.cfg.tau_new,
            };
            if !spawn {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            sources.push(TrackSource::Spawned { det: d });
            estimates.push(FrameEstimate {
                id,
                box_state: dets.boxes[d],
                score: dets.scores[d],
            });
            survivors.push(Track {
                id,
                embedding: dets.embeddings.row_slice(d, d + 1),
                last_box: dets.boxes[d],
                score: dets.scores[d],
                misses: 0,
                age: 1,
                gt_id: det_gt_ids.and_then(|ids| ids[d]),
            });
        }

        self.tracks = survivors;
        StepReport {
            sources,
            terminated,
            estimates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn pair_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| cost.at2(r, c)).sum()
    }

    fn brute_force_min(cost: &Tensor) -> f64 {
        fn rec(cost: &Tensor, row: usize, used: &mut [bool]) -> f64 {
            if row == cost.rows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.cols() {
                if used[c] {
                    continue;
                }
                used[c] = true;
                let v = cost.at2(row, c) + rec(cost, row + 1, used);
                used[c] = false;
                if v < best {
                    best = v;
                }
            }
            best
        }
        if cost.rows() > cost.cols() {
            return brute_force_min(&cost.transpose2());
        }
        rec(cost, 0, &mut vec![false; cost.cols()])
    }

    #[test]
    fn assignment_solves_known_case() {
        let cost = Tensor::from_vec(
            vec![3, 3],
            vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0],
        )
        .unwrap();
        let pairs = min_cost_assignment(&cost);
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(pair_cost(&cost, &pairs), 5.0);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let nr = rng.gen_range(1..=6);
            let nc = rng.gen_range(1..=7);
            let cost = Tensor::uniform(&[nr, nc], 5.0, &mut rng);
            let pairs = min_cost_assignment(&cost);
            assert_eq!(pairs.len(), nr.min(nc));
            let total = pair_cost(&cost, &pairs);
            let best = brute_force_min(&cost);
            assert!(
                (total - best).abs() < 1e-9,
                "solver {total} vs brute force {best} on {nr}x{nc}"
            );
        }
    }

    #[test]
    fn assignment_is_deterministic_under_ties() {
        let constant = Tensor::zeros(&[4, 4]);
        assert_eq!(
            min_cost_assignment(&constant),
            vec![(0, 0), (1, 1), (2, 2), (3, 3)]
        );

        let cost = Tensor::from_vec(
            vec![3, 4],
            vec![1.0, 1.0, 2.0, 1.0, 2.0, 1.0, 1.0, 2.0, 1.0, 2.0, 1.0, 1.0],
        )
        .unwrap();
        let first = min_cost_assignment(&cost);
        for _ in 0..10 {
            assert_eq!(min_cost_assignment(&cost), first);
        }
    }

    #[test]
    fn assignment_handles_rectangular_shapes() {
        let wide = Tensor::from_vec(vec![2, 4], vec![9.0, 1.0, 9.0, 9.0, 9.0, 9.0, 9.0, 2.0])
            .unwrap();
        assert_eq!(min_cost_assignment(&wide), vec![(0, 1), (1, 3)]);

        let tall = wide.transpose2();
        let pairs = min_cost_assignment(&tall);
        assert_eq!(pairs, vec![(1, 0), (3, 1)]);
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        assert!(rows.windows(2).all(|w| w[0] < w[1]), "sorted by row");
    }

    #[test]
    fn assignment_handles_empty_matrices() {
        assert!(min_cost_assignment(&Tensor::zeros(&[0, 5])).is_empty());
        assert!(min_cost_assignment(&Tensor::zeros(&[5, 0])).is_empty());
    }

    #[test]
    fn score_association_respects_threshold() {
        // Rows are detections, columns tracks.
        let affinity = Tensor::from_vec(
            vec![2, 2],
            vec![
                logit(0.9),
                logit(0.05),
                logit(0.05),
                logit(0.2),
            ],
        )
        .unwrap();
        let matches = associate_scores(&affinity, 2, 0.3);
        assert_eq!(matches, vec![Some(0), None]);
    }

    #[test]
    fn score_association_prefers_higher_probability() {
        // One track, two candidate detections.
        let affinity =
            Tensor::from_vec(vec![2, 1], vec![logit(0.6), logit(0.8)]).unwrap();
        assert_eq!(associate_scores(&affinity, 1, 0.3), vec![Some(1)]);

        // Two tracks compete for a single detection: it must go to the pair
        // with the higher score, leaving the other track unmatched.
        let affinity =
            Tensor::from_vec(vec![1, 2], vec![logit(0.6), logit(0.8)]).unwrap();
        assert_eq!(associate_scores(&affinity, 2, 0.3), vec![None, Some(0)]);
    }

    #[test]
    fn score_association_ignores_trailing_column() {
        let core = vec![logit(0.7), logit(0.1), logit(0.2), logit(0.75)];
        let plain = Tensor::from_vec(vec![2, 2], core.clone()).unwrap();
        let mut padded = Vec::new();
        for d in 0..2 {
            padded.extend_from_slice(&core[d * 2..d * 2 + 2]);
            padded.push(logit(0.99));
        }
        let with_aux = Tensor::from_vec(vec![2, 3], padded).unwrap();
        assert_eq!(
            associate_scores(&plain, 2, 0.3),
            associate_scores(&with_aux, 2, 0.3)
        );
    }

    #[test]
    fn raising_the_threshold_never_adds_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n_d = rng.gen_range(1..=5);
            let n_t = rng.gen_range(1..=5);
            let affinity = Tensor::uniform(&[n_d, n_t], 3.0, &mut rng);
            let mut last = usize::MAX;
            for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let count = associate_scores(&affinity, n_t, tau)
                    .iter()
                    .filter(|m| m.is_some())
                    .count();
                assert!(count <= last, "matches grew from {last} to {count} at tau {tau}");
                last = count;
            }
        }
    }

    #[test]
    fn identity_association_pairs_equal_ids() {
        let tracks = [Some(3), None, Some(5), Some(9)];
        let dets = [Some(5), Some(4), Some(3)];
        assert_eq!(
            associate_by_identity(&tracks, &dets),
            vec![Some(2), None, Some(0), None]
        );
    }

    fn unit_box(x: f64) -> BoxState {
        BoxState::new([x, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0])
    }

    fn refined_for(tracker: &Tracker, d: usize) -> RefinedTracks {
        let n = tracker.num_tracks();
        RefinedTracks {
            boxes: tracker.tracks.iter().map(|t| t.last_box).collect(),
            scores: tracker.tracks.iter().map(|t| t.score).collect(),
            embeddings: Tensor::filled(&[n, d], 0.5),
        }
    }

    fn dets_with_scores(scores: &[f64], d: usize) -> Detections {
        Detections {
            boxes: scores
                .iter()
                .enumerate()
                .map(|(i, _)| unit_box(i as f64))
                .collect(),
            scores: scores.to_vec(),
            embeddings: Tensor::filled(&[scores.len(), d], 1.0),
        }
    }

    fn default_tracker() -> Tracker {
        Tracker::new(TrackerConfig::default())
    }

    #[test]
    fn spawn_requires_strictly_exceeding_threshold() {
        let mut tracker = default_tracker();
        let tau = 0.4;
        let dets = dets_with_scores(&[tau, tau + 1e-9], 2);
        let report = tracker.step(&[], &refined_for(&default_tracker(), 2), &dets);
        assert_eq!(tracker.num_tracks(), 1);
        assert_eq!(report.sources, vec![TrackSource::Spawned { det: 1 }]);
        assert_eq!(report.estimates.len(), 1);
        assert_eq!(report.estimates[0].id, 0);
    }

    #[test]
    fn patience_counts_consecutive_misses() {
        let mut cfg = TrackerConfig::default();
        cfg.patience = 3;
        let mut tracker = Tracker::new(cfg);
        let d = 2;
        tracker.step(&[], &refined_for(&tracker, d), &dets_with_scores(&[0.9], d));
        assert_eq!(tracker.num_tracks(), 1);

        let empty = dets_with_scores(&[], d);
        for miss in 1..=3 {
            let report = tracker.step(&[None], &refined_for(&tracker, d), &empty);
            assert_eq!(tracker.num_tracks(), 1, "alive after miss {miss}");
            assert!(report.terminated.is_empty());
            assert!(report.estimates.is_empty(), "coasting is silent");
            assert_eq!(tracker.tracks[0].misses, miss);
        }
        let report = tracker.step(&[None], &refined_for(&tracker, d), &empty);
        assert_eq!(tracker.num_tracks(), 0);
        assert_eq!(report.terminated, vec![0]);
    }

    #[test]
    fn matched_update_blends_embeddings() {
        let mut cfg = TrackerConfig::default();
        cfg.track_update_weight = 0.25;
        let mut tracker = Tracker::new(cfg);
        let d = 3;
        tracker.step(&[], &refined_for(&tracker, d), &dets_with_scores(&[0.9], d));

        let refined = RefinedTracks {
            boxes: vec![unit_box(7.0)],
            scores: vec![0.5],
            embeddings: Tensor::filled(&[1, d], 2.0),
        };
        let dets = Detections {
            boxes: vec![unit_box(3.0)],
            scores: vec![0.8],
            embeddings: Tensor::filled(&[1, d], 4.0),
        };
        let report = tracker.step(&[Some(0)], &refined, &dets);

        let track = &tracker.tracks[0];
        for k in 0..d {
            let want = 0.25 * 2.0 + 0.75 * 4.0;
            assert!((track.embedding.at2(0, k) - want).abs() < 1e-12);
        }
        assert_eq!(track.last_box, unit_box(3.0), "box comes from the detection");
        assert_eq!(track.score, 0.8);
        assert_eq!(track.misses, 0);
        assert_eq!(track.age, 2);
        assert_eq!(
            report.sources,
            vec![TrackSource::Matched { track: 0, det: 0 }]
        );
    }

    #[test]
    fn coasting_track_keeps_its_refined_prediction() {
        let mut tracker = default_tracker();
        let d = 2;
        tracker.step(&[], &refined_for(&tracker, d), &dets_with_scores(&[0.9], d));

        let refined = RefinedTracks {
            boxes: vec![unit_box(42.0)],
            scores: vec![0.33],
            embeddings: Tensor::filled(&[1, d], 9.0),
        };
        tracker.step(&[None], &refined, &dets_with_scores(&[], d));
        let track = &tracker.tracks[0];
        assert_eq!(track.last_box, unit_box(42.0));
        assert_eq!(track.score, 0.33);
        assert_eq!(track.embedding.data(), &[9.0, 9.0]);
        assert_eq!(track.misses, 1);
    }

    #[test]
    fn teacher_mode_follows_identities() {
        let mut tracker = default_tracker();
        let d = 2;

        // Frame 1: two identities appear, one clutter detection without id.
        let dets = dets_with_scores(&[0.9, 0.8, 0.7], d);
        let report = tracker.step_teacher(&[Some(10), Some(11), None], &refined_for(&tracker, d), &dets);
        assert_eq!(tracker.num_tracks(), 2);
        assert_eq!(report.estimates.len(), 2);
        assert_eq!(tracker.tracks[0].gt_id, Some(10));
        assert_eq!(tracker.tracks[1].gt_id, Some(11));

        // Frame 2: identity 11 continues, identity 10 disappears and its
        // track must terminate immediately, identity 12 is born.
        let dets = dets_with_scores(&[0.6, 0.5], d);
        let report = tracker.step_teacher(&[Some(12), Some(11)], &refined_for(&tracker, d), &dets);
        assert_eq!(report.terminated, vec![0]);
        assert_eq!(tracker.num_tracks(), 2);
        assert_eq!(
            report.sources,
            vec![
                TrackSource::Matched { track: 1, det: 1 },
                TrackSource::Spawned { det: 0 }
            ]
        );
        assert_eq!(tracker.tracks[1].gt_id, Some(12));
    }

    #[test]
    fn propagation_moves_and_reframes_boxes() {
        let mut tracker = default_tracker();
        let d = 2;
        let dets = Detections {
            boxes: vec![BoxState::new(
                [10.0, 0.0, 0.0],
                [4.0, 2.0, 1.5],
                0.0,
                [1.0, 0.0],
            )],
            scores: vec![0.9],
            embeddings: Tensor::filled(&[1, d], 1.0),
        };
        tracker.step(&[], &refined_for(&tracker, d), &dets);

        let from = EgoPose::identity();
        let to = EgoPose {
            translation: [2.0, 0.0, 0.0],
            yaw: std::f64::consts::FRAC_PI_2,
        };
        tracker.propagate(&from, &to, 2.0);

        let b = tracker.tracks[0].last_box;
        assert!((b.center[0] - 0.0).abs() < 1e-12);
        assert!((b.center[1] + 10.0).abs() < 1e-12);
        assert!((b.velocity[0] - 0.0).abs() < 1e-12);
        assert!((b.velocity[1] + 1.0).abs() < 1e-12);

        let (_, refs) = tracker.decoder_inputs(d);
        assert_eq!(refs.row(0), &[b.center[0], b.center[1], b.center[2]]);
    }

    #[test]
    fn random_steps_partition_tracks_and_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut tracker = default_tracker();
        let mut seen_ids = std::collections::BTreeSet::new();

        for _ in 0..2000 {
            let n_old = tracker.num_tracks();
            let old_ids: Vec<u64> = tracker.tracks.iter().map(|t| t.id).collect();
            let n_d = rng.gen_range(0..=5);

            let affinity = Tensor::uniform(&[n_d, n_old.max(1)], 4.0, &mut rng);
            let matches = if n_old == 0 {
                Vec::new()
            } else {
                associate_scores(&affinity, n_old, 0.3)
            };
            let refined = RefinedTracks {
                boxes: tracker.tracks.iter().map(|t| t.last_box).collect(),
                scores: (0..n_old).map(|_| rng.gen::<f64>()).collect(),
                embeddings: Tensor::uniform(&[n_old, d], 1.0, &mut rng),
            };
            let scores: Vec<f64> = (0..n_d).map(|_| rng.gen::<f64>()).collect();
            let dets = dets_with_scores(&scores, d);

            let report = tracker.step(&matches, &refined, &dets);

            assert_eq!(report.sources.len(), tracker.num_tracks());
            let mut old_seen = vec![false; n_old];
            let mut det_seen = vec![false; n_d];
            for source in &report.sources {
                match *source {
                    TrackSource::Matched { track, det } => {
                        assert!(!old_seen[track] && !det_seen[det]);
                        old_seen[track] = true;
                        det_seen[det] = true;
                    }
                    TrackSource::Coasted { track } => {
                        assert!(!old_seen[track]);
                        old_seen[track] = true;
                    }
                    TrackSource::Spawned { det } => {
                        assert!(!det_seen[det]);
                        det_seen[det] = true;
                    }
                }
            }
            // Every old track either survived or terminated, never both.
            let survived: Vec<u64> = tracker
                .tracks
                .iter()
                .map(|t| t.id)
                .filter(|id| old_ids.contains(id))
                .collect();
            assert_eq!(survived.len() + report.terminated.len(), n_old);
            for id in &report.terminated {
                assert!(old_ids.contains(id) && !survived.contains(id));
            }
            // Ids are never reused.
            for track in &tracker.tracks {
                if !old_ids.contains(&track.id) {
                    assert!(seen_ids.insert(track.id), "id {} reused", track.id);
                }
            }
            let matched = report
                .sources
                .iter()
                .filter(|s| matches!(s, TrackSource::Matched { .. }))
                .count();
            let spawned = report
                .sources
                .iter()
                .filter(|s| matches!(s, TrackSource::Spawned { .. }))
                .count();
            assert_eq!(report.estimates.len(), matched + spawned);
        }
    }

    #[test]
    fn step_stream_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let d = 3;
            let mut tracker = default_tracker();
            for _ in 0..200 {
                let n_old = tracker.num_tracks();
                let n_d = rng.gen_range(0..=4);
                let affinity = Tensor::uniform(&[n_d, n_old.max(1)], 4.0, &mut rng);
                let matches = if n_old == 0 {
                    Vec::new()
                } else {
                    associate_scores(&affinity, n_old, 0.3)
                };
                let refined = RefinedTracks {
                    boxes: tracker.tracks.iter().map(|t| t.last_box).collect(),
                    scores: (0..n_old).map(|_| rng.gen::<f64>()).collect(),
                    embeddings: Tensor::uniform(&[n_old, d], 1.0, &mut rng),
                };
                let scores: Vec<f64> = (0..n_d).map(|_| rng.gen::<f64>()).collect();
                tracker.step(&matches, &refined, &dets_with_scores(&scores, d));
            }
            tracker
        };
        let a = run();
        let b = run();
        assert_eq!(a.num_tracks(), b.num_tracks());
        for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
            assert_eq!(ta.id, tb.id);
            assert_eq!(ta.last_box, tb.last_box);
            assert_eq!(ta.embedding.data(), tb.embedding.data());
            assert_eq!(ta.misses, tb.misses);
        }
    }
}
