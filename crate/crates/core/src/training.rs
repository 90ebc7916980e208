//! Mini-sequence training: target assignment, the focal and cross-entropy
//! losses, and an unrolled forward/backward pass over consecutive frames with
//! teacher-forced track management.
//!
//! The unroll keeps gradients flowing across frame boundaries. A track that
//! enters frame t+1 carries an embedding blended from frame t's refined
//! track and detection embeddings, and a reference point derived from frame
//! t's predicted box (propagated by its predicted velocity and re-expressed
//! in the next vehicle frame). The backward pass walks the frames in reverse
//! and routes those cross-frame gradients into the earlier frame's seeds
//! before invoking its decoder backward.

use crate::config::{LossConfig, ModelConfig, TrackerConfig};
use crate::decoder::{
    apply_param_grads, box_from_row, decode_frame, decode_frame_backward, FrameCache,
    FrameGradSeeds, FrameInputs, FrameOutput, GradMap, LayerOutput,
};
use crate::geometry::{ego_compensate_rotation, wrap_to_pi, BoxState, EgoPose};
use crate::tensor::{sigmoid_scalar, AdamW, ParamStore, Tensor};
use crate::tracker::{min_cost_assignment, Detections, RefinedTracks, TrackSource, Tracker};

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary focal loss of one logit against a hard 0/1 target. Returns the
/// loss and its derivative with respect to the logit.
pub fn focal_term(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid_scalar(logit);
    if target > 0.5 {
        let ln_p = -softplus(-logit);
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * ln_p;
        let grad = alpha * gamma * p * w * ln_p - alpha * w * (1.0 - p);
        (loss, grad)
    } else {
        let ln_q = -softplus(logit);
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * ln_q;
        let grad = -(1.0 - alpha) * gamma * (1.0 - p) * w * ln_q + (1.0 - alpha) * w * p;
        (loss, grad)
    }
}

/// Elementwise focal loss summed over the tensor; the gradient has the same
/// shape as `logits`.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> (f64, Tensor) {
    assert_eq!(logits.shape(), targets.shape(), "focal loss shape mismatch");
    let mut grad = Tensor::zeros(logits.shape());
    let mut sum = 0.0;
    let gd = grad.data_mut();
    for (i, (&x, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        let (l, g) = focal_term(x, y, alpha, gamma);
        sum += l;
        gd[i] = g;
    }
    (sum, grad)
}

/// Matching cost of treating this logit as a positive rather than a
/// negative: focal(pos) - focal(neg). Confident detections become cheap.
pub fn focal_match_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    let (pos, _) = focal_term(logit, 1.0, alpha, gamma);
    let (neg, _) = focal_term(logit, 0.0, alpha, gamma);
    pos - neg
}

/// Cross-entropy between an attention matrix (rows already normalized to
/// probabilities) and a 0/1 target matrix: -sum y * ln a. Rows with an
/// all-zero target contribute nothing. Returns the exact sum and the
/// gradient with respect to the attention entries.
pub fn ce_attention_loss(attention: &Tensor, targets: &Tensor) -> (f64, Tensor) {
    assert_eq!(attention.shape(), targets.shape(), "CE shape mismatch");
    let mut grad = Tensor::zeros(attention.shape());
    let gd = grad.data_mut();
    let mut sum = 0.0;
    for (i, (&a, &y)) in attention.data().iter().zip(targets.data()).enumerate() {
        if y == 0.0 {
            continue;
        }
        let a = a.max(1e-12);
        sum -= y * a.ln();
        gd[i] = -y / a;
    }
    (sum, grad)
}

/// Ground truth for one frame, in the current vehicle coordinates. `visible`
/// marks the objects that produced an observation this frame; a fully
/// occluded object stays in the frame, but only its track query is
/// supervised on it.
#[derive(Debug, Clone, Default)]
pub struct GtFrame {
    pub boxes: Vec<BoxState>,
    pub ids: Vec<u64>,
    pub visible: Vec<bool>,
}

/// Query-to-ground-truth targets for one frame. Track queries claim the box
/// carrying their identity, visible or not, so coasting through occlusion is
/// supervised. Detection queries are matched against the visible boxes by a
/// minimum-cost assignment, so a tracked object is still a detection target
/// (the association loss is what links the two), but an object with no
/// observation behind it never recruits a detection.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub track_to_gt: Vec<Option<usize>>,
    pub det_to_gt: Vec<Option<usize>>,
}

pub fn assign_targets(
    layer: &LayerOutput,
    n_tracks: usize,
    track_ids: &[Option<u64>],
    gt: &GtFrame,
    loss: &LossConfig,
) -> Assignment {
    assert_eq!(gt.boxes.len(), gt.ids.len(), "one id per ground-truth box");
    assert_eq!(
        gt.visible.len(),
        gt.ids.len(),
        "one visibility flag per ground-truth box"
    );
    assert_eq!(track_ids.len(), n_tracks);
    let n_rows = layer.boxes.rows();
    let n_d = n_rows - n_tracks;
    let n_g = gt.boxes.len();
    let visible: Vec<usize> = (0..n_g).filter(|&g| gt.visible[g]).collect();
    assert!(
        visible.len() <= n_d,
        "{} visible ground-truth boxes exceed the {n_d} detection slots",
        visible.len()
    );

    let track_to_gt = track_ids
        .iter()
        .map(|tid| tid.and_then(|id| gt.ids.iter().position(|g| *g == id)))
        .collect();

    let mut det_to_gt = vec![None; n_d];
    if !visible.is_empty() {
        let mut cost = Tensor::zeros(&[visible.len(), n_d]);
        for d_i in 0..n_d {
            let row = n_tracks + d_i;
            let b = box_from_row(&layer.boxes, row);
            let cls = focal_match_cost(
                layer.score_logits.at2(row, 0),
                loss.focal_alpha_cls,
                loss.focal_gamma_cls,
            );
            for (v, &g) in visible.iter().enumerate() {
                let l1: f64 = crate::geometry::box_abs_diff(&b, &gt.boxes[g]).iter().sum();
                cost.set2(v, d_i, loss.lambda_cls * cls + loss.lambda_reg * l1);
            }
        }
        for (v, d_i) in min_cost_assignment(&cost) {
            det_to_gt[d_i] = Some(visible[v]);
        }
    }
    Assignment {
        track_to_gt,
        det_to_gt,
    }
}

/// Builds the 0/1 association target matrix `[n_dets, n_tracks (+1)]`. A
/// detection matched to a tracked identity marks that track's column; one
/// matched to an untracked (newborn) identity marks the trailing auxiliary
/// column when present, and is otherwise all zero.
pub fn association_targets(
    det_to_gt: &[Option<usize>],
    track_ids: &[Option<u64>],
    gt_ids: &[u64],
    aux_column: bool,
) -> Tensor {
    let n_d = det_to_gt.len();
    let n_t = track_ids.len();
    let n_k = n_t + aux_column as usize;
    let mut y = Tensor::zeros(&[n_d, n_k]);
    for (d, slot) in det_to_gt.iter().enumerate() {
        let Some(g) = slot else { continue };
        let id = gt_ids[*g];
        match track_ids.iter().position(|t| *t == Some(id)) {
            Some(t) => y.set2(d, t, 1.0),
            None if aux_column => y.set2(d, n_t, 1.0),
            None => {}
        }
    }
    y
}

/// Normalized loss components accumulated over layers and frames. `total`
/// applies the configured weights:
/// lambda_cls * cls + lambda_reg * reg + lambda_asso * (asso + lambda_ce * ce).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub asso: f64,
    pub ce: f64,
}

fn add_scaled(acc: &mut Tensor, g: &Tensor, s: f64) {
    assert_eq!(acc.shape(), g.shape());
    for (ai, gi) in acc.data_mut().iter_mut().zip(g.data()) {
        *ai += s * gi;
    }
}

fn add_row(t: &mut Tensor, row: usize, src: &[f64], scale: f64) {
    for (c, &v) in src.iter().enumerate() {
        let cur = t.at2(row, c);
        t.set2(row, c, cur + scale * v);
    }
}

fn bump(t: &mut Tensor, r: usize, c: usize, v: f64) {
    let cur = t.at2(r, c);
    t.set2(r, c, cur + v);
}

fn abs_sign(delta: f64) -> f64 {
    if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Computes every loss for one decoded frame, accumulating normalized values
/// into `agg` and weighted gradients into `seeds`. The final layer's target
/// assignment is reused for every layer. Returns that assignment so the
/// caller can derive teacher identities for the tracker step.
fn frame_losses(
    out: &FrameOutput,
    n_tracks: usize,
    track_ids: &[Option<u64>],
    gt: &GtFrame,
    loss: &LossConfig,
    seeds: &mut FrameGradSeeds,
    agg: &mut LossBreakdown,
) -> Assignment {
    let final_layer = out.layers.last().expect("decoder emits at least one layer");
    let assignment = assign_targets(final_layer, n_tracks, track_ids, gt, loss);
    let n_rows = final_layer.boxes.rows();
    let n_d = n_rows - n_tracks;

    let mut row_gt: Vec<Option<usize>> = Vec::with_capacity(n_rows);
    row_gt.extend(assignment.track_to_gt.iter().copied());
    row_gt.extend(assignment.det_to_gt.iter().copied());
    let denom_m = row_gt.iter().filter(|o| o.is_some()).count().max(1) as f64;

    let mut targets = Tensor::zeros(&[n_rows, 1]);
    for (r, o) in row_gt.iter().enumerate() {
        if o.is_some() {
            targets.set2(r, 0, 1.0);
        }
    }

    let y = final_layer.affinity.as_ref().map(|aff| {
        let aux = aff.cols() == n_tracks + 1;
        association_targets(&assignment.det_to_gt, track_ids, &gt.ids, aux)
    });
    let denom_p = y
        .as_ref()
        .map(|y| y.data().iter().sum::<f64>().max(1.0))
        .unwrap_or(1.0);

    for (l, layer) in out.layers.iter().enumerate() {
        let seed = &mut seeds.layers[l];

        let (cls_sum, cls_grad) = focal_loss(
            &layer.score_logits,
            &targets,
            loss.focal_alpha_cls,
            loss.focal_gamma_cls,
        );
        agg.cls += cls_sum / denom_m;
        add_scaled(&mut seed.d_score_logits, &cls_grad, loss.lambda_cls / denom_m);

        let mut reg_sum = 0.0;
        for (r, o) in row_gt.iter().enumerate() {
            let Some(g) = o else { continue };
            let gt9 = gt.boxes[*g].to_vec9();
            for k in 0..9 {
                let pred = layer.boxes.at2(r, k);
                let delta = if k == 6 {
                    wrap_to_pi(pred - gt9[6])
                } else {
                    pred - gt9[k]
                };
                reg_sum += delta.abs();
                bump(
                    &mut seed.d_boxes,
                    r,
                    k,
                    loss.lambda_reg * abs_sign(delta) / denom_m,
                );
            }
        }
        agg.reg += reg_sum / denom_m;

        if let (Some(aff), Some(y)) = (layer.affinity.as_ref(), y.as_ref()) {
            let (fl_sum, fl_grad) =
                focal_loss(aff, y, loss.focal_alpha_asso, loss.focal_gamma_asso);
            agg.asso += fl_sum / denom_p;
            add_scaled(
                seed.d_affinity.as_mut().expect("affinity seed present"),
                &fl_grad,
                loss.lambda_asso / denom_p,
            );

            let att = layer.attention.as_ref().expect("attention accompanies affinity");
            let (ce_sum, ce_grad) = ce_attention_loss(att, y);
            agg.ce += ce_sum / n_d as f64;
            add_scaled(
                seed.d_attention.as_mut().expect("attention seed present"),
                &ce_grad,
                loss.lambda_asso * loss.lambda_ce / n_d as f64,
            );
        }
    }
    assignment
}

/// One frame of a training sequence. Observations and ground truth live in
/// that frame's vehicle coordinates; `ego` places the vehicle in the world
/// so consecutive frames can be related.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub obs_emb: Tensor,
    pub obs_pos: Tensor,
    pub gt: GtFrame,
    pub ego: EgoPose,
    pub time: f64,
}

struct FrameRecord {
    cache: FrameCache,
    seeds: FrameGradSeeds,
    n_tracks: usize,
}

struct Link {
    sources: Vec<TrackSource>,
    rot: [[f64; 2]; 2],
    dt: f64,
}

/// Full differentiable loss of one mini-sequence: unrolls the decoder over
/// the frames with teacher-forced association, then backpropagates through
/// the whole chain. Returns the loss breakdown and the parameter gradients.
pub fn sequence_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    loss: &LossConfig,
    track_update_weight: f64,
    frames: &[TrainFrame],
) -> (LossBreakdown, GradMap) {
    assert!(!frames.is_empty(), "empty training sequence");
    let d = cfg.d_k;
    let mut tracker = Tracker::new(TrackerConfig {
        tau_score: 0.0,
        tau_new: 0.0,
        patience: 0,
        track_update_weight,
    });
    let mut agg = LossBreakdown::default();
    let mut records: Vec<FrameRecord> = Vec::new();
    let mut links: Vec<Link> = Vec::new();
    let mut aux_carry: Option<Tensor> = None;

    for (t, frame) in frames.iter().enumerate() {
        let n_tracks = tracker.num_tracks();
        let (track_emb, track_refs) = tracker.decoder_inputs(d);
        let track_ids: Vec<Option<u64>> = tracker.tracks.iter().map(|tr| tr.gt_id).collect();
        let inputs = FrameInputs {
            track_emb,
            track_refs,
            aux_emb: aux_carry.clone(),
            obs_emb: frame.obs_emb.clone(),
            obs_pos: frame.obs_pos.clone(),
        };
        let (out, cache) = decode_frame(store, cfg, &inputs);
        let mut seeds = FrameGradSeeds::zeros_like(&out);
        let assignment = frame_losses(
            &out,
            n_tracks,
            &track_ids,
            &frame.gt,
            loss,
            &mut seeds,
            &mut agg,
        );

        if t + 1 < frames.len() {
            let final_layer = out.layers.last().unwrap();
            let n_d = final_layer.boxes.rows() - n_tracks;
            let refined = RefinedTracks {
                boxes: (0..n_tracks)
                    .map(|i| box_from_row(&final_layer.boxes, i))
                    .collect(),
                scores: (0..n_tracks)
                    .map(|i| sigmoid_scalar(final_layer.score_logits.at2(i, 0)))
                    .collect(),
                embeddings: out.track_emb.clone(),
            };
            let dets = Detections {
                boxes: (0..n_d)
                    .map(|i| box_from_row(&final_layer.boxes, n_tracks + i))
                    .collect(),
                scores: (0..n_d)
                    .map(|i| sigmoid_scalar(final_layer.score_logits.at2(n_tracks + i, 0)))
                    .collect(),
                embeddings: out.det_emb.clone(),
            };
            let det_gt_ids: Vec<Option<u64>> = assignment
                .det_to_gt
                .iter()
                .map(|o| o.map(|g| frame.gt.ids[g]))
                .collect();
            let report = tracker.step_teacher(&det_gt_ids, &refined, &dets);

            let next = &frames[t + 1];
            let dt = next.time - frame.time;
            assert!(dt >= 0.0, "frames must be time-ordered");
            tracker.propagate(&frame.ego, &next.ego, dt);
            links.push(Link {
                sources: report.sources,
                rot: ego_compensate_rotation(&frame.ego, &next.ego),
                dt,
            });
            if cfg.aux_token && cfg.aux_propagate {
                aux_carry = out.aux_emb.clone();
            }
        }
        records.push(FrameRecord {
            cache,
            seeds,
            n_tracks,
        });
    }

    let mut grads = GradMap::new();
    for t in (0..frames.len()).rev() {
        let (head, tail) = records.split_at_mut(t);
        let rec = &tail[0];
        let fb = decode_frame_backward(&rec.seeds, &rec.cache, store, cfg);
        for (name, g) in fb.param_grads {
            match grads.get_mut(&name) {
                Some(acc) => *acc = acc.add(&g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
        if t == 0 {
            continue;
        }
        let prev = &mut head[t - 1];
        let link = &links[t - 1];
        let w = track_update_weight;
        for (j, src) in link.sources.iter().enumerate() {
            let g_emb = fb.d_track_emb.row(j);
            let g_ref = fb.d_track_refs.row(j);
            // Chain rule through the reference propagation: the planar part
            // of the next refpoint is rot * (center + velocity * dt) plus a
            // constant, so gradients come back through rot transposed.
            let gx = link.rot[0][0] * g_ref[0] + link.rot[1][0] * g_ref[1];
            let gy = link.rot[0][1] * g_ref[0] + link.rot[1][1] * g_ref[1];
            let gz = g_ref[2];
            let det = match *src {
                TrackSource::Matched { track, det } => {
                    add_row(&mut prev.seeds.d_track_emb, track, g_emb, w);
                    add_row(&mut prev.seeds.d_det_emb, det, g_emb, 1.0 - w);
                    det
                }
                TrackSource::Spawned { det } => {
                    add_row(&mut prev.seeds.d_det_emb, det, g_emb, 1.0);
                    det
                }
                TrackSource::Coasted { .. } => unreachable!("teacher mode never coasts"),
            };
            let row = prev.n_tracks + det;
            let d_boxes = &mut prev.seeds.layers.last_mut().unwrap().d_boxes;
            bump(d_boxes, row, 0, gx);
            bump(d_boxes, row, 1, gy);
            bump(d_boxes, row, 2, gz);
            bump(d_boxes, row, 7, link.dt * gx);
            bump(d_boxes, row, 8, link.dt * gy);
        }
        if let Some(d_aux) = fb.d_aux_emb {
            let acc = prev
                .seeds
                .d_aux_emb
                .as_mut()
                .expect("carried aux gradient needs an aux seed");
            *acc = acc.add(&d_aux);
        }
    }

    agg.total = loss.lambda_cls * agg.cls
        + loss.lambda_reg * agg.reg
        + loss.lambda_asso * (agg.asso + loss.lambda_ce * agg.ce);
    (agg, grads)
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// One optimizer step on one mini-sequence. `grad_clip` caps the global
/// gradient norm before the update (0 disables); the reported norm is the
/// unclipped one.
pub fn train_step(
    store: &mut ParamStore,
    opt: &AdamW,
    cfg: &ModelConfig,
    loss: &LossConfig,
    track_update_weight: f64,
    grad_clip: f64,
    frames: &[TrainFrame],
) -> crate::Result<StepStats> {
    let (breakdown, mut grads) = sequence_loss(store, cfg, loss, track_update_weight, frames);
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if grad_clip > 0.0 && norm > grad_clip {
        let s = grad_clip / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    store.zero_grads();
    apply_param_grads(store, &grads);
    store.adamw_step(opt)?;
    Ok(StepStats {
        loss: breakdown,
        grad_norm: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(aux: bool) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.d_k = 4;
        cfg.layers = 2;
        cfg.det_queries = 4;
        cfg.aux_token = aux;
        cfg.ref_init_scale = 5.0;
        cfg.seed = 3;
        cfg
    }

    fn gt_box(x: f64, y: f64, yaw: f64) -> BoxState {
        BoxState::new([x, y, 0.5], [4.0, 2.0, 1.6], yaw, [1.0, 0.0])
    }

    fn obs_for(gt: &GtFrame, d: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let n = gt.boxes.len();
        let emb = Tensor::uniform(&[n, d], 1.0, rng);
        let mut pos = Tensor::zeros(&[n, 3]);
        for (i, b) in gt.boxes.iter().enumerate() {
            for k in 0..3 {
                pos.set2(i, k, b.center[k] + 0.05 * rng.gen::<f64>());
            }
        }
        (emb, pos)
    }

    /// Two frames: identities 1 and 2 appear first; then 2 vanishes and 3 is
    /// born, so the second frame exercises positive, newborn, and vanished
    /// association cases at once.
    fn two_frames(d: usize) -> Vec<TrainFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g0 = GtFrame {
            boxes: vec![gt_box(5.0, 2.0, 0.3), gt_box(-4.0, 6.0, -1.2)],
            ids: vec![1, 2],
            visible: vec![true, true],
        };
        let g1 = GtFrame {
            boxes: vec![gt_box(5.5, 2.0, 0.35), gt_box(2.0, -5.0, 2.0)],
            ids: vec![1, 3],
            visible: vec![true, true],
        };
        let (e0, p0) = obs_for(&g0, d, &mut rng);
        let (e1, p1) = obs_for(&g1, d, &mut rng);
        vec![
            TrainFrame {
                obs_emb: e0,
                obs_pos: p0,
                gt: g0,
                ego: EgoPose::identity(),
                time: 0.0,
            },
            TrainFrame {
                obs_emb: e1,
                obs_pos: p1,
                gt: g1,
                ego: EgoPose {
                    translation: [0.5, 0.1, 0.0],
                    yaw: 0.05,
                },
                time: 0.5,
            },
        ]
    }

    fn copy_store(store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            out.insert(&name, store.get(&name).clone());
        }
        out
    }

    #[test]
    fn focal_loss_matches_hand_values() {
        let (l, _) = focal_term(0.0, 1.0, 0.5, 1.0);
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);

        // gamma = 0 reduces to an alpha-weighted cross entropy.
        for x in [-2.0, -0.3, 0.0, 1.7] {
            let (lp, _) = focal_term(x, 1.0, 0.5, 0.0);
            assert!((lp - 0.5 * softplus(-x)).abs() < 1e-12);
            let (ln_, _) = focal_term(x, 0.0, 0.5, 0.0);
            assert!((ln_ - 0.5 * softplus(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..200 {
            let x = 8.0 * (rng.gen::<f64>() - 0.5);
            let y = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            let alpha = if rng.gen::<bool>() { 0.25 } else { 0.5 };
            let gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
            let (_, g) = focal_term(x, y, alpha, gamma);
            let fd = (focal_term(x + h, y, alpha, gamma).0
                - focal_term(x - h, y, alpha, gamma).0)
                / (2.0 * h);
            assert!(
                (g - fd).abs() < 1e-5 * g.abs().max(1.0),
                "x={x} y={y} alpha={alpha} gamma={gamma}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn attention_cross_entropy_is_log4_for_uniform_rows() {
        let a = Tensor::filled(&[2, 4], 0.25);
        let mut y = Tensor::zeros(&[2, 4]);
        y.set2(0, 1, 1.0);
        y.set2(1, 3, 1.0);
        let (l, g) = ce_attention_loss(&a, &y);
        assert!((l - 2.0 * 4.0f64.ln()).abs() < 1e-12);
        assert!((g.at2(0, 1) + 4.0).abs() < 1e-12);
        assert_eq!(g.at2(0, 0), 0.0);
        assert_eq!(g.at2(1, 0), 0.0);
    }

    #[test]
    fn assignment_prefers_nearby_detections() {
        // One track row plus three detection rows with centers at known spots.
        let centers = [[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [5.0, 5.0]];
        let mut boxes = Tensor::zeros(&[4, 9]);
        for (r, c) in centers.iter().enumerate() {
            boxes.set2(r, 0, c[0]);
            boxes.set2(r, 1, c[1]);
            for k in 3..6 {
                boxes.set2(r, k, 1.0);
            }
        }
        let layer = LayerOutput {
            boxes,
            score_logits: Tensor::zeros(&[4, 1]),
            affinity: None,
            attention: None,
        };
        let gt = GtFrame {
            boxes: vec![
                BoxState::new([10.1, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0]),
                BoxState::new([0.2, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0]),
            ],
            ids: vec![7, 3],
            visible: vec![true, true],
        };
        let a = assign_targets(&layer, 1, &[Some(7)], &gt, &LossConfig::default());
        assert_eq!(a.track_to_gt, vec![Some(0)]);
        assert_eq!(a.det_to_gt, vec![Some(1), Some(0), None]);

        let y = association_targets(&a.det_to_gt, &[Some(7)], &gt.ids, true);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.at2(0, 1), 1.0, "newborn identity marks the aux column");
        assert_eq!(y.at2(1, 0), 1.0, "tracked identity marks its track");
        assert_eq!(y.row(2), &[0.0, 0.0], "unmatched detection has no target");

        let y = association_targets(&a.det_to_gt, &[Some(7)], &gt.ids, false);
        assert_eq!(y.shape(), &[3, 1]);
        assert_eq!(y.row(0), &[0.0], "no aux column to absorb newborns");
    }

    #[test]
    fn tracks_claim_the_boxes_with_their_identity() {
        let layer = LayerOutput {
            boxes: Tensor::filled(&[5, 9], 1.0),
            score_logits: Tensor::zeros(&[5, 1]),
            affinity: None,
            attention: None,
        };
        let gt = GtFrame {
            boxes: vec![gt_box(0.0, 0.0, 0.0), gt_box(4.0, 0.0, 0.0)],
            ids: vec![9, 5],
            visible: vec![true, true],
        };
        let a = assign_targets(
            &layer,
            3,
            &[Some(5), None, Some(9)],
            &gt,
            &LossConfig::default(),
        );
        assert_eq!(a.track_to_gt, vec![Some(1), None, Some(0)]);
    }

    #[test]
    fn occluded_boxes_never_recruit_a_detection() {
        // Two detection queries sit exactly on the two boxes, so without the
        // visibility filter both would be claimed.
        let mut boxes = Tensor::zeros(&[3, 9]);
        for (row, x) in [(1, 0.0), (2, 4.0)] {
            let b = gt_box(x, 0.0, 0.0);
            boxes.set2(row, 0, b.center[0]);
            boxes.set2(row, 1, b.center[1]);
            boxes.set2(row, 2, b.center[2]);
            for k in 0..3 {
                boxes.set2(row, 3 + k, b.size[k]);
            }
            boxes.set2(row, 7, b.velocity[0]);
            boxes.set2(row, 8, b.velocity[1]);
        }
        let layer = LayerOutput {
            boxes,
            score_logits: Tensor::zeros(&[3, 1]),
            affinity: None,
            attention: None,
        };
        let gt = GtFrame {
            boxes: vec![gt_box(0.0, 0.0, 0.0), gt_box(4.0, 0.0, 0.0)],
            ids: vec![9, 5],
            visible: vec![true, false],
        };
        let a = assign_targets(&layer, 1, &[Some(5)], &gt, &LossConfig::default());
        assert_eq!(a.track_to_gt, vec![Some(1)], "occlusion keeps the identity claim");
        assert!(
            !a.det_to_gt.contains(&Some(1)),
            "no detection target for an unobserved box"
        );
        assert_eq!(a.det_to_gt.iter().filter(|g| g.is_some()).count(), 1);
        assert!(a.det_to_gt.contains(&Some(0)));
    }

    #[test]
    fn one_frame_sequence_has_no_association_loss() {
        let cfg = small_cfg(true);
        let store = init_params(&cfg);
        let frames = &two_frames(cfg.d_k)[..1];
        let (agg, grads) = sequence_loss(&store, &cfg, &LossConfig::default(), 0.0, frames);
        assert!(agg.cls > 0.0);
        assert!(agg.reg > 0.0);
        assert_eq!(agg.asso, 0.0);
        assert_eq!(agg.ce, 0.0);
        assert!(
            !grads.keys().any(|k| k.contains(".edge.")),
            "association parameters must stay untouched without tracks"
        );
    }

    #[test]
    fn two_frame_sequence_exercises_association() {
        for aux in [false, true] {
            let cfg = small_cfg(aux);
            let store = init_params(&cfg);
            let frames = two_frames(cfg.d_k);
            let (agg, grads) = sequence_loss(&store, &cfg, &LossConfig::default(), 0.0, &frames);
            assert!(agg.asso > 0.0);
            assert!(agg.ce > 0.0);
            assert!(grads.keys().any(|k| k.contains(".edge.")));
            assert_eq!(aux, grads.contains_key("aux.token"));
        }
    }

    #[test]
    fn sequence_loss_is_bitwise_deterministic() {
        let cfg = small_cfg(true);
        let store = init_params(&cfg);
        let frames = two_frames(cfg.d_k);
        let loss = LossConfig::default();
        let (a, ga) = sequence_loss(&store, &cfg, &loss, 0.25, &frames);
        let (b, gb) = sequence_loss(&store, &cfg, &loss, 0.25, &frames);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(ga.len(), gb.len());
        for (name, g) in &ga {
            let other = &gb[name];
            for (x, y) in g.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        for aux in [false, true] {
            let cfg = small_cfg(aux);
            let store = init_params(&cfg);
            let loss = LossConfig::default();
            let frames = two_frames(cfg.d_k);
            let w = 0.25;
            let (_, grads) = sequence_loss(&store, &cfg, &loss, w, &frames);
            let h = 1e-5;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut checked = 0;
            for (name, g) in &grads {
                for _ in 0..2 {
                    let idx = rng.gen_range(0..g.len());
                    let eval = |delta: f64| {
                        let mut s = copy_store(&store);
                        let mut t = store.get(name).clone();
                        t.data_mut()[idx] += delta;
                        s.set_value(name, t);
                        sequence_loss(&s, &cfg, &loss, w, &frames).0.total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = g.data()[idx];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 2e-4,
                        "aux={aux} {name}[{idx}]: fd {fd} vs analytic {an}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 30, "expected to probe many parameters");
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let cfg = small_cfg(true);
        let mut store = init_params(&cfg);
        let loss = LossConfig::default();

        // A static three-frame scene so the optimizer has a stable target.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = GtFrame {
            boxes: vec![gt_box(4.0, 1.0, 0.2), gt_box(-3.0, -2.0, 1.0)],
            ids: vec![1, 2],
            visible: vec![true, true],
        };
        let frames: Vec<TrainFrame> = (0..3)
            .map(|t| {
                let (e, p) = obs_for(&gt, cfg.d_k, &mut rng);
                TrainFrame {
                    obs_emb: e,
                    obs_pos: p,
                    gt: gt.clone(),
                    ego: EgoPose::identity(),
                    time: t as f64 * 0.5,
                }
            })
            .collect();

        let opt = AdamW {
            lr: 1e-2,
            ..AdamW::default()
        };
        let first = train_step(&mut store, &opt, &cfg, &loss, 0.0, 0.0, &frames).unwrap();
        let mut last = first;
        for _ in 0..59 {
            last = train_step(&mut store, &opt, &cfg, &loss, 0.0, 0.0, &frames).unwrap();
        }
        assert!(
            last.loss.total < 0.6 * first.loss.total,
            "loss {} -> {}",
            first.loss.total,
            last.loss.total
        );
        assert!(last.grad_norm.is_finite());
        assert_eq!(store.step_count(), 60);
    }
}
