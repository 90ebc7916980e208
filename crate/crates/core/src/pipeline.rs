//! End-to-end command implementations: scenario generation, training,
//! tracking, evaluation, and the gradient audit. The CLI binary is a thin
//! argument parser over these functions, and the heavier integration tests
//! call them directly.

use crate::config::RunConfig;
use crate::decoder::{
    box_from_row, decode_frame, obs_attention_backward, obs_attention_forward,
    self_attention_backward, self_attention_forward, self_attn_mask, FrameInputs,
};
use crate::formats::{self, LogEntry, ScenarioStats, TrackRecord};
use crate::metrics::{evaluate, EvalReport, MotBox};
use crate::model::init_params;
use crate::simworld::{generate, train_frames, ObsEncoder, Scenario};
use crate::tensor::{
    grad_check, grad_check_sampled, linear_backward, linear_forward, mlp_backward, mlp_forward,
    softmax_backward, softmax_rows, AdamW, ParamStore, Tensor,
};
use crate::tracker::{associate_scores, Detections, RefinedTracks, TrackSource, Tracker};
use crate::training::{
    ce_attention_loss, focal_loss, sequence_loss, train_step, GtFrame, TrainFrame,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

fn manifest_path(artifact: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", artifact.display()))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Generates a scenario, writes it plus its manifest, and returns counts
/// recounted from the written text.
pub fn run_simulate(cfg: &RunConfig, out: &Path) -> Result<ScenarioStats> {
    cfg.validate()?;
    let scenario = generate(&cfg.sim);
    let encoder = ObsEncoder::new(cfg.model.d_k, cfg.sim.arena);
    let text = formats::scenario_to_string(cfg, &scenario, &encoder);
    std::fs::write(out, &text)?;
    let manifest = formats::manifest_to_string("simulate", cfg, &[("scenario", &file_name(out))]);
    std::fs::write(manifest_path(out), manifest)?;
    Ok(formats::parse_scenario(&text)?.stats())
}

/// The seeded scenario pool used for training: `train.scenarios` worlds with
/// consecutive seeds, already encoded into decoder-ready frames.
pub fn training_pool(cfg: &RunConfig) -> Vec<Vec<TrainFrame>> {
    let encoder = ObsEncoder::new(cfg.model.d_k, cfg.sim.arena);
    (0..cfg.train.scenarios.max(1))
        .map(|i| {
            let mut sim = cfg.sim.clone();
            sim.seed = cfg.sim.seed.wrapping_add(i as u64);
            train_frames(&generate(&sim), &encoder)
        })
        .collect()
}

/// Trains a fresh model in memory and returns it with its log entries.
pub fn train_model(cfg: &RunConfig) -> Result<(ParamStore, Vec<LogEntry>)> {
    cfg.validate()?;
    let pool = training_pool(cfg);
    let mut store = init_params(&cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let seq = cfg.train.seq_len;
    let every = cfg.train.log_every.max(1);
    let mut entries = Vec::new();
    for step in 1..=cfg.train.steps {
        let frames = &pool[rng.gen_range(0..pool.len())];
        let hi = frames.len().saturating_sub(seq);
        let start = if hi == 0 { 0 } else { rng.gen_range(0..=hi) };
        let window = &frames[start..frames.len().min(start + seq)];
        let lr = if cfg.train.cosine_decay {
            let phase = (step - 1) as f64 / cfg.train.steps as f64;
            cfg.train.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        } else {
            cfg.train.lr
        };
        let opt = AdamW {
            lr,
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            weight_decay: cfg.train.weight_decay,
            ..AdamW::default()
        };
        let stats = train_step(
            &mut store,
            &opt,
            &cfg.model,
            &cfg.loss,
            cfg.tracker.track_update_weight,
            cfg.train.grad_clip,
            window,
        )?;
        if !stats.loss.total.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became non-finite at step {step}"
            )));
        }
        if step == 1 || step % every == 0 || step == cfg.train.steps {
            entries.push(LogEntry {
                step,
                total: stats.loss.total,
                cls: stats.loss.cls,
                reg: stats.loss.reg,
                asso: stats.loss.asso,
                ce: stats.loss.ce,
                grad_norm: stats.grad_norm,
            });
        }
    }
    Ok((store, entries))
}

/// Trains and writes checkpoint, training log, and manifest.
pub fn run_train(cfg: &RunConfig, checkpoint: &Path, log: &Path) -> Result<Vec<LogEntry>> {
    let (store, entries) = train_model(cfg)?;
    store.write_checkpoint(checkpoint, &cfg.to_text())?;
    std::fs::write(log, formats::training_log_to_string(cfg, &entries))?;
    let manifest = formats::manifest_to_string(
        "train",
        cfg,
        &[
            ("checkpoint", &file_name(checkpoint)),
            ("training-log", &file_name(log)),
        ],
    );
    std::fs::write(manifest_path(checkpoint), manifest)?;
    Ok(entries)
}

/// Counts from one inference run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackRunStats {
    pub matched: usize,
    pub spawned: usize,
    pub coasted: usize,
    pub terminated: usize,
}

/// Runs the tracker over a frame sequence with a trained model.
pub fn track_scenario(
    store: &ParamStore,
    cfg: &RunConfig,
    frames: &[TrainFrame],
) -> (Vec<TrackRecord>, TrackRunStats) {
    let d = cfg.model.d_k;
    let n_d = cfg.model.det_queries;
    let mut tracker = Tracker::new(cfg.tracker);
    let mut records = Vec::new();
    let mut stats = TrackRunStats::default();
    let mut aux_carry: Option<Tensor> = None;
    for (t, frame) in frames.iter().enumerate() {
        let (track_emb, track_refs) = tracker.decoder_inputs(d);
        let inputs = FrameInputs {
            track_emb,
            track_refs,
            aux_emb: aux_carry.take(),
            obs_emb: frame.obs_emb.clone(),
            obs_pos: frame.obs_pos.clone(),
        };
        let (out, _) = decode_frame(store, &cfg.model, &inputs);
        let final_layer = out.layers.last().expect("decoder always has layers");
        let n_t = tracker.num_tracks();
        let refined = RefinedTracks {
            boxes: (0..n_t).map(|i| box_from_row(&final_layer.boxes, i)).collect(),
            scores: (0..n_t)
                .map(|i| crate::tensor::sigmoid_scalar(final_layer.score_logits.at2(i, 0)))
                .collect(),
            embeddings: out.track_emb.clone(),
        };
        let dets = Detections {
            boxes: (0..n_d)
                .map(|i| box_from_row(&final_layer.boxes, n_t + i))
                .collect(),
            scores: (0..n_d)
                .map(|i| crate::tensor::sigmoid_scalar(final_layer.score_logits.at2(n_t + i, 0)))
                .collect(),
            embeddings: out.det_emb.clone(),
        };
        let matches = match &final_layer.affinity {
            Some(aff) => associate_scores(aff, n_t, cfg.tracker.tau_score),
            None => vec![None; n_t],
        };
        let report = tracker.step(&matches, &refined, &dets);
        for s in &report.sources {
            match s {
                TrackSource::Matched { .. } => stats.matched += 1,
                TrackSource::Coasted { .. } => stats.coasted += 1,
                TrackSource::Spawned { .. } => stats.spawned += 1,
            }
        }
        stats.terminated += report.terminated.len();
        for est in report.estimates {
            records.push(TrackRecord {
                frame: t,
                id: est.id,
                box_state: est.box_state,
                score: est.score,
            });
        }
        if t + 1 < frames.len() {
            let dt = frames[t + 1].time - frame.time;
            tracker.propagate(&frame.ego, &frames[t + 1].ego, dt);
        }
        if cfg.model.aux_token && cfg.model.aux_propagate {
            aux_carry = out.aux_emb;
        }
    }
    (records, stats)
}

/// Loads a checkpoint and a scenario file, runs the tracker, and writes the
/// results file plus its manifest. `overrides` are `section.key=value`
/// adjustments (typically tracker thresholds) applied on top of the
/// checkpoint's config.
pub fn run_track(
    checkpoint: &Path,
    scenario: &Path,
    out: &Path,
    overrides: &[String],
) -> Result<TrackRunStats> {
    let (store, config_text) = ParamStore::read_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::from_text(&config_text)?;
    let scn = formats::parse_scenario(&std::fs::read_to_string(scenario)?)?;
    if scn.config.model.d_k != cfg.model.d_k {
        return Err(Error::Config(format!(
            "scenario tokens are {}-dimensional but the checkpoint model wants {}",
            scn.config.model.d_k, cfg.model.d_k
        )));
    }
    cfg.sim = scn.config.sim.clone();
    for spec in overrides {
        cfg.apply_override(spec)?;
    }
    cfg.validate()?;
    let (records, stats) = track_scenario(&store, &cfg, &scn.train_frames());
    std::fs::write(out, formats::results_to_string(&cfg, &records))?;
    let manifest = formats::manifest_to_string("track", &cfg, &[("results", &file_name(out))]);
    std::fs::write(manifest_path(out), manifest)?;
    Ok(stats)
}

/// Evaluates a results file against its scenario and writes the report.
pub fn run_eval(results: &Path, scenario: &Path, out: &Path) -> Result<EvalReport> {
    let res = formats::parse_results(&std::fs::read_to_string(results)?)?;
    let scn = formats::parse_scenario(&std::fs::read_to_string(scenario)?)?;
    if res.config.sim.frames != scn.config.sim.frames {
        return Err(Error::Config(format!(
            "results cover {} frames but the scenario has {}",
            res.config.sim.frames, scn.config.sim.frames
        )));
    }
    let report = evaluate(&res.mot_frames(), &scn.gt_mot(), &res.config.eval);
    std::fs::write(out, formats::report_to_string(&res.config, &report))?;
    let manifest = formats::manifest_to_string("eval", &res.config, &[("report", &file_name(out))]);
    std::fs::write(manifest_path(out), manifest)?;
    Ok(report)
}

/// Ground truth of an in-memory scenario as evaluator boxes.
pub fn scenario_gt_mot(scenario: &Scenario) -> Vec<Vec<MotBox>> {
    scenario
        .frames
        .iter()
        .map(|f| {
            f.gt
                .boxes
                .iter()
                .zip(&f.gt.ids)
                .map(|(b, id)| MotBox::new(*id, b.center[0], b.center[1], 1.0))
                .collect()
        })
        .collect()
}

/// Track records regrouped per frame as evaluator boxes.
pub fn records_mot(records: &[TrackRecord], n_frames: usize) -> Vec<Vec<MotBox>> {
    let mut out = vec![Vec::new(); n_frames];
    for r in records {
        out[r.frame].push(MotBox::new(
            r.id,
            r.box_state.center[0],
            r.box_state.center[1],
            r.score,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient audit

/// One row of the gradient audit table.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub block: &'static str,
    pub max_rel: f64,
    pub tol: f64,
}

impl GradCheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel < self.tol
    }
}

fn weighted_sum(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn check_linear() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 2], 1.0, &mut rng);
    let b = Tensor::uniform(&[2], 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let (dx, dw, db) = linear_backward(&c, &x, &w);
    grad_check(
        |t| weighted_sum(&linear_forward(&t[0], &t[1], &t[2]), &c),
        &[x, w, b],
        &[dx, dw, db],
        1e-6,
    )
}

fn check_mlp() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let w0 = Tensor::uniform(&[4, 6], 1.0, &mut rng);
    let b0 = Tensor::uniform(&[6], 1.0, &mut rng);
    let w1 = Tensor::uniform(&[6, 2], 1.0, &mut rng);
    let b1 = Tensor::uniform(&[2], 1.0, &mut rng);
    let c = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let (_, cache) = mlp_forward(&x, &[&w0, &w1], &[&b0, &b1]);
    let (dx, dmlp) = mlp_backward(&c, &cache, &[&w0, &w1], &[&b0, &b1]);
    let analytic = vec![
        dx,
        dmlp[0].0.clone(),
        dmlp[0].1.clone(),
        dmlp[1].0.clone(),
        dmlp[1].1.clone(),
    ];
    grad_check(
        |t| weighted_sum(&mlp_forward(&t[0], &[&t[1], &t[3]], &[&t[2], &t[4]]).0, &c),
        &[x, w0, b0, w1, b1],
        &analytic,
        1e-6,
    )
}

fn check_softmax() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::uniform(&[3, 5], 2.0, &mut rng);
    let c = Tensor::uniform(&[3, 5], 1.0, &mut rng);
    let a = softmax_rows(&x);
    let dx = softmax_backward(&c, &a);
    grad_check(|t| weighted_sum(&softmax_rows(&t[0]), &c), &[x], &[dx], 1e-6)
}

fn check_self_attention() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let wq = Tensor::uniform(&[4, 4], 0.7, &mut rng);
    let wk = Tensor::uniform(&[4, 4], 0.7, &mut rng);
    let wv = Tensor::uniform(&[4, 4], 0.7, &mut rng);
    let c = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    // Asymmetric mask so the gradcheck covers the masked path too.
    let mask = self_attn_mask(2, 3, false, false, true);
    let (_, cache) = self_attention_forward(&x, &wq, &wk, &wv, mask.as_deref());
    let (dx, dwq, dwk, dwv) = self_attention_backward(&c, &cache, &wq, &wk, &wv);
    grad_check(
        |t| {
            weighted_sum(
                &self_attention_forward(&t[0], &t[1], &t[2], &t[3], mask.as_deref()).0,
                &c,
            )
        },
        &[x, wq, wk, wv],
        &[dx, dwq, dwk, dwv],
        1e-6,
    )
}

fn check_obs_attention() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let q = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let refs = Tensor::uniform(&[4, 3], 3.0, &mut rng);
    let obs_emb = Tensor::uniform(&[5, 3], 1.0, &mut rng);
    let obs_pos = Tensor::uniform(&[5, 3], 3.0, &mut rng);
    let wq = Tensor::uniform(&[3, 3], 0.7, &mut rng);
    let wk = Tensor::uniform(&[3, 3], 0.7, &mut rng);
    let wv = Tensor::uniform(&[3, 3], 0.7, &mut rng);
    let c = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let tau = 2.0;
    let (_, cache) = obs_attention_forward(&q, &refs, &obs_emb, &obs_pos, &wq, &wk, &wv, tau);
    let g = obs_attention_backward(&c, &cache, &wq, &wk, &wv, tau);
    grad_check(
        |t| {
            weighted_sum(
                &obs_attention_forward(&t[0], &t[1], &obs_emb, &obs_pos, &t[2], &t[3], &t[4], tau)
                    .0,
                &c,
            )
        },
        &[q, refs, wq, wk, wv],
        &[g.d_queries, g.d_refs, g.d_wq, g.d_wk, g.d_wv],
        1e-6,
    )
}

fn check_edge_pos() -> f64 {
    use crate::association::{edge_pos_backward, edge_pos_forward, EdgePosParams};
    use crate::config::EdgeEncoding;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d_k = 4;
    let track_boxes = Tensor::uniform(&[2, 9], 2.0, &mut rng);
    let det_boxes = Tensor::uniform(&[3, 9], 2.0, &mut rng);
    let track_emb = Tensor::uniform(&[2, d_k], 1.0, &mut rng);
    let det_emb = Tensor::uniform(&[3, d_k], 1.0, &mut rng);
    let w0 = Tensor::uniform(&[9, d_k], 0.7, &mut rng);
    let b0 = Tensor::uniform(&[d_k], 0.5, &mut rng);
    let w1 = Tensor::uniform(&[d_k, d_k], 0.7, &mut rng);
    let b1 = Tensor::uniform(&[d_k], 0.5, &mut rng);
    let aux = Tensor::uniform(&[d_k], 0.5, &mut rng);
    let c = Tensor::uniform(&[3, 3, d_k], 1.0, &mut rng);
    let run = |tb: &Tensor, db: &Tensor, w0: &Tensor, b0: &Tensor, w1: &Tensor, b1: &Tensor, aux: &Tensor| {
        let params = EdgePosParams {
            ws: &[w0, w1],
            bs: &[b0, b1],
            aux_col: Some(aux),
        };
        edge_pos_forward(EdgeEncoding::Box, tb, db, &track_emb, &det_emb, &params, d_k)
    };
    let (_, cache) = run(&track_boxes, &det_boxes, &w0, &b0, &w1, &b1, &aux);
    let params = EdgePosParams {
        ws: &[&w0, &w1],
        bs: &[&b0, &b1],
        aux_col: Some(&aux),
    };
    let g = edge_pos_backward(&c, &cache, &track_boxes, &det_boxes, &track_emb, &det_emb, &params);
    let analytic = vec![
        g.d_track_boxes,
        g.d_det_boxes,
        g.d_mlp[0].0.clone(),
        g.d_mlp[0].1.clone(),
        g.d_mlp[1].0.clone(),
        g.d_mlp[1].1.clone(),
        g.d_aux_col.expect("aux column grad"),
    ];
    grad_check(
        |t| weighted_sum(&run(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5], &t[6]).0, &c),
        &[track_boxes, det_boxes, w0, b0, w1, b1, aux],
        &analytic,
        1e-6,
    )
}

fn check_edge_attention() -> f64 {
    use crate::association::{edge_attention_backward, edge_attention_forward, EdgeAttnParams};
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d = 4;
    let det_emb = Tensor::uniform(&[3, d], 1.0, &mut rng);
    let keys = Tensor::uniform(&[2, d], 1.0, &mut rng);
    let edges = Tensor::uniform(&[3, 2, d], 1.0, &mut rng);
    let wq = Tensor::uniform(&[d, d], 0.7, &mut rng);
    let wk = Tensor::uniform(&[d, d], 0.7, &mut rng);
    let wv = Tensor::uniform(&[d, d], 0.7, &mut rng);
    let we1 = Tensor::uniform(&[d, 1], 0.7, &mut rng);
    let we2 = Tensor::uniform(&[1, d], 0.7, &mut rng);
    let c_det = Tensor::uniform(&[3, d], 1.0, &mut rng);
    let c_edges = Tensor::uniform(&[3, 2, d], 1.0, &mut rng);
    let c_attn = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let loss = |t: &[Tensor]| {
        let p = EdgeAttnParams {
            wq: &t[3],
            wk: &t[4],
            wv: &t[5],
            we1: &t[6],
            we2: &t[7],
        };
        let (out, _) = edge_attention_forward(&t[0], &t[1], &t[2], &p);
        weighted_sum(&out.det_emb, &c_det)
            + weighted_sum(&out.edges, &c_edges)
            + weighted_sum(&out.attention, &c_attn)
    };
    let p = EdgeAttnParams {
        wq: &wq,
        wk: &wk,
        wv: &wv,
        we1: &we1,
        we2: &we2,
    };
    let (_, cache) = edge_attention_forward(&det_emb, &keys, &edges, &p);
    let g = edge_attention_backward(&c_det, &c_edges, Some(&c_attn), &cache, &p);
    grad_check(
        loss,
        &[det_emb, keys, edges, wq, wk, wv, we1, we2],
        &[
            g.d_det_emb,
            g.d_keys,
            g.d_edges,
            g.d_wq,
            g.d_wk,
            g.d_wv,
            g.d_we1,
            g.d_we2,
        ],
        1e-6,
    )
}

fn check_affinity_head() -> f64 {
    use crate::association::{affinity_backward, affinity_forward};
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let d = 4;
    let edges = Tensor::uniform(&[3, 2, d], 1.0, &mut rng);
    let w0 = Tensor::uniform(&[d, 3], 0.7, &mut rng);
    let b0 = Tensor::uniform(&[3], 0.5, &mut rng);
    let w1 = Tensor::uniform(&[3, 1], 0.7, &mut rng);
    let b1 = Tensor::uniform(&[1], 0.5, &mut rng);
    let c = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let (_, cache) = affinity_forward(&edges, &[&w0, &w1], &[&b0, &b1]);
    let (d_edges, dmlp) = affinity_backward(&c, &cache, &[3, 2, d], &[&w0, &w1], &[&b0, &b1]);
    let analytic = vec![
        d_edges,
        dmlp[0].0.clone(),
        dmlp[0].1.clone(),
        dmlp[1].0.clone(),
        dmlp[1].1.clone(),
    ];
    grad_check(
        |t| {
            weighted_sum(
                &affinity_forward(&t[0], &[&t[1], &t[3]], &[&t[2], &t[4]]).0,
                &c,
            )
        },
        &[edges, w0, b0, w1, b1],
        &analytic,
        1e-6,
    )
}

fn check_focal_loss() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let logits = Tensor::uniform(&[4, 3], 3.0, &mut rng);
    let targets = Tensor::from_vec(
        vec![4, 3],
        (0..12).map(|i| f64::from(i % 3 == 0)).collect(),
    )
    .unwrap();
    let (_, grad) = focal_loss(&logits, &targets, 0.5, 1.0);
    grad_check(
        |t| focal_loss(&t[0], &targets, 0.5, 1.0).0,
        &[logits],
        &[grad],
        1e-6,
    )
}

fn check_ce_loss() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    // Row-stochastic attention input, perturbations keep entries positive.
    let attention = softmax_rows(&Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let targets = Tensor::from_vec(
        vec![3, 4],
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
    )
    .unwrap();
    let (_, grad) = ce_attention_loss(&attention, &targets);
    grad_check(
        |t| ce_attention_loss(&t[0], &targets).0,
        &[attention],
        &[grad],
        1e-6,
    )
}

fn unroll_fixture() -> (RunConfig, Vec<TrainFrame>) {
    use crate::geometry::{BoxState, EgoPose};
    let mut cfg = RunConfig::default();
    cfg.model.d_k = 4;
    cfg.model.layers = 2;
    cfg.model.det_queries = 4;
    cfg.model.aux_token = true;
    cfg.model.ref_init_scale = 5.0;
    cfg.model.seed = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gt_box = |x: f64, y: f64, yaw: f64| BoxState::new([x, y, 0.5], [4.0, 2.0, 1.6], yaw, [1.0, 0.0]);
    let frame = |boxes: Vec<BoxState>, ids: Vec<u64>, ego: EgoPose, time: f64, rng: &mut ChaCha8Rng| {
        let n = boxes.len();
        let mut pos = Tensor::zeros(&[n, 3]);
        for (i, b) in boxes.iter().enumerate() {
            for k in 0..3 {
                pos.set2(i, k, b.center[k] + 0.05 * rng.gen_range(-1.0..1.0));
            }
        }
        TrainFrame {
            obs_emb: Tensor::uniform(&[n, 4], 1.0, rng),
            obs_pos: pos,
            gt: GtFrame {
                visible: vec![true; n],
                boxes,
                ids,
            },
            ego,
            time,
        }
    };
    let f0 = frame(
        vec![gt_box(2.0, 1.0, 0.3), gt_box(-3.0, 2.0, -0.8)],
        vec![1, 2],
        EgoPose::identity(),
        0.0,
        &mut rng,
    );
    let f1 = frame(
        vec![gt_box(2.5, 1.0, 0.3), gt_box(4.0, -2.0, 1.0)],
        vec![1, 3],
        EgoPose {
            translation: [0.5, 0.1, 0.0],
            yaw: 0.05,
        },
        0.5,
        &mut rng,
    );
    (cfg, vec![f0, f1])
}

fn check_full_unroll() -> f64 {
    let (cfg, frames) = unroll_fixture();
    let store = init_params(&cfg.model);
    let (_, grads) = sequence_loss(&store, &cfg.model, &cfg.loss, 0.3, &frames);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).clone()).collect();
    let analytic: Vec<Tensor> = names
        .iter()
        .map(|n| {
            grads
                .get(n.as_str())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(n).shape()))
        })
        .collect();
    let mut samples = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        samples.push((ti, 0));
        if t.len() > 1 {
            samples.push((ti, t.len() / 2));
        }
    }
    grad_check_sampled(
        |t| {
            let mut s = ParamStore::new();
            for (name, value) in names.iter().zip(t) {
                s.insert(name, value.clone());
            }
            sequence_loss(&s, &cfg.model, &cfg.loss, 0.3, &frames).0.total
        },
        &inputs,
        &analytic,
        1e-5,
        &samples,
    )
}

/// Audits every differentiable block against central finite differences.
/// Deterministic; the per-block tolerances are part of the contract.
pub fn run_gradcheck() -> Vec<GradCheckRow> {
    let block = |name: &'static str, max_rel: f64, tol: f64| GradCheckRow {
        block: name,
        max_rel,
        tol,
    };
    vec![
        block("linear", check_linear(), 1e-5),
        block("mlp", check_mlp(), 1e-5),
        block("softmax", check_softmax(), 1e-5),
        block("self_attention", check_self_attention(), 1e-5),
        block("observation_cross_attention", check_obs_attention(), 1e-5),
        block("edge_position_encoding", check_edge_pos(), 1e-5),
        block("edge_augmented_cross_attention", check_edge_attention(), 1e-5),
        block("affinity_head", check_affinity_head(), 1e-5),
        block("focal_loss", check_focal_loss(), 1e-5),
        block("ce_loss", check_ce_loss(), 1e-5),
        block("full_unroll_t2", check_full_unroll(), 1e-4),
    ]
}

/// Renders the audit as an aligned text table.
pub fn gradcheck_table(rows: &[GradCheckRow]) -> String {
    let mut out = String::new();
    out.push_str("block                            max_rel      tol      status\n");
    for r in rows {
        out.push_str(&format!(
            "{:<32} {:<12.3e} {:<8.0e} {}\n",
            r.block,
            r.max_rel,
            r.tol,
            if r.pass() { "pass" } else { "FAIL" }
        ));
    }
    out
}
