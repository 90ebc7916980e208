//! Controlled experiments layered over the pipeline: the paired no-match
//! token comparison, the attention pathology probe, and the ablation sweeps
//! over edge iteration, update weight, attention masking, and the match
//! threshold.

use crate::config::RunConfig;
use crate::decoder::{
    apply_param_grads, decode_frame, decode_frame_backward, FrameGradSeeds, FrameInputs,
};
use crate::formats::fmt_f;
use crate::metrics::evaluate;
use crate::model::init_params;
use crate::pipeline::{records_mot, scenario_gt_mot, track_scenario, train_model};
use crate::simworld::{generate, train_frames, ObsEncoder};
use crate::tensor::{AdamW, Tensor};
use crate::training::ce_attention_loss;
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One trained-and-evaluated replica of an A/B arm.
#[derive(Debug, Clone)]
pub struct AbArm {
    pub seed: u64,
    pub amota: f64,
    pub mota: f64,
    pub ids: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Paired comparison between the plain model and the no-match token variant,
/// trained and evaluated per replica under identical seeds and data.
#[derive(Debug, Clone)]
pub struct AbReport {
    pub base: Vec<AbArm>,
    pub aux: Vec<AbArm>,
}

pub fn mean_amota(arms: &[AbArm]) -> f64 {
    if arms.is_empty() {
        return 0.0;
    }
    arms.iter().map(|a| a.amota).sum::<f64>() / arms.len() as f64
}

pub fn median_ids(arms: &[AbArm]) -> f64 {
    if arms.is_empty() {
        return 0.0;
    }
    let mut v: Vec<usize> = arms.iter().map(|a| a.ids).collect();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Held-out worlds scored per replica. A single short world makes the
/// replica numbers mostly eval noise; averaging a few keeps the paired
/// comparison about the models.
const EVAL_WORLDS: u64 = 3;

fn run_arm(cfg: &RunConfig, replica: u64) -> Result<AbArm> {
    let mut arm_cfg = cfg.clone();
    arm_cfg.model.seed = cfg.model.seed.wrapping_add(replica);
    arm_cfg.train.seed = cfg.train.seed.wrapping_add(replica);
    let (store, _) = train_model(&arm_cfg)?;

    let encoder = ObsEncoder::new(cfg.model.d_k, cfg.sim.arena);
    let mut arm = AbArm {
        seed: replica,
        amota: 0.0,
        mota: 0.0,
        ids: 0,
        fp: 0,
        fn_count: 0,
    };
    for world in 0..EVAL_WORLDS {
        let mut sim = cfg.sim.clone();
        sim.seed = cfg.sim.seed.wrapping_add(10_000 + replica * 100 + world);
        let scenario = generate(&sim);
        let frames = train_frames(&scenario, &encoder);
        let (records, _) = track_scenario(&store, &arm_cfg, &frames);
        let report = evaluate(
            &records_mot(&records, sim.frames),
            &scenario_gt_mot(&scenario),
            &cfg.eval,
        );
        arm.amota += report.amota / EVAL_WORLDS as f64;
        arm.mota += report.mota / EVAL_WORLDS as f64;
        arm.ids += report.ids;
        arm.fp += report.fp;
        arm.fn_count += report.fn_count;
    }
    Ok(arm)
}

/// Trains both arms over `replicas` paired seeds and evaluates each on a
/// small set of held-out worlds. The arms differ only in the no-match
/// token flag.
pub fn run_ab(cfg: &RunConfig, replicas: u64) -> Result<AbReport> {
    let mut base_cfg = cfg.clone();
    base_cfg.model.aux_token = false;
    let mut aux_cfg = cfg.clone();
    aux_cfg.model.aux_token = true;

    let mut base = Vec::new();
    let mut aux = Vec::new();
    for i in 0..replicas {
        base.push(run_arm(&base_cfg, i)?);
        aux.push(run_arm(&aux_cfg, i)?);
    }
    Ok(AbReport { base, aux })
}

/// Renders the paired comparison as an aligned text table with summary rows.
pub fn ab_table(report: &AbReport) -> String {
    let mut out = String::new();
    out.push_str("arm   seed  amota        mota         ids  fp   fn\n");
    let mut row = |name: &str, a: &AbArm| {
        out.push_str(&format!(
            "{:<5} {:<5} {:<12.6} {:<12.6} {:<4} {:<4} {}\n",
            name, a.seed, a.amota, a.mota, a.ids, a.fp, a.fn_count
        ));
    };
    for a in &report.base {
        row("base", a);
    }
    for a in &report.aux {
        row("aux", a);
    }
    out.push_str(&format!(
        "mean amota   base {}  aux {}\n",
        fmt_f(mean_amota(&report.base)),
        fmt_f(mean_amota(&report.aux))
    ));
    out.push_str(&format!(
        "median ids   base {}  aux {}\n",
        fmt_f(median_ids(&report.base)),
        fmt_f(median_ids(&report.aux))
    ));
    out
}

// ---------------------------------------------------------------------------
// Attention pathology probe

/// Outcome of the no-match attention probe.
#[derive(Debug, Clone, Copy)]
pub struct PathologyOutcome {
    pub n_tracks: usize,
    /// Largest association attention weight on any track in the plain model.
    /// The softmax normalizes over exactly `n_tracks` columns, so this can
    /// never drop below 1/n_tracks even when nothing matches.
    pub max_attention_without_aux: f64,
    /// Largest attention weight on a real track (the no-match column
    /// excluded) after training the token variant to absorb the detection.
    pub max_real_attention_with_aux: f64,
}

fn pathology_cfg(aux: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d_k = 8;
    cfg.model.layers = 2;
    cfg.model.det_queries = 1;
    cfg.model.aux_token = aux;
    cfg.model.seed = 77;
    cfg
}

fn pathology_inputs(n_tracks: usize, d: usize) -> FrameInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    FrameInputs {
        track_emb: Tensor::uniform(&[n_tracks, d], 1.0, &mut rng),
        track_refs: Tensor::uniform(&[n_tracks, 3], 20.0, &mut rng),
        aux_emb: None,
        obs_emb: Tensor::zeros(&[0, d]),
        obs_pos: Tensor::zeros(&[0, 3]),
    }
}

/// Probes the forced-normalization pathology: a single detection faces
/// `n_tracks` live tracks it should not match. Without the no-match token
/// the final-layer attention must put at least 1/n_tracks somewhere; with
/// the token, `steps` cross-entropy updates aimed at the extra column push
/// every real track below that bound.
pub fn softmax_pathology(n_tracks: usize, steps: usize) -> Result<PathologyOutcome> {
    assert!(n_tracks >= 1);
    let inputs = pathology_inputs(n_tracks, 8);

    let base_cfg = pathology_cfg(false);
    let base_store = init_params(&base_cfg.model);
    let (base_out, _) = decode_frame(&base_store, &base_cfg.model, &inputs);
    let base_attn = base_out
        .layers
        .last()
        .unwrap()
        .attention
        .as_ref()
        .expect("tracks present, association ran");
    assert_eq!(base_attn.shape(), &[1, n_tracks]);
    let max_without = base_attn.data().iter().cloned().fold(f64::MIN, f64::max);

    let aux_cfg = pathology_cfg(true);
    let mut store = init_params(&aux_cfg.model);
    let mut targets = Tensor::zeros(&[1, n_tracks + 1]);
    targets.set2(0, n_tracks, 1.0);
    let opt = AdamW {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    for _ in 0..steps {
        let (out, cache) = decode_frame(&store, &aux_cfg.model, &inputs);
        let mut seeds = FrameGradSeeds::zeros_like(&out);
        for (l, layer) in out.layers.iter().enumerate() {
            let attn = layer.attention.as_ref().unwrap();
            let (_, grad) = ce_attention_loss(attn, &targets);
            seeds.layers[l].d_attention = Some(grad);
        }
        let back = decode_frame_backward(&seeds, &cache, &store, &aux_cfg.model);
        store.zero_grads();
        apply_param_grads(&mut store, &back.param_grads);
        store.adamw_step(&opt)?;
    }
    let (out, _) = decode_frame(&store, &aux_cfg.model, &inputs);
    let attn = out.layers.last().unwrap().attention.as_ref().unwrap();
    assert_eq!(attn.shape(), &[1, n_tracks + 1]);
    let max_real = (0..n_tracks)
        .map(|t| attn.at2(0, t))
        .fold(f64::MIN, f64::max);

    Ok(PathologyOutcome {
        n_tracks,
        max_attention_without_aux: max_without,
        max_real_attention_with_aux: max_real,
    })
}

// ---------------------------------------------------------------------------
// Ablation sweeps

/// Per-layer affinity matrices from one decoded frame of a fixed fixture,
/// with edge iteration switched by the flag. Layer 0 has no carried edges,
/// so its affinities are identical across the two settings; deeper layers
/// see the accumulated edge state only when iteration is on.
pub fn layer_affinities(edge_iteration: bool) -> Vec<Tensor> {
    let mut cfg = RunConfig::default();
    cfg.model.d_k = 8;
    cfg.model.layers = 3;
    cfg.model.det_queries = 4;
    cfg.model.aux_token = false;
    cfg.model.edge_iteration = edge_iteration;
    cfg.model.seed = 5150;
    let store = init_params(&cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(616);
    let inputs = FrameInputs {
        track_emb: Tensor::uniform(&[3, 8], 1.0, &mut rng),
        track_refs: Tensor::uniform(&[3, 3], 20.0, &mut rng),
        aux_emb: None,
        obs_emb: Tensor::uniform(&[5, 8], 1.0, &mut rng),
        obs_pos: Tensor::uniform(&[5, 3], 20.0, &mut rng),
    };
    let (out, _) = decode_frame(&store, &cfg.model, &inputs);
    out.layers
        .iter()
        .map(|l| l.affinity.clone().expect("tracks present"))
        .collect()
}

/// Number of track-to-detection matches made over one scenario at each
/// score threshold, using a model trained under `cfg`. Raising the
/// threshold only shrinks the feasible pair set, so the counts are
/// nonincreasing. An untrained model is useless here: its affinities all
/// sit near sigmoid(0) and every threshold below 0.5 admits everything.
pub fn tau_match_counts(cfg: &RunConfig, taus: &[f64]) -> Result<Vec<usize>> {
    let (store, _) = train_model(cfg)?;
    let encoder = ObsEncoder::new(cfg.model.d_k, cfg.sim.arena);
    let frames = train_frames(&generate(&cfg.sim), &encoder);
    Ok(taus
        .iter()
        .map(|&tau| {
            let mut run_cfg = cfg.clone();
            run_cfg.tracker.tau_score = tau;
            track_scenario(&store, &run_cfg, &frames).1.matched
        })
        .collect())
}

/// Final training loss for each track update weight. All runs share data
/// and seeds; only the blend between refreshed and detection embeddings
/// changes.
pub fn weight_sweep(cfg: &RunConfig, weights: &[f64]) -> Result<Vec<f64>> {
    weights
        .iter()
        .map(|&w| {
            let mut c = cfg.clone();
            c.tracker.track_update_weight = w;
            let (_, entries) = train_model(&c)?;
            Ok(entries.last().expect("training logs at least one step").total)
        })
        .collect()
}

/// Final training loss for each of the four self-attention mask variants
/// (detection-to-track and track-to-detection visibility toggled).
pub fn mask_variant_losses(cfg: &RunConfig) -> Result<Vec<(bool, bool, f64)>> {
    let mut out = Vec::new();
    for dt in [false, true] {
        for td in [false, true] {
            let mut c = cfg.clone();
            c.model.self_attn_det_to_track = dt;
            c.model.self_attn_track_to_det = td;
            let (_, entries) = train_model(&c)?;
            out.push((dt, td, entries.last().unwrap().total));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_k = 8;
        cfg.model.layers = 2;
        cfg.model.det_queries = 6;
        cfg.sim.frames = 6;
        cfg.sim.initial_objects = 3;
        cfg.sim.birth_rate = 0.0;
        cfg.sim.clutter_rate = 0.2;
        cfg.train.steps = 12;
        cfg.train.scenarios = 2;
        cfg.train.log_every = 6;
        cfg
    }

    #[test]
    fn ab_runs_paired_arms_and_renders() {
        let report = run_ab(&tiny_cfg(), 2).unwrap();
        assert_eq!(report.base.len(), 2);
        assert_eq!(report.aux.len(), 2);
        for a in report.base.iter().chain(&report.aux) {
            assert!((0.0..=1.0).contains(&a.amota));
        }
        let table = ab_table(&report);
        assert!(table.contains("mean amota"));
        assert!(table.contains("median ids"));
        assert_eq!(table.lines().count(), 1 + 4 + 2);
    }

    #[test]
    fn median_ids_handles_even_and_odd_counts() {
        let arm = |ids| AbArm {
            seed: 0,
            amota: 0.0,
            mota: 0.0,
            ids,
            fp: 0,
            fn_count: 0,
        };
        assert_eq!(median_ids(&[arm(3)]), 3.0);
        assert_eq!(median_ids(&[arm(1), arm(5)]), 3.0);
        assert_eq!(median_ids(&[arm(5), arm(1), arm(2)]), 2.0);
    }

    #[test]
    fn pathology_token_absorbs_the_unmatched_detection() {
        let outcome = softmax_pathology(3, 100).unwrap();
        let bound = 1.0 / 3.0;
        assert!(
            outcome.max_attention_without_aux >= bound,
            "normalization forces {} >= {}",
            outcome.max_attention_without_aux,
            bound
        );
        assert!(
            outcome.max_real_attention_with_aux < bound,
            "token should absorb the mass, got {}",
            outcome.max_real_attention_with_aux
        );
    }

    #[test]
    fn pathology_is_deterministic() {
        let a = softmax_pathology(4, 25).unwrap();
        let b = softmax_pathology(4, 25).unwrap();
        assert_eq!(
            a.max_real_attention_with_aux.to_bits(),
            b.max_real_attention_with_aux.to_bits()
        );
        assert_eq!(
            a.max_attention_without_aux.to_bits(),
            b.max_attention_without_aux.to_bits()
        );
    }

    #[test]
    fn edge_iteration_changes_only_deeper_layers() {
        let with = layer_affinities(true);
        let without = layer_affinities(false);
        assert_eq!(with.len(), 3);
        assert_eq!(with[0].data(), without[0].data(), "layer 0 has no carry");
        let deeper_differs = (1..3).any(|l| with[l].data() != without[l].data());
        assert!(deeper_differs, "carried edges must reach deeper layers");
    }

    #[test]
    fn match_counts_fall_as_the_threshold_rises() {
        let cfg = tiny_cfg();
        let taus = [0.01, 0.1, 0.2, 0.3, 0.4];
        let counts = tau_match_counts(&cfg, &taus).expect("sweep");
        assert_eq!(counts.len(), taus.len());
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "counts must be nonincreasing: {counts:?}");
        }
    }

    #[test]
    fn weight_sweep_and_mask_variants_stay_finite() {
        let mut cfg = tiny_cfg();
        cfg.train.steps = 6;
        let losses = weight_sweep(&cfg, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|l| l.is_finite()));
        let variants = mask_variant_losses(&cfg).unwrap();
        assert_eq!(variants.len(), 4);
        assert!(variants.iter().all(|(_, _, l)| l.is_finite()));
    }
}
