//! Stacked decoder that alternates query refinement with association. Each
//! layer runs, in order:
//!
//!   1. self-attention over the concatenated track, detection, and (optional)
//!      auxiliary queries,
//!   2. cross-attention from track and detection queries to the frame's
//!      observation tokens, biased by -distance(refpoint, observation)/tau,
//!   3. the shared prediction heads (box and score) on every query,
//!   4. the edge position encoding and edge-augmented cross-attention that
//!      update detection queries from track keys and produce per-pair
//!      affinity logits.
//!
//! Steps 3-4 give every layer its own box, score, and association readout;
//! only the final layer's embeddings leave the frame. When the frame has no
//! tracks, step 4 is skipped entirely and the affinity output is absent.
//!
//! Every forward has a matching backward that consumes the forward's cache
//! and returns gradients for inputs and parameters; `decode_frame_backward`
//! chains them in reverse and also maps gradients onto parameter names so the
//! training loop can accumulate them across frames.

use crate::association::{
    affinity_backward, affinity_forward, edge_attention_backward, edge_attention_forward,
    edge_input_dim, edge_pos_backward, edge_pos_forward, EdgeAttnCache, EdgeAttnParams,
    EdgePosCache, EdgePosParams,
};
use crate::config::ModelConfig;
use crate::geometry::BoxState;
use crate::model::{det_refpoints, layer_param};
use crate::tensor::{
    linear_backward, masked_softmax_rows, matmul, matmul_stable, mlp_backward, mlp_forward,
    softmax_backward, MlpCache, ParamStore, Tensor,
};
use std::collections::BTreeMap;

/// Parameter-name -> gradient map produced by a frame backward pass.
pub type GradMap = BTreeMap<String, Tensor>;

/// Reads one row of a predicted box tensor back into a box state.
pub fn box_from_row(boxes: &Tensor, row: usize) -> BoxState {
    BoxState::new(
        [boxes.at2(row, 0), boxes.at2(row, 1), boxes.at2(row, 2)],
        [boxes.at2(row, 3), boxes.at2(row, 4), boxes.at2(row, 5)],
        boxes.at2(row, 6),
        [boxes.at2(row, 7), boxes.at2(row, 8)],
    )
}

pub fn apply_param_grads(store: &mut ParamStore, grads: &GradMap) {
    for (name, g) in grads {
        store.add_grad(name, g);
    }
}

fn acc_grad(map: &mut GradMap, name: String, g: Tensor) {
    match map.get_mut(&name) {
        Some(t) => *t = t.add(&g),
        None => {
            map.insert(name, g);
        }
    }
}

// ---------------------------------------------------------------------------
// Self-attention over the joint query set

pub struct SelfAttnCache {
    x: Tensor,
    qp: Tensor,
    kp: Tensor,
    values: Tensor,
    attention: Tensor,
}

/// X' = X + A (X Wv), A = masked softmax of (X Wq)(X Wk)^T / sqrt(d).
/// `mask` is a row-major [n, n] allowed-matrix; None allows everything.
pub fn self_attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    mask: Option<&[bool]>,
) -> (Tensor, SelfAttnCache) {
    let d = x.cols();
    let qp = matmul(x, wq);
    let kp = matmul(x, wk);
    let values = matmul(x, wv);
    let logits = matmul(&qp, &kp.transpose2()).scale(1.0 / (d as f64).sqrt());
    let attention = masked_softmax_rows(&logits, mask);
    let out = x.add(&matmul_stable(&attention, &values));
    let cache = SelfAttnCache {
        x: x.clone(),
        qp,
        kp,
        values,
        attention,
    };
    (out, cache)
}

/// Returns (d_x, d_wq, d_wk, d_wv).
pub fn self_attention_backward(
    d_out: &Tensor,
    cache: &SelfAttnCache,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let d = cache.x.cols();
    let a = &cache.attention;
    let d_a = matmul(d_out, &cache.values.transpose2());
    let d_values = matmul(&a.transpose2(), d_out);
    // Masked entries carry a == 0, so their logit gradient is zero by the
    // softmax backward formula and the mask needs no special handling here.
    let d_logits = softmax_backward(&d_a, a).scale(1.0 / (d as f64).sqrt());
    let d_qp = matmul(&d_logits, &cache.kp);
    let d_kp = matmul(&d_logits.transpose2(), &cache.qp);

    let mut d_x = d_out.clone();
    d_x = d_x.add(&matmul(&d_qp, &wq.transpose2()));
    d_x = d_x.add(&matmul(&d_kp, &wk.transpose2()));
    d_x = d_x.add(&matmul(&d_values, &wv.transpose2()));
    let d_wq = matmul(&cache.x.transpose2(), &d_qp);
    let d_wk = matmul(&cache.x.transpose2(), &d_kp);
    let d_wv = matmul(&cache.x.transpose2(), &d_values);
    (d_x, d_wq, d_wk, d_wv)
}

/// Allowed-mask for self-attention over queries ordered [tracks, dets, aux].
/// The two flags gate whether detection queries may read track queries and
/// vice versa; the aux token, when present, is never blocked. Returns None
/// when nothing is blocked.
pub fn self_attn_mask(
    n_t: usize,
    n_d: usize,
    aux: bool,
    det_to_track: bool,
    track_to_det: bool,
) -> Option<Vec<bool>> {
    if det_to_track && track_to_det {
        return None;
    }
    let n = n_t + n_d + usize::from(aux);
    let mut mask = vec![true; n * n];
    if !det_to_track {
        for row in n_t..n_t + n_d {
            for col in 0..n_t {
                mask[row * n + col] = false;
            }
        }
    }
    if !track_to_det {
        for row in 0..n_t {
            for col in n_t..n_t + n_d {
                mask[row * n + col] = false;
            }
        }
    }
    if mask.iter().all(|&b| b) {
        None
    } else {
        Some(mask)
    }
}

// ---------------------------------------------------------------------------
// Cross-attention from queries to the frame's observations

pub struct ObsAttnCache {
    queries: Tensor,
    refs: Tensor,
    obs_emb: Tensor,
    obs_pos: Tensor,
    qp: Tensor,
    kp: Tensor,
    values: Tensor,
    attention: Tensor,
    dist: Tensor,
}

pub struct ObsAttnGrads {
    pub d_queries: Tensor,
    pub d_refs: Tensor,
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
}

fn euclid3(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Q' = Q + A (O Wv) with logits (Q Wq)(O Wk)^T / sqrt(d) - dist/tau, where
/// dist is the euclidean distance between each query's reference point and
/// each observation's position. With zero observations this is the identity.
pub fn obs_attention_forward(
    queries: &Tensor,
    refs: &Tensor,
    obs_emb: &Tensor,
    obs_pos: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    tau_pos: f64,
) -> (Tensor, ObsAttnCache) {
    let n = queries.rows();
    let d = queries.cols();
    let n_o = obs_emb.rows();
    assert_eq!(refs.shape(), &[n, 3], "refpoint shape mismatch");
    assert_eq!(obs_pos.shape(), &[n_o, 3], "observation position shape mismatch");
    assert_eq!(obs_emb.cols(), d, "observation embedding width mismatch");
    assert!(tau_pos > 0.0);
    let empty = |shape: &[usize]| Tensor::zeros(shape);
    if n_o == 0 {
        let cache = ObsAttnCache {
            queries: queries.clone(),
            refs: refs.clone(),
            obs_emb: obs_emb.clone(),
            obs_pos: obs_pos.clone(),
            qp: empty(&[n, d]),
            kp: empty(&[0, d]),
            values: empty(&[0, d]),
            attention: empty(&[n, 0]),
            dist: empty(&[n, 0]),
        };
        return (queries.clone(), cache);
    }
    let qp = matmul(queries, wq);
    let kp = matmul(obs_emb, wk);
    let values = matmul(obs_emb, wv);
    let scale = 1.0 / (d as f64).sqrt();
    let content = matmul(&qp, &kp.transpose2());
    let mut dist = Tensor::zeros(&[n, n_o]);
    let mut logits = Tensor::zeros(&[n, n_o]);
    for i in 0..n {
        for o in 0..n_o {
            let dv = euclid3(refs.row(i), obs_pos.row(o));
            dist.data_mut()[i * n_o + o] = dv;
            logits.data_mut()[i * n_o + o] = content.at2(i, o) * scale - dv / tau_pos;
        }
    }
    let attention = masked_softmax_rows(&logits, None);
    let out = queries.add(&matmul_stable(&attention, &values));
    let cache = ObsAttnCache {
        queries: queries.clone(),
        refs: refs.clone(),
        obs_emb: obs_emb.clone(),
        obs_pos: obs_pos.clone(),
        qp,
        kp,
        values,
        attention,
        dist,
    };
    (out, cache)
}

pub fn obs_attention_backward(
    d_out: &Tensor,
    cache: &ObsAttnCache,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    tau_pos: f64,
) -> ObsAttnGrads {
    let n = cache.queries.rows();
    let d = cache.queries.cols();
    let n_o = cache.obs_emb.rows();
    if n_o == 0 {
        return ObsAttnGrads {
            d_queries: d_out.clone(),
            d_refs: Tensor::zeros(&[n, 3]),
            d_wq: Tensor::zeros(wq.shape()),
            d_wk: Tensor::zeros(wk.shape()),
            d_wv: Tensor::zeros(wv.shape()),
        };
    }
    let a = &cache.attention;
    let d_a = matmul(d_out, &cache.values.transpose2());
    let d_values = matmul(&a.transpose2(), d_out);
    let d_logits = softmax_backward(&d_a, a);

    // Distance bias: logit -= dist/tau; d dist/d ref = (ref - obs)/dist.
    let mut d_refs = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        for o in 0..n_o {
            let g = -d_logits.at2(i, o) / tau_pos;
            if g == 0.0 {
                continue;
            }
            let dv = cache.dist.at2(i, o);
            if dv < 1e-12 {
                continue;
            }
            for c in 0..3 {
                let diff = cache.refs.at2(i, c) - cache.obs_pos.at2(o, c);
                d_refs.data_mut()[i * 3 + c] += g * diff / dv;
            }
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let d_content = d_logits.scale(scale);
    let d_qp = matmul(&d_content, &cache.kp);
    let d_kp = matmul(&d_content.transpose2(), &cache.qp);

    let d_queries = d_out.add(&matmul(&d_qp, &wq.transpose2()));
    let d_wq = matmul(&cache.queries.transpose2(), &d_qp);
    let d_wk = matmul(&cache.obs_emb.transpose2(), &d_kp);
    let d_wv = matmul(&cache.obs_emb.transpose2(), &d_values);
    ObsAttnGrads {
        d_queries,
        d_refs,
        d_wq,
        d_wk,
        d_wv,
    }
}

// ---------------------------------------------------------------------------
// Shared prediction heads

/// Cap on the raw size logit before exp-decoding. Plausible object sizes
/// keep the logit far inside this range, so the cap only matters when a
/// degenerate model would otherwise overflow a closed-loop rollout.
const SIZE_LOGIT_CAP: f64 = 8.0;

pub struct HeadsOutput {
    /// [n, 9] rows of [cx, cy, cz, l, w, h, yaw, vx, vy]. The center is the
    /// query's reference point plus a decoded offset; sizes are exp-decoded
    /// so they stay positive.
    pub boxes: Tensor,
    /// Raw score logits [n, 1]; apply the logistic function for confidences.
    pub score_logits: Tensor,
}

pub struct HeadsCache {
    input: Tensor,
    box_mlp: MlpCache,
    score_mlp: MlpCache,
    boxes: Tensor,
    raw: Tensor,
}

pub struct HeadsGrads {
    pub d_emb: Tensor,
    pub d_refs: Tensor,
    pub d_box_mlp: Vec<(Tensor, Tensor)>,
    pub d_score_mlp: Vec<(Tensor, Tensor)>,
}

fn head_refs<'s>(store: &'s ParamStore, head: &str) -> (Vec<&'s Tensor>, Vec<&'s Tensor>) {
    (
        vec![
            store.get(&format!("head.{head}.w0")),
            store.get(&format!("head.{head}.w1")),
        ],
        vec![
            store.get(&format!("head.{head}.b0")),
            store.get(&format!("head.{head}.b1")),
        ],
    )
}

pub fn predict_heads_forward(
    emb: &Tensor,
    refs: &Tensor,
    store: &ParamStore,
) -> (HeadsOutput, HeadsCache) {
    let n = emb.rows();
    assert_eq!(refs.shape(), &[n, 3]);
    let input = Tensor::hstack(emb, refs);
    let (bw, bb) = head_refs(store, "box");
    let (raw, box_mlp) = mlp_forward(&input, &bw, &bb);
    assert_eq!(raw.cols(), 9, "box head must decode 9 parameters");
    let mut boxes = Tensor::zeros(&[n, 9]);
    for i in 0..n {
        for k in 0..3 {
            boxes.data_mut()[i * 9 + k] = refs.at2(i, k) + raw.at2(i, k);
        }
        for k in 3..6 {
            boxes.data_mut()[i * 9 + k] = raw.at2(i, k).clamp(-SIZE_LOGIT_CAP, SIZE_LOGIT_CAP).exp();
        }
        for k in 6..9 {
            boxes.data_mut()[i * 9 + k] = raw.at2(i, k);
        }
    }
    let (sw, sb) = head_refs(store, "score");
    let (score_logits, score_mlp) = mlp_forward(&input, &sw, &sb);
    assert_eq!(score_logits.cols(), 1, "score head must end in one logit");
    let cache = HeadsCache {
        input,
        box_mlp,
        score_mlp,
        boxes: boxes.clone(),
        raw,
    };
    (
        HeadsOutput {
            boxes,
            score_logits,
        },
        cache,
    )
}

pub fn predict_heads_backward(
    d_boxes: &Tensor,
    d_score_logits: &Tensor,
    cache: &HeadsCache,
    store: &ParamStore,
) -> HeadsGrads {
    let n = cache.input.rows();
    let d = cache.input.cols() - 3;
    assert_eq!(d_boxes.shape(), &[n, 9]);
    assert_eq!(d_score_logits.shape(), &[n, 1]);
    let mut d_raw = Tensor::zeros(&[n, 9]);
    let mut d_refs = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        for k in 0..3 {
            let g = d_boxes.at2(i, k);
            d_raw.data_mut()[i * 9 + k] = g;
            d_refs.data_mut()[i * 3 + k] += g;
        }
        for k in 3..6 {
            // size = exp(raw), so d raw = d size * size; zero where the
            // logit cap binds.
            d_raw.data_mut()[i * 9 + k] = if cache.raw.at2(i, k).abs() < SIZE_LOGIT_CAP {
                d_boxes.at2(i, k) * cache.boxes.at2(i, k)
            } else {
                0.0
            };
        }
        for k in 6..9 {
            d_raw.data_mut()[i * 9 + k] = d_boxes.at2(i, k);
        }
    }
    let (bw, bb) = head_refs(store, "box");
    let (d_in_box, d_box_mlp) = mlp_backward(&d_raw, &cache.box_mlp, &bw, &bb);
    let (sw, sb) = head_refs(store, "score");
    let (d_in_score, d_score_mlp) = mlp_backward(d_score_logits, &cache.score_mlp, &sw, &sb);
    let d_input = d_in_box.add(&d_in_score);
    let d_emb = d_input.col_slice(0, d);
    let d_refs = d_refs.add(&d_input.col_slice(d, d + 3));
    HeadsGrads {
        d_emb,
        d_refs,
        d_box_mlp,
        d_score_mlp,
    }
}

// ---------------------------------------------------------------------------
// Per-frame decode

/// Everything a frame decode consumes besides the parameters. Track tensors
/// may have zero rows; `obs_emb`/`obs_pos` may have zero rows too. `aux_emb`
/// is the token carried over from the previous frame; None starts the frame
/// from the learned token.
pub struct FrameInputs {
    pub track_emb: Tensor,
    pub track_refs: Tensor,
    pub aux_emb: Option<Tensor>,
    pub obs_emb: Tensor,
    pub obs_pos: Tensor,
}

pub struct LayerOutput {
    /// Predicted boxes [N_T + N_D, 9], track rows first.
    pub boxes: Tensor,
    /// Raw score logits [N_T + N_D, 1].
    pub score_logits: Tensor,
    /// Raw affinity logits [N_D, N_K]; None when the frame had no tracks.
    pub affinity: Option<Tensor>,
    /// Normalized association attention [N_D, N_K]; rows sum to one.
    pub attention: Option<Tensor>,
}

pub struct FrameOutput {
    pub layers: Vec<LayerOutput>,
    /// Final track embeddings [N_T, d] after the last layer.
    pub track_emb: Tensor,
    /// Final detection embeddings [N_D, d] after the last layer.
    pub det_emb: Tensor,
    /// Final auxiliary token, present iff the model has one.
    pub aux_emb: Option<Tensor>,
    /// Reference points of the detection queries [N_D, 3].
    pub det_refs: Tensor,
    /// Names of the stages in execution order, e.g. "layer0.self_attention".
    pub stage_log: Vec<String>,
}

struct EdgeLayerCache {
    pos_cache: EdgePosCache,
    attn_cache: EdgeAttnCache,
    aff_cache: MlpCache,
    track_boxes: Tensor,
    det_boxes: Tensor,
    track_emb: Tensor,
    det_emb: Tensor,
    n_k: usize,
}

struct LayerCache {
    self_cache: SelfAttnCache,
    obs_cache: ObsAttnCache,
    heads_cache: HeadsCache,
    edge: Option<EdgeLayerCache>,
}

pub struct FrameCache {
    layers: Vec<LayerCache>,
    n_t: usize,
    n_d: usize,
    aux_active: bool,
    aux_in_self: bool,
    aux_from_store: bool,
}

fn pos_mlp_refs<'s>(
    store: &'s ParamStore,
    cfg: &ModelConfig,
    l: usize,
) -> (Vec<&'s Tensor>, Vec<&'s Tensor>) {
    if edge_input_dim(cfg.edge_encoding, cfg.d_k).is_some() {
        (
            vec![
                store.get(&layer_param(l, "pos.w0")),
                store.get(&layer_param(l, "pos.w1")),
            ],
            vec![
                store.get(&layer_param(l, "pos.b0")),
                store.get(&layer_param(l, "pos.b1")),
            ],
        )
    } else {
        (Vec::new(), Vec::new())
    }
}

fn edge_attn_params<'s>(store: &'s ParamStore, l: usize) -> EdgeAttnParams<'s> {
    EdgeAttnParams {
        wq: store.get(&layer_param(l, "edge.wq")),
        wk: store.get(&layer_param(l, "edge.wk")),
        wv: store.get(&layer_param(l, "edge.wv")),
        we1: store.get(&layer_param(l, "edge.we1")),
        we2: store.get(&layer_param(l, "edge.we2")),
    }
}

pub fn decode_frame(
    store: &ParamStore,
    cfg: &ModelConfig,
    inputs: &FrameInputs,
) -> (FrameOutput, FrameCache) {
    let d = cfg.d_k;
    let n_t = inputs.track_emb.rows();
    let n_d = cfg.det_queries;
    assert_eq!(inputs.track_emb.cols(), d, "track embedding width mismatch");
    assert_eq!(inputs.track_refs.shape(), &[n_t, 3]);
    assert!(
        inputs.aux_emb.is_none() || cfg.aux_token,
        "aux embedding passed to a model without an aux token"
    );

    let assoc = n_t > 0;
    let aux_active = cfg.aux_token && assoc;
    let aux_from_store = cfg.aux_token && inputs.aux_emb.is_none();
    let aux_in_self = aux_active && cfg.aux_self_attention;
    let mut aux: Option<Tensor> = if cfg.aux_token {
        Some(match &inputs.aux_emb {
            Some(t) => {
                assert_eq!(t.shape(), &[1, d]);
                t.clone()
            }
            None => store.get("aux.token").clone(),
        })
    } else {
        None
    };

    let det_refs = det_refpoints(store);
    let refs = Tensor::vstack(&[&inputs.track_refs, &det_refs]);
    let mut track_emb = inputs.track_emb.clone();
    let mut det_emb = store.get("det.embed").clone();
    let mask = self_attn_mask(
        n_t,
        n_d,
        aux_in_self,
        cfg.self_attn_det_to_track,
        cfg.self_attn_track_to_det,
    );

    let mut edges_carry: Option<Tensor> = None;
    let mut stage_log = Vec::new();
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    let mut layer_caches = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let mut parts: Vec<&Tensor> = vec![&track_emb, &det_emb];
        if aux_in_self {
            parts.push(aux.as_ref().unwrap());
        }
        let x = Tensor::vstack(&parts);
        let (x1, self_cache) = self_attention_forward(
            &x,
            store.get(&layer_param(l, "self.wq")),
            store.get(&layer_param(l, "self.wk")),
            store.get(&layer_param(l, "self.wv")),
            mask.as_deref(),
        );
        stage_log.push(format!("layer{l}.self_attention"));
        let t1 = x1.row_slice(0, n_t);
        let d1 = x1.row_slice(n_t, n_t + n_d);
        if aux_in_self {
            aux = Some(x1.row_slice(n_t + n_d, n_t + n_d + 1));
        }

        let q = Tensor::vstack(&[&t1, &d1]);
        let (q2, obs_cache) = obs_attention_forward(
            &q,
            &refs,
            &inputs.obs_emb,
            &inputs.obs_pos,
            store.get(&layer_param(l, "obs.wq")),
            store.get(&layer_param(l, "obs.wk")),
            store.get(&layer_param(l, "obs.wv")),
            cfg.tau_pos,
        );
        stage_log.push(format!("layer{l}.observation_cross_attention"));
        let t2 = q2.row_slice(0, n_t);
        let d2 = q2.row_slice(n_t, n_t + n_d);

        let (heads_out, heads_cache) = predict_heads_forward(&q2, &refs, store);
        stage_log.push(format!("layer{l}.predict_heads"));

        let (affinity, attention, edge_cache, d3) = if assoc {
            let track_boxes = heads_out.boxes.row_slice(0, n_t);
            let det_boxes = heads_out.boxes.row_slice(n_t, n_t + n_d);
            let (pos_ws, pos_bs) = pos_mlp_refs(store, cfg, l);
            let aux_col = if aux_active {
                Some(store.get(&layer_param(l, "pos.aux")))
            } else {
                None
            };
            let pos_params = EdgePosParams {
                ws: &pos_ws,
                bs: &pos_bs,
                aux_col,
            };
            let (e_pos, pos_cache) = edge_pos_forward(
                cfg.edge_encoding,
                &track_boxes,
                &det_boxes,
                &t2,
                &d2,
                &pos_params,
                d,
            );
            stage_log.push(format!("layer{l}.edge_position"));
            let e_in = match (&edges_carry, cfg.edge_iteration) {
                (Some(c), true) => e_pos.add(c),
                _ => e_pos,
            };
            let keys = if aux_active {
                Tensor::vstack(&[&t2, aux.as_ref().unwrap()])
            } else {
                t2.clone()
            };
            let n_k = keys.rows();
            let (attn_out, attn_cache) =
                edge_attention_forward(&d2, &keys, &e_in, &edge_attn_params(store, l));
            stage_log.push(format!("layer{l}.edge_attention"));
            let (aff_ws, aff_bs) = head_refs(store, "affinity");
            let (scores, aff_cache) = affinity_forward(&attn_out.edges, &aff_ws, &aff_bs);
            stage_log.push(format!("layer{l}.affinity"));
            edges_carry = Some(attn_out.edges.clone());
            let cache = EdgeLayerCache {
                pos_cache,
                attn_cache,
                aff_cache,
                track_boxes,
                det_boxes,
                track_emb: t2.clone(),
                det_emb: d2.clone(),
                n_k,
            };
            (
                Some(scores),
                Some(attn_out.attention),
                Some(cache),
                attn_out.det_emb,
            )
        } else {
            (None, None, None, d2.clone())
        };

        layer_outputs.push(LayerOutput {
            boxes: heads_out.boxes,
            score_logits: heads_out.score_logits,
            affinity,
            attention,
        });
        layer_caches.push(LayerCache {
            self_cache,
            obs_cache,
            heads_cache,
            edge: edge_cache,
        });
        track_emb = t2;
        det_emb = d3;
    }

    let output = FrameOutput {
        layers: layer_outputs,
        track_emb,
        det_emb,
        aux_emb: aux,
        det_refs,
        stage_log,
    };
    let cache = FrameCache {
        layers: layer_caches,
        n_t,
        n_d,
        aux_active,
        aux_in_self,
        aux_from_store,
    };
    (output, cache)
}

/// Gradient seeds for one layer's readouts. Affinity and attention seeds
/// must be None exactly when the layer produced no association output.
pub struct LayerGradSeed {
    pub d_boxes: Tensor,
    pub d_score_logits: Tensor,
    pub d_affinity: Option<Tensor>,
    pub d_attention: Option<Tensor>,
}

pub struct FrameGradSeeds {
    pub layers: Vec<LayerGradSeed>,
    pub d_track_emb: Tensor,
    pub d_det_emb: Tensor,
    pub d_aux_emb: Option<Tensor>,
}

impl FrameGradSeeds {
    pub fn zeros_like(out: &FrameOutput) -> Self {
        Self {
            layers: out
                .layers
                .iter()
                .map(|lo| LayerGradSeed {
                    d_boxes: Tensor::zeros(lo.boxes.shape()),
                    d_score_logits: Tensor::zeros(lo.score_logits.shape()),
                    d_affinity: lo.affinity.as_ref().map(|a| Tensor::zeros(a.shape())),
                    d_attention: lo.attention.as_ref().map(|a| Tensor::zeros(a.shape())),
                })
                .collect(),
            d_track_emb: Tensor::zeros(out.track_emb.shape()),
            d_det_emb: Tensor::zeros(out.det_emb.shape()),
            d_aux_emb: out.aux_emb.as_ref().map(|a| Tensor::zeros(a.shape())),
        }
    }
}

pub struct FrameBackward {
    /// Gradient with respect to the input track embeddings [N_T, d].
    pub d_track_emb: Tensor,
    /// Gradient with respect to the input track reference points [N_T, 3].
    pub d_track_refs: Tensor,
    /// Gradient with respect to the carried-in aux token; None when the frame
    /// used the learned token directly (that gradient lands in `param_grads`).
    pub d_aux_emb: Option<Tensor>,
    pub param_grads: GradMap,
}

pub fn decode_frame_backward(
    seeds: &FrameGradSeeds,
    cache: &FrameCache,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> FrameBackward {
    let (n_t, n_d) = (cache.n_t, cache.n_d);
    let n = n_t + n_d;
    assert_eq!(seeds.layers.len(), cache.layers.len());
    let mut grads: GradMap = BTreeMap::new();

    let mut g_track = seeds.d_track_emb.clone();
    let mut g_det = seeds.d_det_emb.clone();
    let mut g_aux: Option<Tensor> = if cfg.aux_token {
        Some(
            seeds
                .d_aux_emb
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[1, cfg.d_k])),
        )
    } else {
        None
    };
    let mut g_edges_carry: Option<Tensor> = None;
    let mut d_track_refs = Tensor::zeros(&[n_t, 3]);
    let mut d_det_refs = Tensor::zeros(&[n_d, 3]);

    for l in (0..cache.layers.len()).rev() {
        let lc = &cache.layers[l];
        let seed = &seeds.layers[l];

        // Association stage (edge attention ran iff the cache has one).
        let (mut g_t2, mut g_d2, d_boxes_edge) = if let Some(ec) = &lc.edge {
            let d_aff = seed
                .d_affinity
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[n_d, ec.n_k]));
            let (aff_ws, aff_bs) = head_refs(store, "affinity");
            let (d_edges_aff, d_aff_mlp) = affinity_backward(
                &d_aff,
                &ec.aff_cache,
                &[n_d, ec.n_k, cfg.d_k],
                &aff_ws,
                &aff_bs,
            );
            for (i, (dw, db)) in d_aff_mlp.into_iter().enumerate() {
                acc_grad(&mut grads, format!("head.affinity.w{i}"), dw);
                acc_grad(&mut grads, format!("head.affinity.b{i}"), db);
            }
            let mut d_edges_out = d_edges_aff;
            if let Some(g) = g_edges_carry.take() {
                d_edges_out = d_edges_out.add(&g);
            }

            let p = edge_attn_params(store, l);
            let eg = edge_attention_backward(
                &g_det,
                &d_edges_out,
                seed.d_attention.as_ref(),
                &ec.attn_cache,
                &p,
            );
            acc_grad(&mut grads, layer_param(l, "edge.wq"), eg.d_wq);
            acc_grad(&mut grads, layer_param(l, "edge.wk"), eg.d_wk);
            acc_grad(&mut grads, layer_param(l, "edge.wv"), eg.d_wv);
            acc_grad(&mut grads, layer_param(l, "edge.we1"), eg.d_we1);
            acc_grad(&mut grads, layer_param(l, "edge.we2"), eg.d_we2);

            let mut g_t2 = g_track.add(&eg.d_keys.row_slice(0, n_t));
            if cache.aux_active {
                let g = g_aux.take().unwrap();
                g_aux = Some(g.add(&eg.d_keys.row_slice(n_t, n_t + 1)));
            }
            let mut g_d2 = eg.d_det_emb;

            let (pos_ws, pos_bs) = pos_mlp_refs(store, cfg, l);
            let aux_col = if cache.aux_active {
                Some(store.get(&layer_param(l, "pos.aux")))
            } else {
                None
            };
            let pos_params = EdgePosParams {
                ws: &pos_ws,
                bs: &pos_bs,
                aux_col,
            };
            let pg = edge_pos_backward(
                &eg.d_edges,
                &ec.pos_cache,
                &ec.track_boxes,
                &ec.det_boxes,
                &ec.track_emb,
                &ec.det_emb,
                &pos_params,
            );
            for (i, (dw, db)) in pg.d_mlp.into_iter().enumerate() {
                acc_grad(&mut grads, layer_param(l, &format!("pos.w{i}")), dw);
                acc_grad(&mut grads, layer_param(l, &format!("pos.b{i}")), db);
            }
            if let Some(da) = pg.d_aux_col {
                acc_grad(&mut grads, layer_param(l, "pos.aux"), da);
            }
            g_t2 = g_t2.add(&pg.d_track_emb);
            g_d2 = g_d2.add(&pg.d_det_emb);
            if cfg.edge_iteration && l > 0 {
                g_edges_carry = Some(eg.d_edges);
            }
            let d_boxes_edge = Tensor::vstack(&[&pg.d_track_boxes, &pg.d_det_boxes]);
            (g_t2, g_d2, Some(d_boxes_edge))
        } else {
            assert!(seed.d_affinity.is_none() && seed.d_attention.is_none());
            (g_track.clone(), g_det.clone(), None)
        };

        // Prediction heads.
        let mut d_boxes = seed.d_boxes.clone();
        if let Some(db) = d_boxes_edge {
            d_boxes = d_boxes.add(&db);
        }
        let hg = predict_heads_backward(&d_boxes, &seed.d_score_logits, &lc.heads_cache, store);
        for (i, (dw, db)) in hg.d_box_mlp.into_iter().enumerate() {
            acc_grad(&mut grads, format!("head.box.w{i}"), dw);
            acc_grad(&mut grads, format!("head.box.b{i}"), db);
        }
        for (i, (dw, db)) in hg.d_score_mlp.into_iter().enumerate() {
            acc_grad(&mut grads, format!("head.score.w{i}"), dw);
            acc_grad(&mut grads, format!("head.score.b{i}"), db);
        }
        g_t2 = g_t2.add(&hg.d_emb.row_slice(0, n_t));
        g_d2 = g_d2.add(&hg.d_emb.row_slice(n_t, n));
        d_track_refs = d_track_refs.add(&hg.d_refs.row_slice(0, n_t));
        d_det_refs = d_det_refs.add(&hg.d_refs.row_slice(n_t, n));

        // Observation cross-attention.
        let og = obs_attention_backward(
            &Tensor::vstack(&[&g_t2, &g_d2]),
            &lc.obs_cache,
            store.get(&layer_param(l, "obs.wq")),
            store.get(&layer_param(l, "obs.wk")),
            store.get(&layer_param(l, "obs.wv")),
            cfg.tau_pos,
        );
        acc_grad(&mut grads, layer_param(l, "obs.wq"), og.d_wq);
        acc_grad(&mut grads, layer_param(l, "obs.wk"), og.d_wk);
        acc_grad(&mut grads, layer_param(l, "obs.wv"), og.d_wv);
        let g_t1 = og.d_queries.row_slice(0, n_t);
        let g_d1 = og.d_queries.row_slice(n_t, n);
        d_track_refs = d_track_refs.add(&og.d_refs.row_slice(0, n_t));
        d_det_refs = d_det_refs.add(&og.d_refs.row_slice(n_t, n));

        // Self-attention.
        let mut parts: Vec<&Tensor> = vec![&g_t1, &g_d1];
        let aux_for_self = g_aux.clone();
        if cache.aux_in_self {
            parts.push(aux_for_self.as_ref().unwrap());
        }
        let d_x1 = Tensor::vstack(&parts);
        let (d_x, d_wq, d_wk, d_wv) = self_attention_backward(
            &d_x1,
            &lc.self_cache,
            store.get(&layer_param(l, "self.wq")),
            store.get(&layer_param(l, "self.wk")),
            store.get(&layer_param(l, "self.wv")),
        );
        acc_grad(&mut grads, layer_param(l, "self.wq"), d_wq);
        acc_grad(&mut grads, layer_param(l, "self.wk"), d_wk);
        acc_grad(&mut grads, layer_param(l, "self.wv"), d_wv);
        g_track = d_x.row_slice(0, n_t);
        g_det = d_x.row_slice(n_t, n);
        if cache.aux_in_self {
            g_aux = Some(d_x.row_slice(n, n + 1));
        }
    }

    // Initial detection embeddings come straight from the parameter store.
    acc_grad(&mut grads, "det.embed".to_string(), g_det);
    // Detection refpoints are a linear map of the learned position codes.
    let (d_pos, d_w, d_b) = linear_backward(
        &d_det_refs,
        store.get("det.pos"),
        store.get("det.ref.w"),
    );
    acc_grad(&mut grads, "det.pos".to_string(), d_pos);
    acc_grad(&mut grads, "det.ref.w".to_string(), d_w);
    acc_grad(&mut grads, "det.ref.b".to_string(), d_b);

    let d_aux_emb = match g_aux {
        Some(g) if cache.aux_from_store => {
            acc_grad(&mut grads, "aux.token".to_string(), g);
            None
        }
        other => other,
    };

    FrameBackward {
        d_track_emb: g_track,
        d_track_refs,
        d_aux_emb,
        param_grads: grads,
    }
}
