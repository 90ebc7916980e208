//! Edge-augmented cross-attention between detection queries and track
//! queries, the pairwise edge position encoding that seeds it, and the
//! affinity head that reads association scores off the edge features.
//!
//! Shapes: N_D detection queries attend over N_K keys, where the keys are the
//! N_T track queries optionally followed by one auxiliary no-match token
//! (always the last column). Edge features E are [N_D, N_K, d]. Attention is
//! single-head:
//!
//!   A    = softmax_rows( (Q_D Wq)(K Wk)^T / sqrt(d) + E We1 )
//!   Q_D' = Q_D + A (K Wv)
//!   E'   = E + A We2
//!   S    = affinity_mlp(E')        (one scalar per edge)
//!
//! Reductions over the key axis use permutation-stable sums, so permuting
//! tracks (or detections) permutes every output bitwise-exactly.

use crate::config::EdgeEncoding;
use crate::geometry::wrap_to_pi;
use crate::tensor::{
    matmul, matmul_stable, mlp_backward, mlp_forward, softmax_backward, softmax_rows, MlpCache,
    Tensor,
};

// ---------------------------------------------------------------------------
// Edge position encoding

/// Per-edge input features for the position-encoding MLP.
/// Returns [N_D, N_T, in_dim]; `in_dim` depends on the encoding variant.
/// The `none` variant has no inputs and is handled by the caller.
pub fn edge_input_dim(variant: EdgeEncoding, d_k: usize) -> Option<usize> {
    match variant {
        EdgeEncoding::Box => Some(9),
        EdgeEncoding::Center => Some(3),
        EdgeEncoding::Appearance => Some(d_k),
        EdgeEncoding::None => None,
    }
}

fn pairwise_abs_diff(
    variant: EdgeEncoding,
    track_boxes: &Tensor,
    det_boxes: &Tensor,
    track_emb: &Tensor,
    det_emb: &Tensor,
) -> Tensor {
    let (n_t, n_d) = (track_boxes.rows(), det_boxes.rows());
    match variant {
        EdgeEncoding::Box => Tensor::from_fn(&[n_d, n_t, 9], |idx| {
            let k = idx % 9;
            let i = (idx / 9) % n_t;
            let j = idx / (9 * n_t);
            let d = track_boxes.at2(i, k) - det_boxes.at2(j, k);
            if k == 6 {
                wrap_to_pi(d).abs()
            } else {
                d.abs()
            }
        }),
        EdgeEncoding::Center => Tensor::from_fn(&[n_d, n_t, 3], |idx| {
            let k = idx % 3;
            let i = (idx / 3) % n_t;
            let j = idx / (3 * n_t);
            (track_boxes.at2(i, k) - det_boxes.at2(j, k)).abs()
        }),
        EdgeEncoding::Appearance => {
            let d = track_emb.cols();
            Tensor::from_fn(&[n_d, n_t, d], |idx| {
                let k = idx % d;
                let i = (idx / d) % n_t;
                let j = idx / (d * n_t);
                (track_emb.at2(i, k) - det_emb.at2(j, k)).abs()
            })
        }
        EdgeEncoding::None => unreachable!("no pairwise inputs for the none variant"),
    }
}

/// Position-encoding parameters: MLP layers mapping the pairwise feature to
/// d_k, plus the learned column for the auxiliary token when present.
pub struct EdgePosParams<'a> {
    pub ws: &'a [&'a Tensor],
    pub bs: &'a [&'a Tensor],
    /// Learned [d_k] vector used as the encoding of every (detection, aux)
    /// edge. Present iff the auxiliary token is enabled.
    pub aux_col: Option<&'a Tensor>,
}

pub struct EdgePosCache {
    variant: EdgeEncoding,
    inputs: Option<Tensor>,
    mlp: Option<MlpCache>,
    n_d: usize,
    n_t: usize,
    d_k: usize,
}

pub struct EdgePosGrads {
    pub d_track_boxes: Tensor,
    pub d_det_boxes: Tensor,
    pub d_track_emb: Tensor,
    pub d_det_emb: Tensor,
    pub d_mlp: Vec<(Tensor, Tensor)>,
    pub d_aux_col: Option<Tensor>,
}

/// Build the per-layer edge position encoding E_pos of shape [N_D, N_K, d_k]
/// (N_K = N_T + 1 with the aux token, else N_T). Boxes are flat [_, 9] rows.
pub fn edge_pos_forward(
    variant: EdgeEncoding,
    track_boxes: &Tensor,
    det_boxes: &Tensor,
    track_emb: &Tensor,
    det_emb: &Tensor,
    params: &EdgePosParams,
    d_k: usize,
) -> (Tensor, EdgePosCache) {
    let n_t = track_boxes.rows();
    let n_d = det_boxes.rows();
    let n_k = n_t + params.aux_col.map_or(0, |_| 1);
    let mut out = Tensor::zeros(&[n_d, n_k, d_k]);
    let mut cache = EdgePosCache {
        variant,
        inputs: None,
        mlp: None,
        n_d,
        n_t,
        d_k,
    };
    if variant != EdgeEncoding::None && n_t > 0 {
        let inputs = pairwise_abs_diff(variant, track_boxes, det_boxes, track_emb, det_emb);
        let in_dim = edge_input_dim(variant, d_k).unwrap();
        let flat = inputs.reshape(&[n_d * n_t, in_dim]);
        let (enc, mlp_cache) = mlp_forward(&flat, params.ws, params.bs);
        assert_eq!(enc.cols(), d_k, "edge MLP must produce d_k features");
        for j in 0..n_d {
            for i in 0..n_t {
                for k in 0..d_k {
                    out.data_mut()[(j * n_k + i) * d_k + k] = enc.at2(j * n_t + i, k);
                }
            }
        }
        cache.inputs = Some(inputs);
        cache.mlp = Some(mlp_cache);
    }
    if let Some(aux) = params.aux_col {
        assert_eq!(aux.len(), d_k, "aux edge column must be [d_k]");
        for j in 0..n_d {
            for k in 0..d_k {
                out.data_mut()[(j * n_k + n_t) * d_k + k] = aux.data()[k];
            }
        }
    }
    (out, cache)
}

/// Backward through `edge_pos_forward`. `d_out` is [N_D, N_K, d_k].
pub fn edge_pos_backward(
    d_out: &Tensor,
    cache: &EdgePosCache,
    track_boxes: &Tensor,
    det_boxes: &Tensor,
    track_emb: &Tensor,
    det_emb: &Tensor,
    params: &EdgePosParams,
) -> EdgePosGrads {
    let (n_d, n_t, d_k) = (cache.n_d, cache.n_t, cache.d_k);
    let n_k = n_t + params.aux_col.map_or(0, |_| 1);
    assert_eq!(d_out.shape(), &[n_d, n_k, d_k]);
    let mut grads = EdgePosGrads {
        d_track_boxes: Tensor::zeros(track_boxes.shape()),
        d_det_boxes: Tensor::zeros(det_boxes.shape()),
        d_track_emb: Tensor::zeros(track_emb.shape()),
        d_det_emb: Tensor::zeros(det_emb.shape()),
        d_mlp: params
            .ws
            .iter()
            .zip(params.bs)
            .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape())))
            .collect(),
        d_aux_col: params.aux_col.map(|a| Tensor::zeros(a.shape())),
    };
    if let Some(d_aux) = grads.d_aux_col.as_mut() {
        for j in 0..n_d {
            for k in 0..d_k {
                d_aux.data_mut()[k] += d_out.at3(j, n_t, k);
            }
        }
    }
    let (Some(inputs), Some(mlp_cache)) = (&cache.inputs, &cache.mlp) else {
        return grads;
    };
    // Strip the aux column and flatten to the MLP's output gradient.
    let mut d_enc = Tensor::zeros(&[n_d * n_t, d_k]);
    for j in 0..n_d {
        for i in 0..n_t {
            for k in 0..d_k {
                d_enc.data_mut()[(j * n_t + i) * d_k + k] = d_out.at3(j, i, k);
            }
        }
    }
    let (d_flat, d_mlp) = mlp_backward(&d_enc, mlp_cache, params.ws, params.bs);
    grads.d_mlp = d_mlp;
    // Chain |a - b| through its sign into the pairwise inputs' sources.
    let in_dim = inputs.shape()[2];
    for j in 0..n_d {
        for i in 0..n_t {
            for k in 0..in_dim {
                let g = d_flat.at2(j * n_t + i, k);
                if g == 0.0 {
                    continue;
                }
                match cache.variant {
                    EdgeEncoding::Box | EdgeEncoding::Center => {
                        let diff = if cache.variant == EdgeEncoding::Box && k == 6 {
                            wrap_to_pi(track_boxes.at2(i, k) - det_boxes.at2(j, k))
                        } else {
                            track_boxes.at2(i, k) - det_boxes.at2(j, k)
                        };
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads.d_track_boxes.data_mut()[i * 9 + k] += g * s;
                        grads.d_det_boxes.data_mut()[j * 9 + k] -= g * s;
                    }
                    EdgeEncoding::Appearance => {
                        let diff = track_emb.at2(i, k) - det_emb.at2(j, k);
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads.d_track_emb.data_mut()[i * track_emb.cols() + k] += g * s;
                        grads.d_det_emb.data_mut()[j * det_emb.cols() + k] -= g * s;
                    }
                    EdgeEncoding::None => unreachable!(),
                }
            }
        }
    }
    grads
}

// ---------------------------------------------------------------------------
// Edge-augmented cross-attention

pub struct EdgeAttnParams<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    /// [d, 1]: projects each edge feature to a scalar logit bias.
    pub we1: &'a Tensor,
    /// [1, d]: lifts each attention weight back into edge-feature space.
    pub we2: &'a Tensor,
}

pub struct EdgeAttnOutput {
    pub det_emb: Tensor,
    pub edges: Tensor,
    /// Normalized attention [N_D, N_K]; rows sum to 1.
    pub attention: Tensor,
}

pub struct EdgeAttnCache {
    qd: Tensor,
    keys: Tensor,
    edges_in: Tensor,
    qp: Tensor,
    kp: Tensor,
    values: Tensor,
    attention: Tensor,
}

pub struct EdgeAttnGrads {
    pub d_det_emb: Tensor,
    pub d_keys: Tensor,
    pub d_edges: Tensor,
    pub d_wq: Tensor,
    pub d_wk: Tensor,
    pub d_wv: Tensor,
    pub d_we1: Tensor,
    pub d_we2: Tensor,
}

/// Forward pass. `det_emb` is [N_D, d], `keys` is [N_K, d] (track queries,
/// then the aux token if enabled), `edges` is [N_D, N_K, d]. N_K must be at
/// least 1; the caller skips the association stage entirely when it has no
/// keys to attend over.
pub fn edge_attention_forward(
    det_emb: &Tensor,
    keys: &Tensor,
    edges: &Tensor,
    p: &EdgeAttnParams,
) -> (EdgeAttnOutput, EdgeAttnCache) {
    let n_d = det_emb.rows();
    let d = det_emb.cols();
    let n_k = keys.rows();
    assert!(n_k >= 1, "edge attention needs at least one key");
    assert_eq!(keys.cols(), d, "key width mismatch");
    assert_eq!(edges.shape(), &[n_d, n_k, d], "edge tensor shape mismatch");
    let qp = matmul(det_emb, p.wq);
    let kp = matmul(keys, p.wk);
    let values = matmul(keys, p.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let content = matmul(&qp, &kp.transpose2());
    let mut logits = content.scale(scale);
    for j in 0..n_d {
        for i in 0..n_k {
            let mut bias = 0.0;
            for k in 0..d {
                bias += edges.at3(j, i, k) * p.we1.data()[k];
            }
            logits.data_mut()[j * n_k + i] += bias;
        }
    }
    let attention = softmax_rows(&logits);
    let det_out = det_emb.add(&matmul_stable(&attention, &values));
    let mut edges_out = edges.clone();
    for j in 0..n_d {
        for i in 0..n_k {
            let a = attention.at2(j, i);
            for k in 0..d {
                edges_out.data_mut()[(j * n_k + i) * d + k] += a * p.we2.data()[k];
            }
        }
    }
    (
        EdgeAttnOutput {
            det_emb: det_out,
            edges: edges_out,
            attention: attention.clone(),
        },
        EdgeAttnCache {
            qd: det_emb.clone(),
            keys: keys.clone(),
            edges_in: edges.clone(),
            qp,
            kp,
            values,
            attention,
        },
    )
}

/// Backward pass. `d_det_out`, `d_edges_out`, and (optionally) `d_attention`
/// are the upstream gradients for the three forward outputs.
pub fn edge_attention_backward(
    d_det_out: &Tensor,
    d_edges_out: &Tensor,
    d_attention_extra: Option<&Tensor>,
    cache: &EdgeAttnCache,
    p: &EdgeAttnParams,
) -> EdgeAttnGrads {
    let n_d = cache.qd.rows();
    let d = cache.qd.cols();
    let n_k = cache.keys.rows();
    let a = &cache.attention;

    // E' = E + A We2
    let d_edges_direct = d_edges_out.clone();
    let mut d_a = Tensor::zeros(&[n_d, n_k]);
    let mut d_we2 = Tensor::zeros(&[1, d]);
    for j in 0..n_d {
        for i in 0..n_k {
            let mut acc = 0.0;
            for k in 0..d {
                let g = d_edges_out.at3(j, i, k);
                acc += g * p.we2.data()[k];
                d_we2.data_mut()[k] += g * a.at2(j, i);
            }
            d_a.data_mut()[j * n_k + i] = acc;
        }
    }

    // Q_D' = Q_D + A V
    let d_det_emb_residual = d_det_out.clone();
    let (d_a_from_values, d_values) = {
        let da = matmul(d_det_out, &cache.values.transpose2());
        let dv = matmul(&a.transpose2(), d_det_out);
        (da, dv)
    };
    for (dst, src) in d_a.data_mut().iter_mut().zip(d_a_from_values.data()) {
        *dst += src;
    }
    if let Some(extra) = d_attention_extra {
        assert_eq!(extra.shape(), a.shape());
        for (dst, src) in d_a.data_mut().iter_mut().zip(extra.data()) {
            *dst += src;
        }
    }

    // Through the softmax into the logits.
    let d_logits = softmax_backward(&d_a, a);

    // Logit bias path: logits += E We1.
    let mut d_edges = d_edges_direct;
    let mut d_we1 = Tensor::zeros(&[d, 1]);
    for j in 0..n_d {
        for i in 0..n_k {
            let g = d_logits.at2(j, i);
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                d_edges.data_mut()[(j * n_k + i) * d + k] += g * p.we1.data()[k];
                d_we1.data_mut()[k] += g * cache.edges_in.at3(j, i, k);
            }
        }
    }

    // Content path: logits += (Q_D Wq)(K Wk)^T / sqrt(d).
    let scale = 1.0 / (d as f64).sqrt();
    let d_content = d_logits.scale(scale);
    let d_qp = matmul(&d_content, &cache.kp);
    let d_kp = matmul(&d_content.transpose2(), &cache.qp);

    let (d_det_from_q, d_wq) = {
        let dx = matmul(&d_qp, &p.wq.transpose2());
        let dw = matmul(&cache.qd.transpose2(), &d_qp);
        (dx, dw)
    };
    let (d_keys_from_k, d_wk) = {
        let dx = matmul(&d_kp, &p.wk.transpose2());
        let dw = matmul(&cache.keys.transpose2(), &d_kp);
        (dx, dw)
    };
    let (d_keys_from_v, d_wv) = {
        let dx = matmul(&d_values, &p.wv.transpose2());
        let dw = matmul(&cache.keys.transpose2(), &d_values);
        (dx, dw)
    };

    EdgeAttnGrads {
        d_det_emb: d_det_emb_residual.add(&d_det_from_q),
        d_keys: d_keys_from_k.add(&d_keys_from_v),
        d_edges,
        d_wq,
        d_wk,
        d_wv,
        d_we1,
        d_we2,
    }
}

// ---------------------------------------------------------------------------
// Affinity head

/// Map final edge features [N_D, N_K, d] to raw affinity logits [N_D, N_K]
/// with a per-edge MLP (last layer width 1).
pub fn affinity_forward(
    edges: &Tensor,
    ws: &[&Tensor],
    bs: &[&Tensor],
) -> (Tensor, MlpCache) {
    let (n_d, n_k, d) = (edges.shape()[0], edges.shape()[1], edges.shape()[2]);
    let flat = edges.reshape(&[n_d * n_k, d]);
    let (out, cache) = mlp_forward(&flat, ws, bs);
    assert_eq!(out.cols(), 1, "affinity head must end in one scalar");
    (out.reshape(&[n_d, n_k]), cache)
}

/// Returns (d_edges, per-layer MLP grads).
pub fn affinity_backward(
    d_scores: &Tensor,
    cache: &MlpCache,
    edges_shape: &[usize],
    ws: &[&Tensor],
    bs: &[&Tensor],
) -> (Tensor, Vec<(Tensor, Tensor)>) {
    let (n_d, n_k) = (edges_shape[0], edges_shape[1]);
    let flat = d_scores.reshape(&[n_d * n_k, 1]);
    let (d_flat, d_mlp) = mlp_backward(&flat, cache, ws, bs);
    (d_flat.reshape(edges_shape), d_mlp)
}
