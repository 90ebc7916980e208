//! Parameter registry for the tracker model: naming scheme, seeded
//! initialization, and typed lookup helpers shared by the decoder and the
//! training loop.
//!
//! Parameter names (d = d_k, L = number of layers):
//!   det.embed            [N_D, d]   learned detection query embeddings
//!   det.pos              [N_D, d]   learned detection query position codes
//!   det.ref.w / det.ref.b  [d,3]/[3] linear map position code -> refpoint
//!   aux.token            [1, d]     auxiliary no-match token (aux variant)
//!   layer{l}.self.{wq,wk,wv}        self-attention projections
//!   layer{l}.obs.{wq,wk,wv}         observation cross-attention projections
//!   layer{l}.edge.{wq,wk,wv}        edge-augmented attention projections
//!   layer{l}.edge.we1    [d, 1]     edge -> logit bias
//!   layer{l}.edge.we2    [1, d]     attention -> edge update
//!   layer{l}.pos.{w0,b0,w1,b1}      edge position-encoding MLP
//!   layer{l}.pos.aux     [d]        learned aux edge column (aux variant)
//!   head.box.{w0,b0,w1,b1}          box head MLP ([d+3] -> d -> 9)
//!   head.score.{w0,b0,w1,b1}        score head MLP ([d+3] -> d -> 1)
//!   head.affinity.{w0,b0,w1,b1}     affinity head MLP (d -> d -> 1)
//! Heads are shared across decoder layers; attention and edge parameters are
//! per layer.

use crate::association::edge_input_dim;
use crate::config::ModelConfig;
use crate::tensor::{init_linear_weight, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn layer_param(l: usize, part: &str) -> String {
    format!("layer{l}.{part}")
}

/// Build a freshly initialized parameter store for the given model config.
/// Weights are U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero. The
/// refpoint map is scaled up so initial reference points spread over the
/// arena instead of clustering at the origin.
pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_k;
    let mut store = ParamStore::new();

    store.insert("det.embed", init_linear_weight(d, cfg.det_queries, &mut rng).transpose2());
    store.insert("det.pos", Tensor::uniform(&[cfg.det_queries, d], 1.0, &mut rng));
    store.insert(
        "det.ref.w",
        init_linear_weight(d, 3, &mut rng).scale(cfg.ref_init_scale),
    );
    store.insert("det.ref.b", Tensor::zeros(&[3]));
    if cfg.aux_token {
        store.insert("aux.token", Tensor::uniform(&[1, d], 1.0 / (d as f64).sqrt(), &mut rng));
    }

    for l in 0..cfg.layers {
        for block in ["self", "obs", "edge"] {
            for w in ["wq", "wk", "wv"] {
                store.insert(
                    &layer_param(l, &format!("{block}.{w}")),
                    init_linear_weight(d, d, &mut rng),
                );
            }
        }
        store.insert(&layer_param(l, "edge.we1"), init_linear_weight(d, 1, &mut rng));
        store.insert(
            &layer_param(l, "edge.we2"),
            Tensor::uniform(&[1, d], 1.0, &mut rng),
        );
        if let Some(in_dim) = edge_input_dim(cfg.edge_encoding, d) {
            store.insert(&layer_param(l, "pos.w0"), init_linear_weight(in_dim, d, &mut rng));
            store.insert(&layer_param(l, "pos.b0"), Tensor::zeros(&[d]));
            store.insert(&layer_param(l, "pos.w1"), init_linear_weight(d, d, &mut rng));
            store.insert(&layer_param(l, "pos.b1"), Tensor::zeros(&[d]));
        }
        if cfg.aux_token {
            store.insert(
                &layer_param(l, "pos.aux"),
                Tensor::uniform(&[d], 1.0 / (d as f64).sqrt(), &mut rng),
            );
        }
    }

    store.insert("head.box.w0", init_linear_weight(d + 3, d, &mut rng));
    store.insert("head.box.b0", Tensor::zeros(&[d]));
    store.insert("head.box.w1", init_linear_weight(d, 9, &mut rng));
    store.insert("head.box.b1", Tensor::zeros(&[9]));
    store.insert("head.score.w0", init_linear_weight(d + 3, d, &mut rng));
    store.insert("head.score.b0", Tensor::zeros(&[d]));
    store.insert("head.score.w1", init_linear_weight(d, 1, &mut rng));
    store.insert("head.score.b1", Tensor::zeros(&[1]));
    store.insert("head.affinity.w0", init_linear_weight(d, d, &mut rng));
    store.insert("head.affinity.b0", Tensor::zeros(&[d]));
    store.insert("head.affinity.w1", init_linear_weight(d, 1, &mut rng));
    store.insert("head.affinity.b1", Tensor::zeros(&[1]));

    store
}

/// Names of the association-stage parameters (edge attention, edge position
/// encoding, affinity head). Used by tests that check detection outputs are
/// independent of these when no association runs.
pub fn association_param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.layers {
        for part in ["edge.wq", "edge.wk", "edge.wv", "edge.we1", "edge.we2"] {
            names.push(layer_param(l, part));
        }
        if edge_input_dim(cfg.edge_encoding, cfg.d_k).is_some() {
            for part in ["pos.w0", "pos.b0", "pos.w1", "pos.b1"] {
                names.push(layer_param(l, part));
            }
        }
        if cfg.aux_token {
            names.push(layer_param(l, "pos.aux"));
        }
    }
    for part in ["w0", "b0", "w1", "b1"] {
        names.push(format!("head.affinity.{part}"));
    }
    names
}

/// Compute detection-query reference points from the learned position codes.
pub fn det_refpoints(store: &ParamStore) -> Tensor {
    crate::tensor::linear_forward(store.get("det.pos"), store.get("det.ref.w"), store.get("det.ref.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EdgeEncoding;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig {
            d_k: 8,
            layers: 2,
            det_queries: 6,
            aux_token: true,
            ..ModelConfig::default()
        };
        let a = init_params(&cfg);
        let b = init_params(&cfg);
        assert_eq!(a.num_scalars(), b.num_scalars());
        for name in a.names() {
            let (x, y) = (a.get(name), b.get(name));
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), v.to_bits(), "{name} differs across builds");
            }
        }
        let c = init_params(&ModelConfig { seed: 1, ..cfg });
        assert_ne!(
            a.get("det.embed").data(),
            c.get("det.embed").data(),
            "different seeds must differ"
        );
    }

    #[test]
    fn aux_params_only_exist_in_aux_variant() {
        let base = init_params(&ModelConfig::default());
        assert!(!base.contains("aux.token"));
        assert!(!base.contains("layer0.pos.aux"));
        let aux = init_params(&ModelConfig {
            aux_token: true,
            ..ModelConfig::default()
        });
        assert!(aux.contains("aux.token"));
        assert!(aux.contains("layer0.pos.aux"));
    }

    #[test]
    fn edge_encoding_none_has_no_pos_mlp() {
        let cfg = ModelConfig {
            edge_encoding: EdgeEncoding::None,
            ..ModelConfig::default()
        };
        let store = init_params(&cfg);
        assert!(!store.contains("layer0.pos.w0"));
    }

    #[test]
    fn refpoints_spread_beyond_origin() {
        let store = init_params(&ModelConfig::default());
        let refs = det_refpoints(&store);
        let spread = refs
            .data()
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        assert!(spread > 1.0, "initial refpoints should cover the arena, max |coord| {spread}");
    }
}
