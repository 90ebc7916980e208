//! Synthetic bird's-eye-view world.
//!
//! Objects live in a square world-frame arena, move with a velocity random
//! walk, reflect off the arena walls, and are born and die stochastically.
//! The ego vehicle drives a circular arc through the world. Every frame is
//! reported in the ego's vehicle coordinates: exact ground-truth boxes for
//! all living objects, plus noisy observations for the currently visible
//! ones and a Poisson number of clutter boxes.
//!
//! Occlusion follows a two-state Markov chain whose stationary rate equals
//! `occlusion_prob`: spells persist with `occlusion_persistence`, so at zero
//! persistence visibility is drawn independently each frame.
//!
//! Observations reach the decoder as embeddings through `ObsEncoder`, a
//! fixed random linear map over the normalized box vector. The map is a
//! property of the simulated sensor, not of any scenario: every scenario,
//! training run, and evaluation shares it.

use crate::config::ScenarioConfig;
use crate::geometry::{ego_compensate_box, BoxState, EgoPose};
use crate::tensor::{init_linear_weight, matmul, Tensor};
use crate::training::{GtFrame, TrainFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use std::f64::consts::PI;

/// One observed box in vehicle coordinates. Clutter carries no identity.
#[derive(Debug, Clone)]
pub struct ObsBox {
    pub box_state: BoxState,
    pub gt_id: Option<u64>,
}

/// One generated frame, fully in vehicle coordinates.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub time: f64,
    pub ego: EgoPose,
    /// Exact boxes of every living object, occluded or not.
    pub gt: GtFrame,
    /// Noisy boxes of visible objects followed by clutter.
    pub observations: Vec<ObsBox>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub frames: Vec<SimFrame>,
}

struct SimObject {
    id: u64,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    velocity: [f64; 2],
    occluded: bool,
}

/// Ego pose after driving `t` seconds along the configured arc.
pub fn ego_at(cfg: &ScenarioConfig, t: f64) -> EgoPose {
    let s = cfg.ego_speed;
    let k = cfg.ego_curvature;
    if k.abs() < 1e-12 {
        EgoPose {
            translation: [s * t, 0.0, 0.0],
            yaw: 0.0,
        }
    } else {
        let th = s * k * t;
        EgoPose {
            translation: [th.sin() / k, (1.0 - th.cos()) / k, 0.0],
            yaw: th,
        }
    }
}

fn poisson_draw(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).unwrap().sample(rng) as usize
}

fn spawn(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, next_id: &mut u64) -> SimObject {
    let half = cfg.arena * 0.5;
    let id = *next_id;
    *next_id += 1;
    let heading = rng.gen_range(-PI..PI);
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    SimObject {
        id,
        center: [
            rng.gen_range(-half..=half),
            rng.gen_range(-half..=half),
            rng.gen_range(0.3..=1.0),
        ],
        size: [
            rng.gen_range(3.5..=5.5),
            rng.gen_range(1.6..=2.2),
            rng.gen_range(1.4..=1.9),
        ],
        yaw: heading,
        velocity: [speed * heading.cos(), speed * heading.sin()],
        occluded: rng.gen::<f64>() < cfg.occlusion_prob,
    }
}

fn emit(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    objects: &[SimObject],
    ego: &EgoPose,
    time: f64,
) -> SimFrame {
    let world = EgoPose::identity();
    let n_pos = Normal::new(0.0, cfg.sigma_pos).unwrap();
    let n_size = Normal::new(0.0, cfg.sigma_size).unwrap();
    let n_yaw = Normal::new(0.0, cfg.sigma_yaw).unwrap();

    let mut gt = GtFrame::default();
    let mut observations = Vec::new();
    for o in objects {
        let wb = BoxState::new(o.center, o.size, o.yaw, o.velocity);
        let vb = ego_compensate_box(&wb, &world, ego);
        gt.boxes.push(vb);
        gt.ids.push(o.id);
        gt.visible.push(!o.occluded);
        if o.occluded {
            continue;
        }
        let center = [
            vb.center[0] + n_pos.sample(rng),
            vb.center[1] + n_pos.sample(rng),
            vb.center[2] + n_pos.sample(rng),
        ];
        let size = [
            (vb.size[0] + n_size.sample(rng)).max(0.1),
            (vb.size[1] + n_size.sample(rng)).max(0.1),
            (vb.size[2] + n_size.sample(rng)).max(0.1),
        ];
        let yaw = vb.yaw + n_yaw.sample(rng);
        let velocity = [
            vb.velocity[0] + n_pos.sample(rng),
            vb.velocity[1] + n_pos.sample(rng),
        ];
        observations.push(ObsBox {
            box_state: BoxState::new(center, size, yaw, velocity),
            gt_id: Some(o.id),
        });
    }

    let half = cfg.arena * 0.5;
    for _ in 0..poisson_draw(rng, cfg.clutter_rate) {
        let wb = BoxState::new(
            [
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
                rng.gen_range(0.3..=1.0),
            ],
            [
                rng.gen_range(1.0..=5.5),
                rng.gen_range(1.0..=2.5),
                rng.gen_range(0.8..=2.0),
            ],
            rng.gen_range(-PI..PI),
            [rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)],
        );
        observations.push(ObsBox {
            box_state: ego_compensate_box(&wb, &world, ego),
            gt_id: None,
        });
    }

    SimFrame {
        time,
        ego: *ego,
        gt,
        observations,
    }
}

fn advance(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    objects: &mut Vec<SimObject>,
    next_id: &mut u64,
) {
    let half = cfg.arena * 0.5;
    let n_proc = Normal::new(0.0, cfg.sigma_process).unwrap();
    for o in objects.iter_mut() {
        o.velocity[0] += n_proc.sample(rng);
        o.velocity[1] += n_proc.sample(rng);
        o.center[0] += o.velocity[0] * cfg.dt;
        o.center[1] += o.velocity[1] * cfg.dt;
        for k in 0..2 {
            if o.center[k] > half {
                o.center[k] = 2.0 * half - o.center[k];
                o.velocity[k] = -o.velocity[k];
            } else if o.center[k] < -half {
                o.center[k] = -2.0 * half - o.center[k];
                o.velocity[k] = -o.velocity[k];
            }
        }
        let speed = o.velocity[0].hypot(o.velocity[1]);
        if speed > 0.1 {
            o.yaw = o.velocity[1].atan2(o.velocity[0]);
        }
        let p = cfg.occlusion_prob;
        let rho = cfg.occlusion_persistence;
        let draw = rng.gen::<f64>();
        o.occluded = if o.occluded {
            draw < rho + (1.0 - rho) * p
        } else {
            draw < (1.0 - rho) * p
        };
    }
    objects.retain(|_| rng.gen::<f64>() >= cfg.death_prob);
    for _ in 0..poisson_draw(rng, cfg.birth_rate) {
        let o = spawn(cfg, rng, next_id);
        objects.push(o);
    }
}

/// Generates one complete scenario from its config (the seed included).
pub fn generate(cfg: &ScenarioConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id: u64 = 0;
    let mut objects: Vec<SimObject> = (0..cfg.initial_objects)
        .map(|_| spawn(cfg, &mut rng, &mut next_id))
        .collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let time = f as f64 * cfg.dt;
        let ego = ego_at(cfg, time);
        frames.push(emit(cfg, &mut rng, &objects, &ego, time));
        advance(cfg, &mut rng, &mut objects, &mut next_id);
    }
    Scenario { frames }
}

const ENCODER_SEED: u64 = 0xdecade;

/// Fixed linear map from a normalized observed box to the embedding space
/// the decoder consumes.
pub struct ObsEncoder {
    w: Tensor,
    arena: f64,
}

impl ObsEncoder {
    pub fn new(d_k: usize, arena: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        ObsEncoder {
            w: init_linear_weight(9, d_k, &mut rng),
            arena,
        }
    }

    pub fn width(&self) -> usize {
        self.w.cols()
    }

    fn normalized(&self, b: &BoxState) -> [f64; 9] {
        let half = (self.arena * 0.5).max(1.0);
        [
            b.center[0] / half,
            b.center[1] / half,
            b.center[2] / half,
            b.size[0] / 2.5,
            b.size[1] / 2.5,
            b.size[2] / 2.5,
            b.yaw / PI,
            b.velocity[0] / 5.0,
            b.velocity[1] / 5.0,
        ]
    }

    /// Embeds one box; shape `[1, d]`.
    pub fn encode(&self, b: &BoxState) -> Tensor {
        let x = Tensor::from_vec(vec![1, 9], self.normalized(b).to_vec()).unwrap();
        matmul(&x, &self.w)
    }

    /// Embeds a whole observation list; shape `[n, d]`.
    pub fn encode_all(&self, obs: &[ObsBox]) -> Tensor {
        let mut x = Tensor::zeros(&[obs.len(), 9]);
        for (i, o) in obs.iter().enumerate() {
            for (k, v) in self.normalized(&o.box_state).iter().enumerate() {
                x.set2(i, k, *v);
            }
        }
        matmul(&x, &self.w)
    }
}

/// Stacks observation centers into a `[n, 3]` tensor.
pub fn obs_positions(obs: &[ObsBox]) -> Tensor {
    let mut t = Tensor::zeros(&[obs.len(), 3]);
    for (i, o) in obs.iter().enumerate() {
        for k in 0..3 {
            t.set2(i, k, o.box_state.center[k]);
        }
    }
    t
}

/// Converts a scenario into decoder-ready training frames.
pub fn train_frames(scenario: &Scenario, encoder: &ObsEncoder) -> Vec<TrainFrame> {
    scenario
        .frames
        .iter()
        .map(|f| TrainFrame {
            obs_emb: encoder.encode_all(&f.observations),
            obs_pos: obs_positions(&f.observations),
            gt: f.gt.clone(),
            ego: f.ego,
            time: f.time,
        })
        .collect()
}
