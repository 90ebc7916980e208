//! Run configuration: typed sections, a flat `key = value` text format with
//! `[section]` headers, deterministic canonical serialization, and a stable
//! hash that output artifacts embed.
//!
//! Grammar (one directive per line):
//!   - blank lines and lines starting with `#` are ignored
//!   - `[section]` switches the current section
//!   - `key = value` assigns inside the current section
//! Values are integers, floats, booleans (`true`/`false`), or bare words.
//! Unknown sections or keys are rejected, as are out-of-range values.

use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Which pairwise feature feeds the edge position encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeEncoding {
    /// Absolute difference of all 9 box parameters (default).
    Box,
    /// Absolute difference of box centers only.
    Center,
    /// No position encoding; edges start at zero.
    None,
    /// Absolute difference of query embeddings.
    Appearance,
}

impl EdgeEncoding {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Self::Box),
            "center" => Ok(Self::Center),
            "none" => Ok(Self::None),
            "appearance" => Ok(Self::Appearance),
            other => Err(Error::Config(format!(
                "edge_encoding must be box|center|none|appearance, got {other}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::Center => "center",
            Self::None => "none",
            Self::Appearance => "appearance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width of every query and edge feature.
    pub d_k: usize,
    /// Number of stacked decoder layers.
    pub layers: usize,
    /// Number of learned detection queries.
    pub det_queries: usize,
    /// Enable the auxiliary no-match token (the ++ variant).
    pub aux_token: bool,
    /// Propagate the auxiliary token across frames (vs re-init per frame).
    pub aux_propagate: bool,
    /// Let the auxiliary token take part in self-attention.
    pub aux_self_attention: bool,
    /// Carry edge features across decoder layers (vs re-zero per layer).
    pub edge_iteration: bool,
    pub edge_encoding: EdgeEncoding,
    /// Allow detection queries to attend to track queries in self-attention.
    pub self_attn_det_to_track: bool,
    /// Allow track queries to attend to detection queries in self-attention.
    pub self_attn_track_to_det: bool,
    /// Temperature of the -distance/tau positional bias in observation
    /// cross-attention.
    pub tau_pos: f64,
    /// Spread of the initial detection-query reference points.
    pub ref_init_scale: f64,
    /// Parameter init seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_k: 32,
            layers: 4,
            det_queries: 32,
            aux_token: false,
            aux_propagate: true,
            aux_self_attention: true,
            edge_iteration: true,
            edge_encoding: EdgeEncoding::Box,
            self_attn_det_to_track: true,
            self_attn_track_to_det: true,
            tau_pos: 2.0,
            ref_init_scale: 15.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Minimum activated affinity for a detection-track pair to match.
    pub tau_score: f64,
    /// Minimum detection score for an unmatched detection to spawn a track.
    pub tau_new: f64,
    /// Consecutive misses a track survives; one more terminates it.
    pub patience: usize,
    /// Blend weight of the old track embedding in the update
    /// (new = w * track + (1 - w) * detection).
    pub track_update_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_score: 0.3,
            tau_new: 0.4,
            patience: 5,
            track_update_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_asso: f64,
    /// Weight of the cross-entropy term inside the association loss.
    pub lambda_ce: f64,
    pub focal_alpha_cls: f64,
    pub focal_gamma_cls: f64,
    pub focal_alpha_asso: f64,
    pub focal_gamma_asso: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_reg: 0.25,
            lambda_asso: 10.0,
            lambda_ce: 0.1,
            focal_alpha_cls: 0.25,
            focal_gamma_cls: 2.0,
            focal_alpha_asso: 0.5,
            focal_gamma_asso: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per training mini-sequence.
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Cosine-decay the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    /// Cap on the global gradient norm per step; 0 disables clipping.
    pub grad_clip: f64,
    /// Number of training scenarios to generate (seeds seed..seed+n).
    pub scenarios: usize,
    /// Seed for scenario generation and window sampling.
    pub seed: u64,
    /// Emit a training-log line every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seq_len: 3,
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            cosine_decay: false,
            grad_clip: 0.0,
            scenarios: 20,
            seed: 0,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Side length of the square arena, centered on the world origin.
    pub arena: f64,
    /// Number of frames to generate.
    pub frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    /// Expected object births per frame (Poisson).
    pub birth_rate: f64,
    /// Per-frame death probability of each object.
    pub death_prob: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Observation noise on centers (m).
    pub sigma_pos: f64,
    /// Observation noise on sizes (m).
    pub sigma_size: f64,
    /// Observation noise on yaw (rad).
    pub sigma_yaw: f64,
    /// Velocity random-walk noise applied each frame (m/s).
    pub sigma_process: f64,
    /// Marginal probability that an object is occluded in a frame.
    pub occlusion_prob: f64,
    /// Tendency of occlusion spells to continue (0 = memoryless).
    pub occlusion_persistence: f64,
    /// Expected clutter tokens per frame (Poisson).
    pub clutter_rate: f64,
    /// Ego speed (m/s) along its heading.
    pub ego_speed: f64,
    /// Ego yaw rate per meter traveled (1/m).
    pub ego_curvature: f64,
    /// Objects placed at frame 1 in addition to per-frame births.
    pub initial_objects: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            arena: 50.0,
            frames: 40,
            dt: 0.5,
            birth_rate: 0.15,
            death_prob: 0.01,
            speed_min: 0.5,
            speed_max: 4.0,
            sigma_pos: 0.25,
            sigma_size: 0.08,
            sigma_yaw: 0.05,
            sigma_process: 0.12,
            occlusion_prob: 0.1,
            occlusion_persistence: 0.5,
            clutter_rate: 0.3,
            ego_speed: 2.0,
            ego_curvature: 0.02,
            initial_objects: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Center-distance gate for matching predictions to ground truth (m).
    pub match_threshold: f64,
    /// Size of the evenly spaced recall grid.
    pub recall_points: usize,
    /// Grid points below this recall are excluded from averages.
    pub min_recall: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_threshold: 2.0,
            recall_points: 40,
            min_recall: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sim: ScenarioConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parse the text format, starting from defaults. Rejects unknown
    /// sections/keys and malformed values, then validates ranges.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply directives from text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key {key:?} appears before any [section]",
                    lineno + 1
                )));
            }
            self.set(&section, key, value)?;
        }
        Ok(())
    }

    /// Apply one `section.key=value` override (CLI flags use this).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be section.key=value, got {spec:?}")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key must be section.key, got {path:?}")))?;
        self.set(section, key, value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn f64v(section: &str, key: &str, value: &str) -> Result<f64> {
            value.parse::<f64>().map_err(|_| {
                Error::Config(format!("{section}.{key}: expected a number, got {value:?}"))
            })
        }
        fn usizev(section: &str, key: &str, value: &str) -> Result<usize> {
            value.parse::<usize>().map_err(|_| {
                Error::Config(format!("{section}.{key}: expected a non-negative integer, got {value:?}"))
            })
        }
        fn u64v(section: &str, key: &str, value: &str) -> Result<u64> {
            value.parse::<u64>().map_err(|_| {
                Error::Config(format!("{section}.{key}: expected a non-negative integer, got {value:?}"))
            })
        }
        fn boolv(section: &str, key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{section}.{key}: expected true or false, got {value:?}"
                ))),
            }
        }

        match (section, key) {
            ("model", "d_k") => self.model.d_k = usizev(section, key, value)?,
            ("model", "layers") => self.model.layers = usizev(section, key, value)?,
            ("model", "det_queries") => self.model.det_queries = usizev(section, key, value)?,
            ("model", "aux_token") => self.model.aux_token = boolv(section, key, value)?,
            ("model", "aux_propagate") => self.model.aux_propagate = boolv(section, key, value)?,
            ("model", "aux_self_attention") => {
                self.model.aux_self_attention = boolv(section, key, value)?
            }
            ("model", "edge_iteration") => self.model.edge_iteration = boolv(section, key, value)?,
            ("model", "edge_encoding") => self.model.edge_encoding = EdgeEncoding::parse(value)?,
            ("model", "self_attn_det_to_track") => {
                self.model.self_attn_det_to_track = boolv(section, key, value)?
            }
            ("model", "self_attn_track_to_det") => {
                self.model.self_attn_track_to_det = boolv(section, key, value)?
            }
            ("model", "tau_pos") => self.model.tau_pos = f64v(section, key, value)?,
            ("model", "ref_init_scale") => self.model.ref_init_scale = f64v(section, key, value)?,
            ("model", "seed") => self.model.seed = u64v(section, key, value)?,

            ("tracker", "tau_score") => self.tracker.tau_score = f64v(section, key, value)?,
            ("tracker", "tau_new") => self.tracker.tau_new = f64v(section, key, value)?,
            ("tracker", "patience") => self.tracker.patience = usizev(section, key, value)?,
            ("tracker", "track_update_weight") => {
                self.tracker.track_update_weight = f64v(section, key, value)?
            }

            ("loss", "lambda_cls") => self.loss.lambda_cls = f64v(section, key, value)?,
            ("loss", "lambda_reg") => self.loss.lambda_reg = f64v(section, key, value)?,
            ("loss", "lambda_asso") => self.loss.lambda_asso = f64v(section, key, value)?,
            ("loss", "lambda_ce") => self.loss.lambda_ce = f64v(section, key, value)?,
            ("loss", "focal_alpha_cls") => self.loss.focal_alpha_cls = f64v(section, key, value)?,
            ("loss", "focal_gamma_cls") => self.loss.focal_gamma_cls = f64v(section, key, value)?,
            ("loss", "focal_alpha_asso") => self.loss.focal_alpha_asso = f64v(section, key, value)?,
            ("loss", "focal_gamma_asso") => self.loss.focal_gamma_asso = f64v(section, key, value)?,

            ("train", "steps") => self.train.steps = usizev(section, key, value)?,
            ("train", "seq_len") => self.train.seq_len = usizev(section, key, value)?,
            ("train", "lr") => self.train.lr = f64v(section, key, value)?,
            ("train", "weight_decay") => self.train.weight_decay = f64v(section, key, value)?,
            ("train", "beta1") => self.train.beta1 = f64v(section, key, value)?,
            ("train", "beta2") => self.train.beta2 = f64v(section, key, value)?,
            ("train", "cosine_decay") => self.train.cosine_decay = boolv(section, key, value)?,
            ("train", "grad_clip") => self.train.grad_clip = f64v(section, key, value)?,
            ("train", "scenarios") => self.train.scenarios = usizev(section, key, value)?,
            ("train", "seed") => self.train.seed = u64v(section, key, value)?,
            ("train", "log_every") => self.train.log_every = usizev(section, key, value)?,

            ("sim", "arena") => self.sim.arena = f64v(section, key, value)?,
            ("sim", "frames") => self.sim.frames = usizev(section, key, value)?,
            ("sim", "dt") => self.sim.dt = f64v(section, key, value)?,
            ("sim", "birth_rate") => self.sim.birth_rate = f64v(section, key, value)?,
            ("sim", "death_prob") => self.sim.death_prob = f64v(section, key, value)?,
            ("sim", "speed_min") => self.sim.speed_min = f64v(section, key, value)?,
            ("sim", "speed_max") => self.sim.speed_max = f64v(section, key, value)?,
            ("sim", "sigma_pos") => self.sim.sigma_pos = f64v(section, key, value)?,
            ("sim", "sigma_size") => self.sim.sigma_size = f64v(section, key, value)?,
            ("sim", "sigma_yaw") => self.sim.sigma_yaw = f64v(section, key, value)?,
            ("sim", "sigma_process") => self.sim.sigma_process = f64v(section, key, value)?,
            ("sim", "occlusion_prob") => self.sim.occlusion_prob = f64v(section, key, value)?,
            ("sim", "occlusion_persistence") => {
                self.sim.occlusion_persistence = f64v(section, key, value)?
            }
            ("sim", "clutter_rate") => self.sim.clutter_rate = f64v(section, key, value)?,
            ("sim", "ego_speed") => self.sim.ego_speed = f64v(section, key, value)?,
            ("sim", "ego_curvature") => self.sim.ego_curvature = f64v(section, key, value)?,
            ("sim", "initial_objects") => self.sim.initial_objects = usizev(section, key, value)?,
            ("sim", "seed") => self.sim.seed = u64v(section, key, value)?,

            ("eval", "match_threshold") => self.eval.match_threshold = f64v(section, key, value)?,
            ("eval", "recall_points") => self.eval.recall_points = usizev(section, key, value)?,
            ("eval", "min_recall") => self.eval.min_recall = f64v(section, key, value)?,

            _ => {
                return Err(Error::Config(format!("unknown config key {section}.{key}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let prob = |v: f64, name: &str, problems: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must be in [0,1], got {v}"));
            }
        };
        if self.model.d_k == 0 {
            problems.push("model.d_k must be >= 1".into());
        }
        if self.model.layers == 0 {
            problems.push("model.layers must be >= 1".into());
        }
        if self.model.det_queries == 0 {
            problems.push("model.det_queries must be >= 1".into());
        }
        if self.model.tau_pos <= 0.0 {
            problems.push("model.tau_pos must be > 0".into());
        }
        prob(self.tracker.tau_score, "tracker.tau_score", &mut problems);
        prob(self.tracker.tau_new, "tracker.tau_new", &mut problems);
        prob(
            self.tracker.track_update_weight,
            "tracker.track_update_weight",
            &mut problems,
        );
        if self.train.seq_len == 0 {
            problems.push("train.seq_len must be >= 1".into());
        }
        if self.train.lr <= 0.0 {
            problems.push("train.lr must be > 0".into());
        }
        if !self.train.grad_clip.is_finite() || self.train.grad_clip < 0.0 {
            problems.push("train.grad_clip must be >= 0".into());
        }
        if self.sim.dt <= 0.0 {
            problems.push("sim.dt must be > 0".into());
        }
        if self.sim.arena <= 0.0 {
            problems.push("sim.arena must be > 0".into());
        }
        if self.sim.frames == 0 {
            problems.push("sim.frames must be >= 1".into());
        }
        if self.sim.birth_rate < 0.0 {
            problems.push("sim.birth_rate must be >= 0".into());
        }
        prob(self.sim.death_prob, "sim.death_prob", &mut problems);
        prob(self.sim.occlusion_prob, "sim.occlusion_prob", &mut problems);
        prob(
            self.sim.occlusion_persistence,
            "sim.occlusion_persistence",
            &mut problems,
        );
        for (v, name) in [
            (self.sim.sigma_pos, "sim.sigma_pos"),
            (self.sim.sigma_size, "sim.sigma_size"),
            (self.sim.sigma_yaw, "sim.sigma_yaw"),
            (self.sim.sigma_process, "sim.sigma_process"),
            (self.sim.clutter_rate, "sim.clutter_rate"),
        ] {
            if v < 0.0 {
                problems.push(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.sim.speed_min < 0.0 || self.sim.speed_max < self.sim.speed_min {
            problems.push("sim speed range must satisfy 0 <= speed_min <= speed_max".into());
        }
        if self.eval.match_threshold <= 0.0 {
            problems.push("eval.match_threshold must be > 0".into());
        }
        if self.eval.recall_points < 2 {
            problems.push("eval.recall_points must be >= 2".into());
        }
        prob(self.eval.min_recall, "eval.min_recall", &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Canonical text form: fixed section and key order, every field present.
    /// Artifacts embed this, and the config hash is computed over it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[model]").unwrap();
        writeln!(w, "d_k = {}", self.model.d_k).unwrap();
        writeln!(w, "layers = {}", self.model.layers).unwrap();
        writeln!(w, "det_queries = {}", self.model.det_queries).unwrap();
        writeln!(w, "aux_token = {}", self.model.aux_token).unwrap();
        writeln!(w, "aux_propagate = {}", self.model.aux_propagate).unwrap();
        writeln!(w, "aux_self_attention = {}", self.model.aux_self_attention).unwrap();
        writeln!(w, "edge_iteration = {}", self.model.edge_iteration).unwrap();
        writeln!(w, "edge_encoding = {}", self.model.edge_encoding.as_str()).unwrap();
        writeln!(w, "self_attn_det_to_track = {}", self.model.self_attn_det_to_track).unwrap();
        writeln!(w, "self_attn_track_to_det = {}", self.model.self_attn_track_to_det).unwrap();
        writeln!(w, "tau_pos = {}", self.model.tau_pos).unwrap();
        writeln!(w, "ref_init_scale = {}", self.model.ref_init_scale).unwrap();
        writeln!(w, "seed = {}", self.model.seed).unwrap();
        writeln!(w, "[tracker]").unwrap();
        writeln!(w, "tau_score = {}", self.tracker.tau_score).unwrap();
        writeln!(w, "tau_new = {}", self.tracker.tau_new).unwrap();
        writeln!(w, "patience = {}", self.tracker.patience).unwrap();
        writeln!(w, "track_update_weight = {}", self.tracker.track_update_weight).unwrap();
        writeln!(w, "[loss]").unwrap();
        writeln!(w, "lambda_cls = {}", self.loss.lambda_cls).unwrap();
        writeln!(w, "lambda_reg = {}", self.loss.lambda_reg).unwrap();
        writeln!(w, "lambda_asso = {}", self.loss.lambda_asso).unwrap();
        writeln!(w, "lambda_ce = {}", self.loss.lambda_ce).unwrap();
        writeln!(w, "focal_alpha_cls = {}", self.loss.focal_alpha_cls).unwrap();
        writeln!(w, "focal_gamma_cls = {}", self.loss.focal_gamma_cls).unwrap();
        writeln!(w, "focal_alpha_asso = {}", self.loss.focal_alpha_asso).unwrap();
        writeln!(w, "focal_gamma_asso = {}", self.loss.focal_gamma_asso).unwrap();
        writeln!(w, "[train]").unwrap();
        writeln!(w, "steps = {}", self.train.steps).unwrap();
        writeln!(w, "seq_len = {}", self.train.seq_len).unwrap();
        writeln!(w, "lr = {}", self.train.lr).unwrap();
        writeln!(w, "weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(w, "beta1 = {}", self.train.beta1).unwrap();
        writeln!(w, "beta2 = {}", self.train.beta2).unwrap();
        writeln!(w, "cosine_decay = {}", self.train.cosine_decay).unwrap();
        writeln!(w, "grad_clip = {}", self.train.grad_clip).unwrap();
        writeln!(w, "scenarios = {}", self.train.scenarios).unwrap();
        writeln!(w, "seed = {}", self.train.seed).unwrap();
        writeln!(w, "log_every = {}", self.train.log_every).unwrap();
        writeln!(w, "[sim]").unwrap();
        writeln!(w, "arena = {}", self.sim.arena).unwrap();
        writeln!(w, "frames = {}", self.sim.frames).unwrap();
        writeln!(w, "dt = {}", self.sim.dt).unwrap();
        writeln!(w, "birth_rate = {}", self.sim.birth_rate).unwrap();
        writeln!(w, "death_prob = {}", self.sim.death_prob).unwrap();
        writeln!(w, "speed_min = {}", self.sim.speed_min).unwrap();
        writeln!(w, "speed_max = {}", self.sim.speed_max).unwrap();
        writeln!(w, "sigma_pos = {}", self.sim.sigma_pos).unwrap();
        writeln!(w, "sigma_size = {}", self.sim.sigma_size).unwrap();
        writeln!(w, "sigma_yaw = {}", self.sim.sigma_yaw).unwrap();
        writeln!(w, "sigma_process = {}", self.sim.sigma_process).unwrap();
        writeln!(w, "occlusion_prob = {}", self.sim.occlusion_prob).unwrap();
        writeln!(w, "occlusion_persistence = {}", self.sim.occlusion_persistence).unwrap();
        writeln!(w, "clutter_rate = {}", self.sim.clutter_rate).unwrap();
        writeln!(w, "ego_speed = {}", self.sim.ego_speed).unwrap();
        writeln!(w, "ego_curvature = {}", self.sim.ego_curvature).unwrap();
        writeln!(w, "initial_objects = {}", self.sim.initial_objects).unwrap();
        writeln!(w, "seed = {}", self.sim.seed).unwrap();
        writeln!(w, "[eval]").unwrap();
        writeln!(w, "match_threshold = {}", self.eval.match_threshold).unwrap();
        writeln!(w, "recall_points = {}", self.eval.recall_points).unwrap();
        writeln!(w, "min_recall = {}", self.eval.min_recall).unwrap();
        s
    }

    /// FNV-1a hash of the canonical text, as fixed-width hex.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_text().as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parse a standalone config text into a raw section map without applying it
/// to a RunConfig. Used by artifact readers that only need a few fields.
pub fn parse_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse(format!("line {}: unterminated section", lineno + 1)))?;
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
        out.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_tracking_thresholds() {
        let c = RunConfig::default();
        assert_eq!(c.tracker.tau_score, 0.3);
        assert_eq!(c.tracker.tau_new, 0.4);
        assert_eq!(c.tracker.patience, 5);
        assert_eq!(c.tracker.track_update_weight, 0.0);
        assert_eq!(c.loss.lambda_cls, 2.0);
        assert_eq!(c.loss.lambda_reg, 0.25);
        assert_eq!(c.loss.lambda_asso, 10.0);
        assert_eq!(c.loss.lambda_ce, 0.1);
        assert_eq!(c.loss.focal_alpha_asso, 0.5);
        assert_eq!(c.loss.focal_gamma_asso, 1.0);
        assert_eq!(c.train.seq_len, 3);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.model.tau_pos, 2.0);
        assert_eq!(c.eval.match_threshold, 2.0);
        assert_eq!(c.eval.recall_points, 40);
        assert_eq!(c.eval.min_recall, 0.1);
    }

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = RunConfig::default();
        c.model.aux_token = true;
        c.model.d_k = 16;
        c.sim.seed = 99;
        c.train.lr = 5e-4;
        let text = c.to_text();
        let parsed = RunConfig::from_text(&text).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_text("[model]\nwarp_drive = true\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn unknown_section_is_rejected() {
        let err = RunConfig::from_text("[magic]\nx = 1\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn key_before_section_is_rejected() {
        let err = RunConfig::from_text("d_k = 8\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn malformed_value_is_rejected() {
        let err = RunConfig::from_text("[model]\nd_k = banana\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let err = RunConfig::from_text("[tracker]\ntau_score = 1.5\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = RunConfig::from_text("[sim]\ndt = 0\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = RunConfig::from_text("[sim]\nsigma_pos = -1\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_and_win() {
        let mut c = RunConfig::from_text("[model]\nd_k = 8\n").unwrap();
        c.apply_override("model.d_k=12").unwrap();
        c.apply_override("tracker.tau_score = 0.25").unwrap();
        assert_eq!(c.model.d_k, 12);
        assert_eq!(c.tracker.tau_score, 0.25);
        assert!(c.apply_override("nosection").is_err());
        assert!(c.apply_override("model.nope=1").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.sim.seed = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let c = RunConfig::from_text("# hello\n\n[model]\n# inner\nd_k = 24\n").unwrap();
        assert_eq!(c.model.d_k, 24);
    }
}
