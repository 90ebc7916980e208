//! Text artifacts: scenario logs, tracking results, evaluation reports,
//! training logs, and run manifests.
//!
//! Every artifact is a plain text file that starts with a format tag line,
//! then the full producing config between `#config` and `#endconfig`, then
//! line-delimited data records. Floats are written with 17 significant
//! digits so parsing reproduces them bit for bit. Identical inputs produce
//! byte-identical files: nothing here depends on time, paths, or locale.

use crate::config::RunConfig;
use crate::geometry::{BoxState, EgoPose};
use crate::metrics::{EvalReport, MotBox, RecallPoint};
use crate::simworld::{ObsEncoder, Scenario};
use crate::tensor::Tensor;
use crate::training::{GtFrame, TrainFrame};
use crate::{Error, Result};
use std::fmt::Write as _;

const SCENARIO_TAG: &str = "#plait scenario v1";
const RESULTS_TAG: &str = "#plait results v1";
const REPORT_TAG: &str = "#plait report v1";
const TRAINLOG_TAG: &str = "#plait training-log v1";
const MANIFEST_TAG: &str = "#plait manifest v1";

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// One observation token as stored in a scenario file: what the decoder
/// consumes, plus the source id for diagnostics (`None` marks clutter).
#[derive(Debug, Clone, PartialEq)]
pub struct ObsToken {
    pub position: [f64; 3],
    pub embedding: Vec<f64>,
    pub source: Option<u64>,
}

/// One frame of a parsed scenario file.
#[derive(Debug, Clone)]
pub struct LogFrame {
    pub ego: EgoPose,
    pub gt: GtFrame,
    pub tokens: Vec<ObsToken>,
}

/// A parsed scenario file: the producing config plus per-frame records.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub config: RunConfig,
    pub frames: Vec<LogFrame>,
}

/// Counts reported by the simulate command and recountable from the file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioStats {
    pub frames: usize,
    pub objects: usize,
    pub gt_boxes: usize,
    pub observations: usize,
    pub clutter: usize,
}

impl ScenarioFile {
    /// Rebuilds decoder-ready frames. Times are `index * dt` from the
    /// embedded config, exactly as the generator assigned them.
    pub fn train_frames(&self) -> Vec<TrainFrame> {
        let d = self.config.model.d_k;
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let n = f.tokens.len();
                let mut emb = Vec::with_capacity(n * d);
                let mut pos = Vec::with_capacity(n * 3);
                for tok in &f.tokens {
                    emb.extend_from_slice(&tok.embedding);
                    pos.extend_from_slice(&tok.position);
                }
                TrainFrame {
                    obs_emb: Tensor::from_vec(vec![n, d], emb).unwrap(),
                    obs_pos: Tensor::from_vec(vec![n, 3], pos).unwrap(),
                    gt: f.gt.clone(),
                    ego: f.ego,
                    time: i as f64 * self.config.sim.dt,
                }
            })
            .collect()
    }

    /// Ground truth as evaluator boxes, one list per frame.
    pub fn gt_mot(&self) -> Vec<Vec<MotBox>> {
        self.frames
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

    pub fn stats(&self) -> ScenarioStats {
        let mut ids = std::collections::BTreeSet::new();
        let mut gt_boxes = 0;
        let mut observations = 0;
        let mut clutter = 0;
        for f in &self.frames {
            gt_boxes += f.gt.ids.len();
            ids.extend(f.gt.ids.iter().copied());
            observations += f.tokens.len();
            clutter += f.tokens.iter().filter(|t| t.source.is_none()).count();
        }
        ScenarioStats {
            frames: self.frames.len(),
            objects: ids.len(),
            gt_boxes,
            observations,
            clutter,
        }
    }
}

fn push_header(out: &mut String, tag: &str, cfg: &RunConfig) {
    out.push_str(tag);
    out.push('\n');
    out.push_str("#config\n");
    out.push_str(&cfg.to_text());
    out.push_str("#endconfig\n");
}

/// Serializes a generated scenario. Observation embeddings are computed here
/// with the fixed sensor encoder so the file is self-contained.
pub fn scenario_to_string(cfg: &RunConfig, scenario: &Scenario, encoder: &ObsEncoder) -> String {
    let mut out = String::new();
    push_header(&mut out, SCENARIO_TAG, cfg);
    for (i, f) in scenario.frames.iter().enumerate() {
        let emb = encoder.encode_all(&f.observations);
        write!(
            out,
            "{i} {} {} {} {}",
            fmt_f(f.ego.translation[0]),
            fmt_f(f.ego.translation[1]),
            fmt_f(f.ego.translation[2]),
            fmt_f(f.ego.yaw)
        )
        .unwrap();
        write!(out, " gt {}", f.gt.ids.len()).unwrap();
        for (b, id) in f.gt.boxes.iter().zip(&f.gt.ids) {
            write!(out, " {id}").unwrap();
            for v in b.to_vec9() {
                write!(out, " {}", fmt_f(v)).unwrap();
            }
        }
        write!(out, " obs {}", f.observations.len()).unwrap();
        for (o, obs) in f.observations.iter().enumerate() {
            for k in 0..3 {
                write!(out, " {}", fmt_f(obs.box_state.center[k])).unwrap();
            }
            for k in 0..emb.cols() {
                write!(out, " {}", fmt_f(emb.at2(o, k))).unwrap();
            }
            match obs.gt_id {
                Some(id) => write!(out, " {id}").unwrap(),
                None => out.push_str(" -"),
            }
        }
        out.push('\n');
    }
    out
}

/// Token stream over one data line, with line-numbered errors.
struct Toks<'a> {
    it: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Toks<'a> {
    fn new(s: &'a str, line: usize) -> Self {
        Toks {
            it: s.split_whitespace(),
            line,
        }
    }

    fn raw(&mut self, what: &str) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| Error::Parse(format!("line {}: missing {what}", self.line)))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let t = self.raw(what)?;
        t.parse()
            .map_err(|_| Error::Parse(format!("line {}: {what} is not a number: {t:?}", self.line)))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let t = self.raw(what)?;
        t.parse()
            .map_err(|_| Error::Parse(format!("line {}: {what} is not an integer: {t:?}", self.line)))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let t = self.raw(what)?;
        t.parse()
            .map_err(|_| Error::Parse(format!("line {}: {what} is not a count: {t:?}", self.line)))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let t = self.raw(kw)?;
        if t == kw {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "line {}: expected {kw:?}, got {t:?}",
                self.line
            )))
        }
    }

    fn source(&mut self) -> Result<Option<u64>> {
        let t = self.raw("source id")?;
        if t == "-" {
            Ok(None)
        } else {
            t.parse().map(Some).map_err(|_| {
                Error::Parse(format!("line {}: bad source id {t:?}", self.line))
            })
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.it.next() {
            Some(t) => Err(Error::Parse(format!(
                "line {}: trailing token {t:?}",
                self.line
            ))),
            None => Ok(()),
        }
    }
}

/// Checks the tag line, extracts the embedded config, and returns the
/// remaining data lines with their 1-based line numbers.
fn strip_header<'a>(text: &'a str, tag: &str) -> Result<(RunConfig, Vec<(usize, &'a str)>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == tag => {}
        Some((_, first)) => {
            return Err(Error::Parse(format!(
                "expected {tag:?} on line 1, got {:?}",
                first.trim()
            )))
        }
        None => return Err(Error::Parse("empty file".into())),
    }
    match lines.next() {
        Some((_, l)) if l.trim() == "#config" => {}
        _ => return Err(Error::Parse("line 2: expected #config".into())),
    }
    let mut cfg_text = String::new();
    let mut data = Vec::new();
    let mut in_cfg = true;
    for (i, l) in lines {
        if in_cfg {
            if l.trim() == "#endconfig" {
                in_cfg = false;
            } else {
                cfg_text.push_str(l);
                cfg_text.push('\n');
            }
            continue;
        }
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        data.push((i + 1, l));
    }
    if in_cfg {
        return Err(Error::Parse("missing #endconfig".into()));
    }
    let config = RunConfig::from_text(&cfg_text)?;
    Ok((config, data))
}

fn box_from_toks(t: &mut Toks) -> Result<BoxState> {
    let mut v = [0.0; 9];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = t.f64(&format!("box field {k}"))?;
    }
    if v[3] <= 0.0 || v[4] <= 0.0 || v[5] <= 0.0 {
        return Err(Error::Parse(format!(
            "line {}: box sizes must be positive",
            t.line
        )));
    }
    Ok(BoxState::new(
        [v[0], v[1], v[2]],
        [v[3], v[4], v[5]],
        v[6],
        [v[7], v[8]],
    ))
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile> {
    let (config, data) = strip_header(text, SCENARIO_TAG)?;
    let d = config.model.d_k;
    let mut frames = Vec::new();
    for (lineno, line) in data {
        let mut t = Toks::new(line, lineno);
        let idx = t.usize("frame index")?;
        if idx != frames.len() {
            return Err(Error::Parse(format!(
                "line {lineno}: frame {idx} out of order, expected {}",
                frames.len()
            )));
        }
        let ego = EgoPose {
            translation: [t.f64("ego x")?, t.f64("ego y")?, t.f64("ego z")?],
            yaw: t.f64("ego yaw")?,
        };
        t.keyword("gt")?;
        let n_gt = t.usize("gt count")?;
        let mut gt = GtFrame::default();
        for _ in 0..n_gt {
            gt.ids.push(t.u64("gt id")?);
            gt.boxes.push(box_from_toks(&mut t)?);
        }
        t.keyword("obs")?;
        let n_obs = t.usize("observation count")?;
        let mut tokens = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let position = [t.f64("obs x")?, t.f64("obs y")?, t.f64("obs z")?];
            let mut embedding = Vec::with_capacity(d);
            for k in 0..d {
                embedding.push(t.f64(&format!("embedding float {k}"))?);
            }
            tokens.push(ObsToken {
                position,
                embedding,
                source: t.source()?,
            });
        }
        t.finish()?;
        // The file does not store visibility; an object was visible exactly
        // when some observation carries its id as source.
        gt.visible = gt
            .ids
            .iter()
            .map(|id| tokens.iter().any(|tok| tok.source == Some(*id)))
            .collect();
        frames.push(LogFrame { ego, gt, tokens });
    }
    if frames.len() != config.sim.frames {
        return Err(Error::Parse(format!(
            "scenario file has {} frames but its config says {}",
            frames.len(),
            config.sim.frames
        )));
    }
    Ok(ScenarioFile { config, frames })
}

/// One emitted track box in a results file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub box_state: BoxState,
    pub score: f64,
}

/// A parsed results file. The frame count is the embedded config's
/// `sim.frames`; trailing empty frames carry no records.
#[derive(Debug, Clone)]
pub struct ResultsFile {
    pub config: RunConfig,
    pub records: Vec<TrackRecord>,
}

impl ResultsFile {
    pub fn frame_count(&self) -> usize {
        self.config.sim.frames
    }

    /// Records regrouped per frame as evaluator boxes.
    pub fn mot_frames(&self) -> Vec<Vec<MotBox>> {
        let mut out = vec![Vec::new(); self.frame_count()];
        for r in &self.records {
            out[r.frame].push(MotBox::new(
                r.id,
                r.box_state.center[0],
                r.box_state.center[1],
                r.score,
            ));
        }
        out
    }
}

pub fn results_to_string(cfg: &RunConfig, records: &[TrackRecord]) -> String {
    let mut out = String::new();
    push_header(&mut out, RESULTS_TAG, cfg);
    for r in records {
        write!(out, "{} {}", r.frame, r.id).unwrap();
        for v in r.box_state.to_vec9() {
            write!(out, " {}", fmt_f(v)).unwrap();
        }
        writeln!(out, " {}", fmt_f(r.score)).unwrap();
    }
    out
}

pub fn parse_results(text: &str) -> Result<ResultsFile> {
    let (config, data) = strip_header(text, RESULTS_TAG)?;
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in data {
        let mut t = Toks::new(line, lineno);
        let frame = t.usize("frame index")?;
        if frame >= config.sim.frames {
            return Err(Error::Parse(format!(
                "line {lineno}: frame {frame} outside the {}-frame scenario",
                config.sim.frames
            )));
        }
        let id = t.u64("track id")?;
        if !seen.insert((frame, id)) {
            return Err(Error::Parse(format!(
                "line {lineno}: track {id} reported twice in frame {frame}"
            )));
        }
        let box_state = box_from_toks(&mut t)?;
        let score = t.f64("score")?;
        t.finish()?;
        records.push(TrackRecord {
            frame,
            id,
            box_state,
            score,
        });
    }
    Ok(ResultsFile { config, records })
}

const CURVE_COLUMNS: &str = "target threshold motar mota recall ids fp fn tp motp";

pub fn report_to_string(cfg: &RunConfig, report: &EvalReport) -> String {
    let mut out = String::new();
    push_header(&mut out, REPORT_TAG, cfg);
    writeln!(out, "amota: {}", fmt_f(report.amota)).unwrap();
    writeln!(out, "amotp: {}", fmt_f(report.amotp)).unwrap();
    writeln!(out, "best_recall: {}", fmt_f(report.best_recall)).unwrap();
    writeln!(out, "mota: {}", fmt_f(report.mota)).unwrap();
    writeln!(out, "ids: {}", report.ids).unwrap();
    writeln!(out, "fp: {}", report.fp).unwrap();
    writeln!(out, "fn: {}", report.fn_count).unwrap();
    writeln!(out, "tp: {}", report.tp).unwrap();
    writeln!(out, "recall: {}", fmt_f(report.recall)).unwrap();
    writeln!(out, "curve: {CURVE_COLUMNS}").unwrap();
    for c in &report.curve {
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            fmt_f(c.target),
            fmt_f(c.threshold),
            fmt_f(c.motar),
            fmt_f(c.mota),
            fmt_f(c.recall),
            c.ids,
            c.fp,
            c.fn_count,
            c.tp,
            fmt_f(c.motp)
        )
        .unwrap();
    }
    out
}

pub fn parse_report(text: &str) -> Result<(RunConfig, EvalReport)> {
    let (config, data) = strip_header(text, REPORT_TAG)?;
    let mut report = EvalReport {
        amota: f64::NAN,
        amotp: f64::NAN,
        best_recall: f64::NAN,
        mota: f64::NAN,
        ids: 0,
        fp: 0,
        fn_count: 0,
        tp: 0,
        recall: f64::NAN,
        curve: Vec::new(),
    };
    let mut in_curve = false;
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in data {
        if !in_curve {
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::Parse(format!("line {lineno}: expected key: value, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "curve" {
                in_curve = true;
                continue;
            }
            seen.insert(key.to_string());
            let fv = || -> Result<f64> {
                value.parse().map_err(|_| {
                    Error::Parse(format!("line {lineno}: {key} is not a number: {value:?}"))
                })
            };
            let iv = || -> Result<usize> {
                value.parse().map_err(|_| {
                    Error::Parse(format!("line {lineno}: {key} is not a count: {value:?}"))
                })
            };
            match key {
                "amota" => report.amota = fv()?,
                "amotp" => report.amotp = fv()?,
                "best_recall" => report.best_recall = fv()?,
                "mota" => report.mota = fv()?,
                "ids" => report.ids = iv()?,
                "fp" => report.fp = iv()?,
                "fn" => report.fn_count = iv()?,
                "tp" => report.tp = iv()?,
                "recall" => report.recall = fv()?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {lineno}: unknown report key {other:?}"
                    )))
                }
            }
        } else {
            let mut t = Toks::new(line, lineno);
            let point = RecallPoint {
                target: t.f64("target")?,
                threshold: t.f64("threshold")?,
                motar: t.f64("motar")?,
                mota: t.f64("mota")?,
                recall: t.f64("recall")?,
                ids: t.usize("ids")?,
                fp: t.usize("fp")?,
                fn_count: t.usize("fn")?,
                tp: t.usize("tp")?,
                motp: t.f64("motp")?,
            };
            t.finish()?;
            report.curve.push(point);
        }
    }
    for key in ["amota", "amotp", "best_recall", "mota", "recall"] {
        if !seen.contains(key) {
            return Err(Error::Parse(format!("report is missing {key:?}")));
        }
    }
    Ok((config, report))
}

/// One optimizer-step record of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub asso: f64,
    pub ce: f64,
    pub grad_norm: f64,
}

pub fn training_log_to_string(cfg: &RunConfig, entries: &[LogEntry]) -> String {
    let mut out = String::new();
    push_header(&mut out, TRAINLOG_TAG, cfg);
    out.push_str("# step total cls reg asso ce grad_norm\n");
    for e in entries {
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            e.step,
            fmt_f(e.total),
            fmt_f(e.cls),
            fmt_f(e.reg),
            fmt_f(e.asso),
            fmt_f(e.ce),
            fmt_f(e.grad_norm)
        )
        .unwrap();
    }
    out
}

pub fn parse_training_log(text: &str) -> Result<(RunConfig, Vec<LogEntry>)> {
    let (config, data) = strip_header(text, TRAINLOG_TAG)?;
    let mut entries = Vec::new();
    for (lineno, line) in data {
        let mut t = Toks::new(line, lineno);
        let e = LogEntry {
            step: t.usize("step")?,
            total: t.f64("total")?,
            cls: t.f64("cls")?,
            reg: t.f64("reg")?,
            asso: t.f64("asso")?,
            ce: t.f64("ce")?,
            grad_norm: t.f64("grad_norm")?,
        };
        t.finish()?;
        entries.push(e);
    }
    Ok((config, entries))
}

/// Small provenance record written next to every artifact. Contains nothing
/// volatile, so reruns produce identical manifests.
pub fn manifest_to_string(command: &str, cfg: &RunConfig, artifacts: &[(&str, &str)]) -> String {
    let mut out = String::new();
    out.push_str(MANIFEST_TAG);
    out.push('\n');
    writeln!(out, "command: {command}").unwrap();
    writeln!(out, "config_hash: {}", cfg.hash()).unwrap();
    writeln!(out, "model_seed: {}", cfg.model.seed).unwrap();
    writeln!(out, "train_seed: {}", cfg.train.seed).unwrap();
    writeln!(out, "sim_seed: {}", cfg.sim.seed).unwrap();
    for (role, name) in artifacts {
        writeln!(out, "artifact: {role} {name}").unwrap();
    }
    out
}
