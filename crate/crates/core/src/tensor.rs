//! Dense f64 tensors with hand-written forward/backward op pairs, a named
//! parameter store with AdamW, and a finite-difference gradient checker.
//!
//! Design notes:
//! - Tensors are value types; ops return new tensors rather than mutating
//!   inputs. Public constructors reject NaN/Inf entries.
//! - Every differentiable op ships as a `..._forward` / `..._backward` pair.
//!   Backward passes take whatever the forward saved (inputs or outputs) and
//!   the upstream gradient, and return input/parameter gradients.
//! - Reductions that run over key axes in attention use `stable_sum`, which
//!   sorts addends by value before accumulating. That makes those outputs
//!   bitwise invariant under permutations of the keys, which the association
//!   block promises.

use crate::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major f64 tensor, rank 1..=3 in practice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from explicit data; rejects non-finite entries and shape/data
    /// length disagreement.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Parse(format!(
                "tensor shape {:?} wants {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite tensor entry {bad}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    /// Non-finite values produced mid-training are caught at the loss value
    /// and in `adamw_step`, where they turn into divergence errors.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        assert!(v.is_finite(), "filled() requires a finite value");
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![v; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(&mut f).collect();
        assert!(
            data.iter().all(|v| v.is_finite()),
            "from_fn produced a non-finite entry"
        );
        Self::from_raw(shape.to_vec(), data)
    }

    /// Uniform(-bound, bound) init.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::from_raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.shape[self.shape.len() - 1];
        &self.data[i * m..(i + 1) * m]
    }

    /// Reinterpret with a new shape of identical volume.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve volume"
        );
        Tensor::from_raw(shape.to_vec(), self.data.clone())
    }

    pub fn transpose2(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::from_raw(vec![m, n], out)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Vertically stack rank-2 tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "vstack of nothing");
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "vstack: column mismatch");
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::from_raw(vec![rows, cols], data)
    }

    /// Extract the row range [lo, hi) of a rank-2 tensor.
    pub fn row_slice(&self, lo: usize, hi: usize) -> Tensor {
        let m = self.cols();
        Tensor::from_raw(vec![hi - lo, m], self.data[lo * m..hi * m].to_vec())
    }

    /// Horizontally concatenate two rank-2 tensors with equal row counts.
    pub fn hstack(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.rows(), b.rows(), "hstack: row mismatch");
        let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Tensor::from_raw(vec![n, ca + cb], data)
    }

    /// Extract the column range [lo, hi) of a rank-2 tensor.
    pub fn col_slice(&self, lo: usize, hi: usize) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(n * (hi - lo));
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + lo..i * m + hi]);
        }
        Tensor::from_raw(vec![n, hi - lo], data)
    }
}

/// Permutation-stable summation: sorts addends by value before accumulating,
/// so any reordering of the inputs yields a bitwise identical result.
pub fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// matmul / linear

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

/// d(a·b) given upstream dy: returns (da, db).
pub fn matmul_backward(dy: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let da = matmul(dy, &b.transpose2());
    let db = matmul(&a.transpose2(), dy);
    (da, db)
}

/// Value aggregation y = a·b where the reduction axis indexes attention keys.
/// Uses `stable_sum` per output element so key permutations commute exactly.
pub fn matmul_stable(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_stable: inner dimensions {k} vs {k2}");
    let mut out = vec![0.0; n * m];
    let mut terms = vec![0.0; k];
    for i in 0..n {
        for j in 0..m {
            for kk in 0..k {
                terms[kk] = a.data[i * k + kk] * b.data[kk * m + j];
            }
            out[i * m + j] = stable_sum(&mut terms);
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

/// y = x·w + b with b broadcast over rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.cols(), w.rows(), "linear: input dim mismatch");
    assert_eq!(w.cols(), b.len(), "linear: bias dim mismatch");
    let mut y = matmul(x, w);
    let m = y.cols();
    for i in 0..y.rows() {
        for j in 0..m {
            y.data[i * m + j] += b.data[j];
        }
    }
    y
}

/// Returns (dx, dw, db).
pub fn linear_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = matmul(dy, &w.transpose2());
    let dw = matmul(&x.transpose2(), dy);
    let m = dy.cols();
    let mut db = vec![0.0; m];
    for i in 0..dy.rows() {
        for j in 0..m {
            db[j] += dy.data[i * m + j];
        }
    }
    (dx, dw, Tensor::from_raw(vec![m], db))
}

// ---------------------------------------------------------------------------
// elementwise

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_raw(
        x.shape.clone(),
        x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

pub fn relu_backward(dy: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(dy.shape, x.shape);
    let data = dy
        .data
        .iter()
        .zip(&x.data)
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_raw(x.shape.clone(), data)
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    Tensor::from_raw(x.shape.clone(), x.data.iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Takes the forward output s = sigmoid(x).
pub fn sigmoid_backward(dy: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(dy.shape, s.shape);
    let data = dy
        .data
        .iter()
        .zip(&s.data)
        .map(|(&g, &sv)| g * sv * (1.0 - sv))
        .collect();
    Tensor::from_raw(s.shape.clone(), data)
}

// ---------------------------------------------------------------------------
// softmax

/// Row softmax with max-subtraction; optional boolean mask (true = allowed).
/// Masked entries are excluded from the normalization and output exactly 0.
/// Every row must keep at least one allowed entry.
pub fn masked_softmax_rows(logits: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let (n, m) = (logits.rows(), logits.cols());
    if let Some(mk) = mask {
        assert_eq!(mk.len(), n * m, "softmax mask length mismatch");
    }
    let allowed = |i: usize, j: usize| mask.map_or(true, |mk| mk[i * m + j]);
    let mut out = vec![0.0; n * m];
    let mut exps: Vec<f64> = Vec::with_capacity(m);
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            if allowed(i, j) {
                mx = mx.max(logits.data[i * m + j]);
            }
        }
        assert!(
            mx > f64::NEG_INFINITY,
            "softmax row {i} has no allowed entries"
        );
        exps.clear();
        for j in 0..m {
            if allowed(i, j) {
                exps.push((logits.data[i * m + j] - mx).exp());
            }
        }
        let mut terms = exps.clone();
        let denom = stable_sum(&mut terms);
        let mut it = exps.iter();
        for j in 0..m {
            if allowed(i, j) {
                out[i * m + j] = it.next().unwrap() / denom;
            }
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    masked_softmax_rows(logits, None)
}

/// Takes the forward output a = softmax(x); masked entries carry a == 0 and
/// therefore receive zero gradient automatically.
pub fn softmax_backward(dy: &Tensor, a: &Tensor) -> Tensor {
    assert_eq!(dy.shape, a.shape);
    let (n, m) = (a.rows(), a.cols());
    let mut dx = vec![0.0; n * m];
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..m {
            dot += dy.data[i * m + j] * a.data[i * m + j];
        }
        for j in 0..m {
            dx[i * m + j] = a.data[i * m + j] * (dy.data[i * m + j] - dot);
        }
    }
    Tensor::from_raw(vec![n, m], dx)
}

// ---------------------------------------------------------------------------
// MLP: alternating linear layers with ReLU between them (none after the last)

/// Saved activations from `mlp_forward`, consumed by `mlp_backward`.
pub struct MlpCache {
    /// Input to each linear layer (length = number of layers).
    layer_inputs: Vec<Tensor>,
}

/// `weights[i]`/`biases[i]` form layer i; ReLU is applied between layers.
pub fn mlp_forward(x: &Tensor, weights: &[&Tensor], biases: &[&Tensor]) -> (Tensor, MlpCache) {
    assert_eq!(weights.len(), biases.len());
    assert!(!weights.is_empty(), "mlp needs at least one layer");
    let mut cache = MlpCache {
        layer_inputs: Vec::with_capacity(weights.len()),
    };
    let mut cur = x.clone();
    for (idx, (w, b)) in weights.iter().zip(biases).enumerate() {
        cache.layer_inputs.push(cur.clone());
        let mut y = linear_forward(&cur, w, b);
        if idx + 1 < weights.len() {
            y = relu_forward(&y);
        }
        cur = y;
    }
    (cur, cache)
}

/// Returns (dx, per-layer (dw, db)).
pub fn mlp_backward(
    dy: &Tensor,
    cache: &MlpCache,
    weights: &[&Tensor],
    biases: &[&Tensor],
) -> (Tensor, Vec<(Tensor, Tensor)>) {
    let layers = weights.len();
    assert_eq!(cache.layer_inputs.len(), layers);
    let mut grads = vec![None; layers];
    let mut g = dy.clone();
    for idx in (0..layers).rev() {
        let x = &cache.layer_inputs[idx];
        if idx + 1 < layers {
            // g currently holds the gradient after this layer's ReLU; map it
            // through the ReLU using the pre-activation = linear output.
            let pre = linear_forward(x, weights[idx], biases[idx]);
            g = relu_backward(&g, &pre);
        }
        let (dx, dw, db) = linear_backward(&g, x, weights[idx]);
        grads[idx] = Some((dw, db));
        g = dx;
    }
    (g, grads.into_iter().map(|o| o.unwrap()).collect())
}

// ---------------------------------------------------------------------------
// Parameter store + AdamW

struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with matching gradient buffers and AdamW state.
/// Iteration order is the sorted name order, so updates and serialization
/// are deterministic.
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.value.shape(), value.shape(), "set_value shape mismatch");
        e.value = value;
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    /// Accumulate into a parameter's gradient buffer.
    pub fn add_grad(&mut self, name: &str, g: &Tensor) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.grad.shape(), g.shape(), "gradient shape mismatch for {name}");
        for (dst, src) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over every parameter from its gradient buffer.
    /// Decoupled weight decay; aborts with a divergence error on any
    /// non-finite gradient. Gradients are left untouched (call `zero_grads`
    /// before the next accumulation).
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        for (name, e) in &self.entries {
            if !e.grad.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for e in self.entries.values_mut() {
            let n = e.value.len();
            for i in 0..n {
                let g = e.grad.data()[i];
                let m = opt.beta1 * e.m.data()[i] + (1.0 - opt.beta1) * g;
                let v = opt.beta2 * e.v.data()[i] + (1.0 - opt.beta2) * g * g;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                let w = e.value.data()[i];
                e.value.data_mut()[i] =
                    w - opt.lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * w);
            }
        }
        Ok(())
    }

    // -- checkpoint serialization --------------------------------------------
    //
    // Byte layout (all integers little-endian):
    //   magic      8 bytes  ASCII "PLAITCK1"
    //   config_len u32      length of the embedded config text
    //   config     bytes    UTF-8 config text (may be empty)
    //   step       u64      optimizer step counter
    //   count      u32      number of parameters
    //   per parameter, in sorted name order:
    //     name_len u32, name bytes (UTF-8)
    //     ndim     u32, dims ndim x u64
    //     data     prod(dims) x f64 (IEEE-754 little-endian)
    // Optimizer moments are not serialized; a loaded store starts cold.

    pub const CHECKPOINT_MAGIC: &'static [u8; 8] = b"PLAITCK1";

    pub fn write_checkpoint(&self, path: &Path, config_text: &str) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(config_text.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in e.value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Parse("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 8)?;
        if magic != Self::CHECKPOINT_MAGIC {
            return Err(Error::Parse("bad checkpoint magic".into()));
        }
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Parse("checkpoint name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let vol: usize = shape.iter().product();
            let mut data = Vec::with_capacity(vol);
            for _ in 0..vol {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let t = Tensor::from_vec(shape, data)
                .map_err(|e| Error::Parse(format!("checkpoint parameter {name}: {e}")))?;
            store.insert(&name, t);
        }
        if pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after checkpoint payload".into()));
        }
        store.step = step;
        Ok((store, config_text))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight init.
pub fn init_linear_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max relative error between `analytic` gradients and central finite
/// differences of the scalar function `f` over every entry of `inputs`.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], analytic: &[Tensor], h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        assert_eq!(t.shape(), analytic[ti].shape(), "analytic grad shape mismatch");
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let fm = f(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Same as `grad_check` but only probes the listed (tensor, element) pairs.
/// Used where a full sweep would be too slow (whole-model audits).
pub fn grad_check_sampled<F>(
    mut f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    samples: &[(usize, usize)],
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(ti, ei) in samples {
        let orig = inputs[ti].data()[ei];
        work[ti].data_mut()[ei] = orig + h;
        let fp = f(&work);
        work[ti].data_mut()[ei] = orig - h;
        let fm = f(&work);
        work[ti].data_mut()[ei] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[ti].data()[ei];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}
