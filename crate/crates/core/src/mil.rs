//! Attention MIL with instance-first classification.
//!
//! For a bag of tile embeddings `h_1..h_N` the model computes
//!
//! ```text
//! u_i = wᵀ tanh(V h_i)            attention score
//! a   = softmax(u)                over the bag
//! S_i = W h_i + b                 tile logits (affine head)
//! s   = Σ_i a_i S_i               slide logits
//! p   = sigmoid(s) | softmax(s)   by task link
//! ```
//!
//! Gradients of the loss with respect to `V`, `w`, `W`, `b` are derived by
//! hand in [`backward`]. Everything runs in `f64`.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Link, TaskClass, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::fsutil;

pub const DEFAULT_ATTENTION_DIM: usize = 128;

/// Row-major `n x d` view of a bag's embeddings.
#[derive(Debug, Clone, Copy)]
pub struct BagView<'a> {
    data: &'a [f64],
    n: usize,
    d: usize,
}

impl<'a> BagView<'a> {
    pub fn new(data: &'a [f64], d: usize) -> Result<Self> {
        if d == 0 || data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(Error::Shape {
                context: "bag matrix",
                expected: d,
                actual: data.len(),
            });
        }
        Ok(BagView {
            data,
            n: data.len() / d,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Offsets of the four parameter blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub d: usize,
    pub m: usize,
    pub c: usize,
}

impl ParamLayout {
    pub fn v(&self) -> Range<usize> {
        0..self.m * self.d
    }
    pub fn w(&self) -> Range<usize> {
        let s = self.m * self.d;
        s..s + self.m
    }
    pub fn head_w(&self) -> Range<usize> {
        let s = self.m * self.d + self.m;
        s..s + self.c * self.d
    }
    pub fn head_b(&self) -> Range<usize> {
        let s = self.m * self.d + self.m + self.c * self.d;
        s..s + self.c
    }
    pub fn len(&self) -> usize {
        self.m * self.d + self.m + self.c * self.d + self.c
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block name for a flat parameter index.
    pub fn block_of(&self, idx: usize) -> &'static str {
        if self.v().contains(&idx) {
            "V"
        } else if self.w().contains(&idx) {
            "w"
        } else if self.head_w().contains(&idx) {
            "psi_W"
        } else {
            "psi_b"
        }
    }
}

/// Learnable parameters of one task model.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub task: TaskSpec,
    pub seed: u64,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl MilModel {
    /// Seeded initialization: `V`, `w` and `W` uniform in `±1/√fan_in`, `b = 0`.
    pub fn new(task: TaskSpec, d: usize, m: usize, seed: u64) -> Result<Self> {
        let mut model = MilModel::zeros(task, d, m)?;
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = model.layout;
        let bound_d = 1.0 / (d as f64).sqrt();
        let bound_m = 1.0 / (m as f64).sqrt();
        for x in &mut model.params[layout.v()] {
            *x = rng.random_range(-bound_d..bound_d);
        }
        for x in &mut model.params[layout.w()] {
            *x = rng.random_range(-bound_m..bound_m);
        }
        for x in &mut model.params[layout.head_w()] {
            *x = rng.random_range(-bound_d..bound_d);
        }
        Ok(model)
    }

    pub fn zeros(task: TaskSpec, d: usize, m: usize) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Invalid(format!(
                "model dimensions must be positive (d = {d}, m = {m})"
            )));
        }
        let layout = ParamLayout {
            d,
            m,
            c: task.n_outputs(),
        };
        Ok(MilModel {
            task,
            seed: 0,
            layout,
            params: vec![0.0; layout.len()],
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }
    pub fn dim(&self) -> usize {
        self.layout.d
    }
    pub fn attention_dim(&self) -> usize {
        self.layout.m
    }
    pub fn n_outputs(&self) -> usize {
        self.layout.c
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn v(&self) -> &[f64] {
        &self.params[self.layout.v()]
    }
    pub fn w(&self) -> &[f64] {
        &self.params[self.layout.w()]
    }
    pub fn head_w(&self) -> &[f64] {
        &self.params[self.layout.head_w()]
    }
    pub fn head_b(&self) -> &[f64] {
        &self.params[self.layout.head_b()]
    }
    pub fn v_mut(&mut self) -> &mut [f64] {
        let r = self.layout.v();
        &mut self.params[r]
    }
    pub fn w_mut(&mut self) -> &mut [f64] {
        let r = self.layout.w();
        &mut self.params[r]
    }
    pub fn head_w_mut(&mut self) -> &mut [f64] {
        let r = self.layout.head_w();
        &mut self.params[r]
    }
    pub fn head_b_mut(&mut self) -> &mut [f64] {
        let r = self.layout.head_b();
        &mut self.params[r]
    }

    fn check_bag(&self, bag: &BagView<'_>) -> Result<()> {
        if bag.dim() != self.layout.d {
            return Err(Error::Shape {
                context: "bag dimension vs model",
                expected: self.layout.d,
                actual: bag.dim(),
            });
        }
        Ok(())
    }
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Unnormalized attention scores, one per tile.
    pub scores: Vec<f64>,
    /// Attention weights (softmax of `scores`).
    pub attention: Vec<f64>,
    /// `tanh(V h_i)`, row-major `n x m`.
    pub hidden: Vec<f64>,
    /// Tile logits, row-major `n x c`.
    pub tile_logits: Vec<f64>,
    pub slide_logits: Vec<f64>,
    /// Distribution over the task's classes. For the sigmoid task this is
    /// `(1 - p, p)` over (Lo, Hi).
    pub probs: Vec<f64>,
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn attention_hidden(bag: &BagView<'_>, v: &[f64], m: usize) -> Vec<f64> {
    let d = bag.dim();
    let mut hidden = Vec::with_capacity(bag.n() * m);
    for i in 0..bag.n() {
        let h = bag.row(i);
        for k in 0..m {
            hidden.push(dot(&v[k * d..(k + 1) * d], h).tanh());
        }
    }
    hidden
}

/// `u_i = wᵀ tanh(V h_i)`; `v` is row-major `m x d`.
pub fn attention_scores(bag: &BagView<'_>, v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let m = w.len();
    check_len("attention matrix V", m * bag.dim(), v.len())?;
    let hidden = attention_hidden(bag, v, m);
    Ok(hidden.chunks(m).map(|t| dot(w, t)).collect())
}

/// Softmax over the bag with max-shift.
pub fn bag_softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `S_i = W h_i + b`; `head_w` is row-major `c x d`.
pub fn instance_logits(bag: &BagView<'_>, head_w: &[f64], head_b: &[f64]) -> Result<Vec<f64>> {
    let c = head_b.len();
    let d = bag.dim();
    check_len("head matrix psi_W", c * d, head_w.len())?;
    let mut out = Vec::with_capacity(bag.n() * c);
    for i in 0..bag.n() {
        let h = bag.row(i);
        for j in 0..c {
            out.push(dot(&head_w[j * d..(j + 1) * d], h) + head_b[j]);
        }
    }
    Ok(out)
}

/// `s = Σ_i a_i S_i` for row-major `S` with `c` columns.
pub fn pool(attention: &[f64], tile_logits: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for (a, row) in attention.iter().zip(tile_logits.chunks(c)) {
        for (acc, x) in s.iter_mut().zip(row) {
            *acc += a * x;
        }
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + s.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Class distribution from slide logits. The sigmoid task yields `(1 - p, p)`.
pub fn link(slide_logits: &[f64], task: &TaskSpec) -> Vec<f64> {
    match task.link {
        Link::Sigmoid => {
            let p = sigmoid(slide_logits[0]);
            vec![1.0 - p, p]
        }
        Link::Softmax => bag_softmax(slide_logits),
    }
}

/// Cross-entropy of the target class, computed from logits: BCE in softplus
/// form for the sigmoid task, `logsumexp(s) - s_target` otherwise.
pub fn loss(slide_logits: &[f64], target: usize, task: &TaskSpec) -> Result<f64> {
    if target >= task.n_classes() {
        return Err(Error::Invalid(format!(
            "target class {target} out of range for {} ({} classes)",
            task.kind,
            task.n_classes()
        )));
    }
    check_len("slide logits", task.n_outputs(), slide_logits.len())?;
    Ok(match task.link {
        Link::Sigmoid => {
            let s = slide_logits[0];
            if target == 1 {
                softplus(-s)
            } else {
                softplus(s)
            }
        }
        Link::Softmax => log_sum_exp(slide_logits) - slide_logits[target],
    })
}

/// Deterministic forward pass retaining every intermediate.
pub fn predict(model: &MilModel, bag: &BagView<'_>) -> Result<ForwardTrace> {
    model.check_bag(bag)?;
    let m = model.attention_dim();
    let c = model.n_outputs();
    let hidden = attention_hidden(bag, model.v(), m);
    let scores: Vec<f64> = hidden.chunks(m).map(|t| dot(model.w(), t)).collect();
    let attention = bag_softmax(&scores);
    let tile_logits = instance_logits(bag, model.head_w(), model.head_b())?;
    let slide_logits = pool(&attention, &tile_logits, c);
    let probs = link(&slide_logits, &model.task);
    Ok(ForwardTrace {
        scores,
        attention,
        hidden,
        tile_logits,
        slide_logits,
        probs,
    })
}

/// Standard attention-MIL ordering: pool embeddings first, then apply the head.
/// With an affine head this equals the instance-first slide logits.
pub fn slide_first_logits(model: &MilModel, bag: &BagView<'_>, attention: &[f64]) -> Vec<f64> {
    let d = bag.dim();
    let mut pooled = vec![0.0; d];
    for (i, a) in attention.iter().enumerate() {
        for (acc, x) in pooled.iter_mut().zip(bag.row(i)) {
            *acc += a * x;
        }
    }
    model
        .head_w()
        .chunks(d)
        .zip(model.head_b())
        .map(|(row, b)| dot(row, &pooled) + b)
        .collect()
}

/// Per-tile class distributions from the tile logits (heatmap "instance" mode).
pub fn tile_probabilities(trace: &ForwardTrace, task: &TaskSpec) -> Vec<Vec<f64>> {
    trace
        .tile_logits
        .chunks(task.n_outputs())
        .map(|s| link(s, task))
        .collect()
}

/// Gradient of the loss, laid out like [`MilModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(layout: ParamLayout) -> Self {
        Gradients {
            layout,
            data: vec![0.0; layout.len()],
        }
    }
    pub fn v(&self) -> &[f64] {
        &self.data[self.layout.v()]
    }
    pub fn w(&self) -> &[f64] {
        &self.data[self.layout.w()]
    }
    pub fn head_w(&self) -> &[f64] {
        &self.data[self.layout.head_w()]
    }
    pub fn head_b(&self) -> &[f64] {
        &self.data[self.layout.head_b()]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }
}

/// Loss and exact analytic gradients for one bag.
pub fn backward(model: &MilModel, bag: &BagView<'_>, target: usize) -> Result<(f64, Gradients)> {
    let trace = predict(model, bag)?;
    let loss = loss(&trace.slide_logits, target, &model.task)?;
    let grads = backward_from_trace(model, bag, &trace, target)?;
    Ok((loss, grads))
}

/// Backpropagation through a trace produced by [`predict`] on the same inputs.
pub fn backward_from_trace(
    model: &MilModel,
    bag: &BagView<'_>,
    trace: &ForwardTrace,
    target: usize,
) -> Result<Gradients> {
    model.check_bag(bag)?;
    let layout = model.layout();
    let (n, d, m, c) = (bag.n(), layout.d, layout.m, layout.c);
    check_len("trace attention", n, trace.attention.len())?;

    // dL/ds
    let g_s: Vec<f64> = match model.task.link {
        Link::Sigmoid => {
            let y = if target == 1 { 1.0 } else { 0.0 };
            vec![sigmoid(trace.slide_logits[0]) - y]
        }
        Link::Softmax => {
            let mut g = trace.probs.clone();
            g[target] -= 1.0;
            g
        }
    };

    let mut grads = Gradients::zeros(layout);
    let (g_v, rest) = grads.data.split_at_mut(m * d);
    let (g_w, rest) = rest.split_at_mut(m);
    let (g_hw, g_hb) = rest.split_at_mut(c * d);

    // Head: dL/dS_i = a_i g_s.
    g_hb.copy_from_slice(&g_s);
    for i in 0..n {
        let a = trace.attention[i];
        let h = bag.row(i);
        for (j, gs) in g_s.iter().enumerate() {
            let k = a * gs;
            for (g, x) in g_hw[j * d..(j + 1) * d].iter_mut().zip(h) {
                *g += k * x;
            }
        }
    }

    // Attention: dL/da_i = g_s · S_i, then through the softmax Jacobian.
    let g_a: Vec<f64> = trace.tile_logits.chunks(c).map(|row| dot(&g_s, row)).collect();
    let mean_g_a = dot(&trace.attention, &g_a);
    let w = model.w();
    for i in 0..n {
        let g_u = trace.attention[i] * (g_a[i] - mean_g_a);
        let t = &trace.hidden[i * m..(i + 1) * m];
        let h = bag.row(i);
        for k in 0..m {
            g_w[k] += g_u * t[k];
            let g_z = g_u * w[k] * (1.0 - t[k] * t[k]);
            for (g, x) in g_v[k * d..(k + 1) * d].iter_mut().zip(h) {
                *g += g_z * x;
            }
        }
    }

    if let Some(idx) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} (flat index {idx})",
            layout.block_of(idx)
        )));
    }
    Ok(grads)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NHIMILCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    task: TaskKind,
    classes: Vec<String>,
    d: usize,
    m: usize,
    c: usize,
    seed: u64,
}

impl MilModel {
    /// Checkpoint layout: magic `NHIMILCK`, `u32` format version, `u32` header
    /// length, JSON header (task, class order, d, m, c, seed), then every
    /// parameter as little-endian `f64` in the order V, w, psi_W, psi_b.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            task: self.task.kind,
            classes: self.task.class_names(),
            d: self.layout.d,
            m: self.layout.m,
            c: self.layout.c,
            seed: self.seed,
        };
        let header = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut input: R, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;

        let mut task = TaskSpec::new(header.task);
        let classes: Vec<TaskClass> = header
            .classes
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()
            .map_err(|e| bad(e.to_string()))?;
        if classes != task.classes {
            let bare = TaskSpec::without_placeholder(header.task).ok();
            match bare {
                Some(b) if b.classes == classes => task = b,
                _ => return Err(bad(format!("class order {:?} not recognised", header.classes))),
            }
        }
        let mut model = MilModel::zeros(task, header.d, header.m)?;
        if model.layout.c != header.c {
            return Err(bad(format!(
                "header says {} outputs but task has {}",
                header.c, model.layout.c
            )));
        }
        model.seed = header.seed;
        let payload = &bytes[body..];
        let expected = model.params.len() * 8;
        if payload.len() != expected {
            return Err(bad(format!(
                "expected {expected} parameter bytes, found {}",
                payload.len()
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(payload.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        MilModel::read_checkpoint(std::io::BufReader::new(file), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskKind;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_bag(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_bag(&mut rng, 4, 3);
        let bag = BagView::new(&data, 3).unwrap();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(attention_scores(&bag, &v, &[0.0, 0.0]).unwrap(), vec![0.0; 4]);
        let w = [0.3, -0.7];
        assert_eq!(attention_scores(&bag, &[0.0; 6], &w).unwrap(), vec![0.0; 4]);
        assert!(attention_scores(&bag, &[0.0; 5], &w).is_err());
    }

    #[test]
    fn attention_scores_scalar_oracle() {
        // N=3, d=2, m=2 evaluated by hand-unrolled scalar expressions.
        let h = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let v = [0.1, 0.2, -0.3, 0.4];
        let w = [1.5, -2.0];
        let bag = BagView::new(&h, 2).unwrap();
        let u = attention_scores(&bag, &v, &w).unwrap();
        for i in 0..3 {
            let (x0, x1) = (h[2 * i], h[2 * i + 1]);
            let t0 = (0.1 * x0 + 0.2 * x1).tanh();
            let t1 = (-0.3 * x0 + 0.4 * x1).tanh();
            assert!(close(u[i], 1.5 * t0 - 2.0 * t1, 1e-15));
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(bag_softmax(&[0.0; 4]), vec![0.25; 4]);
        let a = bag_softmax(&[1000.0, 0.0]);
        assert!(a.iter().all(|x| x.is_finite()));
        assert!(close(a[0], 1.0, 1e-15) && a[1] < 1e-300);
        let a = bag_softmax(&[1.0, 2.0, 3.0]);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, ai) in a.iter().enumerate() {
            assert!(close(*ai, ((i + 1) as f64).exp() / z, 1e-15));
        }
        assert!(close(a[0], 0.0900, 5e-5) && close(a[1], 0.2447, 5e-5) && close(a[2], 0.6652, 5e-5));
    }

    #[test]
    fn instance_logits_and_pool() {
        let h = [1.0, 2.0, 3.0, 4.0];
        let bag = BagView::new(&h, 2).unwrap();
        let s = instance_logits(&bag, &[0.0; 6], &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(s, vec![1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
        let s = instance_logits(&bag, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s, h.to_vec());

        assert_eq!(pool(&[1.0], &[3.0, 4.0], 2), vec![3.0, 4.0]);
        let same = [0.5, -2.0, 0.5, -2.0, 0.5, -2.0];
        let p = pool(&[0.2, 0.3, 0.5], &same, 2);
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], -2.0, 1e-15));
        let p = pool(&[0.2, 0.8], &[1.0, 10.0, 3.0, 20.0], 2);
        assert!(close(p[0], 0.2 + 2.4, 1e-15) && close(p[1], 2.0 + 16.0, 1e-14));
    }

    #[test]
    fn link_and_loss_examples() {
        let neu = TaskSpec::new(TaskKind::Neutrophil);
        let low = TaskSpec::new(TaskKind::NancyLow);
        let high = TaskSpec::new(TaskKind::NancyHigh);
        assert_eq!(link(&[0.0], &neu), vec![0.5, 0.5]);
        for p in link(&[0.0; 3], &low) {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let p = link(&[2.0, 1.0, 0.0, -1.0], &high);
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|x| x.exp()).sum();
        assert!(close(p[0], 2f64.exp() / z, 1e-15) && close(p[3], (-1f64).exp() / z, 1e-15));

        assert!(close(loss(&[0.0], 1, &neu).unwrap(), std::f64::consts::LN_2, 1e-15));
        let e = std::f64::consts::E;
        assert!(close(
            loss(&[1.0, 0.0, 0.0], 0, &low).unwrap(),
            (e + 2.0).ln() - 1.0,
            1e-14
        ));
        assert!(loss(&[50.0], 1, &neu).unwrap() < 1e-20);
        assert!(loss(&[60.0, 0.0, 0.0], 0, &low).unwrap() < 1e-20);
        assert!(loss(&[-800.0], 1, &neu).unwrap().is_finite());
        assert!(loss(&[0.0; 3], 3, &low).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = MilModel::zeros(TaskSpec::new(TaskKind::NancyHigh), 3, 5).unwrap();
        let data = [0.3, 1.0, -2.0, 4.0, 0.0, 1.0];
        let t = predict(&model, &BagView::new(&data, 3).unwrap()).unwrap();
        assert_eq!(t.attention, vec![0.5, 0.5]);
        assert_eq!(t.probs, vec![0.25; 4]);
        let wrong = [1.0, 2.0];
        assert!(predict(&model, &BagView::new(&wrong, 2).unwrap()).is_err());
    }

    #[test]
    fn singleton_bag_has_no_attention_gradient() {
        let model = MilModel::new(TaskSpec::new(TaskKind::NancyLow), 4, 3, 9).unwrap();
        let data = [0.1, -0.4, 0.9, 0.3];
        let (_, g) = backward(&model, &BagView::new(&data, 4).unwrap(), 2).unwrap();
        assert!(g.v().iter().all(|&x| x == 0.0));
        assert!(g.w().iter().all(|&x| x == 0.0));
        assert!(g.head_w().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for kind in TaskKind::ALL {
            let model = MilModel::new(TaskSpec::new(kind), 7, 5, 42).unwrap();
            let bytes = model.checkpoint_bytes();
            let back = MilModel::read_checkpoint(&bytes[..], Path::new("mem")).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.checkpoint_bytes(), bytes);
        }
        let bare = TaskSpec::without_placeholder(TaskKind::NancyLow).unwrap();
        let model = MilModel::new(bare, 3, 2, 1).unwrap();
        let back = MilModel::read_checkpoint(&model.checkpoint_bytes()[..], Path::new("mem")).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let model = MilModel::new(TaskSpec::new(TaskKind::Neutrophil), 4, 2, 0).unwrap();
        let bytes = model.checkpoint_bytes();
        let err = MilModel::read_checkpoint(&bytes[..bytes.len() - 8], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("parameter bytes"), "{err}");
    }
}
