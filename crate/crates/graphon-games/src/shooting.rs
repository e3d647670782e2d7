//! Neural shooting solver for general graphons.
//!
//! The equilibrium's backward-forward structure is recast as a pure
//! initial-value problem: a small feedforward network `φ_θ : x ↦ u(0,·)`
//! guesses the initial value function per player index, the coupled
//! value / distribution / aggregate system is integrated forward in time by
//! explicit Euler over a sampled population, and θ is fit by gradient descent
//! on the terminal mismatch `u(T,·) − g`. Gradients are exact reverse-mode
//! derivatives of the discretized system (discretize-then-optimize), so the
//! optimizer sees the same arithmetic the integrator performs. The aggregate
//! felt by each sample is resolved with the previous step's distribution
//! (lagged evaluation), which keeps every Euler step explicit at an O(dt)
//! cost absorbed by the integrator's order.

use crate::graphon::{block_of, Graphon, GraphonError};
use crate::model::{GameModel, InitialLaw, ModelError, PlayerParams, MAX_STATES};
use crate::numerics::{RngStream, TimeGrid};
use log::debug;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

/// Checkpoint format version written into every serialized network.
pub const NET_FORMAT_VERSION: u32 = 1;

/// Hidden-layer width of the default architecture.
const HIDDEN_WIDTH: usize = 32;

/// Training aborts when the batch loss exceeds this.
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ShootingError {
    #[error("batch must contain at least one sampled index")]
    EmptyBatch,
    #[error("sampled index {x} outside [0,1]")]
    IndexOutOfDomain { x: f64 },
    #[error("batch fields must have one entry per index")]
    BatchShape,
    #[error("network architecture invalid: {what}")]
    BadArchitecture { what: String },
    #[error("flat parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("training configuration invalid: {what}")]
    BadConfig { what: &'static str },
    #[error(
        "non-finite state at step {step} (t = {t}) for sample {index}; \
         reduce the step size or learning rate"
    )]
    NonFiniteState { step: usize, t: f64, index: usize },
    #[error("training diverged at iteration {iteration} (loss {loss:.3e}); lower the learning rate")]
    Divergence { iteration: usize, loss: f64 },
    #[error(transparent)]
    Graphon(#[from] GraphonError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One fully connected layer: `rows × cols` weights stored row-major plus a
/// bias per output row — the "layer tensor with shape header" of the
/// checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Parameters θ of the initial-value network `φ_θ : [0,1] → ℝⁿ`: a fully
/// connected net with tanh hidden layers and a linear output. Serializes to
/// a versioned JSON list of shaped layer tensors that round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub version: u32,
    /// Hidden activation; only `"tanh"` is supported.
    pub activation: String,
    /// Layer sizes from the scalar input to the n-state output.
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetParams {
    /// Fresh default network (two tanh layers of width 32, linear `n_out`
    /// output) with entries drawn uniformly from `[−s, s]`,
    /// `s = sqrt(1/fan_in)`, using the dedicated init stream of `seed`.
    pub fn init(n_out: usize, seed: u64) -> Result<Self, ShootingError> {
        Self::init_with_widths(&[1, HIDDEN_WIDTH, HIDDEN_WIDTH, n_out], seed)
    }

    /// Fresh network with caller-chosen layer sizes (input width must be 1).
    pub fn init_with_widths(widths: &[usize], seed: u64) -> Result<Self, ShootingError> {
        check_widths(widths)?;
        let mut rng = RngStream::new(seed, 0).rng();
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (cols, rows) = (pair[0], pair[1]);
                let s = (1.0 / cols as f64).sqrt();
                Layer {
                    rows,
                    cols,
                    w: (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect(),
                    b: (0..rows).map(|_| rng.gen_range(-s..=s)).collect(),
                }
            })
            .collect();
        Ok(NetParams {
            version: NET_FORMAT_VERSION,
            activation: "tanh".to_string(),
            widths: widths.to_vec(),
            layers,
        })
    }

    /// All-zero parameters with the default architecture.
    pub fn zeros(n_out: usize) -> Self {
        let widths = [1, HIDDEN_WIDTH, HIDDEN_WIDTH, n_out];
        let layers = widths
            .windows(2)
            .map(|pair| Layer {
                rows: pair[1],
                cols: pair[0],
                w: vec![0.0; pair[1] * pair[0]],
                b: vec![0.0; pair[1]],
            })
            .collect();
        NetParams {
            version: NET_FORMAT_VERSION,
            activation: "tanh".to_string(),
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.rows * (l.cols + 1)).sum()
    }

    /// Structural soundness: version, activation, shape agreement between
    /// the width list and every layer tensor, and finite entries.
    pub fn validate(&self) -> Result<(), ShootingError> {
        let bad = |what: String| Err(ShootingError::BadArchitecture { what });
        if self.version != NET_FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.version));
        }
        if self.activation != "tanh" {
            return bad(format!("unsupported activation {:?}", self.activation));
        }
        check_widths(&self.widths)?;
        if self.layers.len() + 1 != self.widths.len() {
            return bad(format!(
                "{} layers do not fit {} widths",
                self.layers.len(),
                self.widths.len()
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.cols != self.widths[i]
                || layer.rows != self.widths[i + 1]
                || layer.w.len() != layer.rows * layer.cols
                || layer.b.len() != layer.rows
            {
                return bad(format!("layer {i} tensors disagree with the width list"));
            }
            if layer.w.iter().chain(&layer.b).any(|v| !v.is_finite()) {
                return bad(format!("layer {i} contains non-finite entries"));
            }
        }
        Ok(())
    }

    /// Flatten to a single coordinate vector: per layer, weights (row-major)
    /// then biases, in layer order. The gradient uses the same layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.w);
            flat.extend_from_slice(&layer.b);
        }
        flat
    }

    /// Same shapes as `self` with values taken from `flat`.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self, ShootingError> {
        if flat.len() != self.n_params() {
            return Err(ShootingError::ParamLength {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut at = 0;
        for layer in &mut out.layers {
            layer.w.copy_from_slice(&flat[at..at + layer.rows * layer.cols]);
            at += layer.rows * layer.cols;
            layer.b.copy_from_slice(&flat[at..at + layer.rows]);
            at += layer.rows;
        }
        Ok(out)
    }
}

fn check_widths(widths: &[usize]) -> Result<(), ShootingError> {
    if widths.len() < 2 || widths[0] != 1 || widths.iter().any(|&w| w == 0) {
        return Err(ShootingError::BadArchitecture {
            what: format!("widths {widths:?} must start at 1 and be positive"),
        });
    }
    Ok(())
}

/// Forward pass keeping every layer's post-activation vector; the first entry
/// is the raw input, the last the linear output.
fn net_forward(params: &NetParams, x: f64) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len() + 1);
    acts.push(vec![x]);
    for (li, layer) in params.layers.iter().enumerate() {
        let out = {
            let input = &acts[li];
            let hidden = li + 1 < params.layers.len();
            (0..layer.rows)
                .map(|r| {
                    let mut sum = layer.b[r];
                    let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (wv, iv) in row.iter().zip(input) {
                        sum += wv * iv;
                    }
                    if hidden {
                        sum.tanh()
                    } else {
                        sum
                    }
                })
                .collect()
        };
        acts.push(out);
    }
    acts
}

/// Network output `φ_θ(x)`: the guessed initial values `u(0,·)` at index `x`.
pub fn phi_theta(params: &NetParams, x: f64) -> Vec<f64> {
    net_forward(params, x).pop().unwrap()
}

/// Accumulate `∂(ȳ·output)/∂θ` into `grad` (flat layout of [`NetParams::to_flat`])
/// given the forward activations. Dense backprop with `tanh' = 1 − h²`.
fn net_vjp(params: &NetParams, acts: &[Vec<f64>], ybar: &[f64], grad: &mut [f64]) {
    let mut offsets = Vec::with_capacity(params.layers.len());
    let mut at = 0;
    for layer in &params.layers {
        offsets.push(at);
        at += layer.rows * (layer.cols + 1);
    }
    let mut delta = ybar.to_vec();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &acts[li];
        let off = offsets[li];
        for r in 0..layer.rows {
            let d = delta[r];
            let wrow = &mut grad[off + r * layer.cols..off + (r + 1) * layer.cols];
            for (g, iv) in wrow.iter_mut().zip(input) {
                *g += d * iv;
            }
        }
        let boff = off + layer.rows * layer.cols;
        for r in 0..layer.rows {
            grad[boff + r] += delta[r];
        }
        if li > 0 {
            // Pull the cotangent through the weights, then through the tanh
            // that produced this layer's input.
            let mut prev = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let d = delta[r];
                let wrow = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                for (p, wv) in prev.iter_mut().zip(wrow) {
                    *p += d * wv;
                }
            }
            for (p, h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
    }
}

/// A sampled population: indices together with their parameters and initial
/// laws, the unit a forward integration and a training iteration run over.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub indices: Vec<f64>,
    pub params: Vec<PlayerParams>,
    pub p0: Vec<Vec<f64>>,
}

impl SampleBatch {
    /// Batch at caller-chosen indices; parameters and initial laws are looked
    /// up from the model's parameter map and the initial-law map.
    pub fn from_indices(
        model: &GameModel,
        law: &InitialLaw,
        indices: Vec<f64>,
    ) -> Result<Self, ShootingError> {
        if indices.is_empty() {
            return Err(ShootingError::EmptyBatch);
        }
        law.validate(model.n_states())?;
        for &x in &indices {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(ShootingError::IndexOutOfDomain { x });
            }
        }
        let params = indices.iter().map(|&x| model.params.at(x).clone()).collect();
        let p0 = indices.iter().map(|&x| law.at(x).to_vec()).collect();
        Ok(SampleBatch { indices, params, p0 })
    }

    /// Batch of `n` indices drawn uniformly from the given generator.
    pub fn sample(
        model: &GameModel,
        law: &InitialLaw,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ShootingError> {
        if n == 0 {
            return Err(ShootingError::EmptyBatch);
        }
        let indices = (0..n).map(|_| rng.gen::<f64>()).collect();
        Self::from_indices(model, law, indices)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Interaction weights restricted to a sampled population, with
/// structure-aware fast paths. `apply` maps per-sample impact values to
/// per-sample aggregates `out_l = (1/N)·Σ_j w(x_l, x_j)·values[j]`, summing
/// in index order for determinism. Every kernel is symmetric, so the same
/// routine is also the adjoint (transposed) reduction of reverse-mode
/// differentiation.
pub(crate) enum SampledKernel {
    /// `w ≡ p`: every sample feels `p · mean(values)`.
    Constant { density: f64 },
    /// Per-block partial sums followed by a K×K contraction.
    Block {
        weights: Vec<Vec<f64>>,
        member: Vec<usize>,
    },
    /// `w(x,y) = x^{-g}·y^{-g}` factorizes; one weighted mean serves all.
    Separable { factor: Vec<f64> },
    /// Materialized N×N weights for kernels without exploitable structure.
    Dense { w: Vec<f64>, n: usize },
}

impl SampledKernel {
    pub(crate) fn new(graphon: &Graphon, indices: &[f64]) -> Result<Self, GraphonError> {
        for &x in indices {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(GraphonError::IndexOutOfDomain { x });
            }
        }
        Ok(match graphon {
            Graphon::Constant { density } => SampledKernel::Constant { density: *density },
            Graphon::Block { weights, masses } => SampledKernel::Block {
                weights: weights.clone(),
                member: indices.iter().map(|&x| block_of(masses, x)).collect(),
            },
            Graphon::PowerLaw { exponent } => SampledKernel::Separable {
                // 0^{-g} = 0 for g < 0 and x^0 = 1 for g = 0, matching the
                // kernel's conventions at the domain edge.
                factor: indices
                    .iter()
                    .map(|&x| if *exponent == 0.0 { 1.0 } else { x.powf(-exponent) })
                    .collect(),
            },
            Graphon::Tabulated { .. } => {
                let n = indices.len();
                let mut w = vec![0.0; n * n];
                for (i, &x) in indices.iter().enumerate() {
                    for (j, &y) in indices.iter().enumerate() {
                        w[i * n + j] = graphon.eval_in_domain(x, y);
                    }
                }
                SampledKernel::Dense { w, n }
            }
        })
    }

    pub(crate) fn apply(&self, values: &[f64], out: &mut [f64]) {
        let n = values.len() as f64;
        match self {
            SampledKernel::Constant { density } => {
                let mean = values.iter().sum::<f64>() / n;
                out.fill(density * mean);
            }
            SampledKernel::Block { weights, member } => {
                let kb = weights.len();
                let mut sums = vec![0.0; kb];
                for (j, &v) in values.iter().enumerate() {
                    sums[member[j]] += v;
                }
                let per_block: Vec<f64> = (0..kb)
                    .map(|b| {
                        weights[b]
                            .iter()
                            .zip(&sums)
                            .map(|(w, s)| w * s)
                            .sum::<f64>()
                            / n
                    })
                    .collect();
                for (o, &b) in out.iter_mut().zip(member) {
                    *o = per_block[b];
                }
            }
            SampledKernel::Separable { factor } => {
                let mean = factor
                    .iter()
                    .zip(values)
                    .map(|(f, v)| f * v)
                    .sum::<f64>()
                    / n;
                for (o, &f) in out.iter_mut().zip(factor) {
                    *o = f * mean;
                }
            }
            SampledKernel::Dense { w, n: rows } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = w[i * rows..(i + 1) * rows]
                        .iter()
                        .zip(values)
                        .map(|(wv, v)| wv * v)
                        .sum::<f64>()
                        / n;
                }
            }
        }
    }
}

/// Per-sample forward trajectories on a common grid, indexed
/// `(sample, step, state)` (aggregate: `(sample, step)`).
#[derive(Debug, Clone)]
pub struct FfodeTrajectories {
    pub grid: TimeGrid,
    pub indices: Vec<f64>,
    /// Value function path `u(t, e)` per sample.
    pub u: Array3<f64>,
    /// State distribution path `p(t, e)` per sample.
    pub p: Array3<f64>,
    /// Pointwise-optimal control path per sample.
    pub controls: Array3<f64>,
    /// Aggregate path `Z(t)` per sample.
    pub z: Array2<f64>,
}

/// Everything one forward sweep records, laid out flat as `(step, sample,
/// state)` (paths) and `(step, sample)` (aggregate, impact level, clip mask)
/// so the reverse sweep can replay it without re-deriving anything.
struct Tape {
    nl: usize,
    ns: usize,
    np: usize,
    u: Vec<f64>,
    p: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
    /// Impact level `clip(λ^I(t_k))` per (step, sample) — the control the
    /// aggregate summand applies at the infected state.
    c: Vec<f64>,
    /// Whether the susceptible control came out strictly inside the control
    /// interval (the clip subgradient gate).
    s_interior: Vec<bool>,
    /// Network activation stacks, one per sample, for the initial condition.
    acts: Vec<Vec<Vec<f64>>>,
}

#[inline]
fn ix3(nl: usize, ns: usize, k: usize, l: usize, e: usize) -> usize {
    (k * nl + l) * ns + e
}

#[inline]
fn ix2(nl: usize, k: usize, l: usize) -> usize {
    k * nl + l
}

/// One forward Euler sweep of the sampled system. With
/// `simultaneous_aggregate` the within-step aggregate consistency condition
/// is resolved with the current step's distribution (exact here, because the
/// impact summand does not feed back through the aggregate); the default
/// lagged form uses the previous step's distribution.
fn forward_pass(
    theta: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    kernel: &SampledKernel,
    grid: &TimeGrid,
    simultaneous_aggregate: bool,
) -> Result<Tape, ShootingError> {
    theta.validate()?;
    let ns = model.n_states();
    if theta.output_dim() != ns {
        return Err(ShootingError::BadArchitecture {
            what: format!(
                "output dimension {} does not match the {}-state model",
                theta.output_dim(),
                ns
            ),
        });
    }
    let nl = batch.len();
    if nl == 0 {
        return Err(ShootingError::EmptyBatch);
    }
    if batch.params.len() != nl || batch.p0.len() != nl {
        return Err(ShootingError::BatchShape);
    }
    for p0 in &batch.p0 {
        let sum: f64 = p0.iter().sum();
        if p0.len() != ns || p0.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ShootingError::Model(ModelError::BadInitialLaw));
        }
    }

    let np = grid.n_points();
    let dt = grid.dt();
    let i_state = model.disease.infected();
    let s_state = model.disease.susceptible();

    let mut tape = Tape {
        nl,
        ns,
        np,
        u: vec![0.0; np * nl * ns],
        p: vec![0.0; np * nl * ns],
        a: vec![0.0; np * nl * ns],
        z: vec![0.0; np * nl],
        c: vec![0.0; np * nl],
        s_interior: vec![false; np * nl],
        acts: Vec::with_capacity(nl),
    };

    for (l, prm) in batch.params.iter().enumerate() {
        let sched = &prm.lambda_rec[i_state];
        for k in 0..np {
            tape.c[ix2(nl, k, l)] = model.controls.clip(sched.at(grid.t(k)));
        }
    }

    for l in 0..nl {
        let acts = net_forward(theta, batch.indices[l]);
        {
            let y = acts.last().unwrap();
            let base = ix3(nl, ns, 0, l, 0);
            tape.u[base..base + ns].copy_from_slice(y);
            tape.p[base..base + ns].copy_from_slice(&batch.p0[l]);
        }
        tape.acts.push(acts);
    }

    let mut summand = vec![0.0; nl];
    let mut zrow = vec![0.0; nl];
    for k in 0..np {
        let t = grid.t(k);
        // The aggregate line is algebraic in the state; the lagged form reads
        // the previous step's distribution (step 0 reads itself).
        let kp = if simultaneous_aggregate { k } else { k.saturating_sub(1) };
        for j in 0..nl {
            summand[j] = tape.c[ix2(nl, k, j)] * tape.p[ix3(nl, ns, kp, j, i_state)];
        }
        kernel.apply(&summand, &mut zrow);
        tape.z[ix2(nl, k, 0)..ix2(nl, k, 0) + nl].copy_from_slice(&zrow);

        for l in 0..nl {
            let prm = &batch.params[l];
            let z = zrow[l];
            let base = ix3(nl, ns, k, l, 0);
            for e in 0..ns {
                let a = model.control_with(prm, t, e, z, &tape.u[base..base + ns]);
                tape.a[base + e] = a;
            }
            let a_s = tape.a[base + s_state];
            tape.s_interior[ix2(nl, k, l)] =
                a_s > model.controls.a_min && a_s < model.controls.a_max;
        }

        if k + 1 == np {
            break;
        }

        for l in 0..nl {
            let prm = &batch.params[l];
            let z = zrow[l];
            let base = ix3(nl, ns, k, l, 0);
            let nbase = ix3(nl, ns, k + 1, l, 0);
            for e in 0..ns {
                let h = model.hamiltonian_with(
                    prm,
                    t,
                    e,
                    z,
                    &tape.u[base..base + ns],
                    tape.a[base + e],
                );
                tape.u[nbase + e] = tape.u[base + e] - dt * h;
            }
            let mut row = [0.0; MAX_STATES];
            for e in 0..ns {
                tape.p[nbase + e] = tape.p[base + e];
            }
            for e in 0..ns {
                let pe = tape.p[base + e];
                if pe != 0.0 {
                    model.q_row_into(prm, e, tape.a[base + e], z, &mut row[..ns]);
                    for (e2, &r) in row[..ns].iter().enumerate() {
                        tape.p[nbase + e2] += dt * pe * r;
                    }
                }
            }
            for e in 0..ns {
                if !tape.u[nbase + e].is_finite() || !tape.p[nbase + e].is_finite() {
                    return Err(ShootingError::NonFiniteState {
                        step: k + 1,
                        t: grid.t(k + 1),
                        index: l,
                    });
                }
            }
        }
    }
    Ok(tape)
}

/// Terminal targets `g(x_l, e)` in `(sample, state)` layout.
fn terminal_targets(model: &GameModel, batch: &SampleBatch) -> Vec<f64> {
    let ns = model.n_states();
    batch
        .indices
        .iter()
        .flat_map(|&x| (0..ns).map(move |e| model.terminal_cost(x, e)))
        .collect()
}

fn loss_from_tape(tape: &Tape, targets: &[f64]) -> f64 {
    let m = tape.np - 1;
    let mut loss = 0.0;
    for l in 0..tape.nl {
        for e in 0..tape.ns {
            let d = tape.u[ix3(tape.nl, tape.ns, m, l, e)] - targets[l * tape.ns + e];
            loss += d * d;
        }
    }
    loss / tape.nl as f64
}

fn trajectories_from_tape(batch: &SampleBatch, grid: &TimeGrid, tape: Tape) -> FfodeTrajectories {
    let (nl, np, ns) = (tape.nl, tape.np, tape.ns);
    let mut u = Array3::zeros((nl, np, ns));
    let mut p = Array3::zeros((nl, np, ns));
    let mut controls = Array3::zeros((nl, np, ns));
    let mut z = Array2::zeros((nl, np));
    for k in 0..np {
        for l in 0..nl {
            let base = ix3(nl, ns, k, l, 0);
            for e in 0..ns {
                u[[l, k, e]] = tape.u[base + e];
                p[[l, k, e]] = tape.p[base + e];
                controls[[l, k, e]] = tape.a[base + e];
            }
            z[[l, k]] = tape.z[ix2(nl, k, l)];
        }
    }
    FfodeTrajectories {
        grid: *grid,
        indices: batch.indices.clone(),
        u,
        p,
        controls,
        z,
    }
}

/// Integrate the sampled forward-forward system from the network's initial
/// guess: `u(0,·) = φ_θ(x)`, Euler updates `u ← u − dt·Ĥ` and `p ← p + dt·pQ`
/// per sample, with the aggregate recomputed every step from the lagged
/// distribution through the interaction kernel.
pub fn integrate_ffode(
    params: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    graphon: &Graphon,
    grid: &TimeGrid,
) -> Result<FfodeTrajectories, ShootingError> {
    let kernel = SampledKernel::new(graphon, &batch.indices)?;
    let tape = forward_pass(params, batch, model, &kernel, grid, false)?;
    Ok(trajectories_from_tape(batch, grid, tape))
}

/// Sensitivity-check variant of [`integrate_ffode`] that resolves the
/// within-step aggregate with the current step's distribution instead of the
/// lagged one. Because the impact summand does not depend on the aggregate,
/// one substitution resolves the within-step fixed point exactly. Training
/// always uses the lagged form.
pub fn integrate_ffode_resolved(
    params: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    graphon: &Graphon,
    grid: &TimeGrid,
) -> Result<FfodeTrajectories, ShootingError> {
    let kernel = SampledKernel::new(graphon, &batch.indices)?;
    let tape = forward_pass(params, batch, model, &kernel, grid, true)?;
    Ok(trajectories_from_tape(batch, grid, tape))
}

/// Shooting objective `J = (1/N)·Σ_l Σ_e (u_l(T, e) − g(x_l, e))²`.
pub fn shooting_loss(
    params: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    graphon: &Graphon,
    grid: &TimeGrid,
) -> Result<f64, ShootingError> {
    let kernel = SampledKernel::new(graphon, &batch.indices)?;
    let tape = forward_pass(params, batch, model, &kernel, grid, false)?;
    Ok(loss_from_tape(&tape, &terminal_targets(model, batch)))
}

/// Exact reverse-mode gradient of [`shooting_loss`] with respect to θ, in
/// the flat layout of [`NetParams::to_flat`]. Clipped controls propagate a
/// zero subgradient; everywhere else the derivative is that of the exact
/// Euler-unrolled arithmetic.
pub fn loss_gradient(
    params: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    graphon: &Graphon,
    grid: &TimeGrid,
) -> Result<Vec<f64>, ShootingError> {
    let targets = terminal_targets(model, batch);
    loss_and_gradient(params, batch, model, graphon, grid, &targets).map(|(_, g)| g)
}

/// Loss and flat θ-gradient in one forward + one reverse sweep, against
/// caller-chosen terminal targets in `(sample, state)` layout.
fn loss_and_gradient(
    theta: &NetParams,
    batch: &SampleBatch,
    model: &GameModel,
    graphon: &Graphon,
    grid: &TimeGrid,
    targets: &[f64],
) -> Result<(f64, Vec<f64>), ShootingError> {
    let kernel = SampledKernel::new(graphon, &batch.indices)?;
    let tape = forward_pass(theta, batch, model, &kernel, grid, false)?;
    let (nl, ns, np) = (tape.nl, tape.ns, tape.np);
    let m = np - 1;
    let dt = grid.dt();
    let inv_n = 1.0 / nl as f64;
    let i_state = model.disease.infected();
    let s_state = model.disease.susceptible();
    let target_state = model.disease.exposed().unwrap_or(i_state);

    // Full adjoint arrays: u̅ and p̅ accumulate contributions in place, so the
    // lagged aggregate at step k+1 can deposit into p̅ at step k before step k
    // itself is processed.
    let mut ubar = vec![0.0; np * nl * ns];
    let mut pbar = vec![0.0; np * nl * ns];
    let mut loss = 0.0;
    for l in 0..nl {
        for e in 0..ns {
            let d = tape.u[ix3(nl, ns, m, l, e)] - targets[l * ns + e];
            loss += d * d;
            ubar[ix3(nl, ns, m, l, e)] = 2.0 * d * inv_n;
        }
    }
    loss *= inv_n;

    // The stored aggregate at the terminal step is report-only: the terminal
    // cost does not read it, so its adjoint is zero and the loop starts at
    // the last update step.
    let mut zbar = vec![0.0; nl];
    let mut sbar = vec![0.0; nl];
    let mut q = [[0.0f64; MAX_STATES]; MAX_STATES];
    for k in (0..m).rev() {
        for l in 0..nl {
            let prm = &batch.params[l];
            let z = tape.z[ix2(nl, k, l)];
            let base = ix3(nl, ns, k, l, 0);
            let nbase = ix3(nl, ns, k + 1, l, 0);
            for e in 0..ns {
                model.q_row_into(prm, e, tape.a[base + e], z, &mut q[e][..ns]);
            }
            // Value update pulled back at fixed controls: the stored control
            // minimizes the Hamiltonian (interior stationarity or a clipped
            // constant), so its own sensitivity drops out by the envelope
            // argument.
            for e in 0..ns {
                let mut acc = ubar[nbase + e];
                for e2 in 0..ns {
                    acc -= dt * ubar[nbase + e2] * q[e2][e];
                }
                ubar[base + e] += acc;
            }
            for e in 0..ns {
                let mut acc = pbar[nbase + e];
                for (e2, qe) in q[e][..ns].iter().enumerate() {
                    acc += dt * qe * pbar[nbase + e2];
                }
                pbar[base + e] += acc;
            }
            // The distribution update has no envelope: the susceptible
            // control enters its rates explicitly, and in turn depends on the
            // value gap and the aggregate through the closed form.
            let beta = prm.beta;
            let a_s = tape.a[base + s_state];
            let du = tape.u[base + target_state] - tape.u[base + s_state];
            let pdiff = pbar[nbase + target_state] - pbar[nbase + s_state];
            let abar = dt * beta * z * tape.p[base + s_state] * pdiff;
            let mut zb = -dt * ubar[nbase + s_state] * beta * a_s * du
                + dt * tape.p[base + s_state] * beta * a_s * pdiff;
            if tape.s_interior[ix2(nl, k, l)] {
                let du_slope = beta * z / prm.c_lambda;
                ubar[base + s_state] += abar * du_slope;
                ubar[base + target_state] -= abar * du_slope;
                zb -= abar * (beta / prm.c_lambda) * du;
            }
            zbar[l] = zb;
        }
        // Aggregate line: symmetric kernel, so the forward reduction is its
        // own adjoint; the result lands on the lagged distribution's infected
        // entry (step 0 lags to itself, where the adjoint is inert).
        kernel.apply(&zbar, &mut sbar);
        let kp = k.saturating_sub(1);
        for l in 0..nl {
            pbar[ix3(nl, ns, kp, l, i_state)] += tape.c[ix2(nl, k, l)] * sbar[l];
        }
    }

    let mut grad = vec![0.0; theta.n_params()];
    for l in 0..nl {
        let base = ix3(nl, ns, 0, l, 0);
        net_vjp(theta, &tape.acts[l], &ubar[base..base + ns], &mut grad);
    }
    Ok((loss, grad))
}

/// Optimizer stepping rule for training.
#[derive(Clone, Debug)]
pub enum Optimizer {
    /// Adaptive moment estimation with bias correction; iteration `k` steps
    /// with `lr · lr_decay^k` (`lr_decay = 1` keeps the rate constant).
    Adam {
        lr: f64,
        lr_decay: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    /// Plain gradient descent with a learning-rate sequence; iteration `k`
    /// uses `rates[min(k, last)]`.
    Sgd { rates: Vec<f64> },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Optimizer {
    /// Adam whose rate decays geometrically from `lr0` to `lr1` over `k`
    /// iterations — large early steps to travel, small late ones to settle.
    pub fn adam_decaying(lr0: f64, lr1: f64, k: usize) -> Self {
        let decay = if k > 0 && lr0 > 0.0 && lr1 > 0.0 {
            (lr1 / lr0).powf(1.0 / k as f64).min(1.0)
        } else {
            1.0
        };
        Optimizer::Adam {
            lr: lr0,
            lr_decay: decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training run configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Gradient steps to take.
    pub iterations: usize,
    /// Sampled indices per batch.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seeds both the network init stream and the batch-sampling stream.
    pub seed: u64,
    /// Redraw the batch every iteration (on by default).
    pub resample: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 5000 iterations over batches of 256, resampled
    /// each step, Adam at 1e-3.
    pub fn default_for(seed: u64) -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 256,
            optimizer: Optimizer::default(),
            seed,
            resample: true,
        }
    }
}

/// One gradient step as recorded during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-iteration training history; one record per iteration run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<IterationRecord>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// CSV rendering with header `iteration,loss,grad_norm,lr,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,grad_norm,lr,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.loss, r.grad_norm, r.lr, r.seconds
            );
        }
        out
    }
}

/// Fit the initial-value network by gradient descent on the shooting loss:
/// per iteration, (re)sample a batch, run one forward + reverse sweep, and
/// step θ. Returns the final parameters and the per-iteration log.
pub fn train(
    model: &GameModel,
    graphon: &Graphon,
    initial_law: &InitialLaw,
    grid: &TimeGrid,
    config: &TrainConfig,
) -> Result<(NetParams, TrainingLog), ShootingError> {
    if config.batch_size == 0 {
        return Err(ShootingError::BadConfig {
            what: "batch_size must be at least 1",
        });
    }
    match &config.optimizer {
        Optimizer::Adam {
            lr,
            lr_decay,
            beta1,
            beta2,
            epsilon,
        } => {
            if !(lr.is_finite() && *lr > 0.0)
                || !(*lr_decay > 0.0 && *lr_decay <= 1.0)
                || !(0.0..1.0).contains(beta1)
                || !(0.0..1.0).contains(beta2)
                || !(epsilon.is_finite() && *epsilon > 0.0)
            {
                return Err(ShootingError::BadConfig {
                    what: "adam needs lr > 0, decay in (0,1], moment factors in [0,1), epsilon > 0",
                });
            }
        }
        Optimizer::Sgd { rates } => {
            if rates.is_empty() || rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                return Err(ShootingError::BadConfig {
                    what: "sgd needs a nonempty sequence of positive rates",
                });
            }
        }
    }
    initial_law.validate(model.n_states())?;

    let mut theta = NetParams::init(model.n_states(), config.seed)?;
    let n_params = theta.n_params();
    let mut rng = RngStream::new(config.seed, 1).rng();
    let mut batch = SampleBatch::sample(model, initial_law, config.batch_size, &mut rng)?;
    let mut moment1 = vec![0.0; n_params];
    let mut moment2 = vec![0.0; n_params];
    let mut records = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let start = Instant::now();
        if config.resample && it > 0 {
            batch = SampleBatch::sample(model, initial_law, config.batch_size, &mut rng)?;
        }
        let targets = terminal_targets(model, &batch);
        let (loss, grad) = match loss_and_gradient(&theta, &batch, model, graphon, grid, &targets)
        {
            Ok(pair) => pair,
            Err(ShootingError::NonFiniteState { .. }) => {
                return Err(ShootingError::Divergence {
                    iteration: it,
                    loss: f64::INFINITY,
                })
            }
            Err(other) => return Err(other),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(ShootingError::Divergence {
                iteration: it,
                loss,
            });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut flat = theta.to_flat();
        let lr_used = match &config.optimizer {
            Optimizer::Adam {
                lr,
                lr_decay,
                beta1,
                beta2,
                epsilon,
            } => {
                let lr_it = lr * lr_decay.powi(it as i32);
                let bc1 = 1.0 - beta1.powi(it as i32 + 1);
                let bc2 = 1.0 - beta2.powi(it as i32 + 1);
                for i in 0..n_params {
                    moment1[i] = beta1 * moment1[i] + (1.0 - beta1) * grad[i];
                    moment2[i] = beta2 * moment2[i] + (1.0 - beta2) * grad[i] * grad[i];
                    flat[i] -= lr_it * (moment1[i] / bc1) / ((moment2[i] / bc2).sqrt() + epsilon);
                }
                lr_it
            }
            Optimizer::Sgd { rates } => {
                let lr = rates[it.min(rates.len() - 1)];
                for i in 0..n_params {
                    flat[i] -= lr * grad[i];
                }
                lr
            }
        };
        theta = theta.from_flat(&flat)?;
        if it % 500 == 0 {
            debug!("shooting iteration {it}: loss {loss:.6e}, |grad| {grad_norm:.3e}");
        }
        records.push(IterationRecord {
            iteration: it,
            loss,
            grad_norm,
            lr: lr_used,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((theta, TrainingLog { records }))
}

/// Run the trained network over a caller-chosen evaluation index set (for
/// reporting: e.g. equispaced indices) and return the per-index trajectories.
pub fn evaluate(
    params: &NetParams,
    model: &GameModel,
    graphon: &Graphon,
    initial_law: &InitialLaw,
    indices: &[f64],
    grid: &TimeGrid,
) -> Result<FfodeTrajectories, ShootingError> {
    let batch = SampleBatch::from_indices(model, initial_law, indices.to_vec())?;
    integrate_ffode(params, &batch, model, graphon, grid)
}
