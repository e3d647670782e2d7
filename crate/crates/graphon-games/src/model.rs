//! Epidemic game models: state spaces, controlled transition-rate matrices,
//! running costs, Hamiltonians, and their closed-form minimizers.
//!
//! Supports the SIR model with reinfection (states S, I, R, D) and the SEIRD
//! model (states S, E, I, R, D). Transitions out of S are driven by the
//! player's contact level `a` and the graphon aggregate `z`; everything else
//! is a fixed rate. Costs penalize deviation from recommended contact levels
//! plus flat charges for infection and death.

use crate::graphon::block_of;
use thiserror::Error;

/// Largest state count across supported diseases; lets hot paths use stack
/// buffers instead of heap rows.
pub(crate) const MAX_STATES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("control {a} outside the admissible set [{a_min}, {a_max}]")]
    ControlOutsideSet { a: f64, a_min: f64, a_max: f64 },
    #[error("aggregate must be nonnegative (got {z})")]
    NegativeAggregate { z: f64 },
    #[error("state index {index} out of range for a {n_states}-state model")]
    UnknownState { index: usize, n_states: usize },
    #[error("player index {x} outside [0,1]")]
    IndexOutOfDomain { x: f64 },
    #[error("value vector has length {got}, expected {expected}")]
    ValueLength { expected: usize, got: usize },
    #[error("parameter {name} = {value} violates model constraints")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("expected one recommendation schedule per state ({expected}), got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error("schedule needs one more value than breakpoints, increasing breakpoints, finite values")]
    BadSchedule,
    #[error("control set requires finite a_min <= a_max with a_min >= 0 (got [{a_min}, {a_max}])")]
    BadControlSet { a_min: f64, a_max: f64 },
    #[error("per-block parameter table is empty or masses are invalid")]
    BadBlockTable,
    #[error("initial law must be a probability vector with one entry per state")]
    BadInitialLaw,
    #[error("state space needs at least two uniquely labeled states")]
    BadStateSpace,
}

/// Which epidemic model the states follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disease {
    /// S → I → {R, D}, R → S (reinfection); indices S=0, I=1, R=2, D=3.
    Sir,
    /// S → E → I → {R, D}, no reinfection; indices S=0, E=1, I=2, R=3, D=4.
    Seird,
}

/// Epidemiological role of a state index under a given disease.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateRole {
    Susceptible,
    Exposed,
    Infected,
    Recovered,
    Dead,
}

impl Disease {
    pub fn n_states(self) -> usize {
        match self {
            Disease::Sir => 4,
            Disease::Seird => 5,
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Disease::Sir => &["S", "I", "R", "D"],
            Disease::Seird => &["S", "E", "I", "R", "D"],
        }
    }

    pub fn susceptible(self) -> usize {
        0
    }

    pub fn exposed(self) -> Option<usize> {
        match self {
            Disease::Sir => None,
            Disease::Seird => Some(1),
        }
    }

    pub fn infected(self) -> usize {
        match self {
            Disease::Sir => 1,
            Disease::Seird => 2,
        }
    }

    pub fn recovered(self) -> usize {
        match self {
            Disease::Sir => 2,
            Disease::Seird => 3,
        }
    }

    pub fn dead(self) -> usize {
        self.n_states() - 1
    }

    pub fn role(self, e: usize) -> StateRole {
        match (self, e) {
            (_, 0) => StateRole::Susceptible,
            (Disease::Sir, 1) | (Disease::Seird, 2) => StateRole::Infected,
            (Disease::Sir, 2) | (Disease::Seird, 3) => StateRole::Recovered,
            (Disease::Sir, 3) | (Disease::Seird, 4) => StateRole::Dead,
            (Disease::Seird, 1) => StateRole::Exposed,
            _ => panic!("state index {e} out of range for {self:?}"),
        }
    }

    pub fn state_space(self) -> StateSpace {
        StateSpace::new(self.labels().iter().map(|s| s.to_string()).collect()).unwrap()
    }
}

/// A finite set of named states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new(labels: Vec<String>) -> Result<Self, ModelError> {
        if labels.len() < 2 {
            return Err(ModelError::BadStateSpace);
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(ModelError::BadStateSpace);
            }
        }
        Ok(StateSpace { labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Piecewise-constant function of time: `values[i]` on
/// `[breakpoints[i-1], breakpoints[i])`, with the last value extending to ∞.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    values: Vec<f64>,
    breakpoints: Vec<f64>,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule { values: vec![v], breakpoints: vec![] }
    }

    pub fn new(values: Vec<f64>, breakpoints: Vec<f64>) -> Result<Self, ModelError> {
        let ok = values.len() == breakpoints.len() + 1
            && values.iter().chain(&breakpoints).all(|v| v.is_finite())
            && breakpoints.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(ModelError::BadSchedule);
        }
        Ok(Schedule { values, breakpoints })
    }

    pub fn at(&self, t: f64) -> f64 {
        for (i, &b) in self.breakpoints.iter().enumerate() {
            if t < b {
                return self.values[i];
            }
        }
        *self.values.last().unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Rates, costs, and recommended contact levels for one player (or block).
#[derive(Clone, Debug, PartialEq)]
pub struct PlayerParams {
    /// Infection rate multiplier: S leaves at rate `beta·a·z`.
    pub beta: f64,
    /// Rate of leaving I (split between recovery and death by `rho`).
    pub gamma: f64,
    /// Reinfection rate R → S.
    pub kappa: f64,
    /// Probability that leaving I means recovery rather than death.
    pub rho: f64,
    /// Incubation rate E → I (SEIRD only; ignored for SIR).
    pub epsilon: f64,
    /// Flat running cost while infected.
    pub c_i: f64,
    /// Flat running cost while dead.
    pub c_d: f64,
    /// Weight on deviation from the recommendation at S (and E).
    pub c_lambda: f64,
    /// Recommended contact level per state, as functions of time.
    pub lambda_rec: Vec<Schedule>,
}

impl PlayerParams {
    pub fn validate(&self, disease: Disease) -> Result<(), ModelError> {
        let nonneg = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("epsilon", self.epsilon),
            ("c_i", self.c_i),
            ("c_d", self.c_d),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ModelError::InvalidParameter { name, value });
            }
        }
        if !(0.0..=1.0).contains(&self.rho) || !self.rho.is_finite() {
            return Err(ModelError::InvalidParameter { name: "rho", value: self.rho });
        }
        if !(self.c_lambda > 0.0) || !self.c_lambda.is_finite() {
            return Err(ModelError::InvalidParameter { name: "c_lambda", value: self.c_lambda });
        }
        if disease == Disease::Seird && self.kappa != 0.0 {
            // The five-state model has no reinfection edge.
            return Err(ModelError::InvalidParameter { name: "kappa", value: self.kappa });
        }
        if self.lambda_rec.len() != disease.n_states() {
            return Err(ModelError::LambdaCount {
                expected: disease.n_states(),
                got: self.lambda_rec.len(),
            });
        }
        Ok(())
    }
}

/// Build the per-state recommendation vector from per-role levels; the
/// absorbing dead state gets the reporting default of 1.
pub fn recommended_levels(
    disease: Disease,
    s: Schedule,
    e: Option<Schedule>,
    i: Schedule,
    r: Schedule,
) -> Vec<Schedule> {
    match disease {
        Disease::Sir => vec![s, i, r, Schedule::constant(1.0)],
        Disease::Seird => vec![
            s,
            e.unwrap_or_else(|| Schedule::constant(1.0)),
            i,
            r,
            Schedule::constant(1.0),
        ],
    }
}

/// Compact interval of admissible contact levels `A = [a_min, a_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlSet {
    pub a_min: f64,
    pub a_max: f64,
}

impl ControlSet {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self, ModelError> {
        // a_min ≥ 0 keeps the infection rate β·a·z a valid transition rate.
        if !(a_min <= a_max) || !(a_min >= 0.0) || !a_min.is_finite() || !a_max.is_finite() {
            return Err(ModelError::BadControlSet { a_min, a_max });
        }
        Ok(ControlSet { a_min, a_max })
    }

    pub fn clip(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }

    pub fn contains(&self, a: f64) -> bool {
        (self.a_min..=self.a_max).contains(&a)
    }

    pub fn sup_abs(&self) -> f64 {
        self.a_min.abs().max(self.a_max.abs())
    }
}

impl Default for ControlSet {
    /// `[0, 2]`: recommendations sit near 1, so this interval is wide enough
    /// to be non-binding in practice while staying compact.
    fn default() -> Self {
        ControlSet { a_min: 0.0, a_max: 2.0 }
    }
}

/// How a player's (control, state) pair enters the aggregate felt by others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImpactFunction {
    /// `K(a, e) = a·1{e = I}`: only infected players load the aggregate, in
    /// proportion to their contact level.
    ContactFactorInfected,
}

impl ImpactFunction {
    pub fn impact(self, disease: Disease, a: f64, e: usize) -> f64 {
        match self {
            ImpactFunction::ContactFactorInfected => {
                if e == disease.infected() {
                    a
                } else {
                    0.0
                }
            }
        }
    }

    /// Uniform bound `C_K = sup |K|`.
    pub fn bound(self, controls: &ControlSet) -> f64 {
        controls.sup_abs()
    }

    /// Lipschitz constant `L_K` of `a ↦ K(a, e)`.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// Player parameters as a function of the index `x ∈ [0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamMap {
    /// Same parameters for every player.
    Uniform(PlayerParams),
    /// Piecewise constant on the cumulative-mass partition of `[0,1]`.
    Blocks {
        masses: Vec<f64>,
        params: Vec<PlayerParams>,
    },
}

impl ParamMap {
    pub fn at(&self, x: f64) -> &PlayerParams {
        match self {
            ParamMap::Uniform(p) => p,
            ParamMap::Blocks { masses, params } => &params[block_of(masses, x)],
        }
    }

    /// All distinct parameter sets (one entry for `Uniform`).
    pub fn blocks(&self) -> &[PlayerParams] {
        match self {
            ParamMap::Uniform(p) => std::slice::from_ref(p),
            ParamMap::Blocks { params, .. } => params,
        }
    }

    pub fn masses(&self) -> Option<&[f64]> {
        match self {
            ParamMap::Uniform(_) => None,
            ParamMap::Blocks { masses, .. } => Some(masses),
        }
    }

    /// One representative index per parameter block (block midpoints).
    pub(crate) fn representatives(&self) -> Vec<f64> {
        match self {
            ParamMap::Uniform(_) => vec![0.5],
            ParamMap::Blocks { masses, .. } => {
                let mut cum = 0.0;
                masses
                    .iter()
                    .map(|m| {
                        let mid = cum + m / 2.0;
                        cum += m;
                        mid
                    })
                    .collect()
            }
        }
    }

    fn validate(&self, disease: Disease) -> Result<(), ModelError> {
        match self {
            ParamMap::Uniform(p) => p.validate(disease),
            ParamMap::Blocks { masses, params } => {
                let sum: f64 = masses.iter().sum();
                if params.is_empty()
                    || params.len() != masses.len()
                    || masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite())
                    || (sum - 1.0).abs() > 1e-12
                {
                    return Err(ModelError::BadBlockTable);
                }
                params.iter().try_for_each(|p| p.validate(disease))
            }
        }
    }
}

/// Initial state distribution as a function of the player index.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    /// Same initial distribution for every player.
    Uniform(Vec<f64>),
    /// Piecewise constant on the cumulative-mass partition of `[0,1]`.
    Blocks {
        masses: Vec<f64>,
        laws: Vec<Vec<f64>>,
    },
}

impl InitialLaw {
    pub fn at(&self, x: f64) -> &[f64] {
        match self {
            InitialLaw::Uniform(p) => p,
            InitialLaw::Blocks { masses, laws } => &laws[block_of(masses, x)],
        }
    }

    /// Check every law is a probability vector over `n_states` states (and,
    /// for the block form, that the partition is a valid one).
    pub fn validate(&self, n_states: usize) -> Result<(), ModelError> {
        let check = |p: &[f64]| -> Result<(), ModelError> {
            let sum: f64 = p.iter().sum();
            if p.len() != n_states
                || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite())
                || (sum - 1.0).abs() > 1e-9
            {
                return Err(ModelError::BadInitialLaw);
            }
            Ok(())
        };
        match self {
            InitialLaw::Uniform(p) => check(p),
            InitialLaw::Blocks { masses, laws } => {
                let msum: f64 = masses.iter().sum();
                if laws.is_empty()
                    || laws.len() != masses.len()
                    || masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite())
                    || (msum - 1.0).abs() > 1e-12
                {
                    return Err(ModelError::BadInitialLaw);
                }
                laws.iter().try_for_each(|p| check(p))
            }
        }
    }
}

/// A complete game description: disease dynamics, admissible controls, the
/// aggregate impact, and per-index parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GameModel {
    pub disease: Disease,
    pub states: StateSpace,
    pub controls: ControlSet,
    pub impact: ImpactFunction,
    pub params: ParamMap,
}

impl GameModel {
    pub fn new(
        disease: Disease,
        controls: ControlSet,
        params: ParamMap,
    ) -> Result<Self, ModelError> {
        ControlSet::new(controls.a_min, controls.a_max)?;
        params.validate(disease)?;
        Ok(GameModel {
            disease,
            states: disease.state_space(),
            controls,
            impact: ImpactFunction::ContactFactorInfected,
            params,
        })
    }

    pub fn n_states(&self) -> usize {
        self.disease.n_states()
    }

    fn check_state(&self, e: usize) -> Result<(), ModelError> {
        if e >= self.n_states() {
            return Err(ModelError::UnknownState { index: e, n_states: self.n_states() });
        }
        Ok(())
    }

    fn check_index(&self, x: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&x) || !x.is_finite() {
            return Err(ModelError::IndexOutOfDomain { x });
        }
        Ok(())
    }

    fn check_control(&self, a: f64) -> Result<(), ModelError> {
        if !self.controls.contains(a) {
            return Err(ModelError::ControlOutsideSet {
                a,
                a_min: self.controls.a_min,
                a_max: self.controls.a_max,
            });
        }
        Ok(())
    }

    fn check_values(&self, h: &[f64]) -> Result<(), ModelError> {
        if h.len() != self.n_states() {
            return Err(ModelError::ValueLength { expected: self.n_states(), got: h.len() });
        }
        Ok(())
    }

    /// Row `e` of the rate matrix at control `a` and aggregate `z`, written
    /// into `out` (length `n_states`); diagonal set so the row sums to 0.
    pub(crate) fn q_row_into(&self, p: &PlayerParams, e: usize, a: f64, z: f64, out: &mut [f64]) {
        out.fill(0.0);
        let d = self.disease;
        match d.role(e) {
            StateRole::Susceptible => {
                let target = d.exposed().unwrap_or_else(|| d.infected());
                out[target] = p.beta * a * z;
            }
            StateRole::Exposed => out[d.infected()] = p.epsilon,
            StateRole::Infected => {
                out[d.recovered()] = p.rho * p.gamma;
                out[d.dead()] = (1.0 - p.rho) * p.gamma;
            }
            StateRole::Recovered => out[d.susceptible()] = p.kappa,
            StateRole::Dead => {}
        }
        out[e] = -out.iter().sum::<f64>();
    }

    /// Full rate matrix for player `x` at control `a` and aggregate `z`.
    pub fn q_matrix(
        &self,
        x: f64,
        _t: f64,
        a: f64,
        z: f64,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_index(x)?;
        self.check_control(a)?;
        if !(z >= 0.0) || !z.is_finite() {
            return Err(ModelError::NegativeAggregate { z });
        }
        let n = self.n_states();
        let p = self.params.at(x);
        Ok((0..n)
            .map(|e| {
                let mut row = vec![0.0; n];
                self.q_row_into(p, e, a, z, &mut row);
                row
            })
            .collect())
    }

    /// Quadratic weight on the control deviation at state `e`.
    fn cost_weight(&self, p: &PlayerParams, e: usize) -> f64 {
        match self.disease.role(e) {
            StateRole::Susceptible | StateRole::Exposed => p.c_lambda,
            _ => 1.0,
        }
    }

    pub(crate) fn running_cost_with(&self, p: &PlayerParams, t: f64, e: usize, a: f64) -> f64 {
        let dev = |w: f64| {
            let d = p.lambda_rec[e].at(t) - a;
            0.5 * w * d * d
        };
        match self.disease.role(e) {
            StateRole::Susceptible | StateRole::Exposed => dev(p.c_lambda),
            StateRole::Infected => dev(1.0) + p.c_i,
            StateRole::Recovered => dev(1.0),
            StateRole::Dead => p.c_d,
        }
    }

    pub fn running_cost(
        &self,
        x: f64,
        t: f64,
        e: usize,
        _z: f64,
        a: f64,
    ) -> Result<f64, ModelError> {
        self.check_index(x)?;
        self.check_state(e)?;
        self.check_control(a)?;
        Ok(self.running_cost_with(self.params.at(x), t, e, a))
    }

    /// Terminal cost `g(x, e)`; identically zero for these models.
    pub fn terminal_cost(&self, _x: f64, _e: usize) -> f64 {
        0.0
    }

    pub(crate) fn hamiltonian_with(
        &self,
        p: &PlayerParams,
        t: f64,
        e: usize,
        z: f64,
        h: &[f64],
        a: f64,
    ) -> f64 {
        let mut row = [0.0; MAX_STATES];
        let n = self.n_states();
        self.q_row_into(p, e, a, z, &mut row[..n]);
        let drift: f64 = row[..n].iter().zip(h).map(|(q, hv)| q * hv).sum();
        drift + self.running_cost_with(p, t, e, a)
    }

    /// `H(x, t, e, z, h, a) = (row_e of Q)·h + f`.
    pub fn hamiltonian(
        &self,
        x: f64,
        t: f64,
        e: usize,
        z: f64,
        h: &[f64],
        a: f64,
    ) -> Result<f64, ModelError> {
        self.check_index(x)?;
        self.check_state(e)?;
        self.check_control(a)?;
        self.check_values(h)?;
        if !(z >= 0.0) || !z.is_finite() {
            return Err(ModelError::NegativeAggregate { z });
        }
        Ok(self.hamiltonian_with(self.params.at(x), t, e, z, h, a))
    }

    /// Closed-form minimizer of `a ↦ H(...)` projected onto the control set.
    ///
    /// The rate matrix is affine in `a` and the cost quadratic, so the
    /// unconstrained minimizer is `λ_e(t) − (row_e Q₂ · h)/c_e`; only the
    /// susceptible row depends on `a`, which reduces this to
    /// `λ^S(t) + (β z / c_λ)(h_S − h_target)` at S and to the recommendation
    /// itself elsewhere. At the absorbing dead state every control is
    /// equivalent; the reporting convention is `clip(1)`.
    pub(crate) fn control_with(
        &self,
        p: &PlayerParams,
        t: f64,
        e: usize,
        z: f64,
        h: &[f64],
    ) -> f64 {
        let d = self.disease;
        match d.role(e) {
            StateRole::Susceptible => {
                let target = d.exposed().unwrap_or_else(|| d.infected());
                let lam = p.lambda_rec[e].at(t);
                self.controls
                    .clip(lam + p.beta * z / p.c_lambda * (h[e] - h[target]))
            }
            StateRole::Dead => self.controls.clip(1.0),
            _ => self.controls.clip(p.lambda_rec[e].at(t)),
        }
    }

    pub(crate) fn minimize_with(
        &self,
        p: &PlayerParams,
        t: f64,
        e: usize,
        z: f64,
        h: &[f64],
    ) -> (f64, f64) {
        let a = self.control_with(p, t, e, z, h);
        (a, self.hamiltonian_with(p, t, e, z, h, a))
    }

    /// Minimizing control and minimized Hamiltonian value at `(x, t, e, z, h)`.
    pub fn minimize_hamiltonian(
        &self,
        x: f64,
        t: f64,
        e: usize,
        z: f64,
        h: &[f64],
    ) -> Result<(f64, f64), ModelError> {
        self.check_index(x)?;
        self.check_state(e)?;
        self.check_values(h)?;
        if !(z >= 0.0) || !z.is_finite() {
            return Err(ModelError::NegativeAggregate { z });
        }
        Ok(self.minimize_with(self.params.at(x), t, e, z, h))
    }

    /// Bound on any single transition rate when the aggregate stays within
    /// `[0, z_bound]` and controls within the admissible set.
    pub fn q_max(&self, z_bound: f64) -> f64 {
        let a_sup = self.controls.sup_abs();
        self.params
            .blocks()
            .iter()
            .map(|p| {
                let infection = p.beta * a_sup * z_bound;
                let mut m = infection.max(p.gamma).max(p.kappa);
                if self.disease == Disease::Seird {
                    m = m.max(p.epsilon);
                }
                m
            })
            .fold(0.0, f64::max)
    }

    /// Bound `C_h = T·sup|f| + sup|g|` on the value function over `[0, T]`.
    pub fn value_bound(&self, horizon: f64) -> f64 {
        let mut sup_f: f64 = 0.0;
        for p in self.params.blocks() {
            for e in 0..self.n_states() {
                let base = match self.disease.role(e) {
                    StateRole::Infected => p.c_i,
                    StateRole::Dead => p.c_d,
                    _ => 0.0,
                };
                let w = self.cost_weight(p, e);
                // The quadratic deviation peaks at an endpoint of A.
                let dev_sup = p.lambda_rec[e]
                    .values()
                    .iter()
                    .map(|&lam| {
                        let lo = (lam - self.controls.a_min).abs();
                        let hi = (self.controls.a_max - lam).abs();
                        lo.max(hi)
                    })
                    .fold(0.0, f64::max);
                sup_f = sup_f.max(base + 0.5 * w * dev_sup * dev_sup);
            }
        }
        horizon * sup_f
    }

    /// Numeric upper estimate of the Lipschitz constant of `z ↦ â(t, e, z, h)`
    /// over `z ∈ [−z_bound, z_bound]`, sampling a grid of times, states,
    /// value-vector corners `{−C_h, 0, C_h}ⁿ`, and aggregates, with forward
    /// differences of width 1e−4.
    pub fn estimate_control_lipschitz(&self, z_bound: f64, horizon: f64) -> f64 {
        let delta = 1e-4;
        let c_h = self.value_bound(horizon);
        let levels = [-c_h, 0.0, c_h];
        let n = self.n_states();
        let n_corners = 3usize.pow(n as u32);
        let t_points = 5;
        let z_points = 41;
        let mut max_slope: f64 = 0.0;
        let mut h = [0.0; MAX_STATES];
        for &x in &self.params.representatives() {
            let p = self.params.at(x);
            for e in 0..n {
                for ti in 0..t_points {
                    let t = horizon * ti as f64 / (t_points - 1) as f64;
                    for corner in 0..n_corners {
                        let mut c = corner;
                        for hv in h[..n].iter_mut() {
                            *hv = levels[c % 3];
                            c /= 3;
                        }
                        for zi in 0..z_points {
                            let z = -z_bound + 2.0 * z_bound * zi as f64 / (z_points - 1) as f64;
                            let a0 = self.control_with(p, t, e, z, &h[..n]);
                            let a1 = self.control_with(p, t, e, z + delta, &h[..n]);
                            max_slope = max_slope.max((a1 - a0).abs() / delta);
                        }
                    }
                }
            }
        }
        max_slope
    }
}
