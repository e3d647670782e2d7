//! Nash-equilibrium solvers for finite-state games with graphon-weighted
//! interactions, built around compartmental epidemic models.
//!
//! A continuum of players indexed by `x ∈ [0,1]` evolve as controlled
//! finite-state jump processes. Players are coupled only through an
//! aggregate `Z^x(t)`: a graphon-weighted population average of an impact
//! function of each player's control and state. An equilibrium is a solution
//! of the coupled system
//!
//! ```text
//!   u̇^x(t,e) = -Ĥ^x(t, e, Z^x_t, u^x(t,·))          (backward HJB)
//!   ṗ^x(t,·) =  p^x(t,·) Q^x(φ̂^x(t,·), Z^x_t)        (forward Kolmogorov)
//!   Z^x_t    =  ∫ w(x,y) Σ_e K(φ̂^y(t,e), e) p^y(t,e) dy
//! ```
//!
//! with `φ̂` the pointwise Hamiltonian minimizer. Three routes are provided:
//!
//! * [`block`] — exact solver for piecewise-constant (block) graphons by
//!   damped fixed-point iteration on the aggregate path;
//! * [`shooting`] — a shooting method for general graphons: a small network
//!   maps the index to the unknown initial value `u(0,·)`, the system is
//!   integrated forward-forward on sampled indices, and the network is fit
//!   by gradient descent on the terminal-condition mismatch;
//! * [`particle`] — an `N`-agent jump-process simulator (uniformization and
//!   thinning) that validates the deterministic-aggregate limit empirically.

pub mod block;
pub mod graphon;
pub mod model;
pub mod numerics;
pub mod particle;
pub mod shooting;
