//! Finite-population stochastic simulator (placeholder).
