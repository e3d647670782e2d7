//! Interaction kernels on `[0,1]²` and graphon-weighted aggregates.
//!
//! A graphon is a symmetric kernel `w : [0,1]² → [0,1]` giving the pairwise
//! interaction weight between players `x` and `y`. Four representations are
//! supported: piecewise-constant blocks, power-law `(x·y)^{-g}`, constant,
//! and a tabulated grid.

use thiserror::Error;

/// Quadrature resolution used by [`Graphon::l2_norm_default`] for kernels
/// without an exact norm formula.
pub const DEFAULT_QUAD_POINTS: usize = 512;

#[derive(Debug, Error)]
pub enum GraphonError {
    #[error("weights matrix must be square and symmetric (rows {rows}, offending entry ({i},{j}))")]
    BadWeightsShape { rows: usize, i: usize, j: usize },
    #[error("weight w[{i}][{j}] = {value} outside [0,1]")]
    WeightOutOfRange { i: usize, j: usize, value: f64 },
    #[error("masses must be nonnegative and sum to 1 within 1e-12 (sum = {sum})")]
    BadMasses { sum: f64 },
    #[error("power-law exponent must satisfy g <= 0 (got {g})")]
    BadExponent { g: f64 },
    #[error("constant density {p} outside [0,1]")]
    BadDensity { p: f64 },
    #[error("index {x} outside the player domain [0,1]")]
    IndexOutOfDomain { x: f64 },
    #[error("dimension mismatch: weights {weights}x{weights}, masses {masses}, values {values}")]
    DimensionMismatch {
        weights: usize,
        masses: usize,
        values: usize,
    },
    #[error("sample is empty")]
    EmptySample,
    #[error("indices and values differ in length ({indices} vs {values})")]
    SampleLengthMismatch { indices: usize, values: usize },
}

/// A symmetric interaction kernel `w : [0,1]² → [0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Graphon {
    /// Piecewise constant on the K×K partition of `[0,1]` induced by
    /// cumulative `masses`; `weights[i][j]` is the strength between blocks.
    Block {
        weights: Vec<Vec<f64>>,
        masses: Vec<f64>,
    },
    /// `w(x,y) = (x·y)^{-g}` with `g ≤ 0`, clamped to `[0,1]`; by continuity
    /// `w(0,·) = 0` for `g < 0` and `w ≡ 1` for `g = 0`.
    PowerLaw { exponent: f64 },
    /// `w ≡ p`.
    Constant { density: f64 },
    /// Piecewise constant on an M×M uniform grid of cells.
    Tabulated { grid: Vec<Vec<f64>> },
}

fn check_square_symmetric(m: &[Vec<f64>]) -> Result<(), GraphonError> {
    let k = m.len();
    for (i, row) in m.iter().enumerate() {
        if row.len() != k {
            return Err(GraphonError::BadWeightsShape { rows: k, i, j: row.len() });
        }
        for (j, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(GraphonError::WeightOutOfRange { i, j, value: v });
            }
            if (v - m[j][i]).abs() > 1e-12 {
                return Err(GraphonError::BadWeightsShape { rows: k, i, j });
            }
        }
    }
    Ok(())
}

fn check_masses(masses: &[f64]) -> Result<(), GraphonError> {
    let sum: f64 = masses.iter().sum();
    if masses.is_empty() || masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(GraphonError::BadMasses { sum });
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(GraphonError::BadMasses { sum });
    }
    Ok(())
}

/// Map an index to its block under the cumulative-mass partition: block `i`
/// owns `[c_{i-1}, c_i)`, the last block also owns `x = 1`.
pub(crate) fn block_of(masses: &[f64], x: f64) -> usize {
    let mut cum = 0.0;
    for (i, &m) in masses.iter().enumerate() {
        cum += m;
        if x < cum {
            return i;
        }
    }
    masses.len() - 1
}

impl Graphon {
    pub fn block(weights: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self, GraphonError> {
        check_square_symmetric(&weights)?;
        check_masses(&masses)?;
        if weights.len() != masses.len() {
            return Err(GraphonError::DimensionMismatch {
                weights: weights.len(),
                masses: masses.len(),
                values: masses.len(),
            });
        }
        Ok(Graphon::Block { weights, masses })
    }

    pub fn power_law(exponent: f64) -> Result<Self, GraphonError> {
        if !(exponent <= 0.0) || !exponent.is_finite() {
            return Err(GraphonError::BadExponent { g: exponent });
        }
        Ok(Graphon::PowerLaw { exponent })
    }

    pub fn constant(density: f64) -> Result<Self, GraphonError> {
        if !(0.0..=1.0).contains(&density) || !density.is_finite() {
            return Err(GraphonError::BadDensity { p: density });
        }
        Ok(Graphon::Constant { density })
    }

    pub fn tabulated(grid: Vec<Vec<f64>>) -> Result<Self, GraphonError> {
        check_square_symmetric(&grid)?;
        Ok(Graphon::Tabulated { grid })
    }

    /// Kernel value `w(x, y)`; symmetric, in `[0,1]`.
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, GraphonError> {
        for v in [x, y] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(GraphonError::IndexOutOfDomain { x: v });
            }
        }
        Ok(self.eval_in_domain(x, y))
    }

    /// `eval` without the domain check; callers guarantee `x, y ∈ [0,1]`.
    pub(crate) fn eval_in_domain(&self, x: f64, y: f64) -> f64 {
        match self {
            Graphon::Block { weights, masses } => {
                weights[block_of(masses, x)][block_of(masses, y)]
            }
            Graphon::PowerLaw { exponent } => {
                if *exponent == 0.0 {
                    1.0
                } else if x == 0.0 || y == 0.0 {
                    0.0
                } else {
                    (x * y).powf(-exponent).clamp(0.0, 1.0)
                }
            }
            Graphon::Constant { density } => *density,
            Graphon::Tabulated { grid } => {
                let m = grid.len();
                let cell = |v: f64| ((v * m as f64) as usize).min(m - 1);
                grid[cell(x)][cell(y)]
            }
        }
    }

    /// Largest kernel value; bounds the aggregate via `|Z| ≤ C_K·sup w`.
    pub fn sup_weight(&self) -> f64 {
        let maxmat = |m: &[Vec<f64>]| {
            m.iter()
                .flat_map(|row| row.iter().copied())
                .fold(0.0f64, f64::max)
        };
        match self {
            Graphon::Block { weights, .. } => maxmat(weights),
            Graphon::PowerLaw { .. } => 1.0,
            Graphon::Constant { density } => *density,
            Graphon::Tabulated { grid } => maxmat(grid),
        }
    }

    /// `‖w‖_{L²([0,1]²)}` with `quad_points`² midpoint quadrature for kernels
    /// without an exact formula (block and constant norms are exact).
    pub fn l2_norm(&self, quad_points: usize) -> f64 {
        match self {
            Graphon::Block { weights, masses } => {
                let mut sum = 0.0;
                for (i, row) in weights.iter().enumerate() {
                    for (j, &w) in row.iter().enumerate() {
                        sum += w * w * masses[i] * masses[j];
                    }
                }
                sum.sqrt()
            }
            Graphon::Constant { density } => *density,
            _ => {
                let m = quad_points;
                let mut sum = 0.0;
                for i in 0..m {
                    let x = (i as f64 + 0.5) / m as f64;
                    for j in 0..m {
                        let y = (j as f64 + 0.5) / m as f64;
                        let w = self.eval_in_domain(x, y);
                        sum += w * w;
                    }
                }
                (sum / (m * m) as f64).sqrt()
            }
        }
    }

    /// [`Graphon::l2_norm`] at the default quadrature resolution.
    pub fn l2_norm_default(&self) -> f64 {
        self.l2_norm(DEFAULT_QUAD_POINTS)
    }

    /// The contraction constant `C_Φ = ‖w‖_{L²}·L_K·L_â` from the existence
    /// theorem for the equilibrium system. Values below 1 guarantee a fixed
    /// point of the aggregate map; solvers warn (but still attempt a solve)
    /// when the margin is ≥ 1.
    pub fn existence_margin(&self, lip_impact: f64, lip_control: f64) -> f64 {
        self.l2_norm_default() * lip_impact * lip_control
    }
}

/// Block-graphon aggregate: `out_i = Σ_k weights[i][k]·values[k]·masses[k]`.
pub fn aggregate_block(
    weights: &[Vec<f64>],
    masses: &[f64],
    values: &[f64],
) -> Result<Vec<f64>, GraphonError> {
    let k = weights.len();
    if masses.len() != k || values.len() != k || weights.iter().any(|row| row.len() != k) {
        return Err(GraphonError::DimensionMismatch {
            weights: k,
            masses: masses.len(),
            values: values.len(),
        });
    }
    Ok(weights
        .iter()
        .map(|row| {
            row.iter()
                .zip(values)
                .zip(masses)
                .map(|((w, v), m)| w * v * m)
                .sum()
        })
        .collect())
}

/// Empirical aggregate at `query` over a sampled population:
/// `(1/N)·Σ_j w(query, indices[j])·values[j]`, summed in index order.
pub fn aggregate_sampled(
    w: &Graphon,
    indices: &[f64],
    values: &[f64],
    query: f64,
) -> Result<f64, GraphonError> {
    if indices.is_empty() {
        return Err(GraphonError::EmptySample);
    }
    if indices.len() != values.len() {
        return Err(GraphonError::SampleLengthMismatch {
            indices: indices.len(),
            values: values.len(),
        });
    }
    let mut sum = 0.0;
    for (&x, &v) in indices.iter().zip(values) {
        sum += w.eval(query, x)? * v;
    }
    Ok(sum / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cities_lockdown() -> Graphon {
        Graphon::block(
            vec![
                vec![0.3, 0.3, 0.3],
                vec![0.3, 1.0, 0.7],
                vec![0.3, 0.7, 1.0],
            ],
            vec![0.4, 0.2, 0.4],
        )
        .unwrap()
    }

    #[test]
    fn eval_examples() {
        let konst = Graphon::constant(0.5).unwrap();
        assert_eq!(konst.eval(0.3, 0.9).unwrap(), 0.5);

        let pl = Graphon::power_law(-0.2).unwrap();
        assert_eq!(pl.eval(1.0, 1.0).unwrap(), 1.0);

        // Index 0.5 falls in block 2 ([0.4, 0.6)), 0.8 in block 3.
        let cities = cities_lockdown();
        assert_eq!(cities.eval(0.5, 0.8).unwrap(), 0.7);
    }

    #[test]
    fn eval_rejects_out_of_domain_indices() {
        let w = Graphon::constant(1.0).unwrap();
        assert!(w.eval(-0.1, 0.5).is_err());
        assert!(w.eval(0.5, 1.1).is_err());
        assert!(w.eval(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn power_law_zero_index_convention() {
        let pl = Graphon::power_law(-0.2).unwrap();
        assert_eq!(pl.eval(0.0, 0.7).unwrap(), 0.0);
        let mf = Graphon::power_law(0.0).unwrap();
        assert_eq!(mf.eval(0.0, 0.7).unwrap(), 1.0);
    }

    #[test]
    fn block_partition_boundaries() {
        // Exactly representable masses, so the cumulative boundaries carry no
        // rounding and the half-open convention is observable.
        let masses = [0.25, 0.25, 0.5];
        assert_eq!(block_of(&masses, 0.0), 0);
        assert_eq!(block_of(&masses, 0.25), 1); // half-open: c_1 starts block 2
        assert_eq!(block_of(&masses, 0.5), 2);
        assert_eq!(block_of(&masses, 1.0), 2); // last interval closed

        let cities = [0.4, 0.2, 0.4];
        assert_eq!(block_of(&cities, 0.4), 1);
        assert_eq!(block_of(&cities, 1.0), 2);
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(Graphon::constant(0.7).unwrap().l2_norm_default(), 0.7);

        // Hand-derived double sum for the cities-lockdown matrix:
        //   Σ w_ij² m_i m_j = 0.336, so the norm is sqrt(0.336).
        let norm = cities_lockdown().l2_norm_default();
        assert_relative_eq!(norm, 0.336f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(norm, 0.5797, epsilon = 1e-4);

        let zero = Graphon::block(vec![vec![0.0]], vec![1.0]).unwrap();
        assert_eq!(zero.l2_norm_default(), 0.0);
    }

    #[test]
    fn block_l2_norm_matches_step_kernel_quadrature() {
        // Midpoint quadrature of a step kernel is exact only when every block
        // boundary lands on a quadrature cell edge; otherwise the straddling
        // cells contribute an O(1/M) error. Masses of 0.25/0.25/0.5 align
        // with any power-of-two grid, so the comparison is airtight.
        let weights = vec![
            vec![1.0, 0.3, 0.3],
            vec![0.3, 0.9, 0.3],
            vec![0.3, 0.3, 0.8],
        ];
        let masses = vec![0.25, 0.25, 0.5];
        let g = Graphon::block(weights, masses).unwrap();
        let exact = g.l2_norm_default();
        let m = 2048;
        let mut sum = 0.0;
        for i in 0..m {
            let x = (i as f64 + 0.5) / m as f64;
            for j in 0..m {
                let y = (j as f64 + 0.5) / m as f64;
                let w = g.eval_in_domain(x, y);
                sum += w * w;
            }
        }
        let quad = (sum / (m * m) as f64).sqrt();
        assert_relative_eq!(exact, quad, epsilon = 1e-6);
    }

    #[test]
    fn power_law_l2_norm_matches_closed_form() {
        // ∫∫ (xy)^{-2g} dx dy = (1-2g)^{-2} for g ≤ 0, so the norm is
        // exactly 1/(1-2g). The integrand x^{-2g} has an unbounded derivative
        // at x = 0 when -2g < 1, which degrades midpoint quadrature from
        // O(M^{-2}) to O(M^{-(1-2g)}); at M = 512 the error is ~1e-5.
        let g = -0.2;
        let pl = Graphon::power_law(g).unwrap();
        let exact = 1.0 / (1.0 - 2.0 * g);
        let coarse = pl.l2_norm_default();
        assert_relative_eq!(coarse, exact, epsilon = 2e-5);
        // Refining the quadrature must move the estimate toward the truth.
        let fine = pl.l2_norm(4096);
        assert!((fine - exact).abs() < (coarse - exact).abs());
        assert_relative_eq!(fine, exact, epsilon = 1e-6);

        // g = 0 collapses to the constant-1 kernel: unit norm, exactly.
        let flat = Graphon::power_law(0.0).unwrap();
        assert_eq!(flat.l2_norm_default(), 1.0);
    }

    #[test]
    fn aggregate_block_examples() {
        let out = aggregate_block(&[vec![1.0]], &[1.0], &[0.5]).unwrap();
        assert_eq!(out, vec![0.5]);

        let weights = vec![
            vec![1.0, 0.9, 0.8, 0.7],
            vec![0.9, 0.9, 0.8, 0.8],
            vec![0.8, 0.8, 0.9, 0.8],
            vec![0.7, 0.8, 0.8, 0.8],
        ];
        let masses = [0.27, 0.33, 0.27, 0.13];
        let out = aggregate_block(&weights, &masses, &[1.0; 4]).unwrap();
        // 0.27 + 0.297 + 0.216 + 0.091
        assert_relative_eq!(out[0], 0.874, epsilon = 1e-15);

        let out = aggregate_block(&weights, &masses, &[0.0; 4]).unwrap();
        assert_eq!(out, vec![0.0; 4]);

        assert!(aggregate_block(&weights, &masses, &[1.0; 3]).is_err());
    }

    #[test]
    fn aggregate_sampled_examples() {
        let ones = Graphon::constant(1.0).unwrap();
        let idx = [0.1, 0.5, 0.9];
        assert_relative_eq!(
            aggregate_sampled(&ones, &idx, &[3.0; 3], 0.2).unwrap(),
            3.0,
            epsilon = 1e-15
        );

        let mf = Graphon::power_law(0.0).unwrap();
        assert_relative_eq!(
            aggregate_sampled(&mf, &idx, &[3.0; 3], 0.2).unwrap(),
            3.0,
            epsilon = 1e-15
        );

        let half = Graphon::constant(0.5).unwrap();
        assert_relative_eq!(
            aggregate_sampled(&half, &[0.1, 0.9], &[0.2, 0.6], 0.5).unwrap(),
            0.2,
            epsilon = 1e-15
        );

        assert!(aggregate_sampled(&half, &[], &[], 0.5).is_err());
    }

    #[test]
    fn existence_margin_examples() {
        let zero = Graphon::block(vec![vec![0.0]], vec![1.0]).unwrap();
        assert_eq!(zero.existence_margin(1.0, 5.0), 0.0);

        let margin = cities_lockdown().existence_margin(1.0, 0.5);
        assert_relative_eq!(margin, 0.2899, epsilon = 1e-4);

        let full = Graphon::constant(1.0).unwrap();
        assert_eq!(full.existence_margin(1.0, 2.0), 2.0);
    }

    #[test]
    fn stratified_sampling_recovers_block_aggregate() {
        // Indices at block representatives in proportion to masses
        // (N = 10 divides the mass denominators) with per-block values.
        let cities = cities_lockdown();
        let (weights, masses) = match &cities {
            Graphon::Block { weights, masses } => (weights.clone(), masses.clone()),
            _ => unreachable!(),
        };
        let block_values = [0.3, 0.8, 0.5];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let reps = [4, 2, 4]; // 10·mass per block
        let centers = [0.2, 0.5, 0.8];
        for b in 0..3 {
            for _ in 0..reps[b] {
                indices.push(centers[b]);
                values.push(block_values[b]);
            }
        }
        let exact = aggregate_block(&weights, &masses, &block_values).unwrap();
        for b in 0..3 {
            let sampled = aggregate_sampled(&cities, &indices, &values, centers[b]).unwrap();
            assert_relative_eq!(sampled, exact[b], epsilon = 1e-12);
        }
    }

    #[test]
    fn constructor_validation() {
        assert!(Graphon::block(vec![vec![0.5, 0.2], vec![0.3, 0.5]], vec![0.5, 0.5]).is_err());
        assert!(Graphon::block(vec![vec![1.5]], vec![1.0]).is_err());
        assert!(Graphon::block(vec![vec![0.5]], vec![0.9]).is_err());
        assert!(Graphon::block(vec![vec![0.5]], vec![-0.5, 1.5]).is_err());
        assert!(Graphon::power_law(0.1).is_err());
        assert!(Graphon::constant(1.2).is_err());
        assert!(Graphon::tabulated(vec![vec![0.1, 0.9], vec![0.2, 0.1]]).is_err());
    }

    proptest! {
        #[test]
        fn eval_is_symmetric(x in 0.0f64..=1.0, y in 0.0f64..=1.0, g in -3.0f64..=0.0) {
            let kernels = [
                cities_lockdown(),
                Graphon::power_law(g).unwrap(),
                Graphon::constant(0.42).unwrap(),
                Graphon::tabulated(vec![vec![0.1, 0.6], vec![0.6, 0.9]]).unwrap(),
            ];
            for w in &kernels {
                prop_assert_eq!(w.eval(x, y).unwrap(), w.eval(y, x).unwrap());
            }
        }

        #[test]
        fn eval_stays_in_unit_interval(x in 0.0f64..=1.0, y in 0.0f64..=1.0, g in -3.0f64..=0.0) {
            let w = Graphon::power_law(g).unwrap();
            let v = w.eval(x, y).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn sampled_constant_kernel_is_scaled_mean(
            p in 0.0f64..=1.0,
            values in proptest::collection::vec(-10.0f64..10.0, 1..20),
        ) {
            let w = Graphon::constant(p).unwrap();
            let indices: Vec<f64> = (0..values.len())
                .map(|i| i as f64 / values.len() as f64)
                .collect();
            let z = aggregate_sampled(&w, &indices, &values, 0.5).unwrap();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((z - p * mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }
}
