//! Observability of the pack DAE: rank test on the linearization (pencil
//! form), solvability conditions of the derivative array, and smooth
//! observability with a least-order search.
//!
//! The DAE is written `F = E x' - A x - Phi(x, I) = 0` with outputs
//! `H = C x + h(x)`. Total time derivatives of `F` and `H` are taken with
//! truncated Taylor jets along a consistent trajectory through the point.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{factorial, ocv_jet, ocv_slope_jet};
use crate::linalg::{numerical_rank, numerical_rank_complex, DenseSolver, RankTolerance};
use crate::pack_model::PackSystem;

/// Highest differentiation order accepted for `gamma` and `delta`.
pub const MAX_ORDER: usize = 6;

/// A semi-explicit descriptor model whose nonlinearities can be pushed
/// through Taylor jets. Rows and columns are split as `[s; u]` with
/// `E = diag(I, 0)`; `Phi` and `h` may depend on `s` only.
pub trait JetModel: Sync {
    fn n_state(&self) -> usize;
    fn n_diff(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn e_matrix(&self) -> DMatrix<f64>;
    fn a_matrix(&self) -> DMatrix<f64>;
    fn c_matrix(&self) -> DMatrix<f64>;
    /// Taylor coefficients of `Phi(X(t), I(t))`, as many as `x` has.
    fn phi_jet(&self, x: &[DVector<f64>], input: &[f64]) -> Vec<DVector<f64>>;
    /// Taylor coefficients of `dPhi/dx (X(t))`.
    fn phi_jacobian_jet(&self, x: &[DVector<f64>]) -> Vec<DMatrix<f64>>;
    fn h_jet(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>>;
    fn h_jacobian_jet(&self, x: &[DVector<f64>]) -> Vec<DMatrix<f64>>;
}

fn cell_jet(x: &[DVector<f64>], k: usize) -> Vec<f64> {
    x.iter().map(|c| c[k]).collect()
}

impl JetModel for PackSystem {
    fn n_state(&self) -> usize {
        PackSystem::n_state(self)
    }

    fn n_diff(&self) -> usize {
        PackSystem::n_diff(self)
    }

    fn n_outputs(&self) -> usize {
        PackSystem::n_outputs(self)
    }

    fn e_matrix(&self) -> DMatrix<f64> {
        self.e.clone()
    }

    fn a_matrix(&self) -> DMatrix<f64> {
        self.a.clone()
    }

    fn c_matrix(&self) -> DMatrix<f64> {
        self.c.clone()
    }

    fn phi_jet(&self, x: &[DVector<f64>], input: &[f64]) -> Vec<DVector<f64>> {
        let t = &self.topology;
        let nd = t.n_diff();
        let len = x.len();
        let mut out = vec![DVector::zeros(t.n_state()); len];
        let g: Vec<Vec<f64>> = (0..t.n_cells())
            .map(|k| ocv_jet(&t.cells[k].ocv, &cell_jet(x, k)))
            .collect();
        for j in 0..t.ns {
            let first = t.index(0, j);
            for i in 1..t.np {
                let k = t.index(i, j);
                for (c, o) in out.iter_mut().enumerate() {
                    o[nd + j * t.np + i - 1] = g[first][c] - g[k][c];
                }
            }
            for (c, o) in out.iter_mut().enumerate() {
                o[nd + j * t.np + t.np - 1] = -input.get(c).copied().unwrap_or(0.0);
            }
        }
        out
    }

    fn phi_jacobian_jet(&self, x: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let t = &self.topology;
        let nd = t.n_diff();
        let n = t.n_state();
        let mut out = vec![DMatrix::zeros(n, n); x.len()];
        let dg: Vec<Vec<f64>> = (0..t.n_cells())
            .map(|k| ocv_slope_jet(&t.cells[k].ocv, &cell_jet(x, k)))
            .collect();
        for j in 0..t.ns {
            let first = t.index(0, j);
            for i in 1..t.np {
                let k = t.index(i, j);
                let row = nd + j * t.np + i - 1;
                for (c, o) in out.iter_mut().enumerate() {
                    o[(row, first)] += dg[first][c];
                    o[(row, k)] -= dg[k][c];
                }
            }
        }
        out
    }

    fn h_jet(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let t = &self.topology;
        let mut out = vec![DVector::zeros(self.combos.len()); x.len()];
        for (row, combo) in self.combos.iter().enumerate() {
            for (j, &i) in combo.iter().enumerate() {
                let k = t.index(i, j);
                let g = ocv_jet(&t.cells[k].ocv, &cell_jet(x, k));
                for (c, o) in out.iter_mut().enumerate() {
                    o[row] += g[c];
                }
            }
        }
        out
    }

    fn h_jacobian_jet(&self, x: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let t = &self.topology;
        let mut out = vec![DMatrix::zeros(self.combos.len(), t.n_state()); x.len()];
        for (row, combo) in self.combos.iter().enumerate() {
            for (j, &i) in combo.iter().enumerate() {
                let k = t.index(i, j);
                let dg = ocv_slope_jet(&t.cells[k].ocv, &cell_jet(x, k));
                for (c, o) in out.iter_mut().enumerate() {
                    o[(row, k)] += dg[c];
                }
            }
        }
        out
    }
}

/// Evaluation point: initial differential state plus input derivatives
/// `I, I', I'', ...` at `t`. The state derivatives come from the unique
/// consistent trajectory through `s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPoint {
    pub t: f64,
    pub s0: DVector<f64>,
    pub input: Vec<f64>,
}

impl AnalysisPoint {
    pub fn new(s0: DVector<f64>, input: Vec<f64>) -> Self {
        AnalysisPoint { t: 0.0, s0, input }
    }

    fn with_state(&self, s0: DVector<f64>) -> Self {
        AnalysisPoint {
            t: self.t,
            s0,
            input: self.input.clone(),
        }
    }
}

/// Serializable record of the point an analysis ran at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    /// `x^(2), x^(3), ...`
    pub w: Vec<Vec<f64>>,
    pub input_derivatives: Vec<f64>,
}

fn input_coefficients(input: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| input.get(k).copied().unwrap_or(0.0) / factorial(k))
        .collect()
}

/// Taylor coefficients `X_0..X_order` of the consistent trajectory through
/// `point`, obtained order by order from the algebraic rows and `s' = A11 s
/// + A12 u + Phi_s`.
pub fn consistent_jets<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    order: usize,
) -> Result<Vec<DVector<f64>>> {
    let n = model.n_state();
    let nd = model.n_diff();
    let na = n - nd;
    if point.s0.len() != nd {
        return Err(Error::Dimension {
            context: "analysis point differential state".into(),
            expected: nd,
            found: point.s0.len(),
        });
    }
    let a = model.a_matrix();
    let a11 = a.view((0, 0), (nd, nd)).into_owned();
    let a12 = a.view((0, nd), (nd, na)).into_owned();
    let a21 = a.view((nd, 0), (na, nd)).into_owned();
    let a22 = a.view((nd, nd), (na, na)).into_owned();
    let solver = DenseSolver::new(&a22)
        .ok_or_else(|| Error::Initialization("algebraic block is singular".into()))?;
    let input = input_coefficients(&point.input, order);

    let mut x: Vec<DVector<f64>> = Vec::with_capacity(order + 1);
    let mut s_next = point.s0.clone();
    for j in 0..=order {
        let mut xj = DVector::zeros(n);
        xj.rows_mut(0, nd).copy_from(&s_next);
        x.push(xj);
        let phi = model.phi_jet(&x, &input[..=j]);
        let phi_j = &phi[j];
        let rhs = -(&a21 * &s_next + phi_j.rows(nd, na));
        let u = if na == 0 {
            rhs
        } else {
            solver
                .solve(&rhs)
                .ok_or_else(|| Error::Initialization("algebraic solve failed".into()))?
        };
        x[j].rows_mut(nd, na).copy_from(&u);
        s_next = (&a11 * &s_next + &a12 * &u + phi_j.rows(0, nd)) / (j as f64 + 1.0);
    }
    Ok(x)
}

/// Stacked derivative arrays and their Jacobian blocks at a point.
#[derive(Debug, Clone)]
pub struct DerivativeArrays {
    pub gamma: usize,
    pub delta: usize,
    pub n: usize,
    /// `F, F', ..., F^(gamma)` including the input terms.
    pub g_stack: DVector<f64>,
    /// `H, H', ..., H^(delta)`.
    pub h_stack: DVector<f64>,
    pub g_x: DMatrix<f64>,
    pub g_xdot: DMatrix<f64>,
    pub g_w: DMatrix<f64>,
    pub h_x: DMatrix<f64>,
    pub h_xdot: DMatrix<f64>,
    pub h_w: DMatrix<f64>,
    /// State derivatives `x, x', ..., x^(m)` at the point.
    pub derivatives: Vec<DVector<f64>>,
}

impl DerivativeArrays {
    /// Highest state derivative appearing in `w`.
    pub fn w_order(&self) -> usize {
        self.derivatives.len() - 1
    }

    pub fn j_o(&self) -> DMatrix<f64> {
        let top = hcat(&[&self.g_x, &self.g_xdot, &self.g_w]);
        let bottom = hcat(&[&self.h_x, &self.h_xdot, &self.h_w]);
        vcat(&[&top, &bottom])
    }

    pub fn lower_right(&self) -> DMatrix<f64> {
        let top = hcat(&[&self.g_xdot, &self.g_w]);
        let bottom = hcat(&[&self.h_xdot, &self.h_w]);
        vcat(&[&top, &bottom])
    }

    pub fn g_full(&self) -> DMatrix<f64> {
        hcat(&[&self.g_x, &self.g_xdot, &self.g_w])
    }

    pub fn g_dynamic(&self) -> DMatrix<f64> {
        hcat(&[&self.g_xdot, &self.g_w])
    }

    pub fn record(&self, point: &AnalysisPoint) -> PointRecord {
        let v = |d: &DVector<f64>| d.iter().copied().collect::<Vec<_>>();
        PointRecord {
            t: point.t,
            x: v(&self.derivatives[0]),
            xdot: v(&self.derivatives[1]),
            w: self.derivatives[2..].iter().map(v).collect(),
            input_derivatives: point.input.clone(),
        }
    }
}

pub(crate) fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (b.nrows(), b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub(crate) fn vcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
    }
    out
}

fn check_orders(gamma: usize, delta: usize) -> Result<()> {
    let order = gamma.max(delta);
    if order > MAX_ORDER {
        return Err(Error::UnsupportedOrder {
            order,
            max: MAX_ORDER,
        });
    }
    Ok(())
}

/// Stacked maps `(F_gamma, H_delta)` evaluated at arbitrary state
/// derivatives `x, x', ..., x^(m)` (not necessarily consistent).
pub fn stacked_maps<M: JetModel + ?Sized>(
    model: &M,
    derivatives: &[DVector<f64>],
    input: &[f64],
    gamma: usize,
    delta: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_orders(gamma, delta)?;
    let m = (gamma + 1).max(delta);
    if derivatives.len() < m + 1 {
        return Err(Error::Dimension {
            context: "state derivatives".into(),
            expected: m + 1,
            found: derivatives.len(),
        });
    }
    let x: Vec<DVector<f64>> = derivatives[..=m]
        .iter()
        .enumerate()
        .map(|(j, d)| d / factorial(j))
        .collect();
    let input = input_coefficients(input, m);
    let (e, a, c) = (model.e_matrix(), model.a_matrix(), model.c_matrix());
    let n = model.n_state();
    let p = model.n_outputs();
    let phi = model.phi_jet(&x, &input);
    let h = model.h_jet(&x);
    let mut g_stack = DVector::zeros((gamma + 1) * n);
    for k in 0..=gamma {
        let gk = (&e * &x[k + 1] * (k as f64 + 1.0) - &a * &x[k] - &phi[k]) * factorial(k);
        g_stack.rows_mut(k * n, n).copy_from(&gk);
    }
    let mut h_stack = DVector::zeros((delta + 1) * p);
    for k in 0..=delta {
        let hk = (&c * &x[k] + &h[k]) * factorial(k);
        h_stack.rows_mut(k * p, p).copy_from(&hk);
    }
    Ok((g_stack, h_stack))
}

/// Derivative arrays at explicit state derivatives `x, x', ..., x^(m)`,
/// `m >= max(gamma + 1, delta)`.
pub fn derivative_arrays_at<M: JetModel + ?Sized>(
    model: &M,
    derivatives: &[DVector<f64>],
    input: &[f64],
    gamma: usize,
    delta: usize,
) -> Result<DerivativeArrays> {
    let (g_stack, h_stack) = stacked_maps(model, derivatives, input, gamma, delta)?;
    let m = (gamma + 1).max(delta);
    let n = model.n_state();
    let p = model.n_outputs();
    let x: Vec<DVector<f64>> = derivatives[..=m]
        .iter()
        .enumerate()
        .map(|(j, d)| d / factorial(j))
        .collect();
    let (e, a, c) = (model.e_matrix(), model.a_matrix(), model.c_matrix());
    let dphi = model.phi_jacobian_jet(&x);
    let dh = model.h_jacobian_jet(&x);

    let mut g = DMatrix::zeros((gamma + 1) * n, (m + 1) * n);
    for k in 0..=gamma {
        g.view_mut((k * n, (k + 1) * n), (n, n)).copy_from(&e);
        for j in 0..=k {
            let mut block = -&dphi[k - j] * (factorial(k) / factorial(j));
            if j == k {
                block -= &a;
            }
            g.view_mut((k * n, j * n), (n, n)).copy_from(&block);
        }
    }
    let mut hm = DMatrix::zeros((delta + 1) * p, (m + 1) * n);
    for k in 0..=delta {
        for j in 0..=k {
            let mut block = &dh[k - j] * (factorial(k) / factorial(j));
            if j == k {
                block += &c;
            }
            hm.view_mut((k * p, j * n), (p, n)).copy_from(&block);
        }
    }
    let split = |mat: &DMatrix<f64>| {
        (
            mat.columns(0, n).into_owned(),
            mat.columns(n, n).into_owned(),
            mat.columns(2 * n, (m - 1) * n).into_owned(),
        )
    };
    let (g_x, g_xdot, g_w) = split(&g);
    let (h_x, h_xdot, h_w) = split(&hm);
    Ok(DerivativeArrays {
        gamma,
        delta,
        n,
        g_stack,
        h_stack,
        g_x,
        g_xdot,
        g_w,
        h_x,
        h_xdot,
        h_w,
        derivatives: derivatives[..=m].to_vec(),
    })
}

/// Derivative arrays along the consistent trajectory through `point`.
pub fn build_derivative_arrays<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    gamma: usize,
    delta: usize,
) -> Result<DerivativeArrays> {
    check_orders(gamma, delta)?;
    let m = (gamma + 1).max(delta);
    let jets = consistent_jets(model, point, m)?;
    let derivatives: Vec<DVector<f64>> = jets
        .iter()
        .enumerate()
        .map(|(j, c)| c * factorial(j))
        .collect();
    derivative_arrays_at(model, &derivatives, &point.input, gamma, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Linearized,
    Solvability,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub holds: bool,
    pub rank: Option<usize>,
    pub required: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Condition {
    fn rank(name: impl Into<String>, rank: usize, required: usize) -> Self {
        Condition {
            name: name.into(),
            holds: rank == required,
            rank: Some(rank),
            required: Some(required),
            detail: None,
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    pub constant_rank: bool,
    /// Rank observed at each sample, in sample order.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub kind: TestKind,
    pub verdict: bool,
    pub conditions: Vec<Condition>,
    pub tolerance: RankTolerance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<PointRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<Neighborhood>,
    /// Finite pencil eigenvalues as `[re, im]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub least_gamma: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub least_orders: Option<[usize; 2]>,
}

impl ObservabilityReport {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Finite eigenvalues of the pencil `lambda E - T` by shift-and-invert:
/// for a shift `mu` with `mu E - T` regular, `M = (mu E - T)^-1 E` has
/// eigenvalues `1 / (mu - lambda)` and zeros for infinite eigenvalues.
pub fn pencil_eigenvalues(e: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = e.nrows();
    let scale = e.amax().max(t.amax()).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..8 {
        let mu = scale * rng.random_range(0.5..1.5);
        let shifted = e * mu - t;
        let info = numerical_rank(&shifted, RankTolerance::default());
        if info.rank < n {
            continue;
        }
        let m = shifted.lu().solve(e).ok_or(Error::SingularPencil)?;
        let m_scale = m.amax().max(f64::MIN_POSITIVE);
        let thetas = crate::linalg::eigenvalues(&m);
        let mut out: Vec<Complex64> = thetas
            .into_iter()
            .filter(|th| th.norm() > 1e-10 * m_scale)
            .map(|th| Complex64::new(mu, 0.0) - th.inv())
            .collect();
        out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        return Ok(out);
    }
    Err(Error::SingularPencil)
}

/// Rank conditions for complete observability of the linear descriptor
/// system `(E, T, C)`: `rank [E; C] = n` and `rank [lambda E - T; C] = n`
/// at every finite pencil eigenvalue.
pub fn check_c_observability(
    e: &DMatrix<f64>,
    t: &DMatrix<f64>,
    c: &DMatrix<f64>,
    tolerance: RankTolerance,
) -> Result<ObservabilityReport> {
    let n = e.nrows();
    if e.ncols() != n || t.nrows() != n || t.ncols() != n || c.ncols() != n {
        return Err(Error::Dimension {
            context: "E, T, C column counts".into(),
            expected: n,
            found: t.ncols().max(c.ncols()),
        });
    }
    let c1_rank = numerical_rank(&vcat(&[e, c]), tolerance).rank;
    let mut conditions = vec![Condition::rank("C1", c1_rank, n)];
    let eigs = pencil_eigenvalues(e, t)?;
    let mut c2_all = true;
    for lambda in &eigs {
        let mut stacked = DMatrix::<Complex64>::zeros(n + c.nrows(), n);
        for r in 0..n {
            for col in 0..n {
                stacked[(r, col)] = *lambda * e[(r, col)] - t[(r, col)];
            }
        }
        for r in 0..c.nrows() {
            for col in 0..n {
                stacked[(n + r, col)] = Complex64::new(c[(r, col)], 0.0);
            }
        }
        let rank = numerical_rank_complex(&stacked, tolerance).rank;
        c2_all &= rank == n;
        conditions.push(
            Condition::rank("C2", rank, n)
                .with_detail(format!("lambda = {} {:+}i", lambda.re, lambda.im)),
        );
    }
    let verdict = conditions[0].holds && c2_all;
    Ok(ObservabilityReport {
        kind: TestKind::Linearized,
        verdict,
        conditions,
        tolerance,
        gamma: None,
        delta: None,
        point: None,
        neighborhood: None,
        eigenvalues: Some(eigs.iter().map(|l| [l.re, l.im]).collect()),
        least_gamma: None,
        least_orders: None,
    })
}

/// Neighborhood sampling and rank tolerance for the nonlinear tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub tolerance: RankTolerance,
    /// Relative radius of the sampled ball around the differential state.
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            tolerance: RankTolerance::default(),
            radius: 1e-3,
            samples: 16,
            seed: 0,
        }
    }
}

fn neighbors(point: &AnalysisPoint, opts: &AnalysisOptions) -> Vec<AnalysisPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.samples)
        .map(|_| {
            let s = point
                .s0
                .map(|v| v * (1.0 + opts.radius * rng.random_range(-1.0..=1.0)));
            point.with_state(s)
        })
        .collect()
}

fn consistency_tolerance(arrays: &DerivativeArrays, input: &[f64]) -> f64 {
    let scale = arrays
        .derivatives
        .iter()
        .map(|d| d.amax())
        .chain(input.iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    1e-8 * scale * factorial(arrays.gamma + 1)
}

struct SolvabilityRanks {
    dynamic: usize,
    w: usize,
    full: usize,
}

fn solvability_ranks(arrays: &DerivativeArrays, tol: RankTolerance) -> SolvabilityRanks {
    SolvabilityRanks {
        dynamic: numerical_rank(&arrays.g_dynamic(), tol).rank,
        w: numerical_rank(&arrays.g_w, tol).rank,
        full: numerical_rank(&arrays.g_full(), tol).rank,
    }
}

/// Conditions S1-S4 at `gamma`, with S3 constancy sampled over the
/// neighborhood. Errors when the point does not satisfy `F_gamma = u`.
fn solvability_at<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    gamma: usize,
    opts: &AnalysisOptions,
) -> Result<(Vec<Condition>, Neighborhood, DerivativeArrays)> {
    let arrays = build_derivative_arrays(model, point, gamma, 0)?;
    let n = arrays.n;
    let residual = arrays.g_stack.amax();
    let tol = consistency_tolerance(&arrays, &point.input);
    if residual > tol {
        return Err(Error::InconsistentPoint {
            residual,
            tolerance: tol,
        });
    }
    let center = solvability_ranks(&arrays, opts.tolerance);
    let samples = neighbors(point, opts);
    let sampled: Vec<Result<SolvabilityRanks>> = samples
        .par_iter()
        .map(|p| {
            let a = build_derivative_arrays(model, p, gamma, 0)?;
            Ok(solvability_ranks(&a, opts.tolerance))
        })
        .collect();
    let sampled: Vec<SolvabilityRanks> = sampled.into_iter().collect::<Result<_>>()?;
    let constant = sampled
        .iter()
        .all(|r| r.dynamic == center.dynamic && r.w == center.w);
    let full_everywhere = sampled.iter().all(|r| r.full == (gamma + 1) * n);

    let conditions = vec![
        Condition {
            name: "S1".into(),
            holds: true,
            rank: None,
            required: None,
            detail: Some("analytic OCV, F_gamma is smooth".into()),
        },
        Condition {
            name: "S2".into(),
            holds: true,
            rank: None,
            required: None,
            detail: Some(format!("residual {residual:e} <= {tol:e}")),
        },
        Condition {
            name: "S3".into(),
            holds: center.dynamic == n + center.w && constant,
            rank: Some(center.dynamic),
            required: Some(n + center.w),
            detail: Some(format!(
                "1-full: rank [G_xdot G_w] vs n + rank G_w = {n} + {}; constant rank over ball: {constant}",
                center.w
            )),
        },
        Condition {
            name: "S4".into(),
            holds: center.full == (gamma + 1) * n && full_everywhere,
            rank: Some(center.full),
            required: Some((gamma + 1) * n),
            detail: None,
        },
    ];
    let neighborhood = Neighborhood {
        radius: opts.radius,
        samples: opts.samples,
        seed: opts.seed,
        constant_rank: constant,
        ranks: sampled.iter().map(|r| r.dynamic).collect(),
    };
    Ok((conditions, neighborhood, arrays))
}

/// Solvability conditions for `gamma = 0..=gamma_max`; the verdict holds when
/// some `gamma` satisfies all of them, and the least such value is reported
/// as the uniform differentiation index.
pub fn check_solvability<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    gamma_max: usize,
    opts: &AnalysisOptions,
) -> Result<ObservabilityReport> {
    check_orders(gamma_max, 0)?;
    let mut conditions = Vec::new();
    let mut least = None;
    let mut last = None;
    for gamma in 0..=gamma_max {
        let (conds, hood, arrays) = solvability_at(model, point, gamma, opts)?;
        let ok = conds.iter().all(|c| c.holds);
        conditions.extend(conds.into_iter().map(|mut c| {
            c.name = format!("{}[gamma={gamma}]", c.name);
            c
        }));
        last = Some((hood, arrays));
        if ok {
            least = Some(gamma);
            break;
        }
    }
    let (hood, arrays) = last.expect("gamma range is non-empty");
    Ok(ObservabilityReport {
        kind: TestKind::Solvability,
        verdict: least.is_some(),
        conditions,
        tolerance: opts.tolerance,
        gamma: Some(arrays.gamma),
        delta: None,
        point: Some(arrays.record(point)),
        neighborhood: Some(hood),
        eigenvalues: None,
        least_gamma: least,
        least_orders: None,
    })
}

struct SmoothRanks {
    j_o: usize,
    lower: usize,
}

fn smooth_ranks(arrays: &DerivativeArrays, tol: RankTolerance) -> SmoothRanks {
    SmoothRanks {
        j_o: numerical_rank(&arrays.j_o(), tol).rank,
        lower: numerical_rank(&arrays.lower_right(), tol).rank,
    }
}

/// Conditions O1-O2 at orders `(gamma, delta)`. O1 must hold at the point
/// and at every neighborhood sample; O2 requires `rank J_O` to agree across
/// them.
pub fn check_smooth_observability<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    gamma: usize,
    delta: usize,
    opts: &AnalysisOptions,
) -> Result<ObservabilityReport> {
    let arrays = build_derivative_arrays(model, point, gamma, delta)?;
    let n = arrays.n;
    let center = smooth_ranks(&arrays, opts.tolerance);
    let samples = neighbors(point, opts);
    let sampled: Vec<Result<SmoothRanks>> = samples
        .par_iter()
        .map(|p| {
            let a = build_derivative_arrays(model, p, gamma, delta)?;
            Ok(smooth_ranks(&a, opts.tolerance))
        })
        .collect();
    let sampled: Vec<SmoothRanks> = sampled.into_iter().collect::<Result<_>>()?;
    let o1_samples = sampled.iter().all(|r| r.j_o == n + r.lower);
    let constant = sampled.iter().all(|r| r.j_o == center.j_o);
    let o1 = Condition::rank("O1", center.j_o, n + center.lower);
    let o1 = Condition {
        holds: o1.holds && o1_samples,
        ..o1
    }
    .with_detail(format!(
        "rank J_O = n + rank(lower-right block) = {n} + {}; holds on all samples: {o1_samples}",
        center.lower
    ));
    let o2 = Condition {
        name: "O2".into(),
        holds: constant,
        rank: Some(center.j_o),
        required: None,
        detail: Some(format!("{} samples", opts.samples)),
    };
    let verdict = o1.holds && o2.holds;
    Ok(ObservabilityReport {
        kind: TestKind::Smooth,
        verdict,
        conditions: vec![o1, o2],
        tolerance: opts.tolerance,
        gamma: Some(gamma),
        delta: Some(delta),
        point: Some(arrays.record(point)),
        neighborhood: Some(Neighborhood {
            radius: opts.radius,
            samples: opts.samples,
            seed: opts.seed,
            constant_rank: constant,
            ranks: sampled.iter().map(|r| r.j_o).collect(),
        }),
        eigenvalues: None,
        least_gamma: None,
        least_orders: None,
    })
}

/// All `(gamma, delta)` pairs within bounds, ordered by `gamma + delta`
/// then `gamma`.
pub fn order_pairs(gamma_max: usize, delta_max: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..=gamma_max)
        .flat_map(|g| (0..=delta_max).map(move |d| (g, d)))
        .collect();
    pairs.sort_by_key(|&(g, d)| (g + d, g));
    pairs
}

/// Least `(gamma, delta)` for which the system is solvable at `gamma` and
/// smoothly observable. The returned report is the one for the winning pair,
/// or for the last pair tried.
pub fn find_least_orders<M: JetModel + ?Sized>(
    model: &M,
    point: &AnalysisPoint,
    gamma_max: usize,
    delta_max: usize,
    opts: &AnalysisOptions,
) -> Result<(Option<(usize, usize)>, ObservabilityReport)> {
    check_orders(gamma_max, delta_max)?;
    let mut solvable = vec![None; gamma_max + 1];
    let mut last = None;
    for (gamma, delta) in order_pairs(gamma_max, delta_max) {
        let ok = match solvable[gamma] {
            Some(v) => v,
            None => {
                let (conds, _, _) = solvability_at(model, point, gamma, opts)?;
                let v = conds.iter().all(|c| c.holds);
                solvable[gamma] = Some(v);
                v
            }
        };
        if !ok {
            continue;
        }
        let mut report = check_smooth_observability(model, point, gamma, delta, opts)?;
        if report.verdict {
            report.least_orders = Some([gamma, delta]);
            return Ok((Some((gamma, delta)), report));
        }
        last = Some(report);
    }
    let report = match last {
        Some(r) => r,
        None => check_smooth_observability(model, point, gamma_max, delta_max, opts)?,
    };
    Ok((None, report))
}
