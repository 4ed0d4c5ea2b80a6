//! Pack-level descriptor system for `Ns` series modules of `Np` parallel cells.
//!
//! State layout is `x = [s; u]`. `s` holds every SOC, then every RC voltage
//! when the RC branch is modelled; `u` holds the branch currents. Inside each
//! block cells are module-major: cell `i` of module `j` sits at `j*Np + i`
//! (0-based). Rows follow the same split: one differential row per entry of
//! `s`, then per module `Np - 1` voltage-equality rows and one current-sum row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, DenseSolver, RankTolerance};
use crate::ocv_cell::{cell_voltage, CellParams, CellState, OcvModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackTopology {
    pub ns: usize,
    pub np: usize,
    pub include_rc: bool,
    /// Module-major: `cells[j * np + i]`.
    pub cells: Vec<CellParams>,
}

impl PackTopology {
    pub fn new(ns: usize, np: usize, cells: Vec<CellParams>, include_rc: bool) -> Result<Self> {
        let t = PackTopology {
            ns,
            np,
            include_rc,
            cells,
        };
        t.validate()?;
        Ok(t)
    }

    /// Two modules of two cells with the reference resistances and capacities,
    /// sharing one OCV curve.
    pub fn reference_2p2s(ocv: OcvModel) -> Self {
        let r = [0.1, 0.22, 0.3, 0.13];
        let q = [1500.0, 1800.0, 1200.0, 2000.0];
        let cells = r
            .iter()
            .zip(q)
            .map(|(&r, q)| CellParams::resistive(r, q, ocv))
            .collect();
        PackTopology {
            ns: 2,
            np: 2,
            include_rc: false,
            cells,
        }
    }

    /// `ns x np` identical cells.
    pub fn homogeneous(ns: usize, np: usize, cell: CellParams, include_rc: bool) -> Self {
        PackTopology {
            ns,
            np,
            include_rc,
            cells: vec![cell; ns * np],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns == 0 {
            return Err(Error::invalid("pack.ns", "must be at least 1"));
        }
        if self.np == 0 {
            return Err(Error::invalid("pack.np", "must be at least 1"));
        }
        if self.cells.len() != self.ns * self.np {
            return Err(Error::Dimension {
                context: "pack.cells (ns * np)".into(),
                expected: self.ns * self.np,
                found: self.cells.len(),
            });
        }
        for (k, c) in self.cells.iter().enumerate() {
            c.validate(self.include_rc, &format!("pack.cells[{k}]"))?;
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.ns * self.np
    }

    pub fn n_diff(&self) -> usize {
        if self.include_rc {
            2 * self.n_cells()
        } else {
            self.n_cells()
        }
    }

    pub fn n_alg(&self) -> usize {
        self.n_cells()
    }

    pub fn n_state(&self) -> usize {
        self.n_diff() + self.n_alg()
    }

    pub fn n_outputs(&self) -> usize {
        1 + self.ns * (self.np - 1)
    }

    /// Flat index of cell `i` in module `j` (both 0-based).
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.np + i
    }

    /// `"i.j"` with 1-based cell and module numbers.
    pub fn cell_label(&self, k: usize) -> String {
        format!("{}.{}", k % self.np + 1, k / self.np + 1)
    }

    /// Same pack without RC branches.
    pub fn reduced(&self) -> Self {
        PackTopology {
            include_rc: false,
            ..self.clone()
        }
    }

    /// Sum over modules of the parallel combination of ohmic resistances:
    /// the instantaneous slope of pack voltage with respect to pack current.
    pub fn pack_resistance(&self) -> f64 {
        (0..self.ns)
            .map(|j| {
                let g: f64 = (0..self.np)
                    .map(|i| 1.0 / self.cells[self.index(i, j)].r_ohmic)
                    .sum();
                1.0 / g
            })
            .sum()
    }

    fn cell_state(&self, s: &DVector<f64>, k: usize) -> CellState {
        CellState {
            z: s[k],
            u_rc: if self.include_rc {
                s[self.n_cells() + k]
            } else {
                0.0
            },
        }
    }
}

/// SOCs after the cells of each module have relaxed to a common open-circuit
/// voltage at zero pack current, conserving each module's charge. `U = 0`.
pub fn rest_socs(topology: &PackTopology, z0: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != topology.n_cells() {
        return Err(Error::Dimension {
            context: "rest_socs initial SOCs".into(),
            expected: topology.n_cells(),
            found: z0.len(),
        });
    }
    let mut out = vec![0.0; z0.len()];
    for j in 0..topology.ns {
        let idx: Vec<usize> = (0..topology.np).map(|i| topology.index(i, j)).collect();
        let charge: f64 = idx
            .iter()
            .map(|&k| topology.cells[k].q_capacity * z0[k])
            .sum();
        let charge_at = |v: f64| -> f64 {
            idx.iter()
                .map(|&k| {
                    let c = &topology.cells[k];
                    c.q_capacity * invert_ocv(&c.ocv, v)
                })
                .sum()
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &k in &idx {
            lo = lo.min(topology.cells[k].ocv.value(0.0));
            hi = hi.max(topology.cells[k].ocv.value(1.0));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if charge_at(mid) < charge {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        for &k in &idx {
            out[k] = invert_ocv(&topology.cells[k].ocv, v);
        }
    }
    Ok(out)
}

/// Inverse of a monotone OCV curve, clamped to [0, 1].
fn invert_ocv(ocv: &OcvModel, v: f64) -> f64 {
    if v <= ocv.value(0.0) {
        return 0.0;
    }
    if v >= ocv.value(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ocv.value(mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackState {
    pub s: DVector<f64>,
    pub u: DVector<f64>,
}

impl PackState {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.s.len() + self.u.len());
        x.rows_mut(0, self.s.len()).copy_from(&self.s);
        x.rows_mut(self.s.len(), self.u.len()).copy_from(&self.u);
        x
    }

    pub fn from_vector(x: &DVector<f64>, n_diff: usize) -> Self {
        PackState {
            s: x.rows(0, n_diff).into_owned(),
            u: x.rows(n_diff, x.len() - n_diff).into_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PackSystem {
    pub topology: PackTopology,
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// Linear part of the output map (resistance and RC-voltage couplings).
    pub c: DMatrix<f64>,
    /// One 0-based cell index per module for every output row.
    pub combos: Vec<Vec<usize>>,
}

/// Canonical independent output combinations: cell 1 of every module, then
/// the tuples that switch exactly one module to another cell, in
/// lexicographic order (last module varying fastest). Entries are 0-based
/// cell indices within a module.
pub fn output_combinations(topology: &PackTopology) -> Vec<Vec<usize>> {
    let mut combos = vec![vec![0; topology.ns]];
    for j in (0..topology.ns).rev() {
        for i in 1..topology.np {
            let mut c = vec![0; topology.ns];
            c[j] = i;
            combos.push(c);
        }
    }
    combos
}

pub fn assemble_system(topology: &PackTopology) -> Result<PackSystem> {
    topology.validate()?;
    let nc = topology.n_cells();
    let nd = topology.n_diff();
    let n = topology.n_state();
    let (ns, np) = (topology.ns, topology.np);

    let mut e = DMatrix::zeros(n, n);
    for k in 0..nd {
        e[(k, k)] = 1.0;
    }

    let mut a = DMatrix::zeros(n, n);
    for k in 0..nc {
        let c = &topology.cells[k];
        a[(k, nd + k)] = 1.0 / c.q_capacity;
        if topology.include_rc {
            a[(nc + k, nc + k)] = -1.0 / c.rc_time_constant();
            a[(nc + k, nd + k)] = 1.0 / c.c_rc;
        }
    }
    for j in 0..ns {
        let base = nd + j * np;
        let first = topology.index(0, j);
        for i in 1..np {
            let k = topology.index(i, j);
            let row = base + i - 1;
            a[(row, nd + first)] = topology.cells[first].r_ohmic;
            a[(row, nd + k)] = -topology.cells[k].r_ohmic;
            if topology.include_rc {
                a[(row, nc + first)] = 1.0;
                a[(row, nc + k)] = -1.0;
            }
        }
        for i in 0..np {
            a[(base + np - 1, nd + topology.index(i, j))] = 1.0;
        }
        let block = a.view((base, base), (np, np)).into_owned();
        if DenseSolver::new(&block).is_none() {
            return Err(Error::SingularModule { module: j + 1 });
        }
    }

    let combos = output_combinations(topology);
    let mut c = DMatrix::zeros(combos.len(), n);
    for (row, combo) in combos.iter().enumerate() {
        for (j, &i) in combo.iter().enumerate() {
            let k = topology.index(i, j);
            c[(row, nd + k)] = topology.cells[k].r_ohmic;
            if topology.include_rc {
                c[(row, nc + k)] = 1.0;
            }
        }
    }

    let system = PackSystem {
        topology: topology.clone(),
        e,
        a,
        c,
        combos,
    };
    let probe = DVector::from_element(nd, 0.5);
    let jac = system.output_jacobian(&probe);
    let rank = numerical_rank(&jac, RankTolerance::default()).rank;
    if rank != system.n_outputs() {
        return Err(Error::DependentOutputs {
            rank,
            expected: system.n_outputs(),
        });
    }
    Ok(system)
}

impl PackSystem {
    pub fn n_diff(&self) -> usize {
        self.topology.n_diff()
    }

    pub fn n_alg(&self) -> usize {
        self.topology.n_alg()
    }

    pub fn n_state(&self) -> usize {
        self.topology.n_state()
    }

    pub fn n_outputs(&self) -> usize {
        self.combos.len()
    }

    pub fn a11(&self) -> DMatrix<f64> {
        let nd = self.n_diff();
        self.a.view((0, 0), (nd, nd)).into_owned()
    }

    pub fn a12(&self) -> DMatrix<f64> {
        let (nd, na) = (self.n_diff(), self.n_alg());
        self.a.view((0, nd), (nd, na)).into_owned()
    }

    pub fn a21(&self) -> DMatrix<f64> {
        let (nd, na) = (self.n_diff(), self.n_alg());
        self.a.view((nd, 0), (na, nd)).into_owned()
    }

    pub fn a22(&self) -> DMatrix<f64> {
        let (nd, na) = (self.n_diff(), self.n_alg());
        self.a.view((nd, nd), (na, na)).into_owned()
    }

    pub fn c_s(&self) -> DMatrix<f64> {
        self.c.columns(0, self.n_diff()).into_owned()
    }

    pub fn c_u(&self) -> DMatrix<f64> {
        self.c.columns(self.n_diff(), self.n_alg()).into_owned()
    }

    /// Nonlinear algebraic rows: per module `g(z_1j) - g(z_ij)`, then `-I`.
    pub fn phi_u(&self, s: &DVector<f64>, current: f64) -> DVector<f64> {
        let t = &self.topology;
        let mut out = DVector::zeros(t.n_alg());
        for j in 0..t.ns {
            let base = j * t.np;
            let first = t.index(0, j);
            let g1 = t.cells[first].ocv.value(s[first]);
            for i in 1..t.np {
                let k = t.index(i, j);
                out[base + i - 1] = g1 - t.cells[k].ocv.value(s[k]);
            }
            out[base + t.np - 1] = -current;
        }
        out
    }

    /// `d phi_u / d s`, size `n_alg x n_diff`.
    pub fn phi_u_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let t = &self.topology;
        let mut d = DMatrix::zeros(t.n_alg(), t.n_diff());
        for j in 0..t.ns {
            let base = j * t.np;
            let first = t.index(0, j);
            let g1 = t.cells[first].ocv.derivative(s[first], 1);
            for i in 1..t.np {
                let k = t.index(i, j);
                d[(base + i - 1, first)] = g1;
                d[(base + i - 1, k)] = -t.cells[k].ocv.derivative(s[k], 1);
            }
        }
        d
    }

    /// OCV sums per output row.
    pub fn h(&self, s: &DVector<f64>) -> DVector<f64> {
        let t = &self.topology;
        DVector::from_iterator(
            self.combos.len(),
            self.combos.iter().map(|combo| {
                combo
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let k = t.index(i, j);
                        t.cells[k].ocv.value(s[k])
                    })
                    .sum::<f64>()
            }),
        )
    }

    /// `dh / ds`, size `n_outputs x n_diff`.
    pub fn h_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let t = &self.topology;
        let mut d = DMatrix::zeros(self.combos.len(), t.n_diff());
        for (row, combo) in self.combos.iter().enumerate() {
            for (j, &i) in combo.iter().enumerate() {
                let k = t.index(i, j);
                d[(row, k)] = t.cells[k].ocv.derivative(s[k], 1);
            }
        }
        d
    }

    /// Full output Jacobian `C + dh/dx` at differential state `s`.
    pub fn output_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.c.clone();
        let dh = self.h_jacobian(s);
        let mut block = j.columns_mut(0, self.n_diff());
        block += &dh;
        j
    }

    /// `Phi` over all rows.
    pub fn phi(&self, s: &DVector<f64>, current: f64) -> DVector<f64> {
        let nd = self.n_diff();
        let mut out = DVector::zeros(self.n_state());
        out.rows_mut(nd, self.n_alg())
            .copy_from(&self.phi_u(s, current));
        out
    }
}

fn check_state(topology: &PackTopology, x: &PackState) -> Result<()> {
    if x.s.len() != topology.n_diff() {
        return Err(Error::Dimension {
            context: "differential state".into(),
            expected: topology.n_diff(),
            found: x.s.len(),
        });
    }
    if x.u.len() != topology.n_alg() {
        return Err(Error::Dimension {
            context: "algebraic state".into(),
            expected: topology.n_alg(),
            found: x.u.len(),
        });
    }
    Ok(())
}

/// `Phi(x, I)` over all `n` rows.
pub fn phi_eval(topology: &PackTopology, x: &PackState, current: f64) -> Result<DVector<f64>> {
    check_state(topology, x)?;
    let nd = topology.n_diff();
    let mut out = DVector::zeros(topology.n_state());
    for j in 0..topology.ns {
        let first = topology.index(0, j);
        let g1 = topology.cells[first].ocv.value(x.s[first]);
        for i in 1..topology.np {
            let k = topology.index(i, j);
            out[nd + j * topology.np + i - 1] = g1 - topology.cells[k].ocv.value(x.s[k]);
        }
        out[nd + j * topology.np + topology.np - 1] = -current;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputEval {
    /// Sum of cell terminal voltages along each combination.
    pub y: DVector<f64>,
    /// `C x`.
    pub linear: DVector<f64>,
    /// `h(x)`.
    pub nonlinear: DVector<f64>,
}

pub fn output_eval(topology: &PackTopology, x: &PackState) -> Result<OutputEval> {
    check_state(topology, x)?;
    let combos = output_combinations(topology);
    let rows = combos.len();
    let mut y = DVector::zeros(rows);
    let mut linear = DVector::zeros(rows);
    let mut nonlinear = DVector::zeros(rows);
    for (row, combo) in combos.iter().enumerate() {
        for (j, &i) in combo.iter().enumerate() {
            let k = topology.index(i, j);
            let cell = &topology.cells[k];
            let st = topology.cell_state(&x.s, k);
            y[row] += cell_voltage(cell, &st, x.u[k]);
            linear[row] += cell.r_ohmic * x.u[k] + st.u_rc;
            nonlinear[row] += cell.ocv.value(st.z);
        }
    }
    Ok(OutputEval {
        y,
        linear,
        nonlinear,
    })
}

/// Per module: `V_1j - V_ij` for `i = 2..Np`, then `sum_i I_ij - I`.
pub fn kirchhoff_residual(
    topology: &PackTopology,
    x: &PackState,
    current: f64,
) -> Result<DVector<f64>> {
    check_state(topology, x)?;
    let mut out = DVector::zeros(topology.n_alg());
    for j in 0..topology.ns {
        let voltage = |i: usize| {
            let k = topology.index(i, j);
            cell_voltage(&topology.cells[k], &topology.cell_state(&x.s, k), x.u[k])
        };
        let v1 = voltage(0);
        for i in 1..topology.np {
            out[j * topology.np + i - 1] = v1 - voltage(i);
        }
        let sum: f64 = (0..topology.np).map(|i| x.u[topology.index(i, j)]).sum();
        out[j * topology.np + topology.np - 1] = sum - current;
    }
    Ok(out)
}

/// `T = A + dPhi/dx` and `C = dH/dx` at `x_bar`.
pub fn linearize(system: &PackSystem, x_bar: &PackState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_state(&system.topology, x_bar)?;
    let nd = system.n_diff();
    let mut t = system.a.clone();
    let dphi = system.phi_u_jacobian(&x_bar.s);
    for r in 0..system.n_alg() {
        for c in 0..nd {
            t[(nd + r, c)] += dphi[(r, c)];
        }
    }
    Ok((t, system.output_jacobian(&x_bar.s)))
}
