//! Fixed-step integration of the pack DAE and of the Luenberger-type observer.
//!
//! Both systems are index 1 with branch currents entering the algebraic rows
//! linearly, so every RK stage re-solves the currents from one dense LU
//! factorization computed up front.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{vec_norm_inf, DenseSolver};
use crate::pack_model::{kirchhoff_residual, PackState, PackSystem};

/// Observer SOC clamp applied before OCV evaluation.
pub const SOC_CLAMP: (f64, f64) = (0.001, 0.999);

/// Piecewise-constant pack current, right-continuous at sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    times: Vec<f64>,
    currents: Vec<f64>,
}

impl CurrentProfile {
    pub fn new(times: Vec<f64>, currents: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("profile", "needs at least one sample"));
        }
        if times.len() != currents.len() {
            return Err(Error::Dimension {
                context: "profile currents".into(),
                expected: times.len(),
                found: currents.len(),
            });
        }
        if times[0] != 0.0 {
            return Err(Error::invalid("profile", "first sample time must be 0"));
        }
        for w in times.windows(2) {
            if w[1].is_nan() || w[1] <= w[0] {
                return Err(Error::invalid(
                    "profile",
                    format!("times must be strictly increasing ({} then {})", w[0], w[1]),
                ));
            }
        }
        if let Some(c) = currents.iter().find(|c| !c.is_finite()) {
            return Err(Error::invalid("profile", format!("non-finite current {c}")));
        }
        Ok(CurrentProfile { times, currents })
    }

    pub fn constant(current: f64) -> Self {
        CurrentProfile {
            times: vec![0.0],
            currents: vec![current],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn currents(&self) -> &[f64] {
        &self.currents
    }

    /// Held value at `t`; the last sample is held forever.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.currents[k.saturating_sub(1)]
    }

    /// Current applied on `[t, t + dt)`, treating breakpoints within
    /// `snap` of `t` as already reached.
    pub(crate) fn held_after(&self, t: f64, snap: f64) -> f64 {
        self.value_at(t + snap)
    }

    pub(crate) fn breakpoints(&self, t0: f64, t1: f64, snap: f64) -> Vec<f64> {
        self.times
            .iter()
            .copied()
            .filter(|&b| b > t0 + snap && b < t1 - snap)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    ImplicitEuler,
}

/// Time series from a plant or observer run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// `i.j` label per cell, module-major.
    pub labels: Vec<String>,
    pub include_rc: bool,
    pub times: Vec<f64>,
    pub states: Vec<PackState>,
    /// First output row, i.e. the pack terminal voltage.
    pub v_pack: Vec<f64>,
    /// Euclidean norm of the algebraic-row residual at each stored state.
    pub residuals: Vec<f64>,
}

impl SimResult {
    pub fn n_cells(&self) -> usize {
        self.labels.len()
    }

    pub fn soc(&self, step: usize, cell: usize) -> f64 {
        self.states[step].s[cell]
    }
}

pub(crate) fn labels(system: &PackSystem) -> Vec<String> {
    (0..system.topology.n_cells())
        .map(|k| system.topology.cell_label(k))
        .collect()
}

pub(crate) fn rk4<F>(s: &DVector<f64>, h: f64, mut f: F) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    let k1 = f(s, 0.0)?;
    let k2 = f(&(s + &k1 * (0.5 * h)), 0.5 * h)?;
    let k3 = f(&(s + &k2 * (0.5 * h)), 0.5 * h)?;
    let k4 = f(&(s + &k3 * h), h)?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Plant integrator state: the factorized current-split matrix.
#[derive(Debug, Clone)]
pub struct Plant<'a> {
    system: &'a PackSystem,
    solver: DenseSolver,
    a11: DMatrix<f64>,
    a12: DMatrix<f64>,
    a21: DMatrix<f64>,
}

impl<'a> Plant<'a> {
    pub fn new(system: &'a PackSystem) -> Result<Self> {
        let solver = DenseSolver::new(&system.a22())
            .ok_or_else(|| Error::Initialization("current-split matrix is singular".into()))?;
        Ok(Plant {
            system,
            solver,
            a11: system.a11(),
            a12: system.a12(),
            a21: system.a21(),
        })
    }

    /// Branch currents satisfying the algebraic rows at `s`.
    pub fn currents(&self, s: &DVector<f64>, current: f64) -> Option<DVector<f64>> {
        let rhs = -(&self.a21 * s + self.system.phi_u(s, current));
        self.solver.solve(&rhs)
    }

    fn rate(&self, s: &DVector<f64>, current: f64, time: f64) -> Result<DVector<f64>> {
        let u = self
            .currents(s, current)
            .ok_or(Error::Integration { time })?;
        Ok(&self.a11 * s + &self.a12 * u)
    }

    /// One step of length `h` starting at `time`; the returned currents are
    /// consistent with `current`.
    pub fn step(
        &self,
        state: &PackState,
        current: f64,
        h: f64,
        time: f64,
        integrator: Integrator,
    ) -> Result<PackState> {
        let s = match integrator {
            Integrator::Rk4 => rk4(&state.s, h, |s, tau| self.rate(s, current, time + tau))?,
            Integrator::ImplicitEuler => self.implicit_euler(&state.s, current, h, time)?,
        };
        let u = self
            .currents(&s, current)
            .ok_or(Error::Integration { time: time + h })?;
        Ok(PackState { s, u })
    }

    fn implicit_euler(
        &self,
        s0: &DVector<f64>,
        current: f64,
        h: f64,
        time: f64,
    ) -> Result<DVector<f64>> {
        let n = s0.len();
        let err = Error::Integration { time: time + h };
        let mut s = s0 + self.rate(s0, current, time)? * h;
        for _ in 0..50 {
            let resid = &s - s0 - self.rate(&s, current, time + h)? * h;
            let coupling = &self.a21 + self.system.phi_u_jacobian(&s);
            let du_ds = self
                .solver
                .solve_matrix(&coupling)
                .ok_or(Error::Integration { time: time + h })?;
            let jf = &self.a11 - &self.a12 * du_ds;
            let jac = DMatrix::identity(n, n) - jf * h;
            let delta = jac
                .lu()
                .solve(&resid)
                .ok_or(Error::Integration { time: time + h })?;
            s -= &delta;
            if vec_norm_inf(&delta) <= 1e-14 * vec_norm_inf(&s).max(1.0) {
                return Ok(s);
            }
        }
        Err(err)
    }
}

/// Branch currents consistent with `s0` at pack current `i0`.
pub fn consistent_init(system: &PackSystem, s0: &DVector<f64>, i0: f64) -> Result<DVector<f64>> {
    if s0.len() != system.n_diff() {
        return Err(Error::Dimension {
            context: "initial differential state".into(),
            expected: system.n_diff(),
            found: s0.len(),
        });
    }
    let plant = Plant::new(system)?;
    plant
        .currents(s0, i0)
        .ok_or_else(|| Error::Initialization("algebraic solve failed".into()))
}

/// One RK4 step of the plant under constant current.
pub fn plant_step(
    system: &PackSystem,
    state: &PackState,
    current: f64,
    dt: f64,
) -> Result<PackState> {
    Plant::new(system)?.step(state, current, dt, 0.0, Integrator::Rk4)
}

fn check_soc(system: &PackSystem, state: &PackState, time: f64) -> Result<()> {
    for k in 0..system.topology.n_cells() {
        let z = state.s[k];
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::SocBounds {
                time,
                cell: system.topology.cell_label(k),
                value: z,
            });
        }
    }
    Ok(())
}

pub(crate) fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(
            "horizon",
            format!("must be non-negative, got {horizon}"),
        ));
    }
    Ok((horizon / dt).round() as usize)
}

pub(crate) fn snap(dt: f64) -> f64 {
    1e-9 * dt
}

/// Plant run on the grid `t_n = n dt`, `n = 0..=round(horizon / dt)`.
/// Steps are split at profile breakpoints; stored currents and outputs use
/// the current held just after each grid time.
pub fn simulate(
    system: &PackSystem,
    s0: &DVector<f64>,
    profile: &CurrentProfile,
    dt: f64,
    horizon: f64,
    integrator: Integrator,
) -> Result<SimResult> {
    let steps = step_count(dt, horizon)?;
    let plant = Plant::new(system)?;
    let eps = snap(dt);
    let i0 = profile.held_after(0.0, eps);
    let u0 = consistent_init(system, s0, i0)?;
    let mut state = PackState {
        s: s0.clone(),
        u: u0,
    };
    check_soc(system, &state, 0.0)?;

    let mut out = SimResult {
        labels: labels(system),
        include_rc: system.topology.include_rc,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        v_pack: Vec::with_capacity(steps + 1),
        residuals: Vec::with_capacity(steps + 1),
    };
    let record = |out: &mut SimResult, t: f64, st: &PackState, current: f64| -> Result<()> {
        let y = &system.c * st.to_vector() + system.h(&st.s);
        let r = kirchhoff_residual(&system.topology, st, current)?;
        out.times.push(t);
        out.v_pack.push(y[0]);
        out.residuals.push(r.norm());
        out.states.push(st.clone());
        Ok(())
    };
    record(&mut out, 0.0, &state, i0)?;

    for n in 0..steps {
        let t0 = n as f64 * dt;
        let t1 = (n + 1) as f64 * dt;
        let mut a = t0;
        let mut cuts = profile.breakpoints(t0, t1, eps);
        cuts.push(t1);
        for b in cuts {
            let current = profile.held_after(a, eps);
            state = plant.step(&state, current, b - a, a, integrator)?;
            a = b;
        }
        let next = profile.held_after(t1, eps);
        state.u = plant
            .currents(&state.s, next)
            .ok_or(Error::Integration { time: t1 })?;
        check_soc(system, &state, t1)?;
        record(&mut out, t1, &state, next)?;
    }
    Ok(out)
}

/// Observer gain `K = [K_s; K_u]`, one row per state and one column per
/// output row.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGain {
    pub k: DMatrix<f64>,
}

impl ObserverGain {
    pub fn new(k: DMatrix<f64>) -> Self {
        ObserverGain { k }
    }

    pub fn zeros(system: &PackSystem) -> Self {
        ObserverGain {
            k: DMatrix::zeros(system.n_state(), system.n_outputs()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ObserverGain {
            k: &self.k * factor,
        }
    }

    pub fn ks(&self, n_diff: usize) -> DMatrix<f64> {
        self.k.rows(0, n_diff).into_owned()
    }

    pub fn ku(&self, n_diff: usize) -> DMatrix<f64> {
        self.k.rows(n_diff, self.k.nrows() - n_diff).into_owned()
    }

    pub fn check(&self, system: &PackSystem) -> Result<()> {
        if self.k.nrows() != system.n_state() {
            return Err(Error::Dimension {
                context: "gain rows (state dimension)".into(),
                expected: system.n_state(),
                found: self.k.nrows(),
            });
        }
        if self.k.ncols() != system.n_outputs() {
            return Err(Error::Dimension {
                context: "gain columns (output rows)".into(),
                expected: system.n_outputs(),
                found: self.k.ncols(),
            });
        }
        Ok(())
    }
}

/// Pack voltage samples bracketing one grid interval. Inside the interval the
/// observer sees `V(t) = v~(t) + R_pack I(t)`, where `v~ = V - R_pack I` is
/// interpolated linearly; `v~` stays continuous across current steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSegment {
    pub v_start: f64,
    pub v_end: f64,
    pub current_start: f64,
    pub current_end: f64,
    pub span: f64,
}

impl MeasurementSegment {
    /// Voltage held at `v` under constant current.
    pub fn constant(v: f64, current: f64, span: f64) -> Self {
        MeasurementSegment {
            v_start: v,
            v_end: v,
            current_start: current,
            current_end: current,
            span,
        }
    }

    pub fn voltage_at(&self, r_pack: f64, tau: f64, current: f64) -> f64 {
        let a = self.v_start - r_pack * self.current_start;
        let b = self.v_end - r_pack * self.current_end;
        a + (b - a) * (tau / self.span) + r_pack * current
    }
}

/// Observer with its gain blocks and factorized `A22 - K_u C_u`.
#[derive(Debug, Clone)]
pub struct Observer<'a> {
    system: &'a PackSystem,
    solver: DenseSolver,
    ks: DMatrix<f64>,
    ku: DMatrix<f64>,
    a11: DMatrix<f64>,
    a12: DMatrix<f64>,
    a21: DMatrix<f64>,
    c_s: DMatrix<f64>,
    c_u: DMatrix<f64>,
    r_pack: f64,
    clamp_events: usize,
}

impl<'a> Observer<'a> {
    pub fn new(system: &'a PackSystem, gain: &ObserverGain) -> Result<Self> {
        gain.check(system)?;
        let nd = system.n_diff();
        let ks = gain.ks(nd);
        let ku = gain.ku(nd);
        let c_u = system.c_u();
        let m = system.a22() - &ku * &c_u;
        let solver = DenseSolver::new(&m).ok_or(Error::GainIncompatible)?;
        Ok(Observer {
            system,
            solver,
            ks,
            ku,
            a11: system.a11(),
            a12: system.a12(),
            a21: system.a21(),
            c_s: system.c_s(),
            c_u,
            r_pack: system.topology.pack_resistance(),
            clamp_events: 0,
        })
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn clamped(&mut self, s: &DVector<f64>) -> DVector<f64> {
        let nc = self.system.topology.n_cells();
        let mut out = s.clone();
        let mut hit = false;
        for k in 0..nc {
            let z = out[k].clamp(SOC_CLAMP.0, SOC_CLAMP.1);
            if z != out[k] {
                hit = true;
                out[k] = z;
            }
        }
        if hit {
            self.clamp_events += 1;
        }
        out
    }

    /// Currents and innovation base `y - C_s s - h(s)` at `s`.
    fn solve(
        &mut self,
        s: &DVector<f64>,
        v_meas: f64,
        current: f64,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let sc = self.clamped(s);
        let y = DVector::from_element(self.system.n_outputs(), v_meas);
        let base = y - &self.c_s * s - self.system.h(&sc);
        let rhs = -(&self.a21 * s + self.system.phi_u(&sc, current) + &self.ku * &base);
        let u = self.solver.solve(&rhs)?;
        Some((u, base))
    }

    fn rate(
        &mut self,
        s: &DVector<f64>,
        v_meas: f64,
        current: f64,
        time: f64,
    ) -> Result<DVector<f64>> {
        let (u, base) = self
            .solve(s, v_meas, current)
            .ok_or(Error::Integration { time })?;
        let innovation = base - &self.c_u * &u;
        Ok(&self.a11 * s + &self.a12 * u + &self.ks * innovation)
    }

    /// Consistent estimate for `s_hat` given the measured voltage.
    pub fn initialize(
        &mut self,
        s_hat: &DVector<f64>,
        v_meas: f64,
        current: f64,
    ) -> Result<PackState> {
        let (u, _) = self
            .solve(s_hat, v_meas, current)
            .ok_or_else(|| Error::Initialization("observer algebraic solve failed".into()))?;
        Ok(PackState {
            s: s_hat.clone(),
            u,
        })
    }

    /// Advances `[offset, offset + h]` inside a measurement segment under a
    /// constant current. Returned currents solve the algebraic rows at the
    /// end time with `exit_current`.
    pub fn step(
        &mut self,
        estimate: &PackState,
        segment: &MeasurementSegment,
        offset: f64,
        h: f64,
        current: f64,
        time: f64,
    ) -> Result<PackState> {
        let r_pack = self.r_pack;
        let s = rk4(&estimate.s, h, |s, tau| {
            let v = segment.voltage_at(r_pack, offset + tau, current);
            self.rate(s, v, current, time + tau)
        })?;
        let v = segment.voltage_at(r_pack, offset + h, current);
        let (u, _) = self
            .solve(&s, v, current)
            .ok_or(Error::Integration { time: time + h })?;
        Ok(PackState { s, u })
    }

    /// Norm of the observer's algebraic rows at `x`.
    pub fn residual(&mut self, x: &PackState, v_meas: f64, current: f64) -> f64 {
        let sc = self.clamped(&x.s);
        let y = DVector::from_element(self.system.n_outputs(), v_meas);
        let innovation = y - &self.c_s * &x.s - &self.c_u * &x.u - self.system.h(&sc);
        let r = &self.a21 * &x.s
            + self.system.a22() * &x.u
            + self.system.phi_u(&sc, current)
            + &self.ku * innovation;
        r.norm()
    }
}

/// One observer RK4 step of length `dt` over a full measurement segment.
pub fn observer_step(
    system: &PackSystem,
    gain: &ObserverGain,
    estimate: &PackState,
    y_meas: &MeasurementSegment,
    current: f64,
    dt: f64,
) -> Result<PackState> {
    Observer::new(system, gain)?.step(estimate, y_meas, 0.0, dt, current, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRun {
    pub estimate: SimResult,
    pub clamp_events: usize,
}

/// Runs the observer against recorded pack voltages `truth.v_pack` on the
/// grid `truth.times`, with the same current profile that drove the plant.
/// Only `times` and `v_pack` of `truth` are read, so a replayed CSV and an
/// in-process plant run give identical estimates.
pub fn estimate(
    system: &PackSystem,
    gain: &ObserverGain,
    truth: &SimResult,
    profile: &CurrentProfile,
    s_hat0: &DVector<f64>,
) -> Result<EstimateRun> {
    if truth.times.len() != truth.v_pack.len() || truth.times.is_empty() {
        return Err(Error::MisalignedGrids(
            "measurement times and voltages differ in length".into(),
        ));
    }
    if s_hat0.len() != system.n_diff() {
        return Err(Error::Dimension {
            context: "initial estimate".into(),
            expected: system.n_diff(),
            found: s_hat0.len(),
        });
    }
    let mut obs = Observer::new(system, gain)?;
    let times = &truth.times;
    let dt_ref = if times.len() > 1 {
        times[1] - times[0]
    } else {
        1.0
    };
    let eps = snap(dt_ref);

    let i0 = profile.held_after(times[0], eps);
    let mut state = obs.initialize(s_hat0, truth.v_pack[0], i0)?;
    let mut out = SimResult {
        labels: labels(system),
        include_rc: system.topology.include_rc,
        times: times.clone(),
        states: Vec::with_capacity(times.len()),
        v_pack: Vec::with_capacity(times.len()),
        residuals: Vec::with_capacity(times.len()),
    };
    let mut record = |obs: &mut Observer, st: &PackState, v: f64, current: f64| {
        let y = &system.c * st.to_vector() + system.h(&st.s);
        out.v_pack.push(y[0]);
        out.residuals.push(obs.residual(st, v, current));
        out.states.push(st.clone());
    };
    record(&mut obs, &state, truth.v_pack[0], i0);

    for n in 0..times.len() - 1 {
        let (t0, t1) = (times[n], times[n + 1]);
        let span = t1 - t0;
        let segment = MeasurementSegment {
            v_start: truth.v_pack[n],
            v_end: truth.v_pack[n + 1],
            current_start: profile.held_after(t0, eps),
            current_end: profile.held_after(t1, eps),
            span,
        };
        let mut a = t0;
        let mut cuts = profile.breakpoints(t0, t1, eps);
        cuts.push(t1);
        for b in cuts {
            let current = profile.held_after(a, eps);
            state = obs.step(&state, &segment, a - t0, b - a, current, a)?;
            a = b;
        }
        let next = segment.current_end;
        let (u, _) = obs
            .solve(&state.s, truth.v_pack[n + 1], next)
            .ok_or(Error::Integration { time: t1 })?;
        state.u = u;
        record(&mut obs, &state, truth.v_pack[n + 1], next);
    }
    let clamp_events = obs.clamp_events();
    Ok(EstimateRun {
        estimate: out,
        clamp_events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsReport {
    pub t_start: f64,
    pub samples: usize,
    /// Per-cell SOC RMS error (fraction, not percent).
    pub soc: Vec<f64>,
    /// Per-cell branch-current RMS error (A).
    pub current: Vec<f64>,
}

pub fn rms_error(truth: &SimResult, estimate: &SimResult, t_start: f64) -> Result<RmsReport> {
    if truth.times != estimate.times {
        return Err(Error::MisalignedGrids(format!(
            "truth has {} samples, estimate has {}",
            truth.times.len(),
            estimate.times.len()
        )));
    }
    if truth.n_cells() != estimate.n_cells() {
        return Err(Error::MisalignedGrids("cell counts differ".into()));
    }
    let nc = truth.n_cells();
    let mut soc = vec![0.0; nc];
    let mut current = vec![0.0; nc];
    let mut samples = 0;
    for (n, &t) in truth.times.iter().enumerate() {
        if t < t_start {
            continue;
        }
        samples += 1;
        for k in 0..nc {
            let ez = truth.states[n].s[k] - estimate.states[n].s[k];
            let ei = truth.states[n].u[k] - estimate.states[n].u[k];
            soc[k] += ez * ez;
            current[k] += ei * ei;
        }
    }
    if samples == 0 {
        return Err(Error::MisalignedGrids(format!(
            "no samples at or after t = {t_start}"
        )));
    }
    for v in soc.iter_mut().chain(current.iter_mut()) {
        *v = (*v / samples as f64).sqrt();
    }
    Ok(RmsReport {
        t_start,
        samples,
        soc,
        current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocv_cell::{CellParams, OcvModel};
    use crate::pack_model::{assemble_system, PackTopology};
    use approx::assert_relative_eq;

    fn reference() -> PackSystem {
        assemble_system(&PackTopology::reference_2p2s(OcvModel::graphite_nmc())).unwrap()
    }

    #[test]
    fn profile_hold() {
        let p = CurrentProfile::new(vec![0.0, 1.0, 2.5], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p.value_at(0.0), 1.0);
        assert_eq!(p.value_at(0.999), 1.0);
        assert_eq!(p.value_at(1.0), -2.0);
        assert_eq!(p.value_at(10.0), 3.0);
        assert!(CurrentProfile::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(CurrentProfile::new(vec![0.5], vec![1.0]).is_err());
    }

    #[test]
    fn homogeneous_split() {
        let topo = PackTopology::homogeneous(
            1,
            3,
            CellParams::resistive(0.05, 1000.0, OcvModel::graphite_nmc()),
            false,
        );
        let sys = assemble_system(&topo).unwrap();
        let u = consistent_init(&sys, &DVector::from_element(3, 0.4), 3.0).unwrap();
        for k in 0..3 {
            assert_relative_eq!(u[k], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_cell_closed_form() {
        let g = OcvModel::graphite_nmc();
        let cells = vec![
            CellParams::resistive(0.1, 1500.0, g),
            CellParams::resistive(0.22, 1800.0, g),
        ];
        let sys = assemble_system(&PackTopology::new(1, 2, cells, false).unwrap()).unwrap();
        let (z1, z2, i0) = (0.2, 0.25, 1.3);
        let u = consistent_init(&sys, &DVector::from_vec(vec![z1, z2]), i0).unwrap();
        let i1 = (g.value(z2) - g.value(z1) + 0.22 * i0) / (0.1 + 0.22);
        assert!((u[0] - i1).abs() < 1e-12);
        assert!((u[1] - (i0 - i1)).abs() < 1e-12);
    }

    #[test]
    fn rest_state_is_fixed() {
        let topo = PackTopology::homogeneous(
            1,
            2,
            CellParams::resistive(0.05, 1000.0, OcvModel::graphite_nmc()),
            false,
        );
        let sys = assemble_system(&topo).unwrap();
        let s = DVector::from_element(2, 0.5);
        let x = PackState {
            u: consistent_init(&sys, &s, 0.0).unwrap(),
            s,
        };
        let next = plant_step(&sys, &x, 0.0, 1.0).unwrap();
        assert_eq!(next.s, x.s);
        assert_eq!(next.u, DVector::zeros(2));
    }

    #[test]
    fn coulomb_counting_single_cell() {
        let topo = PackTopology::homogeneous(
            1,
            1,
            CellParams::resistive(0.1, 1500.0, OcvModel::graphite_nmc()),
            false,
        );
        let sys = assemble_system(&topo).unwrap();
        let res = simulate(
            &sys,
            &DVector::from_element(1, 0.3),
            &CurrentProfile::constant(1.5),
            0.5,
            100.0,
            Integrator::Rk4,
        )
        .unwrap();
        let z_end = res.states.last().unwrap().s[0];
        assert_relative_eq!(z_end, 0.3 + 1.5 * 100.0 / 1500.0, epsilon = 1e-13);
    }

    #[test]
    fn charge_conservation_constant_current() {
        let sys = reference();
        let s0 = DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22]);
        let res = simulate(
            &sys,
            &s0,
            &CurrentProfile::constant(2.0),
            0.1,
            100.0,
            Integrator::Rk4,
        )
        .unwrap();
        for j in 0..2 {
            let mut q = 0.0;
            for n in 0..res.times.len() - 1 {
                let dt = res.times[n + 1] - res.times[n];
                let sum = |st: &PackState| st.u[2 * j] + st.u[2 * j + 1];
                q += 0.5 * dt * (sum(&res.states[n]) + sum(&res.states[n + 1]));
            }
            assert!((q - 200.0).abs() / 200.0 < 1e-6);
        }
        assert!(res.residuals.iter().all(|&r| r < 1e-10));
    }

    #[test]
    fn implicit_euler_is_consistent() {
        let sys = reference();
        let s0 = DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22]);
        let ie = simulate(
            &sys,
            &s0,
            &CurrentProfile::constant(-1.0),
            1.0,
            50.0,
            Integrator::ImplicitEuler,
        )
        .unwrap();
        let rk = simulate(
            &sys,
            &s0,
            &CurrentProfile::constant(-1.0),
            1.0,
            50.0,
            Integrator::Rk4,
        )
        .unwrap();
        assert!(ie.residuals.iter().all(|&r| r < 1e-10));
        let diff = (&ie.states[50].s - &rk.states[50].s).amax();
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn soc_bound_halts() {
        let topo = PackTopology::homogeneous(
            1,
            1,
            CellParams::resistive(0.1, 100.0, OcvModel::graphite_nmc()),
            false,
        );
        let sys = assemble_system(&topo).unwrap();
        let err = simulate(
            &sys,
            &DVector::from_element(1, 0.905),
            &CurrentProfile::constant(1.0),
            1.0,
            100.0,
            Integrator::Rk4,
        )
        .unwrap_err();
        match err {
            Error::SocBounds { time, .. } => assert_eq!(time, 10.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_gain_matches_plant() {
        let sys = reference();
        let s = DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22]);
        let x = PackState {
            u: consistent_init(&sys, &s, 1.0).unwrap(),
            s,
        };
        let seg = MeasurementSegment::constant(7.3, 1.0, 0.1);
        let a = plant_step(&sys, &x, 1.0, 0.1).unwrap();
        let b = observer_step(&sys, &ObserverGain::zeros(&sys), &x, &seg, 1.0, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rms_definitions() {
        let sys = reference();
        let s0 = DVector::from_vec(vec![0.2, 0.25, 0.15, 0.22]);
        let truth = simulate(
            &sys,
            &s0,
            &CurrentProfile::constant(0.5),
            1.0,
            10.0,
            Integrator::Rk4,
        )
        .unwrap();
        let r = rms_error(&truth, &truth, 0.0).unwrap();
        assert!(r.soc.iter().chain(r.current.iter()).all(|&v| v == 0.0));
        let mut shifted = truth.clone();
        for st in &mut shifted.states {
            st.s[2] += 0.01;
        }
        let r = rms_error(&truth, &shifted, 0.0).unwrap();
        assert_relative_eq!(r.soc[2], 0.01, epsilon = 1e-12);
        assert_eq!(r.soc[0], 0.0);
        let mut short = truth.clone();
        short.times.pop();
        assert!(rms_error(&truth, &short, 0.0).is_err());
    }
}
