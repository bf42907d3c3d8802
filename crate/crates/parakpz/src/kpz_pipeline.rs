//! Cole–Hopf route to the KPZ solution `h = Y + Y^{lr} + Y^{rLrl} + h^P` with
//! `h^P = log w^P`, the classical solve used on smooth noise, and the
//! diagnostics attached to a solution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhanced_noise::{ydist, EnhancedData, NoisePath, NormParams};
use crate::error::{Error, Result};
use crate::function_spaces::{besov_norm, parabolic_norm, ParaFunction, TimeField};
use crate::heat_calculus::{integrate_coeffs, QuadratureRule, StepCache};
use crate::linear_solver::{solve_rhe, solve_sharp, SolveReport, SolverOptions};
use crate::paraproducts::{para_modified, TimeSmoother};
use crate::spectral_core::{weighted_sup_norm, DyadicPartition, GridField, WeightSpec, C64};

/// Lower envelope `f(t,x)·e^{r|x|^δ} ≥ c` required before taking logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivityFloor {
    pub c: f64,
    pub r: f64,
    pub delta: f64,
}

impl Default for PositivityFloor {
    fn default() -> Self {
        Self { c: 1e-8, r: 0.0, delta: 0.9 }
    }
}

pub fn exp_map(f: &TimeField) -> TimeField {
    f.map_frames(|v| v.map_real(f64::exp))
}

/// Pointwise logarithm behind the positivity guard.
pub fn log_map(f: &TimeField, floor: &PositivityFloor) -> Result<TimeField> {
    let grid = *f.grid();
    let env: Vec<f64> = (0..grid.n()).map(|i| (floor.r * grid.x(i).abs().powf(floor.delta)).exp()).collect();
    let worst = f
        .frames()
        .par_iter()
        .enumerate()
        .map(|(k, fr)| {
            fr.values()
                .iter()
                .zip(&env)
                .enumerate()
                .map(|(i, (v, e))| (v.re * e, k, i))
                .fold((f64::INFINITY, 0, 0), |a, b| if b.0 < a.0 || b.0.is_nan() { b } else { a })
        })
        .reduce(|| (f64::INFINITY, 0, 0), |a, b| if b.0 < a.0 || b.0.is_nan() { b } else { a });
    if !(worst.0 >= floor.c) {
        return Err(Error::Positivity { t: f.mesh()[worst.1], x: grid.x(worst.2), value: worst.0 });
    }
    Ok(f.map_frames(|v| v.map_real(f64::ln)))
}

/// `sup_t ‖f(t)‖_{∞,z}`.
pub fn weighted_sup(f: &TimeField, w: &WeightSpec) -> f64 {
    f.frames().par_iter().zip(f.mesh()).map(|(v, &t)| weighted_sup_norm(v, w, t)).reduce(|| 0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpzOptions {
    pub solver: SolverOptions,
    pub floor: PositivityFloor,
    /// Run the remainder equation as a cross-check of the decomposition.
    pub sharp_check: bool,
}

impl Default for KpzOptions {
    fn default() -> Self {
        Self { solver: SolverOptions::default(), floor: PositivityFloor::default(), sharp_check: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KpzCertificate {
    /// `sup_t ‖h^P(t)‖_{∞,p(δ)}`.
    pub sup_hp_weighted: f64,
    /// `min w^P·e^{r|x|^δ}` over the solve.
    pub positivity_min: f64,
    /// `sup |h♯ − (h^P − h′≺≺Y^r)|` when the cross-check ran.
    pub sharp_gap: Option<f64>,
    pub sharp_scale: f64,
    pub rhe: SolveReport,
    pub sharp: Option<SolveReport>,
}

#[derive(Debug, Clone)]
pub struct KpzSolution {
    pub h: TimeField,
    pub h_prime: TimeField,
    /// From the remainder equation if it ran, else `h^P − h′≺≺Y^r`.
    pub h_sharp: TimeField,
    pub h_p: TimeField,
    pub w_p: ParaFunction,
    pub certificate: KpzCertificate,
}

/// `w0 = exp(h̄ − Y(0))`.
pub fn factor_initial(data: &EnhancedData, hbar: &GridField) -> Result<GridField> {
    hbar.check_grid(data.y.frame(0))?;
    Ok((hbar - data.y.frame(0)).map_real(f64::exp))
}

/// KPZ solution through the rough heat equation.
pub fn solve_kpz(data: &EnhancedData, hbar: &GridField, opts: &KpzOptions) -> Result<KpzSolution> {
    let w0 = factor_initial(data, hbar)?;
    let (w_p, rhe) = solve_rhe(data, &w0, &opts.solver)?;
    let grid = *data.grid();
    let env: Vec<f64> =
        (0..grid.n()).map(|i| (opts.floor.r * grid.x(i).abs().powf(opts.floor.delta)).exp()).collect();
    let positivity_min = w_p
        .u
        .frames()
        .iter()
        .flat_map(|f| f.values().iter().zip(&env).map(|(v, e)| v.re * e))
        .fold(f64::INFINITY, f64::min);
    let h_p = log_map(&w_p.u, &opts.floor)?;
    let h_prime = data.x_rlrl().add(&h_p.derivative(1).real_part());
    let part = DyadicPartition::new(&grid, opts.solver.k0)?;
    let sm = TimeSmoother::default();
    let structural = h_p.sub(&para_modified(&h_prime, &data.y_r, &sm, &part)?);
    let (h_sharp, sharp, sharp_gap) = if opts.sharp_check {
        let u0 = h_p.frame(0).clone();
        let (hs, rep) = solve_sharp(data, &h_p, &h_prime, &u0, &opts.solver)?;
        let gap = hs.sub(&structural).sup_norm();
        (hs, Some(rep), Some(gap))
    } else {
        (structural, None, None)
    };
    let h = data.exponent().add(&h_p);
    let certificate = KpzCertificate {
        sup_hp_weighted: weighted_sup(&h_p, &WeightSpec::polynomial(opts.floor.delta)),
        positivity_min,
        sharp_gap,
        sharp_scale: h_p.sup_norm(),
        rhe,
        sharp,
    };
    Ok(KpzSolution { h, h_prime, h_sharp, h_p, w_p, certificate })
}

/// Solves `𝓛v = a·v + b·∂v` with `a`, `b` linear in time between frames, by
/// the second-order exponential Runge–Kutta rule on `substeps` sub-intervals
/// per frame interval. Returns `v` on the frames.
pub fn solve_classical_linear(v0: &GridField, a: &TimeField, b: &TimeField, substeps: usize) -> Result<TimeField> {
    a.check_mesh(b)?;
    v0.check_grid(a.frame(0))?;
    let grid = *v0.grid();
    let substeps = substeps.max(1);
    let mut euler = StepCache::new(grid, QuadratureRule::ExponentialEuler);
    let mut linear = StepCache::new(grid, QuadratureRule::PiecewiseLinear);
    let rhs = |v: &[C64], ca: &GridField, cb: &GridField| -> Vec<C64> {
        let vf = GridField::from_coeffs(grid, v.to_vec());
        let dv = vf.derivative(1);
        let out = &(&vf * ca) + &(&dv * cb);
        out.coeffs().to_vec()
    };
    let mesh = a.mesh();
    let mut v = v0.coeffs().to_vec();
    let mut frames = vec![v0.real_part()];
    for k in 0..mesh.len() - 1 {
        let h = (mesh[k + 1] - mesh[k]) / substeps as f64;
        for s in 0..substeps {
            let th0 = s as f64 / substeps as f64;
            let th1 = (s + 1) as f64 / substeps as f64;
            let at = |th: f64| (a.frame(k).scale(1.0 - th).axpy(th, a.frame(k + 1)), b.frame(k).scale(1.0 - th).axpy(th, b.frame(k + 1)));
            let (a0, b0) = at(th0);
            let (a1, b1) = at(th1);
            let n0 = rhs(&v, &a0, &b0);
            let pred = integrate_coeffs(&v, &[n0.clone(), n0.clone()], &[0.0, h], &mut euler).pop().unwrap();
            let n1 = rhs(&pred, &a1, &b1);
            v = integrate_coeffs(&v, &[n0, n1], &[0.0, h], &mut linear).pop().unwrap();
        }
        let f = GridField::from_coeffs(grid, v.clone()).real_part();
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("classical solve at t = {}", mesh[k + 1])));
        }
        v = f.coeffs().to_vec();
        frames.push(f);
    }
    TimeField::new(mesh.to_vec(), frames)
}

/// Classical solve on smooth noise: `v = e^{h−Y}` with
/// `𝓛v = v(½X² − c^{lr}) + X∂v`, `h = Y + log v`.
pub fn solve_kpz_direct(theta: &NoisePath, data: &EnhancedData, hbar: &GridField, substeps: usize) -> Result<TimeField> {
    let res = data.noise_residual(theta);
    if !(res < 1e-8) {
        return Err(Error::InvalidParameter(format!("data were not built from this noise (residual {res:e})")));
    }
    let v0 = factor_initial(data, hbar)?;
    let neg_c: Vec<f64> = data.constants.c_lr.iter().map(|c| -c).collect();
    let a = data.x.map_frames(|v| v.map_real(|x| 0.5 * x * x)).add_constant_per_frame(&neg_c);
    let v = solve_classical_linear(&v0, &a, &data.x, substeps)?;
    let lv = log_map(&v, &PositivityFloor { c: 1e-300, r: 0.0, delta: 0.9 })?;
    Ok(data.y.add(&lv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    /// `inf_{t,x} h^P(t,x)/(1+|x|)^δ`.
    pub infimum: f64,
    pub t: f64,
    pub x: f64,
    pub m_bound: f64,
}

pub fn lower_bound_check(h_p: &TimeField, delta: f64, m_bound: f64) -> LowerBoundReport {
    let grid = *h_p.grid();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (fr, &t) in h_p.frames().iter().zip(h_p.mesh()) {
        for (i, v) in fr.values().iter().enumerate() {
            let x = grid.x(i);
            let q = v.re / (1.0 + x.abs()).powf(delta);
            if q < best.0 {
                best = (q, t, x);
            }
        }
    }
    LowerBoundReport { infimum: best.0, t: best.1, x: best.2, m_bound }
}

/// Norm choices for the Lipschitz estimate of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub alpha: f64,
    pub a: f64,
    pub delta: f64,
    /// Regularity used for the initial gap.
    pub beta: f64,
    /// Rate of the sub-exponential weight `e(κ)`.
    pub kappa: f64,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self { alpha: 0.45, a: 0.03, delta: 0.9, beta: 0.4, kappa: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub hp_diff: f64,
    pub hprime_diff: f64,
    pub hsharp_diff: f64,
    pub ydist: f64,
    pub initial_gap: f64,
    /// `(hp_diff + hprime_diff + hsharp_diff) / (ydist + initial_gap)`.
    pub ratio: f64,
}

/// Left and right sides of the Lipschitz estimate for two computed solutions.
pub fn stability_from_solutions(
    y1: &EnhancedData,
    y2: &EnhancedData,
    s1: &KpzSolution,
    s2: &KpzSolution,
    hbar1: &GridField,
    hbar2: &GridField,
    p: &StabilityParams,
) -> Result<StabilityReport> {
    let part = DyadicPartition::new(y1.grid(), 1.0)?;
    let (bp, _) = crate::function_spaces::blowup_exponents(p.alpha, p.beta);
    let b_sharp = bp.max(1.0 - p.beta).clamp(0.0, 0.999);
    let w = WeightSpec::subexponential(p.kappa, p.delta, false)?;
    let norm = |a: &TimeField, b: &TimeField, blow: f64, reg: f64| -> Result<f64> {
        parabolic_norm(&a.sub(b).with_blowup(blow.clamp(0.0, 0.999)).with_weight(w), reg, &part)
    };
    let hp_diff = norm(&s1.h_p, &s2.h_p, bp, p.alpha + 1.0)?;
    let hprime_diff = norm(&s1.h_prime, &s2.h_prime, bp, p.alpha)?;
    let hsharp_diff = norm(&s1.h_sharp, &s2.h_sharp, b_sharp, 2.0 * p.alpha + 1.0)?;
    let yd = ydist(y1, y2, &NormParams { alpha: p.alpha, a: p.a }, &part)?;
    let d0 = &(hbar1 - y1.y.frame(0)) - &(hbar2 - y2.y.frame(0));
    let initial_gap = besov_norm(&d0, p.beta, &WeightSpec::polynomial(p.delta), 0.0, &part);
    let lhs = hp_diff + hprime_diff + hsharp_diff;
    let rhs = yd + initial_gap;
    let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(StabilityReport { hp_diff, hprime_diff, hsharp_diff, ydist: yd, initial_gap, ratio })
}

/// Solves both problems and compares them.
pub fn stability_check(
    y1: &EnhancedData,
    y2: &EnhancedData,
    hbar1: &GridField,
    hbar2: &GridField,
    opts: &KpzOptions,
    p: &StabilityParams,
) -> Result<StabilityReport> {
    let s1 = solve_kpz(y1, hbar1, opts)?;
    let s2 = solve_kpz(y2, hbar2, opts)?;
    stability_from_solutions(y1, y2, &s1, &s2, hbar1, hbar2, p)
}
