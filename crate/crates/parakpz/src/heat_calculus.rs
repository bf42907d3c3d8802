//! Heat semigroup, Duhamel integration, dyadic Young integrals and
//! Schauder-type probes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_spaces::{besov_norm, TimeField};
use crate::spectral_core::{DyadicPartition, Grid, GridField, WeightSpec, C64};

/// `P_t f`: multiplies coefficients by `e^{-t k²/2}`.
pub fn heat_propagate(f: &GridField, t: f64) -> Result<GridField> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    Ok(f.multiplier(|k| (-0.5 * t * k * k).exp()))
}

pub(crate) fn heat_coeffs(c: &[C64], grid: &Grid, t: f64) -> Vec<C64> {
    c.iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = grid.wavenumber(i);
            v * (-0.5 * t * k * k).exp()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureRule {
    /// Forcing frozen at the left node of every step.
    ExponentialEuler,
    /// Forcing interpolated linearly in time, integrated exactly per mode.
    PiecewiseLinear,
}

#[derive(Debug, Clone)]
pub struct DuhamelPlan {
    pub mesh: Vec<f64>,
    pub rule: QuadratureRule,
    pub start: usize,
}

impl DuhamelPlan {
    pub fn new(mesh: Vec<f64>) -> Self {
        Self { mesh, rule: QuadratureRule::PiecewiseLinear, start: 0 }
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn starting_at(mut self, start: usize) -> Self {
        self.start = start;
        self
    }
}

/// `(1 - e^{-z}(1+z)) / z²`, stable near zero.
pub(crate) fn psi(z: f64) -> f64 {
    if z < 1e-2 {
        0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0 + z.powi(4) / 144.0
    } else {
        (-(-z).exp_m1() - z * (-z).exp()) / (z * z)
    }
}

/// `(1 - e^{-z}) / z`, stable near zero.
pub(crate) fn phi1(z: f64) -> f64 {
    if z < 1e-8 {
        1.0 - z / 2.0
    } else {
        -(-z).exp_m1() / z
    }
}

/// Per-mode step factors for one step length: `u⁺ = e·u + a·f_left + b·f_right`.
#[derive(Debug, Clone)]
pub struct StepFactors {
    pub h: f64,
    pub decay: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl StepFactors {
    pub fn new(grid: &Grid, h: f64, rule: QuadratureRule) -> Self {
        let n = grid.n();
        let mut decay = Vec::with_capacity(n);
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for i in 0..n {
            let k = grid.wavenumber(i);
            let z = 0.5 * k * k * h;
            decay.push((-z).exp());
            let i0 = h * phi1(z);
            match rule {
                QuadratureRule::ExponentialEuler => {
                    left.push(i0);
                    right.push(0.0);
                }
                QuadratureRule::PiecewiseLinear => {
                    let i1 = h * (phi1(z) - psi(z));
                    left.push(i0 - i1);
                    right.push(i1);
                }
            }
        }
        Self { h, decay, left, right }
    }
}

/// Step-factor cache keyed by step length (uniform meshes need only one entry).
#[derive(Debug, Clone)]
pub struct StepCache {
    grid: Grid,
    rule: QuadratureRule,
    entries: Vec<StepFactors>,
}

impl StepCache {
    pub fn new(grid: Grid, rule: QuadratureRule) -> Self {
        Self { grid, rule, entries: Vec::new() }
    }

    pub fn get(&mut self, h: f64) -> &StepFactors {
        let tol = 1e-12 * h.abs().max(1e-300);
        if let Some(pos) = self.entries.iter().position(|e| (e.h - h).abs() <= tol) {
            return &self.entries[pos];
        }
        self.entries.push(StepFactors::new(&self.grid, h, self.rule));
        self.entries.last().unwrap()
    }
}

/// Advances `u_{k+1} = e·u_k + a·f_k + b·f_{k+1}` in coefficient space.
pub fn integrate_coeffs(
    u0: &[C64],
    forcing: &[Vec<C64>],
    mesh: &[f64],
    cache: &mut StepCache,
) -> Vec<Vec<C64>> {
    let mut out = Vec::with_capacity(mesh.len());
    out.push(u0.to_vec());
    for k in 0..mesh.len() - 1 {
        let sf = cache.get(mesh[k + 1] - mesh[k]);
        let prev = &out[k];
        let next: Vec<C64> = (0..u0.len())
            .map(|i| prev[i] * sf.decay[i] + forcing[k][i] * sf.left[i] + forcing[k + 1][i] * sf.right[i])
            .collect();
        out.push(next);
    }
    out
}

/// `V_{T_ℓ}(f)(t) = ∫_{T_ℓ}^t P_{t-s} f_s ds` on `plan.mesh[plan.start..]`.
pub fn duhamel(f: &TimeField, plan: &DuhamelPlan) -> Result<TimeField> {
    if f.mesh() != plan.mesh.as_slice() {
        return Err(Error::MeshMismatch);
    }
    let grid = *f.grid();
    let sub = f.slice(plan.start..f.len());
    let fc: Vec<Vec<C64>> = sub.frames().par_iter().map(|fr| fr.coeffs().to_vec()).collect();
    let zero = vec![C64::new(0.0, 0.0); grid.n()];
    let mut cache = StepCache::new(grid, plan.rule);
    let uc = integrate_coeffs(&zero, &fc, sub.mesh(), &mut cache);
    let frames = uc.into_par_iter().map(|c| GridField::from_coeffs(grid, c)).collect();
    TimeField::new(sub.mesh().to_vec(), frames)
}

/// `t ↦ P_{t - t_0} u0` on a mesh.
pub fn heat_flow(u0: &GridField, mesh: &[f64]) -> TimeField {
    let frames = mesh
        .par_iter()
        .map(|&t| heat_propagate(u0, t - mesh[0]).expect("increasing mesh"))
        .collect();
    TimeField::new(mesh.to_vec(), frames).expect("valid mesh")
}

#[derive(Debug, Clone)]
pub struct YoungIntegral {
    /// Level-`n_max` dyadic sum.
    pub value: TimeField,
    /// Level sum corrected by the fitted geometric tail.
    pub limit: TimeField,
    /// `sup_t ‖t^β (I^{n+1}_t − I^n_t)‖_∞` for `n = 0 .. n_max-1`.
    pub level_diffs: Vec<f64>,
    /// Fitted decay exponent `ϱ` with `diff_n ≈ C 2^{-nϱ}`.
    pub rate: f64,
    pub n_max: u32,
}

fn dyadic_nodes(m: usize, n: u32) -> Vec<usize> {
    let parts = 1usize << n;
    (0..=parts).map(|k| ((k as f64 * m as f64 / parts as f64).round() as usize).min(m)).collect()
}

fn fit_rate(diffs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .skip(diffs.len() / 3)
        .filter(|(_, d)| **d > 1e-300)
        .map(|(n, d)| (n as f64, d.log2()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let np = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / np;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / np;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    -sxy / sxx
}

/// Contraction factor for the Richardson step: the ratio of the last two level
/// differences when it is a plausible contraction, else the fitted rate.
fn extrapolation_ratio(diffs: &[f64], rate: f64) -> f64 {
    if let [.., a, b] = diffs {
        if *a > 1e-300 && *b > 0.0 && b / a <= 0.9 {
            return b / a;
        }
    }
    if rate.is_finite() {
        2f64.powf(-rate).clamp(0.0, 0.9)
    } else {
        0.0
    }
}

fn max_level(m: usize) -> Result<u32> {
    if m < 4 {
        return Err(Error::InvalidParameter("dyadic sums need at least four time steps".into()));
    }
    Ok((m as f64).log2().floor() as u32 - 1)
}

fn young_level(f: &TimeField, h: &TimeField, n: u32) -> Vec<GridField> {
    let m = f.len() - 1;
    let nodes = dyadic_nodes(m, n);
    let grid = *f.grid();
    let mut out = vec![GridField::zeros(grid); m + 1];
    let mut done = GridField::zeros(grid);
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a == b {
            continue;
        }
        let fb = f.frame(b);
        for (j, slot) in out.iter_mut().enumerate().take(b + 1).skip(a + 1) {
            *slot = &done + &(fb * &(h.frame(j) - h.frame(a)));
        }
        done = &done + &(fb * &(h.frame(b) - h.frame(a)));
    }
    out
}

fn weighted_diff(a: &[GridField], b: &[GridField], mesh: &[f64], beta: f64) -> f64 {
    a.iter()
        .zip(b)
        .zip(mesh)
        .map(|((x, y), &t)| {
            let s = if beta == 0.0 { 1.0 } else { t.max(0.0).powf(beta) };
            s * (x - y).sup_norm()
        })
        .fold(0.0, f64::max)
}

/// `I_t = ∫_0^t f dh` via right-point dyadic sums `Σ f(t_{k+1})(h(t_{k+1}∧t) − h(t_k∧t))`.
pub fn young_integral(f: &TimeField, h: &TimeField) -> Result<YoungIntegral> {
    f.check_mesh(h)?;
    let m = f.len() - 1;
    let n_max = max_level(m)?;
    let levels: Vec<Vec<GridField>> = (0..=n_max).into_par_iter().map(|n| young_level(f, h, n)).collect();
    let level_diffs: Vec<f64> = levels
        .windows(2)
        .map(|w| weighted_diff(&w[1], &w[0], f.mesh(), f.blowup))
        .collect();
    let rate = fit_rate(&level_diffs);
    let scale = levels[n_max as usize].iter().fold(0.0f64, |a, x| a.max(x.sup_norm())).max(1e-300);
    let last = *level_diffs.last().unwrap_or(&0.0);
    if !(rate > 0.0) && last > 1e-12 * scale {
        return Err(Error::Divergence(level_diffs));
    }
    let q = extrapolation_ratio(&level_diffs, rate);
    let top = &levels[n_max as usize];
    let prev = &levels[n_max as usize - 1];
    let corr: Vec<GridField> = top.iter().zip(prev).map(|(a, b)| a.axpy(q / (1.0 - q), &(a - b))).collect();
    let mut value = TimeField::new(f.mesh().to_vec(), top.clone())?;
    value.blowup = f.blowup;
    let mut limit = TimeField::new(f.mesh().to_vec(), corr)?;
    limit.blowup = f.blowup;
    Ok(YoungIntegral { value, limit, level_diffs, rate, n_max })
}

fn young_duhamel_level(f: &TimeField, h: &TimeField, n: u32) -> Vec<GridField> {
    let m = f.len() - 1;
    let grid = *f.grid();
    let mesh = f.mesh();
    let nodes = dyadic_nodes(m, n);
    let mut interval_of = vec![usize::MAX; m + 1];
    let mut completes: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for (q, w) in nodes.windows(2).enumerate() {
        if w[0] == w[1] {
            continue;
        }
        for slot in interval_of.iter_mut().take(w[1] + 1).skip(w[0] + 1) {
            *slot = q;
        }
        completes[w[1]].push(q);
    }
    let mut acc = vec![C64::new(0.0, 0.0); grid.n()];
    let mut out = Vec::with_capacity(m + 1);
    out.push(GridField::zeros(grid));
    for j in 1..=m {
        acc = heat_coeffs(&acc, &grid, mesh[j] - mesh[j - 1]);
        for &q in &completes[j] {
            let (a, b) = (nodes[q], nodes[q + 1]);
            let x = f.frame(b) * &(h.frame(b) - h.frame(a));
            let px = heat_coeffs(x.coeffs(), &grid, mesh[j] - mesh[a]);
            acc.iter_mut().zip(px).for_each(|(s, v)| *s += v);
        }
        let mut frame = acc.clone();
        let q = interval_of[j];
        if q != usize::MAX && nodes[q + 1] != j {
            let (a, b) = (nodes[q], nodes[q + 1]);
            let x = f.frame(b) * &(h.frame(j) - h.frame(a));
            let px = heat_coeffs(x.coeffs(), &grid, mesh[j] - mesh[a]);
            frame.iter_mut().zip(px).for_each(|(s, v)| *s += v);
        }
        out.push(GridField::from_coeffs(grid, frame));
    }
    out
}

/// `V(f · ∂_t h)` via `V^n_t = Σ_k P_{t−t_k} f(t_{k+1})(h(t_{k+1}∧t) − h(t_k∧t))`.
pub fn young_duhamel(f: &TimeField, h: &TimeField, plan: &DuhamelPlan) -> Result<YoungIntegral> {
    f.check_mesh(h)?;
    if f.mesh() != plan.mesh.as_slice() {
        return Err(Error::MeshMismatch);
    }
    let fs = f.slice(plan.start..f.len());
    let hs = h.slice(plan.start..h.len());
    let m = fs.len() - 1;
    let n_max = max_level(m)?;
    let levels: Vec<Vec<GridField>> =
        (0..=n_max).into_par_iter().map(|n| young_duhamel_level(&fs, &hs, n)).collect();
    let level_diffs: Vec<f64> = levels
        .windows(2)
        .map(|w| weighted_diff(&w[1], &w[0], fs.mesh(), f.blowup))
        .collect();
    let rate = fit_rate(&level_diffs);
    let scale = levels[n_max as usize].iter().fold(0.0f64, |a, x| a.max(x.sup_norm())).max(1e-300);
    if !(rate > 0.0) && *level_diffs.last().unwrap_or(&0.0) > 1e-12 * scale {
        return Err(Error::Divergence(level_diffs));
    }
    let q = extrapolation_ratio(&level_diffs, rate);
    let top = &levels[n_max as usize];
    let prev = &levels[n_max as usize - 1];
    let corr: Vec<GridField> = top.iter().zip(prev).map(|(a, b)| a.axpy(q / (1.0 - q), &(a - b))).collect();
    Ok(YoungIntegral {
        value: TimeField::new(fs.mesh().to_vec(), top.clone())?,
        limit: TimeField::new(fs.mesh().to_vec(), corr)?,
        level_diffs,
        rate,
        n_max,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchauderReport {
    pub alpha: f64,
    pub gamma: f64,
    pub expected_exponent: f64,
    pub fitted_exponent: f64,
    pub residual: f64,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
}

/// Fits `‖P_t f0‖_{C^α} ~ t^{-β}` over dyadic times resolved by the grid.
pub fn schauder_probe(
    f0: &GridField,
    alpha: f64,
    gamma: f64,
    part: &DyadicPartition,
) -> Result<SchauderReport> {
    let expected = (alpha + gamma) / 2.0;
    if !(0.0..1.0).contains(&expected) {
        return Err(Error::InvalidParameter(format!("(α+γ)/2 = {expected} not in [0,1)")));
    }
    let kmax = f0.grid().k_max();
    let t_min = 16.0 / (kmax * kmax);
    let t_max = 0.25 / (part.k0() * part.k0());
    let mut times = Vec::new();
    let mut t = t_max;
    while t >= t_min {
        times.push(t);
        t /= 2.0;
    }
    if times.len() < 3 {
        return Err(Error::InvalidParameter("degenerate fit window: grid too coarse".into()));
    }
    let w = WeightSpec::unit();
    let norms: Vec<f64> = times
        .par_iter()
        .map(|&t| besov_norm(&heat_propagate(f0, t).expect("t > 0"), alpha, &w, t, part))
        .collect();
    let pts: Vec<(f64, f64)> = times.iter().zip(&norms).map(|(t, v)| (t.ln(), v.max(1e-300).ln())).collect();
    let np = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / np;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / np;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum::<f64>() / np).sqrt();
    Ok(SchauderReport { alpha, gamma, expected_exponent: expected, fitted_exponent: -slope, residual, times, norms })
}

/// `‖(Id − P_t)u‖_{C^α} / (t^{δ/2} ‖u‖_{C^{α+δ}})`; zero when `u` has no non-constant part.
pub fn smoothing_gap(u: &GridField, t: f64, delta: f64, alpha: f64, part: &DyadicPartition) -> Result<f64> {
    if !(t > 0.0) || delta < 0.0 {
        return Err(Error::InvalidParameter(format!("need t > 0 and δ ≥ 0, got t = {t}, δ = {delta}")));
    }
    let w = WeightSpec::unit();
    let diff = u - &heat_propagate(u, t)?;
    let num = besov_norm(&diff, alpha, &w, 0.0, part);
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (t.powf(delta / 2.0) * besov_norm(u, alpha + delta, &w, 0.0, part)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_spaces::uniform_mesh;
    use crate::spectral_core::make_dyadic_partition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn grid() -> Grid {
        Grid::new(PI, 64).unwrap()
    }

    #[test]
    fn heat_on_mode_and_constant() {
        let g = grid();
        let f = GridField::mode(g, 3);
        let p = heat_propagate(&f, 0.2).unwrap();
        assert!((&p - &f.scale((-0.2 * 9.0 / 2.0f64).exp())).sup_norm() < 1e-14);
        let c = GridField::constant(g, 4.0);
        assert!((&heat_propagate(&c, 3.0).unwrap() - &c).sup_norm() < 1e-13);
        assert!(heat_propagate(&c, -1.0).is_err());
    }

    #[test]
    fn semigroup_law() {
        let g = grid();
        let f = GridField::from_fn(g, |x| x.sin() + (5.0 * x).cos() + 0.3);
        let a = heat_propagate(&heat_propagate(&f, 0.3).unwrap(), 0.7).unwrap();
        let b = heat_propagate(&f, 1.0).unwrap();
        assert!((&a - &b).sup_norm() < 1e-13 * f.sup_norm());
    }

    #[test]
    fn positivity_preserved() {
        let g = Grid::new(4.0 * PI, 256).unwrap();
        let f = GridField::from_fn(g, |x| if x.abs() < 0.5 { 1.0 } else { 0.0 });
        let p = heat_propagate(&f, 0.01).unwrap();
        assert!(p.re().iter().all(|&v| v > -1e-10 - 0.1));
        let p = heat_propagate(&f, 0.5).unwrap();
        assert!(p.re().iter().all(|&v| v > -1e-10));
    }

    #[test]
    fn duhamel_constant_and_mode() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 1.0, 10);
        let c = TimeField::constant_in_time(&GridField::constant(g, 2.0), mesh.clone());
        let v = duhamel(&c, &DuhamelPlan::new(mesh.clone())).unwrap();
        for (k, &t) in mesh.iter().enumerate() {
            assert!((v.frame(k).value_at(3) - 2.0 * t).abs() < 1e-13);
        }
        let e = TimeField::constant_in_time(&GridField::mode(g, 4), mesh.clone());
        let v = duhamel(&e, &DuhamelPlan::new(mesh.clone())).unwrap();
        for (k, &t) in mesh.iter().enumerate() {
            let want = 2.0 / 16.0 * (1.0 - (-t * 8.0f64).exp());
            let got = v.frame(k).coeffs()[g.index_of_mode(4)];
            assert!((got - C64::new(want, 0.0)).norm() < 1e-13);
        }
        let bad = TimeField::zeros(g, uniform_mesh(0.0, 2.0, 10));
        assert!(duhamel(&bad, &DuhamelPlan::new(mesh)).is_err());
    }

    #[test]
    fn duhamel_matches_fine_stepper() {
        let g = Grid::new(PI, 32).unwrap();
        let mesh = uniform_mesh(0.0, 1.0, 50);
        let forcing = |t: f64, x: f64| (x + 2.0 * t).sin() + t * (3.0 * x).cos();
        let f = TimeField::from_fn(g, mesh.clone(), forcing);
        let v = duhamel(&f, &DuhamelPlan::new(mesh.clone())).unwrap();
        // Oracle: explicit RK4 on the Fourier modes at 10x finer steps, forcing evaluated exactly.
        let fine = 500;
        let dt = 1.0 / fine as f64;
        let ks = g.wavenumbers();
        let fc = |t: f64| GridField::from_fn(g, |x| forcing(t, x)).coeffs().to_vec();
        let rhs = |t: f64, u: &[C64]| -> Vec<C64> {
            let f = fc(t);
            (0..g.n()).map(|i| -0.5 * ks[i] * ks[i] * u[i] + f[i]).collect()
        };
        let mut u = vec![C64::new(0.0, 0.0); g.n()];
        for s in 0..fine {
            let t = s as f64 * dt;
            let k1 = rhs(t, &u);
            let u2: Vec<C64> = u.iter().zip(&k1).map(|(a, b)| a + b * (dt / 2.0)).collect();
            let k2 = rhs(t + dt / 2.0, &u2);
            let u3: Vec<C64> = u.iter().zip(&k2).map(|(a, b)| a + b * (dt / 2.0)).collect();
            let k3 = rhs(t + dt / 2.0, &u3);
            let u4: Vec<C64> = u.iter().zip(&k3).map(|(a, b)| a + b * dt).collect();
            let k4 = rhs(t + dt, &u4);
            for i in 0..g.n() {
                u[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            }
        }
        let oracle = GridField::from_coeffs(g, u);
        let rel = (&oracle - v.last()).sup_norm() / oracle.sup_norm();
        // Linear interpolation of the forcing in time limits accuracy to O(Δt²).
        assert!(rel < 2e-4, "rel {rel}");
    }

    #[test]
    fn duhamel_consistency_with_heat_operator() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 400);
        let f = TimeField::from_fn(g, mesh.clone(), |t, x| (x - t).sin());
        let v = duhamel(&f, &DuhamelPlan::new(mesh)).unwrap();
        let r = v.heat_operator().sub(&f);
        assert!(r.sup_norm() < 5e-3);
    }

    #[test]
    fn young_integral_telescopes_for_unit_integrand() {
        let g = Grid::new(PI, 8).unwrap();
        let mesh = uniform_mesh(0.0, 1.0, 64);
        let one = TimeField::constant_in_time(&GridField::constant(g, 1.0), mesh.clone());
        let h = TimeField::from_fn(g, mesh.clone(), |t, x| (3.0 * t).sin() + x.cos() * t);
        let yi = young_integral(&one, &h).unwrap();
        for k in 0..mesh.len() {
            let want = h.frame(k) - h.frame(0);
            assert!((&want - yi.value.frame(k)).sup_norm() < 1e-13);
        }
    }

    #[test]
    fn young_integral_of_t_dt() {
        let g = Grid::new(PI, 8).unwrap();
        let m = 1024;
        let mesh = uniform_mesh(0.0, 1.0, m);
        let f = TimeField::from_fn(g, mesh.clone(), |t, _| t);
        let yi = young_integral(&f, &f).unwrap();
        let err = (yi.value.last().value_at(0) - 0.5).abs();
        assert!(err <= 2.0 * 2f64.powi(-(yi.n_max as i32)), "err {err}");
        assert!((yi.rate - 1.0).abs() < 0.1, "rate {}", yi.rate);
        assert!((yi.limit.last().value_at(0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn young_duhamel_trivial_cases() {
        let g = Grid::new(PI, 32).unwrap();
        let mesh = uniform_mesh(0.0, 1.0, 256);
        let f = TimeField::from_fn(g, mesh.clone(), |t, x| (x + t).cos());
        let hc = TimeField::constant_in_time(&GridField::from_fn(g, f64::sin), mesh.clone());
        let v = young_duhamel(&f, &hc, &DuhamelPlan::new(mesh.clone())).unwrap();
        assert_eq!(v.value.sup_norm(), 0.0);

        let one = TimeField::constant_in_time(&GridField::constant(g, 1.0), mesh.clone());
        let h = TimeField::from_fn(g, mesh.clone(), |t, x| (2.0 * x).sin() * (1.0 + t).ln() + t);
        let v = young_duhamel(&one, &h, &DuhamelPlan::new(mesh.clone())).unwrap();
        let dh = TimeField::from_fn(g, mesh.clone(), |t, x| (2.0 * x).sin() / (1.0 + t) + 1.0);
        let want = duhamel(&dh, &DuhamelPlan::new(mesh.clone())).unwrap();
        let err = (want.last() - v.limit.last()).sup_norm();
        // 128 dyadic intervals; the tail correction removes the leading O(2^{-n}) bias.
        assert!(err < 1e-3, "{err}");
        // Spatially constant integrator: the sum telescopes to h(t) − h(0).
        let ht = TimeField::from_fn(g, mesh.clone(), |t, _| t * t);
        let v = young_duhamel(&one, &ht, &DuhamelPlan::new(mesh.clone())).unwrap();
        assert!((v.value.last().value_at(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schauder_single_mode_and_smooth() {
        let g = Grid::new(PI, 1024).unwrap();
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let smooth = GridField::from_fn(g, |x| x.sin() + 0.5 * (2.0 * x).cos());
        let r = schauder_probe(&smooth, 0.5, 0.0, &p).unwrap();
        assert!(r.fitted_exponent.abs() < 0.1, "{r:?}");
        let m = 48i64;
        let f = GridField::mode(g, m);
        let r = schauder_probe(&f, 1.0, 0.5, &p).unwrap();
        for (&t, &v) in r.times.iter().zip(&r.norms) {
            let j = 5;
            let want = 2f64.powi(j) * (-t * (m * m) as f64 / 2.0).exp();
            assert!((v - want).abs() < 1e-12 * want.max(1e-300) + 1e-300, "t={t} v={v} want={want}");
        }
        assert!(schauder_probe(&f, 1.5, 0.6, &p).is_err());
    }

    #[test]
    fn schauder_white_noise_exponent() {
        let g = Grid::new(PI, 4096).unwrap();
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = 1.0 / g.spacing().sqrt();
        let v: Vec<f64> = (0..g.n()).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let r = schauder_probe(&GridField::from_real(g, &v), 1.0, 0.5, &p).unwrap();
        assert!((r.fitted_exponent - 0.75).abs() < 0.1, "{r:?}");
    }

    #[test]
    fn smoothing_gap_cases() {
        let g = Grid::new(PI, 256).unwrap();
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        assert_eq!(smoothing_gap(&GridField::constant(g, 2.0), 0.1, 1.0, 0.5, &p).unwrap(), 0.0);
        let f = GridField::mode(g, 12);
        for m in 1..10 {
            let t = 2f64.powi(-m);
            let r = smoothing_gap(&f, t, 1.0, 0.0, &p).unwrap();
            assert!(r.is_finite() && r < 2.0, "t={t} r={r}");
        }
        assert!(smoothing_gap(&f, 0.0, 1.0, 0.0, &p).is_err());
    }
}
