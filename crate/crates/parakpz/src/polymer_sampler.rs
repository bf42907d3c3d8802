//! Directed-polymer measure: transition kernels from backward rough heat
//! solves, path sampling, the partial Girsanov SDE, the density against it,
//! and the free-energy and variational identities.
//!
//! Polymer time `s ∈ [0, T]` runs against the data time: `f⃖(s) = f(T − s)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhanced_noise::{rescale_translate, rng_for, split_seed, EnhancedData};
use crate::error::{Error, Result};
use crate::function_spaces::{locate, TimeField};
use crate::linear_solver::{node_index, solve_rhe_backward_on, SolverOptions};
use crate::spectral_core::{Grid, GridField, C64};

/// Rows whose normalization is off by more than this are not a probability kernel.
pub const KERNEL_REJECT: f64 = 1e-4;

/// Real field on a time mesh, evaluated off-grid by its trigonometric interpolant.
#[derive(Debug, Clone)]
pub struct SpectralPath {
    times: Vec<f64>,
    modes: Vec<Vec<C64>>,
    dk: f64,
    half_length: f64,
}

impl SpectralPath {
    pub fn new(field: &TimeField) -> Self {
        let grid = *field.grid();
        let nyq = grid.nyquist_index();
        let modes = field
            .frames()
            .iter()
            .map(|f| {
                let c = f.coeffs();
                (0..nyq).map(|m| if m == 0 { C64::new(c[0].re, 0.0) } else { c[m] * 2.0 }).collect()
            })
            .collect();
        Self { times: field.mesh().to_vec(), modes, dk: grid.wavenumber(1), half_length: grid.half_length }
    }

    /// The field read in polymer time `s = horizon − t`.
    pub fn reversed(field: &TimeField, horizon: f64) -> Self {
        let mut p = Self::new(field);
        p.times = field.mesh().iter().rev().map(|t| horizon - t).collect();
        p.modes.reverse();
        p
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn eval_frame(&self, k: usize, x: f64) -> f64 {
        let a = &self.modes[k];
        let ph = self.dk * (x + self.half_length);
        let z = C64::new(ph.cos(), ph.sin());
        let mut acc = C64::new(0.0, 0.0);
        for c in a.iter().rev() {
            acc = acc * z + c;
        }
        acc.re
    }

    /// Linear in time between frames, clamped at the ends.
    pub fn eval(&self, s: f64, x: f64) -> f64 {
        let (l, th) = locate(&self.times, s);
        if th == 0.0 || l + 1 >= self.times.len() {
            return self.eval_frame(l, x);
        }
        (1.0 - th) * self.eval_frame(l, x) + th * self.eval_frame(l + 1, x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionKernel {
    pub s: f64,
    pub t: f64,
    pub grid: Grid,
    /// Row-major `K[i][j] ≈ Z̄(s, x_i; t, y_j)`.
    pub matrix: Vec<f64>,
    /// `max_i |Σ_j K[i][j]·Δx − 1|`.
    pub normalization_residual: f64,
    pub min_entry: f64,
}

impl TransitionKernel {
    fn from_matrix(s: f64, t: f64, grid: Grid, matrix: Vec<f64>) -> Self {
        let n = grid.n();
        let dx = grid.spacing();
        let normalization_residual =
            matrix.chunks(n).map(|r| (r.iter().sum::<f64>() * dx - 1.0).abs()).fold(0.0, f64::max);
        let min_entry = matrix.iter().copied().fold(f64::INFINITY, f64::min);
        Self { s, t, grid, matrix, normalization_residual, min_entry }
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.matrix[i * n..(i + 1) * n]
    }

    pub fn check(&self) -> Result<()> {
        if !(self.normalization_residual <= KERNEL_REJECT) {
            return Err(Error::KernelRejected(self.normalization_residual));
        }
        Ok(())
    }

    /// `(K₁K₂)(x, y) = Σ_z K₁(x, z)K₂(z, y)Δx`.
    pub fn compose(&self, other: &TransitionKernel) -> Result<TransitionKernel> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch);
        }
        if (self.t - other.s).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("kernels do not chain: {} vs {}", self.t, other.s)));
        }
        let n = self.n();
        let dx = self.grid.spacing();
        let mut m = vec![0.0; n * n];
        m.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            for (z, &a) in self.row(i).iter().enumerate() {
                let a = a * dx;
                for (o, b) in out.iter_mut().zip(other.row(z)) {
                    *o += a * b;
                }
            }
        });
        Ok(Self::from_matrix(self.s, other.t, self.grid, m))
    }

    /// Frobenius-relative distance.
    pub fn distance(&self, other: &TransitionKernel) -> f64 {
        let num: f64 = self.matrix.iter().zip(&other.matrix).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = other.matrix.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }

    /// Total variation between the rows at `x_i`.
    pub fn row_total_variation(&self, other: &TransitionKernel, i: usize) -> f64 {
        0.5 * self.grid.spacing() * self.row(i).iter().zip(other.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Raw little-endian `f64` matrix plus a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.matrix {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "kind": "transition_kernel",
            "s": self.s,
            "t": self.t,
            "half_length": self.grid.half_length,
            "n": self.n(),
            "normalization_residual": self.normalization_residual,
            "min_entry": self.min_entry,
        });
        std::fs::write(crate::spectral_core::sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

fn forward_index(data: &EnhancedData, polymer_time: f64) -> Result<usize> {
    let t_final = *data.mesh().last().unwrap();
    node_index(data.mesh(), t_final - polymer_time)
        .ok_or_else(|| Error::InvalidParameter(format!("polymer time {polymer_time} is not a mesh node")))
}

/// Kernels `Z̄(s_i, ·; t, ·)` for every start in `starts`, all from one sweep
/// of backward solves with terminal data at the grid points.
pub fn transition_kernels_to(
    data: &EnhancedData,
    h: &TimeField,
    t: f64,
    starts: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<TransitionKernel>> {
    let grid = *data.grid();
    if !h.grid().same_as(&grid) {
        return Err(Error::GridMismatch);
    }
    if h.len() != data.mesh().len() {
        return Err(Error::MeshMismatch);
    }
    let s_min = starts.iter().copied().fold(f64::INFINITY, f64::min);
    if starts.is_empty() || !(s_min >= 0.0) || starts.iter().any(|&s| s >= t) {
        return Err(Error::InvalidParameter(format!("need 0 ≤ s < t = {t}")));
    }
    let k_t = forward_index(data, t)?;
    let k_s: Vec<usize> = starts.iter().map(|&s| forward_index(data, s)).collect::<Result<_>>()?;
    let tau = data.mesh()[k_t];
    let ys = rescale_translate(data, tau, 1.0, opts.k0)?;
    let t_end = data.mesh()[*k_s.iter().max().unwrap()] - tau;
    let n = grid.n();
    let dx = grid.spacing();
    let h_t = h.frame(k_t);
    let columns: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| -> Result<Vec<Vec<f64>>> {
            let mut g = vec![0.0; n];
            g[j] = h_t.value_at(j).exp() / dx;
            let sol = solve_rhe_backward_on(&ys, &GridField::from_real(grid, &g), t_end, opts)?;
            let full = sol.full();
            // Backward time b is polymer time t − t_end + b.
            k_s.iter()
                .map(|&ks| {
                    let b = t_end - (data.mesh()[ks] - tau);
                    let idx = node_index(full.mesh(), b)
                        .ok_or_else(|| Error::InvalidParameter("start is not a node of the backward mesh".into()))?;
                    Ok(full.frame(idx).re())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let kernels = starts
        .iter()
        .zip(&k_s)
        .enumerate()
        .map(|(q, (&s, &ks))| {
            let hs = h.frame(ks);
            let mut m = vec![0.0; n * n];
            for (j, col) in columns.iter().enumerate() {
                for i in 0..n {
                    m[i * n + j] = (-hs.value_at(i)).exp() * col[q][i];
                }
            }
            TransitionKernel::from_matrix(s, t, grid, m)
        })
        .collect();
    Ok(kernels)
}

/// `Z̄(s, x; t, y) = e^{−h⃖(s,x)} Z(s, x; t, y) e^{h⃖(t,y)}` on the grid.
pub fn transition_kernel(
    data: &EnhancedData,
    h: &TimeField,
    s: f64,
    t: f64,
    opts: &SolverOptions,
) -> Result<TransitionKernel> {
    let k = transition_kernels_to(data, h, t, &[s], opts)?.pop().unwrap();
    k.check()?;
    Ok(k)
}

/// Chapman–Kolmogorov residual `‖K(s,r)K(r,t) − K(s,t)‖_F / ‖K(s,t)‖_F`.
pub fn chapman_kolmogorov_residual(k_sr: &TransitionKernel, k_rt: &TransitionKernel, k_st: &TransitionKernel) -> Result<f64> {
    Ok(k_sr.compose(k_rt)?.distance(k_st))
}

/// Heat kernel of variance `v` wrapped onto the periodic cell.
pub fn periodic_gaussian(x: f64, v: f64, half_length: f64) -> f64 {
    let period = 2.0 * half_length;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * v).sqrt();
    let reach = (12.0 * v.sqrt() / period).ceil() as i64 + 1;
    (-reach..=reach).map(|m| {
        let d = x + m as f64 * period;
        norm * (-d * d / (2.0 * v)).exp()
    }).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolymerPath {
    /// Starts at `0`.
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub seed: u64,
}

/// Samples grid-valued paths from a kernel chain `K(t_0,t_1), K(t_1,t_2), …`
/// with `t_0 = 0`, starting at the grid point nearest `x0`.
pub fn sample_polymer(chain: &[TransitionKernel], x0: f64, n_paths: usize, seed: u64) -> Result<Vec<PolymerPath>> {
    let first = chain.first().ok_or_else(|| Error::InvalidParameter("empty kernel chain".into()))?;
    if first.s.abs() > 1e-12 {
        return Err(Error::InvalidParameter("kernel chain must start at 0".into()));
    }
    for w in chain.windows(2) {
        if (w[0].t - w[1].s).abs() > 1e-9 || !w[0].grid.same_as(&w[1].grid) {
            return Err(Error::InvalidParameter("kernel chain is not time-consistent".into()));
        }
    }
    for k in chain {
        k.check()?;
    }
    let grid = first.grid;
    let n = grid.n();
    let cdfs: Vec<Vec<f64>> = chain
        .par_iter()
        .map(|k| {
            let mut c = Vec::with_capacity(n * n);
            for i in 0..n {
                let mut acc = 0.0;
                let row: Vec<f64> = k.row(i).iter().map(|&v| {
                    acc += v.max(0.0);
                    acc
                }).collect();
                c.extend(row.iter().map(|v| v / acc));
            }
            c
        })
        .collect();
    let mut times = vec![0.0];
    times.extend(chain.iter().map(|k| k.t));
    let start = grid.nearest_index(x0);
    Ok((0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_for(seed, p as u64);
            let mut i = start;
            let mut positions = vec![grid.x(i)];
            for c in &cdfs {
                let u: f64 = rng.random();
                let row = &c[i * n..(i + 1) * n];
                i = row.partition_point(|&v| v < u).min(n - 1);
                positions.push(grid.x(i));
            }
            PolymerPath { times: times.clone(), positions, seed: split_seed(seed, p as u64) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    /// `max_t Ê[e^{l|γ_t|^δ}]`.
    pub value: f64,
    pub std_error: f64,
    pub time: f64,
}

pub fn exp_moment_estimate(paths: &[PolymerPath], l: f64, delta: f64) -> MomentEstimate {
    let m = paths.first().map_or(0, |p| p.times.len());
    let n = paths.len() as f64;
    let mut best = MomentEstimate { value: f64::NEG_INFINITY, std_error: 0.0, time: 0.0 };
    for k in 0..m {
        let (s1, s2) = paths.iter().fold((0.0, 0.0), |(a, b), p| {
            let v = (l * p.positions[k].abs().powf(delta)).exp();
            (a + v, b + v * v)
        });
        let mean = s1 / n;
        if mean > best.value {
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            best = MomentEstimate { value: mean, std_error: (var / n).sqrt(), time: paths[0].times[k] };
        }
    }
    best
}

/// `max_{k} Ê|γ_{t_{k+1}} − γ_{t_k}|² / (t_{k+1} − t_k)`.
pub fn increment_moment_ratio(paths: &[PolymerPath]) -> f64 {
    let m = paths.first().map_or(0, |p| p.times.len());
    let times = &paths[0].times;
    (1..m)
        .map(|k| {
            let s: f64 = paths.iter().map(|p| (p.positions[k] - p.positions[k - 1]).powi(2)).sum();
            s / paths.len() as f64 / (times[k] - times[k - 1])
        })
        .fold(0.0, f64::max)
}

/// Mean and standard error.
pub fn mean_and_error(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Euler–Maruyama on `[0, t_end]` with `n_steps` uniform steps for
/// `dγ = b(s, γ)ds + dW`; `visit` sees the times, the positions and the
/// Brownian increments of each path. Path `p` uses its own stream of `seed`.
pub fn simulate_paths<T: Send>(
    drift: &(dyn Fn(f64, f64) -> f64 + Sync),
    x0: f64,
    t_end: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    visit: &(dyn Fn(&[f64], &[f64], &[f64]) -> T + Sync),
) -> Result<Vec<T>> {
    let dt = t_end / n_steps as f64;
    let sq = dt.sqrt();
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_for(seed, p as u64);
            let mut path = Vec::with_capacity(n_steps + 1);
            let mut incs = Vec::with_capacity(n_steps);
            let mut g = x0;
            path.push(g);
            for &s in &times[..n_steps] {
                let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sq;
                let b = drift(s, g);
                if !b.is_finite() {
                    return Err(Error::NonFinite(format!("drift at s = {s}, x = {g}")));
                }
                g += b * dt + dw;
                path.push(g);
                incs.push(dw);
            }
            Ok(visit(&times, &path, &incs))
        })
        .collect()
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("need positive step and horizon, got dt = {dt}")));
    }
    Ok(((t_end / dt).round() as usize).max(1))
}

/// Singular drift `∂U(s) = (X + X^{lr})(T − s)` of the partial Girsanov measure.
pub fn polymer_drift(data: &EnhancedData) -> SpectralPath {
    let t_final = *data.mesh().last().unwrap();
    SpectralPath::reversed(&data.x.add(&data.x_lr()), t_final)
}

#[derive(Debug, Clone)]
pub struct SdeSample {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
    /// Brownian increments `W_{s_{k+1}} − W_{s_k}` driving each path.
    pub increments: Vec<Vec<f64>>,
}

/// Paths of `dγ = ∂U(s, γ)ds + dW`, `γ_0 = x0`, on `[0, T]`.
pub fn girsanov_sde_sample(data: &EnhancedData, x0: f64, dt: f64, n_paths: usize, seed: u64) -> Result<SdeSample> {
    let t_final = *data.mesh().last().unwrap();
    let drift = polymer_drift(data);
    let n_steps = steps_for(t_final, dt)?;
    let out = simulate_paths(&|s, x| drift.eval(s, x), x0, t_final, n_steps, n_paths, seed, &|t, p, w| {
        (t.to_vec(), p.to_vec(), w.to_vec())
    })?;
    let times = out.first().map(|o| o.0.clone()).unwrap_or_default();
    let (paths, increments) = out.into_iter().map(|(_, p, w)| (p, w)).unzip();
    Ok(SdeSample { times, paths, increments })
}

/// Pieces of the density of the polymer measure against the partial Girsanov measure.
#[derive(Debug, Clone)]
pub struct RadonNikodym {
    x_r: SpectralPath,
    /// `A = Y + Y^{lr} + Y^R − h` at data time `T` and `0`.
    a_final: GridField,
    a_initial: GridField,
}

impl RadonNikodym {
    pub fn new(data: &EnhancedData, h: &TimeField, yr: &TimeField) -> Result<Self> {
        h.check_mesh(&data.y)?;
        yr.check_mesh(&data.y)?;
        let t_final = *data.mesh().last().unwrap();
        let a = data.y.add(&data.y_lr).add(yr).sub(h);
        Ok(Self {
            x_r: SpectralPath::reversed(&yr.derivative(1).real_part(), t_final),
            a_final: a.last().clone(),
            a_initial: a.frame(0).clone(),
        })
    }

    /// `log dQ/dP^U = Σ X⃖^R(s_k, γ_k)ΔW_k + A(T, γ_0) − A(0, γ_T)`.
    pub fn log_weight(&self, times: &[f64], path: &[f64], incs: &[f64]) -> f64 {
        let ito: f64 = incs.iter().enumerate().map(|(k, dw)| self.x_r.eval(times[k], path[k]) * dw).sum();
        ito + self.a_final.interpolate(path[0]) - self.a_initial.interpolate(*path.last().unwrap())
    }
}

/// Density of the polymer measure at one sampled path of the partial Girsanov SDE.
pub fn radon_nikodym_weight(
    times: &[f64],
    path: &[f64],
    incs: &[f64],
    data: &EnhancedData,
    h: &TimeField,
    yr: &TimeField,
) -> Result<f64> {
    Ok(RadonNikodym::new(data, h, yr)?.log_weight(times, path, incs).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSummary {
    pub weights: Vec<f64>,
    /// Paths whose weight overflowed; left out of the mean.
    pub excluded: usize,
    pub mean: f64,
    pub std_error: f64,
}

pub fn reweight(sample: &SdeSample, rn: &RadonNikodym) -> WeightSummary {
    let weights: Vec<f64> = sample
        .paths
        .par_iter()
        .zip(&sample.increments)
        .map(|(p, w)| rn.log_weight(&sample.times, p, w).exp())
        .collect();
    let good: Vec<f64> = weights.iter().copied().filter(|w| w.is_finite()).collect();
    let (mean, std_error) = mean_and_error(&good);
    WeightSummary { excluded: weights.len() - good.len(), weights, mean, std_error }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    /// `[h − Y − Y^{lr} − Y^R](T, x0)`.
    pub lhs: f64,
    /// `log Ê_{P^U}[e^{∫X⃖^R dW + (h̄ − Y(0))(γ_T)}]`.
    pub mc: f64,
    pub mc_error: f64,
    pub gap: f64,
    pub excluded: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn free_energy_check(
    data: &EnhancedData,
    h: &TimeField,
    yr: &TimeField,
    hbar: &GridField,
    x0: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<FreeEnergyReport> {
    let t_final = *data.mesh().last().unwrap();
    h.check_mesh(&data.y)?;
    yr.check_mesh(&data.y)?;
    let lhs = (&(&(h.last() - data.y.last()) - data.y_lr.last()) - yr.last()).interpolate(x0);
    let g = hbar - data.y.frame(0);
    let x_r = SpectralPath::reversed(&yr.derivative(1).real_part(), t_final);
    let drift = polymer_drift(data);
    let n_steps = steps_for(t_final, dt)?;
    let logs = simulate_paths(&|s, x| drift.eval(s, x), x0, t_final, n_steps, n_paths, seed, &|t, p, w| {
        let ito: f64 = w.iter().enumerate().map(|(k, dw)| x_r.eval(t[k], p[k]) * dw).sum();
        ito + g.interpolate(*p.last().unwrap())
    })?;
    let good: Vec<f64> = logs.iter().copied().filter(|v| v.is_finite()).collect();
    let shift = good.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = good.iter().map(|v| (v - shift).exp()).collect();
    let (m, se) = mean_and_error(&e);
    let mc = shift + m.ln();
    Ok(FreeEnergyReport { lhs, mc, mc_error: se / m, gap: (lhs - mc).abs(), excluded: logs.len() - good.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Control {
    Zero,
    /// `ν = ∂(h⃖ − U)`.
    Optimal,
    ScaledOptimal(f64),
}

impl Control {
    pub fn label(&self) -> String {
        match self {
            Control::Zero => "zero".into(),
            Control::Optimal => "optimal".into(),
            Control::ScaledOptimal(a) => format!("{a}x-optimal"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlValue {
    pub control: Control,
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    /// `value(optimal) − value(ν)` from common random numbers.
    pub gap_to_optimal: f64,
    pub gap_std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalReport {
    /// `[h − Y − Y^{lr} − Y^R](T, x0)`.
    pub target: f64,
    pub values: Vec<ControlValue>,
}

impl VariationalReport {
    pub fn optimal(&self) -> Option<&ControlValue> {
        self.values.iter().find(|v| v.control == Control::Optimal)
    }
}

/// Monte Carlo values of
/// `E[h̄(γ_T) − Y(0,γ_T) + ½∫(|X⃖^R|² − |ν − X⃖^R|²)ds]` under
/// `dγ = (∂U + ν)ds + dW` for each control, all paths sharing their noise.
#[allow(clippy::too_many_arguments)]
pub fn variational_gap(
    data: &EnhancedData,
    h: &TimeField,
    yr: &TimeField,
    hbar: &GridField,
    x0: f64,
    controls: &[Control],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<VariationalReport> {
    let t_final = *data.mesh().last().unwrap();
    h.check_mesh(&data.y)?;
    yr.check_mesh(&data.y)?;
    let target = (&(&(h.last() - data.y.last()) - data.y_lr.last()) - yr.last()).interpolate(x0);
    let g = hbar - data.y.frame(0);
    let x_r = SpectralPath::reversed(&yr.derivative(1).real_part(), t_final);
    let opt = SpectralPath::reversed(&h.sub(&data.y).sub(&data.y_lr).derivative(1).real_part(), t_final);
    let drift = polymer_drift(data);
    let n_steps = steps_for(t_final, dt)?;
    let mut all = Vec::with_capacity(controls.len() + 1);
    let mut list = vec![Control::Optimal];
    list.extend(controls.iter().copied().filter(|c| *c != Control::Optimal));
    for c in &list {
        let scale = match c {
            Control::Zero => 0.0,
            Control::Optimal => 1.0,
            Control::ScaledOptimal(a) => *a,
        };
        let nu = |s: f64, x: f64| if scale == 0.0 { 0.0 } else { scale * opt.eval(s, x) };
        let b = |s: f64, x: f64| drift.eval(s, x) + nu(s, x);
        let vals = simulate_paths(&b, x0, t_final, n_steps, n_paths, seed, &|t, p, _| {
            let ds = t[1] - t[0];
            let run: f64 = (0..t.len() - 1)
                .map(|k| {
                    let xr = x_r.eval(t[k], p[k]);
                    let d = nu(t[k], p[k]) - xr;
                    0.5 * (xr * xr - d * d) * ds
                })
                .sum();
            g.interpolate(*p.last().unwrap()) + run
        })?;
        all.push((*c, vals));
    }
    let base = all[0].1.clone();
    let values = all
        .into_iter()
        .filter(|(c, _)| controls.contains(c))
        .map(|(c, v)| {
            let (mean, std_error) = mean_and_error(&v);
            let d: Vec<f64> = base.iter().zip(&v).map(|(a, b)| a - b).collect();
            let (gap_to_optimal, gap_std_error) = mean_and_error(&d);
            ControlValue { control: c, label: c.label(), mean, std_error, gap_to_optimal, gap_std_error }
        })
        .collect();
    Ok(VariationalReport { target, values })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `φ(0, x0)`.
    pub start: f64,
    /// `max_k |mean_k − φ(0,x0)| / se_k` over times after the start.
    pub max_z: f64,
}

/// Sample means of `φ(s, γ_s)` on the mesh of `phi` (polymer time on `[0, τ]`)
/// under the partial Girsanov SDE, with `substeps` Euler steps per mesh step.
pub fn martingale_check(
    data: &EnhancedData,
    phi: &TimeField,
    x0: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let mesh = phi.mesh().to_vec();
    let tau = *mesh.last().unwrap();
    let m = mesh.len() - 1;
    let sub = substeps.max(1);
    let drift = polymer_drift(data);
    let phis = SpectralPath::new(phi);
    let per_path = simulate_paths(&|s, x| drift.eval(s, x), x0, tau, m * sub, n_paths, seed, &|_, p, _| {
        (0..=m).map(|k| phis.eval_frame(k, p[k * sub])).collect::<Vec<f64>>()
    })?;
    let start = phis.eval_frame(0, x0);
    let mut means = Vec::with_capacity(m + 1);
    let mut std_errors = Vec::with_capacity(m + 1);
    let mut max_z: f64 = 0.0;
    for k in 0..=m {
        let col: Vec<f64> = per_path.iter().map(|v| v[k]).collect();
        let (mu, se) = mean_and_error(&col);
        if k > 0 && se > 0.0 {
            max_z = max_z.max((mu - start).abs() / se);
        }
        means.push(mu);
        std_errors.push(se);
    }
    Ok(MartingaleReport { times: mesh, means, std_errors, start, max_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhanced_noise::{build_trees, InitialCondition, NoisePath, RenormConstants};
    use crate::function_spaces::uniform_mesh;
    use crate::kpz_pipeline::{solve_kpz, KpzOptions};
    use crate::spectral_core::DyadicPartition;
    use std::f64::consts::PI;

    fn grid() -> Grid {
        Grid::new(2.0 * PI, 64).unwrap()
    }

    fn smooth_data(amp: f64, steps: usize, t_end: f64) -> EnhancedData {
        let g = grid();
        let mesh = uniform_mesh(0.0, t_end, steps);
        let theta = TimeField::from_fn(g, mesh.clone(), |t, x| amp * ((x + t).sin() + 0.5 * (2.0 * x - t).cos()));
        let xi = NoisePath::from_forcing(&theta).unwrap();
        let part = DyadicPartition::new(&g, 1.0).unwrap();
        let init = InitialCondition::deterministic(GridField::from_fn(g, |x| 0.3 * x.cos()), 0.0);
        build_trees(&xi, &init, &RenormConstants::zero(mesh.len()), &part).unwrap()
    }

    #[test]
    fn spectral_path_matches_grid_values_and_interpolant() {
        let g = grid();
        let f = TimeField::from_fn(g, uniform_mesh(0.0, 1.0, 2), |t, x| (1.0 + t) * x.sin() + (0.5 * x).cos());
        let p = SpectralPath::new(&f);
        for i in (0..g.n()).step_by(7) {
            assert!((p.eval_frame(1, g.x(i)) - f.frame(1).value_at(i)).abs() < 1e-12);
        }
        assert!((p.eval(0.25, 0.3) - f.frame(0).interpolate(0.3) * 0.5 - f.frame(1).interpolate(0.3) * 0.5).abs() < 1e-12);
        let r = SpectralPath::reversed(&f, 1.0);
        assert!((r.eval(0.0, 0.7) - f.frame(2).interpolate(0.7)).abs() < 1e-12);
    }

    #[test]
    fn free_kernel_is_gaussian_and_normalized() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 16));
        let h = TimeField::zeros(g, data.mesh().to_vec());
        let k = transition_kernel(&data, &h, 0.25, 0.75, &SolverOptions::default().direct()).unwrap();
        assert!(k.normalization_residual < 1e-10);
        for i in (0..g.n()).step_by(5) {
            for j in 0..g.n() {
                let exact = periodic_gaussian(g.x(j) - g.x(i), 0.5, g.half_length);
                assert!((k.row(i)[j] - exact).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smooth_kernels_normalize_and_chain() {
        let data = smooth_data(0.8, 32, 1.0);
        let hbar = GridField::from_fn(*data.grid(), |x| 0.4 * x.sin());
        let opts = KpzOptions { solver: SolverOptions::default().direct(), ..KpzOptions::default() };
        let sol = solve_kpz(&data, &hbar, &opts).unwrap();
        let ks = transition_kernels_to(&data, &sol.h, 1.0, &[0.0, 0.5], &opts.solver).unwrap();
        let k05 = transition_kernel(&data, &sol.h, 0.0, 0.5, &opts.solver).unwrap();
        for k in ks.iter().chain([&k05]) {
            assert!(k.normalization_residual < 1e-6, "{}", k.normalization_residual);
            assert!(k.min_entry > -1e-8);
        }
        let ck = chapman_kolmogorov_residual(&k05, &ks[1], &ks[0]).unwrap();
        assert!(ck < 1e-5, "{ck}");
    }

    #[test]
    fn free_sampling_has_brownian_variance_and_is_reproducible() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
        let h = TimeField::zeros(g, data.mesh().to_vec());
        let opts = SolverOptions::default().direct();
        let chain: Vec<_> =
            (0..4).map(|i| transition_kernel(&data, &h, i as f64 * 0.25, (i + 1) as f64 * 0.25, &opts).unwrap()).collect();
        let a = sample_polymer(&chain, 0.0, 10_000, 5).unwrap();
        let b = sample_polymer(&chain, 0.0, 10_000, 5).unwrap();
        assert_eq!(a, b);
        for k in 1..=4 {
            let var = a.iter().map(|p| p.positions[k].powi(2)).sum::<f64>() / a.len() as f64;
            let t = k as f64 * 0.25;
            assert!((var / t - 1.0).abs() < 0.05, "t = {t}: {var}");
        }
        assert!(increment_moment_ratio(&a) < 1.2);
        assert_eq!(exp_moment_estimate(&a, 0.0, 0.9).value, 1.0);
        let m1 = exp_moment_estimate(&a, 0.05, 0.9).value;
        let m2 = exp_moment_estimate(&a, 0.1, 0.9).value;
        assert!(m1 <= m2);
    }

    #[test]
    fn broken_chain_is_refused() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
        let h = TimeField::zeros(g, data.mesh().to_vec());
        let opts = SolverOptions::default().direct();
        let k1 = transition_kernel(&data, &h, 0.0, 0.25, &opts).unwrap();
        let k2 = transition_kernel(&data, &h, 0.5, 0.75, &opts).unwrap();
        assert!(sample_polymer(&[k1.clone(), k2], 0.0, 4, 1).is_err());
        let mut bad = k1;
        bad.normalization_residual = 1e-3;
        assert!(matches!(sample_polymer(&[bad], 0.0, 4, 1), Err(Error::KernelRejected(_))));
    }

    #[test]
    fn zero_drift_sde_is_brownian() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
        let s = girsanov_sde_sample(&data, 0.3, 1.0 / 64.0, 10_000, 2).unwrap();
        let end: Vec<f64> = s.paths.iter().map(|p| p.last().unwrap() - 0.3).collect();
        let var = end.iter().map(|v| v * v).sum::<f64>() / end.len() as f64;
        assert!((var - 1.0).abs() < 0.05);
        let sum_w: f64 = s.paths[0].iter().zip(&s.paths[0][1..]).zip(&s.increments[0]).map(|((a, b), w)| b - a - w).sum();
        assert!(sum_w.abs() < 1e-12);
    }

    #[test]
    fn constant_drift_shifts_the_mean() {
        // U = c x read from a field whose derivative is the constant c on the bulk.
        let c = 0.7;
        let drift = move |_s: f64, _x: f64| c;
        let ends = simulate_paths(&drift, 0.0, 1.0, 64, 20_000, 9, &|_, p, _| *p.last().unwrap()).unwrap();
        let (m, se) = mean_and_error(&ends);
        assert!((m - c).abs() < 3.0 * se);
        // Ornstein–Uhlenbeck pull b = −x: mean x0 e^{−t}, variance (1 − e^{−2t})/2.
        let ou = simulate_paths(&|_, x| -x, 1.0, 1.0, 512, 20_000, 4, &|_, p, _| *p.last().unwrap()).unwrap();
        let (m, se) = mean_and_error(&ou);
        assert!((m - (-1.0f64).exp()).abs() < 3.0 * se + 2e-3);
        let var = ou.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ou.len() as f64;
        let v_exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((var / v_exact - 1.0).abs() < 0.05);
    }

    #[test]
    fn free_weights_are_one() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
        let z = TimeField::zeros(g, data.mesh().to_vec());
        let s = girsanov_sde_sample(&data, 0.0, 1.0 / 32.0, 16, 3).unwrap();
        let rn = RadonNikodym::new(&data, &z, &z).unwrap();
        let w = reweight(&s, &rn);
        assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let fe = free_energy_check(&data, &z, &z, &GridField::zeros(g), 0.0, 1.0 / 32.0, 16, 3).unwrap();
        assert!(fe.lhs.abs() < 1e-14 && fe.mc.abs() < 1e-14);
    }

    #[test]
    fn pure_penalty_for_free_data() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
        let z = TimeField::zeros(g, data.mesh().to_vec());
        let r = variational_gap(&data, &z, &z, &GridField::zeros(g), 0.0, &[Control::Optimal, Control::Zero], 1.0 / 32.0, 64, 3)
            .unwrap();
        assert_eq!(r.optimal().unwrap().mean, 0.0);
        assert_eq!(r.target, 0.0);
    }

    #[test]
    fn periodic_gaussian_integrates_to_one() {
        let l = 2.0 * PI;
        let n = 256;
        let dx = 2.0 * l / n as f64;
        let s: f64 = (0..n).map(|i| periodic_gaussian(-l + i as f64 * dx, 0.7, l) * dx).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
