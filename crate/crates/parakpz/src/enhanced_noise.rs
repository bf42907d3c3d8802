//! Space-time white noise, spatial mollification, renormalization constants
//! and the enhanced data (the noise together with its renormalized trees).
//!
//! Noise increments live in coefficient space. With coefficients defined as
//! `FFT/N`, one step of length `Δt` gives every mode an increment of second
//! moment `Δt/(2L)`; equivalently grid values are `N(0, Δt/h)`. The spatial
//! integral of an increment, `2L·ĉ₀`, therefore has variance `2L·Δt`.
//!
//! Trees are stored on the same time mesh as the noise. `Y` is advanced by the
//! exponential Euler rule with the forcing frozen over each step; all higher
//! trees use the piecewise-linear Duhamel integrator on frame forcings.
//!
//! A linear drift `Cx` is kept out of the spectral part: it is harmonic, so it
//! is added to the values of `Y` and as the constant `C` to `X`. `Y` values are
//! then not periodic and must never be differentiated spectrally; use `x`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_spaces::{parabolic_norm, sup_besov_norm, uniform_mesh, TimeField};
use crate::heat_calculus::{duhamel, phi1, psi, DuhamelPlan};
use crate::paraproducts::{resonant_blocks, Blocks};
use crate::spectral_core::{DyadicPartition, Grid, GridField, WeightSpec, C64};

pub const NOISE_STREAM: u64 = 0;
pub const INITIAL_STREAM: u64 = 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent 64-bit seed for `stream` from a master seed
/// (SplitMix64 applied to the seed xor the mixed stream index).
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, stream))
}

/// Even plateau bump: 1 on `|r| ≤ 1/2`, raised cosine down to 0 at `|r| = 1`.
pub fn mollifier(r: f64) -> f64 {
    let a = r.abs();
    if a <= 0.5 {
        1.0
    } else if a >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (2.0 * a - 1.0)).cos())
    }
}

/// `φ(k/n)` per grid index; all ones for the unmollified level.
pub fn mollifier_table(grid: &Grid, level: Option<f64>) -> Vec<f64> {
    match level {
        None => vec![1.0; grid.n()],
        Some(n) => grid.wavenumbers().iter().map(|k| mollifier(k / n)).collect(),
    }
}

/// Draws real-field coefficients with per-mode second moments `var[i]`.
fn gaussian_coeffs(grid: &Grid, var: impl Fn(usize) -> f64, rng: &mut ChaCha8Rng) -> Vec<C64> {
    let n = grid.n();
    let mut c = vec![C64::new(0.0, 0.0); n];
    for i in 0..=n / 2 {
        let v = var(i);
        if i == 0 || i == n / 2 {
            let z: f64 = rng.sample(StandardNormal);
            c[i] = C64::new(v.sqrt() * z, 0.0);
        } else {
            let s = (v / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c[i] = C64::new(s * re, s * im);
            c[n - i] = c[i].conj();
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct NoisePath {
    grid: Grid,
    mesh: Vec<f64>,
    increments: Vec<Vec<C64>>,
    pub seed: u64,
    pub level: Option<f64>,
}

impl NoisePath {
    /// Increments given as grid fields, one per step.
    pub fn from_increments(grid: Grid, mesh: Vec<f64>, increments: Vec<GridField>, seed: u64) -> Result<Self> {
        if mesh.len() < 2 || increments.len() + 1 != mesh.len() {
            return Err(Error::MeshMismatch);
        }
        if increments.iter().any(|f| !f.grid().same_as(&grid)) {
            return Err(Error::GridMismatch);
        }
        let increments = increments.iter().map(|f| f.coeffs().to_vec()).collect();
        Ok(Self { grid, mesh, increments, seed, level: None })
    }

    /// Smooth forcing `θ`, integrated over each step with the left value.
    pub fn from_forcing(theta: &TimeField) -> Result<Self> {
        let mesh = theta.mesh().to_vec();
        let inc = (0..mesh.len() - 1).map(|k| theta.frame(k).scale(mesh[k + 1] - mesh[k])).collect();
        Self::from_increments(*theta.grid(), mesh, inc, 0)
    }

    pub fn zeros(grid: Grid, mesh: Vec<f64>) -> Self {
        let m = mesh.len() - 1;
        Self { grid, mesh, increments: vec![vec![C64::new(0.0, 0.0); grid.n()]; m], seed: 0, level: None }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn increment_coeffs(&self, k: usize) -> &[C64] {
        &self.increments[k]
    }

    pub fn increment(&self, k: usize) -> GridField {
        GridField::from_coeffs(self.grid, self.increments[k].clone())
    }
}

pub fn sample_noise(grid: &Grid, t_end: f64, dt: f64, seed: u64) -> Result<NoisePath> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("need T > 0 and dt > 0, got T = {t_end}, dt = {dt}")));
    }
    let steps = ((t_end / dt).round() as usize).max(1);
    let mesh = uniform_mesh(0.0, t_end, steps);
    let mut rng = rng_for(seed, NOISE_STREAM);
    let q = 1.0 / (2.0 * grid.half_length);
    let increments = (0..steps)
        .map(|k| {
            let h = mesh[k + 1] - mesh[k];
            gaussian_coeffs(grid, |_| q * h, &mut rng)
        })
        .collect();
    Ok(NoisePath { grid: *grid, mesh, increments, seed, level: None })
}

pub fn mollify(xi: &NoisePath, n: f64) -> Result<NoisePath> {
    if !(n >= 1.0) {
        return Err(Error::InvalidParameter(format!("mollification level {n} must be ≥ 1")));
    }
    let phi = mollifier_table(&xi.grid, Some(n));
    let increments = xi
        .increments
        .iter()
        .map(|c| c.iter().zip(&phi).map(|(v, p)| v * p).collect())
        .collect();
    Ok(NoisePath { increments, level: Some(n), ..xi.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialKind {
    Zero,
    Deterministic,
    /// Two-sided Brownian motion on `[-L, L)`, pinned at 0, jump at the seam.
    Brownian,
    /// Periodic sample of the discrete invariant law, pinned at 0.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDescriptor {
    pub kind: InitialKind,
    pub drift: f64,
    pub seed: Option<u64>,
}

/// `Y(0) = profile + drift·x`, with per-mode second moments of the profile
/// coefficients used for the renormalization constants.
#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub profile: GridField,
    pub variance: Vec<f64>,
    pub descriptor: InitialDescriptor,
}

impl InitialCondition {
    pub fn zero(grid: Grid) -> Self {
        Self {
            profile: GridField::zeros(grid),
            variance: vec![0.0; grid.n()],
            descriptor: InitialDescriptor { kind: InitialKind::Zero, drift: 0.0, seed: None },
        }
    }

    pub fn deterministic(profile: GridField, drift: f64) -> Self {
        let n = profile.grid().n();
        Self {
            profile,
            variance: vec![0.0; n],
            descriptor: InitialDescriptor { kind: InitialKind::Deterministic, drift, seed: None },
        }
    }

    pub fn grid(&self) -> &Grid {
        self.profile.grid()
    }
}

/// `B + Cx` with `B` a two-sided Brownian motion pinned at `x = 0`: grid
/// increments are `N(0, h)`, summed outward from index `N/2`.
pub fn sample_initial(grid: &Grid, drift: f64, seed: u64) -> GridField {
    let n = grid.n();
    let h = grid.spacing();
    let mut rng = rng_for(seed, INITIAL_STREAM);
    let mut b = vec![0.0; n];
    let mid = n / 2;
    for i in mid + 1..n {
        let z: f64 = rng.sample(StandardNormal);
        b[i] = b[i - 1] + h.sqrt() * z;
    }
    for i in (0..mid).rev() {
        let z: f64 = rng.sample(StandardNormal);
        b[i] = b[i + 1] + h.sqrt() * z;
    }
    GridField::from_real(*grid, &b).axpy(drift, &GridField::from_fn(*grid, |x| x))
}

/// Brownian start. The profile variance is the bulk value
/// `E|B̂_m|² = h² / (2L · 4 sin²(k h / 2))`, i.e. white-noise increments seen
/// through the spectral derivative; the seam jump is not included.
pub fn brownian_initial(grid: &Grid, drift: f64, seed: u64) -> InitialCondition {
    let profile = sample_initial(grid, 0.0, seed);
    let h = grid.spacing();
    let q = 1.0 / (2.0 * grid.half_length);
    let variance = (0..grid.n())
        .map(|i| {
            let k = grid.wavenumber(i);
            if i == 0 {
                0.0
            } else {
                q * h * h / (4.0 * (0.5 * k * h).sin().powi(2))
            }
        })
        .collect();
    InitialCondition {
        profile,
        variance,
        descriptor: InitialDescriptor { kind: InitialKind::Brownian, drift, seed: Some(seed) },
    }
}

/// Per-mode stationary second moment of the exponential Euler recursion
/// `v ↦ e^{-2λΔt} v + Δt g² / (2L)` with `g = (1 − e^{-λΔt})/(λΔt)`.
pub fn stationary_variance(grid: &Grid, dt: f64) -> Vec<f64> {
    let q = 1.0 / (2.0 * grid.half_length);
    (0..grid.n())
        .map(|i| {
            let k = grid.wavenumber(i);
            if i == 0 {
                return 0.0;
            }
            let z = 0.5 * k * k * dt;
            let g = phi1(z);
            q * dt * g * g / (-(-2.0 * z).exp_m1())
        })
        .collect()
}

/// Periodic start distributed as the invariant law of the discrete `Y`
/// dynamics (so `X(0)` is spatial white noise up to time-step effects).
pub fn stationary_initial(grid: &Grid, dt: f64, drift: f64, seed: u64) -> InitialCondition {
    let variance = stationary_variance(grid, dt);
    let mut rng = rng_for(seed, INITIAL_STREAM);
    let c = gaussian_coeffs(grid, |i| variance[i], &mut rng);
    let f = GridField::from_coeffs(*grid, c).real_part();
    let pin = f.value_at(grid.n() / 2);
    let profile = f.map_real(|v| v - pin);
    InitialCondition {
        profile,
        variance,
        descriptor: InitialDescriptor { kind: InitialKind::Stationary, drift, seed: Some(seed) },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenormMode {
    /// Exact centering `½E[(∂Yⁿ(t))²]` at every mesh time.
    TimeDependent,
    /// Constant value of the invariant regime.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormConstants {
    pub mode: RenormMode,
    pub c_lr: Vec<f64>,
    pub c_dbl: Vec<f64>,
}

impl RenormConstants {
    pub fn zero(frames: usize) -> Self {
        Self { mode: RenormMode::TimeDependent, c_lr: vec![0.0; frames], c_dbl: vec![0.0; frames] }
    }
}

/// Second moments `E|Ŷⁿ_m(t_k)|²` per frame, from the exact discrete recursion.
pub fn mode_variances(grid: &Grid, mesh: &[f64], level: Option<f64>, init_var: &[f64]) -> Vec<Vec<f64>> {
    let phi2: Vec<f64> = mollifier_table(grid, level).iter().map(|p| p * p).collect();
    let q = 1.0 / (2.0 * grid.half_length);
    let ks = grid.wavenumbers();
    let mut out = Vec::with_capacity(mesh.len());
    let mut v: Vec<f64> = init_var.iter().zip(&phi2).map(|(a, b)| a * b).collect();
    out.push(v.clone());
    for w in mesh.windows(2) {
        let h = w[1] - w[0];
        for i in 0..grid.n() {
            let z = 0.5 * ks[i] * ks[i] * h;
            let g = phi1(z);
            v[i] = (-2.0 * z).exp() * v[i] + phi2[i] * q * h * g * g;
        }
        out.push(v.clone());
    }
    out
}

fn is_uniform(mesh: &[f64]) -> bool {
    let h = mesh[1] - mesh[0];
    mesh.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h)
}

/// `½ Σ_m k_m² v_m` over modes carried by the spectral derivative.
fn half_derivative_energy(grid: &Grid, v: &[f64]) -> f64 {
    let nyq = grid.nyquist_index();
    0.5 * (0..grid.n()).filter(|&i| i != nyq).map(|i| grid.wavenumber(i).powi(2) * v[i]).sum::<f64>()
}

/// `c_dbl(t) = ½ E[(∂Y^{lr}(t))²]` from the second-chaos covariance recursion.
///
/// With `C_p(s,s') = k_p² e^{-λ_p|s−s'|} v_p(s∧s')`, each ordered pair `p+q = m`
/// contributes `¼ k_m² k_p² k_q² S_pq(t)` where `S' = −2λ_m S + 2G` and
/// `G' = −(λ_m + λ_p + λ_q) G + v_p v_q`; both are advanced with the
/// piecewise-linear exponential rule.
fn double_tree_constant(grid: &Grid, mesh: &[f64], var: &[Vec<f64>]) -> Vec<f64> {
    let n = grid.n();
    let nyq = grid.nyquist_index();
    let ks = grid.wavenumbers();
    let active: Vec<usize> = (1..n).filter(|&i| i != nyq && var.iter().any(|v| v[i] > 0.0)).collect();
    struct Pair {
        a: usize,
        b: usize,
        m: usize,
        weight: f64,
    }
    let mut pairs = Vec::new();
    for (ia, &a) in active.iter().enumerate() {
        for &b in &active[ia..] {
            let m = (a + b) % n;
            if m == 0 || m == nyq {
                continue;
            }
            let mult = if a == b { 1.0 } else { 2.0 };
            let weight = 0.25 * mult * ks[m].powi(2) * ks[a].powi(2) * ks[b].powi(2);
            pairs.push(Pair { a, b, m, weight });
        }
    }
    let mut s = vec![0.0; pairs.len()];
    let mut g = vec![0.0; pairs.len()];
    let mut out = vec![0.0; mesh.len()];
    let lam: Vec<f64> = ks.iter().map(|k| 0.5 * k * k).collect();
    for k in 0..mesh.len() - 1 {
        let h = mesh[k + 1] - mesh[k];
        let (v0, v1) = (&var[k], &var[k + 1]);
        let total: f64 = pairs
            .par_iter()
            .zip(s.par_iter_mut())
            .zip(g.par_iter_mut())
            .map(|((p, s), g)| {
                let zg = (lam[p.m] + lam[p.a] + lam[p.b]) * h;
                let g_new = (-zg).exp() * *g
                    + h * psi(zg) * v0[p.a] * v0[p.b]
                    + h * (phi1(zg) - psi(zg)) * v1[p.a] * v1[p.b];
                let zs = 2.0 * lam[p.m] * h;
                *s = (-zs).exp() * *s + 2.0 * h * (psi(zs) * *g + (phi1(zs) - psi(zs)) * g_new);
                *g = g_new;
                p.weight * *s
            })
            .sum();
        out[k + 1] = total;
    }
    out
}

pub fn renorm_constants(
    grid: &Grid,
    mesh: &[f64],
    level: Option<f64>,
    init_var: &[f64],
    mode: RenormMode,
) -> Result<RenormConstants> {
    if mesh.len() < 2 || init_var.len() != grid.n() {
        return Err(Error::MeshMismatch);
    }
    let var = match mode {
        RenormMode::TimeDependent => mode_variances(grid, mesh, level, init_var),
        RenormMode::Stationary => {
            if !is_uniform(mesh) {
                return Err(Error::InvalidParameter("stationary constants need a uniform mesh".into()));
            }
            let vs = stationary_variance(grid, mesh[1] - mesh[0]);
            let phi = mollifier_table(grid, level);
            let v: Vec<f64> = vs.iter().zip(&phi).map(|(a, p)| a * p * p).collect();
            vec![v; mesh.len()]
        }
    };
    let c_lr = var.iter().map(|v| half_derivative_energy(grid, v)).collect();
    let c_dbl = match mode {
        RenormMode::TimeDependent => double_tree_constant(grid, mesh, &var),
        RenormMode::Stationary => {
            // Long-run value: run the recursion on a long uniform mesh and keep its end point.
            let h = mesh[1] - mesh[0];
            let span = 4.0 * (2.0 * grid.half_length / std::f64::consts::PI).powi(2) / 2.0;
            let steps = ((span / h).ceil() as usize).clamp(mesh.len(), 1 << 14);
            let long = uniform_mesh(0.0, steps as f64 * h, steps);
            let lv = vec![var[0].clone(); long.len()];
            let c = *double_tree_constant(grid, &long, &lv).last().unwrap();
            vec![c; mesh.len()]
        }
    };
    Ok(RenormConstants { mode, c_lr, c_dbl })
}

pub const TREE_NAMES: [&str; 8] = ["y", "y_lr", "y_rlrl", "y_rlrlrl", "y_lrlrrl", "y_r", "x", "resonant_r"];

#[derive(Debug, Clone)]
pub struct EnhancedData {
    pub level: Option<f64>,
    pub seed: u64,
    pub initial: InitialDescriptor,
    pub constants: RenormConstants,
    /// `Y` values including the drift `Cx`.
    pub y: TimeField,
    pub y_lr: TimeField,
    pub y_rlrl: TimeField,
    pub y_rlrlrl: TimeField,
    pub y_lrlrrl: TimeField,
    pub y_r: TimeField,
    /// `X = ∂Y`, including the drift constant.
    pub x: TimeField,
    /// `∂Y^r ⊙ X`.
    pub resonant_r: TimeField,
}

fn check_finite(f: &TimeField, name: &str) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn frame_resonant(a: &TimeField, b: &TimeField, part: &DyadicPartition) -> TimeField {
    a.zip_frames(b, |f, g| resonant_blocks(&Blocks::new(f, part), &Blocks::new(g, part)).real_part())
}

fn solve_zero_start(forcing: &TimeField) -> Result<TimeField> {
    Ok(duhamel(forcing, &DuhamelPlan::new(forcing.mesh().to_vec()))?.real_part())
}

/// Higher trees from `(Y, X)` with zero initial data; shared by the builder
/// and the rescaling map.
struct Upper {
    y_rlrlrl: TimeField,
    y_lrlrrl: TimeField,
    y_r: TimeField,
    resonant_r: TimeField,
}

fn upper_trees(x: &TimeField, x_lr: &TimeField, x_rlrl: &TimeField, c_dbl: &[f64], part: &DyadicPartition) -> Result<Upper> {
    let f = frame_resonant(x_rlrl, x, part).add_constant_per_frame(c_dbl);
    let y_rlrlrl = solve_zero_start(&f)?;
    check_finite(&y_rlrlrl, "y_rlrlrl")?;
    let neg: Vec<f64> = c_dbl.iter().map(|c| -c).collect();
    let f = x_lr.map_frames(|v| v.map_real(|a| 0.5 * a * a)).add_constant_per_frame(&neg);
    let y_lrlrrl = solve_zero_start(&f)?;
    check_finite(&y_lrlrrl, "y_lrlrrl")?;
    let y_r = solve_zero_start(x)?;
    check_finite(&y_r, "y_r")?;
    let resonant_r = frame_resonant(&y_r.derivative(1), x, part);
    check_finite(&resonant_r, "resonant_r")?;
    Ok(Upper { y_rlrlrl, y_lrlrrl, y_r, resonant_r })
}

pub fn build_trees(
    xi: &NoisePath,
    init: &InitialCondition,
    constants: &RenormConstants,
    part: &DyadicPartition,
) -> Result<EnhancedData> {
    let grid = *xi.grid();
    if !init.grid().same_as(&grid) || !part.grid().same_as(&grid) {
        return Err(Error::GridMismatch);
    }
    let mesh = xi.mesh().to_vec();
    if constants.c_lr.len() != mesh.len() || constants.c_dbl.len() != mesh.len() {
        return Err(Error::MeshMismatch);
    }
    let drift = init.descriptor.drift;
    let phi = mollifier_table(&grid, xi.level);
    let ks = grid.wavenumbers();

    let mut yc: Vec<C64> = init.profile.coeffs().iter().zip(&phi).map(|(c, p)| c * p).collect();
    let mut periodic = Vec::with_capacity(mesh.len());
    periodic.push(yc.clone());
    for k in 0..xi.steps() {
        let h = mesh[k + 1] - mesh[k];
        let inc = xi.increment_coeffs(k);
        for i in 0..grid.n() {
            let z = 0.5 * ks[i] * ks[i] * h;
            yc[i] = yc[i] * (-z).exp() + inc[i] * phi1(z);
        }
        periodic.push(yc.clone());
    }
    let ramp = GridField::from_fn(grid, |x| drift * x);
    let (y_frames, x_frames): (Vec<GridField>, Vec<GridField>) = periodic
        .into_par_iter()
        .map(|c| {
            let p = GridField::from_coeffs(grid, c).real_part();
            let x = p.derivative(1).real_part().map_real(|v| v + drift);
            (&p + &ramp, x)
        })
        .unzip();
    let y = TimeField::new(mesh.clone(), y_frames)?;
    let x = TimeField::new(mesh.clone(), x_frames)?;
    check_finite(&y, "y")?;

    let neg_lr: Vec<f64> = constants.c_lr.iter().map(|c| -c).collect();
    let y_lr = solve_zero_start(&x.map_frames(|v| v.map_real(|a| 0.5 * a * a)).add_constant_per_frame(&neg_lr))?;
    check_finite(&y_lr, "y_lr")?;
    let x_lr = y_lr.derivative(1).real_part();
    let y_rlrl = solve_zero_start(&x.mul(&x_lr).real_part())?;
    check_finite(&y_rlrl, "y_rlrl")?;
    let x_rlrl = y_rlrl.derivative(1).real_part();
    let up = upper_trees(&x, &x_lr, &x_rlrl, &constants.c_dbl, part)?;

    Ok(EnhancedData {
        level: xi.level,
        seed: xi.seed,
        initial: init.descriptor.clone(),
        constants: constants.clone(),
        y,
        y_lr,
        y_rlrl,
        y_rlrlrl: up.y_rlrlrl,
        y_lrlrrl: up.y_lrlrrl,
        y_r: up.y_r,
        x,
        resonant_r: up.resonant_r,
    })
}

/// How the initial condition of an enhancement run is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceSpec {
    pub half_length: f64,
    pub num_points: usize,
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub initial: InitialKind,
    pub drift: f64,
    pub renorm: RenormMode,
}

/// Samples one noise path and initial condition, then builds the enhanced data
/// at each requested level from the same sample (`None` = unmollified).
pub fn enhance_ladder(spec: &EnhanceSpec, levels: &[Option<f64>], part: &DyadicPartition) -> Result<Vec<EnhancedData>> {
    let grid = Grid::new(spec.half_length, spec.num_points)?;
    let xi = sample_noise(&grid, spec.t_end, spec.dt, spec.seed)?;
    let init = match spec.initial {
        InitialKind::Zero => {
            let mut z = InitialCondition::zero(grid);
            z.descriptor.drift = spec.drift;
            z
        }
        InitialKind::Deterministic => {
            return Err(Error::InvalidParameter("deterministic initial data must be passed to build_trees".into()))
        }
        InitialKind::Brownian => brownian_initial(&grid, spec.drift, spec.seed),
        InitialKind::Stationary => stationary_initial(&grid, xi.mesh()[1] - xi.mesh()[0], spec.drift, spec.seed),
    };
    levels
        .iter()
        .map(|&lv| {
            let xin = match lv {
                Some(n) => mollify(&xi, n)?,
                None => xi.clone(),
            };
            let c = renorm_constants(&grid, xi.mesh(), lv, &init.variance, spec.renorm)?;
            build_trees(&xin, &init, &c, part)
        })
        .collect()
}

pub fn enhance(spec: &EnhanceSpec, level: Option<f64>, part: &DyadicPartition) -> Result<EnhancedData> {
    Ok(enhance_ladder(spec, &[level], part)?.pop().unwrap())
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// FNV-1a hash of the bits of a time field and its mesh.
pub fn fingerprint(f: &TimeField) -> u64 {
    let mesh = f.mesh().iter().flat_map(|t| t.to_bits().to_le_bytes());
    let vals = f.frames().iter().flat_map(|fr| fr.values().iter().flat_map(|c| {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(&c.re.to_bits().to_le_bytes());
        b[8..].copy_from_slice(&c.im.to_bits().to_le_bytes());
        b
    }));
    fnv1a(mesh.chain(vals))
}

impl EnhancedData {
    /// Data of the zero noise with zero initial condition: every tree vanishes.
    pub fn zeros(grid: Grid, mesh: Vec<f64>) -> Self {
        let z = TimeField::zeros(grid, mesh.clone());
        Self {
            level: None,
            seed: 0,
            initial: InitialCondition::zero(grid).descriptor,
            constants: RenormConstants::zero(mesh.len()),
            y: z.clone(),
            y_lr: z.clone(),
            y_rlrl: z.clone(),
            y_rlrlrl: z.clone(),
            y_lrlrrl: z.clone(),
            y_r: z.clone(),
            x: z.clone(),
            resonant_r: z,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.x.grid()
    }

    pub fn mesh(&self) -> &[f64] {
        self.x.mesh()
    }

    pub fn drift(&self) -> f64 {
        self.initial.drift
    }

    /// Identity tag of the controller `Y^r`.
    pub fn controller(&self) -> u64 {
        fingerprint(&self.y_r)
    }

    pub fn x_lr(&self) -> TimeField {
        self.y_lr.derivative(1).real_part()
    }

    pub fn x_rlrl(&self) -> TimeField {
        self.y_rlrl.derivative(1).real_part()
    }

    pub fn x_r(&self) -> TimeField {
        self.y_r.derivative(1).real_part()
    }

    /// `Y + Y^{lr} + Y^{rLrl}`, the exponent removed by the Cole–Hopf split.
    pub fn exponent(&self) -> TimeField {
        self.y.add(&self.y_lr).add(&self.y_rlrl)
    }

    /// `𝓛(Y^{rLrLrl} + Y^{LrlRrl}) = X^{rLrl} ⊙ X + ½(X^{lr})²`, from the forcings.
    pub fn double_forcing(&self, part: &DyadicPartition) -> TimeField {
        let xl = self.x_lr();
        frame_resonant(&self.x_rlrl(), &self.x, part).add(&xl.map_frames(|v| v.map_real(|a| 0.5 * a * a)))
    }

    pub fn trees(&self) -> [&TimeField; 8] {
        [&self.y, &self.y_lr, &self.y_rlrl, &self.y_rlrlrl, &self.y_lrlrrl, &self.y_r, &self.x, &self.resonant_r]
    }

    fn check_compatible(&self, other: &EnhancedData) -> Result<()> {
        if !self.grid().same_as(other.grid()) {
            return Err(Error::GridMismatch);
        }
        if self.mesh() != other.mesh() {
            return Err(Error::MeshMismatch);
        }
        Ok(())
    }

    /// Largest `|Ŷ_{k+1} − e^{-λh}Ŷ_k − φ₁(λh) h ξ̂_k|` over steps and modes,
    /// relative to the largest increment: the discrete `𝓛Y = ξ` consistency.
    pub fn noise_residual(&self, xi: &NoisePath) -> f64 {
        let grid = *self.grid();
        let ks = grid.wavenumbers();
        let ramp = GridField::from_fn(grid, |x| self.drift() * x);
        let per: Vec<Vec<C64>> = self.y.frames().iter().map(|f| (f - &ramp).coeffs().to_vec()).collect();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1e-300;
        for k in 0..xi.steps() {
            let h = self.mesh()[k + 1] - self.mesh()[k];
            for i in 0..grid.n() {
                let z = 0.5 * ks[i] * ks[i] * h;
                let r = per[k + 1][i] - per[k][i] * (-z).exp() - xi.increment_coeffs(k)[i] * phi1(z);
                worst = worst.max(r.norm());
                scale = scale.max(xi.increment_coeffs(k)[i].norm());
            }
        }
        worst / scale
    }

    pub fn save(&self, dir: &Path, params: &ManifestParams) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, f) in TREE_NAMES.iter().zip(self.trees()) {
            f.write_binary(&dir.join(format!("{name}.bin")))?;
        }
        let manifest = Manifest {
            schema_version: crate::SCHEMA_VERSION,
            level: self.level,
            seed: self.seed,
            grid: *self.grid(),
            dt: self.mesh()[1] - self.mesh()[0],
            t_end: *self.mesh().last().unwrap(),
            frames: self.mesh().len(),
            initial: self.initial.clone(),
            constants: self.constants.clone(),
            controller: format!("{:016x}", self.controller()),
            params: *params,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ManifestParams)> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Format(format!("schema version {} not supported", m.schema_version)));
        }
        let mut t: Vec<TimeField> = TREE_NAMES
            .iter()
            .map(|name| TimeField::read_binary(&dir.join(format!("{name}.bin"))))
            .collect::<Result<_>>()?;
        if t.iter().any(|f| f.mesh() != t[0].mesh()) || !t[0].grid().same_as(&m.grid) {
            return Err(Error::Format("tree files disagree with the manifest".into()));
        }
        let resonant_r = t.pop().unwrap();
        let x = t.pop().unwrap();
        let y_r = t.pop().unwrap();
        let y_lrlrrl = t.pop().unwrap();
        let y_rlrlrl = t.pop().unwrap();
        let y_rlrl = t.pop().unwrap();
        let y_lr = t.pop().unwrap();
        let y = t.pop().unwrap();
        let data = Self {
            level: m.level,
            seed: m.seed,
            initial: m.initial,
            constants: m.constants,
            y,
            y_lr,
            y_rlrl,
            y_rlrlrl,
            y_lrlrrl,
            y_r,
            x,
            resonant_r,
        };
        Ok((data, m.params))
    }
}

/// Regularity and weight parameters recorded next to saved enhanced data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestParams {
    pub alpha: f64,
    pub delta: f64,
    pub a: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    level: Option<f64>,
    seed: u64,
    grid: Grid,
    dt: f64,
    t_end: f64,
    frames: usize,
    initial: InitialDescriptor,
    constants: RenormConstants,
    controller: String,
    params: ManifestParams,
}

/// `∂Y^{r,n} ⊙ X` where only the first factor comes from mollified noise.
pub fn asymmetric_resonant(y_r_n: &TimeField, x: &TimeField, part: &DyadicPartition) -> Result<TimeField> {
    y_r_n.check_mesh(x)?;
    if !y_r_n.grid().same_as(x.grid()) || !part.grid().same_as(x.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(frame_resonant(&y_r_n.derivative(1).real_part(), x, part))
}

/// `Y ↦ Y(τ + λ²t, λx)` for dyadic `λ = 2^{-r}`. The grid becomes `[-L/λ, L/λ)`
/// with the same number of points, so values carry over index by index. The
/// three lowest trees are composed directly; the others are re-solved from
/// zero on the new mesh.
pub fn rescale_translate(data: &EnhancedData, tau: f64, lam: f64, k0: f64) -> Result<EnhancedData> {
    if !(lam > 0.0 && lam <= 1.0) || (lam.log2() - lam.log2().round()).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("scale {lam} must be a dyadic fraction in (0, 1]")));
    }
    let mesh = data.mesh();
    let t_end = *mesh.last().unwrap();
    if !(tau >= 0.0 && tau < t_end) {
        return Err(Error::InvalidParameter(format!("shift {tau} must lie in [0, {t_end})")));
    }
    let start = mesh
        .iter()
        .position(|&t| (t - tau).abs() <= 1e-9 * t_end.max(1.0))
        .ok_or_else(|| Error::InvalidParameter(format!("shift {tau} is not a mesh node")))?;
    if mesh.len() - start < 2 {
        return Err(Error::InvalidParameter("shift leaves fewer than two frames".into()));
    }
    let old = *data.grid();
    let grid = Grid::new(old.half_length / lam, old.n())?;
    let part = DyadicPartition::new(&grid, k0)?;
    let new_mesh: Vec<f64> = mesh[start..].iter().map(|t| (t - mesh[start]) / (lam * lam)).collect();
    let carry = |f: &TimeField, s: f64| -> Result<TimeField> {
        let frames = f.frames()[start..]
            .iter()
            .map(|fr| GridField::from_values(grid, fr.values().iter().map(|v| v * s).collect()))
            .collect();
        TimeField::new(new_mesh.clone(), frames)
    };
    let y = carry(&data.y, 1.0)?;
    let y_lr = carry(&data.y_lr, 1.0)?;
    let y_rlrl = carry(&data.y_rlrl, 1.0)?;
    let x = carry(&data.x, lam)?;
    let l2 = lam * lam;
    let constants = RenormConstants {
        mode: data.constants.mode,
        c_lr: data.constants.c_lr[start..].iter().map(|c| l2 * c).collect(),
        c_dbl: data.constants.c_dbl[start..].iter().map(|c| l2 * c).collect(),
    };
    let up = upper_trees(&x, &y_lr.derivative(1).real_part(), &y_rlrl.derivative(1).real_part(), &constants.c_dbl, &part)?;
    let mut initial = data.initial.clone();
    initial.drift *= lam;
    Ok(EnhancedData {
        level: data.level.map(|n| n * lam),
        seed: data.seed,
        initial,
        constants,
        y,
        y_lr,
        y_rlrl,
        y_rlrlrl: up.y_rlrlrl,
        y_lrlrrl: up.y_lrlrrl,
        y_r: up.y_r,
        x,
        resonant_r: up.resonant_r,
    })
}

/// Regularity parameters of the enhanced-data norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub alpha: f64,
    pub a: f64,
}

/// Per-component distances: `(name, norm of the difference)`.
pub fn ydist_components(a: &EnhancedData, b: &EnhancedData, p: &NormParams, part: &DyadicPartition) -> Result<Vec<(&'static str, f64)>> {
    a.check_compatible(b)?;
    if !part.grid().same_as(a.grid()) {
        return Err(Error::GridMismatch);
    }
    let al = p.alpha;
    let wa = WeightSpec::polynomial(p.a);
    let w1a = WeightSpec::polynomial(1.0 + p.a);
    let diff = |f: &TimeField, g: &TimeField, w: &WeightSpec| f.sub(g).with_weight(*w);
    let specs: Vec<(&'static str, TimeField, f64, bool)> = vec![
        ("y", diff(&a.y, &b.y, &w1a), al, true),
        ("y_lr", diff(&a.y_lr, &b.y_lr, &wa), 2.0 * al, true),
        ("y_rlrl", diff(&a.y_rlrl, &b.y_rlrl, &wa), al + 1.0, true),
        ("y_rlrlrl", diff(&a.y_rlrlrl, &b.y_rlrlrl, &wa), 2.0 * al + 1.0, true),
        ("y_lrlrrl", diff(&a.y_lrlrrl, &b.y_lrlrrl, &wa), 2.0 * al + 1.0, true),
        ("resonant_r", diff(&a.resonant_r, &b.resonant_r, &wa), 2.0 * al - 1.0, false),
        ("x", diff(&a.x, &b.x, &wa), al - 1.0, false),
        ("y_r", diff(&a.y_r, &b.y_r, &wa), al + 1.0, true),
    ];
    specs
        .into_iter()
        .map(|(name, f, reg, parabolic)| {
            let v = if parabolic { parabolic_norm(&f, reg, part)? } else { sup_besov_norm(&f, reg, part) };
            Ok((name, v))
        })
        .collect()
}

/// Product norm of the difference of two enhanced data sets.
pub fn ydist(a: &EnhancedData, b: &EnhancedData, p: &NormParams, part: &DyadicPartition) -> Result<f64> {
    Ok(ydist_components(a, b, p, part)?.into_iter().fold(0.0, |m, (_, v)| m.max(v)))
}
