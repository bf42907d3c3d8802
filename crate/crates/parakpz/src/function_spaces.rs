//! Time-indexed fields and the norm estimators built on the dyadic blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paraproducts::{para_modified, TimeSmoother};
use crate::spectral_core::{
    read_f64, read_field_record, read_u64, weighted_sup_norm, write_field_record,
    DyadicPartition, Grid, GridField, WeightSpec, C64,
};

/// Largest number of frames scanned pairwise by the time-Hölder seminorm.
pub const MAX_PAIRWISE_FRAMES: usize = 512;

pub fn uniform_mesh(t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    (0..=steps).map(|k| if k == steps { t1 } else { t0 + k as f64 * h }).collect()
}

/// A sequence of grid fields on a strictly increasing time mesh.
#[derive(Debug, Clone)]
pub struct TimeField {
    mesh: Vec<f64>,
    frames: Vec<GridField>,
    pub blowup: f64,
    pub weight: WeightSpec,
}

impl TimeField {
    pub fn new(mesh: Vec<f64>, frames: Vec<GridField>) -> Result<Self> {
        if mesh.is_empty() || mesh.len() != frames.len() {
            return Err(Error::MeshMismatch);
        }
        if mesh.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("time mesh must be strictly increasing".into()));
        }
        let g = *frames[0].grid();
        if frames.iter().any(|f| !f.grid().same_as(&g)) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { mesh, frames, blowup: 0.0, weight: WeightSpec::unit() })
    }

    pub fn zeros(grid: Grid, mesh: Vec<f64>) -> Self {
        let frames = vec![GridField::zeros(grid); mesh.len()];
        Self::new(mesh, frames).expect("valid mesh")
    }

    pub fn constant_in_time(f: &GridField, mesh: Vec<f64>) -> Self {
        let frames = vec![f.clone(); mesh.len()];
        Self::new(mesh, frames).expect("valid mesh")
    }

    pub fn from_fn(grid: Grid, mesh: Vec<f64>, f: impl Fn(f64, f64) -> f64 + Sync) -> Self {
        let frames = mesh.iter().map(|&t| GridField::from_fn(grid, |x| f(t, x))).collect();
        Self::new(mesh, frames).expect("valid mesh")
    }

    pub fn with_blowup(mut self, beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta), "blow-up exponent must lie in [0,1)");
        self.blowup = beta;
        self
    }

    pub fn with_weight(mut self, w: WeightSpec) -> Self {
        self.weight = w;
        self
    }

    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn frames(&self) -> &[GridField] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [GridField] {
        &mut self.frames
    }

    pub fn frame(&self, k: usize) -> &GridField {
        &self.frames[k]
    }

    pub fn last(&self) -> &GridField {
        self.frames.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.frames[0].grid()
    }

    pub fn t_left(&self) -> f64 {
        self.mesh[0]
    }

    pub fn t_right(&self) -> f64 {
        *self.mesh.last().unwrap()
    }

    pub fn check_mesh(&self, other: &TimeField) -> Result<()> {
        if self.mesh != other.mesh {
            return Err(Error::MeshMismatch);
        }
        if !self.grid().same_as(other.grid()) {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    fn rebuild(&self, frames: Vec<GridField>) -> Self {
        Self { mesh: self.mesh.clone(), frames, blowup: self.blowup, weight: self.weight }
    }

    pub fn map_frames(&self, f: impl Fn(&GridField) -> GridField + Sync + Send) -> Self {
        self.rebuild(self.frames.par_iter().map(f).collect())
    }

    pub fn zip_frames(
        &self,
        other: &TimeField,
        f: impl Fn(&GridField, &GridField) -> GridField + Sync + Send,
    ) -> Self {
        assert_eq!(self.mesh, other.mesh, "time mesh mismatch");
        self.rebuild(self.frames.par_iter().zip(&other.frames).map(|(a, b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &TimeField) -> Self {
        self.zip_frames(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &TimeField) -> Self {
        self.zip_frames(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &TimeField) -> Self {
        self.zip_frames(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_frames(|f| f.scale(s))
    }

    pub fn add_constant_per_frame(&self, c: &[f64]) -> Self {
        let frames = self
            .frames
            .iter()
            .zip(c)
            .map(|(f, &c)| f.map(|v| v + c))
            .collect();
        self.rebuild(frames)
    }

    pub fn derivative(&self, order: u32) -> Self {
        self.map_frames(|f| f.derivative(order))
    }

    pub fn real_part(&self) -> Self {
        self.map_frames(|f| f.real_part())
    }

    pub fn sup_norm(&self) -> f64 {
        self.frames.iter().fold(0.0, |m, f| m.max(f.sup_norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(|f| f.is_finite())
    }

    /// Frames `range` as a new field on the corresponding sub-mesh.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            mesh: self.mesh[range.clone()].to_vec(),
            frames: self.frames[range].to_vec(),
            blowup: self.blowup,
            weight: self.weight,
        }
    }

    /// Reverses time: frame `k` becomes frame `M-k`, mesh `t ↦ t_0 + t_M - t`.
    pub fn time_reversed(&self) -> Self {
        let (a, b) = (self.t_left(), self.t_right());
        let mesh = self.mesh.iter().rev().map(|&t| a + b - t).collect();
        let frames = self.frames.iter().rev().cloned().collect();
        Self { mesh, frames, blowup: 0.0, weight: self.weight }
    }

    /// Linear interpolation in time (clamped to the mesh).
    pub fn at_time(&self, t: f64) -> GridField {
        let (l, th) = locate(&self.mesh, t);
        if th == 0.0 || l + 1 >= self.len() {
            return self.frames[l].clone();
        }
        self.frames[l].scale(1.0 - th).axpy(th, &self.frames[l + 1])
    }

    /// Discrete heat operator: forward difference in time minus spectral `½Δ`.
    /// The last frame reuses the backward difference.
    pub fn heat_operator(&self) -> Self {
        let m = self.len();
        assert!(m >= 2, "need two frames");
        let frames = (0..m)
            .into_par_iter()
            .map(|k| {
                let (a, b) = if k + 1 < m { (k, k + 1) } else { (k - 1, k) };
                let dt = self.mesh[b] - self.mesh[a];
                let lap = self.frames[k].derivative(2);
                (&self.frames[b] - &self.frames[a]).scale(1.0 / dt).axpy(-0.5, &lap)
            })
            .collect();
        self.rebuild(frames)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"PKTF")?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.blowup.to_le_bytes())?;
        for t in &self.mesh {
            w.write_all(&t.to_le_bytes())?;
        }
        for f in &self.frames {
            write_field_record(&mut w, f)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        std::io::Read::read_exact(&mut r, &mut magic)?;
        if &magic != b"PKTF" {
            return Err(Error::Format(format!("{} is not a time-field file", path.display())));
        }
        let m = read_u64(&mut r)? as usize;
        if m > 1 << 24 {
            return Err(Error::Format(format!("implausible frame count {m}")));
        }
        let blowup = read_f64(&mut r)?;
        let mesh = (0..m).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let frames = (0..m).map(|_| read_field_record(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut tf = Self::new(mesh, frames)?;
        tf.blowup = blowup;
        Ok(tf)
    }
}

/// Interval index `l` and fraction `θ` with `t = (1-θ) mesh[l] + θ mesh[l+1]`.
pub fn locate(mesh: &[f64], t: f64) -> (usize, f64) {
    if t <= mesh[0] {
        return (0, 0.0);
    }
    let last = mesh.len() - 1;
    if t >= mesh[last] {
        return (last, 0.0);
    }
    let l = mesh.partition_point(|&s| s <= t) - 1;
    let th = (t - mesh[l]) / (mesh[l + 1] - mesh[l]);
    (l, th)
}

/// `u = u′ ≺≺ Y^r + u♯`, tagged with the fingerprint of the data it is built on.
#[derive(Debug, Clone)]
pub struct ParaFunction {
    pub u: TimeField,
    pub u_prime: TimeField,
    pub u_sharp: TimeField,
    pub controller: u64,
    pub beta_prime: f64,
    pub beta_hat: f64,
}

/// Blow-up exponents `(β′, β̂)` attached to an initial condition of regularity `β`.
pub fn blowup_exponents(alpha: f64, beta: f64) -> (f64, f64) {
    let beta_hat = (2.0 * alpha + 1.0 - beta) / 2.0;
    let beta_prime = ((alpha + 1.0 - beta) / 2.0).max(0.0);
    (beta_prime, beta_hat)
}

impl ParaFunction {
    /// `max_t ‖u − u′ ≺≺ Y^r − u♯‖_∞`.
    pub fn reconstruction_residual(
        &self,
        controller: &TimeField,
        sm: &TimeSmoother,
        part: &DyadicPartition,
    ) -> Result<f64> {
        let pm = para_modified(&self.u_prime, controller, sm, part)?;
        Ok(self.u.sub(&pm).sub(&self.u_sharp).sup_norm())
    }
}

/// `sup_j 2^{αj} ‖Δ_j f / z‖_∞`.
pub fn besov_norm(f: &GridField, alpha: f64, w: &WeightSpec, t: f64, part: &DyadicPartition) -> f64 {
    part.all_blocks(f)
        .iter()
        .zip(part.blocks())
        .map(|(b, j)| 2f64.powf(alpha * j as f64) * weighted_sup_norm(b, w, t))
        .fold(0.0, f64::max)
}

/// Per-block contributions `2^{αj} ‖Δ_j f / z‖_∞`, indexed from `j = -1`.
pub fn besov_profile(
    f: &GridField,
    alpha: f64,
    w: &WeightSpec,
    t: f64,
    part: &DyadicPartition,
) -> Vec<f64> {
    part.all_blocks(f)
        .iter()
        .zip(part.blocks())
        .map(|(b, j)| 2f64.powf(alpha * j as f64) * weighted_sup_norm(b, w, t))
        .collect()
}

fn blowup_factor(t: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        1.0
    } else if t <= 0.0 {
        0.0
    } else {
        t.powf(beta)
    }
}

/// `sup_t t^β ‖u(t)‖_{C^α_{z(t)}}`, using the field's own blow-up and weight.
pub fn sup_besov_norm(u: &TimeField, alpha: f64, part: &DyadicPartition) -> f64 {
    u.frames()
        .par_iter()
        .zip(u.mesh())
        .map(|(f, &t)| {
            let s = blowup_factor(t, u.blowup);
            if s == 0.0 {
                0.0
            } else {
                s * besov_norm(f, alpha, &u.weight, t, part)
            }
        })
        .reduce(|| 0.0, f64::max)
}

fn pairwise_indices(m: usize) -> Vec<usize> {
    if m <= MAX_PAIRWISE_FRAMES {
        (0..m).collect()
    } else {
        // Evenly spaced subsample that always keeps both endpoints.
        let stride = m.div_ceil(MAX_PAIRWISE_FRAMES);
        let mut v: Vec<usize> = (0..m).step_by(stride).collect();
        if *v.last().unwrap() != m - 1 {
            v.push(m - 1);
        }
        v
    }
}

/// `sup_{s<t, t-s ≤ T/2} ‖t^β u(t) − s^β u(s)‖_{∞, z(t)} / |t−s|^{α/2}`.
pub fn time_holder_seminorm(u: &TimeField, alpha: f64) -> f64 {
    let idx = pairwise_indices(u.len());
    let mesh = u.mesh();
    let half = 0.5 * (u.t_right() - u.t_left());
    let grid = *u.grid();
    let scaled: Vec<Vec<C64>> = idx
        .iter()
        .map(|&k| {
            let s = blowup_factor(mesh[k], u.blowup);
            u.frame(k).values().iter().map(|v| v * s).collect()
        })
        .collect();
    (0..idx.len())
        .into_par_iter()
        .map(|b| {
            let tb = mesh[idx[b]];
            let inv_w: Vec<f64> = u.weight.table(&grid, tb).iter().map(|w| 1.0 / w).collect();
            let mut best: f64 = 0.0;
            for a in (0..b).rev() {
                let ta = mesh[idx[a]];
                let dt = tb - ta;
                if dt > half + 1e-14 {
                    break;
                }
                let mut m: f64 = 0.0;
                for ((x, y), iw) in scaled[b].iter().zip(&scaled[a]).zip(&inv_w) {
                    m = m.max((x - y).norm() * iw);
                }
                best = best.max(m / dt.powf(alpha / 2.0));
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// `‖u‖_{L^{β,α}_z}`: time-Hölder seminorm plus `sup_t t^β ‖u(t)‖_{C^α_{z(t)}}`.
pub fn parabolic_norm(u: &TimeField, alpha: f64, part: &DyadicPartition) -> Result<f64> {
    if u.len() < 2 {
        return Err(Error::InvalidParameter("parabolic norm needs at least two frames".into()));
    }
    Ok(time_holder_seminorm(u, alpha) + sup_besov_norm(u, alpha, part))
}

/// Sup norm plus weighted Hölder quotients over grid pairs with `|x−y| ≤ 1`;
/// for `α ∈ (1,2)` the quotient is taken on the first derivative.
pub fn holder_equiv_norm(f: &GridField, alpha: f64, w: &WeightSpec) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) || alpha == 1.0 {
        return Err(Error::InvalidParameter(format!("Hölder exponent {alpha} not in (0,2)\\{{1}}")));
    }
    let grid = *f.grid();
    let base = weighted_sup_norm(f, w, 0.0);
    let (g, a, extra) = if alpha < 1.0 {
        (f.clone(), alpha, 0.0)
    } else {
        let d = f.derivative(1);
        let s = weighted_sup_norm(&d, w, 0.0);
        (d, alpha - 1.0, s)
    };
    let n = grid.n();
    let h = grid.spacing();
    let reach = ((1.0 / h).floor() as usize).min(n / 2);
    let v = g.values();
    let z = w.table(&grid, 0.0);
    let q = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut m: f64 = 0.0;
            for s in 1..=reach {
                let d = (s as f64 * h).powf(a);
                for j in [(i + s) % n, (i + n - s) % n] {
                    m = m.max((v[i] - v[j]).norm() / (z[i] * d));
                }
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    Ok(base + extra + q)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub zeta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub restart_lhs: f64,
    pub restart_rhs: f64,
    pub restart_constant: f64,
}

/// Measures both interpolation inequalities for `u` at regularity `alpha`.
pub fn interpolation_probe(
    u: &TimeField,
    alpha: f64,
    eps: f64,
    part: &DyadicPartition,
) -> Result<InterpolationReport> {
    let beta = u.blowup;
    if !(eps >= 0.0 && eps < alpha && eps <= 2.0 * beta + 1e-15) {
        return Err(Error::InvalidParameter(format!(
            "ε = {eps} must lie in [0, α) ∩ [0, 2β] with α = {alpha}, β = {beta}"
        )));
    }
    let kappa = (0.05f64).min((alpha - eps) / 2.0);
    let zeta = alpha - eps - kappa;
    let rhs = parabolic_norm(u, alpha, part)?;
    let mut lower = u.clone();
    lower.blowup = (beta - eps / 2.0).max(0.0);
    let lhs = parabolic_norm(&lower, zeta, part)?;
    let restart_lhs = parabolic_norm(u, alpha - eps, part)?;
    let t0 = u.t_left();
    let first = blowup_factor(t0, beta) * besov_norm(u.frame(0), alpha - eps, &u.weight, t0, part);
    let restart_rhs = first + (u.t_right() - t0).powf(eps / 2.0) * rhs;
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    Ok(InterpolationReport {
        alpha,
        beta,
        eps,
        zeta,
        lhs,
        rhs,
        constant: ratio(lhs, rhs),
        restart_lhs,
        restart_rhs,
        restart_constant: ratio(restart_lhs, restart_rhs),
    })
}
