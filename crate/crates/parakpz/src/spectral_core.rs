//! Periodic grid, DFT, Littlewood–Paley blocks, spectral derivatives and
//! spatial weights.
//!
//! The torus is `[-L, L)` sampled at `N` points. Fourier coefficients are
//! `FFT(values) / N`, so a unit-amplitude mode has a coefficient of modulus 1.
//! Every multiplier used in the crate depends on the wavenumber only, which
//! makes the phase convention of the coefficients irrelevant.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub half_length: f64,
    pub num_points: usize,
}

impl Grid {
    pub fn new(half_length: f64, num_points: usize) -> Result<Self> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::InvalidGrid(format!("half length {half_length} must be positive")));
        }
        if num_points < 8 || !num_points.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "{num_points} points: need a power of two >= 8"
            )));
        }
        Ok(Self { half_length, num_points })
    }

    pub fn n(&self) -> usize {
        self.num_points
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_length / self.num_points as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_length + i as f64 * self.spacing()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.num_points).map(|i| self.x(i)).collect()
    }

    /// Integer mode number in FFT ordering; the Nyquist index maps to `-N/2`.
    pub fn mode(&self, i: usize) -> i64 {
        let n = self.num_points;
        if i < n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    }

    pub fn index_of_mode(&self, m: i64) -> usize {
        let n = self.num_points as i64;
        m.rem_euclid(n) as usize
    }

    pub fn wavenumber(&self, i: usize) -> f64 {
        PI * self.mode(i) as f64 / self.half_length
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.num_points).map(|i| self.wavenumber(i)).collect()
    }

    pub fn nyquist_index(&self) -> usize {
        self.num_points / 2
    }

    pub fn k_max(&self) -> f64 {
        PI * (self.num_points / 2) as f64 / self.half_length
    }

    /// Index of the grid point closest to `x` (periodically wrapped).
    pub fn nearest_index(&self, x: f64) -> usize {
        let h = self.spacing();
        let r = ((x + self.half_length) / h).round() as i64;
        r.rem_euclid(self.num_points as i64) as usize
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.num_points == other.num_points && self.half_length == other.half_length
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Coefficients `FFT(values) / N`.
pub fn forward_dft(values: &[C64]) -> Vec<C64> {
    let n = values.len();
    let mut buf = values.to_vec();
    plan(n, false).process(&mut buf);
    let s = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= s);
    buf
}

/// Values from coefficients; inverse of [`forward_dft`].
pub fn inverse_dft(coeffs: &[C64]) -> Vec<C64> {
    let n = coeffs.len();
    let mut buf = coeffs.to_vec();
    plan(n, true).process(&mut buf);
    buf
}

/// Samples on a grid with a lazily computed coefficient cache.
#[derive(Debug, Clone)]
pub struct GridField {
    grid: Grid,
    values: Vec<C64>,
    coeffs: OnceLock<Vec<C64>>,
}

impl GridField {
    pub fn from_values(grid: Grid, values: Vec<C64>) -> Self {
        assert_eq!(values.len(), grid.n(), "value count must match grid size");
        Self { grid, values, coeffs: OnceLock::new() }
    }

    pub fn from_real(grid: Grid, values: &[f64]) -> Self {
        Self::from_values(grid, values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        Self::from_values(grid, (0..grid.n()).map(|i| C64::new(f(grid.x(i)), 0.0)).collect())
    }

    pub fn from_coeffs(grid: Grid, coeffs: Vec<C64>) -> Self {
        assert_eq!(coeffs.len(), grid.n(), "coefficient count must match grid size");
        let values = inverse_dft(&coeffs);
        let cell = OnceLock::new();
        let _ = cell.set(coeffs);
        Self { grid, values, coeffs: cell }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self::from_values(grid, vec![C64::new(c, 0.0); grid.n()])
    }

    /// Unit-amplitude complex exponential `e^{i k_m x}` for integer mode `m`.
    pub fn mode(grid: Grid, m: i64) -> Self {
        let mut c = vec![C64::new(0.0, 0.0); grid.n()];
        c[grid.index_of_mode(m)] = C64::new(1.0, 0.0);
        Self::from_coeffs(grid, c)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn coeffs(&self) -> &[C64] {
        self.coeffs.get_or_init(|| forward_dft(&self.values))
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    pub fn value_at(&self, i: usize) -> f64 {
        self.values[i].re
    }

    /// Drops imaginary parts (rounding noise of real computations).
    pub fn real_part(&self) -> Self {
        Self::from_values(self.grid, self.values.iter().map(|c| C64::new(c.re, 0.0)).collect())
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().fold(0.0, |m, c| m.max(c.im.abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn check_grid(&self, other: &GridField) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self::from_values(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_values(self.grid, self.values.iter().map(|v| C64::new(f(v.re), 0.0)).collect())
    }

    pub fn zip_with(&self, other: &GridField, f: impl Fn(C64, C64) -> C64) -> Self {
        assert!(self.grid.same_as(&other.grid), "grid mismatch");
        Self::from_values(
            self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn axpy(&self, s: f64, other: &GridField) -> Self {
        self.zip_with(other, |a, b| a + b * s)
    }

    /// Applies a real Fourier multiplier given as a function of the wavenumber.
    pub fn multiplier(&self, m: impl Fn(f64) -> f64) -> Self {
        let c = self.coeffs();
        let coeffs = (0..self.grid.n()).map(|i| c[i] * m(self.grid.wavenumber(i))).collect();
        Self::from_coeffs(self.grid, coeffs)
    }

    /// Applies a multiplier tabulated in FFT order.
    pub fn multiplier_table(&self, table: &[f64]) -> Self {
        let c = self.coeffs();
        Self::from_coeffs(self.grid, c.iter().zip(table).map(|(&c, &m)| c * m).collect())
    }

    pub fn derivative(&self, order: u32) -> Self {
        spectral_derivative(self, order)
    }

    /// Spectral interpolation at an arbitrary point.
    pub fn interpolate(&self, x: f64) -> f64 {
        let c = self.coeffs();
        let y = x + self.grid.half_length;
        let mut s = 0.0;
        for (i, ci) in c.iter().enumerate() {
            if i == self.grid.nyquist_index() {
                continue;
            }
            let phase = self.grid.wavenumber(i) * y;
            s += ci.re * phase.cos() - ci.im * phase.sin();
        }
        s
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_field_record(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        read_field_record(&mut r)
    }

    /// Binary record plus a JSON sidecar next to it (`<path>.json`).
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.write_binary(path)?;
        let sidecar = serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "kind": "grid_field",
            "grid": self.grid,
            "meta": meta,
        });
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub(crate) fn write_field_record(w: &mut impl Write, f: &GridField) -> Result<()> {
    w.write_all(&(f.grid.n() as u64).to_le_bytes())?;
    w.write_all(&f.grid.half_length.to_le_bytes())?;
    for v in &f.values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_field_record(r: &mut impl Read) -> Result<GridField> {
    let n = read_u64(r)? as usize;
    let l = read_f64(r)?;
    if n > 1 << 24 {
        return Err(Error::Format(format!("implausible grid size {n}")));
    }
    let grid = Grid::new(l, n)?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        values.push(C64::new(re, im));
    }
    Ok(GridField::from_values(grid, values))
}

impl Add for &GridField {
    type Output = GridField;
    fn add(self, rhs: &GridField) -> GridField {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Sub for &GridField {
    type Output = GridField;
    fn sub(self, rhs: &GridField) -> GridField {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// Pointwise product.
impl Mul for &GridField {
    type Output = GridField;
    fn mul(self, rhs: &GridField) -> GridField {
        self.zip_with(rhs, |a, b| a * b)
    }
}

impl Neg for &GridField {
    type Output = GridField;
    fn neg(self) -> GridField {
        self.map(|v| -v)
    }
}

macro_rules! owned_ops {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr<GridField> for GridField {
            type Output = GridField;
            fn $m(self, rhs: GridField) -> GridField {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&GridField> for GridField {
            type Output = GridField;
            fn $m(self, rhs: &GridField) -> GridField {
                (&self).$m(rhs)
            }
        }
        impl $tr<GridField> for &GridField {
            type Output = GridField;
            fn $m(self, rhs: GridField) -> GridField {
                self.$m(&rhs)
            }
        }
    )*};
}
owned_ops!(Add add, Sub sub, Mul mul);

/// Multiplies coefficients by `(ik)^order`; the Nyquist mode is dropped for odd orders.
pub fn spectral_derivative(f: &GridField, order: u32) -> GridField {
    let grid = *f.grid();
    let c = f.coeffs();
    let ny = grid.nyquist_index();
    let coeffs = (0..grid.n())
        .map(|i| {
            if order % 2 == 1 && i == ny {
                return C64::new(0.0, 0.0);
            }
            c[i] * C64::new(0.0, grid.wavenumber(i)).powu(order)
        })
        .collect();
    GridField::from_coeffs(grid, coeffs)
}

/// Smooth cutoff: 1 on `[0, 3/4]`, 0 on `[4/3, ∞)`, raised cosine in between.
pub fn cutoff(r: f64) -> f64 {
    const A: f64 = 0.75;
    const B: f64 = 4.0 / 3.0;
    let r = r.abs();
    if r <= A {
        1.0
    } else if r >= B {
        0.0
    } else {
        0.5 * (1.0 + (PI * (r - A) / (B - A)).cos())
    }
}

#[derive(Debug, Clone)]
pub struct DyadicPartition {
    grid: Grid,
    k0: f64,
    j_max: i32,
    rho: Vec<Vec<f64>>,
}

pub fn make_dyadic_partition(grid: &Grid, k0: f64) -> Result<DyadicPartition> {
    DyadicPartition::new(grid, k0)
}

impl DyadicPartition {
    pub fn new(grid: &Grid, k0: f64) -> Result<Self> {
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(Error::InvalidParameter(format!("base scale k0 = {k0} must be positive")));
        }
        let kmax = grid.k_max();
        let j_max = (kmax / (0.75 * k0)).log2().floor() as i32;
        if k0 > kmax / 4.0 || j_max < 2 {
            return Err(Error::GridTooCoarse { j_max });
        }
        let ks = grid.wavenumbers();
        let mut rho = Vec::with_capacity(j_max as usize + 2);
        rho.push(ks.iter().map(|k| cutoff(k / k0)).collect());
        for j in 0..=j_max {
            let hi = 2f64.powi(-(j + 1));
            let lo = 2f64.powi(-j);
            rho.push(ks.iter().map(|k| cutoff(hi * k / k0) - cutoff(lo * k / k0)).collect());
        }
        Ok(Self { grid: *grid, k0, j_max, rho })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn j_max(&self) -> i32 {
        self.j_max
    }

    /// Block indices `-1..=j_max`.
    pub fn blocks(&self) -> impl Iterator<Item = i32> + Clone {
        -1..=self.j_max
    }

    pub fn num_blocks(&self) -> usize {
        self.j_max as usize + 2
    }

    /// Window `ρ_j` tabulated in FFT order.
    pub fn window(&self, j: i32) -> &[f64] {
        &self.rho[(j + 1) as usize]
    }

    /// `ρ_j` evaluated at an arbitrary wavenumber.
    pub fn rho_at(&self, j: i32, k: f64) -> f64 {
        if j == -1 {
            cutoff(k / self.k0)
        } else {
            cutoff(2f64.powi(-(j + 1)) * k / self.k0) - cutoff(2f64.powi(-j) * k / self.k0)
        }
    }

    /// Multiplier of `S_{i-1} = Σ_{j ≤ i-2} Δ_j`; zero for `i ≤ 0`.
    pub fn low_pass_at(&self, i: i32, k: f64) -> f64 {
        if i <= 0 {
            0.0
        } else {
            cutoff(2f64.powi(-(i - 1)) * k / self.k0)
        }
    }

    pub fn low_pass_window(&self, i: i32) -> Vec<f64> {
        self.grid.wavenumbers().iter().map(|&k| self.low_pass_at(i, k)).collect()
    }

    pub fn check(&self, f: &GridField) -> Result<()> {
        if self.grid.same_as(f.grid()) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn block(&self, f: &GridField, j: i32) -> Result<GridField> {
        self.check(f)?;
        if j < -1 || j > self.j_max {
            return Err(Error::BlockOutOfRange { j, j_max: self.j_max });
        }
        Ok(f.multiplier_table(self.window(j)))
    }

    /// All blocks `Δ_{-1} f, …, Δ_{j_max} f` in physical space, one forward transform.
    pub fn all_blocks(&self, f: &GridField) -> Vec<GridField> {
        let c = f.coeffs();
        self.rho
            .iter()
            .map(|w| {
                GridField::from_coeffs(self.grid, c.iter().zip(w).map(|(&c, &w)| c * w).collect())
            })
            .collect()
    }
}

pub fn lp_block(f: &GridField, j: i32, part: &DyadicPartition) -> Result<GridField> {
    part.block(f, j)
}

/// Spatial weight `(1+|x|)^poly · exp((rate + t·[time_coupled]) |x|^δ)`.
///
/// `polynomial(a)` is `p(a)`; `subexponential(l, δ, true)` is `e(l+t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub poly: f64,
    pub rate: f64,
    pub delta: f64,
    pub time_coupled: bool,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self::unit()
    }
}

impl WeightSpec {
    pub fn unit() -> Self {
        Self { poly: 0.0, rate: 0.0, delta: 0.9, time_coupled: false }
    }

    pub fn polynomial(a: f64) -> Self {
        Self { poly: a, ..Self::unit() }
    }

    pub fn subexponential(l: f64, delta: f64, time_coupled: bool) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!("weight exponent δ = {delta} not in (0,1)")));
        }
        Ok(Self { poly: 0.0, rate: l, delta, time_coupled })
    }

    /// Product of two weights; the sub-exponential parts must share δ.
    pub fn times(&self, other: &WeightSpec) -> Self {
        let delta = if self.rate == 0.0 && !self.time_coupled { other.delta } else { self.delta };
        Self {
            poly: self.poly + other.poly,
            rate: self.rate + other.rate,
            delta,
            time_coupled: self.time_coupled || other.time_coupled,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        self.rate == 0.0 && !self.time_coupled
    }

    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let ax = x.abs();
        let mut w = 1.0;
        if self.poly != 0.0 {
            w *= (1.0 + ax).powf(self.poly);
        }
        let r = self.rate + if self.time_coupled { t } else { 0.0 };
        if r != 0.0 {
            w *= (r * ax.powf(self.delta)).exp();
        }
        w
    }

    pub fn table(&self, grid: &Grid, t: f64) -> Vec<f64> {
        (0..grid.n()).map(|i| self.eval(grid.x(i), t)).collect()
    }

    /// Smallest `λ` with `z(x)^{-1} ≤ z(y)^{-1} e^{λ|x-y|^δ}` over all grid pairs.
    pub fn moderation_constant(&self, grid: &Grid, t: f64) -> f64 {
        let logs: Vec<f64> = self.table(grid, t).iter().map(|w| w.ln()).collect();
        let xs = grid.positions();
        let mut lam: f64 = 0.0;
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if i == j {
                    continue;
                }
                let d = (xs[i] - xs[j]).abs().powf(self.delta);
                lam = lam.max((logs[j] - logs[i]) / d);
            }
        }
        lam
    }
}

pub fn weight_eval(w: &WeightSpec, x: f64, t: f64) -> f64 {
    w.eval(x, t)
}

/// `max_i |f(x_i)| / z(x_i)`.
pub fn weighted_sup_norm(f: &GridField, w: &WeightSpec, t: f64) -> f64 {
    let g = f.grid();
    f.values()
        .iter()
        .enumerate()
        .fold(0.0, |m, (i, v)| m.max(v.norm() / w.eval(g.x(i), t)))
}

/// As [`weighted_sup_norm`] but skipping the two cells next to the periodic seam.
pub fn weighted_sup_norm_interior(f: &GridField, w: &WeightSpec, t: f64) -> f64 {
    let g = f.grid();
    let n = g.n();
    f.values()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 0 && *i != n - 1)
        .fold(0.0, |m, (i, v)| m.max(v.norm() / w.eval(g.x(i), t)))
}

/// Real field with independent uniform coefficients on `|k| ≤ kcut`.
pub fn random_band_limited(grid: Grid, kcut: f64, seed: u64) -> GridField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut c = vec![C64::new(0.0, 0.0); grid.n()];
    c[0] = C64::new(rng.random::<f64>() - 0.5, 0.0);
    for m in 1..(grid.n() as i64 / 2) {
        if PI * m as f64 / grid.half_length > kcut {
            break;
        }
        let z = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        c[grid.index_of_mode(m)] += z;
        c[grid.index_of_mode(-m)] += z.conj();
    }
    GridField::from_coeffs(grid, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(l: f64, n: usize) -> Grid {
        Grid::new(l, n).unwrap()
    }

    fn band_limited(g: Grid, kcut: f64, seed: u64) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = vec![C64::new(0.0, 0.0); g.n()];
        for m in 0..(g.n() as i64 / 2) {
            let k = PI * m as f64 / g.half_length;
            if k > kcut {
                break;
            }
            let z = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            c[g.index_of_mode(m)] += z;
            c[g.index_of_mode(-m)] += z.conj();
        }
        GridField::from_coeffs(g, c)
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(PI, 4).is_err());
        assert!(Grid::new(PI, 100).is_err());
        assert!(Grid::new(-1.0, 16).is_err());
        let g = grid(PI, 16);
        assert_eq!(g.mode(8), -8);
        assert_eq!(g.mode(7), 7);
        assert!((g.spacing() - PI / 8.0).abs() < 1e-15);
        assert_eq!(g.x(8), 0.0);
    }

    #[test]
    fn partition_sums_to_one() {
        let g = grid(PI, 256);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        for i in 0..g.n() {
            let s: f64 = p.blocks().map(|j| p.window(j)[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let zero = g.index_of_mode(0);
        assert_eq!(p.window(-1)[zero], 1.0);
        for j in 0..=p.j_max() {
            assert_eq!(p.window(j)[zero], 0.0);
        }
    }

    #[test]
    fn partition_self_similar() {
        let g = grid(PI, 256);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        assert!((p.rho_at(3, 8.0 * 1.5) - p.rho_at(0, 1.5)).abs() < 1e-15);
        for &r in &[0.8, 1.0, 1.2, 2.0, 2.5] {
            assert!((p.rho_at(2, 4.0 * r) - p.rho_at(0, r)).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_supports() {
        let g = grid(8.0 * PI, 1024);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        for (i, &k) in g.wavenumbers().iter().enumerate() {
            let k = k.abs();
            if k > 4.0 / 3.0 {
                assert_eq!(p.window(-1)[i], 0.0);
            }
            for j in 0..=p.j_max() {
                let s = 2f64.powi(j);
                if k < 0.75 * s || k > 8.0 / 3.0 * s {
                    assert!(p.window(j)[i].abs() < 1e-15, "j={j} k={k}");
                }
            }
        }
    }

    #[test]
    fn coarse_grid_rejected() {
        let g = grid(4.0 * PI, 8);
        assert!(matches!(make_dyadic_partition(&g, 1.0), Err(Error::GridTooCoarse { .. })));
        let g = grid(PI, 256);
        assert!(make_dyadic_partition(&g, 64.0).is_err());
    }

    #[test]
    fn single_mode_block() {
        let g = grid(PI, 256);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let f = GridField::mode(g, 6);
        let d2 = lp_block(&f, 2, &p).unwrap();
        let d4 = lp_block(&f, 4, &p).unwrap();
        assert!((&d2 - &f).sup_norm() < 1e-14);
        assert!(d4.sup_norm() < 1e-14);
        assert!(lp_block(&f, p.j_max() + 1, &p).is_err());
        assert!(lp_block(&f, -2, &p).is_err());
    }

    #[test]
    fn constant_lives_in_low_block() {
        let g = grid(PI, 64);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let f = GridField::constant(g, 2.5);
        let b = p.all_blocks(&f);
        assert!((&b[0] - &f).sup_norm() < 1e-14);
        for blk in &b[1..] {
            assert!(blk.sup_norm() < 1e-14);
        }
    }

    #[test]
    fn blocks_reconstruct() {
        let g = grid(4.0 * PI, 1024);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let f = band_limited(g, 60.0, 3);
        let mut s = GridField::zeros(g);
        for b in p.all_blocks(&f) {
            s = &s + &b;
        }
        assert!((&s - &f).sup_norm() < 1e-10);
    }

    #[test]
    fn far_blocks_are_orthogonal() {
        let g = grid(4.0 * PI, 512);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let f = band_limited(g, 60.0, 5);
        for i in -1..=p.j_max() {
            for j in -1..=p.j_max() {
                if (i - j).abs() >= 2 {
                    let dd = p.block(&p.block(&f, j).unwrap(), i).unwrap();
                    assert!(dd.sup_norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn derivative_of_sine() {
        let g = grid(PI, 64);
        let f = GridField::from_fn(g, f64::sin);
        let d = f.derivative(1);
        for i in 0..g.n() {
            assert!((d.value_at(i) - g.x(i).cos()).abs() < 1e-12);
        }
        let c = GridField::constant(g, 3.0).derivative(1);
        assert!(c.sup_norm() < 1e-13);
        let d2 = f.derivative(2);
        assert!((&d2 + &f).sup_norm() < 1e-12);
    }

    #[test]
    fn derivative_kills_nyquist_for_odd_orders() {
        let g = grid(PI, 16);
        let f = GridField::mode(g, -8);
        assert!(f.derivative(1).sup_norm() < 1e-14);
        assert!(f.derivative(2).sup_norm() > 1.0);
    }

    #[test]
    fn bernstein_ratio_single_modes() {
        let g = grid(PI, 4096);
        let p = make_dyadic_partition(&g, 1.0).unwrap();
        let w = WeightSpec::polynomial(0.5);
        for j in 2..p.j_max() - 1 {
            let m = (1.4 * 2f64.powi(j)).round() as i64;
            let f = GridField::mode(g, m);
            let b = p.block(&f, j).unwrap();
            let r = weighted_sup_norm(&b.derivative(1), &w, 0.0) / weighted_sup_norm(&b, &w, 0.0);
            let ratio = r / 2f64.powi(j);
            assert!((1.0..=1.6).contains(&ratio), "j={j} ratio={ratio}");
        }
    }

    #[test]
    fn weights() {
        assert_eq!(WeightSpec::polynomial(2.0).eval(3.0, 0.0), 16.0);
        let s = WeightSpec::subexponential(0.0, 0.9, false).unwrap();
        assert_eq!(s.eval(7.3, 0.0), 1.0);
        let s = WeightSpec::subexponential(1.0, 0.5, false).unwrap();
        assert!((s.eval(4.0, 0.0) - 2f64.exp()).abs() < 1e-12);
        let tc = WeightSpec::subexponential(0.0, 0.5, true).unwrap();
        assert!((tc.eval(4.0, 0.5) - 1f64.exp()).abs() < 1e-12);
        assert!(WeightSpec::subexponential(1.0, 1.0, false).is_err());
    }

    #[test]
    fn weighted_sup_examples() {
        let g = grid(4.0, 64);
        let unit = WeightSpec::unit();
        assert!((weighted_sup_norm(&GridField::constant(g, -2.0), &unit, 0.0) - 2.0).abs() < 1e-15);
        let w = WeightSpec::polynomial(0.7);
        let f = GridField::from_fn(g, |x| (1.0 + x.abs()).powf(0.7));
        assert!((weighted_sup_norm(&f, &w, 0.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn weighted_sup_matches_scan() {
        let g = grid(8.0, 128);
        let f = band_limited(g, 10.0, 11);
        let w = WeightSpec::subexponential(0.3, 0.9, true).unwrap();
        let mut scan: f64 = 0.0;
        for i in 0..g.n() {
            scan = scan.max(f.values()[i].norm() / w.eval(g.x(i), 0.4));
        }
        assert_eq!(weighted_sup_norm(&f, &w, 0.4), scan);
    }

    #[test]
    fn moderation_constant_finite() {
        let g = grid(8.0, 64);
        let w = WeightSpec::subexponential(0.5, 0.9, false).unwrap();
        let lam = w.moderation_constant(&g, 0.0);
        assert!(lam.is_finite() && lam > 0.0 && lam <= 0.5 + 1e-12);
        let xs = g.positions();
        for &x in &xs {
            for &y in &xs {
                let lhs = 1.0 / w.eval(x, 0.0);
                let rhs = (lam * (x - y).abs().powf(0.9)).exp() / w.eval(y, 0.0);
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(3.0, 32);
        let f = band_limited(g, 5.0, 1);
        let path = dir.path().join("f.bin");
        f.save(&path, serde_json::json!({"name": "f"})).unwrap();
        let back = GridField::read_binary(&path).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid(), f.grid());
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn interpolation_matches_samples_and_modes() {
        let g = grid(PI, 64);
        let f = GridField::from_fn(g, |x| (2.0 * x).sin() + 0.5 * x.cos());
        assert!((f.interpolate(g.x(5)) - f.value_at(5)).abs() < 1e-12);
        assert!((f.interpolate(0.123) - ((0.246f64).sin() + 0.5 * 0.123f64.cos())).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dft_round_trip(seed in any::<u64>(), logn in 3u32..13) {
            let g = grid(2.0, 1 << logn);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<C64> = (0..g.n()).map(|_| C64::new(rng.random(), rng.random())).collect();
            let back = inverse_dft(&forward_dft(&v));
            let err = v.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
            prop_assert!(err < 1e-12);
        }

        #[test]
        fn partition_of_unity_any_grid(logn in 5u32..14, l in 1.0f64..40.0, k0 in 0.3f64..2.0) {
            let g = grid(l, 1 << logn);
            if let Ok(p) = make_dyadic_partition(&g, k0) {
                for i in 0..g.n() {
                    let s: f64 = p.blocks().map(|j| p.window(j)[i]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn real_fields_have_symmetric_coeffs(seed in any::<u64>()) {
            let g = grid(5.0, 64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
            let f = GridField::from_real(g, &v);
            let c = f.coeffs();
            for m in 1..32i64 {
                let a = c[g.index_of_mode(m)];
                let b = c[g.index_of_mode(-m)];
                prop_assert!((a - b.conj()).norm() < 1e-14);
            }
        }
    }
}
