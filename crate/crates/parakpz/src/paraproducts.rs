//! Bony decomposition, the time-smoothed paraproduct `≺≺` and the
//! commutators used by the solver.
//!
//! Everything is evaluated in physical space from the dyadic blocks, so
//! `f≺g + f⊙g + g≺f = f·g` holds to rounding error on the grid even when
//! the product is aliased.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::function_spaces::{locate, TimeField};
use crate::spectral_core::{inverse_dft, DyadicPartition, GridField, C64};

/// Physical-space blocks `Δ_{-1} f, …, Δ_{j_max} f`.
#[derive(Debug, Clone)]
pub struct Blocks {
    grid: crate::spectral_core::Grid,
    deltas: Vec<Vec<C64>>,
}

impl Blocks {
    pub fn new(f: &GridField, part: &DyadicPartition) -> Self {
        let deltas = part.all_blocks(f).into_iter().map(GridField::into_values).collect();
        Self { grid: *f.grid(), deltas }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// `Δ_j f` for `j ≥ -1`.
    pub fn delta(&self, j: i32) -> &[C64] {
        &self.deltas[(j + 1) as usize]
    }
}

/// `Σ_i S_{i-1} f · Δ_i g` from precomputed blocks.
pub fn para_lower_blocks(f: &Blocks, g: &Blocks) -> GridField {
    let n = f.grid.n();
    let mut acc = vec![C64::new(0.0, 0.0); n];
    let mut out = vec![C64::new(0.0, 0.0); n];
    for ii in 0..g.len() {
        if ii >= 2 {
            for (a, d) in acc.iter_mut().zip(&f.deltas[ii - 2]) {
                *a += d;
            }
            for ((o, a), d) in out.iter_mut().zip(&acc).zip(&g.deltas[ii]) {
                *o += a * d;
            }
        }
    }
    GridField::from_values(f.grid, out)
}

/// `Σ_{|i-j| ≤ 1} Δ_i f · Δ_j g` from precomputed blocks.
pub fn resonant_blocks(f: &Blocks, g: &Blocks) -> GridField {
    let n = f.grid.n();
    let nb = f.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for ii in 0..nb {
        let lo = ii.saturating_sub(1);
        let hi = (ii + 1).min(nb - 1);
        for jj in lo..=hi {
            for ((o, a), b) in out.iter_mut().zip(&f.deltas[ii]).zip(&g.deltas[jj]) {
                *o += a * b;
            }
        }
    }
    GridField::from_values(f.grid, out)
}

/// `f ≺ g`.
pub fn para_lower(f: &GridField, g: &GridField, part: &DyadicPartition) -> Result<GridField> {
    f.check_grid(g)?;
    part.check(f)?;
    Ok(para_lower_blocks(&Blocks::new(f, part), &Blocks::new(g, part)))
}

/// `f ⊙ g`.
pub fn resonant(f: &GridField, g: &GridField, part: &DyadicPartition) -> Result<GridField> {
    f.check_grid(g)?;
    part.check(f)?;
    Ok(resonant_blocks(&Blocks::new(f, part), &Blocks::new(g, part)))
}

/// `f ≻ g = g ≺ f`.
pub fn para_upper(f: &GridField, g: &GridField, part: &DyadicPartition) -> Result<GridField> {
    para_lower(g, f, part)
}

/// `C(f,g,h) = (f≺g)⊙h − f·(g⊙h)`.
pub fn commutator_c(f: &GridField, g: &GridField, h: &GridField, part: &DyadicPartition) -> Result<GridField> {
    f.check_grid(g)?;
    f.check_grid(h)?;
    let lg = para_lower(f, g, part)?;
    let a = resonant(&lg, h, part)?;
    let b = resonant(g, h, part)?;
    Ok(&a - &(f * &b))
}

/// Non-predictive time averaging kernel `φ(u) ∝ exp(-1/(u(1-u)))` on `(0,1)`,
/// tabulated on a trapezoid rule whose weights sum to one.
#[derive(Debug, Clone)]
pub struct TimeSmoother {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
}

impl Default for TimeSmoother {
    fn default() -> Self {
        Self::new(32)
    }
}

fn bump(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        (-1.0 / (u * (1.0 - u))).exp()
    }
}

impl TimeSmoother {
    pub fn new(intervals: usize) -> Self {
        assert!(intervals >= 4);
        let nodes: Vec<f64> = (0..=intervals).map(|q| q as f64 / intervals as f64).collect();
        let raw: Vec<f64> = nodes.iter().map(|&u| bump(u)).collect();
        let s: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / s).collect();
        // Normalizer of the continuous density, from a fine midpoint rule.
        let fine = 1 << 16;
        let norm = (0..fine).map(|q| bump((q as f64 + 0.5) / fine as f64)).sum::<f64>() / fine as f64;
        Self { nodes, weights, norm }
    }

    /// Normalized density `φ(u)`.
    pub fn density(&self, u: f64) -> f64 {
        bump(u) / self.norm
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Time scale `2^{-2i}` of level `i`.
    pub fn scale(level: i32) -> f64 {
        4f64.powi(-level)
    }

    /// Sparse frame weights with `Q_i f(t_k) = Σ w_l f(t_l)`; only frames `l ≤ k` appear.
    pub fn frame_weights(&self, mesh: &[f64], k: usize, level: i32) -> Vec<(usize, f64)> {
        let t = mesh[k];
        let t0 = mesh[0];
        let sc = Self::scale(level);
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut push = |idx: usize, w: f64| {
            if w == 0.0 {
                return;
            }
            match out.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 += w,
                None => out.push((idx, w)),
            }
        };
        for (&u, &w) in self.nodes.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let s = (t - sc * u).max(t0);
            let (l, th) = locate(&mesh[..=k], s);
            if th == 0.0 {
                push(l, w);
            } else {
                push(l, w * (1.0 - th));
                push(l + 1, w * th);
            }
        }
        out
    }

    /// `Q_i f` on the mesh of `f`.
    pub fn smooth(&self, f: &TimeField, level: i32) -> TimeField {
        let mesh = f.mesh().to_vec();
        let frames = (0..f.len())
            .into_par_iter()
            .map(|k| {
                let ws = self.frame_weights(&mesh, k, level);
                let mut acc = f.frame(ws[0].0).scale(ws[0].1);
                for &(l, w) in &ws[1..] {
                    acc = acc.axpy(w, f.frame(l));
                }
                acc
            })
            .collect();
        let mut out = TimeField::new(mesh, frames).expect("same mesh");
        out.blowup = f.blowup;
        out.weight = f.weight;
        out
    }
}

/// Coefficients of every frame, computed once.
pub fn frame_coeffs(f: &TimeField) -> Vec<Vec<C64>> {
    f.frames().par_iter().map(|fr| fr.coeffs().to_vec()).collect()
}

/// Physical values of `S_{i-1} Q_i (∂^d f)(t_k)` for a given level `i ≥ 1`.
pub fn smoothed_low(
    fc: &[Vec<C64>],
    mesh: &[f64],
    k: usize,
    level: i32,
    deriv: u32,
    sm: &TimeSmoother,
    part: &DyadicPartition,
) -> Vec<C64> {
    let grid = part.grid();
    let n = grid.n();
    let ws = sm.frame_weights(mesh, k, level);
    let mut c = vec![C64::new(0.0, 0.0); n];
    for &(l, w) in &ws {
        for (a, b) in c.iter_mut().zip(&fc[l]) {
            *a += b * w;
        }
    }
    let ny = grid.nyquist_index();
    for (i, a) in c.iter_mut().enumerate() {
        let k = grid.wavenumber(i);
        let mut m = C64::new(part.low_pass_at(level, k), 0.0);
        if deriv > 0 {
            if deriv % 2 == 1 && i == ny {
                m = C64::new(0.0, 0.0);
            } else {
                m *= C64::new(0.0, k).powu(deriv);
            }
        }
        *a *= m;
    }
    inverse_dft(&c)
}

/// `(∂^d f ≺≺ g)(t_k)` given coefficients of `f` and blocks of `g(t_k)`.
pub fn para_modified_frame(
    fc: &[Vec<C64>],
    mesh: &[f64],
    k: usize,
    deriv: u32,
    g: &Blocks,
    sm: &TimeSmoother,
    part: &DyadicPartition,
) -> GridField {
    let n = part.grid().n();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for i in 1..=part.j_max() {
        let low = smoothed_low(fc, mesh, k, i, deriv, sm, part);
        for ((o, a), b) in out.iter_mut().zip(&low).zip(g.delta(i)) {
            *o += a * b;
        }
    }
    GridField::from_values(*part.grid(), out)
}

/// `f ≺≺ g = Σ_i S_{i-1}(Q_i f) Δ_i g`, frame by frame.
pub fn para_modified(f: &TimeField, g: &TimeField, sm: &TimeSmoother, part: &DyadicPartition) -> Result<TimeField> {
    f.check_mesh(g)?;
    part.check(f.frame(0))?;
    let fc = frame_coeffs(f);
    let mesh = f.mesh();
    let frames = (0..f.len())
        .into_par_iter()
        .map(|k| {
            let gb = Blocks::new(g.frame(k), part);
            para_modified_frame(&fc, mesh, k, 0, &gb, sm, part)
        })
        .collect();
    TimeField::new(mesh.to_vec(), frames)
}

/// `(f≺≺g − f≺g, 𝓛(f≺≺g) − f≺≺(𝓛g))` with the discrete heat operator.
pub fn commutator_time(
    f: &TimeField,
    g: &TimeField,
    sm: &TimeSmoother,
    part: &DyadicPartition,
) -> Result<(TimeField, TimeField)> {
    f.check_mesh(g)?;
    let pm = para_modified(f, g, sm, part)?;
    let plain = f.zip_frames(g, |a, b| para_lower(a, b, part).expect("shared grid"));
    let c2 = pm.sub(&plain);
    let lg = g.heat_operator();
    let c3 = pm.heat_operator().sub(&para_modified(f, &lg, sm, part)?);
    Ok((c2, c3))
}

/// `C₂(f, g) = f≺≺g − f≺g`.
pub fn commutator_c2(f: &TimeField, g: &TimeField, sm: &TimeSmoother, part: &DyadicPartition) -> Result<TimeField> {
    Ok(commutator_time(f, g, sm, part)?.0)
}

/// `C₄(f, Y) = f≺≺∂Y − f≺∂Y`: the `C₂` commutator applied to a derivative.
pub fn commutator_c4(f: &TimeField, y: &TimeField, sm: &TimeSmoother, part: &DyadicPartition) -> Result<TimeField> {
    let dy = y.derivative(1);
    let pm = para_modified(f, &dy, sm, part)?;
    let plain = f.zip_frames(&dy, |a, b| para_lower(a, b, part).expect("shared grid"));
    Ok(pm.sub(&plain))
}

pub fn check_same_mesh(a: &TimeField, b: &TimeField) -> Result<()> {
    if a.mesh() != b.mesh() {
        Err(Error::MeshMismatch)
    } else {
        Ok(())
    }
}
