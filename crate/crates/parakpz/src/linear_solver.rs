//! Windowed fixed-point solver for linear paracontrolled equations
//!
//! ```text
//! 𝓛u = 𝓛G + R(u) + F(u)≺X + X⊙∂u,   u(0) = u0,
//! ```
//!
//! and the concrete equations built on it: the rough heat equation for the
//! factor `w^P`, its backward (translated, rescaled) version, the remainder
//! equation for `h♯`, the Kolmogorov backward equation and the equation for
//! `Y^R`.
//!
//! The map iterated on a window `[T_ℓ, T_r]` is
//! `u ↦ G + P_{·−T_ℓ}(u(T_ℓ) − G(T_ℓ)) + V_{T_ℓ}(R(u) + F(u)≺X + X⊙∂u)`,
//! with the Duhamel integral taken by the piecewise-linear exponential
//! integrator. Window lengths adapt to the measured contraction factor.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhanced_noise::{fingerprint, rescale_translate, EnhancedData};
use crate::error::{Error, Result};
use crate::function_spaces::{blowup_exponents, ParaFunction, TimeField};
use crate::heat_calculus::{heat_coeffs, integrate_coeffs, QuadratureRule, StepCache};
use crate::paraproducts::{
    para_lower_blocks, para_modified, para_modified_frame, resonant_blocks, Blocks, TimeSmoother,
};
use crate::spectral_core::{DyadicPartition, Grid, GridField, C64};

/// A functional evaluated on the frames of a window. The range holds the
/// global frame indices of the window, so implementations can pick the
/// matching frames of their coefficients.
pub type Functional<'a> = Box<dyn Fn(&TimeField, Range<usize>) -> Result<TimeField> + Sync + 'a>;

/// Regularity bookkeeping of a linear problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub alpha: f64,
    pub eps: f64,
    pub a: f64,
    pub zeta: f64,
    pub b: f64,
    pub delta: f64,
    /// Regularity of the initial condition.
    pub beta: f64,
}

impl Default for Exponents {
    fn default() -> Self {
        Self { alpha: 0.45, eps: 0.32, a: 0.03, zeta: 0.055, b: 0.06, delta: 0.9, beta: 1.9 }
    }
}

impl Exponents {
    pub fn beta_prime(&self) -> f64 {
        blowup_exponents(self.alpha, self.beta).0
    }

    pub fn beta_hat(&self) -> f64 {
        blowup_exponents(self.alpha, self.beta).1
    }

    /// Verifies every inequality required of the exponents. Returns the
    /// evaluated derivation on success and lists all violations on failure.
    pub fn check(&self) -> Result<Vec<String>> {
        let (lines, bad) = self.audit();
        if bad.is_empty() {
            Ok(lines)
        } else {
            Err(Error::InvalidParameter(format!("exponent constraints violated: {}", bad.join("; "))))
        }
    }

    /// Every constraint as text, split into satisfied and violated.
    pub fn audit(&self) -> (Vec<String>, Vec<String>) {
        let Exponents { alpha, eps, a, zeta, b, delta, beta } = *self;
        let mut lines = Vec::new();
        let mut bad = Vec::new();
        let mut req = |ok: bool, text: String| {
            if ok {
                lines.push(text);
            } else {
                bad.push(text);
            }
        };
        req(a > 0.0, format!("a = {a} > 0"));
        req(delta > 0.0 && delta < 1.0, format!("δ = {delta} ∈ (0, 1)"));
        req(zeta >= 0.0, format!("ζ = {zeta} ≥ 0"));
        let margin = eps - 6.0 * a / delta - 2.0 * zeta;
        req(margin > 0.0, format!("ε − 6a/δ − 2ζ = {margin:.4} > 0"));
        req(b <= 2.0 * a + 1e-15, format!("b = {b} ≤ 2a = {}", 2.0 * a));
        let lo = 2.0 * alpha - 1.0;
        let hi = 2.0 * alpha + 1.0;
        req(beta > lo && beta <= hi + 1e-15, format!("β = {beta} ∈ ({lo:.3}, {hi:.3}]"));
        let e_lo = 6.0 * a / delta + 1.0 - 2.0 * alpha;
        let e_hi = 3.0 * alpha - 1.0;
        req(eps > e_lo && eps < e_hi, format!("ε = {eps} ∈ ({e_lo:.4}, {e_hi:.4})"));
        let (bp, bh) = blowup_exponents(alpha, beta);
        req((0.0..1.0).contains(&bp), format!("β′ = {bp:.4} ∈ [0, 1)"));
        req((0.0..1.0).contains(&bh), format!("β̂ = {bh:.4} ∈ [0, 1)"));
        (lines, bad)
    }
}

/// How `X⊙∂u` is evaluated inside the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProductEvaluation {
    /// Through the four-term paracontrolled decomposition.
    Paracontrolled,
    /// As the plain resonant product on the grid. Agrees with the
    /// decomposition to rounding; cheaper for bulk solves.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative distance between successive iterates at which a window is accepted.
    pub tol: f64,
    pub max_iterations: usize,
    /// Smallest admissible window, in time steps.
    pub min_window_steps: usize,
    /// Longest window tried, in time steps (`None`: the whole horizon).
    pub max_window_steps: Option<usize>,
    /// Largest accepted value of `d_{k+2}/d_k`.
    pub contraction_limit: f64,
    pub product: ProductEvaluation,
    /// Base wavenumber of the dyadic partition.
    pub k0: f64,
    pub exponents: Exponents,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 400,
            min_window_steps: 4,
            max_window_steps: None,
            contraction_limit: 0.5,
            product: ProductEvaluation::Paracontrolled,
            k0: 1.0,
            exponents: Exponents::default(),
        }
    }
}

impl SolverOptions {
    pub fn direct(mut self) -> Self {
        self.product = ProductEvaluation::Direct;
        self
    }
}

/// `𝓛u = 𝓛G + R(u) + F(u)≺X + X⊙∂u`, `u(0) = u0`, on the mesh of the data.
pub struct LinearProblem<'a> {
    pub r: Functional<'a>,
    /// `None` means `F ≡ 0`.
    pub f: Option<Functional<'a>>,
    /// A term entering through `𝓛G`; integrated exactly rather than as a forcing.
    pub lifted: Option<TimeField>,
    /// Norm of the extra parameter `ν` of `R`, recorded in the report.
    pub nu_norm: f64,
    pub u0: GridField,
    /// Final time; must be a mesh node. `None`: the end of the data mesh.
    pub t_end: Option<f64>,
    pub options: SolverOptions,
}

impl<'a> LinearProblem<'a> {
    pub fn new(u0: GridField, r: Functional<'a>) -> Self {
        Self { r, f: None, lifted: None, nu_norm: 0.0, u0, t_end: None, options: SolverOptions::default() }
    }

    pub fn with_derivative(mut self, f: Functional<'a>) -> Self {
        self.f = Some(f);
        self
    }

    pub fn with_lifted(mut self, g: TimeField) -> Self {
        self.lifted = Some(g);
        self
    }

    pub fn with_nu_norm(mut self, n: f64) -> Self {
        self.nu_norm = n;
        self
    }

    pub fn until(mut self, t: f64) -> Self {
        self.t_end = Some(t);
        self
    }

    pub fn with_options(mut self, o: SolverOptions) -> Self {
        self.options = o;
        self
    }
}

/// `R ≡ 0`.
pub fn zero_functional<'a>() -> Functional<'a> {
    Box::new(|u: &TimeField, _| Ok(TimeField::zeros(*u.grid(), u.mesh().to_vec())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowRecord {
    pub t_left: f64,
    pub t_right: f64,
    pub iterations: usize,
    /// Largest `d_{k+2}/d_k` observed on the window.
    pub contraction: f64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedWindow {
    pub t_left: f64,
    pub t_right: f64,
    pub factor: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub windows: Vec<WindowRecord>,
    pub rejected: Vec<RejectedWindow>,
    pub reconstruction_residual: f64,
    pub sup_norm: f64,
    pub initial_norm: f64,
    /// `sup |X|` over the horizon.
    pub data_norm: f64,
    pub nu_norm: f64,
    /// `log(1 + sup|u|) − log(1 + sup|u0|)`, to compare with the exponential a-priori bound.
    pub log_growth: f64,
    pub exponent_checks: Vec<String>,
}

impl SolveReport {
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.windows.iter().map(|w| w.t_left).collect();
        if let Some(w) = self.windows.last() {
            b.push(w.t_right);
        }
        b
    }

    pub fn max_contraction(&self) -> f64 {
        self.windows.iter().fold(0.0, |m, w| m.max(w.contraction))
    }

    pub fn total_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).sum()
    }
}

/// The four pieces of `X⊙∂u` for paracontrolled `u`.
#[derive(Debug, Clone)]
pub struct ProductTerms {
    /// `u′·(X⊙∂Y^r)`.
    pub resonant_part: GridField,
    /// `C(u′, ∂Y^r, X)`.
    pub commutator: GridField,
    /// `X⊙C₂(u′, ∂Y^r)`.
    pub time_commutator: GridField,
    /// `X⊙ũ♯` with `ũ♯ = ∂u − u′≺≺∂Y^r`.
    pub remainder: GridField,
}

impl ProductTerms {
    pub fn sum(&self) -> GridField {
        &(&self.resonant_part + &self.commutator) + &(&self.time_commutator + &self.remainder)
    }
}

/// One frame of the decomposition. `pm` is `u′≺≺∂Y^r` at this frame.
fn product_terms_frame(
    up: &GridField,
    du: &GridField,
    pm: &GridField,
    dyr: &Blocks,
    resonant_r: &GridField,
    xb: &Blocks,
    part: &DyadicPartition,
) -> ProductTerms {
    let plain = para_lower_blocks(&Blocks::new(up, part), dyr).real_part();
    let resonant_part = up * resonant_r;
    let commutator = &resonant_blocks(&Blocks::new(&plain, part), xb).real_part() - &resonant_part;
    let c2 = pm - &plain;
    let time_commutator = resonant_blocks(xb, &Blocks::new(&c2, part)).real_part();
    let remainder = resonant_blocks(xb, &Blocks::new(&(du - pm), part)).real_part();
    ProductTerms { resonant_part, commutator, time_commutator, remainder }
}

/// `X⊙∂u` for paracontrolled `u`, frame by frame, as the sum
/// `u′·(X⊙∂Y^r) + C(u′,∂Y^r,X) + X⊙C₂(u′,∂Y^r) + X⊙ũ♯`. The factor `u′`
/// multiplies the stored resonant product in full.
pub fn paracontrolled_product(
    x: &TimeField,
    u: &ParaFunction,
    data: &EnhancedData,
    sm: &TimeSmoother,
    part: &DyadicPartition,
) -> Result<TimeField> {
    Ok(paracontrolled_product_terms(x, u, data, sm, part)?.into_iter().map(|t| t.sum()).collect::<Vec<_>>())
        .and_then(|frames| TimeField::new(x.mesh().to_vec(), frames))
}

/// The individual terms of [`paracontrolled_product`] per frame.
pub fn paracontrolled_product_terms(
    x: &TimeField,
    u: &ParaFunction,
    data: &EnhancedData,
    sm: &TimeSmoother,
    part: &DyadicPartition,
) -> Result<Vec<ProductTerms>> {
    if u.controller != data.controller() {
        return Err(Error::ControllerMismatch);
    }
    if fingerprint(x) != fingerprint(&data.x) {
        return Err(Error::InvalidParameter("X must be the first-order tree of the supplied data".into()));
    }
    u.u.check_mesh(x)?;
    u.u_prime.check_mesh(x)?;
    part.check(x.frame(0))?;
    let fc: Vec<Vec<C64>> = u.u_prime.frames().par_iter().map(|f| f.coeffs().to_vec()).collect();
    let dyr = data.x_r();
    let mesh = x.mesh();
    Ok((0..x.len())
        .into_par_iter()
        .map(|k| {
            let db = Blocks::new(dyr.frame(k), part);
            let pm = para_modified_frame(&fc, mesh, k, 0, &db, sm, part).real_part();
            let du = u.u.frame(k).derivative(1).real_part();
            let xb = Blocks::new(x.frame(k), part);
            product_terms_frame(u.u_prime.frame(k), &du, &pm, &db, data.resonant_r.frame(k), &xb, part)
        })
        .collect())
}

/// Frame index of `t` on `mesh`, if it is a node.
pub fn node_index(mesh: &[f64], t: f64) -> Option<usize> {
    let scale = mesh.last().map(|m| m.abs().max(1.0)).unwrap_or(1.0);
    mesh.iter().position(|&s| (s - t).abs() <= 1e-9 * scale)
}

fn rel_distance(a: &[GridField], b: &[GridField]) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        num = num.max((x - y).sup_norm());
        den = den.max(x.sup_norm());
    }
    if num == 0.0 {
        0.0
    } else {
        num / den.max(1e-300)
    }
}

enum Outcome {
    Accepted { frames: Vec<GridField>, up: Vec<GridField>, record: WindowRecord },
    Rejected(RejectedWindow),
}

struct Context<'p, 'a> {
    p: &'p LinearProblem<'a>,
    grid: Grid,
    mesh: Vec<f64>,
    part: DyadicPartition,
    sm: TimeSmoother,
    xb: Vec<Blocks>,
    /// `∂Y^r` blocks and `∂Y^r⊙X`, needed for the decomposition.
    ctrl: Option<(Vec<Blocks>, Vec<GridField>)>,
}

impl Context<'_, '_> {
    fn run_window(&self, l: usize, r: usize, u_l: &GridField, up_hist: &mut Vec<Vec<C64>>) -> Result<Outcome> {
        let opts = &self.p.options;
        let wmesh = &self.mesh[l..=r];
        let range = l..r + 1;
        let m = r - l + 1;
        // Free part: G + P(u(T_ℓ) − G(T_ℓ)).
        let start = match &self.p.lifted {
            Some(g) => u_l - g.frame(l),
            None => u_l.clone(),
        };
        let sc = start.coeffs().to_vec();
        let base: Vec<GridField> = (0..m)
            .into_par_iter()
            .map(|k| {
                let f = GridField::from_coeffs(self.grid, heat_coeffs(&sc, &self.grid, wmesh[k] - wmesh[0])).real_part();
                match &self.p.lifted {
                    Some(g) => &f + g.frame(l + k),
                    None => f,
                }
            })
            .collect();
        let zero = vec![C64::new(0.0, 0.0); self.grid.n()];
        let mut cache = StepCache::new(self.grid, QuadratureRule::PiecewiseLinear);
        let mut cur = vec![u_l.clone(); m];
        let mut dists: Vec<f64> = Vec::new();
        let mut worst: f64 = 0.0;
        for it in 1..=opts.max_iterations {
            let ut = TimeField::new(wmesh.to_vec(), cur.clone())?;
            let rf = (self.p.r)(&ut, range.clone())?;
            if rf.len() != m {
                return Err(Error::MeshMismatch);
            }
            let fu = match &self.p.f {
                Some(f) => {
                    let v = f(&ut, range.clone())?;
                    if v.len() != m {
                        return Err(Error::MeshMismatch);
                    }
                    Some(v)
                }
                None => None,
            };
            let decomposed = matches!(opts.product, ProductEvaluation::Paracontrolled) && fu.is_some();
            if decomposed {
                up_hist.truncate(l);
                let fu = fu.as_ref().unwrap();
                up_hist.extend(fu.frames().par_iter().map(|f| f.coeffs().to_vec()).collect::<Vec<_>>());
            }
            let forcing: Vec<Vec<C64>> = (0..m)
                .into_par_iter()
                .map(|k| {
                    let g = l + k;
                    let xb = &self.xb[g];
                    let du = cur[k].derivative(1).real_part();
                    let mut total = rf.frame(k).clone();
                    let res = match (&fu, decomposed) {
                        (Some(fu), true) => {
                            let (dyr, rr) = self.ctrl.as_ref().expect("controller data");
                            let pm = para_modified_frame(up_hist, &self.mesh, g, 0, &dyr[g], &self.sm, &self.part)
                                .real_part();
                            product_terms_frame(fu.frame(k), &du, &pm, &dyr[g], &rr[g], xb, &self.part).sum()
                        }
                        _ => resonant_blocks(xb, &Blocks::new(&du, &self.part)).real_part(),
                    };
                    total = &total + &res;
                    if let Some(fu) = &fu {
                        total = &total + &para_lower_blocks(&Blocks::new(fu.frame(k), &self.part), xb).real_part();
                    }
                    total.coeffs().to_vec()
                })
                .collect();
            let vc = integrate_coeffs(&zero, &forcing, wmesh, &mut cache);
            let next: Vec<GridField> = vc
                .into_par_iter()
                .zip(base.par_iter())
                .map(|(c, b)| b + &GridField::from_coeffs(self.grid, c).real_part())
                .collect();
            if next.iter().any(|f| !f.is_finite()) {
                return Err(Error::NonFinite(format!("iterate on [{}, {}]", wmesh[0], wmesh[m - 1])));
            }
            let d = rel_distance(&next, &cur);
            cur = next;
            dists.push(d);
            if dists.len() >= 3 {
                let prev = dists[dists.len() - 3];
                let factor = if d == 0.0 { 0.0 } else { d / prev.max(1e-300) };
                worst = worst.max(factor);
                if factor >= opts.contraction_limit && d > opts.tol {
                    return Ok(Outcome::Rejected(RejectedWindow {
                        t_left: wmesh[0],
                        t_right: wmesh[m - 1],
                        factor,
                        iterations: it,
                    }));
                }
            }
            if d <= opts.tol {
                let ut = TimeField::new(wmesh.to_vec(), cur.clone())?;
                let up = match &self.p.f {
                    Some(f) => f(&ut, range.clone())?.frames().to_vec(),
                    None => vec![GridField::zeros(self.grid); m],
                };
                return Ok(Outcome::Accepted {
                    frames: cur,
                    up,
                    record: WindowRecord {
                        t_left: wmesh[0],
                        t_right: wmesh[m - 1],
                        iterations: it,
                        contraction: worst,
                        distances: dists,
                    },
                });
            }
        }
        let n = dists.len();
        let factor = if n >= 3 { dists[n - 1] / dists[n - 3].max(1e-300) } else { f64::INFINITY };
        Ok(Outcome::Rejected(RejectedWindow {
            t_left: wmesh[0],
            t_right: wmesh[m - 1],
            factor,
            iterations: opts.max_iterations,
        }))
    }
}

/// Solves a linear problem on the data's mesh by windowed Picard iteration.
pub fn solve_linear(p: &LinearProblem, data: &EnhancedData) -> Result<(ParaFunction, SolveReport)> {
    let opts = p.options;
    let exponent_checks = opts.exponents.check()?;
    let grid = *data.grid();
    if !p.u0.grid().same_as(&grid) {
        return Err(Error::GridMismatch);
    }
    if !p.u0.is_finite() {
        return Err(Error::NonFinite("initial condition".into()));
    }
    let full = data.mesh();
    let m_end = match p.t_end {
        Some(t) => node_index(full, t)
            .ok_or_else(|| Error::InvalidParameter(format!("final time {t} is not a mesh node")))?,
        None => full.len() - 1,
    };
    if m_end == 0 {
        return Err(Error::InvalidParameter("horizon must contain at least one step".into()));
    }
    if let Some(g) = &p.lifted {
        if g.len() < m_end + 1 || g.mesh()[..=m_end] != full[..=m_end] {
            return Err(Error::MeshMismatch);
        }
    }
    let mesh = full[..=m_end].to_vec();
    let part = DyadicPartition::new(&grid, opts.k0)?;
    let sm = TimeSmoother::default();
    let xb: Vec<Blocks> = data.x.frames()[..=m_end].par_iter().map(|f| Blocks::new(f, &part)).collect();
    let ctrl = if p.f.is_some() && opts.product == ProductEvaluation::Paracontrolled {
        let dyr = data.x_r();
        let blocks = dyr.frames()[..=m_end].par_iter().map(|f| Blocks::new(f, &part)).collect();
        Some((blocks, data.resonant_r.frames()[..=m_end].to_vec()))
    } else {
        None
    };
    let ctx = Context { p, grid, mesh: mesh.clone(), part, sm, xb, ctrl };

    let u0 = p.u0.real_part();
    let mut frames = vec![u0.clone()];
    let mut up_frames: Vec<GridField> = Vec::new();
    let mut up_hist: Vec<Vec<C64>> = Vec::new();
    let mut windows = Vec::new();
    let mut rejected = Vec::new();
    let max_steps = opts.max_window_steps.unwrap_or(m_end).clamp(1, m_end);
    let mut steps = max_steps;
    let mut l = 0;
    while l < m_end {
        let r = (l + steps).min(m_end);
        let u_l = frames[l].clone();
        match ctx.run_window(l, r, &u_l, &mut up_hist)? {
            Outcome::Accepted { frames: fr, up, record } => {
                let skip = if l == 0 { 0 } else { 1 };
                frames.extend(fr.into_iter().skip(1));
                up_frames.extend(up.into_iter().skip(skip));
                up_hist.truncate(l + skip);
                up_hist.extend(up_frames[l + skip..].iter().map(|f| f.coeffs().to_vec()));
                windows.push(record);
                l = r;
                steps = (steps * 2).min(max_steps);
            }
            Outcome::Rejected(rw) => {
                let len = r - l;
                let factor = rw.factor;
                rejected.push(rw);
                if len / 2 < opts.min_window_steps {
                    return Err(Error::NonContraction { t_left: mesh[l], t_right: mesh[r], factor });
                }
                steps = len / 2;
            }
        }
    }

    let u = TimeField::new(mesh.clone(), frames)?;
    let u_prime = TimeField::new(mesh.clone(), up_frames)?;
    let y_r = data.y_r.slice(0..m_end + 1);
    let u_sharp = if p.f.is_some() {
        u.sub(&para_modified(&u_prime, &y_r, &ctx.sm, &ctx.part)?)
    } else {
        u.clone()
    };
    let para = ParaFunction {
        u,
        u_prime,
        u_sharp,
        controller: data.controller(),
        beta_prime: opts.exponents.beta_prime(),
        beta_hat: opts.exponents.beta_hat(),
    };
    let reconstruction_residual = if p.f.is_some() {
        para.reconstruction_residual(&y_r, &ctx.sm, &ctx.part)?
    } else {
        para.u.sub(&para.u_sharp).sup_norm()
    };
    let sup_norm = para.u.sup_norm();
    let initial_norm = u0.sup_norm();
    let report = SolveReport {
        windows,
        rejected,
        reconstruction_residual,
        sup_norm,
        initial_norm,
        data_norm: data.x.slice(0..m_end + 1).sup_norm(),
        nu_norm: p.nu_norm,
        log_growth: (1.0 + sup_norm).ln() - (1.0 + initial_norm).ln(),
        exponent_checks,
    };
    Ok((para, report))
}

/// Frame-wise product of two time fields restricted to a range of frames.
fn frames_of(f: &TimeField, range: &Range<usize>) -> Vec<GridField> {
    f.frames()[range.clone()].to_vec()
}

fn half_square(f: &TimeField) -> TimeField {
    f.map_frames(|v| v.map_real(|a| 0.5 * a * a))
}

fn frame_para_lower(f: &TimeField, g: &TimeField, part: &DyadicPartition) -> TimeField {
    f.zip_frames(g, |a, b| para_lower_blocks(&Blocks::new(a, part), &Blocks::new(b, part)).real_part())
}

fn frame_resonant(f: &TimeField, g: &TimeField, part: &DyadicPartition) -> TimeField {
    f.zip_frames(g, |a, b| resonant_blocks(&Blocks::new(a, part), &Blocks::new(b, part)).real_part())
}

fn derivative_frames(u: &TimeField) -> Vec<GridField> {
    u.frames().par_iter().map(|f| f.derivative(1).real_part()).collect()
}

fn window_field(u: &TimeField, frames: Vec<GridField>) -> Result<TimeField> {
    TimeField::new(u.mesh().to_vec(), frames)
}

/// Coefficients of the factor equation, precomputed over the horizon.
struct RheCoefficients {
    /// `X≺X^{rLrl} + 𝓛(Y^{rLrLrl}+Y^{LrlRrl}) + X^{lr}X^{rLrl} + ½(X^{rLrl})²`.
    potential: TimeField,
    /// `X^{rLrl}≺X`.
    xr_low_x: TimeField,
    /// `X^{lr} + X^{rLrl}`.
    transport: TimeField,
    xr: TimeField,
    xb: Vec<Blocks>,
}

impl RheCoefficients {
    fn new(data: &EnhancedData, part: &DyadicPartition) -> Self {
        let x = &data.x;
        let xl = data.x_lr();
        let xr = data.x_rlrl();
        let potential = frame_para_lower(x, &xr, part)
            .add(&data.double_forcing(part))
            .add(&xl.mul(&xr).real_part())
            .add(&half_square(&xr));
        let xr_low_x = frame_para_lower(&xr, x, part);
        let transport = xl.add(&xr);
        let xb = x.frames().par_iter().map(|f| Blocks::new(f, part)).collect();
        Self { potential, xr_low_x, transport, xr, xb }
    }
}

/// `(w, u′)` with `u′ = X^{rLrl}w + ∂w`.
fn rhe_derivative<'a>(c: &'a RheCoefficients) -> Functional<'a> {
    Box::new(move |u: &TimeField, range: Range<usize>| {
        let l = range.start;
        let frames = (0..u.len())
            .into_par_iter()
            .map(|k| &(c.xr.frame(l + k) * u.frame(k)) + &u.frame(k).derivative(1).real_part())
            .collect();
        window_field(u, frames)
    })
}

/// `R(w) = [X≺X^{rLrl} + 𝓛(Y^{rLrLrl}+Y^{LrlRrl}) + X^{lr}X^{rLrl} + ½(X^{rLrl})²]w
///        + X≺∂w + (X^{lr}+X^{rLrl})∂w + [(X^{rLrl}≺X)w − (X^{rLrl}w)≺X]`.
/// The last bracket makes `R + F≺X + X⊙∂w` equal the full right-hand side on the grid.
fn rhe_forcing<'a>(c: &'a RheCoefficients, part: &'a DyadicPartition) -> Functional<'a> {
    Box::new(move |u: &TimeField, range: Range<usize>| {
        let l = range.start;
        let frames = (0..u.len())
            .into_par_iter()
            .map(|k| {
                let g = l + k;
                let w = u.frame(k);
                let dw = w.derivative(1).real_part();
                let xb = &c.xb[g];
                let x_low_dw = para_lower_blocks(xb, &Blocks::new(&dw, part)).real_part();
                let xrw_low_x = para_lower_blocks(&Blocks::new(&(c.xr.frame(g) * w), part), xb).real_part();
                let mut out = &(c.potential.frame(g) + c.xr_low_x.frame(g)) * w;
                out = &out + &x_low_dw;
                out = &out + &(c.transport.frame(g) * &dw);
                &out - &xrw_low_x
            })
            .collect();
        window_field(u, frames)
    })
}

/// Factor `w^P` of the rough heat equation: the full solution is
/// `w = w^P·exp(Y + Y^{lr} + Y^{rLrl})`.
pub fn solve_rhe(data: &EnhancedData, w0: &GridField, opts: &SolverOptions) -> Result<(ParaFunction, SolveReport)> {
    solve_rhe_until(data, w0, None, opts)
}

pub fn solve_rhe_until(
    data: &EnhancedData,
    w0: &GridField,
    t_end: Option<f64>,
    opts: &SolverOptions,
) -> Result<(ParaFunction, SolveReport)> {
    let part = DyadicPartition::new(data.grid(), opts.k0)?;
    let c = RheCoefficients::new(data, &part);
    let mut p = LinearProblem::new(w0.clone(), rhe_forcing(&c, &part))
        .with_derivative(rhe_derivative(&c))
        .with_options(*opts);
    p.t_end = t_end;
    solve_linear(&p, data)
}

/// Full solution `w = w^P e^{Y + Y^{lr} + Y^{rLrl}}` on the mesh of `w^P`.
pub fn assemble_she(data: &EnhancedData, w_p: &TimeField) -> TimeField {
    let e = data.exponent().slice(0..w_p.len());
    w_p.zip_frames(&e, |w, a| w.zip_with(a, |p, q| p * q.re.exp()))
}

/// Backward rough heat equation in the time of the rescaled data.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// Factor with every field reversed: frame `k` is backward time `s_k`.
    pub para: ParaFunction,
    /// `exp(Y + Y^{lr} + Y^{rLrl})` of the rescaled data, reversed alike.
    pub factor: TimeField,
    pub report: SolveReport,
}

impl BackwardSolution {
    /// `φ(s) = factor(s)·w^P(s)` on the backward mesh.
    pub fn full(&self) -> TimeField {
        self.para.u.mul(&self.factor).real_part()
    }
}

/// Solves `(∂_s + ½Δ)φ + λ²(ξ_{τ,λ} − c)φ = 0` on `[0, t_end]`, `φ(t_end) = g`,
/// where the noise is read in reversed time from the data translated by `τ`
/// and rescaled by `λ`. The terminal datum is given in full; the factored
/// initial condition `g·e^{−(Y+Y^{lr}+Y^{rLrl})(0)}` is formed internally.
pub fn solve_rhe_backward(
    data: &EnhancedData,
    g: &GridField,
    t_end: f64,
    tau: f64,
    lam: f64,
    opts: &SolverOptions,
) -> Result<BackwardSolution> {
    let ys = rescale_translate(data, tau, lam, opts.k0)?;
    solve_rhe_backward_on(&ys, g, t_end, opts)
}

/// As [`solve_rhe_backward`] on data that is already translated and rescaled.
pub fn solve_rhe_backward_on(ys: &EnhancedData, g: &GridField, t_end: f64, opts: &SolverOptions) -> Result<BackwardSolution> {
    if !g.grid().same_as(ys.grid()) {
        return Err(Error::GridMismatch);
    }
    let idx = node_index(ys.mesh(), t_end)
        .ok_or_else(|| Error::InvalidParameter(format!("backward horizon {t_end} is not a node of the rescaled mesh")))?;
    let expo = ys.exponent().slice(0..idx + 1);
    let w0 = g.zip_with(expo.frame(0), |p, q| p * (-q.re).exp()).real_part();
    let (para, report) = solve_rhe_until(ys, &w0, Some(ys.mesh()[idx]), opts)?;
    let factor = expo.map_frames(|a| a.map_real(f64::exp));
    let para = ParaFunction {
        u: para.u.time_reversed(),
        u_prime: para.u_prime.time_reversed(),
        u_sharp: para.u_sharp.time_reversed(),
        ..para
    };
    Ok(BackwardSolution { para, factor: factor.time_reversed(), report })
}

/// Kolmogorov backward equation `(∂_t + ½Δ + ∂U∂)φ = f` on `[0, τ]`,
/// `φ(τ) = φ0`, with `∂U(t) = (X + X^{lr})(T − t)`. The mesh of `f` must be
/// the data mesh up to `τ`. Returns `φ` on that mesh, with its paracontrolled
/// parts taken in reversed time.
pub fn solve_kolmogorov(
    data: &EnhancedData,
    f: &TimeField,
    phi0: &GridField,
    tau: f64,
    opts: &SolverOptions,
) -> Result<(ParaFunction, SolveReport)> {
    let mesh = data.mesh();
    let t_final = *mesh.last().unwrap();
    let shift = t_final - tau;
    let s_idx = node_index(mesh, shift).ok_or_else(|| Error::InvalidParameter(format!("T − τ = {shift} is not a mesh node")))?;
    let ys = rescale_translate(data, mesh[s_idx], 1.0, opts.k0)?;
    let m = ys.mesh().len();
    if f.len() != m || f.mesh().iter().zip(ys.mesh()).any(|(a, b)| (a - b).abs() > 1e-9 * t_final.max(1.0)) {
        return Err(Error::MeshMismatch);
    }
    if !f.grid().same_as(ys.grid()) || !phi0.grid().same_as(ys.grid()) {
        return Err(Error::GridMismatch);
    }
    let part = DyadicPartition::new(ys.grid(), opts.k0)?;
    let f_rev = f.time_reversed();
    let xl = ys.x_lr();
    let xb: Vec<Blocks> = ys.x.frames().par_iter().map(|v| Blocks::new(v, &part)).collect();
    let r: Functional = Box::new(|u: &TimeField, range: Range<usize>| {
        let l = range.start;
        let frames = (0..u.len())
            .into_par_iter()
            .map(|k| {
                let g = l + k;
                let du = u.frame(k).derivative(1).real_part();
                let x_low = para_lower_blocks(&xb[g], &Blocks::new(&du, &part)).real_part();
                &(&(xl.frame(g) * &du) + &x_low) - f_rev.frame(g)
            })
            .collect();
        window_field(u, frames)
    });
    let fd: Functional = Box::new(|u: &TimeField, _| window_field(u, derivative_frames(u)));
    let nu = f.sup_norm();
    let p = LinearProblem::new(phi0.clone(), r).with_derivative(fd).with_nu_norm(nu).with_options(*opts);
    let (para, report) = solve_linear(&p, &ys)?;
    let mut u = para.u.time_reversed();
    // Reversal maps the mesh onto itself up to rounding; keep the caller's nodes.
    u = TimeField::new(f.mesh().to_vec(), u.frames().to_vec())?;
    let rev = |t: &TimeField| TimeField::new(f.mesh().to_vec(), t.time_reversed().frames().to_vec());
    let para = ParaFunction { u, u_prime: rev(&para.u_prime)?, u_sharp: rev(&para.u_sharp)?, ..para };
    Ok((para, report))
}

/// `Y^R = Y^{rLrl} + Y^P` where `𝓛Y^R = ½(X^{lr})² + XX^{lr} + (X + X^{lr})∂Y^R`,
/// `Y^R(0) = 0`. The resonant pieces `½(X^{lr})² + X⊙X^{rLrl}` enter together
/// through the stored double-tree forcing, so no constant is left over.
pub fn solve_yr(data: &EnhancedData, opts: &SolverOptions) -> Result<(ParaFunction, TimeField, SolveReport)> {
    let part = DyadicPartition::new(data.grid(), opts.k0)?;
    let x = &data.x;
    let xl = data.x_lr();
    let xr = data.x_rlrl();
    let fixed = data
        .double_forcing(&part)
        .add(&frame_para_lower(x, &xr, &part))
        .add(&xl.mul(&xr).real_part());
    let xb: Vec<Blocks> = x.frames().par_iter().map(|v| Blocks::new(v, &part)).collect();
    let r: Functional = Box::new(|u: &TimeField, range: Range<usize>| {
        let l = range.start;
        let frames = (0..u.len())
            .into_par_iter()
            .map(|k| {
                let g = l + k;
                let du = u.frame(k).derivative(1).real_part();
                let x_low = para_lower_blocks(&xb[g], &Blocks::new(&du, &part)).real_part();
                &(fixed.frame(g) + &(xl.frame(g) * &du)) + &x_low
            })
            .collect();
        window_field(u, frames)
    });
    let fd: Functional = Box::new(|u: &TimeField, range: Range<usize>| {
        let l = range.start;
        let du = derivative_frames(u);
        let frames = du.iter().enumerate().map(|(k, d)| d + xr.frame(l + k)).collect();
        window_field(u, frames)
    });
    let p = LinearProblem::new(GridField::zeros(*data.grid()), r).with_derivative(fd).with_options(*opts);
    let (para, report) = solve_linear(&p, data)?;
    let y_r_full = data.y_rlrl.slice(0..para.u.len()).add(&para.u);
    Ok((para, y_r_full, report))
}

/// Right-hand side of the `Y^R` equation evaluated on a candidate `Y^R`.
pub fn yr_rhs(data: &EnhancedData, yr: &TimeField, part: &DyadicPartition) -> TimeField {
    let x = data.x.slice(0..yr.len());
    let xl = data.x_lr().slice(0..yr.len());
    let dy = yr.derivative(1).real_part();
    let xlx = xl.mul(&x).add(&half_square(&xl));
    let resonant_fix = data.double_forcing(part).slice(0..yr.len()).sub(&half_square(&xl));
    let xr = data.x_rlrl().slice(0..yr.len());
    // ½(X^{lr})² + X X^{lr} + (X + X^{lr})∂Y^R with X⊙X^{rLrl} replaced by its renormalized value.
    let raw_resonant = frame_resonant(&x, &xr, part);
    xlx.add(&x.add(&xl).mul(&dy).real_part()).add(&resonant_fix.sub(&raw_resonant))
}

/// Remainder `h♯` of the KPZ solution: `𝓛h♯ = Z(𝕐, h^P, h′) + X⊙∂h♯`,
/// `h♯(0) = u0`. The terms of `Z` that are heat operators applied to known
/// fields, `𝓛(Y^{rLrLrl}+Y^{LrlRrl})` and `−𝓛(h′≺≺Y^r)`, are integrated exactly.
pub fn solve_sharp(
    data: &EnhancedData,
    h_p: &TimeField,
    h_prime: &TimeField,
    u0: &GridField,
    opts: &SolverOptions,
) -> Result<(TimeField, SolveReport)> {
    let m = h_p.len();
    h_p.check_mesh(h_prime)?;
    if data.mesh()[..m] != *h_p.mesh() {
        return Err(Error::MeshMismatch);
    }
    let part = DyadicPartition::new(data.grid(), opts.k0)?;
    let sm = TimeSmoother::default();
    let cut = |f: &TimeField| f.slice(0..m);
    let x = cut(&data.x);
    let xl = cut(&data.x_lr());
    let xr = cut(&data.x_rlrl());
    let y_r = cut(&data.y_r);
    let dhp = h_p.derivative(1).real_part();
    let hp_y = para_modified(h_prime, &y_r, &sm, &part)?;
    let lifted = cut(&data.y_rlrlrl).add(&cut(&data.y_lrlrrl)).sub(&hp_y);
    let z = frame_para_lower(&x, &xr, &part)
        .add(&xl.mul(&xr).real_part())
        .add(&half_square(&xr))
        .add(&half_square(&dhp))
        .add(&xl.add(&xr).mul(&dhp).real_part())
        .add(&frame_para_lower(&x, &dhp, &part))
        .add(&frame_resonant(&x, &hp_y.derivative(1).real_part(), &part))
        .add(&frame_para_lower(h_prime, &x, &part));
    let r: Functional = Box::new(move |u: &TimeField, range: Range<usize>| window_field(u, frames_of(&z, &range)));
    let p = LinearProblem::new(u0.clone(), r)
        .with_lifted(lifted)
        .until(h_p.mesh()[m - 1])
        .with_options(*opts);
    let (para, report) = solve_linear(&p, data)?;
    Ok((para.u, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhanced_noise::{build_trees, InitialCondition, NoisePath, RenormConstants};
    use crate::function_spaces::uniform_mesh;
    use crate::heat_calculus::heat_flow;
    use std::f64::consts::PI;

    fn grid() -> Grid {
        Grid::new(2.0 * PI, 64).unwrap()
    }

    /// Smooth deterministic data built from a band-limited forcing.
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
    fn exponent_defaults_pass_and_violations_are_listed() {
        assert!(Exponents::default().check().is_ok());
        let bad = Exponents { eps: 0.1, b: 1.0, ..Exponents::default() };
        let msg = bad.check().unwrap_err().to_string();
        assert!(msg.contains("6a/δ") && msg.contains("b = 1"), "{msg}");
    }

    #[test]
    fn pure_heat_flow() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 32);
        let data = EnhancedData::zeros(g, mesh.clone());
        let u0 = GridField::from_fn(g, |x| x.sin() + 0.2 * (3.0 * x).cos());
        let p = LinearProblem::new(u0.clone(), zero_functional());
        let (sol, rep) = solve_linear(&p, &data).unwrap();
        let exact = heat_flow(&u0, &mesh);
        assert!(sol.u.sub(&exact).sup_norm() < 1e-12);
        assert_eq!(rep.windows.len(), 1);
        assert!(rep.reconstruction_residual < 1e-10);
    }

    #[test]
    fn fixed_forcing_matches_duhamel_per_mode() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 1.0, 64);
        let data = EnhancedData::zeros(g, mesh.clone());
        let u0 = GridField::from_fn(g, |x| (2.0 * x).cos());
        let forcing = GridField::from_fn(g, |x| 1.0 + x.sin());
        let fc = forcing.clone();
        let r: Functional = Box::new(move |u: &TimeField, _| Ok(TimeField::constant_in_time(&fc, u.mesh().to_vec())));
        let (sol, _) = solve_linear(&LinearProblem::new(u0, r), &data).unwrap();
        // Mode by mode: constant mode t, sin mode (1 − e^{−t/2})·2, cos 2x mode e^{−2t}.
        for (k, &t) in mesh.iter().enumerate() {
            let exact = GridField::from_fn(g, |x| t + 2.0 * (1.0 - (-0.5 * t).exp()) * x.sin() + (-2.0 * t).exp() * (2.0 * x).cos());
            assert!((sol.u.frame(k) - &exact).sup_norm() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn decomposition_matches_plain_resonant_product() {
        let data = smooth_data(1.0, 32, 0.5);
        let part = DyadicPartition::new(data.grid(), 1.0).unwrap();
        let sm = TimeSmoother::default();
        let g = *data.grid();
        let u = TimeField::from_fn(g, data.mesh().to_vec(), |t, x| (x - t).cos() + 0.3 * (2.0 * x).sin());
        let u_prime = TimeField::from_fn(g, data.mesh().to_vec(), |t, x| 1.0 + 0.5 * (x + t).sin());
        let u_sharp = u.sub(&para_modified(&u_prime, &data.y_r, &sm, &part).unwrap());
        let pf = ParaFunction { u: u.clone(), u_prime, u_sharp, controller: data.controller(), beta_prime: 0.0, beta_hat: 0.0 };
        let got = paracontrolled_product(&data.x, &pf, &data, &sm, &part).unwrap();
        let direct = frame_resonant(&data.x, &u.derivative(1).real_part(), &part);
        assert!(got.sub(&direct).sup_norm() < 1e-8 * (1.0 + direct.sup_norm()));
    }

    #[test]
    fn decomposition_collapses_without_derivative() {
        let data = smooth_data(1.0, 16, 0.25);
        let part = DyadicPartition::new(data.grid(), 1.0).unwrap();
        let sm = TimeSmoother::default();
        let g = *data.grid();
        let u = TimeField::from_fn(g, data.mesh().to_vec(), |t, x| (x + t).sin());
        let zero = TimeField::zeros(g, data.mesh().to_vec());
        let pf = ParaFunction { u: u.clone(), u_prime: zero.clone(), u_sharp: u.clone(), controller: data.controller(), beta_prime: 0.0, beta_hat: 0.0 };
        let terms = paracontrolled_product_terms(&data.x, &pf, &data, &sm, &part).unwrap();
        for t in &terms {
            assert!(t.resonant_part.sup_norm() == 0.0);
            assert!(t.commutator.sup_norm() < 1e-14);
            assert!(t.time_commutator.sup_norm() < 1e-14);
        }
        let pz = ParaFunction { u: zero.clone(), u_prime: zero.clone(), u_sharp: zero, ..pf.clone() };
        assert!(paracontrolled_product(&data.x, &pz, &data, &sm, &part).unwrap().sup_norm() < 1e-14);
        let wrong = ParaFunction { controller: pf.controller ^ 1, ..pf };
        assert!(matches!(
            paracontrolled_product(&data.x, &wrong, &data, &sm, &part),
            Err(Error::ControllerMismatch)
        ));
    }

    #[test]
    fn rhe_with_zero_data_is_heat_flow() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 32);
        let data = EnhancedData::zeros(g, mesh.clone());
        let w0 = GridField::from_fn(g, |x| 1.0 + 0.5 * x.cos());
        let (sol, rep) = solve_rhe(&data, &w0, &SolverOptions::default()).unwrap();
        assert!(sol.u.sub(&heat_flow(&w0, &mesh)).sup_norm() < 1e-12);
        assert!(rep.reconstruction_residual < 1e-10);
    }

    #[test]
    fn smooth_rhe_converges_with_contraction_and_reconstruction() {
        let data = smooth_data(1.0, 64, 0.5);
        let w0 = GridField::from_fn(*data.grid(), |x| 1.0 + 0.3 * x.sin());
        let (sol, rep) = solve_rhe(&data, &w0, &SolverOptions::default()).unwrap();
        assert!(rep.max_contraction() < 0.5);
        assert!(rep.reconstruction_residual < 1e-10);
        assert!(sol.u.is_finite());
        let direct = solve_rhe(&data, &w0, &SolverOptions::default().direct()).unwrap().0;
        assert!(sol.u.sub(&direct.u).sup_norm() < 1e-7);
    }

    #[test]
    fn window_floor_reports_non_contraction() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 1.0, 16);
        let data = EnhancedData::zeros(g, mesh);
        // R(u) = 400·u amplifies too strongly for any admissible window.
        let r: Functional = Box::new(|u: &TimeField, _| Ok(u.scale(400.0)));
        let u0 = GridField::constant(g, 1.0);
        let p = LinearProblem::new(u0, r);
        assert!(matches!(solve_linear(&p, &data), Err(Error::NonContraction { .. })));
    }

    #[test]
    fn yr_vanishes_for_zero_data() {
        let g = grid();
        let data = EnhancedData::zeros(g, uniform_mesh(0.0, 0.25, 16));
        let (_, yr, _) = solve_yr(&data, &SolverOptions::default()).unwrap();
        assert_eq!(yr.sup_norm(), 0.0);
    }

    #[test]
    fn kolmogorov_zero_mode_ode() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 32);
        let data = EnhancedData::zeros(g, mesh.clone());
        let f = TimeField::constant_in_time(&GridField::constant(g, 1.0), mesh.clone());
        let (phi, _) = solve_kolmogorov(&data, &f, &GridField::zeros(g), 0.5, &SolverOptions::default()).unwrap();
        for (k, &t) in mesh.iter().enumerate() {
            assert!((phi.u.frame(k).value_at(3) + (0.5 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_heat_for_zero_data() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 32);
        let data = EnhancedData::zeros(g, mesh.clone());
        let gterm = GridField::from_fn(g, |x| (3.0 * x).cos());
        let b = solve_rhe_backward(&data, &gterm, 0.5, 0.0, 1.0, &SolverOptions::default()).unwrap();
        let full = b.full();
        for (k, &s) in b.para.u.mesh().iter().enumerate() {
            let exact = gterm.scale((-(0.5 - s) * 4.5).exp());
            assert!((full.frame(k) - &exact).sup_norm() < 1e-12);
        }
    }

    #[test]
    fn sharp_with_zero_data_is_heat_flow() {
        let g = grid();
        let mesh = uniform_mesh(0.0, 0.5, 32);
        let data = EnhancedData::zeros(g, mesh.clone());
        let z = TimeField::zeros(g, mesh.clone());
        let u0 = GridField::from_fn(g, |x| x.sin());
        let (h, _) = solve_sharp(&data, &z, &z, &u0, &SolverOptions::default()).unwrap();
        assert!(h.sub(&heat_flow(&u0, &mesh)).sup_norm() < 1e-12);
    }
}
