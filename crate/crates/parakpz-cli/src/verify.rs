//! Hermetic self-checks run by `parakpz verify`.

use std::f64::consts::PI;

use anyhow::{bail, Result};
use serde::Serialize;

use parakpz::enhanced_noise::EnhancedData;
use parakpz::function_spaces::{uniform_mesh, TimeField};
use parakpz::heat_calculus::{heat_flow, young_integral};
use parakpz::kpz_pipeline::{solve_kpz, KpzOptions};
use parakpz::linear_solver::{solve_rhe, SolverOptions};
use parakpz::paraproducts::{para_lower, para_upper, resonant};
use parakpz::polymer_sampler::{periodic_gaussian, transition_kernel};
use parakpz::spectral_core::{make_dyadic_partition, random_band_limited, weighted_sup_norm, Grid, GridField, WeightSpec};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

fn at_most(name: &str, value: f64, limit: f64) -> Check {
    Check { name: name.into(), value, limit, pass: value <= limit }
}

pub const SUITES: [&str; 6] = ["spectral", "paraproducts", "heat", "solver", "kpz", "polymer"];

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    Ok(match name {
        "spectral" => spectral()?,
        "paraproducts" => paraproducts()?,
        "heat" => heat()?,
        "solver" => solver()?,
        "kpz" => kpz()?,
        "polymer" => polymer()?,
        "all" => {
            let mut v = Vec::new();
            for s in SUITES {
                v.extend(run_suite(s)?);
            }
            v
        }
        _ => bail!("unknown suite `{name}`; available: {}, all", SUITES.join(", ")),
    })
}

fn spectral() -> Result<Vec<Check>> {
    let g = Grid::new(4.0 * PI, 1024)?;
    let f = random_band_limited(g, 60.0, 11);
    let back = GridField::from_coeffs(g, f.coeffs().to_vec());
    let roundtrip = (&back - &f).sup_norm();
    let part = make_dyadic_partition(&g, 1.0)?;
    let blocks = part.all_blocks(&f).iter().fold(GridField::zeros(g), |a, b| &a + b);
    let sum = (&blocks - &f).sup_norm();
    let w = WeightSpec::polynomial(0.5);
    let mut worst: f64 = 0.0;
    for j in 2..=part.j_max() - 2 {
        let b = part.block(&f, j)?;
        let r = weighted_sup_norm(&b.derivative(1), &w, 0.0) / weighted_sup_norm(&b, &w, 0.0) / 2f64.powi(j);
        worst = worst.max(r.max(1.0 / r));
    }
    Ok(vec![
        at_most("fft round trip", roundtrip, 1e-12),
        at_most("partition of unity", sum, 1e-12),
        at_most("bernstein band factor", worst, 2.0),
    ])
}

fn paraproducts() -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    for n in [256usize, 1024] {
        let g = Grid::new(4.0 * PI, n)?;
        let part = make_dyadic_partition(&g, 1.0)?;
        for s in 0..10u64 {
            let f = random_band_limited(g, g.k_max() / 3.0, 2 * s);
            let h = random_band_limited(g, g.k_max() / 3.0, 2 * s + 1);
            let lhs = &(&para_lower(&f, &h, &part)? + &resonant(&f, &h, &part)?) + &para_upper(&f, &h, &part)?;
            worst = worst.max((&lhs - &(&f * &h)).sup_norm());
        }
    }
    Ok(vec![at_most("bony reconstruction", worst, 1e-10)])
}

fn heat() -> Result<Vec<Check>> {
    let g = Grid::new(2.0 * PI, 128)?;
    let mesh = uniform_mesh(0.0, 1.0, 64);
    let u0 = GridField::from_fn(g, |x| (2.0 * x).cos());
    let flow = heat_flow(&u0, &mesh);
    let exact = (-2.0f64).exp();
    let semigroup = (flow.last().value_at(g.n() / 2) - exact).abs();
    // ∫_0^t s ds = t²/2 at the nodes shared by the two finest dyadic levels.
    let mesh = uniform_mesh(0.0, 1.0, 1024);
    let f = TimeField::from_fn(g, mesh.clone(), |t, _| t);
    let yi = young_integral(&f, &f)?;
    let err = yi.limit.frames().iter().zip(&mesh).step_by(4).map(|(v, &t)| (v.value_at(0) - 0.5 * t * t).abs()).fold(0.0, f64::max);
    Ok(vec![at_most("heat semigroup on a mode", semigroup, 1e-12), at_most("young integral of t dt", err, 1e-6)])
}

fn solver() -> Result<Vec<Check>> {
    let g = Grid::new(2.0 * PI, 64)?;
    let mesh = uniform_mesh(0.0, 0.5, 32);
    let data = EnhancedData::zeros(g, mesh.clone());
    let w0 = GridField::from_fn(g, |x| 1.0 + 0.5 * x.sin());
    let (w, rep) = solve_rhe(&data, &w0, &SolverOptions::default())?;
    let gap = w.u.sub(&heat_flow(&w0, &mesh)).sup_norm();
    Ok(vec![
        at_most("rough heat equation without noise", gap, 1e-12),
        at_most("reconstruction residual", rep.reconstruction_residual, 1e-10),
    ])
}

fn kpz() -> Result<Vec<Check>> {
    let g = Grid::new(2.0 * PI, 64)?;
    let mesh = uniform_mesh(0.0, 0.5, 16);
    let data = EnhancedData::zeros(g, mesh);
    let s = solve_kpz(&data, &GridField::from_fn(g, f64::sin), &KpzOptions::default())?;
    let e = GridField::from_fn(g, |x| x.sin().exp());
    let exact = heat_flow(&e, data.mesh()).map_frames(|f| f.map_real(f64::ln));
    Ok(vec![at_most("cole-hopf against heat flow of e^sin", s.h.sub(&exact).sup_norm(), 1e-6)])
}

fn polymer() -> Result<Vec<Check>> {
    let g = Grid::new(2.0 * PI, 64)?;
    let data = EnhancedData::zeros(g, uniform_mesh(0.0, 1.0, 8));
    let h = TimeField::zeros(g, data.mesh().to_vec());
    let k = transition_kernel(&data, &h, 0.0, 0.5, &SolverOptions::default().direct())?;
    let mut err: f64 = 0.0;
    for i in 0..g.n() {
        for j in 0..g.n() {
            err = err.max((k.row(i)[j] - periodic_gaussian(g.x(j) - g.x(i), 0.5, g.half_length)).abs());
        }
    }
    Ok(vec![
        at_most("free kernel against gaussian", err, 1e-6),
        at_most("kernel normalization", k.normalization_residual, 1e-6),
    ])
}
