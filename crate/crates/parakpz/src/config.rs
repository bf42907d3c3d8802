//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhanced_noise::{EnhanceSpec, InitialKind, RenormMode};
use crate::error::{Error, Result};
use crate::linear_solver::{Exponents, SolverOptions};
use crate::spectral_core::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub alpha: f64,
    pub delta: f64,
    pub a: f64,
    pub eps: f64,
    pub zeta: f64,
    pub b: f64,
    /// Regularity of the initial condition seen by the linear solver.
    pub beta: f64,
    pub half_length: f64,
    pub points: usize,
    pub t_end: f64,
    pub dt: f64,
    /// `None` runs the unmollified noise.
    pub level: Option<f64>,
    pub seeds: Vec<u64>,
    pub initial: InitialKind,
    pub drift: f64,
    pub renorm: RenormMode,
    pub k0: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub contraction_limit: f64,
    pub kernel_tol: f64,
    pub paths: usize,
    pub sde_dt: f64,
}

impl Default for Config {
    fn default() -> Self {
        let e = Exponents::default();
        Self {
            alpha: e.alpha,
            delta: e.delta,
            a: e.a,
            eps: e.eps,
            zeta: e.zeta,
            b: e.b,
            beta: e.beta,
            half_length: 4.0 * std::f64::consts::PI,
            points: 1024,
            t_end: 1.0,
            dt: 1.0 / 256.0,
            level: Some(8.0),
            seeds: vec![1],
            initial: InitialKind::Stationary,
            drift: 0.0,
            renorm: RenormMode::TimeDependent,
            k0: 1.0,
            tol: 1e-8,
            max_iterations: 400,
            contraction_limit: 0.5,
            kernel_tol: 1e-4,
            paths: 10_000,
            sde_dt: 1.0 / 512.0,
        }
    }
}

pub const KEYS: [&str; 23] = [
    "alpha",
    "delta",
    "a",
    "eps",
    "zeta",
    "b",
    "beta",
    "half_length",
    "points",
    "t_end",
    "dt",
    "level",
    "seeds",
    "initial",
    "drift",
    "renorm",
    "k0",
    "tol",
    "max_iterations",
    "contraction_limit",
    "kernel_tol",
    "paths",
    "sde_dt",
];

fn initial_name(k: InitialKind) -> &'static str {
    match k {
        InitialKind::Zero => "zero",
        InitialKind::Deterministic => "deterministic",
        InitialKind::Brownian => "brownian",
        InitialKind::Stationary => "stationary",
    }
}

fn renorm_name(m: RenormMode) -> &'static str {
    match m {
        RenormMode::TimeDependent => "time-dependent",
        RenormMode::Stationary => "stationary",
    }
}

impl Config {
    pub fn exponents(&self) -> Exponents {
        Exponents { alpha: self.alpha, eps: self.eps, a: self.a, zeta: self.zeta, b: self.b, delta: self.delta, beta: self.beta }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.half_length, self.points)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iterations: self.max_iterations,
            contraction_limit: self.contraction_limit,
            k0: self.k0,
            exponents: self.exponents(),
            ..SolverOptions::default()
        }
    }

    pub fn enhance_spec(&self, seed: u64) -> EnhanceSpec {
        EnhanceSpec {
            half_length: self.half_length,
            num_points: self.points,
            t_end: self.t_end,
            dt: self.dt,
            seed,
            initial: self.initial,
            drift: self.drift,
            renorm: self.renorm,
        }
    }

    /// Applies `key = value` lines on top of the current values. Every bad
    /// line is reported, not only the first.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got `{line}`", no + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), no + 1) {
                errors.push(format!("line {}: `{k}` already set on line {prev}", no + 1));
            }
            if let Err(e) = self.set(k, v) {
                errors.push(format!("line {}: {e}", no + 1));
            }
        }
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidParameter(errors.join("\n")))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "a" => self.a = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "zeta" => self.zeta = num(key, value)?,
            "b" => self.b = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "half_length" => self.half_length = num(key, value)?,
            "points" => self.points = num(key, value)?,
            "t_end" => self.t_end = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "level" => {
                self.level = if value == "none" { None } else { Some(num(key, value)?) };
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "initial" => {
                self.initial = match value {
                    "zero" => InitialKind::Zero,
                    "brownian" => InitialKind::Brownian,
                    "stationary" => InitialKind::Stationary,
                    _ => return Err(format!("`initial`: expected zero, brownian or stationary, got `{value}`")),
                }
            }
            "drift" => self.drift = num(key, value)?,
            "renorm" => {
                self.renorm = match value {
                    "time-dependent" => RenormMode::TimeDependent,
                    "stationary" => RenormMode::Stationary,
                    _ => return Err(format!("`renorm`: expected time-dependent or stationary, got `{value}`")),
                }
            }
            "k0" => self.k0 = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "contraction_limit" => self.contraction_limit = num(key, value)?,
            "kernel_tol" => self.kernel_tol = num(key, value)?,
            "paths" => self.paths = num(key, value)?,
            "sde_dt" => self.sde_dt = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Satisfied constraints as text; every violation in the error.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        let mut req = |cond: bool, text: String| if cond { ok.push(text) } else { bad.push(text) };
        req(
            self.alpha > 0.4 && self.alpha < 0.5,
            format!("α = {} ∈ (2/5, 1/2), the admissible regularity range of the noise", self.alpha),
        );
        let (eo, eb) = self.exponents().audit();
        ok.extend(eo);
        bad.extend(eb);
        let mut req = |cond: bool, text: String| if cond { ok.push(text) } else { bad.push(text) };
        if let Err(e) = self.grid() {
            req(false, e.to_string());
        }
        req(self.t_end > 0.0, format!("T = {} > 0", self.t_end));
        req(self.dt > 0.0 && self.dt <= self.t_end, format!("dt = {} ∈ (0, T]", self.dt));
        if self.dt > 0.0 {
            let r = self.t_end / self.dt;
            req((r - r.round()).abs() < 1e-9 * r.max(1.0), format!("T/dt = {r} is an integer"));
        }
        if let Some(n) = self.level {
            req(n >= 1.0, format!("level n = {n} ≥ 1"));
        }
        req(!self.seeds.is_empty(), "at least one seed".into());
        req(self.k0 > 0.0, format!("k0 = {} > 0", self.k0));
        req(self.tol > 0.0, format!("tol = {} > 0", self.tol));
        req(self.max_iterations >= 3, format!("max_iterations = {} ≥ 3", self.max_iterations));
        req(
            self.contraction_limit > 0.0 && self.contraction_limit < 1.0,
            format!("contraction_limit = {} ∈ (0, 1)", self.contraction_limit),
        );
        req(self.kernel_tol > 0.0, format!("kernel_tol = {} > 0", self.kernel_tol));
        req(self.paths >= 2, format!("paths = {} ≥ 2", self.paths));
        req(self.sde_dt > 0.0, format!("sde_dt = {} > 0", self.sde_dt));
        req(self.drift.is_finite(), format!("drift = {} finite", self.drift));
        if bad.is_empty() {
            Ok(ok)
        } else {
            Err(Error::InvalidParameter(format!("configuration rejected:\n  {}", bad.join("\n  "))))
        }
    }

    /// Parses and validates.
    pub fn from_text(text: &str) -> Result<Self> {
        let c = Self::default().parse_onto(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key, in a form [`Config::from_text`] reads back exactly.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("alpha", self.alpha.to_string());
        put("delta", self.delta.to_string());
        put("a", self.a.to_string());
        put("eps", self.eps.to_string());
        put("zeta", self.zeta.to_string());
        put("b", self.b.to_string());
        put("beta", self.beta.to_string());
        put("half_length", self.half_length.to_string());
        put("points", self.points.to_string());
        put("t_end", self.t_end.to_string());
        put("dt", self.dt.to_string());
        put("level", self.level.map_or("none".into(), |n| n.to_string()));
        put("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        put("initial", initial_name(self.initial).into());
        put("drift", self.drift.to_string());
        put("renorm", renorm_name(self.renorm).into());
        put("k0", self.k0.to_string());
        put("tol", self.tol.to_string());
        put("max_iterations", self.max_iterations.to_string());
        put("contraction_limit", self.contraction_limit.to_string());
        put("kernel_tol", self.kernel_tol.to_string());
        put("paths", self.paths.to_string());
        put("sde_dt", self.sde_dt.to_string());
        s
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    Config::from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = Config::from_text("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!((c.alpha, c.delta, c.a, c.eps), (0.45, 0.9, 0.03, 0.32));
    }

    #[test]
    fn alpha_outside_range_is_rejected_with_reason() {
        let msg = Config::from_text("alpha = 0.6").unwrap_err().to_string();
        assert!(msg.contains("2/5, 1/2"), "{msg}");
    }

    #[test]
    fn all_problems_are_listed() {
        let msg = Config::from_text("alpha = x\nfoo = 1\npoints = 100\nbogus line").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("unknown key `foo`") && msg.contains("line 4"), "{msg}");
        let msg = Config::from_text("points = 100\ndt = 0.3\nkernel_tol = -1").unwrap_err().to_string();
        assert!(msg.contains("power of two") && msg.contains("T/dt") && msg.contains("kernel_tol"), "{msg}");
    }

    #[test]
    fn comments_and_none_level() {
        let c = Config::from_text("# run\nlevel = none  # rough\nseeds = 3, 4,5\n").unwrap();
        assert_eq!(c.level, None);
        assert_eq!(c.seeds, vec![3, 4, 5]);
    }

    #[test]
    fn every_key_is_emitted() {
        let text = Config::default().emit();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} ="))), "{k}");
        }
    }

    proptest! {
        #[test]
        fn emit_then_load_round_trips(
            alpha in 0.41f64..0.49,
            l in 1.0f64..50.0,
            p in 3u32..12,
            steps in 1usize..2000,
            level in proptest::option::of(1.0f64..100.0),
            seeds in proptest::collection::vec(any::<u64>(), 1..4),
            stationary in any::<bool>(),
            drift in -2.0f64..2.0,
        ) {
            let c = Config {
                alpha,
                eps: 0.9 * (3.0 * alpha - 1.0) + 0.1 * (6.0 * 0.03 / 0.9 + 1.0 - 2.0 * alpha),
                half_length: l,
                points: 1 << p,
                t_end: steps as f64 / 256.0,
                dt: 1.0 / 256.0,
                level,
                seeds,
                initial: if stationary { InitialKind::Stationary } else { InitialKind::Brownian },
                drift,
                ..Config::default()
            };
            let text = c.emit();
            let back = Config::default().parse_onto(&text).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
