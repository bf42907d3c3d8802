mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use parakpz::config::{load_config, Config};
use parakpz::enhanced_noise::{enhance, EnhancedData, ManifestParams};
use parakpz::function_spaces::TimeField;
use parakpz::kpz_pipeline::{lower_bound_check, solve_kpz, KpzOptions};
use parakpz::linear_solver::{assemble_she, solve_rhe};
use parakpz::polymer_sampler::{exp_moment_estimate, increment_moment_ratio, sample_polymer, transition_kernel};
use parakpz::report::{emit_report, write_csv, RunManifest};
use parakpz::spectral_core::{make_dyadic_partition, GridField};

#[derive(Parser, Debug)]
#[command(name = "parakpz", version, about = "Spectral paracontrolled solver for the KPZ and rough heat equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set points=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample noise and build the enhanced data at one mollification level.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Mollification level, or `none`.
        #[arg(long)]
        level: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the rough heat equation on stored enhanced data.
    SolveShe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Initial height: zero, sin, cos, or a field file.
        #[arg(long, default_value = "zero")]
        hbar: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the KPZ equation on stored enhanced data.
    SolveKpz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "zero")]
        hbar: String,
        /// Skip the remainder-equation cross-check.
        #[arg(long)]
        no_sharp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transition kernels and sampled polymer paths.
    Polymer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `solve-kpz`.
        #[arg(long)]
        h: PathBuf,
        /// Comma-separated polymer times `t1 < t2 < …`, each a mesh node.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        paths: usize,
        #[arg(long, default_value_t = 0.0)]
        x0: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite; exit status 2 if any check fails.
    Verify {
        #[arg(long, default_value = "spectral")]
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Version, schema and default configuration.
    Info,
}

fn config_from(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => load_config(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    let text = common.set.join("\n");
    c = c.parse_onto(&text)?;
    let derivation = c.validate()?;
    for line in derivation {
        log(&format!("  ok: {line}"));
    }
    Ok(c)
}

fn log(msg: &str) {
    if std::env::var_os("PARAKPZ_QUIET").is_none() {
        eprintln!("{msg}");
    }
}

fn read_hbar(spec: &str, data: &EnhancedData) -> Result<GridField> {
    let g = *data.grid();
    Ok(match spec {
        "zero" => GridField::zeros(g),
        "sin" => GridField::from_fn(g, f64::sin),
        "cos" => GridField::from_fn(g, f64::cos),
        path => {
            let f = GridField::read_binary(Path::new(path)).with_context(|| format!("reading initial height {path}"))?;
            if !f.grid().same_as(&g) {
                bail!("initial height grid does not match the data grid");
            }
            f
        }
    })
}

fn load_data(dir: &Path) -> Result<EnhancedData> {
    Ok(EnhancedData::load(dir).with_context(|| format!("loading enhanced data from {}", dir.display()))?.0)
}

fn series(f: &TimeField) -> Vec<Vec<f64>> {
    f.mesh().iter().zip(f.frames()).map(|(&t, v)| vec![t, v.sup_norm()]).collect()
}

fn profile(fields: &[&TimeField]) -> Vec<Vec<f64>> {
    let g = *fields[0].grid();
    (0..g.n()).map(|i| std::iter::once(g.x(i)).chain(fields.iter().map(|f| f.last().value_at(i))).collect()).collect()
}

fn run(cli: Cli, argv: &[String]) -> Result<u8> {
    match cli.command {
        Command::Info => {
            println!("parakpz {}", env!("CARGO_PKG_VERSION"));
            println!("schema_version {}", parakpz::SCHEMA_VERSION);
            println!("threads {}", rayon::current_num_threads());
            println!("default configuration:");
            print!("{}", Config::default().emit());
            Ok(0)
        }
        Command::Enhance { common, seed, level, out } => {
            let mut c = config_from(&common)?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            if let Some(l) = level {
                c.set("level", &l).map_err(anyhow::Error::msg)?;
                c.validate()?;
            }
            let grid = c.grid()?;
            let part = make_dyadic_partition(&grid, c.k0)?;
            let seed = c.seeds[0];
            log(&format!("enhancing: N = {}, dt = {}, level = {:?}, seed = {seed}", c.points, c.dt, c.level));
            let data = enhance(&c.enhance_spec(seed), c.level, &part)?;
            data.save(&out, &ManifestParams { alpha: c.alpha, delta: c.delta, a: c.a })?;
            let rows: Vec<Vec<f64>> = data
                .mesh()
                .iter()
                .enumerate()
                .map(|(k, &t)| vec![t, data.constants.c_lr[k], data.constants.c_dbl[k]])
                .collect();
            write_csv(&out.join("constants.csv"), &["t", "c_lr", "c_dbl"], &rows)?;
            RunManifest::new("enhance", argv, &c).write(&out)?;
            Ok(0)
        }
        Command::SolveShe { common, data, hbar, out } => {
            let c = config_from(&common)?;
            let d = load_data(&data)?;
            let hb = read_hbar(&hbar, &d)?;
            let w0 = (&hb - d.y.frame(0)).map_real(f64::exp);
            let (w_p, rep) = solve_rhe(&d, &w0, &c.solver_options())?;
            let w = assemble_she(&d, &w_p.u);
            std::fs::create_dir_all(&out)?;
            w.write_binary(&out.join("w.bin"))?;
            w_p.u.write_binary(&out.join("w_p.bin"))?;
            emit_report("solve_report", &rep, &out.join("report.json"))?;
            write_csv(&out.join("she_norms.csv"), &["t", "sup_w"], &series(&w))?;
            RunManifest::new("solve-she", argv, &c).write(&out)?;
            Ok(0)
        }
        Command::SolveKpz { common, data, hbar, no_sharp, out } => {
            let c = config_from(&common)?;
            let d = load_data(&data)?;
            let hb = read_hbar(&hbar, &d)?;
            let opts = KpzOptions { solver: c.solver_options(), sharp_check: !no_sharp, ..KpzOptions::default() };
            let s = solve_kpz(&d, &hb, &opts)?;
            std::fs::create_dir_all(&out)?;
            s.h.write_binary(&out.join("h.bin"))?;
            s.h_p.write_binary(&out.join("h_p.bin"))?;
            s.h_sharp.write_binary(&out.join("h_sharp.bin"))?;
            emit_report("kpz_certificate", &s.certificate, &out.join("certificate.json"))?;
            let lb = lower_bound_check(&s.h_p, c.delta, 0.0);
            emit_report("lower_bound", &lb, &out.join("lower_bound.json"))?;
            write_csv(&out.join("profile.csv"), &["x", "h", "h_p"], &profile(&[&s.h, &s.h_p]))?;
            write_csv(&out.join("h_norms.csv"), &["t", "sup_h"], &series(&s.h))?;
            RunManifest::new("solve-kpz", argv, &c).write(&out)?;
            Ok(0)
        }
        Command::Polymer { common, data, h, times, paths, x0, seed, out } => {
            let c = config_from(&common)?;
            let d = load_data(&data)?;
            let hf = TimeField::read_binary(&h.join("h.bin")).with_context(|| format!("reading {}/h.bin", h.display()))?;
            if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) || times[0] <= 0.0 {
                bail!("--times must be increasing and positive");
            }
            let opts = c.solver_options().direct();
            std::fs::create_dir_all(&out)?;
            let mut chain = Vec::new();
            let mut s = 0.0;
            for (i, &t) in times.iter().enumerate() {
                log(&format!("kernel {s} → {t}"));
                let k = transition_kernel(&d, &hf, s, t, &opts)?;
                if k.normalization_residual > c.kernel_tol {
                    return Err(parakpz::Error::KernelRejected(k.normalization_residual).into());
                }
                k.save(&out.join(format!("kernel_{i}.bin")))?;
                chain.push(k);
                s = t;
            }
            let ps = sample_polymer(&chain, x0, paths, seed)?;
            let rows: Vec<Vec<f64>> = ps
                .iter()
                .enumerate()
                .flat_map(|(p, path)| path.times.iter().zip(&path.positions).map(move |(&t, &x)| vec![p as f64, t, x]))
                .collect();
            write_csv(&out.join("paths.csv"), &["path", "t", "x"], &rows)?;
            let summary = serde_json::json!({
                "exp_moment": exp_moment_estimate(&ps, 0.1, c.delta),
                "increment_ratio": increment_moment_ratio(&ps),
                "normalization_residuals": chain.iter().map(|k| k.normalization_residual).collect::<Vec<_>>(),
            });
            emit_report("polymer_summary", &summary, &out.join("summary.json"))?;
            RunManifest::new("polymer", argv, &c).write(&out)?;
            Ok(0)
        }
        Command::Verify { suite, out } => {
            let checks = verify::run_suite(&suite)?;
            let pass = checks.iter().all(|c| c.pass);
            for c in &checks {
                println!("{} {:<40} value = {:.3e} (limit {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                emit_report("verify", &checks, &dir.join(format!("verify_{suite}.json")))?;
                let rows: Vec<(String, Vec<f64>)> =
                    checks.iter().map(|c| (c.name.clone(), vec![c.value, if c.pass { 1.0 } else { 0.0 }])).collect();
                parakpz::report::write_labelled_csv(&dir.join(format!("verify_{suite}.csv")), &["check", "value", "pass"], &rows)?;
                RunManifest::new("verify", argv, &Config::default()).write(&dir)?;
            }
            Ok(if pass { 0 } else { 2 })
        }
    }
}

/// Arguments with the output directory blanked, so reruns into another
/// directory produce identical manifests.
fn portable_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut blank_next = false;
    for a in argv {
        if blank_next {
            out.push("OUT".to_string());
            blank_next = false;
        } else if a == "--out" {
            out.push(a.clone());
            blank_next = true;
        } else if a.starts_with("--out=") {
            out.push("--out=OUT".to_string());
        } else {
            out.push(a.clone());
        }
    }
    out
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if let Some(n) = std::env::var("PARAKPZ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &portable_args(&argv[1..])) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
