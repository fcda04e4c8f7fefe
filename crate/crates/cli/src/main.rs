//! `epstein-lab`: experiment runner for the epsteinlab numerical suites.
//!
//! Every subcommand resolves its flags into a single JSON config (echoed in
//! the manifest with alphabetically sorted keys), runs its pipeline into an
//! output directory, and writes `manifest.json` with per-stage residuals,
//! certificates, and a SHA-256 inventory of all emitted files. Exit status:
//! 0 on success, 1 when any certificate fails or a pipeline stage errors,
//! 2 for malformed configuration. `EPSTEIN_LAB_THREADS` caps parallelism.

// `!(x > 0.0)` style guards in the command validators deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commands::*;

#[derive(Parser)]
#[command(name = "epstein-lab", version, about = "CMC foliations, Epstein surfaces, and the torus extremal-length workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory for results and the run manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build an Epstein surface from a built-in conformal metric.
    #[command(name = "epstein-surface")]
    EpsteinSurface {
        #[command(flatten)]
        out: OutArg,
        /// Base metric: flat | poincare.
        #[arg(long, default_value = "poincare")]
        metric: String,
        /// Scale exponent t of e^{2t}·(base metric).
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        scale: f64,
        /// Chart half-width.
        #[arg(long, default_value_t = 0.4)]
        half_width: f64,
        /// Nodes per chart side.
        #[arg(long, default_value_t = 121)]
        n: usize,
    },
    /// Continue the CMC family over an H grid and certify the foliation.
    #[command(name = "cmc-foliate")]
    CmcFoliate {
        #[command(flatten)]
        out: OutArg,
        /// Backend: homogeneous | mesh | disk.
        #[arg(long, default_value = "homogeneous")]
        backend: String,
        #[arg(long, default_value_t = 0.0)]
        phi_scale: f64,
        #[arg(long, default_value_t = -0.9, allow_hyphen_values = true)]
        h_lo: f64,
        #[arg(long, default_value_t = 0.9, allow_hyphen_values = true)]
        h_hi: f64,
        /// Number of leaves on the inclusive H grid.
        #[arg(long, default_value_t = 19)]
        steps: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Mesh-backend refinement level.
        #[arg(long, default_value_t = 2)]
        subdiv: u32,
        /// Disk-backend rotational symmetry order of φ.
        #[arg(long, default_value_t = 8)]
        n_sym: u32,
        #[arg(long, default_value_t = 96)]
        ntheta: usize,
        #[arg(long, default_value_t = 44)]
        nxi: usize,
        #[arg(long, default_value_t = 0.35)]
        rho_inner: f64,
        #[arg(long, default_value_t = 0.9)]
        rho_outer: f64,
    },
    /// Solve the Gauss-equation path and report first-order estimates.
    #[command(name = "minimal-path")]
    MinimalPath {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 1.0)]
        detq_scale: f64,
        /// Comma-separated positive path parameters.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-2, 5e-3, 2.5e-3])]
        s_list: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        subdiv: u32,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Rescale a holonomy path and extrapolate its half-pipe limit.
    #[command(name = "halfpipe-limit")]
    HalfpipeLimit {
        #[command(flatten)]
        out: OutArg,
        /// JSON file {"ts": [...], "generators": [[[16 numbers]...]]};
        /// omitted means the built-in demo path.
        #[arg(long)]
        input: Option<String>,
    },
    /// Locate the critical point of ext(F) + ext(G) on the torus.
    #[command(name = "torus-critical")]
    TorusCritical {
        #[command(flatten)]
        out: OutArg,
        /// Foliation F as `m n weight`.
        #[arg(long = "F", num_args = 3, value_names = ["M", "N", "W"], allow_hyphen_values = true, default_values = ["1", "0", "1"])]
        f: Vec<String>,
        /// Foliation G as `m n weight`.
        #[arg(long = "G", num_args = 3, value_names = ["M", "N", "W"], allow_hyphen_values = true, default_values = ["0", "1", "1"])]
        g: Vec<String>,
    },
    /// Trace the Teichmüller line of a filling pair.
    #[command(name = "torus-line")]
    TorusLine {
        #[command(flatten)]
        out: OutArg,
        #[arg(long = "F", num_args = 3, value_names = ["M", "N", "W"], allow_hyphen_values = true, default_values = ["1", "0", "1"])]
        f: Vec<String>,
        #[arg(long = "G", num_args = 3, value_names = ["M", "N", "W"], allow_hyphen_values = true, default_values = ["0", "1", "1"])]
        g: Vec<String>,
        /// Comma-separated positive line parameters.
        #[arg(long, value_delimiter = ',', default_values_t = (0..9).map(|k| 0.4 + 0.2 * k as f64).collect::<Vec<_>>())]
        t_grid: Vec<f64>,
    },
    /// Periods and intersection numbers of cycles on a flat surface.
    #[command(name = "flat-periods")]
    FlatPeriods {
        #[command(flatten)]
        out: OutArg,
        /// Surface JSON: `{"polygons": [[[x,y],...]], "pairings": [[[p,e],[q,f]],...]}`.
        #[arg(long)]
        surface: String,
        /// Cycles JSON: [[[polygon, edge, sign],...], ...].
        #[arg(long)]
        cycles: String,
    },
    /// Deterministic cross-module battery with a reproducible manifest.
    Selftest {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run any command from a JSON config document.
    Run {
        #[command(flatten)]
        out: OutArg,
        /// JSON file {"command": "...", "config": {...}}.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
    },
}

struct TorusPairHalf {
    class: [i64; 2],
    weight: f64,
}

fn parse_triple(name: &str, raw: &[String]) -> anyhow::Result<TorusPairHalf> {
    let m: i64 = raw[0].parse().map_err(|_| {
        ConfigError(format!("field `{name}`: class entry {:?} is not an integer", raw[0]))
    })?;
    let n: i64 = raw[1].parse().map_err(|_| {
        ConfigError(format!("field `{name}`: class entry {:?} is not an integer", raw[1]))
    })?;
    let w: f64 = raw[2]
        .parse()
        .map_err(|_| ConfigError(format!("field `{name}`: weight {:?} is not a number", raw[2])))?;
    Ok(TorusPairHalf { class: [m, n], weight: w })
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::EpsteinSurface { out, metric, scale, half_width, n } => {
            let cfg = EpsteinSurfaceConfig { metric, scale, half_width, n };
            run_epstein_surface(&cfg, &out.out)
        }
        Command::CmcFoliate {
            out,
            backend,
            phi_scale,
            h_lo,
            h_hi,
            steps,
            tol,
            seed,
            subdiv,
            n_sym,
            ntheta,
            nxi,
            rho_inner,
            rho_outer,
        } => {
            let cfg = CmcFoliateConfig {
                backend,
                phi_scale,
                h_lo,
                h_hi,
                steps,
                tol,
                seed,
                subdiv,
                n_sym,
                ntheta,
                nxi,
                rho_inner,
                rho_outer,
            };
            run_cmc_foliate(&cfg, &out.out)
        }
        Command::MinimalPath { out, detq_scale, s_list, subdiv, tol } => {
            let cfg = MinimalPathConfig { detq_scale, s_list, subdiv, tol };
            run_minimal_path(&cfg, &out.out)
        }
        Command::HalfpipeLimit { out, input } => {
            run_halfpipe_limit(&HalfpipeLimitConfig { input }, &out.out)
        }
        Command::TorusCritical { out, f, g } => {
            let fh = parse_triple("F", &f)?;
            let gh = parse_triple("G", &g)?;
            let cfg = TorusPairConfig {
                f_class: fh.class,
                f_weight: fh.weight,
                g_class: gh.class,
                g_weight: gh.weight,
            };
            run_torus_critical(&cfg, &out.out)
        }
        Command::TorusLine { out, f, g, t_grid } => {
            let fh = parse_triple("F", &f)?;
            let gh = parse_triple("G", &g)?;
            let cfg = TorusLineConfig {
                pair: TorusPairConfig {
                    f_class: fh.class,
                    f_weight: fh.weight,
                    g_class: gh.class,
                    g_weight: gh.weight,
                },
                t_grid,
            };
            run_torus_line(&cfg, &out.out)
        }
        Command::FlatPeriods { out, surface, cycles } => {
            run_flat_periods(&FlatPeriodsConfig { surface, cycles }, &out.out)
        }
        Command::Selftest { out, seed } => run_selftest(&SelftestConfig { seed }, &out.out),
        Command::Run { out, config } => run_from_config(&config, &out.out),
    }
}

fn run_from_config(path: &std::path::Path, out: &std::path::Path) -> anyhow::Result<bool> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let doc: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| ConfigError(format!("config JSON: {e}")))?;
    let command = doc
        .get("command")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ConfigError("config needs a string field `command`".into()))?
        .to_string();
    let body = doc.get("config").cloned().unwrap_or(serde_json::json!({}));
    let parse_err = |field: &str, e: serde_json::Error| ConfigError(format!("config.{field}: {e}"));
    match command.as_str() {
        "epstein-surface" => {
            let cfg: EpsteinSurfaceConfig =
                serde_json::from_value(body).map_err(|e| parse_err("epstein-surface", e))?;
            run_epstein_surface(&cfg, out)
        }
        "cmc-foliate" => {
            let cfg: CmcFoliateConfig =
                serde_json::from_value(body).map_err(|e| parse_err("cmc-foliate", e))?;
            run_cmc_foliate(&cfg, out)
        }
        "minimal-path" => {
            let cfg: MinimalPathConfig =
                serde_json::from_value(body).map_err(|e| parse_err("minimal-path", e))?;
            run_minimal_path(&cfg, out)
        }
        "halfpipe-limit" => {
            let cfg: HalfpipeLimitConfig =
                serde_json::from_value(body).map_err(|e| parse_err("halfpipe-limit", e))?;
            run_halfpipe_limit(&cfg, out)
        }
        "torus-critical" => {
            let cfg: TorusPairConfig =
                serde_json::from_value(body).map_err(|e| parse_err("torus-critical", e))?;
            run_torus_critical(&cfg, out)
        }
        "torus-line" => {
            let cfg: TorusLineConfig =
                serde_json::from_value(body).map_err(|e| parse_err("torus-line", e))?;
            run_torus_line(&cfg, out)
        }
        "flat-periods" => {
            let cfg: FlatPeriodsConfig =
                serde_json::from_value(body).map_err(|e| parse_err("flat-periods", e))?;
            run_flat_periods(&cfg, out)
        }
        "selftest" => {
            let cfg: SelftestConfig =
                serde_json::from_value(body).map_err(|e| parse_err("selftest", e))?;
            run_selftest(&cfg, out)
        }
        other => Err(ConfigError(format!("unknown command {other:?}")).into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("epstein-lab: certificate failure (see manifest.json)");
            ExitCode::from(1)
        }
        Err(err) => {
            if err.downcast_ref::<ConfigError>().is_some() {
                eprintln!("epstein-lab: {err}");
                ExitCode::from(2)
            } else {
                eprintln!("epstein-lab: pipeline error: {err}");
                ExitCode::from(1)
            }
        }
    }
}
