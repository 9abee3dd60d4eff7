//! Command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input (scenario, arguments, domain
//! errors), 1 any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qc_reliability::pipeline::{self, load_scenario, resolve_out_dir, RunOptions, Scenario};
use qc_reliability::seed;
use qc_reliability::wall::{design_point, MasonrySpec, WallGeometry};
use qc_reliability::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qcrel",
    version,
    about = "Quality control as a probabilistic filter on material variability"
)]
struct Cli {
    /// Seed replacing the scenario's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (else $QCREL_OUT, else the scenario's report.out_dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scenario file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write reports and CSVs.
    Run {
        /// Use the pinned `fixed_v` values of every channel that has them.
        #[arg(long)]
        fixed_v: bool,
    },
    /// Write independent and AR(2) OC curves for one channel.
    Oc {
        #[arg(long)]
        channel: String,
        /// Simulations per sweep point (default: scenario `oc.n_sim`).
        #[arg(long)]
        n_sim: Option<usize>,
    },
    /// Calibrate from the pinned `fixed_v` values only.
    Calibrate,
    /// Print the wall design point and homogeneity degrees.
    Wall {
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        e: Option<f64>,
        #[arg(long)]
        f_b: Option<f64>,
        #[arg(long)]
        f_m: Option<f64>,
    },
}

fn scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli.scenario.as_deref().ok_or_else(|| Error::Scenario {
        path: "--scenario".into(),
        message: "this command needs a scenario file".into(),
    })?;
    load_scenario(path)
}

fn print_files(dir: &Path, names: impl IntoIterator<Item = String>) {
    for n in names {
        println!("wrote {}", dir.join(n).display());
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { fixed_v } => {
            let sc = scenario(cli)?;
            let dir = resolve_out_dir(cli.out.as_deref(), &sc);
            let opts = RunOptions {
                seed: cli.seed,
                force_fixed_v: *fixed_v,
                skip_oc: false,
            };
            let out = pipeline::evaluate(&sc, opts)?;
            pipeline::write_outputs(&out, &dir)?;
            print!("{}", out.files["report.txt"]);
            print_files(&dir, out.files.keys().cloned());
        }
        Command::Calibrate => {
            let sc = scenario(cli)?;
            if let Some(c) = sc.channels.iter().find(|c| c.fixed_v.is_none()) {
                return Err(Error::Scenario {
                    path: format!("channel `{}`", c.name),
                    message: "calibrate needs `fixed_v` values on every channel".into(),
                });
            }
            let dir = resolve_out_dir(cli.out.as_deref(), &sc);
            let opts = RunOptions {
                seed: cli.seed,
                force_fixed_v: true,
                skip_oc: true,
            };
            let out = pipeline::evaluate(&sc, opts)?;
            pipeline::write_outputs(&out, &dir)?;
            print!("{}", out.files["report.txt"]);
            print_files(&dir, out.files.keys().cloned());
        }
        Command::Oc { channel, n_sim } => {
            let mut sc = scenario(cli)?;
            if let Some(s) = cli.seed {
                sc.seed = s;
            }
            if let Some(n) = n_sim {
                sc.oc.n_sim = *n;
            }
            sc.validate()?;
            let index = sc.channels.iter().position(|c| &c.name == channel);
            let index = index.ok_or_else(|| Error::UnknownChannel(channel.clone()))?;
            let dir = resolve_out_dir(cli.out.as_deref(), &sc);
            let oc_seed = seed::derive(seed::derive(sc.seed, index as u64), 3);
            let (a, b) = pipeline::emit_oc(&sc, channel, &dir, oc_seed)?;
            println!("wrote {}\nwrote {}", a.display(), b.display());
        }
        Command::Wall { h, t, e, f_b, f_m } => {
            let base = match &cli.scenario {
                Some(_) => scenario(cli)?.wall.unwrap_or_default(),
                None => Default::default(),
            };
            let g = base.geometry;
            let geom = WallGeometry {
                h: h.unwrap_or(g.h),
                t: t.unwrap_or(g.t),
                e: e.unwrap_or(g.e),
            };
            let spec = MasonrySpec {
                f_b: f_b.unwrap_or(base.masonry.f_b),
                f_m: f_m.unwrap_or(base.masonry.f_m),
                ..base.masonry
            };
            let dp = design_point(&geom, &spec)?;
            println!("f_k      {:.3} MPa", dp.f_k);
            println!("r_h      {:.3}", dp.r_h);
            println!("r_e      {:.3}", dp.r_e);
            println!("A        {:.3}", dp.a);
            println!("lambda   {:.3}", dp.lambda);
            println!("Phi      {:.3}", dp.phi);
            println!("N_R      {:.1} kN/m", dp.resistance);
            println!("n_f_b    {:.3}", dp.n_f_b);
            println!("n_f_m    {:.3}", dp.n_f_m);
            println!(
                "n_r_e    {:.3}{}",
                dp.n_r_e,
                if dp.slender_branch {
                    " (slender branch)"
                } else {
                    ""
                }
            );
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let path = dir.join("wall.json");
                let json =
                    serde_json::to_string_pretty(&dp).map_err(|e| Error::Csv(e.to_string()))?;
                std::fs::write(&path, json + "\n").map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
