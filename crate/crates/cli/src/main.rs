//! Command-line front end: simulate phantoms, fit T2 maps, regenerate
//! contrast images, difference and score maps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use t2pinn::config::{RunConfig, RunManifest};
use t2pinn::format::{self, Window};
use t2pinn::phantom::make_phantom;
use t2pinn::pipeline::{
    build_mask, diff_map, generate_frames, map_lsq, map_pinn, FitMaps, ImageSeries,
};
use t2pinn::score::score_map;
use t2pinn::Error;

#[derive(Parser)]
#[command(
    name = "t2pinn",
    version,
    about = "Voxel-wise T2 mapping by least squares or a physics-informed network"
)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true, env = "T2PINN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the noise and network seeds of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for voxel fitting; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured phantom: echo series plus truth maps.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit T2 and M0 maps to an echo series.
    Fit {
        /// Series file, or CSV when the name ends in `.csv`.
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Lsq)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Also write PNG renderings of the T2 and M0 maps.
        #[arg(long)]
        png: bool,
    },
    /// Synthesize contrast images from a trained field at arbitrary times.
    Generate {
        field: PathBuf,
        /// Comma-separated echo times in ms, increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference map `a - b`.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-region error of an estimated map against a truth map; regions
    /// are the distinct truth values.
    Score { estimate: PathBuf, truth: PathBuf },
    /// Render a map as an 8-bit grayscale PNG.
    Render {
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Display window `low,high`; defaults to the map's value range.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        window: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Lsq,
    Pinn,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Self::Lsq => "lsq",
            Self::Pinn => "pinn",
        }
    }
}

/// Exit code of a failed run.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParams(_)
        | Error::InvalidSeries(_)
        | Error::InvalidLayout(_)
        | Error::InvalidConfig(_)
        | Error::DimensionMismatch(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Degenerate(_) | Error::NonDecaying(_) | Error::Numerical(_) => 4,
    }
}

fn load_config(cli: &Cli) -> t2pinn::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn create_dir(dir: &Path) -> t2pinn::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> t2pinn::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

struct Run<'a> {
    cli: &'a Cli,
    config: RunConfig,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.push(path.display().to_string());
        path.to_path_buf()
    }

    fn write_manifest(self, dir: &Path, command: &str) -> t2pinn::Result<()> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            threads: self.cli.threads,
            inputs: self.inputs,
            outputs: self.outputs,
            config: self.config,
        };
        write_text(&dir.join("manifest.toml"), &manifest.to_toml())
    }
}

fn read_series(path: &Path) -> t2pinn::Result<ImageSeries> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        let file =
            fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        format::read_series_csv(file)
    } else {
        format::load_series(path)
    }
}

fn write_maps(run: &mut Run, dir: &Path, maps: &FitMaps, png: bool) -> t2pinn::Result<()> {
    for map in [&maps.t2, &maps.m0, &maps.residual] {
        let path = run.output(&dir.join(format!("{}.t2m", map.kind().as_str())));
        format::save_map(&path, map)?;
    }
    if png {
        for map in [&maps.t2, &maps.m0] {
            let path = run.output(&dir.join(format!("{}.png", map.kind().as_str())));
            format::save_png(&path, map, Window::auto(map))?;
        }
    }
    let dims = maps.t2.dims();
    let mut status = String::from("row,col,status\n");
    for (idx, s) in maps.status.iter().enumerate() {
        status.push_str(&format!(
            "{},{},{}\n",
            idx / dims.cols,
            idx % dims.cols,
            s.code()
        ));
    }
    let path = run.output(&dir.join("status.csv"));
    write_text(&path, &status)?;
    for (s, n) in maps.status_counts() {
        println!("{s:?}: {n}");
    }
    Ok(())
}

fn run(cli: &Cli) -> t2pinn::Result<()> {
    let config = load_config(cli)?;
    let mut run = Run {
        cli,
        config,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Simulate { out } => {
            create_dir(out)?;
            let phantom = make_phantom(&run.config.phantom)?;
            let series = phantom.series(&run.config.times, &run.config.noise)?;
            format::save_series(&run.output(&out.join("series.t2s")), &series)?;
            format::save_map(&run.output(&out.join("truth_t2.t2m")), &phantom.t2_map())?;
            format::save_map(&run.output(&out.join("truth_m0.t2m")), &phantom.m0_map())?;
            run.write_manifest(out, "simulate")
        }
        Command::Fit {
            input,
            method,
            out,
            png,
        } => {
            let series = read_series(input)?;
            run.inputs.push(input.display().to_string());
            create_dir(out)?;
            let mask = build_mask(&series, run.config.mask_fraction)?;
            match method {
                Method::Lsq => {
                    let maps = map_lsq(&series, &mask, &run.config.lsq, cli.threads)?;
                    write_maps(&mut run, out, &maps, *png)?;
                }
                Method::Pinn => {
                    let result = map_pinn(&series, &mask, &run.config.pinn, cli.threads)?;
                    write_maps(&mut run, out, &result.maps, *png)?;
                    format::save_field(&run.output(&out.join("field.t2f")), &result.field)?;
                }
            }
            run.write_manifest(out, &format!("fit --method {}", method.name()))
        }
        Command::Generate { field, times, out } => {
            let field = format::load_field(field)?;
            let frames = generate_frames(&field, times)?;
            format::save_series(out, &frames)
        }
        Command::Diff { a, b, out } => {
            let d = diff_map(&format::load_map(a)?, &format::load_map(b)?)?;
            if d.mask_mismatch {
                eprintln!(
                    "warning: masks differ; the difference covers voxels masked in both maps"
                );
            }
            format::save_map(out, &d.map)
        }
        Command::Score { estimate, truth } => {
            let report = score_map(&format::load_map(estimate)?, &format::load_map(truth)?)?;
            println!("truth,voxels,fitted,median_estimate,median_rel_error");
            for r in &report.regions {
                println!(
                    "{},{},{},{},{}",
                    r.truth, r.voxels, r.fitted, r.median_estimate, r.median_rel_error
                );
            }
            println!("worst_median_rel_error,{}", report.worst_median_rel_error());
            Ok(())
        }
        Command::Render { map, out, window } => {
            let map = format::load_map(map)?;
            let window = match window.as_deref() {
                Some(&[low, high]) if low < high => Window { low, high },
                Some(_) => {
                    return Err(Error::InvalidConfig(
                        "window needs two values low,high with low < high".into(),
                    ))
                }
                None => Window::auto(&map),
            };
            format::save_png(out, &map, window)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
