use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qtomo::comm::{comm_model, memory_model, partition_angles, partition_image};
use qtomo::experiments::{
    run_study, save_pgm, save_raw, sidecar_path, write_manifest, write_report, Problem,
    StudyConfig, StudyKind, StudyReport,
};
use qtomo::projector::ImageGrid;
use qtomo::Error;

#[derive(Parser, Debug)]
#[command(name = "qtomo", version, about = "Tomographic reconstruction with quantized decentralized ADMM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Study configuration in TOML.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-path assignment applied after the file, e.g. quantizer.k=3.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; falls back to output.dir in the configuration.
    #[arg(long, env = "QTOMO_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom and its (optionally noisy) sinogram.
    Project(Common),
    /// Centralised gradient-descent reconstruction.
    ReconstructCtr(Common),
    /// Decentralised ADMM with the configured quantizer.
    ReconstructDadmm(Common),
    /// K-means cluster-count sweep with elbow selection.
    SweepK(Common),
    /// Quantized runs over a ladder of noise levels.
    NoiseStudy(Common),
    /// Per-node memory and communication models.
    CostModel {
        #[arg(long)]
        nodes: usize,
        /// Image size X in bytes.
        #[arg(long)]
        image_bytes: f64,
        /// Total sinogram size D in bytes.
        #[arg(long)]
        data_bytes: f64,
    },
    /// Print the resolved configuration, geometry and partitions.
    Info(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::Dimension { .. } => 1,
        Error::Diverged { .. } => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Codec { .. }
        | Error::Comm { .. }
        | Error::WorkerPanic(_) => 3,
    }
}

fn load(common: &Common) -> Result<StudyConfig, Error> {
    match &common.config {
        Some(path) => StudyConfig::load(path, &common.overrides),
        None => StudyConfig::from_toml_str("", &common.overrides),
    }
}

fn out_dir(common: &Common, cfg: &StudyConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("qtomo-out"))
}

fn print_report(report: &StudyReport, dir: &Path) {
    println!(
        "{:<22} {:>6} {:>5} {:>12} {:>9} {:>12} {:>14}",
        "run", "nodes", "iters", "rmse", "psnr_db", "best_rmse", "bytes_sent"
    );
    for r in &report.runs {
        let s = &r.summary;
        println!(
            "{:<22} {:>6} {:>5} {:>12.6} {:>9.3} {:>12.6} {:>14}",
            s.name, s.nodes, s.iterations, s.rmse, s.psnr_db, s.best_rmse, s.bytes_sent
        );
    }
    if let Some(e) = &report.elbow {
        match e.selected {
            Some(k) => println!("elbow at k = {k} (ratio {:.3})", e.ratio.unwrap_or(f64::NAN)),
            None => println!("no elbow found"),
        }
    }
    println!("results in {}", dir.display());
}

fn study(common: &Common, kind: StudyKind) -> Result<(), Error> {
    let mut cfg = load(common)?;
    cfg.study = kind;
    let report = run_study(&cfg)?;
    let dir = out_dir(common, &cfg);
    write_report(&report, &cfg, &dir)?;
    print_report(&report, &dir);
    Ok(())
}

fn project(common: &Common) -> Result<(), Error> {
    let cfg = load(common)?;
    let problem = Problem::build(&cfg)?;
    let d = problem.sinogram(&cfg, cfg.noise.nsd)?;
    let dir = out_dir(common, &cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let sino = ImageGrid::new(d.n_detectors(), d.n_angles(), d.values().to_vec())?;
    let mut files = Vec::new();
    for (stem, img) in [("phantom", &problem.truth), ("sinogram", &sino)] {
        let raw = dir.join(format!("{stem}.f32"));
        save_raw(&raw, img)?;
        files.push(sidecar_path(&raw));
        files.push(raw);
        if cfg.output.pgm {
            let pgm = dir.join(format!("{stem}.pgm"));
            save_pgm(&pgm, img)?;
            files.push(pgm);
        }
    }
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    files.push(path);
    write_manifest(&cfg, "project", &dir, &files)?;
    println!(
        "{}x{} phantom, {} angles x {} detectors, sinogram max {:.6}, nsd {}%",
        problem.truth.width(),
        problem.truth.height(),
        d.n_angles(),
        d.n_detectors(),
        problem.clean.max(),
        cfg.noise.nsd
    );
    println!("results in {}", dir.display());
    Ok(())
}

fn cost_model(nodes: usize, image_bytes: f64, data_bytes: f64) -> Result<(), Error> {
    if nodes == 0 {
        return Err(Error::Config("--nodes must be at least 1".into()));
    }
    for (name, v) in [("--image-bytes", image_bytes), ("--data-bytes", data_bytes)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be a non-negative size, got {v}")));
        }
    }
    let memory = memory_model(nodes, data_bytes, image_bytes);
    let comm = comm_model(nodes, image_bytes);
    println!("nodes                M = {nodes}");
    println!("image bytes          X = {image_bytes}");
    println!("data bytes           D = {data_bytes}");
    println!("memory per node      D/{nodes} + 3X = {memory}");
    println!(
        "communication        2({nodes}-1)/{nodes} X = {:.6}X = {comm}",
        comm / image_bytes.max(f64::MIN_POSITIVE)
    );
    println!("limit M -> inf       memory 3X = {}, communication 2X = {}", 3.0 * image_bytes, 2.0 * image_bytes);
    Ok(())
}

fn info(common: &Common) -> Result<(), Error> {
    let cfg = load(common)?;
    let problem = Problem::build(&cfg)?;
    let m = cfg.partition.nodes;
    let angles = partition_angles(problem.geometry.n_angles(), m)?;
    let segments = partition_image(problem.projector.n_cols(), problem.work_side, m)?;
    println!("qtomo {}", env!("CARGO_PKG_VERSION"));
    println!(
        "grid {}x{} (work {}x{}), {} angles, {} detectors, {} nonzeros",
        problem.truth.width(),
        problem.truth.height(),
        problem.work_side,
        problem.work_side,
        problem.geometry.n_angles(),
        problem.geometry.n_detectors,
        problem.projector.nnz()
    );
    for node in 0..m {
        let (rows, cols) = segments.block_shape(node);
        println!(
            "node {node}: {} angles, segment {:?} ({rows}x{cols})",
            angles.assignment[node].len(),
            segments.ranges[node]
        );
    }
    let l_full = problem.projector.gram_norm_estimate(100);
    let l_node = angles
        .assignment
        .iter()
        .map(|a| problem.projector.select_angles(a).gram_norm_estimate(100))
        .fold(0.0, f64::max);
    println!("operator norm estimates: |P|^2 = {l_full:.6e}, max_m |P_m|^2 = {l_node:.6e}");
    let x = 4.0 * problem.projector.n_cols() as f64;
    let d = 4.0 * problem.projector.n_rows() as f64;
    println!(
        "f32 cost model: memory {} bytes/node, communication {} bytes/node/iteration",
        memory_model(m, d, x),
        comm_model(m, x)
    );
    println!("--- resolved configuration ---");
    print!("{}", cfg.to_toml_string());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Project(c) => project(c),
        Command::ReconstructCtr(c) => study(c, StudyKind::CtrBaseline),
        Command::ReconstructDadmm(c) => study(c, StudyKind::Dadmm),
        Command::SweepK(c) => study(c, StudyKind::KSweep),
        Command::NoiseStudy(c) => study(c, StudyKind::NoiseLadder),
        Command::CostModel {
            nodes,
            image_bytes,
            data_bytes,
        } => cost_model(*nodes, *image_bytes, *data_bytes),
        Command::Info(c) => info(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(out: Option<&str>) -> Common {
        Common {
            config: None,
            overrides: Vec::new(),
            out: out.map(PathBuf::from),
        }
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Geometry("x".into())), 1);
        assert_eq!(
            exit_code(&Error::Diverged {
                iteration: 3,
                norm: 1e13
            }),
            2
        );
        let io = Error::Io {
            path: "f".into(),
            source: std::io::Error::other("denied"),
        };
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&Error::WorkerPanic(0)), 3);
    }

    #[test]
    fn flag_beats_configured_output_dir() {
        let mut cfg = StudyConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(out_dir(&common(None), &cfg), PathBuf::from("qtomo-out"));
        cfg.output.dir = Some("from-config".into());
        assert_eq!(out_dir(&common(None), &cfg), PathBuf::from("from-config"));
        assert_eq!(out_dir(&common(Some("flag")), &cfg), PathBuf::from("flag"));
    }

    #[test]
    fn cost_model_rejects_bad_sizes() {
        assert!(matches!(cost_model(0, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(cost_model(2, -1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(cost_model(2, 1.0, f64::NAN), Err(Error::Config(_))));
    }
}
