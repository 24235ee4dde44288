//! Study harness: builds the problem from a configuration, runs the solvers
//! and writes images, traces and summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::config::{StepSize, StudyConfig, StudyKind};
use super::files::{save_pgm, save_raw, sidecar_path};
use super::metrics::{psnr_from_rmse, rmse_slice};
use super::noise::{add_noise, NoiseSpec};
use super::phantom::make_phantom;
use super::trace::{ConvergenceTrace, TraceRow};
use crate::comm::{partition_angles, partition_image, CommStats, MessageBus};
use crate::error::{Error, Result};
use crate::projector::{build_projector, forward_project, ImageGrid, ScanGeometry, Sinogram, SparseProjector};
use crate::quantizers::{elbow_select, Elbow, QuantizerKind, QuantizerSpec};
use crate::solvers::{build_nodes, ctr_solve_observed, dadmm_run, relative_change, stable_local_step, CtrConfig};

/// Ground truth, geometry and noiseless data shared by every run of a study.
#[derive(Clone, Debug)]
pub struct Problem {
    pub truth: ImageGrid,
    /// Side of the reconstruction grid, larger than the truth when padded.
    pub work_side: usize,
    pub geometry: ScanGeometry,
    pub projector: SparseProjector,
    pub clean: Sinogram,
}

impl Problem {
    pub fn build(cfg: &StudyConfig) -> Result<Problem> {
        let truth = make_phantom(cfg.phantom.kind, cfg.phantom.side, cfg.phantom.path.as_deref())?;
        let work = if cfg.geometry.pad {
            truth.pad_to(ImageGrid::padded_side(truth.width()))?
        } else {
            truth.clone()
        };
        let work_side = work.width();
        let detectors = cfg
            .geometry
            .detectors
            .unwrap_or_else(|| ScanGeometry::diagonal_detectors(work_side));
        let mut geometry = ScanGeometry::uniform(cfg.geometry.angles, detectors, work_side);
        geometry.detector_spacing = cfg.geometry.spacing;
        geometry.validate()?;
        let projector = build_projector(&geometry)?;
        let clean = forward_project(&projector, &work)?;
        Ok(Problem {
            truth,
            work_side,
            geometry,
            projector,
            clean,
        })
    }

    /// Peak used to scale noise: configured, or the noiseless sinogram maximum.
    pub fn x_peak(&self, cfg: &StudyConfig) -> f64 {
        cfg.noise.x_peak.unwrap_or_else(|| self.clean.max())
    }

    pub fn sinogram(&self, cfg: &StudyConfig, nsd: f64) -> Result<Sinogram> {
        let spec = NoiseSpec {
            nsd,
            seed: cfg.noise.seed,
        };
        add_noise(&self.clean, &spec, self.x_peak(cfg))
    }

    /// The truth-sized window of a reconstruction on the work grid.
    pub fn crop(&self, pixels: Vec<f64>) -> Result<ImageGrid> {
        let img = ImageGrid::new(self.work_side, self.work_side, pixels)?;
        if self.work_side == self.truth.width() {
            Ok(img)
        } else {
            img.crop_center(self.truth.width(), self.truth.height())
        }
    }

    fn error_of(&self, pixels: &[f64]) -> f64 {
        if self.work_side == self.truth.width() {
            rmse_slice(pixels, self.truth.pixels())
        } else {
            let img = self.crop(pixels.to_vec()).expect("work grid holds the truth");
            rmse_slice(img.pixels(), self.truth.pixels())
        }
    }

    fn objective(&self, pixels: &[f64], d: &Sinogram, scratch: &mut [f64]) -> f64 {
        self.projector.apply(pixels, scratch);
        0.5 * scratch
            .iter()
            .zip(d.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }

    fn i_max(&self, cfg: &StudyConfig) -> f64 {
        cfg.metrics.i_max.unwrap_or_else(|| self.truth.max())
    }
}

fn psnr_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub method: &'static str,
    pub quantizer: QuantizerKind,
    pub k: Option<usize>,
    pub quality: Option<u8>,
    pub nsd: f64,
    pub nodes: usize,
    pub iterations: usize,
    pub converged: bool,
    pub rmse: f64,
    /// Written as the string `"inf"` for an exact reconstruction.
    #[serde(serialize_with = "psnr_json")]
    pub psnr_db: f64,
    pub best_rmse: f64,
    pub best_iteration: usize,
    /// Payload bytes sent over the whole run, summed over nodes.
    pub bytes_sent: u64,
    pub header_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub image: ImageGrid,
    pub trace: ConvergenceTrace,
    pub comm: Option<CommStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElbowReport {
    pub curve: Vec<(usize, f64)>,
    pub selected: Option<usize>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub study: StudyKind,
    pub runs: Vec<RunRecord>,
    pub elbow: Option<ElbowReport>,
}

impl StudyReport {
    pub fn run(&self, name: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.summary.name == name)
    }
}

fn finish(
    problem: &Problem,
    cfg: &StudyConfig,
    mut summary: RunSummary,
    image: ImageGrid,
    trace: ConvergenceTrace,
    comm: Option<CommStats>,
) -> RunRecord {
    summary.rmse = rmse_slice(image.pixels(), problem.truth.pixels());
    summary.psnr_db = psnr_from_rmse(summary.rmse, problem.i_max(cfg));
    if let Some((it, e)) = trace.best() {
        summary.best_iteration = it;
        summary.best_rmse = e;
    }
    if let Some(c) = &comm {
        let t = c.totals();
        summary.bytes_sent = t.bytes_sent;
        summary.header_bytes = t.header_sent + t.header_received;
    }
    RunRecord {
        summary,
        image,
        trace,
        comm,
    }
}

/// Centralised gradient descent on `d`, traced every iteration.
pub fn run_ctr(problem: &Problem, d: &Sinogram, cfg: &StudyConfig, name: &str, nsd: f64) -> Result<RunRecord> {
    let learning_rate = match cfg.ctr.learning_rate {
        StepSize::Fixed(v) => v,
        StepSize::Auto => 1.0 / problem.projector.gram_norm_estimate(100),
    };
    let ctr = CtrConfig {
        learning_rate,
        iterations: cfg.ctr_iterations(),
        stop_tol: cfg.ctr.stop_tol,
    };
    let mut trace = ConvergenceTrace::default();
    let mut prev = vec![0.0; problem.projector.n_cols()];
    let mut scratch = vec![0.0; problem.projector.n_rows()];
    let result = ctr_solve_observed(&problem.projector, d, &ctr, |it, u| {
        trace.push(TraceRow {
            iteration: it,
            rmse: Some(problem.error_of(u)),
            relative_change: relative_change(&prev, u),
            objective: problem.objective(u, d, &mut scratch),
            bytes_sent: 0,
            bytes_received: 0,
            header_bytes: 0,
        });
        prev.copy_from_slice(u);
    })?;
    let summary = RunSummary {
        name: name.to_string(),
        method: StudyKind::CtrBaseline.name(),
        quantizer: QuantizerKind::Identity,
        k: None,
        quality: None,
        nsd,
        nodes: 1,
        iterations: result.iterations,
        converged: result.converged,
        rmse: 0.0,
        psnr_db: 0.0,
        best_rmse: 0.0,
        best_iteration: 0,
        bytes_sent: 0,
        header_bytes: 0,
    };
    let image = problem.crop(result.image.into_pixels())?;
    Ok(finish(problem, cfg, summary, image, trace, None))
}

/// Decentralised ADMM on `d` over `partition.nodes` in-process nodes.
pub fn run_dadmm(
    problem: &Problem,
    d: &Sinogram,
    cfg: &StudyConfig,
    quantizer: &QuantizerSpec,
    name: &str,
    nsd: f64,
) -> Result<RunRecord> {
    let m = cfg.partition.nodes;
    let angles = partition_angles(problem.geometry.n_angles(), m)?;
    let segments = partition_image(problem.projector.n_cols(), problem.work_side, m)?;
    let nodes = build_nodes(&problem.projector, d, &angles, &segments)?;
    let eta1 = match cfg.admm.eta1 {
        StepSize::Fixed(v) => v,
        StepSize::Auto => stable_local_step(&nodes, cfg.admm.rho),
    };
    let mut admm = cfg.admm_config(eta1);
    admm.quantizer = quantizer.clone();

    let bus = MessageBus::new(m);
    let mut points = Vec::new();
    let mut scratch = vec![0.0; problem.projector.n_rows()];
    let outcome = dadmm_run(nodes, &segments, &admm, &bus, |snap| {
        points.push((
            snap.iteration,
            problem.error_of(&snap.x),
            snap.relative_change,
            problem.objective(&snap.x, d, &mut scratch),
        ));
    })?;

    let mut trace = ConvergenceTrace::default();
    for (iteration, e, change, objective) in points {
        let t = outcome.comm.iteration_totals(iteration);
        trace.push(TraceRow {
            iteration,
            rmse: Some(e),
            relative_change: change,
            objective,
            bytes_sent: t.bytes_sent,
            bytes_received: t.bytes_received,
            header_bytes: t.header_sent + t.header_received,
        });
    }
    let method = match quantizer.kind {
        QuantizerKind::Identity => StudyKind::Dadmm,
        QuantizerKind::Kmeans => StudyKind::DadmmK,
        QuantizerKind::Jpeg => StudyKind::DadmmJ,
    };
    let summary = RunSummary {
        name: name.to_string(),
        method: method.name(),
        quantizer: quantizer.kind,
        k: (quantizer.kind == QuantizerKind::Kmeans).then_some(quantizer.k),
        quality: (quantizer.kind == QuantizerKind::Jpeg).then_some(quantizer.quality),
        nsd,
        nodes: m,
        iterations: outcome.iterations,
        converged: outcome.converged,
        rmse: 0.0,
        psnr_db: 0.0,
        best_rmse: 0.0,
        best_iteration: 0,
        bytes_sent: 0,
        header_bytes: 0,
    };
    let image = problem.crop(outcome.image.into_pixels())?;
    Ok(finish(problem, cfg, summary, image, trace, Some(outcome.comm)))
}

fn quantizer_for(cfg: &StudyConfig, kind: StudyKind) -> QuantizerSpec {
    let mut q = cfg.quantizer.clone();
    q.kind = match kind {
        StudyKind::DadmmK => QuantizerKind::Kmeans,
        StudyKind::DadmmJ => QuantizerKind::Jpeg,
        _ => q.kind,
    };
    q
}

fn single(problem: &Problem, cfg: &StudyConfig, kind: StudyKind, nsd: f64, name: &str) -> Result<RunRecord> {
    let d = problem.sinogram(cfg, nsd)?;
    match kind {
        StudyKind::CtrBaseline => run_ctr(problem, &d, cfg, name, nsd),
        _ => run_dadmm(problem, &d, cfg, &quantizer_for(cfg, kind), name, nsd),
    }
}

/// Runs the configured study and returns every run in memory.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let problem = Problem::build(cfg)?;
    let nsd = cfg.noise.nsd;
    let mut runs = Vec::new();
    let mut elbow = None;
    match cfg.study {
        StudyKind::CtrBaseline => runs.push(single(&problem, cfg, cfg.study, nsd, "ctr")?),
        kind @ (StudyKind::Dadmm | StudyKind::DadmmK | StudyKind::DadmmJ) => {
            runs.push(single(&problem, cfg, kind, nsd, kind.name())?)
        }
        StudyKind::KSweep => {
            let d = problem.sinogram(cfg, nsd)?;
            let mut curve = Vec::new();
            for &k in &cfg.sweep.k {
                let mut q = quantizer_for(cfg, StudyKind::DadmmK);
                q.k = k;
                let run = run_dadmm(&problem, &d, cfg, &q, &format!("dadmm-k_k{k}"), nsd)?;
                curve.push((k, run.summary.rmse));
                runs.push(run);
            }
            let (selected, ratio) = match elbow_select(&curve)? {
                Elbow::At { k, ratio } => (Some(k), Some(ratio)),
                Elbow::NotFound => (None, None),
            };
            elbow = Some(ElbowReport {
                curve,
                selected,
                ratio,
            });
        }
        StudyKind::NoiseLadder => {
            for &level in &cfg.ladder.nsd {
                for &method in &cfg.ladder.methods {
                    let name = format!("{}_nsd{level}", method.name());
                    runs.push(single(&problem, cfg, method, level, &name)?);
                }
            }
        }
    }
    Ok(StudyReport {
        study: cfg.study,
        runs,
        elbow,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    study: &'static str,
    runs: Vec<&'a RunSummary>,
    elbow: Option<&'a ElbowReport>,
}

#[derive(Serialize)]
struct Seeds {
    noise: u64,
    quantizer: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    label: &'static str,
    config_sha256: String,
    seeds: Seeds,
    created_unix: u64,
    files: &'a [String],
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), csv::Error>, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    f(&mut out).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(out)
}

/// Writes `manifest.json` into `dir` listing `files` by name, with the hash of
/// the resolved configuration, its seeds and the crate version.
pub fn write_manifest(cfg: &StudyConfig, label: &'static str, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let names: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = Manifest {
        tool: "qtomo",
        version: env!("CARGO_PKG_VERSION"),
        label,
        config_sha256: Sha256::digest(cfg.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        seeds: Seeds {
            noise: cfg.noise.seed,
            quantizer: cfg.quantizer.seed,
        },
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        files: &names,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

/// Writes every artefact of `report` into `dir` and returns their paths.
///
/// All files except the manifest's timestamp are a pure function of the
/// configuration.
pub fn write_report(report: &StudyReport, cfg: &StudyConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for run in &report.runs {
        let stem = &run.summary.name;
        let raw = dir.join(format!("{stem}.f32"));
        save_raw(&raw, &run.image)?;
        written.push(raw.clone());
        written.push(sidecar_path(&raw));
        if cfg.output.pgm {
            let pgm = dir.join(format!("{stem}.pgm"));
            save_pgm(&pgm, &run.image)?;
            written.push(pgm);
        }
        let path = dir.join(format!("{stem}_trace.csv"));
        write_file(&path, &csv_bytes(|o| run.trace.write_csv(o), &path)?)?;
        written.push(path);
        if let Some(comm) = &run.comm {
            let path = dir.join(format!("{stem}_comm.csv"));
            write_file(&path, &csv_bytes(|o| comm.write_csv(o), &path)?)?;
            written.push(path);
        }
    }
    if let Some(elbow) = &report.elbow {
        let path = dir.join("elbow.csv");
        let mut text = String::from("k,rmse\n");
        for (k, e) in &elbow.curve {
            text.push_str(&format!("{k},{e}\n"));
        }
        write_file(&path, text.as_bytes())?;
        written.push(path);
    }

    let summary = Summary {
        study: report.study.name(),
        runs: report.runs.iter().map(|r| &r.summary).collect(),
        elbow: report.elbow.as_ref(),
    };
    let path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    written.push(path);

    let path = dir.join("config.toml");
    write_file(&path, cfg.to_toml_string().as_bytes())?;
    written.push(path);

    written.push(write_manifest(cfg, report.study.name(), dir, &written)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(study: &str, extra: &[&str]) -> StudyConfig {
        let mut o: Vec<String> = [
            format!("study=\"{study}\""),
            "phantom.side=16".into(),
            "geometry.angles=24".into(),
            "admm.outer=6".into(),
            "admm.inner_u=3".into(),
            "partition.nodes=2".into(),
        ]
        .into();
        o.extend(extra.iter().map(|s| s.to_string()));
        StudyConfig::from_toml_str("", &o).unwrap()
    }

    #[test]
    fn ctr_baseline_traces_every_iteration() {
        let report = run_study(&small("ctr-baseline", &[])).unwrap();
        let run = &report.runs[0];
        assert_eq!(run.trace.len(), 18);
        assert_eq!(run.summary.iterations, 18);
        assert_eq!(run.summary.nodes, 1);
        let e = run.trace.rmse_series();
        assert!(e.last().unwrap() < &e[0]);
        assert_eq!(Some(run.summary.rmse), run.trace.final_rmse());
    }

    #[test]
    fn codec_bypass_matches_plain_dadmm() {
        let cfg = small("dadmm", &[]);
        let plain = run_study(&cfg).unwrap();
        let problem = Problem::build(&cfg).unwrap();
        let d = problem.sinogram(&cfg, 0.0).unwrap();
        for name in ["dadmm-k", "dadmm-j"] {
            let bypass = run_dadmm(&problem, &d, &cfg, &QuantizerSpec::identity(), name, 0.0).unwrap();
            assert_eq!(bypass.trace, plain.runs[0].trace);
            assert_eq!(bypass.image, plain.runs[0].image);
        }
    }

    #[test]
    fn traces_carry_per_iteration_traffic() {
        let report = run_study(&small("dadmm", &[])).unwrap();
        let run = &report.runs[0];
        let n = 16 * 16;
        for row in run.trace.rows() {
            // Each of two nodes sends its half as f32 to the other.
            assert_eq!(row.bytes_sent, 2 * (4 * n as u64 / 2));
            assert_eq!(row.bytes_received, row.bytes_sent);
            assert_eq!(row.header_bytes, 4 * crate::quantizers::HEADER_BYTES as u64);
        }
        assert_eq!(run.summary.bytes_sent, 6 * 4 * n as u64);
    }

    #[test]
    fn padding_is_excluded_from_metrics() {
        let report = run_study(&small("dadmm", &["geometry.pad=true"])).unwrap();
        let run = &report.runs[0];
        assert_eq!((run.image.width(), run.image.height()), (16, 16));
        assert!(run.summary.rmse.is_finite());
    }

    #[test]
    fn ladder_names_and_noise_levels() {
        let cfg = small("noise-ladder", &["ladder.nsd=[0, 1]", "admm.outer=2"]);
        let report = run_study(&cfg).unwrap();
        let names: Vec<_> = report.runs.iter().map(|r| r.summary.name.as_str()).collect();
        assert_eq!(names, ["dadmm-k_nsd0", "dadmm-j_nsd0", "dadmm-k_nsd1", "dadmm-j_nsd1"]);
        assert_eq!(report.runs[2].summary.nsd, 1.0);
        assert_eq!(report.runs[1].summary.quality, Some(30));
    }

    #[test]
    fn report_files_are_reproducible() {
        let cfg = small("k-sweep", &["admm.outer=2", "sweep.k=[2, 3, 4]"]);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files_a = write_report(&run_study(&cfg).unwrap(), &cfg, a.path()).unwrap();
        let files_b = write_report(&run_study(&cfg).unwrap(), &cfg, b.path()).unwrap();
        assert_eq!(files_a.len(), files_b.len());
        for (x, y) in files_a.iter().zip(&files_b) {
            if x.ends_with("manifest.json") {
                continue;
            }
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["label"], "k-sweep");
        assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
        assert!(a.path().join("elbow.csv").exists());
    }
}
