//! Phantoms, sinogram noise, image metrics and the study harness.

mod config;
mod files;
mod metrics;
mod noise;
mod phantom;
mod study;
mod trace;

pub use config::{
    AdmmSection, CtrSection, GeometryConfig, LadderSection, MetricsSection, NoiseSection,
    OutputSection, PartitionConfig, PhantomConfig, StepSize, StudyConfig, StudyKind, SweepSection,
};
pub use files::{load_image, load_raw, save_pgm, save_raw, sidecar_path};
pub use metrics::{psnr, psnr_from_rmse, rmse, rmse_slice};
pub use noise::{add_noise, noise_sigma, NoiseSpec};
pub use phantom::{make_phantom, shepp_logan, three_level, PhantomKind, MIN_SIDE, THREE_LEVELS};
pub use study::{
    run_ctr, run_dadmm, run_study, write_manifest, write_report, ElbowReport, Problem, RunRecord, RunSummary,
    StudyReport,
};
pub use trace::{ConvergenceTrace, TraceRow};
