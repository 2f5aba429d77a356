//! PSNR and SSIM over volumes, slices and blocks.

mod quality;
mod report;

pub use quality::{mse, psnr, psnr_from_mse, ssim, SsimMode, SsimParams, DEFAULT_K1, DEFAULT_K2, DEFAULT_WINDOW};
pub use report::{evaluate_pair, format_report, load_report, save_report, EvalOptions, QualityReport, SliceMetrics};
