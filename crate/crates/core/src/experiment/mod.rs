//! Sweep orchestration: configuration, the end-to-end runner, result
//! aggregation and plot-data emission.

pub mod config;
pub mod run;
pub mod summarize;
pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::landscape::{toy_prune_demo, toy_projection, ToyApprox, ToyCase};

pub use config::RunConfig;
pub use run::{run, RunReport};
pub use summarize::{summarize, summarize_file, SummaryRow};

/// Grid side length for toy landscapes.
pub const TOY_RESOLUTION: usize = 101;

/// Files written by [`landscape_case`].
#[derive(Debug, Clone)]
pub struct ToyArtifacts {
    pub csv: PathBuf,
    pub meta: PathBuf,
    pub svg: PathBuf,
    /// Whether source- and transfer-scored pruning remove the same weight.
    pub argmin_agreement: bool,
}

/// Runs one canonical toy case and writes its grid CSV, metadata and SVG.
pub fn landscape_case(case: ToyCase, approx: ToyApprox, out: &Path) -> Result<ToyArtifacts> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (source, transfer) = case.tasks();
    let demo = toy_prune_demo(&source, &transfer, approx);
    let proj = toy_projection(&demo, &source, &transfer, TOY_RESOLUTION)?;
    let stem = format!("landscape_{}_{}", case.name(), approx);
    let csv = out.join(format!("{stem}.csv"));
    let mut buf = Vec::new();
    proj.write_csv(&mut buf, &["theta0", "pruned", "retrained"]).expect("in-memory write");
    fs::write(&csv, buf).map_err(|e| Error::io(&csv, e))?;

    let agreement = source.pruned_index(approx) == transfer.pruned_index(approx);
    let alternatives: Vec<String> = [ToyApprox::Magnitude, ToyApprox::Diagonal, ToyApprox::Exact]
        .into_iter()
        .map(|a| {
            let d = toy_prune_demo(&source, &transfer, a);
            format!("{a}:{}:{:e}", d.pruned_index, d.losses[2][0])
        })
        .collect();
    let increase = demo.transfer_pruning_increase();
    let mut meta = String::new();
    let _ = writeln!(meta, "case = \"{}\"", case.name());
    let _ = writeln!(meta, "approx = \"{approx}\"");
    let _ = writeln!(meta, "source = {{ eigvals = [{:e}, {:e}], angle = {:e} }}", source.eigvals[0], source.eigvals[1], source.angle);
    let _ = writeln!(meta, "transfer = {{ eigvals = [{:e}, {:e}], angle = {:e} }}", transfer.eigvals[0], transfer.eigvals[1], transfer.angle);
    let _ = writeln!(meta, "scores = [{:e}, {:e}]", demo.scores[0], demo.scores[1]);
    let _ = writeln!(meta, "pruned_index = {}", demo.pruned_index);
    let _ = writeln!(meta, "argmin_agreement = {agreement}");
    for (label, l) in ["theta0", "pruned", "retrained"].iter().zip(demo.losses) {
        let _ = writeln!(meta, "loss_{label} = [{:e}, {:e}]", l[0], l[1]);
    }
    let _ = writeln!(meta, "transfer_pruning_increase = {increase:e}");
    let _ = writeln!(meta, "transfer_retraining_improvement = {:e}", demo.transfer_improvement());
    let _ = writeln!(meta, "criteria = \"{}\"", alternatives.join(" "));
    let meta_path = out.join(format!("{stem}.meta"));
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    let svg_path = out.join(format!("{stem}.svg"));
    fs::write(&svg_path, svg::loss_heatmap(&proj, false)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(ToyArtifacts {
        csv,
        meta: meta_path,
        svg: svg_path,
        argmin_agreement: agreement,
    })
}
