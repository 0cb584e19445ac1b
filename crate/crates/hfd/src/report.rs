//! Corpus evaluation and its CSV report.
//!
//! Columns: `image_id,bpp,psnr_mse_stage,psnr_refined,frechet_distance`.
//! One row per image (Fréchet column empty), then a `summary` row with
//! column means and the corpus Fréchet distance over 256-pixel patches.
//! Missing values are empty cells.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hfd_core::codec::Bitstream;
use hfd_core::eval::{feature_stats, frechet_distance, patchify, psnr, BoxGrayFeatures, EVAL_PATCH};

use crate::error::{io_at, HfdError, Result};
use crate::imageio::load_image;
use crate::pipeline::stage_one;

pub const COLUMNS: [&str; 5] = ["image_id", "bpp", "psnr_mse_stage", "psnr_refined", "frechet_distance"];
pub const BITSTREAM_EXT: &str = "hfdc";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub bpp: Option<f64>,
    pub psnr_mse_stage: Option<f64>,
    pub psnr_refined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `None` when either side has fewer than two patches.
    pub frechet_distance: Option<f64>,
    pub patches: usize,
    pub skipped: usize,
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(io_at(dir))? {
        let p = e.map_err(io_at(dir))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pgm")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Compares same-named images in two directories. With `bitstreams`, each
/// image also needs `<stem>.hfdc` there, giving bpp and stage-one PSNR.
pub fn evaluate(originals: &Path, reconstructions: &Path, bitstreams: Option<&Path>) -> Result<EvalReport> {
    let a = images_by_stem(originals)?;
    let b = images_by_stem(reconstructions)?;
    if a.is_empty() || a.keys().ne(b.keys()) {
        return Err(HfdError::Data("original and reconstruction sets do not match".into()));
    }
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (stem, pa) in &a {
        let x = load_image(pa)?;
        let y = load_image(&b[stem])?;
        let (bpp, p_mse) = match bitstreams {
            Some(dir) => {
                let path = dir.join(format!("{stem}.{BITSTREAM_EXT}"));
                let bs = Bitstream::from_bytes(&std::fs::read(&path).map_err(io_at(&path))?)?;
                (Some(bs.bpp()), Some(psnr(&x, &stage_one(&bs)?)?))
            }
            None => (None, None),
        };
        rows.push(EvalRow {
            image_id: stem.clone(),
            bpp,
            psnr_mse_stage: p_mse,
            psnr_refined: psnr(&x, &y)?,
        });
        xs.push(x);
        ys.push(y);
    }
    let pa = patchify(&xs, EVAL_PATCH)?;
    let pb = patchify(&ys, EVAL_PATCH)?;
    let fx = BoxGrayFeatures::default();
    let fd = if pa.patches.len() >= 2 && pb.patches.len() >= 2 {
        Some(frechet_distance(&feature_stats(&pa.patches, &fx)?, &feature_stats(&pb.patches, &fx)?)?)
    } else {
        None
    };
    Ok(EvalReport {
        rows,
        frechet_distance: fd,
        patches: pa.patches.len(),
        skipped: pa.skipped,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn write_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HfdError::Data(e.to_string());
    w.write_record(COLUMNS).map_err(err)?;
    for r in &report.rows {
        w.write_record([r.image_id.clone(), cell(r.bpp), cell(r.psnr_mse_stage), cell(Some(r.psnr_refined)), String::new()])
            .map_err(err)?;
    }
    w.write_record([
        "summary".to_string(),
        cell(mean(report.rows.iter().map(|r| r.bpp))),
        cell(mean(report.rows.iter().map(|r| r.psnr_mse_stage))),
        cell(mean(report.rows.iter().map(|r| Some(r.psnr_refined)))),
        // Tiny negative round-off would print as "-0.0000".
        cell(report.frechet_distance.map(|d| if d < 5e-5 { 0.0 } else { d })),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| HfdError::Data(e.to_string()))
}
