//! `(α, n, seed)` grid runner with per-cell persistence.
//!
//! Each finished cell is stored under `cells/<key>.json`, where the key is a
//! SHA-256 of the cell coordinates and every config value that influences
//! the cell. Rerunning with the same config reuses stored cells. Aggregate
//! outputs are rebuilt from the cell records every time, so they only depend
//! on the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{fit_rate, run_cell, scaling_axis, ExperimentConfig, FitResult, HeadStats, RiskCurve};
use crate::error::{Error, Result};

pub const RISK_CURVE_FILE: &str = "risk_curve.csv";
pub const ATTENTION_STATS_FILE: &str = "attention_stats.csv";
pub const FIT_FILE: &str = "fit.json";
pub const SCALING_AXIS_FILE: &str = "scaling_axis.dat";
pub const CONFIG_FILE: &str = "config_resolved.json";
pub const SUMMARY_FILE: &str = "summary.json";
const CELL_DIR: &str = "cells";

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    /// Worker threads; `0` uses every available core.
    pub jobs: usize,
    /// Also store each trained model next to its cell record.
    pub save_models: bool,
}

impl SweepOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        SweepOptions {
            out_dir: out_dir.into(),
            jobs: 0,
            save_models: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub val_mse: f64,
    pub train_loss: Vec<f64>,
    pub head_stats: Vec<HeadStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub residual_rms: f64,
    pub n_list: Vec<usize>,
}

impl FitEntry {
    pub fn fit(&self) -> FitResult {
        FitResult {
            a: self.a,
            c: self.c,
            residual_rms: self.residual_rms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStatsRow {
    pub alpha: f64,
    pub n: usize,
    pub head: usize,
    pub w_same_mean: f64,
    pub w_diff_mean: f64,
    pub w_same_std: f64,
    pub w_diff_std: f64,
    pub m_same_mean: f64,
    pub m_diff_mean: f64,
}

#[derive(Clone, Debug)]
pub struct SweepBundle {
    pub cells: Vec<CellRecord>,
    pub failed: Vec<FailedCell>,
    pub curves: Vec<RiskCurve>,
    /// Keyed by `format!("{alpha:?}")`.
    pub fits: BTreeMap<String, FitEntry>,
    pub attention: Vec<AttentionStatsRow>,
    /// Cells loaded from an earlier run instead of recomputed.
    pub resumed: usize,
}

impl SweepBundle {
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }
}

#[derive(Serialize)]
struct CellKeyInput<'a> {
    config: &'a ExperimentConfig,
    alpha: f64,
    n: usize,
    seed: u64,
}

/// Content-addressed key of one cell.
pub fn cell_key(cfg: &ExperimentConfig, alpha: f64, n: usize, seed: u64) -> String {
    // The grid axes themselves do not influence a cell.
    let scoped = ExperimentConfig {
        alpha_list: Vec::new(),
        n_list: Vec::new(),
        seeds: Vec::new(),
        ..cfg.clone()
    };
    let input = CellKeyInput {
        config: &scoped,
        alpha,
        n,
        seed,
    };
    let bytes = serde_json::to_vec(&input).expect("config serialises");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_cell(path: &Path, key: &str) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.key == key).then_some(rec)
}

enum Outcome {
    Done(CellRecord, bool),
    Failed(FailedCell),
}

fn execute_cell(
    cfg: &ExperimentConfig,
    opts: &SweepOptions,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Outcome {
    let key = cell_key(cfg, alpha, n, seed);
    let path = opts.out_dir.join(CELL_DIR).join(format!("{key}.json"));
    if let Some(rec) = load_cell(&path, &key) {
        return Outcome::Done(rec, true);
    }
    let result = run_cell(alpha, n, seed, cfg).and_then(|cell| {
        let rec = CellRecord {
            key: key.clone(),
            alpha,
            n,
            seed,
            val_mse: cell.val_mse,
            train_loss: cell.train_loss,
            head_stats: cell.head_stats,
        };
        if opts.save_models {
            let model_path = path.with_file_name(format!("{key}.model.json"));
            write_atomic(&model_path, cell.model.to_json()?.as_bytes())?;
        }
        write_atomic(&path, serde_json::to_string(&rec)?.as_bytes())?;
        Ok(rec)
    });
    match result {
        Ok(rec) => Outcome::Done(rec, false),
        Err(e) => Outcome::Failed(FailedCell {
            alpha,
            n,
            seed,
            error: e.to_string(),
        }),
    }
}

/// Runs (or resumes) every cell of the grid and writes the aggregate files.
pub fn sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepBundle> {
    cfg.validate()?;
    let cell_dir = opts.out_dir.join(CELL_DIR);
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    write_atomic(
        &opts.out_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;

    let grid: Vec<(f64, usize, u64)> = cfg
        .alpha_list
        .iter()
        .flat_map(|&a| {
            cfg.n_list
                .iter()
                .flat_map(move |&n| cfg.seeds.iter().map(move |&s| (a, n, s)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        grid.par_iter()
            .map(|&(a, n, s)| execute_cell(cfg, opts, a, n, s))
            .collect()
    });

    let mut cells = Vec::new();
    let mut failed = Vec::new();
    let mut resumed = 0;
    for o in outcomes {
        match o {
            Outcome::Done(rec, reused) => {
                resumed += reused as usize;
                cells.push(rec);
            }
            Outcome::Failed(f) => failed.push(f),
        }
    }

    let rows: Vec<RiskRow> = cells
        .iter()
        .map(|c| RiskRow {
            alpha: c.alpha,
            n: c.n,
            seed: c.seed,
            val_mse: c.val_mse,
        })
        .collect();
    let curves = risk_curves(&rows);
    let fits = fit_curves(&curves);
    let attention = pooled_attention_rows(cfg, &cells);

    write_risk_rows(&opts.out_dir.join(RISK_CURVE_FILE), &rows)?;
    write_attention_rows(&opts.out_dir.join(ATTENTION_STATS_FILE), &attention)?;
    write_atomic(
        &opts.out_dir.join(FIT_FILE),
        serde_json::to_string_pretty(&fits)?.as_bytes(),
    )?;
    write_scaling_axis(&opts.out_dir.join(SCALING_AXIS_FILE), &curves, &fits)?;
    let summary = serde_json::json!({
        "complete": failed.is_empty(),
        "cells": cells.len(),
        "resumed": resumed,
        "failed": failed,
    });
    write_atomic(
        &opts.out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    Ok(SweepBundle {
        cells,
        failed,
        curves,
        fits,
        attention,
        resumed,
    })
}

/// One curve per α, in order of first appearance.
pub fn risk_curves(rows: &[RiskRow]) -> Vec<RiskCurve> {
    let mut alphas: Vec<f64> = Vec::new();
    for r in rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    alphas
        .into_iter()
        .map(|a| {
            let samples: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.alpha == a)
                .map(|r| (r.n, r.val_mse))
                .collect();
            RiskCurve::from_samples(a, &samples)
        })
        .collect()
}

/// Fits every curve that has at least two distinct `n`.
pub fn fit_curves(curves: &[RiskCurve]) -> BTreeMap<String, FitEntry> {
    curves
        .iter()
        .filter_map(|c| {
            let fit = fit_rate(c, c.alpha).ok()?;
            Some((
                format!("{:?}", c.alpha),
                FitEntry {
                    a: fit.a,
                    c: fit.c,
                    residual_rms: fit.residual_rms,
                    n_list: c.points.iter().map(|p| p.n).collect(),
                },
            ))
        })
        .collect()
}

fn pooled_attention_rows(cfg: &ExperimentConfig, cells: &[CellRecord]) -> Vec<AttentionStatsRow> {
    let mut rows = Vec::new();
    for &alpha in &cfg.alpha_list {
        for &n in &cfg.n_list {
            let mut pooled: Vec<HeadStats> = Vec::new();
            for c in cells.iter().filter(|c| c.alpha == alpha && c.n == n) {
                if pooled.is_empty() {
                    pooled = vec![HeadStats::default(); c.head_stats.len()];
                }
                for (p, h) in pooled.iter_mut().zip(&c.head_stats) {
                    p.merge(h);
                }
            }
            rows.extend(
                pooled
                    .iter()
                    .enumerate()
                    .map(|(head, s)| AttentionStatsRow {
                        alpha,
                        n,
                        head,
                        w_same_mean: s.w_same.mean(),
                        w_diff_mean: s.w_diff.mean(),
                        w_same_std: s.w_same.std(),
                        w_diff_std: s.w_diff.std(),
                        m_same_mean: s.m_same.mean(),
                        m_diff_mean: s.m_diff.mean(),
                    }),
            );
        }
    }
    rows
}

fn write_risk_rows(path: &Path, rows: &[RiskRow]) -> Result<()> {
    let mut out = String::from("alpha,n,seed,val_mse\n");
    for r in rows {
        writeln!(out, "{:?},{},{},{:e}", r.alpha, r.n, r.seed, r.val_mse).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

fn write_attention_rows(path: &Path, rows: &[AttentionStatsRow]) -> Result<()> {
    let mut out = String::from(
        "alpha,n,head,w_same_mean,w_diff_mean,w_same_std,w_diff_std,m_same_mean,m_diff_mean\n",
    );
    for r in rows {
        writeln!(
            out,
            "{:?},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.alpha,
            r.n,
            r.head,
            r.w_same_mean,
            r.w_diff_mean,
            r.w_same_std,
            r.w_diff_std,
            r.m_same_mean,
            r.m_diff_mean
        )
        .expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

/// Gnuplot data: one block per α with columns `t log_L log_L_fit n`, blocks
/// separated by two blank lines (select with `index`).
pub fn write_scaling_axis(
    path: &Path,
    curves: &[RiskCurve],
    fits: &BTreeMap<String, FitEntry>,
) -> Result<()> {
    let mut out = String::new();
    for (i, c) in curves.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let fit = fits.get(&format!("{:?}", c.alpha));
        match fit {
            Some(f) => writeln!(out, "# alpha={:?} A={:e} C={:e}", c.alpha, f.a, f.c),
            None => writeln!(out, "# alpha={:?} (no fit)", c.alpha),
        }
        .expect("string write");
        out.push_str("# t log_L log_L_fit n\n");
        for p in &c.points {
            let t = scaling_axis(p.n as f64, c.alpha);
            let fitted = fit.map_or(f64::NAN, |f| f.a - f.c * t);
            writeln!(out, "{t:e} {:e} {fitted:e} {}", p.mean.ln(), p.n).expect("string write");
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_risk_rows(path: &Path) -> Result<Vec<RiskRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn load_attention_stats(path: &Path) -> Result<Vec<AttentionStatsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
