//! CSV ingestion and output writing for the command-line front end.
//!
//! All numeric output uses 17 significant digits so files round-trip
//! exactly and identical seeds give byte-identical results.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use bayes_fpca::basis::{BasisSystem, Grid};
use bayes_fpca::inference::{CurveSummary, EigenvalueSummary, FunctionalSummary, MultilevelSummary};
use bayes_fpca::model::{FpcaState, FunctionalDataset};
use bayes_fpca::multilevel::{MfpcaState, MultilevelDataset};
use bayes_fpca::sampler::{ChainDiagnostics, PosteriorSamples};
use bayes_fpca::simulate::fmt_f64;

use crate::CliError;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn parse_cell(cell: &str, line: usize, col: usize) -> Result<f64, CliError> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Err(validation(format!(
            "line {line}: empty cell in column {col}"
        )));
    }
    trimmed.parse::<f64>().map_err(|_| {
        validation(format!(
            "line {line}: non-numeric cell {trimmed:?} in column {col}"
        ))
    })
}

fn parse_grid(fields: &[&str], skip: usize) -> Result<Grid, CliError> {
    let mut points = Vec::with_capacity(fields.len() - skip);
    for (i, cell) in fields.iter().enumerate().skip(skip) {
        points.push(parse_cell(cell, 1, i + 1)?);
    }
    Grid::new(points).map_err(|e| validation(format!("header grid invalid: {e}")))
}

/// Read "id,t_1,...,t_M" CSV into a dataset; the header carries the grid.
pub fn read_single_csv(path: &Path) -> Result<FunctionalDataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| validation("empty data file"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 3 || fields[0].trim() != "id" {
        return Err(validation(
            "header must be \"id,t_1,...,t_M\" with at least two grid points",
        ));
    }
    let grid = parse_grid(&fields, 1)?;
    let m = grid.len();

    let mut ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != m + 1 {
            return Err(validation(format!(
                "line {lineno}: expected {} cells, found {}",
                m + 1,
                cells.len()
            )));
        }
        ids.push(cells[0].trim().to_string());
        for (c, cell) in cells.iter().enumerate().skip(1) {
            values.push(parse_cell(cell, lineno, c + 1)?);
        }
    }
    if ids.is_empty() {
        return Err(validation("data file has no curves"));
    }
    let y = Array2::from_shape_vec((ids.len(), m), values)
        .map_err(|e| validation(format!("malformed data block: {e}")))?;
    FunctionalDataset::new(y, grid, ids).map_err(|e| validation(e.to_string()))
}

/// Read "subject,visit,t_1,...,t_M" CSV into a multilevel dataset.
pub fn read_multilevel_csv(path: &Path) -> Result<MultilevelDataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| validation("empty data file"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 4 || fields[0].trim() != "subject" || fields[1].trim() != "visit" {
        return Err(validation(
            "header must be \"subject,visit,t_1,...,t_M\" with at least two grid points",
        ));
    }
    let grid = parse_grid(&fields, 2)?;
    let m = grid.len();

    let mut keys = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != m + 2 {
            return Err(validation(format!(
                "line {lineno}: expected {} cells, found {}",
                m + 2,
                cells.len()
            )));
        }
        let subject = cells[0].trim().to_string();
        let visit = cells[1].trim().to_string();
        if subject.is_empty() {
            return Err(validation(format!("line {lineno}: empty subject id")));
        }
        if visit.is_empty() {
            return Err(validation(format!("line {lineno}: empty visit id")));
        }
        keys.push((subject, visit));
        for (c, cell) in cells.iter().enumerate().skip(2) {
            values.push(parse_cell(cell, lineno, c + 1)?);
        }
    }
    if keys.is_empty() {
        return Err(validation("data file has no curves"));
    }
    let y = Array2::from_shape_vec((keys.len(), m), values)
        .map_err(|e| validation(format!("malformed data block: {e}")))?;
    MultilevelDataset::new(y, keys, grid).map_err(|e| validation(e.to_string()))
}

struct CsvBuilder {
    out: String,
}

impl CsvBuilder {
    fn new(header: &[String]) -> Self {
        let mut out = header.join(",");
        out.push('\n');
        CsvBuilder { out }
    }

    fn row(&mut self, cells: &[String]) {
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    fn write(self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.out).map_err(CliError::Io)
    }
}

fn draw_header(prefix: &str, labels: Vec<String>) -> Vec<String> {
    let mut h = vec!["chain".to_string(), "draw".to_string()];
    h.extend(labels.into_iter().map(|l| format!("{prefix}{l}")));
    h
}

fn write_block<S, F>(
    dir: &Path,
    block: &str,
    samples: &PosteriorSamples<S>,
    labels: Vec<String>,
    prefix: &str,
    extract: F,
) -> Result<(), CliError>
where
    F: Fn(&S) -> Vec<f64>,
{
    let mut csv = CsvBuilder::new(&draw_header(prefix, labels));
    for (c, chain) in samples.chains.iter().enumerate() {
        for (d, state) in chain.iter().enumerate() {
            let mut cells = vec![c.to_string(), d.to_string()];
            cells.extend(extract(state).into_iter().map(fmt_f64));
            csv.row(&cells);
        }
    }
    csv.write(&dir.join(format!("samples_{block}.csv")))
}

fn matrix_labels(rows: usize, cols: usize, row_name: &str, col_name: &str) -> Vec<String> {
    let mut labels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            labels.push(format!("{row_name}{}_{col_name}{}", r + 1, c + 1));
        }
    }
    labels
}

/// Write one CSV per state block, one row per retained draw.
pub fn write_single_samples(
    dir: &Path,
    samples: &PosteriorSamples<FpcaState>,
) -> Result<(), CliError> {
    let first = samples
        .first_draw()
        .ok_or_else(|| validation("no retained draws"))?;
    let q = first.q();
    let k = first.k();
    let n = first.n();

    write_block(dir, "w_mu", samples, (1..=q).map(|i| i.to_string()).collect(), "w", |s| {
        s.w_mu.to_vec()
    })?;
    write_block(
        dir,
        "lambda",
        samples,
        (1..=k).map(|i| i.to_string()).collect(),
        "lambda",
        |s| s.lambda.to_vec(),
    )?;
    write_block(dir, "sigma2", samples, vec![String::new()], "sigma2", |s| {
        vec![s.sigma2]
    })?;
    let mut h_labels = vec!["mu".to_string()];
    h_labels.extend((1..=k).map(|i| i.to_string()));
    write_block(dir, "h", samples, h_labels, "h_", |s| {
        let mut v = vec![s.h_mu];
        v.extend(s.h.iter().copied());
        v
    })?;
    write_block(
        dir,
        "scores",
        samples,
        matrix_labels(n, k, "i", "k"),
        "xi_",
        |s| s.xi.iter().copied().collect(),
    )?;
    write_block(dir, "x", samples, matrix_labels(q, k, "q", "k"), "x_", |s| {
        s.x.iter().copied().collect()
    })?;
    write_block(
        dir,
        "psi",
        samples,
        matrix_labels(q, k, "q", "k"),
        "psi_",
        |s| s.psi.iter().copied().collect(),
    )?;
    Ok(())
}

/// Write the multilevel per-block sample CSVs.
pub fn write_multilevel_samples(
    dir: &Path,
    samples: &PosteriorSamples<MfpcaState>,
) -> Result<(), CliError> {
    let first = samples
        .first_draw()
        .ok_or_else(|| validation("no retained draws"))?;
    let q = first.q();
    let k1 = first.k1();
    let k2 = first.k2();
    let n = first.xi.nrows();
    let rows = first.zeta.nrows();

    write_block(dir, "w_mu", samples, (1..=q).map(|i| i.to_string()).collect(), "w", |s| {
        s.w_mu.to_vec()
    })?;
    write_block(
        dir,
        "lambda1",
        samples,
        (1..=k1).map(|i| i.to_string()).collect(),
        "lambda1_",
        |s| s.lambda1.to_vec(),
    )?;
    write_block(
        dir,
        "lambda2",
        samples,
        (1..=k2).map(|i| i.to_string()).collect(),
        "lambda2_",
        |s| s.lambda2.to_vec(),
    )?;
    write_block(dir, "sigma2", samples, vec![String::new()], "sigma2", |s| {
        vec![s.sigma2]
    })?;
    let mut h_labels = vec!["mu".to_string()];
    h_labels.extend((1..=k1).map(|i| format!("1_{i}")));
    h_labels.extend((1..=k2).map(|i| format!("2_{i}")));
    write_block(dir, "h", samples, h_labels, "h_", |s| {
        let mut v = vec![s.h_mu];
        v.extend(s.h1.iter().copied());
        v.extend(s.h2.iter().copied());
        v
    })?;
    write_block(
        dir,
        "scores1",
        samples,
        matrix_labels(n, k1, "i", "k"),
        "xi_",
        |s| s.xi.iter().copied().collect(),
    )?;
    write_block(
        dir,
        "scores2",
        samples,
        matrix_labels(rows, k2, "r", "l"),
        "zeta_",
        |s| s.zeta.iter().copied().collect(),
    )?;
    write_block(dir, "x1", samples, matrix_labels(q, k1, "q", "k"), "x1_", |s| {
        s.x1.iter().copied().collect()
    })?;
    write_block(dir, "x2", samples, matrix_labels(q, k2, "q", "l"), "x2_", |s| {
        s.x2.iter().copied().collect()
    })?;
    write_block(
        dir,
        "psi1",
        samples,
        matrix_labels(q, k1, "q", "k"),
        "psi1_",
        |s| s.psi1.iter().copied().collect(),
    )?;
    write_block(
        dir,
        "psi2",
        samples,
        matrix_labels(q, k2, "q", "l"),
        "psi2_",
        |s| s.psi2.iter().copied().collect(),
    )?;
    if first.eta.is_some() {
        let visits = first.eta.as_ref().unwrap().nrows();
        write_block(
            dir,
            "eta",
            samples,
            matrix_labels(visits, q, "j", "q"),
            "eta_",
            |s| s.eta.as_ref().map(|e| e.iter().copied().collect()).unwrap_or_default(),
        )?;
    }
    Ok(())
}

fn write_curve(dir: &Path, name: &str, curve: &CurveSummary) -> Result<(), CliError> {
    let mut csv = CsvBuilder::new(&[
        "t".to_string(),
        "mean".to_string(),
        "lo95".to_string(),
        "hi95".to_string(),
    ]);
    for i in 0..curve.t.len() {
        csv.row(&[
            fmt_f64(curve.t[i]),
            fmt_f64(curve.mean[i]),
            fmt_f64(curve.lo95[i]),
            fmt_f64(curve.hi95[i]),
        ]);
    }
    csv.write(&dir.join(format!("summary_{name}.csv")))
}

fn eigen_row(component: String, e: &EigenvalueSummary) -> Vec<String> {
    vec![
        component,
        fmt_f64(e.mean),
        fmt_f64(e.lo95),
        fmt_f64(e.hi95),
        fmt_f64(e.pve_mean),
        fmt_f64(e.pve_lo95),
        fmt_f64(e.pve_hi95),
    ]
}

/// Write summary tables for a single-level fit.
pub fn write_single_summary(dir: &Path, summary: &FunctionalSummary) -> Result<(), CliError> {
    write_curve(dir, "mu", &summary.mu)?;
    for (j, comp) in summary.components.iter().enumerate() {
        write_curve(dir, &format!("phi{}", j + 1), comp)?;
    }
    let mut csv = CsvBuilder::new(&[
        "component".to_string(),
        "mean".to_string(),
        "lo95".to_string(),
        "hi95".to_string(),
        "pve_mean".to_string(),
        "pve_lo95".to_string(),
        "pve_hi95".to_string(),
    ]);
    for (j, e) in summary.eigenvalues.iter().enumerate() {
        csv.row(&eigen_row((j + 1).to_string(), e));
    }
    csv.write(&dir.join("eigenvalues.csv"))
}

/// Write summary tables for a multilevel fit.
pub fn write_multilevel_summary(dir: &Path, summary: &MultilevelSummary) -> Result<(), CliError> {
    write_curve(dir, "mu", &summary.mu)?;
    for (j, comp) in summary.level1.components.iter().enumerate() {
        write_curve(dir, &format!("phi1_{}", j + 1), comp)?;
    }
    for (j, comp) in summary.level2.components.iter().enumerate() {
        write_curve(dir, &format!("phi2_{}", j + 1), comp)?;
    }
    let mut csv = CsvBuilder::new(&[
        "level".to_string(),
        "component".to_string(),
        "mean".to_string(),
        "lo95".to_string(),
        "hi95".to_string(),
        "pve_mean".to_string(),
        "pve_lo95".to_string(),
        "pve_hi95".to_string(),
    ]);
    for (j, e) in summary.level1.eigenvalues.iter().enumerate() {
        let mut row = eigen_row((j + 1).to_string(), e);
        row.insert(0, "1".to_string());
        csv.row(&row);
    }
    for (j, e) in summary.level2.eigenvalues.iter().enumerate() {
        let mut row = eigen_row((j + 1).to_string(), e);
        row.insert(0, "2".to_string());
        csv.row(&row);
    }
    csv.write(&dir.join("eigenvalues.csv"))
}

fn nan_to_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Serialize diagnostics, mapping non-finite values to null.
pub fn diagnostics_json(diag: &ChainDiagnostics) -> serde_json::Value {
    let map_of = |m: &std::collections::BTreeMap<String, f64>| {
        let mut out = serde_json::Map::new();
        for (k, v) in m {
            out.insert(k.clone(), nan_to_null(*v));
        }
        serde_json::Value::Object(out)
    };
    serde_json::json!({
        "acceptance_rate_x": nan_to_null(diag.acceptance_rate_x),
        "acceptance_rate_x2": diag.acceptance_rate_x2.map(nan_to_null),
        "ess": map_of(&diag.ess),
        "rhat": map_of(&diag.rhat),
        "stall_count": diag.stall_count,
    })
}

/// SHA-256 of a file, as lowercase hex.
pub fn file_hash(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(CliError::Io)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// The reusable part of building a basis from the fit configuration.
pub fn build_basis_for(
    grid: &Grid,
    q: usize,
    degree: usize,
    alpha: f64,
) -> Result<BasisSystem, CliError> {
    bayes_fpca::basis::orthonormal_basis(grid, q, degree, alpha)
        .map_err(|e| validation(e.to_string()))
}
