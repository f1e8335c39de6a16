//! Reading and writing studies as a covariate table plus one series file per subject.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::data::{Study, SubjectData};
use crate::error::{CovcapError, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CovcapError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> CovcapError {
    CovcapError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_cell(path: &Path, line: u64, column: usize, cell: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| CovcapError::NonNumericCell {
        path: path.to_path_buf(),
        line,
        column,
        value: cell.to_string(),
    })
}

/// Reads `id,x1,...` rows; the intercept is prepended to each covariate vector.
pub fn read_covariates(path: &Path) -> Result<Vec<(String, DVector<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?);
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width == 0 {
        return Err(CovcapError::Input {
            path: path.to_path_buf(),
            message: "empty header".into(),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(CovcapError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected: width,
                found: record.len(),
            });
        }
        let mut x = vec![1.0];
        for (column, cell) in record.iter().enumerate().skip(1) {
            x.push(parse_cell(path, line, column + 1, cell)?);
        }
        rows.push((record[0].trim().to_string(), DVector::from_vec(x)));
    }
    Ok(rows)
}

/// Reads a headerless numeric series, keeping every `thin`-th row.
pub fn read_series(path: &Path, thin: usize) -> Result<DMatrix<f64>> {
    if !path.exists() {
        return Err(CovcapError::MissingSeriesFile { path: path.to_path_buf() });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(open(path)?);
    let mut width = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(index as u64 + 1, |p| p.line());
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(CovcapError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        let cells = record
            .iter()
            .enumerate()
            .map(|(column, cell)| parse_cell(path, line, column + 1, cell))
            .collect::<Result<Vec<_>>>()?;
        if index % thin == 0 {
            values.extend(cells);
            rows += 1;
        }
    }
    let Some(p) = width else {
        return Err(CovcapError::Input {
            path: path.to_path_buf(),
            message: "series file has no rows".into(),
        });
    };
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

/// Loads a study from a covariate table and a directory of `<id>.csv` series.
pub fn ingest(covariates: &Path, series_dir: &Path, thin: usize, center: bool) -> Result<Study> {
    if thin == 0 {
        return Err(CovcapError::InvalidConfig("thin must be at least 1".into()));
    }
    let subjects = read_covariates(covariates)?
        .into_iter()
        .map(|(id, x)| {
            let observations = read_series(&series_path(series_dir, &id), thin)?;
            Ok(SubjectData::new(id, observations, x))
        })
        .collect::<Result<Vec<_>>>()?;
    Study::from_subjects(subjects, center)
}

pub fn series_path(series_dir: &Path, id: &str) -> PathBuf {
    series_dir.join(format!("{id}.csv"))
}

/// Writes `study` in the layout [`ingest`] reads. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_study(study: &Study, covariates: &Path, series_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(series_dir)?;
    let mut table = csv::Writer::from_path(covariates).map_err(|e| csv_error(covariates, e))?;
    let mut header = vec!["id".to_string()];
    header.extend((1..study.q()).map(|j| format!("x{j}")));
    table.write_record(&header).map_err(|e| csv_error(covariates, e))?;
    for subject in &study.subjects {
        let mut row = vec![subject.id.clone()];
        row.extend(subject.covariates.iter().skip(1).map(f64::to_string));
        table.write_record(&row).map_err(|e| csv_error(covariates, e))?;

        let path = series_path(series_dir, &subject.id);
        let mut series = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| csv_error(&path, e))?;
        for r in subject.observations.row_iter() {
            series
                .write_record(r.iter().map(f64::to_string))
                .map_err(|e| csv_error(&path, e))?;
        }
        series.flush()?;
    }
    table.flush()?;
    Ok(())
}
