//! CSV input and output of datasets.

use std::path::Path;

use nalgebra::DMatrix;

use seqfa_core::model::{DataKind, Dataset};
use seqfa_core::{Error, Result};

use crate::config::KindOverride;

/// Reads a CSV with a header row of item names and one numeric row per
/// observation. The kind is inferred (every value 0 or 1 means binary)
/// unless `kind` overrides it.
pub fn ingest_csv(path: &Path, kind: Option<KindOverride>, standardize: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, &path.display().to_string(), kind, standardize)
}

pub fn ingest_reader(
    reader: impl std::io::Read,
    source: &str,
    kind: Option<KindOverride>,
    standardize: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{source}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let p = names.len();
    if p == 0 {
        return Err(Error::Data(format!("{source}: no columns")));
    }
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{source}: {e}")))?;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{source}: row {}, column '{}': {cell:?} is not a number",
                    r + 2,
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{source}: row {}: non-finite value", r + 2)));
            }
            values.push(v);
        }
    }
    let n = values.len() / p;
    if n == 0 {
        return Err(Error::Data(format!("{source}: no observations")));
    }
    let m = DMatrix::from_row_slice(n, p, &values);
    let all_binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
    let kind = match kind {
        Some(KindOverride::Binary) => DataKind::Binary,
        Some(KindOverride::Continuous) => DataKind::Continuous,
        None if all_binary => DataKind::Binary,
        None => {
            let integers = values.iter().all(|v| v.fract() == 0.0);
            let mostly_binary = values.iter().filter(|&&v| v == 0.0 || v == 1.0).count() * 10 >= values.len() * 9;
            if integers && mostly_binary {
                log::warn!("{source}: values are mostly 0/1 but not all; treating the data as continuous");
            }
            DataKind::Continuous
        }
    };
    if n < p {
        log::warn!("{source}: fewer observations ({n}) than items ({p})");
    }
    let data = Dataset::new(m, kind, names)?;
    if kind == DataKind::Continuous {
        // constant columns make the residual prior and standardisation undefined
        data.empirical_cov_for_prior()?;
    }
    if standardize {
        if kind == DataKind::Binary {
            return Err(Error::Data(format!("{source}: binary data cannot be standardized")));
        }
        return data.standardized();
    }
    Ok(data)
}

/// Writes a dataset with its item names as the header. Values use the
/// shortest representation that parses back to the same number.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(data.item_names()).map_err(csv_err)?;
    let v = data.values();
    for i in 0..data.n() {
        w.write_record((0..data.p()).map(|j| v[(i, j)].to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}
