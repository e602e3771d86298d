//! CSV writers and the dataset reader.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context};
use csv::{Terminator, WriterBuilder};
use mixssl_core::PartialDataset;
use nalgebra::DMatrix;

pub type Writer = csv::Writer<File>;

pub fn writer(path: &Path) -> anyhow::Result<Writer> {
    WriterBuilder::new()
        .terminator(Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))
}

/// Shortest round-trip decimal form, so files are byte-stable.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Dataset CSV: `y_1..y_p,z,m` with one-based `z` present on every row.
pub fn write_dataset(path: &Path, data: &PartialDataset) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("y_{i}")).collect();
    header.push("z".into());
    header.push("m".into());
    w.write_record(&header)?;
    for j in 0..data.len() {
        let mut record: Vec<String> = data.row(j).iter().map(|v| num(*v)).collect();
        record.push((data.true_label(j) + 1).to_string());
        record.push(u8::from(data.is_missing(j)).to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, n_classes: usize) -> anyhow::Result<PartialDataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open dataset {}", path.display()))?;
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let p = cols.len().saturating_sub(2);
    let expected: Vec<String> = (1..=p).map(|i| format!("y_{i}")).chain(["z".into(), "m".into()]).collect();
    if p == 0 || cols != expected {
        bail!("{}: header must be `y_1,..,y_p,z,m`, found `{}`", path.display(), cols.join(","));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut missing = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != p + 2 {
            bail!("{}:{line}: expected {} fields, found {}", path.display(), p + 2, record.len());
        }
        for v in record.iter().take(p) {
            let x: f64 = v.trim().parse().with_context(|| format!("{}:{line}: bad feature `{v}`", path.display()))?;
            features.push(x);
        }
        let z: usize = record[p]
            .trim()
            .parse()
            .with_context(|| format!("{}:{line}: bad label `{}`", path.display(), &record[p]))?;
        if z < 1 || z > n_classes {
            bail!("{}:{line}: label {z} outside 1..{n_classes}", path.display());
        }
        labels.push(z - 1);
        missing.push(match record[p + 1].trim() {
            "0" => false,
            "1" => true,
            other => bail!("{}:{line}: missing indicator must be 0 or 1, found `{other}`", path.display()),
        });
    }
    Ok(PartialDataset::new(p, n_classes, features, labels, missing)?)
}

/// Long-form matrix CSV: `row,col,value,mc_se`.
pub fn write_matrix(path: &Path, value: &DMatrix<f64>, se: &DMatrix<f64>) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row", "col", "value", "mc_se"])?;
    for r in 0..value.nrows() {
        for c in 0..value.ncols() {
            w.write_record([r.to_string(), c.to_string(), num(value[(r, c)]), num(se[(r, c)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Two-column `quantity,value` table.
pub fn write_pairs(path: &Path, rows: &[(&str, String)]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["quantity", "value"])?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
