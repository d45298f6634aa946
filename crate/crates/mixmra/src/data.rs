//! Observation datasets and their CSV interchange format.
//!
//! The on-disk layout is a headed CSV with columns `x`, `y`, `response`,
//! then any covariate columns, and the optional `region` (truth label) and
//! `train` (0/1 subset marker) columns. Floats are written with 17
//! significant digits so files round-trip exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Location;

/// Format a float with 17 significant digits (exact f64 round-trip).
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub response: Vec<f64>,
    /// Covariate columns entering the mean, without the intercept.
    pub covariates: Vec<(String, Vec<f64>)>,
    /// Truth region labels, when known (simulation use).
    pub region: Option<Vec<u8>>,
    /// Training-subset marker.
    pub train: Option<Vec<bool>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.locations.len()
    }

    /// Design matrix `[1 | covariates]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = 1 + self.covariates.len();
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        for (j, (_, col)) in self.covariates.iter().enumerate() {
            for i in 0..n {
                x[(i, j + 1)] = col[i];
            }
        }
        x
    }

    pub fn response_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.response)
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|(name, col)| (name.clone(), idx.iter().map(|&i| col[i]).collect()))
                .collect(),
            region: self
                .region
                .as_ref()
                .map(|r| idx.iter().map(|&i| r[i]).collect()),
            train: self
                .train
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Indices flagged as training rows (all rows when no marker exists).
    pub fn train_indices(&self) -> Vec<usize> {
        match &self.train {
            Some(t) => (0..self.n()).filter(|&i| t[i]).collect(),
            None => (0..self.n()).collect(),
        }
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x".to_string(), "y".to_string(), "response".to_string()];
        for (name, _) in &self.covariates {
            header.push(name.clone());
        }
        if self.region.is_some() {
            header.push("region".into());
        }
        if self.train.is_some() {
            header.push("train".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                fmt_g17(self.locations[i].x),
                fmt_g17(self.locations[i].y),
                fmt_g17(self.response[i]),
            ];
            for (_, col) in &self.covariates {
                rec.push(fmt_g17(col[i]));
            }
            if let Some(r) = &self.region {
                rec.push(r[i].to_string());
            }
            if let Some(t) = &self.train {
                rec.push(if t[i] { "1" } else { "0" }.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a dataset. `x`, `y` and `response` are required; `region` and
    /// `train` are recognized when present; every other column is kept as a
    /// covariate.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_path(&path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (ix, iy, iresp) = match (col("x"), col("y"), col("response")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                let missing = ["x", "y", "response"]
                    .iter()
                    .filter(|c| col(c).is_none())
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::Config(format!(
                    "input CSV is missing required column(s): {missing}"
                )));
            }
        };
        let iregion = col("region");
        let itrain = col("train");
        let cov_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                *i != ix && *i != iy && *i != iresp && Some(*i) != iregion && Some(*i) != itrain
            })
            .map(|(i, h)| (i, h.clone()))
            .collect();

        let mut ds = Dataset {
            covariates: cov_cols
                .iter()
                .map(|(_, name)| (name.clone(), Vec::new()))
                .collect(),
            region: iregion.map(|_| Vec::new()),
            train: itrain.map(|_| Vec::new()),
            ..Dataset::default()
        };
        let parse = |field: &str, what: &str, row: usize| -> Result<f64> {
            field.parse::<f64>().map_err(|_| {
                Error::Config(format!("row {row}: cannot parse {what} value '{field}'"))
            })
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let x = parse(&rec[ix], "x", row)?;
            let y = parse(&rec[iy], "y", row)?;
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Config(format!("row {row}: non-finite coordinate")));
            }
            ds.locations.push(Location::new(x, y));
            ds.response.push(parse(&rec[iresp], "response", row)?);
            for ((ci, _), (_, dst)) in cov_cols.iter().zip(ds.covariates.iter_mut()) {
                dst.push(parse(&rec[*ci], "covariate", row)?);
            }
            if let (Some(ri), Some(dst)) = (iregion, ds.region.as_mut()) {
                dst.push(rec[ri].parse::<u8>().map_err(|_| {
                    Error::Config(format!("row {row}: bad region label '{}'", &rec[ri]))
                })?);
            }
            if let (Some(ti), Some(dst)) = (itrain, ds.train.as_mut()) {
                dst.push(&rec[ti] == "1" || rec[ti].eq_ignore_ascii_case("true"));
            }
        }
        Ok(ds)
    }
}
