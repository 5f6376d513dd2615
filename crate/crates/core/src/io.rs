//! Atomic file writes and the CSV formats for samples, trajectories and
//! loss logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::solvers::Trajectory;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(IoError::io(path, e));
    }
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn csv_bytes(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, IoError> {
    let err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| IoError::format(path, e.to_string()))
}

fn coord_names(dim: usize) -> impl Iterator<Item = String> {
    (1..=dim).map(|j| format!("x{j}"))
}

/// Samples with optional class and token columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub x: Tensor,
    pub classes: Option<Vec<usize>>,
    pub tokens: Option<Vec<Vec<usize>>>,
}

impl SampleTable {
    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        let (n, d) = (self.x.rows(), self.x.cols());
        let seq = self.tokens.as_ref().and_then(|t| t.first()).map_or(0, Vec::len);
        let mut header: Vec<String> = coord_names(d).collect();
        if self.classes.is_some() {
            header.push("class".into());
        }
        header.extend((0..seq).map(|j| format!("tok{j}")));
        let rows = (0..n).map(|i| {
            let mut r: Vec<String> = self.x.row(i).iter().map(f64::to_string).collect();
            if let Some(c) = &self.classes {
                r.push(c[i].to_string());
            }
            if let Some(t) = &self.tokens {
                r.extend(t[i].iter().map(usize::to_string));
            }
            r
        });
        atomic_write(path, &csv_bytes(path, &header, rows)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self, IoError> {
        let err = |source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let header: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        let dim = header.iter().take_while(|h| h.starts_with('x')).count();
        if dim == 0 {
            return Err(IoError::format(path, "no coordinate columns"));
        }
        let class_col = header.iter().position(|h| h == "class");
        let tok_cols: Vec<usize> = (0..header.len()).filter(|&j| header[j].starts_with("tok")).collect();
        let mut data = Vec::new();
        let mut classes = class_col.map(|_| Vec::new());
        let mut tokens = (!tok_cols.is_empty()).then(Vec::new);
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(err)?;
            let bad = |j: usize| IoError::format(path, format!("row {}: bad value in column {}", line + 1, header[j]));
            for j in 0..dim {
                data.push(rec[j].trim().parse::<f64>().map_err(|_| bad(j))?);
            }
            if let (Some(c), Some(j)) = (classes.as_mut(), class_col) {
                c.push(rec[j].trim().parse().map_err(|_| bad(j))?);
            }
            if let Some(t) = tokens.as_mut() {
                t.push(
                    tok_cols
                        .iter()
                        .map(|&j| rec[j].trim().parse().map_err(|_| bad(j)))
                        .collect::<Result<Vec<usize>, _>>()?,
                );
            }
        }
        let n = data.len() / dim;
        let x = Tensor::new(vec![n, dim], data).map_err(|e| IoError::format(path, e.to_string()))?;
        Ok(Self { x, classes, tokens })
    }
}

/// Rows `(sample_id, t, x1..xd)`.
pub fn write_trajectories_csv(path: &Path, trajectories: &[Trajectory]) -> Result<(), IoError> {
    let dim = trajectories
        .iter()
        .flat_map(|t| t.first())
        .map(|(_, x)| x.len())
        .next()
        .unwrap_or(0);
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend(coord_names(dim));
    let rows = trajectories.iter().enumerate().flat_map(|(id, tr)| {
        tr.iter().map(move |(t, x)| {
            let mut r = vec![id.to_string(), t.to_string()];
            r.extend(x.iter().map(f64::to_string));
            r
        })
    });
    atomic_write(path, &csv_bytes(path, &header, rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    /// Noise mixing weight, for stages that anneal.
    pub beta: Option<f64>,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<(), IoError> {
    let header = ["iteration", "loss", "beta", "wall_time"].map(String::from);
    let rows = records.iter().map(|r| {
        vec![
            r.iteration.to_string(),
            r.loss.to_string(),
            r.beta.map_or_else(String::new, |b| b.to_string()),
            r.wall_time.to_string(),
        ]
    });
    atomic_write(path, &csv_bytes(path, &header, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rflow-io-{}", std::process::id()));
        dir.join(name)
    }

    #[test]
    fn sample_csv_round_trip() {
        let table = SampleTable {
            x: Tensor::matrix(2, 2, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0]).unwrap(),
            classes: Some(vec![1, 6]),
            tokens: Some(vec![vec![1, 2], vec![2, 1]]),
        };
        let p = tmp("s.csv");
        table.write_csv(&p).unwrap();
        assert_eq!(SampleTable::read_csv(&p).unwrap(), table);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x1,x2,class,tok0,tok1\n"));
    }

    #[test]
    fn trajectory_and_loss_headers() {
        let p = tmp("t.csv");
        write_trajectories_csv(&p, &[vec![(1.0, vec![0.0, 1.0]), (0.0, vec![2.0, 3.0])]]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("sample_id,t,x1,x2"));
        assert_eq!(text.lines().count(), 3);
        let p = tmp("l.csv");
        write_loss_csv(&p, &[LossRecord { iteration: 0, loss: 1.5, beta: Some(1.0), wall_time: 0.1 }]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("iteration,loss,beta,wall_time\n0,1.5,1,"));
    }
}
