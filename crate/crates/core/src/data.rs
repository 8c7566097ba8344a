//! Synthetic datasets and CSV ingestion.
//!
//! Spiral: sample `k` (0-based) lies on arm `c = k mod 2` at parameter
//! `t = (floor(k/2) + 1) / ceil(n/2)`, position
//! `t * (cos(3 pi t + c pi), sin(3 pi t + c pi))` plus `noise * N(0, I)`,
//! label `+1` on arm 0 and `-1` on arm 1. With `bias` a constant 1 column is
//! appended so the homogeneous network can separate the arms near the origin.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::network::{ParallelNet, SubNet};

/// Number of spiral turns over `t in (0, 1]`.
pub const SPIRAL_TURNS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

fn default_true() -> bool {
    true
}
fn default_k() -> usize {
    5
}
fn default_noise() -> f64 {
    0.1
}
fn default_last() -> LabelColumn {
    LabelColumn::Name("y".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Spiral {
        n: usize,
        noise: f64,
        seed: u64,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Teacher {
        n: usize,
        d: usize,
        k: usize,
        m1: usize,
        m2: usize,
        noise: f64,
        seed: u64,
    },
    /// Gaussian `X` with `sigma_{r+1} = ... = sigma_d = 1`, labelled by a
    /// Gaussian teacher with `teacher_k` sub-networks of widths `(m1, m2)`.
    Lowrank {
        n: usize,
        d: usize,
        r: usize,
        seed: u64,
        #[serde(default = "default_k")]
        teacher_k: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_last")]
        label_column: LabelColumn,
        /// `None` detects a header by whether the first row parses as numbers.
        #[serde(default)]
        header: Option<bool>,
        #[serde(default)]
        standardize: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub teacher: Option<ParallelNet<f64>>,
}

impl Dataset {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head: Vec<String> = (0..self.x.ncols()).map(|j| format!("x{j}")).collect();
        head.push("y".into());
        w.write_record(&head).map_err(csv_err(0))?;
        for (i, row) in self.x.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(csv_err(i + 1))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(row: usize) -> impl Fn(csv::Error) -> Error {
    move |e| Error::Csv {
        row,
        col: 0,
        msg: e.to_string(),
    }
}

/// `model_widths` gives `(m1, m2)` for teachers that do not carry their own.
pub fn gen_dataset(spec: &DatasetSpec, model_widths: (usize, usize)) -> Result<Dataset> {
    match spec {
        DatasetSpec::Spiral { n, noise, seed, bias } => {
            let (x, y) = spiral(*n, *noise, *seed, *bias)?;
            Ok(Dataset { x, y, teacher: None })
        }
        DatasetSpec::Teacher {
            n,
            d,
            k,
            m1,
            m2,
            noise,
            seed,
        } => teacher(*n, *d, *k, *m1, *m2, *noise, *seed),
        DatasetSpec::Lowrank {
            n,
            d,
            r,
            seed,
            teacher_k,
            noise,
        } => {
            let x = lowrank(*n, *d, *r, *seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let net = gaussian_net(&[*d, model_widths.0, model_widths.1], *teacher_k, &mut rng);
            let y = label(&net, &x, *noise, &mut rng)?;
            Ok(Dataset {
                x,
                y,
                teacher: Some(net),
            })
        }
        DatasetSpec::Csv {
            path,
            label_column,
            header,
            standardize,
        } => {
            let (x, y) = read_csv(path, label_column, *header, *standardize)?;
            Ok(Dataset { x, y, teacher: None })
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn spiral(n: usize, noise: f64, seed: u64, bias: bool) -> Result<(Array2<f64>, Array1<f64>)> {
    if n == 0 || !(noise >= 0.0) {
        return Err(Error::InvalidArgument("spiral needs n >= 1 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_arm = n.div_ceil(2) as f64;
    let d = if bias { 3 } else { 2 };
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    for k in 0..n {
        let c = (k % 2) as f64;
        let t = ((k / 2) as f64 + 1.0) / per_arm;
        let angle = 2.0 * PI * SPIRAL_TURNS * t + c * PI;
        x[[k, 0]] = t * angle.cos() + noise * normal(&mut rng);
        x[[k, 1]] = t * angle.sin() + noise * normal(&mut rng);
        if bias {
            x[[k, 2]] = 1.0;
        }
        y[k] = 1.0 - 2.0 * c;
    }
    Ok((x, y))
}

fn gaussian_net(dims: &[usize], k: usize, rng: &mut ChaCha8Rng) -> ParallelNet<f64> {
    let subnets = (0..k)
        .map(|_| {
            let layers = dims
                .windows(2)
                .map(|p| Array2::from_shape_fn((p[0], p[1]), |_| normal(rng)))
                .collect();
            let output = Array1::from_shape_fn(*dims.last().unwrap(), |_| normal(rng));
            SubNet { layers, output }
        })
        .collect();
    ParallelNet::new(subnets).unwrap_or_else(|_| ParallelNet::empty(dims.to_vec()))
}

/// `y = net(X) + noise * eps`; an empty network outputs 0.
pub fn label(net: &ParallelNet<f64>, x: &Array2<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
    let mut y = if net.num_subnets() == 0 {
        Array1::zeros(x.nrows())
    } else {
        net.forward(x.view())?
    };
    for v in y.iter_mut() {
        *v += noise * normal(rng);
    }
    Ok(y)
}

/// Gaussian inputs labelled by a Gaussian three-layer teacher with `k`
/// sub-networks of widths `(m1, m2)`.
pub fn teacher(n: usize, d: usize, k: usize, m1: usize, m2: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || m1 == 0 || m2 == 0 {
        return Err(Error::InvalidArgument("teacher needs positive n, d, m1, m2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| normal(&mut rng));
    let net = gaussian_net(&[d, m1, m2], k, &mut rng);
    let y = label(&net, &x, noise, &mut rng)?;
    Ok(Dataset {
        x,
        y,
        teacher: Some(net),
    })
}

/// Standard Gaussian `n x d` matrix whose singular values past the `r`-th
/// are replaced by 1.
pub fn lowrank(n: usize, d: usize, r: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("lowrank needs positive n, d".into()));
    }
    let k = n.min(d);
    if r > k {
        return Err(Error::RankOutOfRange { r, max: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_fn((n, d), |_| normal(&mut rng));
    let f = svd(g.view());
    let mut s = f.sigma.clone();
    s.iter_mut().skip(r).for_each(|v| *v = 1.0);
    let us = &f.u * &s.view().insert_axis(Axis(0));
    Ok(us.dot(&f.vt))
}

/// Reads a numeric CSV. Rows with a different field count, or fields that
/// do not parse as numbers, are reported with 1-based row and column.
pub fn read_csv(
    path: &Path,
    label: &LabelColumn,
    header: Option<bool>,
    standardize: bool,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, label, header, standardize)
}

pub fn parse_csv(
    text: &str,
    label: &LabelColumn,
    header: Option<bool>,
    standardize: bool,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            row: i + 1,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        records.push((i + 1, rec));
    }
    if records.is_empty() {
        return Err(Error::Csv {
            row: 0,
            col: 0,
            msg: "no data rows".into(),
        });
    }
    let first_numeric = records[0].1.iter().all(|f| f.parse::<f64>().is_ok());
    let has_header = header.unwrap_or(!first_numeric);
    let names: Option<Vec<String>> = has_header.then(|| records[0].1.iter().map(str::to_string).collect());
    let body = if has_header { &records[1..] } else { &records[..] };
    let width = records[0].1.len();
    let label_idx = match label {
        LabelColumn::Index(j) => *j,
        LabelColumn::Name(name) => names
            .as_ref()
            .and_then(|ns| ns.iter().position(|n| n == name))
            .or_else(|| (names.is_none() && name == "y").then(|| width - 1))
            .ok_or_else(|| Error::Csv {
                row: 1,
                col: 0,
                msg: format!("label column {name:?} not found"),
            })?,
    };
    if label_idx >= width || width < 2 {
        return Err(Error::Csv {
            row: records[0].0,
            col: label_idx + 1,
            msg: format!("label column {label_idx} outside {width} columns (need at least 2)"),
        });
    }
    if body.is_empty() {
        return Err(Error::Csv {
            row: 0,
            col: 0,
            msg: "no data rows".into(),
        });
    }
    let mut x = Array2::zeros((body.len(), width - 1));
    let mut y = Array1::zeros(body.len());
    for (r, (line, rec)) in body.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Csv {
                row: *line,
                col: rec.len().min(width) + 1,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let mut c = 0;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Csv {
                row: *line,
                col: j + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row: *line,
                    col: j + 1,
                    msg: "non-finite value".into(),
                });
            }
            if j == label_idx {
                y[r] = v;
            } else {
                x[[r, c]] = v;
                c += 1;
            }
        }
    }
    if standardize {
        for mut col in x.columns_mut() {
            let mean = col.mean().unwrap_or(0.0);
            let sd = col.std(0.0);
            col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
        }
    }
    Ok((x, y))
}
