//! CSV readers and writers for datasets, truth, draws, and file digests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Point;
use crate::model::{Household, Observation};
use crate::sampler::{ChainOutput, PosteriorDraws};
use crate::simstudy::TruthRecord;

/// Sampler columns appended after the parameter columns of a draws file.
pub const DRAW_META_COLUMNS: [&str; 6] = [
    "chain",
    "iter",
    "divergent",
    "treedepth",
    "accept_stat",
    "stepsize",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}, record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    csv::Reader::from_path(path).map_err(csv_err(path))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    record: usize,
    column: &str,
    raw: &str,
) -> Result<T, IoError> {
    raw.trim().parse().map_err(|_| IoError::Parse {
        path: path.to_path_buf(),
        record,
        message: format!("column `{column}`: cannot parse `{raw}`"),
    })
}

/// `id, x, y, group, cov0, cov1, ...`
pub fn write_households(path: &Path, households: &[Household]) -> Result<(), IoError> {
    let p = households.first().map_or(0, |h| h.covariates.len());
    let mut w = writer(path)?;
    let mut header = vec!["id".to_string(), "x".into(), "y".into(), "group".into()];
    header.extend((0..p).map(|i| format!("cov{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for h in households {
        let mut rec = vec![
            h.id.clone(),
            h.location.x.to_string(),
            h.location.y.to_string(),
            h.group.to_string(),
        ];
        rec.extend(h.covariates.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_households(path: &Path) -> Result<Vec<Household>, IoError> {
    let mut r = reader(path)?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let expect = ["id", "x", "y", "group"];
    if header.len() < 4 || header.iter().zip(expect).any(|(a, b)| a.trim() != b) {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            record: 0,
            message: "header must start with `id,x,y,group`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let n = i + 1;
        let x = parse_field(path, n, "x", &rec[1])?;
        let y = parse_field(path, n, "y", &rec[2])?;
        let covariates = (4..rec.len())
            .map(|k| parse_field(path, n, &header[k], &rec[k]))
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(Household {
            id: rec[0].trim().to_string(),
            location: Point::new(x, y),
            group: parse_field(path, n, "group", &rec[3])?,
            covariates,
        });
    }
    Ok(out)
}

/// `household_id, outcome`
pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    w.write_record(["household_id", "outcome"])
        .map_err(csv_err(path))?;
    for o in observations {
        w.write_record([o.household_id.as_str(), &o.outcome.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>, IoError> {
    let mut r = reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != 2 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                record: i + 1,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        out.push(Observation {
            household_id: rec[0].trim().to_string(),
            outcome: parse_field(path, i + 1, "outcome", &rec[1])?,
        });
    }
    Ok(out)
}

/// `household_id, exposure` with the generating parameters in a second file
/// `name, value`.
pub fn write_truth(exposures: &Path, params: &Path, truth: &TruthRecord) -> Result<(), IoError> {
    let mut w = writer(exposures)?;
    w.write_record(["household_id", "exposure"])
        .map_err(csv_err(exposures))?;
    for (id, e) in truth.household_ids.iter().zip(&truth.exposures) {
        w.write_record([id.as_str(), &e.to_string()])
            .map_err(csv_err(exposures))?;
    }
    w.flush().map_err(io_err(exposures))?;
    let mut w = writer(params)?;
    w.write_record(["name", "value"]).map_err(csv_err(params))?;
    w.write_record(["lambda", &truth.lambda.to_string()])
        .map_err(csv_err(params))?;
    w.write_record(["rho", &truth.rho.to_string()])
        .map_err(csv_err(params))?;
    for (i, g) in truth.gamma.iter().enumerate() {
        w.write_record([format!("gamma[{i}]"), g.to_string()])
            .map_err(csv_err(params))?;
    }
    w.flush().map_err(io_err(params))
}

/// One chain's draws: parameter columns then [`DRAW_META_COLUMNS`].
pub fn write_chain_draws(path: &Path, names: &[String], chain: &ChainOutput) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = names.to_vec();
    header.extend(DRAW_META_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    for (it, row) in chain.draws.iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(chain.chain.to_string());
        rec.push(it.to_string());
        rec.push(u8::from(chain.divergent[it]).to_string());
        rec.push(chain.treedepth[it].to_string());
        rec.push(chain.accept_stat[it].to_string());
        rec.push(chain.stepsize[it].to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// All chains in one file with `chain, iter` columns.
pub fn write_pooled_draws(path: &Path, draws: &PosteriorDraws) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = draws.names().to_vec();
    header.push("chain".into());
    header.push("iter".into());
    w.write_record(&header).map_err(csv_err(path))?;
    for (c, chain) in draws.chains().iter().enumerate() {
        for (it, row) in chain.iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push(c.to_string());
            rec.push(it.to_string());
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Sampler statistics read back from draws files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrawStats {
    pub divergent: usize,
    pub treedepth: Vec<u32>,
}

/// Reads one or more draws files. Rows are grouped by their `chain` column
/// (a file without one counts as its own chain); sampler columns are dropped
/// from the parameters.
pub fn read_draws(paths: &[PathBuf]) -> Result<(PosteriorDraws, DrawStats), IoError> {
    let mut names: Option<Vec<String>> = None;
    let mut chains: BTreeMap<(usize, String), Vec<Vec<f64>>> = BTreeMap::new();
    let mut stats = DrawStats::default();
    for (fi, path) in paths.iter().enumerate() {
        let mut r = reader(path)?;
        let header = r.headers().map_err(csv_err(path))?.clone();
        let param_cols: Vec<usize> = (0..header.len())
            .filter(|&k| !DRAW_META_COLUMNS.contains(&header[k].trim()))
            .collect();
        let these: Vec<String> = param_cols.iter().map(|&k| header[k].trim().to_string()).collect();
        match &names {
            None => names = Some(these),
            Some(n) if *n != these => {
                return Err(IoError::Parse {
                    path: path.clone(),
                    record: 0,
                    message: "parameter columns differ between draws files".into(),
                })
            }
            _ => {}
        }
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let chain_col = find("chain");
        let div_col = find("divergent");
        let depth_col = find("treedepth");
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err(path))?;
            let row = param_cols
                .iter()
                .map(|&k| parse_field::<f64>(path, i + 1, &header[k], &rec[k]))
                .collect::<Result<Vec<_>, _>>()?;
            let chain = chain_col.map_or(String::new(), |k| rec[k].trim().to_string());
            let key = if chain_col.is_some() {
                (0, chain)
            } else {
                (fi, String::new())
            };
            chains.entry(key).or_default().push(row);
            if let Some(k) = div_col {
                if rec[k].trim() == "1" {
                    stats.divergent += 1;
                }
            }
            if let Some(k) = depth_col {
                stats
                    .treedepth
                    .push(parse_field(path, i + 1, "treedepth", &rec[k])?);
            }
        }
    }
    let mut ordered: Vec<((usize, String), Vec<Vec<f64>>)> = chains.into_iter().collect();
    ordered.sort_by(|a, b| {
        let num = |s: &str| s.parse::<u64>().ok();
        (a.0 .0, num(&a.0 .1), &a.0 .1).cmp(&(b.0 .0, num(&b.0 .1), &b.0 .1))
    });
    Ok((
        PosteriorDraws::new(
            names.unwrap_or_default(),
            ordered.into_iter().map(|(_, v)| v).collect(),
        ),
        stats,
    ))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
