//! CSV artifacts: patient data, posterior draws and the row types of every
//! emitted table. Floats are written in shortest round-trip form, so every
//! file parses back to the values that produced it.

use std::collections::HashMap;
use std::io::{Read, Write};

use semicomp_core::mcmc::BlockAcceptance;
use semicomp_core::model::{Dataset, DatasetError, ModelState, PatientRecord, TransitionParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One problem found while reading a data file, by 1-based file line.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("header: {0}")]
    Header(String),
    #[error("{}", format_rows(.0))]
    Rows(Vec<RowError>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_rows(rows: &[RowError]) -> String {
    const SHOWN: usize = 10;
    let mut s = format!("{} invalid row(s)", rows.len());
    for r in rows.iter().take(SHOWN) {
        s.push_str(&format!("\n  line {}: {}", r.line, r.message));
    }
    if rows.len() > SHOWN {
        s.push_str(&format!("\n  ... {} more", rows.len() - SHOWN));
    }
    s
}

const FIXED: [&str; 5] = ["hospital_id", "y1", "delta1", "y2", "delta2"];

/// Covariate column: shared (`x_name`) or transition-specific (`xg_name`).
#[derive(Debug, Clone, Copy, PartialEq)]
enum Scope {
    Shared,
    Only(usize),
}

fn parse_covariate_header(h: &str) -> Option<(Scope, &str)> {
    let (scope, name) = if let Some(n) = h.strip_prefix("x_") {
        (Scope::Shared, n)
    } else {
        let g = ["x1_", "x2_", "x3_"].iter().position(|p| h.starts_with(p))?;
        (Scope::Only(g), &h[3..])
    };
    (!name.is_empty()).then_some((scope, name))
}

/// Reads patient records. Hospitals get dense indices in order of first
/// appearance. Every malformed or invalid row is reported, not just the first.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset<f64>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < FIXED.len() || header.iter().zip(FIXED).any(|(a, b)| a != b) {
        return Err(IngestError::Header(format!(
            "must start with {}",
            FIXED.join(",")
        )));
    }
    let mut names: [Vec<String>; 3] = Default::default();
    let mut columns: [Vec<usize>; 3] = Default::default();
    for (c, h) in header.iter().enumerate().skip(FIXED.len()) {
        let (scope, name) = parse_covariate_header(h).ok_or_else(|| {
            IngestError::Header(format!("column {h:?} is not x_<name>, x1_<name>, x2_<name> or x3_<name>"))
        })?;
        for g in 0..3 {
            if scope == Scope::Shared || scope == Scope::Only(g) {
                if names[g].iter().any(|n| n == name) {
                    return Err(IngestError::Header(format!(
                        "duplicate covariate {name:?} for transition {}",
                        g + 1
                    )));
                }
                names[g].push(name.to_string());
                columns[g].push(c);
            }
        }
    }

    let mut records = Vec::new();
    let mut ids: Vec<u64> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut errors = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        match parse_row(&row, &columns) {
            Ok((id, mut rec)) => {
                if let Err(e) = rec.validate() {
                    errors.push(RowError {
                        line,
                        message: e.to_string(),
                    });
                    continue;
                }
                rec.hospital = *index.entry(id).or_insert_with(|| {
                    ids.push(id);
                    ids.len() - 1
                });
                records.push(rec);
            }
            Err(message) => errors.push(RowError { line, message }),
        }
    }
    if !errors.is_empty() {
        return Err(IngestError::Rows(errors));
    }
    Ok(Dataset::new(records, ids, names)?)
}

fn parse_row(
    row: &csv::StringRecord,
    columns: &[Vec<usize>; 3],
) -> Result<(u64, PatientRecord<f64>), String> {
    let field = |c: usize| row.get(c).unwrap_or("");
    let id: u64 = field(0)
        .parse()
        .map_err(|_| format!("hospital_id {:?} is not a non-negative integer", field(0)))?;
    let num = |c: usize| -> Result<f64, String> {
        let v: f64 = field(c)
            .parse()
            .map_err(|_| format!("{} {:?} is not a number", column_name(c), field(c)))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{} must be finite", column_name(c)))
        }
    };
    let flag = |c: usize| match field(c) {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("{} {other:?} must be 0 or 1", FIXED[c])),
    };
    let x = [0, 1, 2].map(|g| columns[g].iter().map(|c| num(*c)).collect::<Result<Vec<_>, _>>());
    let [x1, x2, x3] = x;
    let record = PatientRecord {
        hospital: 0,
        y1: num(1)?,
        delta1: flag(2)?,
        y2: num(3)?,
        delta2: flag(4)?,
        x: [x1?, x2?, x3?],
    };
    Ok((id, record))
}

fn column_name(c: usize) -> String {
    FIXED.get(c).map_or_else(|| format!("column {}", c + 1), |s| s.to_string())
}

/// Writes records in the ingest schema. Shared `x_` columns are used when
/// all transitions have the same covariates, `x1_`/`x2_`/`x3_` otherwise.
pub fn write_dataset<W: Write>(ds: &Dataset<f64>, writer: W) -> csv::Result<()> {
    let names = ds.covariate_names();
    let shared = names[0] == names[1] && names[1] == names[2];
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    if shared {
        header.extend(names[0].iter().map(|n| format!("x_{n}")));
    } else {
        for (g, ns) in names.iter().enumerate() {
            header.extend(ns.iter().map(|n| format!("x{}_{n}", g + 1)));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    let ids = ds.hospital_ids();
    for r in ds.records() {
        let mut row = vec![
            ids[r.hospital].to_string(),
            r.y1.to_string(),
            u8::from(r.delta1).to_string(),
            r.y2.to_string(),
            u8::from(r.delta2).to_string(),
        ];
        let groups = if shared { &r.x[..1] } else { &r.x[..] };
        row.extend(groups.iter().flatten().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Retained draw of the model parameters (frailties are not stored).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub chain: u64,
    pub draw: u64,
    pub theta: f64,
    pub trans: [TransitionParams<f64>; 3],
    pub sigma_v: [[f64; 3]; 3],
    pub v: Vec<[f64; 3]>,
}

impl PosteriorDraw {
    pub fn from_state(chain: u64, draw: u64, s: &ModelState<f64>) -> Self {
        Self {
            chain,
            draw,
            theta: s.theta,
            trans: s.trans.clone(),
            sigma_v: s.sigma_v,
            v: s.v.clone(),
        }
    }
}

const SIGMA_ENTRIES: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Posterior draws, one row per draw. Columns: `chain, draw, theta`, then per
/// transition `alpha<g>, kappa<g>, beta<g>_<name>...`, the upper triangle
/// `sigma_v_<r><c>`, and `v<g>_<hospital_id>` per hospital.
pub fn write_posterior<W: Write>(
    draws: &[PosteriorDraw],
    covariate_names: &[Vec<String>; 3],
    hospital_ids: &[u64],
    writer: W,
) -> csv::Result<()> {
    let mut header = vec!["chain".to_string(), "draw".into(), "theta".into()];
    for (g, names) in covariate_names.iter().enumerate() {
        let g = g + 1;
        header.push(format!("alpha{g}"));
        header.push(format!("kappa{g}"));
        header.extend(names.iter().map(|n| format!("beta{g}_{n}")));
    }
    header.extend(SIGMA_ENTRIES.iter().map(|(r, c)| format!("sigma_v_{}{}", r + 1, c + 1)));
    for id in hospital_ids {
        header.extend((1..=3).map(|g| format!("v{g}_{id}")));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for d in draws {
        let mut row = vec![d.chain.to_string(), d.draw.to_string(), d.theta.to_string()];
        for t in &d.trans {
            row.push(t.alpha.to_string());
            row.push(t.kappa.to_string());
            row.extend(t.beta.iter().map(f64::to_string));
        }
        row.extend(SIGMA_ENTRIES.iter().map(|(r, c)| d.sigma_v[*r][*c].to_string()));
        row.extend(d.v.iter().flatten().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum PosteriorColumn {
    Chain,
    Draw,
    Theta,
    Alpha(usize),
    Kappa(usize),
    Beta(usize),
    Sigma(usize, usize),
    V(usize, usize),
}

/// Parses a file written by [`write_posterior`].
pub fn read_posterior<R: Read>(reader: R) -> Result<Vec<PosteriorDraw>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut layout = Vec::with_capacity(header.len());
    let mut dims = [0usize; 3];
    let mut hospitals: Vec<String> = Vec::new();
    let bad = |h: &str| IngestError::Header(format!("unexpected posterior column {h:?}"));
    for h in header.iter() {
        let col = match h {
            "chain" => PosteriorColumn::Chain,
            "draw" => PosteriorColumn::Draw,
            "theta" => PosteriorColumn::Theta,
            _ => {
                let digit = |s: &str| -> Option<usize> {
                    let g: usize = s.parse().ok()?;
                    (1..=3).contains(&g).then_some(g - 1)
                };
                if let Some(rest) = h.strip_prefix("sigma_v_") {
                    let b = rest.as_bytes();
                    if b.len() != 2 {
                        return Err(bad(h));
                    }
                    let r = digit(&rest[..1]).ok_or_else(|| bad(h))?;
                    let c = digit(&rest[1..]).ok_or_else(|| bad(h))?;
                    PosteriorColumn::Sigma(r, c)
                } else if let Some(g) = h.strip_prefix("alpha").and_then(digit) {
                    PosteriorColumn::Alpha(g)
                } else if let Some(g) = h.strip_prefix("kappa").and_then(digit) {
                    PosteriorColumn::Kappa(g)
                } else if let Some((g, _)) = h
                    .strip_prefix("beta")
                    .and_then(|r| r.split_once('_'))
                    .and_then(|(g, n)| Some((digit(g)?, n)))
                {
                    dims[g] += 1;
                    PosteriorColumn::Beta(g)
                } else if let Some((g, id)) = h
                    .strip_prefix('v')
                    .and_then(|r| r.split_once('_'))
                    .and_then(|(g, id)| Some((digit(g)?, id)))
                {
                    let j = match hospitals.iter().position(|x| x == id) {
                        Some(j) => j,
                        None => {
                            hospitals.push(id.to_string());
                            hospitals.len() - 1
                        }
                    };
                    PosteriorColumn::V(j, g)
                } else {
                    return Err(bad(h));
                }
            }
        };
        layout.push(col);
    }

    let mut draws = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |m: String| IngestError::Rows(vec![RowError { line, message: m }]);
        let mut d = PosteriorDraw {
            chain: 0,
            draw: 0,
            theta: 0.0,
            trans: dims.map(|p| TransitionParams::new(0.0, 0.0, Vec::with_capacity(p))),
            sigma_v: [[0.0; 3]; 3],
            v: vec![[0.0; 3]; hospitals.len()],
        };
        for (col, value) in layout.iter().zip(row.iter()) {
            let f = || value.parse::<f64>().map_err(|_| err(format!("{value:?} is not a number")));
            match *col {
                PosteriorColumn::Chain => {
                    d.chain = value.parse().map_err(|_| err(format!("bad chain {value:?}")))?
                }
                PosteriorColumn::Draw => {
                    d.draw = value.parse().map_err(|_| err(format!("bad draw {value:?}")))?
                }
                PosteriorColumn::Theta => d.theta = f()?,
                PosteriorColumn::Alpha(g) => d.trans[g].alpha = f()?,
                PosteriorColumn::Kappa(g) => d.trans[g].kappa = f()?,
                PosteriorColumn::Beta(g) => d.trans[g].beta.push(f()?),
                PosteriorColumn::Sigma(r, c) => {
                    let x = f()?;
                    d.sigma_v[r][c] = x;
                    d.sigma_v[c][r] = x;
                }
                PosteriorColumn::V(j, g) => d.v[j][g] = f()?,
            }
        }
        draws.push(d);
    }
    Ok(draws)
}

/// Posterior summary of one ratio statistic for one hospital and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub hospital_id: u64,
    pub t: f64,
    pub statistic: String,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Plug-in and loss-based labels of one hospital under one scheme, with the
/// marginal posterior probability of each category (`p0`, `p1` for top-k,
/// `p1` to `p4` for quadrants).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub hospital_id: u64,
    pub scheme: String,
    pub plug_in: u8,
    pub loss_based: u8,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub p4: Option<f64>,
    pub plug_in_risk: f64,
    pub risk: f64,
}

/// One cell of a named contingency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTabRow {
    pub table: String,
    pub row: u8,
    pub col: u8,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRow {
    pub model: String,
    pub chain: u64,
    pub block: String,
    pub accepted: u64,
    pub proposed: u64,
    pub nonfinite: u64,
    pub rate: f64,
}

impl AcceptanceRow {
    pub fn new(model: &str, chain: u64, b: &BlockAcceptance) -> Self {
        Self {
            model: model.to_string(),
            chain,
            block: b.block.clone(),
            accepted: b.accepted,
            proposed: b.proposed,
            nonfinite: b.nonfinite,
            rate: b.rate,
        }
    }
}

/// Worst relative change of a statistic between `nodes` and `reference_nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub nodes: usize,
    pub reference_nodes: usize,
    pub statistic: String,
    pub max_rel_diff: f64,
}

/// Posterior summary of a GLMM parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub target: String,
    pub parameter: String,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned, R: Read>(reader: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "hospital_id,y1,delta1,y2,delta2,x_age,x1_sex\n\
                        7,10,1,20,0,0.5,1\n\
                        3,5,0,5,1,-1,0\n\
                        7,90,0,90,0,2,1\n";

    #[test]
    fn reads_well_formed_file() {
        let ds = read_dataset(GOOD.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.hospital_ids(), &[7, 3]);
        assert_eq!(ds.covariate_names()[0], vec!["age", "sex"]);
        assert_eq!(ds.covariate_names()[1], vec!["age"]);
        assert_eq!(ds.records()[1].hospital, 1);
        assert_eq!(ds.records()[0].x[0], vec![0.5, 1.0]);
    }

    #[test]
    fn reports_every_bad_row_by_line() {
        let text = "hospital_id,y1,delta1,y2,delta2\n1,30,1,20,0\n1,5,0,5,1\n1,abc,0,5,1\n1,-2,0,5,1\n";
        let Err(IngestError::Rows(rows)) = read_dataset(text.as_bytes()) else {
            panic!("expected row errors")
        };
        let lines: Vec<u64> = rows.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 4, 5]);
        assert!(rows[1].message.contains("y1"));
    }

    #[test]
    fn rejects_bad_headers() {
        for h in ["y1,hospital_id,delta1,y2,delta2", "hospital_id,y1,delta1,y2,delta2,age", "hospital_id,y1,delta1,y2,delta2,x_a,x_a"] {
            let text = format!("{h}\n");
            assert!(matches!(read_dataset(text.as_bytes()), Err(IngestError::Header(_))), "{h}");
        }
    }

    #[test]
    fn split_covariates_round_trip() {
        let ds = read_dataset(GOOD.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("hospital_id,y1,delta1,y2,delta2,x1_age,x1_sex,x2_age,x3_age\n"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }
}
