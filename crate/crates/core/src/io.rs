//! Long-format panel CSV, metrics CSV and JSON helpers.
//!
//! Panel files have one row per `(id, t)` with the columns `id, t, avail,
//! prob, treat, outcome`, history features prefixed `h_` and moderator
//! columns prefixed `f_`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{DecisionPoint, Panel, PanelMeta, Trajectory};

pub const REQUIRED_COLUMNS: [&str; 6] = ["id", "t", "avail", "prob", "treat", "outcome"];
pub const HISTORY_PREFIX: &str = "h_";
pub const MODERATOR_PREFIX: &str = "f_";

#[derive(Debug, Clone)]
struct Columns {
    required: [usize; 6],
    history: Vec<(usize, String)>,
    moderator: Vec<(usize, String)>,
}

fn columns(headers: &csv::StringRecord) -> Result<Columns> {
    let mut required = [0; 6];
    for (slot, name) in required.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing required column \"{name}\"")))?;
    }
    let pick = |prefix: &str| -> Vec<(usize, String)> {
        headers
            .iter()
            .enumerate()
            .filter_map(|(j, h)| h.trim().strip_prefix(prefix).map(|s| (j, s.to_string())))
            .collect()
    };
    let moderator = pick(MODERATOR_PREFIX);
    if moderator.is_empty() {
        return Err(Error::Schema(format!("no moderator columns (prefix \"{MODERATOR_PREFIX}\")")));
    }
    Ok(Columns { required, history: pick(HISTORY_PREFIX), moderator })
}

fn parse_f64(field: &str, name: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse { row, message: format!("column \"{name}\": cannot parse \"{field}\" as a number") })
}

fn parse_bool(field: &str, name: &str, row: usize) -> Result<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Ok(true),
        "0" | "0.0" | "false" => Ok(false),
        other => Err(Error::Parse { row, message: format!("column \"{name}\": expected 0/1, got \"{other}\"") }),
    }
}

/// Read a panel from any CSV source. Row numbers in errors count the header as row 1.
pub fn read_panel<R: Read>(reader: R) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = columns(rdr.headers()?)?;
    let [c_id, c_t, c_avail, c_prob, c_treat, c_outcome] = cols.required;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, usize, DecisionPoint)>> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 2;
        let record = record?;
        let get = |j: usize| record.get(j).unwrap_or("");
        let id = get(c_id).to_string();
        let t = get(c_t)
            .parse::<usize>()
            .map_err(|_| Error::Parse { row, message: format!("column \"t\": expected a positive integer, got \"{}\"", get(c_t)) })?;
        let point = DecisionPoint {
            avail: parse_bool(get(c_avail), "avail", row)?,
            prob: parse_f64(get(c_prob), "prob", row)?,
            treat: parse_bool(get(c_treat), "treat", row)?,
            outcome: parse_f64(get(c_outcome), "outcome", row)?,
            history: cols.history.iter().map(|(j, name)| parse_f64(get(*j), name, row)).collect::<Result<_>>()?,
            moderator: cols.moderator.iter().map(|(j, name)| parse_f64(get(*j), name, row)).collect::<Result<_>>()?,
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((t, row, point));
    }
    if order.is_empty() {
        return Err(Error::Schema("the file has no data rows".into()));
    }
    let mut trajectories = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = groups.remove(id).unwrap_or_default();
        rows.sort_by_key(|(t, _, _)| *t);
        for (expected, (t, row, _)) in rows.iter().enumerate() {
            if *t != expected + 1 {
                return Err(Error::Parse { row: *row, message: format!("id \"{id}\": t must run 1..T without gaps or repeats, found t = {t} where {} was expected", expected + 1) });
            }
        }
        trajectories.push(Trajectory::new(rows.into_iter().map(|(_, _, p)| p).collect()));
    }
    let meta = PanelMeta {
        history_names: cols.history.into_iter().map(|(_, n)| n).collect(),
        moderator_names: cols.moderator.into_iter().map(|(_, n)| n).collect(),
    };
    Panel::new(trajectories, meta)
}

pub fn load_panel_csv(path: impl AsRef<Path>) -> Result<Panel> {
    read_panel(File::open(path)?)
}

pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let meta = panel.meta();
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(meta.history_names.iter().map(|n| format!("{HISTORY_PREFIX}{n}")));
    let p = panel.trajectory(0).points[0].moderator.len();
    header.extend((0..p).map(|j| format!("{MODERATOR_PREFIX}{}", meta.moderator_names.get(j).cloned().unwrap_or_else(|| j.to_string()))));
    w.write_record(&header)?;
    for (i, traj) in panel.trajectories().iter().enumerate() {
        for (t0, pt) in traj.points.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string(), (t0 + 1).to_string(), (pt.avail as u8).to_string(), pt.prob.to_string(), (pt.treat as u8).to_string(), pt.outcome.to_string()];
            rec.extend(pt.history.iter().map(f64::to_string));
            rec.extend(pt.moderator.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel_csv(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    write_panel(panel, File::create(path)?)
}

/// Write any serializable rows (metrics, raw replicates) as CSV.
pub fn write_rows_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, File::create(path)?)
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
