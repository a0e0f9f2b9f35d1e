//! Trajectory CSV files and run manifests.

use crate::config::to_flat;
use crate::integrator::Trajectory;
use crate::scenarios::{ModelKind, ScenarioConfig};
use crate::signals::fmt17;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

pub fn header(model: ModelKind) -> &'static str {
    match model {
        ModelKind::TwoD => "t,x,y",
        ModelKind::FourD => "t,x,u,v,y",
    }
}

/// `samples` rows on a uniform grid over the trajectory's span (Hermite dense output).
pub fn trajectory_csv(traj: &Trajectory, model: ModelKind, samples: usize) -> String {
    let mut out = String::from(header(model));
    out.push('\n');
    for (t, s) in traj.resample(samples.max(2)) {
        out.push_str(&fmt17(t));
        for v in s.iter() {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push('\n');
    }
    out
}

/// Numeric CSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or("empty CSV")?;
        let columns: Vec<String> = head.split(',').map(|c| c.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", i + 1))?;
            if row.len() != columns.len() {
                return Err(format!(
                    "line {}: expected {} fields, found {}",
                    i + 1,
                    columns.len(),
                    row.len()
                ));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn select(&self, names: &[&str]) -> Result<Self, String> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column(n).ok_or_else(|| format!("column {n:?} not in input (have {})", self.columns.join(","))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            columns: names.iter().map(|s| s.to_string()).collect(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolved config plus `manifest.*` metadata; parseable as a config.
pub fn manifest_text(cfg: &ScenarioConfig, input: Option<(&str, &[u8])>, outputs: &[(&str, &[u8])]) -> String {
    let mut out = String::new();
    writeln!(out, "manifest.tool = lactodyn").unwrap();
    writeln!(out, "manifest.version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    if let Some((path, bytes)) = input {
        writeln!(out, "manifest.input = {path}").unwrap();
        writeln!(out, "manifest.input_sha256 = {}", sha256_hex(bytes)).unwrap();
    }
    let names: Vec<&str> = outputs.iter().map(|(n, _)| *n).collect();
    writeln!(out, "manifest.outputs = {}", names.join(", ")).unwrap();
    for (i, (_, bytes)) in outputs.iter().enumerate() {
        writeln!(out, "manifest.output_sha256.{i} = {}", sha256_hex(bytes)).unwrap();
    }
    for (k, v) in to_flat(cfg) {
        writeln!(out, "{k} = {v}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_and_select() {
        let t = Table::parse("t,x,y\n0,1,2\n1,3,4\n").unwrap();
        assert_eq!(t.rows.len(), 2);
        let s = t.select(&["t", "y"]).unwrap();
        assert_eq!(s.rows[1], vec![1.0, 4.0]);
        assert_eq!(Table::parse(&s.to_csv()).unwrap(), s);
        assert!(t.select(&["u"]).is_err());
        assert!(Table::parse("t,x\n0,1,2\n").is_err());
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
