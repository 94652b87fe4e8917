//! Per-iteration diagnostics and their JSON-lines / CSV encodings.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Objective at the iterate the QP was built around.
    pub f: f64,
    /// ‖σ‖∞ at that iterate.
    pub sigma_max: f64,
    pub delta_q: f64,
    /// Accepted step length; 0 on a null step.
    pub beta: f64,
    pub eps: f64,
    pub rho: f64,
    pub tau: f64,
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qp_kkt: Option<f64>,
    /// Merit `ρf + Σσ` at the iterate and at the accepted trial point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merit_trial: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<IterationRecord>,
}

impl Trace {
    pub fn push(&mut self, r: IterationRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, IterationRecord> {
        self.records.iter()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }

    /// Columns `k,f,sigma_max,delta_q`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,f,sigma_max,delta_q")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{:e}", r.k, r.f, r.sigma_max, r.delta_q)?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Trace {
    type Item = &'a IterationRecord;
    type IntoIter = std::slice::Iter<'a, IterationRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: usize) -> IterationRecord {
        IterationRecord {
            k,
            f: 1.5,
            sigma_max: 1e-4,
            delta_q: 0.25,
            beta: 0.8,
            eps: 0.1,
            rho: 0.1,
            tau: 0.1,
            eta: None,
            modes: None,
            qp_kkt: None,
            merit: None,
            merit_trial: None,
            note: None,
            profile: None,
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut t = Trace::default();
        t.push(record(1));
        let mut r = record(2);
        r.eta = Some(-0.3);
        r.modes = Some(vec![[-0.3, 2.0], [-0.3, -2.0]]);
        t.push(r);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(r#"{"k":1,"f":1.5,"sigma_max":0.0001,"delta_q":0.25,"beta":0.8,"eps":0.1,"rho":0.1,"tau":0.1,"eta":null}"#));
        let back = Trace::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn csv_header() {
        let mut t = Trace::default();
        t.push(record(1));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("k,f,sigma_max,delta_q"));
        assert_eq!(text.lines().count(), 2);
    }
}
