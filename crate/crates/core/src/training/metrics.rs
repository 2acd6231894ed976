use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// One line of a metrics file. `seconds` is wall-clock time since the start
/// of training, or `null` in deterministic runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: Option<f64>,
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format {
            what: "metrics",
            msg: e.to_string(),
        })?;
        out.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            MetricRecord {
                epoch: 0,
                split: "train".into(),
                loss: 1.25,
                accuracy: 0.5,
                lr: 0.1,
                seconds: None,
            },
            MetricRecord {
                epoch: 0,
                split: "test".into(),
                loss: 1.5,
                accuracy: 0.25,
                lr: 0.1,
                seconds: Some(2.0),
            },
        ];
        write_metrics_jsonl(&path, &recs).unwrap();
        assert_eq!(read_metrics_jsonl(&path).unwrap(), recs);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"epoch":0,"split":"train","loss":1.25,"accuracy":0.5,"lr":0.1,"seconds":null}"#));
    }
}
