use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    #[default]
    Jsonl,
    Csv,
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(MetricsFormat::Jsonl),
            "csv" => Ok(MetricsFormat::Csv),
            _ => Err(Error::invalid(format!(
                "unknown metrics format {s:?}, expected jsonl or csv"
            ))),
        }
    }
}

/// Writes flat records, one line each, flushed per record. Keys come out
/// sorted; in CSV mode the first record fixes the header.
pub struct MetricsWriter<W: Write> {
    out: W,
    format: MetricsFormat,
    header: Option<Vec<String>>,
    lines: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, format: MetricsFormat) -> Self {
        Self {
            out,
            format,
            header: None,
            lines: 0,
        }
    }

    /// Data lines written so far.
    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    /// `record` must serialise to an object of numbers, strings and bools.
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let map = flat(record)?;
        let line = match self.format {
            MetricsFormat::Jsonl => {
                serde_json::to_string(&Value::Object(map)).expect("json map serialises")
            }
            MetricsFormat::Csv => {
                let keys: Vec<String> = map.keys().cloned().collect();
                match &self.header {
                    None => {
                        writeln!(self.out, "{}", keys.join(",")).map_err(io)?;
                        self.header = Some(keys);
                    }
                    Some(h) if *h != keys => {
                        return Err(Error::invalid(format!(
                            "metrics record keys {keys:?} differ from header {h:?}"
                        )));
                    }
                    Some(_) => {}
                }
                map.values().map(csv_cell).collect::<Vec<_>>().join(",")
            }
        };
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)?;
        self.lines += 1;
        Ok(())
    }
}

fn io(e: std::io::Error) -> Error {
    Error::io("metrics stream", e)
}

fn flat<T: Serialize>(record: &T) -> Result<Map<String, Value>> {
    let v =
        serde_json::to_value(record).map_err(|e| Error::invalid(format!("metrics record: {e}")))?;
    let Value::Object(map) = v else {
        return Err(Error::invalid("metrics record must be a key/value object"));
    };
    if let Some((k, _)) = map.iter().find(|(_, v)| v.is_object() || v.is_array()) {
        return Err(Error::invalid(format!("metrics field {k} is not a scalar")));
    }
    Ok(map)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) if s.contains([',', '"', '\n']) => {
            format!("\"{}\"", s.replace('"', "\"\""))
        }
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}
