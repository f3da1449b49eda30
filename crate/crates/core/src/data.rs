//! Labelled datasets and their CSV form (`id,label,x_0..x_{d−1}`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub label: usize,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.input.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.examples.iter().map(|e| e.input.as_slice())
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("dataset is empty"));
        }
        Ok(())
    }

    /// Number of examples carrying each label in `0..num_classes`.
    pub fn label_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.examples {
            if e.label < num_classes {
                counts[e.label] += 1;
            }
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.input_dim().unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_owned(), "label".to_owned()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.examples {
            if e.input.len() != d {
                return Err(Error::shape(format!("example {} has ragged input", e.id)));
            }
            let mut rec = vec![e.id.to_string(), e.label.to_string()];
            // `{:?}` prints the shortest string that round-trips exactly
            rec.extend(e.input.iter().map(|x| format!("{x:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
            return Err(Error::Format(
                "dataset CSV must start with `id,label`".into(),
            ));
        }
        for (i, h) in header.iter().skip(2).enumerate() {
            if h != format!("x_{i}") {
                return Err(Error::Format(format!(
                    "unexpected column `{h}`, wanted `x_{i}`"
                )));
            }
        }
        let mut examples = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse_err = |col: &str| Error::Format(format!("bad `{col}` field in dataset row"));
            let id = rec[0].parse().map_err(|_| parse_err("id"))?;
            let label = rec[1].parse().map_err(|_| parse_err("label"))?;
            let input = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|_| parse_err("x")))
                .collect::<Result<Vec<_>>>()?;
            examples.push(Example { id, label, input });
        }
        Ok(Self { examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        sha256_hex(&buf)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
