//! Documents, entities and gold links, plus the canonical line-delimited
//! dataset format.
//!
//! Dataset files are UTF-8 JSON lines. The first line is a header
//! `{"schema":"gose-ds/1","count":<n>}`; each following line holds one
//! [`Document`]. An empty document list is written as an empty file.

mod funsd;

pub use funsd::{load_funsd, parse_funsd, to_funsd_json, FunsdLoad, FunsdOptions, EMPTY_TOKEN};

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DATASET_SCHEMA: &str = "gose-ds/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub tokens: Vec<String>,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

/// A page of entities and the directed key -> value links between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub page_w: f64,
    pub page_h: f64,
    pub entities: Vec<Entity>,
    pub links: BTreeSet<(usize, usize)>,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        page_w: f64,
        page_h: f64,
        entities: Vec<Entity>,
        links: BTreeSet<(usize, usize)>,
    ) -> Result<Self> {
        let doc = Document {
            doc_id: doc_id.into(),
            page_w,
            page_h,
            entities,
            links,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.doc_id;
        if !(self.page_w > 0.0 && self.page_h > 0.0) {
            return Err(Error::Validation(format!(
                "{id}: page size must be positive, got {}x{}",
                self.page_w, self.page_h
            )));
        }
        for (pos, e) in self.entities.iter().enumerate() {
            if e.id != pos {
                return Err(Error::Validation(format!(
                    "{id}: entity at position {pos} has id {}",
                    e.id
                )));
            }
            if e.tokens.is_empty() {
                return Err(Error::Validation(format!("{id}: entity {pos} has no tokens")));
            }
            e.bbox
                .validate()
                .map_err(|err| Error::Validation(format!("{id}: entity {pos}: {err}")))?;
        }
        let n = self.entities.len();
        for &(k, v) in &self.links {
            if k >= n || v >= n {
                return Err(Error::Validation(format!(
                    "{id}: link ({k}, {v}) references a missing entity (have {n})"
                )));
            }
            if k == v {
                return Err(Error::Validation(format!("{id}: self-link on entity {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    count: usize,
}

pub fn write_dataset<W: Write>(docs: &[Document], mut out: W) -> Result<()> {
    if docs.is_empty() {
        return Ok(());
    }
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        count: docs.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn save_dataset(docs: &[Document], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(docs, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn line_error(line: usize, message: impl ToString) -> Error {
    Error::Parse {
        location: format!("line {line}"),
        message: message.to_string(),
    }
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Document>> {
    let mut lines = input.lines().enumerate();
    let header: DatasetHeader = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((i, line)) => {
                let line = line.map_err(|e| line_error(i + 1, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| line_error(i + 1, e))?;
            }
        }
    };
    if header.schema != DATASET_SCHEMA {
        return Err(line_error(
            1,
            format!("unsupported schema `{}`, expected `{DATASET_SCHEMA}`", header.schema),
        ));
    }
    let mut docs = Vec::with_capacity(header.count.min(1 << 16));
    for (i, line) in lines {
        let line = line.map_err(|e| line_error(i + 1, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| line_error(i + 1, e))?;
        doc.validate().map_err(|e| line_error(i + 1, e))?;
        docs.push(doc);
    }
    if docs.len() != header.count {
        return Err(line_error(
            1,
            format!("header announces {} documents, found {}", header.count, docs.len()),
        ));
    }
    Ok(docs)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}
