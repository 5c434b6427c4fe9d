//! FUNSD annotation ingestion.
//!
//! A FUNSD file is `{"form": [ {"id", "text", "box", "words", "linking",
//! "label"?}, ... ]}` with boxes in page pixels and `linking` holding
//! `[key_id, value_id]` pairs (usually repeated on both entities).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Document, Entity};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Token used for entities whose text is empty.
pub const EMPTY_TOKEN: &str = "<empty>";

#[derive(Debug, Clone, Copy, Default)]
pub struct FunsdOptions {
    /// Page width and height in the file's units. When absent the maximum
    /// box extent is used.
    pub page_size: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunsdLoad {
    pub document: Document,
    pub dropped_self_links: usize,
    pub duplicate_links: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdFile {
    form: Vec<FunsdEntity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdEntity {
    id: i64,
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    words: Vec<FunsdWord>,
    linking: Vec<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdWord {
    text: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

pub fn load_funsd(path: &Path, opts: FunsdOptions) -> Result<FunsdLoad> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_funsd(&text, &doc_id, opts)
}

pub fn parse_funsd(text: &str, doc_id: &str, opts: FunsdOptions) -> Result<FunsdLoad> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: FunsdFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        location: format!("$.{}", e.path()),
        message: e.inner().to_string(),
    })?;

    let mut index = HashMap::with_capacity(file.form.len());
    for (pos, ent) in file.form.iter().enumerate() {
        let [x1, y1, x2, y2] = ent.bbox;
        if ent.bbox.iter().any(|c| !c.is_finite() || *c < 0.0) || x1 > x2 || y1 > y2 {
            return Err(Error::Validation(format!(
                "$.form[{pos}].box {:?} is not a valid box (need 0 <= x1 <= x2, 0 <= y1 <= y2)",
                ent.bbox
            )));
        }
        if index.insert(ent.id, pos).is_some() {
            return Err(Error::Validation(format!(
                "$.form[{pos}].id {} is duplicated",
                ent.id
            )));
        }
    }

    let (page_w, page_h) = match opts.page_size {
        Some(size) => size,
        None if file.form.is_empty() => (1.0, 1.0),
        None => file.form.iter().fold((0.0f64, 0.0f64), |(w, h), e| {
            (w.max(e.bbox[2]), h.max(e.bbox[3]))
        }),
    };
    if !(page_w > 0.0 && page_h > 0.0) {
        return Err(Error::Validation(format!(
            "page size {page_w}x{page_h} is not positive"
        )));
    }

    let mut entities = Vec::with_capacity(file.form.len());
    for (pos, ent) in file.form.iter().enumerate() {
        let [x1, y1, x2, y2] = ent.bbox;
        let bbox = BBox::new(x1 / page_w, y1 / page_h, x2 / page_w, y2 / page_h)
            .map_err(|e| Error::Validation(format!("$.form[{pos}].box: {e}")))?;
        let mut tokens: Vec<String> = ent
            .words
            .iter()
            .map(|w| w.text.trim())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.is_empty() {
            tokens = ent.text.split_whitespace().map(str::to_string).collect();
        }
        if tokens.is_empty() {
            tokens.push(EMPTY_TOKEN.to_string());
        }
        entities.push(Entity {
            id: pos,
            tokens,
            bbox,
            kind: ent.label.clone(),
        });
    }

    let mut links = BTreeSet::new();
    let mut dropped_self_links = 0;
    let mut mentions = 0;
    for (pos, ent) in file.form.iter().enumerate() {
        for (li, &[k, v]) in ent.linking.iter().enumerate() {
            let lookup = |id: i64| {
                index.get(&id).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "$.form[{pos}].linking[{li}] references unknown entity id {id}"
                    ))
                })
            };
            let (k, v) = (lookup(k)?, lookup(v)?);
            if k == v {
                dropped_self_links += 1;
                continue;
            }
            mentions += 1;
            links.insert((k, v));
        }
    }
    if dropped_self_links > 0 {
        log::warn!("{doc_id}: dropped {dropped_self_links} self-link(s)");
    }
    let duplicate_links = mentions - links.len();
    let document = Document::new(doc_id, page_w, page_h, entities, links)?;
    Ok(FunsdLoad {
        document,
        dropped_self_links,
        duplicate_links,
    })
}

/// Render a document as FUNSD-shaped JSON with boxes scaled back to page
/// units. Each link is listed on both of its entities.
pub fn to_funsd_json(doc: &Document) -> Result<String> {
    let mut form: Vec<FunsdEntity> = doc
        .entities
        .iter()
        .map(|e| {
            let b = e.bbox;
            let bbox = [
                b.x1 * doc.page_w,
                b.y1 * doc.page_h,
                b.x2 * doc.page_w,
                b.y2 * doc.page_h,
            ];
            FunsdEntity {
                id: e.id as i64,
                text: e.tokens.join(" "),
                bbox,
                words: e
                    .tokens
                    .iter()
                    .map(|t| FunsdWord {
                        text: t.clone(),
                        bbox: Some(bbox),
                    })
                    .collect(),
                linking: Vec::new(),
                label: e.kind.clone(),
            }
        })
        .collect();
    for &(k, v) in &doc.links {
        form[k].linking.push([k as i64, v as i64]);
        form[v].linking.push([k as i64, v as i64]);
    }
    Ok(serde_json::to_string_pretty(&FunsdFile { form })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"form": [
        {"id": 0, "text": "Date:", "box": [10, 10, 50, 20], "label": "question",
         "words": [{"text": "Date:", "box": [10, 10, 50, 20]}], "linking": [[0, 1]]},
        {"id": 1, "text": "1/2/93", "box": [60, 10, 100, 20], "label": "answer",
         "words": [{"text": "1/2/93", "box": [60, 10, 100, 20]}], "linking": [[0, 1]]}
    ]}"#;

    #[test]
    fn minimal_file() {
        let load = parse_funsd(MINIMAL, "m", FunsdOptions::default()).unwrap();
        let doc = &load.document;
        assert_eq!(doc.len(), 2);
        assert_eq!(doc.links, BTreeSet::from([(0, 1)]));
        assert_eq!(load.duplicate_links, 1);
        assert_eq!(doc.page_w, 100.0);
        assert_eq!(doc.entities[1].bbox.x2, 1.0);
        assert_eq!(doc.entities[0].kind.as_deref(), Some("question"));
    }

    #[test]
    fn sparse_ids_reindexed_and_self_links_dropped() {
        let text = r#"{"form": [
            {"id": 7, "text": "a", "box": [0, 0, 1, 1], "words": [], "linking": [[7, 7], [7, 3]]},
            {"id": 3, "text": "", "box": [1, 1, 2, 2], "words": [], "linking": []}
        ]}"#;
        let load = parse_funsd(text, "s", FunsdOptions::default()).unwrap();
        assert_eq!(load.dropped_self_links, 1);
        assert_eq!(load.document.links, BTreeSet::from([(0, 1)]));
        assert_eq!(load.document.entities[1].tokens, vec![EMPTY_TOKEN]);
    }

    #[test]
    fn inverted_box_is_validation_error() {
        let text = r#"{"form": [{"id": 0, "text": "x", "box": [10, 10, 5, 20], "words": [], "linking": []}]}"#;
        assert!(matches!(
            parse_funsd(text, "b", FunsdOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_link_is_validation_error() {
        let text = r#"{"form": [{"id": 0, "text": "x", "box": [1, 1, 5, 20], "words": [], "linking": [[0, 9]]}]}"#;
        assert!(matches!(
            parse_funsd(text, "u", FunsdOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn schema_error_reports_path() {
        let text = r#"{"form": [{"id": 0, "text": "x", "box": [1, 1, "a", 20], "words": [], "linking": []}]}"#;
        match parse_funsd(text, "p", FunsdOptions::default()) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "$.form[0].box[2]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn box_outside_given_page_rejected() {
        let opts = FunsdOptions {
            page_size: Some((50.0, 50.0)),
        };
        assert!(matches!(parse_funsd(MINIMAL, "m", opts), Err(Error::Validation(_))));
    }

    #[test]
    fn funsd_round_trip_is_idempotent() {
        let opts = FunsdOptions {
            page_size: Some((100.0, 20.0)),
        };
        let first = parse_funsd(MINIMAL, "m", opts).unwrap().document;
        let json = to_funsd_json(&first).unwrap();
        let second = parse_funsd(&json, "m", opts).unwrap().document;
        assert_eq!(first.links, second.links);
        for (a, b) in first.entities.iter().zip(&second.entities) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.kind, b.kind);
            for (x, y) in a.bbox.as_array().iter().zip(b.bbox.as_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
