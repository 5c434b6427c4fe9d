//! Entity encoder stub and per-document constant inputs.
//!
//! Stands in for a pretrained document encoder: an entity embedding is the
//! mean of its hashed token embeddings plus a linear projection of its box.

use std::sync::Arc;

use super::{ModelConfig, ParamVars, WindowLayout};
use crate::docmodel::Document;
use crate::error::{Error, Result};
use crate::geometry::pair_geometry;
use crate::tensor::{Graph, Tensor, Var};

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn token_id(token: &str, vocab_size: usize) -> usize {
    (fnv1a(token.as_bytes()) % vocab_size as u64) as usize
}

/// Pseudo-token carrying an entity's categorical label.
pub fn kind_token(kind: &str) -> String {
    format!("<kind:{kind}>")
}

/// Everything the forward pass needs from a document, precomputed once.
#[derive(Debug, Clone)]
pub struct DocInputs {
    pub n: usize,
    /// Embedding rows of all tokens, entity by entity.
    pub token_rows: Arc<[Option<usize>]>,
    /// `[N, T]` averaging matrix over `token_rows`.
    pub token_mean: Tensor,
    /// `[N, 4]` normalized boxes.
    pub boxes: Tensor,
    /// `[N^2, 6]` columns dir/dist at tl, ct, br for every ordered pair.
    pub pair_features: Tensor,
    pub layout: WindowLayout,
}

impl DocInputs {
    pub fn new(doc: &Document, cfg: &ModelConfig) -> Result<Self> {
        let n = doc.len();
        if n == 0 {
            return Err(Error::Contract(format!("document `{}` has no entities", doc.doc_id)));
        }
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(n);
        for e in &doc.entities {
            let start = rows.len();
            rows.extend(e.tokens.iter().map(|t| Some(token_id(t, cfg.vocab_size))));
            if let Some(kind) = &e.kind {
                rows.push(Some(token_id(&kind_token(kind), cfg.vocab_size)));
            }
            spans.push(start..rows.len());
        }
        let t = rows.len();
        let mut mean = vec![0.0; n * t];
        for (i, span) in spans.into_iter().enumerate() {
            let w = 1.0 / span.len() as f64;
            for c in span {
                mean[i * t + c] = w;
            }
        }
        let boxes = doc.entities.iter().flat_map(|e| e.bbox.as_array()).collect();
        let mut feats = Vec::with_capacity(n * n * 6);
        for a in &doc.entities {
            for b in &doc.entities {
                for (dir, dist) in pair_geometry(&a.bbox, &b.bbox).anchors() {
                    feats.push(dir);
                    feats.push(dist);
                }
            }
        }
        Ok(DocInputs {
            n,
            token_rows: rows.into(),
            token_mean: Tensor::new(vec![n, t], mean)?,
            boxes: Tensor::new(vec![n, 4], boxes)?,
            pair_features: Tensor::new(vec![n * n, 6], feats)?,
            layout: WindowLayout::new(n, cfg.window)?,
        })
    }
}

/// `[N, 2 d_h]` entity embeddings.
pub fn encode_entities(g: &mut Graph, p: &ParamVars, inputs: &DocInputs) -> Result<Var> {
    let tok = g.gather_rows(p.tok_emb, inputs.token_rows.clone())?;
    let mean = g.constant(inputs.token_mean.clone());
    let text = g.matmul(mean, tok)?;
    let boxes = g.constant(inputs.boxes.clone());
    let layout = g.matmul(boxes, p.bbox_proj)?;
    g.add(text, layout)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::docmodel::Entity;
    use crate::geometry::BBox;
    use crate::model::GoseParams;

    fn doc(tokens: &[&[&str]]) -> Document {
        let entities = tokens
            .iter()
            .enumerate()
            .map(|(id, ts)| Entity {
                id,
                tokens: ts.iter().map(|s| s.to_string()).collect(),
                bbox: BBox::new(0.1, 0.2, 0.3, 0.4).unwrap(),
                kind: None,
            })
            .collect();
        Document::new("e", 1.0, 1.0, entities, BTreeSet::new()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_h: 6,
            vocab_size: 16,
            ..ModelConfig::default()
        }
    }

    fn encode(doc: &Document, params: &GoseParams) -> Tensor {
        let cfg = small();
        let inputs = DocInputs::new(doc, &cfg).unwrap();
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let e = encode_entities(&mut g, &vars, &inputs).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn identical_entities_identical_embeddings() {
        let p = GoseParams::init(&small(), 3).unwrap();
        let e = encode(&doc(&[&["a", "b"], &["a", "b"]]), &p);
        assert_eq!(e.data()[..12], e.data()[12..]);
    }

    #[test]
    fn zero_tables_give_zero_embeddings() {
        let p = GoseParams::zeros(&small());
        let e = encode(&doc(&[&["a"], &["b", "c"]]), &p);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_is_row_plus_box_term() {
        let cfg = small();
        let p = GoseParams::init(&cfg, 5).unwrap();
        let e = encode(&doc(&[&["hello"]]), &p);
        let row = token_id("hello", cfg.vocab_size);
        let b = [0.1, 0.2, 0.3, 0.4];
        for c in 0..12 {
            let tok = p.tok_emb.at(&[row, c]);
            let bbox: f64 = (0..4).map(|k| b[k] * p.bbox_proj.at(&[k, c])).sum();
            assert!((e.at(&[0, c]) - (tok + bbox)).abs() < 1e-15);
        }
    }

    #[test]
    fn token_ids_are_stable() {
        assert_eq!(token_id("a", 512), token_id("a", 512));
        assert!(token_id("anything", 7) < 7);
    }
}
