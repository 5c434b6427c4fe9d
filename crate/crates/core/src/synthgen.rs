//! Seeded synthetic forms.
//!
//! Two layouts are produced:
//!
//! * `column`: each key heads a vertical list of values, so the farthest
//!   value of a key sits far down the page.
//! * `crossing`: a key column and a value column with interleaved rows. Each
//!   value is shifted down so that it sits closer to the *next* key than to
//!   its own; linking values to their nearest key gives wrong links, and any
//!   swap of two neighbouring gold links crosses.
//!
//! `mixed` draws one of the two layouts per document. The grid spans
//! `LAYOUT_SPAN` of the page in each direction and is placed at a random
//! offset per document, so absolute positions carry no link information.
//! Boxes are placed in grid cells; `jitter` moves every corner by up to
//! `jitter / 2` of the cell size, so `jitter = 0` yields exact grids.
//!
//! Keys carry a group token. A value repeats its own key's group token half
//! of the time and an adjacent key's token a quarter of the time, so lexical
//! overlap alone is an unreliable cue.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{Document, Entity};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::substream_indexed;

pub const KEY_MARKER: &str = "<key>";
pub const VALUE_MARKER: &str = "<value>";

/// Nominal page size of generated documents.
const PAGE_SIZE: f64 = 1000.0;
/// Cells narrower or shorter than this do not fit on the page.
const MIN_CELL: f64 = 1.0 / 64.0;
/// Minimum number of distinct group tokens; keys of one document get
/// distinct groups.
const GROUP_POOL: usize = 4;
/// Probability that a value repeats its key's group token.
const GROUP_SHARE_PROB: f64 = 0.5;
/// Probability that a value instead carries the group token of an adjacent
/// key, a lexical cue pointing at a crossing assignment.
const DISTRACTOR_PROB: f64 = 0.25;
/// Fraction of the page width and height covered by the layout grid.
const LAYOUT_SPAN: f64 = 0.75;
/// Downward shift of crossing-layout values, in rows.
const CROSSING_SKEW: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Column,
    Crossing,
    Mixed,
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::Column => "column",
            Pattern::Crossing => "crossing",
            Pattern::Mixed => "mixed",
        })
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Pattern::Column),
            "crossing" => Ok(Pattern::Crossing),
            "mixed" => Ok(Pattern::Mixed),
            other => Err(Error::Config(format!("unknown pattern `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub pattern: Pattern,
    pub n_keys: usize,
    pub n_values_per_key: usize,
    pub jitter: f64,
    pub vocab_size: usize,
    pub n_docs: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            pattern: Pattern::Mixed,
            n_keys: 3,
            n_values_per_key: 2,
            jitter: 0.2,
            vocab_size: 64,
            n_docs: 100,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    cols: usize,
    rows: usize,
}

impl Grid {
    fn cell(&self) -> (f64, f64) {
        (LAYOUT_SPAN / self.cols as f64, LAYOUT_SPAN / self.rows as f64)
    }
}

fn column_grid(cfg: &GenConfig) -> Grid {
    Grid {
        cols: cfg.n_keys,
        rows: cfg.n_values_per_key + 1,
    }
}

fn crossing_grid(cfg: &GenConfig) -> Grid {
    // one spare row absorbs the downward skew of the last values
    Grid {
        cols: 2,
        rows: cfg.n_keys * (cfg.n_values_per_key + 1) + 1,
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 || self.n_values_per_key == 0 {
            return Err(Error::Config("n_keys and n_values_per_key must be positive".into()));
        }
        if !(0.0..=0.4).contains(&self.jitter) {
            return Err(Error::Config(format!(
                "jitter {} outside [0, 0.4]",
                self.jitter
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        let grids: &[Grid] = match self.pattern {
            Pattern::Column => &[column_grid(self)],
            Pattern::Crossing => &[crossing_grid(self)],
            Pattern::Mixed => &[column_grid(self), crossing_grid(self)],
        };
        for g in grids {
            let (cw, ch) = g.cell();
            if cw < MIN_CELL || ch < MIN_CELL {
                return Err(Error::Config(format!(
                    "layout needs a {}x{} grid; cells would overlap on a unit page",
                    g.cols, g.rows
                )));
            }
        }
        Ok(())
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    (0..cfg.n_docs).map(|i| generate_doc(cfg, i)).collect()
}

/// Document `index` of the stream described by `cfg`; independent of every
/// other index.
pub fn generate_doc(cfg: &GenConfig, index: usize) -> Result<Document> {
    cfg.validate()?;
    let mut rng = substream_indexed(cfg.seed, "generator", index as u64);
    let pattern = match cfg.pattern {
        Pattern::Mixed if rng.gen_bool(0.5) => Pattern::Column,
        Pattern::Mixed => Pattern::Crossing,
        p => p,
    };
    let origin = (
        rng.gen_range(0.0..=1.0 - LAYOUT_SPAN),
        rng.gen_range(0.0..=1.0 - LAYOUT_SPAN),
    );
    let mut builder = Builder::new(cfg, &mut rng, origin);
    match pattern {
        Pattern::Column => builder.column(),
        _ => builder.crossing(),
    }
    Document::new(
        format!("{pattern}-{}-{index:05}", cfg.seed),
        PAGE_SIZE,
        PAGE_SIZE,
        builder.entities,
        builder.links,
    )
}

struct Builder<'a, R: Rng> {
    cfg: &'a GenConfig,
    rng: &'a mut R,
    origin: (f64, f64),
    entities: Vec<Entity>,
    links: BTreeSet<(usize, usize)>,
}

impl<'a, R: Rng> Builder<'a, R> {
    fn new(cfg: &'a GenConfig, rng: &'a mut R, origin: (f64, f64)) -> Self {
        Builder {
            cfg,
            rng,
            origin,
            entities: Vec::new(),
            links: BTreeSet::new(),
        }
    }

    /// Distinct group ids for the keys of one document.
    fn key_groups(&mut self) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..GROUP_POOL.max(self.cfg.n_keys)).collect();
        pool.shuffle(self.rng);
        pool.truncate(self.cfg.n_keys);
        pool
    }

    /// Group token carried by a value of key `k`, if any.
    fn value_group(&mut self, groups: &[usize], k: usize) -> Option<usize> {
        let roll: f64 = self.rng.gen();
        if roll < GROUP_SHARE_PROB {
            return Some(groups[k]);
        }
        if roll < GROUP_SHARE_PROB + DISTRACTOR_PROB && groups.len() > 1 {
            let neighbour = match k {
                0 => 1,
                k if k + 1 == groups.len() => k - 1,
                k if self.rng.gen_bool(0.5) => k - 1,
                k => k + 1,
            };
            return Some(groups[neighbour]);
        }
        None
    }

    fn column(&mut self) {
        let grid = column_grid(self.cfg);
        let groups = self.key_groups();
        for k in 0..self.cfg.n_keys {
            let key = self.push(grid, k as f64, 0.0, true, Some(groups[k]));
            for r in 1..=self.cfg.n_values_per_key {
                let group = self.value_group(&groups, k);
                let v = self.push(grid, k as f64, r as f64, false, group);
                self.links.insert((key, v));
            }
        }
    }

    fn crossing(&mut self) {
        let grid = crossing_grid(self.cfg);
        let groups = self.key_groups();
        let block = self.cfg.n_values_per_key + 1;
        for k in 0..self.cfg.n_keys {
            let top = (k * block) as f64;
            let key = self.push(grid, 0.0, top, true, Some(groups[k]));
            for r in 1..=self.cfg.n_values_per_key {
                let group = self.value_group(&groups, k);
                let v = self.push(grid, 1.0, top + r as f64 + CROSSING_SKEW, false, group);
                self.links.insert((key, v));
            }
        }
    }

    /// Place an entity in cell `(col, row)` (row may be fractional).
    fn push(&mut self, grid: Grid, col: f64, row: f64, is_key: bool, group: Option<usize>) -> usize {
        let (cw, ch) = grid.cell();
        let half = self.cfg.jitter / 2.0;
        let mut wiggle = |scale: f64| {
            if half > 0.0 {
                self.rng.gen_range(-half..=half) * scale
            } else {
                0.0
            }
        };
        let (ox, oy) = self.origin;
        let x1 = ox + (col + 0.2) * cw + wiggle(cw);
        let y1 = oy + (row + 0.25) * ch + wiggle(ch);
        let x2 = ox + (col + 0.8) * cw + wiggle(cw);
        let y2 = oy + (row + 0.75) * ch + wiggle(ch);
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let bbox = BBox {
            x1: clamp(x1),
            y1: clamp(y1),
            x2: clamp(x2),
            y2: clamp(y2),
        };

        let marker = if is_key { KEY_MARKER } else { VALUE_MARKER };
        let mut tokens = vec![marker.to_string()];
        if let Some(group) = group {
            tokens.push(format!("<group{group}>"));
        }
        let fillers = self.rng.gen_range(1..=2);
        for _ in 0..fillers {
            tokens.push(format!("w{}", self.rng.gen_range(0..self.cfg.vocab_size)));
        }

        let id = self.entities.len();
        self.entities.push(Entity {
            id,
            tokens,
            bbox,
            kind: Some(if is_key { "key" } else { "value" }.to_string()),
        });
        id
    }
}
