use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Point;
use crate::error::{Error, Result};
use crate::seeds;

/// A conditioning label together with the Gaussian mixture it generates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpec {
    pub id: usize,
    pub mode_centers: Vec<Point>,
    pub mode_weights: Vec<f64>,
    pub is_harmful: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Point,
    pub concept: usize,
}

/// The full concept catalogue. Benign ids come first and harmful ids form
/// one contiguous block at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    concepts: Vec<ConceptSpec>,
    component_std: f64,
}

impl ConceptSet {
    pub fn new(concepts: Vec<ConceptSpec>, component_std: f64) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::Config("no concepts declared".into()));
        }
        if !(component_std > 0.0) {
            return Err(Error::Config("component std must be positive".into()));
        }
        let mut seen_harmful = false;
        for (i, c) in concepts.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("concept ids must be 0..n, got {} at {i}", c.id)));
            }
            if c.mode_centers.is_empty() || c.mode_centers.len() != c.mode_weights.len() {
                return Err(Error::Config(format!("concept {i}: bad mode list")));
            }
            let total: f64 = c.mode_weights.iter().sum();
            if (total - 1.0).abs() > 1e-12 || c.mode_weights.iter().any(|w| *w < 0.0) {
                return Err(Error::Config(format!("concept {i}: weights must be a simplex")));
            }
            if seen_harmful && !c.is_harmful {
                return Err(Error::Config("harmful concept ids must follow all benign ids".into()));
            }
            seen_harmful |= c.is_harmful;
        }
        Ok(ConceptSet {
            concepts,
            component_std,
        })
    }

    /// Concepts placed on the unit ring. Concept `k` owns `1 + k % 3` modes in
    /// consecutive ring slots with equal weights; the last `harmful` concepts are
    /// the harmful ones.
    pub fn ring(count: usize, harmful: usize, component_std: f64) -> Result<Self> {
        if harmful > count {
            return Err(Error::Config("more harmful concepts than concepts".into()));
        }
        let modes: Vec<usize> = (0..count).map(|k| 1 + k % 3).collect();
        let slots: usize = modes.iter().sum();
        let mut slot = 0;
        let mut concepts = Vec::with_capacity(count);
        for (k, m) in modes.iter().enumerate() {
            let centers = (0..*m)
                .map(|j| {
                    let angle = 2.0 * PI * (slot + j) as f64 / slots as f64;
                    [angle.cos(), angle.sin()]
                })
                .collect();
            slot += m;
            concepts.push(ConceptSpec {
                id: k,
                mode_centers: centers,
                mode_weights: vec![1.0 / *m as f64; *m],
                is_harmful: k >= count - harmful,
            });
        }
        ConceptSet::new(concepts, component_std)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn component_std(&self) -> f64 {
        self.component_std
    }

    pub fn get(&self, id: usize) -> Result<&ConceptSpec> {
        self.concepts
            .get(id)
            .ok_or_else(|| Error::Usage(format!("unknown concept {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConceptSpec> {
        self.concepts.iter()
    }

    pub fn harmful_ids(&self) -> Vec<usize> {
        self.concepts.iter().filter(|c| c.is_harmful).map(|c| c.id).collect()
    }

    pub fn benign_ids(&self) -> Vec<usize> {
        self.concepts.iter().filter(|c| !c.is_harmful).map(|c| c.id).collect()
    }

    pub fn is_harmful(&self, id: usize) -> bool {
        self.concepts.get(id).is_some_and(|c| c.is_harmful)
    }

    /// Every mode center tagged with whether its concept is harmful.
    pub fn all_modes(&self) -> Vec<(Point, bool)> {
        self.concepts
            .iter()
            .flat_map(|c| c.mode_centers.iter().map(move |m| (*m, c.is_harmful)))
            .collect()
    }

    pub fn sample_concept<R: Rng>(&self, id: usize, rng: &mut R) -> Result<Point> {
        let c = self.get(id)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut mode = c.mode_centers.len() - 1;
        for (i, w) in c.mode_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode = i;
                break;
            }
        }
        let center = c.mode_centers[mode];
        let n0: f64 = rng.sample(StandardNormal);
        let n1: f64 = rng.sample(StandardNormal);
        Ok([
            center[0] + self.component_std * n0,
            center[1] + self.component_std * n1,
        ])
    }

    /// `per_concept` draws for each listed concept, concept-major order.
    pub fn generate(&self, ids: &[usize], per_concept: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        let mut rng = seeds::rng(seed);
        let mut out = Vec::with_capacity(ids.len() * per_concept);
        for &id in ids {
            for _ in 0..per_concept {
                out.push(LabeledSample {
                    x: self.sample_concept(id, &mut rng)?,
                    concept: id,
                });
            }
        }
        Ok(out)
    }
}

/// Writes the sample table: a `x0,x1,concept_id` header then one row per
/// sample. Floats use the shortest representation that parses back exactly.
pub fn write_samples<W: Write>(writer: W, samples: &[LabeledSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Numeric(format!("writing sample table: {e}"));
    w.write_record(["x0", "x1", "concept_id"]).map_err(wrap)?;
    for s in samples {
        w.write_record([s.x[0].to_string(), s.x[1].to_string(), s.concept.to_string()])
            .map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::Numeric(format!("writing sample table: {e}")))?;
    Ok(())
}

pub fn read_samples<R: Read>(reader: R, source: &Path) -> Result<Vec<LabeledSample>> {
    let mut r = csv::Reader::from_reader(reader);
    let parse_err = |reason: String| Error::Parse {
        path: source.to_path_buf(),
        reason,
    };
    let headers = r.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x0", "x1", "concept_id"] {
        return Err(parse_err(format!("unexpected header {headers:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| parse_err(format!("row {line}: missing column {i}")));
        let x0: f64 = field(0)?.parse().map_err(|e| parse_err(format!("row {line}: {e}")))?;
        let x1: f64 = field(1)?.parse().map_err(|e| parse_err(format!("row {line}: {e}")))?;
        let concept: usize = field(2)?.parse().map_err(|e| parse_err(format!("row {line}: {e}")))?;
        out.push(LabeledSample { x: [x0, x1], concept });
    }
    Ok(out)
}
