//! Persistent homology over Z2 by column reduction of the boundary matrix.
//!
//! Columns are processed in filtration order, dimension by dimension from the
//! top down, with clearing: once a column claims pivot row r, the column of r
//! itself is skipped in the next pass. This yields the same creator/destroyer
//! pairing as the plain left-to-right reduction (the brute-force oracle in the
//! tests) at a fraction of the work.

use crate::complex::FilteredComplex;
use crate::error::{Error, Result};
use crate::sparse::xor_rows;
use serde::{Deserialize, Serialize};

/// One creator/destroyer event in a fixed dimension. `creator` and
/// `destroyer` are global simplex indices into the generating complex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub creator: usize,
    pub destroyer: Option<usize>,
    pub birth: f64,
    pub death: f64,
}

impl PairRecord {
    pub fn is_essential(&self) -> bool {
        self.destroyer.is_none()
    }

    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

/// The full pairing produced by the reduction, canonically sorted per
/// dimension by (birth, death, creator). Diagram points are projections of
/// these records, so index k of `aligned(p, keep_zero)` is the critical-pair
/// record behind point k of the matching diagram.
#[derive(Debug, Clone)]
pub struct ReductionTranscript {
    records: Vec<Vec<PairRecord>>,
}

impl ReductionTranscript {
    /// All records in dimension p, including zero-persistence pairs.
    pub fn records(&self, p: usize) -> &[PairRecord] {
        &self.records[p]
    }

    pub fn max_p(&self) -> usize {
        self.records.len() - 1
    }

    /// Records aligned 1:1 with the pairs of the diagram built under the same
    /// `keep_zero` policy.
    pub fn aligned(&self, p: usize, keep_zero: bool) -> Vec<PairRecord> {
        self.records[p]
            .iter()
            .filter(|r| keep_zero || r.death > r.birth)
            .copied()
            .collect()
    }

    /// Persistence of the finite pair each simplex participates in, indexed by
    /// global simplex index; simplices in no finite pair get 0.
    pub fn simplex_pair_persistence(&self, n_simplices: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_simplices];
        for dim_records in &self.records {
            for r in dim_records {
                if let Some(d) = r.destroyer {
                    let pers = r.persistence();
                    out[r.creator] = pers;
                    out[d] = pers;
                }
            }
        }
        out
    }
}

/// A persistence diagram in one dimension. Deaths of essential classes are
/// f64::INFINITY; `truncation` records the largest filtration value of the
/// generating complex so downstream consumers can cap those deaths.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    pub dim: usize,
    /// (birth, death) sorted by (birth, death).
    pub pairs: Vec<(f64, f64)>,
    pub truncation: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DeathJson {
    Finite(f64),
    Word(String),
}

#[derive(Serialize, Deserialize)]
struct DiagramJson {
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    truncation: Option<f64>,
    pairs: Vec<(f64, DeathJson)>,
}

impl PersistenceDiagram {
    pub fn empty(dim: usize) -> Self {
        PersistenceDiagram {
            dim,
            pairs: Vec::new(),
            truncation: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Points with finite death, order preserved.
    pub fn finite_part(&self) -> PersistenceDiagram {
        PersistenceDiagram {
            dim: self.dim,
            pairs: self
                .pairs
                .iter()
                .copied()
                .filter(|&(_, d)| d.is_finite())
                .collect(),
            truncation: self.truncation,
        }
    }

    pub fn essential_births(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .filter(|&&(_, d)| !d.is_finite())
            .map(|&(b, _)| b)
            .collect()
    }

    /// Replaces infinite deaths with the truncation value. Errors when
    /// essential points are present but no truncation is recorded.
    pub fn truncated(&self) -> Result<PersistenceDiagram> {
        let has_essential = self.pairs.iter().any(|&(_, d)| !d.is_finite());
        if !has_essential {
            return Ok(self.clone());
        }
        let t = self.truncation.ok_or_else(|| {
            Error::invalid(format!(
                "dimension-{} diagram has essential classes but no truncation value",
                self.dim
            ))
        })?;
        let pairs = self
            .pairs
            .iter()
            .map(|&(b, d)| (b, if d.is_finite() { d } else { t }))
            .collect();
        Ok(PersistenceDiagram {
            dim: self.dim,
            pairs,
            truncation: self.truncation,
        })
    }

    /// Serializes as {"dim", "truncation"?, "pairs": [[birth, death]]} with
    /// infinite deaths written as the string "inf".
    pub fn to_json(&self) -> String {
        let doc = DiagramJson {
            dim: self.dim,
            truncation: self.truncation,
            pairs: self
                .pairs
                .iter()
                .map(|&(b, d)| {
                    let death = if d.is_finite() {
                        DeathJson::Finite(d)
                    } else {
                        DeathJson::Word("inf".to_string())
                    };
                    (b, death)
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("diagram serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<PersistenceDiagram> {
        let doc: DiagramJson = serde_json::from_str(text)?;
        let mut pairs = Vec::with_capacity(doc.pairs.len());
        for (b, death) in doc.pairs {
            let d = match death {
                DeathJson::Finite(d) => d,
                DeathJson::Word(w) if w == "inf" => f64::INFINITY,
                DeathJson::Word(w) => {
                    return Err(Error::invalid(format!(
                        "unrecognized death value {w:?}, expected a number or \"inf\""
                    )))
                }
            };
            if !b.is_finite() {
                return Err(Error::invalid(format!("birth {b} must be finite")));
            }
            if d < b {
                return Err(Error::invalid(format!(
                    "death {d} precedes birth {b}"
                )));
            }
            pairs.push((b, d));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Ok(PersistenceDiagram {
            dim: doc.dim,
            pairs,
            truncation: doc.truncation,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PersistenceOptions {
    /// Keep pairs with death == birth in the diagrams (they are always kept
    /// in the transcript records).
    pub keep_zero_length: bool,
    /// Retain the creator/destroyer transcript.
    pub with_transcript: bool,
}

#[derive(Debug, Clone)]
pub struct PersistenceResult {
    /// diagrams[p] for p = 0..=max_p.
    pub diagrams: Vec<PersistenceDiagram>,
    pub transcript: Option<ReductionTranscript>,
}

/// Diagrams for dimensions 0..=max_p with default options: zero-persistence
/// pairs dropped, no transcript.
pub fn compute_persistence(cx: &FilteredComplex, max_p: usize) -> Result<PersistenceResult> {
    compute_persistence_opts(cx, max_p, PersistenceOptions::default())
}

pub fn compute_persistence_opts(
    cx: &FilteredComplex,
    max_p: usize,
    opts: PersistenceOptions,
) -> Result<PersistenceResult> {
    if max_p > cx.max_dim() {
        return Err(Error::InvalidDimension {
            p: max_p,
            reason: format!("complex has max_dim {}", cx.max_dim()),
        });
    }
    let records = reduce(cx, max_p);
    let truncation = Some(cx.filtration_max());
    let transcript = ReductionTranscript { records };
    let diagrams = (0..=max_p)
        .map(|p| PersistenceDiagram {
            dim: p,
            pairs: transcript
                .aligned(p, opts.keep_zero_length)
                .iter()
                .map(|r| (r.birth, r.death))
                .collect(),
            truncation,
        })
        .collect();
    Ok(PersistenceResult {
        diagrams,
        transcript: opts.with_transcript.then_some(transcript),
    })
}

/// Twist/clearing reduction. Returns records per dimension 0..=max_p,
/// canonically sorted.
fn reduce(cx: &FilteredComplex, max_p: usize) -> Vec<Vec<PairRecord>> {
    let n = cx.len();
    let max_work = cx.max_dim().min(max_p + 1);
    let mut records: Vec<Vec<PairRecord>> = vec![Vec::new(); max_p + 1];
    // pivot_owner[r] = column that claimed pivot row r in the current pass.
    let mut pivot_owner: Vec<Option<usize>> = vec![None; n];
    let mut cleared = vec![false; n];
    let mut stored: Vec<Option<Vec<usize>>> = vec![None; n];
    let mut scratch = Vec::new();

    for d in (1..=max_work).rev() {
        for &g in cx.dim_indices(d) {
            if cleared[g] {
                continue;
            }
            cx.facet_indices(g, &mut scratch);
            let mut col = scratch.clone();
            while let Some(&piv) = col.last() {
                match pivot_owner[piv] {
                    Some(owner) => {
                        col = xor_rows(&col, stored[owner].as_ref().expect("owner column stored"))
                    }
                    None => break,
                }
            }
            match col.last() {
                Some(&piv) => {
                    pivot_owner[piv] = Some(g);
                    cleared[piv] = true;
                    let p = d - 1;
                    if p <= max_p {
                        records[p].push(PairRecord {
                            creator: piv,
                            destroyer: Some(g),
                            birth: cx.value(piv),
                            death: cx.value(g),
                        });
                    }
                    stored[g] = Some(col);
                }
                None => {
                    // Never a pivot of the higher pass (that would have
                    // cleared it) and its own column vanishes: essential.
                    if d <= max_p {
                        records[d].push(PairRecord {
                            creator: g,
                            destroyer: None,
                            birth: cx.value(g),
                            death: f64::INFINITY,
                        });
                    }
                }
            }
        }
        // Stored columns are only consulted within their own pass.
        for &g in cx.dim_indices(d) {
            stored[g] = None;
        }
    }
    for &g in cx.dim_indices(0) {
        if !cleared[g] {
            records[0].push(PairRecord {
                creator: g,
                destroyer: None,
                birth: cx.value(g),
                death: f64::INFINITY,
            });
        }
    }
    for dim_records in &mut records {
        dim_records.sort_by(|a, b| {
            a.birth
                .total_cmp(&b.birth)
                .then(a.death.total_cmp(&b.death))
                .then(a.creator.cmp(&b.creator))
        });
    }
    records
}

/// Betti numbers read off a diagram along a scale grid:
/// counts[k] = #{(b, d) : b <= grid[k] < d}.
#[derive(Debug, Clone, PartialEq)]
pub struct BettiCurve {
    pub dim: usize,
    pub grid: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BettiCurve {
    /// CSV with a scale,count header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,count\n");
        for (g, c) in self.grid.iter().zip(&self.counts) {
            out.push_str(&format!("{g},{c}\n"));
        }
        out
    }
}

pub fn betti_curve(diagram: &PersistenceDiagram, grid: &[f64]) -> Result<BettiCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("betti curve grid must be nonempty"));
    }
    for (i, &g) in grid.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::invalid(format!("grid value {g} at index {i} not finite")));
        }
        if i > 0 && grid[i - 1] > g {
            return Err(Error::invalid(format!(
                "grid must be non-decreasing, violated at index {i}"
            )));
        }
    }
    let counts = grid
        .iter()
        .map(|&g| {
            self::count_alive(&diagram.pairs, g)
        })
        .collect();
    Ok(BettiCurve {
        dim: diagram.dim,
        grid: grid.to_vec(),
        counts,
    })
}

fn count_alive(pairs: &[(f64, f64)], scale: f64) -> u64 {
    pairs
        .iter()
        .filter(|&&(b, d)| b <= scale && scale < d)
        .count() as u64
}
