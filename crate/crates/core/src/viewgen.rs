//! Sparse views of the student-exercise subgraph by degree-aware edge dropout.
//!
//! Each undirected interaction edge is handled as two directed edges. A
//! directed edge is kept with a probability that depends only on the
//! indegree of its head (aggregating) node: low-degree heads keep their
//! edges, high-degree heads lose them down to a floor of `p_min`.
//! Exercise-concept edges are never dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdError};
use crate::relgraph::{Adjacency, Direction, DirectedSplit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutParams {
    /// Scales the overall keep probability.
    pub k: f64,
    /// Keeps `ln(d + theta)` positive for `d >= 1`.
    pub theta: f64,
    /// Retention floor.
    pub p_min: f64,
}

impl Default for DropoutParams {
    fn default() -> Self {
        Self {
            k: 1.0,
            theta: 0.01,
            p_min: 0.3,
        }
    }
}

impl DropoutParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.theta > 0.0 && self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(ScdError::invalid(format!(
                "dropout params need k>0, theta>0, 0<p_min<=1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Keep probability of an edge whose head has indegree `d`.
    pub fn keep_probability(&self, d: usize) -> f64 {
        retention_prob(edge_importance(d, self), self.p_min)
    }
}

/// `k / ln(d + theta)`.
///
/// # Panics
/// When `d == 0`: a head without in-edges has no edge to score.
pub fn edge_importance(d: usize, p: &DropoutParams) -> f64 {
    assert!(d >= 1, "edge importance needs indegree >= 1");
    p.k / (d as f64 + p.theta).ln()
}

/// Clamps an importance into `[p_min, 1]`.
pub fn retention_prob(t: f64, p_min: f64) -> f64 {
    if t <= p_min {
        p_min
    } else if t <= 1.0 {
        t
    } else {
        1.0
    }
}

/// Retained-edge masks over the `e2s` and `s2e` edge lists of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub kept_e2s: Vec<bool>,
    pub kept_s2e: Vec<bool>,
    pub seed_tag: u64,
}

impl View {
    pub fn identity(split: &DirectedSplit) -> Self {
        Self {
            kept_e2s: vec![true; split.e2s.n_edges()],
            kept_s2e: vec![true; split.s2e.n_edges()],
            seed_tag: 0,
        }
    }

    pub fn n_kept(&self) -> usize {
        self.kept_e2s.iter().chain(&self.kept_s2e).filter(|&&k| k).count()
    }

    /// The split with the interaction directions masked; concept directions
    /// are shared unchanged.
    pub fn apply(&self, split: &DirectedSplit) -> Result<DirectedSplit> {
        Ok(DirectedSplit {
            e2s: split.e2s.retain(&self.kept_e2s)?,
            s2e: split.s2e.retain(&self.kept_s2e)?,
            c2e: split.c2e.clone(),
            e2c: split.e2c.clone(),
        })
    }
}

fn sample_mask<R: Rng + ?Sized>(
    adj: &Adjacency,
    rng: &mut R,
    prob: impl Fn(usize) -> f64,
) -> Vec<bool> {
    let mut mask = Vec::with_capacity(adj.n_edges());
    for h in 0..adj.n_heads() {
        let deg = adj.indegree(h);
        if deg == 0 {
            continue;
        }
        let p = prob(deg);
        for _ in 0..deg {
            mask.push(rng.random::<f64>() < p);
        }
    }
    mask
}

/// One importance-based view. Edges are sampled independently in edge
/// order, `e2s` first.
pub fn generate_view<R: Rng + ?Sized>(
    split: &DirectedSplit,
    p: &DropoutParams,
    rng: &mut R,
) -> Result<View> {
    p.validate()?;
    let seed_tag = rng.random::<u64>();
    Ok(View {
        kept_e2s: sample_mask(&split.e2s, rng, |d| p.keep_probability(d)),
        kept_s2e: sample_mask(&split.s2e, rng, |d| p.keep_probability(d)),
        seed_tag,
    })
}

/// Two consecutive draws from the same stream.
pub fn generate_view_pair<R: Rng + ?Sized>(
    split: &DirectedSplit,
    p: &DropoutParams,
    rng: &mut R,
) -> Result<(View, View)> {
    let a = generate_view(split, p, rng)?;
    let b = generate_view(split, p, rng)?;
    Ok((a, b))
}

/// Keeps every directed interaction edge with the same probability.
pub fn generate_random_view<R: Rng + ?Sized>(
    split: &DirectedSplit,
    p_uniform: f64,
    rng: &mut R,
) -> Result<View> {
    if !(p_uniform > 0.0 && p_uniform <= 1.0) {
        return Err(ScdError::invalid(format!("p_uniform {p_uniform} not in (0, 1]")));
    }
    let seed_tag = rng.random::<u64>();
    Ok(View {
        kept_e2s: sample_mask(&split.e2s, rng, |_| p_uniform),
        kept_s2e: sample_mask(&split.s2e, rng, |_| p_uniform),
        seed_tag,
    })
}

pub fn generate_random_view_pair<R: Rng + ?Sized>(
    split: &DirectedSplit,
    p_uniform: f64,
    rng: &mut R,
) -> Result<(View, View)> {
    let a = generate_random_view(split, p_uniform, rng)?;
    let b = generate_random_view(split, p_uniform, rng)?;
    Ok((a, b))
}

/// Mean keep probability over all directed interaction edges, so that a
/// uniform view with this probability keeps as many edges in expectation as
/// an importance-based one.
pub fn matched_uniform_p(split: &DirectedSplit, p: &DropoutParams) -> Result<f64> {
    p.validate()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for adj in [&split.e2s, &split.s2e] {
        for h in 0..adj.n_heads() {
            let d = adj.indegree(h);
            if d > 0 {
                total += d as f64 * p.keep_probability(d);
                n += d;
            }
        }
    }
    if n == 0 {
        return Err(ScdError::invalid("no interaction edges"));
    }
    Ok(total / n as f64)
}

/// Expected number of kept directed edges under importance-based dropout.
pub fn expected_kept(split: &DirectedSplit, p: &DropoutParams) -> f64 {
    [&split.e2s, &split.s2e]
        .iter()
        .flat_map(|adj| (0..adj.n_heads()).map(move |h| adj.indegree(h)))
        .filter(|&d| d > 0)
        .map(|d| d as f64 * p.keep_probability(d))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub direction: &'static str,
    pub degree: usize,
    pub importance: f64,
    pub retention: f64,
    pub n_edges: usize,
    pub empirical: f64,
}

/// Per (direction, head degree) retention, theoretical and observed over
/// `draws` importance-based views.
pub fn retention_audit<R: Rng + ?Sized>(
    split: &DirectedSplit,
    p: &DropoutParams,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<AuditRow>> {
    use std::collections::BTreeMap;

    let dirs = [Direction::E2S, Direction::S2E];
    // (dir index, degree) -> (edges, kept)
    let mut tally: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for (di, dir) in dirs.iter().enumerate() {
        let adj = split.adjacency(*dir);
        for h in 0..adj.n_heads() {
            let d = adj.indegree(h);
            if d > 0 {
                tally.entry((di, d)).or_default().0 += d;
            }
        }
    }
    for _ in 0..draws {
        let view = generate_view(split, p, rng)?;
        for (di, (dir, mask)) in dirs.iter().zip([&view.kept_e2s, &view.kept_s2e]).enumerate() {
            let adj = split.adjacency(*dir);
            for (i, &kept) in mask.iter().enumerate() {
                if kept {
                    let d = adj.indegree(adj.heads()[i]);
                    tally.get_mut(&(di, d)).expect("degree present").1 += 1;
                }
            }
        }
    }
    Ok(tally
        .into_iter()
        .map(|((di, d), (edges, kept))| AuditRow {
            direction: dirs[di].label(),
            degree: d,
            importance: edge_importance(d, p),
            retention: p.keep_probability(d),
            n_edges: edges,
            empirical: if draws == 0 {
                f64::NAN
            } else {
                kept as f64 / (edges * draws) as f64
            },
        })
        .collect())
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("direction,degree,importance,retention,n_edges,empirical\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.direction, r.degree, r.importance, r.retention, r.n_edges, r.empirical
        ));
    }
    out
}

/// A split in which student `i` answered exercises `0..degrees[i]`, with a
/// single concept on every exercise. Used to audit arbitrary degrees.
pub fn star_fixture(degrees: &[usize]) -> DirectedSplit {
    let n_exercises = degrees.iter().copied().max().unwrap_or(0).max(1);
    let se: Vec<(usize, usize)> = degrees
        .iter()
        .enumerate()
        .flat_map(|(s, &d)| (0..d).map(move |e| (s, e)))
        .collect();
    DirectedSplit {
        e2s: Adjacency::from_pairs(degrees.len(), se.iter().copied()),
        s2e: Adjacency::from_pairs(n_exercises, se.iter().map(|&(s, e)| (e, s))),
        c2e: Adjacency::from_pairs(n_exercises, (0..n_exercises).map(|e| (e, 0))),
        e2c: Adjacency::from_pairs(1, (0..n_exercises).map(|e| (0, e))),
    }
}
