//! Student-exercise-concept relation graph and its directed bipartite
//! decomposition.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{QMatrix, ResponseSet};
use crate::error::{Result, ScdError};

/// Undirected relation graph: answered (student, exercise) pairs from the
/// training records plus the (exercise, concept) pairs of the Q-matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub se_edges: Vec<(usize, usize)>,
    pub ec_edges: Vec<(usize, usize)>,
}

pub fn build_relation_graph(train: &ResponseSet, q: &QMatrix) -> Result<RelationGraph> {
    if train.is_empty() {
        return Err(ScdError::invalid("empty training set"));
    }
    if q.n_exercises() != train.n_exercises() {
        return Err(ScdError::invalid(format!(
            "q-matrix covers {} exercises, training set has {}",
            q.n_exercises(),
            train.n_exercises()
        )));
    }
    let mut se_edges: Vec<(usize, usize)> = train
        .records()
        .iter()
        .map(|r| (r.student, r.exercise))
        .collect();
    se_edges.sort_unstable();
    se_edges.dedup();
    if let Some(&(_, e)) = se_edges.iter().find(|&&(_, e)| q.concepts_of(e).is_empty()) {
        return Err(ScdError::invalid(format!(
            "exercise {:?} answered in training has no concept",
            train.exercise_keys()[e]
        )));
    }
    Ok(RelationGraph {
        n_students: train.n_students(),
        n_exercises: train.n_exercises(),
        n_concepts: q.n_concepts(),
        se_edges,
        ec_edges: q.entries(),
    })
}

/// Compressed adjacency of one directed bipartite graph, grouped by head
/// (aggregating) node. Edge `i` of head `h` lives at `offsets[h] + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    offsets: Arc<[usize]>,
    neighbors: Arc<[usize]>,
    heads: Arc<[usize]>,
}

impl Adjacency {
    /// Builds from (head, neighbor) pairs; neighbors sorted within each head.
    pub fn from_pairs(n_heads: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0usize; n_heads + 1];
        for &(h, _) in &pairs {
            offsets[h + 1] += 1;
        }
        for h in 0..n_heads {
            offsets[h + 1] += offsets[h];
        }
        Self {
            offsets: offsets.into(),
            neighbors: pairs.iter().map(|&(_, n)| n).collect(),
            heads: pairs.iter().map(|&(h, _)| h).collect(),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn indegree(&self, head: usize) -> usize {
        self.offsets[head + 1] - self.offsets[head]
    }

    pub fn neighbors_of(&self, head: usize) -> &[usize] {
        &self.neighbors[self.offsets[head]..self.offsets[head + 1]]
    }

    pub fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }

    /// Neighbor (tail) node of every edge, in edge order.
    pub fn neighbors(&self) -> &Arc<[usize]> {
        &self.neighbors
    }

    /// Head node of every edge, in edge order.
    pub fn heads(&self) -> &Arc<[usize]> {
        &self.heads
    }

    /// Keeps the edges whose mask entry is true; an all-true mask returns an
    /// identical adjacency.
    pub fn retain(&self, mask: &[bool]) -> Result<Adjacency> {
        if mask.len() != self.n_edges() {
            return Err(ScdError::invalid(format!(
                "mask of {} entries for {} edges",
                mask.len(),
                self.n_edges()
            )));
        }
        if mask.iter().all(|&k| k) {
            return Ok(self.clone());
        }
        let mut offsets = Vec::with_capacity(self.offsets.len());
        let mut neighbors = Vec::new();
        let mut heads = Vec::new();
        offsets.push(0);
        for h in 0..self.n_heads() {
            for i in self.offsets[h]..self.offsets[h + 1] {
                if mask[i] {
                    neighbors.push(self.neighbors[i]);
                    heads.push(h);
                }
            }
            offsets.push(neighbors.len());
        }
        Ok(Self {
            offsets: offsets.into(),
            neighbors: neighbors.into(),
            heads: heads.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Exercise to student: heads are students.
    E2S,
    /// Student to exercise: heads are exercises.
    S2E,
    /// Concept to exercise: heads are exercises.
    C2E,
    /// Exercise to concept: heads are concepts.
    E2C,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::E2S => "e2s",
            Direction::S2E => "s2e",
            Direction::C2E => "c2e",
            Direction::E2C => "e2c",
        }
    }
}

/// The relation graph split into four directed bipartite graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedSplit {
    pub e2s: Adjacency,
    pub s2e: Adjacency,
    pub c2e: Adjacency,
    pub e2c: Adjacency,
}

pub fn directed_split(g: &RelationGraph) -> DirectedSplit {
    DirectedSplit {
        e2s: Adjacency::from_pairs(g.n_students, g.se_edges.iter().copied()),
        s2e: Adjacency::from_pairs(g.n_exercises, g.se_edges.iter().map(|&(s, e)| (e, s))),
        c2e: Adjacency::from_pairs(g.n_exercises, g.ec_edges.iter().copied()),
        e2c: Adjacency::from_pairs(g.n_concepts, g.ec_edges.iter().map(|&(e, c)| (c, e))),
    }
}

impl DirectedSplit {
    pub fn adjacency(&self, dir: Direction) -> &Adjacency {
        match dir {
            Direction::E2S => &self.e2s,
            Direction::S2E => &self.s2e,
            Direction::C2E => &self.c2e,
            Direction::E2C => &self.e2c,
        }
    }

    pub fn n_students(&self) -> usize {
        self.e2s.n_heads()
    }

    pub fn n_exercises(&self) -> usize {
        self.s2e.n_heads()
    }

    pub fn n_concepts(&self) -> usize {
        self.e2c.n_heads()
    }

    /// Indegree of `node` in the directed graph `dir`.
    pub fn degree(&self, dir: Direction, node: usize) -> Result<usize> {
        let adj = self.adjacency(dir);
        if node >= adj.n_heads() {
            return Err(ScdError::invalid(format!(
                "node {node} out of range for {} ({} heads)",
                dir.label(),
                adj.n_heads()
            )));
        }
        Ok(adj.indegree(node))
    }

    /// `direction,src,dst` per edge, one per line.
    pub fn edge_listing(&self) -> String {
        let mut out = String::new();
        for dir in [Direction::E2S, Direction::S2E, Direction::C2E, Direction::E2C] {
            let adj = self.adjacency(dir);
            for (h, n) in adj.heads().iter().zip(adj.neighbors().iter()) {
                let _ = writeln!(out, "{},{},{}", dir.label(), n, h);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph(n_s: usize, n_e: usize, train: &[(usize, usize, u8)], q: &[(usize, usize)], k: usize) -> RelationGraph {
        let rs = ResponseSet::from_dense(n_s, n_e, train).unwrap();
        let q = QMatrix::new(n_e, k, q).unwrap();
        build_relation_graph(&rs, &q).unwrap()
    }

    #[test]
    fn builds_both_subgraphs() {
        let g = graph(1, 2, &[(0, 0, 1), (0, 1, 0)], &[(0, 0), (1, 0)], 1);
        assert_eq!(g.se_edges, vec![(0, 0), (0, 1)]);
        assert_eq!(g.ec_edges, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn score_does_not_change_edges() {
        let a = graph(1, 1, &[(0, 0, 1)], &[(0, 0)], 1);
        let b = graph(1, 1, &[(0, 0, 0)], &[(0, 0)], 1);
        assert_eq!(a, b);
    }

    #[test]
    fn missing_concept_is_error() {
        let rs = ResponseSet::from_dense(1, 2, &[(0, 1, 1)]).unwrap();
        let q = QMatrix::new(2, 1, &[(0, 0)]).unwrap();
        assert!(build_relation_graph(&rs, &q).is_err());
        let empty = ResponseSet::from_dense(1, 2, &[]).unwrap();
        assert!(build_relation_graph(&empty, &q).is_err());
    }

    #[test]
    fn split_directions() {
        let g = graph(2, 2, &[(0, 0, 1)], &[(0, 0), (1, 0)], 1);
        let d = directed_split(&g);
        assert_eq!(d.e2s.neighbors_of(0), &[0]);
        assert_eq!(d.s2e.neighbors_of(0), &[0]);
        assert_eq!(d.degree(Direction::E2S, 1).unwrap(), 0);
        assert!(d.degree(Direction::E2S, 2).is_err());
        assert_eq!(d.e2c.neighbors_of(0), &[0, 1]);
        assert_eq!(d.edge_listing().lines().next(), Some("e2s,0,0"));
    }

    #[test]
    fn degrees_follow_answer_counts() {
        // students answering 2, 7 and 40 of 40 exercises
        let mut train = Vec::new();
        for (s, n) in [2usize, 7, 40].into_iter().enumerate() {
            train.extend((0..n).map(|e| (s, e, 1)));
        }
        let q: Vec<_> = (0..40).map(|e| (e, 0)).collect();
        let d = directed_split(&graph(3, 40, &train, &q, 1));
        let degs: Vec<usize> = (0..3).map(|s| d.degree(Direction::E2S, s).unwrap()).collect();
        assert_eq!(degs, vec![2, 7, 40]);
    }

    #[test]
    fn retain_all_is_identity() {
        let g = graph(2, 3, &[(0, 0, 1), (0, 2, 1), (1, 1, 0)], &[(0, 0), (1, 0), (2, 0)], 1);
        let d = directed_split(&g);
        assert_eq!(d.e2s.retain(&[true; 3]).unwrap(), d.e2s);
        let r = d.e2s.retain(&[true, false, true]).unwrap();
        assert_eq!(r.neighbors_of(0), &[0]);
        assert_eq!(r.neighbors_of(1), &[1]);
        assert!(d.e2s.retain(&[true]).is_err());
    }

    proptest! {
        #[test]
        fn handshake_and_order_independence(
            triples in proptest::collection::vec((0usize..6, 0usize..7, 0u8..2), 1..40),
            seed in any::<u64>(),
        ) {
            let q: Vec<_> = (0..7).map(|e| (e, e % 3)).collect();
            let g = graph(6, 7, &triples, &q, 3);
            let d = directed_split(&g);
            let in_s: usize = (0..6).map(|s| d.e2s.indegree(s)).sum();
            let in_e: usize = (0..7).map(|e| d.s2e.indegree(e)).sum();
            prop_assert_eq!(in_s, g.se_edges.len());
            prop_assert_eq!(in_e, g.se_edges.len());

            let mut shuffled = triples.clone();
            let n = shuffled.len();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            // duplicate pairs keep the first score, which only affects labels
            let g2 = graph(6, 7, &shuffled, &q, 3);
            prop_assert_eq!(g.se_edges, g2.se_edges);
        }
    }
}
