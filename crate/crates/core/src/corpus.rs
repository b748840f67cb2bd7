//! Response records, the exercise-concept Q-matrix, sparse-student filtering,
//! per-student train/test splitting and dataset statistics.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub student: usize,
    pub exercise: usize,
    pub score: u8,
}

/// A set of (student, exercise, score) records over dense ids, plus the raw
/// keys each dense id came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    records: Vec<ResponseRecord>,
    student_keys: Vec<String>,
    exercise_keys: Vec<String>,
}

impl ResponseSet {
    /// Builds a set from dense records; duplicate (student, exercise) pairs keep
    /// the first occurrence.
    pub fn new(
        records: Vec<ResponseRecord>,
        student_keys: Vec<String>,
        exercise_keys: Vec<String>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            if r.score > 1 {
                return Err(ScdError::invalid(format!("score {} not in {{0,1}}", r.score)));
            }
            if r.student >= student_keys.len() || r.exercise >= exercise_keys.len() {
                return Err(ScdError::invalid(format!(
                    "record ({}, {}) out of range {}x{}",
                    r.student,
                    r.exercise,
                    student_keys.len(),
                    exercise_keys.len()
                )));
            }
            if seen.insert((r.student, r.exercise)) {
                kept.push(r);
            }
        }
        Ok(Self {
            records: kept,
            student_keys,
            exercise_keys,
        })
    }

    /// Dense ids with keys `"0".."n-1"`.
    pub fn from_dense(
        n_students: usize,
        n_exercises: usize,
        triples: &[(usize, usize, u8)],
    ) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(student, exercise, score)| ResponseRecord {
                    student,
                    exercise,
                    score,
                })
                .collect(),
            (0..n_students).map(|i| i.to_string()).collect(),
            (0..n_exercises).map(|i| i.to_string()).collect(),
        )
    }

    /// Keeps the id space of `self` but replaces the records.
    pub fn with_records(&self, records: Vec<ResponseRecord>) -> Result<Self> {
        Self::new(records, self.student_keys.clone(), self.exercise_keys.clone())
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_students(&self) -> usize {
        self.student_keys.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercise_keys.len()
    }

    pub fn student_keys(&self) -> &[String] {
        &self.student_keys
    }

    pub fn exercise_keys(&self) -> &[String] {
        &self.exercise_keys
    }

    pub fn student_index(&self, key: &str) -> Option<usize> {
        self.student_keys.iter().position(|k| k == key)
    }

    pub fn exercise_index(&self, key: &str) -> Option<usize> {
        self.exercise_keys.iter().position(|k| k == key)
    }

    pub fn interactions_per_student(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_students()];
        for r in &self.records {
            counts[r.student] += 1;
        }
        counts
    }

    /// Writes `student,exercise,score` rows using the raw keys.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = File::create(path).map_err(|e| ScdError::io(path, e))?;
        let mut buf = String::from("student,exercise,score\n");
        for r in &self.records {
            buf.push_str(&format!(
                "{},{},{}\n",
                self.student_keys[r.student], self.exercise_keys[r.exercise], r.score
            ));
        }
        out.write_all(buf.as_bytes()).map_err(|e| ScdError::io(path, e))
    }
}

fn is_header(first: &str, expected: &str) -> bool {
    first.trim().eq_ignore_ascii_case(expected)
}

fn csv_rows<R: Read>(reader: R, source: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScdError::Parse {
            path: source.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

/// Parses `student,exercise,score` CSV (header optional) into a dense set.
pub fn parse_responses<R: Read>(reader: R, source: &Path) -> Result<ResponseSet> {
    let rows = csv_rows(reader, source)?;
    let mut student_ids: HashMap<String, usize> = HashMap::new();
    let mut exercise_ids: HashMap<String, usize> = HashMap::new();
    let mut student_keys = Vec::new();
    let mut exercise_keys = Vec::new();
    let mut records = Vec::with_capacity(rows.len());

    for (i, (line, fields)) in rows.into_iter().enumerate() {
        let err = |msg: String| ScdError::Parse {
            path: source.to_path_buf(),
            line,
            msg,
        };
        if i == 0 && fields.len() == 3 && is_header(&fields[2], "score") {
            continue;
        }
        if fields.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", fields.len())));
        }
        let score: u8 = match fields[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("score {other:?} not in {{0,1}}"))),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty student or exercise key".into()));
        }
        let student = *student_ids.entry(fields[0].clone()).or_insert_with(|| {
            student_keys.push(fields[0].clone());
            student_keys.len() - 1
        });
        let exercise = *exercise_ids.entry(fields[1].clone()).or_insert_with(|| {
            exercise_keys.push(fields[1].clone());
            exercise_keys.len() - 1
        });
        records.push(ResponseRecord {
            student,
            exercise,
            score,
        });
    }
    ResponseSet::new(records, student_keys, exercise_keys)
}

pub fn load_responses(path: &Path) -> Result<ResponseSet> {
    let file = File::open(path).map_err(|e| ScdError::io(path, e))?;
    parse_responses(file, path)
}

/// Removes students with `<= min_count` records, then exercises left without
/// records, and re-densifies both id spaces preserving relative order.
pub fn filter_min_interactions(rs: &ResponseSet, min_count: usize) -> Result<ResponseSet> {
    let counts = rs.interactions_per_student();
    let mut student_map = vec![usize::MAX; rs.n_students()];
    let mut student_keys = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        if c > min_count {
            student_map[s] = student_keys.len();
            student_keys.push(rs.student_keys[s].clone());
        }
    }
    let kept: Vec<&ResponseRecord> = rs
        .records
        .iter()
        .filter(|r| student_map[r.student] != usize::MAX)
        .collect();
    if kept.is_empty() {
        return Err(ScdError::invalid(format!(
            "no student has more than {min_count} records"
        )));
    }

    let mut used = vec![false; rs.n_exercises()];
    for r in &kept {
        used[r.exercise] = true;
    }
    let mut exercise_map = vec![usize::MAX; rs.n_exercises()];
    let mut exercise_keys = Vec::new();
    for (e, &u) in used.iter().enumerate() {
        if u {
            exercise_map[e] = exercise_keys.len();
            exercise_keys.push(rs.exercise_keys[e].clone());
        }
    }

    let records = kept
        .into_iter()
        .map(|r| ResponseRecord {
            student: student_map[r.student],
            exercise: exercise_map[r.exercise],
            score: r.score,
        })
        .collect();
    ResponseSet::new(records, student_keys, exercise_keys)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: ResponseSet,
    pub test: ResponseSet,
    /// Students whose single record went entirely to train although the
    /// ratio asked for a test share.
    pub all_train_fallbacks: usize,
}

/// Number of test records for a student with `count` records.
pub fn test_share(count: usize, train_ratio: f64) -> usize {
    // the small nudge keeps exact products such as 10 * 0.2 from flooring down
    let raw = (count as f64 * (1.0 - train_ratio) + 1e-9).floor() as usize;
    raw.min(count.saturating_sub(1))
}

/// Per-student split: a student with `c` records sends `floor(c * (1 - ratio))`
/// of them, drawn uniformly without replacement, to test. Record order is
/// preserved within each output.
pub fn split_train_test(rs: &ResponseSet, train_ratio: f64, seed: u64) -> Result<Split> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(ScdError::invalid(format!(
            "train_ratio {train_ratio} not in (0, 1)"
        )));
    }
    let mut by_student: Vec<Vec<usize>> = vec![Vec::new(); rs.n_students()];
    for (i, r) in rs.records.iter().enumerate() {
        by_student[r.student].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; rs.records.len()];
    let mut fallbacks = 0;
    for recs in &by_student {
        let c = recs.len();
        let wanted = (c as f64 * (1.0 - train_ratio) + 1e-9).floor() as usize;
        if c < 2 {
            if wanted > 0 {
                fallbacks += 1;
            }
            continue;
        }
        let n_test = test_share(c, train_ratio);
        for pick in rand::seq::index::sample(&mut rng, c, n_test) {
            in_test[recs[pick]] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = rs
        .records
        .iter()
        .zip(&in_test)
        .partition(|(_, &t)| t);
    Ok(Split {
        train: rs.with_records(train.into_iter().map(|(r, _)| *r).collect())?,
        test: rs.with_records(test.into_iter().map(|(r, _)| *r).collect())?,
        all_train_fallbacks: fallbacks,
    })
}

/// Binary exercise x concept incidence, stored as sorted per-exercise concept
/// lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    n_exercises: usize,
    n_concepts: usize,
    concepts: Vec<Vec<usize>>,
    concept_keys: Vec<String>,
}

impl QMatrix {
    pub fn new(n_exercises: usize, n_concepts: usize, entries: &[(usize, usize)]) -> Result<Self> {
        Self::with_keys(
            n_exercises,
            entries,
            (0..n_concepts).map(|i| i.to_string()).collect(),
        )
    }

    pub fn with_keys(
        n_exercises: usize,
        entries: &[(usize, usize)],
        concept_keys: Vec<String>,
    ) -> Result<Self> {
        let n_concepts = concept_keys.len();
        let mut concepts = vec![Vec::new(); n_exercises];
        for &(e, c) in entries {
            if e >= n_exercises || c >= n_concepts {
                return Err(ScdError::invalid(format!(
                    "q entry ({e}, {c}) out of range {n_exercises}x{n_concepts}"
                )));
            }
            concepts[e].push(c);
        }
        for list in &mut concepts {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            n_exercises,
            n_concepts,
            concepts,
            concept_keys,
        })
    }

    pub fn n_exercises(&self) -> usize {
        self.n_exercises
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn concept_keys(&self) -> &[String] {
        &self.concept_keys
    }

    pub fn concepts_of(&self, exercise: usize) -> &[usize] {
        &self.concepts[exercise]
    }

    /// All (exercise, concept) pairs in exercise-major order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        self.concepts
            .iter()
            .enumerate()
            .flat_map(|(e, cs)| cs.iter().map(move |&c| (e, c)))
            .collect()
    }

    /// Writes `exercise,concept` rows using the given exercise keys and the
    /// concept keys.
    pub fn write_csv(&self, path: &Path, exercise_keys: &[String]) -> Result<()> {
        if exercise_keys.len() != self.n_exercises {
            return Err(ScdError::invalid(format!(
                "{} exercise keys for {} exercises",
                exercise_keys.len(),
                self.n_exercises
            )));
        }
        let mut buf = String::from("exercise,concept\n");
        for (e, c) in self.entries() {
            buf.push_str(&format!("{},{}\n", exercise_keys[e], self.concept_keys[c]));
        }
        std::fs::write(path, buf).map_err(|e| ScdError::io(path, e))
    }

    pub fn n_entries(&self) -> usize {
        self.concepts.iter().map(Vec::len).sum()
    }

    /// Exercises without any concept.
    pub fn uncovered(&self) -> Vec<usize> {
        (0..self.n_exercises)
            .filter(|&e| self.concepts[e].is_empty())
            .collect()
    }

    /// Errors unless every exercise that appears in `rs` has a concept.
    pub fn check_covers(&self, rs: &ResponseSet) -> Result<()> {
        if self.n_exercises != rs.n_exercises() {
            return Err(ScdError::invalid(format!(
                "q-matrix has {} exercises, responses have {}",
                self.n_exercises,
                rs.n_exercises()
            )));
        }
        if let Some(r) = rs
            .records()
            .iter()
            .find(|r| self.concepts[r.exercise].is_empty())
        {
            return Err(ScdError::invalid(format!(
                "exercise {:?} has no concept in the q-matrix",
                rs.exercise_keys()[r.exercise]
            )));
        }
        Ok(())
    }
}

/// Parses `exercise,concept` CSV against the exercise ids of `rs`. Rows for
/// exercises outside `rs` are dropped; concepts are densified in first-seen
/// order.
pub fn parse_qmatrix<R: Read>(reader: R, source: &Path, rs: &ResponseSet) -> Result<QMatrix> {
    let exercise_ids: HashMap<&str, usize> = rs
        .exercise_keys()
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let mut concept_ids: HashMap<String, usize> = HashMap::new();
    let mut concept_keys = Vec::new();
    let mut entries = Vec::new();
    for (i, (line, fields)) in csv_rows(reader, source)?.into_iter().enumerate() {
        if i == 0 && fields.len() == 2 && is_header(&fields[0], "exercise") {
            continue;
        }
        if fields.len() != 2 {
            return Err(ScdError::Parse {
                path: source.to_path_buf(),
                line,
                msg: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let Some(&e) = exercise_ids.get(fields[0].as_str()) else {
            continue;
        };
        let c = *concept_ids.entry(fields[1].clone()).or_insert_with(|| {
            concept_keys.push(fields[1].clone());
            concept_keys.len() - 1
        });
        entries.push((e, c));
    }
    let q = QMatrix::with_keys(rs.n_exercises(), &entries, concept_keys)?;
    q.check_covers(rs)?;
    Ok(q)
}

pub fn load_qmatrix(path: &Path, rs: &ResponseSet) -> Result<QMatrix> {
    let file = File::open(path).map_err(|e| ScdError::io(path, e))?;
    parse_qmatrix(file, path, rs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub n_interactions: usize,
    pub interactions_per_student: f64,
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(
        n_students: usize,
        n_exercises: usize,
        n_concepts: usize,
        n_interactions: usize,
    ) -> Self {
        Self {
            n_students,
            n_exercises,
            n_concepts,
            n_interactions,
            interactions_per_student: n_interactions as f64 / n_students as f64,
            density: n_interactions as f64 / (n_students as f64 * n_exercises as f64),
        }
    }
}

pub fn dataset_stats(rs: &ResponseSet, q: &QMatrix) -> DatasetStats {
    DatasetStats::from_counts(rs.n_students(), rs.n_exercises(), q.n_concepts(), rs.len())
}
