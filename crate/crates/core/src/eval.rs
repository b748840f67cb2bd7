//! Accuracy and RMSE overall, on the least active half of students, and per
//! activity bucket; plus per-student diagnostic case studies.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{QMatrix, ResponseRecord, ResponseSet};
use crate::error::{Result, ScdError};
use crate::model::{diagnose, embed, predict, Diagnosis, ModelParams};
use crate::relgraph::DirectedSplit;
use crate::train::Checkpoint;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_lengths(op: &'static str, preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(ScdError::Shape {
            op,
            detail: format!("{} predictions vs {} labels", preds.len(), labels.len()),
        });
    }
    if preds.is_empty() {
        return Err(ScdError::invalid(format!("{op} of no records")));
    }
    Ok(())
}

/// Fraction of records where `pred >= threshold` agrees with the label.
pub fn accuracy(preds: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    check_lengths("accuracy", preds, labels)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == (l >= 0.5))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Root mean squared error of raw probabilities against 0/1 labels.
pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths("rmse", preds, labels)?;
    let sse: f64 = preds.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Test-set metrics of one student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentMetrics {
    pub student: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub acc: f64,
    pub rmse: f64,
}

/// One row per student with at least one test record, sorted by student.
pub fn per_student_table(
    test: &[ResponseRecord],
    preds: &[f64],
    train_counts: &[usize],
    threshold: f64,
) -> Result<Vec<StudentMetrics>> {
    if test.len() != preds.len() {
        return Err(ScdError::Shape {
            op: "per_student_table",
            detail: format!("{} records vs {} predictions", test.len(), preds.len()),
        });
    }
    let mut by_student: HashMap<usize, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (r, &p) in test.iter().zip(preds) {
        let e = by_student.entry(r.student).or_default();
        e.0.push(p);
        e.1.push(f64::from(r.score));
    }
    let mut rows = Vec::with_capacity(by_student.len());
    for (student, (p, l)) in by_student {
        let n_train = *train_counts
            .get(student)
            .ok_or_else(|| ScdError::invalid(format!("no train count for student {student}")))?;
        rows.push(StudentMetrics {
            student,
            n_train,
            n_test: p.len(),
            acc: accuracy(&p, &l, threshold)?,
            rmse: rmse(&p, &l)?,
        });
    }
    rows.sort_by_key(|r| r.student);
    Ok(rows)
}

/// Mean per-student ACC and RMSE over the first `floor(M'/2)` students when
/// ranked by ascending train interaction count, ties by student id.
pub fn tail_metrics(table: &[StudentMetrics]) -> Result<(f64, f64)> {
    let tail = tail_students(table)?;
    let n = tail.len() as f64;
    Ok((
        tail.iter().map(|r| r.acc).sum::<f64>() / n,
        tail.iter().map(|r| r.rmse).sum::<f64>() / n,
    ))
}

/// The rows averaged by [`tail_metrics`].
pub fn tail_students(table: &[StudentMetrics]) -> Result<Vec<StudentMetrics>> {
    let mut ranked: Vec<StudentMetrics> = table.iter().filter(|r| r.n_test > 0).copied().collect();
    if ranked.len() < 2 {
        return Err(ScdError::invalid(format!(
            "tail metrics need at least 2 students with test records, got {}",
            ranked.len()
        )));
    }
    ranked.sort_by_key(|r| (r.n_train, r.student));
    ranked.truncate(ranked.len() / 2);
    Ok(ranked)
}

/// Buckets of train interaction counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub width: usize,
    pub count: usize,
}

impl Default for Buckets {
    fn default() -> Self {
        Self { width: 5, count: 9 }
    }
}

impl Buckets {
    /// `[lo, hi)` of bucket `i`; the last bucket is open-ended.
    pub fn bounds(&self, i: usize) -> (usize, Option<usize>) {
        let lo = i * self.width;
        if i + 1 == self.count {
            (lo, None)
        } else {
            (lo, Some(lo + self.width))
        }
    }

    pub fn index_of(&self, n: usize) -> usize {
        (n / self.width).min(self.count - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: String,
    pub n_students: usize,
    /// Train interactions of the bucket's students.
    pub n_interactions: usize,
    pub n_test_records: usize,
    /// Mean per-student values; `None` for an empty bucket.
    pub acc: Option<f64>,
    pub rmse: Option<f64>,
}

pub fn group_report(table: &[StudentMetrics], buckets: Buckets) -> Result<Vec<GroupRow>> {
    if buckets.width == 0 || buckets.count == 0 {
        return Err(ScdError::invalid("buckets need positive width and count"));
    }
    let mut members: Vec<Vec<&StudentMetrics>> = vec![Vec::new(); buckets.count];
    for r in table {
        members[buckets.index_of(r.n_train)].push(r);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            let label = match buckets.bounds(i) {
                (lo, Some(hi)) => format!("{lo}-{hi}"),
                (lo, None) => format!("{lo}+"),
            };
            let mean = |f: fn(&StudentMetrics) -> f64| {
                (!rows.is_empty()).then(|| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
            };
            GroupRow {
                label,
                n_students: rows.len(),
                n_interactions: rows.iter().map(|r| r.n_train).sum(),
                n_test_records: rows.iter().map(|r| r.n_test).sum(),
                acc: mean(|r| r.acc),
                rmse: mean(|r| r.rmse),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    /// Test records whose student or exercise the model has never seen.
    pub n_skipped: usize,
    pub acc: f64,
    pub rmse: f64,
    pub acc50: f64,
    pub rmse50: f64,
    pub per_group: Vec<GroupRow>,
    pub per_student: Vec<StudentMetrics>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn groups_csv(&self) -> String {
        let mut out = String::from("bucket,n_students,n_interactions,n_test_records,acc,rmse\n");
        for g in &self.per_group {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                g.label,
                g.n_students,
                g.n_interactions,
                g.n_test_records,
                opt(g.acc),
                opt(g.rmse)
            );
        }
        out
    }

    pub fn students_csv(&self) -> String {
        let mut out = String::from("student,n_train_interactions,n_test,acc,rmse\n");
        for s in &self.per_student {
            let _ = writeln!(out, "{},{},{},{},{}", s.student, s.n_train, s.n_test, s.acc, s.rmse);
        }
        out
    }
}

/// Scores `test` records (dense ids of the training data) with the model.
pub fn evaluate(
    params: &ModelParams,
    graph: &DirectedSplit,
    q: &QMatrix,
    train: &ResponseSet,
    test: &[ResponseRecord],
    buckets: Buckets,
) -> Result<EvalReport> {
    let diag = diagnose(params, &embed(params, graph)?);
    evaluate_with(&diag, params, q, train, test, buckets)
}

fn evaluate_with(
    diag: &Diagnosis,
    params: &ModelParams,
    q: &QMatrix,
    train: &ResponseSet,
    test: &[ResponseRecord],
    buckets: Buckets,
) -> Result<EvalReport> {
    let pairs: Vec<(usize, usize)> = test.iter().map(|r| (r.student, r.exercise)).collect();
    let preds = predict(params, diag, q, &pairs)?;
    let labels: Vec<f64> = test.iter().map(|r| f64::from(r.score)).collect();
    let table = per_student_table(test, &preds, &train.interactions_per_student(), DEFAULT_THRESHOLD)?;
    let (acc50, rmse50) = tail_metrics(&table)?;
    Ok(EvalReport {
        n_records: test.len(),
        n_skipped: 0,
        acc: accuracy(&preds, &labels, DEFAULT_THRESHOLD)?,
        rmse: rmse(&preds, &labels)?,
        acc50,
        rmse50,
        per_group: group_report(&table, buckets)?,
        per_student: table,
    })
}

/// Re-keys `raw` (as loaded from a file) onto the checkpoint's dense ids;
/// returns the mapped records and the number dropped as unknown.
pub fn align_records(raw: &ResponseSet, train: &ResponseSet) -> (Vec<ResponseRecord>, usize) {
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for r in raw.records() {
        let s = train.student_index(&raw.student_keys()[r.student]);
        let e = train.exercise_index(&raw.exercise_keys()[r.exercise]);
        match (s, e) {
            (Some(student), Some(exercise)) => out.push(ResponseRecord {
                student,
                exercise,
                score: r.score,
            }),
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

/// [`evaluate`] on a checkpoint and a test file's records.
pub fn evaluate_checkpoint(ck: &Checkpoint, raw_test: &ResponseSet, buckets: Buckets) -> Result<EvalReport> {
    let (test, skipped) = align_records(raw_test, &ck.train);
    let mut report = evaluate(&ck.params, &ck.graph()?, &ck.q, &ck.train, &test, buckets)?;
    report.n_skipped = skipped;
    Ok(report)
}

/// Observed outcome of one requested (student, exercise) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePair {
    pub student: usize,
    pub exercise: usize,
    pub score: Option<u8>,
    /// A correct answer is consistent when mastery exceeds difficulty on
    /// every concept of the exercise; a wrong one when it falls short on at
    /// least one. `None` without an observed score.
    pub consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub students: Vec<usize>,
    pub exercises: Vec<usize>,
    /// Union of the requested exercises' concepts, ascending.
    pub concepts: Vec<usize>,
    /// `mastery[i][j]`: student `students[i]` on concept `concepts[j]`.
    pub mastery: Vec<Vec<f64>>,
    /// `difficulty[i][j]`: exercise `exercises[i]` on concept `concepts[j]`.
    pub difficulty: Vec<Vec<f64>>,
    pub pairs: Vec<CasePair>,
}

/// Mastery and difficulty on the concepts of the requested exercises, with
/// observed scores taken from `records`.
pub fn case_study(
    diag: &Diagnosis,
    q: &QMatrix,
    students: &[usize],
    exercises: &[usize],
    records: &[ResponseRecord],
) -> Result<CaseStudy> {
    let (m, n) = (diag.mastery.rows(), diag.difficulty.rows());
    if let Some(s) = students.iter().find(|&&s| s >= m) {
        return Err(ScdError::invalid(format!("unknown student id {s} (have {m})")));
    }
    if let Some(e) = exercises.iter().find(|&&e| e >= n || e >= q.n_exercises()) {
        return Err(ScdError::invalid(format!("unknown exercise id {e} (have {n})")));
    }
    let concepts: Vec<usize> = exercises
        .iter()
        .flat_map(|&e| q.concepts_of(e).iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pick = |row: &[f64]| concepts.iter().map(|&c| row[c]).collect::<Vec<f64>>();
    let scores: HashMap<(usize, usize), u8> =
        records.iter().map(|r| ((r.student, r.exercise), r.score)).collect();
    let mut pairs = Vec::new();
    for &s in students {
        for &e in exercises {
            let score = scores.get(&(s, e)).copied();
            let consistent = score.map(|sc| {
                let cs = q.concepts_of(e);
                let above = |c: &usize| diag.mastery.get(s, *c) > diag.difficulty.get(e, *c);
                if sc == 1 {
                    cs.iter().all(above)
                } else {
                    !cs.iter().all(above)
                }
            });
            pairs.push(CasePair {
                student: s,
                exercise: e,
                score,
                consistent,
            });
        }
    }
    Ok(CaseStudy {
        students: students.to_vec(),
        exercises: exercises.to_vec(),
        mastery: students.iter().map(|&s| pick(diag.mastery.row(s))).collect(),
        difficulty: exercises.iter().map(|&e| pick(diag.difficulty.row(e))).collect(),
        concepts,
        pairs,
    })
}

impl CaseStudy {
    /// `concept,mastery_<s>...,difficulty_<e>...`, one row per concept, using
    /// the given display keys.
    pub fn to_csv(&self, student_keys: &[String], exercise_keys: &[String], concept_keys: &[String]) -> String {
        let mut out = String::from("concept");
        for &s in &self.students {
            let _ = write!(out, ",mastery_{}", student_keys[s]);
        }
        for &e in &self.exercises {
            let _ = write!(out, ",difficulty_{}", exercise_keys[e]);
        }
        out.push('\n');
        for (j, &c) in self.concepts.iter().enumerate() {
            out.push_str(&concept_keys[c]);
            for row in self.mastery.iter().chain(&self.difficulty) {
                let _ = write!(out, ",{}", row[j]);
            }
            out.push('\n');
        }
        out
    }

    pub fn pairs_csv(&self, student_keys: &[String], exercise_keys: &[String]) -> String {
        let mut out = String::from("student,exercise,score,consistent\n");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                student_keys[p.student],
                exercise_keys[p.exercise],
                p.score.map_or(String::new(), |s| s.to_string()),
                p.consistent.map_or(String::new(), |c| c.to_string())
            );
        }
        out
    }
}
