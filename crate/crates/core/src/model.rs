//! The graph cognitive-diagnosis network: embedding tables, an L-layer
//! attention GCN with residual connections over the relation graph, the
//! diagnosis layer producing mastery and difficulty, and the score predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QMatrix;
use crate::diffcore::{sigmoid, Matrix, Tape, Var};
use crate::error::{Result, ScdError};
use crate::relgraph::{Adjacency, DirectedSplit};

/// Attention scorers of one GCN layer, each a `2d x 1` map applied to
/// `[head, neighbor]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub student_from_exercise: Matrix,
    pub exercise_from_student: Matrix,
    pub exercise_from_concept: Matrix,
    pub concept_from_exercise: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub student: Matrix,
    pub exercise: Matrix,
    pub concept: Matrix,
    pub layers: Vec<LayerAttention>,
    pub diag_student_w: Matrix,
    pub diag_student_b: Matrix,
    pub diag_exercise_w: Matrix,
    pub diag_exercise_b: Matrix,
    pub predict_w: Matrix,
    pub predict_b: Matrix,
}

impl ModelParams {
    pub fn n_students(&self) -> usize {
        self.student.rows()
    }

    pub fn n_exercises(&self) -> usize {
        self.exercise.rows()
    }

    pub fn n_concepts(&self) -> usize {
        self.concept.rows()
    }

    pub fn dim(&self) -> usize {
        self.student.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.student, &self.exercise, &self.concept];
        for l in &self.layers {
            out.extend([
                &l.student_from_exercise,
                &l.exercise_from_student,
                &l.exercise_from_concept,
                &l.concept_from_exercise,
            ]);
        }
        out.extend([
            &self.diag_student_w,
            &self.diag_student_b,
            &self.diag_exercise_w,
            &self.diag_exercise_b,
            &self.predict_w,
            &self.predict_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.student, &mut self.exercise, &mut self.concept];
        for l in &mut self.layers {
            out.extend([
                &mut l.student_from_exercise,
                &mut l.exercise_from_student,
                &mut l.exercise_from_concept,
                &mut l.concept_from_exercise,
            ]);
        }
        out.extend([
            &mut self.diag_student_w,
            &mut self.diag_student_b,
            &mut self.diag_exercise_w,
            &mut self.diag_exercise_b,
            &mut self.predict_w,
            &mut self.predict_b,
        ]);
        out
    }

    /// Rebuilds a parameter set with the layout of `self` from tensors in
    /// [`ModelParams::tensors`] order.
    pub fn with_tensors(&self, tensors: Vec<Matrix>) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(ScdError::invalid(format!(
                "{} tensors for {} parameter slots",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(ScdError::Shape {
                    op: "with_tensors",
                    detail: format!("{:?} vs {:?}", slot.shape(), t.shape()),
                });
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|m| m.sq_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Puts every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self.tensors().into_iter().map(|m| tape.leaf(m.clone())).collect();
        BoundParams::from_vars(self.n_layers(), vars).expect("layout matches")
    }
}

/// Shape of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    /// Embedding width; the concept count when `None`.
    pub dim: Option<usize>,
    pub layers: usize,
}

pub const DEFAULT_LAYERS: usize = 2;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and embeddings, zero
/// biases, all drawn from `seed`.
pub fn init_params(shape: ModelShape, seed: u64) -> Result<ModelParams> {
    let ModelShape {
        n_students,
        n_exercises,
        n_concepts,
        dim,
        layers,
    } = shape;
    let d = dim.unwrap_or(n_concepts);
    if n_students == 0 || n_exercises == 0 || n_concepts == 0 || d == 0 || layers == 0 {
        return Err(ScdError::invalid(format!("all model sizes must be >= 1: {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let student = Matrix::uniform(n_students, d, bound(d), &mut rng);
    let exercise = Matrix::uniform(n_exercises, d, bound(d), &mut rng);
    let concept = Matrix::uniform(n_concepts, d, bound(d), &mut rng);
    let layers = (0..layers)
        .map(|_| LayerAttention {
            student_from_exercise: Matrix::uniform(2 * d, 1, bound(2 * d), &mut rng),
            exercise_from_student: Matrix::uniform(2 * d, 1, bound(2 * d), &mut rng),
            exercise_from_concept: Matrix::uniform(2 * d, 1, bound(2 * d), &mut rng),
            concept_from_exercise: Matrix::uniform(2 * d, 1, bound(2 * d), &mut rng),
        })
        .collect();
    Ok(ModelParams {
        student,
        exercise,
        concept,
        layers,
        diag_student_w: Matrix::uniform(d, n_concepts, bound(d), &mut rng),
        diag_student_b: Matrix::zeros(1, n_concepts),
        diag_exercise_w: Matrix::uniform(d, n_concepts, bound(d), &mut rng),
        diag_exercise_b: Matrix::zeros(1, n_concepts),
        predict_w: Matrix::uniform(n_concepts, n_concepts, bound(n_concepts), &mut rng),
        predict_b: Matrix::zeros(1, n_concepts),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub student_from_exercise: Var,
    pub exercise_from_student: Var,
    pub exercise_from_concept: Var,
    pub concept_from_exercise: Var,
}

/// Parameters living on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub student: Var,
    pub exercise: Var,
    pub concept: Var,
    pub layers: Vec<BoundLayer>,
    pub diag_student_w: Var,
    pub diag_student_b: Var,
    pub diag_exercise_w: Var,
    pub diag_exercise_b: Var,
    pub predict_w: Var,
    pub predict_b: Var,
    all: Vec<Var>,
}

impl BoundParams {
    /// From leaf vars in [`ModelParams::tensors`] order.
    pub fn from_vars(n_layers: usize, vars: Vec<Var>) -> Result<Self> {
        let expected = 3 + 4 * n_layers + 6;
        if vars.len() != expected {
            return Err(ScdError::invalid(format!(
                "{} vars for a {n_layers}-layer model (expected {expected})",
                vars.len()
            )));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let b = 3 + 4 * l;
                BoundLayer {
                    student_from_exercise: vars[b],
                    exercise_from_student: vars[b + 1],
                    exercise_from_concept: vars[b + 2],
                    concept_from_exercise: vars[b + 3],
                }
            })
            .collect();
        let t = 3 + 4 * n_layers;
        Ok(Self {
            student: vars[0],
            exercise: vars[1],
            concept: vars[2],
            layers,
            diag_student_w: vars[t],
            diag_student_b: vars[t + 1],
            diag_exercise_w: vars[t + 2],
            diag_exercise_b: vars[t + 3],
            predict_w: vars[t + 4],
            predict_b: vars[t + 5],
            all: vars,
        })
    }

    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// Attention weights of one layer, one column per direction (absent when the
/// direction has no edges).
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerAttentionTrace {
    pub e2s: Option<Var>,
    pub s2e: Option<Var>,
    pub c2e: Option<Var>,
    pub e2c: Option<Var>,
}

/// Node embeddings per layer: index 0 is the embedding lookup, index `L` the
/// GCN output.
#[derive(Debug, Clone)]
pub struct NodeStates {
    pub students: Vec<Var>,
    pub exercises: Vec<Var>,
    pub concepts: Vec<Var>,
    pub attention: Vec<LayerAttentionTrace>,
}

impl NodeStates {
    pub fn final_students(&self) -> Var {
        *self.students.last().expect("at least one layer")
    }

    pub fn final_exercises(&self) -> Var {
        *self.exercises.last().expect("at least one layer")
    }

    pub fn final_concepts(&self) -> Var {
        *self.concepts.last().expect("at least one layer")
    }
}

/// Attention-weighted sum of neighbor embeddings per head node, or `None`
/// when the graph has no edges.
fn attend(
    tape: &Tape,
    heads: Var,
    neighbors: Var,
    adj: &Adjacency,
    scorer: Var,
) -> Result<Option<(Var, Var)>> {
    if adj.n_edges() == 0 {
        return Ok(None);
    }
    let h = tape.gather(heads, adj.heads().clone())?;
    let n = tape.gather(neighbors, adj.neighbors().clone())?;
    let logits = tape.matmul(tape.concat_cols(h, n)?, scorer)?;
    let alpha = tape.segment_softmax(logits, adj.offsets().clone())?;
    let msg = tape.mul_col(n, alpha)?;
    let agg = tape.scatter_add(msg, adj.heads().clone(), adj.n_heads())?;
    Ok(Some((agg, alpha)))
}

fn plus(tape: &Tape, base: Var, extra: Option<(Var, Var)>) -> Result<Var> {
    match extra {
        Some((agg, _)) => tape.add(agg, base),
        None => Ok(base),
    }
}

/// Runs the GCN over `split`, which is either the original graph or a view
/// of it.
pub fn gcn_forward(tape: &Tape, params: &BoundParams, split: &DirectedSplit) -> Result<NodeStates> {
    let mut s = params.student;
    let mut e = params.exercise;
    let mut c = params.concept;
    let mut states = NodeStates {
        students: vec![s],
        exercises: vec![e],
        concepts: vec![c],
        attention: Vec::with_capacity(params.layers.len()),
    };
    for layer in &params.layers {
        let from_e = attend(tape, s, e, &split.e2s, layer.student_from_exercise)?;
        let from_s = attend(tape, e, s, &split.s2e, layer.exercise_from_student)?;
        let from_c = attend(tape, e, c, &split.c2e, layer.exercise_from_concept)?;
        let to_c = attend(tape, c, e, &split.e2c, layer.concept_from_exercise)?;
        states.attention.push(LayerAttentionTrace {
            e2s: from_e.map(|x| x.1),
            s2e: from_s.map(|x| x.1),
            c2e: from_c.map(|x| x.1),
            e2c: to_c.map(|x| x.1),
        });

        let s_next = plus(tape, s, from_e)?;
        let e_mid = plus(tape, e, from_s)?;
        let e_next = plus(tape, e_mid, from_c)?;
        let c_next = plus(tape, c, to_c)?;
        s = s_next;
        e = e_next;
        c = c_next;
        states.students.push(s);
        states.exercises.push(e);
        states.concepts.push(c);
    }
    Ok(states)
}

/// `sigmoid(x W + b)` on the given embedding rows.
fn diagnosis_head(tape: &Tape, rows: Var, w: Var, b: Var) -> Result<Var> {
    Ok(tape.sigmoid(tape.add_row(tape.matmul(rows, w)?, b)?))
}

/// Mastery rows for the given students, from final student states.
pub fn student_mastery(tape: &Tape, params: &BoundParams, states: &NodeStates, ids: &[usize]) -> Result<Var> {
    let rows = tape.gather(states.final_students(), ids.to_vec())?;
    diagnosis_head(tape, rows, params.diag_student_w, params.diag_student_b)
}

/// Difficulty rows for the given exercises, from final exercise states.
pub fn exercise_difficulty(tape: &Tape, params: &BoundParams, states: &NodeStates, ids: &[usize]) -> Result<Var> {
    let rows = tape.gather(states.final_exercises(), ids.to_vec())?;
    diagnosis_head(tape, rows, params.diag_exercise_w, params.diag_exercise_b)
}

/// `1/|concepts(e)|` at the concept columns of each pair's exercise.
pub fn concept_mask(q: &QMatrix, exercises: &[usize]) -> Result<Matrix> {
    let mut mask = Matrix::zeros(exercises.len(), q.n_concepts());
    for (r, &e) in exercises.iter().enumerate() {
        if e >= q.n_exercises() {
            return Err(ScdError::invalid(format!("exercise {e} out of range")));
        }
        let cs = q.concepts_of(e);
        if cs.is_empty() {
            return Err(ScdError::invalid(format!("exercise {e} has no concept")));
        }
        let w = 1.0 / cs.len() as f64;
        for &k in cs {
            mask.set(r, k, w);
        }
    }
    Ok(mask)
}

/// Predicted correctness per (student, exercise) pair as a column, on tape.
pub fn predict_on_tape(
    tape: &Tape,
    params: &BoundParams,
    states: &NodeStates,
    q: &QMatrix,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let students: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let exercises: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mask = tape.leaf(concept_mask(q, &exercises)?);
    let hs = student_mastery(tape, params, states, &students)?;
    let he = exercise_difficulty(tape, params, states, &exercises)?;
    let gap = tape.sub(hs, he)?;
    let v = tape.sigmoid(tape.add_row(tape.matmul(gap, params.predict_w)?, params.predict_b)?);
    Ok(tape.row_sum(tape.mul(v, mask)?))
}

/// Mastery (`M x K`) and difficulty (`N x K`), every entry in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub mastery: Matrix,
    pub difficulty: Matrix,
}

/// Final-layer node embeddings as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub students: Matrix,
    pub exercises: Matrix,
    pub concepts: Matrix,
}

pub fn embed(params: &ModelParams, split: &DirectedSplit) -> Result<Embeddings> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let states = gcn_forward(&tape, &bound, split)?;
    Ok(Embeddings {
        students: tape.value(states.final_students()),
        exercises: tape.value(states.final_exercises()),
        concepts: tape.value(states.final_concepts()),
    })
}

fn dense_head(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut z = x.matmul(w);
    for r in 0..z.rows() {
        for (o, bias) in z.row_mut(r).iter_mut().zip(b.as_slice()) {
            *o = sigmoid(*o + bias);
        }
    }
    z
}

pub fn diagnose(params: &ModelParams, emb: &Embeddings) -> Diagnosis {
    Diagnosis {
        mastery: dense_head(&emb.students, &params.diag_student_w, &params.diag_student_b),
        difficulty: dense_head(&emb.exercises, &params.diag_exercise_w, &params.diag_exercise_b),
    }
}

/// Concept-averaged `sigmoid(F_predict(mastery - difficulty))` per pair.
pub fn predict(
    params: &ModelParams,
    diag: &Diagnosis,
    q: &QMatrix,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let k = q.n_concepts();
    let mut out = Vec::with_capacity(pairs.len());
    let mut gap = vec![0.0; k];
    for &(s, e) in pairs {
        if s >= diag.mastery.rows() || e >= diag.difficulty.rows() {
            return Err(ScdError::invalid(format!("pair ({s}, {e}) out of range")));
        }
        let cs = q.concepts_of(e);
        if cs.is_empty() {
            return Err(ScdError::invalid(format!("exercise {e} has no concept")));
        }
        for (g, (a, b)) in gap
            .iter_mut()
            .zip(diag.mastery.row(s).iter().zip(diag.difficulty.row(e)))
        {
            *g = a - b;
        }
        let mut y = 0.0;
        for &c in cs {
            let z: f64 = (0..k).map(|j| gap[j] * params.predict_w.get(j, c)).sum::<f64>()
                + params.predict_b.get(0, c);
            y += sigmoid(z);
        }
        out.push(y / cs.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ResponseSet;
    use crate::relgraph::{build_relation_graph, directed_split};
    use crate::viewgen::View;
    use approx::assert_abs_diff_eq;

    fn fixture() -> (DirectedSplit, QMatrix) {
        let rs = ResponseSet::from_dense(
            4,
            5,
            &[(0, 0, 1), (0, 1, 0), (0, 3, 1), (1, 1, 1), (1, 2, 0), (2, 4, 1), (2, 0, 0), (2, 2, 1)],
        )
        .unwrap();
        let q = QMatrix::new(5, 3, &[(0, 0), (1, 1), (1, 2), (2, 2), (3, 0), (3, 1), (4, 1)]).unwrap();
        (directed_split(&build_relation_graph(&rs, &q).unwrap()), q)
    }

    fn shape(d: Option<usize>) -> ModelShape {
        ModelShape { n_students: 4, n_exercises: 5, n_concepts: 3, dim: d, layers: DEFAULT_LAYERS }
    }

    #[test]
    fn init_defaults_and_determinism() {
        let p = init_params(shape(None), 1).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.n_layers(), 2);
        assert_eq!(p, init_params(shape(None), 1).unwrap());
        assert_ne!(p, init_params(shape(None), 2).unwrap());
        assert_eq!(init_params(shape(Some(6)), 1).unwrap().dim(), 6);
        assert!(p.diag_student_b.as_slice().iter().all(|&b| b == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.student.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn isolated_student_keeps_residual() {
        let (split, _) = fixture();
        let p = init_params(shape(None), 4).unwrap();
        let emb = embed(&p, &split).unwrap();
        // student 3 has no answers in the fixture
        assert_eq!(emb.students.row(3), p.student.row(3));
    }

    #[test]
    fn equal_scores_average_neighbors() {
        let (split, _) = fixture();
        let mut p = init_params(ModelShape { layers: 1, ..shape(None) }, 4).unwrap();
        for m in [&mut p.layers[0].student_from_exercise] {
            m.as_mut_slice().fill(0.0);
        }
        let emb = embed(&p, &split).unwrap();
        // student 1 answered exercises 1 and 2
        for j in 0..3 {
            let expect = 0.5 * (p.exercise.get(1, j) + p.exercise.get(2, j)) + p.student.get(1, j);
            assert_abs_diff_eq!(emb.students.get(1, j), expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_segments_normalized() {
        let (split, _) = fixture();
        let p = init_params(shape(None), 8).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let states = gcn_forward(&tape, &bound, &split).unwrap();
        for layer in &states.attention {
            for (adj, var) in [(&split.e2s, layer.e2s), (&split.s2e, layer.s2e), (&split.c2e, layer.c2e), (&split.e2c, layer.e2c)] {
                let a = tape.value(var.unwrap());
                for w in adj.offsets().windows(2) {
                    if w[1] > w[0] {
                        let s: f64 = a.as_slice()[w[0]..w[1]].iter().sum();
                        assert!((s - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_view_matches_original_bitwise() {
        let (split, _) = fixture();
        let p = init_params(shape(None), 8).unwrap();
        let viewed = View::identity(&split).apply(&split).unwrap();
        assert_eq!(embed(&p, &split).unwrap(), embed(&p, &viewed).unwrap());
    }

    #[test]
    fn zero_heads_give_half() {
        let (split, q) = fixture();
        let mut p = init_params(shape(None), 2).unwrap();
        for m in [&mut p.diag_student_w, &mut p.diag_exercise_w, &mut p.predict_w] {
            m.as_mut_slice().fill(0.0);
        }
        let diag = diagnose(&p, &embed(&p, &split).unwrap());
        assert!(diag.mastery.as_slice().iter().all(|&v| v == 0.5));
        assert!(diag.difficulty.as_slice().iter().all(|&v| v == 0.5));
        let y = predict(&p, &diag, &q, &[(0, 1), (3, 4)]).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn predict_averages_exercise_concepts() {
        // identity predictor with zero bias, mastery - difficulty = logit(v)
        let v = [0.2, 0.4, 0.6, 0.8];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut p = init_params(
            ModelShape { n_students: 1, n_exercises: 2, n_concepts: 4, dim: None, layers: 1 },
            0,
        )
        .unwrap();
        let mut eye = Matrix::zeros(4, 4);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        p.predict_w = eye;
        let diag = Diagnosis {
            mastery: Matrix::from_rows(&[v.iter().map(|&x| logit(x)).collect()]).unwrap(),
            difficulty: Matrix::zeros(2, 4),
        };
        let q = QMatrix::new(2, 4, &[(0, 1), (0, 3), (1, 2)]).unwrap();
        let y = predict(&p, &diag, &q, &[(0, 0), (0, 1)]).unwrap();
        assert_abs_diff_eq!(y[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.6, epsilon = 1e-12);
        assert!(predict(&p, &diag, &QMatrix::new(2, 4, &[(0, 1)]).unwrap(), &[(0, 1)]).is_err());
    }

    #[test]
    fn tape_and_direct_prediction_agree() {
        let (split, q) = fixture();
        let p = init_params(shape(None), 21).unwrap();
        let pairs = [(0, 0), (1, 2), (2, 4), (3, 3)];
        let direct = predict(&p, &diagnose(&p, &embed(&p, &split).unwrap()), &q, &pairs).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let states = gcn_forward(&tape, &bound, &split).unwrap();
        let y = tape.value(predict_on_tape(&tape, &bound, &states, &q, &pairs).unwrap());
        for (a, b) in direct.iter().zip(y.as_slice()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn student_relabeling_permutes_mastery() {
        let train = [(0, 0, 1), (0, 1, 0), (1, 1, 1), (2, 2, 0), (3, 0, 1), (4, 2, 1), (4, 1, 0)];
        let q = QMatrix::new(3, 2, &[(0, 0), (1, 1), (2, 0), (2, 1)]).unwrap();
        let perm = [3usize, 0, 4, 1, 2]; // old id -> new id
        let base = ResponseSet::from_dense(5, 3, &train).unwrap();
        let relabeled: Vec<_> = train.iter().map(|&(s, e, r)| (perm[s], e, r)).collect();
        let moved = ResponseSet::from_dense(5, 3, &relabeled).unwrap();
        let shape = ModelShape { n_students: 5, n_exercises: 3, n_concepts: 2, dim: None, layers: 2 };
        let p = init_params(shape, 6).unwrap();
        let mut p2 = p.clone();
        for old in 0..5 {
            p2.student.row_mut(perm[old]).copy_from_slice(p.student.row(old));
        }
        let d1 = diagnose(&p, &embed(&p, &directed_split(&build_relation_graph(&base, &q).unwrap())).unwrap());
        let d2 = diagnose(&p2, &embed(&p2, &directed_split(&build_relation_graph(&moved, &q).unwrap())).unwrap());
        for old in 0..5 {
            for (a, b) in d1.mastery.row(old).iter().zip(d2.mastery.row(perm[old])) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tensor_roundtrip_layout() {
        let p = init_params(shape(None), 3).unwrap();
        let tensors: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
        assert_eq!(tensors.len(), 3 + 4 * 2 + 6);
        assert_eq!(p.with_tensors(tensors).unwrap(), p);
        assert!(p.with_tensors(vec![]).is_err());
    }
}
