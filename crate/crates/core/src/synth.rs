//! Synthetic long-tailed response data with planted mastery and difficulty.
//!
//! Each student has a general ability plus a per-concept offset; each
//! exercise has a per-concept difficulty. A response is correct when the
//! mean mastery-minus-difficulty gap over the exercise's concepts, plus
//! Gaussian noise, is non-negative. Interaction counts follow a discrete
//! Pareto law capped at the number of exercises.

use std::path::{Path, PathBuf};

use rand::seq::index::{sample, sample_weighted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::corpus::{QMatrix, ResponseRecord, ResponseSet};
use crate::diffcore::{sigmoid, Matrix};
use crate::error::{Result, ScdError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    /// Smallest interaction count.
    pub min_records: usize,
    /// Pareto shape of the interaction counts; smaller is heavier.
    pub tail_shape: f64,
    /// Spread of per-concept mastery around a student's ability.
    pub concept_spread: f64,
    /// Standard deviation of the response noise.
    pub noise: f64,
    /// Probability that an exercise carries a second concept.
    pub second_concept: f64,
    /// How strongly exercise choice tracks ability: exercise `e` is picked
    /// with weight `exp(bias * ability * hardness_e)`. Zero picks uniformly.
    pub selection_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_exercises: 50,
            n_concepts: 10,
            min_records: 2,
            // P(count <= 5) = 1 - 3^(-shape) = 1/2
            tail_shape: std::f64::consts::LN_2 / 3f64.ln(),
            concept_spread: 0.7,
            noise: 0.05,
            second_concept: 0.4,
            selection_bias: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub responses: ResponseSet,
    pub q: QMatrix,
    /// Planted `M x K` mastery in (0, 1).
    pub mastery: Matrix,
    /// Planted `N x K` difficulty in (0, 1).
    pub difficulty: Matrix,
}

impl SyntheticData {
    /// Writes `responses.csv` and `qmatrix.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))?;
        let r = dir.join("responses.csv");
        let q = dir.join("qmatrix.csv");
        self.responses.write_csv(&r)?;
        self.q.write_csv(&q, self.responses.exercise_keys())?;
        Ok((r, q))
    }

    /// The label without response noise.
    pub fn noiseless_score(&self, student: usize, exercise: usize) -> u8 {
        u8::from(self.gap(student, exercise) >= 0.0)
    }

    fn gap(&self, s: usize, e: usize) -> f64 {
        let cs = self.q.concepts_of(e);
        cs.iter()
            .map(|&k| self.mastery.get(s, k) - self.difficulty.get(e, k))
            .sum::<f64>()
            / cs.len() as f64
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    if cfg.n_students == 0 || cfg.n_exercises == 0 || cfg.n_concepts == 0 {
        return Err(ScdError::invalid("synthetic data needs students, exercises and concepts"));
    }
    if cfg.min_records == 0 || cfg.min_records > cfg.n_exercises {
        return Err(ScdError::invalid(format!(
            "min_records {} not in 1..={}",
            cfg.min_records, cfg.n_exercises
        )));
    }
    let bad = |what: &str| ScdError::invalid(format!("bad synthetic {what}"));
    let counts_dist = Pareto::new(cfg.min_records as f64, cfg.tail_shape).map_err(|_| bad("tail_shape"))?;
    let spread = Normal::new(0.0, cfg.concept_spread).map_err(|_| bad("concept_spread"))?;
    let noise = Normal::new(0.0, cfg.noise).map_err(|_| bad("noise"))?;
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // every concept is covered; some exercises get a second one
    let mut entries = Vec::new();
    for e in 0..cfg.n_exercises {
        let first = e % cfg.n_concepts;
        entries.push((e, first));
        if cfg.n_concepts > 1 && rng.random::<f64>() < cfg.second_concept {
            let other = (first + 1 + rng.random_range(0..cfg.n_concepts - 1)) % cfg.n_concepts;
            entries.push((e, other));
        }
    }
    let q = QMatrix::new(cfg.n_exercises, cfg.n_concepts, &entries)?;

    let mut mastery = Matrix::zeros(cfg.n_students, cfg.n_concepts);
    let mut abilities = Vec::with_capacity(cfg.n_students);
    for s in 0..cfg.n_students {
        let ability = unit.sample(&mut rng);
        abilities.push(ability);
        for k in 0..cfg.n_concepts {
            mastery.set(s, k, sigmoid(ability + spread.sample(&mut rng)));
        }
    }
    let mut difficulty = Matrix::zeros(cfg.n_exercises, cfg.n_concepts);
    let mut hardness = vec![0.0; cfg.n_exercises];
    for e in 0..cfg.n_exercises {
        for k in 0..cfg.n_concepts {
            let logit = unit.sample(&mut rng);
            difficulty.set(e, k, sigmoid(logit));
            if q.concepts_of(e).contains(&k) {
                hardness[e] += logit / q.concepts_of(e).len() as f64;
            }
        }
    }

    let mut data = SyntheticData {
        responses: ResponseSet::from_dense(cfg.n_students, cfg.n_exercises, &[])?,
        q,
        mastery,
        difficulty,
    };
    let mut records = Vec::new();
    for s in 0..cfg.n_students {
        let n = (counts_dist.sample(&mut rng).floor() as usize).clamp(cfg.min_records, cfg.n_exercises);
        let mut picked = if cfg.selection_bias == 0.0 {
            sample(&mut rng, cfg.n_exercises, n).into_vec()
        } else {
            let w = |e: usize| (cfg.selection_bias * abilities[s] * hardness[e]).exp();
            sample_weighted(&mut rng, cfg.n_exercises, w, n)
                .map_err(|_| bad("selection_bias"))?
                .into_vec()
        };
        picked.sort_unstable();
        for e in picked {
            let correct = data.gap(s, e) + noise.sample(&mut rng) >= 0.0;
            records.push(ResponseRecord {
                student: s,
                exercise: e,
                score: u8::from(correct),
            });
        }
    }
    data.responses = data.responses.with_records(records)?;
    Ok(data)
}
