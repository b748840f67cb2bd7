//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{dataset_stats, filter_min_interactions, load_qmatrix, load_responses, split_train_test};
use crate::error::{Result, ScdError};
use crate::eval::{case_study, evaluate_checkpoint, Buckets};
use crate::model::{diagnose, embed};
use crate::relgraph::{build_relation_graph, directed_split};
use crate::synth::{generate, SynthConfig};
use crate::train::{fit, Checkpoint, TrainConfig};
use crate::viewgen::{audit_csv, retention_audit, star_fixture};

#[derive(Debug, Parser)]
#[command(name = "scd", version, about = "Self-supervised graph cognitive diagnosis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print dataset statistics as JSON.
    Stats {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        qmatrix: PathBuf,
        /// Keep only students with more records than this first.
        #[arg(long)]
        min_interactions: Option<usize>,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` config overrides, applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out records and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 5)]
        bucket_width: usize,
        #[arg(long, default_value_t = 9)]
        buckets: usize,
        /// Also write report.json, groups.csv and students.csv here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Tabulate theoretical and observed edge retention per head degree.
    ViewgenAudit {
        /// Training config naming the data and dropout parameters.
        #[arg(long, required_unless_present = "degrees")]
        config: Option<PathBuf>,
        /// Audit a star graph with these student degrees instead of data.
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        degrees: Option<Vec<usize>>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print mastery and difficulty on the concepts of chosen exercises.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Student keys as they appear in the data.
        #[arg(long, value_delimiter = ',', required = true)]
        students: Vec<String>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        exercises: Vec<String>,
        /// Held-out records whose scores are reported alongside training ones.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Also write case_study.csv and case_pairs.csv here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write a synthetic long-tailed dataset as responses.csv and qmatrix.csv.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        students: usize,
        #[arg(long, default_value_t = 50)]
        exercises: usize,
        #[arg(long, default_value_t = 10)]
        concepts: usize,
        #[arg(long, default_value_t = 0.0)]
        selection_bias: f64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| ScdError::io(Path::new("<stdout>"), e))
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| ScdError::io(&path, e))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn lookup(keys: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            keys.iter()
                .position(|k| k == w)
                .ok_or_else(|| ScdError::invalid(format!("unknown {what} {w:?}")))
        })
        .collect()
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Stats {
            responses,
            qmatrix,
            min_interactions,
        } => {
            let mut rs = load_responses(&responses)?;
            if let Some(m) = min_interactions {
                rs = filter_min_interactions(&rs, m)?;
            }
            let q = load_qmatrix(&qmatrix, &rs)?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&dataset_stats(&rs, &q))?))
        }
        Command::Train {
            config,
            overrides,
            seed,
            output_dir,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let outcome = fit(&cfg)?;
            let last = outcome.history.last().expect("at least one epoch");
            let summary = serde_json::json!({
                "epochs": outcome.history.len(),
                "final": last,
                "checkpoint": outcome.checkpoint,
                "log": outcome.log,
                "test": outcome.test,
            });
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&summary)?))
        }
        Command::Eval {
            checkpoint,
            test,
            bucket_width,
            buckets,
            output_dir,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let raw = load_responses(&test)?;
            let report = evaluate_checkpoint(&ck, &raw, Buckets { width: bucket_width, count: buckets })?;
            let json = report.to_json()?;
            if let Some(dir) = output_dir {
                write_file(&dir, "report.json", &json)?;
                write_file(&dir, "groups.csv", &report.groups_csv())?;
                write_file(&dir, "students.csv", &report.students_csv())?;
            }
            emit(out, &format!("{json}\n"))
        }
        Command::ViewgenAudit {
            config,
            degrees,
            overrides,
            draws,
            seed,
            output_dir,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let split = match degrees {
                Some(d) if d.contains(&0) => return Err(ScdError::invalid("degrees must be positive")),
                Some(d) => star_fixture(&d),
                None => {
                    let (r, q) = match (&cfg.responses, &cfg.qmatrix) {
                        (Some(r), Some(q)) => (r, q),
                        _ => return Err(ScdError::invalid("config needs both responses and qmatrix paths")),
                    };
                    let all = filter_min_interactions(&load_responses(r)?, cfg.min_interactions)?;
                    let q = load_qmatrix(q, &all)?;
                    let train = split_train_test(&all, cfg.train_ratio, cfg.master_seed)?.train;
                    directed_split(&build_relation_graph(&train, &q)?)
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
            let rows = retention_audit(&split, &cfg.dropout(), draws, &mut rng)?;
            let csv = audit_csv(&rows);
            if let Some(dir) = output_dir {
                write_file(&dir, "retention_audit.csv", &csv)?;
            }
            emit(out, &csv)
        }
        Command::Diagnose {
            checkpoint,
            students,
            exercises,
            test,
            output_dir,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let s_ids = lookup(ck.train.student_keys(), &students, "student")?;
            let e_ids = lookup(ck.train.exercise_keys(), &exercises, "exercise")?;
            let mut records = ck.train.records().to_vec();
            if let Some(t) = test {
                records.extend(crate::eval::align_records(&load_responses(&t)?, &ck.train).0);
            }
            let diag = diagnose(&ck.params, &embed(&ck.params, &ck.graph()?)?);
            let cs = case_study(&diag, &ck.q, &s_ids, &e_ids, &records)?;
            let (sk, ek) = (ck.train.student_keys(), ck.train.exercise_keys());
            let table = cs.to_csv(sk, ek, ck.q.concept_keys());
            if let Some(dir) = output_dir {
                write_file(&dir, "case_study.csv", &table)?;
                write_file(&dir, "case_pairs.csv", &cs.pairs_csv(sk, ek))?;
            }
            emit(out, &table)
        }
        Command::Synth {
            output_dir,
            seed,
            students,
            exercises,
            concepts,
            selection_bias,
        } => {
            let data = generate(&SynthConfig {
                n_students: students,
                n_exercises: exercises,
                n_concepts: concepts,
                selection_bias,
                seed,
                ..SynthConfig::default()
            })?;
            let (r, q) = data.write(&output_dir)?;
            emit(out, &format!("{}\n{}\n", r.display(), q.display()))
        }
    }
}
