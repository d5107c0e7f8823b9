//! The per-run metrics stream: one CSV with a fixed header, at most one row
//! per environment step, steps strictly increasing. Only values that are
//! known at a given step are written; the rest stay empty.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";

pub const METRICS_COLUMNS: [&str; 20] = [
    "step",
    "episode",
    "episode_return",
    "episode_length",
    "episode_success",
    "critic_loss",
    "actor_loss",
    "mean_q",
    "mean_target",
    "clip_rate",
    "temperature",
    "entropy",
    "model_loss",
    "model_updates",
    "epsilon",
    "match_rate",
    "mean_bonus",
    "eval_success",
    "eval_return",
    "buffer_size",
];

/// One row of run diagnostics; every field is optional so separate event
/// kinds (episode end, update-window summary, model phase, evaluation) can
/// share a step without inventing placeholder values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub episode: Option<usize>,
    pub episode_return: Option<f64>,
    pub episode_length: Option<usize>,
    pub episode_success: Option<bool>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_q: Option<f64>,
    pub mean_target: Option<f64>,
    pub clip_rate: Option<f64>,
    pub temperature: Option<f64>,
    pub entropy: Option<f64>,
    pub model_loss: Option<f64>,
    pub model_updates: Option<usize>,
    pub epsilon: Option<f64>,
    pub match_rate: Option<f64>,
    pub mean_bonus: Option<f64>,
    pub eval_success: Option<f64>,
    pub eval_return: Option<f64>,
    pub buffer_size: Option<usize>,
}

impl MetricsRow {
    /// True when nothing has been recorded, so no row should be written.
    pub fn is_blank(&self) -> bool {
        *self == MetricsRow::default()
    }
}

fn float_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn count_cell(v: Option<usize>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn flag_cell(v: Option<bool>) -> String {
    match v {
        Some(x) => format!("{}", x as u8),
        None => String::new(),
    }
}

/// Serializes rows and enforces the monotone-step contract.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", METRICS_COLUMNS.join(","))?;
        out.flush()?;
        Ok(MetricsWriter { out, last_step: None })
    }

    /// Appends one row. Steps must strictly increase across calls.
    pub fn emit(&mut self, step: usize, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::Usage(format!(
                    "metrics row for step {step} after a row for step {last}"
                )));
            }
        }
        self.last_step = Some(step);
        let cells = [
            step.to_string(),
            count_cell(row.episode),
            float_cell(row.episode_return),
            count_cell(row.episode_length),
            flag_cell(row.episode_success),
            float_cell(row.critic_loss),
            float_cell(row.actor_loss),
            float_cell(row.mean_q),
            float_cell(row.mean_target),
            float_cell(row.clip_rate),
            float_cell(row.temperature),
            float_cell(row.entropy),
            float_cell(row.model_loss),
            count_cell(row.model_updates),
            float_cell(row.epsilon),
            float_cell(row.match_rate),
            float_cell(row.mean_bonus),
            float_cell(row.eval_success),
            float_cell(row.eval_return),
            count_cell(row.buffer_size),
        ];
        writeln!(self.out, "{}", cells.join(","))?;
        self.out.flush()?;
        Ok(())
    }
}
