use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::Stage;

pub const METRICS_HEADER: &str =
    "step,stage,loss_total,loss_enc,loss_gen,loss_pair,loss_tri,loss_softmax,var_ratio,r_rec,r_cls";

/// Everything measured on one optimizer step. Only the CSV columns are
/// persisted; the rest is for in-process inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_enc: f64,
    pub loss_gen: f64,
    pub loss_pair: f64,
    pub loss_tri: f64,
    pub loss_softmax: Option<f64>,
    pub var_ratio: f64,
    pub r_rec: f64,
    pub r_cls: f64,
    /// Mean squared error between generated and true masks.
    pub mask_mse: f64,
    pub generator_grad_norm: f64,
    pub classifier_grad_norm: f64,
    pub triplet_sets: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let softmax = self.loss_softmax.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.number(),
            self.loss_total,
            self.loss_enc,
            self.loss_gen,
            self.loss_pair,
            self.loss_tri,
            softmax,
            self.var_ratio,
            self.r_rec,
            self.r_cls
        )
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh file with the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Appends to an existing metrics file, dropping rows past `last_step`
    /// (left behind by a run that continued after its last checkpoint).
    pub fn resume(path: &Path, last_step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let reader = BufReader::new(File::open(path)?);
        let mut kept = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != METRICS_HEADER {
                    return Err(Error::invalid(format!(
                        "{} does not start with the metrics header",
                        path.display()
                    )));
                }
                continue;
            }
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad metrics row {}: {line}", i + 1)))?;
            if step <= last_step {
                kept.push(line);
            }
        }
        let mut w = Self::create(path)?;
        for line in kept {
            writeln!(w.out, "{line}")?;
        }
        w.out.flush()?;
        drop(w);
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Trailing-window means of a series; entry `i` averages `[i+1-w, i]`.
pub fn windowed_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
