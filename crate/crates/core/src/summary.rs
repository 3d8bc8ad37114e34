//! Aggregating runs over seeds into result-table rows.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{allocation_string, parse_allocation};
use crate::error::{Error, Result};

pub const RUN_HEADER: &str = "network,budget,seed,val_error,allocation";
pub const TABLE_HEADER: &str = "network,budget,error_mean,error_std,runs,allocation";

/// Final result of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub network: String,
    /// Experiment name, e.g. `budget=10_learn`.
    pub label: String,
    pub seed: u64,
    pub val_error: f64,
    pub allocation: Vec<u32>,
}

impl RunSummary {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RUN_HEADER.split(','))?;
        w.write_record([
            self.network.clone(),
            self.label.clone(),
            self.seed.to_string(),
            format!("{:.6}", self.val_error),
            allocation_string(&self.allocation),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<Self>> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.join(",") != RUN_HEADER {
            return Err(Error::Validation(format!(
                "run summary header {:?}, expected {RUN_HEADER:?}",
                header.join(",")
            )));
        }
        r.records()
            .map(|rec| {
                let rec = rec?;
                let field = |i: usize| rec.get(i).unwrap_or_default();
                let bad = |what: &str| Error::Validation(format!("bad {what} in run summary row {rec:?}"));
                Ok(RunSummary {
                    network: field(0).to_string(),
                    label: field(1).to_string(),
                    seed: field(2).parse().map_err(|_| bad("seed"))?,
                    val_error: field(3).parse().map_err(|_| bad("val_error"))?,
                    allocation: parse_allocation(field(4))?,
                })
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub network: String,
    pub label: String,
    pub runs: usize,
    pub mean_error: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_error: f64,
    /// Most frequent final allocation, earliest seen on ties.
    pub allocation: Vec<u32>,
}

/// Mean and sample standard deviation over runs of a single arm.
pub fn summarize_arm(runs: &[RunSummary]) -> Result<ArmSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("no runs to summarize".into()))?;
    let budget = first.allocation.iter().sum::<u32>();
    for r in runs {
        if r.network != first.network || r.label != first.label {
            return Err(Error::Validation(format!(
                "runs from different arms in one group: {}/{} and {}/{}",
                first.network, first.label, r.network, r.label
            )));
        }
        if r.allocation.len() != first.allocation.len() || r.allocation.iter().sum::<u32>() != budget {
            return Err(Error::Validation(format!(
                "{} seed {}: allocation {:?} inconsistent with {:?}",
                r.label, r.seed, r.allocation, first.allocation
            )));
        }
    }
    let n = runs.len() as f64;
    // shifted by the first value so identical runs give exactly zero spread
    let shift = first.val_error;
    let mean = shift + runs.iter().map(|r| r.val_error - shift).sum::<f64>() / n;
    let std = if runs.len() > 1 {
        (runs.iter().map(|r| (r.val_error - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut counts: Vec<(&[u32], usize)> = Vec::new();
    for r in runs {
        match counts.iter_mut().find(|(a, _)| *a == r.allocation.as_slice()) {
            Some((_, c)) => *c += 1,
            None => counts.push((&r.allocation, 1)),
        }
    }
    let best = counts.iter().map(|&(_, c)| c).max().unwrap_or(0);
    let allocation = counts
        .iter()
        .find(|&&(_, c)| c == best)
        .map(|(a, _)| a.to_vec())
        .unwrap_or_default();
    Ok(ArmSummary {
        network: first.network.clone(),
        label: first.label.clone(),
        runs: runs.len(),
        mean_error: mean,
        std_error: std,
        allocation,
    })
}

/// Groups runs by network and experiment, in order of first appearance.
pub fn summarize(runs: &[RunSummary]) -> Result<Vec<ArmSummary>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<RunSummary>> = HashMap::new();
    for r in runs {
        let key = (r.network.clone(), r.label.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.clone());
    }
    order.iter().map(|k| summarize_arm(&groups[k])).collect()
}

/// Table with errors in percent.
pub fn write_table<W: Write>(arms: &[ArmSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TABLE_HEADER.split(','))?;
    for a in arms {
        w.write_record([
            a.network.clone(),
            a.label.clone(),
            format!("{:.2}", 100.0 * a.mean_error),
            format!("{:.2}", 100.0 * a.std_error),
            a.runs.to_string(),
            allocation_string(&a.allocation),
        ])?;
    }
    w.flush()?;
    Ok(())
}
