//! Output files of an experiment:
//!
//! ```text
//! results.json   every record, aggregate and comparison
//! summary.csv    loss,k,mean_acc,std_acc,n_runs
//! curve.csv      k,<loss>_mean,<loss>_std,...
//! tests.csv      one Welch test per (pair, k)
//! runs/*.log     per-run epoch log headed by its wall time
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::SgdrSchedule;

use super::sweep::{ExperimentResult, RunTiming};

pub fn results_json(result: &ExperimentResult) -> Result<String> {
    let mut s = serde_json::to_string_pretty(result)?;
    s.push('\n');
    Ok(s)
}

pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("loss,k,mean_acc,std_acc,n_runs\n");
    for a in &result.aggregates {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            a.loss, a.k, a.mean_acc, a.std_acc, a.n_runs
        );
    }
    out
}

pub fn curve_csv(result: &ExperimentResult) -> String {
    let mut losses: Vec<&str> = Vec::new();
    let mut ks: Vec<usize> = Vec::new();
    for a in &result.aggregates {
        if !losses.contains(&a.loss.as_str()) {
            losses.push(&a.loss);
        }
        if !ks.contains(&a.k) {
            ks.push(a.k);
        }
    }
    let mut out = String::from("k");
    for l in &losses {
        let _ = write!(out, ",{l}_mean,{l}_std");
    }
    out.push('\n');
    for k in ks {
        let _ = write!(out, "{k}");
        for l in &losses {
            match result.aggregate_for(l, k) {
                Some(a) => {
                    let _ = write!(out, ",{},{}", a.mean_acc, a.std_acc);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn tests_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("a,b,k,mean_a,mean_b,t,df,p_two_sided,p_greater,p_value\n");
    for c in &result.comparisons {
        let _ = write!(out, "{},{},{},{},{}", c.a, c.b, c.k, c.mean_a, c.mean_b);
        match c.welch {
            Some(w) => {
                let _ = write!(out, ",{},{},{},{}", w.t, w.df, w.p_two_sided, w.p_greater);
            }
            None => out.push_str(",,,,"),
        }
        match c.p_value {
            Some(p) => {
                let _ = writeln!(out, ",{p}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_report(dir: &Path, result: &ExperimentResult, timings: &[RunTiming]) -> Result<()> {
    if result.records.is_empty() {
        return Err(Error::Config("experiment result has no records".into()));
    }
    let runs = dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    write(&dir.join("results.json"), &results_json(result)?)?;
    write(&dir.join("summary.csv"), &summary_csv(result))?;
    write(&dir.join("curve.csv"), &curve_csv(result))?;
    write(&dir.join("tests.csv"), &tests_csv(result))?;
    for r in &result.records {
        let seconds = timings.iter().find(|t| t.key == r.key).map(|t| t.seconds);
        let mut log = String::new();
        if let Some(s) = seconds {
            let _ = writeln!(log, "# wall_seconds={s:.3}");
        }
        let _ = writeln!(
            log,
            "# status={}",
            serde_json::to_value(r.status)?.as_str().unwrap_or("")
        );
        if let Some(d) = &r.diagnostic {
            let _ = writeln!(log, "# diagnostic={d}");
        }
        log.push_str("epoch,lr,train_loss,test_accuracy\n");
        for e in &r.epochs {
            let _ = writeln!(
                log,
                "{},{},{},{}",
                e.epoch, e.lr, e.train_loss, e.test_accuracy
            );
        }
        write(&runs.join(format!("{}.log", r.key.file_stem())), &log)?;
    }
    Ok(())
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `step,lr` for every optimizer step of the schedule.
pub fn lr_curve_csv(schedule: &SgdrSchedule, steps_per_epoch: usize) -> Result<String> {
    schedule.validate()?;
    let steps = steps_per_epoch.max(1);
    let mut out = String::from("step,lr\n");
    for epoch in 0..schedule.total_epochs() {
        for s in 0..steps {
            let _ = writeln!(
                out,
                "{},{}",
                epoch * steps + s,
                schedule.lr_at(epoch, s, steps)?
            );
        }
    }
    Ok(out)
}

pub fn write_lr_curve(path: &Path, schedule: &SgdrSchedule, steps_per_epoch: usize) -> Result<()> {
    write(path, &lr_curve_csv(schedule, steps_per_epoch)?)
}
