//! Per-epoch report rows and the CSV rebuilt from episode logs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrain::EpisodeRecord;
use super::store::{epoch_dir, read_json, write_atomic};
use crate::error::Result;

pub const CSV_HEADER: &str =
    "epoch,pos,neg,diff_new,diff_old,trig_p,trig_r,trig_f1,arg_p,arg_r,arg_f1,reward,pll,distinct2,distinct3,ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epoch: usize,
    pub pos: usize,
    pub neg: usize,
    pub diff_new: usize,
    pub diff_old: usize,
    pub trig_p: f64,
    pub trig_r: f64,
    pub trig_f1: f64,
    pub arg_p: f64,
    pub arg_r: f64,
    pub arg_f1: f64,
    pub reward: f64,
    pub pll: f64,
    pub distinct2: f64,
    pub distinct3: f64,
    pub ckpt: bool,
}

impl From<&EpisodeRecord> for ReportRow {
    fn from(e: &EpisodeRecord) -> Self {
        ReportRow {
            epoch: e.epoch,
            pos: e.positives.len(),
            neg: e.negatives.len(),
            diff_new: e.diff_new.len(),
            diff_old: e.diff_old.len(),
            trig_p: e.scores.trigger.precision,
            trig_r: e.scores.trigger.recall,
            trig_f1: e.scores.trigger.f1,
            arg_p: e.scores.argument.precision,
            arg_r: e.scores.argument.recall,
            arg_f1: e.scores.argument.f1,
            reward: e.reward,
            pll: e.quality.pll,
            distinct2: e.quality.distinct2,
            distinct3: e.quality.distinct3,
            ckpt: e.checkpoint_updated,
        }
    }
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch,
            r.pos,
            r.neg,
            r.diff_new,
            r.diff_old,
            r.trig_p,
            r.trig_r,
            r.trig_f1,
            r.arg_p,
            r.arg_r,
            r.arg_f1,
            r.reward,
            r.pll,
            r.distinct2,
            r.distinct3,
            u8::from(r.ckpt)
        );
    }
    out
}

/// Episode logs of epochs 1, 2, ... up to the first missing one.
pub fn read_episodes(run_dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for epoch in 1.. {
        let path = epoch_dir(run_dir, epoch).join("episode.json");
        if !path.exists() {
            break;
        }
        out.push(read_json(&path)?);
    }
    Ok(out)
}

pub fn rebuild_report(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let rows: Vec<ReportRow> = read_episodes(run_dir)?.iter().map(ReportRow::from).collect();
    write_atomic(&run_dir.join("report.csv"), to_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Fixed-width table for terminals.
pub fn to_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("epoch   pos   neg  d_new  d_old  trig_f1  arg_f1   reward      pll  dist2  dist3  ckpt\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>5} {:>6} {:>6} {:>8.4} {:>7.4} {:>8.4} {:>8.4} {:>6.3} {:>6.3} {:>5}",
            r.epoch,
            r.pos,
            r.neg,
            r.diff_new,
            r.diff_old,
            r.trig_f1,
            r.arg_f1,
            r.reward,
            r.pll,
            r.distinct2,
            r.distinct3,
            if r.ckpt { "yes" } else { "" }
        );
    }
    out
}
