//! Component ablation: train and evaluate one model per toggle assignment.

use std::fmt::Write as _;

use crate::config::{RunConfig, Toggles};
use crate::data::GzslDataset;
use crate::error::{Error, Result};
use crate::eval::{sweep_table, EvalReport, ScoreTable};
use crate::train::train;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
}

const fn t(
    pv: bool,
    ps: bool,
    wvpf: bool,
    wspf: bool,
    svpf: bool,
    sspf: bool,
    adapter: bool,
) -> Toggles {
    Toggles {
        pv,
        ps,
        wvpf,
        wspf,
        svpf,
        sspf,
        adapter,
    }
}

/// The eight standard configurations, from the plain backbone to the full
/// model.
pub fn standard_rows() -> Vec<AblationRow> {
    let rows = [
        ("baseline", Toggles::BASELINE),
        ("pv_fusion", t(true, false, true, false, true, false, false)),
        ("ps_fusion", t(false, true, false, true, false, true, true)),
        ("prompts", t(true, true, false, false, false, false, false)),
        ("weak", t(true, true, true, true, false, false, false)),
        ("strong", t(true, true, false, false, true, true, true)),
        ("no_adapter", t(true, true, true, true, true, true, false)),
        ("full", Toggles::FULL),
    ];
    rows.into_iter()
        .map(|(name, toggles)| AblationRow {
            name: name.into(),
            toggles,
        })
        .collect()
}

/// Parses extra rows, one per line: `name: pv ps wvpf ...`. Listed
/// components are on, the rest off. `#` starts a comment.
pub fn parse_rows(text: &str) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| err("expected `name: components`".into()))?;
        let name = name.trim();
        if name.is_empty() || name.contains(',') {
            return Err(err(format!("bad row name {name:?}")));
        }
        let mut toggles = Toggles::BASELINE;
        for word in rest.split([' ', ',', '\t']).filter(|w| !w.is_empty()) {
            let slot = match word.to_ascii_lowercase().as_str() {
                "pv" => &mut toggles.pv,
                "ps" => &mut toggles.ps,
                "wvpf" => &mut toggles.wvpf,
                "wspf" => &mut toggles.wspf,
                "svpf" => &mut toggles.svpf,
                "sspf" => &mut toggles.sspf,
                "adapter" => &mut toggles.adapter,
                other => return Err(err(format!("unknown component {other:?}"))),
            };
            *slot = true;
        }
        toggles.validate().map_err(|e| err(e.to_string()))?;
        out.push(AblationRow {
            name: name.to_owned(),
            toggles,
        });
    }
    Ok(out)
}

/// How each row's τ is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum TauChoice {
    Fixed(f64),
    /// Best H over the grid.
    Sweep(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
}

pub fn run_row(
    cfg: &RunConfig,
    data: &GzslDataset,
    row: &AblationRow,
    tau: &TauChoice,
) -> Result<AblationResult> {
    let mut cfg = cfg.clone();
    cfg.toggles = row.toggles;
    let out = train(&cfg, data)?;
    let model = &out.checkpoint.model;
    let table = ScoreTable::compute(model, data)?;
    let report = match tau {
        TauChoice::Fixed(t) => table.report(*t, cfg.averaging)?,
        TauChoice::Sweep(grid) => sweep_table(&table, grid, cfg.averaging)?
            .best_report()
            .clone(),
    };
    Ok(AblationResult {
        row: row.clone(),
        report,
        final_loss: out.final_loss,
    })
}

/// Trains and evaluates every row in order.
pub fn ablate(
    cfg: &RunConfig,
    data: &GzslDataset,
    rows: &[AblationRow],
    tau: &TauChoice,
) -> Result<Vec<AblationResult>> {
    rows.iter()
        .map(|row| run_row(cfg, data, row, tau))
        .collect()
}

pub const CSV_HEADER: &str = "config,baseline,pv,ps,wvpf,wspf,svpf,sspf,adapter,acc,u,s,h,tau";

pub fn to_csv(results: &[AblationResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        let t = r.row.toggles;
        // The backbone column is always ticked: every row runs on it.
        let flags = [true, t.pv, t.ps, t.wvpf, t.wspf, t.svpf, t.sspf, t.adapter]
            .map(|b| if b { "1" } else { "0" })
            .join(",");
        let e = &r.report;
        let _ = writeln!(
            out,
            "{},{flags},{:.4},{:.4},{:.4},{:.4},{}",
            r.row.name, e.acc_czsl, e.u, e.s, e.h, e.tau
        );
    }
    out
}
