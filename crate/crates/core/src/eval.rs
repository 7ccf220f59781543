//! Calibrated GZSL inference and the metric suite.
//!
//! Accuracies are percentages. Scores are dot products between the final
//! CLS feature and embedded class prototypes; unseen classes get `+τ`.

use std::fmt::Write as _;

use crate::config::Averaging;
use crate::data::{GzslDataset, Sample};
use crate::error::{Error, Result};
use crate::model::Vspcn;
use crate::tensor::{matmul_nt, Tensor};

/// `2SU / (S + U)`, or 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Argmax of `scores[c] + τ·unseen[c]`, lowest index on ties.
pub fn calibrated_predict(scores: &[f64], unseen: &[bool], tau: f64) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("no classes to predict from".into()));
    }
    if scores.len() != unseen.len() {
        return Err(Error::shape(
            "calibrated_predict",
            &[scores.len()],
            &[unseen.len()],
        ));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, (&s, &u)) in scores.iter().zip(unseen).enumerate() {
        let v = if u { s + tau } else { s };
        if v > best_score {
            best = c;
            best_score = v;
        }
    }
    Ok(best)
}

/// Accuracy over `(truth, prediction)` pairs.
pub fn accuracy(pairs: &[(usize, usize)], averaging: Averaging) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    match averaging {
        Averaging::Micro => {
            let hit = pairs.iter().filter(|(t, p)| t == p).count();
            100.0 * hit as f64 / pairs.len() as f64
        }
        Averaging::Macro => {
            let mut classes: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            classes.sort_unstable();
            classes.dedup();
            let per_class: f64 = classes
                .iter()
                .map(|&c| {
                    let of_c: Vec<_> = pairs.iter().filter(|p| p.0 == c).collect();
                    let hit = of_c.iter().filter(|p| p.0 == p.1).count();
                    hit as f64 / of_c.len() as f64
                })
                .sum();
            100.0 * per_class / classes.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc_czsl: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub tau: f64,
    /// `confusion[truth][prediction]` over all classes under GZSL.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "tau,acc_czsl,u,s,h";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            self.tau, self.acc_czsl, self.u, self.s, self.h
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tau      {:.4}", self.tau);
        let _ = writeln!(out, "CZSL acc {:.2}", self.acc_czsl);
        let _ = writeln!(out, "U        {:.2}", self.u);
        let _ = writeln!(out, "S        {:.2}", self.s);
        let _ = writeln!(out, "H        {:.2}", self.h);
        out.push_str("confusion (rows: truth)\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:4}")).collect();
            let _ = writeln!(out, "{}", cells.join(""));
        }
        out
    }
}

/// Class scores of every test sample, computed once and reused across τ.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    pub n_seen: usize,
    pub seen: Vec<(usize, Vec<f64>)>,
    pub unseen: Vec<(usize, Vec<f64>)>,
}

impl ScoreTable {
    pub fn compute(model: &Vspcn, data: &GzslDataset) -> Result<Self> {
        if data.test_seen.is_empty() || data.test_unseen.is_empty() {
            return Err(Error::Contract(
                "evaluation needs seen and unseen test samples".into(),
            ));
        }
        model.check_dataset(data)?;
        let protos = model.prototypes(data)?;
        let score = |samples: &[Sample]| -> Result<Vec<(usize, Vec<f64>)>> {
            samples
                .iter()
                .map(|s| {
                    let f = model.embed(data, &s.patches)?;
                    Ok((s.label, matmul_nt(&f, &protos)?.into_data()))
                })
                .collect()
        };
        Ok(ScoreTable {
            n_seen: data.n_seen,
            seen: score(&data.test_seen)?,
            unseen: score(&data.test_unseen)?,
        })
    }

    /// Builds a table from precomputed features and prototypes.
    pub fn from_features(
        n_seen: usize,
        prototypes: &Tensor,
        seen: &[(usize, Tensor)],
        unseen: &[(usize, Tensor)],
    ) -> Result<Self> {
        let score = |xs: &[(usize, Tensor)]| -> Result<Vec<(usize, Vec<f64>)>> {
            xs.iter()
                .map(|(y, f)| Ok((*y, matmul_nt(f, prototypes)?.into_data())))
                .collect()
        };
        Ok(ScoreTable {
            n_seen,
            seen: score(seen)?,
            unseen: score(unseen)?,
        })
    }

    fn n_classes(&self) -> usize {
        self.seen
            .iter()
            .chain(&self.unseen)
            .map(|(_, s)| s.len())
            .next()
            .unwrap_or(self.n_seen)
    }

    fn unseen_mask(&self) -> Vec<bool> {
        (0..self.n_classes()).map(|c| c >= self.n_seen).collect()
    }

    /// GZSL predictions at `τ` for the seen then unseen test samples.
    pub fn predictions(&self, tau: f64) -> Result<Vec<(usize, usize)>> {
        let mask = self.unseen_mask();
        self.seen
            .iter()
            .chain(&self.unseen)
            .map(|(y, s)| Ok((*y, calibrated_predict(s, &mask, tau)?)))
            .collect()
    }

    pub fn report(&self, tau: f64, averaging: Averaging) -> Result<EvalReport> {
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(Error::Contract(
                "evaluation needs seen and unseen test samples".into(),
            ));
        }
        let n_c = self.n_classes();
        let preds = self.predictions(tau)?;
        let (seen_pairs, unseen_pairs) = preds.split_at(self.seen.len());
        let mut confusion = vec![vec![0; n_c]; n_c];
        for &(t, p) in &preds {
            if t >= n_c {
                return Err(Error::Label {
                    label: t,
                    classes: n_c,
                });
            }
            confusion[t][p] += 1;
        }

        // Conventional ZSL: argmax over the unseen block only.
        let czsl: Vec<(usize, usize)> = self
            .unseen
            .iter()
            .map(|(y, s)| {
                let block = &s[self.n_seen..];
                let off = calibrated_predict(block, &vec![false; block.len()], 0.0)?;
                Ok((*y, self.n_seen + off))
            })
            .collect::<Result<_>>()?;

        let s = accuracy(seen_pairs, averaging);
        let u = accuracy(unseen_pairs, averaging);
        Ok(EvalReport {
            acc_czsl: accuracy(&czsl, averaging),
            u,
            s,
            h: harmonic_mean(s, u),
            tau,
            confusion,
        })
    }
}

/// Top-1 accuracy (%) on the training split, scored over seen classes only.
pub fn seen_train_accuracy(model: &Vspcn, data: &GzslDataset) -> Result<f64> {
    if data.train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    model.check_dataset(data)?;
    let protos = model.prototypes(data)?.slice_rows(0, data.n_seen)?;
    let mask = vec![false; data.n_seen];
    let pairs = data
        .train
        .iter()
        .map(|s| {
            let f = model.embed(data, &s.patches)?;
            let scores = matmul_nt(&f, &protos)?;
            Ok((s.label, calibrated_predict(scores.data(), &mask, 0.0)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&pairs, Averaging::Micro))
}

pub fn evaluate(model: &Vspcn, data: &GzslDataset, tau: f64) -> Result<EvalReport> {
    ScoreTable::compute(model, data)?.report(tau, model.config.averaging)
}

/// Evenly spaced grid of `points` values covering `[lo, hi]`.
pub fn tau_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n)
            .map(|i| (lo * (n - 1 - i) as f64 + hi * i as f64) / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub reports: Vec<EvalReport>,
    /// Index into `reports` of the highest H (first one on ties).
    pub best: usize,
}

impl Sweep {
    pub fn best_report(&self) -> &EvalReport {
        &self.reports[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,h\n");
        for r in &self.reports {
            let _ = writeln!(out, "{},{:.4}", r.tau, r.h);
        }
        out
    }

    /// Line plot of H against τ.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let taus: Vec<f64> = self.reports.iter().map(|r| r.tau).collect();
        let lo = taus.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = taus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |t: f64| pad + (t - lo) / span * (w - 2.0 * pad);
        let y = |v: f64| h - pad - v / 100.0 * (h - 2.0 * pad);
        let points: Vec<String> = self
            .reports
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.tau), y(r.h)))
            .collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
            h - pad,
            w - pad
        );
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">tau ({lo} .. {hi})</text>"#,
            w / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            out,
            r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">H (%)</text>"#,
            h / 2.0,
            h / 2.0
        );
        out.push_str("</svg>\n");
        out
    }
}

pub fn sweep_table(table: &ScoreTable, grid: &[f64], averaging: Averaging) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Config("empty tau grid".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("tau grid contains a non-finite value".into()));
    }
    let reports: Vec<EvalReport> = grid
        .iter()
        .map(|&t| table.report(t, averaging))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.h > reports[best].h {
            best = i;
        }
    }
    Ok(Sweep { reports, best })
}

pub fn sweep_tau(model: &Vspcn, data: &GzslDataset, grid: &[f64]) -> Result<Sweep> {
    let table = ScoreTable::compute(model, data)?;
    sweep_table(&table, grid, model.config.averaging)
}
