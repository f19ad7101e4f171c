//! CSV writers for pipeline outputs. Missing values are written as `NA`;
//! clusters, components and windows are 1-based in every file.

use std::io::Write;

use csv::Writer;
use nalgebra::DMatrix;

use crate::anomaly::{AnomalyReport, PlotBundle, WindowReport};
use crate::error::Result;
use crate::profile::{ProfiledRecord, SummaryRow};
use crate::ranktest::TestResult;
use crate::segment::ClusterFit;
use crate::sim::{DetectionRow, RecallRow, SimulationStudy};

pub const NA: &str = "NA";

pub fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        NA.into()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.into(), fmt)
}

fn join_1based(v: &[usize]) -> String {
    v.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(";")
}

/// subject_id, cluster, trimmed, nearest_cluster
pub fn write_assignments<W: Write>(out: W, ids: &[String], fit: &ClusterFit) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["subject_id", "cluster", "trimmed", "nearest_cluster"])?;
    for (i, id) in ids.iter().enumerate() {
        let a = fit.assignments[i];
        w.write_record([
            id.clone(),
            a.map_or_else(|| NA.into(), |c| (c + 1).to_string()),
            a.is_none().to_string(),
            (fit.nearest[i] + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per confirmed subject: `user_id, p_comp1..p_compB, p_win1..p_winW`
/// with adjusted p-values and `NA` for windows without observations.
pub fn write_pvalue_table<W: Write>(out: W, ids: &[String], report: &AnomalyReport, windows: &WindowReport) -> Result<()> {
    let mut w = Writer::from_writer(out);
    let n_win = windows.windows.len();
    let mut header = vec!["user_id".to_string()];
    header.extend((1..=report.b).map(|m| format!("p_comp{m}")));
    header.extend((1..=n_win).map(|k| format!("p_win{k}")));
    w.write_record(&header)?;
    for (i, _) in report.confirmed() {
        let t = report.tested_row(i).expect("confirmed subjects are tested");
        let mut row = vec![ids[i].clone()];
        row.extend(t.adjusted.iter().map(|&p| fmt(p)));
        let pw = windows.pvalues.get(&i).cloned().unwrap_or_else(|| vec![None; n_win]);
        row.extend(pw.into_iter().map(fmt_opt));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Every tested subject of one cluster with raw and adjusted p-values.
pub fn write_detections<W: Write>(out: W, ids: &[String], report: &AnomalyReport) -> Result<()> {
    let mut w = Writer::from_writer(out);
    let mut header: Vec<String> = ["cluster", "subject_id", "group"].map(String::from).to_vec();
    header.extend((1..=report.b).map(|m| format!("p_raw{m}")));
    header.extend((1..=report.b).map(|m| format!("p_adj{m}")));
    header.push("outlying_components".into());
    w.write_record(&header)?;
    for t in &report.tested {
        let group = if report.g1.contains(&t.subject) {
            "G1"
        } else if report.g2.contains(&t.subject) {
            "G2"
        } else {
            "trimmed"
        };
        let mut row = vec![(report.cluster + 1).to_string(), ids[t.subject].clone(), group.into()];
        row.extend(t.raw.iter().map(|&p| fmt(p)));
        row.extend(t.adjusted.iter().map(|&p| fmt(p)));
        row.push(join_1based(&t.components));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// cluster, subject_id, window, a, b, p_raw, p_adj, flagged
pub fn write_windows<W: Write>(out: W, ids: &[String], report: &WindowReport) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["cluster", "subject_id", "window", "a", "b", "p_raw", "p_adj", "flagged"])?;
    for (&i, adj) in &report.pvalues {
        let flagged = report.flagged_windows(i);
        for (k, p) in adj.iter().enumerate() {
            let (a, b) = report.windows.interval(k);
            w.write_record([
                (report.cluster + 1).to_string(),
                ids[i].clone(),
                (k + 1).to_string(),
                fmt(a),
                fmt(b),
                fmt_opt(report.raw_pvalues[&i][k]),
                fmt_opt(*p),
                flagged.contains(&k).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format: t, dim, series_id, role, value.
pub fn write_plot_bundle<W: Write>(out: W, bundle: &PlotBundle) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["t", "dim", "series_id", "role", "value"])?;
    for r in &bundle.rows {
        w.write_record([fmt(r.t), (r.dim + 1).to_string(), r.series_id.clone(), r.role.clone(), fmt(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// window, a, b, flagged for a plot bundle.
pub fn write_plot_windows<W: Write>(out: W, bundle: &PlotBundle) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["window", "a", "b", "flagged"])?;
    for &(k, a, b, f) in &bundle.windows {
        w.write_record([(k + 1).to_string(), fmt(a), fmt(b), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// subject_id, cluster, z1..zq, rho1..rhoM
pub fn write_features<W: Write>(out: W, ids: &[String], clusters: &[Option<usize>], covariates: &[Vec<f64>], scores: &DMatrix<f64>) -> Result<()> {
    let mut w = Writer::from_writer(out);
    let q = covariates.first().map_or(0, Vec::len);
    let mut header = vec!["subject_id".to_string(), "cluster".to_string()];
    header.extend((1..=q).map(|j| format!("z{j}")));
    header.extend((1..=scores.ncols()).map(|m| format!("rho{m}")));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone(), clusters[i].map_or_else(|| NA.into(), |c| (c + 1).to_string())];
        row.extend(covariates[i].iter().map(|&z| fmt(z)));
        row.extend(scores.row(i).iter().map(|&r| fmt(r)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// subject_id, cluster, replicate, flag
pub fn write_sim_flags<W: Write>(out: W, ids: &[String], study: &SimulationStudy) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["subject_id", "cluster", "replicate", "flag"])?;
    for c in &study.clusters {
        for s in study.ok_replicates() {
            for (a, &i) in c.base_anomalies.iter().enumerate() {
                w.write_record([ids[i].clone(), (c.cluster + 1).to_string(), (s + 1).to_string(), u8::from(c.flags[s][a]).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// cluster, replicate, recall
pub fn write_recall<W: Write>(out: W, rows: &[RecallRow]) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["cluster", "replicate", "recall"])?;
    for r in rows {
        w.write_record([(r.cluster + 1).to_string(), (r.replicate + 1).to_string(), fmt_opt(r.recall)])?;
    }
    w.flush()?;
    Ok(())
}

/// subject_id, cluster, detection_prob
pub fn write_detection_prob<W: Write>(out: W, ids: &[String], rows: &[DetectionRow]) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["subject_id", "cluster", "detection_prob"])?;
    for r in rows {
        w.write_record([ids[r.subject].clone(), (r.cluster + 1).to_string(), fmt(r.probability)])?;
    }
    w.flush()?;
    Ok(())
}

/// name, groups, statistic, p, p_adjusted
pub fn write_tests<W: Write>(out: W, rows: &[TestResult]) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["name", "groups", "statistic", "p", "p_adjusted"])?;
    for r in rows {
        w.write_record([r.name.clone(), r.groups.clone(), fmt(r.statistic), fmt(r.p), fmt_opt(r.p_adjusted)])?;
    }
    w.flush()?;
    Ok(())
}

/// cluster, window, intent, count
pub fn write_profile_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["cluster", "window", "intent", "count"])?;
    for r in rows {
        w.write_record([(r.cluster + 1).to_string(), (r.window + 1).to_string(), r.intent.clone(), r.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// cluster, subject_id, t, window, intent, created
pub fn write_profile_records<W: Write>(out: W, rows: &[ProfiledRecord]) -> Result<()> {
    let mut w = Writer::from_writer(out);
    w.write_record(["cluster", "subject_id", "t", "window", "intent", "created"])?;
    for r in rows {
        w.write_record([(r.cluster + 1).to_string(), r.subject_id.clone(), fmt(r.time), (r.window + 1).to_string(), r.intent.clone(), r.created.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
