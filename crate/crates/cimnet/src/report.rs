//! CSV and JSON writers for cost reports and metric logs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use cimnet_core::backend::CostReport;
use cimnet_core::train::MetricRow;
use serde::Serialize;

use crate::error::{io_err, Result};

pub const COST_HEADER: [&str; 7] = ["layer_id", "kind", "H", "W", "windows", "tiles", "mvms"];

/// `inf` for identical images, otherwise the shortest exact decimal form.
pub fn fmt_db(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        x.to_string()
    }
}

pub fn cost_csv(report: &CostReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COST_HEADER)?;
    for l in &report.layers {
        w.write_record([
            l.layer_id.clone(),
            l.kind.into(),
            l.height.to_string(),
            l.width.to_string(),
            l.windows.to_string(),
            l.tiles.to_string(),
            l.mvms.to_string(),
        ])?;
    }
    w.write_record([
        "total".into(),
        String::new(),
        report.height.to_string(),
        report.width.to_string(),
        report.total_windows.to_string(),
        String::new(),
        report.total_mvms.to_string(),
    ])?;
    if let (Some(r), Some(wr), Some(mr)) = (&report.reference, report.window_ratio(), report.mvm_ratio()) {
        w.write_record([format!("ratio_vs_{}", r.name), "ratio".into(), String::new(), String::new(), wr.to_string(), String::new(), mr.to_string()])?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

#[derive(Serialize)]
struct LayerJson<'a> {
    layer_id: &'a str,
    kind: &'a str,
    h: usize,
    w: usize,
    windows: usize,
    tiles: usize,
    mvms: usize,
}

#[derive(Serialize)]
struct ReferenceJson<'a> {
    name: &'a str,
    windows: usize,
    mvms: usize,
    window_ratio: f64,
    mvm_ratio: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    graph: &'a str,
    height: usize,
    width: usize,
    layers: Vec<LayerJson<'a>>,
    total_windows: usize,
    total_mvms: usize,
    reference: Option<ReferenceJson<'a>>,
}

pub fn cost_json(report: &CostReport) -> String {
    let j = ReportJson {
        graph: &report.graph,
        height: report.height,
        width: report.width,
        layers: report
            .layers
            .iter()
            .map(|l| LayerJson { layer_id: &l.layer_id, kind: l.kind, h: l.height, w: l.width, windows: l.windows, tiles: l.tiles, mvms: l.mvms })
            .collect(),
        total_windows: report.total_windows,
        total_mvms: report.total_mvms,
        reference: report.reference.as_ref().map(|r| ReferenceJson {
            name: &r.name,
            windows: r.windows,
            mvms: r.mvms,
            window_ratio: report.window_ratio().unwrap(),
            mvm_ratio: report.mvm_ratio().unwrap(),
        }),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("report serializes");
    s.push('\n');
    s
}

/// Human-readable table of the layers that issue MVMs.
pub fn cost_table(report: &CostReport) -> String {
    let mut s = format!("{} at {}x{}\n", report.graph, report.height, report.width);
    let _ = writeln!(s, "{:<10} {:<9} {:>5} {:>5} {:>9} {:>6} {:>10}", "layer", "kind", "H", "W", "windows", "tiles", "mvms");
    for l in report.layers.iter().filter(|l| l.windows > 0) {
        let _ = writeln!(s, "{:<10} {:<9} {:>5} {:>5} {:>9} {:>6} {:>10}", l.layer_id, l.kind, l.height, l.width, l.windows, l.tiles, l.mvms);
    }
    let _ = writeln!(s, "total windows {}, mvms {}", report.total_windows, report.total_mvms);
    if let (Some(r), Some(m)) = (&report.reference, report.mvm_ratio()) {
        let _ = writeln!(s, "vs {}: {} / {} mvms = {:.6} (1/{:.2})", r.name, report.total_mvms, r.mvms, m, 1.0 / m);
    }
    s
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "lr", "loss", "val_psnr"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.val_psnr.map(fmt_db).unwrap_or_default(),
        ])?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

/// Writes a CSV from a header and string rows.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    write_file(path, &w.into_inner().expect("in-memory writer"))
}

/// Writes through a temporary sibling file so a failed run leaves no
/// partial output behind.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
