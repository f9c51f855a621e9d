//! Static SVG learning curves: a task-accuracy panel (train / Val-IID /
//! Val-OOD) next to a program-accuracy panel, both against the global step.

use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::MetricsRow;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_B: f64 = 40.0;
const MARGIN_T: f64 = 28.0;
const GAP: f64 = 56.0;

struct Panel {
    x0: f64,
}

impl Panel {
    fn sx(&self, step: f64, max_step: f64) -> f64 {
        self.x0 + MARGIN_L + (PANEL_W - MARGIN_L - 10.0) * step / max_step.max(1.0)
    }

    fn sy(&self, acc: f64) -> f64 {
        MARGIN_T + (PANEL_H - MARGIN_T - MARGIN_B) * (1.0 - acc)
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str) {
    if pts.len() == 1 {
        let (x, y) = pts[0];
        writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#).unwrap();
        return;
    }
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
        path.join(" ")
    )
    .unwrap();
}

fn axes(out: &mut String, p: &Panel, max_step: f64, title: &str) {
    let left = p.x0 + MARGIN_L;
    let right = p.x0 + PANEL_W - 10.0;
    let top = MARGIN_T;
    let bottom = PANEL_H - MARGIN_B;
    writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#999" stroke-width="1"/>"##,
        right - left,
        bottom - top
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13" font-weight="bold">{title}</text>"#,
        (left + right) / 2.0,
        top - 9.0
    )
    .unwrap();
    for i in 0..=4 {
        let acc = i as f64 * 0.25;
        let y = p.sy(acc);
        writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#ddd" stroke-width="0.6"/>"##
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{acc:.2}</text>"#,
            left - 6.0,
            y + 3.5
        )
        .unwrap();
    }
    for i in 0..=4 {
        let s = max_step * i as f64 / 4.0;
        let x = p.sx(s, max_step);
        writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            bottom + 14.0,
            s.round() as u64
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">global step</text>"#,
        (left + right) / 2.0,
        bottom + 30.0
    )
    .unwrap();
}

/// Renders the two-panel figure. Rows must be non-empty.
pub fn learning_curves_svg(rows: &[MetricsRow]) -> String {
    assert!(!rows.is_empty(), "no metrics rows to plot");
    let max_step = rows.iter().map(|r| r.global_step).max().unwrap() as f64;
    let width = 2.0 * PANEL_W + GAP;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();

    let task = Panel { x0: 0.0 };
    axes(&mut out, &task, max_step, "task accuracy");
    let series: [(&str, &str, fn(&MetricsRow) -> f64); 3] = [
        ("train", "#888888", |r| r.train_acc),
        ("val_iid", "#1f6fb4", |r| r.val_iid_acc),
        ("val_ood", "#d62728", |r| r.val_ood_acc),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (task.sx(r.global_step as f64, max_step), task.sy(get(r))))
            .collect();
        polyline(&mut out, &pts, color);
        let lx = task.x0 + MARGIN_L + 10.0 + 92.0 * i as f64;
        let ly = PANEL_H - 6.0;
        writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0
        )
        .unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{ly:.1}" font-size="10">{name}</text>"#, lx + 20.0)
            .unwrap();
    }

    let prog = Panel { x0: PANEL_W + GAP };
    axes(&mut out, &prog, max_step, "program accuracy");
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (prog.sx(r.global_step as f64, max_step), prog.sy(r.program_acc)))
        .collect();
    polyline(&mut out, &pts, "#2ca02c");

    writeln!(out, "</svg>").unwrap();
    out
}

pub fn write_svg(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    std::fs::write(path, learning_curves_svg(rows))
}
