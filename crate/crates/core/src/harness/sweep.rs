use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{detection_curve, evaluate_arms, EvalReport};
use crate::error::{Error, Result};
use crate::hinting::{Mode, Pipeline};
use crate::synth::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub k: usize,
    pub accuracy: f64,
    pub rare_accuracy: f64,
    pub common_accuracy: f64,
    pub detection_accuracy: f64,
    pub trust_rate: Option<f64>,
}

impl From<&EvalReport> for SweepRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            mode: r.mode,
            k: r.k,
            accuracy: r.accuracy,
            rare_accuracy: r.rare_accuracy,
            common_accuracy: r.common_accuracy,
            detection_accuracy: r.detection_accuracy,
            trust_rate: r.trust_rate,
        }
    }
}

/// Evaluates every mode at every `k`. Arms that use neither hints nor `k`
/// are evaluated once and repeated across `k`; their answers do not depend
/// on it.
pub fn ablation_sweep(
    pipe: &Pipeline,
    dataset: &Dataset,
    modes: &[Mode],
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut arms = Vec::new();
    for &mode in modes {
        if mode.hinted() && mode != Mode::AllClassesHints {
            arms.extend(ks.iter().map(|&k| (mode, k)));
        } else {
            arms.extend(ks.first().map(|&k| (mode, k)));
        }
    }
    let reports = evaluate_arms(pipe, dataset, &arms, false)?;
    let curve = detection_curve(pipe, dataset)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &k in ks {
            let r = reports
                .iter()
                .find(|r| {
                    r.mode == mode
                        && (r.k == k || !(mode.hinted() && mode != Mode::AllClassesHints))
                })
                .expect("every arm was evaluated");
            // Detection accuracy depends on k for every arm.
            let detection = curve[k.min(curve.len()) - 1].accuracy;
            rows.push(SweepRow {
                k,
                detection_accuracy: detection,
                ..SweepRow::from(r)
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "mode,k,accuracy,rare_accuracy,common_accuracy,detection_accuracy,trust_rate\n",
    );
    for r in rows {
        let trust = r.trust_rate.map_or(String::new(), |t| t.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{trust}",
            r.mode.name(),
            r.k,
            r.accuracy,
            r.rare_accuracy,
            r.common_accuracy,
            r.detection_accuracy
        );
    }
    out
}

const COLORS: [&str; 7] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#666666",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_frame(title: &str, x_label: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        W / 2.0,
        W / 2.0,
        H - 10.0
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = H - PAD - v * (H - 2.0 * PAD);
        let _ = writeln!(
            s,
            "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>",
            W - PAD,
            PAD - 5.0,
            y + 4.0
        );
    }
    s
}

/// Line plot of accuracy, detection accuracy and trust rate against `k`.
pub fn sweep_line_svg(rows: &[SweepRow]) -> String {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let x = |k: usize| {
        let (lo, hi) = (ks[0] as f64, *ks.last().unwrap_or(&1) as f64);
        let t = if hi > lo {
            (k as f64 - lo) / (hi - lo)
        } else {
            0.5
        };
        PAD + t * (W - 2.0 * PAD)
    };
    let y = |v: f64| H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = svg_frame("Accuracy against the number of hints", "k");
    for &k in &ks {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{k}</text>",
            x(k),
            H - PAD + 15.0
        );
    }
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    let mut modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    for mode in &modes {
        series.push((
            format!("{} accuracy", mode.name()),
            rows.iter()
                .filter(|r| r.mode == *mode)
                .map(|r| (r.k, r.accuracy))
                .collect(),
        ));
    }
    if let Some(first) = modes.first() {
        series.push((
            "detection accuracy".into(),
            rows.iter()
                .filter(|r| r.mode == *first)
                .map(|r| (r.k, r.detection_accuracy))
                .collect(),
        ));
    }
    if let Some(m) = modes.iter().find(|m| **m == Mode::Full) {
        series.push((
            "full trust rate".into(),
            rows.iter()
                .filter(|r| r.mode == *m)
                .filter_map(|r| r.trust_rate.map(|t| (r.k, t)))
                .collect(),
        ));
    }
    for (i, (label, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(k, v)| format!("{:.1},{:.1}", x(k), y(v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = PAD + 15.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{label}</text>",
            W - PAD - 150.0,
            ly - 9.0,
            W - PAD - 135.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of rare and common accuracy per mode at one `k`.
pub fn arms_bar_svg(rows: &[SweepRow], k: usize) -> String {
    let at_k: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
    let y = |v: f64| H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = svg_frame(&format!("Answer accuracy by arm (k = {k})"), "arm");
    let slot = (W - 2.0 * PAD) / at_k.len().max(1) as f64;
    for (i, r) in at_k.iter().enumerate() {
        let x0 = PAD + slot * i as f64;
        for (j, (v, color)) in [(r.rare_accuracy, COLORS[1]), (r.common_accuracy, COLORS[0])]
            .iter()
            .enumerate()
        {
            let bx = x0 + slot * (0.15 + 0.35 * j as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{bx:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>",
                y(*v),
                slot * 0.3,
                H - PAD - y(*v)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + slot / 2.0,
            H - PAD + 15.0,
            r.mode.name()
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" fill=\"{}\">rare</text><text x=\"{}\" y=\"{}\" fill=\"{}\">common</text>",
        W - PAD - 90.0,
        PAD,
        COLORS[1],
        W - PAD - 50.0,
        PAD,
        COLORS[0]
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `sweep.csv`, `sweep_k.svg` and `sweep_arms.svg` into `dir`.
pub fn write_sweep(dir: &Path, rows: &[SweepRow], k: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [
        ("sweep.csv", sweep_csv(rows)),
        ("sweep_k.svg", sweep_line_svg(rows)),
        ("sweep_arms.svg", arms_bar_svg(rows, k)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
