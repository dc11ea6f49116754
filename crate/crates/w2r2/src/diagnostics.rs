//! Measurement tools that sit outside the training loop: a shortcut
//! probe, a representation-separation index, lambda/mu grid sweeps, and
//! hand-rolled SVG reports for all of the above.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::acc_at;
use crate::model::{forward, fusion_populations, ModelConfig, ModelParams, Pass};
use crate::rng::{derive_seed, stream};
use crate::scenes::{GroundingSample, SampleFeatures, WorldConfig};
use crate::trainer::{train_run, MetricsRecord, TrainConfig, CSV_HEADER};

/// Default grids for [`run_sweep`].
pub const LAMBDA_GRID: &[f64] = &[0.1, 0.5, 1.0, 1.5, 2.0];
pub const MU_GRID: &[f64] = &[0.1, 0.3, 0.5, 0.7, 0.9];

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Where the fused representation sits between its 2D-only and 3D-only
/// counterparts, as centroid distances over a sample set:
/// `d(fused, 2d) / (d(fused, 2d) + d(fused, 3d))`.
///
/// 0 means the fusion output is indistinguishable from a 2D-only view
/// (shortcut-dominated); 1 means it tracks the 3D view. `None` when all
/// three centroids coincide and the ratio is undefined.
pub fn separation_index(
    params: &ModelParams,
    feats: &[SampleFeatures],
) -> Result<Option<f64>> {
    if feats.is_empty() {
        return Err(Error::Data("separation index needs at least one sample".into()));
    }
    let d = params.cfg.dh;
    let mut sums = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    for f in feats {
        let pops = fusion_populations(params, f)?;
        for (sum, pop) in sums.iter_mut().zip(&pops) {
            for (a, &x) in sum.iter_mut().zip(pop) {
                *a += x;
            }
        }
    }
    let n = feats.len() as f64;
    for s in sums.iter_mut() {
        for v in s.iter_mut() {
            *v /= n;
        }
    }
    let (c2d, c3d, cf) = (&sums[0], &sums[1], &sums[2]);
    let d2 = l2(cf, c2d);
    let d3 = l2(cf, c3d);
    let denom = d2 + d3;
    Ok(if denom == 0.0 { None } else { Some(d2 / denom) })
}

/// How well the 2D evidence alone grounds queries, against the uniform
/// guessing rate for the same scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    /// Mean 1/n_objects: selection accuracy of uniform guessing.
    pub chance: f64,
    pub sel_acc: f64,
    pub acc25: f64,
    pub acc50: f64,
}

/// Scores one pass over a split: selection accuracy, Acc@0.25/0.50, and
/// the uniform-guessing chance rate.
pub fn grounding_scores(
    params: &ModelParams,
    samples: &[GroundingSample],
    feats: &[SampleFeatures],
    pass: Pass,
) -> Result<ProbeReport> {
    if samples.is_empty() || samples.len() != feats.len() {
        return Err(Error::Data(format!(
            "probe split has {} samples and {} feature rows",
            samples.len(),
            feats.len()
        )));
    }
    let mut sel = 0usize;
    let mut a25 = 0usize;
    let mut a50 = 0usize;
    let mut chance = 0.0;
    for (s, f) in samples.iter().zip(feats) {
        let gt = s.objects[s.target_index].bbox()?;
        let mut g = crate::autodiff::Graph::new();
        let bound = params.bind(&mut g);
        let out = forward(&mut g, &bound, f, &s.query, pass)?;
        let (idx, pbox) = out.predict()?;
        sel += (idx == s.target_index) as usize;
        a25 += acc_at(&pbox, &gt, 0.25) as usize;
        a50 += acc_at(&pbox, &gt, 0.50) as usize;
        chance += 1.0 / s.objects.len() as f64;
    }
    let n = samples.len();
    Ok(ProbeReport {
        n,
        chance: chance / n as f64,
        sel_acc: sel as f64 / n as f64,
        acc25: a25 as f64 / n as f64,
        acc50: a50 as f64 / n as f64,
    })
}

/// Runs the shortcut pass (3D evidence zeroed) over a split and scores it.
pub fn shortcut_probe(
    params: &ModelParams,
    samples: &[GroundingSample],
    feats: &[SampleFeatures],
) -> Result<ProbeReport> {
    grounding_scores(params, samples, feats, Pass::Shortcut { detach_2d: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub mu: f64,
    /// Final evaluation snapshot of the cell's run.
    pub last: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    pub lambda: f64,
    pub mu: f64,
    pub message: String,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub failures: Vec<SweepFailure>,
}

fn clean_grid(vals: &[f64], name: &str, max: f64) -> Result<Vec<f64>> {
    if vals.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if vals.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > max) {
        return Err(Error::Config(format!(
            "{name} grid entries must be finite and in [0, {max}], got {vals:?}"
        )));
    }
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v.dedup();
    Ok(v)
}

/// Trains one run per (lambda, mu) grid cell and collects each cell's
/// final snapshot, using up to `jobs` worker threads. Cells draw their
/// shuffle seeds from their grid position, so results do not depend on
/// scheduling. A cell that diverges is recorded as a failure without
/// sinking the rest; the sweep as a whole fails only when every cell
/// does. With `out_dir`, each cell trains into `cells/lambda_L_mu_M/`
/// and the sweep writes `sweep.csv`, `sweep.svg`, and (when any cell
/// failed) `sweep_failures.txt`.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    world: &WorldConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[GroundingSample],
    val: &[GroundingSample],
    lambdas: &[f64],
    mus: &[f64],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<SweepOutput> {
    let lambdas = clean_grid(lambdas, "lambda", f64::INFINITY)?;
    let mus = clean_grid(mus, "mu", 1.0)?;
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let mut grid = Vec::new();
    for &lambda in &lambdas {
        for &mu in &mus {
            grid.push((grid.len() as u64, lambda, mu));
        }
    }
    if let Some(dir) = out_dir {
        let cells_dir = dir.join("cells");
        fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    }

    type Outcome = std::result::Result<SweepCell, SweepFailure>;
    let slots: Mutex<Vec<Option<Outcome>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let (idx, lambda, mu) = grid[i];
                let cell_cfg = TrainConfig {
                    lambda,
                    mu,
                    seed: derive_seed(&[tcfg.seed, stream::SWEEP_CELL, idx]),
                    ..*tcfg
                };
                let cell_dir =
                    out_dir.map(|d| d.join("cells").join(format!("lambda_{lambda}_mu_{mu}")));
                let outcome = train_run(world, mcfg, &cell_cfg, train, val, cell_dir.as_deref())
                    .map(|out| SweepCell {
                        lambda,
                        mu,
                        last: *out.records.last().expect("at least the step-0 record"),
                    })
                    .map_err(|e| SweepFailure { lambda, mu, message: e.to_string() });
                slots.lock().expect("worker poisoned the slots")[i] = Some(outcome);
            });
        }
    });

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for slot in slots.into_inner().expect("workers joined") {
        match slot.expect("every cell ran") {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    if cells.is_empty() {
        return Err(Error::SweepFailed);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("sweep.csv");
        let mut text = format!("lambda,mu,{CSV_HEADER}\n");
        for c in &cells {
            text.push_str(&format!("{},{},{}\n", c.lambda, c.mu, c.last.csv_row()));
        }
        fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join("sweep.svg");
        fs::write(&svg, sweep_report_svg(&cells)).map_err(|e| Error::io(&svg, e))?;
        if !failures.is_empty() {
            let path = dir.join("sweep_failures.txt");
            let mut text = String::new();
            for f in &failures {
                text.push_str(&format!("lambda={} mu={}: {}\n", f.lambda, f.mu, f.message));
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(SweepOutput { cells, failures })
}

// ---- SVG rendering ----------------------------------------------------
//
// Small fixed-layout line charts; no external plotting dependency so the
// artifacts stay reviewable as plain text.

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: String,
    x_label: String,
    /// Fixed y range, or None to fit the data.
    y_range: Option<(f64, f64)>,
    series: Vec<Series>,
}

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 300.0;
const PLOT_LEFT: f64 = 56.0;
const PLOT_TOP: f64 = 36.0;
const PLOT_W: f64 = 300.0;
const PLOT_H: f64 = 200.0;

fn render_line_panels(panels: &[Panel]) -> String {
    let total_w = PANEL_W * panels.len() as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {total_w} {PANEL_H}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    );
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k as f64 * PANEL_W + PLOT_LEFT;
        let y0 = PLOT_TOP;
        let (x1, y1) = (x0 + PLOT_W, y0 + PLOT_H);

        let xs: Vec<f64> = panel
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .collect();
        let ys: Vec<f64> = panel
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .collect();
        let (mut xmin, mut xmax) = min_max(&xs);
        if xmin == xmax {
            xmin -= 0.5;
            xmax += 0.5;
        }
        let (ymin, ymax) = match panel.y_range {
            Some(r) => r,
            None => {
                let (lo, hi) = min_max(&ys);
                if lo == hi {
                    (lo - 0.5, hi + 0.5)
                } else {
                    (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
                }
            }
        };
        let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PLOT_W;
        let py = |y: f64| y1 - (y - ymin) / (ymax - ymin) * PLOT_H;

        out.push_str(&format!(
            "<text x=\"{x0}\" y=\"20\" font-size=\"13\">{}</text>\n",
            panel.title
        ));
        out.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
             fill=\"none\" stroke=\"#444\"/>\n"
        ));
        // y ticks at min / mid / max
        for t in [ymin, 0.5 * (ymin + ymax), ymax] {
            let y = py(t);
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"#444\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.2}</text>\n",
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            ));
        }
        // x ticks: every distinct x when few, else the ends
        let mut uxs = xs.clone();
        uxs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        uxs.dedup();
        let ticks: Vec<f64> = if uxs.len() <= 6 && !uxs.is_empty() {
            uxs
        } else {
            vec![xmin, xmax]
        };
        for t in ticks {
            let x = px(t);
            out.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{y1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#444\"/>\n\
                 <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>\n",
                y1 + 4.0,
                y1 + 16.0
            ));
        }
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            (x0 + x1) / 2.0,
            y1 + 32.0,
            panel.x_label
        ));

        for (si, s) in panel.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            if s.points.len() >= 2 {
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                    .collect();
                out.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                    pts.join(" ")
                ));
            }
            for &(x, y) in &s.points {
                out.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    px(x),
                    py(y)
                ));
            }
            // legend, stacked top-right inside the plot
            let ly = y0 + 12.0 + 13.0 * si as f64;
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
                x1 - 96.0,
                x1 - 80.0,
                x1 - 76.0,
                ly + 3.5,
                s.label
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if xs.is_empty() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Loss and accuracy curves for one training run.
pub fn training_curves_svg(records: &[MetricsRecord]) -> String {
    let at = |f: fn(&MetricsRecord) -> f64| -> Vec<(f64, f64)> {
        records.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let losses = Panel {
        title: "losses".into(),
        x_label: "step".into(),
        y_range: None,
        series: vec![
            Series { label: "align".into(), points: at(|r| r.loss_align) },
            Series { label: "hinge".into(), points: at(|r| r.loss_deterrence) },
            Series { label: "total".into(), points: at(|r| r.loss_total) },
        ],
    };
    let accs = Panel {
        title: "grounding".into(),
        x_label: "step".into(),
        y_range: Some((0.0, 1.0)),
        series: vec![
            Series { label: "acc50 fused".into(), points: at(|r| r.acc50_fused) },
            Series { label: "acc50 shortcut".into(), points: at(|r| r.acc50_shortcut) },
            Series { label: "sel fused".into(), points: at(|r| r.sel_acc_fused) },
            Series { label: "sel shortcut".into(), points: at(|r| r.sel_acc_shortcut) },
        ],
    };
    let sep = Panel {
        title: "shortcut pressure".into(),
        x_label: "step".into(),
        y_range: Some((0.0, 1.0)),
        series: vec![
            Series {
                label: "separation".into(),
                points: records
                    .iter()
                    .filter_map(|r| r.separation_index.map(|v| (r.step as f64, v)))
                    .collect(),
            },
            Series { label: "hinge rate".into(), points: at(|r| r.hinge_activation_rate) },
        ],
    };
    render_line_panels(&[losses, accs, sep])
}

/// Final-snapshot metrics across the sweep grid: one line per lambda,
/// mu on the x axis.
pub fn sweep_report_svg(cells: &[SweepCell]) -> String {
    let mut lambdas: Vec<f64> = cells.iter().map(|c| c.lambda).collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    lambdas.dedup();

    let panel = |title: &str, get: fn(&MetricsRecord) -> Option<f64>| -> Panel {
        let series = lambdas
            .iter()
            .map(|&l| Series {
                label: format!("lambda {l}"),
                points: cells
                    .iter()
                    .filter(|c| c.lambda == l)
                    .filter_map(|c| get(&c.last).map(|v| (c.mu, v)))
                    .collect(),
            })
            .collect();
        Panel {
            title: title.into(),
            x_label: "mu".into(),
            y_range: Some((0.0, 1.0)),
            series,
        }
    };
    render_line_panels(&[
        panel("acc50 fused", |r| Some(r.acc50_fused)),
        panel("sel acc shortcut", |r| Some(r.sel_acc_shortcut)),
        panel("separation index", |r| r.separation_index),
    ])
}

// ---- population scatter ------------------------------------------------

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Leading principal direction of mean-centered rows by power iteration;
/// deterministic start, fixed iteration count.
fn principal_direction(rows: &[Vec<f64>], ortho_to: Option<&[f64]>) -> Vec<f64> {
    let d = rows[0].len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
    if let Some(u) = ortho_to {
        project_out(&mut v, u);
    }
    normalize(&mut v);
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for row in rows {
            let mut r = row.clone();
            if let Some(u) = ortho_to {
                project_out(&mut r, u);
            }
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (n, &x) in next.iter_mut().zip(&r) {
                *n += dot * x;
            }
        }
        if normalize(&mut next) == 0.0 {
            break; // no variance left; keep the previous direction
        }
        v = next;
    }
    v
}

fn project_out(v: &mut [f64], u: &[f64]) {
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    for (x, &ui) in v.iter_mut().zip(u) {
        *x -= dot * ui;
    }
}

/// Scatter of per-sample pooled fusion outputs under the three evidence
/// views, projected onto their top two principal directions.
pub fn population_scatter_svg(
    params: &ModelParams,
    feats: &[SampleFeatures],
) -> Result<String> {
    if feats.is_empty() {
        return Err(Error::Data("scatter needs at least one sample".into()));
    }
    let labels = ["2d only", "3d only", "fused"];
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(3 * feats.len());
    for f in feats {
        let pops = fusion_populations(params, f)?;
        for (k, p) in pops.into_iter().enumerate() {
            rows.push((k, p));
        }
    }
    let d = rows[0].1.len();
    let mut mean = vec![0.0; d];
    for (_, r) in &rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows.len() as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, r)| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let pc1 = principal_direction(&centered, None);
    let pc2 = principal_direction(&centered, Some(&pc1));
    let project = |r: &[f64]| -> (f64, f64) {
        (
            r.iter().zip(&pc1).map(|(a, b)| a * b).sum(),
            r.iter().zip(&pc2).map(|(a, b)| a * b).sum(),
        )
    };
    let pts: Vec<(usize, (f64, f64))> = centered
        .iter()
        .enumerate()
        .map(|(i, r)| (rows[i].0, project(r)))
        .collect();

    let (mut xmin, mut xmax) = min_max(&pts.iter().map(|p| p.1 .0).collect::<Vec<_>>());
    let (mut ymin, mut ymax) = min_max(&pts.iter().map(|p| p.1 .1).collect::<Vec<_>>());
    if xmin == xmax {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymin == ymax {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let (w, h, margin) = (420.0, 420.0, 30.0);
    let sx = |x: f64| margin + (x - xmin) / (xmax - xmin) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - ymin) / (ymax - ymin) * (h - 2.0 * margin);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"monospace\" font-size=\"11\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\" stroke=\"#444\"/>\n"
    );
    for (k, (x, y)) in &pts {
        out.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            sx(*x),
            sy(*y),
            PALETTE[k % PALETTE.len()]
        ));
    }
    for (k, label) in labels.iter().enumerate() {
        let ly = 16.0 + 14.0 * k as f64;
        out.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{ly:.1}\" r=\"3\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n",
            w - 110.0,
            PALETTE[k % PALETTE.len()],
            w - 100.0,
            ly + 3.5
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
