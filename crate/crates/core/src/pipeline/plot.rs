use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::data::Prepared;
use super::evaluate::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{to_target_frame, SemanticClass, Vec2};
use crate::model::ModelConfig;

/// Attention weights of one episode in a form that can be written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub episode: usize,
    /// `(M, N)`; each head lists `M·N` weights row-major from the far-ahead,
    /// left-most cell.
    pub grid: (usize, usize),
    pub blocks: Vec<AttentionBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub name: String,
    pub heads: Vec<Vec<f64>>,
}

pub fn attention_export(model: &ModelConfig, pred: &Prediction, episode: usize) -> AttentionExport {
    AttentionExport {
        episode,
        grid: model.grid,
        blocks: pred
            .attention
            .iter()
            .map(|(name, heads)| AttentionBlock {
                name: name.clone(),
                heads: heads.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    /// `(block, head)` whose weights are drawn as a heatmap.
    pub attention: Option<(usize, usize)>,
    pub pixels_per_meter: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            attention: Some((0, 0)),
            pixels_per_meter: 10.0,
        }
    }
}

struct Canvas {
    lat: f64,
    ahead: f64,
    scale: f64,
}

impl Canvas {
    fn xy(&self, p: Vec2) -> (f64, f64) {
        ((p.x + self.lat) * self.scale, (self.ahead - p.y) * self.scale)
    }

    fn points(&self, pts: &[Vec2]) -> String {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.xy(*p);
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{x:.2},{y:.2}");
        }
        s
    }

    fn path(&self, pts: &[Vec2]) -> String {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = self.xy(*p);
            let _ = write!(s, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
        }
        s
    }
}

fn fill_of(class: SemanticClass) -> &'static str {
    match class {
        SemanticClass::Drivable => "#d9d9d9",
        SemanticClass::LaneDivider => "#ffffff",
        SemanticClass::Crosswalk => "#b3c6e6",
        SemanticClass::Sidewalk => "#c9e2c0",
    }
}

/// Map, past track, ground truth, one polyline per mode labelled with its
/// probability and, optionally, one attention head as translucent cells
/// whose opacity is the weight divided by the head's largest weight.
pub fn render_svg(model: &ModelConfig, item: &Prepared, pred: &Prediction, opts: &PlotOptions) -> Result<String> {
    let space = model.raster.space;
    let c = Canvas {
        lat: space.lateral_extent,
        ahead: space.ahead_extent,
        scale: opts.pixels_per_meter,
    };
    let (w, h) = (space.lateral_span() * c.scale, space.longitudinal_span() * c.scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect class="background" x="0" y="0" width="{w}" height="{h}" fill="#f7f7f2"/>"##);

    let ep = &item.episode;
    s.push_str("<g class=\"map\">\n");
    for class in [SemanticClass::Drivable, SemanticClass::Sidewalk, SemanticClass::Crosswalk, SemanticClass::LaneDivider] {
        for el in ep.scene.elements.iter().filter(|e| e.class == class) {
            let pts: Vec<Vec2> = el.points.iter().map(|p| to_target_frame(*p, &ep.target_pose)).collect();
            if class.is_polyline() {
                let _ = writeln!(
                    s,
                    r#"<path class="map-{}" d="{}" fill="none" stroke="{}" stroke-dasharray="4 4"/>"#,
                    class.name(),
                    c.path(&pts),
                    fill_of(class)
                );
            } else {
                let _ = writeln!(
                    s,
                    r#"<polygon class="map-{}" points="{}" fill="{}"/>"#,
                    class.name(),
                    c.points(&pts),
                    fill_of(class)
                );
            }
        }
    }
    s.push_str("</g>\n");

    if let Some((block, head)) = opts.attention {
        let (name, heads) = pred
            .attention
            .get(block)
            .ok_or_else(|| Error::config("attention", format!("no attention block {block}")))?;
        let alpha = heads
            .get(head)
            .ok_or_else(|| Error::config("attention", format!("no head {head}")))?;
        let max = alpha.iter().cloned().fold(0.0, f64::max);
        let (m_cells, n_cells) = model.grid;
        let cw = space.lateral_span() / n_cells as f64 * c.scale;
        let ch = space.longitudinal_span() / m_cells as f64 * c.scale;
        let _ = writeln!(s, r#"<g class="attention" data-block="{name}" data-head="{head}">"#);
        for m in 0..m_cells {
            for n in 0..n_cells {
                let a = alpha[m * n_cells + n];
                let opacity = if max > 0.0 { a / max } else { 0.0 };
                let _ = writeln!(
                    s,
                    r##"<rect class="attn-cell" data-m="{m}" data-n="{n}" data-alpha="{a}" x="{:.3}" y="{:.3}" width="{cw:.3}" height="{ch:.3}" fill="#e4572e" opacity="{opacity}"/>"##,
                    n as f64 * cw,
                    m as f64 * ch
                );
            }
        }
        s.push_str("</g>\n");
    }

    s.push_str("<g class=\"agents\">\n");
    for nb in &ep.neighbor_histories {
        let pts: Vec<Vec2> = nb.states.iter().map(|st| st.position()).collect();
        let _ = writeln!(s, r##"<path class="neighbor" d="{}" fill="none" stroke="#7a7a7a" stroke-width="2"/>"##, c.path(&pts));
    }
    let past: Vec<Vec2> = ep.target_history.states.iter().map(|st| st.position()).collect();
    let _ = writeln!(s, r##"<path class="history" d="{}" fill="none" stroke="#1f3b73" stroke-width="3"/>"##, c.path(&past));
    let mut gt = vec![Vec2::new(0.0, 0.0)];
    gt.extend(ep.ground_truth_future.iter().copied());
    let _ = writeln!(
        s,
        r##"<path class="ground-truth" d="{}" fill="none" stroke="#2a9d3f" stroke-width="3" stroke-dasharray="6 3"/>"##,
        c.path(&gt)
    );
    s.push_str("</g>\n<g class=\"modes\">\n");
    let max_p = pred.set.probs.iter().cloned().fold(0.0, f64::max).max(1e-12);
    for (l, p) in pred.set.probs.iter().enumerate() {
        let mut pts = vec![Vec2::new(0.0, 0.0)];
        pts.extend(pred.set.mean_trajectory(l));
        let width = 1.0 + 3.0 * p / max_p;
        let _ = writeln!(
            s,
            r##"<polyline class="mode" data-mode="{l}" data-prob="{p}" points="{}" fill="none" stroke="#d62828" stroke-width="{width:.2}" stroke-opacity="{:.3}"/>"##,
            c.points(&pts),
            0.3 + 0.7 * p / max_p
        );
        let (x, y) = c.xy(*pts.last().unwrap());
        let _ = writeln!(s, r#"<text class="mode-label" x="{x:.2}" y="{y:.2}" font-size="10">P={p:.3}</text>"#);
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
