//! Target-centric frames, the interaction space, bird's-eye-view map
//! rasterization and the exact distance-to-drivable field.
//!
//! Conventions used throughout the crate:
//!
//! * A heading is measured from the global `+y` axis towards `+x`, so a
//!   heading of `0` faces `+y` and `π/2` faces `+x`. The forward unit vector
//!   is `(sin h, cos h)`.
//! * The target frame has its origin at the target position, `y` along the
//!   target's direction of motion and `x` pointing to its right.
//! * Raster row 0 is the far-ahead edge of the interaction space and column 0
//!   its left edge. A pixel owns the points whose nearest pixel center it is,
//!   and a polygon covers a pixel when it contains (or touches) the center.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain 2D point or vector, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dist(self, other: Vec2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(p: [f64; 2]) -> Self {
        Vec2::new(p[0], p[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(p: Vec2) -> Self {
        [p.x, p.y]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Heading of a direction vector under the crate's `+y`-referenced convention.
pub fn heading_of(dir: Vec2) -> f64 {
    dir.x.atan2(dir.y)
}

/// Forward unit vector for a heading.
pub fn heading_dir(heading: f64) -> Vec2 {
    Vec2::new(heading.sin(), heading.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Expresses a global point in the frame of `target`.
pub fn to_target_frame(p: Vec2, target: &Pose2) -> Vec2 {
    let (s, c) = target.heading.sin_cos();
    let dx = p.x - target.x;
    let dy = p.y - target.y;
    Vec2::new(dx * c - dy * s, dx * s + dy * c)
}

/// Inverse of [`to_target_frame`].
pub fn from_target_frame(q: Vec2, target: &Pose2) -> Vec2 {
    let (s, c) = target.heading.sin_cos();
    Vec2::new(target.x + q.x * c + q.y * s, target.y - q.x * s + q.y * c)
}

/// Axis-aligned region around the target, in target-frame meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpace {
    pub lateral_extent: f64,
    pub ahead_extent: f64,
    pub behind_extent: f64,
}

impl Default for InteractionSpace {
    fn default() -> Self {
        Self {
            lateral_extent: 25.0,
            ahead_extent: 40.0,
            behind_extent: 10.0,
        }
    }
}

impl InteractionSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lateral_extent", self.lateral_extent),
            ("ahead_extent", self.ahead_extent),
            ("behind_extent", self.behind_extent),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a positive finite length"));
            }
        }
        Ok(())
    }

    pub fn lateral_span(&self) -> f64 {
        2.0 * self.lateral_extent
    }

    pub fn longitudinal_span(&self) -> f64 {
        self.ahead_extent + self.behind_extent
    }

    /// Closed-region membership test for a target-frame point.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= -self.lateral_extent
            && p.x <= self.lateral_extent
            && p.y >= -self.behind_extent
            && p.y <= self.ahead_extent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticClass {
    Drivable,
    LaneDivider,
    Crosswalk,
    Sidewalk,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 4] = [
        SemanticClass::Drivable,
        SemanticClass::LaneDivider,
        SemanticClass::Crosswalk,
        SemanticClass::Sidewalk,
    ];

    pub fn channel(self) -> usize {
        match self {
            SemanticClass::Drivable => 0,
            SemanticClass::LaneDivider => 1,
            SemanticClass::Crosswalk => 2,
            SemanticClass::Sidewalk => 3,
        }
    }

    /// Lane dividers are polylines; every other class is a closed polygon.
    pub fn is_polyline(self) -> bool {
        matches!(self, SemanticClass::LaneDivider)
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Drivable => "drivable",
            SemanticClass::LaneDivider => "lane_divider",
            SemanticClass::Crosswalk => "crosswalk",
            SemanticClass::Sidewalk => "sidewalk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: SemanticClass,
    pub points: Vec<Vec2>,
    #[serde(default)]
    pub lane_direction: Option<f64>,
}

impl MapElement {
    pub fn polygon(class: SemanticClass, mut points: Vec<Vec2>) -> Self {
        if points.first() != points.last() {
            let first = points[0];
            points.push(first);
        }
        Self {
            class,
            points,
            lane_direction: None,
        }
    }

    pub fn polyline(class: SemanticClass, points: Vec<Vec2>, lane_direction: Option<f64>) -> Self {
        Self {
            class,
            points,
            lane_direction,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.class.is_polyline() {
            if self.points.len() < 2 {
                return Err("polyline needs at least 2 points".into());
            }
            return Ok(());
        }
        if self.points.len() < 4 || self.points.first() != self.points.last() {
            return Err("polygon is not closed".into());
        }
        let mut distinct: Vec<Vec2> = Vec::new();
        for p in &self.points[..self.points.len() - 1] {
            if !distinct.contains(p) {
                distinct.push(*p);
            }
        }
        if distinct.len() < 3 {
            return Err("polygon has fewer than 3 distinct vertices".into());
        }
        Ok(())
    }
}

/// Semantic map in the global frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VectorScene {
    pub elements: Vec<MapElement>,
}

impl VectorScene {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.elements.iter().enumerate() {
            e.validate()
                .map_err(|r| Error::config(format!("elements[{i}]"), r))?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: VectorScene = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn translated(&self, offset: Vec2) -> VectorScene {
        VectorScene {
            elements: self
                .elements
                .iter()
                .map(|e| MapElement {
                    class: e.class,
                    points: e.points.iter().map(|p| p.add(offset)).collect(),
                    lane_direction: e.lane_direction,
                })
                .collect(),
        }
    }
}

/// Pixel grid covering an interaction space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub space: InteractionSpace,
}

impl GridSpec {
    pub fn new(space: InteractionSpace, resolution: f64) -> Result<Self> {
        space.validate()?;
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::config("resolution", "must be positive"));
        }
        let w = space.lateral_span() / resolution;
        let h = space.longitudinal_span() / resolution;
        let (wi, hi) = (w.round(), h.round());
        if (w - wi).abs() > 1e-6 || (h - hi).abs() > 1e-6 || wi < 1.0 || hi < 1.0 {
            return Err(Error::config(
                "resolution",
                format!("{resolution} m/px does not tile the interaction space"),
            ));
        }
        Ok(Self {
            width: wi as usize,
            height: hi as usize,
            resolution,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target-frame coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            -self.space.lateral_extent + (col as f64 + 0.5) * self.resolution,
            self.space.ahead_extent - (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous pixel coordinates `(row, col)` with pixel centers at integers.
    pub fn continuous_index(&self, p: Vec2) -> (f64, f64) {
        (
            (self.space.ahead_extent - p.y) / self.resolution - 0.5,
            (p.x + self.space.lateral_extent) / self.resolution - 0.5,
        )
    }

    /// The pixel containing `p`, or `None` outside the grid.
    pub fn pixel_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let (r, c) = self.continuous_index(p);
        let (r, c) = ((r + 0.5).floor(), (c + 0.5).floor());
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Like [`GridSpec::pixel_of`] but clamps outside points to the border.
    pub fn clamped_pixel_of(&self, p: Vec2) -> (usize, usize) {
        let (r, c) = self.continuous_index(p);
        let r = (r + 0.5).floor().clamp(0.0, (self.height - 1) as f64);
        let c = (c + 0.5).floor().clamp(0.0, (self.width - 1) as f64);
        (r as usize, c as usize)
    }
}

/// Four binary semantic planes in the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    pub grid: GridSpec,
    /// One row-major plane per [`SemanticClass`], indexed by `channel()`.
    pub planes: [Vec<u8>; 4],
}

impl RasterMap {
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            planes: [vec![0; n], vec![0; n], vec![0; n], vec![0; n]],
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn resolution(&self) -> f64 {
        self.grid.resolution
    }

    pub fn plane(&self, class: SemanticClass) -> &[u8] {
        &self.planes[class.channel()]
    }

    pub fn get(&self, class: SemanticClass, row: usize, col: usize) -> bool {
        self.planes[class.channel()][row * self.grid.width + col] != 0
    }

    pub fn set(&mut self, class: SemanticClass, row: usize, col: usize) {
        self.planes[class.channel()][row * self.grid.width + col] = 1;
    }

    /// Nearest-pixel drivable lookup; points outside the raster use the
    /// closest border pixel.
    pub fn is_drivable_at(&self, p: Vec2) -> bool {
        let (r, c) = self.grid.clamped_pixel_of(p);
        self.get(SemanticClass::Drivable, r, c)
    }

    /// Plain-text PGM (P2) dump of one channel.
    pub fn to_pgm(&self, class: SemanticClass) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "P2");
        let _ = writeln!(out, "# {}", class.name());
        let _ = writeln!(out, "{} {}", self.grid.width, self.grid.height);
        let _ = writeln!(out, "255");
        let plane = self.plane(class);
        for row in plane.chunks(self.grid.width) {
            let line: Vec<&str> = row
                .iter()
                .map(|&v| if v != 0 { "255" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterWarning {
    pub element: usize,
    pub reason: String,
}

const EDGE_EPS: f64 = 1e-9;

fn polygon_area(poly: &[Vec2]) -> f64 {
    let mut a = 0.0;
    for w in poly.windows(2) {
        a += w[0].x * w[1].y - w[1].x * w[0].y;
    }
    0.5 * a
}

fn on_segment(p: Vec2, a: Vec2, b: Vec2) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let len = a.dist(b);
    if cross.abs() > EDGE_EPS * len.max(1.0) {
        return false;
    }
    p.x >= a.x.min(b.x) - EDGE_EPS
        && p.x <= a.x.max(b.x) + EDGE_EPS
        && p.y >= a.y.min(b.y) - EDGE_EPS
        && p.y <= a.y.max(b.y) + EDGE_EPS
}

/// Even-odd containment over a closed ring; points on an edge are inside.
pub fn point_in_polygon(p: Vec2, ring: &[Vec2]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn fill_polygon(raster: &mut RasterMap, class: SemanticClass, ring: &[Vec2]) {
    let g = raster.grid;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in ring {
        let (r, c) = g.continuous_index(*p);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let r0 = (rmin.floor() - 1.0).max(0.0) as usize;
    let c0 = (cmin.floor() - 1.0).max(0.0) as usize;
    let r1 = (rmax.ceil() + 1.0).min(g.height as f64 - 1.0);
    let c1 = (cmax.ceil() + 1.0).min(g.width as f64 - 1.0);
    if r1 < 0.0 || c1 < 0.0 {
        return;
    }
    for row in r0..=r1 as usize {
        for col in c0..=c1 as usize {
            if point_in_polygon(g.pixel_center(row, col), ring) {
                raster.set(class, row, col);
            }
        }
    }
}

fn draw_polyline(raster: &mut RasterMap, class: SemanticClass, line: &[Vec2]) {
    let g = raster.grid;
    let step = g.resolution / 4.0;
    for w in line.windows(2) {
        let len = w[0].dist(w[1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let p = w[0].add(w[1].sub(w[0]).scale(t));
            if let Some((r, c)) = g.pixel_of(p) {
                raster.set(class, r, c);
            }
        }
    }
}

/// Renders `scene` around `target` into binary semantic planes.
///
/// Degenerate or malformed elements are skipped and reported as warnings.
pub fn rasterize(
    scene: &VectorScene,
    target: &Pose2,
    space: &InteractionSpace,
    resolution: f64,
) -> Result<(RasterMap, Vec<RasterWarning>)> {
    let grid = GridSpec::new(*space, resolution)?;
    let mut raster = RasterMap::empty(grid);
    let mut warnings = Vec::new();
    for (i, element) in scene.elements.iter().enumerate() {
        if let Err(reason) = element.validate() {
            warnings.push(RasterWarning { element: i, reason });
            continue;
        }
        let local: Vec<Vec2> = element
            .points
            .iter()
            .map(|p| to_target_frame(*p, target))
            .collect();
        if element.class.is_polyline() {
            draw_polyline(&mut raster, element.class, &local);
            continue;
        }
        if polygon_area(&local).abs() < 1e-12 {
            warnings.push(RasterWarning {
                element: i,
                reason: "degenerate polygon (zero area)".into(),
            });
            continue;
        }
        fill_polygon(&mut raster, element.class, &local);
    }
    for w in &warnings {
        log::warn!("rasterize: skipped element {}: {}", w.element, w.reason);
    }
    Ok((raster, warnings))
}

/// Euclidean distance (meters) from each pixel center to the nearest
/// drivable pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }
}

/// Exact squared Euclidean distance transform in pixel units.
///
/// Two separable passes: a per-column scan for the vertical distance to the
/// nearest feature, then a per-row lower envelope of parabolas. All arithmetic
/// is integral so the result is exact.
pub fn squared_edt(feature: &[bool], width: usize, height: usize) -> Vec<i64> {
    let inf = (width + height) as i64;
    let mut g = vec![0i64; width * height];
    for x in 0..width {
        g[x] = if feature[x] { 0 } else { inf };
        for y in 1..height {
            let i = y * width + x;
            g[i] = if feature[i] { 0 } else { 1 + g[i - width] };
        }
        for y in (0..height.saturating_sub(1)).rev() {
            let i = y * width + x;
            if g[i + width] < g[i] {
                g[i] = 1 + g[i + width];
            }
        }
    }

    let mut out = vec![0i64; width * height];
    let mut s = vec![0i64; width];
    let mut t = vec![0i64; width];
    for y in 0..height {
        let row = &g[y * width..(y + 1) * width];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            let gi = row[i as usize];
            let gu = row[u as usize];
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q: i64 = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..width as i64 {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w < width as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w;
                }
            }
        }
        for u in (0..width as i64).rev() {
            out[y * width + u as usize] = f(u, s[q as usize]);
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Exact distance to the drivable area for every pixel of `raster`.
pub fn distance_field(raster: &RasterMap) -> Result<DistanceField> {
    let feature: Vec<bool> = raster
        .plane(SemanticClass::Drivable)
        .iter()
        .map(|&v| v != 0)
        .collect();
    if !feature.iter().any(|&f| f) {
        return Err(Error::EmptyDrivableArea);
    }
    let g = raster.grid;
    let sq = squared_edt(&feature, g.width, g.height);
    let values = sq
        .into_iter()
        .map(|d2| (d2 as f64).sqrt() * g.resolution)
        .collect();
    Ok(DistanceField { grid: g, values })
}

/// Bilinear sample of the field at a target-frame point, with the analytic
/// spatial gradient `[d/dx, d/dy]`.
///
/// Points outside the pixel-center lattice clamp to the border; the gradient
/// component along a clamped axis is zero.
pub fn sample_distance(field: &DistanceField, p: Vec2) -> (f64, [f64; 2]) {
    let g = field.grid;
    let (r, c) = g.continuous_index(p);
    let (r_max, c_max) = ((g.height - 1) as f64, (g.width - 1) as f64);
    let r_clamped = r < 0.0 || r > r_max;
    let c_clamped = c < 0.0 || c > c_max;
    let r = r.clamp(0.0, r_max);
    let c = c.clamp(0.0, c_max);
    let r0 = (r.floor() as usize).min(g.height.saturating_sub(2));
    let c0 = (c.floor() as usize).min(g.width.saturating_sub(2));
    let r1 = (r0 + 1).min(g.height - 1);
    let c1 = (c0 + 1).min(g.width - 1);
    let tr = r - r0 as f64;
    let tc = c - c0 as f64;
    let v00 = field.at(r0, c0);
    let v01 = field.at(r0, c1);
    let v10 = field.at(r1, c0);
    let v11 = field.at(r1, c1);
    let top = v00 + (v01 - v00) * tc;
    let bottom = v10 + (v11 - v10) * tc;
    let value = top + (bottom - top) * tr;

    let d_dc = if c_clamped || c1 == c0 {
        0.0
    } else {
        (v01 - v00) * (1.0 - tr) + (v11 - v10) * tr
    };
    let d_dr = if r_clamped || r1 == r0 {
        0.0
    } else {
        bottom - top
    };
    // col grows with x, row shrinks with y
    let grad = [d_dc / g.resolution, -d_dr / g.resolution];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(cx: f64, cy: f64, half: f64) -> Vec<Vec2> {
        vec![
            Vec2::new(cx - half, cy - half),
            Vec2::new(cx + half, cy - half),
            Vec2::new(cx + half, cy + half),
            Vec2::new(cx - half, cy + half),
        ]
    }

    #[test]
    fn target_maps_to_origin() {
        let t = Pose2::new(3.5, -7.25, 1.1);
        let q = to_target_frame(t.position(), &t);
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12);
    }

    #[test]
    fn identity_orientation() {
        let t = Pose2::new(0.0, 0.0, 0.0);
        assert_eq!(to_target_frame(Vec2::new(0.0, 5.0), &t), Vec2::new(0.0, 5.0));
    }

    #[test]
    fn quarter_turn_matches_hand_rotation() {
        // heading π/2 faces global +x; forward = (1, 0), right = (0, -1).
        // p - t = (0, 1) → x = d·right = -1, y = d·forward = 0.
        let t = Pose2::new(2.0, 3.0, PI / 2.0);
        let q = to_target_frame(Vec2::new(2.0, 4.0), &t);
        assert!((q.x + 1.0).abs() < 1e-12, "{q:?}");
        assert!(q.y.abs() < 1e-12, "{q:?}");
    }

    #[test]
    fn one_meter_ahead_is_unit_y() {
        let t = Pose2::new(-4.0, 9.0, -2.3);
        let ahead = t.position().add(heading_dir(t.heading));
        let q = to_target_frame(ahead, &t);
        assert!(q.x.abs() < 1e-12 && (q.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interaction_space_is_closed() {
        let s = InteractionSpace::default();
        assert!(s.contains(Vec2::new(0.0, 40.0)));
        assert!(s.contains(Vec2::new(25.0, -10.0)));
        assert!(!s.contains(Vec2::new(26.0, 0.0)));
        assert!(!s.contains(Vec2::new(0.0, 40.0001)));
    }

    #[test]
    fn scene_json_shape() {
        let json = r#"{"elements":[{"class":"drivable","points":[[0,0],[1,0],[1,1],[0,0]],"lane_direction":null}]}"#;
        let scene = VectorScene::from_json(json).unwrap();
        assert_eq!(scene.elements[0].class, SemanticClass::Drivable);
        let back = scene.to_json().unwrap();
        assert!(back.contains(r#""class":"drivable""#));
        assert!(back.contains(r#""points":[[0.0,0.0],[1.0,0.0]"#));
    }

    #[test]
    fn unclosed_polygon_rejected() {
        let json = r#"{"elements":[{"class":"drivable","points":[[0,0],[1,0],[1,1]]}]}"#;
        assert!(VectorScene::from_json(json).is_err());
    }

    #[test]
    fn full_cover_is_all_ones() {
        let scene = VectorScene {
            elements: vec![MapElement::polygon(
                SemanticClass::Drivable,
                square(0.0, 15.0, 60.0),
            )],
        };
        let (r, w) = rasterize(&scene, &Pose2::new(0.0, 0.0, 0.0), &InteractionSpace::default(), 0.5).unwrap();
        assert!(w.is_empty());
        assert_eq!((r.width(), r.height()), (100, 100));
        assert!(r.plane(SemanticClass::Drivable).iter().all(|&v| v == 1));
        assert!(r.plane(SemanticClass::Sidewalk).iter().all(|&v| v == 0));
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let (r, _) = rasterize(
            &VectorScene::default(),
            &Pose2::new(1.0, 2.0, 0.3),
            &InteractionSpace::default(),
            0.5,
        )
        .unwrap();
        assert!(r.planes.iter().all(|p| p.iter().all(|&v| v == 0)));
    }

    #[test]
    fn degenerate_polygon_is_skipped_with_warning() {
        let scene = VectorScene {
            elements: vec![MapElement::polygon(
                SemanticClass::Crosswalk,
                vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0)],
            )],
        };
        let (r, w) = rasterize(&scene, &Pose2::new(0.0, 0.0, 0.0), &InteractionSpace::default(), 0.5).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].element, 0);
        assert!(r.plane(SemanticClass::Crosswalk).iter().all(|&v| v == 0));
    }

    #[test]
    fn centered_square_block() {
        let space = InteractionSpace {
            lateral_extent: 25.0,
            ahead_extent: 25.0,
            behind_extent: 25.0,
        };
        let scene = VectorScene {
            elements: vec![MapElement::polygon(SemanticClass::Drivable, square(0.0, 0.0, 5.0))],
        };
        let (r, _) = rasterize(&scene, &Pose2::new(0.0, 0.0, 0.0), &space, 0.5).unwrap();
        // x ∈ [-5, 5] → cols 40..60, y ∈ [-5, 5] → rows 40..60
        let mut count = 0;
        for row in 0..100 {
            for col in 0..100 {
                let expect = (40..60).contains(&row) && (40..60).contains(&col);
                assert_eq!(r.get(SemanticClass::Drivable, row, col), expect, "({row},{col})");
                count += expect as usize;
            }
        }
        assert_eq!(count, 400);
    }

    #[test]
    fn polyline_is_one_pixel_wide() {
        let scene = VectorScene {
            elements: vec![MapElement::polyline(
                SemanticClass::LaneDivider,
                vec![Vec2::new(0.25, -10.0), Vec2::new(0.25, 40.0)],
                Some(0.0),
            )],
        };
        let (r, _) = rasterize(&scene, &Pose2::new(0.0, 0.0, 0.0), &InteractionSpace::default(), 0.5).unwrap();
        let plane = r.plane(SemanticClass::LaneDivider);
        assert_eq!(plane.iter().filter(|&&v| v == 1).count(), 100);
        for row in 0..100 {
            assert!(r.get(SemanticClass::LaneDivider, row, 50));
        }
    }

    #[test]
    fn pgm_dump_header() {
        let grid = GridSpec::new(InteractionSpace::default(), 5.0).unwrap();
        let mut r = RasterMap::empty(grid);
        r.set(SemanticClass::Drivable, 0, 0);
        let pgm = r.to_pgm(SemanticClass::Drivable);
        let lines: Vec<&str> = pgm.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[2], "10 10");
        assert!(lines[4].starts_with("255 0"));
        assert_eq!(lines.len(), 4 + 10);
    }

    fn raster_from(bits: &[u8], width: usize, height: usize, res: f64) -> RasterMap {
        let space = InteractionSpace {
            lateral_extent: width as f64 * res / 2.0,
            ahead_extent: height as f64 * res,
            behind_extent: 0.0001,
        };
        // build a grid directly so odd sizes are allowed
        let grid = GridSpec {
            width,
            height,
            resolution: res,
            space: InteractionSpace {
                behind_extent: 0.0,
                ..space
            },
        };
        let mut r = RasterMap::empty(grid);
        r.planes[0] = bits.to_vec();
        r
    }

    #[test]
    fn all_drivable_field_is_zero() {
        let r = raster_from(&[1; 30], 6, 5, 0.5);
        let f = distance_field(&r).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_pixel_corner_distance() {
        let mut bits = [0u8; 25];
        bits[12] = 1;
        let f = distance_field(&raster_from(&bits, 5, 5, 1.0)).unwrap();
        assert_eq!(f.at(0, 0), 8f64.sqrt());
        assert_eq!(f.at(4, 4), 2.0 * 2f64.sqrt());
        assert_eq!(f.at(2, 2), 0.0);
        assert_eq!(f.at(0, 2), 2.0);
    }

    #[test]
    fn empty_drivable_is_error() {
        let r = raster_from(&[0; 16], 4, 4, 1.0);
        assert!(matches!(distance_field(&r), Err(Error::EmptyDrivableArea)));
    }

    #[test]
    fn sample_at_drivable_center_and_midpoint() {
        let f = DistanceField {
            grid: GridSpec {
                width: 2,
                height: 1,
                resolution: 1.0,
                space: InteractionSpace {
                    lateral_extent: 1.0,
                    ahead_extent: 1.0,
                    behind_extent: 0.0,
                },
            },
            values: vec![0.0, 1.0],
        };
        let c0 = f.grid.pixel_center(0, 0);
        let c1 = f.grid.pixel_center(0, 1);
        assert_eq!(sample_distance(&f, c0).0, 0.0);
        let mid = c0.add(c1).scale(0.5);
        let (v, g) = sample_distance(&f, mid);
        assert!((v - 0.5).abs() < 1e-15);
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sample_clamps_outside() {
        let mut bits = vec![0u8; 100];
        bits[55] = 1;
        let f = distance_field(&raster_from(&bits, 10, 10, 1.0)).unwrap();
        let (v, g) = sample_distance(&f, Vec2::new(-1000.0, 1000.0));
        assert_eq!(v, f.at(0, 0));
        assert_eq!(g, [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn frame_round_trip(x in -1e3..1e3f64, y in -1e3..1e3f64, tx in -1e3..1e3f64,
                            ty in -1e3..1e3f64, h in -3.2..3.2f64) {
            let t = Pose2::new(tx, ty, h);
            let p = Vec2::new(x, y);
            let back = from_target_frame(to_target_frame(p, &t), &t);
            prop_assert!(back.dist(p) < 1e-9);
        }

        #[test]
        fn heading_stays_normalized(h in -100.0..100.0f64) {
            let p = Pose2::new(0.0, 0.0, h);
            prop_assert!(p.heading > -PI && p.heading <= PI);
        }

        #[test]
        fn drivable_centers_sample_zero(bits in proptest::collection::vec(0u8..2, 64), seed_px in 0usize..64) {
            let mut bits = bits;
            bits[seed_px] = 1;
            let r = raster_from(&bits, 8, 8, 0.5);
            let f = distance_field(&r).unwrap();
            for row in 0..8 {
                for col in 0..8 {
                    if r.get(SemanticClass::Drivable, row, col) {
                        let (v, _) = sample_distance(&f, r.grid.pixel_center(row, col));
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }

        #[test]
        fn field_is_lipschitz(bits in proptest::collection::vec(0u8..2, 144), seed_px in 0usize..144) {
            let mut bits = bits;
            bits[seed_px] = 1;
            let f = distance_field(&raster_from(&bits, 12, 12, 0.5)).unwrap();
            let bound = 0.5 * 2f64.sqrt() + 1e-12;
            for row in 0..11 {
                for col in 0..11 {
                    let v = f.at(row, col);
                    prop_assert!((v - f.at(row + 1, col)).abs() <= bound);
                    prop_assert!((v - f.at(row, col + 1)).abs() <= bound);
                    prop_assert!((v - f.at(row + 1, col + 1)).abs() <= bound);
                }
            }
        }

        #[test]
        fn rasterize_translation_equivariant(ox in -300i32..300, oy in -300i32..300,
                                             h in -3.0..3.0f64, cx in -10.0..10.0f64, cy in -5.0..30.0f64) {
            let scene = VectorScene { elements: vec![
                MapElement::polygon(SemanticClass::Drivable, vec![
                    Vec2::new(cx - 7.3, cy - 4.1), Vec2::new(cx + 6.2, cy - 5.7),
                    Vec2::new(cx + 8.9, cy + 9.4), Vec2::new(cx - 3.3, cy + 6.6)]),
                MapElement::polyline(SemanticClass::LaneDivider,
                    vec![Vec2::new(cx, cy - 20.0), Vec2::new(cx + 3.0, cy + 20.0)], None),
            ]};
            let target = Pose2::new(1.25, -0.75, h);
            let off = Vec2::new(ox as f64 * 0.25, oy as f64 * 0.25);
            let moved_target = Pose2::new(target.x + off.x, target.y + off.y, h);
            let space = InteractionSpace::default();
            let (a, _) = rasterize(&scene, &target, &space, 0.5).unwrap();
            let (b, _) = rasterize(&scene.translated(off), &moved_target, &space, 0.5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sample_gradient_matches_finite_differences(x in -24.0..24.0f64, y in -9.0..39.0f64,
                                                      bits in proptest::collection::vec(0u8..2, 100)) {
            let mut bits = bits;
            bits[0] = 1;
            let space = InteractionSpace::default();
            let grid = GridSpec::new(space, 5.0).unwrap();
            let mut r = RasterMap::empty(grid);
            r.planes[0] = bits;
            let f = distance_field(&r).unwrap();
            let (row, col) = grid.continuous_index(Vec2::new(x, y));
            // stay away from the creases at pixel-center lines
            let near = |v: f64| (v - v.round()).abs() < 1e-3;
            prop_assume!(!near(row) && !near(col));
            let (_, g) = sample_distance(&f, Vec2::new(x, y));
            let h = 1e-6;
            let fx = (sample_distance(&f, Vec2::new(x + h, y)).0 - sample_distance(&f, Vec2::new(x - h, y)).0) / (2.0 * h);
            let fy = (sample_distance(&f, Vec2::new(x, y + h)).0 - sample_distance(&f, Vec2::new(x, y - h)).0) / (2.0 * h);
            for (a, n) in [(g[0], fx), (g[1], fy)] {
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
                prop_assert!(rel < 1e-6, "analytic {} numeric {}", a, n);
            }
        }
    }
}
