//! Pixel-center coverage rasterizer.
//!
//! A pixel `(i, j)` is covered by a shape when its center `(i + 0.5, j + 0.5)`
//! lies inside the shape. No blending: covered pixels take the fill colour.

use super::{Rgb, ScanpathImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Unit vertices of a regular pentagon, first vertex pointing up (y grows down).
pub const PENTAGON: [Point; 5] = [
    Point::new(0.0, -1.0),
    Point::new(0.951_056_516_295_153_5, -0.309_016_994_374_947_45),
    Point::new(0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    Point::new(-0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    Point::new(-0.951_056_516_295_153_5, -0.309_016_994_374_947_45),
];

/// Inner/outer radius ratio of a regular five-point star.
pub const STAR_INNER_RATIO: f64 = 0.381_966_011_250_105_1;

/// Unit directions of the star's inner vertices (between outer ones).
const STAR_INNER: [Point; 5] = [
    Point::new(0.587_785_252_292_473_1, -0.809_016_994_374_947_5),
    Point::new(0.951_056_516_295_153_5, 0.309_016_994_374_947_45),
    Point::new(0.0, 1.0),
    Point::new(-0.951_056_516_295_153_5, 0.309_016_994_374_947_45),
    Point::new(-0.587_785_252_292_473_1, -0.809_016_994_374_947_5),
];

/// Pixel index range whose centers can fall in `[lo, hi]`, clipped to `[0, n)`.
fn span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).floor() + 1.0;
    if !(b > a) {
        return 0..0;
    }
    (a as usize).min(n)..(b.min(n as f64) as usize)
}

fn fill_where(img: &mut ScanpathImage, x0: f64, x1: f64, y0: f64, y1: f64, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
    let xs = span(x0, x1, img.w);
    for j in span(y0, y1, img.h) {
        let py = j as f64 + 0.5;
        for i in xs.clone() {
            if inside(i as f64 + 0.5, py) {
                img.set(i, j, color);
            }
        }
    }
}

fn dist_to_segment_sq(px: f64, py: f64, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((px - a.x) * dx + (py - a.y) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.x + t * dx - px, a.y + t * dy - py);
    qx * qx + qy * qy
}

/// Segment swept by a disk of diameter `width`.
pub fn stroke_segment(img: &mut ScanpathImage, a: Point, b: Point, width: f64, color: Rgb) {
    let hw = width / 2.0;
    let hw_sq = hw * hw;
    fill_where(
        img,
        a.x.min(b.x) - hw,
        a.x.max(b.x) + hw,
        a.y.min(b.y) - hw,
        a.y.max(b.y) + hw,
        color,
        |x, y| dist_to_segment_sq(x, y, a, b) <= hw_sq,
    );
}

pub fn fill_disk(img: &mut ScanpathImage, c: Point, r: f64, color: Rgb) {
    let r_sq = r * r;
    fill_where(img, c.x - r, c.x + r, c.y - r, c.y + r, color, |x, y| {
        let (dx, dy) = (x - c.x, y - c.y);
        dx * dx + dy * dy <= r_sq
    });
}

/// Even-odd crossing test.
fn contains_even_odd(poly: &[Point], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > y) != (b.y > y) {
            let x_cross = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn fill_polygon(img: &mut ScanpathImage, poly: &[Point], color: Rgb) {
    if poly.len() < 3 {
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    fill_where(img, x0, x1, y0, y1, color, |x, y| contains_even_odd(poly, x, y));
}

pub fn pentagon(c: Point, r: f64) -> Vec<Point> {
    PENTAGON.iter().map(|u| Point::new(c.x + r * u.x, c.y + r * u.y)).collect()
}

pub fn star(c: Point, r: f64) -> Vec<Point> {
    let ri = r * STAR_INNER_RATIO;
    PENTAGON
        .iter()
        .zip(&STAR_INNER)
        .flat_map(|(o, i)| {
            [
                Point::new(c.x + r * o.x, c.y + r * o.y),
                Point::new(c.x + ri * i.x, c.y + ri * i.y),
            ]
        })
        .collect()
}

/// Axis-aligned '+' whose bars span `2 * arm` and are `thickness` wide.
pub fn fill_cross(img: &mut ScanpathImage, c: Point, arm: f64, thickness: f64, color: Rgb) {
    let ht = thickness / 2.0;
    fill_where(img, c.x - arm, c.x + arm, c.y - arm, c.y + arm, color, |x, y| {
        let (dx, dy) = ((x - c.x).abs(), (y - c.y).abs());
        (dx <= arm && dy <= ht) || (dy <= arm && dx <= ht)
    });
}
