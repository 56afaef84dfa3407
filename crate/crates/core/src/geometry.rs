//! Landmark coordinates and the three-line hip geometry.

use std::fmt;
use std::ops::Sub;

use crate::error::{Error, Result};

/// Number of landmarks; pairs (1,2), (3,4), (5,6) each define one line.
pub const NUM_LANDMARKS: usize = 6;

/// A point in pixel coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn add_scaled(self, dir: Point, s: f64) -> Point {
        Point::new(self.x + s * dir.x, self.y + s * dir.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Sub for Point {
    type Output = Point;

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

/// Six landmarks in pixel coordinates at input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: [Point; NUM_LANDMARKS],
}

impl LandmarkSet {
    pub fn new(points: [Point; NUM_LANDMARKS]) -> Self {
        Self { points }
    }

    /// Builds from `[x1, y1, ..., x6, y6]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() != 2 * NUM_LANDMARKS {
            return Err(Error::Contract(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                coords.len()
            )));
        }
        let mut points = [Point::default(); NUM_LANDMARKS];
        for (p, c) in points.iter_mut().zip(coords.chunks(2)) {
            *p = Point::new(c[0], c[1]);
        }
        Ok(Self { points })
    }

    pub fn to_flat(&self) -> [f64; 2 * NUM_LANDMARKS] {
        let mut out = [0.0; 2 * NUM_LANDMARKS];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    /// The two endpoints of line `line` (0 = baseline, 1 = alpha line, 2 = beta line).
    pub fn line(&self, line: usize) -> (Point, Point) {
        (self.points[2 * line], self.points[2 * line + 1])
    }

    /// Mirrors about the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: usize) -> Self {
        let w = (width - 1) as f64;
        let mut out = *self;
        out.points.iter_mut().for_each(|p| p.x = w - p.x);
        out
    }

    /// Multiplies every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        out.points.iter_mut().for_each(|p| {
            p.x *= s;
            p.y *= s;
        });
        out
    }

    /// True when every point is at least `margin` px inside a `w x h` image.
    pub fn within(&self, w: usize, h: usize, margin: f64) -> bool {
        self.points.iter().all(|p| {
            p.x >= margin && p.y >= margin && p.x <= w as f64 - 1.0 - margin && p.y <= h as f64 - 1.0 - margin
        })
    }
}
