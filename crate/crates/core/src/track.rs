//! Race track geometry: a centerline polyline with constant half-width.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Building block of a track drawn by a turtle that starts at the origin
/// heading along +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackPiece {
    Straight(f64),
    /// Positive angle turns left.
    Arc { radius: f64, angle: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    centerline: Vec<[f64; 2]>,
    half_width: f64,
    closed: bool,
    cumulative: Vec<f64>,
}

/// Position of a point relative to the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest centerline point.
    pub s: f64,
    /// Signed distance, positive to the left of the driving direction.
    pub lateral: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    half_width: f64,
    closed: bool,
    points: Vec<[f64; 2]>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

impl Track {
    pub fn new(centerline: Vec<[f64; 2]>, half_width: f64, closed: bool) -> Result<Self> {
        if centerline.len() < 2 {
            return Err(Error::Domain("a track needs at least two centerline points".into()));
        }
        if !(half_width > 0.0) {
            return Err(Error::Domain(format!("half-width must be positive, got {half_width}")));
        }
        if centerline.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("centerline contains non-finite coordinates".into()));
        }
        let mut track = Self {
            centerline,
            half_width,
            closed,
            cumulative: Vec::new(),
        };
        let mut cumulative = vec![0.0];
        for i in 0..track.segment_count() {
            let (a, b) = track.segment(i);
            let len = norm(sub(b, a));
            if len == 0.0 {
                return Err(Error::Domain(format!("centerline points {i} and {} coincide", i + 1)));
            }
            cumulative.push(cumulative[i] + len);
        }
        track.cumulative = cumulative;
        Ok(track)
    }

    /// Samples a turtle path with roughly `spacing` between points. For a
    /// closed track the path must return to the origin; the duplicate end
    /// point is dropped.
    pub fn from_pieces(pieces: &[TrackPiece], spacing: f64, half_width: f64, closed: bool) -> Result<Self> {
        let mut points = vec![[0.0, 0.0]];
        let (mut p, mut heading) = ([0.0f64, 0.0f64], 0.0f64);
        for piece in pieces {
            match *piece {
                TrackPiece::Straight(len) => {
                    let n = (len / spacing).ceil().max(1.0) as usize;
                    let (s, c) = heading.sin_cos();
                    let start = p;
                    for i in 1..=n {
                        let t = len * i as f64 / n as f64;
                        p = [start[0] + t * c, start[1] + t * s];
                        points.push(p);
                    }
                }
                TrackPiece::Arc { radius, angle } => {
                    let n = (angle.abs() * radius / spacing).ceil().max(1.0) as usize;
                    let side = angle.signum();
                    let center = [p[0] - side * radius * heading.sin(), p[1] + side * radius * heading.cos()];
                    let h0 = heading;
                    for i in 1..=n {
                        let h = h0 + angle * i as f64 / n as f64;
                        p = [center[0] + side * radius * h.sin(), center[1] - side * radius * h.cos()];
                        points.push(p);
                    }
                    heading = h0 + angle;
                }
            }
        }
        if closed {
            let end = points.pop().expect("non-empty");
            if norm(end) > 1e-9 {
                return Err(Error::Domain(format!("closed track ends at {end:?}, not at the origin")));
            }
        }
        Self::new(points, half_width, closed)
    }

    /// Two straights joined by semicircles.
    pub fn oval() -> Self {
        let pieces = [
            TrackPiece::Straight(6.0),
            TrackPiece::Arc { radius: 2.0, angle: PI },
            TrackPiece::Straight(6.0),
            TrackPiece::Arc { radius: 2.0, angle: PI },
        ];
        Self::from_pieces(&pieces, 0.05, 0.5, true).expect("oval closes")
    }

    /// A closed circuit with a chicane, a hairpin and several tight corners.
    pub fn complex() -> Self {
        let r = 1.5;
        // Straight lengths that close the loop.
        let first = 1.4;
        let third = 4.0 - r * 3f64.sqrt();
        let pieces = [
            TrackPiece::Straight(first),
            TrackPiece::Arc { radius: r, angle: PI / 2.0 },
            TrackPiece::Straight(third),
            TrackPiece::Arc { radius: r, angle: -PI / 3.0 },
            TrackPiece::Arc { radius: r, angle: PI / 3.0 },
            TrackPiece::Straight(1.0),
            TrackPiece::Arc { radius: 1.2, angle: PI },
            TrackPiece::Straight(2.0),
            TrackPiece::Arc { radius: r, angle: -PI / 2.0 },
            TrackPiece::Straight(1.5),
            TrackPiece::Arc { radius: r, angle: PI / 2.0 },
            TrackPiece::Arc { radius: r, angle: PI / 2.0 },
            TrackPiece::Straight(1.0),
        ];
        Self::from_pieces(&pieces, 0.05, 0.4, true).expect("complex track closes")
    }

    /// Bundled track by name (`oval` or `complex`).
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "oval" => Some(Self::oval()),
            "complex" => Some(Self::complex()),
            _ => None,
        }
    }

    pub fn centerline(&self) -> &[[f64; 2]] {
        &self.centerline
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("at least one segment")
    }

    fn segment_count(&self) -> usize {
        if self.closed {
            self.centerline.len()
        } else {
            self.centerline.len() - 1
        }
    }

    fn segment(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        let n = self.centerline.len();
        (self.centerline[i], self.centerline[(i + 1) % n])
    }

    /// Arc length wrapped into `[0, length)` for closed tracks, clamped otherwise.
    pub fn normalize(&self, s: f64) -> f64 {
        let len = self.length();
        if self.closed {
            s.rem_euclid(len)
        } else {
            s.clamp(0.0, len)
        }
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cumulative.partition_point(|&c| c <= s);
        i.saturating_sub(1).min(self.segment_count() - 1)
    }

    fn tangent(&self, i: usize) -> [f64; 2] {
        let (a, b) = self.segment(i);
        let d = sub(b, a);
        let n = norm(d);
        [d[0] / n, d[1] / n]
    }

    /// Centerline point and unit tangent at arc length `s`.
    pub fn point_at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = self.normalize(s);
        let i = self.segment_at(s);
        let (a, _) = self.segment(i);
        let t = self.tangent(i);
        let u = s - self.cumulative[i];
        ([a[0] + u * t[0], a[1] + u * t[1]], t)
    }

    /// Like `point_at`, but an open track continues straight past its ends.
    pub fn extended_point(&self, s: f64) -> [f64; 2] {
        let len = self.length();
        let (p, t) = self.point_at(s);
        let over = if self.closed { 0.0 } else if s > len { s - len } else { s.min(0.0) };
        [p[0] + over * t[0], p[1] + over * t[1]]
    }

    fn vertex_tangent(&self, i: usize) -> [f64; 2] {
        let n = self.centerline.len();
        let (prev, next) = if self.closed {
            ((i + n - 1) % n, (i + 1) % n)
        } else {
            (i.saturating_sub(1), (i + 1).min(n - 1))
        };
        let d = sub(self.centerline[next], self.centerline[prev]);
        let k = norm(d);
        [d[0] / k, d[1] / k]
    }

    /// Unit tangent at arc length `s`, blended between vertex tangents
    /// (central differences) so it varies continuously along the track. On a
    /// uniformly sampled circle this is the exact circle tangent at the radial
    /// projection of `point_at(s)`. `None` where the blend cancels out.
    pub fn smooth_tangent(&self, s: f64) -> Option<[f64; 2]> {
        let s = self.normalize(s);
        let i = self.segment_at(s);
        let w = (s - self.cumulative[i]) / (self.cumulative[i + 1] - self.cumulative[i]);
        let j = (i + 1) % self.centerline.len();
        let (a, b) = (self.vertex_tangent(i), self.vertex_tangent(j));
        let m = [(1.0 - w) * a[0] + w * b[0], (1.0 - w) * a[1] + w * b[1]];
        let k = norm(m);
        (k > 1e-9).then(|| [m[0] / k, m[1] / k])
    }

    /// Tangent of the polyline segment containing `s`.
    pub fn segment_tangent(&self, s: f64) -> [f64; 2] {
        self.tangent(self.segment_at(self.normalize(s)))
    }

    /// Closest centerline point to `p`. With a `hint`, only segments within
    /// `window` arc length of the hint are considered.
    pub fn project(&self, p: [f64; 2], hint: Option<(f64, f64)>) -> Projection {
        let len = self.length();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.segment_count() {
            if let Some((h, window)) = hint {
                let mid = 0.5 * (self.cumulative[i] + self.cumulative[i + 1]);
                let mut d = (mid - h).abs();
                if self.closed {
                    d = d.min(len - d);
                }
                if d > window {
                    continue;
                }
            }
            let (a, _) = self.segment(i);
            let seg_len = self.cumulative[i + 1] - self.cumulative[i];
            let t = self.tangent(i);
            let ap = sub(p, a);
            let u = (ap[0] * t[0] + ap[1] * t[1]).clamp(0.0, seg_len);
            let q = [a[0] + u * t[0], a[1] + u * t[1]];
            let dist = norm(sub(p, q));
            if dist < best.0 {
                let lateral = t[0] * (p[1] - q[1]) - t[1] * (p[0] - q[0]);
                let lateral = if lateral.abs() < dist { dist.copysign(lateral) } else { lateral };
                best = (dist, self.normalize(self.cumulative[i] + u), lateral);
            }
        }
        if !best.0.is_finite() {
            return self.project(p, None);
        }
        Projection {
            s: best.1,
            lateral: best.2,
        }
    }

    /// Signed arc length travelled from `from` to `to`, taking the short way
    /// around a closed track.
    pub fn arc_delta(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if self.closed {
            let len = self.length();
            (d + 0.5 * len).rem_euclid(len) - 0.5 * len
        } else {
            d
        }
    }

    /// Left and right border polylines, offset from the centerline vertices
    /// along the averaged normals.
    pub fn borders(&self) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let n = self.centerline.len();
        let segs = self.segment_count();
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for i in 0..n {
            let before = if i > 0 { Some(i - 1) } else if self.closed { Some(segs - 1) } else { None };
            let after = (i < segs).then_some(i);
            let t = match (before, after) {
                (Some(a), Some(b)) => {
                    let (ta, tb) = (self.tangent(a), self.tangent(b));
                    let m = [ta[0] + tb[0], ta[1] + tb[1]];
                    let k = norm(m);
                    if k > 1e-12 { [m[0] / k, m[1] / k] } else { tb }
                }
                (Some(a), None) => self.tangent(a),
                (None, Some(b)) => self.tangent(b),
                (None, None) => unreachable!("tracks have a segment"),
            };
            let p = self.centerline[i];
            let w = self.half_width;
            left.push([p[0] - w * t[1], p[1] + w * t[0]]);
            right.push([p[0] + w * t[1], p[1] - w * t[0]]);
        }
        (left, right)
    }

    /// TOML document with coordinates rounded to micrometres.
    pub fn to_toml(&self) -> Result<String> {
        let file = TrackFile {
            half_width: round6(self.half_width),
            closed: self.closed,
            points: self.centerline.iter().map(|p| [round6(p[0]), round6(p[1])]).collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TrackFile = toml::from_str(text).map_err(|e| Error::Parse {
            location: e.span().map(|s| format!("byte {}", s.start)).unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        Self::new(file.points, file.half_width, file.closed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
