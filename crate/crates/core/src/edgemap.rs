//! Edge-map rasters and intensity-weighted line evidence.
//!
//! Line segments are scored by *edgeness*: the raw sum of 0-255 intensities
//! over their rasterized pixels. Candidate segments are enumerated from
//! caller-supplied anchor pixels by sweeping a direction window, rather than
//! voting into a dense (rho, theta) accumulator.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Default angular step of the anchor sweep.
pub const DEFAULT_ANGLE_STEP: f64 = 0.5 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub x: i64,
    pub y: i64,
}

impl Pixel {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn round(p: (f64, f64)) -> Self {
        Self::new(p.0.round() as i64, p.1.round() as i64)
    }

    pub fn as_f64(&self) -> (f64, f64) {
        (self.x as f64, self.y as f64)
    }

    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        (self.x as f64 - p.0).hypot(self.y as f64 - p.1)
    }
}

/// Single-channel 8-bit raster, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {}x{} raster",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    fn check(&self, p: Pixel) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            })
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Intensity at `p`, zero outside the raster.
    #[inline]
    pub fn get_or_zero(&self, p: Pixel) -> u8 {
        if self.contains(p) {
            self.pixels[p.y as usize * self.width + p.x as usize]
        } else {
            0
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Bilinear sample at raster coordinates; outside pixels read as zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |dx: i64, dy: i64| self.get_or_zero(Pixel::new(x0 + dx, y0 + dy)) as f64;
        let top = at(0, 0) * (1.0 - fx) + at(1, 0) * fx;
        let bottom = at(0, 1) * (1.0 - fx) + at(1, 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Draws an integer line at a fixed intensity (overwriting).
    pub fn draw_line(&mut self, p0: Pixel, p1: Pixel, intensity: u8) -> Result<()> {
        self.check(p0)?;
        self.check(p1)?;
        for p in LinePixels::new(p0, p1) {
            self.set(p.x as usize, p.y as usize, intensity);
        }
        Ok(())
    }

    /// Draws an anti-aliased line between sub-pixel raster coordinates.
    ///
    /// Coverage is split between the two pixels straddling the ideal line
    /// along the minor axis and blended with `max`. Pixels outside the raster
    /// are skipped. Returns every pixel that received nonzero intensity.
    pub fn draw_line_aa(&mut self, a: (f64, f64), b: (f64, f64), intensity: u8) -> Vec<Pixel> {
        let mut touched = Vec::new();
        let steep = (b.1 - a.1).abs() > (b.0 - a.0).abs();
        let (mut a, mut b) = if steep { ((a.1, a.0), (b.1, b.0)) } else { (a, b) };
        if a.0 > b.0 {
            std::mem::swap(&mut a, &mut b);
        }
        let dx = b.0 - a.0;
        let gradient = if dx.abs() < 1e-12 { 0.0 } else { (b.1 - a.1) / dx };
        let start = a.0.round() as i64;
        let end = b.0.round() as i64;
        for major in start..=end {
            let minor = a.1 + gradient * (major as f64 - a.0);
            let base = minor.floor();
            let frac = minor - base;
            for (offset, weight) in [(0i64, 1.0 - frac), (1i64, frac)] {
                let value = (intensity as f64 * weight).round() as u8;
                if value == 0 {
                    continue;
                }
                let m = base as i64 + offset;
                let p = if steep {
                    Pixel::new(m, major)
                } else {
                    Pixel::new(major, m)
                };
                if self.contains(p) {
                    let idx = p.y as usize * self.width + p.x as usize;
                    self.pixels[idx] = self.pixels[idx].max(value);
                    touched.push(p);
                }
            }
        }
        touched
    }

    pub fn read_pgm(reader: impl Read) -> Result<Self> {
        let (w, h, data) = read_pnm(reader, b"P5", 1)?;
        Self::from_pixels(w, h, data)
    }

    pub fn write_pgm(&self, mut writer: impl Write) -> Result<()> {
        write!(writer, "P5\n{} {}\n255\n", self.width, self.height)?;
        writer.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_pgm(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        self.write_pgm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Boolean raster used for occlusion and tree masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, p: Pixel) -> bool {
        p.x >= 0
            && p.y >= 0
            && (p.x as usize) < self.width
            && (p.y as usize) < self.height
            && self.data[p.y as usize * self.width + p.x as usize]
    }

    #[inline]
    pub fn set(&mut self, p: Pixel, value: bool) {
        if p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height {
            self.data[p.y as usize * self.width + p.x as usize] = value;
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn matches(&self, map: &EdgeMap) -> bool {
        self.width == map.width() && self.height == map.height()
    }

    /// Converts to a 0/255 raster.
    pub fn to_edge_map(&self) -> EdgeMap {
        let pixels = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        EdgeMap {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Any nonzero pixel counts as set.
    pub fn from_edge_map(map: &EdgeMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            data: map.pixels().iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_edge_map(&EdgeMap::load(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_edge_map().save(path)
    }
}

/// Reads a binary PNM with maxval 255. `channels` is 1 for P5 and 3 for P6.
pub(crate) fn read_pnm(mut reader: impl Read, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed header number".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing header terminator".into()));
    }
    pos += 1;
    let expected = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(Error::Format(format!(
            "truncated raster: {} of {} bytes",
            data.len(),
            expected
        )));
    }
    Ok((w, h, data[..expected].to_vec()))
}

/// Iterator over the 8-connected rasterization of an integer segment.
///
/// At each step of the major axis the minor coordinate is the grid value
/// nearest the ideal line, ties rounding toward +infinity. The pixel set does
/// not depend on endpoint order; iteration runs from the first endpoint.
#[derive(Debug, Clone)]
pub struct LinePixels {
    origin: Pixel,
    dx: i64,
    dy: i64,
    steps: i64,
    reversed: bool,
    next: i64,
}

impl LinePixels {
    pub fn new(p0: Pixel, p1: Pixel) -> Self {
        let (origin, end, reversed) = if p1 < p0 { (p1, p0, true) } else { (p0, p1, false) };
        let dx = end.x - origin.x;
        let dy = end.y - origin.y;
        Self {
            origin,
            dx,
            dy,
            steps: dx.abs().max(dy.abs()),
            reversed,
            next: 0,
        }
    }

    #[inline]
    fn at(&self, t: i64) -> Pixel {
        let n = self.steps;
        if n == 0 {
            return self.origin;
        }
        // Nearest integer to origin + t * d / n, ties up: floor((2 t d + n) / 2n).
        let round = |d: i64| (2 * t * d + n).div_euclid(2 * n);
        if self.dx.abs() >= self.dy.abs() {
            Pixel::new(self.origin.x + t * self.dx.signum(), self.origin.y + round(self.dy))
        } else {
            Pixel::new(self.origin.x + round(self.dx), self.origin.y + t * self.dy.signum())
        }
    }
}

impl Iterator for LinePixels {
    type Item = Pixel;

    fn next(&mut self) -> Option<Pixel> {
        if self.next > self.steps {
            return None;
        }
        let t = if self.reversed {
            self.steps - self.next
        } else {
            self.next
        };
        self.next += 1;
        Some(self.at(t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.steps + 1 - self.next).max(0) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for LinePixels {}

/// Ordered pixels of the discrete segment from `p0` to `p1`, inclusive.
pub fn line_pixels(map: &EdgeMap, p0: Pixel, p1: Pixel) -> Result<Vec<Pixel>> {
    map.check(p0)?;
    map.check(p1)?;
    Ok(LinePixels::new(p0, p1).collect())
}

/// A scored line segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    pub p0: Pixel,
    pub p1: Pixel,
    /// Number of rasterized pixels.
    pub length: usize,
    /// Sum of intensities over those pixels.
    pub edgeness: f64,
}

impl LineSegment {
    pub fn measure(map: &EdgeMap, p0: Pixel, p1: Pixel) -> Result<Self> {
        let (length, edgeness) = edgeness(map, p0, p1)?;
        Ok(Self {
            p0,
            p1,
            length,
            edgeness,
        })
    }

    pub fn pixels(&self) -> LinePixels {
        LinePixels::new(self.p0, self.p1)
    }

    /// Angle in radians with `v` up: `atan2(-(dy), dx)` in raster terms.
    pub fn angle(&self) -> f64 {
        (-((self.p1.y - self.p0.y) as f64)).atan2((self.p1.x - self.p0.x) as f64)
    }

    pub fn euclidean_length(&self) -> f64 {
        ((self.p1.x - self.p0.x) as f64).hypot((self.p1.y - self.p0.y) as f64)
    }
}

/// Pixel count and summed intensity along a segment.
pub fn edgeness(map: &EdgeMap, p0: Pixel, p1: Pixel) -> Result<(usize, f64)> {
    map.check(p0)?;
    map.check(p1)?;
    let mut count = 0usize;
    let mut sum = 0u64;
    for p in LinePixels::new(p0, p1) {
        count += 1;
        sum += map.get(p.x as usize, p.y as usize) as u64;
    }
    Ok((count, sum as f64))
}

/// Anchor-and-sweep enumeration parameters.
#[derive(Debug, Clone)]
pub struct HoughQuery {
    /// Start pixels of the candidate segments.
    pub anchors: Vec<Pixel>,
    /// Segment length in pixels (Euclidean, before rounding the end).
    pub length: f64,
    /// Nominal direction, radians with `v` up.
    pub angle: f64,
    pub angle_tol: f64,
    pub angle_step: f64,
}

impl HoughQuery {
    fn angles(&self) -> Vec<f64> {
        let step = if self.angle_step > 0.0 {
            self.angle_step
        } else {
            DEFAULT_ANGLE_STEP
        };
        let k = (self.angle_tol.max(0.0) / step + 1e-9).floor() as i64;
        (-k..=k).map(|i| self.angle + i as f64 * step).collect()
    }
}

/// Enumerates segments from each anchor over the angle window, keeping those
/// with positive edgeness that pass `gate`. Sorted by edgeness descending.
pub fn weighted_hough<G>(map: &EdgeMap, query: &HoughQuery, gate: G) -> Vec<LineSegment>
where
    G: Fn(&LineSegment) -> bool,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let angles = query.angles();
    for &anchor in &query.anchors {
        if !map.contains(anchor) {
            continue;
        }
        for &a in &angles {
            let end = Pixel::round((
                anchor.x as f64 + query.length * a.cos(),
                anchor.y as f64 - query.length * a.sin(),
            ));
            if !map.contains(end) || !seen.insert((anchor, end)) {
                continue;
            }
            let Ok(seg) = LineSegment::measure(map, anchor, end) else {
                continue;
            };
            if seg.edgeness > 0.0 && gate(&seg) {
                out.push(seg);
            }
        }
    }
    out.sort_by(|a, b| {
        b.edgeness
            .total_cmp(&a.edgeness)
            .then_with(|| (a.p0, a.p1).cmp(&(b.p0, b.p1)))
    });
    out
}

/// Pixels within `radius` of a sub-pixel center, inside the raster.
pub fn disk_pixels(map: &EdgeMap, center: (f64, f64), radius: f64) -> Vec<Pixel> {
    let mut out = Vec::new();
    let x0 = (center.0 - radius).floor() as i64;
    let x1 = (center.0 + radius).ceil() as i64;
    let y0 = (center.1 - radius).floor() as i64;
    let y1 = (center.1 + radius).ceil() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Pixel::new(x, y);
            if map.contains(p) && p.distance_to(center) <= radius + 1e-9 {
                out.push(p);
            }
        }
    }
    out
}

/// Calls `f(x, y)` for every pixel whose center lies inside the polygon
/// (even-odd rule), restricted to a `width x height` raster.
pub fn fill_polygon(width: usize, height: usize, poly: &[(f64, f64)], mut f: impl FnMut(usize, usize)) {
    if poly.len() < 3 || width == 0 || height == 0 {
        return;
    }
    let ymin = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let ymax = poly.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor().min(height as f64 - 1.0);
    if ymin > ymax {
        return;
    }
    let mut xs = Vec::new();
    for y in ymin as usize..=ymax as usize {
        let yc = y as f64;
        xs.clear();
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            if (a.1 <= yc) != (b.1 <= yc) {
                xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].ceil().max(0.0);
            let x1 = pair[1].floor().min(width as f64 - 1.0);
            if x0 <= x1 {
                for x in x0 as usize..=x1 as usize {
                    f(x, y);
                }
            }
        }
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        if (a.1 <= p.1) != (b.1 <= p.1) {
            let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if p.0 < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Clips a sub-pixel segment to the raster box `[0, w-1] x [0, h-1]`.
pub fn clip_segment(a: (f64, f64), b: (f64, f64), width: usize, height: usize) -> Option<((f64, f64), (f64, f64))> {
    let (xmax, ymax) = (width as f64 - 1.0, height as f64 - 1.0);
    let d = (b.0 - a.0, b.1 - a.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-d.0, a.0),
        (d.0, xmax - a.0),
        (-d.1, a.1),
        (d.1, ymax - a.1),
    ] {
        if p.abs() < 1e-15 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            t0 = t0.max(r);
        } else {
            t1 = t1.min(r);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((
        (a.0 + t0 * d.0, a.1 + t0 * d.1),
        (a.0 + t1 * d.0, a.1 + t1 * d.1),
    ))
}
