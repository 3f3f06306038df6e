//! Raster primitives: RGBA images, bounding-box and polyline overlays, PNG I/O.
//!
//! Every drawing function is pure. It takes an image by reference and returns
//! a new one; pixels outside the stroked geometry and its label tag are copied
//! through untouched.
//!
//! Coordinates are pixel units with the origin at the top-left corner, `x`
//! growing rightward and `y` downward. Out-of-range coordinates are clamped to
//! the image; geometry that ends up with no area after clamping is rejected.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::normalize_label;

/// Longest label (in characters) rendered into a tag; the rest is cut off.
pub const LABEL_MAX_CHARS: usize = 32;

const GLYPH: u32 = 8;
const TAG_PAD: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanvasError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimension { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("polyline needs at least 2 points, got {0}")]
    InsufficientPoints(usize),
    #[error("png encode failed: {0}")]
    Encode(String),
    #[error("png decode failed: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgba(pub [u8; 4]);

impl Rgba {
    pub const WHITE: Rgba = Rgba([255, 255, 255, 255]);
    pub const BLACK: Rgba = Rgba([0, 0, 0, 255]);
    pub const RED: Rgba = Rgba([220, 20, 20, 255]);
    pub const GREEN: Rgba = Rgba([20, 170, 60, 255]);
    pub const GRAY: Rgba = Rgba([128, 128, 128, 255]);

    pub const fn rgb(r: u8, g: u8, b: u8) -> Self {
        Rgba([r, g, b, 255])
    }

    fn luminance(self) -> u32 {
        let [r, g, b, _] = self.0;
        (299 * r as u32 + 587 * g as u32 + 114 * b as u32) / 1000
    }
}

/// Label colors. Chosen per label by a stable hash so renders are reproducible.
pub const PALETTE: [Rgba; 10] = [
    Rgba::rgb(230, 25, 75),
    Rgba::rgb(60, 180, 75),
    Rgba::rgb(0, 130, 200),
    Rgba::rgb(245, 130, 48),
    Rgba::rgb(145, 30, 180),
    Rgba::rgb(70, 190, 190),
    Rgba::rgb(240, 50, 230),
    Rgba::rgb(128, 128, 0),
    Rgba::rgb(0, 0, 128),
    Rgba::rgb(170, 110, 40),
];

/// Row-major RGBA8 image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("sha256", &self.sha256_hex())
            .finish()
    }
}

impl RasterImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn from_rgba(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, CanvasError> {
        if width == 0 || height == 0 {
            return Err(CanvasError::InvalidDimension { width, height });
        }
        let expected = width as usize * height as usize * 4;
        if pixels.len() != expected {
            return Err(CanvasError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Panics when `(x, y)` lies outside the image.
    pub fn pixel(&self, x: u32, y: u32) -> Rgba {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of bounds");
        let i = self.offset(x, y);
        Rgba([
            self.pixels[i],
            self.pixels[i + 1],
            self.pixels[i + 2],
            self.pixels[i + 3],
        ])
    }

    /// Hex SHA-256 of the raw pixel buffer, prefixed by the dimensions.
    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 4
    }

    pub(crate) fn put(&mut self, x: i64, y: i64, color: Rgba) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = self.offset(x as u32, y as u32);
        self.pixels[i..i + 4].copy_from_slice(&color.0);
    }

    /// Fills the half-open rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub(crate) fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgba) {
        let x0 = x0.max(0);
        let y0 = y0.max(0);
        let x1 = x1.min(self.width as i64);
        let y1 = y1.min(self.height as i64);
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, color);
            }
        }
    }

    /// Filled disc centred on `(cx, cy)`.
    pub(crate) fn fill_disc(&mut self, cx: i64, cy: i64, radius: i64, color: Rgba) {
        for y in cy - radius..=cy + radius {
            for x in cx - radius..=cx + radius {
                let (dx, dy) = (x - cx, y - cy);
                if dx * dx + dy * dy <= radius * radius {
                    self.put(x, y, color);
                }
            }
        }
    }

    /// Draws `text` with the embedded 8x8 font, each glyph pixel scaled to a
    /// `scale`x`scale` block, top-left at `(x, y)`.
    pub(crate) fn draw_text(&mut self, x: i64, y: i64, text: &str, scale: u32, color: Rgba) {
        let s = scale.max(1) as i64;
        for (i, ch) in text.chars().enumerate() {
            let glyph = glyph_for(ch);
            let gx = x + i as i64 * GLYPH as i64 * s;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..GLYPH as i64 {
                    if bits >> col & 1 == 1 {
                        let px = gx + col * s;
                        let py = y + row as i64 * s;
                        self.fill_rect(px, py, px + s, py + s, color);
                    }
                }
            }
        }
    }
}

pub fn new_canvas(width: u32, height: u32, fill: Rgba) -> Result<RasterImage, CanvasError> {
    if width == 0 || height == 0 {
        return Err(CanvasError::InvalidDimension { width, height });
    }
    let n = width as usize * height as usize;
    let mut pixels = Vec::with_capacity(n * 4);
    for _ in 0..n {
        pixels.extend_from_slice(&fill.0);
    }
    Ok(RasterImage {
        width,
        height,
        pixels,
    })
}

fn glyph_for(ch: char) -> [u8; 8] {
    let code = if ch.is_ascii() && !ch.is_ascii_control() {
        ch as usize
    } else {
        '?' as usize
    };
    font8x8::legacy::BASIC_LEGACY[code]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box `(x1, y1)`-`(x2, y2)`, top-left to bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Integer pixel extent after ordering, clamping and rounding.
    fn pixel_rect(&self, width: u32, height: u32) -> Result<[i64; 4], CanvasError> {
        if !self.coords().iter().all(|c| c.is_finite()) {
            return Err(CanvasError::DegenerateGeometry(
                "non-finite box coordinate".into(),
            ));
        }
        let (w, h) = (width as f64, height as f64);
        let x1 = self.x1.min(self.x2).clamp(0.0, w).round() as i64;
        let x2 = self.x1.max(self.x2).clamp(0.0, w).round() as i64;
        let y1 = self.y1.min(self.y2).clamp(0.0, h).round() as i64;
        let y2 = self.y1.max(self.y2).clamp(0.0, h).round() as i64;
        if x1 >= x2 || y1 >= y2 {
            return Err(CanvasError::DegenerateGeometry(format!(
                "box ({}, {}, {}, {}) has no area inside {width}x{height}",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok([x1, y1, x2, y2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }
}

/// Where a label tag goes relative to the geometry's anchor corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelPlacement {
    /// Just above the anchor; tucked inside below it when there is no room above.
    #[default]
    Above,
    /// No tag.
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawStyle {
    pub stroke: Rgba,
    pub stroke_width: u32,
    pub placement: LabelPlacement,
}

impl Default for DrawStyle {
    fn default() -> Self {
        Self {
            stroke: Rgba::RED,
            stroke_width: 2,
            placement: LabelPlacement::Above,
        }
    }
}

impl DrawStyle {
    pub fn solid(stroke: Rgba, stroke_width: u32) -> Self {
        Self {
            stroke,
            stroke_width: stroke_width.max(1),
            placement: LabelPlacement::Above,
        }
    }

    /// Style whose color is picked from [`PALETTE`] by the normalized label.
    pub fn for_label(label: &str) -> Self {
        Self::solid(palette_color(label), 3)
    }
}

pub fn palette_color(label: &str) -> Rgba {
    let idx = fnv1a(normalize_label(label).as_bytes()) % PALETTE.len() as u64;
    PALETTE[idx as usize]
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn tag_text(label: &str) -> String {
    label.trim().chars().take(LABEL_MAX_CHARS).collect()
}

/// Pixel size of the tag that [`draw_bbox`]/[`draw_polyline`] render for `label`.
pub fn label_extent(label: &str) -> (u32, u32) {
    let n = tag_text(label).chars().count() as u32;
    if n == 0 {
        return (0, 0);
    }
    (n * GLYPH + 2 * TAG_PAD, GLYPH + 2 * TAG_PAD)
}

fn draw_tag(img: &mut RasterImage, anchor: (i64, i64), below_offset: i64, label: &str, style: &DrawStyle) {
    if style.placement == LabelPlacement::Hidden {
        return;
    }
    let text = tag_text(label);
    let (tw, th) = label_extent(&text);
    if tw == 0 {
        return;
    }
    let (tw, th) = (tw as i64, th as i64);
    let (ax, ay) = anchor;
    let y = if ay >= th { ay - th } else { ay + below_offset };
    let x = ax.min(img.width as i64 - tw).max(0);
    let ink = if style.stroke.luminance() > 140 {
        Rgba::BLACK
    } else {
        Rgba::WHITE
    };
    img.fill_rect(x, y, x + tw, y + th, style.stroke);
    img.draw_text(x + TAG_PAD as i64, y + TAG_PAD as i64, &text, 1, ink);
}

/// Strokes `bbox` onto a copy of `img` and tags it with `label`.
///
/// The stroke lies inside the box, `style.stroke_width` pixels thick.
pub fn draw_bbox(
    img: &RasterImage,
    bbox: &BBox,
    label: &str,
    style: &DrawStyle,
) -> Result<RasterImage, CanvasError> {
    let [x1, y1, x2, y2] = bbox.pixel_rect(img.width, img.height)?;
    let mut out = img.clone();
    let w = style.stroke_width.max(1) as i64;
    out.fill_rect(x1, y1, x2, (y1 + w).min(y2), style.stroke);
    out.fill_rect(x1, (y2 - w).max(y1), x2, y2, style.stroke);
    out.fill_rect(x1, y1, (x1 + w).min(x2), y2, style.stroke);
    out.fill_rect((x2 - w).max(x1), y1, x2, y2, style.stroke);
    draw_tag(&mut out, (x1, y1), w, label, style);
    Ok(out)
}

/// Strokes consecutive segments of `line` onto a copy of `img`; the label tag
/// is anchored at the first point.
pub fn draw_polyline(
    img: &RasterImage,
    line: &Polyline,
    label: &str,
    style: &DrawStyle,
) -> Result<RasterImage, CanvasError> {
    if line.points.len() < 2 {
        return Err(CanvasError::InsufficientPoints(line.points.len()));
    }
    if !line.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
        return Err(CanvasError::DegenerateGeometry(
            "non-finite polyline coordinate".into(),
        ));
    }
    let (maxx, maxy) = ((img.width - 1) as f64, (img.height - 1) as f64);
    let outside = |a: &Point, b: &Point| {
        (a.x < 0.0 && b.x < 0.0)
            || (a.y < 0.0 && b.y < 0.0)
            || (a.x > maxx && b.x > maxx)
            || (a.y > maxy && b.y > maxy)
    };
    if line.points.windows(2).all(|s| outside(&s[0], &s[1])) {
        return Err(CanvasError::DegenerateGeometry(
            "polyline lies entirely outside the image".into(),
        ));
    }
    let px: Vec<(i64, i64)> = line
        .points
        .iter()
        .map(|p| {
            (
                p.x.clamp(0.0, maxx).round() as i64,
                p.y.clamp(0.0, maxy).round() as i64,
            )
        })
        .collect();

    let mut out = img.clone();
    let w = style.stroke_width.max(1) as i64;
    let (lo, hi) = (-(w - 1) / 2, w / 2);
    for seg in px.windows(2) {
        for (x, y) in bresenham(seg[0], seg[1]) {
            out.fill_rect(x + lo, y + lo, x + hi + 1, y + hi + 1, style.stroke);
        }
    }
    draw_tag(&mut out, px[0], hi + 1, label, style);
    Ok(out)
}

fn bresenham((x0, y0): (i64, i64), (x1, y1): (i64, i64)) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut pts = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        pts.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    pts
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, CanvasError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width, img.height);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| CanvasError::Encode(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| CanvasError::Encode(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| CanvasError::Encode(e.to_string()))?;
    }
    Ok(buf)
}

/// Decodes any 8/16-bit PNG into RGBA8.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, CanvasError> {
    let err = |e: png::DecodingError| CanvasError::Decode(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CanvasError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    let rgba = match info.color_type {
        png::ColorType::Rgba => buf,
        png::ColorType::Rgb => buf
            .chunks_exact(3)
            .flat_map(|c| [c[0], c[1], c[2], 255])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|c| [c[0], c[0], c[0], c[1]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(CanvasError::Decode("unexpanded palette image".into()))
        }
    };
    RasterImage::from_rgba(info.width, info.height, rgba)
}
