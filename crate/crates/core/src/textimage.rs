//! Sentence rasterization with per-character font fallback.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use ab_glyph::{Font, FontVec, GlyphId, PxScale};
use serde::{Deserialize, Serialize};
use unicode_bidi::{bidi_class, BidiClass};

use crate::error::{config, format_err, Error, PathContext, Result};

const BUNDLED: [(&str, &[u8]); 5] = [
    ("latin", include_bytes!("../fonts/latin.ttf")),
    ("cyrillic", include_bytes!("../fonts/cyrillic.ttf")),
    ("greek", include_bytes!("../fonts/greek.ttf")),
    ("hebrew", include_bytes!("../fonts/hebrew.ttf")),
    ("cjk", include_bytes!("../fonts/cjk.ttf")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub canvas_height: u32,
    pub font_pt: f32,
    pub dpi: f32,
    /// Baseline row, counted from the top.
    pub baseline_y: u32,
    pub pad_left: u32,
    pub pad_right: u32,
    pub antialias: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self::with_height(32)
    }
}

impl RenderConfig {
    /// Defaults for a canvas of `h` rows; a quarter of the height is left
    /// below the baseline for descenders.
    pub fn with_height(h: u32) -> Self {
        Self {
            canvas_height: h,
            font_pt: 10.0,
            dpi: 120.0,
            baseline_y: h - h / 4,
            pad_left: 2,
            pad_right: 2,
            antialias: true,
        }
    }

    /// Em size in pixels.
    pub fn pixel_size(&self) -> f32 {
        self.font_pt * self.dpi / 72.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_height == 0 {
            return config("canvas_height must be positive");
        }
        let px = self.pixel_size();
        if !(px > 0.0 && px <= self.canvas_height as f32) {
            return config(format!(
                "font size {px:.2}px must be in (0, canvas_height={}]",
                self.canvas_height
            ));
        }
        if self.baseline_y > self.canvas_height {
            return config("baseline_y below the canvas");
        }
        Ok(())
    }
}

/// Rasterized glyph. `bearing_x` is the offset from the pen to the left
/// column, `bearing_y` from the baseline up to the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBitmap {
    pub width: usize,
    pub height: usize,
    pub coverage: Vec<f32>,
    pub bearing_x: i32,
    pub bearing_y: i32,
    pub advance: u32,
}

/// Result of a fallback lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaceRef {
    Face(usize),
    Notdef,
}

pub struct FontFace {
    pub name: String,
    font: FontVec,
}

impl FontFace {
    fn parse(name: String, data: Vec<u8>) -> std::result::Result<Self, String> {
        let font = FontVec::try_from_vec(data).map_err(|e| e.to_string())?;
        if font.units_per_em().is_none() {
            return Err("missing units per em".into());
        }
        Ok(Self { name, font })
    }

    pub fn has_char(&self, c: char) -> bool {
        self.font.glyph_id(c).0 != 0
    }

    fn upem(&self) -> f32 {
        self.font.units_per_em().unwrap_or(1000.0)
    }

    fn advance_px(&self, id: GlyphId, px: f32) -> u32 {
        (self.font.h_advance_unscaled(id) * px / self.upem()).round().max(0.0) as u32
    }

    fn rasterize(&self, id: GlyphId, px: f32) -> GlyphBitmap {
        // ab_glyph scales by ascent - descent; convert from an em size.
        let s = px * self.font.height_unscaled() / self.upem();
        let glyph = id.with_scale_and_position(PxScale::from(s), ab_glyph::point(0.0, 0.0));
        let advance = self.advance_px(id, px);
        match self.font.outline_glyph(glyph) {
            None => GlyphBitmap {
                width: 0,
                height: 0,
                coverage: Vec::new(),
                bearing_x: 0,
                bearing_y: 0,
                advance,
            },
            Some(og) => {
                let b = og.px_bounds();
                let (w, h) = (b.width() as usize, b.height() as usize);
                let mut coverage = vec![0.0f32; w * h];
                og.draw(|x, y, c| {
                    if (x as usize) < w && (y as usize) < h {
                        // Rasterizer round-off below half a u8 step is dropped.
                        let c = if c < 0.5 / 255.0 { 0.0 } else { c.min(1.0) };
                        coverage[y as usize * w + x as usize] = c;
                    }
                });
                GlyphBitmap {
                    width: w,
                    height: h,
                    coverage,
                    bearing_x: b.min.x as i32,
                    bearing_y: -(b.min.y as i32),
                    advance,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct GlyphKey {
    face: usize,
    glyph: u16,
    px_bits: u32,
}

/// Ordered fallback chain plus a synchronized glyph cache.
pub struct FontAtlas {
    faces: Vec<FontFace>,
    cache: Mutex<HashMap<GlyphKey, Arc<GlyphBitmap>>>,
}

impl std::fmt::Debug for FontAtlas {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.faces.iter().map(|f| f.name.as_str()).collect();
        f.debug_struct("FontAtlas").field("faces", &names).finish()
    }
}

/// Loads fonts in fallback priority order.
pub fn load_fonts<P: AsRef<Path>>(paths: &[P]) -> Result<FontAtlas> {
    if paths.is_empty() {
        return Err(Error::EmptyFallbackChain);
    }
    let mut faces = Vec::with_capacity(paths.len());
    for p in paths {
        let path = p.as_ref();
        let data = std::fs::read(path).map_err(|e| Error::FontLoad {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let face = FontFace::parse(path.display().to_string(), data).map_err(|reason| Error::FontLoad {
            path: path.to_path_buf(),
            reason,
        })?;
        faces.push(face);
    }
    Ok(FontAtlas::from_faces(faces))
}

impl FontAtlas {
    fn from_faces(faces: Vec<FontFace>) -> Self {
        Self {
            faces,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// The bundled chain: latin, cyrillic, greek, hebrew, cjk.
    pub fn bundled() -> Self {
        Self::bundled_subset(&["latin", "cyrillic", "greek", "hebrew", "cjk"]).expect("bundled fonts parse")
    }

    /// Bundled faces by name, in the given order.
    pub fn bundled_subset(names: &[&str]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyFallbackChain);
        }
        let faces = names
            .iter()
            .map(|&n| {
                let (_, data) = BUNDLED
                    .iter()
                    .find(|(name, _)| *name == n)
                    .ok_or_else(|| Error::Config(format!("no bundled font named {n}")))?;
                FontFace::parse(n.to_string(), data.to_vec())
                    .map_err(|reason| Error::FontLoad { path: n.into(), reason })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_faces(faces))
    }

    pub fn faces(&self) -> &[FontFace] {
        &self.faces
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Lowest-index face that maps `c`.
    pub fn resolve_face(&self, c: char) -> FaceRef {
        self.faces
            .iter()
            .position(|f| f.has_char(c))
            .map_or(FaceRef::Notdef, FaceRef::Face)
    }

    fn glyph_id(&self, r: FaceRef, c: char) -> (usize, GlyphId) {
        match r {
            FaceRef::Face(i) => (i, self.faces[i].font.glyph_id(c)),
            FaceRef::Notdef => (0, GlyphId(0)),
        }
    }

    /// Cached rasterization of `c` at `px` em pixels.
    pub fn glyph(&self, c: char, px: f32) -> Arc<GlyphBitmap> {
        let (face, id) = self.glyph_id(self.resolve_face(c), c);
        self.glyph_by_id(face, id, px)
    }

    fn glyph_by_id(&self, face: usize, id: GlyphId, px: f32) -> Arc<GlyphBitmap> {
        let key = GlyphKey {
            face,
            glyph: id.0,
            px_bits: px.to_bits(),
        };
        if let Some(g) = self.cache.lock().expect("glyph cache").get(&key) {
            return g.clone();
        }
        let bm = Arc::new(self.faces[face].rasterize(id, px));
        self.cache.lock().expect("glyph cache").entry(key).or_insert(bm).clone()
    }

    /// Horizontal advance of `c` in whole pixels; 0 for combining marks.
    pub fn advance(&self, c: char, px: f32) -> u32 {
        if is_mark(c) {
            return 0;
        }
        let (face, id) = self.glyph_id(self.resolve_face(c), c);
        self.faces[face].advance_px(id, px)
    }
}

pub fn is_mark(c: char) -> bool {
    bidi_class(c) == BidiClass::NSM
}

/// True when the first strong character is right-to-left.
pub fn is_rtl(text: &str) -> bool {
    for c in text.chars() {
        match bidi_class(c) {
            BidiClass::L => return false,
            BidiClass::R | BidiClass::AL => return true,
            _ => {}
        }
    }
    false
}

/// Grayscale raster; 0 is background and 1 full ink.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceImage {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`.
    pub pixels: Vec<f32>,
    pub text: String,
}

impl SentenceImage {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean_ink(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Column range `[x0, x1)` of the pixel matrix, row-major.
    pub fn columns(&self, x0: usize, x1: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity((x1 - x0) * self.height);
        for y in 0..self.height {
            out.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        out
    }
}

struct Placed {
    ch: char,
    face: usize,
    id: GlyphId,
    pen: i32,
    /// Index of the base glyph a combining mark attaches to.
    anchor: Option<usize>,
}

fn layout(text: &str, atlas: &FontAtlas, cfg: &RenderConfig) -> Result<(Vec<Placed>, usize)> {
    if text.is_empty() {
        return Err(Error::EmptyInput);
    }
    if atlas.is_empty() {
        return Err(Error::EmptyFallbackChain);
    }
    cfg.validate()?;
    let px = cfg.pixel_size();
    let mut clusters: Vec<Vec<char>> = Vec::new();
    for c in text.chars() {
        match clusters.last_mut() {
            Some(cl) if is_mark(c) => cl.push(c),
            _ => clusters.push(vec![c]),
        }
    }
    if is_rtl(text) {
        clusters.reverse();
    }
    let mut pen = cfg.pad_left as i32;
    let mut placed = Vec::with_capacity(text.len());
    for cl in clusters {
        let mut base = None;
        for c in cl {
            let (face, id) = atlas.glyph_id(atlas.resolve_face(c), c);
            if is_mark(c) {
                placed.push(Placed {
                    ch: c,
                    face,
                    id,
                    pen,
                    anchor: base,
                });
            } else {
                base = Some(placed.len());
                placed.push(Placed {
                    ch: c,
                    face,
                    id,
                    pen,
                    anchor: None,
                });
                pen += atlas.faces[face].advance_px(id, px) as i32;
            }
        }
    }
    let width = (pen + cfg.pad_right as i32).max(1) as usize;
    Ok((placed, width))
}

/// Pen position of every character in visual order.
pub fn glyph_positions(text: &str, atlas: &FontAtlas, cfg: &RenderConfig) -> Result<Vec<(char, i32)>> {
    let (placed, _) = layout(text, atlas, cfg)?;
    Ok(placed.into_iter().map(|p| (p.ch, p.pen)).collect())
}

/// Width in pixels `render_sentence` would produce.
pub fn measure_width(text: &str, atlas: &FontAtlas, cfg: &RenderConfig) -> Result<usize> {
    Ok(layout(text, atlas, cfg)?.1)
}

pub fn render_sentence(text: &str, atlas: &FontAtlas, cfg: &RenderConfig) -> Result<SentenceImage> {
    let (placed, width) = layout(text, atlas, cfg)?;
    let px = cfg.pixel_size();
    let height = cfg.canvas_height as usize;
    let mut pixels = vec![0.0f32; height * width];
    let bitmaps: Vec<Arc<GlyphBitmap>> = placed.iter().map(|p| atlas.glyph_by_id(p.face, p.id, px)).collect();
    for (p, bm) in placed.iter().zip(&bitmaps) {
        if bm.width == 0 {
            continue;
        }
        let x0 = match p.anchor {
            // Marks are centred over the ink of their base glyph.
            Some(a) => {
                let base = &bitmaps[a];
                let cx = placed[a].pen + base.bearing_x + base.width as i32 / 2;
                cx - bm.width as i32 / 2
            }
            None => p.pen + bm.bearing_x,
        };
        let y0 = cfg.baseline_y as i32 - bm.bearing_y;
        for gy in 0..bm.height {
            let y = y0 + gy as i32;
            if y < 0 || y >= height as i32 {
                continue;
            }
            for gx in 0..bm.width {
                let x = x0 + gx as i32;
                if x < 0 || x >= width as i32 {
                    continue;
                }
                let mut c = bm.coverage[gy * bm.width + gx];
                if !cfg.antialias {
                    c = if c >= 0.5 { 1.0 } else { 0.0 };
                }
                let dst = &mut pixels[y as usize * width + x as usize];
                *dst = (*dst + c).min(1.0);
            }
        }
    }
    Ok(SentenceImage {
        height,
        width,
        pixels,
        text: text.to_string(),
    })
}

const PXR_MAGIC: &[u8; 4] = b"PXR1";
const PXR_VERSION: u32 = 1;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes images in the PXR1 cache layout (little-endian).
pub fn write_cache(w: &mut impl Write, canvas_height: u32, images: &[SentenceImage]) -> Result<()> {
    w.write_all(PXR_MAGIC)?;
    w.write_all(&PXR_VERSION.to_le_bytes())?;
    w.write_all(&canvas_height.to_le_bytes())?;
    w.write_all(&(images.len() as u64).to_le_bytes())?;
    for img in images {
        if img.height != canvas_height as usize {
            return config(format!("image height {} != cache height {canvas_height}", img.height));
        }
        w.write_all(&(img.width as u32).to_le_bytes())?;
        let q: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
        w.write_all(&q)?;
    }
    Ok(())
}

/// Reads a PXR1 cache. Text is not stored, so `text` is empty.
pub fn read_cache(r: &mut impl Read) -> Result<Vec<SentenceImage>> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..4] != PXR_MAGIC {
        return format_err("render cache", "bad magic");
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != PXR_VERSION {
        return format_err("render cache", format!("unsupported version {version}"));
    }
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let mut wb = [0u8; 4];
        r.read_exact(&mut wb)?;
        let width = u32::from_le_bytes(wb) as usize;
        let mut buf = vec![0u8; width * height];
        r.read_exact(&mut buf)?;
        out.push(SentenceImage {
            height,
            width,
            pixels: buf.iter().map(|&b| b as f32 / 255.0).collect(),
            text: String::new(),
        });
    }
    Ok(out)
}

pub fn write_cache_file(path: &Path, canvas_height: u32, images: &[SentenceImage]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    write_cache(&mut f, canvas_height, images)?;
    f.flush().at(path)
}

pub fn read_cache_file(path: &Path) -> Result<Vec<SentenceImage>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).at(path)?);
    read_cache(&mut f)
}
