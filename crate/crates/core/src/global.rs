//! Reference-to-frame color transfer by coarse-to-fine descriptor matching.
//!
//! Each gray frame is described at two levels: a coarse grid of region
//! descriptors and a per-pixel texture descriptor. Every coarse cell is
//! matched against the whole reference grid; the fine search for a pixel is
//! then confined to the reference region around the cell its own cell matched
//! (dilated by a margin). Colors are gathered from the reference frame at the
//! matched positions.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::binio::{put_f32s, put_u32, read_file, write_atomic, Cursor};
use crate::color::{ColorSpace, Image};
use crate::error::{contract_err, shape_err, Error, Result};

pub const DEFAULT_COARSE_RATIO: usize = 8;
pub const DEFAULT_ROI_MARGIN: usize = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"FMAP";
pub const FEATURE_VERSION: u32 = 1;
pub const ORIENTATION_BINS: usize = 8;
/// Descriptor length of the built-in fine level.
pub const FINE_DEPTH: usize = 4;
/// Descriptor length of the built-in coarse level.
pub const COARSE_DEPTH: usize = 2 + ORIENTATION_BINS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureLevel {
    Coarse,
    Fine,
}

impl FeatureLevel {
    fn tag(self) -> u8 {
        match self {
            FeatureLevel::Coarse => 0,
            FeatureLevel::Fine => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FeatureLevel::Coarse),
            1 => Some(FeatureLevel::Fine),
            _ => None,
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            FeatureLevel::Coarse => "coarse",
            FeatureLevel::Fine => "fine",
        }
    }
}

/// `height x width` grid of `depth`-long descriptors; one cell covers
/// `stride x stride` image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    level: FeatureLevel,
    height: usize,
    width: usize,
    depth: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        level: FeatureLevel,
        height: usize,
        width: usize,
        depth: usize,
        stride: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 || stride == 0 {
            return Err(shape_err!(
                "feature map extents must be positive, got {height}x{width}x{depth} stride {stride}"
            ));
        }
        match level {
            FeatureLevel::Fine if stride != 1 => {
                return Err(shape_err!("fine feature maps have stride 1, got {stride}"))
            }
            FeatureLevel::Coarse if stride < 4 => {
                return Err(shape_err!("coarse feature stride must be at least 4, got {stride}"))
            }
            _ => {}
        }
        if data.len() != height * width * depth {
            return Err(shape_err!(
                "{height}x{width}x{depth} feature map needs {} values, got {}",
                height * width * depth,
                data.len()
            ));
        }
        Ok(FeatureMap {
            level,
            height,
            width,
            depth,
            stride,
            data,
        })
    }

    pub fn level(&self) -> FeatureLevel {
        self.level
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, y: usize, x: usize) -> &[f32] {
        &self.data[(y * self.width + x) * self.depth..][..self.depth]
    }

    /// Whether this map can describe an `h x w` image.
    pub fn covers(&self, h: usize, w: usize) -> bool {
        h.div_ceil(self.stride) == self.height && w.div_ceil(self.stride) == self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        put_u32(&mut out, FEATURE_VERSION as usize);
        out.push(self.level.tag());
        for v in [self.height, self.width, self.depth, self.stride] {
            put_u32(&mut out, v);
        }
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut cur = Cursor::new(bytes, what);
        cur.magic(FEATURE_MAGIC)?;
        let version = cur.u32()?;
        if version != FEATURE_VERSION {
            return Err(cur.fail(format_args!("unsupported feature map version {version}")));
        }
        let tag = cur.u8()?;
        let level = FeatureLevel::from_tag(tag).ok_or_else(|| cur.fail(format_args!("unknown level tag {tag}")))?;
        let (h, w, d, s) = (cur.usize()?, cur.usize()?, cur.usize()?, cur.usize()?);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| cur.fail("feature map too large"))?;
        let data = cur.f32s(n)?;
        cur.finish()?;
        FeatureMap::new(level, h, w, d, s, data).map_err(|e| cur.fail(e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }
}

/// Produces descriptors for the gray frame with the given 1-based index.
pub trait FeatureExtractor {
    /// Identifies the extractor in cache manifests.
    fn tag(&self) -> String;

    fn extract(&self, gray: &Image, frame: usize, level: FeatureLevel) -> Result<FeatureMap>;
}

/// Hand-crafted descriptors requiring no learned weights.
///
/// Fine: gray value, horizontal and vertical Sobel responses (scaled by 1/8)
/// and the standard deviation over a 5x5 window. Coarse: for each
/// `ratio x ratio` cell, the mean and standard deviation of gray values and an
/// 8-bin orientation histogram of the Sobel gradient (magnitude weighted,
/// linearly split between the two nearest bins, normalized to sum 1), all
/// under a Gaussian window of deviation `ratio` centered on the cell. The soft
/// window and bins keep the descriptor smooth under sub-cell shifts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuiltinExtractor {
    pub coarse_ratio: usize,
}

impl Default for BuiltinExtractor {
    fn default() -> Self {
        BuiltinExtractor {
            coarse_ratio: DEFAULT_COARSE_RATIO,
        }
    }
}

fn clamped(g: &Image, y: isize, x: isize) -> f32 {
    let yy = y.clamp(0, g.height() as isize - 1) as usize;
    let xx = x.clamp(0, g.width() as isize - 1) as usize;
    g.data()[yy * g.width() + xx]
}

/// Sobel responses divided by 8, replicate borders.
fn sobel(g: &Image) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = g.dims();
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| clamped(g, y + dy, x + dx);
            let sx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let sy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gx.push(sx / 8.0);
            gy.push(sy / 8.0);
        }
    }
    (gx, gy)
}

fn mean_std(values: impl Iterator<Item = f32> + Clone) -> (f32, f32) {
    let n = values.clone().count() as f64;
    let mean = values.clone().map(|v| v as f64).sum::<f64>() / n;
    let var = values.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// The two orientation bins nearest to the gradient direction and the
/// weight of the first; bins are centered on multiples of the bin width.
fn orientation_bins(gx: f32, gy: f32) -> (usize, usize, f64) {
    let t = (gy.atan2(gx) as f64 + std::f64::consts::PI) / std::f64::consts::TAU * ORIENTATION_BINS as f64;
    let lo = t.floor();
    let frac = t - lo;
    let a = (lo as usize) % ORIENTATION_BINS;
    (a, (a + 1) % ORIENTATION_BINS, 1.0 - frac)
}

impl BuiltinExtractor {
    fn fine(&self, g: &Image) -> Result<FeatureMap> {
        let (h, w) = g.dims();
        let (gx, gy) = sobel(g);
        let mut data = Vec::with_capacity(h * w * FINE_DEPTH);
        for y in 0..h {
            for x in 0..w {
                let window = (-2..=2isize)
                    .flat_map(|dy| (-2..=2isize).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| clamped(g, y as isize + dy, x as isize + dx));
                let (_, sd) = mean_std(window);
                let i = y * w + x;
                data.extend_from_slice(&[g.data()[i], gx[i], gy[i], sd]);
            }
        }
        FeatureMap::new(FeatureLevel::Fine, h, w, FINE_DEPTH, 1, data)
    }

    fn coarse(&self, g: &Image) -> Result<FeatureMap> {
        let r = self.coarse_ratio;
        let (h, w) = g.dims();
        let (ch, cw) = (h.div_ceil(r), w.div_ceil(r));
        let (gx, gy) = sobel(g);
        let sigma = r as f64;
        let reach = (3.0 * sigma).ceil() as isize;
        let mut data = Vec::with_capacity(ch * cw * COARSE_DEPTH);
        for cy in 0..ch {
            for cx in 0..cw {
                let (my, mx) = ((cy * r) as f64 + (r as f64 - 1.0) / 2.0, (cx * r) as f64 + (r as f64 - 1.0) / 2.0);
                // moments of the offset from the center pixel: exact for constants
                let pivot = clamped(g, my as isize, mx as isize) as f64;
                let (mut sw, mut s1, mut s2) = (0f64, 0f64, 0f64);
                let mut hist = [0f64; ORIENTATION_BINS];
                for y in (my as isize - reach).max(0)..=(my as isize + reach + 1).min(h as isize - 1) {
                    for x in (mx as isize - reach).max(0)..=(mx as isize + reach + 1).min(w as isize - 1) {
                        let d2 = (y as f64 - my).powi(2) + (x as f64 - mx).powi(2);
                        let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                        let i = y as usize * w + x as usize;
                        let v = g.data()[i] as f64 - pivot;
                        sw += wt;
                        s1 += wt * v;
                        s2 += wt * v * v;
                        let mag = (gx[i] as f64).hypot(gy[i] as f64);
                        if mag > 0.0 {
                            let (a, b, wa) = orientation_bins(gx[i], gy[i]);
                            hist[a] += wt * mag * wa;
                            hist[b] += wt * mag * (1.0 - wa);
                        }
                    }
                }
                let mean = s1 / sw;
                let sd = (s2 / sw - mean * mean).max(0.0).sqrt();
                let mean = mean + pivot;
                let total: f64 = hist.iter().sum();
                let n = if total > 0.0 { total } else { 1.0 };
                data.push(mean as f32);
                data.push(sd as f32);
                data.extend(hist.iter().map(|&v| (v / n) as f32));
            }
        }
        FeatureMap::new(FeatureLevel::Coarse, ch, cw, COARSE_DEPTH, r, data)
    }
}

impl FeatureExtractor for BuiltinExtractor {
    fn tag(&self) -> String {
        format!("builtin:r{}", self.coarse_ratio)
    }

    fn extract(&self, gray: &Image, _frame: usize, level: FeatureLevel) -> Result<FeatureMap> {
        gray.expect_space(ColorSpace::Gray, "extract_features")?;
        if self.coarse_ratio < 4 {
            return Err(Error::Config(format!(
                "coarse ratio must be at least 4, got {}",
                self.coarse_ratio
            )));
        }
        match level {
            FeatureLevel::Fine => self.fine(gray),
            FeatureLevel::Coarse => self.coarse(gray),
        }
    }
}

/// Reads externally computed maps from `<dir>/<frame:04>.<coarse|fine>.fmap`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportExtractor {
    dir: PathBuf,
}

impl ImportExtractor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ImportExtractor { dir: dir.into() }
    }

    pub fn path_for(&self, frame: usize, level: FeatureLevel) -> PathBuf {
        self.dir.join(format!("{frame:04}.{}.fmap", level.file_stem()))
    }
}

impl FeatureExtractor for ImportExtractor {
    fn tag(&self) -> String {
        format!("import:{}", self.dir.display())
    }

    fn extract(&self, gray: &Image, frame: usize, level: FeatureLevel) -> Result<FeatureMap> {
        let path = self.path_for(frame, level);
        let map = FeatureMap::read(&path)?;
        if map.level != level {
            return Err(Error::Format(format!(
                "{}: holds {:?} features, expected {level:?}",
                path.display(),
                map.level
            )));
        }
        if !map.covers(gray.height(), gray.width()) {
            return Err(Error::Format(format!(
                "{}: {}x{} grid with stride {} does not cover a {}x{} frame",
                path.display(),
                map.height,
                map.width,
                map.stride,
                gray.height(),
                gray.width()
            )));
        }
        Ok(map)
    }
}

pub type SharedExtractor = Arc<dyn FeatureExtractor + Send + Sync>;

/// Parses `builtin` or `import:PATH`.
pub fn extractor_from_spec(spec: &str) -> Result<SharedExtractor> {
    match spec.split_once(':') {
        None if spec == "builtin" => Ok(Arc::new(BuiltinExtractor::default())),
        Some(("import", path)) if !path.is_empty() => Ok(Arc::new(ImportExtractor::new(path))),
        _ => Err(Error::Config(format!(
            "unknown extractor `{spec}`, expected `builtin` or `import:PATH`"
        ))),
    }
}

/// For every target position, a `(y, x)` source position in the reference grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceField {
    height: usize,
    width: usize,
    source_height: usize,
    source_width: usize,
    /// Image pixels per grid position.
    stride: usize,
    sources: Vec<(usize, usize)>,
    costs: Vec<f64>,
}

impl CorrespondenceField {
    pub fn new(
        height: usize,
        width: usize,
        source_height: usize,
        source_width: usize,
        sources: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if sources.len() != height * width {
            return Err(shape_err!(
                "{height}x{width} field needs {} sources, got {}",
                height * width,
                sources.len()
            ));
        }
        if let Some(p) = sources.iter().find(|&&(y, x)| y >= source_height || x >= source_width) {
            return Err(contract_err!(
                "source {p:?} outside the {source_height}x{source_width} reference"
            ));
        }
        Ok(CorrespondenceField {
            height,
            width,
            source_height,
            source_width,
            stride: 1,
            costs: vec![0.0; sources.len()],
            sources,
        })
    }

    /// Every target pixel mapped to itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let sources = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).collect();
        CorrespondenceField::new(height, width, height, width, sources).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.source_height, self.source_width)
    }

    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        self.sources[y * self.width + x]
    }

    pub fn sources(&self) -> &[(usize, usize)] {
        &self.sources
    }

    /// Squared descriptor distance of each match.
    pub fn costs(&self) -> &[f64] {
        &self.costs
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

/// Best position of `query` in `map` restricted to the given window; the
/// first position in raster order wins ties.
fn argmin_in(map: &FeatureMap, query: &[f32], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> ((usize, usize), f64) {
    let mut best = (rows.start, cols.start);
    let mut best_cost = f64::INFINITY;
    for y in rows {
        for x in cols.clone() {
            let c = sq_dist(query, map.descriptor(y, x));
            if c < best_cost {
                best_cost = c;
                best = (y, x);
            }
        }
    }
    (best, best_cost)
}

fn check_depth(a: &FeatureMap, b: &FeatureMap, op: &str) -> Result<()> {
    if a.depth != b.depth {
        return Err(shape_err!("{op}: descriptor depths differ ({} vs {})", a.depth, b.depth));
    }
    Ok(())
}

/// Global nearest-neighbor search of every target cell in the reference grid.
pub fn match_coarse(target: &FeatureMap, reference: &FeatureMap) -> Result<CorrespondenceField> {
    check_depth(target, reference, "match_coarse")?;
    if target.stride != reference.stride {
        return Err(shape_err!("match_coarse: strides differ"));
    }
    let mut sources = Vec::with_capacity(target.height * target.width);
    let mut costs = Vec::with_capacity(sources.capacity());
    for y in 0..target.height {
        for x in 0..target.width {
            let (p, c) = argmin_in(reference, target.descriptor(y, x), 0..reference.height, 0..reference.width);
            sources.push(p);
            costs.push(c);
        }
    }
    let mut field = CorrespondenceField::new(target.height, target.width, reference.height, reference.width, sources)?;
    field.stride = target.stride;
    field.costs = costs;
    Ok(field)
}

/// Per-pixel search inside the reference region covered by the coarse match
/// of the pixel's cell, grown by `roi_margin` cells on each side.
pub fn match_fine(
    target: &FeatureMap,
    reference: &FeatureMap,
    coarse: &CorrespondenceField,
    roi_margin: usize,
) -> Result<CorrespondenceField> {
    check_depth(target, reference, "match_fine")?;
    if target.stride != 1 || reference.stride != 1 {
        return Err(shape_err!("match_fine expects stride-1 feature maps"));
    }
    let r = coarse.stride;
    if target.height.div_ceil(r) != coarse.height || target.width.div_ceil(r) != coarse.width {
        return Err(shape_err!(
            "coarse field {}x{} (stride {r}) does not cover the {}x{} target",
            coarse.height,
            coarse.width,
            target.height,
            target.width
        ));
    }
    if reference.height.div_ceil(r) != coarse.source_height || reference.width.div_ceil(r) != coarse.source_width {
        return Err(shape_err!("coarse field does not cover the reference"));
    }
    let mut sources = Vec::with_capacity(target.height * target.width);
    let mut costs = Vec::with_capacity(sources.capacity());
    for y in 0..target.height {
        for x in 0..target.width {
            let (cy, cx) = coarse.source(y / r, x / r);
            let rows = cy.saturating_sub(roi_margin) * r..((cy + roi_margin + 1) * r).min(reference.height);
            let cols = cx.saturating_sub(roi_margin) * r..((cx + roi_margin + 1) * r).min(reference.width);
            let (p, c) = argmin_in(reference, target.descriptor(y, x), rows, cols);
            sources.push(p);
            costs.push(c);
        }
    }
    let mut field = CorrespondenceField::new(target.height, target.width, reference.height, reference.width, sources)?;
    field.costs = costs;
    Ok(field)
}

/// Gathers reference colors at the matched positions.
pub fn transfer_colors(reference: &Image, field: &CorrespondenceField) -> Result<Image> {
    if field.stride != 1 {
        return Err(contract_err!("transfer_colors needs a per-pixel field, got stride {}", field.stride));
    }
    if field.source_dims() != reference.dims() {
        return Err(contract_err!(
            "field points into a {}x{} image but the reference is {}x{}",
            field.source_height,
            field.source_width,
            reference.height(),
            reference.width()
        ));
    }
    let c = reference.channels();
    let mut data = Vec::with_capacity(field.sources.len() * c);
    for &(y, x) in &field.sources {
        data.extend_from_slice(reference.pixel(y, x));
    }
    Image::new(field.height, field.width, reference.space(), data)
}

/// Reference frame with its descriptors computed once.
pub struct GlobalTransfer {
    extractor: SharedExtractor,
    reference: Image,
    coarse: FeatureMap,
    fine: FeatureMap,
    roi_margin: usize,
}

impl GlobalTransfer {
    pub fn new(extractor: SharedExtractor, g1: &Image, i1: &Image, roi_margin: usize) -> Result<Self> {
        g1.expect_space(ColorSpace::Gray, "global_transfer")?;
        i1.expect_space(ColorSpace::Rgb, "global_transfer")?;
        g1.check_same_dims(i1, "global_transfer")?;
        Ok(GlobalTransfer {
            reference: i1.clone(),
            coarse: extractor.extract(g1, 1, FeatureLevel::Coarse)?,
            fine: extractor.extract(g1, 1, FeatureLevel::Fine)?,
            extractor,
            roi_margin,
        })
    }

    pub fn correspondences(&self, gk: &Image, frame: usize) -> Result<CorrespondenceField> {
        gk.expect_space(ColorSpace::Gray, "global_transfer")?;
        let coarse = match_coarse(&self.extractor.extract(gk, frame, FeatureLevel::Coarse)?, &self.coarse)?;
        match_fine(
            &self.extractor.extract(gk, frame, FeatureLevel::Fine)?,
            &self.fine,
            &coarse,
            self.roi_margin,
        )
    }

    /// Color estimate for gray frame `gk` (1-based index `frame`).
    pub fn roi_margin(&self) -> usize {
        self.roi_margin
    }

    pub fn extractor(&self) -> &SharedExtractor {
        &self.extractor
    }

    pub fn transfer(&self, gk: &Image, frame: usize) -> Result<Image> {
        transfer_colors(&self.reference, &self.correspondences(gk, frame)?)
    }
}

/// One-shot form of [`GlobalTransfer`] with the default ROI margin.
pub fn global_transfer(
    extractor: SharedExtractor,
    g1: &Image,
    i1: &Image,
    gk: &Image,
    frame: usize,
) -> Result<Image> {
    GlobalTransfer::new(extractor, g1, i1, DEFAULT_ROI_MARGIN)?.transfer(gk, frame)
}
