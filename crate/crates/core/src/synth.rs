//! Seeded synthetic video sequences with known motion and occlusions.
//!
//! Scenes are mosaics of Voronoi regions, each with its own color and its own
//! gray texture (an oriented grating plus fixed per-pixel noise), so that
//! both region-level and pixel-level structure are recognizable. Frames are
//! quantized to 8 bits so that in-memory sequences equal what is written.

use std::f32::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{ColorSpace, Image};
use crate::config::{positive, KeyValues};
use crate::error::{Error, Result};
use crate::io::{quantized, write_png, write_sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Static,
    /// Whole frame shifted by `(dx, dy)` per frame, wrapping around.
    Translate { dx: i32, dy: i32 },
    /// A textured square of side `size` crossing a static background
    /// horizontally at `speed` pixels per frame.
    Occlusion { speed: i32, size: usize },
    /// Camera moving by `(dx, dy)` per frame over a larger scene.
    Pan { dx: i32, dy: i32 },
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneKind::Static => write!(f, "static"),
            SceneKind::Translate { dx, dy } => write!(f, "translate:{dx}:{dy}"),
            SceneKind::Occlusion { speed, size } => write!(f, "occlusion:{speed}:{size}"),
            SceneKind::Pan { dx, dy } => write!(f, "pan:{dx}:{dy}"),
        }
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let int = |p: &str| p.parse::<i32>().map_err(|e| format!("`{p}`: {e}"));
        match parts.as_slice() {
            ["static"] => Ok(SceneKind::Static),
            ["translate", dx, dy] => Ok(SceneKind::Translate { dx: int(dx)?, dy: int(dy)? }),
            ["pan", dx, dy] => Ok(SceneKind::Pan { dx: int(dx)?, dy: int(dy)? }),
            ["occlusion", speed, size] => {
                let speed = int(speed)?;
                let size = size.parse::<usize>().map_err(|e| format!("`{size}`: {e}"))?;
                if speed == 0 || size == 0 {
                    return Err("occlusion speed and size must be nonzero".into());
                }
                Ok(SceneKind::Occlusion { speed, size })
            }
            _ => Err(format!(
                "unknown scene `{s}` (static, translate:DX:DY, pan:DX:DY, occlusion:SPEED:SIZE)"
            )),
        }
    }
}

impl SceneKind {
    pub fn label(&self) -> &'static str {
        match self {
            SceneKind::Static => "static",
            SceneKind::Translate { .. } => "translate",
            SceneKind::Occlusion { .. } => "occlusion",
            SceneKind::Pan { .. } => "pan",
        }
    }
}

/// Generator settings. `regions` is the number of Voronoi regions per
/// `height x width` area.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub regions: usize,
    pub scenes: Vec<SceneKind>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        use SceneKind::*;
        BenchmarkSpec {
            height: 64,
            width: 64,
            frames: 32,
            regions: 10,
            scenes: vec![
                Static,
                Translate { dx: 2, dy: 0 },
                Translate { dx: -1, dy: 2 },
                Occlusion { speed: 3, size: 22 },
                Occlusion { speed: -3, size: 20 },
                Pan { dx: 2, dy: 0 },
                Pan { dx: -1, dy: -1 },
                Static,
                Translate { dx: 0, dy: -3 },
                Occlusion { speed: 2, size: 18 },
            ],
        }
    }
}

impl BenchmarkSpec {
    /// Reads `height`, `width`, `frames`, `regions` and `scenes` keys; missing
    /// keys keep their defaults.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = BenchmarkSpec::default();
        let spec = BenchmarkSpec {
            height: positive("height", kv.take("height")?.unwrap_or(d.height))?,
            width: positive("width", kv.take("width")?.unwrap_or(d.width))?,
            frames: kv.take("frames")?.unwrap_or(d.frames),
            regions: positive("regions", kv.take("regions")?.unwrap_or(d.regions))?,
            scenes: kv.take_list("scenes")?.unwrap_or(d.scenes),
        };
        kv.finish()?;
        if spec.frames < 2 {
            return Err(Error::Config("a benchmark needs at least 2 frames per sequence".into()));
        }
        if spec.height < 8 || spec.width < 8 {
            return Err(Error::Config("benchmark frames must be at least 8x8".into()));
        }
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub kind: SceneKind,
    pub frames: Vec<Image>,
    /// Per frame, 1 where the background is hidden by the occluder.
    pub masks: Option<Vec<Image>>,
}

impl Sequence {
    /// First 1-based frame in which some pixel hidden in the previous frame
    /// becomes visible.
    pub fn disocclusion_frame(&self) -> Option<usize> {
        disocclusion_frame(self.masks.as_deref()?)
    }
}

pub fn disocclusion_frame(masks: &[Image]) -> Option<usize> {
    masks.windows(2).position(|w| {
        w[0].data().iter().zip(w[1].data()).any(|(&a, &b)| a > 0.5 && b <= 0.5)
    }).map(|i| i + 2)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(salt: u64, y: i64, x: i64) -> f32 {
    let h = splitmix(salt ^ splitmix((y as u64) << 32 ^ (x as u64 & 0xFFFF_FFFF)));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Color and texture of one region (or of the occluder).
#[derive(Clone, Debug)]
struct Material {
    color: [f32; 3],
    freq: f32,
    dir: (f32, f32),
    phase: f32,
    salt: u64,
}

impl Material {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let hue = rng.random_range(0.0..6.0f32);
        let sat = rng.random_range(0.45..0.9f32);
        let val = rng.random_range(0.7..1.0f32);
        let c = val * sat;
        let xx = c * (1.0 - ((hue % 2.0) - 1.0).abs());
        let (r, g, b) = match hue as u32 {
            0 => (c, xx, 0.0),
            1 => (xx, c, 0.0),
            2 => (0.0, c, xx),
            3 => (0.0, xx, c),
            4 => (xx, 0.0, c),
            _ => (c, 0.0, xx),
        };
        let m = val - c;
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        Material {
            color: [r + m, g + m, b + m],
            freq: rng.random_range(0.25..1.1f32),
            dir: (angle.cos(), angle.sin()),
            phase: rng.random_range(0.0..TAU),
            salt: rng.random(),
        }
    }

    /// Color at texture coordinates `(y, x)`.
    fn shade(&self, y: i64, x: i64) -> [f32; 3] {
        let t = (self.freq * (self.dir.0 * x as f32 + self.dir.1 * y as f32) + self.phase).sin();
        let tex = 0.5 + 0.3 * t + 0.4 * (hash_unit(self.salt, y, x) - 0.5);
        let s = 0.25 + 0.45 * tex;
        self.color.map(|c| c * s)
    }
}

/// Voronoi mosaic on a `height x width` canvas, optionally wrapping.
struct Mosaic {
    height: usize,
    width: usize,
    wrap: bool,
    seeds: Vec<(f32, f32)>,
    materials: Vec<Material>,
    light: Vec<Wave>,
}

/// One component of the illumination: whole cycles over the canvas, so it
/// tiles seamlessly on wrapping canvases.
#[derive(Clone, Copy, Debug)]
struct Wave {
    cycles: (f32, f32),
    phase: f32,
}

const LIGHT_WAVES: usize = 2;
const LIGHT_AMPLITUDE: f32 = 0.25;

impl Mosaic {
    fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, regions: usize, wrap: bool) -> Self {
        let seeds: Vec<_> = (0..regions.max(1))
            .map(|_| (rng.random_range(0.0..height as f32), rng.random_range(0.0..width as f32)))
            .collect();
        let materials = seeds.iter().map(|_| Material::random(rng)).collect();
        let light = (0..LIGHT_WAVES)
            .map(|_| Wave {
                cycles: (rng.random_range(-2..=2) as f32, rng.random_range(1..=2) as f32),
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        Mosaic {
            height,
            width,
            wrap,
            seeds,
            materials,
            light,
        }
    }

    fn region(&self, y: usize, x: usize) -> usize {
        let d = |a: f32, b: f32, period: usize| {
            let v = (a - b).abs();
            if self.wrap {
                v.min(period as f32 - v)
            } else {
                v
            }
        };
        let mut best = (f32::INFINITY, 0);
        for (i, &(sy, sx)) in self.seeds.iter().enumerate() {
            let dy = d(y as f32 + 0.5, sy, self.height);
            let dx = d(x as f32 + 0.5, sx, self.width);
            let dist = dy * dy + dx * dx;
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }

    /// Smooth brightness factor around 1, so that texture statistics vary
    /// across a region.
    fn light(&self, y: usize, x: usize) -> f32 {
        let (fy, fx) = (y as f32 / self.height as f32, x as f32 / self.width as f32);
        1.0 + self
            .light
            .iter()
            .map(|w| LIGHT_AMPLITUDE * (TAU * (w.cycles.0 * fy + w.cycles.1 * fx) + w.phase).sin())
            .sum::<f32>()
    }

    fn render(&self) -> Image {
        let mut img = Image::filled(self.height, self.width, ColorSpace::Rgb, &[0.0; 3]);
        for y in 0..self.height {
            for x in 0..self.width {
                let m = &self.materials[self.region(y, x)];
                let l = self.light(y, x);
                let c = m.shade(y as i64, x as i64).map(|v| (v * l).min(1.0));
                img.pixel_mut(y, x).copy_from_slice(&c);
            }
        }
        quantized(&img)
    }
}

fn crop_wrapped(canvas: &Image, top: i64, left: i64, h: usize, w: usize) -> Image {
    let (ch, cw) = (canvas.height() as i64, canvas.width() as i64);
    Image::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
        canvas.get((top + y as i64).rem_euclid(ch) as usize, (left + x as i64).rem_euclid(cw) as usize, c)
    })
}

fn generate_sequence(spec: &BenchmarkSpec, kind: SceneKind, rng: &mut ChaCha8Rng) -> (Vec<Image>, Option<Vec<Image>>) {
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    match kind {
        SceneKind::Static => {
            let frame = Mosaic::new(rng, h, w, spec.regions, false).render();
            (vec![frame; n], None)
        }
        SceneKind::Translate { dx, dy } => {
            let canvas = Mosaic::new(rng, h, w, spec.regions, true).render();
            let frames = (0..n as i64)
                .map(|t| crop_wrapped(&canvas, -t * dy as i64, -t * dx as i64, h, w))
                .collect();
            (frames, None)
        }
        SceneKind::Pan { dx, dy } => {
            let travel_y = dy.unsigned_abs() as usize * (n - 1);
            let travel_x = dx.unsigned_abs() as usize * (n - 1);
            let (ch, cw) = (h + travel_y, w + travel_x);
            let regions = (spec.regions * ch * cw).div_ceil(h * w);
            let canvas = Mosaic::new(rng, ch, cw, regions, false).render();
            // The camera moves by (dx, dy), so content moves by (-dx, -dy).
            let start_y = if dy < 0 { travel_y as i64 } else { 0 };
            let start_x = if dx < 0 { travel_x as i64 } else { 0 };
            let frames = (0..n as i64)
                .map(|t| crop_wrapped(&canvas, start_y + t * dy as i64, start_x + t * dx as i64, h, w))
                .collect();
            (frames, None)
        }
        SceneKind::Occlusion { speed, size } => {
            let background = Mosaic::new(rng, h, w, spec.regions, false).render();
            let occluder = Material::random(rng);
            let size = size.min(h.saturating_sub(2)).max(1);
            let top = rng.random_range(1..=(h - size - 1).max(1)) as i64;
            let mut frames = Vec::with_capacity(n);
            let mut masks = Vec::with_capacity(n);
            for t in 0..n as i64 {
                // Fully outside the frame at t = 0, entering from the side it moves away from.
                let left = if speed > 0 {
                    -(size as i64) + speed as i64 * t
                } else {
                    w as i64 + speed as i64 * t
                };
                let mut frame = background.clone();
                let mut mask = Image::filled(h, w, ColorSpace::Gray, &[0.0]);
                for y in top.max(0)..(top + size as i64).min(h as i64) {
                    for x in left.max(0)..(left + size as i64).min(w as i64) {
                        let (yu, xu) = (y as usize, x as usize);
                        frame.pixel_mut(yu, xu).copy_from_slice(&occluder.shade(y - top, x - left));
                        mask.pixel_mut(yu, xu)[0] = 1.0;
                    }
                }
                frames.push(quantized(&frame));
                masks.push(mask);
            }
            (frames, Some(masks))
        }
    }
}

/// Deterministic benchmark for `(spec, seed)`.
pub fn generate(spec: &BenchmarkSpec, seed: u64) -> Vec<Sequence> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    spec.scenes
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let (frames, masks) = generate_sequence(spec, kind, &mut rng);
            Sequence {
                name: format!("{:02}_{}", i + 1, kind.label()),
                kind,
                frames,
                masks,
            }
        })
        .collect()
}

/// Per sequence: frames, `masks/` for occlusion scenes, and a `scene` file
/// recording the kind and the first dis-occlusion frame.
pub fn write_benchmark(dir: &Path, sequences: &[Sequence]) -> Result<()> {
    for seq in sequences {
        let sdir = dir.join(&seq.name);
        write_sequence(&sdir, &seq.frames)?;
        let mut info = format!("kind = {}\n", seq.kind);
        if let Some(masks) = &seq.masks {
            let mdir = sdir.join("masks");
            std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            for (i, m) in masks.iter().enumerate() {
                write_png(&mdir.join(crate::io::frame_name(i + 1)), m)?;
            }
            if let Some(k) = seq.disocclusion_frame() {
                info.push_str(&format!("disocclusion = {k}\n"));
            }
        }
        let path = sdir.join("scene");
        std::fs::write(&path, info).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads the `scene` file written by [`write_benchmark`], if present.
pub fn read_scene_info(seq_dir: &Path) -> Result<Option<(SceneKind, Option<usize>)>> {
    let path = seq_dir.join("scene");
    if !path.exists() {
        return Ok(None);
    }
    let mut kv = KeyValues::read(&path)?;
    let kind = kv
        .take::<SceneKind>("kind")?
        .ok_or_else(|| Error::Format(format!("{}: missing `kind`", path.display())))?;
    let dis = kv.take("disocclusion")?;
    kv.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(Some((kind, dis)))
}
