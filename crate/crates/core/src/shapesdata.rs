//! Synthetic shape-detection dataset: random circles, squares, and
//! triangles on textured backgrounds, annotated with tight pixel-extent
//! boxes. Images are 3x64x64 planar RGB bytes; everything is a pure
//! function of the generation seed.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{iou, BoxXyxy, GtBox};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CANVAS: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
const PLANE: usize = CANVAS * CANVAS;
/// Byte size of one raw planar image file.
pub const IMAGE_BYTES: usize = 3 * PLANE;
/// Placement keeps pairwise box IoU at or below this, so matching stays
/// unambiguous.
const MAX_OVERLAP: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct ShapesSample {
    pub id: u64,
    /// Planar RGB, channel-major, `3*64*64` bytes.
    pub pixels: Vec<u8>,
    pub boxes: Vec<GtBox>,
}

impl ShapesSample {
    /// `1 x 3 x 64 x 64` tensor with pixel values in [0,1].
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data: Vec<S> = self.pixels.iter().map(|&b| S::fromf(b as f64 / 255.0)).collect();
        Tensor::from_vec(&[1, 3, CANVAS, CANVAS], data).unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
struct ShapeSpec {
    class: usize,
    x0: usize,
    y0: usize,
    side: usize,
}

impl ShapeSpec {
    fn nominal_box(&self) -> BoxXyxy {
        BoxXyxy::new(
            self.x0 as f64 / CANVAS as f64,
            self.y0 as f64 / CANVAS as f64,
            (self.x0 + self.side) as f64 / CANVAS as f64,
            (self.y0 + self.side) as f64 / CANVAS as f64,
        )
    }
}

/// Rasterize one shape; `true` marks covered pixels. Pixel centers are
/// tested, so extents are tight to within one pixel.
fn rasterize(spec: &ShapeSpec) -> Vec<bool> {
    let mut mask = vec![false; PLANE];
    let s = spec.side as f64;
    for dy in 0..spec.side {
        for dx in 0..spec.side {
            let px = spec.x0 + dx;
            let py = spec.y0 + dy;
            let x = dx as f64 + 0.5;
            let y = dy as f64 + 0.5;
            let inside = match spec.class {
                0 => {
                    let r = s / 2.0;
                    (x - r).powi(2) + (y - r).powi(2) <= r * r
                }
                1 => true,
                _ => {
                    // isoceles triangle: apex top-center, base at the bottom
                    let half = s / 2.0;
                    let slope = (x - half).abs() / half;
                    y / s >= slope
                }
            };
            if inside {
                mask[py * CANVAS + px] = true;
            }
        }
    }
    mask
}

fn mask_extent_box(mask: &[bool]) -> Option<BoxXyxy> {
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            if mask[y * CANVAS + x] {
                any = true;
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let f = CANVAS as f64;
    Some(BoxXyxy::new(
        xmin as f64 / f,
        ymin as f64 / f,
        (xmax + 1) as f64 / f,
        (ymax + 1) as f64 / f,
    ))
}

fn draw_background(pixels: &mut [u8], rng: &mut ChaCha8Rng) {
    // smooth two-corner gradient per channel plus low-amplitude noise
    for c in 0..3 {
        let a = rng.random_range(40.0..120.0_f64);
        let b = rng.random_range(40.0..120.0_f64);
        let horizontal: bool = rng.random();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let t = if horizontal { x } else { y } as f64 / (CANVAS - 1) as f64;
                let base = a + (b - a) * t;
                let noise = rng.random_range(-12.0..12.0);
                pixels[c * PLANE + y * CANVAS + x] = (base + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
}

fn sample_side(rng: &mut ChaCha8Rng) -> usize {
    // 40% small, 40% medium, 20% large; ranges keep rendered extents
    // safely inside their pixel-area bucket
    let r: f64 = rng.random();
    if r < 0.4 {
        rng.random_range(6..=11)
    } else if r < 0.8 {
        rng.random_range(13..=29)
    } else {
        rng.random_range(31..=44)
    }
}

/// Generate one sample; consumes a deterministic slice of the rng
/// stream.
pub fn synthesize_sample(id: u64, rng: &mut ChaCha8Rng) -> ShapesSample {
    let mut pixels = vec![0u8; IMAGE_BYTES];
    draw_background(&mut pixels, rng);

    let count = rng.random_range(1..=6);
    let mut specs: Vec<ShapeSpec> = Vec::new();
    for _ in 0..count {
        for _try in 0..40 {
            let class = rng.random_range(0..NUM_CLASSES);
            let side = sample_side(rng);
            let x0 = rng.random_range(0..=CANVAS - side);
            let y0 = rng.random_range(0..=CANVAS - side);
            let spec = ShapeSpec { class, x0, y0, side };
            let nb = spec.nominal_box();
            if specs.iter().all(|s| iou(&s.nominal_box(), &nb) <= MAX_OVERLAP) {
                specs.push(spec);
                break;
            }
        }
    }

    let mut boxes = Vec::new();
    for spec in &specs {
        // bright fill so shapes separate from the muted background
        let color: [u8; 3] = [
            rng.random_range(100..=255),
            rng.random_range(100..=255),
            rng.random_range(100..=255),
        ];
        let mask = rasterize(spec);
        for (i, &on) in mask.iter().enumerate() {
            if on {
                for c in 0..3 {
                    pixels[c * PLANE + i] = color[c];
                }
            }
        }
        let bbox = mask_extent_box(&mask).expect("shape rasterized empty");
        boxes.push(GtBox { class: spec.class, bbox });
    }

    ShapesSample { id, pixels, boxes }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub checksum: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn image_file_name(id: u64) -> String {
    format!("images/sample_{:05}.rgb", id)
}

/// Write `n` samples under `path`: raw image files, one annotation
/// file, and a checksummed manifest. Identical (n, seed) inputs produce
/// identical bytes.
pub fn generate_dataset(n: usize, seed: u64, path: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample".to_string()));
    }
    fs::create_dir_all(path.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::default();
    let mut ann = String::new();
    for id in 0..n as u64 {
        let sample = synthesize_sample(id, &mut rng);
        let file = image_file_name(id);
        fs::write(path.join(&file), &sample.pixels)?;
        for b in &sample.boxes {
            ann.push_str(&format!(
                "{} {} {:.6} {:.6} {:.6} {:.6}\n",
                id, b.class, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
            ));
        }
        manifest.entries.push(ManifestEntry {
            id,
            file,
            checksum: fnv1a64(&sample.pixels),
        });
    }
    fs::write(path.join("annotations.txt"), ann)?;
    let mut mf = fs::File::create(path.join("manifest.txt"))?;
    for e in &manifest.entries {
        writeln!(mf, "{} {} {:016x}", e.id, e.file, e.checksum)?;
    }
    Ok(manifest)
}

/// Lazy dataset view: the manifest and annotations live in memory,
/// image bytes load per sample and are checksum-verified.
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    annotations: HashMap<u64, Vec<GtBox>>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mf = fs::File::open(path.join("manifest.txt"))?;
        let mut manifest = Manifest::default();
        for (ln, line) in BufReader::new(mf).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::data(format!("manifest line {}: expected 3 fields", ln + 1)));
            }
            let id = parts[0]
                .parse()
                .map_err(|_| Error::data(format!("manifest line {}: bad id", ln + 1)))?;
            let checksum = u64::from_str_radix(parts[2], 16)
                .map_err(|_| Error::data(format!("manifest line {}: bad checksum", ln + 1)))?;
            manifest.entries.push(ManifestEntry { id, file: parts[1].to_string(), checksum });
        }

        let af = fs::File::open(path.join("annotations.txt"))?;
        let mut annotations: HashMap<u64, Vec<GtBox>> = HashMap::new();
        for (ln, line) in BufReader::new(af).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::data(format!(
                    "annotation line {}: expected 6 fields",
                    ln + 1
                )));
            }
            let bad = |what: &str| Error::data(format!("annotation line {}: bad {}", ln + 1, what));
            let id: u64 = parts[0].parse().map_err(|_| bad("sample id"))?;
            let class: usize = parts[1].parse().map_err(|_| bad("class"))?;
            let mut c = [0.0; 4];
            for (i, v) in c.iter_mut().enumerate() {
                *v = parts[2 + i].parse().map_err(|_| bad("coordinate"))?;
            }
            annotations.entry(id).or_default().push(GtBox {
                class,
                bbox: BoxXyxy::new(c[0], c[1], c[2], c[3]),
            });
        }

        Ok(Dataset { root: path.to_path_buf(), manifest, annotations })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn sample(&self, idx: usize) -> Result<ShapesSample> {
        let entry = &self.manifest.entries[idx];
        let pixels = fs::read(self.root.join(&entry.file))?;
        if pixels.len() != IMAGE_BYTES {
            return Err(Error::data(format!(
                "sample {}: image is {} bytes, expected {}",
                entry.id,
                pixels.len(),
                IMAGE_BYTES
            )));
        }
        let sum = fnv1a64(&pixels);
        if sum != entry.checksum {
            return Err(Error::data(format!(
                "sample {}: checksum mismatch (manifest {:016x}, file {:016x})",
                entry.id, entry.checksum, sum
            )));
        }
        Ok(ShapesSample {
            id: entry.id,
            pixels,
            boxes: self.annotations.get(&entry.id).cloned().unwrap_or_default(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<ShapesSample>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }
}

fn hflip(sample: &ShapesSample) -> ShapesSample {
    let mut pixels = sample.pixels.clone();
    for c in 0..3 {
        for y in 0..CANVAS {
            let row = &mut pixels[c * PLANE + y * CANVAS..c * PLANE + (y + 1) * CANVAS];
            row.reverse();
        }
    }
    let boxes = sample
        .boxes
        .iter()
        .map(|b| GtBox {
            class: b.class,
            bbox: BoxXyxy::new(1.0 - b.bbox.x2, b.bbox.y1, 1.0 - b.bbox.x1, b.bbox.y2),
        })
        .collect();
    ShapesSample { id: sample.id, pixels, boxes }
}

fn bilinear_crop_resize(pixels: &[u8], cx0: usize, cy0: usize, side: usize) -> Vec<u8> {
    if side == CANVAS {
        debug_assert_eq!((cx0, cy0), (0, 0));
        return pixels.to_vec();
    }
    let mut out = vec![0u8; IMAGE_BYTES];
    let scale = side as f64 / CANVAS as f64;
    for c in 0..3 {
        let plane = &pixels[c * PLANE..(c + 1) * PLANE];
        for oy in 0..CANVAS {
            for ox in 0..CANVAS {
                let sx = cx0 as f64 + (ox as f64 + 0.5) * scale - 0.5;
                let sy = cy0 as f64 + (oy as f64 + 0.5) * scale - 0.5;
                let x0 = sx.floor().clamp(0.0, (CANVAS - 1) as f64) as usize;
                let y0 = sy.floor().clamp(0.0, (CANVAS - 1) as f64) as usize;
                let x1 = (x0 + 1).min(CANVAS - 1);
                let y1 = (y0 + 1).min(CANVAS - 1);
                let fx = (sx - x0 as f64).clamp(0.0, 1.0);
                let fy = (sy - y0 as f64).clamp(0.0, 1.0);
                let v00 = plane[y0 * CANVAS + x0] as f64;
                let v01 = plane[y0 * CANVAS + x1] as f64;
                let v10 = plane[y1 * CANVAS + x0] as f64;
                let v11 = plane[y1 * CANVAS + x1] as f64;
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                out[c * PLANE + oy * CANVAS + ox] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Training-time augmentation: horizontal flip with probability 1/2,
/// then a random zoom crop (scale in [1/2, 1]) that keeps at least one
/// box center and at least one box above 10% of its original area.
/// Falls back to the (possibly flipped) identity after 50 failed tries.
pub fn augment(sample: &ShapesSample, rng: &mut ChaCha8Rng) -> ShapesSample {
    let flipped;
    let base = if rng.random_bool(0.5) {
        flipped = hflip(sample);
        &flipped
    } else {
        sample
    };

    for _ in 0..50 {
        let scale: f64 = rng.random_range(0.5..=1.0);
        let side = ((scale * CANVAS as f64).round() as usize).clamp(CANVAS / 2, CANVAS);
        let cx0 = rng.random_range(0..=CANVAS - side);
        let cy0 = rng.random_range(0..=CANVAS - side);
        if side == CANVAS {
            return base.clone();
        }

        let fx0 = cx0 as f64 / CANVAS as f64;
        let fy0 = cy0 as f64 / CANVAS as f64;
        let fside = side as f64 / CANVAS as f64;
        let center_kept = base.boxes.iter().any(|b| {
            let cx = 0.5 * (b.bbox.x1 + b.bbox.x2);
            let cy = 0.5 * (b.bbox.y1 + b.bbox.y2);
            cx >= fx0 && cx < fx0 + fside && cy >= fy0 && cy < fy0 + fside
        });
        if !center_kept {
            continue;
        }

        let mut boxes = Vec::new();
        for b in &base.boxes {
            let clipped = BoxXyxy::new(
                b.bbox.x1.max(fx0),
                b.bbox.y1.max(fy0),
                b.bbox.x2.min(fx0 + fside),
                b.bbox.y2.min(fy0 + fside),
            );
            if !clipped.is_valid() || clipped.area() < 0.1 * b.bbox.area() {
                continue;
            }
            boxes.push(GtBox {
                class: b.class,
                bbox: BoxXyxy::new(
                    (clipped.x1 - fx0) / fside,
                    (clipped.y1 - fy0) / fside,
                    (clipped.x2 - fx0) / fside,
                    (clipped.y2 - fy0) / fside,
                ),
            });
        }
        if boxes.is_empty() {
            continue;
        }

        return ShapesSample {
            id: base.id,
            pixels: bilinear_crop_resize(&base.pixels, cx0, cy0, side),
            boxes,
        };
    }
    base.clone()
}
