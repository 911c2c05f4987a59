//! Dataset format, PNG storage, and a synthetic video-scene generator that
//! emits mutually consistent panoptic, depth, and track ground truth.
//!
//! On-disk layout per sequence:
//! `<root>/<sequence_id>/{image,panoptic,depth}/<frame:06d>.png` plus a
//! `manifest.json` holding the class table, depth scale, and frame list.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for unlabeled pixels in encoded panoptic maps. Class ids are
/// capped at 64 so encoded ids (class*1000 + instance) never collide with it.
pub const VOID: u32 = 65535;

/// Largest representable instance index within one class.
pub const MAX_INSTANCE: u32 = 999;

/// Pack (class, instance) into a single panoptic id. Stuff uses instance 0.
pub fn encode_id(class_id: u32, instance: u32) -> u32 {
    debug_assert!(instance <= MAX_INSTANCE);
    class_id * 1000 + instance
}

/// Inverse of [`encode_id`].
pub fn decode_id(id: u32) -> (u32, u32) {
    (id / 1000, id % 1000)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

/// One segment of a panoptic map.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub encoded_id: u32,
    pub class_id: u32,
    pub instance_id: u32,
    /// Query that produced this segment (predictions only).
    pub query_index: Option<usize>,
    pub score: f64,
    pub area: usize,
}

/// Per-pixel encoded panoptic ids plus the segment table.
#[derive(Debug, Clone)]
pub struct PanopticMap {
    pub ids: Array2<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticMap {
    /// Build from an id map alone, deriving the segment table from the
    /// distinct non-void ids present.
    pub fn from_ids(ids: Array2<u32>) -> Self {
        let mut seen: Vec<(u32, usize)> = Vec::new();
        for &id in ids.iter() {
            if id == VOID {
                continue;
            }
            match seen.iter_mut().find(|(s, _)| *s == id) {
                Some((_, n)) => *n += 1,
                None => seen.push((id, 1)),
            }
        }
        seen.sort_unstable();
        let segments = seen
            .into_iter()
            .map(|(id, area)| {
                let (class_id, instance_id) = decode_id(id);
                Segment {
                    encoded_id: id,
                    class_id,
                    instance_id,
                    query_index: None,
                    score: 1.0,
                    area,
                }
            })
            .collect();
        PanopticMap { ids, segments }
    }

    pub fn height(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }
}

/// One annotated frame.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// RGB in [0,1], laid out `[3, H, W]`.
    pub image: Array3<f32>,
    /// Encoded panoptic ids (see [`encode_id`]), [`VOID`] where unlabeled.
    pub panoptic_gt: Array2<u32>,
    /// Metric depth in meters; 0 marks invalid/missing pixels.
    pub depth_gt: Array2<f32>,
    pub frame_index: usize,
    pub sequence_id: String,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Per-sequence metadata stored as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sequence_id: String,
    /// Frame file names in temporal order, shared by all three subdirs.
    pub frames: Vec<String>,
    pub class_table: Vec<ClassDef>,
    /// Stored-integer-to-meters divisor for depth PNGs.
    pub depth_scale: f64,
    pub num_classes: u32,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl SequenceManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: SequenceManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(&path, format!("bad manifest: {e}")))?;
        m.dir = dir.to_path_buf();
        m.validate(&path)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 64 {
            return Err(Error::data(
                path,
                format!("num_classes {} outside supported range 1..=64", self.num_classes),
            ));
        }
        if self.class_table.len() != self.num_classes as usize {
            return Err(Error::data(
                path,
                format!(
                    "class_table has {} entries but num_classes = {}",
                    self.class_table.len(),
                    self.num_classes
                ),
            ));
        }
        if self.depth_scale <= 0.0 {
            return Err(Error::data(path, "depth_scale must be positive".to_string()));
        }
        Ok(())
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        self.class_table
            .iter()
            .find(|c| c.id == class_id)
            .map(|c| c.is_thing)
            .unwrap_or(false)
    }

    /// Load all frames in temporal order.
    pub fn load_frames(&self) -> Result<Vec<SceneSample>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, name)| self.load_frame(i, name))
            .collect()
    }

    fn load_frame(&self, index: usize, name: &str) -> Result<SceneSample> {
        let img_path = self.dir.join("image").join(name);
        let pan_path = self.dir.join("panoptic").join(name);
        let dep_path = self.dir.join("depth").join(name);

        let image = read_image_rgb(&img_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let pan = read_png_u16(&pan_path)?;
        if pan.dim() != (h, w) {
            return Err(Error::data(
                &pan_path,
                format!("panoptic size {:?} does not match image {h}x{w}", pan.dim()),
            ));
        }
        let dep_raw = read_png_u16(&dep_path)?;
        if dep_raw.dim() != (h, w) {
            return Err(Error::data(
                &dep_path,
                format!("depth size {:?} does not match image {h}x{w}", dep_raw.dim()),
            ));
        }
        let scale = self.depth_scale as f32;
        let depth_gt = dep_raw.mapv(|v| v as f32 / scale);
        let panoptic_gt = pan.mapv(|v| v as u32);
        Ok(SceneSample {
            image,
            panoptic_gt,
            depth_gt,
            frame_index: index,
            sequence_id: self.sequence_id.clone(),
        })
    }
}

/// Write a sequence (PNGs + manifest) under `dir`, creating subdirectories.
pub fn write_sequence(dir: &Path, manifest: &SequenceManifest, samples: &[SceneSample]) -> Result<()> {
    assert_eq!(manifest.frames.len(), samples.len());
    for sub in ["image", "panoptic", "depth"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (name, s) in manifest.frames.iter().zip(samples) {
        write_image_rgb(&dir.join("image").join(name), &s.image)?;
        let pan = s.panoptic_gt.mapv(|v| {
            debug_assert!(v == VOID || v < 65000, "panoptic id {v} exceeds u16 range");
            v as u16
        });
        write_png_u16(&dir.join("panoptic").join(name), &pan)?;
        let scale = manifest.depth_scale as f32;
        let dep = s.depth_gt.mapv(|m| {
            let v = (m * scale).round();
            debug_assert!((0.0..=65535.0).contains(&v), "depth {m} out of range");
            v as u16
        });
        write_png_u16(&dir.join("depth").join(name), &dep)?;
    }
    manifest.save(dir)
}

/// Sequence directories under `root` (those containing a manifest), sorted.
pub fn discover_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no sequences found (no manifest.json in any subdirectory)".to_string()));
    }
    Ok(dirs)
}

// ---- PNG primitives ----

fn read_image_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn write_image_rgb(path: &Path, arr: &Array3<f32>) -> Result<()> {
    let (_, h, w) = (arr.shape()[0], arr.shape()[1], arr.shape()[2]);
    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let v = arr[[c, y as usize, x as usize]];
            rgb[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(rgb);
    }
    img.save(path)
        .map_err(|e| Error::data(path, format!("cannot write image: {e}")))
}

fn read_png_u16(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, format!("cannot decode png: {e}")))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u16>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

fn write_png_u16(path: &Path, arr: &Array2<u16>) -> Result<()> {
    let (h, w) = arr.dim();
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = Luma([arr[[y as usize, x as usize]]]);
    }
    img.save(path)
        .map_err(|e| Error::data(path, format!("cannot write png: {e}")))
}

// ---- synthetic generator ----

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Depth range things are sampled from, meters.
    pub object_depth: (f64, f64),
    /// Depth range of background bands, meters; placed behind all things.
    pub background_depth: (f64, f64),
    /// Maximum per-frame translation of a thing, pixels.
    pub motion_amplitude: f64,
    pub num_stuff_classes: u32,
    pub num_thing_classes: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_sequences: 2,
            frames_per_sequence: 6,
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 4,
            object_depth: (2.0, 30.0),
            background_depth: (40.0, 80.0),
            motion_amplitude: 2.0,
            num_stuff_classes: 11,
            num_thing_classes: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.height < 64 || self.width < 64 {
            return err(format!("image size {}x{} below 64x64 minimum", self.height, self.width));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return err(format!(
                "object count range {}..={} invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.object_depth.0 <= 0.0 || self.object_depth.0 >= self.object_depth.1 {
            return err(format!("object depth range {:?} invalid", self.object_depth));
        }
        if self.background_depth.0 <= self.object_depth.1 {
            return err("background must lie behind all objects".to_string());
        }
        if self.background_depth.1 * 256.0 > 65535.0 {
            return err("depths beyond 255.99 m cannot be stored as 16-bit / 256".to_string());
        }
        if self.num_stuff_classes == 0 || self.num_thing_classes == 0 {
            return err("need at least one stuff and one thing class".to_string());
        }
        if self.num_stuff_classes + self.num_thing_classes > 64 {
            return err("at most 64 classes supported".to_string());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> u32 {
        self.num_stuff_classes + self.num_thing_classes
    }

    /// Stuff classes occupy ids `0..num_stuff`, things follow.
    pub fn class_table(&self) -> Vec<ClassDef> {
        let mut table = Vec::new();
        for i in 0..self.num_stuff_classes {
            table.push(ClassDef { id: i, name: format!("stuff_{i:02}"), is_thing: false });
        }
        for i in 0..self.num_thing_classes {
            table.push(ClassDef {
                id: self.num_stuff_classes + i,
                name: format!("thing_{i:02}"),
                is_thing: true,
            });
        }
        table
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone)]
struct SceneObject {
    class_id: u32,
    instance: u32,
    depth: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    shape: Shape,
    color: [f32; 3],
}

#[derive(Debug, Clone)]
struct Band {
    class_id: u32,
    /// Row range [top, bottom).
    top: usize,
    bottom: usize,
    depth_top: f64,
    depth_bottom: f64,
    color: [f32; 3],
}

/// Deterministic per-class base color (golden-ratio hue walk).
fn class_color(class_id: u32, is_thing: bool) -> [f32; 3] {
    let hue = (class_id as f64 * 0.618_033_988_75).fract();
    let (s, v) = if is_thing { (0.75, 0.85) } else { (0.35, 0.55) };
    hsv_to_rgb(hue, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor() as i32 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Generate one sequence in memory. `seq_index` selects an independent RNG
/// stream so sequences can be produced in any order.
pub fn generate_sequence(cfg: &SynthConfig, seq_index: usize) -> Result<(SequenceManifest, Vec<SceneSample>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(seq_index as u64 + 1);
    let sequence_id = format!("seq_{seq_index:04}");
    let (h, w) = (cfg.height, cfg.width);

    // Background: 2-3 horizontal bands of distinct stuff classes, each with a
    // vertical depth gradient.
    let num_bands = rng.gen_range(2..=3usize.min(cfg.num_stuff_classes as usize));
    let mut stuff_ids: Vec<u32> = (0..cfg.num_stuff_classes).collect();
    for i in (1..stuff_ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        stuff_ids.swap(i, j);
    }
    let mut cuts = vec![0usize, h];
    for _ in 0..num_bands - 1 {
        cuts.push(rng.gen_range(h / 4..3 * h / 4));
    }
    cuts.sort_unstable();
    cuts.dedup();
    let mut bands = Vec::new();
    for (bi, win) in cuts.windows(2).enumerate() {
        let class_id = stuff_ids[bi % stuff_ids.len()];
        let d0 = rng.gen_range(cfg.background_depth.0..cfg.background_depth.1);
        let d1 = rng.gen_range(cfg.background_depth.0..cfg.background_depth.1);
        bands.push(Band {
            class_id,
            top: win[0],
            bottom: win[1],
            depth_top: d0,
            depth_bottom: d1,
            color: class_color(class_id, false),
        });
    }

    // Things: constant depth, constant velocity, distinct depths.
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::new();
    for i in 0..n_obj {
        let class_id = cfg.num_stuff_classes + rng.gen_range(0..cfg.num_thing_classes);
        let mut depth;
        loop {
            depth = rng.gen_range(cfg.object_depth.0..cfg.object_depth.1);
            if objects.iter().all(|o| (o.depth - depth).abs() > 0.1) {
                break;
            }
        }
        let min_dim = h.min(w) as f64;
        let size = rng.gen_range(min_dim / 8.0..min_dim / 4.0);
        let shape = if rng.gen_bool(0.5) {
            Shape::Circle { radius: size }
        } else {
            Shape::Rect {
                half_w: size * rng.gen_range(0.7..1.3),
                half_h: size * rng.gen_range(0.7..1.3),
            }
        };
        let base = class_color(class_id, true);
        let jitter = rng.gen_range(-0.12..0.12) as f32;
        let color = [
            (base[0] + jitter).clamp(0.05, 1.0),
            (base[1] - jitter).clamp(0.05, 1.0),
            (base[2] + jitter * 0.5).clamp(0.05, 1.0),
        ];
        objects.push(SceneObject {
            class_id,
            instance: (i + 1) as u32,
            depth,
            cx: rng.gen_range(w as f64 * 0.2..w as f64 * 0.8),
            cy: rng.gen_range(h as f64 * 0.2..h as f64 * 0.8),
            vx: rng.gen_range(-cfg.motion_amplitude..=cfg.motion_amplitude),
            vy: rng.gen_range(-cfg.motion_amplitude..=cfg.motion_amplitude),
            shape,
            color,
        });
    }

    let mut samples = Vec::new();
    for frame in 0..cfg.frames_per_sequence {
        samples.push(render_frame(cfg, &bands, &objects, frame, &sequence_id));
        for o in objects.iter_mut() {
            o.cx += o.vx;
            o.cy += o.vy;
            // Bounce off frame edges so objects stay mostly visible.
            if o.cx < w as f64 * 0.1 || o.cx > w as f64 * 0.9 {
                o.vx = -o.vx;
            }
            if o.cy < h as f64 * 0.1 || o.cy > h as f64 * 0.9 {
                o.vy = -o.vy;
            }
        }
    }

    let manifest = SequenceManifest {
        sequence_id,
        frames: (0..cfg.frames_per_sequence).map(|i| format!("{i:06}.png")).collect(),
        class_table: cfg.class_table(),
        depth_scale: 256.0,
        num_classes: cfg.num_classes(),
        dir: PathBuf::new(),
    };
    Ok((manifest, samples))
}

fn render_frame(
    cfg: &SynthConfig,
    bands: &[Band],
    objects: &[SceneObject],
    frame: usize,
    sequence_id: &str,
) -> SceneSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut pan = Array2::<u32>::from_elem((h, w), VOID);
    let mut depth = Array2::<f32>::zeros((h, w));

    for band in bands {
        for y in band.top..band.bottom {
            let t = if band.bottom > band.top + 1 {
                (y - band.top) as f64 / (band.bottom - band.top - 1) as f64
            } else {
                0.0
            };
            let d = band.depth_top + t * (band.depth_bottom - band.depth_top);
            for x in 0..w {
                pan[[y, x]] = encode_id(band.class_id, 0);
                depth[[y, x]] = d as f32;
                for c in 0..3 {
                    image[[c, y, x]] = band.color[c];
                }
            }
        }
    }

    // Far-to-near painting implements depth-order occlusion.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));
    for &oi in &order {
        let o = &objects[oi];
        let (x0, x1, y0, y1) = match o.shape {
            Shape::Circle { radius } => (
                (o.cx - radius).floor().max(0.0) as usize,
                ((o.cx + radius).ceil() as usize).min(w.saturating_sub(1)),
                (o.cy - radius).floor().max(0.0) as usize,
                ((o.cy + radius).ceil() as usize).min(h.saturating_sub(1)),
            ),
            Shape::Rect { half_w, half_h } => (
                (o.cx - half_w).floor().max(0.0) as usize,
                ((o.cx + half_w).ceil() as usize).min(w.saturating_sub(1)),
                (o.cy - half_h).floor().max(0.0) as usize,
                ((o.cy + half_h).ceil() as usize).min(h.saturating_sub(1)),
            ),
        };
        for y in y0..=y1.min(h - 1) {
            for x in x0..=x1.min(w - 1) {
                let inside = match o.shape {
                    Shape::Circle { radius } => {
                        let dx = x as f64 + 0.5 - o.cx;
                        let dy = y as f64 + 0.5 - o.cy;
                        dx * dx + dy * dy <= radius * radius
                    }
                    Shape::Rect { half_w, half_h } => {
                        (x as f64 + 0.5 - o.cx).abs() <= half_w
                            && (y as f64 + 0.5 - o.cy).abs() <= half_h
                    }
                };
                if !inside {
                    continue;
                }
                pan[[y, x]] = encode_id(o.class_id, o.instance);
                depth[[y, x]] = o.depth as f32;
                for c in 0..3 {
                    image[[c, y, x]] = o.color[c];
                }
            }
        }
    }

    SceneSample {
        image,
        panoptic_gt: pan,
        depth_gt: depth,
        frame_index: frame,
        sequence_id: sequence_id.to_string(),
    }
}

/// Generate and write a whole dataset under `root`.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<SequenceManifest>> {
    cfg.validate()?;
    let mut manifests = Vec::new();
    for s in 0..cfg.num_sequences {
        let (mut manifest, samples) = generate_sequence(cfg, s)?;
        let dir = root.join(&manifest.sequence_id);
        write_sequence(&dir, &manifest, &samples)?;
        manifest.dir = dir;
        manifests.push(manifest);
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_sequences: 1,
            frames_per_sequence: 4,
            height: 64,
            width: 64,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let cfg = small_cfg();
        let (_, a) = generate_sequence(&cfg, 0).unwrap();
        let (_, b) = generate_sequence(&cfg, 0).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.panoptic_gt, sb.panoptic_gt);
            assert_eq!(sa.depth_gt, sb.depth_gt);
            assert_eq!(sa.image, sb.image);
        }
        let (_, c) = generate_sequence(&cfg, 1).unwrap();
        assert_ne!(a[0].panoptic_gt, c[0].panoptic_gt, "streams should differ");
    }

    #[test]
    fn zero_motion_scene_is_static() {
        let cfg = SynthConfig { motion_amplitude: 0.0, min_objects: 1, max_objects: 1, ..small_cfg() };
        let (_, samples) = generate_sequence(&cfg, 0).unwrap();
        for s in &samples[1..] {
            assert_eq!(s.panoptic_gt, samples[0].panoptic_gt);
        }
    }

    #[test]
    fn gt_is_mutually_consistent() {
        let cfg = small_cfg();
        let (manifest, samples) = generate_sequence(&cfg, 0).unwrap();
        for s in &samples {
            // Thing pixels carry their object's constant depth; every pixel
            // is labeled and has valid depth.
            let mut per_instance: std::collections::HashMap<u32, f32> = Default::default();
            for ((y, x), &id) in s.panoptic_gt.indexed_iter() {
                assert_ne!(id, VOID);
                let d = s.depth_gt[[y, x]];
                assert!(d > 0.0);
                let (class_id, inst) = decode_id(id);
                assert!(class_id < manifest.num_classes);
                if manifest.is_thing(class_id) {
                    assert!(inst >= 1);
                    let e = per_instance.entry(id).or_insert(d);
                    assert_eq!(*e, d, "thing depth must be constant");
                } else {
                    assert_eq!(inst, 0);
                }
            }
        }
    }

    #[test]
    fn occlusion_keeps_nearer_object() {
        // Construct two overlapping objects directly.
        let cfg = SynthConfig { min_objects: 2, max_objects: 2, ..small_cfg() };
        let near = SceneObject {
            class_id: 11,
            instance: 1,
            depth: 5.0,
            cx: 32.0,
            cy: 32.0,
            vx: 0.0,
            vy: 0.0,
            shape: Shape::Circle { radius: 10.0 },
            color: [1.0, 0.0, 0.0],
        };
        let far = SceneObject {
            class_id: 12,
            instance: 2,
            depth: 10.0,
            cx: 36.0,
            cy: 32.0,
            vx: 0.0,
            vy: 0.0,
            shape: Shape::Circle { radius: 10.0 },
            color: [0.0, 1.0, 0.0],
        };
        let s = render_frame(&cfg, &[], &[near, far], 0, "t");
        // Center of the near object overlaps both; near one wins.
        assert_eq!(s.panoptic_gt[[32, 32]], encode_id(11, 1));
        assert_eq!(s.depth_gt[[32, 32]], 5.0);
    }

    #[test]
    fn write_load_roundtrip_bit_exact() {
        let cfg = small_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let manifests = generate_dataset(tmp.path(), &cfg).unwrap();
        assert_eq!(manifests.len(), 1);
        let loaded = SequenceManifest::load(&manifests[0].dir).unwrap();
        assert_eq!(loaded.num_classes, cfg.num_classes());
        let frames = loaded.load_frames().unwrap();
        let (_, orig) = generate_sequence(&cfg, 0).unwrap();
        assert_eq!(frames.len(), orig.len());
        for (a, b) in frames.iter().zip(&orig) {
            assert_eq!(a.panoptic_gt, b.panoptic_gt);
            // Depth quantized to 1/256 m steps on disk.
            for (da, db) in a.depth_gt.iter().zip(b.depth_gt.iter()) {
                assert!((da - db).abs() <= 0.5 / 256.0 + 1e-6);
            }
            // Image round-trips through u8 exactly once generated from u8.
            for (ia, ib) in a.image.iter().zip(b.image.iter()) {
                assert!((ia - ib).abs() <= 0.5 / 255.0 + 1e-6);
            }
            assert_eq!(a.frame_index, b.frame_index);
        }
        // Second write of the loaded data reproduces files bit-exactly.
        let tmp2 = tempfile::tempdir().unwrap();
        let dir2 = tmp2.path().join(&loaded.sequence_id);
        write_sequence(&dir2, &loaded, &frames).unwrap();
        for sub in ["image", "panoptic", "depth"] {
            for name in &loaded.frames {
                let f1 = std::fs::read(manifests[0].dir.join(sub).join(name)).unwrap();
                let f2 = std::fs::read(dir2.join(sub).join(name)).unwrap();
                assert_eq!(f1, f2, "{sub}/{name} differs");
            }
        }
    }

    #[test]
    fn missing_file_errors_name_the_path() {
        let cfg = small_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let manifests = generate_dataset(tmp.path(), &cfg).unwrap();
        let victim = manifests[0].dir.join("depth").join("000001.png");
        std::fs::remove_file(&victim).unwrap();
        let loaded = SequenceManifest::load(&manifests[0].dir).unwrap();
        let err = loaded.load_frames().unwrap_err();
        assert!(err.to_string().contains("000001.png"), "{err}");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SynthConfig { height: 32, ..small_cfg() }.validate().is_err());
        assert!(SynthConfig { min_objects: 0, ..small_cfg() }.validate().is_err());
        assert!(SynthConfig { min_objects: 5, max_objects: 2, ..small_cfg() }.validate().is_err());
        assert!(
            SynthConfig { background_depth: (10.0, 20.0), ..small_cfg() }
                .validate()
                .is_err(),
            "background in front of objects must be rejected"
        );
    }

    #[test]
    fn encode_decode_roundtrip() {
        for class in [0u32, 5, 18, 63] {
            for inst in [0u32, 1, 42, 999] {
                assert_eq!(decode_id(encode_id(class, inst)), (class, inst));
            }
        }
    }
}
