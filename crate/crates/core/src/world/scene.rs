use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Color, Material, Shape, SizeClass, WorldError};

/// Pixel box with top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (
            f64::from(self.x) + f64::from(self.w) / 2.0,
            f64::from(self.y) + f64::from(self.h) / 2.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub material: Material,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: u32,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    /// Center of `obj` normalized by the canvas.
    pub fn norm_center(&self, obj: &SceneObject) -> (f64, f64) {
        let (cx, cy) = obj.bbox.center();
        (cx / f64::from(self.width), cy / f64::from(self.height))
    }

    /// Checks the bbox-in-canvas, unique-id and separation invariants.
    pub fn validate(&self, cfg: &WorldConfig) -> Result<(), WorldError> {
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err(WorldError::Invalid(format!(
                "image {}: duplicate object ids",
                self.image_id
            )));
        }
        for o in &self.objects {
            let b = o.bbox;
            if b.w == 0 || b.h == 0 || b.x + b.w > self.width || b.y + b.h > self.height {
                return Err(WorldError::Invalid(format!(
                    "image {}: object {} leaves the canvas",
                    self.image_id, o.id
                )));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let (ax, ay) = a.bbox.center();
                let (bx, by) = b.bbox.center();
                let dist = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                if dist < cfg.min_sep
                    || (ax - bx).abs() < cfg.min_axis_gap
                    || (ay - by).abs() < cfg.min_axis_gap
                {
                    return Err(WorldError::Invalid(format!(
                        "image {}: objects {} and {} too close",
                        self.image_id, a.id, b.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scene generator settings. Sizes are inclusive pixel ranges for both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// minimum Euclidean distance between object centers (pixels)
    pub min_sep: f64,
    /// minimum |Δx| and |Δy| between object centers (pixels)
    pub min_axis_gap: f64,
    pub small_extent: (u32, u32),
    pub large_extent: (u32, u32),
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 224,
            height: 224,
            min_objects: 3,
            max_objects: 8,
            min_sep: 20.0,
            min_axis_gap: 16.0,
            small_extent: (16, 28),
            large_extent: (36, 52),
            max_retries: 100,
        }
    }
}

impl WorldConfig {
    pub fn check(&self) -> Result<(), WorldError> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(WorldError::Config(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.width < 64 || self.height < 64 {
            return Err(WorldError::Config(format!(
                "canvas {}x{} smaller than 64x64",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.large_extent;
        let (slo, shi) = self.small_extent;
        if slo == 0 || slo > shi || lo > hi || shi > hi || hi >= self.width.min(self.height) {
            return Err(WorldError::Config(
                "object extents inconsistent with canvas".into(),
            ));
        }
        Ok(())
    }

    fn extent(&self, size: SizeClass) -> (u32, u32) {
        match size {
            SizeClass::Small => self.small_extent,
            SizeClass::Large => self.large_extent,
        }
    }
}

/// `n` positions in `[lo, hi]` with pairwise spacing at least `gap`, uniform
/// over such configurations, in random order.
fn spaced_positions<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64, gap: f64) -> Option<Vec<f64>> {
    let slack = (hi - lo) - gap * (n.saturating_sub(1)) as f64;
    if slack < 0.0 {
        return None;
    }
    let mut base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=slack)).collect();
    base.sort_by(f64::total_cmp);
    let mut pos: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, b)| lo + b + gap * i as f64)
        .collect();
    pos.shuffle(rng);
    Some(pos)
}

fn pick<T: Copy, R: Rng>(rng: &mut R, all: &[T]) -> T {
    all[rng.gen_range(0..all.len())]
}

/// Samples a scene: count uniform in `[min, max]`, attributes uniform,
/// centers drawn with per-axis spacing and then checked against every
/// separation constraint (retrying up to `max_retries` times).
pub fn gen_scene<R: Rng>(
    rng: &mut R,
    cfg: &WorldConfig,
    image_id: u32,
) -> Result<SceneGraph, WorldError> {
    cfg.check()?;
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = (0..n)
        .map(|id| {
            let size = pick(rng, &SizeClass::ALL);
            let (lo, hi) = cfg.extent(size);
            SceneObject {
                id: id as u32,
                shape: pick(rng, &Shape::ALL),
                color: pick(rng, &Color::ALL),
                size,
                material: pick(rng, &Material::ALL),
                bbox: BBox {
                    x: 0,
                    y: 0,
                    w: rng.gen_range(lo..=hi),
                    h: rng.gen_range(lo..=hi),
                },
            }
        })
        .collect();

    // Centers stay at least half the largest extent (plus rounding slack) from the border.
    let half = f64::from(cfg.large_extent.1) / 2.0 + 1.0;
    for _ in 0..cfg.max_retries.max(1) {
        let xs = spaced_positions(
            rng,
            n,
            half,
            f64::from(cfg.width) - half,
            cfg.min_axis_gap + 1.0,
        );
        let ys = spaced_positions(
            rng,
            n,
            half,
            f64::from(cfg.height) - half,
            cfg.min_axis_gap + 1.0,
        );
        let (Some(xs), Some(ys)) = (xs, ys) else {
            return Err(WorldError::Config(format!(
                "{n} objects cannot be separated by {} px on a {}x{} canvas",
                cfg.min_axis_gap, cfg.width, cfg.height
            )));
        };
        for (o, (cx, cy)) in objects.iter_mut().zip(xs.into_iter().zip(ys)) {
            let x = (cx - f64::from(o.bbox.w) / 2.0).round().max(0.0) as u32;
            let y = (cy - f64::from(o.bbox.h) / 2.0).round().max(0.0) as u32;
            o.bbox.x = x.min(cfg.width - o.bbox.w);
            o.bbox.y = y.min(cfg.height - o.bbox.h);
        }
        let scene = SceneGraph {
            image_id,
            width: cfg.width,
            height: cfg.height,
            objects: objects.clone(),
        };
        if scene.validate(cfg).is_ok() {
            return Ok(scene);
        }
    }
    Err(WorldError::Config(format!(
        "no separated layout for {n} objects after {} retries",
        cfg.max_retries
    )))
}

/// `(x + w/2)/W, (y + h/2)/H, w/W, h/H`.
pub fn bbox_normalize(bbox: BBox, width: f64, height: f64) -> Result<[f64; 4], WorldError> {
    if width <= 0.0 || height <= 0.0 || !width.is_finite() || !height.is_finite() {
        return Err(WorldError::Parameter(format!(
            "canvas {width}x{height} must be positive"
        )));
    }
    let (x, y, w, h) = (
        f64::from(bbox.x),
        f64::from(bbox.y),
        f64::from(bbox.w),
        f64::from(bbox.h),
    );
    Ok([
        (x + w / 2.0) / width,
        (y + h / 2.0) / height,
        w / width,
        h / height,
    ])
}
