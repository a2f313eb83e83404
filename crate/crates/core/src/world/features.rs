use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    bbox_normalize, Attribute, Color, Material, SceneGraph, SceneObject, Shape, SizeClass,
    WorldError,
};
use crate::autodiff::Tensor;
use crate::seed::rng_for;

/// Width of the concatenated one-hot attribute code.
pub const CODE_WIDTH: usize = Shape::COUNT + Color::COUNT + SizeClass::COUNT + Material::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Low,
    Med,
    High,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Low, Quality::Med, Quality::High];

    /// Feature noise standard deviation.
    pub fn sigma(self) -> f64 {
        match self {
            Quality::Low => 0.8,
            Quality::Med => 0.4,
            Quality::High => 0.15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Low => "low",
            Quality::Med => "med",
            Quality::High => "high",
        }
    }
}

impl std::str::FromStr for Quality {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(Quality::Low),
            "med" => Ok(Quality::Med),
            "high" => Ok(Quality::High),
            other => Err(WorldError::Parameter(format!(
                "unknown quality tag {other:?} (expected low|med|high)"
            ))),
        }
    }
}

impl std::fmt::Display for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One-hot(shape) ⊕ one-hot(color) ⊕ one-hot(size) ⊕ one-hot(material).
pub fn attribute_code(obj: &SceneObject) -> [f64; CODE_WIDTH] {
    let mut code = [0.0; CODE_WIDTH];
    let mut offset = 0;
    for (idx, count) in [
        (obj.shape.index(), Shape::COUNT),
        (obj.color.index(), Color::COUNT),
        (obj.size.index(), SizeClass::COUNT),
        (obj.material.index(), Material::COUNT),
    ] {
        code[offset + idx] = 1.0;
        offset += count;
    }
    code
}

/// Per-dataset projections of the attribute code: detection rows are
/// `P_det · code + noise`, spatial cells `P_sp · code + noise`. Both matrices
/// have orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpace {
    pub detection_dim: usize,
    pub grid: usize,
    pub channels: usize,
    /// `detection_dim × CODE_WIDTH`, row-major
    det_proj: Vec<f64>,
    /// `channels × CODE_WIDTH`, row-major
    sp_proj: Vec<f64>,
}

fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for c in &columns {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            columns.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut m = vec![0.0; rows * cols];
    for (j, c) in columns.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m[i * cols + j] = *v;
        }
    }
    m
}

fn project(proj: &[f64], code: &[f64; CODE_WIDTH], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = proj[i * CODE_WIDTH..(i + 1) * CODE_WIDTH]
            .iter()
            .zip(code)
            .map(|(p, c)| p * c)
            .sum();
    }
}

impl FeatureSpace {
    pub fn new(
        master_seed: u64,
        detection_dim: usize,
        grid: usize,
        channels: usize,
    ) -> Result<Self, WorldError> {
        if detection_dim < CODE_WIDTH {
            return Err(WorldError::Parameter(format!(
                "detection dim {detection_dim} below code width {CODE_WIDTH}"
            )));
        }
        if channels < CODE_WIDTH {
            return Err(WorldError::Parameter(format!(
                "spatial channels {channels} below code width {CODE_WIDTH}"
            )));
        }
        if grid < 4 {
            return Err(WorldError::Parameter(format!(
                "spatial grid {grid} must be at least 4"
            )));
        }
        let mut rng = rng_for(master_seed, "projection", 0);
        let det_proj = orthonormal_columns(&mut rng, detection_dim, CODE_WIDTH);
        let sp_proj = orthonormal_columns(&mut rng, channels, CODE_WIDTH);
        Ok(Self {
            detection_dim,
            grid,
            channels,
            det_proj,
            sp_proj,
        })
    }

    /// Desk-scale defaults: D = 64, G = 7, C = 32.
    pub fn standard(master_seed: u64) -> Self {
        Self::new(master_seed, 64, 7, 32).expect("valid defaults")
    }

    /// Nearest-attribute decode of a detection row: back-project with
    /// `P_detᵀ`, then argmax inside each one-hot group.
    pub fn decode_detection(&self, row: &[f64]) -> (Shape, Color, SizeClass, Material) {
        let mut code = [0.0; CODE_WIDTH];
        for (j, c) in code.iter_mut().enumerate() {
            *c = (0..self.detection_dim)
                .map(|i| self.det_proj[i * CODE_WIDTH + j] * row[i])
                .sum();
        }
        let argmax = |s: &[f64]| {
            s.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let mut off = 0;
        let mut next = |n: usize| {
            let i = argmax(&code[off..off + n]);
            off += n;
            i
        };
        let shape = Shape::ALL[next(Shape::COUNT)];
        let color = Color::ALL[next(Color::COUNT)];
        let size = SizeClass::ALL[next(SizeClass::COUNT)];
        let material = Material::ALL[next(Material::COUNT)];
        (shape, color, size, material)
    }
}

/// `N×D` detection matrix. Object positions never enter.
pub fn synth_detection_features<R: Rng>(
    space: &FeatureSpace,
    scene: &SceneGraph,
    sigma: f64,
    rng: &mut R,
) -> Tensor {
    let d = space.detection_dim;
    let n = scene.objects.len().max(1);
    let mut values = vec![0.0; n * d];
    for (row, obj) in values.chunks_exact_mut(d).zip(&scene.objects) {
        project(&space.det_proj, &attribute_code(obj), row);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Tensor::new(vec![n, d], values).expect("consistent shape")
}

/// Grid cells `(row, col)` whose pixel area intersects the object's bbox.
pub fn covered_cells(scene: &SceneGraph, obj: &SceneObject, grid: usize) -> Vec<(usize, usize)> {
    let cw = f64::from(scene.width) / grid as f64;
    let ch = f64::from(scene.height) / grid as f64;
    let b = obj.bbox;
    let (x0, x1) = (f64::from(b.x), f64::from(b.x + b.w));
    let (y0, y1) = (f64::from(b.y), f64::from(b.y + b.h));
    let mut cells = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let (cx0, cx1) = (c as f64 * cw, (c + 1) as f64 * cw);
            let (cy0, cy1) = (r as f64 * ch, (r + 1) as f64 * ch);
            if x0 < cx1 && x1 > cx0 && y0 < cy1 && y1 > cy0 {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// `G×G×C` grid: each cell sums the projected codes of the objects
/// overlapping it, plus noise.
pub fn synth_spatial_features<R: Rng>(
    space: &FeatureSpace,
    scene: &SceneGraph,
    sigma: f64,
    rng: &mut R,
) -> Tensor {
    let (g, c) = (space.grid, space.channels);
    let mut values = vec![0.0; g * g * c];
    let mut code_proj = vec![0.0; c];
    for obj in &scene.objects {
        project(&space.sp_proj, &attribute_code(obj), &mut code_proj);
        for (r, col) in covered_cells(scene, obj, g) {
            let cell = &mut values[(r * g + col) * c..(r * g + col + 1) * c];
            cell.iter_mut().zip(&code_proj).for_each(|(v, p)| *v += p);
        }
    }
    for v in values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    Tensor::new(vec![g, g, c], values).expect("consistent shape")
}

/// Normalized (center x, center y, width, height) per object: `N×4`.
pub fn bbox_features(scene: &SceneGraph) -> Tensor {
    let n = scene.objects.len().max(1);
    let mut values = vec![0.0; n * 4];
    for (row, obj) in values.chunks_exact_mut(4).zip(&scene.objects) {
        let nb = bbox_normalize(obj.bbox, f64::from(scene.width), f64::from(scene.height))
            .expect("positive canvas");
        row.copy_from_slice(&nb);
    }
    Tensor::new(vec![n, 4], values).expect("consistent shape")
}

/// Rounds to nine significant digits (the on-disk precision of features).
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Which feature sources the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub use_detection: bool,
    pub use_spatial: bool,
    pub use_bbox_position: bool,
    pub use_bbox_size: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self {
            use_detection: true,
            use_spatial: true,
            use_bbox_position: true,
            use_bbox_size: true,
        }
    }
}

impl FeatureFlags {
    pub fn bbox_columns(&self) -> usize {
        2 * usize::from(self.use_bbox_position) + 2 * usize::from(self.use_bbox_size)
    }
}

/// The three raw sources of one scene, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    /// `N×D`
    pub detection: Tensor,
    /// `G×G×C`
    pub spatial: Tensor,
    /// `N×4`
    pub bbox: Tensor,
}

impl RawFeatures {
    /// Synthesizes all three sources with noise streams keyed by image id, so
    /// every quality level reuses the same standard-normal draws.
    pub fn synthesize(
        space: &FeatureSpace,
        scene: &SceneGraph,
        quality: Quality,
        master_seed: u64,
    ) -> Self {
        let sigma = quality.sigma();
        let id = u64::from(scene.image_id);
        let mut det = synth_detection_features(
            space,
            scene,
            sigma,
            &mut rng_for(master_seed, "detection", id),
        );
        let mut sp = synth_spatial_features(
            space,
            scene,
            sigma,
            &mut rng_for(master_seed, "spatial", id),
        );
        det.values_mut()
            .iter_mut()
            .for_each(|v| *v = round_sig9(*v));
        sp.values_mut().iter_mut().for_each(|v| *v = round_sig9(*v));
        Self {
            detection: det,
            spatial: sp,
            bbox: bbox_features(scene),
        }
    }
}

/// Model input for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `N×(D + bbox columns)`
    pub detection: Tensor,
    /// `G×G×C`, absent when the spatial pipeline is off
    pub spatial: Option<Tensor>,
    /// `N×4`
    pub bbox: Tensor,
    pub flags: FeatureFlags,
}

impl FeatureBundle {
    /// Widens each detection row with the enabled normalized bbox columns
    /// (position then size).
    pub fn assemble(raw: &RawFeatures, flags: FeatureFlags) -> Self {
        let (n, d) = raw.detection.dims2().expect("rank 2");
        let extra = flags.bbox_columns();
        let mut values = Vec::with_capacity(n * (d + extra));
        for i in 0..n {
            values.extend_from_slice(raw.detection.row_slice(i));
            let b = raw.bbox.row_slice(i);
            if flags.use_bbox_position {
                values.extend_from_slice(&b[..2]);
            }
            if flags.use_bbox_size {
                values.extend_from_slice(&b[2..]);
            }
        }
        Self {
            detection: Tensor::new(vec![n, d + extra], values).expect("consistent shape"),
            spatial: flags.use_spatial.then(|| raw.spatial.clone()),
            bbox: raw.bbox.clone(),
            flags,
        }
    }
}

pub fn build_feature_bundle(
    space: &FeatureSpace,
    scene: &SceneGraph,
    quality: Quality,
    flags: FeatureFlags,
    master_seed: u64,
) -> FeatureBundle {
    FeatureBundle::assemble(
        &RawFeatures::synthesize(space, scene, quality, master_seed),
        flags,
    )
}
