//! Synthetic scenes with planted shapes on textured backgrounds and exact
//! ground-truth region maps.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{iou, BinaryMap, BoundingBox};
use crate::netpbm;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.10],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
}

/// A filled shape inscribed in `bbox`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedShape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub bbox: BoundingBox,
}

impl PlantedShape {
    pub fn footprint(&self, height: usize, width: usize) -> BinaryMap {
        let b = self.bbox;
        let mut map = BinaryMap::empty(height, width);
        let (cy, cx) = ((b.y0 + b.y1) as f64 / 2.0, (b.x0 + b.x1) as f64 / 2.0);
        let r = (b.x1 - b.x0).min(b.y1 - b.y0) as f64 / 2.0;
        for y in b.y0..b.y1.min(height) {
            for x in b.x0..b.x1.min(width) {
                let inside = match self.kind {
                    ShapeKind::Square => true,
                    ShapeKind::Disk => {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        dy * dy + dx * dx <= r * r
                    }
                };
                if inside {
                    map.set(y, x, true);
                }
            }
        }
        map
    }
}

/// Grey stripes plus per-pixel noise, values within `[0.25, 0.55]`.
pub fn textured_background(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let base = rng.random_range(0.32..0.45);
    let freq = rng.random_range(2.0..6.0);
    let angle = rng.random_range(0.0..PI);
    let (s, c) = angle.sin_cos();
    let tint: [f64; 3] = [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)];
    let mut grey = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 * c + y as f64 * s) / width.max(height) as f64;
            grey[y * width + x] = base + 0.05 * (2.0 * PI * freq * u).sin() + rng.random_range(-0.03..0.03);
        }
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for t in tint {
        data.extend(grey.iter().map(|&g| (g + t).clamp(0.0, 1.0) as f32));
    }
    Tensor::new([3, height, width], data).expect("consistent shape")
}

/// Paints `shapes` over `background` (in order) and returns the footprints.
pub fn render(background: &Tensor<f32>, shapes: &[PlantedShape]) -> Result<(Tensor<f32>, Vec<BinaryMap>)> {
    let &[3, h, w] = background.shape() else {
        return Err(Error::InvalidShape {
            op: "render",
            shape: background.shape().to_vec(),
            reason: "expected [3, h, w]".into(),
        });
    };
    let mut image = background.clone();
    let mut maps = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let b = shape.bbox;
        if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > w || b.y1 > h {
            return Err(Error::invalid(format!("shape box {b:?} outside {h}x{w} image")));
        }
        let map = shape.footprint(h, w);
        for (i, _) in map.data().iter().enumerate().filter(|(_, &m)| m) {
            for ch in 0..3 {
                image.data_mut()[ch * h * w + i] = shape.color[ch];
            }
        }
        maps.push(map);
    }
    Ok((image, maps))
}

/// Ground-truth region with its role in the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRegion {
    pub label: String,
    pub map: BinaryMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: String,
    pub image: Tensor<f32>,
    pub regions: Vec<SceneRegion>,
    pub class: usize,
}

impl SyntheticScene {
    /// Union of all region maps.
    pub fn support(&self) -> BinaryMap {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        self.regions
            .iter()
            .fold(BinaryMap::empty(h, w), |acc, r| acc.union(&r.map).expect("same shape"))
    }

    pub fn maps(&self) -> Vec<BinaryMap> {
        self.regions.iter().map(|r| r.map.clone()).collect()
    }
}

fn random_box(rng: &mut ChaCha8Rng, size: usize, side: usize) -> BoundingBox {
    let x0 = rng.random_range(1..size - side);
    let y0 = rng.random_range(1..size - side);
    BoundingBox {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
    }
}

fn separated(a: &BoundingBox, b: &BoundingBox, gap: usize) -> bool {
    a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0
}

/// A single square filling `bbox` on a textured `size × size` background.
pub fn planted_square(size: usize, bbox: BoundingBox, color: [f32; 3], seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = textured_background(size, size, &mut rng);
    let (image, maps) = render(
        &bg,
        &[PlantedShape {
            kind: ShapeKind::Square,
            color,
            bbox,
        }],
    )?;
    Ok(SyntheticScene {
        id: format!("planted_{seed}"),
        image,
        regions: vec![SceneRegion {
            label: "object".into(),
            map: maps.into_iter().next().expect("one shape"),
        }],
        class: 1,
    })
}

/// Two disjoint squares (object and context) of `side` pixels.
pub fn two_evidence_scene(size: usize, side: usize, seed: u64) -> Result<SyntheticScene> {
    if size < MIN_SIZE || 2 * side + 6 > size {
        return Err(Error::invalid(format!("cannot place two {side}px regions in {size}px scene")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = textured_background(size, size, &mut rng);
    let a = random_box(&mut rng, size, side);
    let b = loop {
        let b = random_box(&mut rng, size, side);
        if separated(&a, &b, 4) {
            break b;
        }
    };
    let shapes = [
        PlantedShape {
            kind: ShapeKind::Square,
            color: PALETTE[0],
            bbox: a,
        },
        PlantedShape {
            kind: ShapeKind::Square,
            color: PALETTE[3],
            bbox: b,
        },
    ];
    let (image, maps) = render(&bg, &shapes)?;
    Ok(SyntheticScene {
        id: format!("two_evidence_{seed}"),
        image,
        regions: maps
            .into_iter()
            .zip(["object", "context"])
            .map(|(map, label)| SceneRegion { label: label.into(), map })
            .collect(),
        class: 1,
    })
}

/// Classification dataset parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub size: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            size: 64,
            per_class: 40,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::invalid(format!("image size must be at least {MIN_SIZE}")));
        }
        if !(2..=PALETTE.len()).contains(&self.classes) {
            return Err(Error::invalid(format!("class count must be in 2..={}", PALETTE.len())));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("scenes per class must be positive"));
        }
        Ok(())
    }

    /// The last class is the two-evidence class.
    pub fn two_evidence_class(&self) -> usize {
        self.classes - 1
    }
}

/// Renders one scene of class `class`. Every class has its own color and
/// shape; the two-evidence class adds a disjoint context square whose color
/// is also unique to it, so either region alone identifies the class.
pub fn class_scene(spec: &DatasetSpec, class: usize, index: usize) -> Result<SyntheticScene> {
    let size = spec.size;
    let stream = (class * spec.per_class + index) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream + 1);
    let bg = textured_background(size, size, &mut rng);
    let kind = if class % 2 == 0 { ShapeKind::Square } else { ShapeKind::Disk };
    let side = rng.random_range(size / 5..=size / 3);
    let object = PlantedShape {
        kind,
        color: PALETTE[class],
        bbox: random_box(&mut rng, size, side),
    };
    let mut shapes = vec![object];
    let mut labels = vec!["object"];
    if class == spec.two_evidence_class() {
        let ctx_side = rng.random_range(size / 6..=size / 4);
        let bbox = loop {
            let b = random_box(&mut rng, size, ctx_side);
            if separated(&object.bbox, &b, 3) {
                break b;
            }
        };
        shapes.push(PlantedShape {
            kind: ShapeKind::Square,
            color: PALETTE[(class + 3) % PALETTE.len()],
            bbox,
        });
        labels.push("context");
    }
    let (image, maps) = render(&bg, &shapes)?;
    Ok(SyntheticScene {
        id: format!("scene_{class}_{index:04}"),
        image,
        regions: maps
            .into_iter()
            .zip(labels)
            .map(|(map, label)| SceneRegion { label: label.into(), map })
            .collect(),
        class,
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<SyntheticScene>> {
    spec.validate()?;
    let mut scenes = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for index in 0..spec.per_class {
            scenes.push(class_scene(spec, class, index)?);
        }
    }
    Ok(scenes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRegion {
    pub label: String,
    pub mask: String,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: usize,
    pub regions: Vec<ManifestRegion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub two_evidence_class: usize,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `images/<id>.ppm`, `masks/<id>.r<k>.pgm` and `manifest.json`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, scenes: &[SyntheticScene]) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let image = format!("images/{}.ppm", scene.id);
        netpbm::write_ppm(dir.join(&image), &scene.image)?;
        let mut regions = Vec::with_capacity(scene.regions.len());
        for (k, r) in scene.regions.iter().enumerate() {
            let mask = format!("masks/{}.r{k}.pgm", scene.id);
            netpbm::write_pgm(dir.join(&mask), &r.map.to_tensor())?;
            let bbox = r
                .map
                .bounding_box()
                .ok_or_else(|| Error::invalid(format!("empty region in {}", scene.id)))?;
            regions.push(ManifestRegion {
                label: r.label.clone(),
                mask,
                bbox,
            });
        }
        entries.push(ManifestEntry {
            id: scene.id.clone(),
            image,
            label: scene.class,
            regions,
        });
    }
    let manifest = Manifest {
        spec: *spec,
        two_evidence_class: spec.two_evidence_class(),
        scenes: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every image of a written dataset with its label.
pub fn load_labeled(dir: &Path, manifest: &Manifest) -> Result<Vec<(Tensor<f32>, usize)>> {
    manifest
        .scenes
        .iter()
        .map(|e| Ok((netpbm::read_rgb(dir.join(&e.image))?, e.label)))
        .collect()
}

/// Largest pairwise IoU between the regions of a scene.
pub fn max_region_iou(scene: &SyntheticScene) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..scene.regions.len() {
        for j in i + 1..scene.regions.len() {
            worst = worst.max(iou(&scene.regions[i].map, &scene.regions[j].map)?);
        }
    }
    Ok(worst)
}
