//! Seeded synthetic embedding worlds with known geometry.
//!
//! Class directions are unit vectors with a guaranteed minimum pairwise
//! angle. Images are noisy copies of their class direction. Query
//! embeddings are the directions of the first `class_count` classes; the
//! remaining `open_class_count` directions only ever appear as images.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{normalize_in_place, EmbeddingMatrix, KeyedDump, SidecarRecord};
use crate::error::{Error, Result};
use crate::matching::BBox;
use crate::protocol::{DatasetManifest, GtBox, ImageEntry, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub class_count: usize,
    pub open_class_count: usize,
    pub dim: usize,
    pub images_per_class: usize,
    /// Minimum angle between class directions, radians.
    pub margin: f64,
    /// Per-component standard deviation of the image noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl WorldSpec {
    /// Orthogonal classes with noise small enough that three typical noise
    /// angles stay below half the margin.
    pub fn separable(
        class_count: usize,
        open_class_count: usize,
        dim: usize,
        images_per_class: usize,
        seed: u64,
    ) -> Self {
        let margin = FRAC_PI_2;
        Self {
            class_count,
            open_class_count,
            dim,
            images_per_class,
            margin,
            noise_std: separable_noise(margin, dim),
            seed,
        }
    }

    /// Randomly placed directions (no margin) with heavy noise, so classes
    /// overlap and confusion grows with the number of queried classes.
    pub fn overlapping(class_count: usize, dim: usize, images_per_class: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            class_count,
            open_class_count: 0,
            dim,
            images_per_class,
            margin: 0.0,
            noise_std,
            seed,
        }
    }

    /// Typical angle between an image and its class direction.
    pub fn noise_angle(&self) -> f64 {
        (self.noise_std * ((self.dim.max(2) - 1) as f64).sqrt()).atan()
    }

    pub fn total_classes(&self) -> usize {
        self.class_count + self.open_class_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.dim == 0 || self.images_per_class == 0 {
            return Err(Error::Parameter(
                "class count, dim and images per class must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Parameter(format!("bad noise std {}", self.noise_std)));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::Parameter(format!("margin {} outside [0, pi]", self.margin)));
        }
        let n = self.total_classes();
        if n >= 2 {
            // a regular simplex is the widest spread n unit vectors can have
            let widest = (-1.0 / (n - 1) as f64).acos();
            if self.margin > widest + 1e-12 || (self.margin > FRAC_PI_2 && n > self.dim + 1) {
                return Err(Error::Geometry(format!(
                    "{n} directions in {} dims cannot be {} rad apart",
                    self.dim, self.margin
                )));
            }
        }
        Ok(())
    }
}

/// Noise level whose typical angle is one eighth of `margin`.
pub fn separable_noise(margin: f64, dim: usize) -> f64 {
    (margin / 8.0).tan() / ((dim.max(2) - 1) as f64).sqrt()
}

/// Ground truth of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Query classes first, then open classes.
    pub class_names: Vec<String>,
    pub directions: Vec<Vec<f32>>,
    /// Class index of every image row.
    pub image_class: Vec<usize>,
    pub min_pairwise_angle: f64,
    pub max_noise_angle: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub manifest: DatasetManifest,
    pub image_ids: Vec<String>,
    pub images: EmbeddingMatrix,
    pub queries: EmbeddingMatrix,
    pub geometry: Geometry,
}

fn class_name(i: usize, spec_classes: usize) -> String {
    if i < spec_classes {
        format!("class_{i:03}")
    } else {
        format!("open_{:03}", i - spec_classes)
    }
}

fn angle(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    dot.clamp(-1.0, 1.0).acos()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn directions(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    let n = spec.total_classes();
    let dim = spec.dim;
    if n <= dim && spec.margin <= FRAC_PI_2 + 1e-12 {
        // Gram-Schmidt on Gaussian draws gives a random orthonormal set
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v = random_unit(rng, dim);
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        return Ok(basis
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect());
    }
    const ATTEMPTS: usize = 20_000;
    let mut dirs: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        let found = (0..ATTEMPTS).find_map(|_| {
            let mut cand: Vec<f32> = random_unit(rng, dim).into_iter().map(|x| x as f32).collect();
            normalize_in_place(&mut cand);
            dirs.iter()
                .all(|d| angle(d, &cand) >= spec.margin)
                .then_some(cand)
        });
        match found {
            Some(d) => dirs.push(d),
            None => {
                return Err(Error::Geometry(format!(
                    "could not place {n} directions {} rad apart in {dim} dims",
                    spec.margin
                )))
            }
        }
    }
    Ok(dirs)
}

fn noisy_copy(dir: &[f32], noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f32> = dir
        .iter()
        .map(|&x| match noise {
            Some(n) => (f64::from(x) + n.sample(rng)) as f32,
            None => x,
        })
        .collect();
    normalize_in_place(&mut v);
    v
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = directions(spec, &mut rng)?;
    let n = spec.total_classes();
    let names: Vec<String> = (0..n).map(|i| class_name(i, spec.class_count)).collect();
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));

    let mut data = Vec::with_capacity(n * spec.images_per_class * spec.dim);
    let mut image_ids = Vec::new();
    let mut image_class = Vec::new();
    let mut entries = Vec::new();
    let mut max_noise_angle: f64 = 0.0;
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            let v = noisy_copy(dir, noise.as_ref(), &mut rng);
            max_noise_angle = max_noise_angle.max(angle(&v, dir));
            let id = format!("img_{:05}", image_ids.len());
            entries.push(ImageEntry {
                image_id: id.clone(),
                gt_labels: vec![names[c].clone()],
                gt_boxes: None,
            });
            data.extend(v);
            image_ids.push(id);
            image_class.push(c);
        }
    }
    let mut min_pairwise_angle = std::f64::consts::PI;
    for i in 0..n {
        for j in i + 1..n {
            min_pairwise_angle = min_pairwise_angle.min(angle(&dirs[i], &dirs[j]));
        }
    }
    let images = EmbeddingMatrix::new(spec.dim, image_ids.len(), data, true)?;
    let queries = EmbeddingMatrix::from_rows(spec.dim, &dirs[..spec.class_count], true)?;
    let manifest = DatasetManifest {
        dataset_id: format!("synth-{}", spec.seed),
        task: Task::Classification,
        classes: names[..spec.class_count].to_vec(),
        open_classes: names[spec.class_count..].to_vec(),
        images: entries,
    };
    Ok(World {
        spec: spec.clone(),
        manifest,
        image_ids,
        images,
        queries,
        geometry: Geometry {
            class_names: names,
            directions: dirs,
            image_class,
            min_pairwise_angle,
            max_noise_angle,
        },
    })
}

impl World {
    pub fn image_dump(&self) -> KeyedDump {
        KeyedDump {
            matrix: self.images.clone(),
            records: self
                .image_ids
                .iter()
                .enumerate()
                .map(|(i, id)| SidecarRecord::row(i, id.clone()))
                .collect(),
        }
    }

    pub fn query_dump(&self) -> KeyedDump {
        label_dump(self.queries.clone(), &self.manifest.classes)
    }

    /// Unit direction of the named class (query or open).
    pub fn direction(&self, name: &str) -> Option<&[f32]> {
        let i = self.geometry.class_names.iter().position(|n| n == name)?;
        Some(&self.geometry.directions[i])
    }

    /// Writes `manifest.json`, `images.osvd`, `queries.osvd` (with sidecars)
    /// and `geometry.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_common(dir, &self.manifest, &self.image_dump(), &self.query_dump(), &self.geometry)
    }
}

fn label_dump(queries: EmbeddingMatrix, labels: &[String]) -> KeyedDump {
    KeyedDump {
        matrix: queries,
        records: labels
            .iter()
            .enumerate()
            .map(|(i, l)| SidecarRecord::row(i, l.clone()))
            .collect(),
    }
}

fn write_common<G: Serialize>(
    dir: &Path,
    manifest: &DatasetManifest,
    images: &KeyedDump,
    queries: &KeyedDump,
    geometry: &G,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::file(&p, e))
    };
    put("manifest.json", serde_json::to_string_pretty(manifest)?)?;
    put("geometry.json", serde_json::to_string_pretty(geometry)?)?;
    images.save(dir.join("images.osvd"))?;
    queries.save(dir.join("queries.osvd"))
}

/// Detection world: objects sit in disjoint cells of a grid, each with one
/// well-localised proposal and optionally a duplicate and a background
/// proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionWorldSpec {
    pub class_count: usize,
    pub dim: usize,
    pub image_count: usize,
    pub max_objects_per_image: usize,
    pub grid: usize,
    pub cell_size: f64,
    pub noise_std: f64,
    /// Chance that an object gets a second, shifted proposal.
    pub duplicate_rate: f64,
    /// Chance that an image gets a proposal over an empty cell.
    pub background_rate: f64,
    pub seed: u64,
}

impl DetectionWorldSpec {
    pub fn small(class_count: usize, image_count: usize, seed: u64) -> Self {
        let dim = (class_count * 2).max(8);
        Self {
            class_count,
            dim,
            image_count,
            max_objects_per_image: 3,
            grid: 4,
            cell_size: 100.0,
            noise_std: separable_noise(FRAC_PI_2, dim),
            duplicate_rate: 0.3,
            background_rate: 0.3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalTruth {
    pub image_id: String,
    /// Class the proposal embedding was drawn from; `None` for background.
    pub class: Option<usize>,
    /// Index into the image's ground-truth boxes the proposal was built on.
    pub object: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DetectionWorld {
    pub manifest: DatasetManifest,
    pub proposals: KeyedDump,
    pub queries: EmbeddingMatrix,
    pub truth: Vec<ProposalTruth>,
}

impl DetectionWorld {
    pub fn query_dump(&self) -> KeyedDump {
        label_dump(self.queries.clone(), &self.manifest.classes)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_common(dir, &self.manifest, &self.proposals, &self.query_dump(), &self.truth)
    }
}

pub fn generate_detection_world(spec: &DetectionWorldSpec) -> Result<DetectionWorld> {
    if spec.class_count == 0 || spec.image_count == 0 || spec.grid == 0 {
        return Err(Error::Parameter("detection world needs classes, images and a grid".into()));
    }
    if spec.max_objects_per_image == 0 || spec.max_objects_per_image >= spec.grid * spec.grid {
        return Err(Error::Parameter("objects per image must leave a free grid cell".into()));
    }
    let ws = WorldSpec {
        class_count: spec.class_count,
        open_class_count: 0,
        dim: spec.dim,
        images_per_class: 1,
        margin: FRAC_PI_2,
        noise_std: spec.noise_std,
        seed: spec.seed,
    };
    ws.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = directions(&ws, &mut rng)?;
    let names: Vec<String> = (0..spec.class_count).map(|i| class_name(i, spec.class_count)).collect();
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"));

    let cells = spec.grid * spec.grid;
    let cell_box = |cell: usize, inset: f64, shift: f64| {
        let x = (cell % spec.grid) as f64 * spec.cell_size;
        let y = (cell / spec.grid) as f64 * spec.cell_size;
        BBox::new(
            x + inset + shift,
            y + inset,
            x + spec.cell_size - inset + shift,
            y + spec.cell_size - inset,
        )
    };

    let mut images = Vec::new();
    let mut data = Vec::new();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for i in 0..spec.image_count {
        let image_id = format!("det_{i:05}");
        let n_obj = rng.random_range(1..=spec.max_objects_per_image);
        let picked = rand::seq::index::sample(&mut rng, cells, n_obj + 1).into_vec();
        let (obj_cells, free_cell) = (&picked[..n_obj], picked[n_obj]);
        let mut gt_boxes = Vec::new();
        let mut push = |row: Vec<f32>, bbox: BBox, t: ProposalTruth| {
            let r = records.len();
            records.push(SidecarRecord {
                row: Some(r as u64),
                id: format!("{}/{}", image_id, r),
                image_id: Some(image_id.clone()),
                bbox: Some(bbox.into()),
                missing: false,
            });
            data.extend(row);
            truth.push(t);
        };
        for (o, &cell) in obj_cells.iter().enumerate() {
            let class = rng.random_range(0..spec.class_count);
            let gt = cell_box(cell, 10.0, 0.0)?;
            gt_boxes.push(GtBox {
                label: names[class].clone(),
                bbox: gt,
            });
            let jitter = rng.random_range(-3.0..3.0);
            push(
                noisy_copy(&dirs[class], noise.as_ref(), &mut rng),
                cell_box(cell, 10.0, jitter)?,
                ProposalTruth { image_id: image_id.clone(), class: Some(class), object: Some(o) },
            );
            if rng.random_bool(spec.duplicate_rate) {
                push(
                    noisy_copy(&dirs[class], noise.as_ref(), &mut rng),
                    cell_box(cell, 10.0, 15.0)?,
                    ProposalTruth { image_id: image_id.clone(), class: Some(class), object: Some(o) },
                );
            }
        }
        if rng.random_bool(spec.background_rate) {
            let mut v: Vec<f32> = random_unit(&mut rng, spec.dim).into_iter().map(|x| x as f32).collect();
            normalize_in_place(&mut v);
            push(
                v,
                cell_box(free_cell, 10.0, 0.0)?,
                ProposalTruth { image_id: image_id.clone(), class: None, object: None },
            );
        }
        let mut gt_labels: Vec<String> = Vec::new();
        for b in &gt_boxes {
            if !gt_labels.contains(&b.label) {
                gt_labels.push(b.label.clone());
            }
        }
        images.push(ImageEntry {
            image_id,
            gt_labels,
            gt_boxes: Some(gt_boxes),
        });
    }
    let proposals = KeyedDump::new(EmbeddingMatrix::new(spec.dim, records.len(), data, true)?, records)?;
    let manifest = DatasetManifest {
        dataset_id: format!("synth-det-{}", spec.seed),
        task: Task::Detection,
        classes: names,
        open_classes: Vec::new(),
        images,
    };
    manifest.validate()?;
    Ok(DetectionWorld {
        manifest,
        proposals,
        queries: EmbeddingMatrix::from_rows(spec.dim, &dirs, true)?,
        truth,
    })
}
