use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Canvas width that normalised landmark coordinates are scaled to.
pub const LANDMARK_CANVAS: f64 = 224.0;
/// Upper end of the age range; ages are stored as `years / AGE_SCALE`.
pub const AGE_SCALE: f64 = 116.0;

const COEFF_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

/// Five-point face template: eyes first.
const TEMPLATE: [[f64; 2]; 5] = [[0.35, 0.40], [0.65, 0.40], [0.50, 0.55], [0.38, 0.72], [0.62, 0.72]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Landmark { points: usize },
    Scalar,
    Classification { classes: usize },
    Identity { classes: usize },
}

impl TaskKind {
    /// Width of a decoder head predicting this task.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Landmark { points } => 2 * points,
            TaskKind::Scalar => 1,
            TaskKind::Classification { classes } | TaskKind::Identity { classes } => classes,
        }
    }

    pub fn is_regression(self) -> bool {
        matches!(self, TaskKind::Landmark { .. } | TaskKind::Scalar)
    }

    pub fn classes(self) -> Option<usize> {
        match self {
            TaskKind::Classification { classes } | TaskKind::Identity { classes } => Some(classes),
            _ => None,
        }
    }

    fn code(self) -> (u32, u32) {
        match self {
            TaskKind::Landmark { points } => (0, points as u32),
            TaskKind::Scalar => (1, 0),
            TaskKind::Classification { classes } => (2, classes as u32),
            TaskKind::Identity { classes } => (3, classes as u32),
        }
    }

    fn from_code(code: u32, param: u32) -> Result<Self> {
        let p = param as usize;
        Ok(match code {
            0 => TaskKind::Landmark { points: p },
            1 => TaskKind::Scalar,
            2 => TaskKind::Classification { classes: p },
            3 => TaskKind::Identity { classes: p },
            _ => return Err(Error::Format(format!("unknown task kind code {code}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind) -> Self {
        Self { name: name.into(), kind }
    }
}

pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("landmark", TaskKind::Landmark { points: 5 }),
        TaskSpec::new("age", TaskKind::Scalar),
        TaskSpec::new("emotion", TaskKind::Classification { classes: 7 }),
        TaskSpec::new("identity", TaskKind::Identity { classes: 10 }),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    pub samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub noise: f64,
    /// Weight of the direction shared by every task; the rest is task-specific.
    pub coupling: f64,
    /// Logit scale of class labels.
    pub class_sharpness: f64,
    pub tasks: Vec<TaskSpec>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 2500,
            image_size: 32,
            channels: 3,
            latent_dim: 8,
            noise: 0.1,
            coupling: 0.7,
            class_sharpness: 4.0,
            tasks: default_tasks(),
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("dataset.samples", "must be at least 1"));
        }
        if self.image_size < 8 || self.channels == 0 {
            return Err(Error::config("dataset.image_size", "images must be at least 8 pixels wide"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("dataset.latent_dim", "must be at least 2"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("dataset.noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::config("dataset.coupling", "must lie in [0, 1]"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("dataset.tasks", "at least one task is required"));
        }
        for t in &self.tasks {
            match t.kind {
                TaskKind::Landmark { points } if !(2..=TEMPLATE.len()).contains(&points) => {
                    return Err(Error::config(
                        "dataset.tasks",
                        format!("landmark task `{}` needs 2 to {} points", t.name, TEMPLATE.len()),
                    ))
                }
                TaskKind::Classification { classes } | TaskKind::Identity { classes } if classes < 2 => {
                    return Err(Error::config(
                        "dataset.tasks",
                        format!("task `{}` needs at least 2 classes", t.name),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Ground truth for one task over the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// `[n × 2K]` normalised `(x, y)` pairs.
    Points {
        points: usize,
        values: Vec<f32>,
    },
    /// Normalised scalars.
    Scalar(Vec<f32>),
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Points { points, values } => values.len() / (2 * points),
            Labels::Scalar(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `i` as regression targets (empty for class labels).
    pub fn target(&self, i: usize) -> &[f32] {
        match self {
            Labels::Points { points, values } => &values[i * 2 * points..(i + 1) * 2 * points],
            Labels::Scalar(v) => std::slice::from_ref(&v[i]),
            Labels::Class(_) => &[],
        }
    }

    pub fn class(&self, i: usize) -> Option<usize> {
        match self {
            Labels::Class(v) => Some(v[i]),
            _ => None,
        }
    }
}

/// Per-task directions in latent space and the image basis.
#[derive(Clone, Debug)]
pub struct LatentModel {
    /// Primary direction of each task (unit length).
    pub primary: Vec<Vec<f64>>,
    /// Secondary direction of each task (unit length).
    pub secondary: Vec<Vec<f64>>,
    /// Per landmark task: `[2K]` pairs of weights on (primary, secondary).
    landmark_mix: Vec<Vec<[f64; 2]>>,
    /// `[L × C × H × W]`
    basis: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn random_unit(rng: &mut Rng, dim: usize, against: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for a in against {
            let p = dot(&v, a);
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

impl LatentModel {
    pub fn new(spec: &SyntheticDatasetSpec) -> Self {
        let mut rng = Rng::with_stream(spec.seed, COEFF_STREAM);
        let l = spec.latent_dim;
        let c = spec.coupling;
        let own = (1.0 - c * c).sqrt();
        let shared = random_unit(&mut rng, l, &[]);
        // Task-specific parts are orthogonal to the shared direction and,
        // while dimensions last, to each other.
        let mut basis = vec![shared.clone()];
        let mix = |s: &[f64], g: &[f64]| -> Vec<f64> {
            let mut v: Vec<f64> = s.iter().zip(g).map(|(a, b)| c * a + own * b).collect();
            normalize(&mut v);
            v
        };
        let mut primary = Vec::new();
        for _ in &spec.tasks {
            let against = if basis.len() < l { basis.clone() } else { vec![shared.clone()] };
            let g = random_unit(&mut rng, l, &against);
            if basis.len() < l {
                basis.push(g.clone());
            }
            primary.push(mix(&shared, &g));
        }
        let shared2 = random_unit(&mut rng, l, std::slice::from_ref(&shared));
        let secondary = spec
            .tasks
            .iter()
            .map(|_| {
                let g = random_unit(&mut rng, l, std::slice::from_ref(&shared2));
                mix(&shared2, &g)
            })
            .collect();
        let landmark_mix = spec
            .tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Landmark { points } => (0..2 * points).map(|_| [rng.normal(), rng.normal()]).collect(),
                _ => Vec::new(),
            })
            .collect();

        let (ch, hw) = (spec.channels, spec.image_size);
        let mut image_basis = vec![0.0; l * ch * hw * hw];
        for j in 0..l {
            let cx = rng.uniform_range(0.2, 0.8) * hw as f64;
            let cy = rng.uniform_range(0.2, 0.8) * hw as f64;
            let sigma = rng.uniform_range(0.1, 0.2) * hw as f64;
            let colour: Vec<f64> = (0..ch).map(|_| rng.normal()).collect();
            for (k, col) in colour.iter().enumerate() {
                for y in 0..hw {
                    for x in 0..hw {
                        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        image_basis[((j * ch + k) * hw + y) * hw + x] = col * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        Self {
            primary,
            secondary,
            landmark_mix,
            basis: image_basis,
        }
    }

    /// Noise-free regression target or class logits of task `t` at latent `z`.
    pub fn clean_outputs(&self, spec: &SyntheticDatasetSpec, t: usize, z: &[f64]) -> Vec<f64> {
        let (p, q) = (dot(&self.primary[t], z), dot(&self.secondary[t], z));
        let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        match spec.tasks[t].kind {
            TaskKind::Landmark { points } => (0..2 * points)
                .map(|i| {
                    let [a, b] = self.landmark_mix[t][i];
                    let w: Vec<f64> = self.primary[t].iter().zip(&self.secondary[t]).map(|(x, y)| a * x + b * y).collect();
                    TEMPLATE[i / 2][i % 2] + 0.1 * (a * p + b * q) / l1(&w)
                })
                .collect(),
            TaskKind::Scalar => vec![(58.5 + 57.5 * p / l1(&self.primary[t])) / AGE_SCALE],
            TaskKind::Classification { classes } | TaskKind::Identity { classes } => (0..classes)
                .map(|j| {
                    let angle = std::f64::consts::TAU * j as f64 / classes as f64;
                    spec.class_sharpness * (angle.cos() * p + angle.sin() * q)
                })
                .collect(),
        }
    }
}

/// Images, latents and per-task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSpec>,
    /// `[n × C × H × W]`
    pub inputs: Tensor<f32>,
    /// `[n × L]`
    pub latents: Tensor<f32>,
    pub labels: Vec<Labels>,
}

fn gumbel(rng: &mut Rng) -> f64 {
    -(-(rng.uniform() as f64).ln()).ln()
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let model = LatentModel::new(spec);
    let (n, l, ch, hw) = (spec.samples, spec.latent_dim, spec.channels, spec.image_size);
    let pixels = ch * hw * hw;
    let mut inputs = Vec::with_capacity(n * pixels);
    let mut latents = Vec::with_capacity(n * l);
    let mut labels: Vec<Labels> = spec
        .tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Landmark { points } => Labels::Points {
                points,
                values: Vec::with_capacity(n * 2 * points),
            },
            TaskKind::Scalar => Labels::Scalar(Vec::with_capacity(n)),
            _ => Labels::Class(Vec::with_capacity(n)),
        })
        .collect();

    for i in 0..n {
        let mut rng = Rng::keyed(spec.seed, SAMPLE_STREAM, i as u64);
        let z: Vec<f64> = (0..l).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        for p in 0..pixels {
            let clean: f64 = (0..l).map(|j| z[j] * model.basis[j * pixels + p]).sum();
            inputs.push((clean + spec.noise * rng.normal()) as f32);
        }
        latents.extend(z.iter().map(|&v| v as f32));
        for (t, lab) in labels.iter_mut().enumerate() {
            let out = model.clean_outputs(spec, t, &z);
            match lab {
                Labels::Points { values, .. } => {
                    values.extend(out.iter().map(|&v| (v + 0.01 * spec.noise * rng.normal()).clamp(0.0, 1.0) as f32));
                }
                Labels::Scalar(values) => {
                    let years = out[0] * AGE_SCALE + 5.0 * spec.noise * rng.normal();
                    values.push((years.clamp(1.0, AGE_SCALE) / AGE_SCALE) as f32);
                }
                Labels::Class(values) => {
                    let noisy: Vec<f64> = out.iter().map(|&v| v + spec.noise * gumbel(&mut rng)).collect();
                    let best = (0..noisy.len()).max_by(|&a, &b| noisy[a].total_cmp(&noisy[b])).unwrap_or(0);
                    values.push(best);
                }
            }
        }
    }
    Ok(Dataset {
        tasks: spec.tasks.clone(),
        inputs: Tensor::new([n, ch, hw, hw], inputs)?,
        latents: Tensor::new([n, l], latents)?,
        labels,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"ETFD";
const CACHE_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Seed-deterministic shuffle into `(train, validation)` index lists,
    /// `train_fraction` of the samples (rounded) going to training.
    pub fn split(&self, seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::keyed(seed, SPLIT_STREAM, 0).shuffle(&mut idx);
        let cut = ((self.len() as f64 * train_fraction).round() as usize).min(self.len());
        let val = idx.split_off(cut);
        (idx, val)
    }

    /// Stacks the inputs of `indices` into `[b × C × H × W]`.
    pub fn gather_inputs(&self, indices: &[usize]) -> Tensor<f32> {
        super::pipeline::gather_rows(&self.inputs, indices)
    }

    /// Binary cache: magic, version, sample count, input shape, label
    /// schema, latent width, then little-endian `f32` inputs, labels and
    /// latents.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        put_u32(&mut w, self.len())?;
        put_u32(&mut w, self.input_shape().len())?;
        for &d in self.input_shape() {
            put_u32(&mut w, d)?;
        }
        put_u32(&mut w, self.tasks.len())?;
        for t in &self.tasks {
            let (code, param) = t.kind.code();
            put_u32(&mut w, code as usize)?;
            put_u32(&mut w, param as usize)?;
            put_u32(&mut w, t.name.len())?;
            w.write_all(t.name.as_bytes())?;
        }
        put_u32(&mut w, self.latents.shape()[1])?;
        let mut put = |vals: &mut dyn Iterator<Item = f32>| -> Result<()> {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(&mut self.inputs.data().iter().copied())?;
        for lab in &self.labels {
            match lab {
                Labels::Points { values, .. } | Labels::Scalar(values) => put(&mut values.iter().copied())?,
                Labels::Class(ids) => put(&mut ids.iter().map(|&c| c as f32))?,
            }
        }
        put(&mut self.latents.data().iter().copied())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a dataset cache".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported dataset cache version {version}")));
        }
        let n = get_u32(&mut r)? as usize;
        let rank = get_u32(&mut r)? as usize;
        let input_shape: Vec<usize> = (0..rank).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let n_tasks = get_u32(&mut r)? as usize;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let kind = TaskKind::from_code(get_u32(&mut r)?, get_u32(&mut r)?)?;
            let len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            tasks.push(TaskSpec { name, kind });
        }
        let latent_dim = get_u32(&mut r)? as usize;
        let width: usize = input_shape.iter().product();
        let mut shape = vec![n];
        shape.extend(&input_shape);
        let inputs = Tensor::new(shape, get_f32s(&mut r, n * width)?)?;
        let mut labels = Vec::with_capacity(n_tasks);
        for t in &tasks {
            labels.push(match t.kind {
                TaskKind::Landmark { points } => Labels::Points {
                    points,
                    values: get_f32s(&mut r, n * 2 * points)?,
                },
                TaskKind::Scalar => Labels::Scalar(get_f32s(&mut r, n)?),
                _ => Labels::Class(get_f32s(&mut r, n)?.into_iter().map(|v| v as usize).collect()),
            });
        }
        let latents = Tensor::new([n, latent_dim], get_f32s(&mut r, n * latent_dim)?)?;
        Ok(Self {
            tasks,
            inputs,
            latents,
            labels,
        })
    }
}
