//! Seeded synthetic multimodal tasks.
//!
//! Both tasks draw a Voronoi partition of the image into regions with latent
//! attributes.
//!
//! * Segmentation: a region is background (class 0) or an object of class
//!   `1 + 2s + (u xor v)`. Modality A (3 channels) shows the object mask,
//!   `s`, and `u` as both an intensity and the sign of a checkerboard
//!   texture. Modality B (1 channel) shows the object mask, `s` and `v` as
//!   intensity levels plus region boundaries. Neither modality alone
//!   determines the xor bit.
//! * Translation: each region carries attributes `a_1..a_4`; modality `m`
//!   shows `a_m`, the target is their mean. More modalities reveal more of
//!   the target.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::Target;
use crate::tensor::Tensor;

pub const SEGMENTATION_CLASSES: usize = 5;
pub const MAX_TRANSLATION_MODALITIES: usize = 4;
const BACKGROUND_PROB: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Segmentation,
    Translation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "toy_segmentation",
            TaskKind::Translation => "toy_translation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_segmentation" | "segmentation" => Ok(TaskKind::Segmentation),
            "toy_translation" | "translation" => Ok(TaskKind::Translation),
            _ => Err(Error::invalid("task", format!("unknown task kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub modalities: usize,
    pub size: usize,
    pub regions: usize,
    /// Standard deviation of the additive Gaussian noise on every modality.
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    /// Segmentation only: every modality is the one-hot target.
    pub onehot: bool,
}

impl TaskSpec {
    pub fn segmentation(seed: u64) -> Self {
        Self {
            kind: TaskKind::Segmentation,
            modalities: 2,
            size: 32,
            regions: 8,
            noise: 0.3,
            train: 512,
            val: 128,
            seed,
            onehot: false,
        }
    }

    pub fn translation(modalities: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Translation,
            modalities,
            size: 16,
            regions: 6,
            noise: 0.1,
            train: 256,
            val: 64,
            seed,
            onehot: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("task_spec", msg));
        let cap = match self.kind {
            TaskKind::Segmentation => 2,
            TaskKind::Translation => MAX_TRANSLATION_MODALITIES,
        };
        if self.modalities == 0 || self.modalities > cap {
            return bad(format!("{} supports 1..={cap} modalities, got {}", self.kind, self.modalities));
        }
        if self.size < 4 || !self.size.is_multiple_of(2) {
            return bad(format!("size must be even and >= 4, got {}", self.size));
        }
        if self.regions == 0 {
            return bad("regions must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.train == 0 {
            return bad("train must be >= 1".into());
        }
        if self.onehot && self.kind != TaskKind::Segmentation {
            return bad("onehot applies to segmentation only".into());
        }
        Ok(())
    }

    /// Input channels of each modality.
    pub fn channels(&self) -> Vec<usize> {
        match (self.kind, self.onehot) {
            (TaskKind::Segmentation, true) => vec![SEGMENTATION_CLASSES; self.modalities],
            (TaskKind::Segmentation, false) => [3, 1][..self.modalities].to_vec(),
            (TaskKind::Translation, _) => vec![1; self.modalities],
        }
    }

    /// Classes (segmentation) or output channels (translation).
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Segmentation => SEGMENTATION_CLASSES,
            TaskKind::Translation => 1,
        }
    }

    pub fn canonical(&self) -> String {
        format!(
            "kind={};m={};size={};regions={};noise={:e};train={};val={};seed={};onehot={}",
            self.kind,
            self.modalities,
            self.size,
            self.regions,
            self.noise,
            self.train,
            self.val,
            self.seed,
            self.onehot
        )
    }

    /// FNV-1a hash of the canonical description.
    pub fn hash(&self) -> u64 {
        self.canonical().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleTarget {
    /// Row-major `[H, W]` class indices.
    Labels(Vec<usize>),
    /// `[C, H, W]`.
    Dense(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One `[C_m, H, W]` tensor per modality.
    pub modalities: Vec<Tensor>,
    pub target: SampleTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// A stacked mini-batch: one `[N, C_m, H, W]` tensor per selected modality.
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub target: Target,
}

/// Stack `indices` of `samples`, keeping the modalities listed in `select`.
pub fn make_batch(samples: &[Sample], indices: &[usize], select: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::invalid("make_batch", "empty batch"));
    }
    let mut inputs = Vec::with_capacity(select.len());
    for &m in select {
        let items: Vec<&Tensor> = indices
            .iter()
            .map(|&i| {
                samples[i]
                    .modalities
                    .get(m)
                    .ok_or_else(|| Error::invalid("make_batch", format!("no modality {m}")))
            })
            .collect::<Result<_>>()?;
        inputs.push(Tensor::stack(&items)?);
    }
    let target = match &samples[indices[0]].target {
        SampleTarget::Labels(_) => {
            let mut labels = Vec::new();
            for &i in indices {
                match &samples[i].target {
                    SampleTarget::Labels(l) => labels.extend_from_slice(l),
                    SampleTarget::Dense(_) => return Err(Error::invalid("make_batch", "mixed targets")),
                }
            }
            Target::Labels(labels)
        }
        SampleTarget::Dense(_) => {
            let items: Vec<&Tensor> = indices
                .iter()
                .map(|&i| match &samples[i].target {
                    SampleTarget::Dense(t) => Ok(t),
                    SampleTarget::Labels(_) => Err(Error::invalid("make_batch", "mixed targets")),
                })
                .collect::<Result<_>>()?;
            Target::Dense(Tensor::stack(&items)?)
        }
    };
    Ok(Batch { inputs, target })
}

struct Scene {
    /// Region index per pixel.
    owner: Vec<usize>,
    boundary: Vec<bool>,
}

fn voronoi(size: usize, regions: usize, rng: &mut ChaCha8Rng) -> Scene {
    let sites: Vec<(f64, f64)> = (0..regions)
        .map(|_| (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64))
        .collect();
    let mut owner = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (r, (sx, sy)) in sites.iter().enumerate() {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, r);
                }
            }
            owner[y * size + x] = best.1;
        }
    }
    let mut boundary = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let o = owner[y * size + x];
            let differs = (x + 1 < size && owner[y * size + x + 1] != o)
                || (y + 1 < size && owner[(y + 1) * size + x] != o)
                || (x > 0 && owner[y * size + x - 1] != o)
                || (y > 0 && owner[(y - 1) * size + x] != o);
            boundary[y * size + x] = differs;
        }
    }
    Scene { owner, boundary }
}

fn noise_plane(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn segmentation_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let size = spec.size;
    let plane = size * size;
    let scene = voronoi(size, spec.regions, rng);
    // (object, s, u, v) per region
    let latents: Vec<(bool, bool, bool, bool)> = (0..spec.regions)
        .map(|_| {
            let object = rng.random::<f64>() >= BACKGROUND_PROB;
            (object, rng.random(), rng.random(), rng.random())
        })
        .collect();
    let labels: Vec<usize> = scene
        .owner
        .iter()
        .map(|&r| {
            let (object, s, u, v) = latents[r];
            if object {
                1 + 2 * s as usize + (u ^ v) as usize
            } else {
                0
            }
        })
        .collect();
    let noise_a = noise_plane(3 * plane, spec.noise, rng);
    let noise_b = noise_plane(plane, spec.noise, rng);

    let modalities = if spec.onehot {
        let mut onehot = vec![0.0; SEGMENTATION_CLASSES * plane];
        for (p, &k) in labels.iter().enumerate() {
            onehot[k * plane + p] = 1.0;
        }
        let t = Tensor::new(&[SEGMENTATION_CLASSES, size, size], onehot).expect("sized");
        vec![t; spec.modalities]
    } else {
        let mut a = noise_a;
        let mut b = noise_b;
        for p in 0..plane {
            let (object, s, u, v) = latents[scene.owner[p]];
            let (x, y) = (p % size, p / size);
            if object {
                let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                a[p] += 0.5 + 0.5 * s as u8 as f64;
                a[plane + p] += u as u8 as f64;
                a[2 * plane + p] += checker * if u { 1.0 } else { -1.0 };
                b[p] += 0.4 + 0.3 * s as u8 as f64 + 0.6 * v as u8 as f64;
            }
            if scene.boundary[p] {
                b[p] += 1.0;
            }
        }
        let a = Tensor::new(&[3, size, size], a).expect("sized");
        let b = Tensor::new(&[1, size, size], b).expect("sized");
        [a, b][..spec.modalities].to_vec()
    };
    Sample {
        modalities,
        target: SampleTarget::Labels(labels),
    }
}

fn translation_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let size = spec.size;
    let plane = size * size;
    let k = MAX_TRANSLATION_MODALITIES;
    let scene = voronoi(size, spec.regions, rng);
    let attrs: Vec<[f64; MAX_TRANSLATION_MODALITIES]> = (0..spec.regions)
        .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
        .collect();
    let noise: Vec<Vec<f64>> = (0..k).map(|_| noise_plane(plane, spec.noise, rng)).collect();
    let target: Vec<f64> = scene
        .owner
        .iter()
        .map(|&r| attrs[r].iter().sum::<f64>() / k as f64)
        .collect();
    let modalities = noise
        .into_iter()
        .take(spec.modalities)
        .enumerate()
        .map(|(m, mut data)| {
            for (p, v) in data.iter_mut().enumerate() {
                *v += attrs[scene.owner[p]][m];
            }
            Tensor::new(&[1, size, size], data).expect("sized")
        })
        .collect();
    Sample {
        modalities,
        target: SampleTarget::Dense(Tensor::new(&[1, size, size], target).expect("sized")),
    }
}

/// Train and validation sets; a pure function of `spec`. Latent scenes and
/// noise do not depend on `spec.modalities`, so modality `m` is identical
/// across modality counts.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| match spec.kind {
                TaskKind::Segmentation => segmentation_sample(spec, &mut rng),
                TaskKind::Translation => translation_sample(spec, &mut rng),
            })
            .collect()
    };
    let train = draw(spec.train);
    let val = draw(spec.val);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"CENDATA1";

pub fn cache_path(dir: impl AsRef<Path>, spec: &TaskSpec) -> PathBuf {
    dir.as_ref().join(format!("synth-{:016x}.bin", spec.hash()))
}

/// Load the dataset for `spec` from `dir`, generating and writing it on a
/// miss.
pub fn load_or_generate(dir: impl AsRef<Path>, spec: &TaskSpec) -> Result<Dataset> {
    let path = cache_path(&dir, spec);
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(ds) = decode_dataset(&bytes, spec) {
            return Ok(ds);
        }
    }
    let ds = generate(spec)?;
    fs::create_dir_all(&dir)?;
    fs::write(&path, encode_dataset(&ds))?;
    Ok(ds)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&ds.spec.hash().to_le_bytes());
    let canonical = ds.spec.canonical();
    put_u32(&mut out, canonical.len());
    out.extend_from_slice(canonical.as_bytes());
    for split in [&ds.train, &ds.val] {
        put_u32(&mut out, split.len());
        for s in split {
            put_u32(&mut out, s.modalities.len());
            for t in &s.modalities {
                put_tensor(&mut out, t);
            }
            match &s.target {
                SampleTarget::Labels(l) => {
                    out.push(0);
                    put_u32(&mut out, l.len());
                    for &v in l {
                        put_u32(&mut out, v);
                    }
                }
                SampleTarget::Dense(t) => {
                    out.push(1);
                    put_tensor(&mut out, t);
                }
            }
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8], spec: &TaskSpec) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(Error::Checkpoint("bad dataset cache magic".into()));
    }
    let hash = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = r.u32()?;
    let canonical = r.take(len)?;
    if hash != spec.hash() || canonical != spec.canonical().as_bytes() {
        return Err(Error::Checkpoint("dataset cache was written for another spec".into()));
    }
    let mut splits = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.u32()?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let m = r.u32()?;
            let modalities = (0..m).map(|_| r.tensor()).collect::<Result<_>>()?;
            let target = match r.take(1)?[0] {
                0 => {
                    let len = r.u32()?;
                    SampleTarget::Labels((0..len).map(|_| r.u32()).collect::<Result<_>>()?)
                }
                1 => SampleTarget::Dense(r.tensor()?),
                t => return Err(Error::Checkpoint(format!("unknown target tag {t}"))),
            };
            samples.push(Sample { modalities, target });
        }
        splits.push(samples);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in dataset cache".into()));
    }
    let val = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.ndim());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated dataset cache".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()?;
        let shape: Vec<usize> = (0..ndim).map(|_| self.u32()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data)
    }
}

/// Per-pixel nearest-centroid classifier fit on the training split and
/// scored (pixel accuracy) on the validation split, using the listed
/// modalities' channels as features.
pub fn nearest_centroid_accuracy(ds: &Dataset, select: &[usize]) -> Result<f64> {
    let k = SEGMENTATION_CLASSES;
    let features = |s: &Sample, p: usize| -> Vec<f64> {
        let mut f = Vec::new();
        for &m in select {
            let t = &s.modalities[m];
            let plane = t.shape()[1] * t.shape()[2];
            for c in 0..t.shape()[0] {
                f.push(t.data()[c * plane + p]);
            }
        }
        f
    };
    let labels = |s: &Sample| -> Result<Vec<usize>> {
        match &s.target {
            SampleTarget::Labels(l) => Ok(l.clone()),
            SampleTarget::Dense(_) => Err(Error::invalid("nearest_centroid", "segmentation task required")),
        }
    };
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut counts = vec![0usize; k];
    for s in &ds.train {
        for (p, &y) in labels(s)?.iter().enumerate() {
            let f = features(s, p);
            if sums[y].is_empty() {
                sums[y] = vec![0.0; f.len()];
            }
            sums[y].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            counts[y] += 1;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &ds.val {
        for (p, &y) in labels(s)?.iter().enumerate() {
            let f = features(s, p);
            let pred = centroids
                .iter()
                .enumerate()
                .filter_map(|(c, cen)| {
                    cen.as_ref()
                        .map(|cen| (c, cen.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            hit += (pred == y) as usize;
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
