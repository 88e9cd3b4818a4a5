//! Synthetic two-domain glyph images, the SDSH dataset file format, and
//! seeded minibatch iteration.
//!
//! Each sample is generated from its own RNG seeded by `(seed, sample id)`,
//! so generation parallelizes per sample and the source and target
//! generators only differ in the appearance shift applied afterwards.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDSH";
pub const VERSION: u32 = 1;
pub const UNLABELED: u32 = u32::MAX;
const HEADER_LEN: usize = 28;

/// Environment variable capping data-generation threads.
pub const THREADS_ENV: &str = "SAMB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Appearance shift applied to target images only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shift {
    /// Added to every pixel.
    pub brightness: f64,
    /// 0 none, 1 stripes, 2 checkerboard, 3 diagonal waves.
    pub texture: u32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Hue rotation in degrees.
    pub hue_degrees: f64,
}

impl Shift {
    pub const NONE: Shift = Shift {
        brightness: 0.0,
        texture: 0,
        noise: 0.0,
        hue_degrees: 0.0,
    };
}

impl Default for Shift {
    fn default() -> Self {
        Shift {
            brightness: 0.2,
            texture: 0,
            noise: 0.2,
            hue_degrees: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            train_per_class: 128,
            eval_per_class: 64,
            image_size: 16,
            channels: 3,
            shift: Shift::default(),
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size < 4 || self.channels == 0 {
            return Err(Error::Config(
                "num_classes, image_size >= 4 and channels are required".into(),
            ));
        }
        if self.shift.texture > 3 {
            return Err(Error::Config(format!("unknown texture id {}", self.shift.texture)));
        }
        if self.shift.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// An in-memory SDSH dataset. Sample ids are positions in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    labels: Vec<u32>,
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        labels: Vec<u32>,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let numel = channels * height * width;
        if pixels.len() != labels.len() * numel {
            return Err(Error::shape(
                "dataset",
                &[pixels.len()],
                &[labels.len(), channels, height, width],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= num_classes) {
            return Err(Error::Index {
                index: bad as usize,
                bound: num_classes,
            });
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, id: usize) -> &[f32] {
        let n = self.image_numel();
        &self.pixels[id * n..(id + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Label of sample `id`, `None` when stored unlabeled.
    pub fn label(&self, id: usize) -> Option<usize> {
        let l = self.labels[id];
        (l != UNLABELED).then_some(l as usize)
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().all(|&l| l != UNLABELED)
    }

    /// A copy with every label erased.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: vec![UNLABELED; self.len()],
            ..self.clone()
        }
    }

    /// Gathers `ids` into a flat f64 `[B, C, H, W]` buffer.
    pub fn gather(&self, ids: &[u32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.len() * self.image_numel());
        for &id in ids {
            out.extend(self.image(id as usize).iter().map(|&x| x as f64));
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 4 * self.image_numel()));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in 0..self.len() {
            out.extend_from_slice(&self.labels[id].to_le_bytes());
            for &x in self.image(id) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"SDSH\"".into()));
        }
        if buf.len() < HEADER_LEN {
            return Err(fail(
                buf.len(),
                format!("truncated header: {} of {HEADER_LEN} bytes", buf.len()),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(fail(4, format!("unsupported dataset version {version}")));
        }
        let count = u32_at(8) as usize;
        let (c, h, w, k) = (
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
            u32_at(24) as usize,
        );
        let numel = c * h * w;
        let record = 4 + 4 * numel;
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * numel);
        for i in 0..count {
            let start = HEADER_LEN + i * record;
            if buf.len() < start + 4 {
                return Err(fail(buf.len(), format!("truncated label of sample {i}")));
            }
            if buf.len() < start + record {
                return Err(fail(buf.len(), format!("truncated payload of sample {i}")));
            }
            let label = u32_at(start);
            if label != UNLABELED && label as usize >= k {
                return Err(fail(start, format!("label {label} out of range for {k} classes")));
            }
            labels.push(label);
            pixels.extend(
                buf[start + 4..start + record]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        let end = HEADER_LEN + count * record;
        if buf.len() != end {
            return Err(fail(end, format!("{} trailing bytes", buf.len() - end)));
        }
        Dataset::new(c, h, w, k, labels, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

/// A labeled source set.
#[derive(Clone, Debug)]
pub struct LabeledSet(Dataset);

impl LabeledSet {
    pub fn new(ds: Dataset) -> Result<Self> {
        if !ds.is_labeled() {
            return Err(Error::Contract("labeled set contains unlabeled samples".into()));
        }
        Ok(LabeledSet(ds))
    }

    pub fn dataset(&self) -> &Dataset {
        &self.0
    }

    pub fn labels(&self, ids: &[u32]) -> Vec<usize> {
        ids.iter().map(|&i| self.0.labels[i as usize] as usize).collect()
    }
}

/// Target images for training. Labels are dropped on construction, so the
/// training path cannot see them.
#[derive(Clone, Debug)]
pub struct UnlabeledSet(Dataset);

impl UnlabeledSet {
    pub fn new(ds: &Dataset) -> Self {
        UnlabeledSet(ds.without_labels())
    }

    pub fn dataset(&self) -> &Dataset {
        &self.0
    }
}

/// One minibatch drawn from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// Flat `[B, C, H, W]` values in `[0, 1]`.
    pub images: Vec<f64>,
    /// Present exactly for source batches.
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub sample_ids: Vec<u32>,
}

impl DomainBatch {
    pub fn source(set: &LabeledSet, ids: Vec<u32>) -> Self {
        DomainBatch {
            images: set.0.gather(&ids),
            labels: Some(set.labels(&ids)),
            domain: Domain::Source,
            sample_ids: ids,
        }
    }

    pub fn target(set: &UnlabeledSet, ids: Vec<u32>) -> Self {
        DomainBatch {
            images: set.0.gather(&ids),
            labels: None,
            domain: Domain::Target,
            sample_ids: ids,
        }
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Sample ids of one epoch split into batches; the last partial batch is
/// kept. With `shuffle`, the order is a permutation seeded by
/// `(seed, epoch)`.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<u32>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut ids: Vec<u32> = (0..len as u32).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch));
        ids.shuffle(&mut rng);
    }
    Ok(ids.chunks(batch).map(<[u32]>::to_vec).collect())
}

/// Endless sequence of batches, epoch after epoch.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    pending: std::collections::VecDeque<Vec<u32>>,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::Contract("cannot iterate an empty dataset".into()));
        }
        epoch_batches(len, batch, seed, 0, shuffle)?;
        Ok(BatchStream {
            len,
            batch,
            seed,
            shuffle,
            epoch: 0,
            pending: Default::default(),
        })
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Whether the next batch starts a new epoch.
    pub fn at_epoch_start(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_batch(&mut self) -> Vec<u32> {
        if self.pending.is_empty() {
            self.pending = epoch_batches(self.len, self.batch, self.seed, self.epoch, self.shuffle)
                .expect("validated in new")
                .into();
        }
        let b = self.pending.pop_front().expect("nonempty epoch");
        if self.pending.is_empty() {
            self.epoch += 1;
        }
        b
    }
}

/// SplitMix64 finalizer over two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Signed distance (pixels, negative inside) from `(x, y)` to the glyph of
/// `shape` with radius `r`, in glyph-local rotated coordinates.
fn glyph_sdf(shape: usize, x: f64, y: f64, r: f64) -> f64 {
    let half = 1.1;
    let bar = |u: f64, v: f64| (u.abs() - r).max(v.abs() - half);
    match shape {
        0 => bar(x, y),
        1 => (x * x + y * y).sqrt() - 0.8 * r,
        2 => bar(x, y).min(bar(y, x)),
        _ => ((x * x + y * y).sqrt() - 0.75 * r).abs() - 1.0,
    }
}

fn texture(id: u32, x: usize, y: usize) -> f64 {
    match id {
        1 => ((y / 2) % 2) as f64,
        2 => ((x / 2 + y / 2) % 2) as f64,
        3 => 0.5 + 0.5 * ((x + y) as f64 * 0.9).sin(),
        _ => 0.0,
    }
}

/// Rotates RGB hue about the gray axis.
fn hue_rotate(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let q = (1.0f64 / 3.0).sqrt() * s;
    let m = [[c + k, k - q, k + q], [k + q, c + k, k - q], [k - q, k + q, c + k]];
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

/// Renders sample `id` of class `label`, then applies `shift`.
pub fn render_sample(spec: &SyntheticSpec, id: u64, label: usize, shift: &Shift) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, id));
    let s = spec.image_size;
    let scale = s as f64 / 16.0;
    let shape = label % 4;
    let base_angle = (label / 4) as f64 * PI / 8.0;
    let angle = base_angle + rng.random_range(-0.25..0.25);
    let r = rng.random_range(3.5..5.5) * scale;
    let c0 = (s as f64 - 1.0) / 2.0;
    let cx = c0 + rng.random_range(-2.0..2.0) * scale;
    let cy = c0 + rng.random_range(-2.0..2.0) * scale;
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.25));
    let pixel_noise = Normal::new(0.0, 0.03).expect("valid");
    let noise_draws: Vec<f64> = (0..spec.channels * s * s)
        .map(|_| pixel_noise.sample(&mut rng))
        .collect();
    let shift_noise: Vec<f64> = if shift.noise > 0.0 {
        let n = Normal::new(0.0, shift.noise).expect("valid");
        (0..spec.channels * s * s).map(|_| n.sample(&mut rng)).collect()
    } else {
        vec![0.0; spec.channels * s * s]
    };
    let (sa, ca) = angle.sin_cos();
    let mut out = vec![0f32; spec.channels * s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
            let cover = (0.5 - glyph_sdf(shape, u, v, r)).clamp(0.0, 1.0);
            let tex = 0.25 * texture(shift.texture, x, y) * (1.0 - cover);
            let mut rgb: [f64; 3] = std::array::from_fn(|ch| cover * fg[ch] + (1.0 - cover) * bg[ch] + tex);
            if shift.hue_degrees != 0.0 {
                rgb = hue_rotate(rgb, shift.hue_degrees);
            }
            for ch in 0..spec.channels {
                let k = ch * s * s + y * s + x;
                let base = if spec.channels == 3 {
                    rgb[ch]
                } else {
                    rgb.iter().sum::<f64>() / 3.0
                };
                let v = base + shift.brightness + noise_draws[k] + shift_noise[k];
                out[k] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// First sample id of each split; splits never share ids.
pub const SPLIT_ID_BASE: [(Split, u64); 4] = [
    (Split::SourceTrain, 0),
    (Split::SourceEval, 1 << 32),
    (Split::TargetTrain, 2 << 32),
    (Split::TargetEval, 3 << 32),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceEval,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceEval,
        Split::TargetTrain,
        Split::TargetEval,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train.sdsh",
            Split::SourceEval => "source_eval.sdsh",
            Split::TargetTrain => "target_train.sdsh",
            Split::TargetEval => "target_eval.sdsh",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceEval => Domain::Source,
            Split::TargetTrain | Split::TargetEval => Domain::Target,
        }
    }

    fn id_base(self) -> u64 {
        SPLIT_ID_BASE.iter().find(|(s, _)| *s == self).map(|&(_, b)| b).unwrap()
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Generates `count` samples with ids `first_id..`, labels cycling through
/// the classes.
pub fn generate_samples(
    spec: &SyntheticSpec,
    first_id: u64,
    count: usize,
    shift: &Shift,
) -> Result<(Vec<u32>, Vec<f32>)> {
    spec.validate()?;
    let work = || -> Vec<Vec<f32>> {
        (0..count)
            .into_par_iter()
            .map(|i| render_sample(spec, first_id + i as u64, i % spec.num_classes, shift))
            .collect()
    };
    let images = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let labels = (0..count).map(|i| (i % spec.num_classes) as u32).collect();
    Ok((labels, images.concat()))
}

/// Generates one split. Target training data is stored unlabeled.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let per_class = match split {
        Split::SourceTrain | Split::TargetTrain => spec.train_per_class,
        Split::SourceEval | Split::TargetEval => spec.eval_per_class,
    };
    let shift = match split.domain() {
        Domain::Source => Shift::NONE,
        Domain::Target => spec.shift,
    };
    let (mut labels, pixels) = generate_samples(spec, split.id_base(), per_class * spec.num_classes, &shift)?;
    if split == Split::TargetTrain {
        labels.iter_mut().for_each(|l| *l = UNLABELED);
    }
    Dataset::new(
        spec.channels,
        spec.image_size,
        spec.image_size,
        spec.num_classes,
        labels,
        pixels,
    )
}

/// The four splits used by training and evaluation.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub source_train: LabeledSet,
    pub source_eval: Dataset,
    pub target_train: UnlabeledSet,
    pub target_eval: Dataset,
}

impl DomainData {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        Self::from_splits(
            generate_split(spec, Split::SourceTrain)?,
            generate_split(spec, Split::SourceEval)?,
            generate_split(spec, Split::TargetTrain)?,
            generate_split(spec, Split::TargetEval)?,
        )
    }

    pub fn from_splits(
        source_train: Dataset,
        source_eval: Dataset,
        target_train: Dataset,
        target_eval: Dataset,
    ) -> Result<Self> {
        let shape = |d: &Dataset| (d.channels, d.height, d.width, d.num_classes);
        let s = shape(&source_train);
        if [&source_eval, &target_train, &target_eval]
            .iter()
            .any(|d| shape(d) != s)
        {
            return Err(Error::Contract(
                "dataset splits disagree on image shape or class count".into(),
            ));
        }
        if !source_eval.is_labeled() || !target_eval.is_labeled() {
            return Err(Error::Contract("evaluation splits must be labeled".into()));
        }
        Ok(DomainData {
            source_train: LabeledSet::new(source_train)?,
            source_eval,
            target_train: UnlabeledSet::new(&target_train),
            target_eval,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |s: Split| Dataset::load(&dir.join(s.file_name()));
        Self::from_splits(
            load(Split::SourceTrain)?,
            load(Split::SourceEval)?,
            load(Split::TargetTrain)?,
            load(Split::TargetEval)?,
        )
    }
}

/// Writes all four splits into `dir`.
pub fn write_splits(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Split::ALL
        .iter()
        .map(|&s| {
            let path = dir.join(s.file_name());
            generate_split(spec, s)?.save(&path)?;
            Ok(path)
        })
        .collect()
}
