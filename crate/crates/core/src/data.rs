//! Synthetic nested-structure scenes, simulated acquisition shifts and the
//! on-disk dataset layout.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use reflect_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mask::LabelMask;
use crate::parallel;

/// Outline family of one foreground class. Class 1 is drawn around the
/// scene centre; each later class wraps the structures before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Disc,
    /// A disc with aspect ratio drawn from `ellipse_aspect`.
    Ellipse,
    /// Annulus of `ring_thickness` around the previous structure.
    Ring,
    /// Annulus with one side cut away.
    Crescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub k_classes: usize,
    /// Families of classes `1..k`.
    pub families: Vec<ShapeFamily>,
    /// Radius range of the class-1 structure, pixels.
    pub radius: (f64, f64),
    pub ring_thickness: (f64, f64),
    /// Maximum centre offset from the canvas middle, pixels.
    pub center_jitter: f64,
    /// Aspect range applied to every structure.
    pub aspect: (f64, f64),
    /// Aspect range of `Ellipse` structures.
    pub ellipse_aspect: (f64, f64),
    /// Mean intensity per class, background first.
    pub intensities: Vec<f64>,
    /// Amplitude of a smooth per-scene intensity texture.
    pub texture: f64,
    /// Standard deviation of pixel noise.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            k_classes: 3,
            families: vec![ShapeFamily::Disc, ShapeFamily::Ring],
            radius: (8.0, 13.0),
            ring_thickness: (3.0, 6.0),
            center_jitter: 6.0,
            aspect: (0.8, 1.0),
            ellipse_aspect: (0.55, 0.8),
            intensities: vec![0.35, 0.8, 0.15],
            texture: 0.05,
            noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        if self.k_classes < 2 || self.k_classes > 255 {
            return fail(format!("k_classes {} out of range", self.k_classes));
        }
        if self.families.len() != self.k_classes - 1 || self.intensities.len() != self.k_classes {
            return fail("need k-1 families and k intensities".into());
        }
        if self.height == 0 || self.width == 0 {
            return fail("empty canvas".into());
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0 >= 0.0;
        if !ordered(self.radius) || !ordered(self.ring_thickness) || !ordered(self.aspect) || !ordered(self.ellipse_aspect) {
            return fail("ranges must be ordered and non-negative".into());
        }
        if self.intensities.iter().any(|v| !(0.0..=1.0).contains(v)) || self.noise < 0.0 || self.texture < 0.0 {
            return fail("intensities in [0, 1] and non-negative noise".into());
        }
        Ok(())
    }
}

/// splitmix64 finaliser over a `(seed, stream, index)` triple.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

const MIN_CLASS_PIXELS: usize = 4;
const MAX_ATTEMPTS: u64 = 10;

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Tensor<f32>, LabelMask) {
    let (h, w) = (spec.height, spec.width);
    let cy = (h as f64 - 1.0) / 2.0 + draw(rng, (-spec.center_jitter, spec.center_jitter));
    let cx = (w as f64 - 1.0) / 2.0 + draw(rng, (-spec.center_jitter, spec.center_jitter));
    let theta = draw(rng, (0.0, PI));
    let aspect = draw(rng, spec.aspect);
    let cut = draw(rng, (0.0, 2.0 * PI));
    let (sin, cos) = theta.sin_cos();

    // Radial bands per class in the rotated, aspect-corrected frame.
    let mut bands = Vec::with_capacity(spec.families.len());
    let mut outer = 0.0;
    for (i, family) in spec.families.iter().enumerate() {
        let (inner, r, squash) = match family {
            ShapeFamily::Disc if i == 0 => (0.0, draw(rng, spec.radius), 1.0),
            ShapeFamily::Ellipse if i == 0 => (0.0, draw(rng, spec.radius), draw(rng, spec.ellipse_aspect)),
            ShapeFamily::Disc | ShapeFamily::Ellipse => (outer, outer + draw(rng, spec.radius), 1.0),
            ShapeFamily::Ring | ShapeFamily::Crescent => {
                let base = if i == 0 { draw(rng, spec.radius) } else { outer };
                (base, base + draw(rng, spec.ring_thickness), 1.0)
            }
        };
        bands.push((*family, inner, r, squash));
        outer = r;
    }

    let mut label = LabelMask::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = cos * dx + sin * dy;
            let v = (-sin * dx + cos * dy) / aspect;
            for (c, &(family, inner, r, squash)) in bands.iter().enumerate() {
                let rho = (u * u + (v / squash) * (v / squash)).sqrt();
                let inside = match family {
                    ShapeFamily::Disc | ShapeFamily::Ellipse => rho <= r && rho >= inner,
                    ShapeFamily::Ring => rho <= r && rho > inner,
                    ShapeFamily::Crescent => {
                        rho <= r && rho > inner && (u * cut.cos() + v * cut.sin()) > -0.3 * r
                    }
                };
                if inside {
                    label.set(y, x, c as u8 + 1);
                    break;
                }
            }
        }
    }

    // Smooth texture: two random low-frequency plane waves.
    let mut waves = [(0.0, 0.0, 0.0); 2];
    for wv in &mut waves {
        let angle = draw(rng, (0.0, 2.0 * PI));
        let freq = draw(rng, (1.0, 3.0)) * 2.0 * PI / w.max(h) as f64;
        *wv = (freq * angle.cos(), freq * angle.sin(), draw(rng, (0.0, 2.0 * PI)));
    }
    let mut img = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let base = spec.intensities[label.get(y, x) as usize];
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                * 0.5
                * spec.texture;
            let noise: f64 = if spec.noise > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                spec.noise * n
            } else {
                0.0
            };
            img.push((base + tex + noise).clamp(0.0, 1.0) as f32);
        }
    }
    (Tensor::new([1, 1, h, w], img).expect("sized to canvas"), label)
}

/// Deterministic scene for `seed`. Retries with derived seeds until every
/// class covers at least a few pixels.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Tensor<f32>, LabelMask)> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5CE7E, attempt));
        let (img, label) = try_scene(spec, &mut rng);
        if (0..spec.k_classes).all(|c| label.count(c as u8) >= MIN_CLASS_PIXELS) {
            return Ok((img, label));
        }
    }
    Err(Error::Gen(format!(
        "some class vanished in all {MAX_ATTEMPTS} attempts (seed {seed})"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShiftSpec {
    /// Exponent range of `x^gamma`.
    pub gamma: (f64, f64),
    /// Amplitude of the multiplicative `1 + a sin(...)` bias field.
    pub bias_amplitude: f64,
    /// Range of the contrast factor about the image mean.
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    /// Multiplicative noise of the same sigma instead of additive.
    pub speckle: bool,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            gamma: (2.8, 3.4),
            bias_amplitude: 0.3,
            contrast: (0.8, 1.0),
            noise_sigma: 0.05,
            speckle: false,
        }
    }
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        Self {
            gamma: (1.0, 1.0),
            bias_amplitude: 0.0,
            contrast: (1.0, 1.0),
            noise_sigma: 0.0,
            speckle: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.0 > 0.0
            && self.gamma.0 <= self.gamma.1
            && self.contrast.0 >= 0.0
            && self.contrast.0 <= self.contrast.1
            && (0.0..1.0).contains(&self.bias_amplitude)
            && self.noise_sigma >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid domain shift {self:?}")));
        }
        Ok(())
    }
}

/// gamma -> bias field -> contrast -> noise, then clip to `[0, 1]`. Stages
/// with neutral parameters are skipped, so the identity spec returns the
/// input unchanged.
pub fn apply_domain_shift(image: &Tensor<f32>, spec: &DomainShiftSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let [_, _, h, w] = image.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5_1F7, 0));
    let mut x: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();

    let gamma = draw(&mut rng, spec.gamma);
    if gamma != 1.0 {
        x.iter_mut().for_each(|v| *v = v.max(0.0).powf(gamma));
    }
    if spec.bias_amplitude > 0.0 {
        let angle = draw(&mut rng, (0.0, 2.0 * PI));
        let freq = draw(&mut rng, (0.5, 1.0)) * 2.0 * PI / w.max(h) as f64;
        let phase = draw(&mut rng, (0.0, 2.0 * PI));
        let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
        for (i, v) in x.iter_mut().enumerate() {
            let (yy, xx) = ((i / w) as f64, (i % w) as f64);
            *v *= 1.0 + spec.bias_amplitude * (fx * xx + fy * yy + phase).sin();
        }
    }
    let contrast = draw(&mut rng, spec.contrast);
    if contrast != 1.0 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v = mean + contrast * (*v - mean));
    }
    if spec.noise_sigma > 0.0 {
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            if spec.speckle {
                *v *= 1.0 + spec.noise_sigma * n;
            } else {
                *v += spec.noise_sigma * n;
            }
        }
    }
    let changed = gamma != 1.0 || spec.bias_amplitude > 0.0 || contrast != 1.0 || spec.noise_sigma > 0.0;
    if !changed {
        return Ok(image.clone());
    }
    Ok(Tensor::new(
        image.shape().to_vec(),
        x.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Shifted,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMask,
    pub domain: Domain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 100,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub shift: DomainShiftSpec,
    pub counts: SplitCounts,
    pub seed: u64,
    /// Domain of the test split.
    pub test_domain: Domain,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            shift: DomainShiftSpec::default(),
            counts: SplitCounts::default(),
            seed: 0,
            test_domain: Domain::Shifted,
        }
    }
}

impl DataConfig {
    pub fn domain(&self, split: Split) -> Domain {
        match split {
            Split::Test => self.test_domain,
            _ => Domain::Source,
        }
    }

    /// Scenes of `split`; scene `i` depends only on (seed, split, i).
    pub fn generate_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.generate_split_as(split, self.domain(split))
    }

    /// Like [`generate_split`](Self::generate_split) with the domain forced,
    /// giving the same scenes with or without the shift.
    pub fn generate_split_as(&self, split: Split, domain: Domain) -> Result<Vec<Sample>> {
        self.scene.validate()?;
        self.shift.validate()?;
        let idx: Vec<usize> = (0..self.counts.get(split)).collect();
        parallel::map(&idx, |&i| {
            let seed = derive_seed(self.seed, split.stream(), i as u64);
            let (mut image, label) = generate_scene(&self.scene, seed)?;
            if domain == Domain::Shifted {
                image = apply_domain_shift(&image, &self.shift, derive_seed(seed, 0xD0, 0))?;
            }
            Ok(Sample {
                id: format!("{}_{i:04}", split.name()),
                image,
                label,
                domain,
            })
        })
        .into_iter()
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image: String,
    pub label: String,
    pub domain: Domain,
}

/// One split's file list. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub items: Vec<ManifestItem>,
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.json", split.name()))
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        io::write_atomic(path, text.as_bytes())
    }

    /// Loads every item; ids are image file stems.
    pub fn load(&self, root: &Path) -> Result<Vec<Sample>> {
        self.items
            .iter()
            .map(|item| {
                let image = io::load_image(&root.join(&item.image))?;
                let label = io::load_mask(&root.join(&item.label))?;
                let id = Path::new(&item.image)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| item.image.clone());
                Ok(Sample {
                    id,
                    image,
                    label,
                    domain: item.domain,
                })
            })
            .collect()
    }
}

/// Loads a split written by [`build_manifest`].
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    DatasetManifest::read(&manifest_path(root, split))?.load(root)
}

/// Errors if any image path is listed by more than one manifest.
pub fn check_disjoint(manifests: &[DatasetManifest]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in manifests {
        for item in &m.items {
            if !seen.insert(item.image.as_str()) {
                return Err(Error::Data(format!("{} appears in more than one split", item.image)));
            }
        }
    }
    Ok(())
}

/// Generates every split under `root` as `<split>/<id>.pgm` images,
/// `<split>/<id>_label.pgm` masks and a `<split>.json` manifest.
pub fn build_manifest(root: &Path, config: &DataConfig) -> Result<Vec<DatasetManifest>> {
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let samples = config.generate_split(split)?;
        let dir = root.join(split.name());
        fs::create_dir_all(&dir)?;
        let mut items = Vec::with_capacity(samples.len());
        for s in &samples {
            let image = format!("{}/{}.pgm", split.name(), s.id);
            let label = format!("{}/{}_label.pgm", split.name(), s.id);
            io::save_image(&root.join(&image), &s.image)?;
            io::save_mask(&root.join(&label), &s.label)?;
            items.push(ManifestItem {
                image,
                label,
                domain: s.domain,
            });
        }
        manifests.push(DatasetManifest { split, items });
    }
    check_disjoint(&manifests)?;
    for m in &manifests {
        m.write(&manifest_path(root, m.split))?;
    }
    Ok(manifests)
}
