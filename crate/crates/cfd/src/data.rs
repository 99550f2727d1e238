//! Synthetic multi-domain identity benchmark: deterministic image
//! generation with an invertible per-domain style map, the P×K×domain
//! batch sampler, and directory persistence.
//!
//! Each identity owns a signature (base colors, two marker positions, a
//! texture frequency) that is rendered identically in every domain; each
//! domain owns a style (channel gains, brightness offset, contrast
//! exponent) applied on top. At zero noise the style map is invertible,
//! so cross-domain pairs differ only by a recoverable transform. Domain
//! index `train_domains` is the held-out unseen domain and its style is
//! forced away from every training style in style-parameter space.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::float::Float;
use crate::tensor::TensorData;
use crate::Result;

/// Generation parameters; every number the generator consumes lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    /// Images per identity per domain.
    pub images_per_id: usize,
    /// Training domains; one extra unseen domain is always generated.
    pub train_domains: usize,
    /// Image extents `[channels, height, width]`.
    pub extents: [usize; 3],
    /// Additive pixel noise amplitude (uniform in `±noise`).
    pub noise: f64,
    /// Minimum distance between the unseen style vector and every
    /// training style vector.
    pub min_style_distance: f64,
    /// Within-domain style variation: each image draws its own style
    /// from the domain family, scaled by this factor (0 = every image
    /// in a domain shares the exact domain style).
    pub style_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_ids: 20,
            images_per_id: 8,
            train_domains: 3,
            extents: [3, 32, 16],
            noise: 0.01,
            min_style_distance: 0.25,
            style_spread: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0 || self.images_per_id == 0 || self.train_domains == 0 {
            return Err(Error::Data("dataset counts must be positive".into()));
        }
        if self.extents.iter().any(|&d| d == 0) {
            return Err(Error::Data("image extents must be positive".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Data("noise amplitude must be nonnegative".into()));
        }
        if !self.min_style_distance.is_finite() || self.min_style_distance < 0.0 {
            return Err(Error::Data("style distance bound must be nonnegative".into()));
        }
        if !self.style_spread.is_finite() || self.style_spread < 0.0 {
            return Err(Error::Data("style spread must be nonnegative".into()));
        }
        Ok(())
    }

    /// Index of the held-out domain.
    pub fn unseen_domain(&self) -> usize {
        self.train_domains
    }
}

/// Per-domain style:
/// `styled = gain_c · (content · (1 + pattern(y, x)))^contrast + brightness`
/// where `pattern` is a domain-specific sinusoidal interference wave in
/// normalized image coordinates, drawn from the same frequency band as
/// the identity texture. The global affine/gamma part is exactly what
/// instance statistics can calibrate away; the multiplicative wave is
/// position-dependent and spectrally entangled with the identity signal,
/// so it survives channel statistics and has to be separated
/// structurally. Parameter ranges are chosen so styled pixels stay
/// inside `(0,1)` and the map is invertible at zero noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub gain: [f64; 3],
    pub brightness: f64,
    pub contrast: f64,
    /// Amplitude of the interference wave.
    pub pattern_amp: f64,
    /// Wave frequency along (y, x) in cycles per image.
    pub pattern_freq: [f64; 2],
    pub pattern_phase: f64,
    /// Per-channel phase offset, so the wave also distorts color ratios.
    pub pattern_chroma: f64,
    /// Domain-specific bright distractor blobs, shaped like identity
    /// markers but pinned to per-domain positions: additive in styled
    /// space so the map stays invertible.
    pub blobs: [(f64, f64); 2],
    pub blob_amp: f64,
}

impl DomainStyle {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            gain: [
                rng.gen_range(0.6..0.8),
                rng.gen_range(0.6..0.8),
                rng.gen_range(0.6..0.8),
            ],
            brightness: rng.gen_range(0.05..0.10),
            contrast: rng.gen_range(0.8..1.25),
            pattern_amp: rng.gen_range(0.2..0.35),
            pattern_freq: [rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0)],
            pattern_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            pattern_chroma: rng.gen_range(0.6..2.5),
            blobs: [
                (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
                (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
            ],
            blob_amp: rng.gen_range(0.18..0.30),
        }
    }

    /// Euclidean distance in style-parameter space; pattern frequencies
    /// are scaled down so one axis does not dominate the affine part.
    pub fn distance(&self, other: &DomainStyle) -> f64 {
        let mut d = (self.brightness - other.brightness).powi(2)
            + (self.contrast - other.contrast).powi(2)
            + (self.pattern_amp - other.pattern_amp).powi(2)
            + (0.3 * (self.pattern_chroma - other.pattern_chroma)).powi(2);
        for c in 0..3 {
            d += (self.gain[c] - other.gain[c]).powi(2);
        }
        for a in 0..2 {
            d += (0.3 * (self.pattern_freq[a] - other.pattern_freq[a])).powi(2);
        }
        d += (self.blob_amp - other.blob_amp).powi(2);
        for b in 0..2 {
            d += (0.5 * (self.blobs[b].0 - other.blobs[b].0)).powi(2)
                + (0.5 * (self.blobs[b].1 - other.blobs[b].1)).powi(2);
        }
        d.sqrt()
    }

    /// Per-image member of the domain's style family: the photometric
    /// parameters jitter around the domain center, the interference
    /// wave slides in phase, and the distractor blobs drift around
    /// their domain anchors. The wave frequency and chroma stay fixed,
    /// since those carry the domain's signature.
    pub fn member(&self, spread: f64, rng: &mut impl Rng) -> DomainStyle {
        let mut m = self.clone();
        if spread == 0.0 {
            return m;
        }
        for c in 0..3 {
            m.gain[c] += spread * rng.gen_range(-0.08..0.08);
        }
        m.brightness = (self.brightness + spread * rng.gen_range(-0.03..0.03)).max(0.0);
        m.contrast = (self.contrast + spread * rng.gen_range(-0.12..0.12)).max(0.5);
        m.pattern_amp = (self.pattern_amp + spread * rng.gen_range(-0.06..0.06)).max(0.0);
        m.pattern_phase += spread * rng.gen_range(-0.5..0.5);
        for b in 0..2 {
            m.blobs[b].0 = (self.blobs[b].0 + spread * rng.gen_range(-0.08..0.08)).clamp(0.1, 0.9);
            m.blobs[b].1 = (self.blobs[b].1 + spread * rng.gen_range(-0.08..0.08)).clamp(0.1, 0.9);
        }
        m.blob_amp = (self.blob_amp + spread * rng.gen_range(-0.04..0.04)).max(0.0);
        m
    }

    /// Additive distractor-blob term at normalized coordinates.
    fn blob(&self, py: f64, px: f64) -> f64 {
        for (by, bx) in self.blobs {
            if (py - by).abs() < 0.12 && (px - bx).abs() < 0.2 {
                return self.blob_amp;
            }
        }
        0.0
    }

    /// Interference wave value at normalized coordinates `(py, px)`.
    pub fn pattern(&self, channel: usize, py: f64, px: f64) -> f64 {
        let arg = std::f64::consts::TAU
            * (self.pattern_freq[0] * py + self.pattern_freq[1] * px)
            + self.pattern_phase
            + self.pattern_chroma * channel.min(2) as f64;
        self.pattern_amp * arg.sin()
    }

    pub fn apply(&self, channel: usize, content: f64, py: f64, px: f64) -> f64 {
        let modulated = content * (1.0 + self.pattern(channel, py, px));
        self.gain[channel.min(2)] * modulated.powf(self.contrast)
            + self.brightness
            + self.blob(py, px)
    }

    /// Inverse of [`DomainStyle::apply`]; exact at zero noise.
    pub fn invert(&self, channel: usize, styled: f64, py: f64, px: f64) -> f64 {
        ((styled - self.brightness - self.blob(py, px)) / self.gain[channel.min(2)])
            .max(0.0)
            .powf(1.0 / self.contrast)
            / (1.0 + self.pattern(channel, py, px))
    }
}

/// What one identity looks like, independent of domain.
#[derive(Clone, Debug)]
struct IdentitySignature {
    base_color: [f64; 3],
    markers: [(f64, f64); 2],
    /// Texture wave vector in cycles per image along (y, x); the
    /// orientation and frequency together identify the person, so the
    /// identity signal is spatial structure rather than raw color.
    freq: [f64; 2],
}

impl IdentitySignature {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            base_color: [
                rng.gen_range(0.4..0.9),
                rng.gen_range(0.4..0.9),
                rng.gen_range(0.4..0.9),
            ],
            markers: [
                (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
            ],
            freq: [rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[c, h, w]` pixel buffer in `[0,1]`.
    pub image: TensorData<f32>,
    pub id: usize,
    pub domain: usize,
    /// Index of the image within its (id, domain) group.
    pub img_idx: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// `train_domains + 1` styles; the last one is the unseen domain.
    pub styles: Vec<DomainStyle>,
    pub samples: Vec<Sample>,
}

/// splitmix64-style stream key so independent generator components get
/// decorrelated ChaCha streams from one master seed.
fn stream_key(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(a.wrapping_mul(0x94d049bb133111eb))
        .wrapping_add(b.wrapping_add(0x2545f4914f6cdd1d));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tag, a, b))
}

const TAG_STYLE: u64 = 1;
const TAG_ID: u64 = 2;
const TAG_CONTENT: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_MEMBER: u64 = 5;

/// Domain-independent content of one `(id, img_idx)` pair, every pixel in
/// `[0.06, 0.56]` so any style keeps pixels inside `(0,1)`.
fn render_content(spec: &SyntheticSpec, sig: &IdentitySignature, id: usize, img_idx: usize) -> Vec<f64> {
    let [c, h, w] = spec.extents;
    let mut jitter = rng_for(spec.seed, TAG_CONTENT, id as u64, img_idx as u64);
    let phase: f64 = jitter.gen_range(0.0..std::f64::consts::TAU);
    let dy: f64 = jitter.gen_range(-0.05..0.05);
    let dx: f64 = jitter.gen_range(-0.05..0.05);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = sig.base_color[ch.min(2)];
        for y in 0..h {
            for x in 0..w {
                let fy = y as f64 / h as f64;
                let fx = x as f64 / w as f64;
                let wave = (std::f64::consts::TAU * (sig.freq[0] * fy + sig.freq[1] * fx)
                    + phase)
                    .sin()
                    * 0.5
                    + 0.5;
                let mut raw = base * (0.55 + 0.45 * wave);
                for (my, mx) in sig.markers {
                    let my = (my + dy).clamp(0.0, 1.0);
                    let mx = (mx + dx).clamp(0.0, 1.0);
                    if (fy - my).abs() < 0.12 && (fx - mx).abs() < 0.2 {
                        raw = if ch == 0 { 1.0 } else { 1.0 - base };
                    }
                }
                out[(ch * h + y) * w + x] = 0.06 + 0.50 * raw.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Deterministic dataset generation for all `train_domains + 1` domains.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.train_domains;

    let mut style_rng = rng_for(spec.seed, TAG_STYLE, 0, 0);
    let styles: Vec<DomainStyle> = (0..k).map(|_| DomainStyle::sample(&mut style_rng)).collect();
    let mut styles = styles;
    let mut unseen = None;
    for _ in 0..10_000 {
        let candidate = DomainStyle::sample(&mut style_rng);
        if styles
            .iter()
            .all(|s| s.distance(&candidate) >= spec.min_style_distance)
        {
            unseen = Some(candidate);
            break;
        }
    }
    let unseen = unseen.ok_or_else(|| {
        Error::Data(format!(
            "could not draw an unseen style at least {} away from every training style",
            spec.min_style_distance
        ))
    })?;
    styles.push(unseen);

    let signatures: Vec<IdentitySignature> = (0..spec.num_ids)
        .map(|id| IdentitySignature::sample(&mut rng_for(spec.seed, TAG_ID, id as u64, 0)))
        .collect();

    let [c, h, w] = spec.extents;
    let mut samples = Vec::with_capacity(spec.num_ids * spec.images_per_id * (k + 1));
    for id in 0..spec.num_ids {
        for img_idx in 0..spec.images_per_id {
            let content = render_content(spec, &signatures[id], id, img_idx);
            for (domain, family) in styles.iter().enumerate() {
                let mut noise_rng = rng_for(
                    spec.seed,
                    TAG_NOISE,
                    (id * spec.images_per_id + img_idx) as u64,
                    domain as u64,
                );
                let mut member_rng = rng_for(
                    spec.seed,
                    TAG_MEMBER,
                    (id * spec.images_per_id + img_idx) as u64,
                    domain as u64,
                );
                let style = family.member(spec.style_spread, &mut member_rng);
                let mut data = Vec::with_capacity(content.len());
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let v = content[(ch * h + y) * w + x];
                            let py = y as f64 / h as f64;
                            let px = x as f64 / w as f64;
                            let mut p = style.apply(ch, v, py, px);
                            if spec.noise > 0.0 {
                                p += noise_rng.gen_range(-spec.noise..spec.noise);
                            }
                            data.push(p.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
                samples.push(Sample {
                    image: TensorData {
                        shape: vec![c, h, w],
                        data,
                    },
                    id,
                    domain,
                    img_idx,
                });
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        styles,
        samples,
    })
}

impl Dataset {
    /// Indices of all samples from one domain.
    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].domain == domain)
            .collect()
    }

    /// Stacks the chosen samples into an `n×c×h×w` batch in the target
    /// precision, with aligned id and domain label vectors.
    pub fn stack<F: Float>(&self, indices: &[usize]) -> Result<(TensorData<F>, Vec<usize>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("cannot stack an empty batch".into()));
        }
        let [c, h, w] = self.spec.extents;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut ids = Vec::with_capacity(indices.len());
        let mut domains = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            data.extend(s.image.data.iter().map(|&v| F::from_f64(v as f64)));
            ids.push(s.id);
            domains.push(s.domain);
        }
        Ok((
            TensorData {
                shape: vec![indices.len(), c, h, w],
                data,
            },
            ids,
            domains,
        ))
    }
}

/// One P×K×domain training batch: for every training domain, `p`
/// identities with `k_imgs` images each, concatenated domain by domain.
pub fn sample_batch(
    dataset: &Dataset,
    rng: &mut impl Rng,
    p: usize,
    k_imgs: usize,
) -> Result<Vec<usize>> {
    let spec = &dataset.spec;
    if p == 0 || k_imgs == 0 {
        return Err(Error::Data("batch geometry must be positive".into()));
    }
    if p > spec.num_ids {
        return Err(Error::Data(format!(
            "cannot sample {p} identities from {}",
            spec.num_ids
        )));
    }
    if k_imgs > spec.images_per_id {
        return Err(Error::Data(format!(
            "cannot sample {k_imgs} images per id from {}",
            spec.images_per_id
        )));
    }
    // samples are laid out as (id, img_idx, domain) nested loops
    let sample_at = |id: usize, img: usize, domain: usize| {
        (id * spec.images_per_id + img) * (spec.train_domains + 1) + domain
    };
    let mut batch = Vec::with_capacity(spec.train_domains * p * k_imgs);
    for domain in 0..spec.train_domains {
        let mut ids: Vec<usize> = (0..spec.num_ids).collect();
        partial_shuffle(&mut ids, p, rng);
        for &id in ids.iter().take(p) {
            let mut imgs: Vec<usize> = (0..spec.images_per_id).collect();
            partial_shuffle(&mut imgs, k_imgs, rng);
            for &img in imgs.iter().take(k_imgs) {
                batch.push(sample_at(id, img, domain));
            }
        }
    }
    Ok(batch)
}

/// Fisher–Yates for the first `take` positions only.
fn partial_shuffle(v: &mut [usize], take: usize, rng: &mut impl Rng) {
    let n = v.len();
    for i in 0..take.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        v.swap(i, j);
    }
}

// ---- persistence ----

/// Writes one flat little-endian f32 buffer per sample plus a plain-text
/// index (`file id domain` per line) and the generation spec.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("img_{i:05}.bin");
        let mut bytes = Vec::with_capacity(s.image.data.len() * 4);
        for &v in &s.image.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&name), bytes)?;
        index.push_str(&format!("{name} {} {}\n", s.id, s.domain));
    }
    std::fs::write(dir.join("index.txt"), index)?;
    let spec_text = toml::to_string(&dataset.spec)
        .map_err(|e| Error::Data(format!("spec not serializable: {e}")))?;
    std::fs::write(dir.join("spec.toml"), spec_text)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`]. Styles are
/// reconstructed from the stored spec (generation is deterministic), and
/// every pixel buffer is checked against the spec extents.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_text = std::fs::read_to_string(dir.join("spec.toml"))?;
    let spec: SyntheticSpec =
        toml::from_str(&spec_text).map_err(|e| Error::Data(format!("bad spec.toml: {e}")))?;
    let mut dataset = generate(&spec)?;
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let [c, h, w] = spec.extents;
    let mut samples = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("malformed index line {}", lineno + 1)));
        }
        let bytes = std::fs::read(dir.join(parts[0]))?;
        if bytes.len() != c * h * w * 4 {
            return Err(Error::Data(format!(
                "image buffer {} has {} bytes, expected {}",
                parts[0],
                bytes.len(),
                c * h * w * 4
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let id: usize = parts[1]
            .parse()
            .map_err(|_| Error::Data(format!("bad id on index line {}", lineno + 1)))?;
        let domain: usize = parts[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad domain on index line {}", lineno + 1)))?;
        let img_idx = dataset
            .samples
            .get(samples.len())
            .map(|s| s.img_idx)
            .unwrap_or(0);
        samples.push(Sample {
            image: TensorData {
                shape: vec![c, h, w],
                data,
            },
            id,
            domain,
            img_idx,
        });
    }
    if samples.len() != dataset.samples.len() {
        return Err(Error::Data(format!(
            "index lists {} samples, spec implies {}",
            samples.len(),
            dataset.samples.len()
        )));
    }
    dataset.samples = samples;
    Ok(dataset)
}
