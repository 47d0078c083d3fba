//! Synthetic semantic-fallback benchmark.
//!
//! Each identity is a smooth low-frequency pattern that dominates pixel variance. Fakes
//! carry a weak local artifact whose form depends on the domain: domain A blends a
//! rectangle with a shifted local mean and a ringing seam along its border, domain B
//! stamps a zero-mean high-frequency checkerboard patch. Both domains share high
//! frequency energy; only domain A also shifts low-frequency content.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GsdError, Result};
use crate::rng;

pub const GROUP_SIZE: usize = 10;
const DATA_MAGIC: &[u8; 8] = b"GSDDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Domain::A),
            1 => Some(Domain::B),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = GsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(GsdError::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    /// Half real, half fake.
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub semantic_strength: f64,
    pub artifact_strength: f64,
    pub noise_sigma: f64,
    pub domain: Domain,
    /// Seed of the per-sample streams.
    pub seed: u64,
    /// Seed of the identity bank; splits that share it share identities.
    pub bank_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            samples_per_identity: 40,
            image_size: 32,
            semantic_strength: 1.0,
            artifact_strength: 0.6,
            noise_sigma: 0.05,
            domain: Domain::A,
            seed: 0,
            bank_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(GsdError::Validation(format!(
                "need at least 2 identities, got {}",
                self.n_identities
            )));
        }
        if self.samples_per_identity == 0 || self.samples_per_identity % 2 != 0 {
            return Err(GsdError::Validation(format!(
                "samples_per_identity must be even and positive, got {}",
                self.samples_per_identity
            )));
        }
        if self.image_size < 4 {
            return Err(GsdError::Validation(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        for (name, v) in [
            ("semantic_strength", self.semantic_strength),
            ("artifact_strength", self.artifact_strength),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GsdError::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// Row-major pixels in [0, 1], exactly representable as `f32`.
    pub pixels: Vec<f64>,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub identity_id: usize,
    pub group_id: usize,
    pub domain: Domain,
}

/// Identity base patterns, each `image_size²` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityBank {
    pub image_size: usize,
    pub patterns: Vec<Vec<f64>>,
}

/// `n` smooth random fields built from cosine modes of at most two cycles per side,
/// min-max normalised to [0, 1].
pub fn make_identity_bank(n: usize, image_size: usize, seed: u64) -> Result<IdentityBank> {
    if n < 2 {
        return Err(GsdError::Validation(format!(
            "identity bank needs at least 2 identities, got {n}"
        )));
    }
    let s = image_size as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let patterns = (0..n)
        .map(|id| {
            let mut r = rng::stream(seed, &[rng::label("identity"), id as u64]);
            let mut modes = Vec::new();
            for fy in 0..=2 {
                for fx in 0..=2 {
                    if fx == 0 && fy == 0 {
                        continue;
                    }
                    let amp = normal.sample(&mut r) / (1.0 + (fx * fx + fy * fy) as f64).sqrt();
                    let phase = r.gen_range(0.0..2.0 * PI);
                    modes.push((fx as f64, fy as f64, amp, phase));
                }
            }
            let mut img = vec![0.0; image_size * image_size];
            for y in 0..image_size {
                for x in 0..image_size {
                    img[y * image_size + x] = modes
                        .iter()
                        .map(|&(fx, fy, a, ph)| {
                            a * (2.0 * PI * (fx * x as f64 + fy * y as f64) / s + ph).cos()
                        })
                        .sum();
                }
            }
            let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            img.iter_mut().for_each(|v| *v = (*v - lo) / span);
            img
        })
        .collect();
    Ok(IdentityBank {
        image_size,
        patterns,
    })
}

/// Unscaled artifact field and its support mask for one sample.
pub fn artifact_field(domain: Domain, image_size: usize, sample_seed: u64) -> (Vec<f64>, Vec<bool>) {
    let s = image_size;
    let mut field = vec![0.0; s * s];
    let mut mask = vec![false; s * s];
    let mut r = rng::stream(sample_seed, &[rng::label("artifact"), u64::from(domain.code())]);
    let checker = |x: usize, y: usize| if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
    match domain {
        Domain::A => {
            let (lo, hi) = (s / 4, s / 2);
            let w = r.gen_range(lo..=hi);
            let h = r.gen_range(lo..=hi);
            let x0 = r.gen_range(0..=s - w);
            let y0 = r.gen_range(0..=s - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    field[y * s + x] = 1.0;
                    mask[y * s + x] = true;
                }
            }
        }
        Domain::B => {
            let side = r.gen_range(s / 4..=s * 3 / 8);
            let x0 = r.gen_range(0..=s - side);
            let y0 = r.gen_range(0..=s - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    field[y * s + x] = checker(x, y);
                    mask[y * s + x] = true;
                }
            }
        }
    }
    (field, mask)
}

/// `clamp(semantic·base + noise + [fake] artifact·field)`, quantised to `f32`.
pub fn render_sample(
    bank: &IdentityBank,
    identity_id: usize,
    is_fake: bool,
    domain: Domain,
    config: &SynthConfig,
    sample_seed: u64,
) -> Result<Vec<f64>> {
    if identity_id >= bank.patterns.len() {
        return Err(GsdError::Range {
            index: identity_id,
            limit: bank.patterns.len(),
        });
    }
    let s = bank.image_size;
    let base = &bank.patterns[identity_id];
    let mut noise_rng = rng::stream(sample_seed, &[rng::label("noise")]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut px: Vec<f64> = base
        .iter()
        .map(|b| config.semantic_strength * b + config.noise_sigma * normal.sample(&mut noise_rng))
        .collect();
    if is_fake && config.artifact_strength > 0.0 {
        let (field, _) = artifact_field(domain, s, sample_seed);
        for (p, f) in px.iter_mut().zip(&field) {
            *p += config.artifact_strength * f;
        }
    }
    for p in px.iter_mut() {
        *p = f64::from(p.clamp(0.0, 1.0) as f32);
    }
    Ok(px)
}

pub fn sample_seed(config_seed: u64, identity: usize, label: u8, index: usize) -> u64 {
    rng::derive_seed(
        config_seed,
        &[rng::label("sample"), identity as u64, u64::from(label), index as u64],
    )
}

/// A generated or loaded split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.group_id).collect()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity_id).collect()
    }

    pub fn images(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.pixels.as_slice()).collect()
    }

    /// Manifest CSV: `index,identity,label,group,domain`.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("index,identity,label,group,domain\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i, s.identity_id, s.label, s.group_id, s.domain
            ));
        }
        out
    }
}

/// Identity-major ordering: for each identity its real samples then its fakes, in
/// consecutive groups of [`GROUP_SIZE`] (a trailing short group is allowed).
pub fn generate_split(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let bank = make_identity_bank(config.n_identities, config.image_size, config.bank_seed)?;
    let half = config.samples_per_identity / 2;
    let groups_per_half = half.div_ceil(GROUP_SIZE);
    let mut samples = Vec::with_capacity(config.n_identities * config.samples_per_identity);
    for id in 0..config.n_identities {
        for label in [0u8, 1u8] {
            for j in 0..half {
                let seed = sample_seed(config.seed, id, label, j);
                let pixels = render_sample(&bank, id, label == 1, config.domain, config, seed)?;
                let group_id = (id * 2 + label as usize) * groups_per_half + j / GROUP_SIZE;
                samples.push(SynthSample {
                    pixels,
                    label,
                    identity_id: id,
                    group_id,
                    domain: config.domain,
                });
            }
        }
    }
    Ok(Dataset {
        image_size: config.image_size,
        samples,
    })
}

/// Binary dataset: magic, `count: u32`, `image_size: u32`, then per sample
/// `identity: u32, label: u8, group: u32, domain: u8, pixels: [f32]`, all little-endian.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| GsdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| GsdError::io(path, e));
    put(DATA_MAGIC)?;
    put(&(data.samples.len() as u32).to_le_bytes())?;
    put(&(data.image_size as u32).to_le_bytes())?;
    for s in &data.samples {
        put(&(s.identity_id as u32).to_le_bytes())?;
        put(&[s.label])?;
        put(&(s.group_id as u32).to_le_bytes())?;
        put(&[s.domain.code()])?;
        for &p in &s.pixels {
            put(&(p as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| GsdError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| GsdError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| GsdError::io(path, e))?;
        Ok(buf)
    };
    if take(8)?.as_slice() != DATA_MAGIC {
        return Err(GsdError::format(path, "bad dataset magic"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_of(take(4)?);
    let image_size = u32_of(take(4)?);
    let npx = image_size * image_size;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let identity_id = u32_of(take(4)?);
        let label = take(1)?[0];
        let group_id = u32_of(take(4)?);
        let domain = Domain::from_code(take(1)?[0])
            .ok_or_else(|| GsdError::format(path, "bad domain code"))?;
        if label > 1 {
            return Err(GsdError::format(path, format!("bad label {label}")));
        }
        let raw = take(4 * npx)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        samples.push(SynthSample {
            pixels,
            label,
            identity_id,
            group_id,
            domain,
        });
    }
    Ok(Dataset {
        image_size,
        samples,
    })
}

pub fn write_manifest(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, data.manifest_csv()).map_err(|e| GsdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            seed: 3,
            bank_seed: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn bank_is_deterministic_and_normalised() {
        let a = make_identity_bank(5, 32, 9).unwrap();
        let b = make_identity_bank(5, 32, 9).unwrap();
        assert_eq!(a, b);
        for p in &a.patterns {
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(make_identity_bank(1, 32, 9).is_err());
    }

    #[test]
    fn bank_patterns_are_distinct() {
        for seed in 0..100 {
            let b = make_identity_bank(2, 32, seed).unwrap();
            let mad: f64 = b.patterns[0]
                .iter()
                .zip(&b.patterns[1])
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / 1024.0;
            assert!(mad > 0.05, "seed {seed}: {mad}");
        }
    }

    #[test]
    fn zero_artifact_makes_fake_equal_real() {
        let c = SynthConfig {
            artifact_strength: 0.0,
            ..cfg()
        };
        let bank = make_identity_bank(3, 32, 1).unwrap();
        let real = render_sample(&bank, 1, false, Domain::A, &c, 77).unwrap();
        let fake = render_sample(&bank, 1, true, Domain::A, &c, 77).unwrap();
        assert_eq!(real, fake);
    }

    #[test]
    fn noiseless_sample_is_scaled_base() {
        let c = SynthConfig {
            artifact_strength: 0.0,
            noise_sigma: 0.0,
            semantic_strength: 1.3,
            ..cfg()
        };
        let bank = make_identity_bank(3, 32, 1).unwrap();
        let s = render_sample(&bank, 2, true, Domain::B, &c, 5).unwrap();
        for (p, b) in s.iter().zip(&bank.patterns[2]) {
            assert_eq!(*p, f64::from((1.3 * b).clamp(0.0, 1.0) as f32));
        }
    }

    #[test]
    fn domains_differ_only_inside_artifact_support() {
        let c = cfg();
        let bank = make_identity_bank(3, 32, 1).unwrap();
        for seed in 0..20 {
            let a = render_sample(&bank, 0, true, Domain::A, &c, seed).unwrap();
            let b = render_sample(&bank, 0, true, Domain::B, &c, seed).unwrap();
            let (_, ma) = artifact_field(Domain::A, 32, seed);
            let (_, mb) = artifact_field(Domain::B, 32, seed);
            for i in 0..a.len() {
                if a[i] != b[i] {
                    assert!(ma[i] || mb[i], "pixel {i} differs outside support");
                }
            }
            assert!(a != b);
        }
    }

    #[test]
    fn bad_identity_is_range_error() {
        let bank = make_identity_bank(2, 32, 1).unwrap();
        assert!(matches!(
            render_sample(&bank, 2, false, Domain::A, &cfg(), 0),
            Err(GsdError::Range { index: 2, limit: 2 })
        ));
    }

    #[test]
    fn default_split_arithmetic() {
        let d = generate_split(&cfg()).unwrap();
        assert_eq!(d.len(), 800);
        assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 400);
        let mut groups = d.groups();
        groups.sort_unstable();
        groups.dedup();
        assert_eq!(groups.len(), 80);
        for s in &d.samples {
            assert!(s.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(SynthConfig {
            samples_per_identity: 3,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            n_identities: 1,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            noise_sigma: -1.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
