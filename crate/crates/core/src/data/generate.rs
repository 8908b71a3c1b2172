use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{patient_split, DomainData, DomainPair, SampleRecord, PIXELS};
use crate::error::{Error, Result};
use crate::nn::{DomainTag, IMAGE_SIDE};

pub const NUM_SUBSCANNERS: usize = 5;
pub const DEFAULT_N_PATIENTS_O: usize = 3000;
pub const DEFAULT_N_PATIENTS_T: usize = 800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitDepth {
    Twelve,
    Fourteen,
}

impl BitDepth {
    pub fn bits(self) -> u32 {
        match self {
            BitDepth::Twelve => 12,
            BitDepth::Fourteen => 14,
        }
    }

    /// Largest raw value of the format: 4095 or 16383.
    pub fn max_value(self) -> u32 {
        (1 << self.bits()) - 1
    }
}

impl TryFrom<u32> for BitDepth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            12 => Ok(BitDepth::Twelve),
            14 => Ok(BitDepth::Fourteen),
            _ => Err(Error::Input(format!("unsupported bit depth {bits} (12 or 14)"))),
        }
    }
}

impl From<BitDepth> for u32 {
    fn from(b: BitDepth) -> u32 {
        b.bits()
    }
}

/// Divides raw integer intensities by the maximum value of the format.
pub fn bit_depth_normalize(raw: &[u32], bits: u32) -> Result<Vec<f32>> {
    let depth = BitDepth::try_from(bits)?;
    let max = depth.max_value();
    raw.iter()
        .map(|&v| {
            if v > max {
                Err(Error::Input(format!("raw value {v} exceeds {max} for {bits}-bit data")))
            } else {
                Ok((v as f64 / max as f64) as f32)
            }
        })
        .collect()
}

/// Scanner model for one acquisition system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: DomainTag,
    /// Multiplicative intensity factor, > 0.
    pub gain: f64,
    /// Additive intensity, as a fraction of the raw range.
    pub offset: f64,
    /// Standard deviation of additive Gaussian noise, as a fraction of the raw range.
    pub noise_sigma: f64,
    /// Number of noise lattice cells across the image; higher is finer texture.
    pub texture_freq: f64,
    pub bit_depth: BitDepth,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !(self.noise_sigma >= 0.0) || !(self.texture_freq > 0.0) {
            return Err(Error::Input(format!("invalid domain spec {self:?}")));
        }
        Ok(())
    }
}

/// Tissue appearance shared by every scanner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStyle {
    /// Fatty tissue intensity before the scanner model.
    pub dark: f64,
    /// Dense tissue intensity before the scanner model.
    pub bright: f64,
    /// Per-image standard deviation of the rendered bright fraction around
    /// the patient's latent density.
    pub density_jitter: f64,
    pub base_noise: f64,
    pub base_texture: f64,
    /// Largest relative gain deviation among the O sub-scanners.
    pub gain_spread: f64,
}

impl Default for ImageStyle {
    fn default() -> Self {
        Self {
            dark: 0.25,
            bright: 0.55,
            density_jitter: 0.05,
            base_noise: 0.04,
            base_texture: 6.0,
            gain_spread: 0.3,
        }
    }
}

impl ImageStyle {
    /// The five sub-scanners of domain O: gains evenly spread over
    /// `1 ± gain_spread`, slightly different noise levels, 12-bit.
    pub fn original_specs(&self) -> Vec<DomainSpec> {
        (0..NUM_SUBSCANNERS)
            .map(|k| {
                let c = k as f64 - 2.0;
                DomainSpec {
                    name: DomainTag::O,
                    gain: 1.0 + self.gain_spread * c / 2.0,
                    offset: 0.0,
                    noise_sigma: self.base_noise * (1.0 + 0.1 * c),
                    texture_freq: self.base_texture,
                    bit_depth: BitDepth::Twelve,
                }
            })
            .collect()
    }

    /// The target scanner displaced by shift magnitude `s`, 14-bit.
    pub fn target_spec(&self, s: f64) -> DomainSpec {
        DomainSpec {
            name: DomainTag::T,
            gain: 1.0 + 0.5 * s,
            offset: 0.1 * s,
            noise_sigma: self.base_noise * (1.0 + s),
            texture_freq: self.base_texture * (1.0 + s),
            bit_depth: BitDepth::Fourteen,
        }
    }
}

pub(crate) fn label_for_density(d: f64) -> u8 {
    ((d * 4.0).floor() as i64).clamp(0, 3) as u8
}

/// Band-limited noise: a Gaussian lattice of `cells+1` points per side,
/// bilinearly interpolated at pixel centres.
fn noise_field<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> Vec<f64> {
    let m = cells + 1;
    let lattice: Vec<f64> = (0..m * m).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; PIXELS];
    let step = cells as f64 / IMAGE_SIDE as f64;
    for i in 0..IMAGE_SIDE {
        let y = (i as f64 + 0.5) * step;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for j in 0..IMAGE_SIDE {
            let x = (j as f64 + 0.5) * step;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let at = |r: usize, c: usize| lattice[r * m + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[i * IMAGE_SIDE + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Renders one image whose dense fraction is `density`, through scanner
/// `spec`, returning normalized intensities.
pub fn render_image<R: Rng + ?Sized>(
    spec: &DomainSpec,
    style: &ImageStyle,
    density: f64,
    rng: &mut R,
) -> Vec<f32> {
    let cells = (spec.texture_freq.round() as usize).clamp(2, IMAGE_SIDE);
    let field = noise_field(cells, rng);
    let k = (density.clamp(0.0, 1.0) * PIXELS as f64).round() as usize;
    let mut order: Vec<usize> = (0..PIXELS).collect();
    // brightest-field pixels become dense tissue; index breaks ties
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut dense = vec![false; PIXELS];
    for &p in &order[..k] {
        dense[p] = true;
    }
    let max = spec.bit_depth.max_value();
    let raw: Vec<u32> = dense
        .iter()
        .map(|&is_dense| {
            let v = if is_dense { style.bright } else { style.dark };
            let n: f64 = StandardNormal.sample(rng);
            let x = spec.gain * v + spec.offset + spec.noise_sigma * n;
            (x.clamp(0.0, 1.0) * max as f64).round() as u32
        })
        .collect();
    bit_depth_normalize(&raw, spec.bit_depth.bits()).expect("raw values clamped to range")
}

/// One patient: latent density, 1–4 images sharing its label.
pub fn generate_patient<R: Rng + ?Sized>(
    spec: &DomainSpec,
    style: &ImageStyle,
    patient_id: u32,
    subscanner: Option<u8>,
    rng: &mut R,
) -> Vec<SampleRecord> {
    let d: f64 = rng.random();
    patient_records(spec, style, patient_id, subscanner, d, rng)
}

fn patient_records<R: Rng + ?Sized>(
    spec: &DomainSpec,
    style: &ImageStyle,
    patient_id: u32,
    subscanner: Option<u8>,
    d: f64,
    rng: &mut R,
) -> Vec<SampleRecord> {
    let label = label_for_density(d);
    let n_images = rng.random_range(1..=4);
    (0..n_images)
        .map(|_| {
            let jitter: f64 = StandardNormal.sample(rng);
            let img_d = (d + style.density_jitter * jitter).clamp(0.0, 1.0);
            SampleRecord {
                patient_id,
                image: render_image(spec, style, img_d, rng),
                label,
                domain: spec.name,
                subscanner,
            }
        })
        .collect()
}

fn stream_seed(seed: u64, domain: DomainTag, patient: u32) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let tag = match domain {
        DomainTag::O => 0x4f,
        DomainTag::T => 0x54,
    };
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tag))
        .wrapping_add((patient as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_domain(
    domain: DomainTag,
    specs: Vec<DomainSpec>,
    style: &ImageStyle,
    first_id: u32,
    n_patients: usize,
    seed: u64,
) -> Result<DomainData> {
    for s in &specs {
        s.validate()?;
    }
    let mut records = Vec::new();
    for i in 0..n_patients {
        let pid = first_id + i as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, domain, pid));
        let sub = if specs.len() > 1 {
            Some(rng.random_range(0..specs.len()) as u8)
        } else {
            None
        };
        let spec = &specs[sub.unwrap_or(0) as usize];
        records.extend(generate_patient(spec, style, pid, sub, &mut rng));
    }
    let split = patient_split(&records, stream_seed(seed, domain, u32::MAX))?;
    Ok(DomainData {
        domain,
        specs,
        n_patients,
        records,
        split,
    })
}

/// Generates O (five sub-scanners, independent of `shift`) and T (one
/// scanner displaced by `shift`). T's patient ids follow O's.
pub fn make_domain_pair(
    shift: f64,
    n_patients_o: usize,
    n_patients_t: usize,
    seed: u64,
    style: &ImageStyle,
) -> Result<DomainPair> {
    if !(0.0..=1.0).contains(&shift) {
        return Err(Error::Input(format!("shift magnitude {shift} outside [0,1]")));
    }
    let o = generate_domain(DomainTag::O, style.original_specs(), style, 0, n_patients_o, seed)?;
    let t = generate_domain(
        DomainTag::T,
        vec![style.target_spec(shift)],
        style,
        n_patients_o as u32,
        n_patients_t,
        seed,
    )?;
    Ok(DomainPair { shift, seed, o, t })
}
