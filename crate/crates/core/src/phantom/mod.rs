//! Synthetic OCT-like volumes with known anatomy.
//!
//! Volumes are `(D, H, W)` with D the axial (depth) direction, index 0
//! anterior. Each eye gets a bright band standing in for the nerve fibre
//! layer, a cup where the band and underlying tissue are missing, a
//! reflective line at the bottom of the retina outside the disc, and a
//! porous sheet under the cup standing in for the lamina cribrosa (LC).
//! Glaucoma eyes have a thinner band, a wider and deeper cup, and an LC that
//! sits deeper with a finer pore pattern. The LC difference is scaled by
//! `lc_contrast`; at 0 the LC carries no class information.
//!
//! Every structure whose distribution depends on the class except the LC
//! lies above depth [`PhantomParams::lc_box_top`], so the recorded LC box is
//! a clean probe of LC-only information.

mod io;
mod split;

pub use io::{
    load_scans, read_manifest, read_volume, volume_from_bytes, volume_to_bytes, write_dataset,
    write_manifest, write_volume, VOLUME_MAGIC, VOLUME_VERSION,
};
pub use split::{check_patient_disjoint, split_by_patient};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::CropBox;
use crate::error::{Error, Result};
use crate::network::stage_shapes;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    TrueNormal,
    TrueGlaucoma,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::TrueNormal => 0,
            Label::TrueGlaucoma => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "OD")]
    Right,
    #[serde(rename = "OS")]
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ground-truth anatomy of an optic-nerve-head phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anatomy {
    pub band_top: f64,
    pub band_thickness: f64,
    /// (y, x) in voxels.
    pub cup_center: [f64; 2],
    pub cup_radius: f64,
    pub cup_depth: f64,
    pub lc_depth: f64,
    pub lc_contrast: f64,
    pub lc_box: CropBox,
}

/// What a synthetic scan is known to contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Onh(Anatomy),
    /// A textured block planted in one octant (bit 2: posterior half of D,
    /// bit 1: lower half of H, bit 0: right half of W).
    Planted { octant: u8, block: CropBox },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRecord {
    pub patient_id: String,
    pub eye: Eye,
    pub scan_id: String,
    pub label: Label,
    /// Volume file, relative to the manifest's directory unless absolute.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<CropBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl ScanRecord {
    pub fn anatomy(&self) -> Option<&Anatomy> {
        match &self.ground_truth {
            Some(GroundTruth::Onh(a)) => Some(a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ScanRecord>,
}

impl DatasetManifest {
    /// Error on empty or duplicate ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if r.scan_id.is_empty() || r.patient_id.is_empty() {
                return Err(Error::data("empty scan or patient id"));
            }
            if !seen.insert(r.scan_id.as_str()) {
                return Err(Error::data(format!("duplicate scan id {}", r.scan_id)));
            }
        }
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> Vec<&ScanRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }
}

/// A record with its volume in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub record: ScanRecord,
    /// `(D, H, W)`.
    pub volume: Tensor<f32>,
}

impl Scan {
    pub fn label(&self) -> u8 {
        self.record.label.as_u8()
    }
}

/// Mean and standard deviation of a normally distributed quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Gaussian { mean, sd }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        Normal::new(self.mean, self.sd).map(|n| n.sample(rng)).unwrap_or(self.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass {
    pub normal: Gaussian,
    pub glaucoma: Gaussian,
}

impl PerClass {
    fn get(&self, label: Label) -> &Gaussian {
        match label {
            Label::TrueNormal => &self.normal,
            Label::TrueGlaucoma => &self.glaucoma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// (D, H, W).
    pub extents: [usize; 3],
    pub band_top: Gaussian,
    pub band_thickness: PerClass,
    pub cup_radius: PerClass,
    pub cup_depth: PerClass,
    /// Cup centre offset from the lateral centre, uniform in +-this, per axis.
    pub cup_jitter: f64,
    /// Depth of the reflective line at the bottom of the retina.
    pub retina_floor: usize,
    /// First depth of the recorded LC box.
    pub lc_box_top: usize,
    /// Radius of the disc, inside which the LC lies and the floor line is absent.
    pub disc_radius: f64,
    /// Normal LC centre depth.
    pub lc_depth: f64,
    pub lc_depth_sd: f64,
    /// Extra LC depth for glaucoma at full contrast.
    pub lc_displacement: f64,
    /// Pore period in voxels: normal, glaucoma.
    pub lc_period: [f64; 2],
    pub lc_amplitude: f64,
    /// Scales every class difference of the LC; 0 makes it uninformative.
    pub lc_contrast: f64,
    /// Standard deviation of additive speckle.
    pub noise: f64,
    /// Inclusive ranges.
    pub eyes_per_patient: [usize; 2],
    pub scans_per_eye: [usize; 2],
    pub p_glaucoma: f64,
    /// Prepended to patient and scan ids.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            extents: [16, 32, 32],
            band_top: Gaussian::new(1.0, 0.2),
            band_thickness: PerClass { normal: Gaussian::new(4.0, 0.5), glaucoma: Gaussian::new(3.3, 0.5) },
            cup_radius: PerClass { normal: Gaussian::new(4.0, 0.8), glaucoma: Gaussian::new(5.0, 0.8) },
            cup_depth: PerClass { normal: Gaussian::new(3.0, 0.6), glaucoma: Gaussian::new(3.7, 0.6) },
            cup_jitter: 3.0,
            retina_floor: 7,
            lc_box_top: 8,
            disc_radius: 6.0,
            lc_depth: 10.5,
            lc_depth_sd: 0.5,
            lc_displacement: 1.0,
            lc_period: [4.0, 3.0],
            lc_amplitude: 0.5,
            lc_contrast: 1.0,
            noise: 0.08,
            eyes_per_patient: [1, 1],
            scans_per_eye: [1, 1],
            p_glaucoma: 0.5,
            id_prefix: String::new(),
            seed: 0,
        }
    }
}

const VITREOUS: f64 = 0.05;
const BAND: f64 = 0.85;
const TISSUE: f64 = 0.35;
const FLOOR_LINE: f64 = 0.9;
const DISC: f64 = 0.15;
const CHOROID: f64 = 0.3;

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.extents;
        stage_shapes(1, self.extents)?;
        if self.retina_floor + 1 > self.lc_box_top || self.lc_box_top >= d {
            return Err(Error::config(format!(
                "retina floor {} and LC box top {} do not fit depth {d}",
                self.retina_floor, self.lc_box_top
            )));
        }
        let half = self.disc_radius.ceil() as usize;
        if 2 * half + 2 * self.cup_jitter.ceil() as usize > h.min(w) {
            return Err(Error::config("disc and cup jitter do not fit laterally"));
        }
        for (name, r) in [("eyes_per_patient", self.eyes_per_patient), ("scans_per_eye", self.scans_per_eye)] {
            if r[0] == 0 || r[0] > r[1] || r[1] > 2 && name == "eyes_per_patient" {
                return Err(Error::config(format!("{name} range {r:?} is invalid")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_glaucoma) {
            return Err(Error::config("p_glaucoma must be within [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lc_contrast) || self.noise < 0.0 {
            return Err(Error::config("lc_contrast must be within [0, 1] and noise non-negative"));
        }
        Ok(())
    }

    /// Draw an eye's anatomy.
    fn draw_anatomy(&self, label: Label, rng: &mut ChaCha8Rng) -> Anatomy {
        let [_, h, w] = self.extents;
        let floor = self.retina_floor as f64;
        let band_top = self.band_top.sample(rng).clamp(0.0, 2.0);
        let band_thickness = self.band_thickness.get(label).sample(rng).clamp(1.0, floor - band_top - 0.5);
        let cup_radius = self.cup_radius.get(label).sample(rng).clamp(1.5, self.disc_radius);
        let cup_depth = self.cup_depth.get(label).sample(rng).clamp(1.0, floor - band_top);
        let j = self.cup_jitter;
        let jitter = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let cup_center = [(h as f64 - 1.0) / 2.0 + jitter(rng), (w as f64 - 1.0) / 2.0 + jitter(rng)];
        let shift = if label == Label::TrueGlaucoma { self.lc_contrast * self.lc_displacement } else { 0.0 };
        let lc_depth = self.lc_depth + shift + self.lc_depth_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let half = self.disc_radius.ceil() as i64;
        let lateral = |c: f64, e: usize| {
            let lo = (c.round() as i64 - half).max(0) as usize;
            [lo, (c.round() as i64 + half).min(e as i64) as usize]
        };
        Anatomy {
            band_top,
            band_thickness,
            cup_center,
            cup_radius,
            cup_depth,
            lc_depth,
            lc_contrast: self.lc_contrast,
            lc_box: CropBox {
                z: [self.lc_box_top, self.extents[0]],
                y: lateral(cup_center[0], h),
                x: lateral(cup_center[1], w),
            },
        }
    }
}

/// Length of `[a, b)` inside the voxel `[z, z + 1)`.
fn coverage(a: f64, b: f64, z: usize) -> f64 {
    let (lo, hi) = (z as f64, z as f64 + 1.0);
    (b.min(hi) - a.max(lo)).clamp(0.0, 1.0)
}

/// Noise-free intensity of an ONH phantom.
fn render_onh(p: &PhantomParams, a: &Anatomy, label: Label, phase: [f64; 2]) -> Vec<f64> {
    let [d, h, w] = p.extents;
    let floor = p.retina_floor;
    let band_end = a.band_top + a.band_thickness;
    let cup_end = a.band_top + a.cup_depth;
    let c = if label == Label::TrueGlaucoma { a.lc_contrast } else { 0.0 };
    let pore = |period: f64, y: usize, x: usize| {
        let k = 2.0 * PI / period;
        0.5 + 0.5 * (k * y as f64 + phase[0]).cos() * (k * x as f64 + phase[1]).cos()
    };
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let r = ((y as f64 - a.cup_center[0]).powi(2) + (x as f64 - a.cup_center[1]).powi(2)).sqrt();
                // Soft edges, 1 inside, 0 outside.
                let in_cup = (a.cup_radius - r + 0.5).clamp(0.0, 1.0);
                let in_disc = (p.disc_radius - r + 0.5).clamp(0.0, 1.0);
                let v = if z < floor {
                    let band = coverage(a.band_top, band_end, z);
                    let tissue = coverage(band_end, floor as f64, z);
                    let retina = VITREOUS * (1.0 - band - tissue) + BAND * band + TISSUE * tissue;
                    let hollow = coverage(a.band_top, cup_end, z) * in_cup;
                    retina * (1.0 - hollow) + VITREOUS * hollow
                } else if z == floor {
                    FLOOR_LINE * (1.0 - in_disc) + DISC * in_disc
                } else {
                    let dz = z as f64 + 0.5 - a.lc_depth;
                    let profile = (-dz * dz / 2.0).exp();
                    let texture = (1.0 - c) * pore(p.lc_period[0], y, x) + c * pore(p.lc_period[1], y, x);
                    let lc = DISC + p.lc_amplitude * profile * texture;
                    CHOROID * (1.0 - in_disc) + lc * in_disc
                };
                out.push(v);
            }
        }
    }
    out
}

fn add_noise(clean: &[f64], sd: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    clean
        .iter()
        .map(|&v| (v + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).max(0.0) as f32)
        .collect()
}

fn patient_id(prefix: &str, i: usize) -> String {
    format!("{prefix}p{i:04}")
}

/// Generate `n_patients` patients. Each patient has one class; each eye its
/// own anatomy; each scan of an eye its own speckle. Volumes are stored as
/// `volumes/<scan_id>.octv` in the records' paths (nothing is written here).
pub fn generate(params: &PhantomParams, n_patients: usize) -> Result<Vec<Scan>> {
    params.validate()?;
    let mut scans = Vec::new();
    for i in 0..n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[i as u64]));
        let label = if rng.random_bool(params.p_glaucoma) { Label::TrueGlaucoma } else { Label::TrueNormal };
        let eyes = rng.random_range(params.eyes_per_patient[0]..=params.eyes_per_patient[1]);
        let pid = patient_id(&params.id_prefix, i);
        for (e, eye) in [Eye::Right, Eye::Left].into_iter().take(eyes).enumerate() {
            let mut eye_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[i as u64, e as u64]));
            let anatomy = params.draw_anatomy(label, &mut eye_rng);
            let phase = [eye_rng.random_range(0.0..2.0 * PI), eye_rng.random_range(0.0..2.0 * PI)];
            let clean = render_onh(params, &anatomy, label, phase);
            let n_scans = eye_rng.random_range(params.scans_per_eye[0]..=params.scans_per_eye[1]);
            for s in 0..n_scans {
                let mut noise_rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[i as u64, e as u64, 1 + s as u64]));
                let eye_tag = if eye == Eye::Right { "OD" } else { "OS" };
                let scan_id = format!("{pid}-{eye_tag}-{s}");
                let volume = Tensor::from_vec(params.extents.to_vec(), add_noise(&clean, params.noise, &mut noise_rng))?;
                scans.push(Scan {
                    record: ScanRecord {
                        patient_id: pid.clone(),
                        eye,
                        path: format!("volumes/{scan_id}.octv"),
                        scan_id,
                        label,
                        crop_box: None,
                        ground_truth: Some(GroundTruth::Onh(anatomy.clone())),
                        split: None,
                        metadata: BTreeMap::new(),
                    },
                    volume,
                });
            }
        }
    }
    Ok(scans)
}

/// FNV-1a, for deriving a fixed seed from a scan id.
fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Replace the top `fraction` of the bright band (by depth) with
/// vitreous-level speckle. Voxels the band covers partially are blended by
/// coverage; voxels in the LC box are never touched. The speckle is seeded
/// from the scan id.
pub fn ablate_rnfl(v: &Tensor<f32>, record: &ScanRecord, fraction: f64, noise: f64) -> Result<Tensor<f32>> {
    let a = record
        .anatomy()
        .ok_or_else(|| Error::data(format!("scan {} has no recorded anatomy", record.scan_id)))?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("ablation fraction {fraction} is outside [0, 1]")));
    }
    let [d, h, w] = match *v.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape("ablate_rnfl expects a (D, H, W) volume")),
    };
    let mut out = v.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash_str(&record.scan_id) ^ fraction.to_bits());
    let end = a.band_top + fraction * a.band_thickness;
    let data = out.data_mut();
    for z in 0..d {
        let cov = coverage(a.band_top, end, z);
        if cov == 0.0 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if a.lc_box.contains(z, y, x) {
                    continue;
                }
                let bg = (VITREOUS + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).max(0.0);
                let i = (z * h + y) * w + x;
                data[i] = ((1.0 - cov) * data[i] as f64 + cov * bg) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedParams {
    pub extents: [usize; 3],
    pub background: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub p_positive: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            extents: [16, 32, 32],
            background: 0.1,
            amplitude: 0.6,
            noise: 0.08,
            p_positive: 0.5,
            id_prefix: "planted-".to_string(),
            seed: 0,
        }
    }
}

/// The block planted in `octant`: the octant shrunk by a quarter of its
/// side on every face.
pub fn octant_block(extents: [usize; 3], octant: u8) -> CropBox {
    let mut axes = [[0usize; 2]; 3];
    for (k, a) in axes.iter_mut().enumerate() {
        let half = extents[k] / 2;
        let lo = if octant >> (2 - k) & 1 == 1 { half } else { 0 };
        let inset = half / 4;
        *a = [lo + inset, lo + half - inset];
    }
    CropBox::from_axes(axes)
}

/// Octant of a voxel, with the same bit layout as [`GroundTruth::Planted`].
pub fn octant_of(extents: [usize; 3], z: usize, y: usize, x: usize) -> u8 {
    (((z >= extents[0] / 2) as u8) << 2) | (((y >= extents[1] / 2) as u8) << 1) | (x >= extents[2] / 2) as u8
}

/// Every case carries a textured block in a random octant. Positive blocks
/// are a 3D checkerboard; negative blocks are stripes across the width axis,
/// with the same mean and variance.
pub fn generate_planted(params: &PlantedParams, n: usize) -> Result<Vec<Scan>> {
    stage_shapes(1, params.extents)?;
    let [d, h, w] = params.extents;
    let mut scans = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &[i as u64]));
        let positive = rng.random_bool(params.p_positive);
        let octant = rng.random_range(0..8u8);
        let block = octant_block(params.extents, octant);
        let mut clean = vec![params.background; d * h * w];
        for z in block.z[0]..block.z[1] {
            for y in block.y[0]..block.y[1] {
                for x in block.x[0]..block.x[1] {
                    let on = if positive { (z + y + x) % 2 } else { x % 2 };
                    let add = params.amplitude * on as f64;
                    clean[(z * h + y) * w + x] += add;
                }
            }
        }
        let pid = patient_id(&params.id_prefix, i);
        let scan_id = format!("{pid}-OD-0");
        let label = if positive { Label::TrueGlaucoma } else { Label::TrueNormal };
        scans.push(Scan {
            record: ScanRecord {
                patient_id: pid,
                eye: Eye::Right,
                path: format!("volumes/{scan_id}.octv"),
                scan_id,
                label,
                crop_box: None,
                ground_truth: Some(GroundTruth::Planted { octant, block }),
                split: None,
                metadata: BTreeMap::new(),
            },
            volume: Tensor::from_vec(params.extents.to_vec(), add_noise(&clean, params.noise, &mut rng))?,
        });
    }
    Ok(scans)
}

/// Mean-pool integer-factor blocks; trailing voxels that do not fill a
/// whole block are dropped.
pub fn downsample(v: &Tensor<f32>, factors: [usize; 3]) -> Result<Tensor<f32>> {
    let [d, h, w] = match *v.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape("downsample expects a (D, H, W) volume")),
    };
    if factors.iter().any(|&f| f < 1) {
        return Err(Error::config(format!("downsample factors {factors:?} must be at least 1")));
    }
    let out_dims = [d / factors[0], h / factors[1], w / factors[2]];
    if out_dims.contains(&0) {
        return Err(Error::config(format!("factors {factors:?} exceed extents {:?}", [d, h, w])));
    }
    let src = v.data();
    let n = (factors[0] * factors[1] * factors[2]) as f64;
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for oz in 0..out_dims[0] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[2] {
                let mut acc = 0.0f64;
                for z in oz * factors[0]..(oz + 1) * factors[0] {
                    for y in oy * factors[1]..(oy + 1) * factors[1] {
                        for x in ox * factors[2]..(ox + 1) * factors[2] {
                            acc += src[(z * h + y) * w + x] as f64;
                        }
                    }
                }
                out.push((acc / n) as f32);
            }
        }
    }
    Tensor::from_vec(out_dims.to_vec(), out)
}
