//! Training-time augmentations for single-channel `(D, H, W)` volumes:
//! flips, elastic deformation and crop-to-zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resample_trilinear, Tensor};

fn volume_dims(v: &Tensor<f32>) -> Result<[usize; 3]> {
    match *v.dims() {
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::shape(format!("expected a (D, H, W) volume, got {:?}", v.shape()))),
    }
}

/// Half-open voxel intervals per axis, serialized as
/// `{"z":[z0,z1],"y":[y0,y1],"x":[x0,x1]}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropBox {
    pub z: [usize; 2],
    pub y: [usize; 2],
    pub x: [usize; 2],
}

impl CropBox {
    pub fn new(z: [usize; 2], y: [usize; 2], x: [usize; 2]) -> Result<Self> {
        let b = CropBox { z, y, x };
        if b.axes().iter().any(|a| a[0] >= a[1]) {
            return Err(Error::Box(format!("empty crop box {b:?}")));
        }
        Ok(b)
    }

    pub fn full(extents: [usize; 3]) -> Self {
        CropBox { z: [0, extents[0]], y: [0, extents[1]], x: [0, extents[2]] }
    }

    pub fn axes(&self) -> [[usize; 2]; 3] {
        [self.z, self.y, self.x]
    }

    pub fn from_axes(a: [[usize; 2]; 3]) -> Self {
        CropBox { z: a[0], y: a[1], x: a[2] }
    }

    pub fn sides(&self) -> [usize; 3] {
        self.axes().map(|a| a[1].saturating_sub(a[0]))
    }

    pub fn voxels(&self) -> usize {
        self.sides().iter().product()
    }

    /// Centre in voxel coordinates (may be fractional).
    pub fn center(&self) -> [f64; 3] {
        self.axes().map(|a| (a[0] + a[1]) as f64 / 2.0 - 0.5)
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.z[0]..self.z[1]).contains(&z)
            && (self.y[0]..self.y[1]).contains(&y)
            && (self.x[0]..self.x[1]).contains(&x)
    }

    /// Box error unless the box is non-empty and inside `extents`.
    pub fn check_within(&self, extents: [usize; 3]) -> Result<()> {
        for (a, e) in self.axes().iter().zip(extents) {
            if a[0] >= a[1] || a[1] > e {
                return Err(Error::Box(format!("crop box {self:?} does not fit inside {extents:?}")));
            }
        }
        Ok(())
    }
}

/// Mirror a `(D, H, W)` volume along one axis.
pub fn flip_axis(v: &Tensor<f32>, axis: usize) -> Result<Tensor<f32>> {
    let [d, h, w] = volume_dims(v)?;
    if axis > 2 {
        return Err(Error::Axis { axis, rank: 3 });
    }
    let src = v.data();
    let mut out = Vec::with_capacity(src.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.push(src[(sz * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(vec![d, h, w], out)
}

/// Flip along each listed axis independently with probability 0.5. Returns
/// the volume and, per listed axis, whether it was flipped.
pub fn random_flip(v: &Tensor<f32>, axes: &[usize], seed: u64) -> Result<(Tensor<f32>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.clone();
    let mut flipped = Vec::with_capacity(axes.len());
    for &axis in axes {
        let f = rng.random_bool(0.5);
        if f {
            out = flip_axis(&out, axis)?;
        }
        flipped.push(f);
    }
    Ok((out, flipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticParams {
    /// Control-point spacing in voxels.
    pub spacing: f64,
    /// Maximum displacement per axis in voxels.
    pub alpha: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams { spacing: 4.0, alpha: 1.5 }
    }
}

impl ElasticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing >= 2.0) {
            return Err(Error::config(format!("elastic spacing {} must be at least 2", self.spacing)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("elastic alpha {} must be non-negative", self.alpha)));
        }
        if self.alpha >= self.spacing {
            return Err(Error::config(format!(
                "elastic alpha {} must be below the spacing {} to avoid folding",
                self.alpha, self.spacing
            )));
        }
        Ok(())
    }
}

/// Trilinear sample at a real coordinate; voxels outside the grid read as 0.
fn sample_zero_fill(src: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let [d, h, w] = dims;
    let base = p.map(f64::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut weight = 1.0;
        for k in 0..3 {
            weight *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        if weight == 0.0 {
            continue;
        }
        let idx = [base[0] as i64 + off[0] as i64, base[1] as i64 + off[1] as i64, base[2] as i64 + off[2] as i64];
        if idx[0] < 0 || idx[1] < 0 || idx[2] < 0 {
            continue;
        }
        let (z, y, x) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
        if z >= d || y >= h || x >= w {
            continue;
        }
        acc += weight * src[(z * h + y) * w + x] as f64;
    }
    acc as f32
}

/// Dense elastic deformation: a coarse displacement field, i.i.d. uniform in
/// `[-alpha, alpha]` per axis at control points at most `spacing` apart, is
/// trilinearly upsampled; each output voxel samples the input at its
/// displaced position, reading zero outside the volume.
pub fn elastic_deform(v: &Tensor<f32>, params: &ElasticParams, seed: u64) -> Result<Tensor<f32>> {
    params.validate()?;
    let dims = volume_dims(v)?;
    if params.alpha == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = dims.map(|e| ((e.saturating_sub(1)) as f64 / params.spacing).ceil() as usize + 1);
    let n: usize = coarse.iter().product();
    let mut fields = Vec::with_capacity(3);
    for _ in 0..3 {
        let values = (0..n).map(|_| rng.random_range(-params.alpha..=params.alpha)).collect();
        let c = Tensor::<f64>::from_vec(coarse.to_vec(), values)?;
        fields.push(resample_trilinear(&c, dims)?);
    }
    let src = v.data();
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(src.len());
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    z as f64 + fields[0].data()[i],
                    y as f64 + fields[1].data()[i],
                    x as f64 + fields[2].data()[i],
                ];
                out.push(sample_zero_fill(src, dims, p));
                i += 1;
            }
        }
    }
    Tensor::from_vec(dims.to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicBoxParams {
    /// Box side as a fraction of H and W.
    pub fraction: f64,
    /// Central fraction of H and W searched for the dark centroid.
    pub search_fraction: f64,
    /// Fraction of the searched pixels, darkest first, that form the centroid.
    pub dark_fraction: f64,
}

impl Default for HeuristicBoxParams {
    fn default() -> Self {
        HeuristicBoxParams { fraction: 1.0 / 3.0, search_fraction: 0.6, dark_fraction: 0.1 }
    }
}

/// Place an interval of length `len` centred on `c` inside `[0, extent)`.
fn centered_interval(c: f64, len: usize, extent: usize) -> [usize; 2] {
    let len = len.clamp(1, extent);
    let lo = (c - (len as f64 - 1.0) / 2.0).round().max(0.0) as usize;
    let lo = lo.min(extent - len);
    [lo, lo + len]
}

/// Box likely to contain the structure under the optic cup: the darkest
/// en-face region near the centre, over the posterior half of the depth.
///
/// The en-face map is the mean over depth. Within the central
/// `search_fraction` of H and W, the centroid of the darkest
/// `dark_fraction` of pixels is the box centre. A volume whose searched
/// region is flat gets a centred box.
pub fn heuristic_onh_box(v: &Tensor<f32>, params: &HeuristicBoxParams) -> Result<CropBox> {
    let [d, h, w] = volume_dims(v)?;
    let src = v.data();
    let mut en_face = vec![0.0f64; h * w];
    for z in 0..d {
        for (i, e) in en_face.iter_mut().enumerate() {
            *e += src[z * h * w + i] as f64;
        }
    }
    let margin = |e: usize| ((e as f64) * (1.0 - params.search_fraction) / 2.0).floor() as usize;
    let (my, mx) = (margin(h), margin(w));
    let mut pixels: Vec<(f64, usize, usize)> = Vec::new();
    for y in my..h - my {
        for x in mx..w - mx {
            pixels.push((en_face[y * w + x] / d as f64, y, x));
        }
    }
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let flat = pixels.last().unwrap().0 - pixels[0].0 < 1e-6;
    let center = if flat {
        [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0]
    } else {
        let k = ((pixels.len() as f64 * params.dark_fraction).round() as usize).max(1);
        let (sy, sx) = pixels[..k].iter().fold((0.0, 0.0), |a, p| (a.0 + p.1 as f64, a.1 + p.2 as f64));
        [sy / k as f64, sx / k as f64]
    };
    let side = |e: usize| ((e as f64) * params.fraction).round() as usize;
    Ok(CropBox {
        z: [d / 2, d],
        y: centered_interval(center[0], side(h), h),
        x: centered_interval(center[1], side(w), w),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropAugParams {
    /// Probability of using the jittered prior box.
    pub p_prior: f64,
    /// Maximum shift in voxels applied to the heuristic box on every axis.
    pub jitter: usize,
    /// Smallest side, as a fraction of the extent, of a uniform random box.
    pub f_min: f64,
    pub heuristic: HeuristicBoxParams,
    /// Fixed prior box; when unset the heuristic box of each volume is used.
    pub prior: Option<CropBox>,
}

impl Default for CropAugParams {
    fn default() -> Self {
        CropAugParams { p_prior: 0.8, jitter: 2, f_min: 0.4, heuristic: HeuristicBoxParams::default(), prior: None }
    }
}

impl CropAugParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_prior) {
            return Err(Error::config(format!("p_prior {} is outside [0, 1]", self.p_prior)));
        }
        if !(self.f_min > 0.0 && self.f_min <= 1.0) {
            return Err(Error::config(format!("f_min {} is outside (0, 1]", self.f_min)));
        }
        Ok(())
    }
}

/// Shift an interval by `delta`, keeping its length and staying in bounds.
fn shift_interval(a: [usize; 2], delta: i64, extent: usize) -> [usize; 2] {
    let len = a[1] - a[0];
    let lo = (a[0] as i64 + delta).clamp(0, (extent - len) as i64) as usize;
    [lo, lo + len]
}

/// Which branch produced a crop-to-zero box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropSource {
    Prior,
    Uniform,
}

/// Zero everything outside a sampled box: with probability `p_prior` the
/// jittered heuristic box, otherwise a uniform random box whose sides are
/// uniform fractions in `[f_min, 1]` of each extent.
pub fn crop_to_zero(v: &Tensor<f32>, params: &CropAugParams, seed: u64) -> Result<(Tensor<f32>, CropBox, CropSource)> {
    params.validate()?;
    let (bx, source) = sample_crop_box(v, params, seed)?;
    Ok((apply_crop(v, &bx)?, bx, source))
}

/// The box `crop_to_zero` would use, without applying it.
pub fn sample_crop_box(v: &Tensor<f32>, params: &CropAugParams, seed: u64) -> Result<(CropBox, CropSource)> {
    let dims = volume_dims(v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(params.p_prior) {
        let base = match params.prior {
            Some(b) => {
                b.check_within(dims)?;
                b
            }
            None => heuristic_onh_box(v, &params.heuristic)?,
        };
        let j = params.jitter as i64;
        let mut axes = base.axes();
        for (k, a) in axes.iter_mut().enumerate() {
            let delta = if j == 0 { 0 } else { rng.random_range(-j..=j) };
            *a = shift_interval(*a, delta, dims[k]);
        }
        Ok((CropBox::from_axes(axes), CropSource::Prior))
    } else {
        let mut axes = [[0, 0]; 3];
        for (k, a) in axes.iter_mut().enumerate() {
            let f = rng.random_range(params.f_min..=1.0);
            let side = ((f * dims[k] as f64).round() as usize).clamp(1, dims[k]);
            let lo = rng.random_range(0..=dims[k] - side);
            *a = [lo, lo + side];
        }
        Ok((CropBox::from_axes(axes), CropSource::Uniform))
    }
}

/// Zero every voxel outside `bx`; voxels inside are copied unchanged.
pub fn apply_crop(v: &Tensor<f32>, bx: &CropBox) -> Result<Tensor<f32>> {
    let [d, h, w] = volume_dims(v)?;
    bx.check_within([d, h, w])?;
    let src = v.data();
    let mut out = vec![0.0f32; src.len()];
    for z in bx.z[0]..bx.z[1] {
        for y in bx.y[0]..bx.y[1] {
            let row = (z * h + y) * w;
            out[row + bx.x[0]..row + bx.x[1]].copy_from_slice(&src[row + bx.x[0]..row + bx.x[1]]);
        }
    }
    Tensor::from_vec(vec![d, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(dims: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution_and_mirrors_markers() {
        let v = noise([4, 6, 5], 0);
        for axis in 0..3 {
            assert_eq!(flip_axis(&flip_axis(&v, axis).unwrap(), axis).unwrap(), v);
        }
        let mut m = Tensor::<f32>::zeros(vec![4, 6, 5]).unwrap();
        m.set(&[1, 2, 3], 1.0).unwrap();
        let f = flip_axis(&m, 1).unwrap();
        assert_eq!(f.get(&[1, 3, 3]).unwrap(), 1.0);
        let sym = Tensor::<f32>::full(vec![2, 4, 4], 0.5).unwrap();
        assert_eq!(random_flip(&sym, &[1], 3).unwrap().0, sym);
        assert!(matches!(flip_axis(&v, 3), Err(Error::Axis { .. })));
    }

    #[test]
    fn random_flip_is_deterministic_and_fair() {
        let v = noise([2, 4, 4], 1);
        assert_eq!(random_flip(&v, &[1], 9).unwrap(), random_flip(&v, &[1], 9).unwrap());
        let flips = (0..2000).filter(|&s| random_flip(&v, &[1], s).unwrap().1[0]).count();
        assert!((900..1100).contains(&flips), "{flips}");
    }

    #[test]
    fn elastic_zero_alpha_is_identity() {
        let v = noise([6, 8, 8], 2);
        let p = ElasticParams { spacing: 3.0, alpha: 0.0 };
        assert_eq!(elastic_deform(&v, &p, 4).unwrap(), v);
        // Also exact through the sampling path: a zero field never mixes voxels.
        let dims = [6, 8, 8];
        for (i, &x) in v.data().iter().enumerate().step_by(7) {
            let idx = v.unravel(i);
            let p = [idx[0] as f64, idx[1] as f64, idx[2] as f64];
            assert_eq!(sample_zero_fill(v.data(), dims, p), x);
        }
    }

    #[test]
    fn elastic_rejects_folding_parameters() {
        let v = noise([4, 4, 4], 0);
        for p in [
            ElasticParams { spacing: 3.0, alpha: 3.0 },
            ElasticParams { spacing: 1.0, alpha: 0.5 },
            ElasticParams { spacing: 3.0, alpha: -1.0 },
        ] {
            assert!(matches!(elastic_deform(&v, &p, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn elastic_keeps_constants_in_the_interior_and_stays_in_range() {
        let p = ElasticParams { spacing: 4.0, alpha: 1.5 };
        let c = Tensor::<f32>::full(vec![10, 12, 12], 0.7).unwrap();
        let out = elastic_deform(&c, &p, 5).unwrap();
        // Voxels at least alpha from every face never read outside.
        for z in 2..8 {
            for y in 2..10 {
                for x in 2..10 {
                    assert!((out.get(&[z, y, x]).unwrap() - 0.7).abs() < 1e-6);
                }
            }
        }
        for seed in 0..10 {
            let v = noise([10, 12, 12], seed);
            let out = elastic_deform(&v, &p, seed).unwrap();
            let (lo, hi) = (v.min_value().min(0.0), v.max_value());
            assert!(out.data().iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
            assert_eq!(out, elastic_deform(&v, &p, seed).unwrap());
        }
    }

    fn cupped(center: [usize; 2]) -> Tensor<f32> {
        let mut v = Tensor::<f32>::full(vec![8, 30, 30], 0.5).unwrap();
        for z in 0..4 {
            for y in 0..30 {
                for x in 0..30 {
                    let r2 = (y as f64 - center[0] as f64).powi(2) + (x as f64 - center[1] as f64).powi(2);
                    if r2 <= 16.0 {
                        v.set(&[z, y, x], 0.0).unwrap();
                    }
                }
            }
        }
        v
    }

    #[test]
    fn heuristic_box_finds_the_dark_cup() {
        for center in [[15, 15], [12, 17], [18, 12]] {
            let b = heuristic_onh_box(&cupped(center), &HeuristicBoxParams::default()).unwrap();
            let c = b.center();
            assert!((c[1] - center[0] as f64).abs() <= 3.0 && (c[2] - center[1] as f64).abs() <= 3.0, "{b:?}");
            assert_eq!(b.z, [4, 8]);
            assert_eq!(b.sides()[1], 10);
        }
        let flat = Tensor::<f32>::full(vec![8, 30, 30], 0.2).unwrap();
        let b = heuristic_onh_box(&flat, &HeuristicBoxParams::default()).unwrap();
        assert_eq!((b.y, b.x), ([10, 20], [10, 20]));
    }

    #[test]
    fn crop_forced_heuristic_branch_without_jitter() {
        let v = cupped([14, 16]);
        let p = CropAugParams { p_prior: 1.0, jitter: 0, ..Default::default() };
        let (_, b, src) = crop_to_zero(&v, &p, 3).unwrap();
        assert_eq!(src, CropSource::Prior);
        assert_eq!(b, heuristic_onh_box(&v, &p.heuristic).unwrap());
    }

    #[test]
    fn heuristic_branch_frequency() {
        let v = cupped([15, 15]);
        let p = CropAugParams { p_prior: 0.3, ..Default::default() };
        let hits = (0..10_000)
            .filter(|&s| sample_crop_box(&v, &p, s).unwrap().1 == CropSource::Prior)
            .count();
        assert!((hits as f64 / 10_000.0 - 0.3).abs() <= 0.02, "{hits}");
    }

    #[test]
    fn apply_crop_semantics() {
        let v = noise([4, 5, 6], 3);
        assert_eq!(apply_crop(&v, &CropBox::full([4, 5, 6])).unwrap(), v);
        let b = CropBox::new([1, 3], [0, 2], [2, 6]).unwrap();
        let out = apply_crop(&v, &b).unwrap();
        for i in 0..v.len() {
            let idx = out.unravel(i);
            if b.contains(idx[0], idx[1], idx[2]) {
                assert_eq!(out.data()[i].to_bits(), v.data()[i].to_bits());
            } else {
                assert_eq!(out.data()[i], 0.0);
            }
        }
        let bad = CropBox::new([0, 5], [0, 2], [0, 2]).unwrap();
        assert!(matches!(apply_crop(&v, &bad), Err(Error::Box(_))));
        assert!(matches!(CropBox::new([2, 2], [0, 1], [0, 1]), Err(Error::Box(_))));
    }

    #[test]
    fn crop_box_json_shape() {
        let b = CropBox::new([8, 16], [10, 22], [9, 21]).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        assert_eq!(text, r#"{"z":[8,16],"y":[10,22],"x":[9,21]}"#);
        assert_eq!(serde_json::from_str::<CropBox>(&text).unwrap(), b);
    }

    proptest! {
        #[test]
        fn crop_to_zero_keeps_values_or_zeroes(seed in 0u64..10_000, p_prior in 0.0f64..1.0) {
            let v = cupped([15, 14]);
            let p = CropAugParams { p_prior, ..Default::default() };
            let (out, b, _) = crop_to_zero(&v, &p, seed).unwrap();
            prop_assert!(b.check_within([8, 30, 30]).is_ok());
            for i in 0..v.len() {
                let idx = v.unravel(i);
                let want = if b.contains(idx[0], idx[1], idx[2]) { v.data()[i] } else { 0.0 };
                prop_assert_eq!(out.data()[i], want);
            }
        }
    }
}
