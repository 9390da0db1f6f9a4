//! Synthetic contracting-ellipsoid sequences and the LVS file format.
//!
//! ```text
//! "LVS1" | version u32 | L, W, H, D u32 | flags u32 | mask u8×L
//!        | f32 payload of present frames, in index order | crc32 u32
//! ```
//!
//! Little-endian throughout; the CRC covers every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};
use crate::sequence::LongitudinalVolume;

pub const LVS_MAGIC: &[u8; 4] = b"LVS1";
pub const LVS_VERSION: u32 = 1;
const LVS_HEADER: usize = 4 + 4 * 6;

/// Width of the sigmoid edge falloff, in voxels.
pub const EDGE_BANDWIDTH: f64 = 1.5;
pub const RHO_RANGE: (f64, f64) = (0.02, 0.12);

/// One synthetic subject: an ellipsoid whose radii shrink by a factor
/// `1 − ρ·(f−1)` at frame `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipsoidSubject {
    /// Voxel coordinates (voxel centers sit at integer positions).
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub rho: f64,
    /// Interior intensity before normalization; the background is 0.
    pub intensity: f64,
    pub seed: u64,
}

impl EllipsoidSubject {
    /// Reject geometry that leaves the volume or collapses by frame `len`.
    /// `ρ = 0` (a static subject) is accepted for rendering.
    pub fn validate(&self, len: usize, extents: [usize; 3]) -> Result<()> {
        if !(0.0..=RHO_RANGE.1).contains(&self.rho) {
            return Err(Error::invalid(
                "ellipsoid",
                format!("contraction rate {} outside [0, {}]", self.rho, RHO_RANGE.1),
            ));
        }
        let last = 1.0 - self.rho * (len as f64 - 1.0);
        if last <= 0.0 {
            return Err(Error::invalid("ellipsoid", format!("radii vanish before frame {len}")));
        }
        if !(self.intensity > 0.0 && self.intensity.is_finite()) {
            return Err(Error::invalid("ellipsoid", "intensity must be positive"));
        }
        for a in 0..3 {
            let (c, r) = (self.center[a], self.radii[a]);
            if !(r > 0.0) || c - r < 0.0 || c + r > (extents[a] - 1) as f64 {
                return Err(Error::invalid(
                    "ellipsoid",
                    format!("axis {a}: center {c} ± radius {r} leaves 0..={}", extents[a] - 1),
                ));
            }
        }
        Ok(())
    }

    /// Radii at 1-based frame `f`.
    pub fn radii_at(&self, f: usize) -> [f64; 3] {
        let k = 1.0 - self.rho * (f as f64 - 1.0);
        self.radii.map(|r| r * k)
    }
}

/// First-order signed distance to the ellipsoid boundary; exact for spheres.
fn signed_distance(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let d: Vec<f64> = (0..3).map(|a| p[a] - center[a]).collect();
    let q = (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum::<f64>().sqrt();
    let g = (0..3).map(|a| (d[a] / (radii[a] * radii[a])).powi(2)).sum::<f64>().sqrt();
    if g < 1e-12 {
        return -radii.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    (q - 1.0) * q / g
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Render one frame without normalization.
pub fn render_frame(s: &EllipsoidSubject, f: usize, extents: [usize; 3]) -> Tensor {
    let radii = s.radii_at(f);
    let mut t = Tensor::zeros(&extents);
    let [_, ny, nz] = extents;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let p = [(i / (ny * nz)) as f64, ((i / nz) % ny) as f64, (i % nz) as f64];
        *v = s.intensity * sigmoid(-signed_distance(p, s.center, radii) / EDGE_BANDWIDTH);
    }
    t
}

/// All `len` frames, Min-Max normalized jointly over the subject.
pub fn generate_subject(s: &EllipsoidSubject, len: usize, extents: [usize; 3]) -> Result<LongitudinalVolume> {
    if len < 2 {
        return Err(Error::invalid("generate_subject", "need at least 2 frames"));
    }
    s.validate(len, extents)?;
    let frames: Vec<Tensor> = (1..=len).map(|f| render_frame(s, f, extents)).collect();
    LongitudinalVolume::new(normalize_subject(frames)?)
}

/// Min-Max normalize a subject's frames with one shared `(min, max)`.
pub fn normalize_subject(frames: Vec<Tensor>) -> Result<Vec<Tensor>> {
    let lo = frames.iter().map(Tensor::min).fold(f64::INFINITY, f64::min);
    let hi = frames.iter().map(Tensor::max).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid("normalize", "subject is constant"));
    }
    Ok(frames
        .into_iter()
        .map(|f| f.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
        .collect())
}

/// Random geometry scaled to `extents`; `ρ` is drawn separately.
fn random_geometry(extents: [usize; 3], rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for a in 0..3 {
        let e = extents[a] as f64;
        // in-plane axes vs. the short through-plane axis
        let (lo, hi) = if a < 2 { (0.22, 0.375) } else { (0.31, 0.40) };
        let mid = (e - 1.0) / 2.0;
        radii[a] = (e * rng.uniform_range(lo, hi)).min(mid);
        let slack = (mid - radii[a]).clamp(0.0, 1.0);
        center[a] = mid + rng.uniform_range(-slack, slack);
    }
    (center, radii)
}

fn rho_apart(rho: f64, rng: &mut Rng) -> f64 {
    loop {
        let r = rng.uniform_range(RHO_RANGE.0, RHO_RANGE.1);
        if (r - rho).abs() >= 0.04 {
            return r;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub params: EllipsoidSubject,
    pub volume: LongitudinalVolume,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `n` subjects drawn in pairs `(2k, 2k+1)` that share their geometry (so
/// frame 1 coincides) but contract at rates at least 0.04 apart. The last
/// `⌊n/5⌋` subjects form the test split.
pub fn make_dataset(n: usize, len: usize, extents: [usize; 3], seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("make_dataset", "need at least 2 subjects"));
    }
    let max_rho = RHO_RANGE.1.min(0.99 / (len as f64 - 1.0));
    if max_rho < RHO_RANGE.1 {
        return Err(Error::invalid(
            "make_dataset",
            format!("{len} frames is too long for contraction rates up to {}", RHO_RANGE.1),
        ));
    }
    let mut rng = Rng::stream(seed, 0);
    let mut subjects = Vec::with_capacity(n);
    while subjects.len() < n {
        let (center, radii) = random_geometry(extents, &mut rng);
        let rho = rng.uniform_range(RHO_RANGE.0, RHO_RANGE.1);
        let partner = rho_apart(rho, &mut rng);
        for r in [rho, partner] {
            if subjects.len() < n {
                let id = subjects.len();
                let params = EllipsoidSubject {
                    center,
                    radii,
                    rho: r,
                    intensity: 1.0,
                    seed: seed.wrapping_add(id as u64),
                };
                let volume = generate_subject(&params, len, extents)?;
                subjects.push(Sample { id, params, volume });
            }
        }
    }
    let n_test = n / 5;
    let test = subjects.split_off(n - n_test);
    Ok(Dataset { train: subjects, test })
}

pub fn encode_lvs(v: &LongitudinalVolume) -> Vec<u8> {
    let [w, h, d] = v.extents();
    let present = v.present().iter().filter(|&&p| p).count();
    let mut buf = Vec::with_capacity(LVS_HEADER + v.len() + present * w * h * d * 4 + 4);
    buf.extend(LVS_MAGIC);
    for x in [LVS_VERSION, v.len() as u32, w as u32, h as u32, d as u32, 0] {
        buf.extend(x.to_le_bytes());
    }
    buf.extend(v.present().iter().map(|&p| u8::from(p)));
    for (f, &p) in v.frames().iter().zip(v.present()) {
        if p {
            for &x in f.data() {
                buf.extend((x as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend(crc.to_le_bytes());
    buf
}

pub fn decode_lvs(bytes: &[u8], path: &Path) -> Result<LongitudinalVolume> {
    let format = |msg: String| Error::Format { path: path.into(), msg };
    if bytes.len() < 4 || &bytes[..4] != LVS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "LVS1",
        });
    }
    if bytes.len() < LVS_HEADER {
        return Err(Error::Truncated { path: path.into() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != LVS_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: LVS_VERSION,
        });
    }
    let (len, w, h, d, flags) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize, word(5));
    if flags != 0 {
        return Err(format(format!("unknown flags {flags:#x}")));
    }
    if len < 2 || w == 0 || h == 0 || d == 0 {
        return Err(format(format!("bad dimensions L={len}, {w}×{h}×{d}")));
    }
    if bytes.len() < LVS_HEADER + len {
        return Err(Error::Truncated { path: path.into() });
    }
    let mask = &bytes[LVS_HEADER..LVS_HEADER + len];
    if mask.iter().any(|&m| m > 1) {
        return Err(format("presence mask bytes must be 0 or 1".into()));
    }
    let present: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let voxels = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| format("extents overflow".into()))?;
    let n_present = present.iter().filter(|&&p| p).count();
    let payload = n_present
        .checked_mul(voxels)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| format("payload size overflows".into()))?;
    let expected = LVS_HEADER + len + payload + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.into() });
    }
    if bytes.len() > expected {
        return Err(format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc {
            path: path.into(),
            stored,
            computed,
        });
    }
    let mut values = body[LVS_HEADER + len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut frames = Vec::with_capacity(len);
    for &p in &present {
        let data = if p {
            values.by_ref().take(voxels).collect()
        } else {
            vec![0.0; voxels]
        };
        frames.push(Tensor::new(&[w, h, d], data)?);
    }
    LongitudinalVolume::with_mask(frames, present).map_err(|e| format(e.to_string()))
}

pub fn write_lvs(v: &LongitudinalVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_lvs(v)).map_err(|e| Error::io(path, e))
}

pub fn read_lvs(path: impl AsRef<Path>) -> Result<LongitudinalVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_lvs(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXT: [usize; 3] = [16, 16, 8];

    fn subject(rho: f64) -> EllipsoidSubject {
        EllipsoidSubject {
            center: [7.5, 7.5, 3.5],
            radii: [5.0, 4.5, 3.0],
            rho,
            intensity: 1.0,
            seed: 0,
        }
    }

    fn interior(t: &Tensor) -> usize {
        t.data().iter().filter(|&&v| v > 0.5).count()
    }

    #[test]
    fn static_subject_repeats() {
        let v = generate_subject(&subject(0.0), 6, EXT).unwrap();
        for f in 2..=6 {
            assert_eq!(v.frame(f), v.frame(1));
        }
    }

    #[test]
    fn volume_shrinks() {
        let s = subject(0.1);
        let sizes: Vec<usize> = (1..=6).map(|f| interior(&render_frame(&s, f, EXT))).collect();
        assert!(sizes.windows(2).all(|w| w[0] > w[1]), "{sizes:?}");
    }

    #[test]
    fn sphere_distance_is_exact() {
        let d = signed_distance([3.0, 4.0, 0.0], [0.0; 3], [2.0; 3]);
        assert!((d - 3.0).abs() < 1e-12);
        assert_eq!(signed_distance([1.0; 3], [1.0; 3], [2.0, 3.0, 4.0]), -2.0);
    }

    #[test]
    fn equal_first_frames_diverge() {
        // same geometry, different rates: frame 1 coincides, frame 3 does not
        let a = subject(0.04);
        let b = subject(0.10);
        assert_eq!(render_frame(&a, 1, EXT), render_frame(&b, 1, EXT));
        let d = render_frame(&a, 3, EXT).sub(&render_frame(&b, 3, EXT)).unwrap();
        assert!(d.norm() > 0.0);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut s = subject(0.05);
        s.center = [2.0, 7.5, 3.5];
        assert!(generate_subject(&s, 6, EXT).is_err());
        assert!(generate_subject(&subject(0.2), 6, EXT).is_err());
        let mut s = subject(0.1);
        s.radii[0] = -1.0;
        assert!(generate_subject(&s, 6, EXT).is_err());
    }

    #[test]
    fn subject_normalization() {
        let v = generate_subject(&subject(0.08), 6, EXT).unwrap();
        let lo = v.frames().iter().map(Tensor::min).fold(f64::INFINITY, f64::min);
        let hi = v.frames().iter().map(Tensor::max).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn dataset_split_and_determinism() {
        let a = make_dataset(10, 6, EXT, 3).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        let b = make_dataset(10, 6, EXT, 3).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.volume, y.volume);
        }
        let (p, q) = (&a.test[0], &a.test[1]);
        assert_eq!(p.params.radii, q.params.radii);
        assert!((p.params.rho - q.params.rho).abs() >= 0.04);
        for s in a.train.iter().chain(&a.test) {
            assert!(RHO_RANGE.0 <= s.params.rho && s.params.rho <= RHO_RANGE.1);
        }
    }

    #[test]
    fn lvs_round_trip() {
        let v = generate_subject(&subject(0.05), 4, EXT).unwrap();
        let bytes = encode_lvs(&v);
        let back = decode_lvs(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode_lvs(&back), bytes);
    }

    #[test]
    fn lvs_errors() {
        let v = generate_subject(&subject(0.05), 3, EXT).unwrap();
        let bytes = encode_lvs(&v);
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[LVS_HEADER + 3 + 100] ^= 0x40;
        assert!(matches!(decode_lvs(&bad, p), Err(Error::Crc { .. })));
        assert!(matches!(decode_lvs(&bytes[..bytes.len() - 9], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_lvs(b"NOPE0000", p), Err(Error::BadMagic { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_lvs(&long, p), Err(Error::Format { .. })));
    }

    #[test]
    fn first_frame_only_file() {
        let v = generate_subject(&subject(0.05), 5, EXT).unwrap();
        let only = v.restricted_to(&[1]).unwrap();
        let back = decode_lvs(&encode_lvs(&only), Path::new("mem")).unwrap();
        assert_eq!(back.present(), &[true, false, false, false, false]);
        assert!(back.frame(3).is_zero());
    }
}
