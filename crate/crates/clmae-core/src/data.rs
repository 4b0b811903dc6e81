//! Labeled image container with a small binary on-disk form, plus a
//! procedural generator whose classes are only partly separable in pixel
//! space.

use crate::rng::Stream;
use std::io::Write as _;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"CLMDS\0";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 6 + 2 + 4 + 2 + 2 + 1 + 2;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot access dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset format version {found} is not supported (expected {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("dataset length {found} bytes does not match header ({expected} expected)")]
    WrongLength { expected: usize, found: usize },
    #[error("record {index} has label {label}, but the header declares {classes} classes")]
    LabelOutOfRange { index: usize, label: u16, classes: u16 },
    #[error("invalid dataset shape: {0}")]
    BadShape(String),
}

/// In-memory dataset: `pixels` holds count·h·w·c bytes, one image after
/// another, rows major and channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(h: usize, w: usize, c: usize, classes: usize) -> Result<Self, DataError> {
        if h < 2 || w < 2 || c < 1 || classes < 1 {
            return Err(DataError::BadShape(format!(
                "need h, w >= 2, c >= 1, classes >= 1; got {h}x{w}x{c}, {classes} classes"
            )));
        }
        if h > u16::MAX as usize || w > u16::MAX as usize || c > u8::MAX as usize {
            return Err(DataError::BadShape(format!(
                "extents {h}x{w}x{c} overflow the header fields"
            )));
        }
        if classes > u16::MAX as usize {
            return Err(DataError::BadShape(format!(
                "{classes} classes overflow the header field"
            )));
        }
        Ok(Dataset { h, w, c, classes, labels: Vec::new(), pixels: Vec::new() })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn push(&mut self, label: u16, pixels: &[u8]) {
        assert!((label as usize) < self.classes, "label {label} out of range");
        assert_eq!(pixels.len(), self.image_len(), "pixel count does not match the extents");
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as floats in [0, 1].
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let count = u32::try_from(self.count()).expect("record count overflows the header");
        let mut out = Vec::with_capacity(HEADER_LEN + self.count() * (2 + self.image_len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        out.push(self.c as u8);
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        let n = self.image_len();
        for (i, &label) in self.labels.iter().enumerate() {
            out.extend_from_slice(&label.to_le_bytes());
            out.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
            return Err(DataError::BadMagic);
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(6);
        if version != VERSION {
            return Err(DataError::UnsupportedVersion { found: version });
        }
        let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let (h, w) = (u16_at(12) as usize, u16_at(14) as usize);
        let c = bytes[16] as usize;
        let classes = u16_at(17) as usize;
        let mut ds = Dataset::new(h, w, c, classes)?;
        let n = ds.image_len();
        let expected = HEADER_LEN + count * (2 + n);
        if bytes.len() != expected {
            return Err(DataError::WrongLength { expected, found: bytes.len() });
        }
        ds.labels.reserve(count);
        ds.pixels.reserve(count * n);
        for i in 0..count {
            let at = HEADER_LEN + i * (2 + n);
            let label = u16_at(at);
            if label as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    index: i,
                    label,
                    classes: classes as u16,
                });
            }
            ds.labels.push(label);
            ds.pixels.extend_from_slice(&bytes[at + 2..at + 2 + n]);
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let wrap = |source| DataError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(wrap)?;
        }
        let mut f = std::fs::File::create(path).map_err(wrap)?;
        f.write_all(&self.to_bytes()).map_err(wrap)
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Procedural classes: an oriented gradient, a class-frequency stripe
/// texture, and a class-colored disc, under per-image phase, placement,
/// brightness, and contrast jitter plus pixel noise. The jitter is strong
/// enough that raw pixel distance confuses some neighbors.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut ds = Dataset::new(h, w, c, classes)?;
    if per_class < 1 {
        return Err(DataError::BadShape("per-class count must be at least 1".into()));
    }
    if classes * per_class > u32::MAX as usize {
        return Err(DataError::BadShape("record count overflows the header".into()));
    }
    let mut rng = Stream::new(seed);
    let tau = std::f64::consts::TAU;
    let mut img = vec![0u8; ds.image_len()];

    for k in 0..classes {
        let frac = k as f64 / classes as f64;
        let theta = std::f64::consts::PI * frac;
        let freq = 2.0 + 0.4 * k as f64;
        let color: Vec<f64> =
            (0..c).map(|ch| 0.5 + 0.35 * (tau * (frac + ch as f64 / 3.0)).cos()).collect();
        let (disc_x, disc_y) = (0.3 * (tau * frac).cos(), 0.3 * (tau * frac).sin());

        for _ in 0..per_class {
            let phase = rng.uniform(0.0, tau);
            let stripe_amp = rng.uniform(0.15, 0.45);
            let freq_i = freq + rng.uniform(-0.25, 0.25);
            let tilt = rng.uniform(-0.16, 0.16);
            let (ct, st) = ((theta + tilt).cos(), (theta + tilt).sin());
            let jx = rng.uniform(-0.3, 0.3);
            let jy = rng.uniform(-0.3, 0.3);
            let brightness = rng.uniform(0.6, 1.4);
            let contrast = rng.uniform(0.75, 1.25);
            let (cx, cy) = (disc_x + jx, disc_y + jy);

            for y in 0..h {
                let v = 2.0 * y as f64 / (h - 1) as f64 - 1.0;
                for x in 0..w {
                    let u = 2.0 * x as f64 / (w - 1) as f64 - 1.0;
                    let along = (u * ct + v * st) / std::f64::consts::SQRT_2;
                    let across = (-u * st + v * ct) / std::f64::consts::SQRT_2;
                    let base =
                        0.5 + 0.15 * along + stripe_amp * (tau * freq_i * across + phase).sin();
                    let in_disc = (u - cx) * (u - cx) + (v - cy) * (v - cy) < 0.25 * 0.25;
                    for ch in 0..c {
                        let val = if in_disc {
                            0.55 * base + 0.45 * color[ch]
                        } else {
                            base + 0.08 * (color[ch] - 0.5)
                        };
                        let val =
                            ((val - 0.5) * contrast + 0.5) * brightness + rng.normal(0.0, 0.1);
                        img[(y * w + x) * c + ch] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            ds.push(k as u16, &img);
        }
    }
    Ok(ds)
}

/// Leave-one-out nearest-neighbor accuracy on raw pixels; the reference
/// floor that learned features must clear.
pub fn pixel_nn_loo(ds: &Dataset) -> f64 {
    let count = ds.count();
    assert!(count >= 2, "need at least two images to hold one out");
    let n = ds.image_len();
    let mut hits = 0usize;
    for i in 0..count {
        let a = ds.image(i);
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..count {
            if j == i {
                continue;
            }
            let b = ds.image(j);
            let mut dist = 0.0;
            for t in 0..n {
                let diff = a[t] as f64 - b[t] as f64;
                dist += diff * diff;
            }
            if dist < best.0 {
                best = (dist, j);
            }
        }
        hits += usize::from(ds.labels[best.1] == ds.labels[i]);
    }
    hits as f64 / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_exactly() {
        let ds = gen_synthetic(3, 4, 8, 8, 3, 7).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn files_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.clmds");
        let ds = gen_synthetic(2, 3, 8, 8, 1, 9).unwrap();
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn count_field_is_classes_times_per_class() {
        let ds = gen_synthetic(10, 16, 8, 8, 3, 1).unwrap();
        assert_eq!(ds.count(), 160);
        let bytes = ds.to_bytes();
        assert_eq!(u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]), 160);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = gen_synthetic(4, 2, 16, 16, 3, 5).unwrap();
        let b = gen_synthetic(4, 2, 16, 16, 3, 5).unwrap();
        let c = gen_synthetic(4, 2, 16, 16, 3, 6).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn wrong_magic_version_and_length_are_rejected() {
        let good = gen_synthetic(2, 2, 8, 8, 1, 3).unwrap().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(DataError::BadMagic)));

        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(DataError::UnsupportedVersion { found: 9 })
        ));

        let short = &good[..good.len() - 5];
        assert!(matches!(Dataset::from_bytes(short), Err(DataError::WrongLength { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Dataset::from_bytes(&long), Err(DataError::WrongLength { .. })));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let ds = gen_synthetic(2, 2, 8, 8, 1, 3).unwrap();
        let mut bytes = ds.to_bytes();
        let at = 19 + 2 + ds.image_len();
        bytes[at..at + 2].copy_from_slice(&7u16.to_le_bytes());
        let err = Dataset::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { index: 1, label: 7, .. }), "{err}");
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        assert!(Dataset::new(1, 8, 1, 2).is_err());
        assert!(Dataset::new(8, 8, 0, 2).is_err());
        assert!(Dataset::new(8, 8, 1, 0).is_err());
        assert!(gen_synthetic(2, 0, 8, 8, 1, 0).is_err());
    }

    #[test]
    fn pixels_confuse_a_nearest_neighbor_but_beat_chance() {
        let ds = gen_synthetic(10, 16, 32, 32, 3, 42).unwrap();
        let acc = pixel_nn_loo(&ds);
        assert!(acc > 0.10, "pixel neighbors at chance level: {acc}");
        assert!(acc < 1.00, "pixel neighbors fully solve the classes: {acc}");
    }

    #[test]
    fn image_f64_lands_in_the_unit_interval() {
        let ds = gen_synthetic(2, 2, 8, 8, 3, 11).unwrap();
        for i in 0..ds.count() {
            assert!(ds.image_f64(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
