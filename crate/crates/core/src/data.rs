//! Segmentation samples, the synthetic shape generator and PGM storage.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One image with per-pixel class ids. Pixels are stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub image: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn new(height: usize, width: usize, channels: usize, image: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!(
                "bad sample geometry {height}x{width}x{channels}"
            )));
        }
        if image.len() != height * width * channels || labels.len() != height * width {
            return Err(Error::shape(format!(
                "sample {height}x{width}x{channels} has {} image bytes and {} labels",
                image.len(),
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            image,
            labels,
        })
    }

    /// Check every label is a class id below `num_classes` or the ignore id.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(&l) => Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// The `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut image = Vec::with_capacity(h * w * c);
        let mut labels = Vec::with_capacity(h * w);
        for y in top..top + h {
            image.extend_from_slice(&self.image[(y * self.width + left) * c..(y * self.width + left + w) * c]);
            labels.extend_from_slice(&self.labels[y * self.width + left..y * self.width + left + w]);
        }
        Self::new(h, w, c, image, labels)
    }

    /// A uniformly placed `h x w` crop.
    pub fn random_crop(&self, h: usize, w: usize, rng: &mut Rng) -> Result<Self> {
        if h > self.height || w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} larger than sample {}x{}",
                self.height, self.width
            )));
        }
        let top = rng.random_range(0..=self.height - h);
        let left = rng.random_range(0..=self.width - w);
        self.crop(top, left, h, w)
    }
}

/// Network input scaling of an 8-bit intensity.
pub fn normalize_pixel(v: u8) -> f64 {
    (v as f64 - 128.0) / 64.0
}

/// Stack samples of equal geometry into an `(n, c, h, w)` tensor plus the
/// flattened labels.
pub fn to_batch<T: Scalar>(samples: &[&SegSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero samples"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width, s.channels) != (h, w, c) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w}x{c} with {}x{}x{}",
                s.height, s.width, s.channels
            )));
        }
        for ch in 0..c {
            data.extend((0..h * w).map(|p| T::narrow(normalize_pixel(s.image[p * c + ch]))));
        }
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), c, h, w], data)?, labels))
}

/// Deterministic synthetic segmentation set: axis-aligned rectangles and
/// discs whose grey level depends on their class, drawn over a textured
/// background of class 0. Later shapes cover earlier ones.
pub fn synth_dataset(seed: u64, count: usize, size: usize, num_classes: usize) -> Result<Vec<SegSample>> {
    if !(2..=255).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "num_classes must be in 2..=255, got {num_classes}"
        )));
    }
    if size < 16 {
        return Err(Error::invalid(format!("image size must be >= 16, got {size}")));
    }
    let mut rng = seeded(seed);
    (0..count).map(|_| synth_sample(&mut rng, size, num_classes)).collect()
}

fn class_level(class: usize, num_classes: usize) -> f64 {
    40.0 + 180.0 * class as f64 / (num_classes - 1) as f64
}

fn synth_sample(rng: &mut Rng, size: usize, num_classes: usize) -> Result<SegSample> {
    let pixel_noise = Normal::new(0.0, 6.0).expect("valid sigma");
    let n = size * size;
    let mut level = vec![0.0f64; n];
    let mut labels = vec![0u8; n];

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(4.0..10.0),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            level[y * size + x] = class_level(0, num_classes) + tex;
        }
    }

    let shapes = rng.random_range(1..=3);
    let (lo, hi) = (size / 6, size / 3);
    for _ in 0..shapes {
        let class = rng.random_range(1..num_classes);
        let tone = class_level(class, num_classes) + rng.random_range(-8.0..8.0);
        let disc = rng.random_bool(0.5);
        let h = rng.random_range(lo..=hi);
        let w = if disc { h } else { rng.random_range(lo..=hi) };
        let top = rng.random_range(0..=size - h);
        let left = rng.random_range(0..=size - w);
        let (cy, cx, r) = (
            top as f64 + h as f64 / 2.0,
            left as f64 + w as f64 / 2.0,
            h as f64 / 2.0,
        );
        for y in top..top + h {
            for x in left..left + w {
                let inside = !disc || {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    dy * dy + dx * dx <= r * r
                };
                if inside {
                    level[y * size + x] = tone;
                    labels[y * size + x] = class as u8;
                }
            }
        }
    }

    let image = level
        .iter()
        .map(|&v| (v + pixel_noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    SegSample::new(size, size, 1, image, labels)
}

/// Deterministic split of `0..n` into two disjoint index sets of sizes
/// `n - n / 2` and `n / 2`.
pub fn half_split(n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let val = idx.split_off(n - n / 2);
    (idx, val)
}

/// Encode a single-channel 8-bit image as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "{} pixels for a {width}x{height} PGM",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decode a binary (P5) PGM with maxval 255. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(0, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(0, format!("expected P5 magic, found '{}'", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(0, format!("bad PGM header field '{s}'")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(0, format!("only maxval 255 is supported, got {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(Error::parse(
            0,
            format!("PGM body has {} bytes, expected {}", body.len(), w * h),
        ));
    }
    Ok((w, h, body.to_vec()))
}

/// Write `NNNN.img.pgm` / `NNNN.lab.pgm` pairs into `dir`.
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        if s.channels != 1 {
            return Err(Error::invalid("only single-channel samples can be stored as PGM"));
        }
        fs::write(
            dir.join(format!("{i:04}.img.pgm")),
            encode_pgm(s.width, s.height, &s.image)?,
        )?;
        fs::write(
            dir.join(format!("{i:04}.lab.pgm")),
            encode_pgm(s.width, s.height, &s.labels)?,
        )?;
    }
    Ok(())
}

/// Read every `NNNN.img.pgm` / `NNNN.lab.pgm` pair in `dir`, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".img.pgm"))
                .map(String::from)
        })
        .collect();
    stems.sort();
    stems
        .iter()
        .map(|stem| {
            let (w, h, image) = decode_pgm(&fs::read(dir.join(format!("{stem}.img.pgm")))?)?;
            let lab_path = dir.join(format!("{stem}.lab.pgm"));
            let (lw, lh, labels) =
                decode_pgm(&fs::read(&lab_path).map_err(|e| Error::invalid(format!("{}: {e}", lab_path.display())))?)?;
            if (lw, lh) != (w, h) {
                return Err(Error::shape(format!("{stem}: label map {lw}x{lh} vs image {w}x{h}")));
            }
            SegSample::new(h, w, 1, image, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = synth_dataset(3, 4, 32, 3).unwrap();
        let b = synth_dataset(3, 4, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(4, 4, 32, 3).unwrap());
        assert!(synth_dataset(3, 0, 32, 3).unwrap().is_empty());
    }

    #[test]
    fn generator_rejects_bad_arguments() {
        assert!(synth_dataset(0, 1, 8, 3).is_err());
        assert!(synth_dataset(0, 1, 32, 1).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pgm(4, 3, &px).unwrap();
        assert_eq!(decode_pgm(&enc).unwrap(), (4, 3, px));
        let commented = b"P5\n# hi\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pgm(commented).unwrap(), (2, 1, vec![1, 2]));
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let s = SegSample::new(2, 3, 1, vec![0, 1, 2, 3, 4, 5], vec![0, 0, 1, 1, 1, 0]).unwrap();
        let c = s.crop(1, 1, 1, 2).unwrap();
        assert_eq!(c.image, vec![4, 5]);
        assert_eq!(c.labels, vec![1, 0]);
        assert!(s.crop(1, 2, 1, 2).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = half_split(7, &mut seeded(1));
        assert_eq!((a.len(), b.len()), (4, 3));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }
}
