//! Datasets and domains: the synthetic benchmark corpus, folder/packed-file
//! ingestion, label-preserving augmentation, and the benign / authorized /
//! noise domain triple derived from a benign set, a user key and the codec.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::key::{self, UserKey};
use crate::stego::StegoCodec;

/// In-memory labelled image set; images are `3 x h x w` row-major f32 in [0,1].
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::invalid("image/label count mismatch"));
        }
        if self.images.iter().any(|i| i.len() != self.image_len()) {
            return Err(Error::invalid("image length does not match dataset geometry"));
        }
        if self.labels.iter().any(|&l| l as usize >= self.num_classes) {
            return Err(Error::invalid("label out of range"));
        }
        Ok(())
    }

    pub fn shuffled(&self, seed: u64) -> ImageDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        ImageDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Split off the first `n` samples as one set, the rest as the other.
    pub fn split(&self, n: usize) -> Result<(ImageDataset, ImageDataset)> {
        if n > self.len() {
            return Err(Error::invalid("split point past dataset end"));
        }
        let head = ImageDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        };
        let tail = ImageDataset {
            images: self.images[n..].to_vec(),
            labels: self.labels[n..].to_vec(),
            ..self.clone()
        };
        Ok((head, tail))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ImageDataset> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::invalid("subset index out of range"));
        }
        Ok(ImageDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        })
    }
}

/// Deterministic synthetic corpus: each class is an oriented sinusoidal
/// grating with a class-specific frequency and channel mix, plus per-sample
/// random phase, offset and pixel noise. Learnable by a small CNN in a few
/// epochs, which keeps end-to-end runs tractable on one core.
pub fn synthetic_dataset(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<ImageDataset> {
    if num_classes == 0 || n == 0 {
        return Err(Error::invalid("synthetic dataset needs n >= 1 and classes >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5ce0_da7a);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % num_classes) as u32;
        let c = class as f64;
        let theta = std::f64::consts::PI * c / num_classes as f64;
        let freq = 2.0 + (c % 3.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let bias: f64 = rng.gen_range(-0.05..0.05);
        // class-specific channel weights so color carries signal too
        let chw = [
            0.6 + 0.4 * (c / num_classes as f64),
            0.6 + 0.4 * (((c + 3.0) % num_classes as f64) / num_classes as f64),
            0.6 + 0.4 * (((c + 6.0) % num_classes as f64) / num_classes as f64),
        ];
        let mut img = vec![0f32; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width as f64;
                let v = y as f64 / height as f64;
                let t = std::f64::consts::TAU * freq * (u * theta.cos() + v * theta.sin()) + phase;
                let base = 0.5 + bias + 0.35 * t.sin();
                for ch in 0..3 {
                    let noise: f64 = rng.gen_range(-0.04..0.04);
                    img[ch * height * width + y * width + x] =
                        ((base * chw[ch] + noise).clamp(0.0, 1.0)) as f32;
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    let ds = ImageDataset { images, labels, height, width, num_classes };
    ds.validate()?;
    Ok(ds.shuffled(seed ^ 0x0dd_ba11))
}

/// Load a directory-per-class folder of PNG/JPEG images, resizing everything
/// to `height x width`. Class labels follow the sorted subdirectory names.
pub fn load_folder(root: impl AsRef<Path>, height: usize, width: usize) -> Result<ImageDataset> {
    let root = root.as_ref();
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::invalid(format!("{root:?} has no class subdirectories")));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Format(format!("{f:?}: {e}")))?
                .to_rgb8();
            let img = image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
            let mut planes = vec![0f32; 3 * height * width];
            for (x, y, p) in img.enumerate_pixels() {
                for ch in 0..3 {
                    planes[ch * height * width + y as usize * width + x as usize] = p.0[ch] as f32 / 255.0;
                }
            }
            images.push(planes);
            labels.push(label as u32);
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(format!("{root:?} contains no images")));
    }
    let ds = ImageDataset { images, labels, height, width, num_classes: class_dirs.len() };
    ds.validate()?;
    Ok(ds)
}

const DS_MAGIC: &[u8; 4] = b"SLDS";

/// Packed binary dataset: `"SLDS" | u32 version | u64 n | u32 h | u32 w |
/// u32 classes |` then per sample `u32 label | 3*h*w f32` (little-endian).
pub fn save_packed(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DS_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(ds.len() as u64).to_le_bytes())?;
    f.write_all(&(ds.height as u32).to_le_bytes())?;
    f.write_all(&(ds.width as u32).to_le_bytes())?;
    f.write_all(&(ds.num_classes as u32).to_le_bytes())?;
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        f.write_all(&label.to_le_bytes())?;
        for &v in img {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DS_MAGIC {
        return Err(Error::Format(format!("{:?} is not a packed dataset", path.as_ref())));
    }
    let version = read_u32(&mut f)?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u64(&mut f)? as usize;
    let height = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let num_classes = read_u32(&mut f)? as usize;
    let img_len = 3 * height * width;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut f)?);
        let mut bytes = vec![0u8; img_len * 4];
        f.read_exact(&mut bytes)?;
        images.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    let ds = ImageDataset { images, labels, height, width, num_classes };
    ds.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// One label-preserving, shape-preserving augmentation operator.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    /// Zero-pad by `pad` then crop back at a random offset.
    Crop { pad: usize },
    /// Horizontal flip with probability 1/2.
    Flip,
    /// Rotation by a uniform angle in [-max_deg, max_deg], nearest-neighbor.
    Rotate { max_deg: f64 },
    /// Zero out a random rectangle covering up to `max_frac` of each side.
    Erase { max_frac: f64 },
}

impl AugmentOp {
    /// Parse `"crop:2"`, `"flip"`, `"rotate:15"`, `"erase:0.25"`.
    pub fn parse(s: &str) -> Result<AugmentOp> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |a: Option<&str>, what: &str| -> Result<f64> {
            a.ok_or_else(|| Error::invalid(format!("{name} needs a {what} argument")))?
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} in augment op {s:?}")))
        };
        match name {
            "crop" => Ok(AugmentOp::Crop { pad: num(arg, "pad")? as usize }),
            "flip" => Ok(AugmentOp::Flip),
            "rotate" => Ok(AugmentOp::Rotate { max_deg: num(arg, "degrees")? }),
            "erase" => {
                let f = num(arg, "fraction")?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::invalid("erase fraction must be in [0,1]"));
                }
                Ok(AugmentOp::Erase { max_frac: f })
            }
            other => Err(Error::invalid(format!("unknown augment op {other:?}"))),
        }
    }
}

/// Ordered list of augment ops applied per image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentPolicy(pub Vec<AugmentOp>);

impl AugmentPolicy {
    pub fn parse(specs: &[String]) -> Result<AugmentPolicy> {
        Ok(AugmentPolicy(specs.iter().map(|s| AugmentOp::parse(s)).collect::<Result<_>>()?))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Apply all ops to one image in place-order; shape is preserved.
    pub fn apply(&self, img: &[f32], height: usize, width: usize, rng: &mut ChaCha12Rng) -> Vec<f32> {
        let mut out = img.to_vec();
        for op in &self.0 {
            out = match *op {
                AugmentOp::Crop { pad } => shifted(&out, height, width, {
                    let dy = rng.gen_range(-(pad as i64)..=pad as i64);
                    let dx = rng.gen_range(-(pad as i64)..=pad as i64);
                    (dy, dx)
                }),
                AugmentOp::Flip => {
                    if rng.gen_bool(0.5) {
                        hflip(&out, height, width)
                    } else {
                        out
                    }
                }
                AugmentOp::Rotate { max_deg } => {
                    let deg = rng.gen_range(-max_deg..=max_deg);
                    rotated(&out, height, width, deg.to_radians())
                }
                AugmentOp::Erase { max_frac } => {
                    let eh = (rng.gen_range(0.0..=max_frac) * height as f64) as usize;
                    let ew = (rng.gen_range(0.0..=max_frac) * width as f64) as usize;
                    if eh == 0 || ew == 0 {
                        out
                    } else {
                        let y0 = rng.gen_range(0..=height - eh);
                        let x0 = rng.gen_range(0..=width - ew);
                        erased(&out, height, width, y0, x0, eh, ew)
                    }
                }
            };
        }
        out
    }
}

/// Deterministic horizontal mirror; applying it twice is the identity.
pub fn hflip(img: &[f32], height: usize, width: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for ch in 0..3 {
        for y in 0..height {
            for x in 0..width {
                out[ch * height * width + y * width + x] = img[ch * height * width + y * width + (width - 1 - x)];
            }
        }
    }
    out
}

fn shifted(img: &[f32], height: usize, width: usize, (dy, dx): (i64, i64)) -> Vec<f32> {
    let mut out = vec![0f32; img.len()];
    for ch in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                if (0..height as i64).contains(&sy) && (0..width as i64).contains(&sx) {
                    out[ch * height * width + y * width + x] =
                        img[ch * height * width + sy as usize * width + sx as usize];
                }
            }
        }
    }
    out
}

fn rotated(img: &[f32], height: usize, width: usize, rad: f64) -> Vec<f32> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (s, c) = rad.sin_cos();
    let mut out = vec![0f32; img.len()];
    for ch in 0..3 {
        for y in 0..height {
            for x in 0..width {
                // inverse-map the target pixel back into the source
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = (c * dy - s * dx + cy).round();
                let sx = (s * dy + c * dx + cx).round();
                if sy >= 0.0 && sy < height as f64 && sx >= 0.0 && sx < width as f64 {
                    out[ch * height * width + y * width + x] =
                        img[ch * height * width + sy as usize * width + sx as usize];
                }
            }
        }
    }
    out
}

fn erased(img: &[f32], height: usize, width: usize, y0: usize, x0: usize, eh: usize, ew: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for ch in 0..3 {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out[ch * height * width + y * width + x] = 0.0;
            }
        }
    }
    out
}

/// Which of the three derived domains a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Plain cover images B.
    Benign,
    /// Images carrying the user's key, A_j.
    Authorized,
    /// Images carrying a wrong key, N_j.
    Noise,
}

/// Benign set plus its paired authorized/noise encodings. The i-th sample of
/// every domain shares the i-th cover and label; noise samples record the
/// per-sample seed of their wrong key so they can be regenerated exactly.
pub struct DomainTriple {
    pub benign: ImageDataset,
    pub key: UserKey,
    pub noise_seeds: Vec<u64>,
    authorized: Vec<OnceLock<Vec<f32>>>,
    noise: Vec<OnceLock<Vec<f32>>>,
}

/// The wrong key used for noise sample `seed`; rejection-resampled at build
/// time so it never equals the user key.
pub fn noise_key(seed: u64, side: usize, channels: usize) -> Result<UserKey> {
    key::generate_key("__noise__", side, channels, seed)
}

impl DomainTriple {
    /// Draw per-sample wrong keys. Deterministic in `seed`.
    pub fn build(benign: ImageDataset, user_key: UserKey, seed: u64) -> Result<DomainTriple> {
        benign.validate()?;
        if benign.is_empty() {
            return Err(Error::invalid("domain triple over an empty benign set"));
        }
        if benign.height % user_key.side != 0 || benign.width % user_key.side != 0 {
            return Err(Error::invalid("benign image size is not a multiple of the key side"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0153_0153);
        let mut noise_seeds = Vec::with_capacity(benign.len());
        for _ in 0..benign.len() {
            // rejection sampling: a noise key must differ from the user key
            let s = loop {
                let s: u64 = rng.gen();
                if noise_key(s, user_key.side, user_key.channels)?.bits != user_key.bits {
                    break s;
                }
            };
            noise_seeds.push(s);
        }
        let n = benign.len();
        Ok(DomainTriple {
            benign,
            key: user_key,
            noise_seeds,
            authorized: (0..n).map(|_| OnceLock::new()).collect(),
            noise: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.benign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.benign.is_empty()
    }

    /// Total size of the union domain W = B u A_j u N_j.
    pub fn len_union(&self) -> usize {
        3 * self.len()
    }

    /// Map a union index to (domain, sample index): benign block first, then
    /// authorized, then noise.
    pub fn union_index(&self, i: usize) -> Result<(Domain, usize)> {
        let n = self.len();
        match i / n {
            0 => Ok((Domain::Benign, i)),
            1 => Ok((Domain::Authorized, i - n)),
            2 => Ok((Domain::Noise, i - 2 * n)),
            _ => Err(Error::invalid("union index out of range")),
        }
    }

    /// The i-th image of a domain (encoding lazily on first touch) and its
    /// label, which is shared across domains by construction.
    pub fn sample(&self, codec: &StegoCodec, domain: Domain, i: usize) -> Result<(&[f32], u32)> {
        if i >= self.len() {
            return Err(Error::invalid("sample index out of range"));
        }
        let label = self.benign.labels[i];
        let img: &[f32] = match domain {
            Domain::Benign => &self.benign.images[i],
            Domain::Authorized => self.encode_cached(codec, &self.authorized, i, None)?,
            Domain::Noise => self.encode_cached(codec, &self.noise, i, Some(self.noise_seeds[i]))?,
        };
        Ok((img, label))
    }

    fn encode_cached<'a>(
        &'a self,
        codec: &StegoCodec,
        cache: &'a [OnceLock<Vec<f32>>],
        i: usize,
        wrong_seed: Option<u64>,
    ) -> Result<&'a [f32]> {
        if let Some(v) = cache[i].get() {
            return Ok(v);
        }
        let k = match wrong_seed {
            Some(s) => noise_key(s, self.key.side, self.key.channels)?,
            None => self.key.clone(),
        };
        let ek = key::expand_key(&k, self.benign.height, self.benign.width)?;
        let encoded = codec
            .encode_images(std::slice::from_ref(&self.benign.images[i]), &ek)?
            .remove(0);
        let _ = cache[i].set(encoded);
        Ok(cache[i].get().unwrap())
    }

    /// Encode every sample of both derived domains in batches up front.
    pub fn materialize(&self, codec: &StegoCodec) -> Result<()> {
        let ek = key::expand_key(&self.key, self.benign.height, self.benign.width)?;
        const CHUNK: usize = 64;
        for start in (0..self.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.len());
            let pending: Vec<usize> = (start..end).filter(|&i| self.authorized[i].get().is_none()).collect();
            if !pending.is_empty() {
                let covers: Vec<Vec<f32>> = pending.iter().map(|&i| self.benign.images[i].clone()).collect();
                let encoded = codec.encode_images(&covers, &ek)?;
                for (&i, img) in pending.iter().zip(encoded) {
                    let _ = self.authorized[i].set(img);
                }
            }
        }
        for i in 0..self.len() {
            self.encode_cached(codec, &self.noise, i, Some(self.noise_seeds[i]))?;
        }
        Ok(())
    }

    /// Dataset view of one fully materialized domain.
    pub fn domain_dataset(&self, codec: &StegoCodec, domain: Domain) -> Result<ImageDataset> {
        let mut images = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            images.push(self.sample(codec, domain, i)?.0.to_vec());
        }
        Ok(ImageDataset {
            images,
            labels: self.benign.labels.clone(),
            height: self.benign.height,
            width: self.benign.width,
            num_classes: self.benign.num_classes,
        })
    }
}
