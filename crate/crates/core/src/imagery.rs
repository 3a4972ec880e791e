//! Image ingestion and the synthetic entropy-slice generator.
//!
//! Flattened rows use row-major pixel order with the channel index fastest:
//! sample `(r, c, ch)` lands at `(r * width + c) * 3 + ch`, scaled to `[0, 1]`.
//! This ordering is part of the persisted-bundle contract and does not change.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::Label;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("cannot encode {path}: {reason}")]
    EncodeError { path: PathBuf, reason: String },
    #[error("crop region {region} exceeds {height}x{width} image")]
    RegionOutOfBounds {
        region: CropRegion,
        height: usize,
        width: usize,
    },
    #[error("invalid crop region {0}: bounds are inverted")]
    InvertedRegion(CropRegion),
    #[error("invalid dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// An RGB image with 8-bit samples, row-major, channel-fastest.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageTensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(ImageError::InvalidDimensions { height, width });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * CHANNELS)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Length of the flattened feature row.
    pub fn feature_len(&self) -> usize {
        self.data.len()
    }
}

/// Inclusive pixel bounds. `x` indexes columns, `y` indexes rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
}

impl CropRegion {
    /// The plot-area crop used for the production renderings.
    pub const PLOT_AREA: CropRegion = CropRegion {
        x_lo: 122,
        x_hi: 601,
        y_lo: 257,
        y_hi: 1212,
    };

    pub fn new(x_lo: usize, x_hi: usize, y_lo: usize, y_hi: usize) -> Result<Self, ImageError> {
        let r = Self {
            x_lo,
            x_hi,
            y_lo,
            y_hi,
        };
        if x_lo > x_hi || y_lo > y_hi {
            return Err(ImageError::InvertedRegion(r));
        }
        Ok(r)
    }

    pub fn full(img: &ImageTensor) -> Self {
        Self {
            x_lo: 0,
            x_hi: img.width - 1,
            y_lo: 0,
            y_hi: img.height - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.y_hi - self.y_lo + 1
    }

    pub fn width(&self) -> usize {
        self.x_hi - self.x_lo + 1
    }
}

impl fmt::Display for CropRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "x[{}, {}] y[{}, {}]",
            self.x_lo, self.x_hi, self.y_lo, self.y_hi
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// No-op; lets flip experiments include the unflipped baseline.
    Identity,
    /// Reverses columns (mirror left/right).
    Horizontal,
    /// Reverses rows (mirror top/bottom).
    Vertical,
    Both,
}

impl FlipAxis {
    pub fn name(self) -> &'static str {
        match self {
            FlipAxis::Identity => "identity",
            FlipAxis::Horizontal => "horizontal",
            FlipAxis::Vertical => "vertical",
            FlipAxis::Both => "both",
        }
    }
}

impl std::str::FromStr for FlipAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(FlipAxis::Identity),
            "h" | "horizontal" => Ok(FlipAxis::Horizontal),
            "v" | "vertical" => Ok(FlipAxis::Vertical),
            "both" | "hv" => Ok(FlipAxis::Both),
            other => Err(format!("unknown flip axis `{other}`")),
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    if !path.exists() {
        return Err(ImageError::FileNotFound(path.to_path_buf()));
    }
    let decoded = image::ImageReader::open(path)
        .map_err(|e| ImageError::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .with_guessed_format()
        .map_err(|e| ImageError::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .decode()
        .map_err(|e| ImageError::DecodeError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::new(h as usize, w as usize, rgb.into_raw())
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    image::save_buffer_with_format(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImageError::EncodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn crop(img: &ImageTensor, region: CropRegion) -> Result<ImageTensor, ImageError> {
    if region.x_lo > region.x_hi || region.y_lo > region.y_hi {
        return Err(ImageError::InvertedRegion(region));
    }
    if region.x_hi >= img.width || region.y_hi >= img.height {
        return Err(ImageError::RegionOutOfBounds {
            region,
            height: img.height,
            width: img.width,
        });
    }
    let row_bytes = region.width() * CHANNELS;
    let mut data = Vec::with_capacity(region.height() * row_bytes);
    for r in region.y_lo..=region.y_hi {
        let start = (r * img.width + region.x_lo) * CHANNELS;
        data.extend_from_slice(&img.data[start..start + row_bytes]);
    }
    ImageTensor::new(region.height(), region.width(), data)
}

/// Bilinear resampling with half-pixel centre alignment and edge clamping.
pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidDimensions {
            height: out_h,
            width: out_w,
        });
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| taps(c, sx, img.width)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * CHANNELS);
    for r in 0..out_h {
        let (r0, r1, fy) = taps(r, sy, img.height);
        for &(c0, c1, fx) in &cols {
            for ch in 0..CHANNELS {
                let at =
                    |rr: usize, cc: usize| img.data[(rr * img.width + cc) * CHANNELS + ch] as f64;
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageTensor::new(out_h, out_w, data)
}

pub fn flip(img: &ImageTensor, axis: FlipAxis) -> ImageTensor {
    let (rev_rows, rev_cols) = match axis {
        FlipAxis::Identity => return img.clone(),
        FlipAxis::Horizontal => (false, true),
        FlipAxis::Vertical => (true, false),
        FlipAxis::Both => (true, true),
    };
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..img.height {
        let src_r = if rev_rows { img.height - 1 - r } else { r };
        for c in 0..img.width {
            let src_c = if rev_cols { img.width - 1 - c } else { c };
            let i = (src_r * img.width + src_c) * CHANNELS;
            data.extend_from_slice(&img.data[i..i + CHANNELS]);
        }
    }
    ImageTensor {
        height: img.height,
        width: img.width,
        data,
    }
}

pub fn flatten<T: Scalar>(img: &ImageTensor) -> Vec<T> {
    let scale = T::lit(1.0 / 255.0);
    img.data.iter().map(|&v| T::lit(v as f64) * scale).collect()
}

/// Crop and resize steps applied before flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Preprocess {
    pub crop: Option<CropRegion>,
    /// Output `(height, width)` after resizing.
    pub resize: Option<(usize, usize)>,
}

impl Preprocess {
    /// Plot-area crop resized to 640x480, giving 921600-long rows.
    pub const PRODUCTION: Preprocess = Preprocess {
        crop: Some(CropRegion::PLOT_AREA),
        resize: Some((640, 480)),
    };

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor, ImageError> {
        let mut out = match self.crop {
            Some(region) => crop(img, region)?,
            None => img.clone(),
        };
        if let Some((h, w)) = self.resize {
            out = resize(&out, h, w)?;
        }
        Ok(out)
    }

    pub fn features<T: Scalar>(&self, img: &ImageTensor) -> Result<Vec<T>, ImageError> {
        Ok(flatten(&self.apply(img)?))
    }

    /// Feature row length this pipeline yields for a source image of the given size.
    pub fn output_len(&self, height: usize, width: usize) -> usize {
        let (h, w) = match (self.resize, self.crop) {
            (Some(dims), _) => dims,
            (None, Some(c)) => (c.height(), c.width()),
            (None, None) => (height, width),
        };
        h * w * CHANNELS
    }
}

// ---------------------------------------------------------------------------
// Synthetic entropy slices
// ---------------------------------------------------------------------------

/// Geometry of the injected ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayConfig {
    /// Degrees clockwise from the upward vertical.
    pub angle_deg: f64,
    /// Distance from the blob centre to the ray tip, in pixels.
    pub length: f64,
    /// Width of the saturated core, in pixels.
    pub width: f64,
    /// Glow falloff distance beyond the core, in pixels.
    pub glow: f64,
    /// Entropy value of the ray core, in `[0, 1]`.
    pub intensity: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self {
            angle_deg: 45.0,
            length: 60.0,
            width: 16.0,
            glow: 8.0,
            intensity: 1.0,
        }
    }
}

/// Parameters of one synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Blob centre as fractions of `(height, width)`.
    pub center: (f64, f64),
    /// Mean blob radius as a fraction of `min(height, width)`.
    pub radius: f64,
    /// Relative amplitude of the convective lobes on the blob boundary.
    pub lobe_amplitude: f64,
    /// Time phase; advancing it evolves the lobes smoothly.
    pub phase: f64,
    /// Per-pixel noise scale in entropy units. The noise is a sum of four
    /// uniforms (bell-shaped, bounded by twice this value).
    pub noise: f64,
    pub ray: RayConfig,
    pub anomalous: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 64,
            center: (0.5, 0.5),
            radius: 0.36,
            lobe_amplitude: 0.12,
            phase: 0.0,
            noise: 0.02,
            ray: RayConfig::default(),
            anomalous: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn center_px(&self) -> (f64, f64) {
        (
            self.center.0 * self.height as f64,
            self.center.1 * self.width as f64,
        )
    }

    fn radius_px(&self) -> f64 {
        self.radius * self.height.min(self.width) as f64
    }

    /// Start/end points `(row, col)` of the ray axis.
    fn ray_segment(&self) -> ((f64, f64), (f64, f64)) {
        let (cy, cx) = self.center_px();
        let a = self.ray.angle_deg.to_radians();
        let (dy, dx) = (-a.cos(), a.sin());
        let start = 0.4 * self.radius_px();
        let end = start.max(self.ray.length);
        (
            (cy + dy * start, cx + dx * start),
            (cy + dy * end, cx + dx * end),
        )
    }

    /// Inclusive `(row_lo, row_hi, col_lo, col_hi)` box containing every pixel
    /// the ray can touch, clamped to the canvas.
    pub fn ray_bounding_box(&self) -> (usize, usize, usize, usize) {
        let ((y0, x0), (y1, x1)) = self.ray_segment();
        let reach = self.ray.width / 2.0 + self.ray.glow + 1.0;
        let clamp = |v: f64, len: usize| v.max(0.0).min((len - 1) as f64);
        (
            clamp((y0.min(y1) - reach).floor(), self.height) as usize,
            clamp((y0.max(y1) + reach).ceil(), self.height) as usize,
            clamp((x0.min(x1) - reach).floor(), self.width) as usize,
            clamp((x0.max(x1) + reach).ceil(), self.width) as usize,
        )
    }

    /// Entropy contributed by the ray at a pixel centre, `0` outside its reach.
    fn ray_entropy(&self, py: f64, px: f64) -> f64 {
        let ((y0, x0), (y1, x1)) = self.ray_segment();
        let (vy, vx) = (y1 - y0, x1 - x0);
        let len2 = vy * vy + vx * vx;
        let t = if len2 > 0.0 {
            (((py - y0) * vy + (px - x0) * vx) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qy, qx) = (y0 + t * vy, x0 + t * vx);
        let d = ((py - qy).powi(2) + (px - qx).powi(2)).sqrt();
        let core = self.ray.width / 2.0;
        if d <= core {
            self.ray.intensity
        } else if d < core + self.ray.glow {
            self.ray.intensity * (1.0 - (d - core) / self.ray.glow)
        } else {
            0.0
        }
    }

    /// Entropy of the unperturbed field at a pixel centre, in `[0, 1]`.
    fn field_entropy(&self, py: f64, px: f64) -> f64 {
        let (cy, cx) = self.center_px();
        let r0 = self.radius_px();
        let (dy, dx) = (py - cy, px - cx);
        let r = (dy * dy + dx * dx).sqrt();
        let theta = dx.atan2(-dy);
        let ph = self.phase;
        let lobes = 0.55 * (3.0 * theta + ph).sin()
            + 0.30 * (5.0 * theta - 1.3 * ph + 0.7).sin()
            + 0.15 * (8.0 * theta + 2.1 * ph + 1.9).sin();
        let boundary = r0 * (1.0 + self.lobe_amplitude * lobes);
        let core = 0.3 * r0;
        if r < core {
            0.30
        } else if r < boundary {
            let u = (r - core) / (boundary - core).max(1e-9);
            let swirl = (6.0 * theta + 4.0 * u * PI + 0.8 * ph).sin();
            0.55 + 0.15 * swirl + 0.1 * u
        } else {
            let rmax = (self.height.max(self.width) as f64) * 0.75;
            0.12 * (1.0 - (r - boundary) / rmax).max(0.0)
        }
    }
}

/// Linear entropy-to-colour ramp: blue for low entropy through green to red.
pub fn entropy_color(e: f64) -> [u8; 3] {
    let e = e.clamp(0.0, 1.0);
    let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(e), q(1.0 - (2.0 * e - 1.0).abs()), q(1.0 - e)]
}

/// Renders one frame. Returns the image and its label (`Anomalous` iff the
/// config requests the ray).
///
/// The noise stream consumes four draws per pixel in raster order regardless of
/// the anomaly flag, so an anomalous frame and its clean twin differ only
/// inside [`SynthConfig::ray_bounding_box`].
pub fn synth_image(config: &SynthConfig) -> (ImageTensor, Label) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut img = ImageTensor {
        height: config.height,
        width: config.width,
        data: vec![0; config.height * config.width * CHANNELS],
    };
    let bbox = config.ray_bounding_box();
    for r in 0..config.height {
        for c in 0..config.width {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let jitter: f64 = (0..4).map(|_| rng.gen_range(-1.0..=1.0)).sum::<f64>() / 2.0;
            let mut e = config.field_entropy(py, px) + config.noise * jitter;
            if config.anomalous && r >= bbox.0 && r <= bbox.1 && c >= bbox.2 && c <= bbox.3 {
                e = e.max(config.ray_entropy(py, px));
            }
            img.set_pixel(r, c, entropy_color(e));
        }
    }
    let label = if config.anomalous {
        Label::Anomalous
    } else {
        Label::Valid
    };
    (img, label)
}

/// A time-ordered stream of frames: the phase advances by `phase_step` per
/// frame and each frame draws its noise from `mix_seed(base.seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSeries {
    pub base: SynthConfig,
    pub phase_step: f64,
    /// Ray length growth per frame after the anomaly onset, in pixels.
    pub ray_growth: f64,
}

impl Default for SynthSeries {
    fn default() -> Self {
        Self {
            base: SynthConfig::default(),
            phase_step: 0.01,
            ray_growth: 0.05,
        }
    }
}

impl SynthSeries {
    pub fn with_seed(seed: u64) -> Self {
        let mut s = Self::default();
        s.base.seed = seed;
        s
    }

    /// Config for frame `index`. `anomaly_age` is `Some(k)` for the k-th frame
    /// after the anomaly onset.
    pub fn frame_config(&self, index: usize, anomaly_age: Option<usize>) -> SynthConfig {
        let mut c = self.base;
        c.phase = self.base.phase + self.phase_step * index as f64;
        c.seed = mix_seed(self.base.seed, index as u64);
        if let Some(age) = anomaly_age {
            c.anomalous = true;
            c.ray.length += self.ray_growth * age as f64;
        } else {
            c.anomalous = false;
        }
        c
    }

    pub fn frame(&self, index: usize, anomaly_age: Option<usize>) -> (ImageTensor, Label) {
        synth_image(&self.frame_config(index, anomaly_age))
    }

    /// `count_valid` clean frames followed by `count_anomalous` frames with a
    /// persisting ray, in time order.
    pub fn dataset(&self, count_valid: usize, count_anomalous: usize) -> Vec<(ImageTensor, Label)> {
        use rayon::prelude::*;
        (0..count_valid + count_anomalous)
            .into_par_iter()
            .map(|i| self.frame(i, i.checked_sub(count_valid)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory (or absolute).
    pub path: PathBuf,
    pub label: Label,
}

/// A UTF-8 listing of `<relative-path>,<label>` lines, label in `{1,-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ImageError::FileNotFound(path.to_path_buf()),
            _ => ImageError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ImageError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| ImageError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (p, l) = line
                .rsplit_once(',')
                .ok_or_else(|| bad("expected `<path>,<label>`".into()))?;
            let label = match l.trim() {
                "1" | "+1" => Label::Valid,
                "-1" => Label::Anomalous,
                other => return Err(bad(format!("label must be 1 or -1, found `{other}`"))),
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(p.trim()),
                label,
            });
        }
        Ok(Self { root, entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{},{}\n", e.path.display(), e.label.as_i8()));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path).map_err(|e| ImageError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| ImageError::Io {
                path: path.to_path_buf(),
                source: e,
            })
    }

    /// Hex SHA-256 of the manifest text.
    pub fn digest(&self) -> String {
        crate::digest_hex(self.to_text().as_bytes())
    }

    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Writes frames as `frame_#####.png` plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, frames: &[(ImageTensor, Label)]) -> Result<Manifest, ImageError> {
    use rayon::prelude::*;
    std::fs::create_dir_all(dir).map_err(|e| ImageError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let entries = frames
        .par_iter()
        .enumerate()
        .map(|(i, (img, label))| {
            let name = PathBuf::from(format!("frame_{i:05}.png"));
            save_png(img, &dir.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                label: *label,
            })
        })
        .collect::<Result<Vec<_>, ImageError>>()?;
    let manifest = Manifest::new(dir, entries);
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
