//! Image ingestion, the synthetic pedestrian generator and global augmentation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3};
use rand::Rng as _;

use crate::rng::{mix, seeded, Rng};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;
pub const SYNTH_HEIGHT: usize = 256;
pub const SYNTH_WIDTH: usize = 128;

/// Lower bound of the random-crop area fraction used by [`augment_global`].
pub const MIN_CROP_SCALE: f64 = 0.8;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// An RGB image in `[0, 1]`, stored height × width × channel, with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Array3<f64>,
    /// `-1` when unknown (pre-training data).
    pub identity_id: i64,
    pub camera_id: i64,
    pub source_path: Option<PathBuf>,
}

impl ImageRecord {
    pub fn new(pixels: Array3<f64>, identity_id: i64, camera_id: i64) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::arg(format!("empty image {h}x{w}")));
        }
        if c != CHANNELS {
            return Err(Error::arg(format!("expected {CHANNELS} channels, got {c}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            pixels,
            identity_id,
            camera_id,
            source_path: None,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    fn with_pixels(&self, pixels: Array3<f64>) -> Self {
        Self {
            pixels,
            identity_id: self.identity_id,
            camera_id: self.camera_id,
            source_path: self.source_path.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::arg(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Parses `<identity>_c<camera>_<anything>.<ext>` into `(identity, camera)`.
pub fn parse_label_filename(name: &str) -> Option<(i64, i64)> {
    let stem = match name.rsplit_once('.') {
        Some((stem, _)) => stem,
        None => name,
    };
    let mut parts = stem.split('_');
    let identity = parts.next()?.parse::<i64>().ok()?;
    let camera_part = parts.next()?.strip_prefix('c')?;
    let digits: String = camera_part
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let camera = digits.parse::<i64>().ok()?;
    Some((identity, camera))
}

pub fn format_label_filename(identity: i64, camera: i64, tag: &str, ext: &str) -> String {
    format!("{identity:04}_c{camera}_{tag}.{ext}")
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Loads every decodable image of `dir` in lexicographic file-name order.
///
/// Files that fail to decode are skipped with a warning. Query and gallery
/// splits also skip files whose names do not carry identity/camera labels;
/// pre-training files without labels get `-1` for both.
pub fn load_image_folder(dir: &Path, split: Split) -> Result<DatasetManifest> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let labels = parse_label_filename(name);
        let (identity_id, camera_id) = match (labels, split) {
            (Some(l), _) => l,
            (None, Split::Pretrain) => (-1, -1),
            (None, _) => {
                log::warn!(
                    "{}: no identity/camera in file name, skipped",
                    path.display()
                );
                continue;
            }
        };
        match read_image(&path) {
            Ok(pixels) => records.push(ImageRecord {
                pixels,
                identity_id,
                camera_id,
                source_path: Some(path),
            }),
            Err(err) => log::warn!("{err}, skipped"),
        }
    }
    if records.is_empty() {
        return Err(Error::NoRecords(dir.to_path_buf()));
    }
    Ok(DatasetManifest { records, split })
}

pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let pixels = Array3::from_shape_vec((h as usize, w as usize, CHANNELS), raw)
        .expect("rgb buffer matches its dimensions")
        .mapv(|v| f64::from(v) / 255.0);
    Ok(pixels)
}

pub fn to_rgb8(pixels: ArrayView3<f64>) -> image::RgbImage {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches")
}

pub fn write_png(pixels: ArrayView3<f64>, path: &Path) -> Result<()> {
    to_rgb8(pixels)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize with half-pixel centres and clamped borders.
///
/// Resizing to the input's own size is the identity.
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (in_h, in_w, c) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_h, in_h);
    let cols = axis(out_w, in_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn hflip(src: ArrayView3<f64>) -> Array3<f64> {
    src.slice(s![.., ..;-1, ..]).to_owned()
}

/// Parameters of one draw of the global augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalAugment {
    pub flip: bool,
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

impl GlobalAugment {
    pub fn sample(height: usize, width: usize, rng: &mut Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let scale: f64 = rng.random_range(MIN_CROP_SCALE..=1.0);
        let side = scale.sqrt();
        let crop_height = ((height as f64 * side).round() as usize).clamp(1, height);
        let crop_width = ((width as f64 * side).round() as usize).clamp(1, width);
        let crop_top = rng.random_range(0..=height - crop_height);
        let crop_left = rng.random_range(0..=width - crop_width);
        Self {
            flip,
            crop_top,
            crop_left,
            crop_height,
            crop_width,
        }
    }

    pub fn apply(&self, image: &ImageRecord) -> ImageRecord {
        let (h, w, _) = image.pixels.dim();
        let flipped;
        let src = if self.flip {
            flipped = hflip(image.pixels.view());
            flipped.view()
        } else {
            image.pixels.view()
        };
        let crop = src.slice(s![
            self.crop_top..self.crop_top + self.crop_height,
            self.crop_left..self.crop_left + self.crop_width,
            ..
        ]);
        image.with_pixels(resize_bilinear(crop, h, w))
    }
}

/// Random horizontal flip (p = 0.5) followed by a random crop covering
/// `[0.8, 1.0]` of the area at the original aspect ratio, resized back.
pub fn augment_global(image: &ImageRecord, rng: &mut Rng) -> ImageRecord {
    GlobalAugment::sample(image.height(), image.width(), rng).apply(image)
}

/// Fixed appearance of one synthetic identity.
#[derive(Clone, Debug)]
struct Outfit {
    skin: [f64; 3],
    hair: [f64; 3],
    shirt: [f64; 3],
    shirt_alt: [f64; 3],
    pants: [f64; 3],
    shoes: [f64; 3],
    pattern: u8,
    bag: Option<[f64; 3]>,
    hair_long: bool,
}

fn color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

impl Outfit {
    fn for_identity(identity_id: i64) -> Self {
        let mut rng = seeded(mix(&[0x1d, identity_id as u64]));
        let skins = [
            [0.95, 0.80, 0.69],
            [0.87, 0.68, 0.52],
            [0.70, 0.50, 0.36],
            [0.45, 0.31, 0.22],
        ];
        Self {
            skin: skins[rng.random_range(0..skins.len())],
            hair: color(&mut rng, 0.02, 0.45),
            shirt: color(&mut rng, 0.05, 0.95),
            shirt_alt: color(&mut rng, 0.05, 0.95),
            pants: color(&mut rng, 0.05, 0.8),
            shoes: color(&mut rng, 0.0, 0.5),
            pattern: rng.random_range(0..4),
            bag: rng.random_bool(0.5).then(|| color(&mut rng, 0.1, 0.9)),
            hair_long: rng.random_bool(0.5),
        }
    }

    /// Colour of the body at canonical coordinates `(v, u)` (row, column in a
    /// 256×128 frame), or `None` for background.
    fn paint(&self, v: f64, u: f64) -> Option<[f64; 3]> {
        let shade = |c: [f64; 3], k: f64| c.map(|x| x * k);
        // head
        let (dy, dx) = ((v - 36.0) / 19.0, (u - 64.0) / 14.0);
        if dy * dy + dx * dx <= 1.0 {
            let hair_line = if self.hair_long { 34.0 } else { 28.0 };
            let c = if v < hair_line || (self.hair_long && dx.abs() > 0.75) {
                self.hair
            } else {
                self.skin
            };
            return Some(shade(c, 1.0 - 0.2 * dx * dx));
        }
        // bag on the right side, drawn in front of the arm
        if let Some(bag) = self.bag {
            if (90.0..114.0).contains(&u) && (100.0..142.0).contains(&v) {
                return Some(shade(bag, 0.9 + 0.1 * ((v - 100.0) / 42.0)));
            }
        }
        // neck
        if (56.0..72.0).contains(&u) && (52.0..58.0).contains(&v) {
            return Some(self.skin);
        }
        // torso and arms
        let in_torso = (36.0..92.0).contains(&u) && (58.0..142.0).contains(&v);
        let in_arm =
            ((25.0..36.0).contains(&u) || (92.0..103.0).contains(&u)) && (60.0..134.0).contains(&v);
        if in_torso || in_arm {
            let base = match self.pattern {
                1 if ((v - 58.0) / 14.0).floor() as i64 % 2 == 1 => self.shirt_alt,
                2 if u >= 64.0 => self.shirt_alt,
                3 if v >= 100.0 => self.shirt_alt,
                _ => self.shirt,
            };
            if in_arm && v >= 124.0 {
                return Some(self.skin);
            }
            let rel = (u - 64.0) / 40.0;
            let k = if in_arm { 0.8 } else { 1.0 - 0.25 * rel * rel };
            return Some(shade(base, k));
        }
        // legs
        let in_leg =
            ((40.0..62.0).contains(&u) || (66.0..88.0).contains(&u)) && (142.0..232.0).contains(&v);
        if in_leg {
            let centre = if u < 64.0 { 51.0 } else { 77.0 };
            let rel = (u - centre) / 11.0;
            return Some(shade(self.pants, 1.0 - 0.3 * rel * rel));
        }
        if ((38.0..62.0).contains(&u) || (66.0..90.0).contains(&u)) && (232.0..244.0).contains(&v) {
            return Some(self.shoes);
        }
        None
    }
}

/// Procedural 256×128 pedestrian.
///
/// Colours, clothing pattern, hair and bag are keyed on `identity_id`; the
/// background, placement, scale and illumination are keyed on `seed`.
pub fn generate_synthetic_person(seed: u64, identity_id: i64) -> ImageRecord {
    let outfit = Outfit::for_identity(identity_id);
    let mut rng = seeded(mix(&[0x5a, seed, identity_id as u64]));
    let shift_y: f64 = rng.random_range(-8.0..8.0);
    let shift_x: f64 = rng.random_range(-6.0..6.0);
    let scale: f64 = rng.random_range(0.93..1.07);
    let gain: f64 = rng.random_range(0.9..1.1);
    let grey: f64 = rng.random_range(0.35..0.65);
    let tint = color(&mut rng, -0.06, 0.06);
    let bottom_grey: f64 = grey + rng.random_range(-0.15..0.15);

    let (h, w) = (SYNTH_HEIGHT, SYNTH_WIDTH);
    let mut pixels = Array3::zeros((h, w, CHANNELS));
    for y in 0..h {
        let t = y as f64 / (h - 1) as f64;
        let v = (y as f64 - shift_y - 128.0) / scale + 128.0;
        let bg_level = grey * (1.0 - t) + bottom_grey * t;
        for x in 0..w {
            let u = (x as f64 - shift_x - 64.0) / scale + 64.0;
            let rgb = match outfit.paint(v, u) {
                Some(c) => c.map(|ch| ch * gain),
                None => [bg_level + tint[0], bg_level + tint[1], bg_level + tint[2]],
            };
            for (ch, value) in rgb.iter().enumerate() {
                pixels[[y, x, ch]] = value.clamp(0.0, 1.0);
            }
        }
    }
    ImageRecord {
        pixels,
        identity_id,
        camera_id: 0,
        source_path: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mean_abs_distance(a: &ImageRecord, b: &ImageRecord) -> f64 {
        (&a.pixels - &b.pixels).mapv(f64::abs).mean().unwrap()
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_label_filename("0002_c3_000.png"), Some((2, 3)));
        assert_eq!(
            parse_label_filename("0001_c1s1_001051_00.jpg"),
            Some((1, 1))
        );
        assert_eq!(parse_label_filename("-1_c5_x.jpg"), Some((-1, 5)));
        assert_eq!(parse_label_filename("person.png"), None);
        assert_eq!(parse_label_filename("12_x3_a.png"), None);
    }

    #[test]
    fn label_format_roundtrip() {
        let name = format_label_filename(2, 3, "000", "png");
        assert_eq!(name, "0002_c3_000.png");
        for (id, cam) in [(0, 0), (17, 6), (1501, 12)] {
            let name = format_label_filename(id, cam, "7", "jpg");
            assert_eq!(parse_label_filename(&name), Some((id, cam)));
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = generate_synthetic_person(5, 3);
        let b = generate_synthetic_person(5, 3);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.pixels.dim(), (256, 128, 3));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_identities_differ() {
        let a = generate_synthetic_person(9, 0);
        let b = generate_synthetic_person(9, 1);
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn synthetic_identity_signal() {
        let ids = 10i64;
        let per_id = 10u64;
        let images: Vec<ImageRecord> = (0..ids)
            .flat_map(|id| {
                (0..per_id).map(move |s| generate_synthetic_person(1000 + s * 31 + id as u64, id))
            })
            .collect();
        let (mut same, mut same_n, mut diff, mut diff_n) = (0.0, 0, 0.0, 0);
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                let d = mean_abs_distance(&images[i], &images[j]);
                if images[i].identity_id == images[j].identity_id {
                    same += d;
                    same_n += 1;
                } else {
                    diff += d;
                    diff_n += 1;
                }
            }
        }
        let (same, diff) = (same / same_n as f64, diff / diff_n as f64);
        assert!(same < diff, "same-identity {same} vs different {diff}");
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = generate_synthetic_person(1, 1);
        let twice = hflip(hflip(img.pixels.view()).view());
        assert_eq!(twice, img.pixels);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = generate_synthetic_person(2, 4);
        let aug = GlobalAugment {
            flip: false,
            crop_top: 0,
            crop_left: 0,
            crop_height: 256,
            crop_width: 128,
        };
        assert_eq!(aug.apply(&img).pixels, img.pixels);
    }

    #[test]
    fn augment_is_seeded_and_shape_preserving() {
        let img = generate_synthetic_person(3, 2);
        let a = augment_global(&img, &mut seeded(11));
        let b = augment_global(&img, &mut seeded(11));
        assert_eq!(a.pixels, b.pixels);
        for seed in 0..20 {
            let out = augment_global(&img, &mut seeded(seed));
            assert_eq!(out.pixels.dim(), img.pixels.dim());
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sampled_crop_stays_in_range() {
        let mut rng = seeded(4);
        for _ in 0..500 {
            let a = GlobalAugment::sample(256, 128, &mut rng);
            let area = (a.crop_height * a.crop_width) as f64 / (256.0 * 128.0);
            assert!(area > 0.79 && area <= 1.0, "{area}");
            assert!(a.crop_top + a.crop_height <= 256);
            assert!(a.crop_left + a.crop_width <= 128);
        }
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let src = Array3::from_elem((7, 5, 3), 0.25);
        let out = resize_bilinear(src.view(), 13, 9);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn record_validation() {
        assert!(ImageRecord::new(Array3::zeros((2, 2, 1)), 0, 0).is_err());
        assert!(ImageRecord::new(Array3::from_elem((2, 2, 3), 1.5), 0, 0).is_err());
        assert!(ImageRecord::new(Array3::zeros((2, 2, 3)), 0, 0).is_ok());
    }
}
