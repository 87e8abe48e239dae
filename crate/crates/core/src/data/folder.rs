use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use log::warn;
use rayon::prelude::*;

use super::{Dataset, ImageSample, ImageShape};
use crate::error::{Result, RgfsError};
use crate::tensor::Tensor3;

/// Files that were present but could not be decoded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl LoadReport {
    pub fn skipped_count(&self) -> usize {
        self.skipped.len()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| RgfsError::io(dir, e))? {
        let entry = entry.map_err(|e| RgfsError::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, shape: ImageShape) -> std::result::Result<Tensor3, String> {
    let img = ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    to_tensor(&img, shape)
}

/// Converts a decoded image to a `[0, 1]` tensor of `shape`, resizing
/// bilinearly when the spatial size differs.
pub(crate) fn to_tensor(img: &DynamicImage, shape: ImageShape) -> std::result::Result<Tensor3, String> {
    let (h, w) = (shape.height as u32, shape.width as u32);
    match shape.channels {
        3 => {
            let mut buf = img.to_rgb32f();
            if buf.dimensions() != (w, h) {
                buf = imageops::resize(&buf, w, h, FilterType::Triangle);
            }
            let mut t = Tensor3::zeros(3, shape.height, shape.width);
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    t.set(c, y as usize, x as usize, (p.0[c] as f64).clamp(0.0, 1.0));
                }
            }
            Ok(t)
        }
        1 => {
            let mut buf: ImageBuffer<Luma<f32>, Vec<f32>> = img.to_luma32f();
            if buf.dimensions() != (w, h) {
                buf = imageops::resize(&buf, w, h, FilterType::Triangle);
            }
            let mut t = Tensor3::zeros(1, shape.height, shape.width);
            for (x, y, p) in buf.enumerate_pixels() {
                t.set(0, y as usize, x as usize, (p.0[0] as f64).clamp(0.0, 1.0));
            }
            Ok(t)
        }
        c => Err(format!("unsupported channel count {c} (expected 1 or 3)")),
    }
}

/// Loads `root/<class_name>/<image>` into a dataset of `target_shape`.
///
/// Class ids follow lexicographic directory order. Files that fail to decode
/// are skipped and listed in the returned report; a class left without any
/// usable image is an error.
pub fn load_image_folder(root: &Path, target_shape: ImageShape) -> Result<(Dataset, LoadReport)> {
    if !root.is_dir() {
        return Err(RgfsError::Config(format!(
            "dataset path {} is not a directory",
            root.display()
        )));
    }
    if target_shape.channels != 1 && target_shape.channels != 3 {
        return Err(RgfsError::Config(format!(
            "unsupported channel count {}",
            target_shape.channels
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(RgfsError::Data(format!(
            "no classes found under {}",
            root.display()
        )));
    }

    let mut jobs = Vec::new();
    let mut names = Vec::with_capacity(class_dirs.len());
    for (class_id, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        for file in sorted_entries(dir)? {
            if file.is_file() {
                jobs.push((class_id, file));
            }
        }
    }

    // par_iter + collect preserves the sequential order.
    let decoded: Vec<_> = jobs
        .par_iter()
        .map(|(class_id, path)| (*class_id, path, decode(path, target_shape)))
        .collect();

    let mut report = LoadReport::default();
    let mut samples = Vec::with_capacity(decoded.len());
    for (class_id, path, res) in decoded {
        match res {
            Ok(pixels) => {
                let rel = path.strip_prefix(root).unwrap_or(path);
                samples.push(ImageSample {
                    pixels,
                    class_id,
                    source_id: rel.to_string_lossy().into_owned(),
                });
            }
            Err(msg) => {
                warn!("skipping {}: {}", path.display(), msg);
                report.skipped.push((path.clone(), msg));
            }
        }
    }

    let dataset = Dataset::from_samples(target_shape, names, samples)?;
    if let Some(empty) = dataset.manifest.classes.iter().find(|c| c.count == 0) {
        return Err(RgfsError::Data(format!(
            "class `{}` has no usable images",
            empty.name
        )));
    }
    Ok((dataset, report))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a tensor as an 8-bit PNG (1 or 3 channels).
pub fn save_png(t: &Tensor3, path: &Path) -> Result<()> {
    let (h, w) = (t.height as u32, t.width as u32);
    let res = match t.channels {
        3 => ImageBuffer::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(t.get(0, y, x)), to_u8(t.get(1, y, x)), to_u8(t.get(2, y, x))])
        })
        .save(path),
        1 => ImageBuffer::from_fn(w, h, |x, y| Luma([to_u8(t.get(0, y as usize, x as usize))]))
            .save(path),
        c => {
            return Err(RgfsError::Config(format!(
                "cannot write a {c}-channel image"
            )))
        }
    };
    res.map_err(|source| RgfsError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Materialises a dataset as `root/<class_name>/<index>.png`.
pub fn write_image_folder(dataset: &Dataset, root: &Path) -> Result<usize> {
    let mut written = 0;
    for class in &dataset.manifest.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir).map_err(|e| RgfsError::io(&dir, e))?;
        for (n, &i) in dataset.indices_of(class.id).iter().enumerate() {
            save_png(&dataset.sample(i).pixels, &dir.join(format!("{n:05}.png")))?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        ImageBuffer::from_fn(w, h, |x, y| Rgb(f(x, y))).save(path).unwrap();
    }

    #[test]
    fn empty_root_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_image_folder(dir.path(), ImageShape::new(8, 8, 3)).unwrap_err();
        assert!(err.to_string().contains("no classes found"), "{err}");
    }

    #[test]
    fn missing_root_is_config_error() {
        let err = load_image_folder(Path::new("/nonexistent/rgfs"), ImageShape::default()).unwrap_err();
        assert!(matches!(err, RgfsError::Config(_)));
    }

    #[test]
    fn corrupt_file_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("river");
        fs::create_dir(&class).unwrap();
        for i in 0..3 {
            write_rgb(&class.join(format!("{i}.png")), 8, 8, |x, y| [x as u8 * 30, y as u8 * 30, 7]);
        }
        fs::write(class.join("broken.png"), b"not a png at all").unwrap();

        // independent decode pass over the folder
        let accepted = fs::read_dir(&class)
            .unwrap()
            .filter(|e| image::open(e.as_ref().unwrap().path()).is_ok())
            .count();

        let (ds, report) = load_image_folder(dir.path(), ImageShape::new(8, 8, 3)).unwrap();
        assert_eq!(ds.manifest.classes[0].count, accepted);
        assert_eq!(accepted, 3);
        assert_eq!(report.skipped_count(), 1);
    }

    #[test]
    fn class_without_images_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        write_rgb(&dir.path().join("a/0.png"), 4, 4, |_, _| [1, 2, 3]);
        fs::write(dir.path().join("b/0.png"), b"junk").unwrap();
        let err = load_image_folder(dir.path(), ImageShape::new(4, 4, 3)).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn lexicographic_class_ids_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["zeta", "alpha", "mid"] {
            let d = dir.path().join(name);
            fs::create_dir(&d).unwrap();
            write_rgb(&d.join("x.png"), 32, 16, |x, _| [(x * 8) as u8, 0, 255]);
        }
        let (ds, _) = load_image_folder(dir.path(), ImageShape::new(8, 8, 3)).unwrap();
        let names: Vec<_> = ds.manifest.classes.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["alpha", "mid", "zeta"]);
        let s = ds.sample(0);
        assert_eq!(s.shape(), ImageShape::new(8, 8, 3));
        assert!((s.pixels.get(2, 3, 3) - 1.0).abs() < 1e-6);
        assert!(s.pixels.get(0, 0, 7) > s.pixels.get(0, 0, 0));
    }

    #[test]
    fn same_size_load_equals_plain_decode() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("c");
        fs::create_dir(&d).unwrap();
        let f = |x: u32, y: u32| [(x * 37 % 256) as u8, (y * 91 % 256) as u8, ((x + y) * 13 % 256) as u8];
        write_rgb(&d.join("a.png"), 16, 16, f);
        let (ds, _) = load_image_folder(dir.path(), ImageShape::new(16, 16, 3)).unwrap();
        let t = &ds.sample(0).pixels;
        for y in 0..16 {
            for x in 0..16 {
                let px = f(x, y);
                for c in 0..3 {
                    let expect = px[c] as f64 / 255.0;
                    assert!((t.get(c, y as usize, x as usize) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn jpeg_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("c");
        fs::create_dir(&d).unwrap();
        write_rgb(&d.join("a.jpg"), 8, 8, |_, _| [200, 100, 50]);
        let (ds, report) = load_image_folder(dir.path(), ImageShape::new(8, 8, 3)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.skipped_count(), 0);
    }
}
