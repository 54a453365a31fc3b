//! Dataset persistence: PNG images, single-channel mask PNGs, and a manifest
//! CSV (`path,identity,camera,domain,mask_path`). Ingestion accepts either
//! the manifest or a directory of conventionally named files
//! (`<id>_c<cam>_<frame>.<ext>`).

use crate::data::{Domain, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "path,identity,camera,domain,mask_path";

/// [-1,1] float image (3,H,W) to 8-bit RGB.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Shape(format!("expected (3,H,W), got {:?}", t.shape()))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = ((d[ch * h * w + y * w + x] + 1.0) / 2.0 * 255.0).round();
                buf[(y * w + x) * 3 + ch] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] =
                px.0[ch] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn mask_to_luma8(t: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Shape(format!("expected (1,H,W), got {:?}", t.shape()))),
    };
    if c != 1 {
        return Err(Error::Shape(format!("expected 1 channel mask, got {c}")));
    }
    let buf: Vec<u8> = t.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let _ = (h, w);
    GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))
}

pub fn luma8_to_mask(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> =
        img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Write both domains under `root` with a shared manifest:
/// `source/`, `target/` for images and `source_masks/`, `target_masks/` for
/// ground truth. Returns the manifest path.
pub fn write_synthetic_dataset(
    root: &Path,
    source: &[LabeledImage],
    target: &[LabeledImage],
) -> Result<PathBuf> {
    let mut rows = vec![MANIFEST_HEADER.to_string()];
    for (domain_dir, images) in [("source", source), ("target", target)] {
        let img_dir = root.join(domain_dir);
        let mask_dir = root.join(format!("{domain_dir}_masks"));
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for img in images {
            let name = img
                .path
                .as_deref()
                .and_then(|p| Path::new(p).file_name().map(|f| f.to_string_lossy().into_owned()))
                .ok_or_else(|| Error::Data("synthetic image is missing its file name".into()))?;
            let img_path = img_dir.join(&name);
            tensor_to_rgb8(&img.image)?
                .save(&img_path)
                .map_err(|e| Error::Image { path: img_path.clone(), source: e })?;
            let mask_rel = match &img.gt_mask {
                Some(mask) => {
                    let mask_path = mask_dir.join(&name);
                    mask_to_luma8(mask)?
                        .save(&mask_path)
                        .map_err(|e| Error::Image { path: mask_path.clone(), source: e })?;
                    format!("{domain_dir}_masks/{name}")
                }
                None => String::new(),
            };
            rows.push(format!(
                "{domain_dir}/{name},{},{},{},{mask_rel}",
                img.identity, img.camera, img.domain
            ));
        }
    }
    let manifest = root.join(MANIFEST_NAME);
    fs::write(&manifest, rows.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        other => Err(Error::Data(format!("unknown domain `{other}` in manifest"))),
    }
}

fn load_rgb(path: &Path, resize_to: Option<(usize, usize)>) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .into_rgb8();
    let img = match resize_to {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    Ok(rgb8_to_tensor(&img))
}

/// Load a dataset from its manifest. Relative paths resolve against the
/// manifest's directory. Masks are loaded when a `mask_path` is present.
pub fn load_manifest(manifest: &Path, resize_to: Option<(usize, usize)>) -> Result<Vec<LabeledImage>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != MANIFEST_HEADER {
                return Err(Error::Data(format!(
                    "manifest header mismatch: expected `{MANIFEST_HEADER}`, found `{line}`"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!(
                "manifest line {} has {} fields, expected 5",
                lineno + 1,
                fields.len()
            )));
        }
        let identity: u32 = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad identity", lineno + 1)))?;
        let camera: u32 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad camera", lineno + 1)))?;
        let domain = parse_domain(fields[3])?;
        let image = load_rgb(&base.join(fields[0]), resize_to)?;
        let gt_mask = if fields[4].is_empty() {
            None
        } else {
            let path = base.join(fields[4]);
            let img = image::open(&path)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?
                .into_luma8();
            Some(luma8_to_mask(&img))
        };
        out.push(LabeledImage {
            image,
            identity,
            camera,
            domain,
            gt_mask,
            path: Some(fields[0].to_string()),
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no images", manifest.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum DirectoryLayout {
    /// `<id>_c<cam>_<anything>.<ext>` file names.
    FilenameConvention,
    /// Manifest file inside the directory.
    Manifest(PathBuf),
}

#[derive(Debug)]
pub struct LoadReport {
    pub images: Vec<LabeledImage>,
    /// Files skipped because their names did not parse.
    pub skipped: usize,
}

/// Parse `0001_c1_000151.png` style names into (identity, camera).
pub fn parse_conventional_name(name: &str) -> Option<(u32, u32)> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let identity: u32 = parts.next()?.parse().ok()?;
    let cam_part = parts.next()?;
    let camera: u32 = cam_part.strip_prefix('c')?.parse().ok()?;
    Some((identity, camera))
}

/// Ingest a directory of re-ID images. Unparseable names are skipped and
/// counted; a directory yielding no images is an error.
pub fn load_reid_directory(
    dir: &Path,
    layout: DirectoryLayout,
    domain: Domain,
    resize_to: Option<(usize, usize)>,
) -> Result<LoadReport> {
    match layout {
        DirectoryLayout::Manifest(manifest) => {
            let images = load_manifest(&manifest, resize_to)?;
            Ok(LoadReport { images, skipped: 0 })
        }
        DirectoryLayout::FilenameConvention => {
            let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            let mut images = Vec::new();
            let mut skipped = 0usize;
            for name in names {
                let ext = Path::new(&name)
                    .extension()
                    .map(|e| e.to_string_lossy().to_lowercase());
                let is_image = matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"));
                match (is_image, parse_conventional_name(&name)) {
                    (true, Some((identity, camera))) => {
                        let path = dir.join(&name);
                        images.push(LabeledImage {
                            image: load_rgb(&path, resize_to)?,
                            identity,
                            camera,
                            domain,
                            gt_mask: None,
                            path: Some(name),
                        });
                    }
                    _ => skipped += 1,
                }
            }
            if images.is_empty() {
                return Err(Error::Data(format!(
                    "directory {} contains no readable re-ID images",
                    dir.display()
                )));
            }
            Ok(LoadReport { images, skipped })
        }
    }
}
