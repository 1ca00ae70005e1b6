//! PNG frames, segmentation maps and masks.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use lamoco_core::layers::{ClassInfo, ClassTable, SegMap};
use lamoco_core::{Image, Mask};

pub const CLASS_SIDECAR: &str = "classes.json";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    ensure!(img.channels == 3 || img.channels == 1, "cannot store {} channels as PNG", img.channels);
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (k, px) in out.pixels_mut().enumerate() {
        let p = img.pixel(k);
        *px = if img.channels == 3 { image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]) } else { image::Rgb([to_u8(p[0]); 3]) };
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, 3, data))
}

/// Masks as 16-bit grayscale.
pub fn write_mask16(path: &Path, m: &Mask) -> Result<()> {
    let data: Vec<u16> = m.data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(m.width as u32, m.height as u32, data).context("mask buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_mask16(path: &Path) -> Result<Mask> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Mask::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()))
}

pub fn write_mask8(path: &Path, m: &Mask) -> Result<()> {
    let data = m.data.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(m.width as u32, m.height as u32, data).context("mask buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_mask8(path: &Path) -> Result<Mask> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()))
}

/// Segmentation as an 8-bit image of class indices.
pub fn write_labels(path: &Path, height: usize, width: usize, labels: &[usize]) -> Result<()> {
    ensure!(labels.iter().all(|&c| c < 256), "class index above 255");
    let data = labels.iter().map(|&c| c as u8).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, data).context("label buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_seg(path: &Path, table: &ClassTable) -> Result<SegMap> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    let labels: Vec<usize> = img.into_raw().into_iter().map(usize::from).collect();
    if let Some(&bad) = labels.iter().find(|&&c| c >= table.len()) {
        bail!("{}: class index {bad} not in the {}-entry class table", path.display(), table.len());
    }
    Ok(SegMap::from_labels(h as usize, w as usize, table.len(), &labels)?)
}

pub fn write_classes(path: &Path, table: &ClassTable) -> Result<()> {
    let text = serde_json::to_string_pretty(&table.classes)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_classes(path: &Path) -> Result<ClassTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading class table {}", path.display()))?;
    let classes: Vec<ClassInfo> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(!classes.is_empty(), "{}: empty class table", path.display());
    Ok(ClassTable::new(classes))
}

/// Files in `dir` with the given extension, sorted by name.
pub fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn flow_name(t: usize) -> String {
    format!("flow_{t:04}.flo")
}

pub fn seg_name(t: usize) -> String {
    format!("seg_{t:04}.png")
}

pub fn mask_name(t: usize, layer: usize) -> String {
    format!("mask_{t:04}_{layer:02}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(3, 4, (0..12).map(|k| k as f64 / 11.0).collect());
        write_mask16(&p, &m).unwrap();
        let r = read_mask16(&p).unwrap();
        for (a, b) in m.data.iter().zip(&r.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
        let q = dir.path().join("n.png");
        write_mask16(&q, &r).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn seg_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = ClassTable::new(vec![
            ClassInfo { name: "road".into(), stuff: true },
            ClassInfo { name: "car".into(), stuff: false },
        ]);
        let labels = vec![0, 1, 1, 0, 0, 1];
        write_labels(&dir.path().join("s.png"), 2, 3, &labels).unwrap();
        let s = read_seg(&dir.path().join("s.png"), &table).unwrap();
        assert_eq!((0..6).map(|k| s.argmax(k)).collect::<Vec<_>>(), labels);
        write_classes(&dir.path().join(CLASS_SIDECAR), &table).unwrap();
        assert_eq!(read_classes(&dir.path().join(CLASS_SIDECAR)).unwrap(), table);
        let small = ClassTable::new(vec![ClassInfo { name: "road".into(), stuff: true }]);
        assert!(read_seg(&dir.path().join("s.png"), &small).is_err());
    }
}
