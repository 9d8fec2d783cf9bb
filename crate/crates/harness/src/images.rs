//! PNG input and output.

use std::path::{Path, PathBuf};

use asc_core::data::Image;
use asc_core::{AscError, Result};

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| AscError::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| AscError::Shape("image buffer does not match its size".into()))?;
    buf.save(path)
        .map_err(|e| AscError::Data(format!("cannot write image {}: {e}", path.display())))
}

/// PNG files of a folder in name order.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| AscError::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_folder(dir: &Path) -> Result<Vec<Image>> {
    png_files(dir)?.iter().map(|p| load_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use asc_core::data::procedural_corpus;

    #[test]
    fn png_round_trip_is_within_half_a_level() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_corpus(2, 1, 8, 12).remove(0);
        let path = dir.path().join("a.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.height, back.width), (8, 12));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        std::fs::write(dir.path().join("b.txt"), "x").unwrap();
        save_png(&dir.path().join("0.png"), &img).unwrap();
        let files = png_files(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("0.png"));
    }

    #[test]
    fn corrupt_png_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(load_png(&path), Err(AscError::Data(_))));
    }
}
