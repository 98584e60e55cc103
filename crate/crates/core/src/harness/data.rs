use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::raster::{read_raster, resize_bilinear_raster, resize_nearest_raster, write_pnm, Raster};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` with values exactly 0 or 1.
    pub mask: Tensor<f32>,
    /// Optional `[1, H, W]` binary field of view.
    pub fov: Option<Tensor<f32>>,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Fraction of mask pixels set.
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}

/// Target resolution of a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// 608 x 608.
    Drive,
    /// 704 x 704.
    Stare,
    Square(usize),
    /// Keep every file at its stored size.
    Native,
}

impl Layout {
    pub fn target(&self) -> Option<usize> {
        match self {
            Layout::Drive => Some(608),
            Layout::Stare => Some(704),
            Layout::Square(n) => Some(*n),
            Layout::Native => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "drive" => Ok(Layout::Drive),
            "stare" => Ok(Layout::Stare),
            "native" => Ok(Layout::Native),
            other => other
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .map(Layout::Square)
                .ok_or_else(|| Error::Config(format!("unknown layout {s:?}"))),
        }
    }
}

const EXTENSIONS: [&str; 4] = ["ppm", "pgm", "png", "pnm"];

/// Raster files of a directory keyed by file stem.
fn rasters_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn binarize(r: &Raster) -> Tensor<f32> {
    let g = r.to_gray();
    let data = g.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::from_parts(vec![1, g.height, g.width], data)
}

/// Loads `images/`, `masks/` and optional `fov/` with matching stems.
/// Images are resized bilinearly, masks and fields of view by nearest
/// neighbor and then re-binarized at 0.5.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<Sample>> {
    let images = rasters_by_stem(&root.join("images"))?;
    let masks = rasters_by_stem(&root.join("masks"))?;
    let fov_dir = root.join("fov");
    let fovs = if fov_dir.is_dir() { rasters_by_stem(&fov_dir)? } else { BTreeMap::new() };
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::Ingestion(format!("no mask for image {stem:?}")))?;
        let img = read_raster(path)?.to_rgb();
        let (h, w) = layout.target().map_or((img.height, img.width), |n| (n, n));
        let img = resize_bilinear_raster(&img, h, w);
        let mask = binarize(&resize_nearest_raster(&read_raster(mask_path)?, h, w));
        let fov = match fovs.get(stem) {
            Some(p) => Some(binarize(&resize_nearest_raster(&read_raster(p)?, h, w))),
            None => None,
        };
        samples.push(Sample {
            image: Tensor::from_parts(vec![3, h, w], img.data),
            mask,
            fov,
            id: stem.clone(),
        });
    }
    Ok(samples)
}

/// Writes samples as `images/<id>.ppm`, `masks/<id>.pgm` and `fov/<id>.pgm`.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for s in samples {
        let (h, w) = (s.height(), s.width());
        write_pnm(&Raster::new(3, h, w, s.image.data().to_vec())?, &root.join("images").join(format!("{}.ppm", s.id)))?;
        write_pnm(&Raster::new(1, h, w, s.mask.data().to_vec())?, &root.join("masks").join(format!("{}.pgm", s.id)))?;
        if let Some(f) = &s.fov {
            fs::create_dir_all(root.join("fov"))?;
            write_pnm(&Raster::new(1, h, w, f.data().to_vec())?, &root.join("fov").join(format!("{}.pgm", s.id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, sub: &str, name: &str, r: &Raster) {
        fs::create_dir_all(dir.join(sub)).unwrap();
        write_pnm(r, &dir.join(sub).join(name)).unwrap();
    }

    #[test]
    fn layouts() {
        assert_eq!(Layout::Drive.target(), Some(608));
        assert_eq!(Layout::Stare.target(), Some(704));
        assert_eq!(Layout::parse("64").unwrap(), Layout::Square(64));
        assert!(Layout::parse("huge").is_err());
    }

    #[test]
    fn missing_mask_names_the_stem() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::new(3, 4, 4, vec![0.5; 48]).unwrap();
        write(dir.path(), "images", "eye01.ppm", &img);
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        match load_dataset(dir.path(), Layout::Native) {
            Err(Error::Ingestion(m)) => assert!(m.contains("eye01")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resize_and_binarize() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::new(1, 4, 4, (0..16).map(|v| v as f32 / 15.0).collect()).unwrap();
        let mask = Raster::new(1, 4, 4, (0..16).map(|v| if v % 3 == 0 { 1.0 } else { 0.2 }).collect()).unwrap();
        write(dir.path(), "images", "a.pgm", &img);
        write(dir.path(), "masks", "a.pgm", &mask);
        write(dir.path(), "fov", "a.pgm", &Raster::new(1, 4, 4, vec![1.0; 16]).unwrap());
        let s = &load_dataset(dir.path(), Layout::Square(8)).unwrap()[0];
        assert_eq!(s.image.shape(), &[3, 8, 8]);
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.fov.is_some());
        let native = &load_dataset(dir.path(), Layout::Native).unwrap()[0];
        assert_eq!(native.image.shape(), &[3, 4, 4]);
        assert_eq!(&native.image.data()[..16], &native.image.data()[16..32]);
    }
}
