use std::fs;
use std::path::{Path, PathBuf};

use super::raster::{read_raster, resize_bilinear_raster, write_pnm, Raster};
use super::train::Model;
use crate::error::Result;
use crate::mm_unet::load_checkpoint;
use crate::ndgrad::Tensor;

/// Files written by [`predict`].
#[derive(Clone, Debug)]
pub struct PredictOutput {
    pub probability_pgm: PathBuf,
    pub overlay_ppm: PathBuf,
    pub probability: Raster,
}

/// Probability map of one RGB raster. Inputs whose sides are not multiples
/// of 32 are resized up to the next multiple and the map is resized back.
pub fn predict_raster(model: &Model, image: &Raster) -> Result<Raster> {
    let rgb = image.to_rgb();
    let up = |n: usize| n.div_ceil(32) * 32;
    let (h, w) = (up(rgb.height), up(rgb.width));
    let work = resize_bilinear_raster(&rgb, h, w);
    let prob = model.predict(&Tensor::new(&[1, 3, h, w], work.data)?)?;
    let map = Raster::new(1, h, w, prob.into_data())?;
    let mut map = resize_bilinear_raster(&map, rgb.height, rgb.width);
    map.data.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(map)
}

/// Green where `p >= 0.5`, the input elsewhere.
pub fn overlay(image: &Raster, prob: &Raster) -> Raster {
    let mut rgb = image.to_rgb();
    let plane = rgb.height * rgb.width;
    for (p, &v) in prob.data.iter().enumerate() {
        if v >= 0.5 {
            rgb.data[p] = 0.0;
            rgb.data[plane + p] = 1.0;
            rgb.data[2 * plane + p] = 0.0;
        }
    }
    rgb
}

/// Writes `<stem>_prob.pgm` (`round(255 p)`) and `<stem>_overlay.ppm` into
/// `out_dir`.
pub fn predict(checkpoint: &Path, image_path: &Path, out_dir: &Path) -> Result<PredictOutput> {
    let params = load_checkpoint(checkpoint)?;
    let image = read_raster(image_path)?;
    let model = Model::from_params(params, (image.height.div_ceil(32) * 32, image.width.div_ceil(32) * 32))?;
    let prob = predict_raster(&model, &image)?;
    fs::create_dir_all(out_dir)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let probability_pgm = out_dir.join(format!("{stem}_prob.pgm"));
    let overlay_ppm = out_dir.join(format!("{stem}_overlay.ppm"));
    write_pnm(&prob, &probability_pgm)?;
    write_pnm(&overlay(&image, &prob), &overlay_ppm)?;
    Ok(PredictOutput {
        probability_pgm,
        overlay_ppm,
        probability: prob,
    })
}
