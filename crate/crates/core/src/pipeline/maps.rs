use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{bitrate_map, Map, QuantMode, SplitModel};
use crate::perturb::{pgd, AttackSpec, LossKind};

/// How a map is turned into pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// `[0, max]` mapped to black..white, written as binary PGM.
    Grayscale,
    /// Signed values around zero: red positive, blue negative, white zero,
    /// written as binary PPM.
    Diverging,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapImage {
    pub map: Map,
    pub mode: RenderMode,
}

fn level(v: f32, max: f32) -> u8 {
    if max > 0.0 {
        ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

impl MapImage {
    pub fn grayscale(map: Map) -> Self {
        MapImage { map, mode: RenderMode::Grayscale }
    }

    pub fn diverging(map: Map) -> Self {
        MapImage { map, mode: RenderMode::Diverging }
    }

    /// Pixel bytes after the header, row-major.
    pub fn pixels(&self) -> Vec<u8> {
        let m = &self.map;
        match self.mode {
            RenderMode::Grayscale => {
                let max = m.max().max(0.0);
                m.values.iter().map(|&v| level(v, max)).collect()
            }
            RenderMode::Diverging => {
                let max = m.values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                m.values
                    .iter()
                    .flat_map(|&v| {
                        let fade = 255 - level(v.abs(), max);
                        if v > 0.0 {
                            [255, fade, fade]
                        } else if v < 0.0 {
                            [fade, fade, 255]
                        } else {
                            [255, 255, 255]
                        }
                    })
                    .collect()
            }
        }
    }

    /// Complete PGM (P5) or PPM (P6) file contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = match self.mode {
            RenderMode::Grayscale => "P5",
            RenderMode::Diverging => "P6",
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.map.width, self.map.height).into_bytes();
        out.extend(self.pixels());
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Channel-summed bits of the rounded latent, one map per image.
pub fn bitrate_maps(model: &SplitModel, x: &Tensor) -> Result<Vec<Map>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xv = g.constant(x);
    let (_, prior) = model.encode_forward(&mut g, &p, xv, QuantMode::Rounded)?;
    let rate = prior.rate(&mut g)?;
    let shape = model.config().latent_shape();
    let per: usize = shape.iter().product();
    g.value(rate.z_bits).chunks_exact(per).map(|bits| bitrate_map(bits, shape)).collect()
}

/// Total variation inside each `patch × patch` tile of one `[C, H, W]`
/// image, summed over channels. Differences across tile borders are not
/// counted.
pub fn tv_map(image: &[f32], [c, h, w]: [usize; 3], patch: usize) -> Result<Map> {
    if patch == 0 || h % patch != 0 || w % patch != 0 || image.len() != c * h * w {
        return Err(Error::shape("tv_map", format!("patch {patch} for image {c}x{h}x{w} ({} values)", image.len())));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = vec![0.0f64; ph * pw];
    for plane in image.chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                let cell = (y / patch) * pw + x / patch;
                if (y + 1) % patch != 0 {
                    out[cell] += (plane[(y + 1) * w + x] - v).abs() as f64;
                }
                if (x + 1) % patch != 0 {
                    out[cell] += (plane[y * w + x + 1] - v).abs() as f64;
                }
            }
        }
    }
    Map::new(ph, pw, out.into_iter().map(|v| v as f32).collect())
}

/// `a - b`, for rendering as a diverging map.
pub fn comparison_map(a: &Map, b: &Map) -> Result<Map> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("comparison_map", format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Map::new(a.height, a.width, a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Per-image Pearson correlation between patch TV and bit rate; the patch
/// is the latent downsampling factor so both maps share a grid.
pub fn tv_bitrate_correlations(model: &SplitModel, x: &Tensor) -> Result<Vec<Option<f64>>> {
    let cfg = model.config();
    let maps = bitrate_maps(model, x)?;
    let per: usize = cfg.input_shape.iter().product();
    x.data()
        .chunks_exact(per)
        .zip(&maps)
        .map(|(img, rate)| Ok(pearson(&tv_map(img, cfg.input_shape, cfg.latent_downsample)?.values, &rate.values)))
        .collect()
}

/// What [`render_maps`] draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    /// Number of leading dataset images.
    pub count: usize,
    /// Radius of the two attacks whose bit-rate maps are compared.
    pub epsilon: f32,
    pub steps: usize,
    pub seed: u64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { count: 8, epsilon: 8.0 / 255.0, steps: 20, seed: 0 }
    }
}

/// Files written by [`render_maps`] and the per-image TV/bit-rate
/// correlations.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSummary {
    pub files: Vec<PathBuf>,
    pub correlations: Vec<Option<f64>>,
}

impl MapSummary {
    /// Mean over images with a defined correlation.
    pub fn mean_correlation(&self) -> Option<f64> {
        let defined: Vec<f64> = self.correlations.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// For each of the first `opts.count` images writes `NNNN_bitrate.pgm`,
/// `NNNN_tv.pgm` and `NNNN_pgde_minus_pgdacc.ppm` into `dir`, plus
/// `correlations.csv` with the per-image Pearson correlation between the
/// two single maps.
pub fn render_maps(model: &SplitModel, data: &Dataset, opts: &MapOptions, dir: &Path) -> Result<MapSummary> {
    std::fs::create_dir_all(dir)?;
    let data = data.take(opts.count);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch(&idx);
    let cfg = model.config();
    let attack = |loss| AttackSpec { steps: opts.steps, seed: opts.seed, ..AttackSpec::new(loss, opts.epsilon) };
    let x_e = pgd(&x, &labels, model, &attack(LossKind::Entropy))?.x;
    let x_acc = pgd(&x, &labels, model, &attack(LossKind::Accuracy))?.x;
    let (clean, maps_e, maps_acc) = (bitrate_maps(model, &x)?, bitrate_maps(model, &x_e)?, bitrate_maps(model, &x_acc)?);
    let per: usize = cfg.input_shape.iter().product();

    let mut files = Vec::new();
    let mut correlations = Vec::new();
    let mut csv = String::from("index,label,pearson\n");
    for i in 0..data.len() {
        let tv = tv_map(&x.data()[i * per..(i + 1) * per], cfg.input_shape, cfg.latent_downsample)?;
        let r = pearson(&tv.values, &clean[i].values);
        let outputs = [
            (format!("{i:04}_bitrate.pgm"), MapImage::grayscale(clean[i].clone())),
            (format!("{i:04}_tv.pgm"), MapImage::grayscale(tv)),
            (format!("{i:04}_pgde_minus_pgdacc.ppm"), MapImage::diverging(comparison_map(&maps_e[i], &maps_acc[i])?)),
        ];
        for (name, img) in outputs {
            let path = dir.join(name);
            img.save(&path)?;
            files.push(path);
        }
        csv.push_str(&format!("{i},{},{}\n", labels[i], r.map_or_else(String::new, |v| v.to_string())));
        correlations.push(r);
    }
    let path = dir.join("correlations.csv");
    std::fs::write(&path, csv)?;
    files.push(path);
    Ok(MapSummary { files, correlations })
}
