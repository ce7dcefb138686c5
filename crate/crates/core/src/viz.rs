//! Clustering maps: which center every point joined, rendered to PPM.

use std::path::Path;

use crate::engine::Scalar;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::points::{GridMeta, Image};

/// Assignments of one head of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub stage: usize,
    pub block: usize,
    pub head: usize,
    pub grid: GridMeta,
    pub regions: usize,
    pub local_centers: usize,
    /// Region-local center of every point, grid order.
    pub assignment: Vec<usize>,
    /// Region of every point, grid order.
    pub region_of_point: Vec<usize>,
}

impl ClusterMap {
    pub fn file_name(&self) -> String {
        format!("stage{}_block{}_head{}.ppm", self.stage, self.block, self.head)
    }

    /// Global color slot of point `i`.
    fn slot(&self, i: usize) -> usize {
        self.region_of_point[i] * self.local_centers + self.assignment[i]
    }
}

/// One map per head per block per stage, in execution order.
pub fn capture_cluster_maps<T: Scalar>(model: &Model<T>, image: &Image) -> Result<Vec<ClusterMap>> {
    let (_, trace) = model.forward_traced(&[image])?;
    let mut out = Vec::new();
    for t in trace {
        let r = t.record;
        for (head, assignment) in r.assignments[0].iter().enumerate() {
            out.push(ClusterMap {
                stage: t.stage,
                block: t.block,
                head,
                grid: r.grid,
                regions: r.regions,
                local_centers: r.local_centers,
                assignment: assignment.clone(),
                region_of_point: r.region_of_point.clone(),
            });
        }
    }
    Ok(out)
}

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// `n` colors stepping hue by the golden ratio from a seeded start.
pub fn palette(n: usize, seed: u64) -> Vec<[u8; 3]> {
    const PHI: f64 = 0.618_033_988_749_895;
    let start = (seed as f64 * PHI).fract();
    (0..n).map(|i| hsv_to_rgb(start + i as f64 * PHI, 1.0, 1.0)).collect()
}

/// Colors every point by its (region, center) pair and upscales by
/// nearest neighbor; `overlay` blends in a source image with weight `alpha`.
pub fn render_cluster_map(
    cm: &ClusterMap,
    upscale: usize,
    palette_seed: u64,
    overlay: Option<(&Image, f32)>,
) -> Result<RgbImage> {
    if upscale == 0 {
        return Err(Error::Domain("upscale must be positive".into()));
    }
    if cm.assignment.len() != cm.grid.len() || cm.region_of_point.len() != cm.grid.len() {
        return Err(Error::Dimension(format!(
            "map of {} points on a {} grid",
            cm.assignment.len(),
            cm.grid
        )));
    }
    let colors = palette(cm.regions * cm.local_centers, palette_seed);
    let (h, w) = (cm.grid.height * upscale, cm.grid.width * upscale);
    let mut data = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let i = (row / upscale) * cm.grid.width + col / upscale;
            let slot = cm.slot(i);
            let mut c = *colors
                .get(slot)
                .ok_or_else(|| Error::Index(format!("center slot {slot} out of range")))?;
            if let Some((img, alpha)) = overlay {
                let src = img.pixel(row * img.height / h, col * img.width / w);
                for (ch, s) in c.iter_mut().zip(src) {
                    *ch = ((1.0 - alpha) * *ch as f32 + alpha * s * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            data.extend_from_slice(&c);
        }
    }
    Ok(RgbImage { width: w, height: h, data })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PPM header is not ASCII".into()))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM header {} ... {}", fields[0], fields[3])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM dimension {s:?}")));
    let (width, height) = (parse(fields[1])?, parse(fields[2])?);
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != width * height * 3 {
        return Err(Error::Format(format!(
            "PPM payload has {} bytes, expected {}",
            payload.len(),
            width * height * 3
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}
