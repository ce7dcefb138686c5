//! Images as point sets, anchor proposal, point reduction and region partition.

use crate::engine::{Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};

/// Spatial arrangement retained by a point set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridMeta {
    pub height: usize,
    pub width: usize,
}

impl GridMeta {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("grid {height}x{width} is empty")));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for GridMeta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// What the feature channels of a point set hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelLayout {
    /// Stage-0 layout: r, g, b, x, y.
    ColorPosition,
    /// Learned features.
    Features,
}

/// `n × d` features plus the grid they are arranged on.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T> {
    pub features: Tensor<T>,
    pub grid: GridMeta,
    pub layout: ChannelLayout,
}

impl<T: Scalar> PointSet<T> {
    pub fn new(features: Tensor<T>, grid: GridMeta, layout: ChannelLayout) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != grid.len() {
            return Err(Error::Dimension(format!(
                "{n} points cannot be arranged on a {grid} grid"
            )));
        }
        Ok(Self {
            features,
            grid,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// RGB image, row-major `height × width × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Format(format!("expected 3 color channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Format(format!(
                "{} values do not form a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Normalized position of grid cell (`row`, `col`): `(col/w − 0.5, row/h − 0.5)`.
pub fn grid_position(grid: GridMeta, row: usize, col: usize) -> [f64; 2] {
    [
        col as f64 / grid.width as f64 - 0.5,
        row as f64 / grid.height as f64 - 0.5,
    ]
}

/// One point per pixel holding its color and normalized coordinates.
pub fn image_to_points<T: Scalar>(image: &Image) -> Result<PointSet<T>> {
    let grid = GridMeta::new(image.height, image.width)?;
    let mut data = Vec::with_capacity(grid.len() * 5);
    for row in 0..grid.height {
        for col in 0..grid.width {
            let [x, y] = grid_position(grid, row, col);
            data.extend(image.pixel(row, col).iter().map(|&v| T::of(v as f64)));
            data.push(T::of(x));
            data.push(T::of(y));
        }
    }
    PointSet::new(Tensor::new(&[grid.len(), 5], data)?, grid, ChannelLayout::ColorPosition)
}

fn exact_sqrt(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

/// Uniform sub-grid of anchors, one per non-overlapping block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorGrid {
    pub grid: GridMeta,
    /// Block side length in the parent grid.
    pub stride: usize,
}

impl AnchorGrid {
    /// Parent-grid position (row, col) of anchor `i`, at the center of its block.
    pub fn position(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.grid.width, i % self.grid.width);
        let half = (self.stride as f64 - 1.0) / 2.0;
        (
            (r * self.stride) as f64 + half,
            (c * self.stride) as f64 + half,
        )
    }
}

pub fn propose_anchors(grid: GridMeta, downsample_r: usize) -> Result<AnchorGrid> {
    let stride = exact_sqrt(downsample_r)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::Config(format!("downsample_r {downsample_r} is not a perfect square")))?;
    if !grid.height.is_multiple_of(stride) || !grid.width.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "grid {grid} is not divisible into {stride}x{stride} blocks"
        )));
    }
    Ok(AnchorGrid {
        grid: GridMeta::new(grid.height / stride, grid.width / stride)?,
        stride,
    })
}

/// Which points each anchor fuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReducerSpec {
    pub k_neighbors: usize,
    pub downsample_r: usize,
}

impl ReducerSpec {
    /// Side length of the square neighborhood.
    pub fn window(&self) -> usize {
        exact_sqrt(self.k_neighbors).unwrap_or(0)
    }

    /// Neighbor indices for every anchor, `k` per anchor in row-major
    /// neighborhood order, plus the anchor grid.
    ///
    /// `k == r` uses the anchor's own block. `k = 9, r = 4` uses the 3×3
    /// window centered on the block's top-left cell (stride 2), clamping
    /// indices that fall outside the grid to the border.
    pub fn neighbors(&self, grid: GridMeta) -> Result<(AnchorGrid, Vec<usize>)> {
        let anchors = propose_anchors(grid, self.downsample_r)?;
        let stride = anchors.stride;
        let win = self.window();
        let offset: isize = match (self.k_neighbors, self.downsample_r) {
            (k, r) if k == r => 0,
            (9, 4) => -1,
            (k, r) => {
                return Err(Error::Config(format!(
                    "unsupported reducer: k_neighbors={k} with downsample_r={r}"
                )))
            }
        };
        if grid.height < win || grid.width < win {
            return Err(Error::Config(format!(
                "grid {grid} is smaller than the {win}x{win} neighborhood"
            )));
        }
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let mut index = Vec::with_capacity(anchors.grid.len() * self.k_neighbors);
        for ar in 0..anchors.grid.height {
            for ac in 0..anchors.grid.width {
                let r0 = (ar * stride) as isize + offset;
                let c0 = (ac * stride) as isize + offset;
                for dr in 0..win as isize {
                    for dc in 0..win as isize {
                        let r = clamp(r0 + dr, grid.height);
                        let c = clamp(c0 + dc, grid.width);
                        index.push(r * grid.width + c);
                    }
                }
            }
        }
        Ok((anchors, index))
    }
}

/// `batch` point sets stacked row-wise on a tape: `(batch·n) × d`.
#[derive(Clone, Copy, Debug)]
pub struct PointBatch {
    pub features: Var,
    pub grid: GridMeta,
    pub batch: usize,
}

impl PointBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.grid.len()
    }
}

/// Point-reducer weights bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ReducerVars {
    /// `(k·d_in) × d_out`
    pub weight: Var,
    pub bias: Var,
    pub norm_weight: Var,
    pub norm_bias: Var,
}

/// Gathers every anchor's neighbors, concatenates them channel-wise, fuses
/// them with a linear map and normalizes the result.
pub fn reduce_points<T: Scalar>(
    tape: &mut Tape<T>,
    input: &PointBatch,
    spec: ReducerSpec,
    vars: &ReducerVars,
) -> Result<PointBatch> {
    let (anchors, local) = spec.neighbors(input.grid)?;
    let shape = tape.shape(input.features).to_vec();
    if shape.len() != 2 || shape[0] != input.rows() {
        return Err(Error::Dimension(format!(
            "point batch of {} rows has features {shape:?}",
            input.rows()
        )));
    }
    let d_in = shape[1];
    let n = input.grid.len();
    let mut index = Vec::with_capacity(input.batch * local.len());
    for b in 0..input.batch {
        index.extend(local.iter().map(|&i| b * n + i));
    }
    let gathered = tape.gather_rows(input.features, &index)?;
    let out_rows = input.batch * anchors.grid.len();
    let stacked = tape.reshape(gathered, &[out_rows, spec.k_neighbors * d_in])?;
    let fused = tape.linear(stacked, vars.weight, Some(vars.bias))?;
    let normed = tape.group_norm(fused, 1, vars.norm_weight, vars.norm_bias, T::of(NORM_EPS))?;
    Ok(PointBatch {
        features: normed,
        grid: anchors.grid,
        batch: input.batch,
    })
}

/// Tiling of a grid into `regions` equal rectangles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLayout {
    pub grid: GridMeta,
    pub tile: GridMeta,
    pub regions: usize,
    /// `order[p]` is the parent index of the point at region-major position `p`.
    pub order: Vec<usize>,
}

impl RegionLayout {
    pub fn new(grid: GridMeta, regions: usize) -> Result<Self> {
        let side = exact_sqrt(regions)
            .filter(|&s| s > 0)
            .ok_or_else(|| Error::Config(format!("regions={regions} is not a perfect square")))?;
        if !grid.height.is_multiple_of(side) || !grid.width.is_multiple_of(side) {
            return Err(Error::Config(format!(
                "grid {grid} cannot be split into {side}x{side} regions"
            )));
        }
        let tile = GridMeta::new(grid.height / side, grid.width / side)?;
        let mut order = Vec::with_capacity(grid.len());
        for tr in 0..side {
            for tc in 0..side {
                for r in 0..tile.height {
                    for c in 0..tile.width {
                        order.push((tr * tile.height + r) * grid.width + tc * tile.width + c);
                    }
                }
            }
        }
        Ok(Self {
            grid,
            tile,
            regions,
            order,
        })
    }

    /// Region containing parent index `i`.
    pub fn region_of(&self, i: usize) -> usize {
        let side = self.grid.width / self.tile.width;
        let (r, c) = (i / self.grid.width, i % self.grid.width);
        (r / self.tile.height) * side + c / self.tile.width
    }

    /// Inverse of `order`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (p, &i) in self.order.iter().enumerate() {
            inv[i] = p;
        }
        inv
    }

    /// `order` repeated for `batch` stacked point sets.
    pub fn batched_order(&self, batch: usize) -> Vec<usize> {
        let n = self.grid.len();
        (0..batch)
            .flat_map(|b| self.order.iter().map(move |&i| b * n + i))
            .collect()
    }

    pub fn batched_inverse(&self, batch: usize) -> Vec<usize> {
        let n = self.grid.len();
        let inv = self.inverse();
        (0..batch)
            .flat_map(|b| inv.iter().map(move |&p| b * n + p))
            .collect()
    }
}

/// Tiles of a point set plus the mapping back to the parent.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionView<T> {
    pub tiles: Vec<PointSet<T>>,
    pub layout: RegionLayout,
}

pub fn partition_regions<T: Scalar>(ps: &PointSet<T>, regions: usize) -> Result<RegionView<T>> {
    let layout = RegionLayout::new(ps.grid, regions)?;
    let d = ps.dim();
    let tile_len = layout.tile.len();
    let tiles = layout
        .order
        .chunks(tile_len)
        .map(|idx| {
            let mut data = Vec::with_capacity(tile_len * d);
            for &i in idx {
                data.extend_from_slice(ps.features.row(i));
            }
            PointSet::new(Tensor::new(&[tile_len, d], data)?, layout.tile, ps.layout)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionView { tiles, layout })
}

pub fn merge_regions<T: Scalar>(rv: &RegionView<T>) -> Result<PointSet<T>> {
    let layout = &rv.layout;
    if rv.tiles.len() != layout.regions {
        return Err(Error::Contract(format!(
            "{} of {} tiles present",
            rv.tiles.len(),
            layout.regions
        )));
    }
    let first = &rv.tiles[0];
    let d = first.dim();
    let tile_len = layout.tile.len();
    let mut data = vec![T::zero(); layout.grid.len() * d];
    for (t, tile) in rv.tiles.iter().enumerate() {
        if tile.grid != layout.tile || tile.dim() != d {
            return Err(Error::Contract(format!("tile {t} does not match the layout")));
        }
        for (local, &i) in layout.order[t * tile_len..(t + 1) * tile_len].iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(tile.features.row(local));
        }
    }
    PointSet::new(Tensor::new(&[layout.grid.len(), d], data)?, layout.grid, first.layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    fn coords(ps: &PointSet<f64>) -> Vec<(f64, f64)> {
        (0..ps.len())
            .map(|i| (ps.features.row(i)[3], ps.features.row(i)[4]))
            .collect()
    }

    #[test]
    fn two_by_two_coordinates() {
        let ps = image_to_points::<f64>(&image(2, 2)).unwrap();
        let mut got = coords(&ps);
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(-0.5, -0.5), (-0.5, 0.0), (0.0, -0.5), (0.0, 0.0)]);
    }

    #[test]
    fn single_pixel() {
        let ps = image_to_points::<f64>(&image(1, 1)).unwrap();
        assert_eq!(coords(&ps), vec![(-0.5, -0.5)]);
    }

    #[test]
    fn shape_contract() {
        let ps = image_to_points::<f32>(&image(4, 6)).unwrap();
        assert_eq!(ps.features.shape(), &[24, 5]);
        assert_eq!(ps.grid, GridMeta::new(4, 6).unwrap());
    }

    #[test]
    fn wrong_channel_count_is_format_error() {
        assert!(matches!(Image::new(2, 2, 4, vec![0.0; 16]), Err(Error::Format(_))));
    }

    #[test]
    fn coordinates_increase_along_axes() {
        let ps = image_to_points::<f64>(&image(5, 7)).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                let p = ps.features.row(r * 7 + c);
                assert!(p[3].abs() <= 0.5 && p[4].abs() <= 0.5);
                if c > 0 {
                    assert!(p[3] > ps.features.row(r * 7 + c - 1)[3]);
                }
                if r > 0 {
                    assert!(p[4] > ps.features.row((r - 1) * 7 + c)[4]);
                }
            }
        }
    }

    #[test]
    fn anchor_grids() {
        let g = |h, w| GridMeta::new(h, w).unwrap();
        assert_eq!(propose_anchors(g(4, 4), 16).unwrap().grid, g(1, 1));
        assert_eq!(propose_anchors(g(28, 28), 4).unwrap().grid, g(14, 14));
        assert_eq!(propose_anchors(g(224, 224), 16).unwrap().grid, g(56, 56));
        assert!(matches!(propose_anchors(g(6, 6), 16), Err(Error::Config(_))));
        assert!(matches!(propose_anchors(g(8, 8), 8), Err(Error::Config(_))));
    }

    #[test]
    fn block_neighbors_are_row_major() {
        let spec = ReducerSpec {
            k_neighbors: 4,
            downsample_r: 4,
        };
        let (anchors, idx) = spec.neighbors(GridMeta::new(4, 4).unwrap()).unwrap();
        assert_eq!(anchors.grid.len(), 4);
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[12..], &[10, 11, 14, 15]);
    }

    #[test]
    fn overlapping_neighbors_clamp_at_border() {
        let spec = ReducerSpec {
            k_neighbors: 9,
            downsample_r: 4,
        };
        let (anchors, idx) = spec.neighbors(GridMeta::new(4, 4).unwrap()).unwrap();
        assert_eq!(anchors.grid, GridMeta::new(2, 2).unwrap());
        // anchor (0,0): rows/cols -1..=1 clamped to 0..=1
        assert_eq!(&idx[..9], &[0, 0, 1, 0, 0, 1, 4, 4, 5]);
        // anchor (1,1): rows/cols 1..=3
        assert_eq!(&idx[27..], &[5, 6, 7, 9, 10, 11, 13, 14, 15]);
    }

    #[test]
    fn unsupported_reducer_is_config_error() {
        let spec = ReducerSpec {
            k_neighbors: 9,
            downsample_r: 16,
        };
        assert!(matches!(spec.neighbors(GridMeta::new(8, 8).unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn partition_tiles_and_identity() {
        let grid = GridMeta::new(28, 28).unwrap();
        let feats = Tensor::new(&[784, 2], (0..1568).map(|v| v as f64).collect()).unwrap();
        let ps = PointSet::new(feats, grid, ChannelLayout::Features).unwrap();
        let rv = partition_regions(&ps, 16).unwrap();
        assert_eq!(rv.tiles.len(), 16);
        assert!(rv.tiles.iter().all(|t| t.grid == GridMeta::new(7, 7).unwrap()));
        assert_eq!(merge_regions(&rv).unwrap(), ps);

        let one = partition_regions(&ps, 1).unwrap();
        assert_eq!(one.tiles[0], ps);
    }

    #[test]
    fn tile_rows_come_from_their_region() {
        let grid = GridMeta::new(4, 4).unwrap();
        let feats = Tensor::new(&[16, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        let ps = PointSet::new(feats, grid, ChannelLayout::Features).unwrap();
        let rv = partition_regions(&ps, 4).unwrap();
        assert_eq!(rv.tiles[1].features.data(), &[2.0, 3.0, 6.0, 7.0]);
        for (t, tile) in rv.tiles.iter().enumerate() {
            for &v in tile.features.data() {
                assert_eq!(rv.layout.region_of(v as usize), t);
            }
        }
    }

    #[test]
    fn merge_with_missing_tile_fails() {
        let grid = GridMeta::new(4, 4).unwrap();
        let ps = PointSet::new(Tensor::<f64>::zeros(&[16, 1]), grid, ChannelLayout::Features).unwrap();
        let mut rv = partition_regions(&ps, 4).unwrap();
        rv.tiles.pop();
        assert!(matches!(merge_regions(&rv), Err(Error::Contract(_))));
    }

    #[test]
    fn reducer_collapses_stem_grid() {
        let ps = image_to_points::<f64>(&image(4, 4)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(ps.features.clone());
        let d_out = 6;
        let vars = ReducerVars {
            weight: tape.param(Tensor::full(&[16 * 5, d_out], 0.01)),
            bias: tape.param(Tensor::zeros(&[d_out])),
            norm_weight: tape.param(Tensor::full(&[d_out], 1.0)),
            norm_bias: tape.param(Tensor::zeros(&[d_out])),
        };
        let spec = ReducerSpec {
            k_neighbors: 16,
            downsample_r: 16,
        };
        let input = PointBatch {
            features: x,
            grid: ps.grid,
            batch: 1,
        };
        let out = reduce_points(&mut tape, &input, spec, &vars).unwrap();
        assert_eq!(out.grid.len(), 1);
        assert_eq!(tape.shape(out.features), &[1, d_out]);
    }

    #[test]
    fn constant_input_gives_constant_reduced_points() {
        let grid = GridMeta::new(8, 8).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[64, 3], 0.25));
        let w = tape.param(Tensor::from_f64(&[27, 4], &(0..108).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
        let b = tape.param(Tensor::zeros(&[4]));
        let spec = ReducerSpec {
            k_neighbors: 9,
            downsample_r: 4,
        };
        let (_, idx) = spec.neighbors(grid).unwrap();
        let g = tape.gather_rows(x, &idx).unwrap();
        let g = tape.reshape(g, &[16, 27]).unwrap();
        let y = tape.linear(g, w, Some(b)).unwrap();
        let v = tape.value(y);
        for r in 1..16 {
            assert_eq!(v.row(r), v.row(0));
        }
    }
}
