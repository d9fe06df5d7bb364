//! Pillar encoder and the shared 2D BEV backbone.
//!
//! Points are bucketed into vertical pillars on a regular BEV grid. Each
//! point is lifted by a linear layer, normalized, rectified and max-pooled
//! into its pillar; the resulting pseudo-image goes through two 3×3
//! convolution stages. Every normalization is dataset-aware (see [`crate::norm`]).

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Range3D};
use crate::norm::{dsnorm_forward, BatchStats, DatasetNormState, Segment};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

/// Per-point input features: offsets to the pillar center (x, y), z, intensity.
pub const POINT_FEATURES: usize = 4;

/// `⌈extent / cell⌉`, treating values within 1e-9 of an integer as exact.
pub fn cells_along(extent: f64, cell: f64) -> usize {
    let q = extent / cell;
    let r = q.round();
    (if (q - r).abs() < 1e-9 { r } else { q.ceil() }) as usize
}

/// BEV grid geometry: where cell `(row, col)` sits in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub height: usize,
    pub width: usize,
}

impl GridGeometry {
    pub fn for_range(range: &Range3D, cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Config(format!("cell size {cell} must be positive")));
        }
        let [ex, ey, _] = range.extent();
        Ok(Self {
            x_min: range.x_min,
            y_min: range.y_min,
            cell,
            height: cells_along(ey, cell),
            width: cells_along(ex, cell),
        })
    }

    /// `(row, col)` of a BEV position, clamped onto the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.x_min) / self.cell).floor().max(0.0) as usize;
        let row = ((y - self.y_min) / self.cell).floor().max(0.0) as usize;
        (row.min(self.height - 1), col.min(self.width - 1))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell,
            self.y_min + (row as f64 + 0.5) * self.cell,
        )
    }
}

/// Points bucketed by BEV cell, capped per pillar.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub geometry: GridGeometry,
    pub max_points: usize,
    /// Non-empty pillars in ascending cell order.
    pub pillars: Vec<Pillar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    /// Flat cell index `row·W + col`.
    pub cell: usize,
    /// Augmented points, [`POINT_FEATURES`] values each.
    pub points: Vec<[f64; POINT_FEATURES]>,
}

impl PillarGrid {
    pub fn num_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

/// Buckets `pc` into pillars. Every point must already lie inside `range`.
///
/// The first `max_points` points of each cell, in input order, are kept.
pub fn pillarize(pc: &PointCloud, range: &Range3D, cell: f64, max_points: usize) -> Result<PillarGrid> {
    let geometry = GridGeometry::for_range(range, cell)?;
    if let Some(i) = pc.xyz.iter().position(|p| !range.contains(*p)) {
        return Err(Error::Contract(format!(
            "point {i} at {:?} lies outside the pillar range; crop first",
            pc.xyz[i]
        )));
    }
    pillarize_on(pc, &geometry, max_points)
}

/// Like [`pillarize`] on an explicit grid; points must fall inside its BEV
/// footprint.
pub fn pillarize_on(pc: &PointCloud, geometry: &GridGeometry, max_points: usize) -> Result<PillarGrid> {
    if max_points == 0 {
        return Err(Error::Config("max_points must be positive".into()));
    }
    let x_max = geometry.x_min + geometry.width as f64 * geometry.cell;
    let y_max = geometry.y_min + geometry.height as f64 * geometry.cell;
    let mut buckets: Vec<Vec<[f64; POINT_FEATURES]>> = vec![Vec::new(); geometry.height * geometry.width];
    for (i, (p, &inten)) in pc.xyz.iter().zip(&pc.intensity).enumerate() {
        if !(p[0] >= geometry.x_min && p[0] < x_max && p[1] >= geometry.y_min && p[1] < y_max) {
            return Err(Error::Contract(format!("point {i} at {p:?} lies outside the grid")));
        }
        let (row, col) = geometry.cell_of(p[0], p[1]);
        let b = &mut buckets[row * geometry.width + col];
        if b.len() < max_points {
            let (cx, cy) = geometry.cell_center(row, col);
            b.push([p[0] - cx, p[1] - cy, p[2], inten]);
        }
    }
    let pillars = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(cell, points)| Pillar { cell, points })
        .collect();
    Ok(PillarGrid {
        geometry: *geometry,
        max_points,
        pillars,
    })
}

/// Flattened pillar points of one batch, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarBatch {
    /// `[P, POINT_FEATURES]`, frames in batch order.
    pub features: Tensor,
    /// Flat `(b, cell)` target of every row.
    pub cells: Vec<Option<usize>>,
    /// Rows contributed by each frame.
    pub rows_per_frame: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl PillarBatch {
    /// All grids must share `H × W`.
    pub fn assemble(grids: &[&PillarGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (h, w) = (first.geometry.height, first.geometry.width);
        let mut data = Vec::new();
        let mut cells = Vec::new();
        let mut rows_per_frame = Vec::with_capacity(grids.len());
        for (b, grid) in grids.iter().enumerate() {
            if (grid.geometry.height, grid.geometry.width) != (h, w) {
                return Err(Error::Dimension(format!(
                    "grid {}x{} in a batch of {h}x{w}",
                    grid.geometry.height, grid.geometry.width
                )));
            }
            let before = cells.len();
            for pillar in &grid.pillars {
                for p in &pillar.points {
                    data.extend_from_slice(p);
                    cells.push(Some(b * h * w + pillar.cell));
                }
            }
            // batch statistics need two rows; pad near-empty frames with inert rows
            while cells.len() - before < 2 {
                data.extend_from_slice(&[0.0; POINT_FEATURES]);
                cells.push(None);
            }
            rows_per_frame.push(cells.len() - before);
        }
        Ok(Self {
            features: Tensor::new(vec![cells.len(), POINT_FEATURES], data)?,
            cells,
            rows_per_frame,
            height: h,
            width: w,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub pillar_channels: usize,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            pillar_channels: 16,
            channels: 16,
        }
    }
}

/// Parameters and normalization state of the encoder and backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub mlp_w: ParamId,
    pub mlp_b: ParamId,
    pub conv1: ParamId,
    pub conv2: ParamId,
    /// After the pillar MLP and after each convolution stage.
    pub norms: [DatasetNormState; 3],
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        cfg: EncoderConfig,
        num_datasets: usize,
        dataset_specific_stats: bool,
        rng: &mut R,
    ) -> Self {
        let (c0, c) = (cfg.pillar_channels, cfg.channels);
        let mlp_w = params.add_he("encoder.mlp.w", &[POINT_FEATURES, c0], POINT_FEATURES, rng);
        let mlp_b = params.add("encoder.mlp.b", Tensor::zeros(&[c0]));
        let conv1 = params.add_he("backbone.conv1.k", &[c, c0, 3, 3], c0 * 9, rng);
        let norm0 = DatasetNormState::new(params, "encoder.norm0", c0, num_datasets, dataset_specific_stats);
        let conv2 = params.add_he("backbone.conv2.k", &[c, c, 3, 3], c * 9, rng);
        let norm1 = DatasetNormState::new(params, "backbone.norm1", c, num_datasets, dataset_specific_stats);
        let norm2 = DatasetNormState::new(params, "backbone.norm2", c, num_datasets, dataset_specific_stats);
        Self {
            cfg,
            mlp_w,
            mlp_b,
            conv1,
            conv2,
            norms: [norm0, norm1, norm2],
        }
    }

    /// Pre-backbone pseudo-image `[B, C0, H, W]`.
    ///
    /// `frame_datasets[b]` is the dataset of frame `b`; frames of one dataset
    /// must be contiguous.
    pub fn encode_pillars(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PillarBatch,
        frame_datasets: &[usize],
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let x = g.constant(batch.features.clone());
        let lin = g.matmul(x, p.var(self.mlp_w))?;
        let lin = g.add_bias(lin, p.var(self.mlp_b))?;
        let row_segments = segments(frame_datasets, &batch.rows_per_frame)?;
        let n0 = &self.norms[0];
        let (y, s) = dsnorm_forward(g, lin, &row_segments, n0, p.var(n0.gamma), p.var(n0.beta))?;
        stats.extend(s.into_iter().map(|s| (0, s)));
        let y = g.relu(y)?;
        g.scatter_max(y, &batch.cells, (frame_datasets.len(), batch.height, batch.width))
    }

    /// Full encoder: pillars → BEV features `[B, C, H, W]`.
    ///
    /// Returns the measured batch statistics tagged with their norm layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PillarBatch,
        frame_datasets: &[usize],
    ) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        let mut stats = Vec::new();
        let mut x = self.encode_pillars(g, p, batch, frame_datasets, &mut stats)?;
        let frame_segments = segments(frame_datasets, &vec![1; frame_datasets.len()])?;
        for (layer, conv) in [(1, self.conv1), (2, self.conv2)] {
            let y = g.conv2d(x, p.var(conv), None)?;
            let n = &self.norms[layer];
            let (y, s) = dsnorm_forward(g, y, &frame_segments, n, p.var(n.gamma), p.var(n.beta))?;
            stats.extend(s.into_iter().map(|s| (layer, s)));
            x = g.relu(y)?;
        }
        Ok((x, stats))
    }

    pub fn apply_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            self.norms[*layer].apply(std::slice::from_ref(s))?;
        }
        Ok(())
    }
}

/// Groups consecutive frames of the same dataset into segments over rows.
pub fn segments(frame_datasets: &[usize], rows_per_frame: &[usize]) -> Result<Vec<Segment>> {
    let mut out: Vec<Segment> = Vec::new();
    let mut start = 0;
    for (&d, &rows) in frame_datasets.iter().zip(rows_per_frame) {
        match out.last_mut() {
            Some(last) if last.dataset_id == d => last.len += rows,
            _ => {
                if out.iter().any(|s| s.dataset_id == d) {
                    return Err(Error::Contract(format!("frames of dataset {d} are not contiguous")));
                }
                out.push(Segment {
                    dataset_id: d,
                    start,
                    len: rows,
                })
            }
        }
        start += rows;
    }
    Ok(out)
}
