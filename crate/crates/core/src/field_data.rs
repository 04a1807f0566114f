//! Yield observations and the regular grid they are aggregated onto.
//!
//! The pipeline is `load_yield_points` → `rotate_coordinates` →
//! `align_rows` (yield-monitor data only) → `aggregate_to_grid` →
//! `trim_edges`. Coordinates are in meters with `y` along the direction of
//! travel after rotation; yields are in t/ha.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single raw yield observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldPoint {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

impl YieldPoint {
    pub fn new(x: f64, y: f64, value: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite coordinates ({x}, {y})"
            )));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "yield must be finite and non-negative, got {value}"
            )));
        }
        Ok(Self { x, y, value })
    }
}

/// A data row that could not be turned into a [`YieldPoint`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BadRow {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedPoints {
    pub points: Vec<YieldPoint>,
    pub bad_rows: Vec<BadRow>,
}

/// Parses comma-delimited `x,y,value` text with a header row.
///
/// Columns may appear in any order and extra columns are ignored. Rows with
/// missing, non-numeric, non-finite or negative fields are skipped and
/// reported in [`LoadedPoints::bad_rows`].
pub fn load_yield_points<R: Read>(source: R) -> Result<LoadedPoints> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);

    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let (ix, iy, iv) = (column("x")?, column("y")?, column("value")?);

    let mut out = LoadedPoints::default();
    let mut n_rows = 0usize;
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        n_rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.bad_rows.push(BadRow {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |i: usize, name: &str| -> std::result::Result<f64, String> {
            let raw = record
                .get(i)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("missing `{name}`"))?;
            raw.parse::<f64>()
                .map_err(|_| format!("non-numeric `{name}`: {raw:?}"))
        };
        let parsed = field(ix, "x").and_then(|x| {
            let y = field(iy, "y")?;
            let v = field(iv, "value")?;
            YieldPoint::new(x, y, v).map_err(|e| e.to_string())
        });
        match parsed {
            Ok(p) => out.points.push(p),
            Err(reason) => out.bad_rows.push(BadRow { row, reason }),
        }
    }
    if n_rows == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Rotates every point by `-heading` so that the direction of travel maps
/// onto the +y axis.
pub fn rotate_coordinates(points: &[YieldPoint], heading: f64) -> Result<Vec<YieldPoint>> {
    if !heading.is_finite() {
        return Err(Error::InvalidParameter(format!("heading {heading}")));
    }
    if heading == 0.0 {
        return Ok(points.to_vec());
    }
    let (s, c) = heading.sin_cos();
    Ok(points
        .iter()
        .map(|p| YieldPoint {
            x: c * p.x + s * p.y,
            y: -s * p.x + c * p.y,
            value: p.value,
        })
        .collect())
}

/// Minimum gap between neighbouring rows, as a fraction of `row_width`,
/// below which the rows are considered split by positional jitter.
const MIN_ROW_GAP_FRACTION: f64 = 0.25;

/// Snaps each point's x onto the center of its harvest row.
///
/// Rows are bins of width `row_width` centered on the minimum x and every
/// `row_width` after it, so bin edges fall between harvest rows rather than
/// on the jitter of the first one. The output frame puts that minimum at 0
/// and row `k` at `(k + 0.5) * row_width`. Rows whose points nearly touch
/// the neighbouring row indicate a pitch finer than the jitter and are
/// rejected.
pub fn align_rows(points: &[YieldPoint], row_width: f64) -> Result<Vec<YieldPoint>> {
    if !(row_width.is_finite() && row_width > 0.0) {
        return Err(Error::InvalidParameter(format!("row_width {row_width}")));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let x_min = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let rows: Vec<usize> = points
        .iter()
        .map(|p| ((p.x - x_min) / row_width).round() as usize)
        .collect();

    let n_rows = rows.iter().copied().max().unwrap_or(0) + 1;
    let mut lo = vec![f64::INFINITY; n_rows];
    let mut hi = vec![f64::NEG_INFINITY; n_rows];
    for (p, &r) in points.iter().zip(&rows) {
        lo[r] = lo[r].min(p.x);
        hi[r] = hi[r].max(p.x);
    }
    for r in 1..n_rows {
        if lo[r].is_finite() && hi[r - 1].is_finite() {
            let gap = lo[r] - hi[r - 1];
            if gap < MIN_ROW_GAP_FRACTION * row_width {
                return Err(Error::AlignmentFailure(format!(
                    "rows {} and {r} are only {gap:.3} m apart at a {row_width} m pitch; \
                     row width is finer than the positional jitter",
                    r - 1
                )));
            }
        }
    }

    Ok(points
        .iter()
        .zip(&rows)
        .map(|(p, &r)| YieldPoint {
            x: (r as f64 + 0.5) * row_width,
            ..*p
        })
        .collect())
}

/// Regular lattice of aggregated yields. Cells are stored row-major with x
/// varying fastest: cell `(i, j)` lives at `j * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct YieldGrid {
    origin: (f64, f64),
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    counts: Vec<u32>,
}

/// Sidecar metadata describing a grid's geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub origin_x: f64,
    pub origin_y: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl YieldGrid {
    pub fn new(
        origin: (f64, f64),
        dx: f64,
        dy: f64,
        nx: usize,
        ny: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        counts: Vec<u32>,
    ) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidParameter(format!("cell size {dx} x {dy}")));
        }
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 2x2, got {nx}x{ny}"
            )));
        }
        let n = nx * ny;
        if values.len() != n || mask.len() != n || counts.len() != n {
            return Err(Error::InvalidParameter(format!(
                "grid buffers must have {n} entries"
            )));
        }
        for k in 0..n {
            if mask[k] && (counts[k] == 0 || !values[k].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "valid cell {k} has no finite value"
                )));
            }
        }
        Ok(Self {
            origin,
            dx,
            dy,
            nx,
            ny,
            values,
            mask,
            counts,
        })
    }

    /// A fully valid grid with one observation per cell.
    pub fn from_values(
        origin: (f64, f64),
        dx: f64,
        dy: f64,
        nx: usize,
        ny: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = values.len();
        Self::new(origin, dx, dy, nx, ny, values, vec![true; n], vec![1; n])
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dy(&self) -> f64 {
        self.dy
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn metadata(&self) -> GridMetadata {
        GridMetadata {
            origin_x: self.origin.0,
            origin_y: self.origin.1,
            dx: self.dx,
            dy: self.dy,
            nx: self.nx,
            ny: self.ny,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn cell_of(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn centroid(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (i as f64 + 0.5) * self.dx,
            self.origin.1 + (j as f64 + 0.5) * self.dy,
        )
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.mask[self.index(i, j)]
    }

    /// Linear indices of valid cells in canonical order.
    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| v.then_some(k))
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    /// Values of the valid cells in canonical order.
    pub fn valid_values(&self) -> Vec<f64> {
        self.valid_indices().map(|k| self.values[k]).collect()
    }

    /// Returns a copy with the valid cells' values replaced, in canonical
    /// order.
    pub fn with_valid_values(&self, new_values: &[f64]) -> Result<Self> {
        if new_values.len() != self.n_valid() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values, got {}",
                self.n_valid(),
                new_values.len()
            )));
        }
        let mut out = self.clone();
        for (k, &v) in self.valid_indices().zip(new_values) {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite value {v}")));
            }
            out.values[k] = v;
        }
        Ok(out)
    }

    /// Writes `i,j,cx,cy,value,count,valid` rows for every cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,cx,cy,value,count,valid")?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let k = self.index(i, j);
                let (cx, cy) = self.centroid(i, j);
                writeln!(
                    out,
                    "{i},{j},{cx},{cy},{},{},{}",
                    self.values[k], self.counts[k], self.mask[k] as u8
                )?;
            }
        }
        Ok(())
    }

    pub fn write_metadata<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.metadata())?;
        Ok(())
    }

    /// Reads a grid written by [`YieldGrid::write_csv`] together with its
    /// metadata sidecar. Lines starting with `#` are ignored.
    pub fn read_csv<R: Read>(meta: GridMetadata, source: R) -> Result<Self> {
        let n = meta.nx * meta.ny;
        let mut values = vec![f64::NAN; n];
        let mut mask = vec![false; n];
        let mut counts = vec![0u32; n];
        let mut seen = vec![false; n];
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(source);
        for record in reader.records() {
            let record = record?;
            let get = |k: usize| {
                record
                    .get(k)
                    .ok_or_else(|| Error::MalformedGrid(format!("short row {record:?}")))
            };
            let parse_usize = |k: usize| {
                get(k)?
                    .parse::<usize>()
                    .map_err(|e| Error::MalformedGrid(e.to_string()))
            };
            let (i, j) = (parse_usize(0)?, parse_usize(1)?);
            if i >= meta.nx || j >= meta.ny {
                return Err(Error::MalformedGrid(format!(
                    "cell ({i}, {j}) out of range"
                )));
            }
            let k = j * meta.nx + i;
            values[k] = get(4)?
                .parse::<f64>()
                .map_err(|e| Error::MalformedGrid(e.to_string()))?;
            counts[k] = get(5)?
                .parse::<u32>()
                .map_err(|e| Error::MalformedGrid(e.to_string()))?;
            mask[k] = get(6)? == "1";
            seen[k] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::MalformedGrid("grid file is missing cells".into()));
        }
        Self::new(
            (meta.origin_x, meta.origin_y),
            meta.dx,
            meta.dy,
            meta.nx,
            meta.ny,
            values,
            mask,
            counts,
        )
    }
}

/// Cell index along one axis. Points exactly on a boundary join the lower
/// cell; the first cell is closed on the left.
fn bin_index(coord: f64, origin: f64, step: f64) -> usize {
    let t = (coord - origin) / step;
    if t <= 0.0 {
        0
    } else {
        (t.ceil() as usize).saturating_sub(1)
    }
}

/// Averages points within `dx` x `dy` cells. The grid origin is the
/// minimum-coordinate corner of the point cloud and points on a cell edge go
/// to the lower cell. Empty cells are masked out.
pub fn aggregate_to_grid(points: &[YieldPoint], dx: f64, dy: f64) -> Result<YieldGrid> {
    if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
        return Err(Error::InvalidParameter(format!("cell size {dx} x {dy}")));
    }
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let nx = (bin_index(x1, x0, dx) + 1).max(2);
    let ny = (bin_index(y1, y0, dy) + 1).max(2);

    let mut sums = vec![0.0; nx * ny];
    let mut counts = vec![0u32; nx * ny];
    for p in points {
        let k = bin_index(p.y, y0, dy) * nx + bin_index(p.x, x0, dx);
        sums[k] += p.value;
        counts[k] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let mask = counts.iter().map(|&c| c > 0).collect();
    YieldGrid::new((x0, y0), dx, dy, nx, ny, values, mask, counts)
}

/// Field extent and the edge strips excluded from analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub width_x: f64,
    pub length_y: f64,
    /// Direction of travel in the raw coordinate frame, radians.
    pub heading: f64,
    /// Excluded distance from the turning-headland edges (min/max y).
    pub headland_margin: f64,
    /// Excluded distance from the edges parallel to travel (min/max x).
    pub side_margin: f64,
}

impl FieldGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.headland_margin >= 0.0 && self.side_margin >= 0.0) {
            return Err(Error::InvalidParameter(
                "margins must be non-negative".into(),
            ));
        }
        if !(self.width_x > 2.0 * self.side_margin) {
            return Err(Error::InvalidParameter(format!(
                "field width {} leaves no interior with side margin {}",
                self.width_x, self.side_margin
            )));
        }
        if !(self.length_y > 2.0 * self.headland_margin) {
            return Err(Error::InvalidParameter(format!(
                "field length {} leaves no interior with headland margin {}",
                self.length_y, self.headland_margin
            )));
        }
        Ok(())
    }
}

/// Masks out cells whose centroid lies closer than the margins to the grid
/// boundary. Only the margins of `geometry` are consulted here, so a field
/// too small for its margins surfaces as [`Error::EmptyInterior`].
pub fn trim_edges(grid: &YieldGrid, geometry: &FieldGeometry) -> Result<YieldGrid> {
    let (side, head) = (geometry.side_margin, geometry.headland_margin);
    if !(side >= 0.0 && head >= 0.0 && side.is_finite() && head.is_finite()) {
        return Err(Error::InvalidParameter(
            "margins must be non-negative".into(),
        ));
    }
    let width = grid.nx as f64 * grid.dx;
    let length = grid.ny as f64 * grid.dy;
    let mut out = grid.clone();
    for j in 0..grid.ny {
        let cy = (j as f64 + 0.5) * grid.dy;
        let near_headland = cy.min(length - cy) < head;
        for i in 0..grid.nx {
            let cx = (i as f64 + 0.5) * grid.dx;
            if near_headland || cx.min(width - cx) < side {
                let k = grid.index(i, j);
                out.mask[k] = false;
            }
        }
    }
    if out.n_valid() == 0 {
        return Err(Error::EmptyInterior);
    }
    Ok(out)
}
