//! Region annotations and their discretization onto feature grids.
//!
//! A region is a box, polygon, or run-length mask in normalized [0,1] image
//! coordinates (masks are encoded against the prepared pixel resolution).
//! Rasterization marks every grid cell whose center lies inside the region;
//! when no center does, the single cell nearest the region centroid is set so
//! pooling always has at least one cell to average.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one region.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionShape {
    /// [x1, y1, x2, y2] in normalized coordinates, x1 < x2 and y1 < y2.
    Box([f64; 4]),
    /// At least three vertices, normalized coordinates, even-odd fill.
    Polygon(Vec<[f64; 2]>),
    /// Column-major run lengths alternating zeros/ones, starting with the
    /// zero run, summing to the prepared pixel count.
    Rle(Vec<u64>),
}

/// One annotated region. `id` is the 1-based index referenced by the
/// `⟨regionN⟩` placeholder in conversation text.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub id: u32,
    pub shape: RegionShape,
}

/// Flat JSON encoding: {"id": 1, "kind": "box", "data": [x1,y1,x2,y2]}.
#[derive(Serialize, Deserialize)]
struct WireRegion {
    id: u32,
    kind: String,
    data: Vec<f64>,
}

impl Serialize for RegionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (kind, data) = match &self.shape {
            RegionShape::Box(b) => ("box", b.to_vec()),
            RegionShape::Polygon(pts) => (
                "polygon",
                pts.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>(),
            ),
            RegionShape::Rle(counts) => ("rle", counts.iter().map(|&c| c as f64).collect()),
        };
        WireRegion {
            id: self.id,
            kind: kind.to_string(),
            data,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = WireRegion::deserialize(d)?;
        RegionSpec::from_wire(wire).map_err(serde::de::Error::custom)
    }
}

impl RegionSpec {
    pub fn new_box(id: u32, rect: [f64; 4]) -> Result<Self> {
        let spec = RegionSpec {
            id,
            shape: RegionShape::Box(rect),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn new_polygon(id: u32, vertices: Vec<[f64; 2]>) -> Result<Self> {
        let spec = RegionSpec {
            id,
            shape: RegionShape::Polygon(vertices),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn new_rle(id: u32, counts: Vec<u64>) -> Result<Self> {
        let spec = RegionSpec {
            id,
            shape: RegionShape::Rle(counts),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_wire(wire: WireRegion) -> Result<Self> {
        let shape = match wire.kind.as_str() {
            "box" => {
                if wire.data.len() != 4 {
                    return Err(Error::Region(format!(
                        "box needs 4 coordinates, got {}",
                        wire.data.len()
                    )));
                }
                RegionShape::Box([wire.data[0], wire.data[1], wire.data[2], wire.data[3]])
            }
            "polygon" => {
                if wire.data.len() % 2 != 0 {
                    return Err(Error::Region("polygon data length must be even".into()));
                }
                RegionShape::Polygon(
                    wire.data
                        .chunks_exact(2)
                        .map(|c| [c[0], c[1]])
                        .collect::<Vec<_>>(),
                )
            }
            "rle" => {
                let mut counts = Vec::with_capacity(wire.data.len());
                for &v in &wire.data {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::Region(format!("rle count {v} is not a whole number")));
                    }
                    counts.push(v as u64);
                }
                RegionShape::Rle(counts)
            }
            other => {
                return Err(Error::Region(format!(
                    "unknown region kind {other:?} (expected box, polygon, or rle)"
                )))
            }
        };
        let spec = RegionSpec {
            id: wire.id,
            shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id == 0 {
            return Err(Error::Region("region id must be >= 1".into()));
        }
        match &self.shape {
            RegionShape::Box(b) => {
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Region("box has non-finite coordinate".into()));
                }
                let [x1, y1, x2, y2] = *b;
                if !(0.0..=1.0).contains(&x1)
                    || !(0.0..=1.0).contains(&x2)
                    || !(0.0..=1.0).contains(&y1)
                    || !(0.0..=1.0).contains(&y2)
                {
                    return Err(Error::Region(format!(
                        "box coordinates must lie in [0,1]: {b:?}"
                    )));
                }
                if x1 >= x2 || y1 >= y2 {
                    return Err(Error::Region(format!(
                        "box must satisfy x1<x2 and y1<y2: {b:?}"
                    )));
                }
            }
            RegionShape::Polygon(pts) => {
                if pts.len() < 3 {
                    return Err(Error::Region(format!(
                        "polygon needs at least 3 vertices, got {}",
                        pts.len()
                    )));
                }
                for p in pts {
                    if !p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                        return Err(Error::Region(format!(
                            "polygon vertex out of [0,1] range: {p:?}"
                        )));
                    }
                }
            }
            RegionShape::Rle(counts) => {
                if counts.is_empty() {
                    return Err(Error::Region("rle counts are empty".into()));
                }
                // Runs at odd positions are the "ones"; at least one must be
                // positive or the mask is empty.
                if !counts.iter().skip(1).step_by(2).any(|&c| c > 0) {
                    return Err(Error::Region("rle mask sets no pixels".into()));
                }
            }
        }
        Ok(())
    }

    /// Tight axis-aligned bounds in normalized coordinates. For run-length
    /// masks the bounds come from decoding at `prepared_side` pixels.
    pub fn bounding_box(&self, prepared_side: usize) -> Result<[f64; 4]> {
        match &self.shape {
            RegionShape::Box(b) => Ok(*b),
            RegionShape::Polygon(pts) => {
                let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
                for p in pts {
                    bb[0] = bb[0].min(p[0]);
                    bb[1] = bb[1].min(p[1]);
                    bb[2] = bb[2].max(p[0]);
                    bb[3] = bb[3].max(p[1]);
                }
                Ok(bb)
            }
            RegionShape::Rle(counts) => {
                let mask = decode_rle(counts, prepared_side, prepared_side)?;
                let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
                for ((y, x), &set) in mask.indexed_iter() {
                    if set {
                        let side = prepared_side as f64;
                        bb[0] = bb[0].min(x as f64 / side);
                        bb[1] = bb[1].min(y as f64 / side);
                        bb[2] = bb[2].max((x + 1) as f64 / side);
                        bb[3] = bb[3].max((y + 1) as f64 / side);
                    }
                }
                Ok(bb)
            }
        }
    }
}

/// Binary cell mask aligned to a feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub cells: Array2<bool>,
    pub source: RegionSpec,
}

impl RegionGrid {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Row-major (row, col) coordinates of set cells.
    pub fn set_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for ((i, j), &set) in self.cells.indexed_iter() {
            if set {
                out.push((i, j));
            }
        }
        out
    }
}

/// Decode column-major run lengths into an (h, w) mask. Counts alternate
/// zero-runs and one-runs, starting with zeros, and must sum to h*w.
pub fn decode_rle(counts: &[u64], h: usize, w: usize) -> Result<Array2<bool>> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::Region(format!(
            "rle counts sum to {total}, expected {}",
            h * w
        )));
    }
    let mut mask = Array2::from_elem((h, w), false);
    let mut pos = 0usize;
    let mut value = false;
    for &run in counts {
        for _ in 0..run {
            if value {
                // Column-major: pos runs down column 0, then column 1, ...
                let x = pos / h;
                let y = pos % h;
                mask[[y, x]] = true;
            }
            pos += 1;
        }
        value = !value;
    }
    Ok(mask)
}

fn point_in_polygon(pts: &[[f64; 2]], px: f64, py: f64) -> bool {
    let n = pts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (pts[i][0], pts[i][1]);
        let (xj, yj) = (pts[j][0], pts[j][1]);
        if (yi > py) != (yj > py) {
            let x_cross = (xj - xi) * (py - yi) / (yj - yi) + xi;
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Does the region contain the normalized point (px, py)? Boxes use the
/// half-open test [x1, x2) × [y1, y2); masks look up the containing pixel.
fn contains(shape: &RegionShape, px: f64, py: f64, mask: Option<&Array2<bool>>) -> bool {
    match shape {
        RegionShape::Box([x1, y1, x2, y2]) => px >= *x1 && px < *x2 && py >= *y1 && py < *y2,
        RegionShape::Polygon(pts) => point_in_polygon(pts, px, py),
        RegionShape::Rle(_) => {
            let mask = mask.expect("rle mask decoded before containment tests");
            let (h, w) = mask.dim();
            let y = ((py * h as f64).floor() as usize).min(h - 1);
            let x = ((px * w as f64).floor() as usize).min(w - 1);
            mask[[y, x]]
        }
    }
}

/// Normalized centroid used for the non-empty fallback: box center, polygon
/// vertex average, or mean of set mask pixels.
fn centroid(shape: &RegionShape, mask: Option<&Array2<bool>>) -> (f64, f64) {
    match shape {
        RegionShape::Box([x1, y1, x2, y2]) => ((x1 + x2) / 2.0, (y1 + y2) / 2.0),
        RegionShape::Polygon(pts) => {
            let n = pts.len() as f64;
            let sx: f64 = pts.iter().map(|p| p[0]).sum();
            let sy: f64 = pts.iter().map(|p| p[1]).sum();
            (sx / n, sy / n)
        }
        RegionShape::Rle(_) => {
            let mask = mask.expect("rle mask decoded before centroid");
            let (h, w) = mask.dim();
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut n = 0.0;
            for ((y, x), &set) in mask.indexed_iter() {
                if set {
                    sx += (x as f64 + 0.5) / w as f64;
                    sy += (y as f64 + 0.5) / h as f64;
                    n += 1.0;
                }
            }
            (sx / n, sy / n)
        }
    }
}

/// Mark every (h, w) grid cell whose center the region contains.
/// `prepared_side` is the pixel resolution of the prepared square image and
/// is only needed to decode run-length masks. Guarantees at least one set
/// cell.
pub fn rasterize_region(
    spec: &RegionSpec,
    h: usize,
    w: usize,
    prepared_side: usize,
) -> Result<RegionGrid> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot rasterize onto {h}x{w} grid")));
    }
    let mask = match &spec.shape {
        RegionShape::Rle(counts) => Some(decode_rle(counts, prepared_side, prepared_side)?),
        _ => None,
    };
    let mut cells = Array2::from_elem((h, w), false);
    let mut any = false;
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            if contains(&spec.shape, cx, cy, mask.as_ref()) {
                cells[[i, j]] = true;
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = centroid(&spec.shape, mask.as_ref());
        let j = ((cx * w as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
        let i = ((cy * h as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
        cells[[i, j]] = true;
    }
    Ok(RegionGrid {
        cells,
        source: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_cover_box_sets_every_cell() {
        let spec = RegionSpec::new_box(1, [0.0, 0.0, 1.0, 1.0]).unwrap();
        let grid = rasterize_region(&spec, 6, 9, 336).unwrap();
        assert_eq!(grid.count(), 54);
    }

    #[test]
    fn quarter_box_on_4x4_sets_top_left_quadrant() {
        let spec = RegionSpec::new_box(1, [0.0, 0.0, 0.5, 0.5]).unwrap();
        let grid = rasterize_region(&spec, 4, 4, 336).unwrap();
        let set = grid.set_cells();
        assert_eq!(set, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn tiny_box_falls_back_to_single_centroid_cell() {
        // Smaller than one cell and positioned between cell centers.
        let spec = RegionSpec::new_box(1, [0.51, 0.51, 0.52, 0.52]).unwrap();
        let grid = rasterize_region(&spec, 4, 4, 336).unwrap();
        assert_eq!(grid.set_cells(), vec![(2, 2)]);
    }

    #[test]
    fn malformed_boxes_are_rejected() {
        assert!(RegionSpec::new_box(1, [0.5, 0.0, 0.5, 1.0]).is_err());
        assert!(RegionSpec::new_box(1, [0.7, 0.0, 0.3, 1.0]).is_err());
        assert!(RegionSpec::new_box(1, [-0.1, 0.0, 0.5, 1.0]).is_err());
        assert!(RegionSpec::new_box(0, [0.0, 0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn polygon_triangle_covers_expected_cells() {
        // Right triangle over the left half, hypotenuse from top-right of it.
        let spec = RegionSpec::new_polygon(
            1,
            vec![[0.0, 0.0], [0.5, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let grid = rasterize_region(&spec, 4, 4, 336).unwrap();
        // Column 0 centers (x=0.125) are inside for y where x < 0.5(1-y);
        // hand-checking: (0,0),(1,0),(2,0) inside, (3,0) near the tip is out
        // at y=0.875 needs x < 0.0625. (0,1) at (0.375,0.125) inside.
        let set = grid.set_cells();
        assert!(set.contains(&(0, 0)));
        assert!(set.contains(&(1, 0)));
        assert!(set.contains(&(0, 1)));
        assert!(!set.contains(&(0, 3)));
        assert!(!set.contains(&(3, 3)));
    }

    #[test]
    fn polygon_needs_three_vertices() {
        assert!(RegionSpec::new_polygon(1, vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn rle_decodes_column_major_starting_with_zeros() {
        // 2x2 grid, column-major pixel order: (0,0),(1,0),(0,1),(1,1).
        // counts [1,2,1] -> pixels 1 and 2 set -> (1,0) and (0,1).
        let mask = decode_rle(&[1, 2, 1], 2, 2).unwrap();
        assert!(!mask[[0, 0]]);
        assert!(mask[[1, 0]]);
        assert!(mask[[0, 1]]);
        assert!(!mask[[1, 1]]);
    }

    #[test]
    fn rle_count_sum_must_match_resolution() {
        let spec = RegionSpec::new_rle(1, vec![1, 2, 1]).unwrap();
        // A 28-pixel prepared side needs counts summing to 784, not 4.
        assert!(rasterize_region(&spec, 2, 2, 28).is_err());
    }

    #[test]
    fn rle_rasterizes_through_pixel_lookup() {
        // 2x2 cells over a 2x2 pixel mask with ones at (1,0),(0,1).
        let spec = RegionSpec::new_rle(1, vec![1, 2, 1]).unwrap();
        let grid = rasterize_region(&spec, 2, 2, 2).unwrap();
        assert_eq!(grid.set_cells(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn empty_rle_mask_is_invalid() {
        assert!(RegionSpec::new_rle(1, vec![4, 0]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_flat_schema() {
        let spec = RegionSpec::new_box(3, [0.1, 0.2, 0.6, 0.9]).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"box\""), "{text}");
        assert!(text.contains("\"id\":3"), "{text}");
        let back: RegionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);

        let poly = RegionSpec::new_polygon(1, vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]).unwrap();
        let text = serde_json::to_string(&poly).unwrap();
        let back: RegionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, poly);
    }

    #[test]
    fn json_rejects_bad_kind_and_bad_geometry() {
        let e = serde_json::from_str::<RegionSpec>(r#"{"id":1,"kind":"circle","data":[0.5]}"#);
        assert!(e.is_err());
        let e = serde_json::from_str::<RegionSpec>(r#"{"id":1,"kind":"box","data":[0.5,0.5,0.1,0.9]}"#);
        assert!(e.is_err());
    }

    #[test]
    fn nested_boxes_have_nested_cell_sets() {
        let outer = RegionSpec::new_box(1, [0.1, 0.1, 0.9, 0.9]).unwrap();
        let inner = RegionSpec::new_box(2, [0.3, 0.3, 0.6, 0.7]).unwrap();
        let go = rasterize_region(&outer, 8, 8, 336).unwrap();
        let gi = rasterize_region(&inner, 8, 8, 336).unwrap();
        for (i, j) in gi.set_cells() {
            assert!(go.cells[[i, j]], "inner cell ({i},{j}) outside outer set");
        }
    }

    #[test]
    fn bounding_boxes() {
        let spec = RegionSpec::new_polygon(1, vec![[0.2, 0.1], [0.8, 0.3], [0.5, 0.9]]).unwrap();
        assert_eq!(spec.bounding_box(336).unwrap(), [0.2, 0.1, 0.8, 0.9]);
        let rle = RegionSpec::new_rle(1, vec![1, 2, 1]).unwrap();
        let bb = rle.bounding_box(2).unwrap();
        assert_eq!(bb, [0.0, 0.0, 1.0, 1.0]);
    }
}
