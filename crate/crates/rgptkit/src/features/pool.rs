//! Region pooling and adaptive spatial pooling over feature grids.
//!
//! Both operators take the plain arithmetic mean of a set of cells, channel
//! by channel, accumulating in row-major order with a single division at the
//! end. Keeping the two accumulation paths identical makes pooling over the
//! full grid agree bit for bit with adaptive pooling to a 1x1 target.

use ndarray::{Array1, Array3};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::region::RegionGrid;

/// Half-open input window [lo, hi) covered by output index `i` of `t`
/// windows over `n` inputs: lo = floor(i*n/t), hi = ceil((i+1)*n/t).
fn window(i: usize, n: usize, t: usize) -> (usize, usize) {
    let lo = i * n / t;
    let hi = ((i + 1) * n).div_ceil(t);
    (lo, hi)
}

/// Mean-pool a feature grid down to `target` = (rows, cols). Every output
/// cell averages its near-uniform input window.
pub fn adaptive_pool(map: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    let (h, w, d) = map.grid.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape("adaptive pool target must be >= 1x1".into()));
    }
    if th > h || tw > w {
        return Err(Error::Shape(format!(
            "adaptive pool target {th}x{tw} exceeds input {h}x{w}"
        )));
    }
    let mut out = Array3::zeros((th, tw, d));
    for oi in 0..th {
        let (y0, y1) = window(oi, h, th);
        for oj in 0..tw {
            let (x0, x1) = window(oj, w, tw);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..d {
                let mut acc = 0.0;
                for i in y0..y1 {
                    for j in x0..x1 {
                        acc += map.grid[[i, j, c]];
                    }
                }
                out[[oi, oj, c]] = acc / count;
            }
        }
    }
    Ok(FeatureMap {
        grid: out,
        stride: map.stride * h as f64 / th as f64,
    })
}

/// Adjoint of [`adaptive_pool`]: each upstream gradient is spread uniformly
/// over its input window.
pub fn adaptive_pool_backward(dout: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (th, tw, d) = dout.dim();
    let mut dx = Array3::zeros((in_h, in_w, d));
    for oi in 0..th {
        let (y0, y1) = window(oi, in_h, th);
        for oj in 0..tw {
            let (x0, x1) = window(oj, in_w, tw);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..d {
                let g = dout[[oi, oj, c]] / count;
                for i in y0..y1 {
                    for j in x0..x1 {
                        dx[[i, j, c]] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Average the feature vectors of every cell the region mask sets.
pub fn mask_pool(map: &FeatureMap, region: &RegionGrid) -> Result<Array1<f64>> {
    let (h, w, d) = map.grid.dim();
    if region.cells.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "region grid {:?} does not match feature grid {h}x{w}",
            region.cells.dim()
        )));
    }
    let mut acc = Array1::zeros(d);
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if region.cells[[i, j]] {
                count += 1;
                for c in 0..d {
                    acc[c] += map.grid[[i, j, c]];
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Region(format!(
            "region {} rasterized to an empty mask",
            region.source.id
        )));
    }
    let count = count as f64;
    acc.mapv_inplace(|v| v / count);
    Ok(acc)
}

/// Adjoint of [`mask_pool`]: the vector gradient divided by the cell count,
/// scattered to every set cell.
pub fn mask_pool_backward(
    dvec: &Array1<f64>,
    region: &RegionGrid,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let d = dvec.len();
    let mut dx = Array3::zeros((in_h, in_w, d));
    let count = region.count() as f64;
    for (i, j) in region.set_cells() {
        for c in 0..d {
            dx[[i, j, c]] = dvec[c] / count;
        }
    }
    dx
}
