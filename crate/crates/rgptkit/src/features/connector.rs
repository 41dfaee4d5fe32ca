//! The shared two-layer connector projecting pooled visual features into
//! the decoder embedding space. One parameter set serves both the
//! image-level path (every cell of the pooled grid) and the region-level
//! path (one vector per region), so identical inputs map to identical
//! embeddings regardless of which path produced them.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ParamSlot, Parameterized};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Width of the decoder's token embeddings.
    pub out_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ConnectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("connector dims must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Values saved by the forward pass: the input rows and the hidden
/// pre-activations.
pub struct ConnectorCache {
    x: Array2<f64>,
    pre: Array2<f64>,
}

/// linear -> activation -> linear, applied row-wise.
pub struct Connector {
    cfg: ConnectorConfig,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    gw1: Array2<f64>,
    gb1: Array1<f64>,
    gw2: Array2<f64>,
    gb2: Array1<f64>,
}

impl Connector {
    pub fn new(cfg: ConnectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::sub_rng(cfg.seed, &["connector"]);
        let mut w1 = Array2::zeros((cfg.hidden_dim, cfg.in_dim));
        nn::fill_normal(
            w1.as_slice_mut().unwrap(),
            1.0 / (cfg.in_dim as f64).sqrt(),
            &mut rng,
        );
        let mut w2 = Array2::zeros((cfg.out_dim, cfg.hidden_dim));
        nn::fill_normal(
            w2.as_slice_mut().unwrap(),
            1.0 / (cfg.hidden_dim as f64).sqrt(),
            &mut rng,
        );
        Ok(Connector {
            b1: Array1::zeros(cfg.hidden_dim),
            b2: Array1::zeros(cfg.out_dim),
            gw1: Array2::zeros(w1.raw_dim()),
            gb1: Array1::zeros(cfg.hidden_dim),
            gw2: Array2::zeros(w2.raw_dim()),
            gb2: Array1::zeros(cfg.out_dim),
            w1,
            w2,
            cfg,
        })
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    /// Project a batch of rows (n, in_dim) -> (n, out_dim).
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ConnectorCache)> {
        if x.ncols() != self.cfg.in_dim {
            return Err(Error::Shape(format!(
                "connector expects width {}, got {}",
                self.cfg.in_dim,
                x.ncols()
            )));
        }
        let pre = nn::linear(x, &self.w1, &self.b1);
        let hidden = pre.mapv(|v| self.cfg.activation.apply(v));
        let y = nn::linear(&hidden, &self.w2, &self.b2);
        Ok((
            y,
            ConnectorCache {
                x: x.clone(),
                pre,
            },
        ))
    }

    /// Project a single feature vector.
    pub fn forward_vec(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        let x = v.clone().insert_axis(Axis(0));
        let y = self.forward(&x)?;
        Ok(y.index_axis(Axis(0), 0).to_owned())
    }

    /// Project every cell of a feature map, row-major: (h*w, out_dim).
    pub fn forward_map(&self, map: &FeatureMap) -> Result<Array2<f64>> {
        let (h, w, d) = map.grid.dim();
        let flat = map
            .grid
            .to_shape(((h * w, d), ndarray::Order::RowMajor))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        self.forward(&flat)
    }

    /// Accumulates parameter gradients and returns d loss / d x.
    pub fn backward(&mut self, cache: &ConnectorCache, dy: &Array2<f64>) -> Array2<f64> {
        let hidden = cache.pre.mapv(|v| self.cfg.activation.apply(v));
        let (dhidden, dw2, db2) = nn::linear_backward(&hidden, &self.w2, dy);
        let dpre = &dhidden * &cache.pre.mapv(|v| self.cfg.activation.grad(v));
        let (dx, dw1, db1) = nn::linear_backward(&cache.x, &self.w1, &dpre);
        self.gw2 += &dw2;
        self.gb2 += &db2;
        self.gw1 += &dw1;
        self.gb1 += &db1;
        dx
    }

    /// Reshape a flat (h*w, out) cell gradient back to a (h, w, out) grid.
    pub fn rows_to_grid(rows: &Array2<f64>, h: usize, w: usize) -> Result<Array3<f64>> {
        let d = rows.ncols();
        rows.to_shape(((h, w, d), ndarray::Order::RowMajor))
            .map(|v| v.to_owned())
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

impl Parameterized for Connector {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        let shapes: [Vec<usize>; 4] = [
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
        ];
        f(ParamSlot {
            name: "connector.w1",
            shape: &shapes[0],
            value: self.w1.as_slice_mut().unwrap(),
            grad: self.gw1.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: "connector.b1",
            shape: &shapes[1],
            value: self.b1.as_slice_mut().unwrap(),
            grad: self.gb1.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: "connector.w2",
            shape: &shapes[2],
            value: self.w2.as_slice_mut().unwrap(),
            grad: self.gw2.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: "connector.b2",
            shape: &shapes[3],
            value: self.b2.as_slice_mut().unwrap(),
            grad: self.gb2.as_slice_mut().unwrap(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cfg() -> ConnectorConfig {
        ConnectorConfig {
            in_dim: 4,
            hidden_dim: 6,
            out_dim: 5,
            activation: Activation::Silu,
            seed: 1,
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_output() {
        let c = Connector::new(cfg()).unwrap();
        let y = c.forward(&Array2::zeros((3, 4))).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_and_region_paths_share_parameters() {
        let c = Connector::new(cfg()).unwrap();
        let v = Array1::from_vec(vec![0.3, -0.7, 1.2, 0.0]);
        let mut grid = Array3::zeros((2, 3, 4));
        for k in 0..4 {
            grid[[1, 2, k]] = v[k];
        }
        let map = FeatureMap { grid, stride: 14.0 };
        let cells = c.forward_map(&map).unwrap();
        let region = c.forward_vec(&v).unwrap();
        // Cell (1,2) is row 5 in row-major order.
        for k in 0..5 {
            assert_eq!(cells[[5, k]], region[k]);
        }
    }

    #[test]
    fn map_projection_yields_one_row_per_cell() {
        let c = Connector::new(ConnectorConfig {
            in_dim: 16,
            hidden_dim: 8,
            out_dim: 6,
            activation: Activation::Silu,
            seed: 0,
        })
        .unwrap();
        let map = FeatureMap {
            grid: Array3::from_elem((24, 24, 16), 0.1),
            stride: 14.0,
        };
        let rows = c.forward_map(&map).unwrap();
        assert_eq!(rows.dim(), (576, 6));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let c = Connector::new(cfg()).unwrap();
        assert!(c.forward(&Array2::zeros((2, 5))).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>() - 0.5);
        let dy = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() - 0.5);

        let mut c = Connector::new(cfg()).unwrap();
        let (_, cache) = c.forward_cached(&x).unwrap();
        let dx = c.backward(&cache, &dy);

        let loss = |x: &Array2<f64>| -> f64 {
            let c = Connector::new(cfg()).unwrap();
            (&c.forward(x).unwrap() * &dy).sum()
        };
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!(
                    (num - dx[[i, j]]).abs() < 1e-6,
                    "dx[{i},{j}] numeric {num} analytic {}",
                    dx[[i, j]]
                );
            }
        }
    }
}
