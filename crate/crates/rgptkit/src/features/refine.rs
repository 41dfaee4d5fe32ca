//! Feature refinement: upsample the backbone grid before pooling.
//!
//! The trained variant stacks two transposed convolutions with kernel 2 and
//! stride 2, so each layer doubles both spatial sides and every output cell
//! is reached by exactly one input cell (a block upsample). The layers are
//! linear; there is no pointwise nonlinearity between them. Alternatives:
//! plain bilinear interpolation to 16x the side, the transposed-conv stack
//! followed by interpolation to 16x total, or no refinement at all.

use ndarray::{Array1, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, ParamSlot, Parameterized};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineVariant {
    /// Two transposed convolutions, kernel 2, stride 2: spatial x4.
    #[default]
    Deconv,
    /// Bilinear interpolation straight to x16.
    Bilinear16,
    /// Transposed convolutions (x4) then bilinear to x16 total.
    DeconvBilinear,
    /// Identity.
    None,
}

impl RefineVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "deconv" => Some(RefineVariant::Deconv),
            "bilinear16" => Some(RefineVariant::Bilinear16),
            "deconv_bilinear" => Some(RefineVariant::DeconvBilinear),
            "none" => Some(RefineVariant::None),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RefineVariant::Deconv => "deconv",
            RefineVariant::Bilinear16 => "bilinear16",
            RefineVariant::DeconvBilinear => "deconv_bilinear",
            RefineVariant::None => "none",
        }
    }

    /// Spatial upscale factor of the variant.
    pub fn scale(self) -> usize {
        match self {
            RefineVariant::Deconv => 4,
            RefineVariant::Bilinear16 | RefineVariant::DeconvBilinear => 16,
            RefineVariant::None => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub variant: RefineVariant,
    /// Channels per transposed-conv layer. Defaults to halving the input
    /// width per layer (minimum 1) when absent.
    pub out_channels: Option<Vec<usize>>,
    /// Kernel side per layer. Only 2 is supported: the block-upsample
    /// structure relies on kernel == stride.
    pub kernel: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            variant: RefineVariant::Deconv,
            out_channels: None,
            kernel: 2,
            stride: 2,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel != 2 || self.stride != 2 {
            return Err(Error::Config(format!(
                "refinement supports kernel 2 / stride 2 only, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        if let Some(ch) = &self.out_channels {
            if ch.len() != 2 {
                return Err(Error::Config(format!(
                    "out_channels must list exactly 2 layers, got {}",
                    ch.len()
                )));
            }
            if ch.iter().any(|&c| c == 0) {
                return Err(Error::Config("out_channels entries must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Per-layer output widths for input width `d`.
    pub fn layer_channels(&self, d: usize) -> Vec<usize> {
        match &self.out_channels {
            Some(ch) => ch.clone(),
            None => vec![(d / 2).max(1), (d / 4).max(1)],
        }
    }

    /// Channel width of the refined map for input width `d`.
    pub fn out_dim(&self, d: usize) -> usize {
        match self.variant {
            RefineVariant::Deconv | RefineVariant::DeconvBilinear => {
                *self.layer_channels(d).last().unwrap()
            }
            RefineVariant::Bilinear16 | RefineVariant::None => d,
        }
    }
}

/// One transposed convolution, kernel 2, stride 2.
/// Weight layout: (c_in, c_out, ky, kx).
struct Deconv2x {
    w: Array4<f64>,
    b: Array1<f64>,
    gw: Array4<f64>,
    gb: Array1<f64>,
}

impl Deconv2x {
    fn new(c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> Self {
        let mut w = Array4::zeros((c_in, c_out, 2, 2));
        // Fan-in of a stride-2 kernel-2 transposed conv is c_in: each
        // output cell sees one input cell through one kernel tap.
        nn::fill_normal(w.as_slice_mut().unwrap(), 1.0 / (c_in as f64).sqrt(), rng);
        Deconv2x {
            gw: Array4::zeros(w.raw_dim()),
            gb: Array1::zeros(c_out),
            b: Array1::zeros(c_out),
            w,
        }
    }

    /// Build a layer that copies its single channel into each output
    /// position: all weights 1, bias 0. Each input cell becomes a constant
    /// 2x2 block.
    fn constant_copy() -> Self {
        Deconv2x {
            w: Array4::ones((1, 1, 2, 2)),
            b: Array1::zeros(1),
            gw: Array4::zeros((1, 1, 2, 2)),
            gb: Array1::zeros(1),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, c_in) = x.dim();
        let c_out = self.b.len();
        let mut y = Array3::zeros((2 * h, 2 * w, c_out));
        for i in 0..h {
            for j in 0..w {
                for ky in 0..2 {
                    for kx in 0..2 {
                        for co in 0..c_out {
                            let mut acc = self.b[co];
                            for ci in 0..c_in {
                                acc += x[[i, j, ci]] * self.w[[ci, co, ky, kx]];
                            }
                            y[[2 * i + ky, 2 * j + kx, co]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&mut self, x: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
        let (h, w, c_in) = x.dim();
        let c_out = self.b.len();
        let mut dx = Array3::zeros((h, w, c_in));
        for i in 0..h {
            for j in 0..w {
                for ky in 0..2 {
                    for kx in 0..2 {
                        for co in 0..c_out {
                            let g = dy[[2 * i + ky, 2 * j + kx, co]];
                            self.gb[co] += g;
                            for ci in 0..c_in {
                                self.gw[[ci, co, ky, kx]] += x[[i, j, ci]] * g;
                                dx[[i, j, ci]] += self.w[[ci, co, ky, kx]] * g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Intermediate activations saved by [`Refiner::forward_cached`] for the
/// backward pass.
pub struct RefineCache {
    layer_inputs: Vec<Array3<f64>>,
    /// Spatial dims entering the final bilinear step, when the variant has
    /// one.
    bilinear_in: Option<(usize, usize)>,
}

/// The refinement operator. Holds the transposed-conv parameters for the
/// trained variants; pure resampling variants have no state.
pub struct Refiner {
    cfg: RefinementConfig,
    in_dim: usize,
    layers: Vec<Deconv2x>,
}

impl Refiner {
    /// `in_dim` is the channel width of the backbone map this refiner will
    /// consume; parameters are sized for it up front.
    pub fn new(cfg: RefinementConfig, in_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if in_dim == 0 {
            return Err(Error::Shape("refiner input width must be >= 1".into()));
        }
        let layers = match cfg.variant {
            RefineVariant::Deconv | RefineVariant::DeconvBilinear => {
                let chans = cfg.layer_channels(in_dim);
                let mut rng = seed::sub_rng(cfg.seed, &["refine", "deconv"]);
                let mut layers = Vec::new();
                let mut c_in = in_dim;
                for &c_out in &chans {
                    layers.push(Deconv2x::new(c_in, c_out, &mut rng));
                    c_in = c_out;
                }
                layers
            }
            RefineVariant::Bilinear16 | RefineVariant::None => Vec::new(),
        };
        Ok(Refiner {
            cfg,
            in_dim,
            layers,
        })
    }

    /// A single-channel refiner whose layers replicate their input: every
    /// input cell becomes a constant 4x4 block. Used by shape oracles.
    pub fn constant_copy(variant: RefineVariant) -> Result<Self> {
        let cfg = RefinementConfig {
            variant,
            out_channels: Some(vec![1, 1]),
            ..RefinementConfig::default()
        };
        let mut refiner = Refiner::new(cfg, 1)?;
        for layer in &mut refiner.layers {
            *layer = Deconv2x::constant_copy();
        }
        Ok(refiner)
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.cfg
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim(self.in_dim)
    }

    pub fn forward(&self, map: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(map)?.0)
    }

    pub fn forward_cached(&self, map: &FeatureMap) -> Result<(FeatureMap, RefineCache)> {
        let (h, w, d) = map.grid.dim();
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "refiner built for width {}, got map of width {d}",
                self.in_dim
            )));
        }
        let mut cache = RefineCache {
            layer_inputs: Vec::new(),
            bilinear_in: None,
        };
        let mut grid = map.grid.clone();
        for layer in &self.layers {
            cache.layer_inputs.push(grid.clone());
            grid = layer.forward(&grid);
        }
        if matches!(
            self.cfg.variant,
            RefineVariant::Bilinear16 | RefineVariant::DeconvBilinear
        ) {
            let (ch, cw, _) = grid.dim();
            cache.bilinear_in = Some((ch, cw));
            grid = nn::resize_bilinear(&grid, 16 * h, 16 * w);
        }
        let scale = self.cfg.variant.scale() as f64;
        Ok((
            FeatureMap {
                grid,
                stride: map.stride / scale,
            },
            cache,
        ))
    }

    /// Backpropagate through the variant, accumulating parameter gradients,
    /// and return the gradient with respect to the input grid.
    pub fn backward(&mut self, cache: &RefineCache, dout: &Array3<f64>) -> Array3<f64> {
        let mut grad = dout.clone();
        if let Some((ch, cw)) = cache.bilinear_in {
            grad = nn::resize_bilinear_backward(&grad, ch, cw);
        }
        for (layer, x) in self
            .layers
            .iter_mut()
            .zip(cache.layer_inputs.iter())
            .rev()
        {
            grad = layer.backward(x, &grad);
        }
        grad
    }
}

impl Parameterized for Refiner {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        let names = [
            ("refine.deconv0.weight", "refine.deconv0.bias"),
            ("refine.deconv1.weight", "refine.deconv1.bias"),
        ];
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let wshape: Vec<usize> = layer.w.shape().to_vec();
            f(ParamSlot {
                name: names[idx].0,
                shape: &wshape,
                value: layer.w.as_slice_mut().unwrap(),
                grad: layer.gw.as_slice_mut().unwrap(),
            });
            let bshape: Vec<usize> = layer.b.shape().to_vec();
            f(ParamSlot {
                name: names[idx].1,
                shape: &bshape,
                value: layer.b.as_slice_mut().unwrap(),
                grad: layer.gb.as_slice_mut().unwrap(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn map_of(grid: Array3<f64>) -> FeatureMap {
        FeatureMap { grid, stride: 14.0 }
    }

    #[test]
    fn variant_scales_match_shape_law() {
        let grid = Array3::from_shape_fn((6, 6, 8), |(i, j, k)| (i + 2 * j + 3 * k) as f64 * 0.1);
        let map = map_of(grid);
        for (variant, scale) in [
            (RefineVariant::Deconv, 4),
            (RefineVariant::Bilinear16, 16),
            (RefineVariant::DeconvBilinear, 16),
            (RefineVariant::None, 1),
        ] {
            let cfg = RefinementConfig {
                variant,
                ..RefinementConfig::default()
            };
            let refiner = Refiner::new(cfg, 8).unwrap();
            let out = refiner.forward(&map).unwrap();
            assert_eq!(out.grid.dim().0, 6 * scale, "{variant:?}");
            assert_eq!(out.grid.dim().1, 6 * scale, "{variant:?}");
            assert_eq!(out.stride, 14.0 / scale as f64, "{variant:?}");
        }
    }

    #[test]
    fn none_variant_is_identity() {
        let grid = Array3::from_shape_fn((4, 5, 3), |(i, j, k)| (i * 15 + j * 3 + k) as f64);
        let map = map_of(grid.clone());
        let refiner = Refiner::new(
            RefinementConfig {
                variant: RefineVariant::None,
                ..RefinementConfig::default()
            },
            3,
        )
        .unwrap();
        assert_eq!(refiner.forward(&map).unwrap().grid, grid);
    }

    #[test]
    fn constant_copy_replicates_each_cell_into_4x4_blocks() {
        let grid = Array3::from_shape_fn((2, 2, 1), |(i, j, _)| (1 + i * 2 + j) as f64);
        let map = map_of(grid);
        let refiner = Refiner::constant_copy(RefineVariant::Deconv).unwrap();
        let out = refiner.forward(&map).unwrap();
        assert_eq!(out.grid.dim(), (8, 8, 1));
        for i in 0..8 {
            for j in 0..8 {
                let expect = (1 + (i / 4) * 2 + (j / 4)) as f64;
                assert_eq!(out.grid[[i, j, 0]], expect, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn default_channel_schedule_halves_twice() {
        let cfg = RefinementConfig::default();
        assert_eq!(cfg.layer_channels(64), vec![32, 16]);
        assert_eq!(cfg.layer_channels(3), vec![1, 1]);
        let refiner = Refiner::new(cfg, 64).unwrap();
        assert_eq!(refiner.out_dim(), 16);
    }

    #[test]
    fn channel_override_is_respected() {
        let cfg = RefinementConfig {
            out_channels: Some(vec![10, 7]),
            ..RefinementConfig::default()
        };
        let refiner = Refiner::new(cfg, 8).unwrap();
        let grid = Array3::zeros((3, 3, 8));
        let out = refiner.forward(&map_of(grid)).unwrap();
        assert_eq!(out.grid.dim(), (12, 12, 7));
    }

    #[test]
    fn kernel_other_than_two_is_rejected() {
        let cfg = RefinementConfig {
            kernel: 3,
            ..RefinementConfig::default()
        };
        assert!(Refiner::new(cfg, 8).is_err());
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((3, 3, 2), |_| rng.random::<f64>() - 0.5);
        let map = map_of(x.clone());
        let dy_seed: Array3<f64> = Array3::from_shape_fn((12, 12, 1), |_| rng.random::<f64>() - 0.5);

        let cfg = RefinementConfig {
            out_channels: Some(vec![2, 1]),
            seed: 5,
            ..RefinementConfig::default()
        };
        let mut refiner = Refiner::new(cfg.clone(), 2).unwrap();
        let (_, cache) = refiner.forward_cached(&map).unwrap();
        let dx = refiner.backward(&cache, &dy_seed);

        let loss = |grid: &Array3<f64>| -> f64 {
            let r = Refiner::new(cfg.clone(), 2).unwrap();
            let out = r.forward(&map_of(grid.clone())).unwrap();
            (&out.grid * &dy_seed).sum()
        };
        let h = 1e-5;
        for idx in [[0usize, 0, 0], [1, 2, 1], [2, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (num - dx[idx]).abs() < 1e-6,
                "dx[{idx:?}] numeric {num} analytic {}",
                dx[idx]
            );
        }
    }
}
