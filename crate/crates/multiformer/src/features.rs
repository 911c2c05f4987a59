//! Everything upstream of the query decoder: a small convolutional backbone
//! stub, a multi-scale pixel decoder, and the task-feature construction.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Mlp2};
use crate::tensor::{Graph, Params, Scalar, Tensor};

/// Backbone pyramid: `levels[p-1]` has shape `[C_p, H/2^p, W/2^p]`, p = 1..P.
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
}

/// Pixel-decoder output: `P-1` levels, all with `N_D` channels.
/// `level(m)` returns the feature at scale `H/2^m`, m = 2..P.
pub struct PixelFeatures<T: Scalar> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> PixelFeatures<T> {
    pub fn level(&self, m: usize) -> &Tensor<T> {
        &self.levels[m - 2]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Task-specific features consumed by the prediction heads and the context
/// adapter. `f_mask` and `f_depth` live at `H/2 x W/2`.
pub struct TaskFeatures<T: Scalar> {
    pub f_mask: Tensor<T>,
    pub f_depth: Tensor<T>,
    pub f_ctx: Tensor<T>,
}

/// Strided convolutional backbone stub: one 3x3 stride-2 convolution plus
/// SiLU per stage, P stages.
pub struct Backbone {
    stages: Vec<Conv2d>,
    channels: Vec<usize>,
}

impl Backbone {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        channels: &[usize],
    ) -> Self {
        assert!(channels.len() >= 3, "backbone needs P >= 3 stages");
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (p, &c_out) in channels.iter().enumerate() {
            stages.push(Conv2d::new(
                params,
                rng,
                &format!("backbone.stage{}", p + 1),
                c_in,
                c_out,
                3,
                2,
                1,
            ));
            c_in = c_out;
        }
        Backbone { stages, channels: channels.to_vec() }
    }

    pub fn num_levels(&self) -> usize {
        self.stages.len()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// `image: [3, H, W]` with H, W divisible by 2^P.
    pub fn extract_pyramid<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W] image, got {s:?}")));
        }
        let levels_pow = 1usize << self.stages.len();
        if s[1] % levels_pow != 0 || s[2] % levels_pow != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by 2^{}",
                s[1],
                s[2],
                self.stages.len()
            )));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(g, p, &x).silu();
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Per-level 1x1 projections to `N_D` channels plus top-down additive fusion
/// with two post-fusion 3x3 convolutions per level.
pub struct PixelDecoder {
    proj: Vec<Conv2d>,
    post1: Vec<Conv2d>,
    post2: Vec<Conv2d>,
    n_d: usize,
}

impl PixelDecoder {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        backbone_channels: &[usize],
        n_d: usize,
    ) -> Self {
        // Levels m = 2..P, indexed [0] = m=2.
        let mut proj = Vec::new();
        let mut post1 = Vec::new();
        let mut post2 = Vec::new();
        for (i, &c) in backbone_channels.iter().enumerate().skip(1) {
            let m = i + 1;
            proj.push(Conv2d::new(params, rng, &format!("pixdec.proj{m}"), c, n_d, 1, 1, 0));
            post1.push(Conv2d::new(params, rng, &format!("pixdec.post{m}a"), n_d, n_d, 3, 1, 1));
            post2.push(Conv2d::new(params, rng, &format!("pixdec.post{m}b"), n_d, n_d, 3, 1, 1));
        }
        PixelDecoder { proj, post1, post2, n_d }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        pyr: &FeaturePyramid<T>,
    ) -> PixelFeatures<T> {
        let n = self.proj.len();
        assert_eq!(pyr.levels.len(), n + 1, "pyramid depth mismatch");
        // Top-down: coarsest first, each finer level adds the upsampled sum.
        let mut fused: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut carry: Option<Tensor<T>> = None;
        for idx in (0..n).rev() {
            let x = self.proj[idx].forward(g, p, &pyr.levels[idx + 1]);
            let x = match carry {
                Some(ref up) => x.add(&up.upsample2_nearest()),
                None => x,
            };
            carry = Some(x.clone());
            fused[idx] = Some(x);
        }
        let levels = fused
            .into_iter()
            .enumerate()
            .map(|(idx, x)| {
                let x = x.expect("all levels fused");
                let x = self.post1[idx].forward(g, p, &x).silu();
                self.post2[idx].forward(g, p, &x).silu()
            })
            .collect();
        PixelFeatures { levels }
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }
}

/// Builds `f_mask`, `f_depth` (two per-pixel 2-layer MLPs on a shared
/// half-resolution base), and the condensed context feature `f_ctx`.
pub struct TaskFeatureNet {
    base_proj: Conv2d,
    mask_mlp: Mlp2,
    depth_mlp: Mlp2,
    ctx_conv1: Conv2d,
    ctx_conv2: Conv2d,
}

impl TaskFeatureNet {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        c1: usize,
        n_d: usize,
        ctx_stride: usize,
    ) -> Self {
        assert!(
            matches!(ctx_stride, 1 | 2 | 4),
            "context reduction supports strides 1, 2, 4"
        );
        let (s1, s2) = match ctx_stride {
            4 => (2, 2),
            2 => (2, 1),
            _ => (1, 1),
        };
        TaskFeatureNet {
            base_proj: Conv2d::new(params, rng, "task.base_proj", c1, n_d, 1, 1, 0),
            mask_mlp: Mlp2::new(params, rng, "task.mask_mlp", n_d, n_d, n_d),
            depth_mlp: Mlp2::new(params, rng, "task.depth_mlp", n_d, n_d, n_d),
            ctx_conv1: Conv2d::new(params, rng, "task.ctx_conv1", 2 * n_d, n_d, 3, s1, 1),
            ctx_conv2: Conv2d::new(params, rng, "task.ctx_conv2", n_d, n_d, 3, s2, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        pyr: &FeaturePyramid<T>,
        px: &PixelFeatures<T>,
    ) -> TaskFeatures<T> {
        // FPN step up to H/2: project backbone level 1 and add the upsampled
        // finest pixel-decoder level.
        let base = self
            .base_proj
            .forward(g, p, &pyr.levels[0])
            .add(&px.level(2).upsample2_nearest());
        let s = base.shape().to_vec();
        let (c, h2, w2) = (s[0], s[1], s[2]);
        // Task MLPs act per pixel on channels.
        let flat = base.reshape(&[c, h2 * w2]).transpose2();
        let f_mask = self
            .mask_mlp
            .forward(g, p, &flat)
            .transpose2()
            .reshape(&[c, h2, w2]);
        let f_depth = self
            .depth_mlp
            .forward(g, p, &flat)
            .transpose2()
            .reshape(&[c, h2, w2]);
        let cat = Tensor::concat(0, &[&f_depth, &f_mask]);
        let f_ctx = self.ctx_conv2.forward(g, p, &self.ctx_conv1.forward(g, p, &cat).silu()).silu();
        TaskFeatures { f_mask, f_depth, f_ctx }
    }
}

/// The full feature stack.
pub struct FeatureNet {
    pub backbone: Backbone,
    pub pixel_decoder: PixelDecoder,
    pub task_net: TaskFeatureNet,
}

impl FeatureNet {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        backbone_channels: &[usize],
        n_d: usize,
        ctx_stride: usize,
    ) -> Self {
        let backbone = Backbone::new(params, rng, backbone_channels);
        let pixel_decoder = PixelDecoder::new(params, rng, backbone_channels, n_d);
        let task_net = TaskFeatureNet::new(params, rng, backbone_channels[0], n_d, ctx_stride);
        FeatureNet { backbone, pixel_decoder, task_net }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        image: &Array3<f32>,
    ) -> Result<(PixelFeatures<T>, TaskFeatures<T>)> {
        let img = g.constant(image.mapv(|v| T::f(v as f64)).into_dyn());
        let pyr = self.backbone.extract_pyramid(g, p, &img)?;
        let px = self.pixel_decoder.forward(g, p, &pyr);
        let tf = self.task_net.forward(g, p, &pyr, &px);
        Ok((px, tf))
    }
}

// `Linear` is not used here but several heads import it alongside this
// module's types; keep the compiler honest about the dependency below.
#[allow(unused_imports)]
use Linear as _LinearUsedElsewhere;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_normal;
    use crate::tensor::Grads;
    use ndarray::{Array3, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(n_d: usize) -> (Params<f64>, FeatureNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::<f64>::new();
        let net = FeatureNet::new(&mut params, &mut rng, &[8, 12, 16, 20], n_d, 4);
        (params, net)
    }

    #[test]
    fn pyramid_shapes_and_determinism() {
        let (params, net) = build(8);
        let img = Array3::<f32>::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c + y * 3 + x) % 7) as f32 / 7.0
        });
        let g = Graph::inference();
        let imgc = g.constant(img.mapv(|v| v as f64).into_dyn());
        let pyr = net.backbone.extract_pyramid(&g, &params, &imgc).unwrap();
        assert_eq!(pyr.levels.len(), 4);
        for (i, lvl) in pyr.levels.iter().enumerate() {
            let s = 64 >> (i + 1);
            assert_eq!(lvl.shape(), &[net.backbone.channels()[i], s, s]);
        }
        let pyr2 = net.backbone.extract_pyramid(&g, &params, &imgc).unwrap();
        for (a, b) in pyr.levels.iter().zip(&pyr2.levels) {
            assert_eq!(a.value().as_slice(), b.value().as_slice());
        }
    }

    #[test]
    fn non_divisible_size_rejected() {
        let (params, net) = build(8);
        let g = Graph::<f64>::inference();
        let img = g.constant(ArrayD::zeros(IxDyn(&[3, 66, 64])));
        assert!(net.backbone.extract_pyramid(&g, &params, &img).is_err());
    }

    #[test]
    fn pixel_decoder_shapes_and_cross_scale_mixing() {
        let (params, net) = build(8);
        let g = Graph::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = g.constant(init_normal::<f64>(&mut rng, &[3, 64, 64], 0.5).mapv(f64::abs));
        let pyr = net.backbone.extract_pyramid(&g, &params, &img).unwrap();
        let px = net.pixel_decoder.forward(&g, &params, &pyr);
        assert_eq!(px.num_levels(), 3);
        for m in 2..=4 {
            let s = 64 >> m;
            assert_eq!(px.level(m).shape(), &[8, s, s]);
        }
        // Zero out the coarsest backbone level: level 2 output must change.
        let zeroed = FeaturePyramid {
            levels: pyr
                .levels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if i == 3 {
                        g.constant(ArrayD::zeros(IxDyn(l.shape())))
                    } else {
                        l.clone()
                    }
                })
                .collect(),
        };
        let px2 = net.pixel_decoder.forward(&g, &params, &zeroed);
        let diff: f64 = px
            .level(2)
            .value()
            .iter()
            .zip(px2.level(2).value().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "coarse level must influence fine output");
    }

    #[test]
    fn task_features_shapes_and_mlp_swap_symmetry() {
        let (mut params, net) = build(8);
        let img = Array3::<f32>::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 11) as f32 / 11.0
        });
        let g = Graph::inference();
        let (_, tf) = net.forward(&g, &params, &img).unwrap();
        assert_eq!(tf.f_mask.shape(), &[8, 32, 32]);
        assert_eq!(tf.f_depth.shape(), &[8, 32, 32]);
        assert_eq!(tf.f_ctx.shape(), &[8, 8, 8]);

        // Swapping the two task MLPs' weights swaps the outputs.
        for (a, b) in [
            (net.task_net.mask_mlp.lin1.w, net.task_net.depth_mlp.lin1.w),
            (net.task_net.mask_mlp.lin1.b, net.task_net.depth_mlp.lin1.b),
            (net.task_net.mask_mlp.lin2.w, net.task_net.depth_mlp.lin2.w),
            (net.task_net.mask_mlp.lin2.b, net.task_net.depth_mlp.lin2.b),
        ] {
            let av = params.value(a).clone();
            let bv = params.value(b).clone();
            *params.value_mut(a) = bv;
            *params.value_mut(b) = av;
        }
        let g2 = Graph::inference();
        let (_, tf2) = net.forward(&g2, &params, &img).unwrap();
        assert_eq!(tf.f_mask.value().as_slice(), tf2.f_depth.value().as_slice());
        assert_eq!(tf.f_depth.value().as_slice(), tf2.f_mask.value().as_slice());
    }

    #[test]
    fn gradients_reach_backbone() {
        let (params, net) = build(8);
        let img = Array3::<f32>::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c * 13 + y * 5 + x) % 9) as f32 / 9.0
        });
        let g = Graph::new();
        let (_, tf) = net.forward(&g, &params, &img).unwrap();
        let loss = tf.f_depth.sum_all();
        let grads: Grads<f64> = g.backward(&loss, params.len());
        let stage1_w = net.backbone.stages_first_weight();
        let gnorm: f64 = grads
            .get(stage1_w)
            .expect("gradient present")
            .iter()
            .map(|v| v * v)
            .sum();
        assert!(gnorm > 0.0, "backbone must receive gradient");
    }
}
