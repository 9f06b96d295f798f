//! A small multi-scale encoder producing a 16x down-sampled feature map.
//!
//! Four stride-2 3x3 convolution stages (batch norm + ReLU) reach strides 2,
//! 4, 8 and 16. The stride-16 top path passes through a 3x3 average pool
//! (stride 1). The stride-8 branch is projected by a 1x1 convolution,
//! brought to stride 16 and added to the top path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, Window};
use crate::error::{Error, Result};
use crate::init::{kaiming_uniform, SeededRng};
use crate::norm::{BatchNormState, Mode};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use crate::DOWNSAMPLE;

/// How the stride-8 branch is brought to stride 16 before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LateralDownsample {
    /// 1x1 projection, then 2x2 average pooling.
    #[default]
    AvgPool,
    /// 1x1 projection with stride 2.
    Stride,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the stride-2, -4 and -8 stages.
    pub stage_widths: [usize; 3],
    /// Channels `C` of the output feature map.
    pub out_channels: usize,
    pub lateral: LateralDownsample,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: [16, 32, 64],
            out_channels: 64,
            lateral: LateralDownsample::AvgPool,
        }
    }
}

impl BackboneConfig {
    /// A desk-scale encoder with `C = out_channels` and narrower early stages.
    pub fn small(out_channels: usize) -> Self {
        Self {
            stage_widths: [(out_channels / 4).max(1), (out_channels / 2).max(1), out_channels],
            out_channels,
            lateral: LateralDownsample::AvgPool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone widths must be positive, got {:?} -> {}",
                self.stage_widths, self.out_channels
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of the encoder.
    pub fn param_count(&self) -> usize {
        let [c1, c2, c3] = self.stage_widths;
        let c = self.out_channels;
        let stage = |cin: usize, cout: usize| cout * cin * 9 + 2 * cout;
        stage(1, c1) + stage(c1, c2) + stage(c2, c3) + stage(c3, c) + c * c3 + c
    }
}

/// A `C x H/16 x W/16` map plus the size of the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub image_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(tensor: Tensor, image_size: (usize, usize)) -> Result<Self> {
        let shape = tensor.shape();
        let ok = shape.len() == 3
            && shape[1] == image_size.0 / DOWNSAMPLE
            && shape[2] == image_size.1 / DOWNSAMPLE;
        if !ok {
            return Err(Error::shape(
                "feature_map",
                format!("tensor {:?} for a {}x{} image", shape, image_size.0, image_size.1),
            ));
        }
        Ok(Self { tensor, image_size })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

/// One layer as reported by [`Backbone::layers`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: &'static str,
    /// Cumulative down-sampling of the layer's output.
    pub stride: usize,
    pub out_channels: usize,
}

const STAGES: [&str; 4] = ["stem", "stage2", "stage3", "stage4"];

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn widths(&self) -> [usize; 5] {
        let [c1, c2, c3] = self.config.stage_widths;
        [1, c1, c2, c3, self.config.out_channels]
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let w = self.widths();
        let mut out: Vec<LayerInfo> = STAGES
            .iter()
            .enumerate()
            .map(|(k, &name)| LayerInfo {
                name,
                stride: 2 << k,
                out_channels: w[k + 1],
            })
            .collect();
        out.push(LayerInfo {
            name: "top_avgpool3x3",
            stride: 16,
            out_channels: self.config.out_channels,
        });
        out.push(LayerInfo {
            name: "lateral",
            stride: 16,
            out_channels: self.config.out_channels,
        });
        out
    }

    /// Strides of the branches that reach the fused output.
    pub fn branch_strides(&self) -> [usize; 2] {
        [8, 16]
    }

    /// Adds seeded parameters under `backbone.*`.
    pub fn init_params(&self, rng: &mut SeededRng, store: &mut ParamStore) {
        let w = self.widths();
        for (k, name) in STAGES.iter().enumerate() {
            let (cin, cout) = (w[k], w[k + 1]);
            store.insert(
                format!("backbone.{}.conv", name),
                kaiming_uniform(rng, &[cout, cin, 3, 3], cin * 9),
            );
            store.insert(format!("backbone.{}.bn.gamma", name), Tensor::ones(&[cout]));
            store.insert(format!("backbone.{}.bn.beta", name), Tensor::zeros(&[cout]));
        }
        let (c3, c) = (w[3], w[4]);
        store.insert("backbone.lateral.weight", kaiming_uniform(rng, &[c, c3, 1, 1], c3));
        store.insert("backbone.lateral.bias", Tensor::zeros(&[c]));
    }

    pub fn init_norm_states(&self, states: &mut BTreeMap<String, BatchNormState>) {
        let w = self.widths();
        for (k, name) in STAGES.iter().enumerate() {
            states.insert(format!("backbone.{}.bn", name), BatchNormState::new(w[k + 1]));
        }
    }

    /// `images: B x 1 x H x W` to `B x C x H/16 x W/16`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Bindings,
        norms: &mut BTreeMap<String, BatchNormState>,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (_, ch, h, w) = g.value(images).dims4("forward_backbone")?;
        if ch != 1 {
            return Err(Error::shape("forward_backbone", format!("expected 1 channel, got {}", ch)));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleInput {
                height: h,
                width: w,
                factor: DOWNSAMPLE,
            });
        }
        let mut x = images;
        let mut eight = None;
        for (k, name) in STAGES.iter().enumerate() {
            let wt = params.var(&format!("backbone.{}.conv", name))?;
            x = g.conv2d(x, wt, None, Window::new(3, 2, 1))?;
            let bn_name = format!("backbone.{}.bn", name);
            let gamma = params.var(&format!("{}.gamma", bn_name))?;
            let beta = params.var(&format!("{}.beta", bn_name))?;
            let state = norms
                .get_mut(&bn_name)
                .ok_or_else(|| Error::UnknownParameter(bn_name.clone()))?;
            x = state.apply(g, x, gamma, beta, mode)?;
            x = g.relu(x);
            if k == 2 {
                eight = Some(x);
            }
        }
        let top = g.avg_pool2d(x, Window::new(3, 1, 1))?;
        let eight = eight.expect("stage3 ran");
        let lw = params.var("backbone.lateral.weight")?;
        let lb = params.var("backbone.lateral.bias")?;
        let lateral = match self.config.lateral {
            LateralDownsample::AvgPool => {
                let p = g.conv2d(eight, lw, Some(lb), Window::new(1, 1, 0))?;
                g.avg_pool2d(p, Window::new(2, 2, 0))?
            }
            LateralDownsample::Stride => g.conv2d(eight, lw, Some(lb), Window::new(1, 2, 0))?,
        };
        g.add(top, lateral)
    }

    /// Runs the encoder outside of training and splits the batch into maps.
    pub fn run(
        &self,
        params: &ParamStore,
        norms: &mut BTreeMap<String, BatchNormState>,
        images: &Tensor,
        mode: Mode,
    ) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &bound, norms, x, mode)?;
        split_feature_maps(g.value(out), (images.shape()[2], images.shape()[3]))
    }
}

pub fn split_feature_maps(batch: &Tensor, image_size: (usize, usize)) -> Result<Vec<FeatureMap>> {
    let (b, c, h, w) = batch.dims4("feature_maps")?;
    let per = c * h * w;
    (0..b)
        .map(|i| {
            let t = Tensor::new(vec![c, h, w], batch.data()[i * per..(i + 1) * per].to_vec())?;
            FeatureMap::new(t, image_size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;

    fn build(c: usize, seed: u64) -> (Backbone, ParamStore, BTreeMap<String, BatchNormState>) {
        let bb = Backbone::new(BackboneConfig::small(c)).unwrap();
        let mut store = ParamStore::new();
        bb.init_params(&mut rng(seed), &mut store);
        let mut norms = BTreeMap::new();
        bb.init_norm_states(&mut norms);
        (bb, store, norms)
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(build(16, 3).1, build(16, 3).1);
        assert_ne!(build(16, 3).1, build(16, 4).1);
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        // C=16, widths 4/8/16:
        // 4*1*9+8 + 8*4*9+16 + 16*8*9+32 + 16*16*9+32 + 16*16+16
        let expected = (36 + 8) + (288 + 16) + (1152 + 32) + (2304 + 32) + (256 + 16);
        let (bb, store, _) = build(16, 0);
        assert_eq!(bb.config.param_count(), expected);
        assert_eq!(store.total_count(), expected);
    }

    #[test]
    fn reports_both_branches() {
        let (bb, _, _) = build(8, 0);
        assert_eq!(bb.branch_strides(), [8, 16]);
        let strides: Vec<usize> = bb.layers().iter().map(|l| l.stride).collect();
        assert!(strides.contains(&8) && strides.contains(&16));
        assert!(bb.layers().iter().any(|l| l.name == "top_avgpool3x3"));
    }

    #[test]
    fn zero_width_is_rejected() {
        let cfg = BackboneConfig {
            stage_widths: [4, 0, 8],
            out_channels: 8,
            lateral: LateralDownsample::AvgPool,
        };
        assert!(Backbone::new(cfg).is_err());
    }

    #[test]
    fn output_is_sixteen_times_smaller() {
        let (bb, store, mut norms) = build(8, 1);
        for (h, w) in [(256, 256), (64, 32)] {
            let img = Tensor::full(&[2, 1, h, w], 0.3);
            let maps = bb.run(&store, &mut norms, &img, Mode::Infer).unwrap();
            assert_eq!(maps.len(), 2);
            assert_eq!(maps[0].tensor.shape(), &[8, h / 16, w / 16]);
        }
    }

    #[test]
    fn indivisible_input_asks_for_resize() {
        let (bb, store, mut norms) = build(8, 1);
        let img = Tensor::zeros(&[1, 1, 40, 64]);
        let err = bb.run(&store, &mut norms, &img, Mode::Infer).unwrap_err();
        assert!(matches!(err, Error::IndivisibleInput { height: 40, .. }));
        assert!(format!("{}", err).contains("resize"));
    }

    #[test]
    fn stride_fusion_has_same_shape() {
        let mut cfg = BackboneConfig::small(8);
        cfg.lateral = LateralDownsample::Stride;
        let bb = Backbone::new(cfg).unwrap();
        let mut store = ParamStore::new();
        bb.init_params(&mut rng(0), &mut store);
        let mut norms = BTreeMap::new();
        bb.init_norm_states(&mut norms);
        let maps = bb.run(&store, &mut norms, &Tensor::full(&[1, 1, 64, 64], 0.5), Mode::Infer).unwrap();
        assert_eq!(maps[0].tensor.shape(), &[8, 4, 4]);
    }
}
