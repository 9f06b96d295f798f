//! Group-shared ROI scoring blocks.
//!
//! Every ROI is scored by the block of its group; ROIs in one group share
//! parameters, so the head size depends on the number of groups and the
//! layer widths but not on the number of ROIs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{kaiming_uniform, rng, SeededRng};
use crate::norm::{BatchNormState, Mode};
use crate::params::{Bindings, ParamStore};
use crate::pillars::PillarMatrix;
use crate::roi::RoiSchema;
use crate::tensor::Tensor;

/// What a hidden batch norm in a block normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeadNorm {
    /// Batch and all ROIs of the group jointly.
    #[default]
    GroupJoint,
    /// Batch only; each ROI keeps its own statistics, scale and shift are shared.
    BatchOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Widths of the hidden 1x1 layers; the last layer maps to one score.
    pub hidden: Vec<usize>,
    pub norm: HeadNorm,
    /// Fixed multiplier on the block output, in months per unit score.
    pub output_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            norm: HeadNorm::GroupJoint,
            output_scale: 12.0,
        }
    }
}

/// Assignment of ROIs to scoring blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub assignment: Vec<usize>,
    pub blocks: usize,
}

impl Grouping {
    /// One block per anatomy group.
    pub fn anatomy(schema: &RoiSchema) -> Self {
        Self {
            assignment: schema.groups().iter().map(|g| g.index()).collect(),
            blocks: 4,
        }
    }

    /// Every ROI shares one block.
    pub fn single(rois: usize) -> Self {
        Self {
            assignment: vec![0; rois],
            blocks: 1,
        }
    }

    /// Seeded random partition into `groups` non-empty blocks of near-equal size.
    pub fn random(seed: u64, groups: usize, rois: usize) -> Result<Self> {
        if groups == 0 || groups > rois {
            return Err(Error::InvalidConfig(format!(
                "cannot split {} ROIs into {} non-empty groups",
                rois, groups
            )));
        }
        let mut order: Vec<usize> = (0..rois).collect();
        order.shuffle(&mut rng(seed));
        let mut assignment = vec![0; rois];
        for (pos, &roi) in order.iter().enumerate() {
            assignment[roi] = pos % groups;
        }
        Ok(Self {
            assignment,
            blocks: groups,
        })
    }

    pub fn members(&self, block: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&n| self.assignment[n] == block)
            .collect()
    }

    pub fn rois(&self) -> usize {
        self.assignment.len()
    }
}

/// Scores of one radiograph, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct GroupHead {
    pub config: HeadConfig,
    pub input_width: usize,
    pub grouping: Grouping,
}

impl GroupHead {
    pub fn new(config: HeadConfig, input_width: usize, grouping: Grouping) -> Result<Self> {
        if input_width == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig("head widths must be positive".into()));
        }
        for b in 0..grouping.blocks {
            if grouping.members(b).is_empty() {
                return Err(Error::InvalidConfig(format!("scoring block {} has no ROIs", b)));
            }
        }
        Ok(Self {
            config,
            input_width,
            grouping,
        })
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_width];
        d.extend(&self.config.hidden);
        d.push(1);
        d
    }

    /// Closed-form parameter count: per block, every layer's weights and
    /// biases plus scale and shift of each hidden normalization.
    pub fn param_count(&self) -> usize {
        let d = self.dims();
        let per_block: usize = d.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
            + 2 * self.config.hidden.iter().sum::<usize>();
        per_block * self.grouping.blocks
    }

    pub fn init_params(&self, rng: &mut SeededRng, store: &mut ParamStore) {
        let d = self.dims();
        for b in 0..self.grouping.blocks {
            for (l, w) in d.windows(2).enumerate() {
                store.insert(
                    format!("head.block{}.fc{}.weight", b, l),
                    kaiming_uniform(rng, &[w[0], w[1]], w[0]),
                );
                store.insert(format!("head.block{}.fc{}.bias", b, l), Tensor::zeros(&[w[1]]));
                if l + 1 < d.len() - 1 {
                    store.insert(format!("head.block{}.bn{}.gamma", b, l), Tensor::ones(&[w[1]]));
                    store.insert(format!("head.block{}.bn{}.beta", b, l), Tensor::zeros(&[w[1]]));
                }
            }
        }
    }

    pub fn init_norm_states(&self, states: &mut BTreeMap<String, BatchNormState>) {
        for b in 0..self.grouping.blocks {
            let members = self.grouping.members(b).len();
            for (l, &h) in self.config.hidden.iter().enumerate() {
                let channels = match self.config.norm {
                    HeadNorm::GroupJoint => h,
                    HeadNorm::BatchOnly => h * members,
                };
                states.insert(format!("head.block{}.bn{}", b, l), BatchNormState::new(channels));
            }
        }
    }

    /// `x: (B*N) x f`, sample-major, to scores `(B*N) x 1`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Bindings,
        norms: &mut BTreeMap<String, BatchNormState>,
        x: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<Var> {
        let (rows, width) = g.value(x).dims2("agconv_scores")?;
        let n = self.grouping.rois();
        if width != self.input_width || rows != batch * n {
            return Err(Error::shape(
                "agconv_scores",
                format!(
                    "input {}x{} for {} samples of {} ROIs with head width {}",
                    rows, width, batch, n, self.input_width
                ),
            ));
        }
        let layers = self.config.hidden.len() + 1;
        let mut total: Option<Var> = None;
        for b in 0..self.grouping.blocks {
            let members = self.grouping.members(b);
            let idx: Vec<usize> = (0..batch).flat_map(|s| members.iter().map(move |&m| s * n + m)).collect();
            let mut h = g.gather_rows(x, &idx)?;
            for l in 0..layers {
                let w = params.var(&format!("head.block{}.fc{}.weight", b, l))?;
                let bias = params.var(&format!("head.block{}.fc{}.bias", b, l))?;
                h = g.matmul(h, w)?;
                h = g.add_row_bias(h, bias)?;
                if l + 1 < layers {
                    let name = format!("head.block{}.bn{}", b, l);
                    let gamma = params.var(&format!("{}.gamma", name))?;
                    let beta = params.var(&format!("{}.beta", name))?;
                    let state = norms
                        .get_mut(&name)
                        .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                    h = match self.config.norm {
                        HeadNorm::GroupJoint => state.apply(g, h, gamma, beta, mode)?,
                        HeadNorm::BatchOnly => {
                            let hid = self.config.hidden[l];
                            let wide = g.reshape(h, &[batch, members.len() * hid])?;
                            let normed = state.apply(g, wide, gamma, beta, mode)?;
                            g.reshape(normed, &[batch * members.len(), hid])?
                        }
                    };
                    h = g.relu(h);
                }
            }
            let placed = g.scatter_rows(h, &idx, rows)?;
            total = Some(match total {
                Some(t) => g.add(t, placed)?,
                None => placed,
            });
        }
        let total = total.expect("at least one block");
        Ok(if self.config.output_scale == 1.0 {
            total
        } else {
            g.scale(total, self.config.output_scale)
        })
    }

    /// Scores of a single radiograph in inference mode.
    pub fn scores(
        &self,
        params: &ParamStore,
        norms: &mut BTreeMap<String, BatchNormState>,
        x: &PillarMatrix,
    ) -> Result<ScoreVector> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x.x.clone());
        let s = self.forward(&mut g, &bound, norms, xv, 1, Mode::Infer)?;
        Ok(ScoreVector(g.value(s).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;

    fn head(hidden: Vec<usize>, width: usize, grouping: Grouping) -> (GroupHead, ParamStore, BTreeMap<String, BatchNormState>) {
        let cfg = HeadConfig {
            hidden,
            norm: HeadNorm::GroupJoint,
            output_scale: 1.0,
        };
        let h = GroupHead::new(cfg, width, grouping).unwrap();
        let mut p = ParamStore::new();
        h.init_params(&mut rng(11), &mut p);
        let mut s = BTreeMap::new();
        h.init_norm_states(&mut s);
        (h, p, s)
    }

    #[test]
    fn same_group_same_input_same_score() {
        let schema = RoiSchema::default_hand();
        let (h, p, mut s) = head(vec![8], 5, Grouping::anatomy(&schema));
        let mut rows = Vec::new();
        for n in 0..17 {
            rows.push(vec![n as f64 * 0.1, 1.0, -0.5, 0.0, 0.3]);
        }
        rows[1] = rows[0].clone(); // A1 and A2
        let x = PillarMatrix {
            x: Tensor::from_rows(&rows).unwrap(),
            channels: 2,
        };
        let scores = h.scores(&p, &mut s, &x).unwrap().0;
        assert_eq!(scores[0], scores[1]);
    }

    #[test]
    fn linear_block_is_weight_times_input() {
        let (h, mut p, mut s) = head(vec![], 1, Grouping::single(3));
        *p.get_mut("head.block0.fc0.weight").unwrap() = Tensor::new(vec![1, 1], vec![2.5]).unwrap();
        let x = PillarMatrix {
            x: Tensor::new(vec![3, 1], vec![1.0, -2.0, 4.0]).unwrap(),
            channels: 0,
        };
        assert_eq!(h.scores(&p, &mut s, &x).unwrap().0, vec![2.5, -5.0, 10.0]);
    }

    #[test]
    fn random_grouping_is_seeded_and_covers_blocks() {
        let a = Grouping::random(5, 4, 17).unwrap();
        assert_eq!(a, Grouping::random(5, 4, 17).unwrap());
        for b in 0..4 {
            assert!(!a.members(b).is_empty());
        }
        let one = Grouping::random(5, 1, 17).unwrap();
        assert!(one.assignment.iter().all(|&g| g == 0));
        let each = Grouping::random(5, 17, 17).unwrap();
        let mut seen = each.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
        assert!(Grouping::random(5, 18, 17).is_err());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (h, p, mut s) = head(vec![4], 6, Grouping::single(2));
        let x = PillarMatrix {
            x: Tensor::zeros(&[2, 5]),
            channels: 2,
        };
        assert!(matches!(
            h.scores(&p, &mut s, &x),
            Err(Error::ShapeMismatch { op: "agconv_scores", .. })
        ));
    }

    #[test]
    fn parameter_count_matches_store() {
        let schema = RoiSchema::default_hand();
        let (h, p, _) = head(vec![32, 16], 19, Grouping::anatomy(&schema));
        // per block: 19*32+32 + 32*16+16 + 16*1+1 + 2*(32+16)
        assert_eq!(h.param_count(), 4 * (640 + 528 + 17 + 96));
        assert_eq!(p.count_with_prefix("head."), h.param_count());
    }
}
