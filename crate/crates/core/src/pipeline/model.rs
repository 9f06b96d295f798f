use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{GroupingMode, ModelConfig};
use crate::autodiff::{Graph, Var};
use crate::backbone::Backbone;
use crate::data::{Sample, SampleInput};
use crate::dgam::{AttentionBlock, ContextTraining, EmaState};
use crate::error::{Error, Result};
use crate::init::derived_rng;
use crate::norm::{BatchNormState, Mode};
use crate::params::{Bindings, ParamStore};
use crate::pillars::{project_position, Gender, EXTRA_FEATURES};
use crate::roi::{DualGraph, RoiSchema};
use crate::scoring::{GroupHead, Grouping};
use crate::tensor::Tensor;
use crate::DOWNSAMPLE;

/// Node-averaged feature attention and the context map that weighted the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub feature: Option<Vec<f64>>,
    pub context: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub age: f64,
    pub scores: Vec<f64>,
    pub weighted_scores: Vec<f64>,
    pub attention: AttentionSnapshot,
}

/// Graph handles of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `B x 1` predicted ages.
    pub ages: Var,
    /// `(B*N) x 1` raw scores.
    pub scores: Var,
    /// `(B*N) x 1` weighted scores.
    pub weighted: Var,
    /// `(B*N) x f` node-averaged feature attention.
    pub feature_attention: Option<Var>,
    /// `(B*N) x 1` context map actually applied.
    pub context: Option<Var>,
}

/// Per-module parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub pab: usize,
    pub cab: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn dgam(&self) -> usize {
        self.pab + self.cab
    }

    pub fn total(&self) -> usize {
        self.backbone + self.dgam() + self.head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: RoiSchema,
    pub graphs: DualGraph,
    pub backbone: Backbone,
    pub pab: AttentionBlock,
    pub cab: AttentionBlock,
    pub head: GroupHead,
    pub params: ParamStore,
    pub norms: BTreeMap<String, BatchNormState>,
    pub ema: EmaState,
}

impl Model {
    /// Builds a freshly initialized model. Every module draws from its own
    /// derived stream, so toggling one stage leaves the others' weights alone.
    pub fn new(config: ModelConfig, schema: RoiSchema) -> Result<Self> {
        config.validate()?;
        let graphs = DualGraph::build(&schema, config.laplacian);
        let backbone = Backbone::new(config.backbone.clone())?;
        let width = config.backbone.out_channels + EXTRA_FEATURES;
        let pab = AttentionBlock::patient(width, &config.attention)?;
        let cab = AttentionBlock::context(width, &config.attention)?;
        let grouping = match config.ablation.grouping {
            GroupingMode::Shared => Grouping::single(schema.len()),
            GroupingMode::Anatomy => Grouping::anatomy(&schema),
            GroupingMode::Random => Grouping::random(
                derived_rng_seed(config.seed, 5),
                crate::roi::AnatomyGroup::ALL.len(),
                schema.len(),
            )?,
        };
        let head = GroupHead::new(config.head.clone(), width, grouping)?;
        let mut params = ParamStore::new();
        backbone.init_params(&mut derived_rng(config.seed, 1), &mut params);
        pab.init_params(&mut derived_rng(config.seed, 2), &mut params);
        cab.init_params(&mut derived_rng(config.seed, 3), &mut params);
        head.init_params(&mut derived_rng(config.seed, 4), &mut params);
        let mut norms = BTreeMap::new();
        backbone.init_norm_states(&mut norms);
        head.init_norm_states(&mut norms);
        let ema = EmaState::new(config.ema_theta);
        Ok(Self {
            config,
            schema,
            graphs,
            backbone,
            pab,
            cab,
            head,
            params,
            norms,
            ema,
        })
    }

    pub fn rois(&self) -> usize {
        self.schema.len()
    }

    pub fn feature_width(&self) -> usize {
        self.config.backbone.out_channels + EXTRA_FEATURES
    }

    pub fn count_params(&self) -> ParamCounts {
        ParamCounts {
            backbone: self.params.count_with_prefix("backbone."),
            pab: self.params.count_with_prefix("pab."),
            cab: self.params.count_with_prefix("cab."),
            head: self.params.count_with_prefix("head."),
        }
    }

    /// Builds the batched forward pass on `g`. In training mode batch-norm
    /// running statistics move and each gender's context average absorbs the
    /// batch; in inference mode the stored averages replace the per-sample
    /// context maps.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &Bindings,
        samples: &[&Sample],
        mode: Mode,
    ) -> Result<ForwardVars> {
        let batch = samples.len();
        let n = self.rois();
        if batch == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        for s in samples {
            if s.centers.len() != n {
                return Err(Error::Sample {
                    id: s.id.clone(),
                    reason: format!("expected {} ROI centers, found {}", n, s.centers.len()),
                });
            }
        }
        let image_size = samples[0].input.image_size();
        if samples.iter().any(|s| s.input.image_size() != image_size) {
            return Err(Error::Dataset("samples in one batch must share an image size".into()));
        }
        let maps = self.feature_maps(g, params, samples, mode)?;
        let (_, channels, mh, mw) = g.value(maps).dims4("forward")?;
        if channels != self.config.backbone.out_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "feature maps have {} channels, model expects {}",
                    channels, self.config.backbone.out_channels
                ),
            ));
        }

        let mut cells = Vec::with_capacity(batch * n);
        let mut extra = Vec::with_capacity(batch * n * EXTRA_FEATURES);
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        for (b, s) in samples.iter().enumerate() {
            for c in &s.centers {
                if c.row >= image_size.0 || c.col >= image_size.1 {
                    return Err(Error::Sample {
                        id: s.id.clone(),
                        reason: format!("center ({}, {}) outside the image", c.row, c.col),
                    });
                }
                let (i, j) = project_position(*c, DOWNSAMPLE, (mh, mw))?;
                cells.push((b, i, j));
                extra.extend_from_slice(&[s.gender.bit() as f64, c.row as f64 / h, c.col as f64 / w]);
            }
        }
        let pillars = g.gather_pillars(maps, &cells)?;
        let extra = g.constant(Tensor::new(vec![batch * n, EXTRA_FEATURES], extra)?);
        let x = g.concat_cols(pillars, extra)?;

        let ablation = self.config.ablation;
        let (x_star, feature_attention) = if ablation.use_pa {
            let att = self.pab.forward(g, params, x, &self.graphs)?;
            let averaged = g.block_mean(att, n)?;
            (g.mul(averaged, x)?, Some(averaged))
        } else {
            (x, None)
        };
        let scores = self.head.forward(g, params, &mut self.norms, x_star, batch, mode)?;

        let (weighted, context) = if ablation.use_ca {
            let att = self.cab.forward(g, params, x, &self.graphs)?;
            let context = match mode {
                Mode::Train => {
                    let values = g.value(att).data().to_vec();
                    for gender in [Gender::Female, Gender::Male] {
                        let maps: Vec<&[f64]> = samples
                            .iter()
                            .enumerate()
                            .filter(|(_, s)| s.gender == gender)
                            .map(|(b, _)| &values[b * n..(b + 1) * n])
                            .collect();
                        self.ema.update(gender, &maps, mode)?;
                    }
                    match self.config.attention.context_training {
                        ContextTraining::PerSample => att,
                        ContextTraining::GenderBatchMean => {
                            let averaging = gender_averaging(samples);
                            let m = g.constant(averaging);
                            let rows = g.reshape(att, &[batch, n])?;
                            let mixed = g.matmul(m, rows)?;
                            g.reshape(mixed, &[batch * n, 1])?
                        }
                    }
                }
                Mode::Infer => {
                    let mut stored = Vec::with_capacity(batch * n);
                    for s in samples {
                        stored.extend_from_slice(self.ema.map(s.gender)?);
                    }
                    g.constant(Tensor::new(vec![batch * n, 1], stored)?)
                }
            };
            (g.mul(context, scores)?, Some(context))
        } else {
            (scores, None)
        };
        let per_sample = g.reshape(weighted, &[batch, n])?;
        let ages = g.row_sum(per_sample)?;
        Ok(ForwardVars {
            ages,
            scores,
            weighted,
            feature_attention,
            context,
        })
    }

    fn feature_maps(&mut self, g: &mut Graph, params: &Bindings, samples: &[&Sample], mode: Mode) -> Result<Var> {
        match &samples[0].input {
            SampleInput::Image(first) => {
                let (h, w) = (first.height, first.width);
                let mut data = Vec::with_capacity(samples.len() * h * w);
                for s in samples {
                    match &s.input {
                        SampleInput::Image(img) => data.extend_from_slice(&img.pixels),
                        SampleInput::Features(_) => {
                            return Err(Error::Dataset("a batch mixes images and feature maps".into()));
                        }
                    }
                }
                let images = g.constant(Tensor::new(vec![samples.len(), 1, h, w], data)?);
                self.backbone.forward(g, params, &mut self.norms, images, mode)
            }
            SampleInput::Features(first) => {
                let shape = first.tensor.shape().to_vec();
                let mut data = Vec::with_capacity(samples.len() * first.tensor.len());
                for s in samples {
                    match &s.input {
                        SampleInput::Features(fm) if fm.tensor.shape() == shape.as_slice() => {
                            data.extend_from_slice(fm.tensor.data())
                        }
                        _ => return Err(Error::Dataset("a batch mixes input kinds or map shapes".into())),
                    }
                }
                let mut full = vec![samples.len()];
                full.extend_from_slice(&shape);
                Ok(g.constant(Tensor::new(full, data)?))
            }
        }
    }

    /// Inference on a batch of samples.
    pub fn predict_batch(&mut self, samples: &[&Sample]) -> Result<Vec<PredictionRecord>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, samples, Mode::Infer)?;
        let n = self.rois();
        let f = self.feature_width();
        let ages = g.value(out.ages).data();
        let scores = g.value(out.scores).data();
        let weighted = g.value(out.weighted).data();
        Ok(samples
            .iter()
            .enumerate()
            .map(|(b, s)| PredictionRecord {
                id: s.id.clone(),
                age: ages[b],
                scores: scores[b * n..(b + 1) * n].to_vec(),
                weighted_scores: weighted[b * n..(b + 1) * n].to_vec(),
                attention: AttentionSnapshot {
                    feature: out
                        .feature_attention
                        .map(|v| g.value(v).data()[b * n * f..b * n * f + f].to_vec()),
                    context: out.context.map(|v| g.value(v).data()[b * n..(b + 1) * n].to_vec()),
                },
            })
            .collect())
    }

    /// Inference over a dataset in chunks of `batch` samples.
    pub fn predict(&mut self, samples: &[Sample], batch: usize) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(samples.len());
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(batch.max(1)) {
            out.extend(self.predict_batch(chunk)?);
        }
        Ok(out)
    }

    /// Every piece of state a checkpoint needs, keyed by name. Parameters keep
    /// their names; batch-norm statistics and the context averages live under
    /// `state.`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, s) in &self.norms {
            let c = s.running_mean.len();
            out.insert(
                format!("state.{}.running_mean", name),
                Tensor::new(vec![c], s.running_mean.clone()).expect("vector"),
            );
            out.insert(
                format!("state.{}.running_var", name),
                Tensor::new(vec![c], s.running_var.clone()).expect("vector"),
            );
        }
        for gender in [Gender::Female, Gender::Male] {
            if let Some(m) = &self.ema.maps[gender.index()] {
                out.insert(
                    format!("state.ema.{}", gender_key(gender)),
                    Tensor::new(vec![m.len()], m.clone()).expect("vector"),
                );
            }
        }
        out
    }

    /// Rebuilds a model from [`Model::state_tensors`] output. Every expected
    /// tensor must be present with its original shape.
    pub fn from_state(config: ModelConfig, schema: RoiSchema, mut state: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = Model::new(config, schema)?;
        let names: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = take(&mut state, &name, &shape)?;
            *model.params.get_mut(&name)? = t;
        }
        for (name, s) in model.norms.iter_mut() {
            let c = s.running_mean.len();
            s.running_mean = take(&mut state, &format!("state.{}.running_mean", name), &[c])?.into_data();
            s.running_var = take(&mut state, &format!("state.{}.running_var", name), &[c])?.into_data();
        }
        for gender in [Gender::Female, Gender::Male] {
            let key = format!("state.ema.{}", gender_key(gender));
            if state.contains_key(&key) {
                let n = model.rois();
                model.ema.maps[gender.index()] = Some(take(&mut state, &key, &[n])?.into_data());
            }
        }
        if let Some(extra) = state.keys().next() {
            return Err(Error::UnknownParameter(format!("unexpected tensor `{}`", extra)));
        }
        Ok(model)
    }
}

fn take(state: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = state
        .remove(name)
        .ok_or_else(|| Error::UnknownParameter(format!("missing tensor `{}`", name)))?;
    if t.shape() != shape {
        return Err(Error::shape(
            "load_state",
            format!("`{}` has shape {:?}, expected {:?}", name, t.shape(), shape),
        ));
    }
    Ok(t)
}

/// `B x B` matrix averaging over the samples of the same gender.
fn gender_averaging(samples: &[&Sample]) -> Tensor {
    let b = samples.len();
    let mut m = Tensor::zeros(&[b, b]);
    for (i, si) in samples.iter().enumerate() {
        let same = samples.iter().filter(|s| s.gender == si.gender).count() as f64;
        for (j, sj) in samples.iter().enumerate() {
            if sj.gender == si.gender {
                m.data_mut()[i * b + j] = 1.0 / same;
            }
        }
    }
    m
}

fn gender_key(g: Gender) -> &'static str {
    match g {
        Gender::Female => "female",
        Gender::Male => "male",
    }
}

fn derived_rng_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    derived_rng(seed, tag).next_u64()
}
