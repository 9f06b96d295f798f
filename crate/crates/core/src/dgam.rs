//! Dual-graph attention: patient-specific feature attention and
//! gender-conditioned context attention over ROI scores.
//!
//! Both blocks are stacks of two-graph convolutions
//! `X' = 1/2 * sum_j L_j X W_j`, hidden layers followed by ReLU and the last
//! one by a bounding nonlinearity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::{kaiming_uniform, SeededRng};
use crate::norm::Mode;
use crate::params::{Bindings, ParamStore};
use crate::pillars::Gender;
use crate::roi::DualGraph;
use crate::tensor::Tensor;

/// Output nonlinearity of an attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Bounding {
    #[default]
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Number of stacked graph convolutions in the feature-attention block;
    /// every layer keeps width `f`.
    pub pab_depth: usize,
    /// Hidden widths of the context-attention block, which ends at width 1.
    pub cab_hidden: Vec<usize>,
    pub bounding: Bounding,
    /// Per-graph bias on every graph convolution.
    pub bias: bool,
    pub context_training: ContextTraining,
}

/// Which context map weights the scores of a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContextTraining {
    /// Each sample's own map.
    PerSample,
    /// The mean map of the sample's gender within the batch, the quantity
    /// the moving average tracks.
    #[default]
    GenderBatchMean,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            pab_depth: 2,
            cab_hidden: vec![32],
            bounding: Bounding::Sigmoid,
            bias: true,
            context_training: ContextTraining::GenderBatchMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GConvLayer {
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

/// `1/2 (L1 X W1 + L2 X W2)` for a sample-major stack of `N`-row blocks,
/// with optional per-graph row biases.
pub fn gconv(
    g: &mut Graph,
    x: Var,
    graphs: &DualGraph,
    weights: [Var; 2],
    biases: Option<[Var; 2]>,
) -> Result<Var> {
    let (_, f_in) = g.value(x).dims2("gconv")?;
    let (r1, c1) = g.value(weights[0]).dims2("gconv")?;
    let (r2, c2) = g.value(weights[1]).dims2("gconv")?;
    if r1 != f_in || r2 != f_in || c1 != c2 {
        return Err(Error::shape(
            "gconv",
            format!("input width {} with weights {}x{} and {}x{}", f_in, r1, c1, r2, c2),
        ));
    }
    let mut branches = [x; 2];
    for j in 0..2 {
        let propagated = g.block_left_mul(x, &graphs.propagation[j])?;
        let mut b = g.matmul(propagated, weights[j])?;
        if let Some(bs) = biases {
            b = g.add_row_bias(b, bs[j])?;
        }
        branches[j] = b;
    }
    let sum = g.add(branches[0], branches[1])?;
    Ok(g.scale(sum, 0.5))
}

/// A stack of graph convolutions with a bounded output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub prefix: String,
    pub layers: Vec<GConvLayer>,
    pub bounding: Bounding,
}

impl AttentionBlock {
    /// Patient-specific attention: `depth` layers of width `f`.
    pub fn patient(width: usize, cfg: &AttentionConfig) -> Result<Self> {
        if cfg.pab_depth == 0 {
            return Err(Error::InvalidConfig("attention depth must be positive".into()));
        }
        Self::stack("pab", &vec![width; cfg.pab_depth + 1], cfg)
    }

    /// Context attention: `f -> hidden.. -> 1`.
    pub fn context(width: usize, cfg: &AttentionConfig) -> Result<Self> {
        let mut dims = vec![width];
        dims.extend(&cfg.cab_hidden);
        dims.push(1);
        Self::stack("cab", &dims, cfg)
    }

    /// A block with explicit layer widths `dims[0] -> .. -> dims[last]`.
    pub fn stack(prefix: &str, dims: &[usize], cfg: &AttentionConfig) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad attention widths {:?}", dims)));
        }
        Ok(Self {
            prefix: prefix.into(),
            layers: dims
                .windows(2)
                .map(|w| GConvLayer {
                    input: w[0],
                    output: w[1],
                    bias: cfg.bias,
                })
                .collect(),
            bounding: cfg.bounding,
        })
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * l.input * l.output + if l.bias { 2 * l.output } else { 0 })
            .sum()
    }

    pub fn init_params(&self, rng: &mut SeededRng, store: &mut ParamStore) {
        for (k, l) in self.layers.iter().enumerate() {
            for j in 1..=2 {
                store.insert(
                    format!("{}.gconv{}.w{}", self.prefix, k, j),
                    kaiming_uniform(rng, &[l.input, l.output], l.input),
                );
                if l.bias {
                    store.insert(format!("{}.gconv{}.b{}", self.prefix, k, j), Tensor::zeros(&[l.output]));
                }
            }
        }
    }

    /// `x: (B*N) x f` to `(B*N) x output_width`.
    pub fn forward(&self, g: &mut Graph, params: &Bindings, x: Var, graphs: &DualGraph) -> Result<Var> {
        let mut h = x;
        for (k, l) in self.layers.iter().enumerate() {
            let w = [
                params.var(&format!("{}.gconv{}.w1", self.prefix, k))?,
                params.var(&format!("{}.gconv{}.w2", self.prefix, k))?,
            ];
            let b = if l.bias {
                Some([
                    params.var(&format!("{}.gconv{}.b1", self.prefix, k))?,
                    params.var(&format!("{}.gconv{}.b2", self.prefix, k))?,
                ])
            } else {
                None
            };
            h = gconv(g, h, graphs, w, b)?;
            if k + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(match self.bounding {
            Bounding::Sigmoid => g.sigmoid(h),
            Bounding::Identity => h,
        })
    }

    /// Evaluates the block on one `N x f` node matrix.
    pub fn run(&self, params: &ParamStore, x: &Tensor, graphs: &DualGraph) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, graphs)?;
        Ok(g.value(out).clone())
    }
}

/// Replaces every row with the mean row.
pub fn node_average(att: &Tensor) -> Result<Tensor> {
    let (n, _) = att.dims2("node_average")?;
    let mut g = Graph::new();
    let x = g.constant(att.clone());
    let y = g.block_mean(x, n)?;
    Ok(g.value(y).clone())
}

/// `(X*, S*) = (att_x ⊙ X, context ⊙ S)`.
pub fn apply_attention(x: &Tensor, s: &Tensor, att_x: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        x.zip_map(att_x, "apply_attention", |a, b| a * b)?,
        s.zip_map(context, "apply_attention", |a, b| a * b)?,
    ))
}

/// Per-gender exponential moving average of context attention maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub theta: f64,
    /// Indexed by [`Gender::index`]; `None` until the first update.
    pub maps: [Option<Vec<f64>>; 2],
}

impl EmaState {
    pub const DEFAULT_THETA: f64 = 0.01;

    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            maps: [None, None],
        }
    }

    pub fn is_initialized(&self, gender: Gender) -> bool {
        self.maps[gender.index()].is_some()
    }

    /// Folds the mean of this batch's maps for `gender` into the average.
    /// The first update copies the batch mean; an empty batch is skipped.
    pub fn update(&mut self, gender: Gender, batch: &[&[f64]], mode: Mode) -> Result<()> {
        if mode == Mode::Infer {
            return Err(Error::EmaInInference);
        }
        let Some(first) = batch.first() else {
            return Ok(());
        };
        let n = first.len();
        if batch.iter().any(|m| m.len() != n) {
            return Err(Error::shape("ema_update", "maps of different lengths".into()));
        }
        let mut mean = vec![0.0; n];
        for m in batch {
            for (acc, v) in mean.iter_mut().zip(m.iter()) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= batch.len() as f64;
        }
        let theta = self.theta;
        match &mut self.maps[gender.index()] {
            Some(state) => {
                if state.len() != n {
                    return Err(Error::shape("ema_update", format!("state {} vs map {}", state.len(), n)));
                }
                for (s, m) in state.iter_mut().zip(&mean) {
                    *s = (1.0 - theta) * *s + theta * m;
                }
            }
            slot => *slot = Some(mean),
        }
        Ok(())
    }

    pub fn map(&self, gender: Gender) -> Result<&[f64]> {
        self.maps[gender.index()]
            .as_deref()
            .ok_or(Error::EmaUninitialized(gender.bit()))
    }
}
