//! Checks shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use boneage_core::autodiff::{Graph, NormStats, Var, Window};
use boneage_core::backbone::BackboneConfig;
use boneage_core::data::{synth_generate, SynthConfig};
use boneage_core::dgam::{gconv, node_average, AttentionBlock, AttentionConfig, EmaState};
use boneage_core::gradcheck::{check, STEP};
use boneage_core::init::{derived_rng, SeededRng};
use boneage_core::norm::Mode;
use boneage_core::params::ParamStore;
use boneage_core::pillars::Gender;
use boneage_core::pipeline::{Model, ModelConfig};
use boneage_core::roi::{DualGraph, LaplacianMode, RoiSchema};
use boneage_core::scoring::{GroupHead, Grouping, HeadConfig};
use boneage_core::{Result, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

pub fn dense(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2("dense").unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

pub fn permutation(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Rows of `t` reordered so that new row `k` is old row `perm[k]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Contracts a non-scalar output with a fixed random tensor.
fn contract(g: &mut Graph, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = derived_rng(rng_seed, 99);
    let w = random(&mut rng, g.value(out).shape());
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var], u64) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = derived_rng(seed, 7);
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(1..5usize);
    let k = rng.random_range(1..4usize);
    let n = rng.random_range(2..5usize);
    let blocks = rng.random_range(1..4usize);
    let (hh, ww) = (rng.random_range(3..7usize), rng.random_range(3..7usize));
    let cin = rng.random_range(1..3usize);
    let cout = rng.random_range(1..3usize);
    let kernel = [1usize, 3][rng.random_range(0..2usize)];
    let stride = rng.random_range(1..3usize);
    let matrix = random(&mut rng, &[n, n]);
    let cells: Vec<(usize, usize, usize)> = (0..n)
        .map(|_| (rng.random_range(0..2usize), rng.random_range(0..hh), rng.random_range(0..ww)))
        .collect();
    let rows: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
    let distinct: Vec<usize> = {
        let mut v: Vec<usize> = (0..r + 2).collect();
        v.reverse();
        v.truncate(r);
        v
    };
    let target = random(&mut rng, &[r, c]);

    let mut out: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $build:expr) => {
            out.push(Case { name: $name, inputs: vec![$($input),*], build: Box::new($build) })
        };
    }
    case!("add", [random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.add(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("sub", [random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.sub(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("mul", [random(&mut rng, &[r, c]), random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.mul(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("scale", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.scale(v[0], -1.7);
        contract(g, o, s)
    });
    case!("add_scalar", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.add_scalar(v[0], 0.3);
        let o = g.mul(o, o)?;
        contract(g, o, s)
    });
    case!("matmul", [random(&mut rng, &[r, k]), random(&mut rng, &[k, c])], move |g, v, s| {
        let o = g.matmul(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("add_row_bias", [random(&mut rng, &[r, c]), random(&mut rng, &[c])], move |g, v, s| {
        let o = g.add_row_bias(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("relu", [away_from_zero(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.relu(v[0]);
        contract(g, o, s)
    });
    case!("sigmoid", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.sigmoid(v[0]);
        contract(g, o, s)
    });
    case!("abs", [away_from_zero(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.abs(v[0]);
        contract(g, o, s)
    });
    case!("sum", [random(&mut rng, &[r, c])], move |g, v, _| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    });
    case!("mean", [random(&mut rng, &[r, c])], move |g, v, _| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    });
    case!("row_sum", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.row_sum(v[0])?;
        contract(g, o, s)
    });
    case!("reshape", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.reshape(v[0], &[c, r])?;
        contract(g, o, s)
    });
    case!(
        "conv2d",
        [
            random(&mut rng, &[2, cin, hh, ww]),
            random(&mut rng, &[cout, cin, kernel, kernel]),
            random(&mut rng, &[cout])
        ],
        move |g, v, s| {
            let o = g.conv2d(v[0], v[1], Some(v[2]), Window::new(kernel, stride, kernel / 2))?;
            contract(g, o, s)
        }
    );
    case!("avg_pool2d", [random(&mut rng, &[2, cin, hh, ww])], move |g, v, s| {
        let o = g.avg_pool2d(v[0], Window::new(kernel.max(2), stride, kernel / 2))?;
        contract(g, o, s)
    });
    case!(
        "batch_norm",
        [random(&mut rng, &[r, c]), random(&mut rng, &[c]), random(&mut rng, &[c])],
        move |g, v, s| {
            let (o, _) = g.batch_norm(v[0], v[1], v[2], &NormStats::Batch { eps: 1e-5 })?;
            contract(g, o, s)
        }
    );
    case!(
        "batch_norm_spatial",
        [random(&mut rng, &[2, cin, hh, ww]), random(&mut rng, &[cin]), random(&mut rng, &[cin])],
        move |g, v, s| {
            let (o, _) = g.batch_norm(v[0], v[1], v[2], &NormStats::Batch { eps: 1e-5 })?;
            contract(g, o, s)
        }
    );
    let rows_c = rows.clone();
    case!("gather_rows", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.gather_rows(v[0], &rows_c)?;
        contract(g, o, s)
    });
    case!("scatter_rows", [random(&mut rng, &[r, c])], move |g, v, s| {
        let o = g.scatter_rows(v[0], &distinct, r + 2)?;
        contract(g, o, s)
    });
    case!("gather_pillars", [random(&mut rng, &[2, c, hh, ww])], move |g, v, s| {
        let o = g.gather_pillars(v[0], &cells)?;
        contract(g, o, s)
    });
    case!("concat_cols", [random(&mut rng, &[r, c]), random(&mut rng, &[r, k])], move |g, v, s| {
        let o = g.concat_cols(v[0], v[1])?;
        contract(g, o, s)
    });
    case!("block_mean", [random(&mut rng, &[blocks * n, c])], move |g, v, s| {
        let o = g.block_mean(v[0], n)?;
        contract(g, o, s)
    });
    case!("block_left_mul", [random(&mut rng, &[blocks * n, c])], move |g, v, s| {
        let o = g.block_left_mul(v[0], &matrix)?;
        contract(g, o, s)
    });
    case!("l1_loss", [random(&mut rng, &[r, c])], move |g, v, _| {
        // shift the prediction clear of the target so no residual is near zero
        let shifted = target.map(|t| t + if t >= 0.0 { -2.5 } else { 2.5 });
        let t = g.constant(shifted);
        g.l1_loss(v[0], t)
    });
    out
}

pub struct CaseError {
    pub name: &'static str,
    pub seed: u64,
    pub error: f64,
}

/// Relative error of every primitive case over seeds `0..seeds`.
pub fn primitive_errors(seeds: u64) -> Vec<CaseError> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for case in cases(seed) {
            let build = &case.build;
            let report = check(&case.inputs, 64, STEP, |g, v| build(g, v, seed)).unwrap();
            out.push(CaseError {
                name: case.name,
                seed,
                error: report.max_relative_error(),
            });
        }
    }
    out
}

/// Graph convolution, both attention gates and a linear read-out chained into
/// an L1 loss; returns the worst relative error over three seeds.
pub fn attention_chain_error() -> f64 {
    let schema = RoiSchema::default_hand();
    let graphs = DualGraph::build(&schema, LaplacianMode::Symmetric);
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = derived_rng(seed, 11);
        let f = 5;
        let inputs = vec![
            random(&mut rng, &[2 * 17, f]),
            random(&mut rng, &[f, f]),
            random(&mut rng, &[f, f]),
            random(&mut rng, &[f, 1]),
            random(&mut rng, &[f, 1]),
            random(&mut rng, &[f, 1]),
        ];
        let report = check(&inputs, 64, STEP, |g, v| {
            let att = gconv(g, v[0], &graphs, [v[1], v[2]], None)?;
            let att = g.sigmoid(att);
            let att = g.block_mean(att, 17)?;
            let xs = g.mul(att, v[0])?;
            let s = g.matmul(xs, v[5])?;
            let ctx = gconv(g, v[0], &graphs, [v[3], v[4]], None)?;
            let ctx = g.sigmoid(ctx);
            let weighted = g.mul(ctx, s)?;
            let per_sample = g.reshape(weighted, &[2, 17])?;
            let ages = g.row_sum(per_sample)?;
            let t = g.constant(Tensor::new(vec![2, 1], vec![40.0, -40.0])?);
            g.l1_loss(ages, t)
        })
        .unwrap();
        worst = worst.max(report.max_relative_error());
    }
    worst
}

#[derive(Debug)]
pub struct ComposedReport {
    pub seed: u64,
    pub tensors: usize,
    pub probed: usize,
    pub kinked: usize,
    /// Worst per-tensor relative error over the smooth coordinates.
    pub worst: f64,
    pub worst_tensor: String,
    pub grads_finite: bool,
}

/// The whole network on 64x64 inputs with C = 8, differentiated with respect
/// to every parameter tensor.
pub fn composed_model_check(seed: u64) -> ComposedReport {
    let schema = RoiSchema::default_hand();
    let data = synth_generate(
        &schema,
        &SynthConfig {
            count: 4,
            image_size: 64,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let batch: Vec<_> = data.iter().collect();
    let config = ModelConfig {
        backbone: BackboneConfig::small(8),
        seed,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, schema).unwrap();
    // targets far from the initial outputs keep the L1 residual signs fixed
    let target = Tensor::new(vec![batch.len(), 1], vec![500.0, -500.0, 500.0, -500.0]).unwrap();

    let loss_of = |model: &mut Model, want_grads: bool| {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let out = model.forward(&mut g, &bound, &batch, Mode::Train).unwrap();
        let t = g.constant(target.clone());
        let loss = g.l1_loss(out.ages, t).unwrap();
        let value = g.value(loss).item().unwrap();
        let grads = want_grads.then(|| bound.collect(&g.backward(loss).unwrap(), &model.params));
        (value, grads)
    };

    let grads = loss_of(&mut model, true).1.unwrap();
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let central = |model: &mut Model, name: &str, idx: usize, h: f64| {
        let orig = model.params.get(name).unwrap().data()[idx];
        model.params.get_mut(name).unwrap().data_mut()[idx] = orig + h;
        let plus = loss_of(model, false).0;
        model.params.get_mut(name).unwrap().data_mut()[idx] = orig - h;
        let minus = loss_of(model, false).0;
        model.params.get_mut(name).unwrap().data_mut()[idx] = orig;
        (plus - minus) / (2.0 * h)
    };
    let mut report = ComposedReport {
        seed,
        tensors: names.len(),
        probed: 0,
        kinked: 0,
        worst: 0.0,
        worst_tensor: String::new(),
        grads_finite: grads.values().all(Tensor::is_finite),
    };
    for name in &names {
        let n = model.params.get(name).unwrap().len();
        let stride = n.div_ceil(6).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for idx in (0..n).step_by(stride) {
            let numeric = central(&mut model, name, idx, STEP);
            report.probed += 1;
            // A ReLU switching inside the stencil makes the quotient depend
            // on the step; on smooth stretches the two agree to O(h^2).
            let finer = central(&mut model, name, idx, STEP / 4.0);
            if (numeric - finer).abs() > 1e-6 * numeric.abs().max(1.0) {
                report.kinked += 1;
                continue;
            }
            let a = grads[name].data()[idx];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = f64::max(a2, n2).sqrt();
        let rel = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
        if rel > report.worst {
            report.worst = rel;
            report.worst_tensor = name.clone();
        }
    }
    report
}

/// Max deviation of graph convolution from per-sample dense products over
/// `instances` random problems with `f_in, f_out <= 32`.
pub fn gconv_oracle_deviation(instances: u64) -> f64 {
    let schema = RoiSchema::default_hand();
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = derived_rng(seed, 21);
        let mode = if seed % 5 == 4 {
            LaplacianMode::Literal
        } else {
            LaplacianMode::Symmetric
        };
        let graphs = DualGraph::build(&schema, mode);
        let f_in = rng.random_range(1..=32usize);
        let f_out = rng.random_range(1..=32usize);
        let batch = rng.random_range(1..=3usize);
        let x = random(&mut rng, &[batch * 17, f_in]);
        let w = [random(&mut rng, &[f_in, f_out]), random(&mut rng, &[f_in, f_out])];
        let b = [random(&mut rng, &[f_out]), random(&mut rng, &[f_out])];

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = [g.constant(w[0].clone()), g.constant(w[1].clone())];
        let bv = [g.constant(b[0].clone()), g.constant(b[1].clone())];
        let out = gconv(&mut g, xv, &graphs, wv, Some(bv)).unwrap();
        let out = dense(g.value(out));

        let ones = DMatrix::from_element(17, 1, 1.0);
        for s in 0..batch {
            let xs = dense(&x).rows(s * 17, 17).into_owned();
            let mut expect = DMatrix::zeros(17, f_out);
            for j in 0..2 {
                let bias = DMatrix::from_row_slice(1, f_out, b[j].data());
                expect += dense(&graphs.propagation[j]) * &xs * dense(&w[j]) + &ones * bias;
            }
            expect *= 0.5;
            let got = out.rows(s * 17, 17);
            worst = worst.max((got - expect).amax());
        }
    }
    worst
}

#[derive(Debug)]
pub struct Spectrum {
    pub symmetric: bool,
    pub bottom: f64,
    pub top: f64,
    /// `max |L v - v|` for `v = D^1/2 1`.
    pub perron_residual: f64,
}

/// Dense eigensolve of both default-mode propagation matrices.
pub fn default_spectra() -> [Spectrum; 2] {
    let schema = RoiSchema::default_hand();
    let graphs = DualGraph::build(&schema, LaplacianMode::Symmetric);
    [0, 1].map(|j| {
        let l = dense(&graphs.propagation[j]);
        let eig = SymmetricEigen::new(l.clone());
        let v = DVector::from_iterator(17, graphs.degree[j].iter().map(|d| d.sqrt()));
        Spectrum {
            symmetric: l == l.transpose(),
            bottom: eig.eigenvalues.min(),
            top: eig.eigenvalues.max(),
            perron_residual: (&l * &v - &v).amax(),
        }
    })
}

pub fn block_params(block: &AttentionBlock, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    block.init_params(&mut derived_rng(seed, 1), &mut store);
    // non-zero biases so they take part in the check
    let mut rng = derived_rng(seed, 2);
    for (name, t) in store.iter_mut() {
        if name.contains(".b") {
            *t = random(&mut rng, t.shape());
        }
    }
    store
}

/// Max deviation between permuted outputs and outputs of permuted inputs for
/// both attention blocks, and of the node-averaged patient map, over random
/// relabelings in both Laplacian modes.
pub fn attention_equivariance_deviation(trials: u64) -> f64 {
    let schema = RoiSchema::default_hand();
    let cfg = AttentionConfig::default();
    let f = 11;
    let pab = AttentionBlock::patient(f, &cfg).unwrap();
    let cab = AttentionBlock::context(f, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = derived_rng(seed, 31);
        let mode = if seed % 2 == 0 {
            LaplacianMode::Symmetric
        } else {
            LaplacianMode::Literal
        };
        let graphs = DualGraph::build(&schema, mode);
        let perm = permutation(&mut rng, 17);
        let pgraphs = DualGraph::build(&schema.permuted(&perm).unwrap(), mode);
        let x = random(&mut rng, &[17, f]);
        let px = permute_rows(&x, &perm);
        for block in [&pab, &cab] {
            let params = block_params(block, seed);
            let out = block.run(&params, &x, &graphs).unwrap();
            let pout = block.run(&params, &px, &pgraphs).unwrap();
            assert_eq!(out.shape(), &[17, block.output_width()]);
            worst = worst.max(permute_rows(&out, &perm).max_abs_diff(&pout));
            if block.prefix == "pab" {
                let avg = node_average(&out).unwrap();
                let pavg = node_average(&pout).unwrap();
                worst = worst.max(avg.max_abs_diff(&pavg));
            }
        }
    }
    worst
}

/// Largest gap between the EMA after one initializing batch plus `k` constant
/// updates and `a + (1 - theta)^k (v0 - a)`.
pub fn ema_closed_form_deviation(k: i32) -> f64 {
    let mut worst: f64 = 0.0;
    for (theta, v0, a) in [(0.01, 0.9, 0.2), (0.05, -1.0, 3.0), (0.3, 0.0, 0.0), (0.001, 5.0, -2.0)] {
        let mut ema = EmaState::new(theta);
        let init = vec![v0; 17];
        ema.update(Gender::Male, &[&init], Mode::Train).unwrap();
        let target = vec![a; 17];
        for _ in 0..k {
            ema.update(Gender::Male, &[&target, &target], Mode::Train).unwrap();
        }
        let expect = a + (1.0 - theta).powi(k) * (v0 - a);
        for v in ema.map(Gender::Male).unwrap() {
            worst = worst.max((v - expect).abs());
        }
    }
    worst
}

/// Whether the first update of a fresh EMA stores exactly the batch mean.
pub fn first_ema_update_is_batch_mean(seed: u64) -> bool {
    let mut r = derived_rng(seed, 0);
    let maps: Vec<Vec<f64>> = (0..5).map(|_| (0..17).map(|_| r.random::<f64>()).collect()).collect();
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    let mut ema = EmaState::new(0.01);
    ema.update(Gender::Female, &refs, Mode::Train).unwrap();
    let state = ema.map(Gender::Female).unwrap();
    (0..17).all(|n| {
        let mut sum = 0.0;
        for m in &maps {
            sum += m[n];
        }
        state[n] == sum / 5.0
    })
}

pub fn head_with(assignment: Vec<usize>, width: usize, seed: u64) -> (GroupHead, ParamStore) {
    let head = GroupHead::new(HeadConfig::default(), width, Grouping { assignment, blocks: 4 }).unwrap();
    let mut store = ParamStore::new();
    head.init_params(&mut derived_rng(seed, 4), &mut store);
    let mut rng = derived_rng(seed, 5);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    (head, store)
}

/// Head parameter counts for the shipped grouping and for the same groups
/// with every ROI duplicated, at several pillar widths.
pub fn head_counts_17_and_34() -> Vec<(usize, usize, usize)> {
    let schema = RoiSchema::default_hand();
    let single: Vec<usize> = schema.groups().iter().map(|g| g.index()).collect();
    let doubled: Vec<usize> = single.iter().chain(&single).copied().collect();
    [8, 19, 67]
        .into_iter()
        .map(|width| {
            let (h17, s17) = head_with(single.clone(), width, 0);
            let (h34, s34) = head_with(doubled.clone(), width, 0);
            assert_eq!(h17.param_count(), s17.total_count());
            assert_eq!(h34.param_count(), s34.total_count());
            (width, h17.param_count(), h34.param_count())
        })
        .collect()
}
