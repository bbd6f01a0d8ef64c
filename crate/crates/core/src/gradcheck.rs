//! Central finite-difference checks of every differentiable operation and of
//! the composite network blocks, in f64.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_xoshiro::SplitMix64;

use crate::autodiff::{Backward, BackwardCx, Conv3dOpts, Graph, SampleMap, Var};
use crate::camera::{view_transform, CameraModel, ViewPlan};
use crate::diffusion::{Aggregation, Aic, Aspp, Mssd, SeedSplit};
use crate::error::Result;
use crate::losses::{bce, cross_entropy, lovasz_softmax, scal, ssc_loss, ScalMode};
use crate::params::ParamStore;
use crate::rng;
use crate::sparse::{Seb, SparseCoords, SparseLevels};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
/// Coordinates probed per tensor; smaller tensors are checked in full.
pub const MAX_PROBES: usize = 24;

type Forward = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub store: ParamStore<f64>,
    forward: Forward,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        store: ParamStore<f64>,
        forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            store,
            forward: Box::new(forward),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over probed coordinates.
    pub max_rel_err: f64,
    pub probes: usize,
}

impl CaseReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Scalar objective: the output itself, or its dot product with fixed random
/// weights when it has more than one element.
fn objective(case: &GradCase, g: &mut Graph<f64>, inputs: &[Tensor<f64>], store: &ParamStore<f64>, weights: &mut Option<Tensor<f64>>) -> Result<(Vec<Var>, Var)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(g, store, &vars)?;
    if g.value(out).numel() == 1 {
        return Ok((vars, out));
    }
    let w = weights.get_or_insert_with(|| {
        let mut r = rng::stream(g.value(out).numel() as u64, "gradcheck-weights");
        let data = (0..g.value(out).numel()).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        Tensor::new(g.shape(out).to_vec(), data).unwrap()
    });
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    Ok((vars, g.sum(prod)))
}

fn probe_indices(n: usize, r: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > MAX_PROBES {
        idx.shuffle(r);
        idx.truncate(MAX_PROBES);
        idx.sort_unstable();
    }
    idx
}

pub fn check_case(case: &GradCase, seed: u64) -> Result<CaseReport> {
    let mut weights = None;
    let mut g = Graph::new();
    let (vars, loss) = objective(case, &mut g, &case.inputs, &case.store, &mut weights)?;
    g.backward(loss)?;
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut param_grads: Vec<Vec<f64>> = case.store.ids().map(|id| vec![0.0; case.store.get(id).numel()]).collect();
    for (id, gr) in g.param_grads() {
        param_grads[id.index()] = gr.to_vec();
    }

    let eval = |inputs: &[Tensor<f64>], store: &ParamStore<f64>, weights: &mut Option<Tensor<f64>>| -> Result<f64> {
        let mut g = Graph::new();
        let (_, loss) = objective(case, &mut g, inputs, store, weights)?;
        Ok(g.value(loss).item())
    };
    let mut r = rng::stream(seed, &case.name);
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut record = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        probes += 1;
    };

    let mut inputs = case.inputs.clone();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in probe_indices(grad.len(), &mut r) {
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + STEP;
            let plus = eval(&inputs, &case.store, &mut weights)?;
            inputs[k].data_mut()[i] = x0 - STEP;
            let minus = eval(&inputs, &case.store, &mut weights)?;
            inputs[k].data_mut()[i] = x0;
            record(grad[i], plus, minus);
        }
    }
    let mut store = case.store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&param_grads) {
        for i in probe_indices(grad.len(), &mut r) {
            let x0 = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = x0 + STEP;
            let plus = eval(&case.inputs, &store, &mut weights)?;
            store.get_mut(id).data_mut()[i] = x0 - STEP;
            let minus = eval(&case.inputs, &store, &mut weights)?;
            store.get_mut(id).data_mut()[i] = x0;
            record(grad[i], plus, minus);
        }
    }
    Ok(CaseReport {
        name: case.name.clone(),
        max_rel_err: worst,
        probes,
    })
}

fn uniform(r: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(r, lo, hi)).collect()).unwrap()
}

/// Values whose magnitude is at least `margin` from every point in `kinks`.
fn away_from(r: &mut SplitMix64, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor<f64> {
    let mut t = uniform(r, shape, -2.0, 2.0);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng::uniform(r, -2.0, 2.0);
        }
    }
    t
}

fn labels(r: &mut SplitMix64, n: usize, classes: usize, invalid: bool) -> Vec<u8> {
    let mut l: Vec<u8> = (0..n).map(|_| r.random_range(0..classes) as u8).collect();
    // every class present keeps each per-class term active
    for (i, v) in l.iter_mut().take(classes).enumerate() {
        *v = i as u8;
    }
    if invalid && n > classes {
        l[n - 1] = crate::voxel::INVALID;
    }
    l.shuffle(r);
    l
}

fn random_coords(r: &mut SplitMix64, dims: [usize; 3], n: usize) -> Vec<[usize; 3]> {
    let mut all: Vec<[usize; 3]> = (0..dims[0])
        .flat_map(|x| (0..dims[1]).flat_map(move |y| (0..dims[2]).map(move |z| [x, y, z])))
        .collect();
    all.shuffle(r);
    all.truncate(n);
    all
}

fn empty() -> ParamStore<f64> {
    ParamStore::new(0)
}

fn primitive_cases(r: &mut SplitMix64) -> Vec<GradCase> {
    let mut v = Vec::new();
    let n = r.random_range(2..6);
    let m = r.random_range(2..5);
    let s = [n, m];

    let binary: [(&str, fn(&mut Graph<f64>, Var, Var) -> Result<Var>); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, f) in binary {
        v.push(GradCase::new(name, vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)], empty(), move |g, _, x| f(g, x[0], x[1])));
    }
    v.push(GradCase::new("div", vec![uniform(r, &s, -2.0, 2.0), uniform(r, &s, 0.5, 2.0)], empty(), |g, _, x| g.div(x[0], x[1])));
    let c = rng::uniform(r, -2.0, 2.0);
    v.push(GradCase::new("scale", vec![uniform(r, &s, -2.0, 2.0)], empty(), move |g, _, x| Ok(g.scale(x[0], c))));
    v.push(GradCase::new("add_scalar", vec![uniform(r, &s, -2.0, 2.0)], empty(), move |g, _, x| Ok(g.add_scalar(x[0], c))));
    v.push(GradCase::new("one_minus", vec![uniform(r, &s, -2.0, 2.0)], empty(), |g, _, x| Ok(g.one_minus(x[0]))));
    v.push(GradCase::new("relu", vec![away_from(r, &s, &[0.0], 1e-3)], empty(), |g, _, x| Ok(g.relu(x[0]))));
    v.push(GradCase::new("sigmoid", vec![uniform(r, &s, -4.0, 4.0)], empty(), |g, _, x| Ok(g.sigmoid(x[0]))));
    v.push(GradCase::new("exp", vec![uniform(r, &s, -2.0, 2.0)], empty(), |g, _, x| Ok(g.exp(x[0]))));
    v.push(GradCase::new("log", vec![uniform(r, &s, 0.2, 3.0)], empty(), |g, _, x| Ok(g.log(x[0]))));
    v.push(GradCase::new("clamp", vec![away_from(r, &s, &[-0.5, 0.7], 1e-3)], empty(), |g, _, x| Ok(g.clamp(x[0], -0.5, 0.7))));
    v.push(GradCase::new("sum", vec![uniform(r, &s, -2.0, 2.0)], empty(), |g, _, x| Ok(g.sum(x[0]))));
    v.push(GradCase::new("mean", vec![uniform(r, &s, -2.0, 2.0)], empty(), |g, _, x| Ok(g.mean(x[0]))));
    v.push(GradCase::new("reshape", vec![uniform(r, &s, -2.0, 2.0)], empty(), move |g, _, x| g.reshape(x[0], vec![m, n])));
    for axis in 0..2 {
        v.push(GradCase::new(format!("softmax_axis{axis}"), vec![uniform(r, &[n, m, 2], -3.0, 3.0)], empty(), move |g, _, x| g.softmax(x[0], axis)));
    }
    let k = r.random_range(1..4);
    v.push(GradCase::new(
        "concat",
        vec![uniform(r, &[n, m], -1.0, 1.0), uniform(r, &[k, m], -1.0, 1.0)],
        empty(),
        |g, _, x| g.concat(&[x[0], x[1]], 0),
    ));
    let (cin, cout) = (r.random_range(1..5), r.random_range(1..5));
    v.push(GradCase::new(
        "linear",
        vec![uniform(r, &[n, cin], -1.0, 1.0), uniform(r, &[cout, cin], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        empty(),
        |g, _, x| g.linear(x[0], x[1], Some(x[2])),
    ));
    v.push(GradCase::new(
        "channel_linear",
        vec![uniform(r, &[cin, n, m], -1.0, 1.0), uniform(r, &[cout, cin], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        empty(),
        |g, _, x| g.channel_linear(x[0], x[1], Some(x[2])),
    ));
    v.push(GradCase::new(
        "kernel_mixture",
        vec![
            uniform(r, &[3], -1.0, 1.0),
            uniform(r, &[cout, cin, 3], -1.0, 1.0),
            uniform(r, &[cout, cin, 5], -1.0, 1.0),
            uniform(r, &[cout, cin, 7], -1.0, 1.0),
        ],
        empty(),
        |g, _, x| g.kernel_mixture(x[0], &x[1..]),
    ));
    let (h, w) = (r.random_range(3..7), r.random_range(3..7));
    v.push(GradCase::new(
        "conv2d",
        vec![uniform(r, &[2, cin, h, w], -1.0, 1.0), uniform(r, &[cout, cin, 3, 3], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        empty(),
        |g, _, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
    ));
    let d = [r.random_range(3..6), r.random_range(3..6), r.random_range(3..6)];
    let vol = [cin, d[0], d[1], d[2]];
    v.push(GradCase::new(
        "conv3d_dilated",
        vec![uniform(r, &vol, -1.0, 1.0), uniform(r, &[cout, cin, 3, 3, 3], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        empty(),
        |g, _, x| g.conv3d(x[0], x[1], Some(x[2]), Conv3dOpts::same(3, 2)),
    ));
    v.push(GradCase::new(
        "conv3d_strided",
        vec![uniform(r, &vol, -1.0, 1.0), uniform(r, &[cout, cin, 3, 3, 3], -1.0, 1.0)],
        empty(),
        |g, _, x| g.conv3d(x[0], x[1], None, Conv3dOpts::strided(2, 1)),
    ));
    for axis in 0..3 {
        v.push(GradCase::new(
            format!("conv1d_axis{axis}"),
            vec![uniform(r, &vol, -1.0, 1.0), uniform(r, &[cout, cin, 5], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
            empty(),
            move |g, _, x| g.conv1d_axis(x[0], x[1], Some(x[2]), axis),
        ));
    }
    let dims = [4, 4, 4];
    let count = r.random_range(6..20);
    let coords = random_coords(r, dims, count);
    let sites = coords.len();
    let sparse = SparseCoords::new(coords.clone(), dims).unwrap();
    let table = Arc::new(sparse.subm_table(3));
    v.push(GradCase::new(
        "tap_conv",
        vec![uniform(r, &[cin, sites], -1.0, 1.0), uniform(r, &[cout, cin, 27], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        empty(),
        move |g, _, x| g.tap_conv(x[0], x[1], Some(x[2]), table.clone(), vec![cout, sites]),
    ));
    let cols = n * m;
    let idx: Arc<Vec<usize>> = Arc::new((0..cols + 3).map(|_| r.random_range(0..cols)).collect());
    let idx2 = idx.clone();
    v.push(GradCase::new("gather_cols", vec![uniform(r, &[cin, cols], -1.0, 1.0)], empty(), move |g, _, x| g.gather_cols(x[0], idx.clone())));
    v.push(GradCase::new(
        "scatter_cols",
        vec![uniform(r, &[cin, idx2.len()], -1.0, 1.0)],
        empty(),
        move |g, _, x| g.scatter_cols(x[0], idx2.clone(), vec![cin, n, m]),
    ));
    let mut dup = coords.clone();
    dup.push(coords[0]);
    let dup2 = dup.clone();
    v.push(GradCase::new("gather_voxels", vec![uniform(r, &[cin, 4, 4, 4], -1.0, 1.0)], empty(), move |g, _, x| g.gather_voxels(x[0], &dup)));
    v.push(GradCase::new(
        "scatter_voxels",
        vec![uniform(r, &[cin, dup2.len()], -1.0, 1.0)],
        empty(),
        move |g, _, x| g.scatter_voxels(x[0], &dup2, dims),
    ));
    let mut map = SampleMap::new(2, n * m);
    for _ in 0..r.random_range(3..9) {
        let k = r.random_range(0..4);
        let entries: Vec<_> = (0..k).map(|_| (r.random_range(0..2), r.random_range(0..n * m), rng::uniform(r, 0.0, 1.0))).collect();
        map.push_site(entries);
    }
    let map = Arc::new(map);
    v.push(GradCase::new("weighted_sample", vec![uniform(r, &[2, cin, n, m], -1.0, 1.0)], empty(), move |g, _, x| g.weighted_sample(x[0], map.clone())));
    v.push(GradCase::new("channel_norm", vec![uniform(r, &[cin + 1, n, m], -2.0, 2.0)], empty(), |g, _, x| g.channel_norm(x[0], 1e-5)));
    v.push(GradCase::new(
        "channel_affine",
        vec![uniform(r, &[cin, n, m], -2.0, 2.0), uniform(r, &[cin], -2.0, 2.0), uniform(r, &[cin], -2.0, 2.0)],
        empty(),
        |g, _, x| g.channel_affine(x[0], x[1], x[2]),
    ));
    v
}

fn loss_cases(r: &mut SplitMix64) -> Vec<GradCase> {
    let mut v = Vec::new();
    let c = r.random_range(2..5);
    let n = r.random_range(c + 2..c + 10);
    let l = labels(r, n, c, true);
    let binary: Vec<u8> = labels(r, n, 2, false);
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 3).collect();
    v.push(GradCase::new("bce", vec![uniform(r, &[1, n], 0.05, 0.95)], empty(), move |g, _, x| bce(g, x[0], &binary, &mask)));
    let ll = l.clone();
    v.push(GradCase::new("cross_entropy", vec![uniform(r, &[c, n], -3.0, 3.0)], empty(), move |g, _, x| cross_entropy(g, x[0], &ll)));
    let ll = l.clone();
    v.push(GradCase::new("lovasz_softmax", vec![uniform(r, &[c, n], -3.0, 3.0)], empty(), move |g, _, x| {
        let p = g.softmax(x[0], 0)?;
        lovasz_softmax(g, p, &ll)
    }));
    for (name, mode) in [("scal_sem", ScalMode::Sem), ("scal_geo", ScalMode::Geo)] {
        let ll = l.clone();
        v.push(GradCase::new(name, vec![uniform(r, &[c, n], -3.0, 3.0)], empty(), move |g, _, x| {
            let p = g.softmax(x[0], 0)?;
            scal(g, p, &ll, mode)
        }));
    }
    v.push(GradCase::new("ssc_loss", vec![uniform(r, &[c, n], -3.0, 3.0)], empty(), move |g, _, x| {
        let p = g.softmax(x[0], 0)?;
        Ok(ssc_loss(g, x[0], p, &l)?.total)
    }));
    v
}

/// Moves every parameter off its initial value. Zero biases feeding relus
/// that already output exact zeros would otherwise sit on a kink.
fn jitter(mut store: ParamStore<f64>, r: &mut SplitMix64) -> ParamStore<f64> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng::uniform(r, -0.2, 0.2);
        }
    }
    store
}

fn block_cases(r: &mut SplitMix64, seed: u64) -> Result<Vec<GradCase>> {
    let mut v = Vec::new();
    let c = 2 * r.random_range(1..3);
    let dims = [r.random_range(3..5), r.random_range(3..5), r.random_range(2..4)];
    let vol = [c, dims[0], dims[1], dims[2]];

    let mut store = ParamStore::new(seed);
    let aic = Aic::new(&mut store, "aic", c, true)?;
    v.push(GradCase::new("aic", vec![uniform(r, &vol, -1.0, 1.0)], jitter(store, r), move |g, s, x| aic.forward(g, s, x[0])));

    let mut store = ParamStore::new(seed);
    let aspp = Aspp::new(&mut store, "aspp", c)?;
    v.push(GradCase::new("aspp", vec![uniform(r, &vol, -1.0, 1.0)], jitter(store, r), move |g, s, x| aspp.forward(g, s, x[0])));

    let mut store = ParamStore::new(seed);
    let mssd = Mssd::new(&mut store, "mssd", c, 1, 3)?;
    v.push(GradCase::new("mssd", vec![uniform(r, &vol, -1.0, 1.0)], jitter(store, r), move |g, s, x| Ok(mssd.forward(g, s, x[0])?.probs)));

    let sd = [4, 4, 4];
    let count = r.random_range(8..24);
    let coords = random_coords(r, sd, count);
    let sites = coords.len();
    let levels = SparseLevels::new(SparseCoords::new(coords, sd)?);
    let mut store = ParamStore::new(seed);
    let seb = Seb::new(&mut store, "seb", c)?;
    v.push(GradCase::new("seb", vec![uniform(r, &[c, sites], -1.0, 1.0)], store, move |g, s, x| seb.forward(g, s, x[0], &levels)));

    let n = dims.iter().product::<usize>();
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.shuffle(r);
    seeds.truncate(n / 3);
    let split = SeedSplit::new(seeds, dims)?;
    let c_o = 2;
    let mut store = ParamStore::new(seed);
    let agg = Aggregation::new(&mut store, "agg", c, c_o)?;
    v.push(GradCase::new(
        "aggregation",
        vec![
            uniform(r, &[c, split.seeds.len()], -1.0, 1.0),
            uniform(r, &vol, -1.0, 1.0),
            uniform(r, &[c_o, dims[0], dims[1], dims[2]], -1.0, 1.0),
        ],
        jitter(store, r),
        move |g, s, x| agg.forward(g, s, x[0], &split, x[1], x[2]),
    ));

    // Two frames looking down +x at a small grid in front of them.
    let (hf, wf, stride) = (r.random_range(3..6), r.random_range(4..8), 4usize);
    let cams = [
        CameraModel::forward_facing(8.0, wf * stride, hf * stride, [0.0, 0.0, 0.0])?,
        CameraModel::forward_facing(8.0, wf * stride, hf * stride, [-0.5, 0.1, 0.0])?,
    ];
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng::uniform(r, 2.0, 6.0), rng::uniform(r, -2.0, 2.0), rng::uniform(r, -1.0, 1.0)])
        .collect();
    let plan = ViewPlan::new(&cams, &points, [hf, wf], stride as f64)?;
    v.push(GradCase::new(
        "view_transform",
        vec![uniform(r, &[2, c, hf, wf], -1.0, 1.0)],
        empty(),
        move |g, _, x| view_transform(g, x[0], &plan, dims),
    ));
    Ok(v)
}

/// All primitive, loss and block cases with shapes drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut r = rng::stream(seed, "gradcheck-suite");
    let mut v = primitive_cases(&mut r);
    v.extend(loss_cases(&mut r));
    v.extend(block_cases(&mut r, seed)?);
    Ok(v)
}

pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    suite(seed)?.iter().map(|c| check_case(c, seed)).collect()
}

struct WrongSquare;

impl Backward<f64> for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn backward(&self, cx: &BackwardCx<'_, f64>, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        // drops the factor 2
        let x = cx.inputs[0].data();
        vec![Some(x.iter().zip(grad).map(|(a, g)| a * g).collect())]
    }
}

/// `x^2` with a deliberately wrong backward rule; the checker must flag it.
pub fn negative_control() -> GradCase {
    let x = Tensor::from_f64([4], &[0.5, -1.0, 1.5, 2.0]).unwrap();
    GradCase::new("negative_control", vec![x], empty(), |g, _, x| {
        let v = g.value(x[0]).data().iter().map(|a| a * a).collect();
        let out = Tensor::new(g.shape(x[0]).to_vec(), v)?;
        Ok(g.record(out, vec![x[0]], Box::new(WrongSquare)))
    })
}
