//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_xoshiro::SplitMix64;

use ssc_core::autodiff::Graph;
use ssc_core::camera::{hit_weight, pixel_center, view_transform, CameraModel, ViewPlan};
use ssc_core::checkpoint::Checkpoint;
use ssc_core::config::ModelConfig;
use ssc_core::diffusion::{Aggregation, SeedSplit};
use ssc_core::gradcheck;
use ssc_core::losses::{bce, cross_entropy, lovasz_softmax, scal, ssc_loss, ScalMode};
use ssc_core::metrics::iou_miou;
use ssc_core::model::Model;
use ssc_core::params::ParamStore;
use ssc_core::proposal::{select_seeds, UNet};
use ssc_core::rng;
use ssc_core::synth::{generate_scene, render_depth_f64, synth_sample, SceneDescription, Solid, SynthConfig};
use ssc_core::tensor::Tensor;
use ssc_core::train::Trainer;
use ssc_core::vgrid::{GridData, VGrid};
use ssc_core::voxel::{SceneSpec, INVALID};

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const DECOMP_TOL: f64 = 1e-12;
const LOSS_ZERO_TOL: f64 = 1e-3;
const LOSS_UNIFORM_TOL: f64 = 1e-9;
const BRUTE_TOL: f64 = 1e-9;
const BRUTE_MAX_N: usize = 6;
const PIXEL_TOL: f64 = 1e-6;
const SURFACE_TOL: f64 = 1e-6;
const ROUND_TRIP_POINTS: usize = 10_000;
const OVERFIT_STEPS: u64 = 400;
const OVERFIT_SCENES: u64 = 4;
const OVERFIT_IOU: f64 = 0.90;
const OVERFIT_MIOU: f64 = 0.85;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_STEPS: u64 = 400;
const ABLATION_TRAIN_SCENES: u64 = 16;
const ABLATION_HELDOUT_SCENES: u64 = 8;
const ABLATION_BUDGET: Duration = Duration::from_secs(45 * 60);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(r: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    rng::uniform(r, lo, hi)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut cases = 0;
    let mut worst = (0.0f64, String::new());
    for seed in 0..GRAD_SEEDS {
        for r in ok(gradcheck::run_suite(seed))? {
            cases += 1;
            if r.max_rel_err > worst.0 || worst.1.is_empty() {
                worst = (r.max_rel_err, r.name.clone());
            }
            check(r.passed(GRAD_TOL), || format!("{} (seed {seed}): rel err {:.3e}", r.name, r.max_rel_err))?;
        }
    }
    let control = ok(gradcheck::check_case(&gradcheck::negative_control(), 0))?;
    check(!control.passed(GRAD_TOL), || "corrupted backward was not detected".into())?;
    let elapsed = t0.elapsed();
    check(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{cases} cases, worst {:.2e} ({}), negative control {:.2e}, {:.1}s",
        worst.0,
        worst.1,
        control.max_rel_err,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

/// Cameras spaced one metre apart along y, all facing +x with `f = 4`; a point
/// at depth 4 on a pixel centre of one camera lands on pixel centres of all.
fn hit_weight_fixture() -> Result<String, String> {
    for d in 1..=16usize {
        check(hit_weight(d) == 1.0 / d as f64, || format!("hit_weight({d})"))?;
    }
    check(hit_weight(0) == 1.0, || "hit_weight(0)".into())?;
    let (w, h) = (8usize, 6usize);
    let cams: Vec<CameraModel> = (0..3)
        .map(|k| CameraModel::forward_facing(4.0, w, h, [0.0, k as f64, 0.0]))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut points = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let (u, v) = pixel_center(col, row);
            points.push(cams[0].back_project_pixel(u, v, 4.0));
        }
    }
    points.push([-3.0, 0.0, 0.0]); // behind every camera
    let plan = ok(ViewPlan::new(&cams, &points, [h, w], 1.0))?;
    let feats: Vec<f64> = (0..3 * 2 * h * w).map(|i| ((i * 37) % 101) as f64 / 8.0).collect();
    let mut g = Graph::<f64>::new();
    let f = g.input(ok(Tensor::new(vec![3, 2, h, w], feats.clone()))?);
    let n = points.len();
    let lifted = ok(view_transform(&mut g, f, &plan, [n, 1, 1]))?;
    let lv = g.value(lifted).data();
    let mut histogram = [0usize; 4];
    for (p, &pt) in points.iter().enumerate() {
        // independent pinhole projection with the known intrinsics
        let mut sites = Vec::new();
        for (t, _) in cams.iter().enumerate() {
            let (xc, yc, zc) = (-(pt[1] - t as f64), -pt[2], pt[0]);
            if zc <= 0.0 {
                continue;
            }
            let u = 4.0 * xc / zc + w as f64 / 2.0;
            let v = 4.0 * yc / zc + h as f64 / 2.0;
            if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
                sites.push((t, (v - 0.5) as usize * w + (u - 0.5) as usize));
            }
        }
        let delta = sites.len();
        histogram[delta] += 1;
        check(plan.hits[p] as usize == delta, || format!("point {p}: hits {} vs {delta}", plan.hits[p]))?;
        let entries: Vec<_> = plan.map.entries(p).collect();
        check(entries.len() == delta, || format!("point {p}: {} taps for delta {delta}", entries.len()))?;
        for ((t, s, wgt), &(ot, os)) in entries.iter().zip(&sites) {
            check(*t == ot && *s == os && *wgt == 1.0 / delta as f64, || {
                format!("point {p}: tap ({t}, {s}, {wgt}) vs ({ot}, {os}, 1/{delta})")
            })?;
        }
        for c in 0..2 {
            let expect: f64 = sites
                .iter()
                .map(|&(t, s)| feats[(t * 2 + c) * h * w + s] / delta as f64)
                .sum();
            check((lv[c * n + p] - expect).abs() <= 1e-12, || format!("point {p} channel {c}: {} vs {expect}", lv[c * n + p]))?;
        }
    }
    check(histogram.iter().filter(|&&k| k > 0).count() == 4, || format!("fixture covers delta counts {histogram:?}"))?;
    Ok(format!("delta histogram {histogram:?}"))
}

fn seed_oracle() -> Result<String, String> {
    let mut r = rng::stream(2, "seed-oracle");
    let mut total = 0;
    for _ in 0..50 {
        let n = r.random_range(1..600);
        let theta = uniform(&mut r, 0.05, 0.95);
        let mut o: Vec<f64> = (0..n).map(|_| uniform(&mut r, 0.0, 1.0)).collect();
        o[0] = theta; // the threshold itself is not a seed
        let mut expect = Vec::new();
        for (i, &v) in o.iter().enumerate() {
            if v > theta {
                expect.push(i);
            }
        }
        let got = select_seeds(&o, theta);
        check(got == expect, || format!("theta {theta}: {} vs {} seeds", got.len(), expect.len()))?;
        let of: Vec<f32> = o.iter().map(|&v| v as f32).collect();
        let ef: Vec<usize> = (0..n).filter(|&i| of[i] as f64 > theta).collect();
        check(select_seeds(&of, theta) == ef, || "f32 seeds".into())?;
        total += got.len();
    }
    Ok(format!("{total} seeds over 50 fields"))
}

fn scatter_oracle() -> Result<String, String> {
    let mut r = rng::stream(3, "scatter-oracle");
    let dims = [4usize, 3, 5];
    let n = dims.iter().product::<usize>();
    let c = 3;
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut r);
    let seeds: Vec<usize> = all[..n / 3].to_vec();
    let split = ok(SeedSplit::new(seeds.clone(), dims))?;

    // scatter_cols with duplicates
    let idx: Vec<usize> = (0..n + 5).map(|_| r.random_range(0..n)).collect();
    let cols: Vec<f64> = (0..c * idx.len()).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let mut g = Graph::<f64>::new();
    let a = g.constant(ok(Tensor::new(vec![c, idx.len()], cols.clone()))?);
    let s = ok(g.scatter_cols(a, Arc::new(idx.clone()), vec![c, dims[0], dims[1], dims[2]]))?;
    check(g.shape(s) == [c, dims[0], dims[1], dims[2]], || format!("scatter shape {:?}", g.shape(s)))?;
    let mut expect = vec![0.0; c * n];
    for (j, &i) in idx.iter().enumerate() {
        for ch in 0..c {
            expect[ch * n + i] += cols[ch * idx.len() + j];
        }
    }
    check(g.value(s).data() == expect.as_slice(), || "scatter_cols content".into())?;

    // scatter_voxels
    let coords: Vec<[usize; 3]> = seeds
        .iter()
        .map(|&i| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]])
        .collect();
    let sv = ok(g.scatter_voxels(a, &coords.iter().cycle().take(idx.len()).copied().collect::<Vec<_>>(), dims))?;
    let mut expect = vec![0.0; c * n];
    for j in 0..idx.len() {
        let [x, y, z] = coords[j % coords.len()];
        for ch in 0..c {
            expect[ch * n + (x * dims[1] + y) * dims[2] + z] += cols[ch * idx.len() + j];
        }
    }
    check(g.value(sv).data() == expect.as_slice(), || "scatter_voxels content".into())?;

    // aggregation: seeds carry their own features, the rest the transferred ones
    let mut store = ParamStore::<f64>::new(5);
    let agg = ok(Aggregation::new(&mut store, "agg", c, 2))?;
    let fs: Vec<f64> = (0..c * seeds.len()).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let f3d: Vec<f64> = (0..c * n).map(|_| uniform(&mut r, -1.0, 1.0)).collect();
    let vs = g.constant(ok(Tensor::new(vec![c, seeds.len()], fs.clone()))?);
    let v3 = g.constant(ok(Tensor::new(vec![c, dims[0], dims[1], dims[2]], f3d.clone()))?);
    let comb = ok(agg.combine(&mut g, &store, vs, &split, v3))?;
    check(g.shape(comb) == [c, dims[0], dims[1], dims[2]], || format!("combine shape {:?}", g.shape(comb)))?;
    let w = store.get(store.id("agg.kt.w").ok_or("agg.kt.w")?).data().to_vec();
    let b = store.get(store.id("agg.kt.b").ok_or("agg.kt.b")?).data().to_vec();
    let out = g.value(comb).data();
    let mut is_seed = vec![None; n];
    for (j, &i) in seeds.iter().enumerate() {
        is_seed[i] = Some(j);
    }
    for i in 0..n {
        for o in 0..c {
            let got = out[o * n + i];
            match is_seed[i] {
                Some(j) => check(got == fs[o * seeds.len() + j], || format!("seed voxel {i} channel {o}"))?,
                None => {
                    let kt = b[o] + (0..c).map(|k| w[o * c + k] * f3d[k * n + i]).sum::<f64>();
                    check((got - kt).abs() <= 1e-12, || format!("voxel {i} channel {o}: {got} vs {kt}"))?;
                }
            }
        }
    }
    Ok(format!("{} seeds of {n} voxels", seeds.len()))
}

fn softmax_cols(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut p = vec![0.0; c * n];
    for i in 0..n {
        let m = (0..c).map(|k| x[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (x[k * n + i] - m).exp()).sum();
        for k in 0..c {
            p[k * n + i] = (x[k * n + i] - m).exp() / z;
        }
    }
    p
}

fn ce_oracle(x: &[f64], labels: &[u8], c: usize) -> f64 {
    let n = labels.len();
    let p = softmax_cols(x, c, n);
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != INVALID).collect();
    valid.iter().map(|&i| -p[labels[i] as usize * n + i].ln()).sum::<f64>() / valid.len() as f64
}

/// Affinity loss straight from precision, recall and specificity.
fn scal_oracle(p: &[f64], labels: &[u8], c: usize, geo: bool) -> f64 {
    let n = labels.len();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != INVALID).collect();
    let classes: Vec<usize> = if geo { vec![1] } else { (0..c).collect() };
    let mut terms = Vec::new();
    for k in classes {
        let pk = |i: usize| if geo { 1.0 - p[i] } else { p[k * n + i] };
        let yk = |i: usize| if geo { labels[i] != 0 } else { labels[i] as usize == k };
        let pos: Vec<usize> = valid.iter().copied().filter(|&i| yk(i)).collect();
        let neg: Vec<usize> = valid.iter().copied().filter(|&i| !yk(i)).collect();
        if pos.is_empty() {
            continue;
        }
        let tp: f64 = pos.iter().map(|&i| pk(i)).sum();
        let all_p: f64 = valid.iter().map(|&i| pk(i)).sum();
        let mut t = (tp / all_p).ln() + (tp / pos.len() as f64).ln();
        if !neg.is_empty() {
            let tn: f64 = neg.iter().map(|&i| 1.0 - pk(i)).sum();
            t += (tn / neg.len() as f64).ln();
        }
        terms.push(-t);
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

fn decomposition() -> Result<String, String> {
    let mut r = rng::stream(4, "decomposition");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = r.random_range(2..7);
        let n = r.random_range(1..200);
        let labels: Vec<u8> = (0..n)
            .map(|_| if r.random::<f64>() < 0.1 { INVALID } else { r.random_range(0..c) as u8 })
            .collect();
        let x: Vec<f64> = (0..c * n).map(|_| uniform(&mut r, -4.0, 4.0)).collect();
        let mut g = Graph::<f64>::new();
        let lv = g.input(ok(Tensor::new(vec![c, n], x.clone()))?);
        let pv = ok(g.softmax(lv, 0))?;
        let t = ok(ssc_loss(&mut g, lv, pv, &labels))?;
        let p = softmax_cols(&x, c, n);
        let valid = labels.iter().any(|&l| l != INVALID);
        let ce = if valid { ce_oracle(&x, &labels, c) } else { 0.0 };
        let sem = scal_oracle(&p, &labels, c, false);
        let geo = scal_oracle(&p, &labels, c, true);
        let val = |v| g.value(v).item();
        for (name, got, expect) in [
            ("ce", val(t.ce), ce),
            ("scal_sem", val(t.scal_sem), sem),
            ("scal_geo", val(t.scal_geo), geo),
            ("total", val(t.total), ce + sem + geo),
            ("sum of terms", val(t.total), val(t.ce) + val(t.scal_sem) + val(t.scal_geo)),
        ] {
            let e = (got - expect).abs();
            worst = worst.max(e);
            check(e <= DECOMP_TOL, || format!("{name}: {got} vs {expect}"))?;
        }
    }
    Ok(format!("worst {worst:.1e}"))
}

fn iou_oracle() -> Result<String, String> {
    let mut r = rng::stream(5, "iou-oracle");
    let classes = 6;
    for trial in 0..100 {
        let n = 8 * 8 * 8;
        let gt: Vec<u8> = (0..n)
            .map(|_| if r.random::<f64>() < 0.05 { INVALID } else { r.random_range(0..classes) as u8 })
            .collect();
        let pred: Vec<u8> = (0..n)
            .map(|i| if r.random::<f64>() < 0.6 && gt[i] != INVALID { gt[i] } else { r.random_range(0..classes) as u8 })
            .collect();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        let mut per = vec![[0u64; 3]; classes];
        for i in 0..n {
            if gt[i] == INVALID {
                continue;
            }
            match (pred[i] != 0, gt[i] != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
            for (k, e) in per.iter_mut().enumerate() {
                let (p, g) = (pred[i] as usize == k, gt[i] as usize == k);
                if p && g {
                    e[0] += 1;
                } else if p {
                    e[1] += 1;
                } else if g {
                    e[2] += 1;
                }
            }
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        let ious: Vec<f64> = per[1..]
            .iter()
            .filter(|e| e.iter().sum::<u64>() > 0)
            .map(|e| e[0] as f64 / (e[0] + e[1] + e[2]) as f64)
            .collect();
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let m = ok(iou_miou(&pred, &gt, classes))?;
        check(m.iou == iou && m.miou == miou, || format!("grid {trial}: ({}, {}) vs ({iou}, {miou})", m.iou, m.miou))?;
    }
    Ok("100 grids".into())
}

fn equation_oracles() -> Outcome {
    let parts = [
        ("hit weights", hit_weight_fixture()?),
        ("seeds", seed_oracle()?),
        ("scatter", scatter_oracle()?),
        ("ssc decomposition", decomposition()?),
        ("iou", iou_oracle()?),
    ];
    Ok(parts.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join("; "))
}

// ---------------------------------------------------------------- 3

fn loss_identities() -> Outcome {
    let mut r = rng::stream(6, "loss-identities");
    let (c, n) = (6usize, 64usize);
    let labels: Vec<u8> = (0..n).map(|i| if i < c { i as u8 } else { r.random_range(0..c) as u8 }).collect();
    let occ: Vec<u8> = labels.iter().map(|&l| (l != 0) as u8).collect();
    let mask = vec![true; n];
    let confident = |g: &mut Graph<f64>, labels: &[u8], k: usize| {
        let mut x = vec![-20.0; k * labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            x[l as usize * labels.len() + i] = 20.0;
        }
        g.input(Tensor::new(vec![k, labels.len()], x).unwrap())
    };
    let mut g = Graph::<f64>::new();
    // geometry head: sigmoid of confident logits
    let geo_logits = g.input(ok(Tensor::new(vec![1, n], occ.iter().map(|&o| if o == 1 { 20.0 } else { -20.0 }).collect()))?);
    let geo_p = g.sigmoid(geo_logits);
    let geo = ok(bce(&mut g, geo_p, &occ, &mask))?;
    // occupancy: confident probabilities
    let occ_p = g.input(ok(Tensor::new(vec![1, n], occ.iter().map(|&o| if o == 1 { 1.0 - 1e-9 } else { 1e-9 }).collect()))?);
    let l_occ = ok(bce(&mut g, occ_p, &occ, &mask))?;
    // seed semantics: CE + Lovasz on confident logits
    let sl = confident(&mut g, &labels, c);
    let ce = ok(cross_entropy(&mut g, sl, &labels))?;
    let sp = ok(g.softmax(sl, 0))?;
    let lz = ok(lovasz_softmax(&mut g, sp, &labels))?;
    let sem = ok(g.add(ce, lz))?;
    // completion
    let xl = confident(&mut g, &labels, c);
    let xp = ok(g.softmax(xl, 0))?;
    let ssc = ok(ssc_loss(&mut g, xl, xp, &labels))?.total;
    let vals = [("geo", geo), ("occ", l_occ), ("sem", sem), ("ssc", ssc)].map(|(k, v)| (k, g.value(v).item()));
    for (k, v) in vals {
        check((0.0..=LOSS_ZERO_TOL).contains(&v), || format!("perfect L_{k} = {v:e}"))?;
    }

    let half = g.input(Tensor::full(vec![1, n], 0.5));
    let bv = ok(bce(&mut g, half, &occ, &mask))?;
    let b = g.value(bv).item();
    check((b - 2f64.ln()).abs() <= LOSS_UNIFORM_TOL, || format!("BCE(0.5) = {b}"))?;
    for k in [2usize, 6, 20] {
        let lab: Vec<u8> = (0..n).map(|i| (i % k) as u8).collect();
        let z = g.input(Tensor::zeros(vec![k, n]));
        let cv = ok(cross_entropy(&mut g, z, &lab))?;
        let v = g.value(cv).item();
        check((v - (k as f64).ln()).abs() <= LOSS_UNIFORM_TOL, || format!("CE uniform over {k}: {v}"))?;
    }
    Ok(format!(
        "perfect: {}; uniform BCE {b:.12}",
        vals.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

// ---------------------------------------------------------------- 4

/// Jaccard set loss of a mispredicted set for one class.
fn jaccard_set_loss(set: &[bool], fg: &[bool]) -> f64 {
    let n_fg = fg.iter().filter(|&&f| f).count() as f64;
    let miss_fg = set.iter().zip(fg).filter(|(s, f)| **s && **f).count() as f64;
    let extra_bg = set.iter().zip(fg).filter(|(s, f)| **s && !**f).count() as f64;
    let union = n_fg + extra_bg;
    if union == 0.0 {
        0.0
    } else {
        1.0 - (n_fg - miss_fg) / union
    }
}

/// Lovász extension by its integral definition over level sets.
fn lovasz_integral(m: &[f64], fg: &[bool]) -> f64 {
    let mut levels: Vec<f64> = m.to_vec();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut total = 0.0;
    for w in levels.windows(2) {
        let set: Vec<bool> = m.iter().map(|&v| v >= w[1]).collect();
        total += (w[1] - w[0]) * jaccard_set_loss(&set, fg);
    }
    total
}

/// Lovász extension of a submodular loss as the greedy maximum over all orders.
fn lovasz_greedy_max(m: &[f64], fg: &[bool]) -> f64 {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    perms(m.len())
        .into_iter()
        .map(|order| {
            let mut set = vec![false; m.len()];
            let mut prev = 0.0;
            let mut acc = 0.0;
            for &i in &order {
                set[i] = true;
                let f = jaccard_set_loss(&set, fg);
                acc += m[i] * (f - prev);
                prev = f;
            }
            acc
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn brute_force() -> Outcome {
    let symbols = [0u8, 1, 2, INVALID];
    let c = 3;
    let mut r = rng::stream(7, "brute-force");
    let mut patterns = 0;
    let mut worst = 0.0f64;
    for n in 1..=BRUTE_MAX_N {
        for code in 0..symbols.len().pow(n as u32) {
            let labels: Vec<u8> = (0..n).map(|i| symbols[(code / symbols.len().pow(i as u32)) % symbols.len()]).collect();
            let x: Vec<f64> = (0..c * n).map(|_| uniform(&mut r, -3.0, 3.0)).collect();
            let p = softmax_cols(&x, c, n);
            let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != INVALID).collect();
            let mut integral = Vec::new();
            let mut greedy = Vec::new();
            for k in 0..c {
                let fg: Vec<bool> = valid.iter().map(|&i| labels[i] as usize == k).collect();
                if !fg.iter().any(|&f| f) {
                    continue;
                }
                let m: Vec<f64> = valid
                    .iter()
                    .zip(&fg)
                    .map(|(&i, &f)| if f { 1.0 - p[k * n + i] } else { p[k * n + i] })
                    .collect();
                integral.push(lovasz_integral(&m, &fg));
                greedy.push(lovasz_greedy_max(&m, &fg));
            }
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let mut g = Graph::<f64>::new();
            let pv = g.input(ok(Tensor::new(vec![c, n], p.clone()))?);
            let lzv = ok(lovasz_softmax(&mut g, pv, &labels))?;
            let lz = g.value(lzv).item();
            let ssv = ok(scal(&mut g, pv, &labels, ScalMode::Sem))?;
            let ss = g.value(ssv).item();
            let sgv = ok(scal(&mut g, pv, &labels, ScalMode::Geo))?;
            let sg = g.value(sgv).item();
            for (name, got, expect) in [
                ("lovasz/integral", lz, mean(&integral)),
                ("lovasz/greedy", lz, mean(&greedy)),
                ("scal_sem", ss, scal_oracle(&p, &labels, c, false)),
                ("scal_geo", sg, scal_oracle(&p, &labels, c, true)),
            ] {
                let e = (got - expect).abs();
                worst = worst.max(e);
                check(e <= BRUTE_TOL, || format!("{name} labels {labels:?}: {got} vs {expect}"))?;
            }
            patterns += 1;
        }
    }
    Ok(format!("{patterns} label patterns, worst {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn random_camera(r: &mut SplitMix64) -> Result<CameraModel, String> {
    let rot = Rotation3::from_euler_angles(uniform(r, -0.5, 0.5), uniform(r, -0.5, 0.5), uniform(r, -3.0, 3.0));
    let base = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0));
    let rm = (base * rot).into_inner();
    let pos = Vector3::new(uniform(r, -5.0, 5.0), uniform(r, -5.0, 5.0), uniform(r, -2.0, 2.0));
    let tv = -(rm * pos);
    let t = std::array::from_fn(|i| [rm[(i, 0)], rm[(i, 1)], rm[(i, 2)], tv[i]]);
    let f = uniform(r, 100.0, 800.0);
    ok(CameraModel::pinhole(f, r.random_range(64..1300), r.random_range(48..400), t))
}

/// Distance from `p` to the boundary of a solid.
fn surface_distance(s: &Solid, p: [f64; 3]) -> f64 {
    fn outside_inside(d: &[f64]) -> f64 {
        // d[i] = signed distance along each axis (positive outside)
        let out: f64 = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        if out > 0.0 {
            out
        } else {
            -d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    }
    match *s {
        Solid::Box { min, max, .. } => {
            let d: Vec<f64> = (0..3).map(|a| (min[a] - p[a]).max(p[a] - max[a])).collect();
            outside_inside(&d)
        }
        Solid::Cylinder { center, radius, z0, z1, .. } => {
            let rho = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
            outside_inside(&[rho - radius, (z0 - p[2]).max(p[2] - z1)])
        }
    }
}

fn nearest_surface(desc: &SceneDescription, p: [f64; 3]) -> f64 {
    let mut best = desc.ground.map_or(f64::INFINITY, |h| (p[2] - h).abs());
    for s in &desc.solids {
        best = best.min(surface_distance(s, p));
    }
    best
}

fn geometry() -> Outcome {
    let mut r = rng::stream(8, "geometry");
    let mut worst_px = 0.0f64;
    let mut done = 0;
    while done < ROUND_TRIP_POINTS {
        let cam = random_camera(&mut r)?;
        for _ in 0..100 {
            let u = uniform(&mut r, 0.0, cam.width as f64);
            let v = uniform(&mut r, 0.0, cam.height as f64);
            let d = uniform(&mut r, 0.5, 80.0);
            let p = cam.back_project_pixel(u, v, d);
            let pr = cam.project_point(p);
            check(pr.in_fov, || format!("point from pixel ({u}, {v}) left the FOV"))?;
            let back = cam.back_project_pixel(pr.uv[0], pr.uv[1], pr.depth);
            let again = cam.project_point(back);
            let e = ((pr.uv[0] - u).abs())
                .max((pr.uv[1] - v).abs())
                .max((again.uv[0] - pr.uv[0]).abs())
                .max((again.uv[1] - pr.uv[1]).abs());
            worst_px = worst_px.max(e);
            check(e <= PIXEL_TOL, || format!("round trip off by {e:e} px"))?;
            check((pr.depth - d).abs() <= 1e-9 * d, || format!("depth {} vs {d}", pr.depth))?;
            done += 1;
        }
    }

    let cfg = SynthConfig::desk();
    let cams = ok(cfg.cameras())?;
    let mut worst_m = 0.0f64;
    let mut hits = 0;
    for seed in 0..3 {
        let desc = generate_scene(seed, &cfg.spec, &cfg.params);
        check(!desc.solids.is_empty(), || format!("scene {seed} has no objects"))?;
        for cam in &cams[..1] {
            let depth = render_depth_f64(&desc, cam);
            for row in 0..cam.height {
                for col in 0..cam.width {
                    let d = depth[row * cam.width + col];
                    if d <= 0.0 {
                        continue;
                    }
                    let (u, v) = pixel_center(col, row);
                    let p = cam.back_project_pixel(u, v, d);
                    let e = nearest_surface(&desc, p);
                    worst_m = worst_m.max(e);
                    check(e <= SURFACE_TOL, || format!("scene {seed} pixel ({col}, {row}): {e:e} m off"))?;
                    hits += 1;
                }
            }
        }
    }
    Ok(format!("{done} round trips, worst {worst_px:.1e} px; {hits} depth pixels, worst {worst_m:.1e} m"))
}

// ---------------------------------------------------------------- 6

fn threshold_property() -> Outcome {
    let mut r = rng::stream(9, "threshold");
    let thetas: Vec<f64> = (0..=16).map(|i| 0.1 + 0.05 * i as f64).collect();
    let dims = [8usize, 8, 4];
    let n: usize = dims.iter().product();
    let mut rates = Vec::new();
    for field in 0..20u64 {
        let mut store = ParamStore::<f32>::new(field);
        let unet = ok(UNet::new(&mut store, "unet", 3, [4, 8, 8], 2))?;
        let mut g = Graph::new();
        let x: Vec<f32> = (0..3 * n).map(|_| rng::normal(&mut r) as f32).collect();
        let xv = g.constant(ok(Tensor::new(vec![3, dims[0], dims[1], dims[2]], x))?);
        let occ = ok(unet.forward(&mut g, &store, xv))?;
        let o = g.value(occ.probs).data();
        let mut prev: Option<Vec<usize>> = None;
        for &t in &thetas {
            let s = select_seeds(o, t);
            check(s.len() == o.iter().filter(|&&v| v as f64 > t).count(), || "N_s differs from |{O > theta}|".into())?;
            if let Some(p) = &prev {
                check(s.len() <= p.len(), || format!("field {field}: rate rose at theta {t}"))?;
                check(s.iter().all(|i| p.binary_search(i).is_ok()), || format!("field {field}: not nested at theta {t}"))?;
            }
            prev = Some(s);
        }
        let lo = select_seeds(o, 0.1).len() as f64 / n as f64;
        let hi = select_seeds(o, 0.9).len() as f64 / n as f64;
        rates.push((lo, hi));
    }
    let spread = rates.iter().filter(|(lo, hi)| lo > hi).count();
    Ok(format!("20 fields x {} thresholds; rate strictly drops in {spread} fields", thetas.len()))
}

// ---------------------------------------------------------------- 7, 8

fn desk_samples(count: u64) -> Result<Vec<ssc_core::synth::Sample>, String> {
    desk_samples_from(100, count)
}

fn desk_samples_from(first: u64, count: u64) -> Result<Vec<ssc_core::synth::Sample>, String> {
    let syn = SynthConfig::desk();
    (first..first + count).map(|i| ok(synth_sample(i, &format!("desk{i}"), &syn))).collect()
}

fn train_desk(cfg: ModelConfig, samples: &[ssc_core::synth::Sample], steps: u64) -> Result<(f64, f64), String> {
    let (model, store) = ok(Model::build::<f32>(cfg))?;
    let mut t = ok(Trainer::new(model, store, samples))?;
    ok(t.run_until(steps, |_| {}))?;
    let m = ok(t.evaluate(&[]))?.overall.metrics();
    Ok((m.iou, m.miou))
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let samples = desk_samples(OVERFIT_SCENES)?;
    let cfg = ModelConfig::desk();
    check(cfg.channels == 16 && cfg.mssd_layers == 1 && cfg.classes == 6 && cfg.dims == [32, 32, 8], || "desk preset changed".into())?;
    let (iou, miou) = train_desk(cfg, &samples, OVERFIT_STEPS)?;
    let elapsed = t0.elapsed();
    let detail = format!("IoU {iou:.4}, mIoU {miou:.4} after {OVERFIT_STEPS} steps in {:.0}s", elapsed.as_secs_f64());
    check(iou >= OVERFIT_IOU && miou >= OVERFIT_MIOU && elapsed < OVERFIT_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn ablation() -> Outcome {
    let t0 = Instant::now();
    let samples = desk_samples(ABLATION_TRAIN_SCENES)?;
    let heldout = desk_samples_from(5000, ABLATION_HELDOUT_SCENES)?;
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in ABLATION_SEEDS {
        for sem in [true, false] {
            let cfg = ModelConfig { seed, sem_loss: sem, ..ModelConfig::desk() };
            let (model, store) = ok(Model::build::<f32>(cfg))?;
            let mut t = ok(Trainer::new(model, store, &samples))?;
            ok(t.run_until(ABLATION_STEPS, |_| {}))?;
            let prepared = heldout.iter().map(|s| ok(t.model.prepare::<f32>(s))).collect::<Result<Vec<_>, _>>()?;
            let miou = ok(ssc_core::train::evaluate(&t.model, &t.store, &prepared, &[]))?.overall.metrics().miou;
            if sem { on.push(miou) } else { off.push(miou) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let elapsed = t0.elapsed();
    let detail = format!(
        "held-out mIoU with L_sem {:.4} {on:.3?}, without {:.4} {off:.3?}, {:.0}s",
        mean(&on),
        mean(&off),
        elapsed.as_secs_f64()
    );
    check(mean(&on) >= mean(&off) && elapsed < ABLATION_BUDGET, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn tiny() -> (ModelConfig, Vec<ssc_core::synth::Sample>) {
    let spec = SceneSpec::new([0.0, -6.4, -2.0], 0.8, [16, 16, 8]).unwrap();
    let cfg = ModelConfig {
        origin: spec.origin,
        dims: spec.dims,
        channels: 8,
        occ_channels: 4,
        encoder_widths: vec![8, 8, 8, 8],
        unet_widths: [4, 8, 8],
        lr: 1e-3,
        seed: 11,
        ..ModelConfig::desk()
    };
    let syn = SynthConfig { spec, width: 128, height: 48, focal: 64.0, ..SynthConfig::desk() };
    let samples = (0..3).map(|i| synth_sample(40 + i, &format!("t{i}"), &syn).unwrap()).collect();
    (cfg, samples)
}

fn determinism() -> Outcome {
    let (cfg, samples) = tiny();
    let run = || -> Result<Trainer<f32>, String> {
        let (model, store) = ok(Model::build::<f32>(cfg.clone()))?;
        let mut t = ok(Trainer::new(model, store, &samples))?;
        ok(t.run_until(4, |_| {}))?;
        Ok(t)
    };
    let a = run()?;
    let b = run()?;
    let ba = a.checkpoint().to_bytes();
    check(ba == b.checkpoint().to_bytes(), || "two identical runs gave different checkpoints".into())?;

    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("model.ckpt");
    ok(a.checkpoint().save(&path))?;
    let loaded = ok(Checkpoint::<f32>::load(&path))?;
    check(loaded.to_bytes() == ba && ok(std::fs::read(&path))? == ba, || "checkpoint round trip".into())?;

    let mut special = vec![0.0f32, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 2.0, f32::from_bits(0x7fc0_1234)];
    special.extend(samples[0].depths[0].iter().take(58));
    let grids = [
        VGrid::from_labels(&samples[0].labels),
        ok(VGrid::new([4, 4, 4], [0.25, -1.5, 3.0], 0.2, GridData::F32(special)))?,
        ok(VGrid::new([2, 3, 1], [0.0; 3], 1.0, GridData::U16(vec![0, 1, 65535, 255, 256, 7])))?,
    ];
    for (i, grid) in grids.iter().enumerate() {
        let p = dir.path().join(format!("g{i}.vgrd"));
        ok(grid.save(&p))?;
        let back = ok(VGrid::load(&p))?;
        check(back.to_bytes() == grid.to_bytes() && ok(std::fs::read(&p))? == grid.to_bytes(), || format!("vgrid {i} round trip"))?;
        let same = match (&grid.data, &back.data) {
            (GridData::F32(x), GridData::F32(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
            (x, y) => x == y,
        };
        check(same && back.dims == grid.dims && back.origin == grid.origin && back.voxel_size.to_bits() == grid.voxel_size.to_bits(), || format!("vgrid {i} contents"))?;
    }

    let stripped = a.model.without_training_heads(&a.store);
    check(stripped.num_scalars() < a.store.num_scalars(), || "no training-only parameters found".into())?;
    for prep in a.prepared() {
        let (la, pa) = ok(a.model.infer(&a.store, prep))?;
        let (lb, pb) = ok(a.model.infer(&stripped, prep))?;
        check(la == lb, || format!("{}: labels differ without training heads", prep.id))?;
        check(pa.data().iter().map(|v| v.to_bits()).eq(pb.data().iter().map(|v| v.to_bits())), || format!("{}: probabilities differ", prep.id))?;
    }
    Ok(format!(
        "{} byte checkpoints identical; 3 grids; inference unchanged without {} training-only scalars",
        ba.len(),
        a.store.num_scalars() - stripped.num_scalars()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradients),
        ("equation oracles", equation_oracles),
        ("loss identities", loss_identities),
        ("lovasz/scal brute force", brute_force),
        ("geometry round trips", geometry),
        ("threshold property", threshold_property),
        ("overfit fixture", overfit),
        ("semantic loss ablation", ablation),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !only.is_empty() && !only.contains(&k) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panic: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {k} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {k} {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
