//! Shared oracles for the integration and acceptance suites.
#![allow(dead_code)]

use mcl_core::causal::{noise_seed, EffectProfile};
use mcl_core::imgops::{apply_factor, Factor, Image, TransformSpec};
use mcl_core::model::{Network, NetworkSpec};
use mcl_core::numcore::{Conv2dGeometry, Graph, Tensor, Var};
use mcl_core::objective::{
    effects_tensor, loss_alignment_causal_on, loss_alignment_marginal_on, loss_classification_on,
    mapping_weights_on,
};
use mcl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return 0.0;
    }
    let idx = ((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    v[idx]
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar-valued graph over some leaves.
pub struct RandomGraph {
    pub name: &'static str,
    pub leaves: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.2..1.5)).collect()).unwrap()
}

const TEMPLATES: usize = 12;

/// The `i`-th random graph: template `i % 12` with fresh random shapes and values.
pub fn random_graph(i: usize) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let n = rng.gen_range(2..5);
    let d = rng.gen_range(2..6);
    let c = rng.gen_range(2..5);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    match i % TEMPLATES {
        0 => RandomGraph {
            name: "add-mul-sum",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0)],
            build: Box::new(|g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[2])?;
                let q = g.mul(m, m)?;
                g.sum(q)
            }),
        },
        1 => RandomGraph {
            name: "matmul-sub-mean",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[d, c], 1.0), rand_tensor(&mut rng, &[n, c], 1.0)],
            build: Box::new(|g, v| {
                let p = g.matmul(v[0], v[1])?;
                let s = g.sub(p, v[2])?;
                let q = g.mul(s, s)?;
                let q = g.scale(q, 0.7)?;
                g.mean(q)
            }),
        },
        2 => RandomGraph {
            name: "linear-relu-ce",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[c, d], 1.0), rand_tensor(&mut rng, &[c], 0.5)],
            build: Box::new(move |g, v| {
                let z = g.linear(v[0], v[1], v[2])?;
                let ce = g.cross_entropy(z, &labels)?;
                g.mean(ce)
            }),
        },
        3 => RandomGraph {
            name: "softmax-log",
            leaves: vec![rand_tensor(&mut rng, &[n, c], 2.0), rand_tensor(&mut rng, &[n, c], 1.0)],
            build: Box::new(|g, v| {
                let p = g.softmax(v[0])?;
                let l = g.log(p)?;
                let w = g.mul(l, v[1])?;
                g.sum(w)
            }),
        },
        4 => {
            let h = rng.gen_range(4..7);
            let cin = rng.gen_range(1..3);
            let cout = rng.gen_range(1..4);
            RandomGraph {
                name: "conv-relu-pool",
                leaves: vec![
                    rand_tensor(&mut rng, &[2, cin, h, h], 1.0),
                    rand_tensor(&mut rng, &[cout, cin, 3, 3], 0.5),
                    rand_tensor(&mut rng, &[cout], 0.2),
                ],
                build: Box::new(|g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride: 1, padding: 1 })?;
                    let y = g.relu(y)?;
                    let y = g.max_pool2d(y, 2)?;
                    let q = g.mul(y, y)?;
                    g.sum(q)
                }),
            }
        }
        5 => {
            let h = rng.gen_range(5..8);
            RandomGraph {
                name: "conv-stride-flatten-linear",
                leaves: vec![
                    rand_tensor(&mut rng, &[n, 1, h, h], 1.0),
                    rand_tensor(&mut rng, &[2, 1, 3, 3], 0.5),
                    rand_tensor(&mut rng, &[2], 0.2),
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], Conv2dGeometry { stride: 2, padding: 0 })?;
                    let f = g.flatten(y)?;
                    let cols = g.value(f).shape()[1];
                    let w = g.constant(Tensor::from_f64(&[3, cols], &(0..3 * cols).map(|i| ((i * 7) % 5) as f64 / 5.0 - 0.4).collect::<Vec<_>>()).unwrap());
                    let b = g.constant(Tensor::zeros(&[3]));
                    let z = g.linear(f, w, b)?;
                    let p = g.softmax(z)?;
                    let l = g.log(p)?;
                    g.mean(l)
                }),
            }
        }
        6 => RandomGraph {
            name: "row-l2-dist",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0)],
            build: Box::new(|g, v| {
                let dist = g.row_l2_dist(v[0], v[1])?;
                let dd = g.mul(dist, dist)?;
                let s = g.add(dist, dd)?;
                g.mean(s)
            }),
        },
        7 => RandomGraph {
            name: "concat-slice",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n + 1, d], 1.0), rand_tensor(&mut rng, &[2 * n + 1, d], 1.0)],
            build: Box::new(move |g, v| {
                let cat = g.concat(&[v[0], v[1]])?;
                let m = g.mul(cat, v[2])?;
                let a = g.slice_rows(m, 1, n)?;
                let b = g.slice_rows(cat, 0, n)?;
                let p = g.mul(a, b)?;
                g.sum(p)
            }),
        },
        8 => RandomGraph {
            name: "mix-softmax-weights",
            leaves: vec![rand_tensor(&mut rng, &[n, 3], 1.0), rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0)],
            build: Box::new(|g, v| {
                let w = g.softmax(v[0])?;
                let m = g.mix(w, &[v[1], v[2], v[3]])?;
                let q = g.mul(m, m)?;
                g.sum(q)
            }),
        },
        9 => RandomGraph {
            name: "reshape-matmul-ce",
            leaves: vec![rand_tensor(&mut rng, &[n, 2, d], 1.0), rand_tensor(&mut rng, &[2 * d, c], 1.0)],
            build: Box::new(move |g, v| {
                let x = g.reshape(v[0], &[n, 2 * d])?;
                let z = g.matmul(x, v[1])?;
                let ce = g.cross_entropy(z, &labels)?;
                g.sum(ce)
            }),
        },
        10 => RandomGraph {
            name: "log-positive",
            leaves: vec![positive_tensor(&mut rng, &[n, d]), rand_tensor(&mut rng, &[n, d], 1.0)],
            build: Box::new(|g, v| {
                let l = g.log(v[0])?;
                let m = g.mul(l, v[1])?;
                let r = g.relu(m)?;
                g.sum(r)
            }),
        },
        _ => RandomGraph {
            name: "shared-subexpression",
            leaves: vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[d, d], 0.7), rand_tensor(&mut rng, &[d], 0.3)],
            build: Box::new(|g, v| {
                let h = g.linear(v[0], v[1], v[2])?;
                let h2 = g.linear(h, v[1], v[2])?;
                let r = g.relu(h2)?;
                let s = g.add(r, v[0])?;
                let dist = g.row_l2_dist(s, h)?;
                g.sum(dist)
            }),
        },
    }
}

fn eval_graph(build: &Builder, leaves: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

/// Relative errors of analytic vs central-difference gradients, one per leaf entry.
pub fn graph_rel_errors(rg: &RandomGraph) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = rg.leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (rg.build)(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut errs = Vec::new();
    for (li, leaf) in rg.leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for j in 0..leaf.numel() {
            let mut plus = rg.leaves.clone();
            plus[li].data_mut()[j] += FD_STEP;
            let mut minus = rg.leaves.clone();
            minus[li].data_mut()[j] -= FD_STEP;
            let numeric = (eval_graph(&rg.build, &plus) - eval_graph(&rg.build, &minus)) / (2.0 * FD_STEP);
            errs.push(rel_err(analytic.data()[j], numeric));
        }
    }
    errs
}

/// Tiny setting for checking gradients of the whole objective.
pub struct TinyProblem {
    pub net: Network<f64>,
    pub sources: Vec<Image>,
    pub auxiliaries: Vec<Image>,
    /// `marginal[k][i]`: sample `i` transformed by factor `k`.
    pub marginal: Vec<Vec<Image>>,
    pub labels: Vec<usize>,
    pub profiles: Vec<EffectProfile<f64>>,
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

pub fn tiny_problem(seed: u64) -> TinyProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec {
        height: 8,
        width: 8,
        channels: 1,
        classes: 3,
        feature_dim: 6,
        factors: 3,
        conv_channels: [2, 3],
        weight_hidden: 4,
    };
    let mut net = Network::<f64>::init(spec, seed).unwrap();
    // Move M_k and W off their zero init so every path carries signal.
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let n = 2;
    let sources: Vec<Image> = (0..n).map(|_| random_image(&mut rng, 8, 8, 1)).collect();
    let auxiliaries: Vec<Image> = (0..n).map(|_| random_image(&mut rng, 8, 8, 1)).collect();
    let marginal = (0..3).map(|_| (0..n).map(|_| random_image(&mut rng, 8, 8, 1)).collect()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let catalog = [Factor::Brightness, Factor::Contrast, Factor::Rotate];
    let profiles = (0..n)
        .map(|i| EffectProfile {
            sample_id: i as u64,
            effects: catalog
                .iter()
                .map(|&factor| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    let mean = raw.iter().sum::<f64>() / 3.0;
                    mcl_core::causal::CausalEffect { factor, effect: raw.iter().map(|v| v - mean).collect() }
                })
                .collect(),
        })
        .collect();
    TinyProblem { net, sources, auxiliaries, marginal, labels, profiles }
}

/// `L_c + L_ac + L_am` on a graph; `requires_grad` controls taping.
pub fn tiny_total(p: &TinyProblem, net: &Network<f64>, requires_grad: bool) -> (Graph<f64>, mcl_core::model::Bound, Var) {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, requires_grad);
    fn refs(v: &[Image]) -> Vec<&Image> {
        v.iter().collect()
    }
    let xs = g.constant(net.image_batch(&refs(&p.sources)).unwrap());
    let xa = g.constant(net.image_batch(&refs(&p.auxiliaries)).unwrap());
    let fs = bound.features(&mut g, xs).unwrap();
    let fa = bound.features(&mut g, xa).unwrap();
    let n = p.sources.len();
    let l_c = loss_classification_on(&mut g, &bound, fs, &p.labels).unwrap();
    let e = g.constant(effects_tensor(&p.profiles, 3).unwrap());
    let w = mapping_weights_on(&mut g, &bound, e, n, 3).unwrap();
    let l_ac = loss_alignment_causal_on(&mut g, &bound, fs, fa, w, &p.labels, 3).unwrap();
    let parts: Vec<(usize, Var)> = (0..3)
        .map(|k| {
            let x = g.constant(net.image_batch(&refs(&p.marginal[k])).unwrap());
            (k, bound.features(&mut g, x).unwrap())
        })
        .collect();
    let l_am = loss_alignment_marginal_on(&mut g, &bound, fs, &parts, &p.labels).unwrap();
    let t = g.add(l_c, l_ac).unwrap();
    let total = g.add(t, l_am).unwrap();
    (g, bound, total)
}

/// Relative errors over every parameter entry of the tiny network.
pub fn total_loss_rel_errors(p: &TinyProblem) -> Vec<f64> {
    let (g, bound, total) = tiny_total(p, &p.net, true);
    let grads = g.backward(total).unwrap();
    let eval = |net: &Network<f64>| {
        let (g, _, t) = tiny_total(p, net, false);
        g.value(t).item().unwrap()
    };
    let mut errs = Vec::new();
    let count = p.net.named_params().len();
    for pi in 0..count {
        let analytic = grads.get(bound.vars()[pi]).expect("every parameter is reached").clone();
        for j in 0..analytic.numel() {
            let mut plus = p.net.clone();
            plus.params_mut()[pi].value.data_mut()[j] += FD_STEP;
            let mut minus = p.net.clone();
            minus.params_mut()[pi].value.data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            errs.push(rel_err(analytic.data()[j], numeric));
        }
    }
    errs
}

/// Degree grid computed from scratch: midpoint for `m = 1`, endpoints
/// included otherwise.
pub fn oracle_grid(factor: Factor, m: usize) -> Vec<Option<f64>> {
    match factor.degree_range() {
        None => vec![None],
        Some((lo, hi)) if m == 1 => vec![Some((lo + hi) / 2.0)],
        Some((lo, hi)) => (0..m).map(|j| Some(lo + (hi - lo) * j as f64 / (m - 1) as f64)).collect(),
    }
}

/// Brute-force effect: one forward per image, explicit averaging.
pub fn oracle_profile(net: &Network<f64>, x: &Image, catalog: &[Factor], m: usize, sample_id: u64) -> Vec<Vec<f64>> {
    let factual = net.predict(&[x]).unwrap().into_data();
    let mut out = Vec::new();
    for &factor in catalog {
        let grid = oracle_grid(factor, m);
        let mut acc = vec![0.0; factual.len()];
        for (j, &degree) in grid.iter().enumerate() {
            let spec = TransformSpec { factor, degree, noise_seed: Some(noise_seed(sample_id, factor, j)) };
            let moved = apply_factor(x, &spec).unwrap();
            let y = net.predict(&[&moved]).unwrap().into_data();
            for (a, v) in acc.iter_mut().zip(y) {
                *a += v;
            }
        }
        out.push(factual.iter().zip(&acc).map(|(f, a)| f - a / grid.len() as f64).collect());
    }
    out
}
