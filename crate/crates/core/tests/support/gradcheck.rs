//! Finite-difference oracle for tape gradients.
//!
//! Every check evaluates an independent f64 reimplementation of the forward
//! pass, differentiates it numerically, and compares the result with the
//! f32 tape gradient tensor by tensor.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use ppac::data::{Interaction, InteractionDataset};
use ppac::engine::{
    bpr_loss, factual_on_tape, regression_losses, total_loss, ObservedPopularity, Variant,
};
use ppac::models::{Forward, ModelKind, ModelSpec, ScorerBundle};
use ppac::numerics::{ParameterStore, SparseAdjacency, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Gradient norms below this are treated as exactly zero.
const ZERO: f64 = 1e-8;

fn central_difference(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + STEP;
            let hi = f(&x);
            x[k] = orig - STEP;
            let lo = f(&x);
            x[k] = orig;
            (hi - lo) / (2.0 * STEP)
        })
        .collect()
}

fn norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of `tape` against `numeric`; both must vanish together.
fn relative_error(tape: &[f32], numeric: &[f64]) -> f64 {
    let diff = norm(tape.iter().zip(numeric).map(|(&a, &b)| a as f64 - b));
    let scale = norm(numeric.iter().copied());
    if scale < ZERO {
        if diff < ZERO { 0.0 } else { f64::INFINITY }
    } else {
        diff / scale
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---------------------------------------------------------------------------
// single operations

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    out_len: usize,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    oracle: Box<dyn Fn(&[&[f64]]) -> Vec<f64>>,
}

fn check_op(case: OpCase, rng: &mut ChaCha8Rng) -> f64 {
    // random projection so every output element gets a distinct weight
    let weights = random_vec(rng, case.out_len, 1.0);
    let inputs: Vec<Vec<f64>> = case.inputs.iter().map(|(_, v)| f64s(&f32s(v))).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&inputs)
        .map(|((shape, _), v)| tape.leaf(Tensor::new(shape.clone(), f32s(v)).unwrap()).unwrap())
        .collect();
    let out = (case.build)(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(Tensor::new(out_shape, f32s(&weights)).unwrap()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.gradients(loss).unwrap();

    let objective = |all: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = all.iter().map(Vec::as_slice).collect();
        let y = (case.oracle)(&refs);
        assert_eq!(y.len(), case.out_len, "{}", case.name);
        y.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
    };
    let tape_loss = tape.value(loss).item() as f64;
    let oracle_loss = objective(&inputs);
    if (tape_loss - oracle_loss).abs() > 1e-5 * (1.0 + oracle_loss.abs()) {
        return f64::INFINITY;
    }

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let numeric = central_difference(&inputs[k], &|x: &[f64]| {
            let mut all = inputs.clone();
            all[k] = x.to_vec();
            objective(&all)
        });
        let analytic = grads.get(*var).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; numeric.len()]);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn matmul64(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            out[r * m + c] = (0..k).map(|j| a[r * k + j] * b[j * m + c]).sum();
        }
    }
    out
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus64(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Dense `D^-1/2 A D^-1/2` of the user-item bipartite graph, users first.
fn normalized_adjacency(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Vec<f64> {
    let n = num_users + num_items;
    let mut a = vec![0.0; n * n];
    for &(u, i) in edges {
        let (x, y) = (u as usize, num_users + i as usize);
        a[x * n + y] = 1.0;
        a[y * n + x] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|r| a[r * n..(r + 1) * n].iter().sum()).collect();
    for r in 0..n {
        for c in 0..n {
            if a[r * n + c] != 0.0 {
                a[r * n + c] /= (deg[r] * deg[c]).sqrt();
            }
        }
    }
    a
}

fn elementwise(name: &'static str, rng: &mut ChaCha8Rng, f: fn(f64) -> f64, build: fn(&mut Tape, Var) -> Var) -> OpCase {
    OpCase {
        name,
        inputs: vec![(vec![3, 4], away_from_zero(rng, 12))],
        out_len: 12,
        build: Box::new(move |t, v| build(t, v[0])),
        oracle: Box::new(move |x| x[0].iter().map(|&v| f(v)).collect()),
    }
}

/// Worst relative error per operation.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let edges = vec![(0u32, 0u32), (0, 2), (1, 1), (2, 0), (2, 1), (2, 3), (3, 3)];
    let adj = Arc::new(SparseAdjacency::from_edges(4, 4, &edges));
    let dense_adj = normalized_adjacency(4, 4, &edges);

    let cases = vec![
        OpCase {
            name: "matmul",
            inputs: vec![(vec![3, 4], random_vec(&mut rng, 12, 1.0)), (vec![4, 2], random_vec(&mut rng, 8, 1.0))],
            out_len: 6,
            build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| matmul64(x[0], x[1], 3, 4, 2)),
        },
        OpCase {
            name: "add",
            inputs: vec![(vec![2, 3], random_vec(&mut rng, 6, 1.0)), (vec![2, 3], random_vec(&mut rng, 6, 1.0))],
            out_len: 6,
            build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| x[0].iter().zip(x[1]).map(|(a, b)| a + b).collect()),
        },
        OpCase {
            name: "sub",
            inputs: vec![(vec![5], random_vec(&mut rng, 5, 1.0)), (vec![5], random_vec(&mut rng, 5, 1.0))],
            out_len: 5,
            build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| x[0].iter().zip(x[1]).map(|(a, b)| a - b).collect()),
        },
        OpCase {
            name: "mul",
            inputs: vec![(vec![2, 3], random_vec(&mut rng, 6, 1.0)), (vec![2, 3], random_vec(&mut rng, 6, 1.0))],
            out_len: 6,
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| x[0].iter().zip(x[1]).map(|(a, b)| a * b).collect()),
        },
        OpCase {
            name: "scale",
            inputs: vec![(vec![4], random_vec(&mut rng, 4, 1.0))],
            out_len: 4,
            build: Box::new(|t, v| t.scale(v[0], -2.5).unwrap()),
            oracle: Box::new(|x| x[0].iter().map(|a| -2.5 * a).collect()),
        },
        elementwise("relu", &mut rng, |x| x.max(0.0), |t, v| t.relu(v).unwrap()),
        elementwise("sigmoid", &mut rng, sigmoid64, |t, v| t.sigmoid(v).unwrap()),
        elementwise("softplus", &mut rng, softplus64, |t, v| t.softplus(v).unwrap()),
        elementwise("square", &mut rng, |x| x * x, |t, v| t.square(v).unwrap()),
        OpCase {
            name: "add_bias",
            inputs: vec![(vec![3, 2], random_vec(&mut rng, 6, 1.0)), (vec![2], random_vec(&mut rng, 2, 1.0))],
            out_len: 6,
            build: Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| (0..6).map(|k| x[0][k] + x[1][k % 2]).collect()),
        },
        OpCase {
            name: "concat_cols",
            inputs: vec![(vec![2, 2], random_vec(&mut rng, 4, 1.0)), (vec![2, 3], random_vec(&mut rng, 6, 1.0))],
            out_len: 10,
            build: Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| {
                let mut out = Vec::new();
                for r in 0..2 {
                    out.extend_from_slice(&x[0][r * 2..r * 2 + 2]);
                    out.extend_from_slice(&x[1][r * 3..r * 3 + 3]);
                }
                out
            }),
        },
        OpCase {
            name: "concat_rows",
            inputs: vec![(vec![1, 3], random_vec(&mut rng, 3, 1.0)), (vec![2, 3], random_vec(&mut rng, 6, 1.0))],
            out_len: 9,
            build: Box::new(|t, v| t.concat_rows(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| [x[0], x[1]].concat()),
        },
        OpCase {
            name: "slice_rows",
            inputs: vec![(vec![4, 2], random_vec(&mut rng, 8, 1.0))],
            out_len: 4,
            build: Box::new(|t, v| t.slice_rows(v[0], 1, 2).unwrap()),
            oracle: Box::new(|x| x[0][2..6].to_vec()),
        },
        OpCase {
            name: "dot_rows",
            inputs: vec![(vec![3, 4], random_vec(&mut rng, 12, 1.0)), (vec![3, 4], random_vec(&mut rng, 12, 1.0))],
            out_len: 3,
            build: Box::new(|t, v| t.dot_rows(v[0], v[1]).unwrap()),
            oracle: Box::new(|x| (0..3).map(|r| (0..4).map(|c| x[0][r * 4 + c] * x[1][r * 4 + c]).sum()).collect()),
        },
        OpCase {
            name: "gather_rows",
            inputs: vec![(vec![4, 2], random_vec(&mut rng, 8, 1.0))],
            out_len: 10,
            build: Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 3]).unwrap()),
            oracle: Box::new(|x| [3usize, 0, 3, 1, 3].iter().flat_map(|&r| x[0][r * 2..r * 2 + 2].to_vec()).collect()),
        },
        OpCase {
            name: "propagate",
            inputs: vec![(vec![8, 3], random_vec(&mut rng, 24, 1.0))],
            out_len: 24,
            build: Box::new(move |t, v| t.propagate(&adj, v[0]).unwrap()),
            oracle: Box::new(move |x| matmul64(&dense_adj, x[0], 8, 8, 3)),
        },
        OpCase {
            name: "sum",
            inputs: vec![(vec![2, 3], random_vec(&mut rng, 6, 1.0))],
            out_len: 1,
            build: Box::new(|t, v| t.sum(v[0]).unwrap()),
            oracle: Box::new(|x| vec![x[0].iter().sum()]),
        },
        OpCase {
            name: "mean",
            inputs: vec![(vec![5], random_vec(&mut rng, 5, 1.0))],
            out_len: 1,
            build: Box::new(|t, v| t.mean(v[0]).unwrap()),
            oracle: Box::new(|x| vec![x[0].iter().sum::<f64>() / 5.0]),
        },
        OpCase {
            name: "reshape",
            inputs: vec![(vec![3, 1], random_vec(&mut rng, 3, 1.0))],
            out_len: 3,
            build: Box::new(|t, v| t.reshape(v[0], &[3]).unwrap()),
            oracle: Box::new(|x| x[0].to_vec()),
        },
        OpCase {
            name: "l2_penalty",
            inputs: vec![(vec![2, 2], random_vec(&mut rng, 4, 1.0)), (vec![3], random_vec(&mut rng, 3, 1.0))],
            out_len: 1,
            build: Box::new(|t, v| t.l2_penalty(0.3, &[v[0], v[1]]).unwrap()),
            oracle: Box::new(|x| vec![0.3 * x.iter().flat_map(|v| v.iter()).map(|a| a * a).sum::<f64>()]),
        },
    ];
    cases.into_iter().map(|c| (c.name.to_string(), check_op(c, &mut rng))).collect()
}

// ---------------------------------------------------------------------------
// composed models and losses

/// Five users, six items; item 5 is never seen so degrees vary.
fn toy() -> InteractionDataset {
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 3), (2, 0), (2, 3), (2, 4), (3, 2), (4, 0), (4, 1), (4, 4)];
    let train = pairs
        .iter()
        .map(|&(user, item)| Interaction {
            user,
            item,
            rating: None,
            timestamp: None,
        })
        .collect();
    InteractionDataset::from_splits(
        5,
        6,
        (0..5).map(|u| format!("u{u}")).collect(),
        (0..6).map(|i| format!("i{i}")).collect(),
        train,
        Vec::new(),
        Vec::new(),
        None,
    )
}

/// f64 copy of a parameter store, keyed by name.
#[derive(Clone)]
struct Params(HashMap<String, Vec<f64>>);

impl Params {
    fn of(store: &ParameterStore) -> Self {
        Self(store.ids().map(|id| (store.name(id).to_string(), f64s(store.value(id).data()))).collect())
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.0[name]
    }

    fn row(&self, name: &str, r: usize, d: usize) -> &[f64] {
        &self.get(name)[r * d..(r + 1) * d]
    }

    /// `x · W + b` for the layer `prefix`.
    fn dense(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        let out = b.len();
        assert_eq!(w.len(), x.len() * out);
        (0..out).map(|j| b[j] + (0..x.len()).map(|k| x[k] * w[k * out + j]).sum::<f64>()).collect()
    }
}

fn relu_all(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Independent forward pass of one bundle layout.
struct Oracle {
    spec: ModelSpec,
    adj: Vec<f64>,
}

impl Oracle {
    fn new(spec: &ModelSpec, ds: &InteractionDataset) -> Self {
        let edges: Vec<(u32, u32)> = ds.train.interactions().iter().map(|it| (it.user, it.item)).collect();
        Self {
            spec: spec.clone(),
            adj: normalized_adjacency(spec.num_users, spec.num_items, &edges),
        }
    }

    fn head_tables(&self) -> (&'static str, &'static str) {
        if self.spec.shared_embeddings {
            ("user_emb", "item_emb")
        } else {
            ("head_user_emb", "head_item_emb")
        }
    }

    /// Final node embeddings, users first.
    fn embeddings(&self, p: &Params) -> Vec<f64> {
        let e0 = [p.get("user_emb"), p.get("item_emb")].concat();
        if self.spec.kind != ModelKind::Lightgcn {
            return e0;
        }
        let n = self.spec.num_users + self.spec.num_items;
        let d = self.spec.dim;
        let mut acc = e0.clone();
        let mut cur = e0;
        for _ in 0..self.spec.layers {
            cur = matmul64(&self.adj, &cur, n, n, d);
            acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += c);
        }
        let l = (self.spec.layers + 1) as f64;
        acc.into_iter().map(|v| v / l).collect()
    }

    fn base(&self, p: &Params, emb: &[f64], u: u32, i: u32) -> f64 {
        let d = self.spec.dim;
        let ue = &emb[u as usize * d..(u as usize + 1) * d];
        let j = self.spec.num_users + i as usize;
        let ie = &emb[j * d..(j + 1) * d];
        let gmf: Vec<f64> = ue.iter().zip(ie).map(|(a, b)| a * b).collect();
        if self.spec.kind != ModelKind::Ncf {
            return gmf.iter().sum();
        }
        let h1 = relu_all(p.dense("ncf.l1", &[ue, ie].concat()));
        let h2 = relu_all(p.dense("ncf.l2", &h1));
        p.dense("ncf.out", &[gmf, h2].concat())[0]
    }

    fn pp_logit(&self, p: &Params, u: u32, i: u32) -> f64 {
        let (tu, ti) = self.head_tables();
        let d = self.spec.dim;
        let x = [p.row(tu, u as usize, d), p.row(ti, i as usize, d)].concat();
        p.dense("pp.l2", &relu_all(p.dense("pp.l1", &x)))[0]
    }

    fn gp_logit(&self, p: &Params, i: u32) -> f64 {
        let (_, ti) = self.head_tables();
        let x = p.row(ti, i as usize, self.spec.dim).to_vec();
        p.dense("gp.l2", &relu_all(p.dense("gp.l1", &x)))[0]
    }

    fn factual(&self, p: &Params, emb: &[f64], variant: Variant, u: u32, i: u32, obs: Option<(f64, f64)>) -> f64 {
        let r = self.base(p, emb, u, i);
        if variant == Variant::ObsOnly {
            let (pp, gp) = obs.unwrap();
            return pp * gp * r;
        }
        let mut y = r;
        if variant.uses_pp_head() {
            y *= sigmoid64(self.pp_logit(p, u, i));
        }
        if variant.uses_gp_head() {
            y *= sigmoid64(self.gp_logit(p, i));
        }
        y
    }

    fn penalty(&self, p: &Params, lambda: f64, users: &[u32], items: &[u32]) -> f64 {
        let d = self.spec.dim;
        let us: BTreeSet<u32> = users.iter().copied().collect();
        let is: BTreeSet<u32> = items.iter().copied().collect();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut total = 0.0;
        let mut tables = vec![("user_emb", &us), ("item_emb", &is)];
        if !self.spec.shared_embeddings {
            tables.push(("head_user_emb", &us));
            tables.push(("head_item_emb", &is));
        }
        for (name, rows) in tables {
            total += rows.iter().map(|&r| sq(p.row(name, r as usize, d))).sum::<f64>();
        }
        for (name, v) in &p.0 {
            if name.ends_with(".w") || name.ends_with(".b") {
                total += sq(v);
            }
        }
        lambda * total
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Component {
    Ranking(Variant),
    Pp,
    Gp,
    Penalty,
    Total,
}

struct Batch {
    users: Vec<u32>,
    pos: Vec<u32>,
    neg: Vec<u32>,
    pp_targets: Vec<f32>,
    obs_pos: (Vec<f32>, Vec<f32>),
    obs_neg: (Vec<f32>, Vec<f32>),
    gp_items: Vec<u32>,
    gp_targets: Vec<f32>,
    gp_scale: f32,
    alpha: f32,
    lambda: f32,
}

fn batch() -> Batch {
    Batch {
        users: vec![0, 1, 2, 4, 0, 3],
        pos: vec![1, 3, 4, 0, 2, 2],
        neg: vec![5, 0, 1, 3, 3, 5],
        pp_targets: vec![0.5, 0.25, 1.0, 0.0, 0.75, 0.4],
        obs_pos: (vec![0.5, 0.25, 1.0, 0.1, 0.75, 0.4], vec![0.6, 0.4, 0.4, 0.6, 0.4, 0.4]),
        obs_neg: (vec![0.2, 0.3, 0.5, 0.7, 0.9, 0.05], vec![0.1, 0.6, 0.6, 0.4, 0.4, 0.1]),
        gp_items: vec![4, 1, 5],
        gp_targets: vec![0.4, 0.6, 0.0],
        gp_scale: 2.0 / 6.0,
        alpha: 0.7,
        lambda: 0.05,
    }
}

fn touched_items(b: &Batch, gp: bool) -> Vec<u32> {
    let mut v: Vec<u32> = b.pos.iter().chain(&b.neg).copied().collect();
    if gp {
        v.extend_from_slice(&b.gp_items);
    }
    v
}

/// The component on the tape, built through the public training API.
fn tape_component(bundle: &ScorerBundle, b: &Batch, c: Component) -> (Tape, Var) {
    let mut f = Forward::new(bundle);
    let ranking = |f: &mut Forward<'_>, v: Variant| {
        let (po, no) = if v == Variant::ObsOnly {
            (
                Some(ObservedPopularity { pp: &b.obs_pos.0, gp: &b.obs_pos.1 }),
                Some(ObservedPopularity { pp: &b.obs_neg.0, gp: &b.obs_neg.1 }),
            )
        } else {
            (None, None)
        };
        let yp = factual_on_tape(f, v, &b.users, &b.pos, po).unwrap();
        let yn = factual_on_tape(f, v, &b.users, &b.neg, no).unwrap();
        bpr_loss(f.tape(), yp, yn).unwrap()
    };
    let regression = |f: &mut Forward<'_>| {
        regression_losses(f, Variant::Full, &b.users, &b.pos, &b.pp_targets, &b.gp_items, &b.gp_targets, b.gp_scale)
            .unwrap()
    };
    let loss = match c {
        Component::Ranking(v) => ranking(&mut f, v),
        Component::Pp => regression(&mut f).pp.unwrap(),
        Component::Gp => regression(&mut f).gp.unwrap(),
        Component::Penalty => f.l2_penalty(b.lambda, &b.users, &touched_items(b, true)).unwrap(),
        Component::Total => {
            let lr = ranking(&mut f, Variant::Full);
            let reg = regression(&mut f);
            let pen = f.l2_penalty(b.lambda, &b.users, &touched_items(b, true)).unwrap();
            total_loss(f.tape(), lr, reg.pp, reg.gp, b.alpha, pen).unwrap()
        }
    };
    (f.into_tape(), loss)
}

fn oracle_component(o: &Oracle, p: &Params, b: &Batch, c: Component) -> f64 {
    let emb = o.embeddings(p);
    let n = b.users.len() as f64;
    let ranking = |v: Variant| {
        (0..b.users.len())
            .map(|k| {
                let obs = |x: &(Vec<f32>, Vec<f32>)| Some((x.0[k] as f64, x.1[k] as f64));
                let yp = o.factual(p, &emb, v, b.users[k], b.pos[k], obs(&b.obs_pos));
                let yn = o.factual(p, &emb, v, b.users[k], b.neg[k], obs(&b.obs_neg));
                softplus64(yn - yp)
            })
            .sum::<f64>()
            / n
    };
    let pp = || {
        (0..b.users.len())
            .map(|k| (sigmoid64(o.pp_logit(p, b.users[k], b.pos[k])) - b.pp_targets[k] as f64).powi(2))
            .sum::<f64>()
            / n
    };
    let gp = || {
        b.gp_items
            .iter()
            .zip(&b.gp_targets)
            .map(|(&i, &t)| (sigmoid64(o.gp_logit(p, i)) - t as f64).powi(2))
            .sum::<f64>()
            * b.gp_scale as f64
    };
    let penalty = || o.penalty(p, b.lambda as f64, &b.users, &touched_items(b, true));
    match c {
        Component::Ranking(v) => ranking(v),
        Component::Pp => pp(),
        Component::Gp => gp(),
        Component::Penalty => penalty(),
        Component::Total => ranking(Variant::Full) + b.alpha as f64 * (pp() + gp()) + penalty(),
    }
}

fn randomized_bundle(spec: ModelSpec, ds: &InteractionDataset, seed: u64) -> ScorerBundle {
    let mut bundle = ScorerBundle::init(spec, ds, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = bundle.store().ids().collect();
    for id in ids {
        let t = bundle.store_mut().value_mut(id);
        let n = t.len();
        t.data_mut().copy_from_slice(&f32s(&random_vec(&mut rng, n, 0.6)));
    }
    bundle
}

/// Worst relative error per (component, parameter tensor); a forward value
/// that disagrees with the oracle counts as an infinite error.
pub fn model_errors(spec: ModelSpec, components: &[Component]) -> Vec<(String, f64)> {
    let ds = toy();
    let b = batch();
    let bundle = randomized_bundle(spec.clone(), &ds, 3);
    let oracle = Oracle::new(&spec, &ds);
    let params = Params::of(bundle.store());
    let names: Vec<String> = bundle.store().ids().map(|id| bundle.store().name(id).to_string()).collect();
    let mut out = Vec::new();

    for &c in components {
        let (tape, loss) = tape_component(&bundle, &b, c);
        let forward = tape.value(loss).item() as f64;
        let expected = oracle_component(&oracle, &params, &b, c);
        if (forward - expected).abs() > 1e-5 * (1.0 + expected.abs()) {
            out.push((format!("{:?} {c:?} forward", spec.kind), f64::INFINITY));
            continue;
        }
        let mut store = bundle.store().clone();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        for name in &names {
            let id = store.id(name).unwrap();
            let numeric = central_difference(params.get(name), &|x: &[f64]| {
                let mut p = params.clone();
                p.0.insert(name.clone(), x.to_vec());
                oracle_component(&oracle, &p, &b, c)
            });
            out.push((format!("{:?} {c:?} {name}", spec.kind), relative_error(store.grad(id), &numeric)));
        }
    }
    out
}

pub const ALL_COMPONENTS: [Component; 9] = [
    Component::Ranking(Variant::Full),
    Component::Ranking(Variant::NoPp),
    Component::Ranking(Variant::NoGp),
    Component::Ranking(Variant::ObsOnly),
    Component::Ranking(Variant::Base),
    Component::Pp,
    Component::Gp,
    Component::Penalty,
    Component::Total,
];

pub fn spec(kind: ModelKind) -> ModelSpec {
    ModelSpec::new(kind, 4, 5, 6)
}

