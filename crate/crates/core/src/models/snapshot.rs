use crate::data::{ItemId, UserId};
use crate::numerics::ParameterStore;

use super::{Dense, ModelKind, ScorerBundle};

/// `x · W` for row-major `x: [n, fan_in]`, plus the bias row.
fn project(store: &ParameterStore, x: &[f32], n: usize, layer: Dense) -> Vec<f32> {
    let w = store.value(layer.w);
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * fan_out];
    crate::numerics::gemm(n, fan_in, fan_out, x, false, w.data(), false, &mut out, false);
    let b = store.value(layer.b).data();
    for row in out.chunks_mut(fan_out.max(1)) {
        for (o, bb) in row.iter_mut().zip(b) {
            *o += bb;
        }
    }
    out
}

/// Splits the first layer of an MLP over `[user ‖ item]` into a per-user and
/// a per-item projection; the bias is folded into the user half.
fn split_first_layer(
    store: &ParameterStore,
    layer: Dense,
    users: &[f32],
    num_users: usize,
    items: &[f32],
    num_items: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>) {
    let w = store.value(layer.w);
    let out = w.shape()[1];
    let (top, bottom) = w.data().split_at(d * out);
    let mut up = vec![0.0; num_users * out];
    crate::numerics::gemm(num_users, d, out, users, false, top, false, &mut up, false);
    let b = store.value(layer.b).data();
    for row in up.chunks_mut(out.max(1)) {
        for (o, bb) in row.iter_mut().zip(b) {
            *o += bb;
        }
    }
    let mut ip = vec![0.0; num_items * out];
    crate::numerics::gemm(num_items, d, out, items, false, bottom, false, &mut ip, false);
    (up, ip)
}

#[derive(Clone, Debug)]
struct NcfCache {
    user_proj: Vec<f32>,
    item_proj: Vec<f32>,
    hidden: usize,
    w2: Vec<f32>,
    b2: Vec<f32>,
    out_gmf: Vec<f32>,
    out_mlp: Vec<f32>,
    out_bias: f32,
}

#[derive(Clone, Debug)]
struct PpCache {
    user_proj: Vec<f32>,
    item_proj: Vec<f32>,
    w2: Vec<f32>,
    b2: f32,
}

/// Read-only scoring state for ranking whole catalogues. Safe to share
/// across threads.
#[derive(Clone, Debug)]
pub struct InferenceSnapshot {
    kind: ModelKind,
    dim: usize,
    num_users: usize,
    num_items: usize,
    /// Final base-model embeddings (layer-averaged for LightGCN).
    user_repr: Vec<f32>,
    item_repr: Vec<f32>,
    ncf: Option<NcfCache>,
    pp: Option<PpCache>,
    gp_logits: Option<Vec<f32>>,
}

impl InferenceSnapshot {
    pub(crate) fn build(bundle: &ScorerBundle) -> Self {
        let spec = bundle.spec();
        let store = bundle.store();
        let ids = bundle.ids();
        let (nu, ni, d) = (spec.num_users, spec.num_items, spec.dim);
        let (user_repr, item_repr) = match bundle.adjacency() {
            Some(adj) if spec.kind == ModelKind::Lightgcn => {
                let mut e0 = store.value(ids.user_emb).data().to_vec();
                e0.extend_from_slice(store.value(ids.item_emb).data());
                // same operation order as the tape forward pass
                let mut acc = e0.clone();
                let mut cur = e0;
                let mut next = vec![0.0; cur.len()];
                for _ in 0..spec.layers {
                    adj.propagate(&cur, d, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                    for (a, c) in acc.iter_mut().zip(&cur) {
                        *a += c;
                    }
                }
                let s = 1.0 / (spec.layers + 1) as f32;
                acc.iter_mut().for_each(|v| *v *= s);
                let items = acc.split_off(nu * d);
                (acc, items)
            }
            _ => (
                store.value(ids.user_emb).data().to_vec(),
                store.value(ids.item_emb).data().to_vec(),
            ),
        };
        let ncf = ids.ncf.map(|p| {
            let (user_proj, item_proj) = split_first_layer(store, p.l1, &user_repr, nu, &item_repr, ni, d);
            let w_out = store.value(p.out.w).data();
            NcfCache {
                user_proj,
                item_proj,
                hidden: store.value(p.l2.w).shape()[1],
                w2: store.value(p.l2.w).data().to_vec(),
                b2: store.value(p.l2.b).data().to_vec(),
                out_gmf: w_out[..d].to_vec(),
                out_mlp: w_out[d..].to_vec(),
                out_bias: store.value(p.out.b).data()[0],
            }
        });
        let head_users = store.value(ids.head_user_emb).data();
        let head_items = store.value(ids.head_item_emb).data();
        let pp = ids.pp.map(|p| {
            let (user_proj, item_proj) = split_first_layer(store, p.l1, head_users, nu, head_items, ni, d);
            PpCache {
                user_proj,
                item_proj,
                w2: store.value(p.l2.w).data().to_vec(),
                b2: store.value(p.l2.b).data()[0],
            }
        });
        let gp_logits = ids.gp.map(|p| {
            let mut h = project(store, head_items, ni, p.l1);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            project(store, &h, ni, p.l2)
        });
        Self {
            kind: spec.kind,
            dim: d,
            num_users: nu,
            num_items: ni,
            user_repr,
            item_repr,
            ncf,
            pp,
            gp_logits,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn has_pp_head(&self) -> bool {
        self.pp.is_some()
    }

    /// `ĝ` for every item, when the GP head exists.
    pub fn gp_logits(&self) -> Option<&[f32]> {
        self.gp_logits.as_deref()
    }

    /// Writes `r̂(user, i)` for every item into `out`.
    pub fn base_row(&self, user: UserId, out: &mut [f32]) {
        let d = self.dim;
        let u = user as usize;
        let ue = &self.user_repr[u * d..(u + 1) * d];
        match &self.ncf {
            None => {
                // r̂ = I · u as one matrix-vector product
                crate::numerics::gemm(self.num_items, d, 1, &self.item_repr, false, ue, false, out, false);
            }
            Some(c) => {
                let up = &c.user_proj[u * d..(u + 1) * d];
                let mut h1 = c.item_proj.clone();
                for row in h1.chunks_mut(d) {
                    for (v, a) in row.iter_mut().zip(up) {
                        *v = (*v + a).max(0.0);
                    }
                }
                let mut h2 = vec![0.0; self.num_items * c.hidden];
                crate::numerics::gemm(self.num_items, d, c.hidden, &h1, false, &c.w2, false, &mut h2, false);
                let gw: Vec<f32> = ue.iter().zip(&c.out_gmf).map(|(a, b)| a * b).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let ie = &self.item_repr[i * d..(i + 1) * d];
                    let gmf: f32 = ie.iter().zip(&gw).map(|(a, b)| a * b).sum();
                    let mlp: f32 = h2[i * c.hidden..(i + 1) * c.hidden]
                        .iter()
                        .zip(&c.b2)
                        .zip(&c.out_mlp)
                        .map(|((h, b), w)| (h + b).max(0.0) * w)
                        .sum();
                    *o = gmf + mlp + c.out_bias;
                }
            }
        }
    }

    /// Writes `p̂(user, i)` for every item into `out`; false without a PP head.
    pub fn pp_row(&self, user: UserId, out: &mut [f32]) -> bool {
        let Some(c) = &self.pp else { return false };
        let d = self.dim;
        let u = user as usize;
        let up = &c.user_proj[u * d..(u + 1) * d];
        for (i, o) in out.iter_mut().enumerate() {
            let ip = &c.item_proj[i * d..(i + 1) * d];
            let s: f32 = up
                .iter()
                .zip(ip)
                .zip(&c.w2)
                .map(|((a, b), w)| (a + b).max(0.0) * w)
                .sum();
            *o = s + c.b2;
        }
        true
    }

    /// `r̂` for explicit pairs; each value equals the matching [`Self::base_row`] entry.
    pub fn base_pairs(&self, users: &[UserId], items: &[ItemId]) -> Vec<f32> {
        let mut row = vec![0.0; self.num_items];
        users
            .iter()
            .zip(items)
            .map(|(&u, &i)| {
                self.base_row(u, &mut row);
                row[i as usize]
            })
            .collect()
    }
}
