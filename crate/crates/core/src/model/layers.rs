use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Axis, Mask, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Parameters bound to one tape; index with [`ParamId::index`].
pub(crate) struct Bound<'t>(pub Vec<Var<'t>>);

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        Bound(store.ids().map(|id| tape.param(store, id)).collect())
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.0[id.index()]
    }
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: SplitMix64,
}

impl Init<'_> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
    }

    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::full(1, cols, value))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.xavier(format!("{name}.weight"), fan_in, fan_out),
            bias: init.constant(format!("{name}.bias"), fan_out, 0.0),
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        x.matmul(&p.get(self.weight))?.add_row(&p.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), d, 1.0),
            beta: init.constant(format!("{name}.beta"), d, 0.0),
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        x.layer_norm()?.mul_row(&p.get(self.gamma))?.add_row(&p.get(self.beta))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    pub o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Multi-head attention of `queries` over `keys`. Per-head weight
    /// matrices are pushed to `trace` when given.
    pub fn apply<'t>(
        &self,
        p: &Bound<'t>,
        queries: Var<'t>,
        keys: Var<'t>,
        mask: Option<&Mask>,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>, NumericsError> {
        let q = self.q.apply(p, queries)?;
        let k = self.k.apply(p, keys)?;
        let v = self.v.apply(p, keys)?;
        let d = q.dims().1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice(Axis::Cols, a, b)?;
            let kh = k.slice(Axis::Cols, a, b)?;
            let vh = v.slice(Axis::Cols, a, b)?;
            let logits = qh.matmul(&kh.t())?.scale(scale);
            let w = match mask {
                Some(m) => logits.masked_softmax(m)?,
                None => logits.softmax()?,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push((*w.value()).clone());
            }
            outs.push(w.matmul(&vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            queries.tape().concat(&outs, Axis::Cols)?
        };
        self.o.apply(p, joined)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.down.apply(p, self.up.apply(p, x)?.gelu())
    }
}

/// One pre-norm block; every sublayer is `x + f(norm(x))`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub norm_actor_self: Norm,
    pub actor_self: Attention,
    pub norm_group_self: Norm,
    pub group_self: Attention,
    pub norm_grouping_q: Norm,
    pub norm_grouping_kv: Norm,
    pub grouping: Attention,
    pub norm_scene: Norm,
    pub norm_actor_cross: Norm,
    pub actor_cross: Attention,
    pub norm_group_cross: Norm,
    pub group_cross: Attention,
    pub norm_actor_ffn: Norm,
    pub actor_ffn: FeedForward,
    pub norm_group_ffn: Norm,
    pub group_ffn: FeedForward,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            norm_actor_self: Norm::new(init, &n("norm_actor_self"), d),
            actor_self: Attention::new(init, &n("actor_self"), d, heads),
            norm_group_self: Norm::new(init, &n("norm_group_self"), d),
            group_self: Attention::new(init, &n("group_self"), d, heads),
            norm_grouping_q: Norm::new(init, &n("norm_grouping_q"), d),
            norm_grouping_kv: Norm::new(init, &n("norm_grouping_kv"), d),
            grouping: Attention::new(init, &n("grouping"), d, heads),
            norm_scene: Norm::new(init, &n("norm_scene"), d),
            norm_actor_cross: Norm::new(init, &n("norm_actor_cross"), d),
            actor_cross: Attention::new(init, &n("actor_cross"), d, heads),
            norm_group_cross: Norm::new(init, &n("norm_group_cross"), d),
            group_cross: Attention::new(init, &n("group_cross"), d, heads),
            norm_actor_ffn: Norm::new(init, &n("norm_actor_ffn"), d),
            actor_ffn: FeedForward::new(init, &n("actor_ffn"), d, hidden),
            norm_group_ffn: Norm::new(init, &n("norm_group_ffn"), d),
            group_ffn: FeedForward::new(init, &n("group_ffn"), d, hidden),
        }
    }

    pub fn apply<'t>(
        &self,
        p: &Bound<'t>,
        actors: Var<'t>,
        groups: Var<'t>,
        scene: Var<'t>,
        mask: Option<&Mask>,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<(Var<'t>, Var<'t>), NumericsError> {
        let x = self.norm_actor_self.apply(p, actors)?;
        let actors = actors.add(&self.actor_self.apply(p, x, x, mask, trace)?)?;
        let g = self.norm_group_self.apply(p, groups)?;
        let groups = groups.add(&self.group_self.apply(p, g, g, None, None)?)?;

        let q = self.norm_grouping_q.apply(p, groups)?;
        let kv = self.norm_grouping_kv.apply(p, actors)?;
        let groups = groups.add(&self.grouping.apply(p, q, kv, None, None)?)?;

        let s = self.norm_scene.apply(p, scene)?;
        let x = self.norm_actor_cross.apply(p, actors)?;
        let actors = actors.add(&self.actor_cross.apply(p, x, s, None, None)?)?;
        let g = self.norm_group_cross.apply(p, groups)?;
        let groups = groups.add(&self.group_cross.apply(p, g, s, None, None)?)?;

        let x = self.norm_actor_ffn.apply(p, actors)?;
        let actors = actors.add(&self.actor_ffn.apply(p, x)?)?;
        let g = self.norm_group_ffn.apply(p, groups)?;
        let groups = groups.add(&self.group_ffn.apply(p, g)?)?;
        Ok((actors, groups))
    }
}
