//! Parameter storage and the small set of layers the pipeline is built from.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::conv::{conv2d, conv_transpose2d};
use crate::elem::Elem;
use crate::graph::{Graph, Var};
use crate::rng::RandomSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight; the optimizer updates it.
    Weight,
    /// Persistent state such as batch-norm running statistics; saved in
    /// checkpoints but never receives gradients.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered, named parameter set for one player (generator side or
/// discriminator side). Values use interior mutability so forward passes can
/// update buffers without threading `&mut` everywhere; the trainer is
/// single-threaded.
pub struct ParamStore<E: Elem> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

pub struct ParamEntry<E: Elem> {
    pub name: String,
    pub kind: ParamKind,
    pub value: RefCell<ArrayD<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, init: ArrayD<E>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value: RefCell::new(init),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> Ref<'_, ArrayD<E>> {
        self.entries[id.0].value.borrow()
    }

    pub fn set(&self, id: ParamId, v: ArrayD<E>) {
        let mut slot = self.entries[id.0].value.borrow_mut();
        assert_eq!(slot.shape(), v.shape(), "param shape change for {}", self.entries[id.0].name);
        *slot = v;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Injects the parameter into a graph. Weights become gradient-tracked
    /// parameter leaves; buffers become constants.
    pub fn var<'g>(&self, g: &'g Graph<E>, id: ParamId) -> Var<'g, E> {
        let v = self.entries[id.0].value.borrow().clone();
        match self.entries[id.0].kind {
            ParamKind::Weight => g.param(id, v),
            ParamKind::Buffer => g.constant(v),
        }
    }

    /// Same as `var` but never tracks gradients; used when building a frozen
    /// copy of a sub-network (e.g. the discriminator during generator steps).
    pub fn var_frozen<'g>(&self, g: &'g Graph<E>, id: ParamId) -> Var<'g, E> {
        g.constant(self.entries[id.0].value.borrow().clone())
    }
}

/// Kaiming-normal init for a conv/linear weight with the given fan-in,
/// using the LeakyReLU(0.2) gain.
pub fn kaiming<E: Elem>(rng: &mut RandomSource, shape: &[usize], fan_in: usize) -> ArrayD<E> {
    let gain = (2.0 / (1.0 + 0.2f64 * 0.2)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    rng.normal_array(shape, std)
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RandomSource,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            ParamKind::Weight,
            kaiming(rng, &[out_dim, in_dim], in_dim),
        );
        let b = ps.add(
            &format!("{name}.b"),
            ParamKind::Weight,
            ArrayD::zeros(IxDyn(&[out_dim])),
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// x: (M, in_dim) -> (M, out_dim).
    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
    ) -> Var<'g, E> {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        x.matmul(w.transpose2()).add_bias_row(b)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut RandomSource,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            ParamKind::Weight,
            kaiming(rng, &[out_ch, in_ch, k, k], in_ch * k * k),
        );
        let b = ps.add(
            &format!("{name}.b"),
            ParamKind::Weight,
            ArrayD::zeros(IxDyn(&[out_ch])),
        );
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
    ) -> Var<'g, E> {
        conv2d(x, ps.var(g, self.w), Some(ps.var(g, self.b)), self.stride, self.pad)
    }

    pub fn forward_frozen<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
    ) -> Var<'g, E> {
        conv2d(
            x,
            ps.var_frozen(g, self.w),
            Some(ps.var_frozen(g, self.b)),
            self.stride,
            self.pad,
        )
    }
}

pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        ps: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut RandomSource,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            ParamKind::Weight,
            kaiming(rng, &[in_ch, out_ch, k, k], in_ch * k * k),
        );
        let b = ps.add(
            &format!("{name}.b"),
            ParamKind::Weight,
            ArrayD::zeros(IxDyn(&[out_ch])),
        );
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
    ) -> Var<'g, E> {
        conv_transpose2d(x, ps.var(g, self.w), Some(ps.var(g, self.b)), self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<E: Elem>(ps: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(
            &format!("{name}.gamma"),
            ParamKind::Weight,
            ArrayD::ones(IxDyn(&[channels])),
        );
        let beta = ps.add(
            &format!("{name}.beta"),
            ParamKind::Weight,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_mean = ps.add(
            &format!("{name}.running_mean"),
            ParamKind::Buffer,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_var = ps.add(
            &format!("{name}.running_var"),
            ParamKind::Buffer,
            ArrayD::ones(IxDyn(&[channels])),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    /// Normalizes to zero mean / unit variance per channel, then applies the
    /// learned affine. Training mode uses batch statistics and updates the
    /// running buffers; eval mode uses the buffers.
    pub fn forward<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
        training: bool,
    ) -> Var<'g, E> {
        self.normalize(g, ps, x, training, true)
    }

    /// The normalization without the affine; feature modulation supplies its
    /// own spatially-varying scale and shift.
    pub fn forward_no_affine<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
        training: bool,
    ) -> Var<'g, E> {
        self.normalize(g, ps, x, training, false)
    }

    fn normalize<'g, E: Elem>(
        &self,
        g: &'g Graph<E>,
        ps: &ParamStore<E>,
        x: Var<'g, E>,
        training: bool,
        affine: bool,
    ) -> Var<'g, E> {
        let shape = x.shape();
        assert_eq!(shape.len(), 4, "batchnorm expects NCHW");
        let (n, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let eps = E::from_f64(self.eps);

        let xhat = if training {
            let mean = x.channel_mean();
            let centered = x.sub(mean.broadcast_c(n, h, w));
            let var = centered.square().channel_mean();
            // Update running stats from the batch statistics just computed.
            let m = E::from_f64(self.momentum);
            let one_m = E::from_f64(1.0 - self.momentum);
            {
                let bm = mean.value();
                let bv = var.value();
                let rm = ps.get(self.running_mean).mapv(|v| v * one_m) + &bm.mapv(|v| v * m);
                let rv = ps.get(self.running_var).mapv(|v| v * one_m) + &bv.mapv(|v| v * m);
                ps.set(self.running_mean, rm);
                ps.set(self.running_var, rv);
            }
            let inv_std = var.add_s(eps).sqrt().recip();
            centered.mul(inv_std.broadcast_c(n, h, w))
        } else {
            let rm = g.constant(ps.get(self.running_mean).clone());
            let rv = ps.get(self.running_var).clone();
            let inv = g.constant(rv.mapv(|v| E::one() / (v + eps).sqrt()));
            x.sub(rm.broadcast_c(n, h, w)).mul(inv.broadcast_c(n, h, w))
        };

        if affine {
            let gamma = ps.var(g, self.gamma);
            let beta = ps.var(g, self.beta);
            xhat.mul(gamma.broadcast_c(n, h, w))
                .add(beta.broadcast_c(n, h, w))
        } else {
            xhat
        }
    }
}
