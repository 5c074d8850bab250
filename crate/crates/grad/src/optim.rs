//! Adam optimizer over a `ParamStore`.

use ndarray::ArrayD;

use crate::elem::Elem;
use crate::graph::Gradients;
use crate::nn::{ParamId, ParamKind, ParamStore};

pub struct Adam<E: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<E>>>,
    v: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients of a backward pass. Parameters
    /// without a gradient this step keep their moment state untouched.
    pub fn step(&mut self, ps: &ParamStore<E>, grads: &Gradients<E>) {
        self.t += 1;
        if self.m.len() < ps.len() {
            self.m.resize_with(ps.len(), || None);
            self.v.resize_with(ps.len(), || None);
        }
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);

        for (pid, grad) in grads.param_grads() {
            debug_assert_eq!(ps.kind(pid), ParamKind::Weight);
            let slot = pid.index();
            if self.m[slot].is_none() {
                self.m[slot] = Some(ArrayD::zeros(grad.shape()));
                self.v[slot] = Some(ArrayD::zeros(grad.shape()));
            }
            let m = self.m[slot].as_mut().expect("m state");
            let v = self.v[slot].as_mut().expect("v state");
            azip_update(m, grad, |mv, gv| b1 * mv + (one - b1) * gv);
            azip_update(v, grad, |vv, gv| b2 * vv + (one - b2) * gv * gv);
            let mut value = ps.get(pid).clone();
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
            ps.set(pid, value);
        }
    }

    /// (param index, m, v) triples for checkpointing.
    pub fn state(&self) -> (u64, Vec<(usize, &ArrayD<E>, &ArrayD<E>)>) {
        let entries = self
            .m
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.as_ref()
                    .map(|m| (i, m, self.v[i].as_ref().expect("paired v state")))
            })
            .collect();
        (self.t, entries)
    }

    pub fn restore(&mut self, t: u64, entries: Vec<(usize, ArrayD<E>, ArrayD<E>)>, n_params: usize) {
        self.t = t;
        self.m = Vec::new();
        self.v = Vec::new();
        self.m.resize_with(n_params, || None);
        self.v.resize_with(n_params, || None);
        for (i, m, v) in entries {
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
    }
}

/// Convenience: named zero-gradient audit. Returns param ids whose gradient
/// was present and not identically zero.
pub fn nonzero_grad_params<E: Elem>(grads: &Gradients<E>) -> Vec<ParamId> {
    grads
        .param_grads()
        .filter(|(_, g)| g.iter().any(|v| *v != E::zero()))
        .map(|(pid, _)| pid)
        .collect()
}

fn azip_update<E: Elem>(acc: &mut ArrayD<E>, grad: &ArrayD<E>, f: impl Fn(E, E) -> E) {
    ndarray::Zip::from(acc).and(grad).for_each(|a, &g| {
        *a = f(*a, g);
    });
}
