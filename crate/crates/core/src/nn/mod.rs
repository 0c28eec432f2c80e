//! Minimal reverse-mode autodiff over 4-D tensors (N, C, H, W).
//!
//! A `Tape` records the forward pass; `backward` walks it in reverse and
//! accumulates parameter gradients into the `ParamStore`. Everything is
//! generic over the scalar type so the same graph runs in f32 for speed and
//! in f64 for finite-difference verification.

pub mod gradcheck;
pub mod kernels;

use ndarray::{s, Array1, Array4, Axis};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array4<F>,
    pub grad: Array4<F>,
    pub velocity: Array4<F>,
    pub trainable: bool,
}

/// Named parameter and buffer storage. Buffers (`trainable == false`) hold
/// batch-norm running statistics; they serialize with the checkpoint but are
/// skipped by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array4<F>, trainable: bool) -> ParamId {
        let grad = Array4::zeros(value.raw_dim());
        let velocity = Array4::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
            velocity,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array4<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array4<F> {
        &self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Rescale all trainable gradients so their global L2 norm is at most
    /// `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: F) -> F {
        let mut sq = F::zero();
        for e in &self.entries {
            if e.trainable {
                sq = sq + e.grad.iter().fold(F::zero(), |a, &g| a + g * g);
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > F::zero() {
            let scale = max_norm / norm;
            for e in &mut self.entries {
                if e.trainable {
                    e.grad.mapv_inplace(|g| g * scale);
                }
            }
        }
        norm
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SGD with momentum: v = mu*v + g; p -= lr*v.
    pub fn sgd_step(&mut self, lr: F, mu: F, weight_decay: F) {
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let wd = weight_decay;
            let value = e.value.clone();
            azip_inplace(&mut e.velocity, &e.grad, |v, g| *v = *v * mu + g);
            azip_inplace(&mut e.velocity, &value, |v, p| *v = *v + wd * p);
            azip_inplace(&mut e.value, &e.velocity, |p, v| *p = *p - lr * v);
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.mapv(|v| G::real(v.to_f64_())),
                    grad: Array4::zeros(e.value.raw_dim()),
                    velocity: Array4::zeros(e.value.raw_dim()),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

fn azip_inplace<F: Real>(a: &mut Array4<F>, b: &Array4<F>, f: impl Fn(&mut F, F)) {
    ndarray::Zip::from(a).and(b).for_each(|x, &y| f(x, y));
}

enum Op<F> {
    Leaf { param: Option<ParamId> },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Silu(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<F>,
        var: Array1<F>,
        eps: F,
    },
    MaxPoolSame {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2x(NodeId),
    ConcatC(Vec<NodeId>),
}

struct Node<F> {
    value: Array4<F>,
    op: Op<F>,
}

/// Forward-pass recorder. `train` selects batch-norm statistics mode.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    pub train: bool,
    pending_stats: Vec<(ParamId, ParamId, Array1<F>, Array1<F>)>,
}

impl<F: Real> Tape<F> {
    pub fn new(train: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            train,
            pending_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Array4<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array4<F> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Array4<F>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Square-kernel convolution with `same` padding for stride 1 and exact
    /// halving for stride 2 on even dims.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> NodeId {
        let k = self.nodes[w.0].value.dim().2;
        let pad = k / 2;
        let mut out = kernels::conv2d_forward(
            &self.nodes[x.0].value.view(),
            &self.nodes[w.0].value.view(),
            pad,
            stride,
        );
        if let Some(b) = b {
            let bias = &self.nodes[b.0].value; // (1, Cout, 1, 1)
            out += bias;
        }
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| F::one() / (F::one() + (-t).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| t / (F::one() + (-t).exp()));
        self.push(v, Op::Silu(x))
    }

    /// Batch norm over (N, H, W) per channel. In train mode batch statistics
    /// are used and a running-average update is queued; in eval mode the
    /// stored running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &ParamStore<F>,
        mean_buf: ParamId,
        var_buf: ParamId,
        eps: F,
        bn_momentum: F,
    ) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        let m = F::real((n * h * w) as f64);
        let (mean, var) = if self.train {
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            for ch in 0..c {
                let plane = xv.slice(s![.., ch, .., ..]);
                let mu = plane.sum() / m;
                let v = plane.mapv(|t| (t - mu) * (t - mu)).sum() / m;
                mean[ch] = mu;
                var[ch] = v;
            }
            let _ = bn_momentum;
            self.pending_stats
                .push((mean_buf, var_buf, mean.clone(), var.clone()));
            (mean, var)
        } else {
            let rm = store.value(mean_buf);
            let rv = store.value(var_buf);
            (
                Array1::from_iter(rm.iter().cloned()),
                Array1::from_iter(rv.iter().cloned()),
            )
        };
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = Array4::<F>::zeros(xv.raw_dim());
        for ch in 0..c {
            let inv_std = F::one() / (var[ch] + eps).sqrt();
            let gc = g[[0, ch, 0, 0]];
            let bc = b[[0, ch, 0, 0]];
            let mu = mean[ch];
            ndarray::Zip::from(out.slice_mut(s![.., ch, .., ..]))
                .and(xv.slice(s![.., ch, .., ..]))
                .for_each(|o, &t| *o = (t - mu) * inv_std * gc + bc);
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
        )
    }

    /// Apply queued running-statistic updates after a training forward pass.
    pub fn apply_pending_stats(&mut self, store: &mut ParamStore<F>, bn_momentum: F) {
        for (mean_buf, var_buf, mean, var) in self.pending_stats.drain(..) {
            let one_minus = F::one() - bn_momentum;
            let rm = store.value_mut(mean_buf);
            for (i, m) in mean.iter().enumerate() {
                rm[[0, i, 0, 0]] = rm[[0, i, 0, 0]] * one_minus + *m * bn_momentum;
            }
            let rv = store.value_mut(var_buf);
            for (i, v) in var.iter().enumerate() {
                rv[[0, i, 0, 0]] = rv[[0, i, 0, 0]] * one_minus + *v * bn_momentum;
            }
        }
    }

    pub fn max_pool_same(&mut self, x: NodeId, kernel: usize) -> NodeId {
        let (out, argmax) = kernels::maxpool_same_forward(&self.nodes[x.0].value.view(), kernel);
        self.push(out, Op::MaxPoolSame { x, argmax })
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let out = kernels::upsample2x_forward(&self.nodes[x.0].value.view());
        self.push(out, Op::Upsample2x(x))
    }

    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("channel concat");
        self.push(out, Op::ConcatC(xs.to_vec()))
    }

    /// Reverse pass from one or more seeded output gradients. Parameter
    /// gradients accumulate into the store; the full per-node gradient vector
    /// is returned for inspection (input leaves, tests).
    pub fn backward(
        &self,
        seeds: Vec<(NodeId, Array4<F>)>,
        store: &mut ParamStore<F>,
    ) -> Vec<Option<Array4<F>>> {
        let mut grads: Vec<Option<Array4<F>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            assert_eq!(g.raw_dim(), self.nodes[id.0].value.raw_dim());
            match &mut grads[id.0] {
                Some(acc) => *acc = &*acc + &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        let e = &mut store.entries[pid.0];
                        e.grad = &e.grad + &gout;
                    }
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw) = kernels::conv2d_backward(
                        &self.nodes[x.0].value.view(),
                        &self.nodes[w.0].value.view(),
                        &gout.view(),
                        *pad,
                        *stride,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let c_out = gout.dim().1;
                        let mut db = Array4::<F>::zeros((1, c_out, 1, 1));
                        for ch in 0..c_out {
                            db[[0, ch, 0, 0]] = gout.slice(s![.., ch, .., ..]).sum();
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Mul(a, b) => {
                    let da = &gout * &self.nodes[b.0].value;
                    let db = &gout * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let dx = ndarray::Zip::from(&gout)
                        .and(y)
                        .map_collect(|&g, &yv| g * yv * (F::one() - yv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = &gout * &self.nodes[i].value;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = ndarray::Zip::from(&gout)
                        .and(xv)
                        .map_collect(|&g, &t| {
                            let s = F::one() / (F::one() + (-t).exp());
                            g * s * (F::one() + t * (F::one() - s))
                        });
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let (n, c, h, w) = xv.dim();
                    let m = F::real((n * h * w) as f64);
                    let gv = &self.nodes[gamma.0].value;
                    let mut dx = Array4::<F>::zeros(xv.raw_dim());
                    let mut dgamma = Array4::<F>::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::<F>::zeros((1, c, 1, 1));
                    for ch in 0..c {
                        let inv_std = F::one() / (var[ch] + *eps).sqrt();
                        let mu = mean[ch];
                        let gc = gv[[0, ch, 0, 0]];
                        let xp = xv.slice(s![.., ch, .., ..]);
                        let gp = gout.slice(s![.., ch, .., ..]);
                        // xhat and reductions
                        let mut sum_dy = F::zero();
                        let mut sum_dy_xhat = F::zero();
                        ndarray::Zip::from(&gp).and(&xp).for_each(|&g, &t| {
                            let xhat = (t - mu) * inv_std;
                            sum_dy += g;
                            sum_dy_xhat += g * xhat;
                        });
                        dgamma[[0, ch, 0, 0]] = sum_dy_xhat;
                        dbeta[[0, ch, 0, 0]] = sum_dy;
                        if self.train {
                            let mean_dy = sum_dy / m;
                            let mean_dy_xhat = sum_dy_xhat / m;
                            ndarray::Zip::from(dx.slice_mut(s![.., ch, .., ..]))
                                .and(&gp)
                                .and(&xp)
                                .for_each(|d, &g, &t| {
                                    let xhat = (t - mu) * inv_std;
                                    *d = gc * inv_std * (g - mean_dy - xhat * mean_dy_xhat);
                                });
                        } else {
                            ndarray::Zip::from(dx.slice_mut(s![.., ch, .., ..]))
                                .and(&gp)
                                .for_each(|d, &g| *d = gc * inv_std * g);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::MaxPoolSame { x, argmax } => {
                    let dx = kernels::maxpool_same_backward(&gout.view(), argmax);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x(x) => {
                    let (_, _, h, w) = self.nodes[x.0].value.dim();
                    let dx = kernels::upsample2x_backward(&gout.view(), h, w);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatC(xs) => {
                    let mut offset = 0;
                    for id in xs {
                        let c = self.nodes[id.0].value.dim().1;
                        let dx = gout.slice(s![.., offset..offset + c, .., ..]).to_owned();
                        accumulate(&mut grads, *id, dx);
                        offset += c;
                    }
                }
            }
        }
        grads
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Array4<F>>], id: NodeId, g: Array4<F>) {
    match &mut grads[id.0] {
        Some(acc) => *acc = &*acc + &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradcheck(
        build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> NodeId + 'static,
        store: &mut ParamStore<f64>,
    ) -> f64 {
        let multi = move |t: &mut Tape<f64>, s: &ParamStore<f64>| vec![build(t, s)];
        gradcheck::max_param_grad_rel_error(&multi, store, 1e-5, gradcheck::Probe::All)
    }

    #[test]
    fn conv_bn_silu_pool_upsample_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add(
            "w1",
            Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen::<f64>() - 0.5),
            true,
        );
        let b1 = store.add(
            "b1",
            Array4::from_shape_fn((1, 3, 1, 1), |_| rng.gen::<f64>() - 0.5),
            true,
        );
        let gamma = store.add("g", Array4::from_elem((1, 3, 1, 1), 1.1), true);
        let beta = store.add("be", Array4::from_elem((1, 3, 1, 1), 0.2), true);
        let rm = store.add("rm", Array4::zeros((1, 3, 1, 1)), false);
        let rv = store.add("rv", Array4::from_elem((1, 3, 1, 1), 1.0), false);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.gen::<f64>());

        let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let xin = tape.leaf(x.clone());
            let w = tape.param(store, w1);
            let b = tape.param(store, b1);
            let g = tape.param(store, gamma);
            let be = tape.param(store, beta);
            let c = tape.conv2d(xin, w, Some(b), 2);
            let n = tape.batch_norm(c, g, be, store, rm, rv, 1e-5, 0.1);
            let a = tape.silu(n);
            let p = tape.max_pool_same(a, 3);
            let u = tape.upsample2x(p);
            let sgm = tape.sigmoid(u);
            tape.mul(sgm, u)
        };
        let err = gradcheck(build, &mut store);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn concat_and_add_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add(
            "w1",
            Array4::from_shape_fn((2, 2, 1, 1), |_| rng.gen::<f64>() - 0.5),
            true,
        );
        let w2 = store.add(
            "w2",
            Array4::from_shape_fn((2, 4, 3, 3), |_| rng.gen::<f64>() - 0.5),
            true,
        );
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen::<f64>());

        let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let xin = tape.leaf(x.clone());
            let w1n = tape.param(store, w1);
            let w2n = tape.param(store, w2);
            let a = tape.conv2d(xin, w1n, None, 1);
            let cat = tape.concat_c(&[a, xin]);
            let b = tape.conv2d(cat, w2n, None, 1);
            let e = tape.exp(b);
            tape.add(e, b)
        };
        let err = gradcheck(build, &mut store);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Array4::from_elem((1, 1, 1, 1), 1.0), true);
        store.entries_mut()[0].grad.fill(2.0);
        store.sgd_step(0.1, 0.0, 0.0);
        assert!((store.value(p)[[0, 0, 0, 0]] - 0.8).abs() < 1e-12);
    }
}
