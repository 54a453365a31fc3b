//! Reverse-mode autodiff on an append-only tape. Nodes are created in
//! execution order, so a single reverse sweep is a valid topological order.
//! Backward closures recompute column buffers instead of caching them; the
//! only captured tensors are small per-op context (dropout masks, batch-norm
//! statistics).

use crate::error::{Error, Result};
use crate::nn::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvGeom, ConvTransposeGeom,
};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use matrixmultiply::dgemm;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type GradFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<NodeId>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_map: HashMap<usize, NodeId>,
    param_filter: Option<Box<dyn Fn(&crate::nn::params::ParamEntry) -> bool>>,
}

/// Result of a backward sweep: gradients keyed by tape node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled, param_map: HashMap::new(), param_filter: None }
    }

    /// Restrict which parameters receive gradients on this tape (frozen
    /// networks skip their backward work entirely).
    pub fn set_param_filter(
        &mut self,
        filter: impl Fn(&crate::nn::params::ParamEntry) -> bool + 'static,
    ) {
        self.param_filter = Some(Box::new(filter));
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        grad_fn: impl FnOnce() -> GradFn,
    ) -> NodeId {
        let requires = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = Node {
            value: Rc::new(value),
            parents,
            grad_fn: if requires { Some(grad_fn()) } else { None },
            requires_grad: requires,
        };
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value: Rc::new(value), parents: vec![], grad_fn: None, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input that is not a stored parameter (used by the
    /// loss-level gradient checks).
    pub fn leaf_grad(&mut self, value: Tensor) -> NodeId {
        let requires = self.grad_enabled;
        self.nodes.push(Node { value: Rc::new(value), parents: vec![], grad_fn: None, requires_grad: requires });
        NodeId(self.nodes.len() - 1)
    }

    /// Inject a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_map.get(&id.0) {
            return n;
        }
        let entry = store.get(id);
        let allowed = self.param_filter.as_ref().map_or(true, |f| f(entry));
        let requires = self.grad_enabled && entry.trainable && allowed;
        self.nodes.push(Node {
            value: Rc::new(entry.value.clone()),
            parents: vec![],
            grad_fn: None,
            requires_grad: requires,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_map.insert(id.0, n);
        n
    }

    /// Re-inject parameters after an in-step update, as constants. Later
    /// forwards see the new values; gradient still flows through their
    /// inputs but not into them.
    pub fn refresh_params_nograd(&mut self, store: &ParamStore, ids: &[ParamId]) {
        for &id in ids {
            self.nodes.push(Node {
                value: Rc::new(store.value(id).clone()),
                parents: vec![],
                grad_fn: None,
                requires_grad: false,
            });
            self.param_map.insert(id.0, NodeId(self.nodes.len() - 1));
        }
    }

    /// Cut the graph: same value, no history.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.as_ref().clone();
        self.leaf(v)
    }

    /// Gradient of `loss` with respect to every upstream node that requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad_out) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(grad_fn) = &node.grad_fn {
                let parent_vals: Vec<Rc<Tensor>> =
                    node.parents.iter().map(|p| Rc::clone(&self.nodes[p.0].value)).collect();
                let needs: Vec<bool> =
                    node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                let parent_grads = grad_fn(&grad_out, &parent_vals, &node.value, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, g) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    let Some(g) = g else { continue };
                    match &mut grads[p.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
            if node.requires_grad && node.grad_fn.is_none() {
                // leaf with gradient: keep it
                grads[i] = Some(grad_out);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradient of a stored parameter after [`backward`]. Zero if the
    /// parameter never entered the graph or received no gradient.
    pub fn param_grad<'g>(&self, grads: &'g Gradients, id: ParamId) -> Option<&'g Tensor> {
        self.param_map.get(&id.0).and_then(|n| grads.by_node[n.0].as_ref())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, vec![a, b], || {
            Box::new(|g, _p, _o, _needs| vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, vec![a, b], || {
            Box::new(|g, _p, _o, _needs| vec![Some(g.clone()), Some(g.map(|x| -x))])
        }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, vec![a, b], || {
            Box::new(|g, p, _o, _needs| {
                let ga = g.zip(&p[1], |gv, bv| gv * bv).expect("shape");
                let gb = g.zip(&p[0], |gv, av| gv * av).expect("shape");
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, vec![a], || Box::new(move |g, _p, _o, _needs| vec![Some(g.map(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, vec![a], || Box::new(|g, _p, _o, _needs| vec![Some(g.clone())]))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, vec![a], || Box::new(|g, _p, _o, _needs| vec![Some(g.map(|x| -x))]))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, vec![a], || {
            Box::new(|g, p, _o, _needs| {
                let ga = g
                    .zip(&p[0], |gv, x| if x >= 0.0 { gv } else { -gv })
                    .expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, vec![a], || {
            Box::new(|g, p, _o, _needs| {
                let ga = g.zip(&p[0], |gv, x| if x > 0.0 { gv } else { 0.0 }).expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, vec![a], || {
            Box::new(move |g, p, _o, _needs| {
                let ga = g
                    .zip(&p[0], |gv, x| if x > 0.0 { gv } else { slope * gv })
                    .expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, vec![a], || {
            Box::new(|g, _p, o, _needs| {
                let ga = g.zip(o, |gv, y| gv * y * (1.0 - y)).expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, vec![a], || {
            Box::new(|g, _p, o, _needs| {
                let ga = g.zip(o, |gv, y| gv * (1.0 - y * y)).expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, vec![a], || {
            Box::new(|g, p, _o, _needs| {
                let ga = g.zip(&p[0], |gv, x| gv / x).expect("shape");
                vec![Some(ga)]
            })
        })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, vec![a], || {
            Box::new(move |g, p, _o, _needs| {
                let ga = g
                    .zip(&p[0], |gv, x| if x > lo && x < hi { gv } else { 0.0 })
                    .expect("shape");
                vec![Some(ga)]
            })
        })
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(v, vec![a], || {
            Box::new(move |g, p, _o, _needs| {
                let gv = g.item() / n;
                vec![Some(Tensor::full(p[0].shape(), gv))]
            })
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>());
        self.push(v, vec![a], || {
            Box::new(|g, p, _o, _needs| {
                let gv = g.item();
                vec![Some(Tensor::full(p[0].shape(), gv))]
            })
        })
    }

    /// Weighted sum of scalar nodes: the total objective.
    pub fn add_weighted(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut total = 0.0;
        for &(id, w) in terms {
            total += w * self.value(id).item();
        }
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        let parents: Vec<NodeId> = terms.iter().map(|&(id, _)| id).collect();
        self.push(Tensor::scalar(total), parents, || {
            Box::new(move |g, _p, _o, _needs| {
                let gv = g.item();
                weights.iter().map(|w| Some(Tensor::scalar(w * gv))).collect()
            })
        })
    }

    // ---- broadcasting over channels ----

    /// mask (N,1,H,W) times x (N,C,H,W), elementwise across channels.
    pub fn mul_bcast_channel(&mut self, mask: NodeId, x: NodeId) -> Result<NodeId> {
        let (mn, mc, mh, mw) = self.value(mask).dims4()?;
        let (n, c, h, w) = self.value(x).dims4()?;
        if mc != 1 || mn != n || mh != h || mw != w {
            return Err(Error::Shape(format!(
                "mask {:?} incompatible with image {:?}",
                self.value(mask).shape(),
                self.value(x).shape()
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let m = self.value(mask).data();
            let xv = self.value(x).data();
            let o = out.data_mut();
            for i in 0..n {
                let mbase = i * hw;
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in 0..hw {
                        o[base + p] = m[mbase + p] * xv[base + p];
                    }
                }
            }
        }
        Ok(self.push(out, vec![mask, x], move || {
            Box::new(move |g, p, _o, _needs| {
                let m = p[0].data();
                let xv = p[1].data();
                let gd = g.data();
                let mut gm = Tensor::zeros(p[0].shape());
                let mut gx = Tensor::zeros(p[1].shape());
                {
                    let gmd = gm.data_mut();
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        let mbase = i * hw;
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for q in 0..hw {
                                gmd[mbase + q] += gd[base + q] * xv[base + q];
                                gxd[base + q] = gd[base + q] * m[mbase + q];
                            }
                        }
                    }
                }
                vec![Some(gm), Some(gx)]
            })
        }))
    }

    // ---- structured layers ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, ih, iw) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                ws,
                self.value(x).shape()
            )));
        }
        let geom = ConvGeom { in_ch: c, out_ch: ws[0], kernel: ws[2], stride, pad };
        if ih + 2 * pad < ws[2] || iw + 2 * pad < ws[2] {
            return Err(Error::Shape(format!(
                "conv2d kernel {} too large for padded input {}x{}",
                ws[2], ih, iw
            )));
        }
        let (oh, ow) = geom.out_hw(ih, iw);
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            ih,
            iw,
        );
        let out = Tensor::from_vec(&[n, geom.out_ch, oh, ow], out);
        Ok(self.push(out, vec![x, w, b], move || {
            Box::new(move |g, p, _o, needs| {
                let need_input = needs[0];
                let need_params = needs[1] || needs[2];
                let (gx, gw, gb) = conv2d_backward(
                    &geom,
                    p[0].data(),
                    p[1].data(),
                    g.data(),
                    n,
                    ih,
                    iw,
                    need_input,
                    need_params,
                );
                vec![
                    need_input.then(|| Tensor::from_vec(p[0].shape(), gx)),
                    need_params.then(|| Tensor::from_vec(p[1].shape(), gw)),
                    need_params.then(|| Tensor::from_vec(p[2].shape(), gb)),
                ]
            })
        }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let (n, c, ih, iw) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                ws,
                self.value(x).shape()
            )));
        }
        let geom = ConvTransposeGeom {
            in_ch: c,
            out_ch: ws[1],
            kernel: ws[2],
            stride,
            pad,
            out_pad,
        };
        let (oh, ow) = geom.out_hw(ih, iw);
        let out = conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            ih,
            iw,
        );
        let out = Tensor::from_vec(&[n, geom.out_ch, oh, ow], out);
        Ok(self.push(out, vec![x, w, b], move || {
            Box::new(move |g, p, _o, needs| {
                let need_input = needs[0];
                let need_params = needs[1] || needs[2];
                let (gx, gw, gb) = conv_transpose2d_backward(
                    &geom,
                    p[0].data(),
                    p[1].data(),
                    g.data(),
                    n,
                    ih,
                    iw,
                    need_input,
                    need_params,
                );
                vec![
                    need_input.then(|| Tensor::from_vec(p[0].shape(), gx)),
                    need_params.then(|| Tensor::from_vec(p[1].shape(), gw)),
                    need_params.then(|| Tensor::from_vec(p[2].shape(), gb)),
                ]
            })
        }))
    }

    /// x (N,I) . w^T (I,O) + b, with w stored (O,I).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i {
            return Err(Error::Shape(format!(
                "linear weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = vec![0.0; n * o];
        unsafe {
            dgemm(
                n,
                i,
                o,
                1.0,
                self.value(x).data().as_ptr(),
                i as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                i as isize,
                0.0,
                out.as_mut_ptr(),
                o as isize,
                1,
            );
        }
        let bd = self.value(b).data();
        for row in 0..n {
            for col in 0..o {
                out[row * o + col] += bd[col];
            }
        }
        let out = Tensor::from_vec(&[n, o], out);
        Ok(self.push(out, vec![x, w, b], move || {
            Box::new(move |g, p, _o2, _needs| {
                let mut gx = vec![0.0; n * i];
                let mut gw = vec![0.0; o * i];
                unsafe {
                    // gx (N,I) = g (N,O) . w (O,I)
                    dgemm(
                        n,
                        o,
                        i,
                        1.0,
                        g.data().as_ptr(),
                        o as isize,
                        1,
                        p[1].data().as_ptr(),
                        i as isize,
                        1,
                        0.0,
                        gx.as_mut_ptr(),
                        i as isize,
                        1,
                    );
                    // gw (O,I) = g^T (O,N) . x (N,I)
                    dgemm(
                        o,
                        n,
                        i,
                        1.0,
                        g.data().as_ptr(),
                        1,
                        o as isize,
                        p[0].data().as_ptr(),
                        i as isize,
                        1,
                        0.0,
                        gw.as_mut_ptr(),
                        i as isize,
                        1,
                    );
                }
                let mut gb = vec![0.0; o];
                for row in 0..n {
                    for col in 0..o {
                        gb[col] += g.data()[row * o + col];
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, i], gx)),
                    Some(Tensor::from_vec(&[o, i], gw)),
                    Some(Tensor::from_vec(&[o], gb)),
                ]
            })
        }))
    }

    /// Per-(sample, channel) normalization over the spatial extent, no affine.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = hw as f64;
        let mut out = Tensor::zeros(self.value(x).shape());
        let mut inv_std = vec![0.0; n * c];
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for g in 0..n * c {
                let base = g * hw;
                let mean = xd[base..base + hw].iter().sum::<f64>() / m;
                let var =
                    xd[base..base + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[g] = r;
                for p in 0..hw {
                    od[base + p] = (xd[base + p] - mean) * r;
                }
            }
        }
        Ok(self.push(out, vec![x], move || {
            Box::new(move |g, _p, o, _needs| {
                let gd = g.data();
                let y = o.data();
                let mut gx = Tensor::zeros(o.shape());
                let gxd = gx.data_mut();
                for grp in 0..n * c {
                    let base = grp * hw;
                    let r = inv_std[grp];
                    let mean_g = gd[base..base + hw].iter().sum::<f64>() / m;
                    let mean_gy = gd[base..base + hw]
                        .iter()
                        .zip(&y[base..base + hw])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / m;
                    for p in 0..hw {
                        gxd[base + p] = r * (gd[base + p] - mean_g - y[base + p] * mean_gy);
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Batch norm over features in training mode. Returns the output node and
    /// the biased batch statistics so the caller can update running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let (n, f) = self.value(x).dims2()?;
        if n < 2 {
            return Err(Error::Shape("batch norm requires batch size >= 2 in training".into()));
        }
        let nf = n as f64;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        let mut inv_std = vec![0.0; f];
        let mut xhat = Tensor::zeros(&[n, f]);
        let mut out = Tensor::zeros(&[n, f]);
        {
            let xd = self.value(x).data();
            for j in 0..f {
                let mut s = 0.0;
                for i in 0..n {
                    s += xd[i * f + j];
                }
                mean[j] = s / nf;
                let mut v = 0.0;
                for i in 0..n {
                    let d = xd[i * f + j] - mean[j];
                    v += d * d;
                }
                var[j] = v / nf;
                inv_std[j] = 1.0 / (var[j] + eps).sqrt();
            }
            let gm = self.value(gamma).data();
            let bt = self.value(beta).data();
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for i in 0..n {
                for j in 0..f {
                    let h = (xd[i * f + j] - mean[j]) * inv_std[j];
                    xh[i * f + j] = h;
                    od[i * f + j] = gm[j] * h + bt[j];
                }
            }
        }
        let xhat = Rc::new(xhat);
        let inv = inv_std.clone();
        let node = self.push(out, vec![x, gamma, beta], move || {
            let xhat = Rc::clone(&xhat);
            Box::new(move |g, p, _o, _needs| {
                let gd = g.data();
                let gm = p[1].data();
                let xh = xhat.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        dgamma[j] += gd[i * f + j] * xh[i * f + j];
                        dbeta[j] += gd[i * f + j];
                    }
                }
                let mut gx = Tensor::zeros(&[n, f]);
                {
                    let gxd = gx.data_mut();
                    for j in 0..f {
                        let mean_d = dbeta[j] / nf;
                        let mean_dxh = dgamma[j] / nf;
                        for i in 0..n {
                            let dxhat = gd[i * f + j] * gm[j];
                            gxd[i * f + j] = inv[j]
                                * (dxhat - gm[j] * mean_d - xh[i * f + j] * gm[j] * mean_dxh);
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::from_vec(&[f], dgamma)),
                    Some(Tensor::from_vec(&[f], dbeta)),
                ]
            })
        });
        Ok((node, mean, var))
    }

    /// Batch norm with fixed running statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, f) = self.value(x).dims2()?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::Shape("running statistics length mismatch".into()));
        }
        let inv: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.to_vec();
        let mut out = Tensor::zeros(&[n, f]);
        {
            let xd = self.value(x).data();
            let gm = self.value(gamma).data();
            let bt = self.value(beta).data();
            let od = out.data_mut();
            for i in 0..n {
                for j in 0..f {
                    od[i * f + j] = gm[j] * (xd[i * f + j] - rm[j]) * inv[j] + bt[j];
                }
            }
        }
        Ok(self.push(out, vec![x, gamma, beta], move || {
            Box::new(move |g, p, _o, _needs| {
                let gd = g.data();
                let gm = p[1].data();
                let xd = p[0].data();
                let mut gx = Tensor::zeros(&[n, f]);
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                {
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        for j in 0..f {
                            let xhat = (xd[i * f + j] - rm[j]) * inv[j];
                            gxd[i * f + j] = gd[i * f + j] * gm[j] * inv[j];
                            dgamma[j] += gd[i * f + j] * xhat;
                            dbeta[j] += gd[i * f + j];
                        }
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::from_vec(&[f], dgamma)),
                    Some(Tensor::from_vec(&[f], dbeta)),
                ]
            })
        }))
    }

    /// Inverted dropout; identity when `training` is false.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> NodeId {
        if !training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask =
            Tensor::from_vec(self.value(x).shape(), {
                let n = self.value(x).numel();
                (0..n)
                    .map(|_| if rng.random_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            });
        let v = self.value(x).zip(&mask, |a, m| a * m).expect("shape");
        let mask = Rc::new(mask);
        self.push(v, vec![x], move || {
            let mask = Rc::clone(&mask);
            Box::new(move |g, _p, _o, _needs| {
                let gx = g.zip(&mask, |gv, m| gv * m).expect("shape");
                vec![Some(gx)]
            })
        })
    }

    /// (N,C,H,W) -> (N,C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[n, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for g in 0..n * c {
                od[g] = xd[g * h * w..(g + 1) * h * w].iter().sum::<f64>() / hw;
            }
        }
        Ok(self.push(out, vec![x], move || {
            Box::new(move |g, p, _o, _needs| {
                let mut gx = Tensor::zeros(p[0].shape());
                {
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    for grp in 0..n * c {
                        let gv = gd[grp] / hw;
                        for v in &mut gxd[grp * h * w..(grp + 1) * h * w] {
                            *v = gv;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Row-wise L2 normalization of (N,F).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, f) = self.value(x).dims2()?;
        let mut out = Tensor::zeros(&[n, f]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for i in 0..n {
                let row = &xd[i * f..(i + 1) * f];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for j in 0..f {
                    od[i * f + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push(out, vec![x], move || {
            Box::new(move |g, p, o, _needs| {
                let xd = p[0].data();
                let y = o.data();
                let gd = g.data();
                let mut gx = Tensor::zeros(p[0].shape());
                {
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        let norm = xd[i * f..(i + 1) * f]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .max(1e-12);
                        let dot: f64 = (0..f).map(|j| y[i * f + j] * gd[i * f + j]).sum();
                        for j in 0..f {
                            gxd[i * f + j] = (gd[i * f + j] - y[i * f + j] * dot) / norm;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Squared Euclidean distance of matching rows of two (N,F) matrices -> (N,).
    pub fn row_sqdist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, f) = self.value(a).dims2()?;
        self.value(a).check_same_shape(self.value(b))?;
        let mut out = Tensor::zeros(&[n]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for i in 0..n {
                od[i] = (0..f)
                    .map(|j| {
                        let d = ad[i * f + j] - bd[i * f + j];
                        d * d
                    })
                    .sum();
            }
        }
        Ok(self.push(out, vec![a, b], move || {
            Box::new(move |g, p, _o, _needs| {
                let ad = p[0].data();
                let bd = p[1].data();
                let gd = g.data();
                let mut ga = Tensor::zeros(p[0].shape());
                let mut gb = Tensor::zeros(p[1].shape());
                {
                    let gad = ga.data_mut();
                    let gbd = gb.data_mut();
                    for i in 0..n {
                        for j in 0..f {
                            let d = 2.0 * (ad[i * f + j] - bd[i * f + j]) * gd[i];
                            gad[i * f + j] = d;
                            gbd[i * f + j] = -d;
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    /// Mean cross-entropy between logits (N,C) and integer labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n} logits rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut softmax = Tensor::zeros(&[n, c]);
        let mut loss = 0.0;
        {
            let ld = self.value(logits).data();
            let sd = softmax.data_mut();
            for i in 0..n {
                let row = &ld[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    sd[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    sd[i * c + j] /= z;
                }
                loss -= (row[labels[i]] - m - z.ln()) / n as f64;
            }
        }
        let labels = labels.to_vec();
        let softmax = Rc::new(softmax);
        Ok(self.push(Tensor::scalar(loss), vec![logits], move || {
            let softmax = Rc::clone(&softmax);
            Box::new(move |g, _p, _o, _needs| {
                let gv = g.item() / n as f64;
                let mut gl = softmax.as_ref().clone();
                {
                    let gld = gl.data_mut();
                    for i in 0..n {
                        gld[i * c + labels[i]] -= 1.0;
                        for j in 0..c {
                            gld[i * c + j] *= gv;
                        }
                    }
                }
                vec![Some(gl)]
            })
        }))
    }
}

/// Stable softmax over the rows of a (N,C) tensor; plain values, no tape.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    let mut out = Tensor::zeros(&[n, c]);
    let ld = logits.data();
    let od = out.data_mut();
    for i in 0..n {
        let row = &ld[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            od[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            od[i * c + j] /= z;
        }
    }
    Ok(out)
}
