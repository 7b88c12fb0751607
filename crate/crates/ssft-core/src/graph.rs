//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every primitive records a backward closure capturing whatever forward
//! values it needs. `backward` walks the tape in reverse execution order and
//! accumulates gradients additively across fan-out.

use crate::error::{Error, Result};
use crate::tensor::{mm, mm_a_bt, mm_at_b, strides_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(VarId, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    backward: Option<BackwardFn>,
}

/// Running statistics for one batch-norm layer, updated outside the graph.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, None)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> VarId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            backward: if requires_grad { backward } else { None },
        });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Seed the scalar `loss` with 1 and propagate to every leaf.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::ShapeMismatch("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].backward {
                for (pid, pg) in f(&g) {
                    debug_assert_eq!(pg.shape(), self.nodes[pid.0].value.shape());
                    match &mut grads[pid.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            if self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    // ---- elementwise and shape ops ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let req = self.requires(&[a, b]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        )
    }

    /// Add `b` broadcast over the leading axes of `a`; `b.shape` must be a
    /// suffix of `a.shape`.
    pub fn add_broadcast(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(
            ash.len() >= bsh.len() && ash[ash.len() - bsh.len()..] == bsh[..],
            "add_broadcast: {:?} is not a suffix of {:?}",
            bsh,
            ash
        );
        let bn = bv.numel().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % bn])
            .collect();
        let out = Tensor::new(ash, data).unwrap();
        let req = self.requires(&[a, b]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; bn];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % bn] += v;
                }
                vec![(a, g.clone()), (b, Tensor::new(bsh.clone(), gb).unwrap())]
            })),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let (ac, bc) = (av.clone(), bv.clone());
        let req = self.requires(&[a, b]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let ga = g.data().iter().zip(bc.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ac.data()).map(|(x, y)| x * y).collect();
                vec![
                    (a, Tensor::new(g.shape().to_vec(), ga).unwrap()),
                    (b, Tensor::new(g.shape().to_vec(), gb).unwrap()),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let av = &self.nodes[a.0].value;
        let out = av.map(|v| v * c);
        let req = self.requires(&[a]);
        self.push(out, req, Some(Box::new(move |g| vec![(a, g.map(|v| v * c))])))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let av = &self.nodes[a.0].value;
        let old = av.shape().to_vec();
        let out = av.reshaped(shape).expect("reshape numel mismatch");
        let req = self.requires(&[a]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| vec![(a, g.reshaped(&old).unwrap())])),
        )
    }

    pub fn permute(&mut self, a: VarId, perm: &[usize]) -> VarId {
        let av = &self.nodes[a.0].value;
        let out = permute_tensor(av, perm);
        // backward applies the inverse permutation
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let req = self.requires(&[a]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| vec![(a, permute_tensor(g, &inv))])),
        )
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> VarId {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        assert!(axis < shape.len());
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += av.data()[base + i];
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for v in &mut data {
            *v *= inv_n;
        }
        let out = Tensor::new(out_shape, data).unwrap();
        let req = self.requires(&[a]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            gx[base + i] = g.data()[o * inner + i] * inv_n;
                        }
                    }
                }
                vec![(a, Tensor::new(shape.clone(), gx).unwrap())]
            })),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        let s: f64 = av.data().iter().sum();
        let shape = av.shape().to_vec();
        let req = self.requires(&[a]);
        self.push(
            Tensor::scalar_tensor(s),
            req,
            Some(Box::new(move |g| {
                vec![(a, Tensor::full(&shape, g.scalar()))]
            })),
        )
    }

    // ---- matrix products ----

    /// `x: [..., M, K]` times a shared 2-d weight `w: [K, N]`.
    pub fn matmul(&mut self, x: VarId, w: VarId) -> VarId {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let xsh = xv.shape().to_vec();
        let wsh = wv.shape().to_vec();
        assert_eq!(wsh.len(), 2, "matmul weight must be 2-d");
        let k = wsh[0];
        let n = wsh[1];
        assert_eq!(*xsh.last().unwrap(), k, "matmul inner extent mismatch");
        let rows = xv.numel() / k;
        let mut out = vec![0.0; rows * n];
        mm(rows, k, n, xv.data(), wv.data(), &mut out);
        let mut out_shape = xsh.clone();
        *out_shape.last_mut().unwrap() = n;
        let (xc, wc) = (xv.clone(), wv.clone());
        let req = self.requires(&[x, w]);
        self.push(
            Tensor::new(out_shape, out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; rows * k];
                mm_a_bt(rows, n, k, g.data(), wc.data(), &mut gx);
                let mut gw = vec![0.0; k * n];
                mm_at_b(rows, k, n, xc.data(), g.data(), &mut gw);
                vec![
                    (x, Tensor::new(xsh.clone(), gx).unwrap()),
                    (w, Tensor::new(wsh.clone(), gw).unwrap()),
                ]
            })),
        )
    }

    /// Batched matmul: `a: [L..., M, K]` times `b: [L..., K, N]` with equal
    /// leading extents.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ash = av.shape().to_vec();
        let bsh = bv.shape().to_vec();
        assert!(ash.len() >= 2 && bsh.len() == ash.len());
        assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "bmm leading dims");
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        assert_eq!(bsh[bsh.len() - 2], k, "bmm inner extent mismatch");
        let n = bsh[bsh.len() - 1];
        let batches: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![0.0; batches * m * n];
        for l in 0..batches {
            mm(
                m,
                k,
                n,
                &av.data()[l * m * k..(l + 1) * m * k],
                &bv.data()[l * k * n..(l + 1) * k * n],
                &mut out[l * m * n..(l + 1) * m * n],
            );
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let (ac, bc) = (av.clone(), bv.clone());
        let req = self.requires(&[a, b]);
        self.push(
            Tensor::new(out_shape, out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let mut ga = vec![0.0; batches * m * k];
                let mut gb = vec![0.0; batches * k * n];
                for l in 0..batches {
                    let gl = &g.data()[l * m * n..(l + 1) * m * n];
                    mm_a_bt(m, n, k, gl, &bc.data()[l * k * n..(l + 1) * k * n], &mut ga[l * m * k..(l + 1) * m * k]);
                    mm_at_b(m, k, n, &ac.data()[l * m * k..(l + 1) * m * k], gl, &mut gb[l * k * n..(l + 1) * k * n]);
                }
                vec![
                    (a, Tensor::new(ash.clone(), ga).unwrap()),
                    (b, Tensor::new(bsh.clone(), gb).unwrap()),
                ]
            })),
        )
    }

    /// `y = x W + b` on the trailing axis.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let y = self.matmul(x, w);
        self.add_broadcast(y, b)
    }

    /// Pointwise channel projection on `[..., H, W, Cin]` with `w: [Cin, Cout]`;
    /// equals `linear` applied per pixel.
    pub fn conv1x1(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        self.linear(x, w, b)
    }

    // ---- nonlinearities ----

    pub fn softmax(&mut self, a: VarId, axis: usize) -> VarId {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        assert!(axis < shape.len(), "softmax axis out of range");
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(data[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (data[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(shape.clone(), data).unwrap();
        let yc = out.clone();
        let req = self.requires(&[a]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                // ds = y * (g - sum_j g_j y_j) along the softmax axis
                let mut gx = vec![0.0; yc.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.data()[idx(j)] * yc.data()[idx(j)];
                        }
                        for j in 0..n {
                            gx[idx(j)] = yc.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                vec![(a, Tensor::new(shape.clone(), gx).unwrap())]
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        let out = av.map(gelu_scalar);
        let xc = av.clone();
        let req = self.requires(&[a]);
        self.push(
            out,
            req,
            Some(Box::new(move |g| {
                let gx = g
                    .data()
                    .iter()
                    .zip(xc.data())
                    .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                vec![(a, Tensor::new(xc.shape().to_vec(), gx).unwrap())]
            })),
        )
    }

    // ---- structured ops ----

    /// 3x3 cross-correlation with zero padding 1, stride 1.
    /// `x: [B, H, W, Cin]`, `w: [3, 3, Cin, Cout]`, `b: [Cout]`.
    pub fn conv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let xsh = xv.shape().to_vec();
        assert_eq!(xsh.len(), 4, "conv3x3 expects [B,H,W,C]");
        let (bn, h, wd, cin) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let wsh = wv.shape().to_vec();
        assert_eq!(&wsh[..3], &[3, 3, cin], "conv3x3 kernel shape");
        let cout = wsh[3];
        assert_eq!(bv.shape(), &[cout]);
        let mut out = vec![0.0; bn * h * wd * cout];
        let xd = xv.data();
        let wdat = wv.data();
        for ib in 0..bn {
            for iy in 0..h {
                for ix in 0..wd {
                    let obase = ((ib * h + iy) * wd + ix) * cout;
                    out[obase..obase + cout].copy_from_slice(bv.data());
                    for ky in 0..3usize {
                        let sy = iy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = ix as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let ibase = ((ib * h + sy as usize) * wd + sx as usize) * cin;
                            let wbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let xval = xd[ibase + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                let wrow = &wdat[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for co in 0..cout {
                                    out[obase + co] += xval * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out_shape = vec![bn, h, wd, cout];
        let (xc, wc) = (xv.clone(), wv.clone());
        let req = self.requires(&[x, w, b]);
        self.push(
            Tensor::new(out_shape, out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; bn * h * wd * cin];
                let mut gw = vec![0.0; 9 * cin * cout];
                let mut gb = vec![0.0; cout];
                for ib in 0..bn {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let obase = ((ib * h + iy) * wd + ix) * cout;
                            for co in 0..cout {
                                gb[co] += gd[obase + co];
                            }
                            for ky in 0..3usize {
                                let sy = iy as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let sx = ix as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let ibase =
                                        ((ib * h + sy as usize) * wd + sx as usize) * cin;
                                    let wbase = (ky * 3 + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let wrow =
                                            &wc.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let xval = xc.data()[ibase + ci];
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            let gval = gd[obase + co];
                                            acc += gval * wrow[co];
                                            gw[wbase + ci * cout + co] += gval * xval;
                                        }
                                        gx[ibase + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (x, Tensor::new(vec![bn, h, wd, cin], gx).unwrap()),
                    (w, Tensor::new(vec![3, 3, cin, cout], gw).unwrap()),
                    (b, Tensor::new(vec![cout], gb).unwrap()),
                ]
            })),
        )
    }

    /// Non-overlapping k x k max pooling per channel on `[B, H, W, C]`.
    /// Extents not divisible by `k` are padded by replicating the last
    /// row/column; the gradient routes to the argmax source cell
    /// (first-index tie-break in padded scan order).
    pub fn maxpool2d(&mut self, x: VarId, k: usize) -> VarId {
        assert!(k >= 1, "pool factor must be >= 1");
        let xv = &self.nodes[x.0].value;
        let xsh = xv.shape().to_vec();
        assert_eq!(xsh.len(), 4, "maxpool2d expects [B,H,W,C]");
        let (bn, h, w, c) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let ho = h.div_ceil(k);
        let wo = w.div_ceil(k);
        let mut out = vec![f64::NEG_INFINITY; bn * ho * wo * c];
        let mut arg = vec![0usize; bn * ho * wo * c];
        let xd = xv.data();
        for ib in 0..bn {
            for oy in 0..ho {
                for ox in 0..wo {
                    for cc in 0..c {
                        let oidx = ((ib * ho + oy) * wo + ox) * c + cc;
                        for dy in 0..k {
                            let sy = (oy * k + dy).min(h - 1);
                            for dx in 0..k {
                                let sx = (ox * k + dx).min(w - 1);
                                let sidx = ((ib * h + sy) * w + sx) * c + cc;
                                if xd[sidx] > out[oidx] {
                                    out[oidx] = xd[sidx];
                                    arg[oidx] = sidx;
                                }
                            }
                        }
                    }
                }
            }
        }
        let n_in = xv.numel();
        let req = self.requires(&[x]);
        self.push(
            Tensor::new(vec![bn, ho, wo, c], out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n_in];
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![(x, Tensor::new(xsh.clone(), gx).unwrap())]
            })),
        )
    }

    /// Batch normalization over `[B, H, W, C]`, per channel.
    /// Train mode normalizes by batch statistics (eps 1e-5) and updates the
    /// running stats with momentum 0.1; eval mode uses the running stats.
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<VarId> {
        const EPS: f64 = 1e-5;
        const MOMENTUM: f64 = 0.1;
        let xv = &self.nodes[x.0].value;
        let xsh = xv.shape().to_vec();
        assert_eq!(xsh.len(), 4, "batchnorm2d expects [B,H,W,C]");
        let c = xsh[3];
        let n = xv.numel() / c;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidData(
                "batchnorm train mode needs at least 2 elements per channel".into(),
            ));
        }
        let xd = xv.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, &v) in xd.iter().enumerate() {
                    mean[i % c] += v;
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for (i, &v) in xd.iter().enumerate() {
                    let d = v - mean[i % c];
                    var[i % c] += d * d;
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                // running stats track the unbiased variance
                let unbias = n as f64 / (n as f64 - 1.0);
                for cc in 0..c {
                    state.running_mean[cc] =
                        (1.0 - MOMENTUM) * state.running_mean[cc] + MOMENTUM * mean[cc];
                    state.running_var[cc] =
                        (1.0 - MOMENTUM) * state.running_var[cc] + MOMENTUM * var[cc] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let cc = i % c;
            xhat[i] = (v - mean[cc]) * inv_std[cc];
            out[i] = xhat[i] * gv.data()[cc] + bv.data()[cc];
        }
        let gc = gv.clone();
        let xhat_t = Tensor::new(xsh.clone(), xhat).unwrap();
        let req = self.requires(&[x, gamma, beta]);
        let train = mode == Mode::Train;
        Ok(self.push(
            Tensor::new(xsh.clone(), out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gsum = vec![0.0; c];
                let mut gdot = vec![0.0; c];
                for (i, &gv_) in gd.iter().enumerate() {
                    let cc = i % c;
                    gsum[cc] += gv_;
                    gdot[cc] += gv_ * xhat_t.data()[i];
                }
                let mut gx = vec![0.0; gd.len()];
                if train {
                    let nf = n as f64;
                    for (i, &gv_) in gd.iter().enumerate() {
                        let cc = i % c;
                        gx[i] = gc.data()[cc] * inv_std[cc]
                            * (gv_ - gsum[cc] / nf - xhat_t.data()[i] * gdot[cc] / nf);
                    }
                } else {
                    for (i, &gv_) in gd.iter().enumerate() {
                        let cc = i % c;
                        gx[i] = gv_ * gc.data()[cc] * inv_std[cc];
                    }
                }
                vec![
                    (x, Tensor::new(xsh.clone(), gx).unwrap()),
                    (gamma, Tensor::new(vec![c], gdot).unwrap()),
                    (beta, Tensor::new(vec![c], gsum).unwrap()),
                ]
            })),
        ))
    }

    /// Layer normalization over the trailing axis with affine output.
    pub fn layernorm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x.0].value;
        let xsh = xv.shape().to_vec();
        let d = *xsh.last().expect("layernorm needs at least 1 axis");
        let rows = xv.numel() / d;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        assert_eq!(gv.shape(), &[d]);
        assert_eq!(bv.shape(), &[d]);
        let xd = xv.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let gc = gv.clone();
        let xhat_t = Tensor::new(xsh.clone(), xhat).unwrap();
        let req = self.requires(&[x, gamma, beta]);
        self.push(
            Tensor::new(xsh.clone(), out).unwrap(),
            req,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let mut sum_dxhat = 0.0;
                    let mut dot = 0.0;
                    for j in 0..d {
                        let dy = gd[r * d + j];
                        let xh = xhat_t.data()[r * d + j];
                        gg[j] += dy * xh;
                        gb[j] += dy;
                        let dxhat = dy * gc.data()[j];
                        sum_dxhat += dxhat;
                        dot += dxhat * xh;
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let xh = xhat_t.data()[r * d + j];
                        let dxhat = gd[r * d + j] * gc.data()[j];
                        gx[r * d + j] = inv_std[r] * (dxhat - sum_dxhat / df - xh * dot / df);
                    }
                }
                vec![
                    (x, Tensor::new(xsh.clone(), gx).unwrap()),
                    (gamma, Tensor::new(vec![d], gg).unwrap()),
                    (beta, Tensor::new(vec![d], gb).unwrap()),
                ]
            })),
        )
    }

    // ---- losses ----

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let lv = &self.nodes[logits.0].value;
        let lsh = lv.shape().to_vec();
        assert_eq!(lsh.len(), 2, "cross_entropy expects [B,K] logits");
        let (b, k) = (lsh[0], lsh[1]);
        if targets.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for batch of {}",
                targets.len(),
                b
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidData(format!(
                "target class {} out of range [0,{})",
                t, k
            )));
        }
        let ld = lv.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[r * k + j] /= sum;
            }
            // -log softmax[target], log-sum-exp stabilized
            loss += sum.ln() + mx - row[targets[r]];
        }
        loss /= b as f64;
        let tgt = targets.to_vec();
        let req = self.requires(&[logits]);
        Ok(self.push(
            Tensor::scalar_tensor(loss),
            req,
            Some(Box::new(move |g| {
                let gs = g.scalar() / b as f64;
                let mut gl = probs.clone();
                for (r, &t) in tgt.iter().enumerate() {
                    gl[r * k + t] -= 1.0;
                }
                for v in &mut gl {
                    *v *= gs;
                }
                vec![(logits, Tensor::new(vec![b, k], gl).unwrap())]
            })),
        ))
    }

    /// Mean elementwise stabilized binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: VarId, targets: &Tensor) -> Result<VarId> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape() != targets.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        if let Some(&t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidData(format!("non-binary target {}", t)));
        }
        let n = lv.numel();
        let mut loss = 0.0;
        for (&x, &t) in lv.data().iter().zip(targets.data()) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        loss /= n as f64;
        let lc = lv.clone();
        let tc = targets.clone();
        let req = self.requires(&[logits]);
        Ok(self.push(
            Tensor::scalar_tensor(loss),
            req,
            Some(Box::new(move |g| {
                let gs = g.scalar() / n as f64;
                let gl = lc
                    .data()
                    .iter()
                    .zip(tc.data())
                    .map(|(&x, &t)| (sigmoid(x) - t) * gs)
                    .collect();
                vec![(logits, Tensor::new(lc.shape().to_vec(), gl).unwrap())]
            })),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![0.0; t.numel()];
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    for (flat, &v) in t.data().iter().enumerate() {
        // decompose flat index into the input coordinates
        let mut rem = flat;
        for d in 0..nd {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut o = 0;
        for d in 0..nd {
            o += idx[perm[d]] * out_strides[d];
        }
        data[o] = v;
    }
    Tensor::new(out_shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Scalar loss `sum(op(x) * r)` for a fixed random projection `r`, so
    /// the finite-difference probe sees every output coordinate distinctly.
    fn probe_loss(op: impl Fn(&mut Graph, VarId) -> VarId, x: &Tensor, seed: u64) -> f64 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false);
        let out = op(&mut g, xid);
        let r = rand_tensor(g.value(out).shape(), seed ^ 0xdead);
        let rid = g.constant(r);
        let prod = g.mul(out, rid);
        let loss = g.sum_all(prod);
        g.value(loss).scalar()
    }

    fn analytic_input_grad(
        op: impl Fn(&mut Graph, VarId) -> VarId,
        x: &Tensor,
        seed: u64,
    ) -> Tensor {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true);
        let out = op(&mut g, xid);
        let r = rand_tensor(g.value(out).shape(), seed ^ 0xdead);
        let rid = g.constant(r);
        let prod = g.mul(out, rid);
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        g.grad(xid).unwrap().clone()
    }

    fn check_op(op: impl Fn(&mut Graph, VarId) -> VarId, x: &Tensor, seed: u64, tol: f64) {
        let analytic = analytic_input_grad(&op, x, seed);
        let report = grad_check(|t| probe_loss(&op, t, seed), x, &analytic, seed);
        assert!(
            report.passes(tol),
            "max rel err {} at coord {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_coord,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn fanout_gradient_doubles() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        let y = g.add(x, x);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn add_broadcast_sums_leading_axes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = g.add_broadcast(a, b);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn permute_round_trip_and_grad() {
        let x = rand_tensor(&[2, 3, 4], 1);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true);
        let p = g.permute(xid, &[2, 0, 1]);
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]);
        assert_eq!(g.value(back).data(), x.data());
        check_op(|g, x| g.permute(x, &[2, 0, 1]), &x, 2, 1e-7);
    }

    #[test]
    fn mean_axis_forward_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let m = g.mean_axis(x, 1);
        assert_eq!(g.value(m).data(), &[1.5, 3.5]);
        let t = rand_tensor(&[2, 3, 4], 3);
        check_op(|g, x| g.mean_axis(x, 1), &t, 4, 1e-7);
    }

    #[test]
    fn matmul_identity_weight() {
        let x = rand_tensor(&[3, 4], 5);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false);
        let wid = g.leaf(eye, false);
        let y = g.matmul(xid, wid);
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn matmul_grads_check_out() {
        let x = rand_tensor(&[2, 3, 4], 6);
        let w = rand_tensor(&[4, 5], 7);
        // input gradient
        let wc = w.clone();
        check_op(
            move |g, x| {
                let wid = g.constant(wc.clone());
                g.matmul(x, wid)
            },
            &x,
            8,
            1e-6,
        );
        // weight gradient: treat w as the probed tensor
        let xc = x.clone();
        check_op(
            move |g, w| {
                let xid = g.constant(xc.clone());
                g.matmul(xid, w)
            },
            &w,
            9,
            1e-6,
        );
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = rand_tensor(&[3, 2, 4], 10);
        let b = rand_tensor(&[3, 4, 5], 11);
        let mut g = Graph::new();
        let aid = g.leaf(a.clone(), false);
        let bid = g.leaf(b.clone(), false);
        let y = g.bmm(aid, bid);
        for l in 0..3 {
            let mut expect = vec![0.0; 2 * 5];
            mm(
                2,
                4,
                5,
                &a.data()[l * 8..(l + 1) * 8],
                &b.data()[l * 20..(l + 1) * 20],
                &mut expect,
            );
            assert_eq!(&g.value(y).data()[l * 10..(l + 1) * 10], &expect[..]);
        }
        let bc = b.clone();
        check_op(
            move |g, a| {
                let bid = g.constant(bc.clone());
                g.bmm(a, bid)
            },
            &a,
            12,
            1e-6,
        );
    }

    #[test]
    fn softmax_uniform_and_shift_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]), false);
        let s = g.softmax(x, 1);
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // large common offsets do not overflow
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![1000.0, 1001.0, 1002.0]).unwrap(), false);
        let s = g.softmax(x, 1);
        let out = g.value(s).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out[2] > out[1] && out[1] > out[0]);

        let t = rand_tensor(&[2, 3, 5], 13);
        check_op(|g, x| g.softmax(x, 2), &t, 14, 1e-6);
        check_op(|g, x| g.softmax(x, 1), &t, 15, 1e-6);
    }

    #[test]
    fn gelu_reference_values_and_grad() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu_scalar(-10.0).abs() < 1e-9);
        // tanh-approximation value at 1.0
        assert!((gelu_scalar(1.0) - 0.8411919906082768).abs() < 1e-12);
        let t = rand_tensor(&[4, 5], 16);
        check_op(|g, x| g.gelu(x), &t, 17, 1e-6);
    }

    /// Direct six-loop cross-correlation used as the conv oracle.
    fn conv3x3_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (bn, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cout = w.shape()[3];
        let mut out = vec![0.0; bn * h * wd * cout];
        for ib in 0..bn {
            for iy in 0..h {
                for ix in 0..wd {
                    for co in 0..cout {
                        let mut acc = b.data()[co];
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let sy = iy as i64 + ky - 1;
                                let sx = ix as i64 + kx - 1;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= wd as i64 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()
                                        [((ib * h + sy as usize) * wd + sx as usize) * cin + ci];
                                    let wv = w.data()
                                        [((ky as usize * 3 + kx as usize) * cin + ci) * cout + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ib * h + iy) * wd + ix) * cout + co] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![bn, h, wd, cout], out).unwrap()
    }

    #[test]
    fn conv3x3_delta_kernel_is_identity() {
        let x = rand_tensor(&[2, 4, 5, 3], 18);
        // kernel that copies channel ci to output ci at the center tap
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for ci in 0..3 {
            w.data_mut()[((1 * 3 + 1) * 3 + ci) * 3 + ci] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let (xid, wid, bid) = (g.leaf(x.clone(), false), g.leaf(w, false), g.leaf(b, false));
        let y = g.conv3x3(xid, wid, bid);
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv3x3_corner_coverage_on_constant_input() {
        // ones input, ones kernel: output counts the in-bounds taps
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let (xid, wid, bid) = (g.leaf(x, false), g.leaf(w, false), g.leaf(b, false));
        let y = g.conv3x3(xid, wid, bid);
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv3x3_matches_naive_oracle() {
        let x = rand_tensor(&[2, 5, 4, 3], 19);
        let w = rand_tensor(&[3, 3, 3, 2], 20);
        let b = rand_tensor(&[2], 21);
        let expect = conv3x3_naive(&x, &w, &b);
        let mut g = Graph::new();
        let (xid, wid, bid) = (
            g.leaf(x.clone(), false),
            g.leaf(w.clone(), false),
            g.leaf(b.clone(), false),
        );
        let y = g.conv3x3(xid, wid, bid);
        for (a, e) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3x3_grads_check_out() {
        let x = rand_tensor(&[1, 4, 4, 2], 22);
        let w = rand_tensor(&[3, 3, 2, 2], 23);
        let b = rand_tensor(&[2], 24);
        let (wc, bc) = (w.clone(), b.clone());
        check_op(
            move |g, x| {
                let wid = g.constant(wc.clone());
                let bid = g.constant(bc.clone());
                g.conv3x3(x, wid, bid)
            },
            &x,
            25,
            1e-6,
        );
        let (xc, bc) = (x.clone(), b.clone());
        check_op(
            move |g, w| {
                let xid = g.constant(xc.clone());
                let bid = g.constant(bc.clone());
                g.conv3x3(xid, w, bid)
            },
            &w,
            26,
            1e-6,
        );
    }

    #[test]
    fn maxpool_forward_replication_and_routing() {
        // 1x4x4x1, k=2
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 4, 1], vals).unwrap(), true);
        let y = g.maxpool2d(x, 2);
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        let mut expect = vec![0.0; 16];
        for i in [5, 7, 13, 15] {
            expect[i] = 1.0;
        }
        assert_eq!(gx.data(), &expect[..]);

        // 3x3 with k=2: bottom/right edges replicate, output is 2x2
        let vals: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3, 3, 1], vals).unwrap(), false);
        let y = g.maxpool2d(x, 2);
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 1]);
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2, 1], 3.0), true);
        let y = g.maxpool2d(x, 2);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_grad_checks_out_away_from_ties() {
        // distinct values guarantee differentiability
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x = Tensor::new(vec![1, 4, 4, 2], vals).unwrap();
        check_op(|g, x| g.maxpool2d(x, 2), &x, 28, 1e-7);
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks_running_stats() {
        let x = rand_tensor(&[2, 3, 3, 4], 29);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let mut state = BnState::new(4);
        let mut g = Graph::new();
        let (xid, gid, bid) = (g.leaf(x.clone(), false), g.leaf(gamma, false), g.leaf(beta, false));
        let y = g.batchnorm2d(xid, gid, bid, &mut state, Mode::Train).unwrap();
        let yd = g.value(y).data();
        let n = 2 * 3 * 3;
        for c in 0..4 {
            let mean: f64 = (0..n).map(|i| yd[i * 4 + c]).sum::<f64>() / n as f64;
            let var: f64 = (0..n).map(|i| (yd[i * 4 + c] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-12, "channel {} mean {}", c, mean);
            assert!((var - 1.0).abs() < 1e-3, "channel {} var {}", c, var);
            // running stats moved toward the batch stats
            let bmean: f64 = (0..n).map(|i| x.data()[i * 4 + c]).sum::<f64>() / n as f64;
            assert!((state.running_mean[c] - 0.1 * bmean).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = rand_tensor(&[1, 2, 2, 3], 30);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        // identity stats: mean 0, var 1 -> output ~ input (up to eps)
        let mut state = BnState::new(3);
        let mut g = Graph::new();
        let (xid, gid, bid) = (g.leaf(x.clone(), false), g.leaf(gamma, false), g.leaf(beta, false));
        let y = g.batchnorm2d(xid, gid, bid, &mut state, Mode::Eval).unwrap();
        for (a, e) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-5);
        }
        assert_eq!(state.running_mean, vec![0.0; 3]); // eval never updates
    }

    #[test]
    fn batchnorm_train_needs_two_elements() {
        let mut state = BnState::new(2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 1, 2]), false);
        let gamma = g.leaf(Tensor::full(&[2], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[2]), false);
        assert!(g.batchnorm2d(x, gamma, beta, &mut state, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_train_grad_checks_out() {
        let x = rand_tensor(&[2, 2, 2, 3], 31);
        check_op(
            |g, x| {
                let gamma = g.constant(rand_tensor(&[3], 32));
                let beta = g.constant(rand_tensor(&[3], 33));
                let mut state = BnState::new(3);
                g.batchnorm2d(x, gamma, beta, &mut state, Mode::Train).unwrap()
            },
            &x,
            34,
            1e-5,
        );
    }

    #[test]
    fn layernorm_is_shift_invariant_per_row() {
        let x = rand_tensor(&[3, 6], 35);
        let mut shifted = x.clone();
        for r in 0..3 {
            for j in 0..6 {
                shifted.data_mut()[r * 6 + j] += (r as f64 + 1.0) * 10.0;
            }
        }
        let gamma = rand_tensor(&[6], 36);
        let beta = rand_tensor(&[6], 37);
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let (xid, gid, bid) = (
                g.leaf(input.clone(), false),
                g.leaf(gamma.clone(), false),
                g.leaf(beta.clone(), false),
            );
            let y = g.layernorm(xid, gid, bid);
            g.value(y).clone()
        };
        let (a, b) = (run(&x), run(&shifted));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_grad_checks_out() {
        let x = rand_tensor(&[2, 3, 4], 38);
        check_op(
            |g, x| {
                let gamma = g.constant(rand_tensor(&[4], 39));
                let beta = g.constant(rand_tensor(&[4], 40));
                g.layernorm(x, gamma, beta)
            },
            &x,
            41,
            1e-5,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 4]), true);
        let loss = g.cross_entropy(logits, &[0, 1, 2]).unwrap();
        assert!((g.value(loss).scalar() - 4.0f64.ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        // (softmax - onehot) / B
        let gl = g.grad(logits).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                let expect = (0.25 - if j == r { 1.0 } else { 0.0 }) / 3.0;
                assert!((gl.data()[r * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.cross_entropy(logits, &[0]).is_err());
        assert!(g.cross_entropy(logits, &[0, 3]).is_err());
    }

    #[test]
    fn cross_entropy_grad_checks_out() {
        let x = rand_tensor(&[4, 5], 42);
        let targets = [1usize, 0, 4, 2];
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true);
        let loss = g.cross_entropy(xid, &targets).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xid).unwrap().clone();
        let report = grad_check(
            |t| {
                let mut g = Graph::new();
                let xid = g.leaf(t.clone(), false);
                let loss = g.cross_entropy(xid, &targets).unwrap();
                g.value(loss).scalar()
            },
            &x,
            &analytic,
            43,
        );
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn bce_zero_logits_is_ln_2() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 3]), false);
        let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        assert!((g.value(loss).scalar() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 2]), false);
        let targets = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(g.bce_with_logits(logits, &targets).is_err());
    }

    #[test]
    fn bce_grad_checks_out() {
        let x = rand_tensor(&[3, 4], 44);
        let targets = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i % 2) as f64).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true);
        let loss = g.bce_with_logits(xid, &targets).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xid).unwrap().clone();
        let tc = targets.clone();
        let report = grad_check(
            |t| {
                let mut g = Graph::new();
                let xid = g.leaf(t.clone(), false);
                let loss = g.bce_with_logits(xid, &tc).unwrap();
                g.value(loss).scalar()
            },
            &x,
            &analytic,
            45,
        );
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
    }
}
