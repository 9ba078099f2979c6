//! Define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends one node holding the op kind, the input node
//! ids, the forward value, and whatever the gradient rule needs. The tape
//! is rebuilt each training phase; `backward` walks it once in reverse,
//! propagating only through nodes that both descend from the root and can
//! reach a requested leaf.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    Conv2dDims, ConvTranspose2dDims,
};
use super::kernels::ConvGeom;
use super::{ensure_finite, EngineError, EngineResult, Tensor};

pub type NodeId = usize;

/// Gradients keyed by node id, in the order they were requested.
pub type GradMap = BTreeMap<NodeId, Vec<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dims: Conv2dDims,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        dims: ConvTranspose2dDims,
    },
    /// aux holds (mean, inv_std) per (n, c) plane.
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channels: usize,
        plane: usize,
    },
    Relu {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Tanh {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
    L1Loss {
        lhs: NodeId,
        rhs: NodeId,
    },
    MseLoss {
        lhs: NodeId,
        rhs: NodeId,
    },
    /// Mean of the numerically stable binary cross-entropy on logits
    /// against a constant target (0 or 1 for adversarial losses).
    BceWithLogits {
        input: NodeId,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Vec<f64>>,
    aux: Vec<f64>,
}

impl Node {
    fn inputs(&self) -> [Option<NodeId>; 3] {
        match self.op {
            Op::Leaf => [None, None, None],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => [Some(input), Some(weight), Some(bias)],
            Op::InstanceNorm {
                input, gamma, beta, ..
            } => [Some(input), Some(gamma), Some(beta)],
            Op::Relu { input }
            | Op::LeakyRelu { input, .. }
            | Op::Tanh { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::BceWithLogits { input, .. } => [Some(input), None, None],
            Op::Add { lhs, rhs } | Op::L1Loss { lhs, rhs } | Op::MseLoss { lhs, rhs } => {
                [Some(lhs), Some(rhs), None]
            }
        }
    }
}

/// Append-only operation record for one forward phase.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf (parameter or input).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.data_rc(), Vec::new());
        Tensor::tracked(t.shape().to_vec(), self.nodes[id].value.clone(), id)
    }

    fn push(&mut self, op: Op, value: Rc<Vec<f64>>, aux: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, aux });
        id
    }

    /// Node id for an input tensor, registering constants as leaves.
    fn input_id(&mut self, t: &Tensor) -> NodeId {
        match t.node_id() {
            Some(id) => {
                debug_assert!(id < self.nodes.len(), "tensor from another tape");
                id
            }
            None => self.push(Op::Leaf, t.data_rc(), Vec::new()),
        }
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> EngineResult<Tensor> {
        self.emit_aux(op_name, op, shape, value, Vec::new())
    }

    fn emit_aux(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        aux: Vec<f64>,
    ) -> EngineResult<Tensor> {
        ensure_finite(op_name, &value)?;
        let rc = Rc::new(value);
        let id = self.push(op, Rc::clone(&rc), aux);
        Ok(Tensor::tracked(shape, rc, id))
    }

    // ---- convolution ----------------------------------------------------

    /// input N x C_in x H x W, weight C_out x C_in x kH x kW, bias C_out.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> EngineResult<Tensor> {
        let dims = conv2d_dims(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
        let y = conv2d_forward(input.data(), weight.data(), bias.data(), &dims);
        let (i, w, b) = (
            self.input_id(input),
            self.input_id(weight),
            self.input_id(bias),
        );
        self.emit(
            "conv2d",
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                dims,
            },
            vec![dims.batch, dims.c_out, dims.h_out, dims.w_out],
            y,
        )
    }

    /// input N x C_in x H x W, weight C_in x C_out x kH x kW, bias C_out.
    pub fn conv_transpose2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> EngineResult<Tensor> {
        let dims = conv_transpose2d_dims(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
        let y = conv_transpose2d_forward(input.data(), weight.data(), bias.data(), &dims);
        let (i, w, b) = (
            self.input_id(input),
            self.input_id(weight),
            self.input_id(bias),
        );
        self.emit(
            "conv_transpose2d",
            Op::ConvTranspose2d {
                input: i,
                weight: w,
                bias: b,
                dims,
            },
            vec![dims.batch, dims.c_out, dims.h_out, dims.w_out],
            y,
        )
    }

    // ---- normalization and activations ----------------------------------

    /// Per-(sample, channel) normalization over the spatial plane.
    pub fn instance_norm(
        &mut self,
        input: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> EngineResult<Tensor> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(EngineError::ShapeMismatch {
                op: "instance_norm",
                detail: format!("expected N x C x H x W input, got {s:?}"),
            });
        }
        let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(EngineError::ShapeMismatch {
                op: "instance_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} must both be [{channels}] for input {s:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        if eps <= 0.0 {
            return Err(EngineError::InvalidArg {
                op: "instance_norm",
                detail: format!("eps must be > 0, got {eps}"),
            });
        }
        if plane == 0 {
            return Err(EngineError::InvalidArg {
                op: "instance_norm",
                detail: "empty spatial plane".into(),
            });
        }
        let x = input.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut y = vec![0.0; x.len()];
        let mut aux = vec![0.0; 2 * batch * channels];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let chunk = &x[base..base + plane];
                let mean = chunk.iter().sum::<f64>() / plane as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                aux[2 * (n * channels + c)] = mean;
                aux[2 * (n * channels + c) + 1] = inv_std;
                let (g, b) = (gm[c], bt[c]);
                for (dst, &v) in y[base..base + plane].iter_mut().zip(chunk) {
                    *dst = (v - mean) * inv_std * g + b;
                }
            }
        }
        let (i, g, b) = (
            self.input_id(input),
            self.input_id(gamma),
            self.input_id(beta),
        );
        self.emit_aux(
            "instance_norm",
            Op::InstanceNorm {
                input: i,
                gamma: g,
                beta: b,
                channels,
                plane,
            },
            s.to_vec(),
            y,
            aux,
        )
    }

    pub fn relu(&mut self, input: &Tensor) -> EngineResult<Tensor> {
        let y: Vec<f64> = input
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let i = self.input_id(input);
        self.emit("relu", Op::Relu { input: i }, input.shape().to_vec(), y)
    }

    pub fn leaky_relu(&mut self, input: &Tensor, slope: f64) -> EngineResult<Tensor> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(EngineError::InvalidArg {
                op: "leaky_relu",
                detail: format!("slope must be in (0, 1), got {slope}"),
            });
        }
        let y: Vec<f64> = input
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let i = self.input_id(input);
        self.emit(
            "leaky_relu",
            Op::LeakyRelu { input: i, slope },
            input.shape().to_vec(),
            y,
        )
    }

    pub fn tanh(&mut self, input: &Tensor) -> EngineResult<Tensor> {
        let y: Vec<f64> = input.data().iter().map(|v| v.tanh()).collect();
        let i = self.input_id(input);
        self.emit("tanh", Op::Tanh { input: i }, input.shape().to_vec(), y)
    }

    // ---- arithmetic ------------------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: &Tensor, rhs: &Tensor) -> EngineResult<Tensor> {
        same_shape("add", lhs, rhs)?;
        let y: Vec<f64> = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        let (l, r) = (self.input_id(lhs), self.input_id(rhs));
        self.emit("add", Op::Add { lhs: l, rhs: r }, lhs.shape().to_vec(), y)
    }

    pub fn scale(&mut self, input: &Tensor, factor: f64) -> EngineResult<Tensor> {
        let y: Vec<f64> = input.data().iter().map(|v| v * factor).collect();
        let i = self.input_id(input);
        self.emit(
            "scale",
            Op::Scale { input: i, factor },
            input.shape().to_vec(),
            y,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: &Tensor) -> EngineResult<Tensor> {
        let y = vec![input.data().iter().sum::<f64>()];
        let i = self.input_id(input);
        self.emit("sum", Op::Sum { input: i }, vec![1], y)
    }

    // ---- losses ----------------------------------------------------------

    /// Mean absolute difference; the subgradient at exact ties is 0.
    pub fn l1_loss(&mut self, lhs: &Tensor, rhs: &Tensor) -> EngineResult<Tensor> {
        same_shape("l1_loss", lhs, rhs)?;
        let m = lhs.len() as f64;
        let y = vec![
            lhs.data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / m,
        ];
        let (l, r) = (self.input_id(lhs), self.input_id(rhs));
        self.emit("l1_loss", Op::L1Loss { lhs: l, rhs: r }, vec![1], y)
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, lhs: &Tensor, rhs: &Tensor) -> EngineResult<Tensor> {
        same_shape("mse_loss", lhs, rhs)?;
        let m = lhs.len() as f64;
        let y = vec![
            lhs.data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / m,
        ];
        let (l, r) = (self.input_id(lhs), self.input_id(rhs));
        self.emit("mse_loss", Op::MseLoss { lhs: l, rhs: r }, vec![1], y)
    }

    /// Mean binary cross-entropy on logits against a constant target,
    /// computed as max(x,0) - x*t + ln(1 + exp(-|x|)) per element.
    pub fn bce_with_logits(&mut self, input: &Tensor, target: f64) -> EngineResult<Tensor> {
        let m = input.len() as f64;
        let y = vec![
            input
                .data()
                .iter()
                .map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p())
                .sum::<f64>()
                / m,
        ];
        let i = self.input_id(input);
        self.emit(
            "bce_with_logits",
            Op::BceWithLogits { input: i, target },
            vec![1],
            y,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `root` with respect to the `wanted` nodes.
    ///
    /// Only the listed nodes appear in the result; a wanted node that the
    /// root does not depend on gets an all-zero gradient. Propagation is
    /// pruned to the subgraph between the root and the wanted set.
    pub fn backward(&self, root: &Tensor, wanted: &[NodeId]) -> EngineResult<GradMap> {
        if !root.is_scalar() {
            return Err(EngineError::NotScalar {
                op: "backward",
                shape: root.shape().to_vec(),
            });
        }
        let root_id = root.node_id().ok_or(EngineError::InvalidArg {
            op: "backward",
            detail: "root is a constant with no tape node".into(),
        })?;

        // reach[i]: node i's subtree contains a wanted node.
        let mut reach = vec![false; self.nodes.len()];
        for &w in wanted {
            reach[w] = true;
        }
        for i in 0..=root_id {
            if reach[i] {
                continue;
            }
            reach[i] = self.nodes[i].inputs().iter().flatten().any(|&j| reach[j]);
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if reach[root_id] {
            grads[root_id] = Some(vec![1.0]);
        }

        let mut out = GradMap::new();
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wanted.contains(&id) {
                out.insert(id, g.clone());
            }
            self.accumulate(id, &g, &reach, &mut grads);
        }
        for &w in wanted {
            out.entry(w)
                .or_insert_with(|| vec![0.0; self.nodes[w].value.len()]);
        }
        Ok(out)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()])
    }

    fn accumulate(&self, id: NodeId, g: &[f64], reach: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                ref dims,
            } => {
                let (gx, gw, gb) = conv2d_backward(
                    &self.nodes[input].value,
                    &self.nodes[weight].value,
                    g,
                    dims,
                    reach[input],
                    reach[weight],
                    reach[bias],
                );
                if let Some(gx) = gx {
                    add_into(self.grad_buf(grads, input), &gx);
                }
                if let Some(gw) = gw {
                    add_into(self.grad_buf(grads, weight), &gw);
                }
                if let Some(gb) = gb {
                    add_into(self.grad_buf(grads, bias), &gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ref dims,
            } => {
                let (gx, gw, gb) = conv_transpose2d_backward(
                    &self.nodes[input].value,
                    &self.nodes[weight].value,
                    g,
                    dims,
                    reach[input],
                    reach[weight],
                    reach[bias],
                );
                if let Some(gx) = gx {
                    add_into(self.grad_buf(grads, input), &gx);
                }
                if let Some(gw) = gw {
                    add_into(self.grad_buf(grads, weight), &gw);
                }
                if let Some(gb) = gb {
                    add_into(self.grad_buf(grads, bias), &gb);
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                channels,
                plane,
            } => {
                self.instance_norm_backward(
                    id, input, gamma, beta, channels, plane, g, reach, grads,
                );
            }
            Op::Relu { input } => {
                if reach[input] {
                    let x = &self.nodes[input].value;
                    let buf = self.grad_buf(grads, input);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                if reach[input] {
                    let x = &self.nodes[input].value;
                    let buf = self.grad_buf(grads, input);
                    for i in 0..g.len() {
                        buf[i] += g[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Tanh { input } => {
                if reach[input] {
                    let y = &node.value;
                    let buf = self.grad_buf(grads, input);
                    for i in 0..g.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                if reach[lhs] {
                    add_into(self.grad_buf(grads, lhs), g);
                }
                if reach[rhs] {
                    add_into(self.grad_buf(grads, rhs), g);
                }
            }
            Op::Scale { input, factor } => {
                if reach[input] {
                    let buf = self.grad_buf(grads, input);
                    for i in 0..g.len() {
                        buf[i] += g[i] * factor;
                    }
                }
            }
            Op::Sum { input } => {
                if reach[input] {
                    let buf = self.grad_buf(grads, input);
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::L1Loss { lhs, rhs } => {
                let m = self.nodes[lhs].value.len() as f64;
                let scale = g[0] / m;
                let (a, b) = (&self.nodes[lhs].value, &self.nodes[rhs].value);
                if reach[lhs] {
                    let buf = self.grad_buf(grads, lhs);
                    for i in 0..a.len() {
                        buf[i] += scale * sign(a[i] - b[i]);
                    }
                }
                if reach[rhs] {
                    let buf = self.grad_buf(grads, rhs);
                    for i in 0..a.len() {
                        buf[i] -= scale * sign(a[i] - b[i]);
                    }
                }
            }
            Op::MseLoss { lhs, rhs } => {
                let m = self.nodes[lhs].value.len() as f64;
                let scale = 2.0 * g[0] / m;
                let (a, b) = (&self.nodes[lhs].value, &self.nodes[rhs].value);
                if reach[lhs] {
                    let buf = self.grad_buf(grads, lhs);
                    for i in 0..a.len() {
                        buf[i] += scale * (a[i] - b[i]);
                    }
                }
                if reach[rhs] {
                    let buf = self.grad_buf(grads, rhs);
                    for i in 0..a.len() {
                        buf[i] -= scale * (a[i] - b[i]);
                    }
                }
            }
            Op::BceWithLogits { input, target } => {
                if reach[input] {
                    let x = &self.nodes[input].value;
                    let m = x.len() as f64;
                    let scale = g[0] / m;
                    let buf = self.grad_buf(grads, input);
                    for i in 0..x.len() {
                        let sig = 1.0 / (1.0 + (-x[i]).exp());
                        buf[i] += scale * (sig - target);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn instance_norm_backward(
        &self,
        id: NodeId,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channels: usize,
        plane: usize,
        g: &[f64],
        reach: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let node = &self.nodes[id];
        let x = &self.nodes[input].value;
        let gm = &self.nodes[gamma].value;
        let batch = x.len() / (channels * plane);
        let m = plane as f64;

        // Work per plane so the three destinations can be updated in one pass.
        let mut gx_full = reach[input].then(|| vec![0.0; x.len()]);
        let mut ggamma = reach[gamma].then(|| vec![0.0; channels]);
        let mut gbeta = reach[beta].then(|| vec![0.0; channels]);

        for n in 0..batch {
            for c in 0..channels {
                let idx = n * channels + c;
                let base = idx * plane;
                let mean = node.aux[2 * idx];
                let inv_std = node.aux[2 * idx + 1];
                let g_plane = &g[base..base + plane];
                let x_plane = &x[base..base + plane];

                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for i in 0..plane {
                    let xhat = (x_plane[i] - mean) * inv_std;
                    sum_g += g_plane[i];
                    sum_gx += g_plane[i] * xhat;
                }
                if let Some(gb) = gbeta.as_mut() {
                    gb[c] += sum_g;
                }
                if let Some(gg) = ggamma.as_mut() {
                    gg[c] += sum_gx;
                }
                if let Some(gx) = gx_full.as_mut() {
                    let k = gm[c] * inv_std;
                    let mean_g = sum_g / m;
                    let mean_gx = sum_gx / m;
                    let dst = &mut gx[base..base + plane];
                    for i in 0..plane {
                        let xhat = (x_plane[i] - mean) * inv_std;
                        dst[i] = k * (g_plane[i] - mean_g - xhat * mean_gx);
                    }
                }
            }
        }
        if let Some(gx) = gx_full {
            add_into(self.grad_buf(grads, input), &gx);
        }
        if let Some(gg) = ggamma {
            add_into(self.grad_buf(grads, gamma), &gg);
        }
        if let Some(gb) = gbeta {
            add_into(self.grad_buf(grads, beta), &gb);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> EngineResult<()> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn conv2d_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> EngineResult<Conv2dDims> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(EngineError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {input:?} and weight {weight:?} must be rank 4"),
        });
    }
    let (batch, c_in, h_in, w_in) = (input[0], input[1], input[2], input[3]);
    let (c_out, w_cin, kernel_h, kernel_w) = (weight[0], weight[1], weight[2], weight[3]);
    if w_cin != c_in {
        return Err(EngineError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "input {input:?} has {c_in} channels but weight {weight:?} expects {w_cin}"
            ),
        });
    }
    if bias != [c_out] {
        return Err(EngineError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias {bias:?} must be [{c_out}]"),
        });
    }
    if kernel_h == 0 || kernel_w == 0 || stride == 0 {
        return Err(EngineError::InvalidArg {
            op: "conv2d",
            detail: format!("kernel {kernel_h}x{kernel_w}, stride {stride} must all be >= 1"),
        });
    }
    let h_out = ConvGeom::conv_extent(h_in, kernel_h, stride, pad);
    let w_out = ConvGeom::conv_extent(w_in, kernel_w, stride, pad);
    let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
        return Err(EngineError::InvalidArg {
            op: "conv2d",
            detail: format!(
                "padded input {h_in}+2*{pad} x {w_in}+2*{pad} smaller than kernel {kernel_h}x{kernel_w}"
            ),
        });
    };
    Ok(Conv2dDims {
        batch,
        c_in,
        h_in,
        w_in,
        c_out,
        kernel_h,
        kernel_w,
        stride,
        pad,
        h_out,
        w_out,
    })
}

fn conv_transpose2d_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> EngineResult<ConvTranspose2dDims> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(EngineError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input {input:?} and weight {weight:?} must be rank 4"),
        });
    }
    let (batch, c_in, h_in, w_in) = (input[0], input[1], input[2], input[3]);
    let (w_cin, c_out, kernel_h, kernel_w) = (weight[0], weight[1], weight[2], weight[3]);
    if w_cin != c_in {
        return Err(EngineError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!(
                "input {input:?} has {c_in} channels but weight {weight:?} expects {w_cin}"
            ),
        });
    }
    if bias != [c_out] {
        return Err(EngineError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("bias {bias:?} must be [{c_out}]"),
        });
    }
    if kernel_h == 0 || kernel_w == 0 || stride == 0 || h_in == 0 || w_in == 0 {
        return Err(EngineError::InvalidArg {
            op: "conv_transpose2d",
            detail: format!(
                "kernel {kernel_h}x{kernel_w}, stride {stride}, input {h_in}x{w_in} must all be >= 1"
            ),
        });
    }
    let h_out = ConvGeom::conv_transpose_extent(h_in, kernel_h, stride, pad);
    let w_out = ConvGeom::conv_transpose_extent(w_in, kernel_w, stride, pad);
    let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
        return Err(EngineError::InvalidArg {
            op: "conv_transpose2d",
            detail: format!(
                "output extent of {h_in}x{w_in} with kernel {kernel_h}x{kernel_w}, stride {stride}, pad {pad} is empty"
            ),
        });
    };
    Ok(ConvTranspose2dDims {
        batch,
        c_in,
        h_in,
        w_in,
        c_out,
        kernel_h,
        kernel_w,
        stride,
        pad,
        h_out,
        w_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    fn rand(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = t(vec![1, 1, 3, 3], vec![1.0; 9]);
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let b = t(vec![1], vec![0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[1.0; 9][..]);
    }

    #[test]
    fn conv2d_full_kernel_sums_input() {
        // Oracle: direct accumulation of 1..=9.
        let vals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let oracle: f64 = vals.iter().sum();
        assert_eq!(oracle, 45.0);

        let mut tape = Tape::new();
        let x = t(vec![1, 1, 3, 3], vals);
        let w = t(vec![1, 1, 3, 3], vec![1.0; 9]);
        let b = t(vec![1], vec![0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), oracle);
    }

    #[test]
    fn conv2d_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = t(vec![1, 2, 3, 3], vec![0.0; 18]);
        let w = t(vec![1, 3, 1, 1], vec![0.0; 3]);
        let b = t(vec![1], vec![0.0]);
        let err = tape.conv2d(&x, &w, &b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 2, 3, 3]") && msg.contains("[1, 3, 1, 1]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_transpose_scalar_product() {
        let mut tape = Tape::new();
        let x = t(vec![1, 1, 1, 1], vec![2.0]);
        let w = t(vec![1, 1, 1, 1], vec![3.0]);
        let b = t(vec![1], vec![0.0]);
        let y = tape.conv_transpose2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0][..]);
    }

    #[test]
    fn conv_transpose_stride2_scatter_blocks() {
        // Scatter-accumulate oracle: each input pixel stamps the 2x2 kernel
        // at stride-2 offsets; blocks never overlap, so the output is the
        // 4x4 all-ones block pattern.
        let mut expected = vec![0.0; 16];
        for iy in 0..2 {
            for ix in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        expected[(iy * 2 + ky) * 4 + (ix * 2 + kx)] += 1.0;
                    }
                }
            }
        }
        assert_eq!(expected, vec![1.0; 16]);

        let mut tape = Tape::new();
        let x = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let w = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let b = t(vec![1], vec![0.0]);
        let y = tape.conv_transpose2d(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn instance_norm_constant_plane_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = t(
            vec![1, 2, 2, 2],
            vec![3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5],
        );
        let gamma = t(vec![2], vec![1.0, 1.0]);
        let beta = t(vec![2], vec![0.0, 0.25]);
        let y = tape.instance_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in &y.data()[..4] {
            assert_eq!(v, 0.0);
        }
        for &v in &y.data()[4..] {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn instance_norm_matches_moment_oracle() {
        // With eps much smaller than the plane variance, the output plane
        // mean is beta and its variance gamma^2.
        let mut rng = Rng::new(40);
        let (c, h, w) = (3, 6, 6);
        let x = rand(&mut rng, vec![2, c, h, w], -2.0, 2.0);
        let gamma = t(vec![c], vec![1.5, 0.7, 2.0]);
        let beta = t(vec![c], vec![0.1, -0.4, 0.0]);
        let mut tape = Tape::new();
        let y = tape.instance_norm(&x, &gamma, &beta, 1e-10).unwrap();
        let plane = h * w;
        for n in 0..2 {
            for ci in 0..c {
                let chunk = &y.data()[(n * c + ci) * plane..(n * c + ci + 1) * plane];
                let mean = chunk.iter().sum::<f64>() / plane as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                assert!((mean - beta.data()[ci]).abs() <= 1e-9, "mean {mean}");
                let want = gamma.data()[ci] * gamma.data()[ci];
                assert!((var - want).abs() / want <= 1e-6, "var {var} vs {want}");
            }
        }
    }

    #[test]
    fn activation_trivial_values() {
        let mut tape = Tape::new();
        let x = t(vec![3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0][..]);
        let zero = t(vec![1], vec![0.0]);
        assert_eq!(tape.tanh(&zero).unwrap().item(), 0.0);
    }

    #[test]
    fn leaky_relu_gradient_is_exactly_slope_below_zero() {
        let mut tape = Tape::new();
        let x = t(vec![3], vec![-2.0, -0.5, 1.0]);
        let leaf = tape.leaf(&x);
        let y = tape.leaky_relu(&leaf, 0.2).unwrap();
        let root = tape.sum(&y).unwrap();
        let grads = tape.backward(&root, &[leaf.node_id().unwrap()]).unwrap();
        assert_eq!(grads[&leaf.node_id().unwrap()], vec![0.2, 0.2, 1.0]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let mut tape = Tape::new();
        let x = t(vec![1], vec![1.0]);
        assert!(tape.leaky_relu(&x, 0.0).is_err());
        assert!(tape.leaky_relu(&x, 1.0).is_err());
    }

    #[test]
    fn l1_and_mse_hand_values() {
        let mut tape = Tape::new();
        let a = t(vec![2], vec![1.0, 2.0]);
        let b = t(vec![2], vec![0.0, 0.0]);
        assert_eq!(tape.l1_loss(&a, &b).unwrap().item(), 1.5);
        assert_eq!(tape.mse_loss(&a, &b).unwrap().item(), 2.5);
        assert_eq!(tape.l1_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(tape.mse_loss(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = t(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let leaf = tape.leaf(&p);
        let root = tape.sum(&leaf).unwrap();
        let grads = tape.backward(&root, &[leaf.node_id().unwrap()]).unwrap();
        assert_eq!(grads[&leaf.node_id().unwrap()], vec![1.0; 4]);
    }

    #[test]
    fn backward_scope_excludes_unlisted_contributors() {
        let mut tape = Tape::new();
        let p = t(vec![3], vec![1.0, 2.0, 3.0]);
        let q = t(vec![3], vec![4.0, 5.0, 6.0]);
        let (lp, lq) = (tape.leaf(&p), tape.leaf(&q));
        let s = tape.add(&lp, &lq).unwrap();
        let root = tape.sum(&s).unwrap();

        // Ask only for p: q receives nothing, p's gradient is unchanged
        // relative to asking for both.
        let only_p = tape.backward(&root, &[lp.node_id().unwrap()]).unwrap();
        assert_eq!(only_p.len(), 1);
        assert_eq!(only_p[&lp.node_id().unwrap()], vec![1.0; 3]);

        let both = tape
            .backward(&root, &[lp.node_id().unwrap(), lq.node_id().unwrap()])
            .unwrap();
        assert_eq!(both[&lp.node_id().unwrap()], only_p[&lp.node_id().unwrap()]);
        assert_eq!(both[&lq.node_id().unwrap()], vec![1.0; 3]);
    }

    #[test]
    fn backward_of_disconnected_param_is_zero() {
        let mut tape = Tape::new();
        let p = t(vec![2], vec![1.0, 2.0]);
        let q = t(vec![2], vec![3.0, 4.0]);
        let (lp, lq) = (tape.leaf(&p), tape.leaf(&q));
        let root = tape.sum(&lp).unwrap();
        let grads = tape.backward(&root, &[lq.node_id().unwrap()]).unwrap();
        assert_eq!(grads[&lq.node_id().unwrap()], vec![0.0; 2]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let p = t(vec![2], vec![1.0, 2.0]);
        let leaf = tape.leaf(&p);
        assert!(matches!(
            tape.backward(&leaf, &[leaf.node_id().unwrap()]),
            Err(EngineError::NotScalar { .. })
        ));
    }

    #[test]
    fn composite_gradient_equals_sum_of_term_gradients() {
        // Linearity oracle: grad of (l1 + mse) equals grad(l1) + grad(mse)
        // computed on separate tapes.
        let mut rng = Rng::new(77);
        let a = rand(&mut rng, vec![6], -1.0, 1.0);
        let b = rand(&mut rng, vec![6], -1.0, 1.0);

        let grad_of = |combined: bool, which: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let la = tape.leaf(&a);
            let l1 = tape.l1_loss(&la, &b).unwrap();
            let mse = tape.mse_loss(&la, &b).unwrap();
            let root = if combined {
                tape.add(&l1, &mse).unwrap()
            } else if which == 0 {
                l1
            } else {
                mse
            };
            tape.backward(&root, &[la.node_id().unwrap()]).unwrap()[&la.node_id().unwrap()].clone()
        };
        let combined = grad_of(true, 0);
        let l1_only = grad_of(false, 0);
        let mse_only = grad_of(false, 1);
        for i in 0..combined.len() {
            let sum = l1_only[i] + mse_only[i];
            let rel = (combined[i] - sum).abs() / combined[i].abs().max(sum.abs()).max(1e-12);
            assert!(rel <= 1e-10, "element {i}: {} vs {sum}", combined[i]);
        }
    }

    #[test]
    fn detached_inputs_stop_gradient_flow() {
        let mut tape = Tape::new();
        let p = t(vec![2], vec![1.0, -1.0]);
        let leaf = tape.leaf(&p);
        let doubled = tape.scale(&leaf, 2.0).unwrap();
        let cut = doubled.detach();
        let y = tape.scale(&cut, 3.0).unwrap();
        let root = tape.sum(&y).unwrap();
        let grads = tape.backward(&root, &[leaf.node_id().unwrap()]).unwrap();
        assert_eq!(grads[&leaf.node_id().unwrap()], vec![0.0; 2]);
    }

    #[test]
    fn forward_and_backward_replay_bit_identically() {
        let run = || {
            let mut rng = Rng::new(2024);
            let x = rand(&mut rng, vec![1, 2, 6, 6], -1.0, 1.0);
            let w = rand(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
            let b = rand(&mut rng, vec![3], -0.1, 0.1);
            let mut tape = Tape::new();
            let (lx, lw, lb) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
            let y = tape.conv2d(&lx, &lw, &lb, 1, 1).unwrap();
            let y = tape.relu(&y).unwrap();
            let target = Tensor::full_like(&y, 0.25);
            let root = tape.mse_loss(&y, &target).unwrap();
            let grads = tape
                .backward(&root, &[lw.node_id().unwrap(), lb.node_id().unwrap()])
                .unwrap();
            (root.item(), grads[&lw.node_id().unwrap()].clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn non_finite_forward_is_a_hard_error() {
        let mut tape = Tape::new();
        let x = t(vec![2], vec![1e308, 1.0]);
        let y = tape.scale(&x, 10.0);
        assert!(matches!(y, Err(EngineError::NonFinite { op: "scale" })));
    }
}
