//! Network architectures and likelihoods.
//!
//! Two columns share one input: a *server* multilayer perceptron whose flat
//! parameter vector θ is shared across clients, and a per-client column
//! whose parameter vector φ adds lateral connections — each client hidden
//! layer past the first receives the previous server activation through a
//! bias, an inner ReLU, a dense adaptor, and an elementwise gate:
//!
//! ```text
//! h_l = ReLU( h_{l−1} w_l  +  α_l ⊙ (ReLU(s_{l−1} + b_l) u_l)  +  c_l )
//! ```
//!
//! The output head is client-private and plain dense (no lateral). With all
//! gates α ≡ 0 the client column is bit-identical to a standalone MLP with
//! weights (w, c) — a reduction the tests pin down.
//!
//! Every forward exists twice: on the [`Tape`] for training (differentiable,
//! optional dropout) and as a plain evaluation path. Both call the same
//! kernels in the same order, so their outputs agree bit for bit.
//!
//! Dropout is applied to the input of every dense layer on the main paths
//! (server layers, client layers, output head) during training; the lateral
//! branch consumes the stored server activation directly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    log_softmax_pick_kernel, matmul_kernel, relu_scalar, NodeId, Tape, Tensor, TensorError,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("architecture needs at least {need} widths (input plus one hidden), got {got:?}")]
    TooShallow { need: usize, got: Vec<usize> },
    #[error("width at position {index} must be positive, got {value}")]
    InvalidWidth { index: usize, value: usize },
    #[error("class count must be at least 2, got {got}")]
    TooFewClasses { got: usize },
    #[error("{what}: expected {expected} parameters, got {got}")]
    ParamLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: feature matrix shape {got:?} incompatible with input width {expected}")]
    FeatureShape {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: expected {expected} server activations, got {got}")]
    ActivationCount {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: targets must be {expected}")]
    WrongTargets {
        op: &'static str,
        expected: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatBlock {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct VecBlock {
    pub off: usize,
    pub len: usize,
}

struct Cursor(usize);

impl Cursor {
    fn mat(&mut self, rows: usize, cols: usize) -> MatBlock {
        let off = self.0;
        self.0 += rows * cols;
        MatBlock { off, rows, cols }
    }

    fn vec(&mut self, len: usize) -> VecBlock {
        let off = self.0;
        self.0 += len;
        VecBlock { off, len }
    }
}

fn validate_widths(widths: &[usize], need: usize) -> Result<(), ModelError> {
    if widths.len() < need {
        return Err(ModelError::TooShallow {
            need,
            got: widths.to_vec(),
        });
    }
    if let Some(index) = widths.iter().position(|w| *w == 0) {
        return Err(ModelError::InvalidWidth { index, value: 0 });
    }
    Ok(())
}

/// The shared column: a ReLU MLP described by `[input, hidden_1, ..., hidden_L]`.
/// Its flat parameter vector θ is laid out layer by layer as `[W_1, b_1, W_2, b_2, ...]`
/// with row-major `in × out` weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerArchitecture {
    widths: Vec<usize>,
}

impl ServerArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self, ModelError> {
        validate_widths(&widths, 2)?;
        Ok(ServerArchitecture { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..]
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn theta_dim(&self) -> usize {
        self.layer_blocks().iter().map(|d| d.w.rows * d.w.cols + d.b.len).sum()
    }

    pub(crate) fn layer_blocks(&self) -> Vec<DenseBlock> {
        let mut cur = Cursor(0);
        self.widths
            .windows(2)
            .map(|io| DenseBlock {
                w: cur.mat(io[0], io[1]),
                b: cur.vec(io[1]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseBlock {
    pub w: MatBlock,
    pub b: VecBlock,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LateralBlock {
    pub w: MatBlock,
    pub u: MatBlock,
    pub alpha: VecBlock,
    pub b: VecBlock,
    pub c: VecBlock,
}

pub(crate) struct ClientLayout {
    pub first_w: MatBlock,
    pub first_c: VecBlock,
    pub laterals: Vec<LateralBlock>,
    pub head: DenseBlock,
    pub total: usize,
}

/// The private column: same hidden widths as the server, lateral connections
/// from the second hidden layer on, and a plain dense head to `classes`
/// logits. Flat parameter order: `[w_1, c_1]`, then `[w_l, u_l, α_l, b_l, c_l]`
/// for each later hidden layer, then `[W_head, b_head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientArchitecture {
    server: ServerArchitecture,
    classes: usize,
}

impl ClientArchitecture {
    pub fn new(server: ServerArchitecture, classes: usize) -> Result<Self, ModelError> {
        if classes < 2 {
            return Err(ModelError::TooFewClasses { got: classes });
        }
        Ok(ClientArchitecture { server, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn server(&self) -> &ServerArchitecture {
        &self.server
    }

    pub fn phi_dim(&self) -> usize {
        self.layout().total
    }

    pub(crate) fn layout(&self) -> ClientLayout {
        let w = &self.server.widths;
        let mut cur = Cursor(0);
        let first_w = cur.mat(w[0], w[1]);
        let first_c = cur.vec(w[1]);
        let laterals = (2..w.len())
            .map(|l| LateralBlock {
                w: cur.mat(w[l - 1], w[l]),
                u: cur.mat(w[l - 1], w[l]),
                alpha: cur.vec(w[l]),
                b: cur.vec(w[l - 1]),
                c: cur.vec(w[l]),
            })
            .collect();
        let head = DenseBlock {
            w: cur.mat(*w.last().expect("validated widths"), self.classes),
            b: cur.vec(self.classes),
        };
        ClientLayout {
            first_w,
            first_c,
            laterals,
            head,
            total: cur.0,
        }
    }

    /// The standalone MLP this client reduces to when all gates are zero:
    /// `[input, hidden..., classes]`.
    pub fn mlp_architecture(&self) -> MlpArchitecture {
        let mut widths = self.server.widths.clone();
        widths.push(self.classes);
        MlpArchitecture::new(widths).expect("client widths already validated")
    }

    /// Extracts the non-lateral parameters (w, c per hidden layer plus the
    /// head) into a flat weight vector for [`ClientArchitecture::mlp_architecture`].
    pub fn strip_laterals(&self, phi: &[f64]) -> Result<Vec<f64>, ModelError> {
        let layout = self.layout();
        if phi.len() != layout.total {
            return Err(ModelError::ParamLength {
                what: "client parameters",
                expected: layout.total,
                got: phi.len(),
            });
        }
        let mut out = Vec::new();
        let copy_mat = |out: &mut Vec<f64>, m: MatBlock| {
            out.extend_from_slice(&phi[m.off..m.off + m.rows * m.cols])
        };
        let copy_vec = |out: &mut Vec<f64>, v: VecBlock| {
            out.extend_from_slice(&phi[v.off..v.off + v.len])
        };
        copy_mat(&mut out, layout.first_w);
        copy_vec(&mut out, layout.first_c);
        for lat in &layout.laterals {
            copy_mat(&mut out, lat.w);
            copy_vec(&mut out, lat.c);
        }
        copy_mat(&mut out, layout.head.w);
        copy_vec(&mut out, layout.head.b);
        Ok(out)
    }

    /// Sets every gate vector α to zero in place.
    pub fn zero_gates(&self, phi: &mut [f64]) {
        for lat in self.layout().laterals {
            phi[lat.alpha.off..lat.alpha.off + lat.alpha.len].fill(0.0);
        }
    }

    /// Trainable-posterior initialization: main-path weight means are
    /// He-scaled normal draws, while adaptors, gates, and biases start at
    /// zero mean — so with mean weights the lateral path contributes nothing
    /// until training opens the gates. Every standard deviation starts at
    /// `init_sigma`.
    pub fn init_params(
        &self,
        init_sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> crate::variational::VariationalParams {
        let layout = self.layout();
        let mut mean = vec![0.0; layout.total];
        he_fill(&mut mean, layout.first_w, rng);
        for lat in &layout.laterals {
            he_fill(&mut mean, lat.w, rng);
        }
        he_fill(&mut mean, layout.head.w, rng);
        let rho = vec![crate::tensor::softplus_inv(init_sigma); layout.total];
        crate::variational::VariationalParams { mean, rho }
    }
}

fn he_fill(mean: &mut [f64], blk: MatBlock, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    let scale = (2.0 / blk.rows as f64).sqrt();
    for v in &mut mean[blk.off..blk.off + blk.rows * blk.cols] {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal) * scale;
    }
}

/// A plain ReLU MLP `[input, hidden..., classes]` with point weights, used by
/// the non-Bayesian reference methods and as the gate-zero reduction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self, ModelError> {
        validate_widths(&widths, 3)?;
        Ok(MlpArchitecture { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn param_dim(&self) -> usize {
        self.widths.windows(2).map(|io| io[0] * io[1] + io[1]).sum()
    }

    fn layer_blocks(&self) -> Vec<DenseBlock> {
        let mut cur = Cursor(0);
        self.widths
            .windows(2)
            .map(|io| DenseBlock {
                w: cur.mat(io[0], io[1]),
                b: cur.vec(io[1]),
            })
            .collect()
    }

    /// Point-weight initialization: He-scaled normal weights, zero biases.
    pub fn he_init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut weights = vec![0.0; self.param_dim()];
        for blk in self.layer_blocks() {
            he_fill(&mut weights, blk.w, rng);
        }
        weights
    }
}

/// Dropout behaviour for one forward construction.
pub enum Dropout<'r> {
    Off,
    Train { rate: f64, rng: &'r mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply_node(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId, TensorError> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::Train { rate, rng } => {
                if *rate == 0.0 {
                    return Ok(x);
                }
                let shape = tape.value(x).shape().to_vec();
                let mask = dropout_mask(tape.value(x).len(), *rate, rng);
                let m = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(x, m)
            }
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1−rate)`, so the expected value of a masked activation is unchanged.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    use rand::Rng;
    let scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

/// Elementwise inverted dropout on a plain tensor; identity in eval mode or
/// at rate zero.
pub fn apply_dropout(t: &Tensor, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Tensor {
    if !training || rate == 0.0 {
        return t.clone();
    }
    let mask = dropout_mask(t.len(), rate, rng);
    let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Tensor::new(t.shape().to_vec(), data).expect("mask preserves length")
}

fn check_features(op: &'static str, x: &Tensor, input_dim: usize) -> Result<usize, ModelError> {
    let s = x.shape();
    if s.len() != 2 || s[1] != input_dim {
        return Err(ModelError::FeatureShape {
            op,
            expected: input_dim,
            got: s.to_vec(),
        });
    }
    Ok(s[0])
}

fn check_params(
    what: &'static str,
    got: usize,
    expected: usize,
) -> Result<(), ModelError> {
    if got != expected {
        return Err(ModelError::ParamLength {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn mat_node(tape: &mut Tape, flat: NodeId, blk: MatBlock) -> Result<NodeId, TensorError> {
    let s = tape.slice(flat, blk.off, blk.rows * blk.cols)?;
    tape.reshape(s, vec![blk.rows, blk.cols])
}

fn vec_node(tape: &mut Tape, flat: NodeId, blk: VecBlock) -> Result<NodeId, TensorError> {
    tape.slice(flat, blk.off, blk.len)
}

/// Differentiable server forward; returns every hidden activation in order.
pub fn server_forward_node(
    arch: &ServerArchitecture,
    tape: &mut Tape,
    x: NodeId,
    theta: NodeId,
    dropout: &mut Dropout,
) -> Result<Vec<NodeId>, ModelError> {
    check_features("server_forward", tape.value(x), arch.input_dim())?;
    check_params("server parameters", tape.value(theta).len(), arch.theta_dim())?;
    let mut h = x;
    let mut acts = Vec::with_capacity(arch.depth());
    for blk in arch.layer_blocks() {
        let input = dropout.apply_node(tape, h)?;
        let w = mat_node(tape, theta, blk.w)?;
        let b = vec_node(tape, theta, blk.b)?;
        let z = tape.matmul(input, w)?;
        let z = tape.add_row(z, b)?;
        h = tape.relu(z);
        acts.push(h);
    }
    Ok(acts)
}

/// Differentiable client forward; consumes the server activations and
/// returns the logits node.
pub fn client_forward_node(
    arch: &ClientArchitecture,
    tape: &mut Tape,
    x: NodeId,
    server_acts: &[NodeId],
    phi: NodeId,
    dropout: &mut Dropout,
) -> Result<NodeId, ModelError> {
    let server = arch.server();
    check_features("client_forward", tape.value(x), server.input_dim())?;
    check_params("client parameters", tape.value(phi).len(), arch.phi_dim())?;
    if server_acts.len() != server.depth() {
        return Err(ModelError::ActivationCount {
            op: "client_forward",
            expected: server.depth(),
            got: server_acts.len(),
        });
    }
    let layout = arch.layout();

    let input = dropout.apply_node(tape, x)?;
    let w = mat_node(tape, phi, layout.first_w)?;
    let c = vec_node(tape, phi, layout.first_c)?;
    let z = tape.matmul(input, w)?;
    let z = tape.add_row(z, c)?;
    let mut h = tape.relu(z);

    for (li, lat) in layout.laterals.iter().enumerate() {
        let input = dropout.apply_node(tape, h)?;
        let w = mat_node(tape, phi, lat.w)?;
        let main = tape.matmul(input, w)?;

        let b = vec_node(tape, phi, lat.b)?;
        let shifted = tape.add_row(server_acts[li], b)?;
        let inner = tape.relu(shifted);
        let u = mat_node(tape, phi, lat.u)?;
        let projected = tape.matmul(inner, u)?;
        let alpha = vec_node(tape, phi, lat.alpha)?;
        let gated = tape.mul_row(projected, alpha)?;

        let z = tape.add(main, gated)?;
        let c = vec_node(tape, phi, lat.c)?;
        let z = tape.add_row(z, c)?;
        h = tape.relu(z);
    }

    let input = dropout.apply_node(tape, h)?;
    let w = mat_node(tape, phi, layout.head.w)?;
    let b = vec_node(tape, phi, layout.head.b)?;
    let z = tape.matmul(input, w)?;
    Ok(tape.add_row(z, b)?)
}

/// Differentiable plain-MLP forward returning the logits node.
pub fn mlp_forward_node(
    arch: &MlpArchitecture,
    tape: &mut Tape,
    x: NodeId,
    weights: NodeId,
    dropout: &mut Dropout,
) -> Result<NodeId, ModelError> {
    check_features("mlp_forward", tape.value(x), arch.input_dim())?;
    check_params("mlp parameters", tape.value(weights).len(), arch.param_dim())?;
    let blocks = arch.layer_blocks();
    let last = blocks.len() - 1;
    let mut h = x;
    for (i, blk) in blocks.into_iter().enumerate() {
        let input = dropout.apply_node(tape, h)?;
        let w = mat_node(tape, weights, blk.w)?;
        let b = vec_node(tape, weights, blk.b)?;
        let z = tape.matmul(input, w)?;
        let z = tape.add_row(z, b)?;
        h = if i == last { z } else { tape.relu(z) };
    }
    Ok(h)
}

fn dense_plain(
    x: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    b: &[f64],
    relu: bool,
) -> Vec<f64> {
    let mut z = matmul_kernel(x, w, batch, in_dim, out_dim);
    for row in z.chunks_exact_mut(out_dim) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += *bias;
        }
    }
    if relu {
        for v in z.iter_mut() {
            *v = relu_scalar(*v);
        }
    }
    z
}

/// Evaluation-mode server forward over point parameters; bit-identical to
/// the tape path with dropout off.
pub fn server_forward(
    arch: &ServerArchitecture,
    x: &Tensor,
    theta: &[f64],
) -> Result<Vec<Tensor>, ModelError> {
    let batch = check_features("server_forward", x, arch.input_dim())?;
    check_params("server parameters", theta.len(), arch.theta_dim())?;
    let mut h = x.data().to_vec();
    let mut in_dim = arch.input_dim();
    let mut acts = Vec::with_capacity(arch.depth());
    for blk in arch.layer_blocks() {
        let w = &theta[blk.w.off..blk.w.off + blk.w.rows * blk.w.cols];
        let b = &theta[blk.b.off..blk.b.off + blk.b.len];
        h = dense_plain(&h, batch, in_dim, blk.w.cols, w, b, true);
        in_dim = blk.w.cols;
        acts.push(Tensor::new(vec![batch, in_dim], h.clone())?);
    }
    Ok(acts)
}

/// Evaluation-mode client forward; returns logits. Bit-identical to the tape
/// path with dropout off.
pub fn client_forward(
    arch: &ClientArchitecture,
    x: &Tensor,
    server_acts: &[Tensor],
    phi: &[f64],
) -> Result<Tensor, ModelError> {
    let server = arch.server();
    let batch = check_features("client_forward", x, server.input_dim())?;
    check_params("client parameters", phi.len(), arch.phi_dim())?;
    if server_acts.len() != server.depth() {
        return Err(ModelError::ActivationCount {
            op: "client_forward",
            expected: server.depth(),
            got: server_acts.len(),
        });
    }
    let layout = arch.layout();
    let mat = |m: MatBlock| &phi[m.off..m.off + m.rows * m.cols];
    let vec_ = |v: VecBlock| &phi[v.off..v.off + v.len];

    let mut h = dense_plain(
        x.data(),
        batch,
        server.input_dim(),
        layout.first_w.cols,
        mat(layout.first_w),
        vec_(layout.first_c),
        true,
    );
    let mut width = layout.first_w.cols;

    for (li, lat) in layout.laterals.iter().enumerate() {
        let out_dim = lat.w.cols;
        // Main path: previous client activation through w (bias added after
        // the lateral term to mirror the training graph's op order).
        let mut z = matmul_kernel(&h, mat(lat.w), batch, width, out_dim);

        // Lateral path: ReLU(server activation + b), adaptor u, gate α.
        let s_act = &server_acts[li];
        let s_width = lat.b.len;
        let mut shifted = s_act.data().to_vec();
        for row in shifted.chunks_exact_mut(s_width) {
            for (v, bias) in row.iter_mut().zip(vec_(lat.b)) {
                *v += *bias;
            }
        }
        for v in shifted.iter_mut() {
            *v = relu_scalar(*v);
        }
        let projected = matmul_kernel(&shifted, mat(lat.u), batch, s_width, out_dim);
        let alpha = vec_(lat.alpha);

        for (zrow, prow) in z.chunks_exact_mut(out_dim).zip(projected.chunks_exact(out_dim)) {
            for ((zv, pv), a) in zrow.iter_mut().zip(prow).zip(alpha) {
                *zv += pv * a;
            }
        }
        for row in z.chunks_exact_mut(out_dim) {
            for (v, bias) in row.iter_mut().zip(vec_(lat.c)) {
                *v += *bias;
            }
        }
        for v in z.iter_mut() {
            *v = relu_scalar(*v);
        }
        h = z;
        width = out_dim;
    }

    let logits = dense_plain(
        &h,
        batch,
        width,
        layout.head.w.cols,
        mat(layout.head.w),
        vec_(layout.head.b),
        false,
    );
    Ok(Tensor::new(vec![batch, layout.head.w.cols], logits)?)
}

/// Evaluation-mode plain-MLP forward returning logits.
pub fn mlp_forward(arch: &MlpArchitecture, x: &Tensor, weights: &[f64]) -> Result<Tensor, ModelError> {
    let batch = check_features("mlp_forward", x, arch.input_dim())?;
    check_params("mlp parameters", weights.len(), arch.param_dim())?;
    let blocks = arch.layer_blocks();
    let last = blocks.len() - 1;
    let mut h = x.data().to_vec();
    let mut in_dim = arch.input_dim();
    for (i, blk) in blocks.into_iter().enumerate() {
        let w = &weights[blk.w.off..blk.w.off + blk.w.rows * blk.w.cols];
        let b = &weights[blk.b.off..blk.b.off + blk.b.len];
        h = dense_plain(&h, batch, in_dim, blk.w.cols, w, b, i != last);
        in_dim = blk.w.cols;
    }
    Ok(Tensor::new(vec![batch, in_dim], h)?)
}

/// Sum over the batch of log softmax(logits)[label] — a total, not a mean,
/// so minibatch estimates can be rescaled by dataset size / batch size.
pub fn log_likelihood(logits: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "log_likelihood",
            left: s.to_vec(),
            right: vec![labels.len()],
        }));
    }
    let (rows, cols) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(ModelError::Tensor(TensorError::LabelOutOfRange {
            label: bad,
            classes: cols,
        }));
    }
    let mut picked = Vec::new();
    log_softmax_pick_kernel(logits.data(), rows, cols, labels, &mut picked);
    Ok(picked.iter().sum())
}

/// Argmax per row; ties break toward the lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Ground-truth targets for one batch: class labels for classification,
/// real values for regression likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// One batch of examples: a row-major feature matrix plus aligned targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(features: Tensor, targets: Targets) -> Result<Self, ModelError> {
        let rows = features.shape().first().copied().unwrap_or(0);
        if features.shape().len() != 2 || rows != targets.len() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "batch",
                left: features.shape().to_vec(),
                right: vec![targets.len()],
            }));
        }
        Ok(Batch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the given rows (in the given order) into a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let cols = self.features.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * cols..(i + 1) * cols]);
        }
        Batch {
            features: Tensor::new(vec![idx.len(), cols], data).expect("row copy preserves shape"),
            targets: self.targets.select(idx),
        }
    }
}

/// A likelihood over (shared θ, private φ) that can put Σ log p(y|x, θ, φ)
/// for a batch on a tape. The refinement loop is generic over this.
pub trait BatchLikelihood {
    fn theta_dim(&self) -> usize;
    fn phi_dim(&self) -> usize;

    /// Builds the batch log-likelihood (a sum over rows) as a scalar node.
    /// `features` must already be a node on the tape (typically a constant
    /// shared by several weight samples).
    fn log_likelihood_node(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        phi: NodeId,
        features: NodeId,
        targets: &Targets,
        dropout: &mut Dropout,
    ) -> Result<NodeId, ModelError>;
}

/// The full two-column categorical model: server MLP plus lateral-connection
/// client column.
#[derive(Debug, Clone)]
pub struct LateralNetModel {
    server: ServerArchitecture,
    client: ClientArchitecture,
}

impl LateralNetModel {
    pub fn new(server: ServerArchitecture, classes: usize) -> Result<Self, ModelError> {
        let client = ClientArchitecture::new(server.clone(), classes)?;
        Ok(LateralNetModel { server, client })
    }

    pub fn server_arch(&self) -> &ServerArchitecture {
        &self.server
    }

    pub fn client_arch(&self) -> &ClientArchitecture {
        &self.client
    }

    /// Deterministic evaluation logits from point parameters.
    pub fn predict_logits(
        &self,
        theta: &[f64],
        phi: &[f64],
        x: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let acts = server_forward(&self.server, x, theta)?;
        client_forward(&self.client, x, &acts, phi)
    }

    pub fn predict_classes(
        &self,
        theta: &[f64],
        phi: &[f64],
        x: &Tensor,
    ) -> Result<Vec<usize>, ModelError> {
        Ok(argmax_classes(&self.predict_logits(theta, phi, x)?))
    }
}

impl BatchLikelihood for LateralNetModel {
    fn theta_dim(&self) -> usize {
        self.server.theta_dim()
    }

    fn phi_dim(&self) -> usize {
        self.client.phi_dim()
    }

    fn log_likelihood_node(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        phi: NodeId,
        features: NodeId,
        targets: &Targets,
        dropout: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        let Targets::Classes(labels) = targets else {
            return Err(ModelError::WrongTargets {
                op: "lateral net",
                expected: "class labels",
            });
        };
        let acts = server_forward_node(&self.server, tape, features, theta, dropout)?;
        let logits = client_forward_node(&self.client, tape, features, &acts, phi, dropout)?;
        let picked = tape.log_softmax_pick(logits, labels)?;
        Ok(tape.sum(picked))
    }
}

/// Linear-Gaussian regression y = x·θ + ε with unit noise variance and no
/// private parameters. Its exact posterior is known in closed form, which
/// makes it the reference likelihood for end-to-end inference tests.
#[derive(Debug, Clone)]
pub struct GaussianRegression {
    pub dim: usize,
}

impl BatchLikelihood for GaussianRegression {
    fn theta_dim(&self) -> usize {
        self.dim
    }

    fn phi_dim(&self) -> usize {
        0
    }

    fn log_likelihood_node(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        _phi: NodeId,
        features: NodeId,
        targets: &Targets,
        _dropout: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        let Targets::Values(y) = targets else {
            return Err(ModelError::WrongTargets {
                op: "gaussian regression",
                expected: "real-valued targets",
            });
        };
        let n = y.len();
        let theta_col = tape.reshape(theta, vec![self.dim, 1])?;
        let pred = tape.matmul(features, theta_col)?;
        let y_col = tape.constant(Tensor::new(vec![n, 1], y.clone())?);
        let diff = tape.sub(pred, y_col)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq);
        let scaled = tape.scale(sum, -0.5);
        let norm = -0.5 * (2.0 * std::f64::consts::PI).ln() * n as f64;
        Ok(tape.add_scalar(scaled, norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_rel_close, central_difference};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn parameter_counts_toy_and_benchmark() {
        let toy = ServerArchitecture::new(vec![2, 2, 2]).unwrap();
        assert_eq!(toy.theta_dim(), 12);
        let client = ClientArchitecture::new(toy, 2).unwrap();
        assert_eq!(client.phi_dim(), 26);

        let bench = ServerArchitecture::new(vec![196, 50, 50]).unwrap();
        assert_eq!(bench.theta_dim(), 196 * 50 + 50 + 50 * 50 + 50);
        let client = ClientArchitecture::new(bench, 10).unwrap();
        assert_eq!(
            client.phi_dim(),
            (196 * 50 + 50) + (2 * 50 * 50 + 50 + 50 + 50) + (50 * 10 + 10)
        );
    }

    #[test]
    fn zero_theta_gives_zero_activations() {
        let arch = ServerArchitecture::new(vec![3, 4, 2]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let acts = server_forward(&arch, &x, &vec![0.0; arch.theta_dim()]).unwrap();
        for a in acts {
            assert!(a.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn one_by_one_identity_layer() {
        let arch = ServerArchitecture::new(vec![1, 1]).unwrap();
        let x = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let acts = server_forward(&arch, &x, &[1.0, 0.0]).unwrap();
        assert_eq!(acts[0].data(), &[2.0]);
    }

    #[test]
    fn server_forward_matches_independent_mlp() {
        // Naive per-element implementation, written without the shared kernels.
        let arch = ServerArchitecture::new(vec![5, 4, 3]).unwrap();
        let mut r = rng(21);
        let theta = random_vec(&mut r, arch.theta_dim(), 1.0);
        let x = Tensor::matrix(3, 5, random_vec(&mut r, 15, 2.0)).unwrap();

        let widths = [5usize, 4, 3];
        let mut offset = 0;
        let mut h: Vec<Vec<f64>> = (0..3)
            .map(|i| x.data()[i * 5..(i + 1) * 5].to_vec())
            .collect();
        let mut expected = Vec::new();
        for l in 1..widths.len() {
            let (ins, outs) = (widths[l - 1], widths[l]);
            let w = &theta[offset..offset + ins * outs];
            let b = &theta[offset + ins * outs..offset + ins * outs + outs];
            offset += ins * outs + outs;
            let mut next = Vec::new();
            for row in &h {
                let mut out_row = vec![0.0; outs];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..ins {
                        acc += row[k] * w[k * outs + j];
                    }
                    acc += b[j];
                    *o = if acc > 0.0 { acc } else { 0.0 };
                }
                next.push(out_row);
            }
            h = next;
            expected.push(h.clone());
        }

        let acts = server_forward(&arch, &x, &theta).unwrap();
        for (a, e) in acts.iter().zip(&expected) {
            let flat: Vec<f64> = e.iter().flatten().copied().collect();
            for (got, want) in a.data().iter().zip(&flat) {
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn client_forward_hand_arithmetic() {
        // One-unit layers: main path 1·1, gate 1, adaptor 2, lateral input
        // ReLU(3 − 3) = 0, so the hidden activation is ReLU(1 + 0 + 0) = 1.
        let server = ServerArchitecture::new(vec![1, 1, 1]).unwrap();
        let arch = ClientArchitecture::new(server.clone(), 2).unwrap();
        let theta = [3.0, 0.0, 1.0, 0.0];
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let acts = server_forward(&server, &x, &theta).unwrap();
        assert_eq!(acts[0].data(), &[3.0]);

        // Layout: [w1, c1][w2, u2, α2, b2, c2][head w, head b]
        let phi = [1.0, 0.0, 1.0, 2.0, 1.0, -3.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(phi.len(), arch.phi_dim());
        let logits = client_forward(&arch, &x, &acts, &phi).unwrap();
        assert_eq!(logits.data(), &[1.0, 0.0]);
    }

    #[test]
    fn gate_zero_reduces_to_standalone_mlp_bitwise() {
        let server = ServerArchitecture::new(vec![6, 5, 4]).unwrap();
        let arch = ClientArchitecture::new(server.clone(), 3).unwrap();
        let mut r = rng(33);
        let theta = random_vec(&mut r, server.theta_dim(), 1.0);
        let mut phi = random_vec(&mut r, arch.phi_dim(), 1.0);
        arch.zero_gates(&mut phi);
        let x = Tensor::matrix(7, 6, random_vec(&mut r, 42, 2.0)).unwrap();

        let acts = server_forward(&server, &x, &theta).unwrap();
        let logits = client_forward(&arch, &x, &acts, &phi).unwrap();

        let mlp = arch.mlp_architecture();
        let weights = arch.strip_laterals(&phi).unwrap();
        let standalone = mlp_forward(&mlp, &x, &weights).unwrap();

        for (a, b) in logits.data().iter().zip(standalone.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn tape_and_plain_forwards_agree_bitwise() {
        let server = ServerArchitecture::new(vec![5, 4, 3]).unwrap();
        let arch = ClientArchitecture::new(server.clone(), 3).unwrap();
        let mut r = rng(5);
        let theta = random_vec(&mut r, server.theta_dim(), 1.0);
        let phi = random_vec(&mut r, arch.phi_dim(), 1.0);
        let x = Tensor::matrix(6, 5, random_vec(&mut r, 30, 2.0)).unwrap();

        let acts = server_forward(&server, &x, &theta).unwrap();
        let plain = client_forward(&arch, &x, &acts, &phi).unwrap();

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let tn = tape.leaf(Tensor::vector(theta.clone()));
        let pn = tape.leaf(Tensor::vector(phi.clone()));
        let mut off = Dropout::Off;
        let acts_n = server_forward_node(&server, &mut tape, xn, tn, &mut off).unwrap();
        let logits_n =
            client_forward_node(&arch, &mut tape, xn, &acts_n, pn, &mut off).unwrap();

        for (a, b) in plain.data().iter().zip(tape.value(logits_n).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let server = ServerArchitecture::new(vec![4, 3, 3]).unwrap();
        let arch = ClientArchitecture::new(server.clone(), 2).unwrap();
        let mut r = rng(9);
        let theta = random_vec(&mut r, server.theta_dim(), 1.0);
        let phi = random_vec(&mut r, arch.phi_dim(), 1.0);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut r, 4, 2.0)).collect();
        let perm = [2usize, 0, 3, 1];

        let forward = |order: &[usize]| {
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let x = Tensor::matrix(4, 4, data).unwrap();
            let acts = server_forward(&server, &x, &theta).unwrap();
            client_forward(&arch, &x, &acts, &phi).unwrap()
        };
        let base = forward(&[0, 1, 2, 3]);
        let permuted = forward(&perm);
        for (out_row, &src) in perm.iter().enumerate() {
            let got = &permuted.data()[out_row * 2..out_row * 2 + 2];
            let want = &base.data()[src * 2..src * 2 + 2];
            assert_eq!(got, want);
        }
    }

    #[test]
    fn logits_gradient_matches_finite_differences() {
        let server = ServerArchitecture::new(vec![2, 2, 2]).unwrap();
        let arch = ClientArchitecture::new(server.clone(), 2).unwrap();
        let mut r = rng(17);
        let theta = random_vec(&mut r, server.theta_dim(), 0.8);
        let phi = random_vec(&mut r, arch.phi_dim(), 0.8);
        let x = Tensor::matrix(3, 2, random_vec(&mut r, 6, 1.5)).unwrap();
        let probe = random_vec(&mut r, 6, 1.0);

        let objective = |theta: &[f64], phi: &[f64]| {
            let acts = server_forward(&server, &x, theta).unwrap();
            let logits = client_forward(&arch, &x, &acts, phi).unwrap();
            logits.data().iter().zip(&probe).map(|(l, p)| l * p).sum::<f64>()
        };

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let tn = tape.leaf(Tensor::vector(theta.clone()));
        let pn = tape.leaf(Tensor::vector(phi.clone()));
        let mut off = Dropout::Off;
        let acts_n = server_forward_node(&server, &mut tape, xn, tn, &mut off).unwrap();
        let logits_n = client_forward_node(&arch, &mut tape, xn, &acts_n, pn, &mut off).unwrap();
        let probe_n = tape.constant(Tensor::matrix(3, 2, probe.clone()).unwrap());
        let weighted = tape.mul(logits_n, probe_n).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();

        for i in 0..theta.len() {
            let mut f = |t: &[f64]| objective(t, &phi);
            let fd = central_difference(&mut f, &theta, i, 1e-6);
            assert_rel_close(grads.get(tn)[i], fd, 1e-5, "d logits / d theta");
        }
        for i in 0..phi.len() {
            let mut f = |p: &[f64]| objective(&theta, p);
            let fd = central_difference(&mut f, &phi, i, 1e-6);
            assert_rel_close(grads.get(pn)[i], fd, 1e-5, "d logits / d phi");
        }
    }

    #[test]
    fn log_likelihood_uniform_and_saturated() {
        let logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let ll = log_likelihood(&logits, &[0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-12);

        let logits = Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap();
        let ll = log_likelihood(&logits, &[0]).unwrap();
        let direct = -(-20.0f64).exp().ln_1p();
        assert!((ll - direct).abs() < 1e-15, "{ll} vs {direct}");
        assert!(ll.abs() < 1e-8 && ll < 0.0);
    }

    #[test]
    fn log_likelihood_matches_direct_softmax_formula() {
        let mut r = rng(2);
        for _ in 0..50 {
            let logits = Tensor::matrix(4, 5, random_vec(&mut r, 20, 8.0)).unwrap();
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            let ll = log_likelihood(&logits, &labels).unwrap();
            let direct: f64 = (0..4)
                .map(|i| {
                    let row = &logits.data()[i * 5..(i + 1) * 5];
                    let denom: f64 = row.iter().map(|z| z.exp()).sum();
                    (row[labels[i]].exp() / denom).ln()
                })
                .sum();
            assert!((ll - direct).abs() < 1e-10, "{ll} vs {direct}");
        }
    }

    #[test]
    fn log_likelihood_rejects_bad_label() {
        let logits = Tensor::matrix(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            log_likelihood(&logits, &[3]),
            Err(ModelError::Tensor(TensorError::LabelOutOfRange { label: 3, classes: 3 }))
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let t = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut r = rng(1);
        assert_eq!(apply_dropout(&t, 0.0, true, &mut r), t);
        assert_eq!(apply_dropout(&t, 0.7, false, &mut r), t);
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut r = rng(6);
        let rate = 0.3;
        let mask = dropout_mask(1_000_000, rate, &mut r);
        let survivors = mask.iter().filter(|m| **m != 0.0).count();
        let fraction = survivors as f64 / 1e6;
        assert!((fraction - 0.7).abs() < 0.005, "survivor fraction {fraction}");
        let scale = 1.0 / (1.0 - rate);
        assert!(mask.iter().all(|m| *m == 0.0 || *m == scale));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, -5.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&logits), vec![0, 1]);
    }

    #[test]
    fn gaussian_regression_likelihood_value() {
        // One sample, x = [2], θ = [0.5] → prediction 1.0, target 3.0:
        // log p = −½(2² ) − ½ln(2π).
        let model = GaussianRegression { dim: 1 };
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![0.5]));
        let phi = tape.leaf(Tensor::vector(vec![]));
        let x = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let ll = model
            .log_likelihood_node(
                &mut tape,
                theta,
                phi,
                x,
                &Targets::Values(vec![3.0]),
                &mut Dropout::Off,
            )
            .unwrap();
        let expected = -0.5 * 4.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.value(ll).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_architectures_rejected() {
        assert!(matches!(
            ServerArchitecture::new(vec![5]),
            Err(ModelError::TooShallow { .. })
        ));
        assert!(matches!(
            ServerArchitecture::new(vec![5, 0, 3]),
            Err(ModelError::InvalidWidth { index: 1, .. })
        ));
        let server = ServerArchitecture::new(vec![5, 3]).unwrap();
        assert!(matches!(
            ClientArchitecture::new(server, 1),
            Err(ModelError::TooFewClasses { got: 1 })
        ));
    }

    #[test]
    fn wrong_parameter_length_reports_counts() {
        let arch = ServerArchitecture::new(vec![3, 2]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        let err = server_forward(&arch, &x, &[0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            ModelError::ParamLength {
                what: "server parameters",
                expected: 8,
                got: 5
            }
        );
    }
}
