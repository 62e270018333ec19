//! Frozen residual-MLP feature extractor with parallel bottleneck adapters.
//!
//! The network is `stem → [block + adapter] × n → head`, where each block is
//! `x + W2ᵀ·ReLU(W1ᵀ·x + b1) + b2` and each adapter adds
//! `ReLU(x·W_down)·W_up` alongside it. Only adapter parameters carry
//! gradients; frozen weights have no gradient slots at all.
//!
//! A bypass backbone (no stem, blocks or head) passes precomputed
//! embeddings straight through.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{fnv1a_f64, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Matrix};

pub const BACKBONE_MAGIC: &[u8; 7] = b"CRCLBK1";
pub const EMBEDDING_MAGIC: &[u8; 7] = b"CRCLEM1";

/// Standard deviation of the random `W_down` initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    /// Adapter bottleneck width.
    pub adapter_dim: usize,
    pub seed: u64,
    /// Treat inputs as precomputed embeddings and skip the network.
    pub bypass: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            hidden_dim: 128,
            embed_dim: 64,
            num_blocks: 2,
            adapter_dim: 64,
            seed: 0,
            bypass: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter("input_dim must be >= 1".into()));
        }
        if self.bypass {
            return Ok(());
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.num_blocks == 0 {
            return Err(Error::InvalidParameter(
                "hidden_dim, embed_dim and num_blocks must be >= 1".into(),
            ));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.hidden_dim {
            return Err(Error::InvalidParameter(format!(
                "adapter_dim must be in [1, hidden_dim), got {} with hidden_dim {}",
                self.adapter_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Embedding width produced by the backbone.
    pub fn output_dim(&self) -> usize {
        if self.bypass {
            self.input_dim
        } else {
            self.embed_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Matrix,
    bias: Vec<f64>,
}

impl Dense {
    fn random(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| normal.sample(rng));
        let bias = (0..fan_out).map(|_| 0.1 * normal.sample(rng)).collect();
        Self { weight, bias }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.weight.cols());
        gemm(1.0, x, false, &self.weight, false, 0.0, &mut out);
        out.add_row_broadcast(&self.bias);
        out
    }
}

/// One frozen residual MLP block.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlock {
    up: Dense,
    down: Dense,
}

impl FrozenBlock {
    pub fn width(&self) -> usize {
        self.up.weight.rows()
    }

    /// `x + MLP(x)`, also returning the MLP pre-activation.
    fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.relu_inplace();
        let mut out = self.down.forward(&act);
        out.add_assign(x).expect("residual shape");
        (out, pre)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub w_down: Matrix,
    pub w_up: Matrix,
}

impl Adapter {
    /// `W_down ~ N(0, 0.02²)`, `W_up = 0`.
    pub fn new(width: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
        Self {
            w_down: Matrix::from_fn(width, bottleneck, |_, _| normal.sample(rng)),
            w_up: Matrix::zeros(bottleneck, width),
        }
    }

    pub fn zeros(width: usize, bottleneck: usize) -> Self {
        Self {
            w_down: Matrix::zeros(width, bottleneck),
            w_up: Matrix::zeros(bottleneck, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }
}

/// One adapter per backbone block, indexed by block position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    adapters: Vec<Adapter>,
}

impl AdapterSet {
    pub fn new(adapters: Vec<Adapter>) -> Self {
        Self { adapters }
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter] {
        &mut self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn zeros_like(&self) -> AdapterSet {
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .map(|a| Adapter::zeros(a.width(), a.bottleneck()))
                .collect(),
        }
    }

    /// Parameter matrices in a fixed order: `W_down`, `W_up` per block.
    pub fn params(&self) -> impl Iterator<Item = &Matrix> {
        self.adapters.iter().flat_map(|a| [&a.w_down, &a.w_up])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.w_down, &mut a.w_up])
    }

    pub fn same_shape(&self, other: &AdapterSet) -> bool {
        self.adapters.len() == other.adapters.len()
            && self.params().zip(other.params()).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn checksum(&self) -> u64 {
        fnv1a_f64(self.params().flat_map(|m| m.data().iter()))
    }

    pub fn max_abs_diff(&self, other: &AdapterSet) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape("AdapterSet::max_abs_diff", "matching adapter sets", "mismatch"));
        }
        let mut best = 0.0_f64;
        for (a, b) in self.params().zip(other.params()) {
            best = best.max(a.max_abs_diff(b)?);
        }
        Ok(best)
    }

    pub fn max_abs(&self) -> f64 {
        self.params().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

/// Intermediates cached by [`FrozenBackbone::embed`] for the adapter
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    backbone_checksum: u64,
    adapters: AdapterSet,
    rows: usize,
    block_inputs: Vec<Matrix>,
    mlp_pre: Vec<Matrix>,
    adapter_pre: Vec<Matrix>,
    adapter_hidden: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    stem: Option<Dense>,
    blocks: Vec<FrozenBlock>,
    head: Option<Dense>,
    fingerprint: u64,
}

impl FrozenBackbone {
    fn assemble(config: BackboneConfig, stem: Option<Dense>, blocks: Vec<FrozenBlock>, head: Option<Dense>) -> Self {
        let mut bb = Self {
            config,
            stem,
            blocks,
            head,
            fingerprint: 0,
        };
        bb.fingerprint = bb.checksum();
        bb
    }

    /// Deterministic random initialization from `config.seed`.
    pub fn from_config(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        if config.bypass {
            return Ok(Self::assemble(config.clone(), None, Vec::new(), None));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d_in, k, d) = (config.input_dim, config.hidden_dim, config.embed_dim);
        let stem = Dense::random(d_in, k, (1.0 / d_in as f64).sqrt(), &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|_| FrozenBlock {
                up: Dense::random(k, k, (2.0 / k as f64).sqrt(), &mut rng),
                down: Dense::random(k, k, (0.5 / k as f64).sqrt(), &mut rng),
            })
            .collect();
        let head = Dense::random(k, d, (1.0 / k as f64).sqrt(), &mut rng);
        Ok(Self::assemble(config.clone(), Some(stem), blocks, Some(head)))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[FrozenBlock] {
        &self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Fresh adapters: random `W_down`, zero `W_up`.
    pub fn init_adapters(&self, rng: &mut ChaCha8Rng) -> AdapterSet {
        AdapterSet::new(
            self.blocks
                .iter()
                .map(|b| Adapter::new(b.width(), self.config.adapter_dim, rng))
                .collect(),
        )
    }

    /// All-zero adapters (the adapter-free network).
    pub fn zero_adapters(&self) -> AdapterSet {
        AdapterSet::new(
            self.blocks
                .iter()
                .map(|b| Adapter::zeros(b.width(), self.config.adapter_dim))
                .collect(),
        )
    }

    /// Checksum over every frozen weight, recomputed from the weights.
    pub fn checksum(&self) -> u64 {
        let mut mats: Vec<&[f64]> = Vec::new();
        for dense in self
            .stem
            .iter()
            .chain(self.blocks.iter().flat_map(|b| [&b.up, &b.down]))
            .chain(self.head.iter())
        {
            mats.push(dense.weight.data());
            mats.push(&dense.bias);
        }
        fnv1a_f64(mats.into_iter().flatten())
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        if adapters.len() != self.blocks.len() {
            return Err(Error::shape(
                "adapters",
                format!("{} adapters", self.blocks.len()),
                adapters.len(),
            ));
        }
        for (i, (a, b)) in adapters.adapters().iter().zip(&self.blocks).enumerate() {
            if a.width() != b.width() || a.w_up.shape() != (a.bottleneck(), a.width()) {
                return Err(Error::shape(
                    "adapters",
                    format!("block {i} width {}", b.width()),
                    format!("{}x{} / {}x{}", a.w_down.rows(), a.w_down.cols(), a.w_up.rows(), a.w_up.cols()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape("embed", format!("{} input columns", self.config.input_dim), x.cols()));
        }
        Ok(())
    }

    /// The frozen network with no adapter path at all.
    pub fn embed_frozen(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = match &self.stem {
            Some(stem) => stem.forward(x),
            None => x.clone(),
        };
        for block in &self.blocks {
            a = block.forward(&a).0;
        }
        Ok(match &self.head {
            Some(head) => head.forward(&a),
            None => a,
        })
    }

    /// Embeddings without keeping a trace.
    pub fn embed_inference(&self, x: &Matrix, adapters: &AdapterSet) -> Result<Matrix> {
        self.check_input(x)?;
        self.check_adapters(adapters)?;
        let mut a = match &self.stem {
            Some(stem) => stem.forward(x),
            None => x.clone(),
        };
        for (block, adapter) in self.blocks.iter().zip(adapters.adapters()) {
            a = block_with_adapter(&a, block, adapter).0;
        }
        Ok(match &self.head {
            Some(head) => head.forward(&a),
            None => a,
        })
    }

    /// Embeddings plus the trace needed by [`Self::backward_adapters`].
    pub fn embed(&self, x: &Matrix, adapters: &AdapterSet) -> Result<(Matrix, ForwardTrace)> {
        self.check_input(x)?;
        self.check_adapters(adapters)?;
        let n = self.blocks.len();
        let mut trace = ForwardTrace {
            backbone_checksum: self.fingerprint,
            adapters: adapters.clone(),
            rows: x.rows(),
            block_inputs: Vec::with_capacity(n),
            mlp_pre: Vec::with_capacity(n),
            adapter_pre: Vec::with_capacity(n),
            adapter_hidden: Vec::with_capacity(n),
        };
        let mut a = match &self.stem {
            Some(stem) => stem.forward(x),
            None => x.clone(),
        };
        for (block, adapter) in self.blocks.iter().zip(adapters.adapters()) {
            let (out, parts) = block_with_adapter(&a, block, adapter);
            trace.block_inputs.push(a);
            trace.mlp_pre.push(parts.mlp_pre);
            trace.adapter_pre.push(parts.adapter_pre);
            trace.adapter_hidden.push(parts.adapter_hidden);
            a = out;
        }
        let emb = match &self.head {
            Some(head) => head.forward(&a),
            None => a,
        };
        Ok((emb, trace))
    }

    /// Exact gradients of a scalar loss with respect to every adapter
    /// parameter, given `∂loss/∂embedding`.
    pub fn backward_adapters(&self, trace: &ForwardTrace, grad_embedding: &Matrix) -> Result<AdapterSet> {
        if trace.backbone_checksum != self.fingerprint {
            return Err(Error::Trace("trace was produced by a different backbone".into()));
        }
        if trace.block_inputs.len() != self.blocks.len() {
            return Err(Error::Trace(format!(
                "trace has {} blocks, backbone has {}",
                trace.block_inputs.len(),
                self.blocks.len()
            )));
        }
        if grad_embedding.shape() != (trace.rows, self.embed_dim()) {
            return Err(Error::Trace(format!(
                "gradient is {}x{}, trace expects {}x{}",
                grad_embedding.rows(),
                grad_embedding.cols(),
                trace.rows,
                self.embed_dim()
            )));
        }
        let mut grads = trace.adapters.zeros_like();
        if self.blocks.is_empty() {
            return Ok(grads);
        }
        let mut g = match &self.head {
            Some(head) => grad_embedding.matmul_nt(&head.weight)?,
            None => grad_embedding.clone(),
        };
        for i in (0..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            let adapter = &trace.adapters.adapters()[i];
            let x = &trace.block_inputs[i];
            let q = &trace.adapter_hidden[i];
            let p = &trace.adapter_pre[i];
            let u = &trace.mlp_pre[i];

            let ga = &mut grads.adapters_mut()[i];
            gemm(1.0, q, true, &g, false, 0.0, &mut ga.w_up);
            let mut gp = g.matmul_nt(&adapter.w_up)?;
            mask_relu(&mut gp, p);
            gemm(1.0, x, true, &gp, false, 0.0, &mut ga.w_down);

            // gradient flowing into the block input: identity + MLP + adapter paths
            let mut gu = g.matmul_nt(&block.down.weight)?;
            mask_relu(&mut gu, u);
            let mut gx = g;
            gemm(1.0, &gu, false, &block.up.weight, true, 1.0, &mut gx);
            gemm(1.0, &gp, false, &adapter.w_down, true, 1.0, &mut gx);
            g = gx;
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.config.bypass {
            return Err(Error::InvalidInput("a bypass backbone has no weights to save".into()));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file), path);
        w.magic(BACKBONE_MAGIC)?;
        for v in [
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.embed_dim,
            self.config.num_blocks,
        ] {
            w.u64(v as u64)?;
        }
        let write_dense = |w: &mut Writer<_>, d: &Dense| -> Result<()> {
            w.f64s(d.weight.data())?;
            w.f64s(&d.bias)
        };
        write_dense(&mut w, self.stem.as_ref().expect("stem"))?;
        for b in &self.blocks {
            write_dense(&mut w, &b.up)?;
            write_dense(&mut w, &b.down)?;
        }
        write_dense(&mut w, self.head.as_ref().expect("head"))?;
        w.finish()?;
        Ok(())
    }

    /// Load frozen weights; `adapter_dim` and `seed` come from `config`, the
    /// dimensions from the file (and must agree with `config`).
    pub fn load(path: &Path, config: &BackboneConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file), path);
        r.expect_magic(BACKBONE_MAGIC)?;
        let (d_in, k, d, n) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        if (d_in, k, d, n)
            != (config.input_dim, config.hidden_dim, config.embed_dim, config.num_blocks)
        {
            return Err(r.format_error(format!(
                "file dims {d_in}/{k}/{d}/{n} disagree with configuration {}/{}/{}/{}",
                config.input_dim, config.hidden_dim, config.embed_dim, config.num_blocks
            )));
        }
        let mut config = config.clone();
        config.bypass = false;
        config.validate()?;
        let mut read_dense = |rows: usize, cols: usize| -> Result<Dense> {
            let data = r.f64s(rows * cols)?;
            let weight = Matrix::new(rows, cols, data).map_err(|e| r.format_error(e.to_string()))?;
            let bias = r.f64s(cols)?;
            if bias.iter().any(|v| !v.is_finite()) {
                return Err(r.format_error("non-finite bias"));
            }
            Ok(Dense { weight, bias })
        };
        let stem = read_dense(d_in, k)?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let up = read_dense(k, k)?;
            let down = read_dense(k, k)?;
            blocks.push(FrozenBlock { up, down });
        }
        let head = read_dense(k, d)?;
        r.expect_eof()?;
        Ok(Self::assemble(config, Some(stem), blocks, Some(head)))
    }
}

struct AdapterParts {
    mlp_pre: Matrix,
    adapter_pre: Matrix,
    adapter_hidden: Matrix,
}

fn mask_relu(grad: &mut Matrix, pre: &Matrix) {
    for (g, p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn block_with_adapter(x: &Matrix, block: &FrozenBlock, adapter: &Adapter) -> (Matrix, AdapterParts) {
    let (mut out, mlp_pre) = block.forward(x);
    let mut adapter_pre = Matrix::zeros(x.rows(), adapter.bottleneck());
    gemm(1.0, x, false, &adapter.w_down, false, 0.0, &mut adapter_pre);
    let mut adapter_hidden = adapter_pre.clone();
    adapter_hidden.relu_inplace();
    gemm(1.0, &adapter_hidden, false, &adapter.w_up, false, 1.0, &mut out);
    (
        out,
        AdapterParts {
            mlp_pre,
            adapter_pre,
            adapter_hidden,
        },
    )
}

/// `block(x) + ReLU(x·W_down)·W_up`.
pub fn adapter_block_forward(x_in: &Matrix, block: &FrozenBlock, adapter: &Adapter) -> Result<Matrix> {
    if x_in.cols() != block.width() || adapter.width() != block.width() {
        return Err(Error::shape(
            "adapter_block_forward",
            format!("width {}", block.width()),
            format!("input {} / adapter {}", x_in.cols(), adapter.width()),
        ));
    }
    Ok(block_with_adapter(x_in, block, adapter).0)
}

/// Write precomputed embeddings (`rows` samples × `d` columns).
pub fn save_embeddings(path: &Path, embeddings: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer::new(BufWriter::new(file), path);
    w.magic(EMBEDDING_MAGIC)?;
    w.matrix(embeddings)?;
    w.finish()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.expect_magic(EMBEDDING_MAGIC)?;
    let m = r.matrix()?;
    r.expect_eof()?;
    Ok(m)
}
