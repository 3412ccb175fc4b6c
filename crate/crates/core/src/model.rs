//! The network: two graph-convolution branches, semantic fusion, and the
//! ZINB decoder.
//!
//! Parameters live in [`ModelParams`] as plain matrices. A forward pass
//! records them on a [`Tape`] so the same code serves inference, training
//! and gradient checking.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Csr, Matrix, Tape, Var};

/// Upper bound on the mean head's logit.
pub const MU_LOGIT_MAX: f64 = 12.0;

/// Floor added to the dispersion head.
pub const THETA_FLOOR: f64 = 1e-4;

const FINAL_NOISE_SCALE: f64 = 0.01;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SEMP";
const CHECKPOINT_VERSION: u32 = 1;

/// How the semantic embeddings are combined with the graph latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Per-spot scale and shift generated from the embedding.
    #[default]
    Fsm,
    /// Linear projection of the embedding concatenated to the latent.
    Concat,
    /// Linear projection of the embedding added to the latent.
    Add,
    /// Single-head attention from latent queries to embedding keys and values, added residually.
    CrossAttention,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsm" => Ok(FusionMode::Fsm),
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            "cross-attention" | "cross-attention-stub" => Ok(FusionMode::CrossAttention),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Fsm => "fsm",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::CrossAttention => "cross-attention",
        })
    }
}

/// Layer widths and structural switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub genes: usize,
    pub d: usize,
    pub d_prime: usize,
    pub gcn_hidden: usize,
    pub fsm_hidden: usize,
    pub dec_hidden: usize,
    pub final_bias: bool,
    pub fusion: FusionMode,
}

impl ModelShape {
    pub fn new(genes: usize, d_prime: usize) -> Self {
        ModelShape {
            genes,
            d: 64,
            d_prime,
            gcn_hidden: 128,
            fsm_hidden: 256,
            dec_hidden: 128,
            final_bias: true,
            fusion: FusionMode::Fsm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("latent width d = {} must be even", self.d)));
        }
        let widths = [
            ("genes", self.genes),
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("gcn_hidden", self.gcn_hidden),
            ("fsm_hidden", self.fsm_hidden),
            ("dec_hidden", self.dec_hidden),
        ];
        if let Some((name, w)) = widths.iter().find(|(_, w)| *w < 2) {
            return Err(Error::Config(format!("{name} = {w} must be at least 2")));
        }
        Ok(())
    }
}

/// Scale-and-shift generator plus the output map that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct FsmParams {
    pub w1: Matrix,
    pub b1: Matrix,
    /// Output layer, width `2·d_z`; zero at initialization.
    pub w2: Matrix,
    pub b2: Matrix,
    pub w: Matrix,
    pub bias: Option<Matrix>,
}

impl FsmParams {
    /// Fresh parameters for modulating a `d_z`-wide latent.
    pub fn init(d_z: usize, d_prime: usize, hidden: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        FsmParams {
            w1: glorot(d_prime, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, 2 * d_z),
            b2: Matrix::zeros(1, 2 * d_z),
            w: near_identity(d_z, d_z, rng),
            bias: bias.then(|| Matrix::zeros(1, d_z)),
        }
    }

    pub fn latent_width(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    Fsm(FsmParams),
    Concat {
        proj: Matrix,
        proj_b: Matrix,
        w: Matrix,
        bias: Option<Matrix>,
    },
    Add {
        proj: Matrix,
        proj_b: Matrix,
        w: Matrix,
        bias: Option<Matrix>,
    },
    CrossAttention {
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        w: Matrix,
        bias: Option<Matrix>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub gcn_spa: [Matrix; 2],
    pub gcn_fea: [Matrix; 2],
    pub fusion: FusionParams,
    pub dec_w: Matrix,
    pub dec_b: Matrix,
    pub mu_w: Matrix,
    pub mu_b: Matrix,
    pub theta_w: Matrix,
    pub theta_b: Matrix,
    pub pi_w: Matrix,
    pub pi_b: Matrix,
}

/// Uniform in `±√(6/(fan_in+fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound))
}

/// Identity on the leading square block plus small Glorot noise.
fn near_identity(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = glorot(rows, cols, rng).map(|v| FINAL_NOISE_SCALE * v);
    for i in 0..rows.min(cols) {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    m
}

impl ModelParams {
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, dp, half) = (shape.genes, shape.d, shape.d_prime, shape.d / 2);
        let gcn_spa = [glorot(m, shape.gcn_hidden, &mut rng), glorot(shape.gcn_hidden, half, &mut rng)];
        let gcn_fea = [glorot(m, shape.gcn_hidden, &mut rng), glorot(shape.gcn_hidden, half, &mut rng)];
        let bias = || shape.final_bias.then(|| Matrix::zeros(1, d));
        let fusion = match shape.fusion {
            FusionMode::Fsm => FusionParams::Fsm(FsmParams::init(d, dp, shape.fsm_hidden, shape.final_bias, &mut rng)),
            FusionMode::Concat => FusionParams::Concat {
                proj: glorot(dp, d, &mut rng),
                proj_b: Matrix::zeros(1, d),
                w: near_identity(2 * d, d, &mut rng),
                bias: bias(),
            },
            FusionMode::Add => FusionParams::Add {
                proj: glorot(dp, d, &mut rng),
                proj_b: Matrix::zeros(1, d),
                w: near_identity(d, d, &mut rng),
                bias: bias(),
            },
            FusionMode::CrossAttention => FusionParams::CrossAttention {
                wq: glorot(d, d, &mut rng),
                wk: glorot(dp, d, &mut rng),
                wv: glorot(dp, d, &mut rng),
                w: near_identity(d, d, &mut rng),
                bias: bias(),
            },
        };
        let h = shape.dec_hidden;
        Ok(ModelParams {
            shape,
            gcn_spa,
            gcn_fea,
            fusion,
            dec_w: glorot(d, h, &mut rng),
            dec_b: Matrix::zeros(1, h),
            mu_w: glorot(h, m, &mut rng),
            mu_b: Matrix::zeros(1, m),
            theta_w: glorot(h, m, &mut rng),
            theta_b: Matrix::zeros(1, m),
            pi_w: glorot(h, m, &mut rng),
            pi_b: Matrix::zeros(1, m),
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = vec![
            ("gcn_spa.0", &self.gcn_spa[0]),
            ("gcn_spa.1", &self.gcn_spa[1]),
            ("gcn_fea.0", &self.gcn_fea[0]),
            ("gcn_fea.1", &self.gcn_fea[1]),
        ];
        match &self.fusion {
            FusionParams::Fsm(f) => {
                out.extend([("fsm.w1", &f.w1), ("fsm.b1", &f.b1), ("fsm.w2", &f.w2), ("fsm.b2", &f.b2), ("final.w", &f.w)]);
                if let Some(b) = &f.bias {
                    out.push(("final.bias", b));
                }
            }
            FusionParams::Concat { proj, proj_b, w, bias } | FusionParams::Add { proj, proj_b, w, bias } => {
                out.extend([("proj.w", proj), ("proj.b", proj_b), ("final.w", w)]);
                if let Some(b) = bias {
                    out.push(("final.bias", b));
                }
            }
            FusionParams::CrossAttention { wq, wk, wv, w, bias } => {
                out.extend([("attn.wq", wq), ("attn.wk", wk), ("attn.wv", wv), ("final.w", w)]);
                if let Some(b) = bias {
                    out.push(("final.bias", b));
                }
            }
        }
        out.extend([
            ("dec.w", &self.dec_w),
            ("dec.b", &self.dec_b),
            ("mu.w", &self.mu_w),
            ("mu.b", &self.mu_b),
            ("theta.w", &self.theta_w),
            ("theta.b", &self.theta_b),
            ("pi.w", &self.pi_w),
            ("pi.b", &self.pi_b),
        ]);
        out
    }

    /// Mutable views in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let [s0, s1] = &mut self.gcn_spa;
        let [f0, f1] = &mut self.gcn_fea;
        let mut out: Vec<&mut Matrix> = vec![s0, s1, f0, f1];
        match &mut self.fusion {
            FusionParams::Fsm(f) => {
                out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2, &mut f.w]);
                out.extend(f.bias.as_mut());
            }
            FusionParams::Concat { proj, proj_b, w, bias } | FusionParams::Add { proj, proj_b, w, bias } => {
                out.extend([proj, proj_b, w]);
                out.extend(bias.as_mut());
            }
            FusionParams::CrossAttention { wq, wk, wv, w, bias } => {
                out.extend([wq, wk, wv, w]);
                out.extend(bias.as_mut());
            }
        }
        out.extend([
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.theta_w,
            &mut self.theta_b,
            &mut self.pi_w,
            &mut self.pi_b,
        ]);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named().iter().map(|(_, m)| m.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    pub fn fsm(&self) -> Option<&FsmParams> {
        match &self.fusion {
            FusionParams::Fsm(f) => Some(f),
            _ => None,
        }
    }

    pub fn fsm_mut(&mut self) -> Option<&mut FsmParams> {
        match &mut self.fusion {
            FusionParams::Fsm(f) => Some(f),
            _ => None,
        }
    }

    /// Writes the `SEMP` checkpoint: magic, version, tensor count, then per
    /// tensor a length-prefixed name, rows, cols and little-endian `f64` data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let named = self.named();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, m) in named {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written for exactly `shape`.
    pub fn load(path: &Path, shape: ModelShape) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated".into()))?;
            pos += len;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a SEMP checkpoint".into()));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_of(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut params = ModelParams::init(shape, 0)?;
        let expected: Vec<(String, (usize, usize))> =
            params.named().iter().map(|(n, m)| (n.to_string(), m.shape())).collect();
        let count = u32_of(take(4)?) as usize;
        if count != expected.len() {
            return Err(bad(format!("{count} tensors, expected {}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, want) in &expected {
            let len = u32_of(take(4)?) as usize;
            let got_name = String::from_utf8_lossy(take(len)?).into_owned();
            let rows = u32_of(take(4)?) as usize;
            let cols = u32_of(take(4)?) as usize;
            if &got_name != name || (rows, cols) != *want {
                return Err(bad(format!("found {got_name} {rows}x{cols}, expected {name} {}x{}", want.0, want.1)));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
            }
            loaded.push(Matrix::from_vec(rows, cols, data)?);
        }
        for (slot, m) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = m;
        }
        Ok(params)
    }
}

/// Row-aligned inputs shared by every forward pass of one run.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub a_spa: Arc<Csr>,
    pub a_fea: Arc<Csr>,
    /// `Â_spa · X`, fixed for the run.
    pub ax_spa: Matrix,
    /// `Â_fea · X`.
    pub ax_fea: Matrix,
    pub h_llm: Matrix,
}

impl ModelInputs {
    pub fn new(x: &Matrix, a_spa: Arc<Csr>, a_fea: Arc<Csr>, h_llm: Matrix) -> Result<Self> {
        let n = x.rows();
        for (name, rows) in [("spatial graph", a_spa.rows()), ("feature graph", a_fea.rows()), ("embeddings", h_llm.rows())] {
            if rows != n {
                return Err(Error::Data(format!("{name} has {rows} rows, expression has {n}")));
            }
        }
        Ok(ModelInputs {
            ax_spa: a_spa.matmul_dense(x)?,
            ax_fea: a_fea.matmul_dense(x)?,
            a_spa,
            a_fea,
            h_llm,
        })
    }

    pub fn n_spots(&self) -> usize {
        self.h_llm.rows()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Parameter leaves in the order of [`ModelParams::named`].
    pub params: Vec<Var>,
    pub h_spa: Var,
    pub h_fea: Var,
    pub z_gcn: Var,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub z_final: Var,
    /// Clamped mean logit, `ln μ`.
    pub log_mu: Var,
    pub mu: Var,
    pub theta: Var,
    /// Dropout logit.
    pub pi_logit: Var,
    pub pi: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub h_spa: Matrix,
    pub h_fea: Matrix,
    pub z_gcn: Matrix,
    /// Present for the modulation fusion only.
    pub alpha: Option<Matrix>,
    pub beta: Option<Matrix>,
    pub z_final: Matrix,
    pub mu: Matrix,
    pub theta: Matrix,
    pub pi: Matrix,
}

impl ForwardVars {
    pub fn outputs(&self, tape: &Tape) -> ForwardOutputs {
        let v = |x: Var| tape.value(x).clone();
        ForwardOutputs {
            h_spa: v(self.h_spa),
            h_fea: v(self.h_fea),
            z_gcn: v(self.z_gcn),
            alpha: self.alpha.map(v),
            beta: self.beta.map(v),
            z_final: v(self.z_final),
            mu: v(self.mu),
            theta: v(self.theta),
            pi: v(self.pi),
        }
    }
}

/// `Â·relu(ÂX·W0)·W1`, given `ÂX` already formed.
fn gcn_branch_var(tape: &mut Tape, ax: Var, a: &Arc<Csr>, w0: Var, w1: Var) -> Result<Var> {
    let h = tape.matmul(ax, w0)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w1)?;
    tape.spmm(a, h)
}

/// Two-layer graph convolution `Â·relu(Â·X·W0)·W1` on plain matrices.
pub fn gcn_branch(x: &Matrix, a_hat: &Csr, w0: &Matrix, w1: &Matrix) -> Result<Matrix> {
    let h = a_hat.matmul_dense(x)?.matmul(w0)?.map(|v| v.max(0.0));
    a_hat.matmul_dense(&h.matmul(w1)?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Handles of [`FsmParams`] on a tape, in field order.
pub struct FsmVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w: Var,
    pub bias: Option<Var>,
}

impl FsmVars {
    pub fn record(tape: &mut Tape, p: &FsmParams) -> Self {
        FsmVars {
            w1: tape.param(p.w1.clone()),
            b1: tape.param(p.b1.clone()),
            w2: tape.param(p.w2.clone()),
            b2: tape.param(p.b2.clone()),
            w: tape.param(p.w.clone()),
            bias: p.bias.as_ref().map(|b| tape.param(b.clone())),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w1, self.b1, self.w2, self.b2, self.w];
        v.extend(self.bias);
        v
    }
}

/// Modulated latent `((1+α)⊙Z + β)·W + bias` and the `(α, β)` halves.
pub fn fsm_modulate_var(tape: &mut Tape, z: Var, h_llm: Var, p: &FsmVars) -> Result<(Var, Var, Var)> {
    let d_z = tape.shape(z).1;
    let out_width = tape.shape(p.w2).1;
    if out_width != 2 * d_z {
        return Err(Error::InvalidArgument(format!(
            "modulation output width {out_width} does not match latent width {d_z}"
        )));
    }
    let hidden = linear(tape, h_llm, p.w1, Some(p.b1))?;
    let hidden = tape.relu(hidden)?;
    let z_mod = linear(tape, hidden, p.w2, Some(p.b2))?;
    let (alpha, beta) = tape.split_cols(z_mod, d_z)?;
    let scaled = tape.mul(alpha, z)?;
    let modulated = tape.add(z, scaled)?;
    let modulated = tape.add(modulated, beta)?;
    let out = linear(tape, modulated, p.w, p.bias)?;
    Ok((out, alpha, beta))
}

/// Applies a trained modulation to any external latent matrix.
pub fn fsm_modulate(z_ext: &Matrix, h_llm: &Matrix, params: &FsmParams) -> Result<Matrix> {
    if params.latent_width() != z_ext.cols() || params.w2.cols() != 2 * z_ext.cols() {
        return Err(Error::InvalidArgument(format!(
            "modulation sized for width {}, latent has width {}",
            params.latent_width(),
            z_ext.cols()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(z_ext.clone());
    let h = tape.constant(h_llm.clone());
    let vars = FsmVars::record(&mut tape, params);
    let (out, _, _) = fsm_modulate_var(&mut tape, z, h, &vars)?;
    Ok(tape.value(out).clone())
}

/// Records the full forward pass with every parameter as a trainable leaf.
pub fn forward_var(tape: &mut Tape, inputs: &ModelInputs, params: &ModelParams) -> Result<ForwardVars> {
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, m: &Matrix| {
        let v = tape.param(m.clone());
        leaves.push(v);
        v
    };
    let ws = [leaf(tape, &params.gcn_spa[0]), leaf(tape, &params.gcn_spa[1])];
    let wf = [leaf(tape, &params.gcn_fea[0]), leaf(tape, &params.gcn_fea[1])];
    let ax_spa = tape.constant(inputs.ax_spa.clone());
    let ax_fea = tape.constant(inputs.ax_fea.clone());
    let h_llm = tape.constant(inputs.h_llm.clone());
    let h_spa = gcn_branch_var(tape, ax_spa, &inputs.a_spa, ws[0], ws[1])?;
    let h_fea = gcn_branch_var(tape, ax_fea, &inputs.a_fea, wf[0], wf[1])?;
    let z_gcn = tape.concat_cols(h_spa, h_fea)?;
    let d = tape.shape(z_gcn).1;

    let (z_final, alpha, beta) = match &params.fusion {
        FusionParams::Fsm(f) => {
            let vars = FsmVars {
                w1: leaf(tape, &f.w1),
                b1: leaf(tape, &f.b1),
                w2: leaf(tape, &f.w2),
                b2: leaf(tape, &f.b2),
                w: leaf(tape, &f.w),
                bias: f.bias.as_ref().map(|b| leaf(tape, b)),
            };
            let (out, a, b) = fsm_modulate_var(tape, z_gcn, h_llm, &vars)?;
            (out, Some(a), Some(b))
        }
        FusionParams::Concat { proj, proj_b, w, bias } => {
            let (p, pb, w, b) = (leaf(tape, proj), leaf(tape, proj_b), leaf(tape, w), bias.as_ref().map(|b| leaf(tape, b)));
            let projected = linear(tape, h_llm, p, Some(pb))?;
            let joined = tape.concat_cols(z_gcn, projected)?;
            (linear(tape, joined, w, b)?, None, None)
        }
        FusionParams::Add { proj, proj_b, w, bias } => {
            let (p, pb, w, b) = (leaf(tape, proj), leaf(tape, proj_b), leaf(tape, w), bias.as_ref().map(|b| leaf(tape, b)));
            let projected = linear(tape, h_llm, p, Some(pb))?;
            let joined = tape.add(z_gcn, projected)?;
            (linear(tape, joined, w, b)?, None, None)
        }
        FusionParams::CrossAttention { wq, wk, wv, w, bias } => {
            let (wq, wk, wv) = (leaf(tape, wq), leaf(tape, wk), leaf(tape, wv));
            let (w, b) = (leaf(tape, w), bias.as_ref().map(|b| leaf(tape, b)));
            let q = tape.matmul(z_gcn, wq)?;
            let k = tape.matmul(h_llm, wk)?;
            let v = tape.matmul(h_llm, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let weights = tape.softmax_rows(scores)?;
            let attended = tape.matmul(weights, v)?;
            let joined = tape.add(z_gcn, attended)?;
            (linear(tape, joined, w, b)?, None, None)
        }
    };

    let dec_w = leaf(tape, &params.dec_w);
    let dec_b = leaf(tape, &params.dec_b);
    let heads: Vec<Var> = [&params.mu_w, &params.mu_b, &params.theta_w, &params.theta_b, &params.pi_w, &params.pi_b]
        .into_iter()
        .map(|m| leaf(tape, m))
        .collect();
    let hidden = linear(tape, z_final, dec_w, Some(dec_b))?;
    let hidden = tape.relu(hidden)?;
    let mu = linear(tape, hidden, heads[0], Some(heads[1]))?;
    let log_mu = tape.clamp(mu, f64::NEG_INFINITY, MU_LOGIT_MAX)?;
    let mu = tape.exp(log_mu)?;
    let theta = linear(tape, hidden, heads[2], Some(heads[3]))?;
    let theta = tape.softplus(theta)?;
    let theta = tape.add_scalar(theta, THETA_FLOOR)?;
    let pi_logit = linear(tape, hidden, heads[4], Some(heads[5]))?;
    let pi = tape.sigmoid(pi_logit)?;

    Ok(ForwardVars {
        params: leaves,
        h_spa,
        h_fea,
        z_gcn,
        alpha,
        beta,
        z_final,
        log_mu,
        mu,
        theta,
        pi_logit,
        pi,
    })
}

pub fn forward(inputs: &ModelInputs, params: &ModelParams) -> Result<ForwardOutputs> {
    let mut tape = Tape::new();
    let vars = forward_var(&mut tape, inputs, params)?;
    Ok(vars.outputs(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, GraphKind, SparseAdjacency};

    fn small_shape(fusion: FusionMode) -> ModelShape {
        ModelShape {
            genes: 7,
            d: 6,
            d_prime: 5,
            gcn_hidden: 8,
            fsm_hidden: 9,
            dec_hidden: 4,
            final_bias: true,
            fusion,
        }
    }

    fn ring(n: usize) -> Arc<Csr> {
        let edges = (0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]).collect();
        let a = SparseAdjacency::from_edges(n, edges, GraphKind::Spatial).unwrap();
        Arc::new(normalize_adjacency(&a).unwrap().to_csr())
    }

    fn instance(n: usize, shape: &ModelShape, seed: u64) -> (Matrix, ModelInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, shape.genes, |_, _| rng.random_range(0.0..3.0));
        let h = Matrix::from_fn(n, shape.d_prime, |_, _| rng.random_range(-1.0..1.0));
        let skip = Arc::new(
            Csr::from_triplets(n, n, &(0..n).map(|i| (i, (i * 3 + 1) % n, 0.5)).chain((0..n).map(|i| (i, i, 0.5))).collect::<Vec<_>>())
                .unwrap(),
        );
        let inputs = ModelInputs::new(&x, ring(n), skip, h).unwrap();
        (x, inputs)
    }

    fn perturb_fsm(p: &mut ModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = p.fsm_mut().unwrap();
        f.w2 = Matrix::from_fn(f.w2.rows(), f.w2.cols(), |_, _| rng.random_range(-0.3..0.3));
        f.b2 = Matrix::from_fn(1, f.b2.cols(), |_, _| rng.random_range(-0.3..0.3));
    }

    #[test]
    fn init_is_seeded_bounded_and_rejects_odd_width() {
        let shape = small_shape(FusionMode::Fsm);
        let a = ModelParams::init(shape, 3).unwrap();
        assert_eq!(a, ModelParams::init(shape, 3).unwrap());
        assert_ne!(a, ModelParams::init(shape, 4).unwrap());
        for w in a.gcn_spa.iter().chain(&a.gcn_fea) {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= bound));
        }
        let f = a.fsm().unwrap();
        assert_eq!(f.w2.cols(), 2 * shape.d);
        assert!(f.w2.data().iter().all(|&v| v == 0.0));
        assert!(f.w.max_abs_diff(&Matrix::identity(shape.d)) <= FINAL_NOISE_SCALE);
        assert!(ModelParams::init(ModelShape { d: 7, ..shape }, 0).is_err());
    }

    #[test]
    fn single_node_branch_with_identity_weights_is_identity() {
        let a = Csr::from_triplets(1, 1, &[(0, 0, 1.0)]).unwrap();
        let x = Matrix::from_rows(&[[0.5, 2.0, 1.0]]).unwrap();
        let out = gcn_branch(&x, &a, &Matrix::identity(3), &Matrix::identity(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn two_node_first_layer() {
        let a = Arc::new(Csr::from_triplets(2, 2, &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]).unwrap());
        let x = Matrix::from_rows(&[[2.0], [4.0]]).unwrap();
        let first = a.matmul_dense(&x).unwrap().matmul(&Matrix::identity(1)).unwrap();
        assert_eq!(first.data(), &[3.0, 3.0]);
    }

    #[test]
    fn identity_at_init() {
        let shape = small_shape(FusionMode::Fsm);
        let params = ModelParams::init(shape, 1).unwrap();
        let (_, inputs) = instance(10, &shape, 2);
        let out = forward(&inputs, &params).unwrap();
        let f = params.fsm().unwrap();
        let expected = out.z_gcn.matmul(&f.w).unwrap();
        assert_eq!(out.z_final, expected);
        assert!(out.alpha.unwrap().data().iter().all(|&v| v == 0.0));

        let no_bias = FsmParams { bias: None, w: Matrix::identity(shape.d), ..f.clone() };
        assert_eq!(fsm_modulate(&out.z_gcn, &inputs.h_llm, &no_bias).unwrap(), out.z_gcn);
    }

    #[test]
    fn constant_modulation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut p = FsmParams::init(3, 2, 4, false, &mut rng);
        p.w = Matrix::identity(3);
        // alpha = 1, beta = 0
        p.b2 = Matrix::from_rows(&[[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(fsm_modulate(&z, &h, &p).unwrap(), z.map(|v| 2.0 * v));
        // alpha = -1 annihilates the latent
        p.b2 = Matrix::from_rows(&[[-1.0, -1.0, -1.0, 0.25, -0.5, 2.0]]).unwrap();
        let out = fsm_modulate(&z, &h, &p).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), &[0.25, -0.5, 2.0]);
        }
        assert!(fsm_modulate(&Matrix::zeros(4, 2), &h, &p).is_err());
    }

    /// Straight-line recomputation of the forward pass with dense matrices.
    fn dense_forward(x: &Matrix, a_spa: &Matrix, a_fea: &Matrix, h: &Matrix, p: &ModelParams) -> (Matrix, Matrix, Matrix, Matrix) {
        let relu = |m: Matrix| m.map(|v| v.max(0.0));
        let add_row = |m: Matrix, b: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + b.get(0, j));
        let branch = |a: &Matrix, w: &[Matrix; 2]| {
            let h1 = relu(a.matmul(x).unwrap().matmul(&w[0]).unwrap());
            a.matmul(&h1).unwrap().matmul(&w[1]).unwrap()
        };
        let hs = branch(a_spa, &p.gcn_spa);
        let hf = branch(a_fea, &p.gcn_fea);
        let half = hs.cols();
        let z = Matrix::from_fn(x.rows(), 2 * half, |i, j| if j < half { hs.get(i, j) } else { hf.get(i, j - half) });
        let f = p.fsm().unwrap();
        let m1 = relu(add_row(h.matmul(&f.w1).unwrap(), &f.b1));
        let zm = add_row(m1.matmul(&f.w2).unwrap(), &f.b2);
        let d = z.cols();
        let modulated = Matrix::from_fn(z.rows(), d, |i, j| (1.0 + zm.get(i, j)) * z.get(i, j) + zm.get(i, d + j));
        let zf = add_row(modulated.matmul(&f.w).unwrap(), f.bias.as_ref().unwrap());
        let hd = relu(add_row(zf.matmul(&p.dec_w).unwrap(), &p.dec_b));
        let mu = add_row(hd.matmul(&p.mu_w).unwrap(), &p.mu_b).map(|v| v.min(MU_LOGIT_MAX).exp());
        let pi = add_row(hd.matmul(&p.pi_w).unwrap(), &p.pi_b).map(|v| 1.0 / (1.0 + (-v).exp()));
        (z, zf, mu, pi)
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let shape = small_shape(FusionMode::Fsm);
        let mut params = ModelParams::init(shape, 11).unwrap();
        perturb_fsm(&mut params, 12);
        let (x, inputs) = instance(20, &shape, 13);
        let out = forward(&inputs, &params).unwrap();
        let (z, zf, mu, pi) = dense_forward(&x, &inputs.a_spa.to_dense(), &inputs.a_fea.to_dense(), &inputs.h_llm, &params);
        assert!(out.z_gcn.max_abs_diff(&z) < 1e-10);
        assert!(out.z_final.max_abs_diff(&zf) < 1e-10);
        assert!(out.mu.max_abs_diff(&mu) < 1e-10 * mu.data().iter().fold(1.0, |a: f64, &b| a.max(b)));
        assert!(out.pi.max_abs_diff(&pi) < 1e-10);
        assert!(out.theta.data().iter().all(|&t| t >= THETA_FLOOR));
        assert!(out.pi.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let shape = small_shape(FusionMode::Fsm);
        let mut params = ModelParams::init(shape, 21).unwrap();
        perturb_fsm(&mut params, 22);
        let n = 9;
        let (x, inputs) = instance(n, &shape, 23);
        let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 2) % n).collect();
        let permute_csr = |a: &Csr| {
            let mut inv = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let mut t = Vec::new();
            for i in 0..n {
                let (cols, vals) = a.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    t.push((inv[i], inv[j], v));
                }
            }
            Arc::new(Csr::from_triplets(n, n, &t).unwrap())
        };
        let moved = ModelInputs::new(&x.select_rows(&perm), permute_csr(&inputs.a_spa), permute_csr(&inputs.a_fea), inputs.h_llm.select_rows(&perm)).unwrap();
        let a = forward(&inputs, &params).unwrap();
        let b = forward(&moved, &params).unwrap();
        assert!(a.z_final.select_rows(&perm).max_abs_diff(&b.z_final) < 1e-12);
        assert!(a.pi.select_rows(&perm).max_abs_diff(&b.pi) < 1e-12);
    }

    #[test]
    fn every_fusion_mode_runs_and_reaches_all_parameter_groups() {
        for fusion in [FusionMode::Fsm, FusionMode::Concat, FusionMode::Add, FusionMode::CrossAttention] {
            let shape = small_shape(fusion);
            let mut params = ModelParams::init(shape, 31).unwrap();
            if fusion == FusionMode::Fsm {
                perturb_fsm(&mut params, 32);
            }
            let (_, inputs) = instance(12, &shape, 33);
            let mut tape = Tape::new();
            let vars = forward_var(&mut tape, &inputs, &params).unwrap();
            assert_eq!(vars.params.len(), params.named().len());
            let mut rng = ChaCha8Rng::seed_from_u64(34);
            let weights = tape.constant(Matrix::from_fn(12, shape.d, |_, _| rng.random_range(-1.0..1.0)));
            let prod = tape.mul(vars.z_final, weights).unwrap();
            let loss = tape.sum(prod).unwrap();
            let grads = tape.backward(loss).unwrap();
            for ((name, _), &v) in params.named().iter().zip(&vars.params) {
                let upstream = !(name.starts_with("dec") || name.starts_with("mu") || name.starts_with("theta") || name.starts_with("pi"));
                if upstream {
                    let g = grads.get(v).unwrap_or_else(|| panic!("{fusion}: no gradient for {name}"));
                    assert!(g.data().iter().any(|&x| x != 0.0), "{fusion}: zero gradient for {name}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.semp");
        for fusion in [FusionMode::Fsm, FusionMode::Concat, FusionMode::Add, FusionMode::CrossAttention] {
            let shape = small_shape(fusion);
            let params = ModelParams::init(shape, 41).unwrap();
            params.save(&path).unwrap();
            assert_eq!(ModelParams::load(&path, shape).unwrap(), params);
            let err = ModelParams::load(&path, ModelShape { dec_hidden: 5, ..shape }).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        }
        assert!(std::fs::read(&path).unwrap().starts_with(b"SEMP"));
        let no_bias = ModelShape { final_bias: false, ..small_shape(FusionMode::Fsm) };
        assert!(ModelParams::load(&path, no_bias).is_err());
    }
}
