//! Central finite-difference check of every training objective through the
//! full forward pass.
//!
//! Coordinates whose perturbation moves a relu or clamp across its kink are
//! skipped: the one-sided slopes disagree there and central differences do
//! not estimate either of them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{build_feature_graph, build_spatial_graph, neighbor_sets, normalize_adjacency};
use crate::losses::{pairs_from_sets, sample_negatives};
use crate::model::{forward_var, FusionMode, ModelInputs, ModelParams, ModelShape};
use crate::tensor::{Matrix, Tape, Var};
use crate::train::record_losses;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub n: usize,
    pub genes: usize,
    pub d: usize,
    pub d_prime: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            n: 20,
            genes: 15,
            d: 8,
            d_prime: 12,
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermReport {
    pub term: String,
    pub checked: usize,
    pub skipped_at_kinks: usize,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }
}

pub const TERMS: [&str; 5] = ["forward", "zinb", "correlation", "spatial", "total"];

struct Instance {
    inputs: ModelInputs,
    target: Arc<Matrix>,
    positives: Arc<Vec<(usize, usize)>>,
    negatives: Arc<Vec<(usize, usize)>>,
    readout: Matrix,
    params: ModelParams,
}

fn instance(config: &GradcheckConfig, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n;
    let counts = Matrix::from_fn(n, config.genes, |_, _| {
        if rng.random::<f64>() < 0.3 {
            0.0
        } else {
            rng.random_range(1..8) as f64
        }
    });
    let x = Matrix::from_fn(n, config.genes, |i, j| counts.get(i, j) + 0.1 * (i + j) as f64 / n as f64 + 0.01);
    let coords = Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0..4.0));
    let spatial = build_spatial_graph(&coords, 1.2)?;
    let feature = build_feature_graph(&x, 3)?;
    let neighbors = neighbor_sets(&spatial);
    let negatives = sample_negatives(&neighbors, seed, 1);
    let h_llm = Matrix::from_fn(n, config.d_prime, |_, _| rng.random_range(-1.0..1.0));
    let inputs = ModelInputs::new(
        &x,
        Arc::new(normalize_adjacency(&spatial)?.to_csr()),
        Arc::new(normalize_adjacency(&feature)?.to_csr()),
        h_llm,
    )?;
    let shape = ModelShape {
        genes: config.genes,
        d: config.d,
        d_prime: config.d_prime,
        gcn_hidden: 10,
        fsm_hidden: 16,
        dec_hidden: 10,
        final_bias: true,
        fusion: FusionMode::Fsm,
    };
    let mut params = ModelParams::init(shape, seed)?;
    // move the modulation off its zero start so every path carries gradient
    let fsm = params.fsm_mut().expect("modulation fusion");
    fsm.w2 = Matrix::from_fn(fsm.w2.rows(), fsm.w2.cols(), |_, _| rng.random_range(-0.2..0.2));
    fsm.b2 = Matrix::from_fn(1, fsm.b2.cols(), |_, _| rng.random_range(-0.2..0.2));
    let readout = Matrix::from_fn(n, config.d, |_, _| rng.random_range(-1.0..1.0));
    Ok(Instance {
        inputs,
        target: Arc::new(counts),
        positives: pairs_from_sets(&neighbors),
        negatives: pairs_from_sets(&negatives),
        readout,
        params,
    })
}

/// Value of `term`, the tape's kink signature, and the gradients in parameter order.
fn evaluate(inst: &Instance, params: &ModelParams, term: &str, config: &GradcheckConfig, grads: bool) -> Result<(f64, u64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let fwd = forward_var(&mut tape, &inst.inputs, params)?;
    let losses = record_losses(&mut tape, &fwd, &inst.target, &inst.positives, &inst.negatives, config.gamma, config.lambda)?;
    let out: Var = match term {
        "forward" => {
            let w = tape.constant(inst.readout.clone());
            let p = tape.mul(fwd.z_final, w)?;
            tape.sum(p)?
        }
        "zinb" => losses.zinb,
        "correlation" => losses.cr,
        "spatial" => losses.spatial,
        _ => losses.total,
    };
    let value = tape.value(out).get(0, 0);
    let signature = tape.kink_signature();
    let g = if grads {
        let all = tape.backward(out)?;
        fwd.params
            .iter()
            .zip(params.shapes())
            .map(|(&v, s)| all.get_or_zeros(v, s))
            .collect()
    } else {
        Vec::new()
    };
    Ok((value, signature, g))
}

fn check_term(inst: &Instance, term: &str, config: &GradcheckConfig) -> Result<TermReport> {
    let (_, base_sig, analytic) = evaluate(inst, &inst.params, term, config, true)?;
    let mut report = TermReport {
        term: term.to_string(),
        checked: 0,
        skipped_at_kinks: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        passed: true,
    };
    let count = analytic.len();
    for t in 0..count {
        for idx in 0..analytic[t].data().len() {
            let shifted = |delta: f64| -> Result<(f64, u64)> {
                let mut p = inst.params.clone();
                p.tensors_mut()[t].data_mut()[idx] += delta;
                let (v, s, _) = evaluate(inst, &p, term, config, false)?;
                Ok((v, s))
            };
            let (plus, sig_plus) = shifted(config.step)?;
            let (minus, sig_minus) = shifted(-config.step)?;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[t].data()[idx];
            let diff = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            if diff > config.abs_tol {
                let rel = diff / a.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > config.rel_tol {
                    report.passed = false;
                }
            }
        }
    }
    Ok(report)
}

/// Checks every term in [`TERMS`] on one seeded random instance.
pub fn run_gradcheck(seed: u64, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let inst = instance(config, seed)?;
    let terms = TERMS
        .iter()
        .map(|term| check_term(&inst, term, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { seed, terms })
}
