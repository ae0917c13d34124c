//! Synthetic per-head workloads whose queries are out of distribution with
//! respect to their keys.
//!
//! All heads read the same hidden states `H` (one row per token). Hidden
//! states are anisotropic Gaussian with per-axis standard deviation `1/i`.
//! Each kv group owns random key and value projections; each query head mixes
//! its group's key projection with a private random matrix:
//!
//! `W_q = (W_k + s·R) / sqrt(1 + s²)`
//!
//! so `s = ood_strength = 0` makes queries and keys identically distributed
//! and larger `s` rotates the query projection away from the key projection.
//! Prefill queries come from `H` plus a small perturbation; decode queries come
//! from fresh hidden states, so they are held out from anything an index sees
//! at build time.
//!
//! Queries and keys are finally scaled by a common factor so that, averaged
//! over queries, the standard deviation of `q·k/√d` across keys equals
//! `concentration`. A joint scale leaves the query/key distribution gap
//! unchanged and only sharpens the softmax.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HeadWorkload, Role, VectorSet};
use crate::{Error, Result};

/// Score spread at which a 65,536-token context puts at least 99% of the
/// softmax mass on its top 0.1% of tokens (see the `calibrate` example).
pub const DEFAULT_CONCENTRATION: f64 = 16.0;
/// Query/key projection mix giving a query-to-key Mahalanobis gap of at least 2x.
pub const DEFAULT_OOD_STRENGTH: f64 = 8.0;
/// Relative noise added to hidden states before the query projection.
const QUERY_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "defaults::n_ctx")]
    pub n_ctx: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::d_head")]
    pub d_head: usize,
    #[serde(default = "defaults::one")]
    pub n_heads: usize,
    #[serde(default = "defaults::one")]
    pub n_kv_groups: usize,
    pub seed: u64,
    #[serde(default = "defaults::ood_strength")]
    pub ood_strength: f64,
    #[serde(default = "defaults::concentration")]
    pub concentration: f64,
    #[serde(default = "defaults::n_decode")]
    pub n_decode: usize,
}

mod defaults {
    pub fn n_ctx() -> usize {
        65_536
    }
    pub fn d_model() -> usize {
        256
    }
    pub fn d_head() -> usize {
        128
    }
    pub fn one() -> usize {
        1
    }
    pub fn ood_strength() -> f64 {
        super::DEFAULT_OOD_STRENGTH
    }
    pub fn concentration() -> f64 {
        super::DEFAULT_CONCENTRATION
    }
    pub fn n_decode() -> usize {
        256
    }
}

impl WorkloadSpec {
    /// Calibrated defaults with the given context length and seed.
    pub fn new(n_ctx: usize, seed: u64) -> Self {
        WorkloadSpec {
            n_ctx,
            d_model: defaults::d_model(),
            d_head: defaults::d_head(),
            n_heads: 1,
            n_kv_groups: 1,
            seed,
            ood_strength: DEFAULT_OOD_STRENGTH,
            concentration: DEFAULT_CONCENTRATION,
            n_decode: defaults::n_decode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::spec("d_model", "must be at least 1"));
        }
        if self.d_head == 0 {
            return Err(Error::spec("d_head", "must be at least 1"));
        }
        if self.d_head > self.d_model {
            return Err(Error::spec(
                "d_head",
                format!("{} exceeds d_model = {}", self.d_head, self.d_model),
            ));
        }
        if self.n_heads == 0 {
            return Err(Error::spec("n_heads", "must be at least 1"));
        }
        if self.n_kv_groups == 0 || self.n_heads % self.n_kv_groups != 0 {
            return Err(Error::spec(
                "n_kv_groups",
                format!("{} does not divide n_heads = {}", self.n_kv_groups, self.n_heads),
            ));
        }
        if !(self.ood_strength.is_finite() && self.ood_strength >= 0.0) {
            return Err(Error::spec("ood_strength", "must be finite and >= 0"));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(Error::spec("concentration", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }
}

// rng stream tags; every random draw is keyed by (seed, stream)
const STREAM_HIDDEN: u64 = 1;
const STREAM_DECODE_HIDDEN: u64 = 2;
const STREAM_KEY_PROJ: u64 = 3;
const STREAM_VALUE_PROJ: u64 = 4;
const STREAM_QUERY_MIX: u64 = 5;
const STREAM_PREFILL_NOISE: u64 = 6;
const STREAM_DECODE_NOISE: u64 = 7;

fn rng(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((kind << 32) | index as u64);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Row-major `rows x cols` f64 matrix.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(rows: usize, cols: usize, std: f64, r: &mut ChaCha8Rng) -> Mat {
        let data = (0..rows * cols).map(|_| std * normal(r)).collect();
        Mat { rows, cols, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn hidden_states(n: usize, sigma: &[f64], r: &mut ChaCha8Rng) -> Mat {
    let cols = sigma.len();
    let mut data = Vec::with_capacity(n * cols);
    for _ in 0..n {
        data.extend(sigma.iter().map(|s| s * normal(r)));
    }
    Mat { rows: n, cols, data }
}

/// `out = (h + noise) · w · scale`, written as f32.
fn project_row(h: &[f64], w: &Mat, scale: f64, out: &mut Vec<f32>, acc: &mut [f64]) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (j, &x) in h.iter().enumerate() {
        for (a, &wv) in acc.iter_mut().zip(w.row(j)) {
            *a += x * wv;
        }
    }
    out.extend(acc.iter().map(|a| (a * scale) as f32));
}

fn project(
    hidden: &Mat,
    w: &Mat,
    scale: f64,
    noise: Option<(&[f64], &mut ChaCha8Rng)>,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(hidden.rows * w.cols);
    let mut acc = vec![0.0; w.cols];
    match noise {
        None => {
            for i in 0..hidden.rows {
                project_row(hidden.row(i), w, scale, &mut out, &mut acc);
            }
        }
        Some((sigma, r)) => {
            let mut h = vec![0.0; hidden.cols];
            for i in 0..hidden.rows {
                for ((dst, &src), &s) in h.iter_mut().zip(hidden.row(i)).zip(sigma) {
                    *dst = src + QUERY_NOISE * s * normal(r);
                }
                project_row(&h, w, scale, &mut out, &mut acc);
            }
        }
    }
    out
}

/// `Wᵀ diag(var) W`, a `cols x cols` covariance.
fn projected_covariance(w: &Mat, var: &[f64]) -> Vec<f64> {
    let c = w.cols;
    let mut cov = vec![0.0; c * c];
    for (j, &v) in var.iter().enumerate() {
        let row = w.row(j);
        for a in 0..c {
            let ra = v * row[a];
            for b in 0..c {
                cov[a * c + b] += ra * row[b];
            }
        }
    }
    cov
}

/// `tr(A·B)` for symmetric `A`, `B`.
fn trace_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct GroupProjections {
    key: Mat,
    value: Mat,
    queries: Vec<Mat>,
    scale: f64,
}

fn group_projections(spec: &WorkloadSpec, group: usize, var: &[f64]) -> GroupProjections {
    let (dm, dh) = (spec.d_model, spec.d_head);
    let w_std = 1.0 / (dm as f64).sqrt();
    let key = Mat::gaussian(dm, dh, w_std, &mut rng(spec.seed, STREAM_KEY_PROJ, group));
    let value = Mat::gaussian(dm, dh, w_std, &mut rng(spec.seed, STREAM_VALUE_PROJ, group));
    let s = spec.ood_strength;
    let norm = 1.0 / (1.0 + s * s).sqrt();
    let heads = spec.heads_per_group();
    let queries: Vec<Mat> = (0..heads)
        .map(|local| {
            let head = group * heads + local;
            let mix = Mat::gaussian(dm, dh, w_std, &mut rng(spec.seed, STREAM_QUERY_MIX, head));
            let data = key
                .data
                .iter()
                .zip(&mix.data)
                .map(|(k, m)| (k + s * m) * norm)
                .collect();
            Mat {
                rows: dm,
                cols: dh,
                data,
            }
        })
        .collect();

    // E_q[Var_k(q·k)] = tr(Σq Σk); pick the joint scale that maps its root,
    // divided by √d, onto the requested concentration.
    let cov_k = projected_covariance(&key, var);
    let noisy_var: Vec<f64> = var.iter().map(|v| v * (1.0 + QUERY_NOISE * QUERY_NOISE)).collect();
    let mean_tr = queries
        .iter()
        .map(|wq| trace_product(&projected_covariance(wq, &noisy_var), &cov_k))
        .sum::<f64>()
        / heads as f64;
    let base = mean_tr.sqrt() / (dh as f64).sqrt();
    let scale = (spec.concentration / base).sqrt();
    GroupProjections {
        key,
        value,
        queries,
        scale,
    }
}

/// Generates one [`HeadWorkload`] per query head. Output is a pure function
/// of `spec`: every random draw comes from a stream keyed by the seed and the
/// group or head it belongs to, so thread count has no effect.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<HeadWorkload>> {
    spec.validate()?;
    let sigma: Vec<f64> = (1..=spec.d_model).map(|i| 1.0 / i as f64).collect();
    let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let hidden = hidden_states(spec.n_ctx, &sigma, &mut rng(spec.seed, STREAM_HIDDEN, 0));
    let decode_hidden = hidden_states(
        spec.n_decode,
        &sigma,
        &mut rng(spec.seed, STREAM_DECODE_HIDDEN, 0),
    );
    let dh = spec.d_head;
    let heads_per_group = spec.heads_per_group();

    let groups: Vec<GroupProjections> = (0..spec.n_kv_groups)
        .into_par_iter()
        .map(|g| group_projections(spec, g, &var))
        .collect();
    let kv: Vec<(Arc<VectorSet>, Arc<VectorSet>)> = groups
        .par_iter()
        .map(|g| -> Result<_> {
            let k = VectorSet::new(Role::Key, dh, project(&hidden, &g.key, g.scale, None))?;
            let v = VectorSet::new(Role::Value, dh, project(&hidden, &g.value, 1.0, None))?;
            Ok((Arc::new(k), Arc::new(v)))
        })
        .collect::<Result<_>>()?;

    (0..spec.n_heads)
        .into_par_iter()
        .map(|head| {
            let group = head / heads_per_group;
            let proj = &groups[group];
            let wq = &proj.queries[head % heads_per_group];
            let mut noise = rng(spec.seed, STREAM_PREFILL_NOISE, head);
            let prefill = project(&hidden, wq, proj.scale, Some((&sigma, &mut noise)));
            let mut noise = rng(spec.seed, STREAM_DECODE_NOISE, head);
            let decode = project(&decode_hidden, wq, proj.scale, Some((&sigma, &mut noise)));
            HeadWorkload::new(
                head,
                group,
                VectorSet::new(Role::Query, dh, prefill)?,
                kv[group].0.clone(),
                kv[group].1.clone(),
                VectorSet::new(Role::Query, dh, decode)?,
            )
        })
        .collect()
}
