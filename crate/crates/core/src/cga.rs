//! Cross-modal global attention.
//!
//! Visual features `F_x: [N, C, H, W]` and a language vector `v_q: [N, L]` are
//! projected to a common channel space, combined into a query, and used for
//! soft attention over all `P = H * W` locations. The output keeps `F_x` as a
//! residual.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Result, Tape, Tensor, Var};
use crate::encoders::{he_normal, scaled_normal};

/// Guards the channel norm of zero feature vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Query-key softmax attention.
    Cross,
    /// Every query attends equally to every location (ablation).
    Uniform,
}

pub fn init_cga<R: Rng>(store: &mut ParamStore, channels: usize, lang_dim: usize, rng: &mut R) {
    let c = channels;
    store.insert("cga.f_proj.w", scaled_normal(&[c, c, 1, 1], c, 1.0, rng));
    store.insert("cga.f_proj.b", Tensor::zeros(&[c]));
    store.insert("cga.v_proj.w", scaled_normal(&[c, lang_dim], lang_dim, 1.0, rng));
    store.insert("cga.v_proj.b", Tensor::zeros(&[c]));
    store.insert("cga.query.w", he_normal(&[c, c, 1, 1], c, rng));
    store.insert("cga.query.b", Tensor::zeros(&[c]));
    store.insert("cga.value.w", scaled_normal(&[c, c, 1, 1], c, 1.0, rng));
    store.insert("cga.value.b", Tensor::zeros(&[c]));
}

/// Projected visual and language features plus their normalized sum, which the
/// query and the spatial transformer both consume.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub f_attn: Var,
    pub v_attn: Var,
    pub joint: Var,
}

pub fn project(tape: &mut Tape, p: &BoundParams, fx: Var, vq: Var) -> Result<Projection> {
    let s = tape.shape(fx)?.to_vec();
    let c_proj = tape.shape(p.var("cga.f_proj.w")?)?[1];
    if s.len() != 4 || s[1] != c_proj {
        return Err(AutodiffError::ShapeMismatch { op: "cga.project", detail: format!("features {s:?} for a {c_proj}-channel projection") });
    }
    let f_attn = tape.conv2d(fx, p.var("cga.f_proj.w")?, Some(p.var("cga.f_proj.b")?), 1, 0)?;
    let v_attn = tape.linear(vq, p.var("cga.v_proj.w")?, Some(p.var("cga.v_proj.b")?))?;
    let f_unit = tape.l2_normalize(f_attn, 1, NORM_EPS)?;
    let v_unit = tape.l2_normalize(v_attn, 1, NORM_EPS)?;
    let v_map = tape.broadcast_spatial(v_unit, s[2], s[3])?;
    let joint = tape.add(f_unit, v_map)?;
    Ok(Projection { f_attn, v_attn, joint })
}

pub fn query(tape: &mut Tape, p: &BoundParams, proj: &Projection) -> Result<Var> {
    let r = tape.relu(proj.joint)?;
    tape.conv2d(r, p.var("cga.query.w")?, Some(p.var("cga.query.b")?), 1, 0)
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[N, C, H, W]`: attended values plus `F_x`.
    pub output: Var,
    /// `[N, P, P]` attention weights, rows indexed by query location. Absent in
    /// uniform mode.
    pub weights: Option<Var>,
}

pub fn attend(tape: &mut Tape, p: &BoundParams, q: Var, proj: &Projection, fx: Var, mode: AttentionMode) -> Result<Attended> {
    let s = tape.shape(fx)?.to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let value = tape.conv2d(fx, p.var("cga.value.w")?, Some(p.var("cga.value.b")?), 1, 0)?;
    match mode {
        AttentionMode::Cross => {
            let pix = h * w;
            let q_flat = tape.reshape(q, &[n, c, pix])?;
            let k_flat = tape.reshape(proj.f_attn, &[n, c, pix])?;
            let v_flat = tape.reshape(value, &[n, c, pix])?;
            let raw = tape.matmul(q_flat, k_flat, true, false)?;
            let scores = tape.scale_shift(raw, 1.0 / (c as f64).sqrt(), 0.0)?;
            let weights = tape.softmax(scores, 2)?;
            let mixed = tape.matmul(v_flat, weights, false, true)?;
            let mixed = tape.reshape(mixed, &[n, c, h, w])?;
            let output = tape.add(mixed, fx)?;
            Ok(Attended { output, weights: Some(weights) })
        }
        AttentionMode::Uniform => {
            let mean = tape.global_avg_pool(value)?;
            let spread = tape.broadcast_spatial(mean, h, w)?;
            let output = tape.add(spread, fx)?;
            Ok(Attended { output, weights: None })
        }
    }
}

/// Full module: projection, query, attention.
pub fn cga_forward(tape: &mut Tape, p: &BoundParams, fx: Var, vq: Var, mode: AttentionMode) -> Result<(Projection, Attended)> {
    let proj = project(tape, p, fx, vq)?;
    let q = query(tape, p, &proj)?;
    let att = attend(tape, p, q, &proj, fx, mode)?;
    Ok((proj, att))
}

/// Attention received by each location for `sample`, averaged over query
/// locations, as an `H x W` row-major map.
pub fn attention_map(weights: &Tensor, sample: usize, height: usize, width: usize) -> Vec<f64> {
    let pix = height * width;
    let block = &weights.data()[sample * pix * pix..(sample + 1) * pix * pix];
    let mut out = vec![0.0; pix];
    for row in block.chunks(pix) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a / pix as f64;
        }
    }
    out
}

/// One CSV line per map row, comma separated.
pub fn attention_map_csv(map: &[f64], width: usize) -> String {
    let mut out = String::new();
    for row in map.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}
