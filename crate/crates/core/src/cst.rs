//! Cross-modal spatial transformer: two localization heads read the two channel
//! halves of the cross-modal feature, each predicts a scale-and-translate
//! transform, and each transform resamples the full visual feature map.

use std::fmt::Write as _;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Result, Tape, Tensor, Var};
use crate::cga::Projection;
use crate::image::RgbImage;

/// Upper bound of the squashed scale factors.
pub const S_MAX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformMode {
    Learned,
    /// Both branches return `F_x` unchanged (ablation).
    Identity,
}

/// `(s1, s2, tx, ty)` of the transform `[[s1, 0, tx], [0, s2, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub s1: f64,
    pub s2: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { s1: 1.0, s2: 1.0, tx: 0.0, ty: 0.0 };

    pub fn from_row(row: &[f64]) -> Self {
        AffineParams { s1: row[0], s2: row[1], tx: row[2], ty: row[3] }
    }

    pub fn to_tensor(params: &[AffineParams]) -> Tensor {
        let data = params.iter().flat_map(|a| [a.s1, a.s2, a.tx, a.ty]).collect();
        Tensor::new(vec![params.len(), 4], data).expect("four entries per transform")
    }
}

/// Zero localization weights with bias chosen so that every head starts at the
/// identity transform: `S_MAX * sigmoid(ln 2) = 1` and `tanh(0) = 0`.
pub fn init_cst(store: &mut ParamStore, channels: usize) {
    let half = channels / 2;
    for k in 1..=2 {
        store.insert(format!("cst.loc{k}.w"), Tensor::zeros(&[4, half]));
        store.insert(format!("cst.loc{k}.b"), Tensor::vector(&[2f64.ln(), 2f64.ln(), 0.0, 0.0]));
    }
}

/// Splits the normalized cross-modal sum into its two channel halves.
pub fn split_cross_modal(tape: &mut Tape, joint: Var) -> Result<(Var, Var)> {
    let c = tape.shape(joint)?[1];
    if c % 2 != 0 {
        return Err(AutodiffError::ShapeMismatch { op: "split_cross_modal", detail: format!("odd channel count {c}") });
    }
    tape.split_half(joint, 1)
}

/// Maps raw localization outputs `[N, 4]` to bounded transform parameters.
pub fn squash(tape: &mut Tape, raw: Var) -> Result<Var> {
    let scale_raw = tape.slice(raw, 1, 0, 2)?;
    let shift_raw = tape.slice(raw, 1, 2, 2)?;
    let gate = tape.sigmoid(scale_raw)?;
    let scale = tape.scale_shift(gate, S_MAX, 0.0)?;
    let shift = tape.tanh(shift_raw)?;
    tape.concat(&[scale, shift], 1)
}

/// Localization head `k` (1 or 2): `theta = squash(FC(ReLU(GAP(M))))`, shape `[N, 4]`.
pub fn localize(tape: &mut Tape, p: &BoundParams, m: Var, k: usize) -> Result<Var> {
    let pooled = tape.global_avg_pool(m)?;
    let act = tape.relu(pooled)?;
    let raw = tape.linear(act, p.var(&format!("cst.loc{k}.w"))?, Some(p.var(&format!("cst.loc{k}.b"))?))?;
    squash(tape, raw)
}

#[derive(Clone, Copy, Debug)]
pub struct CstOutput {
    pub e1: Var,
    pub e2: Var,
    /// Transform parameters per branch; absent in identity mode.
    pub thetas: Option<(Var, Var)>,
}

pub fn cst_forward(tape: &mut Tape, p: &BoundParams, proj: &Projection, fx: Var, mode: TransformMode) -> Result<CstOutput> {
    if mode == TransformMode::Identity {
        return Ok(CstOutput { e1: fx, e2: fx, thetas: None });
    }
    let s = tape.shape(fx)?.to_vec();
    let (m1, m2) = split_cross_modal(tape, proj.joint)?;
    let t1 = localize(tape, p, m1, 1)?;
    let t2 = localize(tape, p, m2, 2)?;
    let g1 = tape.affine_grid(t1, s[2], s[3])?;
    let g2 = tape.affine_grid(t2, s[2], s[3])?;
    let e1 = tape.bilinear_sample(fx, g1)?;
    let e2 = tape.bilinear_sample(fx, g2)?;
    Ok(CstOutput { e1, e2, thetas: Some((t1, t2)) })
}

/// Rows `id,s1,s2,tx,ty` with a header.
pub fn theta_csv(rows: &[(usize, AffineParams)]) -> String {
    let mut out = String::from("id,s1,s2,tx,ty\n");
    for (id, a) in rows {
        writeln!(out, "{id},{},{},{},{}", a.s1, a.s2, a.tx, a.ty).unwrap();
    }
    out
}

/// Draws the source region a transform samples from as a one-pixel rectangle
/// outline on the image. Parts outside the image are clipped.
pub fn overlay_rect(image: &RgbImage, t: &AffineParams, color: [u8; 3]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width(), image.height());
    let to_px = |c: f64, size: usize| ((c + 1.0) / 2.0 * (size as f64 - 1.0)).round();
    let x0 = to_px(t.tx - t.s1, w);
    let x1 = to_px(t.tx + t.s1, w);
    let y0 = to_px(t.ty - t.s2, h);
    let y1 = to_px(t.ty + t.s2, h);
    if x1 < 0.0 || y1 < 0.0 || x0 > w as f64 - 1.0 || y0 > h as f64 - 1.0 {
        return out;
    }
    let inside = |v: f64, size: usize| v >= 0.0 && v <= size as f64 - 1.0;
    let clamp = |v: f64, size: usize| v.clamp(0.0, size as f64 - 1.0) as usize;
    for x in clamp(x0, w)..=clamp(x1, w) {
        for y in [y0, y1] {
            if inside(y, h) {
                out.set_pixel(x, y as usize, color);
            }
        }
    }
    for y in clamp(y0, h)..=clamp(y1, h) {
        for x in [x0, x1] {
            if inside(x, w) {
                out.set_pixel(x as usize, y, color);
            }
        }
    }
    out
}
