//! Prediction loss on mixed images, its region weighting, and the total
//! objective `l_pre + alpha * l_st + beta * l_cl`.

use crate::autodiff::{softmax_into, Backward, BackwardCtx, Tape, Var};
use crate::datamodel::{LabelMap, Mask, RegionNorm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Soft-Dice smoothing term.
pub const DICE_EPS: f64 = 1e-5;
/// Weight of the cross-entropy term; Dice gets `1 - CE_WEIGHT`.
pub const CE_WEIGHT: f64 = 0.5;

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_pre: f64,
    pub l_st: f64,
    pub l_cl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{:?},{:?},{:?},{:?}",
            self.l_pre, self.l_st, self.l_cl, self.total
        )
    }
}

pub const LOSS_CSV_HEADER: &str = "iteration,l_pre,l_st,l_cl,total";

/// `total = l_pre + alpha * l_st + beta * l_cl`, always accumulated in that
/// order. Non-finite components are rejected.
pub fn total_loss(l_pre: f64, l_st: f64, l_cl: f64, alpha: f64, beta: f64, gamma: f64) -> Result<LossBreakdown> {
    if !(l_pre.is_finite() && l_st.is_finite() && l_cl.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite loss component (l_pre={l_pre}, l_st={l_st}, l_cl={l_cl})"
        )));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Validation("loss weights must be >= 0".into()));
    }
    Ok(LossBreakdown {
        l_pre,
        l_st,
        l_cl,
        total: l_pre + alpha * l_st + beta * l_cl,
        alpha,
        beta,
        gamma,
    })
}

fn check_logits(logits: &Tensor, target: &[u8], region: Option<&[bool]>) -> Result<(usize, usize)> {
    let m = logits.shape().first().copied().unwrap_or(0);
    if m < 2 {
        return Err(Error::Shape(format!("logits need >= 2 channels, got {:?}", logits.shape())));
    }
    let s = logits.len() / m;
    if target.len() != s || region.is_some_and(|r| r.len() != s) {
        return Err(Error::Shape(format!(
            "logits cover {s} voxels, target {} / region {:?}",
            target.len(),
            region.map(|r| r.len())
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= m) {
        return Err(Error::Shape(format!("target class {bad} outside {m} logit channels")));
    }
    Ok((m, s))
}

/// Value and optional logit gradient of the region-restricted
/// `0.5 * CE + 0.5 * (1 - mean soft Dice over foreground classes)`.
fn region_loss_impl(
    logits: &Tensor,
    target: &[u8],
    region: Option<&[bool]>,
    norm: RegionNorm,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let (m, s) = check_logits(logits, target, region)?;
    let inside = |v: usize| region.is_none_or(|r| r[v]);
    let n = (0..s).filter(|&v| inside(v)).count();
    if n == 0 {
        return Ok((0.0, want_grad.then(|| vec![0.0; m * s])));
    }
    let z = logits.data();
    let mut probs = vec![0.0; m * s];
    let mut col = vec![0.0; m];
    let mut pcol = vec![0.0; m];
    let mut ce = 0.0;
    // per class: intersection, predicted mass, target mass
    let mut inter = vec![0.0; m];
    let mut pmass = vec![0.0; m];
    let mut ymass = vec![0.0; m];
    for v in 0..s {
        if !inside(v) {
            continue;
        }
        for c in 0..m {
            col[c] = z[c * s + v];
        }
        softmax_into(&col, &mut pcol);
        let t = target[v] as usize;
        // log-softmax directly for accuracy near saturation
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        ce -= col[t] - lse;
        for c in 0..m {
            probs[c * s + v] = pcol[c];
            pmass[c] += pcol[c];
        }
        inter[t] += pcol[t];
        ymass[t] += 1.0;
    }
    let ce_denom = match norm {
        RegionNorm::Region => n as f64,
        RegionNorm::Total => s as f64,
    };
    ce /= ce_denom;
    let fg = m - 1;
    let mut dice_sum = 0.0;
    let mut denom = vec![0.0; m];
    for c in 1..m {
        denom[c] = pmass[c] + ymass[c] + DICE_EPS;
        dice_sum += (2.0 * inter[c] + DICE_EPS) / denom[c];
    }
    let dice_loss = 1.0 - dice_sum / fg as f64;
    let loss = CE_WEIGHT * ce + (1.0 - CE_WEIGHT) * dice_loss;

    let grad = want_grad.then(|| {
        let mut g = vec![0.0; m * s];
        let mut gp = vec![0.0; m];
        let dice_w = -(1.0 - CE_WEIGHT) / fg as f64;
        for v in 0..s {
            if !inside(v) {
                continue;
            }
            let t = target[v] as usize;
            // d loss / d p_c from the Dice term
            gp[0] = 0.0;
            for c in 1..m {
                let y = if t == c { 1.0 } else { 0.0 };
                let num = 2.0 * inter[c] + DICE_EPS;
                gp[c] = dice_w * (2.0 * y * denom[c] - num) / (denom[c] * denom[c]);
            }
            let dot: f64 = (0..m).map(|c| probs[c * s + v] * gp[c]).sum();
            for c in 0..m {
                let p = probs[c * s + v];
                let y = if t == c { 1.0 } else { 0.0 };
                g[c * s + v] = p * (gp[c] - dot) + CE_WEIGHT * (p - y) / ce_denom;
            }
        }
        g
    });
    Ok((loss, grad))
}

/// Region-restricted combined Dice/CE loss; `region = None` means the whole
/// image and an empty region yields 0.
pub fn combined_region_loss(logits: &Tensor, target: &LabelMap, region: Option<&Mask>, norm: RegionNorm) -> Result<f64> {
    let r = region.map(|m| m.as_bools());
    region_loss_impl(logits, target.data(), r.as_deref(), norm, false).map(|(l, _)| l)
}

/// Same as [`combined_region_loss`] on raw slices.
pub fn combined_region_loss_raw(logits: &Tensor, target: &[u8], region: Option<&[bool]>, norm: RegionNorm) -> Result<f64> {
    region_loss_impl(logits, target, region, norm, false).map(|(l, _)| l)
}

/// Cross-entropy term alone, normalized per `norm`. With
/// [`RegionNorm::Total`] it is additive over disjoint regions.
pub fn region_cross_entropy(logits: &Tensor, target: &[u8], region: Option<&[bool]>, norm: RegionNorm) -> Result<f64> {
    let (m, s) = check_logits(logits, target, region)?;
    let z = logits.data();
    let mut ce = 0.0;
    let mut n = 0usize;
    for v in 0..s {
        if region.is_some_and(|r| !r[v]) {
            continue;
        }
        n += 1;
        let max = (0..m).map(|c| z[c * s + v]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..m).map(|c| (z[c * s + v] - max).exp()).sum::<f64>().ln();
        ce -= z[target[v] as usize * s + v] - lse;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(match norm {
        RegionNorm::Region => ce / n as f64,
        RegionNorm::Total => ce / s as f64,
    })
}

struct RegionLossOp {
    grad: Vec<f64>,
}

impl Backward for RegionLossOp {
    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad.item();
        vec![Some(Tensor::new(
            ctx.inputs[0].shape().to_vec(),
            self.grad.iter().map(|v| v * g).collect(),
        ))]
    }
}

pub fn combined_region_loss_op(
    tape: &mut Tape,
    logits: Var,
    target: &[u8],
    region: Option<&[bool]>,
    norm: RegionNorm,
) -> Result<Var> {
    let want = tape.needs_grad(logits);
    let (l, g) = region_loss_impl(tape.value(logits), target, region, norm, want)?;
    Ok(tape.push(
        Tensor::scalar(l),
        vec![logits],
        RegionLossOp {
            grad: g.unwrap_or_default(),
        },
    ))
}

/// `L_p = com(S) + gamma * com(1-S)` for the `p` image and
/// `L_q = com(1-S) + gamma * com(S)` for the `q` image, summed.
///
/// In `p` the retained (S = 1) voxels come from a labeled image; in `q` the
/// pasted (S = 0) voxels do. `gamma` down-weights the pseudo-labeled part.
#[allow(clippy::too_many_arguments)]
pub fn prediction_loss_op(
    tape: &mut Tape,
    logits_p: Var,
    l_mix_p: &LabelMap,
    logits_q: Var,
    l_mix_q: &LabelMap,
    mask: &Mask,
    gamma: f64,
    norm: RegionNorm,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Validation(format!("gamma {gamma} outside [0, 1]")));
    }
    if l_mix_p.dims() != mask.dims() || l_mix_q.dims() != mask.dims() {
        return Err(Error::Shape("mixed labels and mask dims differ".into()));
    }
    let keep = mask.as_bools();
    let paste: Vec<bool> = keep.iter().map(|v| !v).collect();
    let p_lab = combined_region_loss_op(tape, logits_p, l_mix_p.data(), Some(&keep), norm)?;
    let p_pse = combined_region_loss_op(tape, logits_p, l_mix_p.data(), Some(&paste), norm)?;
    let q_lab = combined_region_loss_op(tape, logits_q, l_mix_q.data(), Some(&paste), norm)?;
    let q_pse = combined_region_loss_op(tape, logits_q, l_mix_q.data(), Some(&keep), norm)?;
    let p_pse = tape.scale(p_pse, gamma);
    let q_pse = tape.scale(q_pse, gamma);
    let lp = tape.add(p_lab, p_pse);
    let lq = tape.add(q_lab, q_pse);
    Ok(tape.add(lp, lq))
}

/// Value-only [`prediction_loss_op`].
pub fn prediction_loss(
    logits_p: &Tensor,
    l_mix_p: &LabelMap,
    logits_q: &Tensor,
    l_mix_q: &LabelMap,
    mask: &Mask,
    gamma: f64,
    norm: RegionNorm,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(logits_p.clone());
    let q = tape.constant(logits_q.clone());
    let l = prediction_loss_op(&mut tape, p, l_mix_p, q, l_mix_q, mask, gamma, norm)?;
    Ok(tape.value(l).item())
}
