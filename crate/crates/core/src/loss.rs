//! Composite multi-task objective.
//!
//! Per class: `centroid (jaccard + dice + focal) + seg (bce + dice) +
//! 0.5 · contour (bce + dice)`; across classes a fixed-equal or
//! uncertainty-weighted sum plus the inter-class exclusion term. All losses
//! reduce over every element of their inputs, so a `(B, H, W)` map is treated
//! as `N = B·H·W` pixels.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class-loss weighting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    FixedEqual,
    /// `Σ exp(-s_k)·L_k + s_k` with learnable log-variances `s_k`.
    Uncertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weighting: Weighting,
    /// Dice/Jaccard smoothing.
    pub eps: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub contour_weight: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before logs.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::FixedEqual,
            eps: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            contour_weight: 0.5,
            clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be nonnegative".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::InvalidConfig("clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn same_shape(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            p.dims(),
            g.dims()
        )));
    }
    Ok(())
}

fn one_minus(t: &Tensor) -> Result<Tensor> {
    Ok(t.affine(-1.0, 1.0)?)
}

fn pow(t: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok(if gamma == 0.0 {
        t.ones_like()?
    } else if gamma == 1.0 {
        t.clone()
    } else if gamma == 2.0 {
        t.sqr()?
    } else {
        t.powf(gamma)?
    })
}

/// Mean binary cross-entropy.
pub fn bce(p: &Tensor, g: &Tensor, clamp: f64) -> Result<Tensor> {
    same_shape(p, g)?;
    let pc = p.clamp(clamp, 1.0 - clamp)?;
    let pos = (g * pc.log()?)?;
    let neg = (one_minus(g)? * one_minus(&pc)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(p: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape(p, g)?;
    let inter = (p * g)?.sum_all()?;
    let num = inter.affine(2.0, eps)?;
    let den = (p.sum_all()? + g.sum_all()?)?.affine(1.0, eps)?;
    one_minus(&(num / den)?)
}

/// Soft Jaccard: `1 − (Σpg + ε) / (Σp² + Σg² − Σpg + ε)`.
pub fn jaccard_loss(p: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape(p, g)?;
    let inter = (p * g)?.sum_all()?;
    let num = inter.affine(1.0, eps)?;
    let den = ((p.sqr()?.sum_all()? + g.sqr()?.sum_all()?)? - inter)?.affine(1.0, eps)?;
    one_minus(&(num / den)?)
}

/// Mean two-term focal loss.
pub fn focal_loss(p: &Tensor, g: &Tensor, alpha: f64, gamma: f64, clamp: f64) -> Result<Tensor> {
    same_shape(p, g)?;
    let pc = p.clamp(clamp, 1.0 - clamp)?;
    let q = one_minus(&pc)?;
    let pos = ((g * pow(&q, gamma)?)? * pc.log()?)?.affine(alpha, 0.0)?;
    let neg = ((one_minus(g)? * pow(&pc, gamma)?)? * q.log()?)?.affine(1.0 - alpha, 0.0)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Jaccard + Dice + Focal on a centroid map.
pub fn centroid_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let j = jaccard_loss(p, g, cfg.eps)?;
    let d = dice_loss(p, g, cfg.eps)?;
    let f = focal_loss(p, g, cfg.alpha, cfg.gamma, cfg.clamp)?;
    Ok(((j + d)? + f)?)
}

/// BCE + Dice, used for both the segmentation and the contour task.
pub fn bce_dice(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok((bce(p, g, cfg.clamp)? + dice_loss(p, g, cfg.eps)?)?)
}

/// Maps (or targets) of one class; `seg`/`contour` are absent in
/// detection-only mode.
#[derive(Debug, Clone, Copy)]
pub struct ClassTensors<'a> {
    pub centroid: &'a Tensor,
    pub seg: Option<&'a Tensor>,
    pub contour: Option<&'a Tensor>,
}

/// One class's loss and its parts.
#[derive(Debug, Clone)]
pub struct ClassLoss {
    pub centroid: Tensor,
    pub seg: Option<Tensor>,
    pub contour: Option<Tensor>,
    pub total: Tensor,
}

/// Per-class loss. With `detection_only` the seg/contour maps are ignored.
pub fn class_loss(
    pred: ClassTensors<'_>,
    target: ClassTensors<'_>,
    cfg: &LossConfig,
    detection_only: bool,
) -> Result<ClassLoss> {
    let centroid = centroid_loss(pred.centroid, target.centroid, cfg)?;
    if detection_only {
        return Ok(ClassLoss {
            total: centroid.clone(),
            centroid,
            seg: None,
            contour: None,
        });
    }
    let missing = |what: &str| Error::MissingTargets(format!("{what} map required outside detection-only mode"));
    let seg = bce_dice(
        pred.seg.ok_or_else(|| missing("predicted seg"))?,
        target.seg.ok_or_else(|| missing("target seg"))?,
        cfg,
    )?;
    let contour = bce_dice(
        pred.contour.ok_or_else(|| missing("predicted contour"))?,
        target.contour.ok_or_else(|| missing("target contour"))?,
        cfg,
    )?;
    let total = ((&centroid + &seg)? + contour.affine(cfg.contour_weight, 0.0)?)?;
    Ok(ClassLoss {
        centroid,
        seg: Some(seg),
        contour: Some(contour),
        total,
    })
}

/// `(1/N) Σ_i Π_k p_{k,i}`; zero (with a warning) for fewer than two maps.
pub fn interclass_exclusion(maps: &[Tensor]) -> Result<Tensor> {
    match maps {
        [] => Err(Error::InvalidInput("no maps for the exclusion term".into())),
        [only] => {
            log::warn!("inter-class exclusion needs at least two classes; using 0");
            Ok(Tensor::zeros((), only.dtype(), only.device())?)
        }
        [first, rest @ ..] => {
            let mut prod = first.clone();
            for m in rest {
                same_shape(first, m)?;
                prod = (prod * m)?;
            }
            Ok(prod.mean_all()?)
        }
    }
}

/// Scalar values of every loss component, for logging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub centroid: Vec<f64>,
    pub seg: Vec<Option<f64>>,
    pub contour: Vec<Option<f64>>,
    pub class_total: Vec<f64>,
    pub interclass: f64,
    pub total: f64,
}

/// Total objective and its breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor, component: &str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

/// Combines class losses with the exclusion term.
///
/// `log_vars` (shape `[C]`) is required for [`Weighting::Uncertainty`] and
/// ignored otherwise.
pub fn total_loss(
    class_losses: &[ClassLoss],
    interclass: &Tensor,
    weighting: Weighting,
    log_vars: Option<&Tensor>,
) -> Result<TotalLoss> {
    if class_losses.is_empty() {
        return Err(Error::InvalidInput("no class losses".into()));
    }
    let mut breakdown = LossBreakdown {
        centroid: Vec::new(),
        seg: Vec::new(),
        contour: Vec::new(),
        class_total: Vec::new(),
        interclass: scalar(interclass, "interclass")?,
        total: 0.0,
    };
    for (k, l) in class_losses.iter().enumerate() {
        breakdown
            .centroid
            .push(scalar(&l.centroid, &format!("class {k} centroid"))?);
        breakdown.seg.push(
            l.seg
                .as_ref()
                .map(|t| scalar(t, &format!("class {k} seg")))
                .transpose()?,
        );
        breakdown.contour.push(
            l.contour
                .as_ref()
                .map(|t| scalar(t, &format!("class {k} contour")))
                .transpose()?,
        );
        breakdown
            .class_total
            .push(scalar(&l.total, &format!("class {k} total"))?);
    }

    let mut total = interclass.clone();
    match weighting {
        Weighting::FixedEqual => {
            for l in class_losses {
                total = (total + &l.total)?;
            }
        }
        Weighting::Uncertainty => {
            let s = log_vars
                .ok_or_else(|| Error::InvalidInput("uncertainty weighting needs log-variance parameters".into()))?;
            if s.dims() != [class_losses.len()] {
                return Err(Error::Shape(format!(
                    "log-variances {:?} for {} classes",
                    s.dims(),
                    class_losses.len()
                )));
            }
            for (k, l) in class_losses.iter().enumerate() {
                let sk = s.get(k)?;
                let weighted = (sk.neg()?.exp()? * &l.total)?;
                total = ((total + weighted)? + sk)?;
            }
        }
    }
    breakdown.total = scalar(&total, "total")?;
    Ok(TotalLoss { total, breakdown })
}
