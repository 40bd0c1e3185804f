//! Training objectives: cross entropy, token-level unlikelihood (UL-T),
//! contrastive similarity (CL), contrastive token (CT), and contrastive token
//! with similarity decay (CTSD).
//!
//! CT penalizes, at each step t, the logit gap between every negative token
//! from the recent window and the gold token:
//! `log(1 + sum exp(h_t.W_neg - h_t.W_gold))`. CTSD weights each summand by
//! two attenuation factors: a distance decay `alpha_d = exp((t_minus - t)/T)`
//! and the cosine similarity `alpha_s` between the source-attention
//! distributions at the negative's position and at t. Negatives come from the
//! gold (teacher-forced) prefix by default; occurrences of the current gold
//! token are excluded, and duplicate tokens in the window stay separate
//! occurrences with their own factors.
//!
//! Gradients flow through `alpha_s` (attention is part of the graph) unless
//! the stop-gradient ablation is selected; `alpha_d` is a constant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ForwardTrace;
use crate::tensor::{GradTensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("all positions are padded")]
    AllPadded,
    #[error("alpha_d: t_minus {t_minus} must precede t {t}")]
    BadDecayPositions { t_minus: usize, t: usize },
    #[error("alpha_s: length mismatch {0} vs {1}")]
    AttenLengthMismatch(usize, usize),
    #[error("trace is missing attention rows for position {0}")]
    MissingAttention(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "UL_T")]
    UlT,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "CTSD")]
    Ctsd,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::UlT => "UL-T",
            LossKind::Cl => "CL",
            LossKind::Ct => "CT",
            LossKind::Ctsd => "CTSD",
        }
    }

    /// Presentation order used by comparison tables.
    pub const TABLE_ORDER: [LossKind; 5] =
        [LossKind::Ce, LossKind::UlT, LossKind::Cl, LossKind::Ct, LossKind::Ctsd];
}

/// How the similarity attenuation factor participates in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Differentiable (the default: the model can learn to decorrelate
    /// attention).
    #[default]
    Live,
    /// Use the current value as a constant (stop-gradient ablation).
    StopGrad,
    /// Neutralize the factor entirely (weight 1).
    ForceOne,
}

/// Which pairing the CL similarity penalty uses: the mirrored index `(i, t-i)`
/// or the current token `(i, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClPairing {
    #[default]
    Mirrored,
    Current,
}

/// Where negative occurrences come from: the gold teacher-forced prefix or
/// the model's own argmax predictions over the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    #[default]
    GoldPrefix,
    ModelPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Window size N: how many previous tokens supply negatives.
    #[serde(rename = "N")]
    pub n_window: usize,
    /// Decay temperature T for alpha_d.
    #[serde(rename = "T")]
    pub temperature: f64,
    /// Auxiliary weight W in `total = CE + W * aux`.
    #[serde(rename = "W")]
    pub weight: f64,
    /// CL margin rho in [-1, 1].
    pub rho: f64,
    pub alpha_s: AlphaMode,
    pub alpha_d: AlphaMode,
    pub cl_pairing: ClPairing,
    pub negatives: NegativeSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            n_window: 10,
            temperature: 5.0,
            weight: 1.0,
            rho: 0.5,
            alpha_s: AlphaMode::Live,
            alpha_d: AlphaMode::Live,
            cl_pairing: ClPairing::Mirrored,
            negatives: NegativeSource::GoldPrefix,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(ObjectiveError::InvalidConfig(format!(
                "T must be positive, got {}",
                self.temperature
            )));
        }
        if self.n_window == 0 {
            return Err(ObjectiveError::InvalidConfig("N must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "rho must lie in [-1, 1], got {}",
                self.rho
            )));
        }
        if self.weight < 0.0 {
            return Err(ObjectiveError::InvalidConfig(format!(
                "W must be non-negative, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

// ── Negative sets ────────────────────────────────────────────────────

/// One negative occurrence: a token seen in the recent window, the (1-based)
/// position it occupied, and the attention distribution recorded there.
#[derive(Debug, Clone)]
pub struct NegativeOccurrence {
    pub token_id: usize,
    pub t_minus: usize,
    pub atten_minus: Vec<f64>,
}

/// Occurrences of tokens at positions `max(1, t-N) ..= t-1` of the prefix,
/// excluding occurrences equal to the current gold token `y_t`. Positions are
/// 1-based; duplicates in the window remain separate entries.
pub fn build_negative_set(
    gold_prefix: &[usize],
    t: usize,
    y_t: usize,
    n_window: usize,
    trace: &ForwardTrace,
) -> Vec<NegativeOccurrence> {
    assert!(
        t >= 1 && t <= gold_prefix.len() + 1,
        "build_negative_set: t={t} out of range for prefix of {}",
        gold_prefix.len()
    );
    let lo = t.saturating_sub(n_window).max(1);
    let mut out = Vec::new();
    for pos in lo..t {
        let token = gold_prefix[pos - 1];
        if token == y_t {
            continue;
        }
        out.push(NegativeOccurrence {
            token_id: token,
            t_minus: pos,
            atten_minus: trace.atten[pos - 1].values(),
        });
    }
    out
}

// ── Attenuation factors ──────────────────────────────────────────────

/// Distance decay `exp((t_minus - t) / T)`, strictly inside (0, 1).
pub fn alpha_d(t_minus: usize, t: usize, temperature: f64) -> Result<f64> {
    if t_minus >= t {
        return Err(ObjectiveError::BadDecayPositions { t_minus, t });
    }
    if temperature <= 0.0 {
        return Err(ObjectiveError::InvalidConfig(format!(
            "T must be positive, got {temperature}"
        )));
    }
    Ok(((t_minus as f64 - t as f64) / temperature).exp())
}

/// Cosine similarity of two attention distributions. Non-negative inputs keep
/// the result inside [0, 1]; a zero vector yields 0.
pub fn alpha_s(atten_minus: &[f64], atten_t: &[f64]) -> Result<f64> {
    if atten_minus.len() != atten_t.len() {
        return Err(ObjectiveError::AttenLengthMismatch(
            atten_minus.len(),
            atten_t.len(),
        ));
    }
    Ok(crate::tensor::cosine_raw(atten_minus, atten_t).clamp(0.0, 1.0))
}

// ── Losses ───────────────────────────────────────────────────────────

fn non_pad_positions(len: usize, pad_mask: &[bool]) -> Result<Vec<usize>> {
    assert_eq!(pad_mask.len(), len, "pad mask length mismatch");
    let positions: Vec<usize> = (0..len).filter(|&t| !pad_mask[t]).collect();
    if positions.is_empty() {
        return Err(ObjectiveError::AllPadded);
    }
    Ok(positions)
}

/// Mean over non-pad positions of `-log softmax(logits_t)[tgt_t]`, computed
/// in log-sum-exp form.
pub fn ce_loss(trace: &ForwardTrace, tgt: &[usize], pad_mask: &[bool]) -> Result<GradTensor> {
    let t_len = trace.target_len();
    assert_eq!(tgt.len(), t_len, "target length mismatch");
    let positions = non_pad_positions(t_len, pad_mask)?;

    let logits = &trace.logits;
    let values = logits.values();
    let vocab = logits.shape()[1];
    // Row max as a constant: log-sum-exp is identical for any constant shift.
    let row_max: Vec<f64> = (0..t_len)
        .map(|t| values[t * vocab..(t + 1) * vocab].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift_flat: Vec<f64> = (0..t_len * vocab).map(|i| row_max[i / vocab]).collect();
    let shift = trace.tape.constant(shift_flat, vec![t_len, vocab])?;
    let lse = logits
        .sub(&shift)?
        .exp()
        .sum_rows()?
        .ln()?
        .add(&trace.tape.constant(row_max, vec![t_len])?)?;
    let picked = logits.gather_per_row(tgt)?;
    let per_pos = lse.sub(&picked)?;

    let include: Vec<f64> = (0..t_len).map(|t| if pad_mask[t] { 0.0 } else { 1.0 }).collect();
    let mask = trace.tape.constant(include, vec![t_len])?;
    Ok(per_pos
        .mul(&mask)?
        .sum()
        .mul_scalar(1.0 / positions.len() as f64))
}

fn negatives_for(
    trace: &ForwardTrace,
    tgt: &[usize],
    t: usize,
    n_window: usize,
    source: NegativeSource,
) -> Vec<NegativeOccurrence> {
    match source {
        NegativeSource::GoldPrefix => build_negative_set(&tgt[..t - 1], t, tgt[t - 1], n_window, trace),
        NegativeSource::ModelPrefix => {
            let values = trace.logits.values();
            let vocab = trace.logits.shape()[1];
            let predicted: Vec<usize> = (0..t - 1)
                .map(|p| {
                    let row = &values[p * vocab..(p + 1) * vocab];
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect();
            build_negative_set(&predicted, t, tgt[t - 1], n_window, trace)
        }
    }
}

/// Token-level unlikelihood: mean over positions of
/// `-sum_{neg} log(1 - p(neg))`, with probabilities clamped below `1 - 1e-9`.
pub fn ul_t_loss(trace: &ForwardTrace, tgt: &[usize], n_window: usize) -> Result<GradTensor> {
    let t_len = trace.target_len();
    assert_eq!(tgt.len(), t_len, "target length mismatch");
    let probs = trace.logits.softmax_rows();
    let mut total: Option<GradTensor> = None;
    for t in 1..=t_len {
        for neg in negatives_for(trace, tgt, t, n_window, NegativeSource::GoldPrefix) {
            let p = probs.row(t - 1)?.pick(neg.token_id)?;
            let term = p.neg().add_scalar(1.0).clamp_min(1e-9).ln()?.neg();
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }
    Ok(match total {
        Some(acc) => acc.mul_scalar(1.0 / t_len as f64),
        None => trace.tape.scalar(0.0),
    })
}

/// Contrastive similarity penalty over hidden states. For each t >= 2,
/// `mean_i max(0, rho - s(h_i, h_i) + s(h_i, h_partner))` with cosine
/// similarity; since s(h, h) = 1 this is a hinge on `rho - 1 + s`.
pub fn cl_loss(trace: &ForwardTrace, tgt: &[usize], rho: f64) -> Result<GradTensor> {
    cl_loss_with(trace, tgt, rho, ClPairing::Mirrored)
}

pub fn cl_loss_with(
    trace: &ForwardTrace,
    tgt: &[usize],
    rho: f64,
    pairing: ClPairing,
) -> Result<GradTensor> {
    let t_len = trace.target_len();
    assert_eq!(tgt.len(), t_len, "target length mismatch");
    if !(-1.0..=1.0).contains(&rho) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "rho must lie in [-1, 1], got {rho}"
        )));
    }
    if t_len < 2 {
        return Ok(trace.tape.scalar(0.0));
    }
    let mut total: Option<GradTensor> = None;
    for t in 2..=t_len {
        let mut pos_sum: Option<GradTensor> = None;
        for i in 1..t {
            let partner = match pairing {
                ClPairing::Mirrored => t - i,
                ClPairing::Current => t,
            };
            let hi = trace.hidden.row(i - 1)?;
            let hp = trace.hidden.row(partner - 1)?;
            let sim = hi.cosine_sim(&hp)?;
            let hinge = sim.add_scalar(rho - 1.0).clamp_min(0.0);
            pos_sum = Some(match pos_sum {
                Some(acc) => acc.add(&hinge)?,
                None => hinge,
            });
        }
        let pos_mean = pos_sum.expect("t >= 2 has at least one pair").mul_scalar(1.0 / (t - 1) as f64);
        total = Some(match total {
            Some(acc) => acc.add(&pos_mean)?,
            None => pos_mean,
        });
    }
    Ok(total.expect("t_len >= 2").mul_scalar(1.0 / (t_len - 1) as f64))
}

/// Per-occurrence weights applied inside the contrastive log-sum.
enum OccurrenceWeight {
    One,
    Const(f64),
    Tensor(GradTensor),
}

/// Shared core of CT and CTSD: mean over positions of
/// `log(1 + sum_i w_i exp(d_i))` with `d_i = logit(neg_i) - logit(gold)`,
/// stabilized as `M + log(exp(-M) + sum_i w_i exp(d_i - M))` for constant
/// `M = max(0, max_i d_i)`.
fn contrastive_core<W>(
    trace: &ForwardTrace,
    tgt: &[usize],
    n_window: usize,
    source: NegativeSource,
    mut weight_of: W,
) -> Result<GradTensor>
where
    W: FnMut(&ForwardTrace, &NegativeOccurrence, usize) -> Result<OccurrenceWeight>,
{
    let t_len = trace.target_len();
    assert_eq!(tgt.len(), t_len, "target length mismatch");
    let mut total: Option<GradTensor> = None;
    for t in 1..=t_len {
        let negs = negatives_for(trace, tgt, t, n_window, source);
        if negs.is_empty() {
            continue;
        }
        let row = trace.logits.row(t - 1)?;
        let gold = row.pick(tgt[t - 1])?;
        let mut diffs = Vec::with_capacity(negs.len());
        for neg in &negs {
            diffs.push(row.pick(neg.token_id)?.sub(&gold)?);
        }
        let m = diffs
            .iter()
            .map(|d| d.scalar_value())
            .fold(0.0f64, f64::max);
        let mut sum: Option<GradTensor> = None;
        for (d, neg) in diffs.iter().zip(&negs) {
            let e = d.add_scalar(-m).exp();
            let term = match weight_of(trace, neg, t)? {
                OccurrenceWeight::One => e,
                OccurrenceWeight::Const(w) => e.mul_scalar(w),
                OccurrenceWeight::Tensor(w) => e.mul(&w)?,
            };
            sum = Some(match sum {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let pos_loss = sum
            .expect("non-empty negative set")
            .add_scalar((-m).exp())
            .ln()?
            .add_scalar(m);
        total = Some(match total {
            Some(acc) => acc.add(&pos_loss)?,
            None => pos_loss,
        });
    }
    Ok(match total {
        Some(acc) => acc.mul_scalar(1.0 / t_len as f64),
        None => trace.tape.scalar(0.0),
    })
}

/// Contrastive token loss: every negative in the window contributes
/// `exp(logit_neg - logit_gold)` with unit weight.
pub fn ct_loss(trace: &ForwardTrace, tgt: &[usize], n_window: usize) -> Result<GradTensor> {
    contrastive_core(trace, tgt, n_window, NegativeSource::GoldPrefix, |_, _, _| {
        Ok(OccurrenceWeight::One)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CtsdOptions {
    pub alpha_s: AlphaMode,
    pub alpha_d: AlphaMode,
    pub negatives: NegativeSource,
}

impl Default for CtsdOptions {
    fn default() -> Self {
        CtsdOptions {
            alpha_s: AlphaMode::Live,
            alpha_d: AlphaMode::Live,
            negatives: NegativeSource::GoldPrefix,
        }
    }
}

/// CT with each summand attenuated by `alpha_d(t_minus, t, T)` and
/// `alpha_s(atten_{t_minus}, atten_t)`.
pub fn ctsd_loss(
    trace: &ForwardTrace,
    tgt: &[usize],
    n_window: usize,
    temperature: f64,
) -> Result<GradTensor> {
    ctsd_loss_with(trace, tgt, n_window, temperature, CtsdOptions::default())
}

pub fn ctsd_loss_with(
    trace: &ForwardTrace,
    tgt: &[usize],
    n_window: usize,
    temperature: f64,
    opts: CtsdOptions,
) -> Result<GradTensor> {
    if trace.atten.len() < trace.target_len() {
        return Err(ObjectiveError::MissingAttention(trace.atten.len()));
    }
    contrastive_core(trace, tgt, n_window, opts.negatives, |trace, neg, t| {
        let a_d = match opts.alpha_d {
            AlphaMode::ForceOne => 1.0,
            _ => alpha_d(neg.t_minus, t, temperature)?,
        };
        match opts.alpha_s {
            AlphaMode::ForceOne => Ok(OccurrenceWeight::Const(a_d)),
            AlphaMode::StopGrad => {
                let a_s = alpha_s(&neg.atten_minus, &trace.atten[t - 1].values())?;
                Ok(OccurrenceWeight::Const(a_d * a_s))
            }
            AlphaMode::Live => {
                let sim = trace.atten[neg.t_minus - 1].cosine_sim(&trace.atten[t - 1])?;
                Ok(OccurrenceWeight::Tensor(sim.mul_scalar(a_d)))
            }
        }
    })
}

/// Loss value plus its logged components.
pub struct LossBreakdown {
    pub total: GradTensor,
    pub ce_value: f64,
    pub aux_value: f64,
}

/// `CE` alone for the CE kind, otherwise `CE + W * aux`. `W = 0` degrades to
/// pure CE exactly (the auxiliary term is still evaluated for logging).
pub fn total_loss(
    trace: &ForwardTrace,
    tgt: &[usize],
    pad_mask: &[bool],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let ce = ce_loss(trace, tgt, pad_mask)?;
    let ce_value = ce.scalar_value();
    let aux = match cfg.kind {
        LossKind::Ce => None,
        LossKind::UlT => Some(ul_t_loss(trace, tgt, cfg.n_window)?),
        LossKind::Cl => Some(cl_loss_with(trace, tgt, cfg.rho, cfg.cl_pairing)?),
        LossKind::Ct => Some(ct_loss(trace, tgt, cfg.n_window)?),
        LossKind::Ctsd => Some(ctsd_loss_with(
            trace,
            tgt,
            cfg.n_window,
            cfg.temperature,
            CtsdOptions {
                alpha_s: cfg.alpha_s,
                alpha_d: cfg.alpha_d,
                negatives: cfg.negatives,
            },
        )?),
    };
    match aux {
        None => Ok(LossBreakdown { total: ce, ce_value, aux_value: 0.0 }),
        Some(aux) => {
            let aux_value = aux.scalar_value();
            let total = if cfg.weight == 0.0 {
                ce
            } else {
                ce.add(&aux.mul_scalar(cfg.weight))?
            };
            Ok(LossBreakdown { total, ce_value, aux_value })
        }
    }
}
