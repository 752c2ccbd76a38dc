//! Loss terms: demographic margin loss, cross-entropy heads, contrastive and
//! reconstruction losses, the disentanglement aggregate and the bi-level CVaR
//! fairness loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{Dataset, PairBatch, SubgroupStats};
use crate::error::{Error, Result};
use crate::model::{FeatureVars, HeadId, Model};
use crate::numerics::{cvar_objective, margin_xent_forward, ParameterStore, Tape, Tensor, Var};

/// CVaR levels searched for `α` and `α′`.
pub const CVAR_LEVEL_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const BISECTION_STEPS: usize = 64;

/// Scalar hyperparameters of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the domain head CE in `L_cls`.
    pub rho1: f64,
    /// Weight of the demographic margin loss in `L_cls`.
    pub rho2: f64,
    /// Weight of `L_con` in `L_dis`.
    pub rho3: f64,
    /// Weight of `L_rec` in `L_dis`.
    pub rho4: f64,
    /// Contrastive margin `b`.
    pub margin: f64,
    /// Margin-loss constant `δ`.
    pub delta: f64,
    /// Outer (inter-subgroup) CVaR level `α`.
    pub alpha: f64,
    /// Inner (intra-subgroup) CVaR level `α′`.
    pub alpha_prime: f64,
    /// Fairness weight `λ`.
    pub lambda: f64,
    /// Perturbation radius `γ`.
    pub gamma: f64,
    /// Learning rate `β`.
    pub lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho1: 0.1,
            rho2: 0.1,
            rho3: 0.05,
            rho4: 0.3,
            margin: 3.0,
            delta: 2.89,
            alpha: 0.5,
            alpha_prime: 0.5,
            lambda: 1.0,
            gamma: 0.05,
            lr: 5e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let nonneg = [
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("rho3", self.rho3),
            ("rho4", self.rho4),
            ("b", self.margin),
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{name}: must be finite and >= 0"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("alpha_prime", self.alpha_prime)] {
            if !(v > 0.0 && v <= 1.0) {
                bad.push(format!("{name}: must lie in (0, 1]"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push(String::from("beta: must be finite and > 0"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

/// Per-subgroup margins `Δ^p = δ / n_p^{1/4}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginTable {
    margins: Vec<f64>,
}

impl MarginTable {
    /// All-zero margins over `k` subgroups; the margin loss is then plain CE.
    pub fn zeros(k: usize) -> Self {
        Self {
            margins: vec![0.0; k],
        }
    }

    pub fn from_values(margins: Vec<f64>) -> Self {
        Self { margins }
    }

    pub fn get(&self, p: usize) -> Option<f64> {
        self.margins.get(p).copied()
    }

    pub fn values(&self) -> &[f64] {
        &self.margins
    }

    pub fn len(&self) -> usize {
        self.margins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.margins.is_empty()
    }
}

pub fn compute_margins(stats: &SubgroupStats, delta: f64) -> Result<MarginTable> {
    let mut margins = Vec::with_capacity(stats.counts.len());
    for (p, &n) in stats.counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::invalid(format!(
                "subgroup {p} has no training samples"
            )));
        }
        margins.push(delta / libm::sqrt(libm::sqrt(n as f64)));
    }
    Ok(MarginTable { margins })
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logits"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(())
}

/// Softmax negative log-likelihood of `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits, label)?;
    Ok(margin_xent_forward(logits, label, 0.0).0)
}

/// Demographic distribution-aware margin loss
/// `−log(e^{z_p−Δ^p} / (e^{z_p−Δ^p} + Σ_{q≠p} e^{z_q}))`.
pub fn margin_loss(logits: &[f64], p: usize, margins: &MarginTable) -> Result<f64> {
    check_logits(logits, p)?;
    if logits.len() != margins.len() {
        return Err(Error::shape(
            "margin_loss",
            &[margins.len()],
            &[logits.len()],
        ));
    }
    Ok(margin_xent_forward(logits, p, margins.margins[p]).0)
}

/// `[b + ‖anchor − pos‖₂ − ‖anchor − neg‖₂]_+` on the tape.
pub fn contrastive(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, b: f64) -> Result<Var> {
    let dp = tape.sub(anchor, pos)?;
    let dn = tape.sub(anchor, neg)?;
    let np = tape.l2_norm(dp)?;
    let nn = tape.l2_norm(dn)?;
    let gap = tape.sub(np, nn)?;
    let gap = tape.shift(gap, b)?;
    tape.hinge(gap)
}

/// `‖x − self_rec‖₁ + ‖x − cross_rec‖₁` on the tape.
pub fn reconstruction(tape: &mut Tape, x: Var, self_rec: Var, cross_rec: Var) -> Result<Var> {
    let a = tape.sub(x, self_rec)?;
    let b = tape.sub(x, cross_rec)?;
    let a = tape.l1_norm(a)?;
    let b = tape.l1_norm(b)?;
    tape.add(a, b)
}

pub fn contrastive_loss(anchor: &Tensor, pos: &Tensor, neg: &Tensor, b: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, p, n) = (
        tape.constant(anchor.clone())?,
        tape.constant(pos.clone())?,
        tape.constant(neg.clone())?,
    );
    let out = contrastive(&mut tape, a, p, n, b)?;
    Ok(tape.scalar(out))
}

pub fn reconstruction_loss(x: &Tensor, self_rec: &Tensor, cross_rec: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, s, c) = (
        tape.constant(x.clone())?,
        tape.constant(self_rec.clone())?,
        tape.constant(cross_rec.clone())?,
    );
    let out = reconstruction(&mut tape, a, s, c)?;
    Ok(tape.scalar(out))
}

/// Labels of one image for the classification heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labels {
    pub y: usize,
    pub a: usize,
    pub d: usize,
}

/// `C(h̃(f_g), Y) + ρ1·C(h̄(f_a), A) + ρ2·M(ĥ(d), D)`. Zero-weighted terms are
/// not built.
#[allow(clippy::too_many_arguments)]
pub fn classification(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    feats: &FeatureVars,
    labels: Labels,
    margins: &MarginTable,
    rho1: f64,
    rho2: f64,
) -> Result<Var> {
    let z = model.head(tape, store, HeadId::Agnostic, feats.f_g)?;
    let mut total = tape.cross_entropy(z, labels.y)?;
    if rho1 != 0.0 {
        let z = model.head(tape, store, HeadId::Specific, feats.f_a)?;
        let ce = tape.cross_entropy(z, labels.a)?;
        let ce = tape.scale(ce, rho1)?;
        total = tape.add(total, ce)?;
    }
    if rho2 != 0.0 {
        let margin = margins
            .get(labels.d)
            .ok_or_else(|| Error::invalid(format!("subgroup {} has no margin", labels.d)))?;
        let z = model.head(tape, store, HeadId::Demographic, feats.d)?;
        let m = tape.margin_cross_entropy(z, labels.d, margin)?;
        let m = tape.scale(m, rho2)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// Value-level `L_cls` for one image.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss(
    model: &Model,
    store: &ParameterStore,
    x: &Tensor,
    labels: Labels,
    margins: &MarginTable,
    rho1: f64,
    rho2: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let feats = model.encode(&mut tape, store, xv)?;
    let out = classification(&mut tape, model, store, &feats, labels, margins, rho1, rho2)?;
    Ok(tape.scalar(out))
}

/// One encoded image of a batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    pub index: usize,
    pub x: Var,
    pub features: FeatureVars,
}

/// A batch member: an image together with its opposite-label pair partner.
#[derive(Clone, Copy, Debug)]
pub struct Member {
    pub slot: usize,
    pub partner_slot: usize,
}

/// Distinct images of a pair batch encoded once, plus the member list.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub images: Vec<EncodedImage>,
    pub members: Vec<Member>,
}

pub fn encode_batch(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    batch: &PairBatch,
) -> Result<EncodedBatch> {
    if batch.pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut images: Vec<EncodedImage> = Vec::new();
    let mut slot_of = |tape: &mut Tape, idx: usize| -> Result<usize> {
        if let Some(s) = images.iter().position(|e| e.index == idx) {
            return Ok(s);
        }
        let x = tape.constant(dataset.sample(idx).x.clone())?;
        let features = model.encode(tape, store, x)?;
        images.push(EncodedImage {
            index: idx,
            x,
            features,
        });
        Ok(images.len() - 1)
    };
    let mut members = Vec::with_capacity(2 * batch.pairs.len());
    for (i, p) in batch.members() {
        let slot = slot_of(tape, i)?;
        let partner_slot = slot_of(tape, p)?;
        members.push(Member { slot, partner_slot });
    }
    Ok(EncodedBatch { images, members })
}

/// First member after `k` (cyclically) whose source matches (`same`) or
/// differs from member `k`'s, skipping copies of the same image.
fn pick(
    batch: &EncodedBatch,
    k: usize,
    same: bool,
    source: &dyn Fn(usize) -> usize,
) -> Option<usize> {
    let n = batch.members.len();
    let own = batch.members[k].slot;
    (1..n)
        .map(|o| (k + o) % n)
        .map(|j| batch.members[j].slot)
        .find(|&s| s != own && (source(s) == source(own)) == same)
}

/// Per-member `L_cls + ρ3·L_con + ρ4·L_rec`, averaged over members.
///
/// The contrastive term runs twice per member: on `f_a` with the forgery
/// domain as source and on `f_g` with real/fake as source. Positive and
/// negative partners are the next members in batch order with the same and a
/// different source; a term is dropped when no such partner exists.
pub fn disentanglement(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    batch: &EncodedBatch,
    margins: &MarginTable,
    cfg: &LossConfig,
) -> Result<Var> {
    let labels = |slot: usize| {
        let s = dataset.sample(batch.images[slot].index);
        Labels {
            y: s.y as usize,
            a: s.a,
            d: s.d,
        }
    };
    let mut self_rec: Vec<Option<Var>> = vec![None; batch.images.len()];
    let mut combined: Vec<Option<Var>> = vec![None; batch.images.len()];
    let mut terms = Vec::with_capacity(batch.members.len());
    for (k, m) in batch.members.iter().enumerate() {
        let img = batch.images[m.slot];
        let f = img.features;
        let mut term = classification(
            tape,
            model,
            store,
            &f,
            labels(m.slot),
            margins,
            cfg.rho1,
            cfg.rho2,
        )?;
        if cfg.rho3 != 0.0 {
            let mut parts = Vec::new();
            let by_domain = |s: usize| labels(s).a;
            let by_label = |s: usize| labels(s).y;
            if let (Some(p), Some(n)) = (
                pick(batch, k, true, &by_domain),
                pick(batch, k, false, &by_domain),
            ) {
                let (fp, fn_) = (batch.images[p].features.f_a, batch.images[n].features.f_a);
                parts.push(contrastive(tape, f.f_a, fp, fn_, cfg.margin)?);
            }
            if let (Some(p), Some(n)) = (
                pick(batch, k, true, &by_label),
                pick(batch, k, false, &by_label),
            ) {
                let (fp, fn_) = (batch.images[p].features.f_g, batch.images[n].features.f_g);
                parts.push(contrastive(tape, f.f_g, fp, fn_, cfg.margin)?);
            }
            if !parts.is_empty() {
                let con = tape.add_n(&parts)?;
                let con = tape.scale(con, cfg.rho3)?;
                term = tape.add(term, con)?;
            }
        }
        if cfg.rho4 != 0.0 {
            for slot in [m.slot, m.partner_slot] {
                if combined[slot].is_none() {
                    let fe = batch.images[slot].features;
                    combined[slot] = Some(model.combine_forgery(tape, fe.f_a, fe.f_g)?);
                }
            }
            let own_f = combined[m.slot].expect("filled above");
            let partner_f = combined[m.partner_slot].expect("filled above");
            let rec_self = match self_rec[m.slot] {
                Some(v) => v,
                None => {
                    let v = model.decode(tape, store, f.c, own_f, f.d)?;
                    self_rec[m.slot] = Some(v);
                    v
                }
            };
            let rec_cross = model.decode(tape, store, f.c, partner_f, f.d)?;
            let rec = reconstruction(tape, img.x, rec_self, rec_cross)?;
            let rec = tape.scale(rec, cfg.rho4)?;
            term = tape.add(term, rec)?;
        }
        terms.push(term);
    }
    tape.mean_n(&terms)
}

/// Value-level `L_dis` of one pair batch.
pub fn disentanglement_loss(
    dataset: &Dataset,
    batch: &PairBatch,
    model: &Model,
    store: &ParameterStore,
    margins: &MarginTable,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = encode_batch(&mut tape, model, store, dataset, batch)?;
    let out = disentanglement(&mut tape, model, store, dataset, &enc, margins, cfg)?;
    Ok(tape.scalar(out))
}

/// Minimizer and minimum of `η + Σ[ℓ_i − η]_+ / (α m)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvarSolution {
    pub value: f64,
    pub eta: f64,
}

/// Solves the CVaR variational problem by bisection on the sign of the
/// subgradient `1 − |{ℓ_i > η}| / (α m)` over `[min ℓ, max ℓ]`, then snaps to
/// the neighbouring breakpoints and keeps the one with the smaller objective
/// (the lower one on ties).
///
/// `α·m < 1` degenerates to the worst case `max ℓ`.
pub fn cvar_inner(losses: &[f64], alpha: f64) -> Result<CvarSolution> {
    if losses.is_empty() {
        return Err(Error::invalid("CVaR of an empty loss list"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("CVaR level must lie in (0, 1]"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite { op: "cvar" });
    }
    let m = losses.len() as f64;
    let lo0 = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi0 = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if alpha * m < 1.0 {
        return Ok(CvarSolution {
            value: hi0,
            eta: hi0,
        });
    }
    let nonneg_slope = |eta: f64| {
        let above = losses.iter().filter(|&&l| l > eta).count() as f64;
        alpha * m >= above
    };
    let eta = if nonneg_slope(lo0) {
        lo0
    } else {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..BISECTION_STEPS {
            let mid = lo + (hi - lo) / 2.0;
            if nonneg_slope(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let below = losses
            .iter()
            .copied()
            .filter(|&l| l <= hi)
            .fold(f64::NEG_INFINITY, f64::max);
        let above = losses
            .iter()
            .copied()
            .filter(|&l| l >= hi)
            .fold(f64::INFINITY, f64::min);
        match (below.is_finite(), above.is_finite()) {
            (true, true) => {
                if cvar_objective(losses, above, alpha) < cvar_objective(losses, below, alpha) {
                    above
                } else {
                    below
                }
            }
            (true, false) => below,
            _ => above,
        }
    };
    Ok(CvarSolution {
        value: cvar_objective(losses, eta, alpha),
        eta,
    })
}

/// Exact CVaR by evaluating the objective at every breakpoint `η ∈ {ℓ_i}`.
pub fn cvar_oracle(losses: &[f64], alpha: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::invalid("CVaR of an empty loss list"));
    }
    let m = losses.len() as f64;
    let mut best = f64::INFINITY;
    for &eta in losses {
        let mut tail = 0.0;
        for &l in losses {
            if l > eta {
                tail += l - eta;
            }
        }
        best = best.min(eta + tail / (alpha * m));
    }
    Ok(best)
}

/// Inner solution for one subgroup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubgroupCvar {
    pub eta: f64,
    pub value: f64,
}

/// Bi-level fairness loss at its optimal thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct FairnessSolution {
    pub value: f64,
    pub eta: f64,
    /// Indexed by subgroup id; `None` for subgroups absent from the input.
    pub subgroups: Vec<Option<SubgroupCvar>>,
}

impl FairnessSolution {
    pub fn present(&self) -> usize {
        self.subgroups.iter().flatten().count()
    }
}

/// Outer CVaR (level `α`) over the inner CVaRs (level `α′`) of each present
/// subgroup. `per_subgroup[j]` holds the per-sample losses of subgroup `j`;
/// empty subgroups are skipped and `|J|` counts present ones only.
pub fn fairness_loss(
    per_subgroup: &[Vec<f64>],
    alpha: f64,
    alpha_prime: f64,
) -> Result<FairnessSolution> {
    let mut subgroups = Vec::with_capacity(per_subgroup.len());
    let mut values = Vec::new();
    for losses in per_subgroup {
        if losses.is_empty() {
            subgroups.push(None);
            continue;
        }
        let s = cvar_inner(losses, alpha_prime)?;
        values.push(s.value);
        subgroups.push(Some(SubgroupCvar {
            eta: s.eta,
            value: s.value,
        }));
    }
    if values.is_empty() {
        return Err(Error::invalid("fairness loss needs at least one sample"));
    }
    let outer = cvar_inner(&values, alpha)?;
    Ok(FairnessSolution {
        value: outer.value,
        eta: outer.eta,
        subgroups,
    })
}

/// `L_fair` on the tape with the thresholds of `solution` held fixed.
/// `per_subgroup[j]` lists the scalar loss nodes of subgroup `j`.
pub fn fairness_term(
    tape: &mut Tape,
    per_subgroup: &[Vec<Var>],
    solution: &FairnessSolution,
    alpha: f64,
    alpha_prime: f64,
) -> Result<Var> {
    let mut inner = Vec::new();
    for (nodes, sol) in per_subgroup.iter().zip(&solution.subgroups) {
        match (nodes.is_empty(), sol) {
            (true, None) => {}
            (false, Some(s)) => inner.push(tape.cvar_at(nodes, s.eta, alpha_prime)?),
            _ => return Err(Error::invalid("fairness solution does not match the batch")),
        }
    }
    tape.cvar_at(&inner, solution.eta, alpha)
}
