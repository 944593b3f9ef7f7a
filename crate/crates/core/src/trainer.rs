//! Two-phase concept training and post-hoc filtering.
//!
//! Phase 1 fits concepts and decoder on reconstruction, regularization and
//! auto-encoding. From `causal_on_epoch` the decoder is frozen and the
//! causal term is added, so only the concept vectors keep moving.

use std::path::Path;

use hiconcept_tensor::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conceptnet::{init_concepts, ConceptModel};
use crate::losses::{self, LossParts, LossWeights, MaskSpec};
use crate::metrics::{agreement, evaluate_concepts, surrogate_predictions};
use crate::rng::{derived_rng, stream};
use crate::targets::{head_predictions, ActivationSet, Head};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Defaults to `epochs / 2`.
    pub causal_on_epoch: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Neighborhood size of the regularizer as a fraction of batch positions.
    pub neighborhood_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            causal_on_epoch: None,
            batch_size: 128,
            learning_rate: 3e-4,
            seed: 0,
            holdout_fraction: 0.1,
            neighborhood_fraction: 0.25,
        }
    }
}

impl TrainSchedule {
    pub fn causal_on(&self) -> usize {
        self.causal_on_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        let c = self.causal_on();
        if c == 0 || c > self.epochs {
            errs.push(format!("causal_on_epoch {c} must satisfy 0 < causal_on_epoch <= epochs ({})", self.epochs));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            errs.push(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if !(self.neighborhood_fraction > 0.0 && self.neighborhood_fraction <= 1.0) {
            errs.push(format!("neighborhood_fraction {} outside (0, 1]", self.neighborhood_fraction));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Everything needed to fit one concept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    /// Concept count including the context concept.
    pub n: usize,
    pub beta: Option<f64>,
    pub hidden: usize,
    pub weights: LossWeights,
    pub mask: MaskSpec,
    pub schedule: TrainSchedule,
    /// Keep the concept vectors fixed (used for baseline concept sets).
    pub freeze_concepts: bool,
    /// Include the reconstruction term (off only in the `no_rec` ablation).
    pub use_rec: bool,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            n: 10,
            beta: None,
            hidden: crate::conceptnet::DEFAULT_HIDDEN,
            weights: LossWeights::default(),
            mask: MaskSpec::default(),
            schedule: TrainSchedule::default(),
            freeze_concepts: false,
            use_rec: true,
        }
    }
}

impl ConceptConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n < 2 {
            errs.push(format!("n must be at least 2, got {}", self.n));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                errs.push(format!("beta {b} outside (0, 1)"));
            }
        }
        if self.hidden == 0 {
            errs.push("hidden must be positive".into());
        }
        for r in [self.weights.validate(), self.mask.validate(), self.schedule.validate()] {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_reg: f64,
    pub l_enc: f64,
    pub l_cau: f64,
    pub racc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConceptModel,
    pub history: Vec<HistoryRow>,
    pub warnings: Vec<String>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,l_rec,l_reg,l_enc,l_cau,racc\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.l_rec, r.l_reg, r.l_enc, r.l_cau, r.racc));
    }
    s
}

/// Split training positions into (optimized, held-out) by seed.
fn holdout_split(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut derived_rng(seed, stream::HOLDOUT));
    let k = if fraction > 0.0 && len >= 2 {
        ((len as f64 * fraction).round() as usize).clamp(1, len - 1)
    } else {
        0
    };
    let mut held = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Fresh concept model for `head` from `cfg` and the schedule seed.
pub fn init_model(head: &dyn Head, cfg: &ConceptConfig) -> Result<ConceptModel> {
    cfg.validate()?;
    let mut cs = init_concepts(cfg.n, head.width(), cfg.schedule.seed)?;
    if let Some(b) = cfg.beta {
        cs.beta = b;
    }
    ConceptModel::new(&cs, head.split(), cfg.hidden, cfg.schedule.seed)
}

/// Fit `model` to mimic `head` on the activation set `acts`.
pub fn train_concepts(mut model: ConceptModel, head: &dyn Head, acts: &ActivationSet, cfg: &ConceptConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if acts.is_empty() {
        return Err(Error::Invalid("no training activations".into()));
    }
    if head.width() != model.d() || head.split().granularity != model.split.granularity {
        return Err(Error::Invalid("concept model does not fit the head's split".into()));
    }
    let sch = &cfg.schedule;
    let w = cfg.weights;
    let original = head_predictions(head, acts, sch.batch_size);
    let (train, held) = holdout_split(acts.len(), sch.holdout_fraction, sch.seed);
    let held_acts = acts.select(&held);
    let held_orig = original.select_rows(&held);

    model.set_decoder_trainable(true);
    model.set_concepts_trainable(!cfg.freeze_concepts);
    let mut opt = Adam::new(AdamConfig {
        lr: sch.learning_rate,
        ..Default::default()
    });
    let mut mask_rng = derived_rng(sch.seed, stream::CONCEPT_MASK);
    let causal_on = sch.causal_on();
    let concepts_id = model.params.find("concepts").expect("concepts parameter");
    let mut history = Vec::with_capacity(sch.epochs);
    let mut warnings = Vec::new();
    let mut phase1_peak: f64 = 0.0;

    for epoch in 0..sch.epochs {
        let phase2 = epoch >= causal_on;
        if phase2 && epoch == causal_on {
            model.set_decoder_trainable(false);
        }
        let mut order = train.clone();
        order.shuffle(&mut derived_rng(sch.seed, stream::CONCEPT_SHUFFLE * 1000 + epoch as u64));
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for chunk in order.chunks(sch.batch_size) {
            let ab = acts.batch(chunk);
            let orig = original.select_rows(chunk);
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let a = g.constant(ab.values.clone());
            let keep = model.decode_keep(&[]);
            let v = model.forward_vars(&mut g, &bound, head, a, ab.mask.as_ref(), &keep);
            let rec = losses::loss_rec_var(&mut g, v.out, &orig);
            let top_n = losses::neighborhood_size(&ab, sch.neighborhood_fraction);
            let reg = losses::loss_reg_var(&mut g, bound.var(concepts_id), &ab, &w, top_n)?;
            let enc = losses::loss_enc_var(&mut g, v.recon, &ab);
            let mut total = if cfg.use_rec { g.add(rec, reg) } else { reg };
            let e = g.scale(enc, w.lambda_e);
            total = g.add(total, e);
            let mut cau_val = 0.0;
            if phase2 && w.lambda_c > 0.0 {
                let set: Vec<usize> = losses::select_mask_set(&cfg.mask, model.n(), &mut mask_rng)
                    .into_iter()
                    .filter(|&i| model.active[i])
                    .collect();
                let cau = losses::loss_cau_var(&mut g, &model, &bound, head, v.p, v.out, ab.mask.as_ref(), &keep, &set);
                cau_val = g.value(cau).item();
                let c = g.scale(cau, w.lambda_c);
                total = g.add(total, c);
            }
            let parts = LossParts {
                rec: g.value(rec).item(),
                reg: g.value(reg).item(),
                enc: g.value(enc).item(),
                cau: cau_val,
            };
            losses::total_loss(&parts, &w).map_err(|e| Error::Numerical(format!("epoch {}: {e}", epoch + 1)))?;
            let grads = g.backward(total);
            opt.step(&mut model.params, &bound, &grads);
            let b = chunk.len() as f64;
            sums.rec += parts.rec * b;
            sums.reg += parts.reg * b;
            sums.enc += parts.enc * b;
            sums.cau += parts.cau * b;
            seen += chunk.len();
        }
        let racc = if held.is_empty() {
            f64::NAN
        } else {
            agreement(&surrogate_predictions(&model, head, &held_acts, &[], sch.batch_size)?, &held_orig)
        };
        let n = seen.max(1) as f64;
        let row = HistoryRow {
            epoch: epoch + 1,
            l_rec: sums.rec / n,
            l_reg: sums.reg / n,
            l_enc: sums.enc / n,
            l_cau: sums.cau / n,
            racc,
        };
        log::info!(
            "concept epoch {} rec {:.4} reg {:.4} enc {:.4} cau {:.4} racc {:.4}",
            row.epoch,
            row.l_rec,
            row.l_reg,
            row.l_enc,
            row.l_cau,
            row.racc
        );
        if phase2 {
            if racc < 0.5 * phase1_peak {
                let msg = format!("epoch {}: RAcc {racc:.4} fell below half of the phase-1 peak {phase1_peak:.4}", epoch + 1);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        } else if racc.is_finite() {
            phase1_peak = phase1_peak.max(racc);
        }
        history.push(row);
    }
    Ok(TrainOutcome { model, history, warnings })
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub model: ConceptModel,
    pub deactivated: Vec<usize>,
    /// Concepts switched back on to keep RAcc from dropping.
    pub restored: Vec<usize>,
    pub racc_before: f64,
    pub racc_after: f64,
    pub warnings: Vec<String>,
}

/// Switch off concepts whose impact on `acts` is below `epsilon`. If that
/// lowers RAcc, concepts are switched back on greedily until it recovers.
pub fn filter_concepts(model: &ConceptModel, head: &dyn Head, acts: &ActivationSet, epsilon: f64, batch_size: usize) -> Result<FilterOutcome> {
    if !(epsilon >= 0.0) {
        return Err(Error::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let original = head_predictions(head, acts, batch_size);
    let racc = |m: &ConceptModel| -> Result<f64> { Ok(agreement(&surrogate_predictions(m, head, acts, &[], batch_size)?, &original)) };
    let report = evaluate_concepts(model, head, acts, batch_size)?;
    let racc_before = report.racc;
    let mut out = model.clone();
    let deactivated: Vec<usize> = model
        .reported()
        .into_iter()
        .filter(|&i| report.per_concept_impact[i] < epsilon)
        .collect();
    for &i in &deactivated {
        out.active[i] = false;
    }
    let mut racc_after = racc(&out)?;
    let mut restored = Vec::new();
    let mut warnings = Vec::new();
    if racc_after < racc_before {
        warnings.push(format!(
            "filtering lowered RAcc from {racc_before:.4} to {racc_after:.4}; restoring concepts"
        ));
        while racc_after < racc_before {
            let mut best: Option<(usize, f64)> = None;
            for &i in deactivated.iter().filter(|i| !restored.contains(*i)) {
                let mut trial = out.clone();
                trial.active[i] = true;
                let r = racc(&trial)?;
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((i, r));
                }
            }
            let Some((i, r)) = best else { break };
            out.active[i] = true;
            restored.push(i);
            racc_after = r;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FilterOutcome {
        deactivated: deactivated.into_iter().filter(|i| !restored.contains(i)).collect(),
        model: out,
        restored,
        racc_before,
        racc_after,
        warnings,
    })
}

pub fn save_checkpoint(model: &ConceptModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ConceptModel> {
    ConceptModel::load(path)
}
