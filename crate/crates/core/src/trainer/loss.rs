use crate::corpus::EncodedSample;
use crate::diffgraph::{Tape, Var, PROB_FLOOR};
use crate::lexicon::Polarity;
use crate::model::{KesaModel, ModelError};
use crate::tasks::{self, AuxInstances, CombinationMode, LabelGrid, PriorAxis, TaskError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainLoss {
    pub value: f64,
    /// The target probability was below the floor and got clamped.
    pub clamped: bool,
}

/// `-ln p[target]`, floored at `ln(1e-12)`.
pub fn main_loss(probs: &[f64], target: usize) -> MainLoss {
    let p = probs[target];
    MainLoss {
        value: -p.max(PROB_FLOOR).ln(),
        clamped: p < PROB_FLOOR,
    }
}

/// How the per-sample objective is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub gamma: f64,
    pub mode: CombinationMode,
    pub swc: bool,
    pub csp: bool,
}

impl ObjectiveConfig {
    pub fn main_only() -> Self {
        Self {
            gamma: 0.0,
            mode: CombinationMode::Joint,
            swc: false,
            csp: false,
        }
    }
}

/// Recorded objective for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleObjective {
    pub total: Var,
    pub main: Var,
    /// Unweighted auxiliary sum, when any auxiliary term applied.
    pub aux: Option<Var>,
    pub predicted: usize,
}

/// Cross-entropy of the mixed auxiliary prediction.
///
/// The cloze distribution over sentence labels is read from the true
/// candidate's logits at ascription 1; the conditional distribution from the
/// row of the word's polarity. The two are mixed by `combine.weight` (2 x 1)
/// plus `combine.bias` and passed through a softmax. With only one of them,
/// the matching row of `combine.weight` is used alone.
pub fn aux_combined_loss(
    tape: &mut Tape<'_>,
    model: &KesaModel,
    swc_positive_logits: Option<Var>,
    csp: Option<(Var, Polarity)>,
    label: usize,
) -> Result<Option<Var>, TaskError> {
    let classes = model.config().classes;
    let mut columns = Vec::with_capacity(2);
    let mut rows = Vec::with_capacity(2);
    if let Some(logits) = swc_positive_logits {
        columns.push(tasks::conditional_slice(tape, logits, LabelGrid::swc(classes), PriorAxis::Column, 1)?);
        rows.push(0);
    }
    if let Some((logits, polarity)) = csp {
        columns.push(tasks::conditional_slice(
            tape,
            logits,
            LabelGrid::csp(classes),
            PriorAxis::Row,
            polarity.index(),
        )?);
        rows.push(1);
    }
    if columns.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack_columns(&columns)?;
    let mut weight = tape.param(model.ids().combine_weight)?;
    if rows.len() == 1 {
        let flat = tape.reshape(weight, &[2])?;
        let picked = tape.masked_slice(flat, &rows)?;
        weight = tape.reshape(picked, &[1, 1])?;
    }
    let bias = tape.param(model.ids().combine_bias)?;
    let mixed = tape.affine(weight, stacked, bias)?;
    let mixed = tape.reshape(mixed, &[classes])?;
    let p = tape.softmax(mixed)?;
    Ok(Some(tape.cross_entropy(p, label)?))
}

/// `L_main + γ·(Σ task losses + combined term)` for one sample. The combined
/// term only enters when both auxiliary tasks are enabled and produced
/// instances.
pub fn sample_objective(
    tape: &mut Tape<'_>,
    model: &KesaModel,
    sample: &EncodedSample,
    instances: &AuxInstances,
    cfg: &ObjectiveConfig,
) -> Result<SampleObjective, TaskError> {
    let h = model.encode_sentence(tape, &sample.ids, sample.len)?;
    let probs = model.main_head(tape, h)?;
    let predicted = argmax(tape.value(probs).data());
    let main = tape.cross_entropy(probs, sample.label).map_err(ModelError::from)?;

    let swc = if cfg.swc {
        tasks::swc_task(tape, model, h, &instances.swc, cfg.mode)?
    } else {
        None
    };
    let csp = if cfg.csp {
        tasks::csp_task(tape, model, h, instances.csp.as_ref(), cfg.mode)?
    } else {
        None
    };

    let mut terms = Vec::with_capacity(3);
    if let Some(out) = &swc {
        terms.push(out.loss);
    }
    if let Some(out) = &csp {
        terms.push(out.loss);
    }
    if let (Some(s), Some(c), Some(inst)) = (&swc, &csp, instances.csp.as_ref()) {
        if let Some(combined) = aux_combined_loss(
            tape,
            model,
            Some(s.positive_logits),
            Some((c.logits, inst.word_polarity)),
            sample.label,
        )? {
            terms.push(combined);
        }
    }

    if terms.is_empty() {
        return Ok(SampleObjective {
            total: main,
            main,
            aux: None,
            predicted,
        });
    }
    let aux = tape.add_n(&terms)?;
    let weighted = tape.scalar_mul(aux, cfg.gamma)?;
    let total = tape.add(main, weighted)?;
    Ok(SampleObjective {
        total,
        main,
        aux: Some(aux),
        predicted,
    })
}

/// Mean objective over a batch, recorded on a single tape.
pub fn batch_objective(
    tape: &mut Tape<'_>,
    model: &KesaModel,
    batch: &[(&EncodedSample, &AuxInstances)],
    cfg: &ObjectiveConfig,
) -> Result<Var, TaskError> {
    let totals = batch
        .iter()
        .map(|(s, inst)| sample_objective(tape, model, s, inst, cfg).map(|o| o.total))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.mean(&totals)?)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
