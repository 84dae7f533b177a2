//! Verification EER, multi-label F1, mean average precision and chance baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pit::{cosine, PitError};
use crate::retrieval::RetrievalResult;
use crate::rng::rng_for;
use crate::synth::Family;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed trial: {0}")]
    MalformedTrial(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown instrument id `{0}`")]
    UnknownId(String),
    #[error("no relevant query")]
    NoRelevant,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Pit(#[from] PitError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const ENROLL_CLIPS: usize = 5;
pub const POSITIVE_CLIPS: usize = 20;
pub const NEGATIVE_CLIPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationTrial {
    pub instrument: String,
    pub enrollment: Vec<f64>,
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// Per-instrument 5/20/20 trials. Enrollment and positive clips are drawn
/// disjointly from the instrument's own clips; negatives uniformly from all
/// clips of other instruments.
pub fn verification_trials(embeddings: &[(String, Array1<f64>)], seed: u64) -> Result<Vec<VerificationTrial>, EvalError> {
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (id, _)) in embeddings.iter().enumerate() {
        by_id.entry(id.as_str()).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(EvalError::MalformedTrial("need at least two instruments".into()));
    }
    let mut trials = Vec::with_capacity(by_id.len());
    for (t, (&id, own)) in by_id.iter().enumerate() {
        if own.len() < ENROLL_CLIPS + POSITIVE_CLIPS {
            return Err(EvalError::MalformedTrial(format!(
                "`{id}` has {} clips, needs {}",
                own.len(),
                ENROLL_CLIPS + POSITIVE_CLIPS
            )));
        }
        let mut rng = rng_for(seed, "verification", t as u64);
        let picked = sample_indices(&mut rng, own.len(), ENROLL_CLIPS + POSITIVE_CLIPS).into_vec();
        let dim = embeddings[own[0]].1.len();
        let mut enrollment = Array1::<f64>::zeros(dim);
        for &p in &picked[..ENROLL_CLIPS] {
            enrollment += &embeddings[own[p]].1;
        }
        enrollment /= ENROLL_CLIPS as f64;
        let others: Vec<usize> = (0..embeddings.len()).filter(|&i| embeddings[i].0 != id).collect();
        let score = |i: usize| cosine(embeddings[i].1.view(), enrollment.view());
        let positives = picked[ENROLL_CLIPS..]
            .iter()
            .map(|&p| score(own[p]))
            .collect::<Result<_, _>>()?;
        let negatives = (0..NEGATIVE_CLIPS)
            .map(|_| score(others[rng.gen_range(0..others.len())]))
            .collect::<Result<_, _>>()?;
        trials.push(VerificationTrial {
            instrument: id.to_string(),
            enrollment: enrollment.to_vec(),
            positives,
            negatives,
        });
    }
    Ok(trials)
}

/// Equal error rate of one score set. FRR(t) counts positives below `t`,
/// FAR(t) negatives at or above `t`; the crossing is interpolated linearly
/// between adjacent operating points.
pub fn trial_eer(positives: &[f64], negatives: &[f64]) -> Result<f64, EvalError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(EvalError::MalformedTrial("empty score set".into()));
    }
    if !positives.iter().chain(negatives).all(|v| v.is_finite()) {
        return Err(EvalError::MalformedTrial("non-finite score".into()));
    }
    let mut thresholds: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates = |t: f64| {
        let frr = positives.iter().filter(|&&p| p < t).count() as f64 / positives.len() as f64;
        let far = negatives.iter().filter(|&&n| n >= t).count() as f64 / negatives.len() as f64;
        (frr, far)
    };
    let mut prev = (0.0, 1.0);
    for t in thresholds {
        let (frr, far) = rates(t);
        if frr == far {
            return Ok(frr);
        }
        if frr > far {
            let (frr0, far0) = prev;
            let alpha = (far0 - frr0) / ((frr - frr0) - (far - far0));
            return Ok(frr0 + alpha * (frr - frr0));
        }
        prev = (frr, far);
    }
    unreachable!("the infinite threshold rejects everything")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub mean: f64,
    pub per_instrument: BTreeMap<String, f64>,
    /// Set when the mean exceeds 0.5, i.e. scores rank impostors above targets.
    pub anti_correlated: bool,
}

pub fn eer(trials: &[VerificationTrial]) -> Result<EerReport, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::MalformedTrial("no trials".into()));
    }
    let mut per_instrument = BTreeMap::new();
    for t in trials {
        per_instrument.insert(t.instrument.clone(), trial_eer(&t.positives, &t.negatives)?);
    }
    let mean = per_instrument.values().sum::<f64>() / per_instrument.len() as f64;
    Ok(EerReport {
        mean,
        per_instrument,
        anti_correlated: mean > 0.5,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub support: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub per_class: BTreeMap<String, ClassScore>,
    pub macro_avg: f64,
    pub weighted: f64,
}

fn average(per_class: BTreeMap<String, ClassScore>) -> Averaged {
    let n = per_class.len().max(1) as f64;
    let support: usize = per_class.values().map(|c| c.support).sum();
    let macro_avg = per_class.values().map(|c| c.value).sum::<f64>() / n;
    let weighted = if support == 0 {
        0.0
    } else {
        per_class.values().map(|c| c.value * c.support as f64).sum::<f64>() / support as f64
    };
    Averaged {
        per_class,
        macro_avg,
        weighted,
    }
}

pub type LabelSet = BTreeSet<String>;

/// Per-class F1 over the classes present in `truths`.
pub fn multilabel_f1(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<Averaged, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    let classes: BTreeSet<&String> = truths.iter().flatten().collect();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, t) in predictions.iter().zip(truths) {
            match (p.contains(c), t.contains(c)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        per_class.insert(
            c.clone(),
            ClassScore {
                support: tp + fn_,
                value: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
            },
        );
    }
    Ok(average(per_class))
}

pub fn family_collapse(sets: &[LabelSet], families: &BTreeMap<String, Family>) -> Result<Vec<LabelSet>, EvalError> {
    sets.iter()
        .map(|s| {
            s.iter()
                .map(|id| {
                    families
                        .get(id)
                        .map(|f| f.name().to_string())
                        .ok_or_else(|| EvalError::UnknownId(id.clone()))
                })
                .collect()
        })
        .collect()
}

/// Queries ranked by descending score, ties by query index; the mean of
/// precision at each relevant rank.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != relevance.len() {
        return Err(EvalError::LengthMismatch(scores.len(), relevance.len()));
    }
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &q) in order.iter().enumerate() {
        if relevance[q] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant as f64)
}

/// Per-class AP over queries for every class present in `truths`.
/// `scores[q][k]` is query `q`'s score for `classes[k]`.
pub fn mean_average_precision(
    scores: &[Vec<f64>],
    classes: &[String],
    truths: &[LabelSet],
) -> Result<Averaged, EvalError> {
    if scores.len() != truths.len() {
        return Err(EvalError::LengthMismatch(scores.len(), truths.len()));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes.len()) {
        return Err(EvalError::LengthMismatch(row.len(), classes.len()));
    }
    let present: BTreeSet<&String> = truths.iter().flatten().collect();
    if let Some(missing) = present.iter().find(|c| !classes.contains(c)) {
        return Err(EvalError::UnknownId((*missing).clone()));
    }
    let mut per_class = BTreeMap::new();
    for (k, c) in classes.iter().enumerate() {
        if !present.contains(c) {
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let relevance: Vec<bool> = truths.iter().map(|t| t.contains(c)).collect();
        let support = relevance.iter().filter(|&&r| r).count();
        per_class.insert(
            c.clone(),
            ClassScore {
                support,
                value: average_precision(&column, &relevance)?,
            },
        );
    }
    Ok(average(per_class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub instrument_f1: Averaged,
    pub family_f1: Averaged,
    pub map: Averaged,
}

/// Metrics of retrieval results against truth id sets; `library` lists
/// `(id, family)` in the score column order.
pub fn evaluate_retrieval(
    results: &[RetrievalResult],
    truths: &[LabelSet],
    library: &[(String, Family)],
) -> Result<RetrievalMetrics, EvalError> {
    if results.len() != truths.len() {
        return Err(EvalError::LengthMismatch(results.len(), truths.len()));
    }
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let predictions: Vec<LabelSet> = results.iter().map(|r| r.retrieved.iter().cloned().collect()).collect();
    let scores: Vec<Vec<f64>> = results.iter().map(|r| r.instrument_scores.clone()).collect();
    metrics_from(&predictions, &scores, truths, library)
}

fn metrics_from(
    predictions: &[LabelSet],
    scores: &[Vec<f64>],
    truths: &[LabelSet],
    library: &[(String, Family)],
) -> Result<RetrievalMetrics, EvalError> {
    let families: BTreeMap<String, Family> = library.iter().cloned().collect();
    let classes: Vec<String> = library.iter().map(|(id, _)| id.clone()).collect();
    Ok(RetrievalMetrics {
        instrument_f1: multilabel_f1(predictions, truths)?,
        family_f1: multilabel_f1(&family_collapse(predictions, &families)?, &family_collapse(truths, &families)?)?,
        map: mean_average_precision(scores, &classes, truths)?,
    })
}

fn mean_of(reports: &[Averaged]) -> Averaged {
    let n = reports.len() as f64;
    let mut per_class: BTreeMap<String, ClassScore> = BTreeMap::new();
    for r in reports {
        for (c, s) in &r.per_class {
            let e = per_class.entry(c.clone()).or_insert(ClassScore {
                support: s.support,
                value: 0.0,
            });
            e.value += s.value / n;
        }
    }
    Averaged {
        per_class,
        macro_avg: reports.iter().map(|r| r.macro_avg).sum::<f64>() / n,
        weighted: reports.iter().map(|r| r.weighted).sum::<f64>() / n,
    }
}

/// Empirical chance level: every query fills `slots` picks uniformly from
/// the library (the union is the prediction) and scores every library
/// instrument uniformly at random. Metrics are averaged over `trials`.
pub fn chance_baseline(
    truths: &[LabelSet],
    library: &[(String, Family)],
    slots: usize,
    seed: u64,
    trials: usize,
) -> Result<RetrievalMetrics, EvalError> {
    if truths.is_empty() || library.is_empty() || slots == 0 || trials == 0 {
        return Err(EvalError::Empty);
    }
    let mut runs = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = rng_for(seed, "chance", trial as u64);
        let mut predictions = Vec::with_capacity(truths.len());
        let mut scores = Vec::with_capacity(truths.len());
        for _ in truths {
            predictions.push((0..slots).map(|_| library[rng.gen_range(0..library.len())].0.clone()).collect());
            scores.push((0..library.len()).map(|_| rng.gen::<f64>()).collect());
        }
        runs.push(metrics_from(&predictions, &scores, truths, library)?);
    }
    let pick = |f: fn(&RetrievalMetrics) -> &Averaged| mean_of(&runs.iter().map(|r| f(r).clone()).collect::<Vec<_>>());
    Ok(RetrievalMetrics {
        instrument_f1: pick(|r| &r.instrument_f1),
        family_f1: pick(|r| &r.family_f1),
        map: pick(|r| &r.map),
    })
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<EerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chance: Option<RetrievalMetrics>,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// One row per (metric, class): `metric,class,support,value`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "metric,class,support,value")?;
        if let Some(e) = &self.eer {
            for (id, v) in &e.per_instrument {
                writeln!(out, "eer,{id},,{v}")?;
            }
        }
        for (prefix, m) in [("", &self.retrieval), ("chance_", &self.chance)] {
            let Some(m) = m else { continue };
            for (name, avg) in [
                ("instrument_f1", &m.instrument_f1),
                ("family_f1", &m.family_f1),
                ("ap", &m.map),
            ] {
                for (c, s) in &avg.per_class {
                    writeln!(out, "{prefix}{name},{c},{},{}", s.support, s.value)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Embeddings as a row-major LE `f32` matrix at `path`, ids at `path.json`.
pub fn write_embedding_dump(path: &Path, ids: &[String], rows: &[ArrayView1<'_, f32>]) -> Result<(), EvalError> {
    if ids.len() != rows.len() {
        return Err(EvalError::LengthMismatch(ids.len(), rows.len()));
    }
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        if r.len() != dim {
            return Err(EvalError::LengthMismatch(r.len(), dim));
        }
        for v in r.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    let mut sidecar = path.as_os_str().to_os_string();
    sidecar.push(".json");
    fs::write(
        sidecar,
        serde_json::to_vec_pretty(&serde_json::json!({
            "rows": rows.len(),
            "dim": dim,
            "dtype": "float32_le",
            "ids": ids,
        }))?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> LabelSet {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn eer_cases() {
        assert_eq!(trial_eer(&[1.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert!((trial_eer(&[0.3; 5], &[0.3; 5]).unwrap() - 0.5).abs() < 1e-12);
        let v = trial_eer(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert!(trial_eer(&[], &[0.1]).is_err());
    }

    #[test]
    fn inverted_scores_flagged() {
        let t = VerificationTrial {
            instrument: "a".into(),
            enrollment: vec![],
            positives: vec![0.0, 0.1],
            negatives: vec![0.9, 1.0],
        };
        let r = eer(&[t]).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.anti_correlated);
    }

    #[test]
    fn f1_hand_case() {
        let r = multilabel_f1(&[set(&["A"]), set(&["A", "B"])], &[set(&["A", "B"]), set(&["A"])]).unwrap();
        assert_eq!(r.per_class["A"].value, 1.0);
        assert_eq!(r.per_class["B"].value, 0.0);
        assert!((r.macro_avg - 0.5).abs() < 1e-12);
        assert!((r.weighted - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_empty_predictions() {
        let r = multilabel_f1(&[set(&[]), set(&[])], &[set(&["A"]), set(&["B"])]).unwrap();
        assert_eq!((r.macro_avg, r.weighted), (0.0, 0.0));
        assert!(matches!(multilabel_f1(&[set(&[])], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[true, true]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.1], &[false]), Err(EvalError::NoRelevant)));
    }

    #[test]
    fn collapse_to_families() {
        let map: BTreeMap<String, Family> = [
            ("guitar_03".to_string(), Family::Guitar),
            ("guitar_07".to_string(), Family::Guitar),
            ("bass_01".to_string(), Family::Bass),
            ("organ_02".to_string(), Family::Organ),
        ]
        .into();
        let out = family_collapse(&[set(&["guitar_03", "guitar_07"]), set(&["bass_01", "organ_02"])], &map).unwrap();
        assert_eq!(out, vec![set(&["guitar"]), set(&["bass", "organ"])]);
        assert!(matches!(family_collapse(&[set(&["x"])], &map), Err(EvalError::UnknownId(_))));
    }

    #[test]
    fn chance_is_deterministic() {
        let library: Vec<(String, Family)> = vec![
            ("a".into(), Family::Bass),
            ("b".into(), Family::Bass),
            ("c".into(), Family::Organ),
        ];
        let truths = vec![set(&["a", "c"]), set(&["b"])];
        let x = chance_baseline(&truths, &library, 2, 9, 5).unwrap();
        assert_eq!(x, chance_baseline(&truths, &library, 2, 9, 5).unwrap());
    }

    #[test]
    fn single_entry_library() {
        let library = vec![("a".to_string(), Family::Bass)];
        let truths = vec![set(&["a"]), set(&["a"])];
        let r = chance_baseline(&truths, &library, 3, 1, 2).unwrap();
        assert_eq!(r.instrument_f1.macro_avg, 1.0);
    }
}
