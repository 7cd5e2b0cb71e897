use std::fmt;

use serde::{Deserialize, Serialize};

use super::MmgerModel;
use crate::arfusion::predicted_accents;
use crate::error::{Error, Result};
use crate::synthdata::{Symbol, Utterance};

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[Symbol], b: &[Symbol]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `hyp` against a nonempty `reference`.
pub fn cer(hyp: &[Symbol], reference: &[Symbol]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid_argument("CER needs a nonempty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct Tally {
    edits: usize,
    baseline_edits: usize,
    ref_len: usize,
    correct_accent: usize,
    utterances: usize,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.edits += other.edits;
        self.baseline_edits += other.baseline_edits;
        self.ref_len += other.ref_len;
        self.correct_accent += other.correct_accent;
        self.utterances += other.utterances;
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            f64::NAN
        } else {
            num as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentReport {
    pub accent: usize,
    pub utterances: usize,
    pub cer: f64,
    pub baseline_cer: f64,
    pub ar_accuracy: f64,
}

/// Corpus-level error rates (total edits over total reference symbols).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub utterances: usize,
    pub cer: f64,
    pub cer_accented: f64,
    pub baseline_cer: f64,
    pub baseline_cer_accented: f64,
    pub ar_accuracy: f64,
    pub ar_accuracy_accented: f64,
    pub per_accent: Vec<AccentReport>,
}

impl EvalReport {
    /// `all / accented` percentages.
    pub fn cer_pair(&self) -> String {
        format!("{:.2} / {:.2}", 100.0 * self.cer, 100.0 * self.cer_accented)
    }

    pub fn baseline_pair(&self) -> String {
        format!(
            "{:.2} / {:.2}",
            100.0 * self.baseline_cer,
            100.0 * self.baseline_cer_accented
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split {} ({} utterances)", self.split, self.utterances)?;
        writeln!(f, "CER all / accented (%):          {}", self.cer_pair())?;
        writeln!(
            f,
            "CTC greedy all / accented (%):   {}",
            self.baseline_pair()
        )?;
        if self.ar_accuracy.is_nan() {
            writeln!(
                f,
                "AR accuracy (%):                 n/a (no accent classifier)"
            )?;
        } else {
            writeln!(
                f,
                "AR accuracy (%):                 {:.2} (accented {:.2})",
                100.0 * self.ar_accuracy,
                100.0 * self.ar_accuracy_accented
            )?;
        }
        writeln!(
            f,
            "{:>6}  {:>6}  {:>8}  {:>8}  {:>8}",
            "accent", "utts", "CER", "CTC", "AR ACC"
        )?;
        for a in &self.per_accent {
            writeln!(
                f,
                "{:>6}  {:>6}  {:>8.2}  {:>8.2}  {:>8}",
                a.accent,
                a.utterances,
                100.0 * a.cer,
                100.0 * a.baseline_cer,
                if a.ar_accuracy.is_nan() {
                    "n/a".to_string()
                } else {
                    format!("{:.2}", 100.0 * a.ar_accuracy)
                }
            )?;
        }
        Ok(())
    }
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub utt_id: String,
    pub accent: usize,
    pub predicted_accent: Option<usize>,
    pub baseline: Vec<Symbol>,
    pub corrected: Vec<Symbol>,
    pub reference: Vec<Symbol>,
}

fn join_symbols(s: &[Symbol]) -> String {
    s.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl DecodeRow {
    pub const TSV_HEADER: &'static str = "utt_id\tbaseline\tcorrected\treference";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.utt_id,
            join_symbols(&self.baseline),
            join_symbols(&self.corrected),
            join_symbols(&self.reference)
        )
    }
}

/// Decodes `utts` in batches and scores both the corrected output and the CTC
/// greedy baseline. Accent 0 is the standard accent.
pub fn evaluate(
    model: &MmgerModel,
    utts: &[Utterance],
    split: &str,
) -> Result<(EvalReport, Vec<DecodeRow>)> {
    if utts.is_empty() {
        return Err(Error::invalid_argument(format!("split {split} is empty")));
    }
    let a = model.num_accents();
    if let Some(u) = utts.iter().find(|u| u.accent >= a) {
        return Err(Error::invalid_argument(format!(
            "{} has accent {} >= {a}",
            u.utt_id, u.accent
        )));
    }
    let mut tallies = vec![Tally::default(); a];
    let mut has_ar = true;
    let mut rows = Vec::with_capacity(utts.len());
    let batch = model.config().trainer.eval_batch_size.max(1);
    for chunk in utts.chunks(batch) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let (fwd, corrected) = model.decode(&refs)?;
        let predicted = match &fwd.ar {
            Some(ar) => Some(predicted_accents(&ar.logits)?),
            None => None,
        };
        has_ar &= predicted.is_some();
        for (i, u) in chunk.iter().enumerate() {
            let baseline = fwd.hypotheses[i].regular_tokens.clone();
            let pred = predicted.as_ref().map(|p| p[i]);
            let t = &mut tallies[u.accent];
            t.edits += edit_distance(&corrected[i], &u.transcript);
            t.baseline_edits += edit_distance(&baseline, &u.transcript);
            t.ref_len += u.transcript.len();
            t.correct_accent += usize::from(pred == Some(u.accent));
            t.utterances += 1;
            rows.push(DecodeRow {
                utt_id: u.utt_id.clone(),
                accent: u.accent,
                predicted_accent: pred,
                baseline,
                corrected: corrected[i].clone(),
                reference: u.transcript.clone(),
            });
        }
    }
    let mut all = Tally::default();
    let mut accented = Tally::default();
    for (k, t) in tallies.iter().enumerate() {
        all.add(t);
        if k != 0 {
            accented.add(t);
        }
    }
    // NaN marks accuracies of a model without an accent classifier
    let accuracy = |correct: usize, n: usize| {
        if has_ar {
            Tally::ratio(correct, n)
        } else {
            f64::NAN
        }
    };
    let report = EvalReport {
        split: split.to_string(),
        utterances: utts.len(),
        cer: Tally::ratio(all.edits, all.ref_len),
        cer_accented: Tally::ratio(accented.edits, accented.ref_len),
        baseline_cer: Tally::ratio(all.baseline_edits, all.ref_len),
        baseline_cer_accented: Tally::ratio(accented.baseline_edits, accented.ref_len),
        ar_accuracy: accuracy(all.correct_accent, all.utterances),
        ar_accuracy_accented: accuracy(accented.correct_accent, accented.utterances),
        per_accent: tallies
            .iter()
            .enumerate()
            .map(|(k, t)| AccentReport {
                accent: k,
                utterances: t.utterances,
                cer: Tally::ratio(t.edits, t.ref_len),
                baseline_cer: Tally::ratio(t.baseline_edits, t.ref_len),
                ar_accuracy: accuracy(t.correct_accent, t.utterances),
            })
            .collect(),
    };
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert!((cer(&[1, 9, 3], &[1, 2, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer(&[2, 1], &[1, 2]).unwrap(), 1.0);
        assert_eq!(cer(&[], &[1, 2]).unwrap(), 1.0);
        assert!(cer(&[1], &[]).is_err());
    }
}
