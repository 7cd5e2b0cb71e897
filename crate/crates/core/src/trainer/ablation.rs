use std::time::Instant;

use candle_core::DType;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{evaluate, AblationRow, EvalReport, MmgerConfig, Trainer};
use crate::error::Result;
use crate::lm::FrozenLm;
use crate::synthdata::Utterance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub id: String,
    pub fusion: String,
    pub granularity: String,
    pub modality: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub rows: Vec<AblationOutcome>,
}

impl AblationReport {
    pub fn row(&self, id: &str) -> Option<&AblationOutcome> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Whether A3 is no worse than both single-granularity rows; `None` if any is missing.
    pub fn a3_beats_single_granularity(&self) -> Option<bool> {
        let cer = |id: &str| self.row(id).and_then(|r| r.report.as_ref()).map(|r| r.cer);
        let (a3, g1, g2) = (cer("A3")?, cer("G1")?, cer("G2")?);
        Some(a3 <= g1 && a3 <= g2)
    }
}

/// Trains and evaluates each row with the same seed and frozen LM. A failing
/// row is recorded and the matrix moves on.
pub fn run_ablation_matrix(
    base: &MmgerConfig,
    rows: &[AblationRow],
    lm: &FrozenLm,
    num_accents: usize,
    train: &[Utterance],
    eval: &[Utterance],
    split: &str,
) -> Result<AblationReport> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let start = Instant::now();
        info!("ablation row {}", row.id);
        let result = (|| -> Result<EvalReport> {
            let cfg = row.apply(base);
            let mut trainer = Trainer::new(&cfg, lm.clone(), num_accents, DType::F32)?;
            trainer.fit(train, None, None)?;
            Ok(evaluate(trainer.model(), eval, split)?.0)
        })();
        let (report, error) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => {
                warn!("ablation row {} failed: {e}", row.id);
                (None, Some(e.to_string()))
            }
        };
        out.push(AblationOutcome {
            id: row.id.to_string(),
            fusion: row.scheme.to_string(),
            granularity: row.granularity_label().to_string(),
            modality: row.modality().to_string(),
            report,
            error,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationReport {
        split: split.to_string(),
        rows: out,
    })
}

/// Aligned text table, one line per row.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let mut s = format!(
        "{:<4} {:<16} {:<12} {:<20} {:>17} {:>17} {:>8}\n",
        "ID",
        "AR fusion",
        "granularity",
        "modality",
        "CER all/acc (%)",
        "CTC all/acc (%)",
        "AR ACC"
    );
    for r in &report.rows {
        match &r.report {
            Some(e) => s.push_str(&format!(
                "{:<4} {:<16} {:<12} {:<20} {:>17} {:>17} {:>8.2}\n",
                r.id,
                r.fusion,
                r.granularity,
                r.modality,
                e.cer_pair(),
                e.baseline_pair(),
                100.0 * e.ar_accuracy
            )),
            None => s.push_str(&format!(
                "{:<4} {:<16} {:<12} {:<20} FAILED: {}\n",
                r.id,
                r.fusion,
                r.granularity,
                r.modality,
                r.error.as_deref().unwrap_or("unknown error")
            )),
        }
    }
    s
}
