use serde::{Deserialize, Serialize};

use crate::arfusion::{FusionConfig, FusionScheme};
use crate::correction::{Granularity, MmcMode};
use crate::encoders::{AdapterConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EncodersConfig {
    pub shared: EncoderConfig,
    pub asr: EncoderConfig,
    pub adapter: AdapterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub granularity: Granularity,
    pub mmc_mode: MmcMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Weight of the CTC loss.
    pub lambda: f64,
    /// Weight of the accent loss.
    pub mu: f64,
    /// Detach the accent embedding from the corrector loss.
    pub stop_gradient_accent: bool,
    pub enable_lm_path: bool,
    pub enable_ar_path: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Residual-branch dropout in the encoders and adapter while training.
    pub dropout: f64,
    pub seed: u64,
    /// Utterances per decoding batch at evaluation time.
    pub eval_batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            mu: 0.3,
            stop_gradient_accent: false,
            enable_lm_path: true,
            enable_ar_path: true,
            batch_size: 16,
            epochs: 20,
            dropout: 0.3,
            seed: 7,
            eval_batch_size: 50,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                warmup_steps: 150,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// Everything that shapes the trainable model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MmgerConfig {
    pub encoders: EncodersConfig,
    pub arfusion: FusionConfig,
    pub correction: CorrectionConfig,
    pub trainer: TrainerConfig,
}

impl MmgerConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoders;
        e.shared.validate()?;
        e.asr.validate()?;
        if e.shared.subsample_factor != e.asr.subsample_factor {
            return Err(Error::Config(format!(
                "shared and ASR encoders must subsample equally ({} vs {})",
                e.shared.subsample_factor, e.asr.subsample_factor
            )));
        }
        if e.shared.input_dim != e.asr.input_dim {
            return Err(Error::Config(
                "shared and ASR encoders must read the same features".into(),
            ));
        }
        if e.shared.tap_layers.is_empty() {
            return Err(Error::Config(
                "shared encoder needs at least one tap layer".into(),
            ));
        }
        if e.adapter.num_heads == 0 || !e.asr.model_dim.is_multiple_of(e.adapter.num_heads) {
            return Err(Error::Config(
                "adapter heads must divide the ASR encoder width".into(),
            ));
        }
        self.arfusion.validate()?;
        let t = &self.trainer;
        if !(t.lambda >= 0.0 && t.mu >= 0.0 && t.lambda.is_finite() && t.mu.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                t.dropout
            )));
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if t.enable_lm_path && !self.needs_prompt_inputs() {
            return Err(Error::Config("granularity leaves the prompt empty".into()));
        }
        Ok(())
    }

    fn needs_prompt_inputs(&self) -> bool {
        self.correction.granularity.uses_mmc() || self.correction.granularity.uses_mgc()
    }

    /// Whether the accent stack is built (needed by either loss path).
    pub fn uses_ar_stack(&self) -> bool {
        self.trainer.enable_ar_path || self.trainer.enable_lm_path
    }

    /// Whether the ASR encoder, adapter and frame-level segment are built.
    pub fn uses_mmc(&self) -> bool {
        self.trainer.enable_lm_path && self.correction.granularity.uses_mmc()
    }
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub id: &'static str,
    pub scheme: FusionScheme,
    pub granularity: Granularity,
    pub mmc_mode: MmcMode,
}

impl AblationRow {
    pub fn apply(&self, base: &MmgerConfig) -> MmgerConfig {
        let mut cfg = base.clone();
        cfg.arfusion.scheme = self.scheme;
        cfg.correction.granularity = self.granularity;
        cfg.correction.mmc_mode = self.mmc_mode;
        cfg.trainer.enable_lm_path = true;
        cfg.trainer.enable_ar_path = true;
        cfg
    }

    pub fn modality(&self) -> &'static str {
        if !self.granularity.uses_mmc() {
            return "-";
        }
        match self.mmc_mode {
            MmcMode::Both => "acoustic+linguistic",
            MmcMode::AcousticOnly => "acoustic",
            MmcMode::LinguisticOnly => "linguistic",
        }
    }

    pub fn granularity_label(&self) -> &'static str {
        match self.granularity {
            Granularity::Both => "coarse+fine",
            Granularity::CoarseOnly => "coarse",
            Granularity::FineOnly => "fine",
        }
    }
}

const fn row(
    id: &'static str,
    scheme: FusionScheme,
    granularity: Granularity,
    mmc_mode: MmcMode,
) -> AblationRow {
    AblationRow {
        id,
        scheme,
        granularity,
        mmc_mode,
    }
}

pub const ABLATION_ROWS: [AblationRow; 9] = [
    row(
        "A1",
        FusionScheme::AcousticOnly,
        Granularity::Both,
        MmcMode::Both,
    ),
    row(
        "A2",
        FusionScheme::LinguisticOnly,
        Granularity::Both,
        MmcMode::Both,
    ),
    row("A3", FusionScheme::Add, Granularity::Both, MmcMode::Both),
    row("A4", FusionScheme::Concat, Granularity::Both, MmcMode::Both),
    row(
        "A5",
        FusionScheme::Attention,
        Granularity::Both,
        MmcMode::Both,
    ),
    row(
        "G1",
        FusionScheme::Add,
        Granularity::CoarseOnly,
        MmcMode::Both,
    ),
    row(
        "G2",
        FusionScheme::Add,
        Granularity::FineOnly,
        MmcMode::Both,
    ),
    row(
        "M1",
        FusionScheme::Add,
        Granularity::Both,
        MmcMode::AcousticOnly,
    ),
    row(
        "M2",
        FusionScheme::Add,
        Granularity::Both,
        MmcMode::LinguisticOnly,
    ),
];

pub fn ablation_row(id: &str) -> Result<AblationRow> {
    ABLATION_ROWS
        .iter()
        .copied()
        .find(|r| r.id.eq_ignore_ascii_case(id))
        .ok_or_else(|| Error::invalid_argument(format!("unknown ablation row {id:?}")))
}

/// `l_llm + lambda * l_ctc + mu * l_ar`.
pub fn total_loss(l_llm: f64, l_ctc: f64, l_ar: f64, cfg: &MmgerConfig) -> f64 {
    l_llm + cfg.trainer.lambda * l_ctc + cfg.trainer.mu * l_ar
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum() {
        let cfg = MmgerConfig::default();
        assert!((total_loss(1.0, 1.0, 1.0, &cfg) - 1.6).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        let mut z = cfg.clone();
        z.trainer.lambda = 0.0;
        z.trainer.mu = 0.0;
        assert_eq!(total_loss(2.5, 7.0, 9.0, &z), 2.5);
    }

    #[test]
    fn rows_are_table_shaped() {
        let ids: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.id).collect();
        assert_eq!(ids, ["A1", "A2", "A3", "A4", "A5", "G1", "G2", "M1", "M2"]);
        let a3 = ablation_row("a3").unwrap();
        assert_eq!(
            (a3.scheme, a3.granularity, a3.mmc_mode),
            (FusionScheme::Add, Granularity::Both, MmcMode::Both)
        );
        let g1 = ablation_row("G1").unwrap().apply(&MmgerConfig::default());
        assert!(!g1.uses_mmc());
        assert!(ablation_row("Z9").is_err());
    }

    #[test]
    fn mismatched_subsampling_rejected() {
        let mut cfg = MmgerConfig::default();
        cfg.encoders.asr.subsample_factor = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
