//! Learning quantization parameters by reconstruction against the
//! full-precision model, either on hybrid image tokens after the prompt
//! interaction or on each unit's own output.

mod agreement;
mod config;
mod train;
mod unit;

pub use agreement::{evaluate_agreement, mask_iou, AgreementReport};
pub use config::{InteractionPath, Objective, ReconConfig, UnitGranularity};
pub use train::{local_recon_loss, optimize_unit, par_loss, run_reconstruction, ReconOutcome, UnitReport};
pub use unit::{
    collect_stage_targets, fake_quant_nodes, interaction, reconstruction_units, teacher_hybrid, unit_forward, ReconTarget,
    StateTensors, Unit, UnitInput, UnitKind, UnitSample,
};
