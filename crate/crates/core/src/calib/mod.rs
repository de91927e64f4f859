//! Clipping-range calibration: value-distance (MSE, min/max) and
//! attention-focus-overlap searches.

mod calibrate;
mod focus;
mod grid;
mod policy;
mod search;

pub use calibrate::{
    attention_distance, attention_probe, calibrate_model, calibrate_observed, calibrate_weight, mean_distance, observe,
    CalibItem, CalibRecord, Calibration, TensorKind,
};
pub use focus::{dist_pcc, dist_pcc_scoped, focus_mask, focus_mask_scoped, iou_af, FocusMask, MaxScope};
pub use grid::{widen_degenerate, ClipSearchGrid, GridConfig};
pub use policy::{glob_match, CalibPolicy, Metric, PolicyRule, QK_PATTERNS};
pub use search::{
    argmin_candidates, calibrate_minmax, calibrate_mse, fake_quant_range, quant_sq_error, search_clip_mse,
    search_clip_pcc, AttentionProbe, PccSearch, SearchOutcome, QK_SLOTS,
};
