//! Downstream evaluation without fine-tuning: dense change detection with
//! Otsu thresholding, visual word maps, the precision/recall/F-1 and purity
//! metrics, and receptive-field sweeps.

pub mod change;
pub mod metrics;
pub mod otsu;
pub mod sweep;
pub mod wordmap;

pub use change::{change_scores, detect_change, evaluate_pairs, ChangeMap, DEFAULT_INFER_WINDOW};
pub use metrics::{prf1, word_purity, ClassPurity, PrfReport, PurityReport};
pub use otsu::{otsu_threshold, OtsuSplit, OTSU_BINS};
pub use sweep::{rf_sweep, SweepGrid};
pub use wordmap::{word_map, WordMap};
