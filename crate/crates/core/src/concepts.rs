//! Default OMOP concept IDs used by the synthetic generator and the default
//! cohort configuration. All of them can be overridden through configuration.

use crate::ConceptId;

/// Glomerular filtration rate/1.73 sq M.predicted (creatinine-based).
pub const EGFR: ConceptId = 3049187;
/// Microalbumin/Creatinine [Mass Ratio] in Urine.
pub const UACR: ConceptId = 3034485;
/// Chronic kidney disease.
pub const CKD: ConceptId = 46271022;
/// End-stage renal disease.
pub const ESRD: ConceptId = 193782;
