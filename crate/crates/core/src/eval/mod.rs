//! Outcome scales, agreement metrics and the ablation harness.
//!
//! Reference labels come from the Enneking score. LEFS scores are banded and
//! mapped onto the unified label space by the order-preserving bijection.
//!
//! Macro-F1 convention: a class contributes to the mean only if it occurs in
//! the reference or in the predictions; classes absent from both are left out.
//! On small cohorts this changes the value, so reports state it explicitly.

mod cohort;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_case, Finding, PatientCase, UnifiedLabel, ENNEKING_MAX, LEFS_MAX};
use crate::pipeline::{Engine, PipelineError, PredictOptions};

pub use cohort::{
    generate_synthetic_cohort, load_cohort, write_cohort, Cohort, CohortCase, GroundTruth, ARCHETYPE_COUNT,
};

pub const CLASS_HANDLING: &str = "classes absent from both reference and prediction are excluded from the mean";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{instrument} score {score} out of range 0–{max}")]
    OutOfRange { instrument: &'static str, score: i32, max: i32 },
    #[error("Macro-F1 needs at least one evaluated case")]
    EmptyMatrix,
    #[error("cohort needs at least {min} cases (got {got})")]
    CohortTooSmall { min: usize, got: usize },
    #[error("cohort error: {0}")]
    Cohort(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("case {case_id}: {source}")]
    Pipeline { case_id: String, source: Box<PipelineError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LefsBand {
    Severe,
    Moderate,
    MildToModerate,
    MildOrNormal,
}

impl LefsBand {
    pub const ALL: [LefsBand; 4] = [LefsBand::Severe, LefsBand::Moderate, LefsBand::MildToModerate, LefsBand::MildOrNormal];
}

/// 0–20 severe, 21–40 moderate, 41–60 mild to moderate, above 60 mild or normal.
pub fn lefs_band(score: i32) -> Result<LefsBand, EvalError> {
    match score {
        0..=20 => Ok(LefsBand::Severe),
        21..=40 => Ok(LefsBand::Moderate),
        41..=60 => Ok(LefsBand::MildToModerate),
        61..=LEFS_MAX => Ok(LefsBand::MildOrNormal),
        _ => Err(EvalError::OutOfRange { instrument: "LEFS", score, max: LEFS_MAX }),
    }
}

/// Poor 0–9, Fair 10–17, Good 18–25, Excellent 26–30. The printed bands leave
/// 26 unassigned; it is closed upward into Excellent.
pub fn enneking_label(score: i32) -> Result<UnifiedLabel, EvalError> {
    match score {
        0..=9 => Ok(UnifiedLabel::Poor),
        10..=17 => Ok(UnifiedLabel::Fair),
        18..=25 => Ok(UnifiedLabel::Good),
        26..=ENNEKING_MAX => Ok(UnifiedLabel::Excellent),
        _ => Err(EvalError::OutOfRange { instrument: "Enneking", score, max: ENNEKING_MAX }),
    }
}

pub fn unify_lefs(band: LefsBand) -> UnifiedLabel {
    match band {
        LefsBand::Severe => UnifiedLabel::Poor,
        LefsBand::Moderate => UnifiedLabel::Fair,
        LefsBand::MildToModerate => UnifiedLabel::Good,
        LefsBand::MildOrNormal => UnifiedLabel::Excellent,
    }
}

/// 4×4 counts indexed `[reference][predicted]` in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn add(&mut self, reference: UnifiedLabel, predicted: UnifiedLabel) {
        self.counts[reference.index()][predicted.index()] += 1;
        self.total += 1;
    }

    pub fn get(&self, reference: UnifiedLabel, predicted: UnifiedLabel) -> u64 {
        self.counts[reference.index()][predicted.index()]
    }

    pub fn diagonal(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal() == self.total
    }

    /// Per-class F1 in label order; `None` for classes absent from both sides.
    pub fn per_class_f1(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for (c, slot) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c];
            let reference: u64 = self.counts[c].iter().sum();
            let predicted: u64 = (0..4).map(|r| self.counts[r][c]).sum();
            if reference + predicted > 0 {
                // 2PR/(P+R) reduces to 2tp/(|ref| + |pred|)
                *slot = Some(2.0 * tp as f64 / (reference + predicted) as f64);
            }
        }
        out
    }
}

pub fn confusion_matrix(pairs: &[(UnifiedLabel, UnifiedLabel)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for &(r, p) in pairs {
        m.add(r, p);
    }
    m
}

pub fn macro_f1(matrix: &ConfusionMatrix) -> Result<f64, EvalError> {
    if matrix.total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    if let Some(exact) = exact_macro_f1(matrix) {
        return Ok(exact);
    }
    let present: Vec<f64> = matrix.per_class_f1().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Sums the per-class fractions `2tp / (|ref| + |pred|)` exactly and divides
/// once, so values such as 5/8 come out correctly rounded. `None` on overflow.
fn exact_macro_f1(m: &ConfusionMatrix) -> Option<f64> {
    let (mut num, mut den, mut classes) = (0u128, 1u128, 0u128);
    for c in 0..4 {
        let tp = m.counts[c][c] as u128;
        let d = m.counts[c].iter().sum::<u64>() as u128 + (0..4).map(|r| m.counts[r][c]).sum::<u64>() as u128;
        if d == 0 {
            continue;
        }
        classes += 1;
        let g = gcd(den, d);
        let lcm = den.checked_mul(d / g)?;
        num = num.checked_mul(lcm / den)?.checked_add((2 * tp).checked_mul(lcm / d)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    let den = den.checked_mul(classes)?;
    let r = gcd(num, den).max(1);
    let (num, den) = (num / r, den / r);
    // both fit in f64's 53-bit mantissa, so the division is correctly rounded
    (num < 1 << 53 && den < 1 << 53).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum AblationVariant {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-rag")]
    NoRetrieval,
    #[serde(rename = "no-petct")]
    NoPetCt,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [AblationVariant::Full, AblationVariant::NoRetrieval, AblationVariant::NoPetCt];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoRetrieval => "no-rag",
            AblationVariant::NoPetCt => "no-petct",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != AblationVariant::NoRetrieval
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(AblationVariant::Full),
            "no-rag" | "no-retrieval" | "norag" => Ok(AblationVariant::NoRetrieval),
            "no-petct" | "no-pet-ct" | "nopetct" => Ok(AblationVariant::NoPetCt),
            other => Err(format!("unknown variant \"{other}\" (expected full, no-rag or no-petct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub predicted: UnifiedLabel,
    pub reference: UnifiedLabel,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: AblationVariant,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub per_case: Vec<CaseRow>,
    /// Retrieval operations performed while evaluating this variant.
    pub retrieval_calls: u64,
    pub excluded: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference_scale: String,
    pub class_handling: String,
    pub labels: Vec<UnifiedLabel>,
    pub variants: Vec<VariantReport>,
}

impl AblationReport {
    pub fn variant(&self, v: AblationVariant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Tab-separated `variant, case_id, reference, predicted, confidence` rows.
    pub fn plot_tsv(&self) -> String {
        let mut out = String::from("variant\tcase_id\treference\tpredicted\tconfidence\n");
        for v in &self.variants {
            for row in &v.per_case {
                let conf = row.confidence.map(|c| format!("{c:.6}")).unwrap_or_default();
                out.push_str(&format!("{}\t{}\t{}\t{}\t{conf}\n", v.variant, row.case_id, row.reference, row.predicted));
            }
        }
        out
    }
}

/// Runs one variant over a cohort. Cases without valid reference scores are
/// excluded and reported; rows are ordered by case id.
pub fn run_ablation(cohort: &Cohort, variant: AblationVariant, engine: &Engine) -> Result<VariantReport, EvalError> {
    let mut excluded = Vec::new();
    let mut eligible: Vec<(&str, &PatientCase, UnifiedLabel)> = Vec::new();
    for c in &cohort.cases {
        let Some(scores) = c.case.reference_scores else {
            excluded.push(Finding::new(&c.case_id, "missing reference scores"));
            continue;
        };
        let invalid = validate_case(&c.case);
        if !invalid.is_empty() {
            for f in invalid {
                excluded.push(Finding::new(&c.case_id, f.to_string()));
            }
            continue;
        }
        match enneking_label(scores.enneking) {
            Ok(label) => eligible.push((&c.case_id, &c.case, label)),
            Err(e) => excluded.push(Finding::new(&c.case_id, e.to_string())),
        }
    }
    eligible.sort_by(|a, b| a.0.cmp(b.0));

    let width = engine.max_in_flight().max(1);
    let opts = PredictOptions { variant, k: None };
    let mut outcomes = Vec::with_capacity(eligible.len());
    for group in eligible.chunks(width) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|(_, case, _)| s.spawn(move || engine.predict_traced(case, opts))).collect();
            handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
        });
        for ((id, _, reference), r) in group.iter().zip(results) {
            let p = r.map_err(|e| EvalError::Pipeline { case_id: id.to_string(), source: Box::new(e) })?;
            outcomes.push((id.to_string(), *reference, p));
        }
    }

    let mut matrix = ConfusionMatrix::default();
    let mut per_case = Vec::new();
    let mut retrieval_calls = 0;
    for (case_id, reference, p) in outcomes {
        matrix.add(reference, p.result.label);
        retrieval_calls += p.retrieval_calls;
        per_case.push(CaseRow { case_id, predicted: p.result.label, reference, confidence: p.result.confidence });
    }
    let macro_f1 = if matrix.total == 0 { 0.0 } else { macro_f1(&matrix)? };
    if !excluded.is_empty() {
        tracing::warn!(variant = %variant, excluded = excluded.len(), "cases excluded from evaluation");
    }
    Ok(VariantReport { variant, macro_f1, confusion: matrix, per_case, retrieval_calls, excluded })
}

pub fn evaluate(cohort: &Cohort, variants: &[AblationVariant], engine: &Engine) -> Result<AblationReport, EvalError> {
    let variants = variants.iter().map(|&v| run_ablation(cohort, v, engine)).collect::<Result<_, _>>()?;
    Ok(AblationReport {
        reference_scale: "enneking".into(),
        class_handling: CLASS_HANDLING.into(),
        labels: UnifiedLabel::ALL.to_vec(),
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use UnifiedLabel::*;

    #[test]
    fn quoted_band_edges() {
        assert_eq!(lefs_band(20).unwrap(), LefsBand::Severe);
        assert_eq!(lefs_band(21).unwrap(), LefsBand::Moderate);
        assert_eq!(lefs_band(61).unwrap(), LefsBand::MildOrNormal);
        assert_eq!(enneking_label(9).unwrap(), Poor);
        assert_eq!(enneking_label(18).unwrap(), Good);
        assert_eq!(enneking_label(26).unwrap(), Excellent);
        assert!(lefs_band(-1).is_err() && lefs_band(81).is_err());
        assert!(enneking_label(31).is_err());
    }

    #[test]
    fn lefs_unification_is_monotone_bijection() {
        let mapped: Vec<_> = LefsBand::ALL.iter().map(|&b| unify_lefs(b)).collect();
        assert_eq!(mapped, UnifiedLabel::ALL);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[]);
        assert_eq!(m.total, 0);
        assert!(macro_f1(&m).is_err());
        let m = confusion_matrix(&[(Poor, Fair), (Fair, Fair)]);
        assert_eq!(m.get(Poor, Fair), 1);
        assert_eq!(m.get(Fair, Fair), 1);
        assert_eq!(m.total, 2);
    }

    #[test]
    fn one_fair_to_good_error() {
        let mut pairs: Vec<_> = UnifiedLabel::ALL.iter().flat_map(|&l| [(l, l), (l, l)]).collect();
        pairs[2].1 = Good;
        let f1 = macro_f1(&confusion_matrix(&pairs)).unwrap();
        assert!((f1 - (1.0 + 2.0 / 3.0 + 0.8 + 1.0) / 4.0).abs() < 1e-12);
        assert!((f1 - 0.8667).abs() < 1e-4);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = confusion_matrix(&[(Poor, Poor), (Good, Good)]);
        assert_eq!(macro_f1(&m).unwrap(), 1.0);
        let m = confusion_matrix(&[(Poor, Poor), (Good, Fair)]);
        // Poor 1, Fair 0, Good 0 → 1/3
        assert!((macro_f1(&m).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn variant_names() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("partial".parse::<AblationVariant>().is_err());
    }
}
