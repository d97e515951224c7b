//! Seeded synthetic cohorts and cohort directory I/O.
//!
//! A cohort directory holds one `case-*.json` per patient plus an optional
//! `ground_truth.json`. Generated case `i` follows archetype `i % 8`, so a
//! cohort of 8 contains two cases of every reference label. The seed varies
//! wording, dates, secondary indicators and numeric values inside ranges that
//! keep each archetype's clinical profile intact.

use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::extraction::WBC_UNIT;
use crate::model::{ClinicalDocument, IndicatorKey, Modality, PatientCase, ReferenceScores, UnifiedLabel, Value};

pub const ARCHETYPE_COUNT: usize = 8;
const MIN_COHORT: usize = 4;
const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCase {
    pub case_id: String,
    pub case: PatientCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedIndicator {
    pub key: IndicatorKey,
    pub value: Value,
}

/// What the generator wrote into a case, for checking extraction and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub case_id: String,
    pub patient_id: String,
    pub archetype: usize,
    pub reference_label: UnifiedLabel,
    pub indicators: Vec<ExpectedIndicator>,
}

impl GroundTruth {
    pub fn expected(&self, key: IndicatorKey) -> Option<&Value> {
        self.indicators.iter().find(|e| e.key == key).map(|e| &e.value)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub cases: Vec<CohortCase>,
    #[serde(default)]
    pub ground_truth: Vec<GroundTruth>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn case(&self, case_id: &str) -> Option<&PatientCase> {
        self.cases.iter().find(|c| c.case_id == case_id).map(|c| &c.case)
    }
}

struct Archetype {
    label: UnifiedLabel,
    debridements: i64,
    /// `None` means no PET-CT report is produced.
    shift: Option<bool>,
    wbc: (f64, f64),
    implant_removed: bool,
    suv_pre: (f64, f64),
    suv_post: (f64, f64),
    index_interval: (i64, i64),
}

const ARCHETYPES: [Archetype; ARCHETYPE_COUNT] = [
    Archetype {
        label: UnifiedLabel::Poor,
        debridements: 3,
        shift: Some(true),
        wbc: (12.5, 15.0),
        implant_removed: true,
        suv_pre: (8.5, 9.5),
        suv_post: (7.4, 8.2),
        index_interval: (80, 120),
    },
    Archetype {
        label: UnifiedLabel::Fair,
        debridements: 2,
        shift: Some(false),
        wbc: (10.8, 12.5),
        implant_removed: true,
        suv_pre: (6.8, 7.6),
        suv_post: (4.6, 5.4),
        index_interval: (45, 90),
    },
    Archetype {
        label: UnifiedLabel::Good,
        debridements: 1,
        shift: None,
        wbc: (6.5, 9.0),
        implant_removed: true,
        suv_pre: (0.0, 0.0),
        suv_post: (0.0, 0.0),
        index_interval: (90, 150),
    },
    Archetype {
        label: UnifiedLabel::Excellent,
        debridements: 1,
        shift: Some(false),
        wbc: (5.0, 7.5),
        implant_removed: true,
        suv_pre: (9.5, 11.5),
        suv_post: (1.5, 3.0),
        index_interval: (35, 60),
    },
    Archetype {
        label: UnifiedLabel::Poor,
        debridements: 2,
        shift: Some(false),
        wbc: (11.5, 14.0),
        implant_removed: false,
        suv_pre: (6.0, 6.5),
        suv_post: (6.7, 7.2),
        index_interval: (120, 180),
    },
    Archetype {
        label: UnifiedLabel::Fair,
        debridements: 2,
        shift: Some(false),
        wbc: (8.5, 9.8),
        implant_removed: true,
        suv_pre: (6.4, 6.8),
        suv_post: (7.0, 7.4),
        index_interval: (60, 100),
    },
    Archetype {
        label: UnifiedLabel::Good,
        debridements: 2,
        shift: Some(false),
        wbc: (7.5, 9.5),
        implant_removed: true,
        suv_pre: (8.4, 9.2),
        suv_post: (5.6, 6.4),
        index_interval: (60, 90),
    },
    Archetype {
        label: UnifiedLabel::Excellent,
        debridements: 2,
        shift: Some(false),
        wbc: (6.0, 8.0),
        implant_removed: true,
        suv_pre: (9.0, 10.0),
        suv_post: (2.5, 3.5),
        index_interval: (14, 28),
    },
];

const AETIOLOGY: [(&str, &str); 3] = [
    ("post-traumatic osteomyelitis", "post-traumatic"),
    ("fracture-related infection", "fracture-related infection"),
    ("haematogenous osteomyelitis", "haematogenous"),
];
const STRATEGY: [(&str, &str); 3] = [
    ("Two-stage reconstruction with the induced-membrane technique was planned.", "two-stage reconstruction"),
    ("Segmental defect managed by bone transport.", "bone transport"),
    ("Single-stage reconstruction was performed.", "single-stage reconstruction"),
];
const BONES: [&str; 4] = ["tibia", "femur", "calcaneus", "humerus"];
const CM_TYPES: [&str; 4] = ["I", "II", "III", "IV"];
const NUMBER_WORDS: [&str; 5] = ["No", "One", "Two", "Three", "Four"];

fn tenths(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo..=hi) * 10.0).round() / 10.0
}

fn score_range(label: UnifiedLabel) -> ((i32, i32), (i32, i32)) {
    // (LEFS, Enneking) inclusive ranges inside the label's band
    match label {
        UnifiedLabel::Poor => ((5, 20), (2, 9)),
        UnifiedLabel::Fair => ((21, 40), (10, 17)),
        UnifiedLabel::Good => ((41, 60), (18, 25)),
        UnifiedLabel::Excellent => ((61, 78), (26, 30)),
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty table")
}

fn synth_case(rng: &mut ChaCha8Rng, i: usize) -> (CohortCase, GroundTruth) {
    let a = &ARCHETYPES[i % ARCHETYPE_COUNT];
    let case_id = format!("case-{i:02}");
    let patient_id = format!("syn-{i:02}");
    let mut expected = Vec::new();
    let mut put = |key, value| expected.push(ExpectedIndicator { key, value });

    let bone = *pick(rng, &BONES);
    let &(aetio_phrase, aetio) = pick(rng, &AETIOLOGY);
    let cm_type = *pick(rng, &CM_TYPES);
    let cm_host = *pick(rng, &["A", "B"]);
    put(IndicatorKey::Aetiopathogenesis, Value::Text { text: aetio.into() });
    put(IndicatorKey::CiernyMaderClass, Value::Text { text: format!("{cm_type}-{cm_host}") });

    let debr = a.debridements;
    let debr_sentence = match rng.gen_range(0..3) {
        0 if debr == 1 => "One prior debridement was documented.".to_string(),
        0 => format!("{} prior debridements were documented.", NUMBER_WORDS[debr as usize]),
        1 => format!("The patient had {debr} previous debridement{}.", if debr == 1 { "" } else { "s" }),
        _ => format!("Prior debridements: {debr}."),
    };
    put(IndicatorKey::PriorDebridementCount, Value::Count { count: debr });

    let implant_sentence = match (a.implant_removed, rng.gen_bool(0.5)) {
        (true, true) => "The implant was removed at the index debridement.",
        (true, false) => "Removal of the infected hardware was performed.",
        (false, true) => "The plate was retained.",
        (false, false) => "Hardware was left in situ.",
    };
    put(IndicatorKey::ImplantRemovalStatus, Value::Boolean { value: a.implant_removed });

    let index_days = rng.gen_range(a.index_interval.0..=a.index_interval.1);
    let index_sentence = if rng.gen_bool(0.5) {
        format!("Index-to-debridement interval: {index_days} days.")
    } else {
        format!("Debridement was performed {index_days} days after the index surgery.")
    };
    put(IndicatorKey::IndexToDebridementInterval, Value::Interval { days: index_days });

    let &(strategy_sentence, strategy) = pick(rng, &STRATEGY);
    put(IndicatorKey::SurgicalStrategy, Value::Text { text: strategy.into() });

    let revision_days = rng.gen_range(40..=120);
    let revision_sentence = if rng.gen_bool(0.5) {
        format!("Revision surgery followed {revision_days} days after the last debridement.")
    } else {
        format!("Debridement-to-revision interval: {revision_days} days.")
    };
    put(IndicatorKey::DebridementToRevisionInterval, Value::Interval { days: revision_days });

    let wbc = tenths(rng, a.wbc);
    let wbc_sentence = match rng.gen_range(0..3) {
        0 => format!("WBC {wbc:.1} ×10⁹/L at admission."),
        1 => format!("White cell count of {wbc:.1} ×10⁹/L."),
        _ => format!("WBC {}/µL at admission.", (wbc * 1000.0).round() as i64),
    };
    put(IndicatorKey::WbcCount, Value::Number { value: wbc, unit: WBC_UNIT.into() });

    let mut history = vec![debr_sentence, implant_sentence.to_string(), index_sentence, strategy_sentence.to_string(), revision_sentence];

    let start = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date") + Duration::days(rng.gen_range(0..700));
    let mut documents = Vec::new();
    let mut pet = None;
    if let Some(shift) = a.shift {
        let interventions = rng.gen_range(0..=3i64);
        history.push(format!(
            "{} intervention{} between PET-CT and reconstruction.",
            NUMBER_WORDS[interventions as usize],
            if interventions == 1 { "" } else { "s" }
        ));
        put(IndicatorKey::InterventionsBetweenPetCtAndReconstruction, Value::Count { count: interventions });

        let pre = tenths(rng, a.suv_pre);
        let post = tenths(rng, a.suv_post);
        let suv_sentence = match rng.gen_range(0..3) {
            0 => format!("SUVmax {pre:.1} / {post:.1}."),
            1 => format!("SUVmax changed from {pre:.1} to {post:.1} after debridement."),
            _ => format!("SUVmax pre-debridement {pre:.1}, post-debridement {post:.1}."),
        };
        put(IndicatorKey::SuvMaxPrePost, Value::PrePostPair { pre, post, unit: String::new() });
        let tlg_pre = tenths(rng, (80.0, 250.0));
        let tlg_post = tenths(rng, (20.0, 79.0));
        put(IndicatorKey::TlgPrePost, Value::PrePostPair { pre: tlg_pre, post: tlg_post, unit: String::new() });
        let shift_sentence = match (shift, rng.gen_bool(0.5)) {
            (true, true) => "Shift in SUVmax location to the adjacent metaphysis.",
            (true, false) => "The dominant metabolic focus migrated proximally.",
            (false, true) => "No shift in SUVmax location.",
            (false, false) => "SUVmax location unchanged.",
        };
        put(IndicatorKey::SuvMaxLocationShift, Value::Boolean { value: shift });
        pet = Some(ClinicalDocument {
            id: format!("{patient_id}-petct"),
            modality: Modality::PetCtReport,
            timestamp: Some(start + Duration::days(rng.gen_range(5..30))),
            raw_text: format!("FDG PET-CT of the {bone}.\n{suv_sentence}\nTLG {tlg_pre:.1} / {tlg_post:.1}.\n{shift_sentence}"),
            image_ref: None,
        });
    }

    documents.push(ClinicalDocument {
        id: format!("{patient_id}-ehr"),
        modality: Modality::EhrRecord,
        timestamp: Some(start),
        raw_text: format!(
            "Diagnosis: Chronic {aetio_phrase} of the {bone}. Cierny-Mader type {cm_type}, host {cm_host}.\n\
             Intervention history: {}\nLaboratory findings: {wbc_sentence}",
            history.join(" ")
        ),
        image_ref: None,
    });
    documents.extend(pet);
    let aid = *pick(rng, &["without walking aids", "with a single crutch", "with two crutches", "with a frame"]);
    documents.push(ClinicalDocument {
        id: format!("{patient_id}-followup"),
        modality: Modality::FollowUpNote,
        timestamp: Some(start + Duration::days(rng.gen_range(180..400))),
        raw_text: format!("Postoperative evolution: Wound healed. The patient mobilises {aid}."),
        image_ref: None,
    });

    let ((lefs_lo, lefs_hi), (enn_lo, enn_hi)) = score_range(a.label);
    let scores = ReferenceScores { lefs: rng.gen_range(lefs_lo..=lefs_hi), enneking: rng.gen_range(enn_lo..=enn_hi) };

    let case = PatientCase { patient_id: patient_id.clone(), documents, reference_scores: Some(scores) };
    let truth = GroundTruth {
        case_id: case_id.clone(),
        patient_id,
        archetype: i % ARCHETYPE_COUNT,
        reference_label: a.label,
        indicators: expected,
    };
    (CohortCase { case_id, case }, truth)
}

/// Deterministic for a given `(seed, n)`; `n` must be at least 4.
pub fn generate_synthetic_cohort(seed: u64, n: usize) -> Result<Cohort, EvalError> {
    if n < MIN_COHORT {
        return Err(EvalError::CohortTooSmall { min: MIN_COHORT, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cases, ground_truth) = (0..n).map(|i| synth_case(&mut rng, i)).unzip();
    Ok(Cohort { cases, ground_truth })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io(dir))?;
    for c in &cohort.cases {
        let path = dir.join(format!("{}.json", c.case_id));
        let json = serde_json::to_string_pretty(&c.case).expect("case serializes") + "\n";
        fs::write(&path, json).map_err(io(&path))?;
    }
    if !cohort.ground_truth.is_empty() {
        let path = dir.join(GROUND_TRUTH_FILE);
        let json = serde_json::to_string_pretty(&cohort.ground_truth).expect("ground truth serializes") + "\n";
        fs::write(&path, json).map_err(io(&path))?;
    }
    Ok(())
}

/// Loads every `*.json` case in `dir` (by file name order); the file stem is the case id.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort, EvalError> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut cohort = Cohort::default();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        if path.file_name().is_some_and(|n| n == GROUND_TRUTH_FILE) {
            cohort.ground_truth = serde_json::from_str(&text)
                .map_err(|e| EvalError::Cohort(format!("{}: {e}", path.display())))?;
            continue;
        }
        let case: PatientCase =
            serde_json::from_str(&text).map_err(|e| EvalError::Cohort(format!("{}: {e}", path.display())))?;
        let case_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        cohort.cases.push(CohortCase { case_id, case });
    }
    if cohort.cases.is_empty() {
        return Err(EvalError::Cohort(format!("no case files in {}", dir.display())));
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{enneking_label, lefs_band, unify_lefs};
    use crate::extraction::{chunk_case, extract_with_rules, RuleSet, SegmentationPolicy};

    #[test]
    fn balanced_and_deterministic() {
        let a = generate_synthetic_cohort(42, 8).unwrap();
        let b = generate_synthetic_cohort(42, 8).unwrap();
        assert_eq!(a, b);
        for label in UnifiedLabel::ALL {
            assert_eq!(a.ground_truth.iter().filter(|g| g.reference_label == label).count(), 2);
        }
        for (c, g) in a.cases.iter().zip(&a.ground_truth) {
            let s = c.case.reference_scores.unwrap();
            assert_eq!(enneking_label(s.enneking).unwrap(), g.reference_label);
            assert_eq!(unify_lefs(lefs_band(s.lefs).unwrap()), g.reference_label);
        }
        assert_ne!(a, generate_synthetic_cohort(43, 8).unwrap());
        assert!(generate_synthetic_cohort(1, 3).is_err());
    }

    #[test]
    fn rules_recover_every_planted_indicator() {
        let rules = RuleSet::default();
        for seed in 0..25 {
            let cohort = generate_synthetic_cohort(seed, 16).unwrap();
            for (c, g) in cohort.cases.iter().zip(&cohort.ground_truth) {
                let chunks = chunk_case(&c.case, &SegmentationPolicy::default()).unwrap();
                let all: Vec<_> = c.case.documents.iter().flat_map(|d| chunks[&d.id].clone()).collect();
                let set = extract_with_rules(&all, &rules);
                for key in IndicatorKey::ALL {
                    let want = g.expected(key).cloned().unwrap_or(Value::Missing);
                    assert_eq!(set.value(key), &want, "seed {seed} {} {key:?}", c.case_id);
                }
            }
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_synthetic_cohort(7, 5).unwrap();
        write_cohort(&cohort, dir.path()).unwrap();
        assert_eq!(load_cohort(dir.path()).unwrap(), cohort);
    }
}
