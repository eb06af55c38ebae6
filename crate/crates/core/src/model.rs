//! Anonymized metadata schema shared by every Grid-box service.
//!
//! Records are plain value types. Validation never rejects on the first
//! problem: every `validate_*` returns the full list of violated rules so an
//! operator can fix an ingest batch in one pass.
//!
//! The module also owns the query field registry: every `patient.*`,
//! `exam.*`, `image.*` and `acq.*` name accepted by the query language maps to
//! exactly one record field here.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid year-month {0:?}")]
    BadYearMonth(String),
    #[error("birth year {birth_year} is after exam year {exam_year}")]
    BirthAfterExam { birth_year: i64, exam_year: i64 },
}

macro_rules! open_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant,)+
            /// A value outside the closed set, kept so validation can report it.
            Unknown(String),
        }

        impl $name {
            pub fn as_str(&self) -> &str {
                match self {
                    $(Self::$variant => $text,)+
                    Self::Unknown(s) => s,
                }
            }

            pub fn parse(s: &str) -> Self {
                match s {
                    $($text => Self::$variant,)+
                    other => Self::Unknown(other.to_string()),
                }
            }

            pub fn is_known(&self) -> bool {
                !matches!(self, Self::Unknown(_))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Ok(Self::parse(&s))
            }
        }
    };
}

open_enum!(
    /// Breast side.
    Laterality { Left => "L", Right => "R" }
);

open_enum!(
    /// Projection: cranio-caudal or medio-lateral oblique.
    View { Cc => "CC", Mlo => "MLO" }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub kvp: f64,
    pub mas: f64,
    pub compression_n: f64,
    pub thickness_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub pseudonym_id: String,
    pub age_at_exam: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hrt_use: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_history: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical_history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diet_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parity: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_kg: Option<f64>,
    pub site_id: String,
}

/// One screening visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exam {
    pub exam_id: String,
    /// Pseudonym of the examined patient.
    pub patient: String,
    /// `YYYY-MM`; exam days are never stored.
    pub exam_year_month: String,
    pub site_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MammogramImage {
    pub image_id: String,
    /// Owning exam id.
    pub exam: String,
    pub laterality: Laterality,
    pub view: View,
    pub width_px: u32,
    pub height_px: u32,
    pub bits_per_sample: u8,
    pub lfn: String,
    pub guid: String,
    pub acquisition: AcquisitionParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
}

impl MammogramImage {
    /// Blob size implied by the geometry, or `None` for an unsupported depth.
    pub fn expected_blob_size(&self) -> Option<u64> {
        bytes_per_sample(self.bits_per_sample)
            .map(|b| self.width_px as u64 * self.height_px as u64 * b)
    }
}

pub fn bytes_per_sample(bits: u8) -> Option<u64> {
    match bits {
        8 => Some(1),
        16 => Some(2),
        _ => None,
    }
}

/// Canonical tagged record, as written to `meta.log` and carried in frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Record {
    Patient(PatientRecord),
    Exam(Exam),
    Image(MammogramImage),
}

impl Record {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("records always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Outcome of a validation pass: empty means ok.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.message.as_str()).collect()
    }

    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(Violation::new(field, message));
    }

    fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }
}

pub fn is_pseudonym(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

pub fn is_lower_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

pub fn validate_patient(record: &PatientRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !is_pseudonym(&record.pseudonym_id) {
        report.push("pseudonym_id", "pseudonym_id is not 16 lowercase hex characters");
    }
    if !(0..=130).contains(&record.age_at_exam) {
        report.push("age_at_exam", "age_at_exam out of range");
    }
    if matches!(record.parity, Some(p) if p < 0) {
        report.push("parity", "parity is negative");
    }
    if let Some(h) = record.height_cm {
        if !(h.is_finite() && h > 0.0) {
            report.push("height_cm", "height_cm must be positive");
        }
    }
    if let Some(w) = record.weight_kg {
        if !(w.is_finite() && w > 0.0) {
            report.push("weight_kg", "weight_kg must be positive");
        }
    }
    if record.site_id.is_empty() {
        report.push("site_id", "site_id is empty");
    }
    report
}

pub fn validate_exam(exam: &Exam) -> ValidationReport {
    let mut report = ValidationReport::default();
    if exam.exam_id.is_empty() {
        report.push("exam_id", "exam_id is empty");
    }
    if !is_pseudonym(&exam.patient) {
        report.push("patient", "patient reference is not a pseudonym");
    }
    if YearMonth::parse(&exam.exam_year_month).is_err() {
        report.push("exam_year_month", "exam_year_month is not a valid YYYY-MM");
    }
    report
}

pub fn validate_acquisition(acq: &AcquisitionParams) -> ValidationReport {
    const LIMIT: f64 = 1e4;
    let mut report = ValidationReport::default();
    let positive = [
        ("acquisition.kvp", acq.kvp),
        ("acquisition.mas", acq.mas),
        ("acquisition.thickness_mm", acq.thickness_mm),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0 && v < LIMIT) {
            report.push(name, format!("{name} outside (0, 10000)"));
        }
    }
    let c = acq.compression_n;
    if !(c.is_finite() && (0.0..LIMIT).contains(&c)) {
        report.push("acquisition.compression_n", "acquisition.compression_n outside [0, 10000)");
    }
    report
}

/// Checks enum fields, geometry and the blob size equation.
pub fn validate_image(image: &MammogramImage, blob_size: u64) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !image.view.is_known() {
        report.push("view", "unknown view");
    }
    if !image.laterality.is_known() {
        report.push("laterality", "unknown laterality");
    }
    if image.width_px == 0 || image.height_px == 0 {
        report.push("width_px", "image dimensions must be positive");
    }
    match image.expected_blob_size() {
        None => report.push("bits_per_sample", "bits_per_sample must be 8 or 16"),
        Some(expected) if expected != blob_size => report.push(
            "blob",
            format!("blob size mismatch (expected {expected})"),
        ),
        Some(_) => {}
    }
    if !is_lower_hex(&image.guid, 32) {
        report.push("guid", "guid is not 32 lowercase hex characters");
    }
    if let Some(d) = image.density {
        if !(0.0..=1.0).contains(&d) {
            report.push("density", "density outside [0, 1]");
        }
    }
    report.extend(validate_acquisition(&image.acquisition));
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct YearMonth {
    pub year: i64,
    pub month: u8,
}

impl YearMonth {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::BadYearMonth(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 || !y.bytes().chain(m.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let year: i64 = y.parse().map_err(|_| bad())?;
        let month: u8 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self { year, month })
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Age in whole years by year subtraction; the birth month is never ingested.
pub fn age_at_exam(birth_year: i64, exam_year_month: &str) -> Result<i64, ModelError> {
    let ym = YearMonth::parse(exam_year_month)?;
    if birth_year > ym.year {
        return Err(ModelError::BirthAfterExam {
            birth_year,
            exam_year: ym.year,
        });
    }
    Ok(ym.year - birth_year)
}

// ---------------------------------------------------------------------------
// Field registry

/// Which record a query field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Patient,
    Exam,
    Image,
    /// Nested `acquisition` object of an image.
    Acq,
}

impl Scope {
    pub fn prefix(self) -> &'static str {
        match self {
            Scope::Patient => "patient",
            Scope::Exam => "exam",
            Scope::Image => "image",
            Scope::Acq => "acq",
        }
    }

    /// Join depth: patient 0, exam 1, image 2.
    pub fn depth(self) -> u8 {
        match self {
            Scope::Patient => 0,
            Scope::Exam => 1,
            Scope::Image | Scope::Acq => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Int,
    Num,
    Str,
    Bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldDef {
    pub scope: Scope,
    /// Key inside the record (inside `acquisition` for [`Scope::Acq`]).
    pub key: &'static str,
    pub ty: FieldType,
}

impl FieldDef {
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.scope.prefix(), self.key)
    }
}

const fn field(scope: Scope, key: &'static str, ty: FieldType) -> FieldDef {
    FieldDef { scope, key, ty }
}

pub static FIELDS: &[FieldDef] = &[
    field(Scope::Patient, "pseudonym_id", FieldType::Str),
    field(Scope::Patient, "age_at_exam", FieldType::Int),
    field(Scope::Patient, "hrt_use", FieldType::Bool),
    field(Scope::Patient, "family_history", FieldType::Bool),
    field(Scope::Patient, "clinical_history", FieldType::Str),
    field(Scope::Patient, "diet_code", FieldType::Str),
    field(Scope::Patient, "parity", FieldType::Int),
    field(Scope::Patient, "height_cm", FieldType::Num),
    field(Scope::Patient, "weight_kg", FieldType::Num),
    field(Scope::Patient, "site_id", FieldType::Str),
    field(Scope::Exam, "exam_id", FieldType::Str),
    field(Scope::Exam, "patient", FieldType::Str),
    field(Scope::Exam, "exam_year_month", FieldType::Str),
    field(Scope::Exam, "site_id", FieldType::Str),
    field(Scope::Image, "image_id", FieldType::Str),
    field(Scope::Image, "exam", FieldType::Str),
    field(Scope::Image, "laterality", FieldType::Str),
    field(Scope::Image, "view", FieldType::Str),
    field(Scope::Image, "width_px", FieldType::Int),
    field(Scope::Image, "height_px", FieldType::Int),
    field(Scope::Image, "bits_per_sample", FieldType::Int),
    field(Scope::Image, "lfn", FieldType::Str),
    field(Scope::Image, "guid", FieldType::Str),
    field(Scope::Image, "density", FieldType::Num),
    field(Scope::Acq, "kvp", FieldType::Num),
    field(Scope::Acq, "mas", FieldType::Num),
    field(Scope::Acq, "compression_n", FieldType::Num),
    field(Scope::Acq, "thickness_mm", FieldType::Num),
];

/// Resolves a qualified name such as `image.view`.
pub fn lookup_field(name: &str) -> Option<&'static FieldDef> {
    let (prefix, key) = name.split_once('.')?;
    FIELDS
        .iter()
        .find(|f| f.scope.prefix() == prefix && f.key == key)
}

/// A borrowed field value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar<'a> {
    Int(i64),
    Num(f64),
    Str(&'a str),
    Bool(bool),
}

impl PatientRecord {
    pub fn field(&self, key: &str) -> Option<Scalar<'_>> {
        match key {
            "pseudonym_id" => Some(Scalar::Str(&self.pseudonym_id)),
            "age_at_exam" => Some(Scalar::Int(self.age_at_exam)),
            "hrt_use" => self.hrt_use.map(Scalar::Bool),
            "family_history" => self.family_history.map(Scalar::Bool),
            "clinical_history" => self.clinical_history.as_deref().map(Scalar::Str),
            "diet_code" => self.diet_code.as_deref().map(Scalar::Str),
            "parity" => self.parity.map(Scalar::Int),
            "height_cm" => self.height_cm.map(Scalar::Num),
            "weight_kg" => self.weight_kg.map(Scalar::Num),
            "site_id" => Some(Scalar::Str(&self.site_id)),
            _ => None,
        }
    }
}

impl Exam {
    pub fn field(&self, key: &str) -> Option<Scalar<'_>> {
        match key {
            "exam_id" => Some(Scalar::Str(&self.exam_id)),
            "patient" => Some(Scalar::Str(&self.patient)),
            "exam_year_month" => Some(Scalar::Str(&self.exam_year_month)),
            "site_id" => Some(Scalar::Str(&self.site_id)),
            _ => None,
        }
    }
}

impl MammogramImage {
    pub fn field(&self, key: &str) -> Option<Scalar<'_>> {
        match key {
            "image_id" => Some(Scalar::Str(&self.image_id)),
            "exam" => Some(Scalar::Str(&self.exam)),
            "laterality" => Some(Scalar::Str(self.laterality.as_str())),
            "view" => Some(Scalar::Str(self.view.as_str())),
            "width_px" => Some(Scalar::Int(self.width_px.into())),
            "height_px" => Some(Scalar::Int(self.height_px.into())),
            "bits_per_sample" => Some(Scalar::Int(self.bits_per_sample.into())),
            "lfn" => Some(Scalar::Str(&self.lfn)),
            "guid" => Some(Scalar::Str(&self.guid)),
            "density" => self.density.map(Scalar::Num),
            _ => None,
        }
    }
}

impl AcquisitionParams {
    pub fn field(&self, key: &str) -> Option<Scalar<'_>> {
        match key {
            "kvp" => Some(Scalar::Num(self.kvp)),
            "mas" => Some(Scalar::Num(self.mas)),
            "compression_n" => Some(Scalar::Num(self.compression_n)),
            "thickness_mm" => Some(Scalar::Num(self.thickness_mm)),
            _ => None,
        }
    }
}

/// Fully populated records, used to check the registry against the schema.
pub fn sample_records() -> (PatientRecord, Exam, MammogramImage) {
    let patient = PatientRecord {
        pseudonym_id: "0123456789abcdef".into(),
        age_at_exam: 54,
        hrt_use: Some(true),
        family_history: Some(false),
        clinical_history: Some("none".into()),
        diet_code: Some("med".into()),
        parity: Some(2),
        height_cm: Some(165.0),
        weight_kg: Some(62.5),
        site_id: "udine".into(),
    };
    let exam = Exam {
        exam_id: "e0".into(),
        patient: patient.pseudonym_id.clone(),
        exam_year_month: "2004-05".into(),
        site_id: "udine".into(),
    };
    let image = MammogramImage {
        image_id: "i0".into(),
        exam: "e0".into(),
        laterality: Laterality::Left,
        view: View::Cc,
        width_px: 4,
        height_px: 4,
        bits_per_sample: 8,
        lfn: "/mgvo/udine/x/e0/i0.img".into(),
        guid: "0".repeat(32),
        acquisition: AcquisitionParams {
            kvp: 28.0,
            mas: 63.0,
            compression_n: 120.0,
            thickness_mm: 45.0,
        },
        density: Some(0.25),
    };
    (patient, exam, image)
}

/// Startup check: the registry names every schema field exactly once and
/// every registered field resolves on a populated record.
pub fn check_field_registry() -> Result<(), String> {
    let (p, e, i) = sample_records();
    let mut schema = BTreeSet::new();
    for (scope, value) in [
        (Scope::Patient, serde_json::to_value(&p)),
        (Scope::Exam, serde_json::to_value(&e)),
        (Scope::Image, serde_json::to_value(&i)),
    ] {
        let value = value.map_err(|err| err.to_string())?;
        for (k, v) in value.as_object().into_iter().flatten() {
            if scope == Scope::Image && k == "acquisition" {
                for nested in v.as_object().into_iter().flatten().map(|(k, _)| k) {
                    schema.insert(format!("acq.{nested}"));
                }
            } else {
                schema.insert(format!("{}.{k}", scope.prefix()));
            }
        }
    }
    let mut registry = BTreeSet::new();
    for f in FIELDS {
        let name = f.qualified();
        if !registry.insert(name.clone()) {
            return Err(format!("field {name} registered twice"));
        }
        let resolved = match f.scope {
            Scope::Patient => p.field(f.key),
            Scope::Exam => e.field(f.key),
            Scope::Image => i.field(f.key),
            Scope::Acq => i.acquisition.field(f.key),
        };
        match (resolved, f.ty) {
            (Some(Scalar::Int(_)), FieldType::Int)
            | (Some(Scalar::Num(_)), FieldType::Num)
            | (Some(Scalar::Str(_)), FieldType::Str)
            | (Some(Scalar::Bool(_)), FieldType::Bool) => {}
            (other, ty) => return Err(format!("field {name} resolves to {other:?}, declared {ty:?}")),
        }
    }
    if schema != registry {
        let missing: Vec<_> = schema.difference(&registry).collect();
        let extra: Vec<_> = registry.difference(&schema).collect();
        return Err(format!("registry mismatch: unregistered {missing:?}, unknown {extra:?}"));
    }
    Ok(())
}
