use serde::{Deserialize, Serialize};

use super::mgif::RawCase;
use super::IngestError;
use crate::digest::{guid_for, hmac_sha256_hex};
use crate::model::{
    age_at_exam, validate_exam, validate_image, validate_patient, Exam, MammogramImage,
    PatientRecord, Record, ValidationReport,
};

/// Re-identification entry. Lives only in the owning node's link map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEntry {
    pub pseudonym_id: String,
    pub patient_id: String,
    pub patient_name: String,
    pub created_at: u64,
}

/// The shareable half of an anonymized case.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedCase {
    pub patient: PatientRecord,
    pub exam: Exam,
    pub image: MammogramImage,
}

impl AnonymizedCase {
    pub fn records(&self) -> [Record; 3] {
        [
            Record::Patient(self.patient.clone()),
            Record::Exam(self.exam.clone()),
            Record::Image(self.image.clone()),
        ]
    }
}

/// First 16 hex characters of HMAC-SHA-256(node_secret, patient_id).
pub fn pseudonym_for(node_secret: &[u8], patient_id: &str) -> String {
    let mut hex = hmac_sha256_hex(node_secret, patient_id.as_bytes());
    hex.truncate(16);
    hex
}

/// Keyed exam identifier, stable for repeat ingests of the same visit.
fn exam_id_for(node_secret: &[u8], patient_id: &str, exam_date: &str) -> String {
    let mac = hmac_sha256_hex(node_secret, format!("exam|{patient_id}|{exam_date}").as_bytes());
    format!("ex{}", &mac[..12])
}

pub fn image_lfn(site_id: &str, pseudonym: &str, exam_id: &str, image_id: &str) -> String {
    format!("/mgvo/{site_id}/{pseudonym}/{exam_id}/{image_id}.img")
}

/// Strips identifying fields, coarsens the exam date and derives identifiers.
pub fn anonymize(
    raw: &RawCase,
    node_secret: &[u8],
    site_id: &str,
    created_at: u64,
) -> Result<(AnonymizedCase, LinkEntry), IngestError> {
    let id = &raw.identifying;
    let exam_year_month = raw.exam_date[..7].to_string();
    let age = age_at_exam(id.birth_year, &exam_year_month).map_err(IngestError::Domain)?;
    let pseudonym_id = pseudonym_for(node_secret, &id.patient_id);
    let c = &raw.clinical;
    let patient = PatientRecord {
        pseudonym_id: pseudonym_id.clone(),
        age_at_exam: age,
        hrt_use: c.hrt_use,
        family_history: c.family_history,
        clinical_history: c.clinical_history.clone(),
        diet_code: c.diet_code.clone(),
        parity: c.parity,
        height_cm: c.height_cm,
        weight_kg: c.weight_kg,
        site_id: site_id.to_string(),
    };
    let exam = Exam {
        exam_id: exam_id_for(node_secret, &id.patient_id, &raw.exam_date),
        patient: pseudonym_id.clone(),
        exam_year_month,
        site_id: site_id.to_string(),
    };
    let guid = guid_for(&raw.pixels);
    let d = &raw.image;
    let image_id = format!("{}{}-{}", d.laterality, d.view, &guid[..8]);
    let image = MammogramImage {
        lfn: image_lfn(site_id, &pseudonym_id, &exam.exam_id, &image_id),
        image_id,
        exam: exam.exam_id.clone(),
        laterality: d.laterality.clone(),
        view: d.view.clone(),
        width_px: d.width,
        height_px: d.height,
        bits_per_sample: d.bits,
        guid,
        acquisition: d.acquisition.clone(),
        density: None,
    };
    let mut report = ValidationReport::default();
    report.violations.extend(validate_patient(&patient).violations);
    report.violations.extend(validate_exam(&exam).violations);
    report
        .violations
        .extend(validate_image(&image, raw.pixels.len() as u64).violations);
    if !report.is_ok() {
        return Err(IngestError::Invalid(report));
    }
    let link = LinkEntry {
        pseudonym_id,
        patient_id: id.patient_id.clone(),
        patient_name: id.patient_name.clone(),
        created_at,
    };
    Ok((AnonymizedCase { patient, exam, image }, link))
}
