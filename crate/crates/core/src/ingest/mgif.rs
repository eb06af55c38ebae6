//! MGIF ingest container.
//!
//! Layout: `"MGIF"`, a version byte (`0x01`), a little-endian `u32` header
//! length, that many bytes of UTF-8 `key=value\n` lines, then the pixel blob
//! (row-major, little-endian samples).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{bytes_per_sample, AcquisitionParams, Laterality, View};

pub const MAGIC: &[u8; 4] = b"MGIF";
pub const VERSION: u8 = 0x01;
const PREAMBLE: usize = 9;

pub const REQUIRED_KEYS: &[&str] = &[
    "patient.name",
    "patient.id",
    "patient.birth_year",
    "exam.date",
    "image.view",
    "image.laterality",
    "image.width",
    "image.height",
    "image.bits",
    "acq.kvp",
    "acq.mas",
    "acq.compression_n",
    "acq.thickness_mm",
];

pub const OPTIONAL_KEYS: &[&str] = &[
    "patient.hrt",
    "patient.parity",
    "patient.height_cm",
    "patient.weight_kg",
    "patient.family_history",
    "patient.diet",
    "patient.clinical_history",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MgifError {
    #[error("bad magic: not an MGIF container")]
    BadMagic,
    #[error("unsupported MGIF version {0}")]
    UnsupportedVersion(u8),
    #[error("missing header key {0}")]
    MissingKey(String),
    #[error("pixel size mismatch: expected {expected} bytes, found {actual}")]
    PixelSizeMismatch { expected: u64, actual: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

/// Fields that identify the patient and never leave the staging area.
#[derive(Debug, Clone, PartialEq)]
pub struct Identifying {
    pub patient_name: String,
    pub patient_id: String,
    pub birth_year: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClinicalFields {
    pub hrt_use: Option<bool>,
    pub family_history: Option<bool>,
    pub clinical_history: Option<String>,
    pub diet_code: Option<String>,
    pub parity: Option<i64>,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptor {
    pub view: View,
    pub laterality: Laterality,
    pub width: u32,
    pub height: u32,
    pub bits: u8,
    pub acquisition: AcquisitionParams,
}

impl ImageDescriptor {
    pub fn blob_size(&self) -> u64 {
        self.width as u64 * self.height as u64 * bytes_per_sample(self.bits).unwrap_or(0)
    }
}

/// A case as staged before anonymization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub identifying: Identifying,
    /// `YYYY-MM-DD`.
    pub exam_date: String,
    pub clinical: ClinicalFields,
    pub image: ImageDescriptor,
    pub pixels: Vec<u8>,
}

fn malformed(msg: impl Into<String>) -> MgifError {
    MgifError::MalformedHeader(msg.into())
}

pub fn parse_mgif(bytes: &[u8]) -> Result<RawCase, MgifError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(MgifError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(malformed("truncated preamble"));
    }
    if bytes[4] != VERSION {
        return Err(MgifError::UnsupportedVersion(bytes[4]));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| malformed("header length exceeds input"))?;
    let header = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|_| malformed("header is not UTF-8"))?;
    let map = parse_header_lines(header)?;
    let case = build_case(&map, bytes[header_end..].to_vec())?;
    Ok(case)
}

fn parse_header_lines(header: &str) -> Result<BTreeMap<&str, &str>, MgifError> {
    let mut map = BTreeMap::new();
    if header.is_empty() {
        return Ok(map);
    }
    let body = header
        .strip_suffix('\n')
        .ok_or_else(|| malformed("header line not terminated"))?;
    for line in body.split('\n') {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("line without '=': {line:?}")))?;
        if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(malformed(format!("unknown key {key:?}")));
        }
        if map.insert(key, value).is_some() {
            return Err(malformed(format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

fn required<'a>(map: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str, MgifError> {
    map.get(key)
        .copied()
        .ok_or_else(|| MgifError::MissingKey(key.to_string()))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, MgifError> {
    value
        .parse()
        .map_err(|_| malformed(format!("bad value for {key}: {value:?}")))
}

fn parse_float(key: &str, value: &str) -> Result<f64, MgifError> {
    let v: f64 = parse_num(key, value)?;
    if !v.is_finite() {
        return Err(malformed(format!("non-finite value for {key}")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, MgifError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(malformed(format!("bad boolean for {key}: {value:?}"))),
    }
}

fn optional<T>(
    map: &BTreeMap<&str, &str>,
    key: &str,
    parse: impl Fn(&str, &str) -> Result<T, MgifError>,
) -> Result<Option<T>, MgifError> {
    map.get(key).map(|v| parse(key, v)).transpose()
}

/// Checks a `YYYY-MM-DD` calendar date.
pub fn is_valid_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: std::ops::Range<usize>| -> Option<u32> {
        let part = &s[r];
        part.bytes().all(|c| c.is_ascii_digit()).then(|| part.parse().ok()).flatten()
    };
    let (Some(year), Some(month), Some(day)) = (digits(0..4), digits(5..7), digits(8..10)) else {
        return false;
    };
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    let days = match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if leap => 29,
        2 => 28,
        _ => return false,
    };
    (1..=days).contains(&day)
}

fn build_case(map: &BTreeMap<&str, &str>, pixels: Vec<u8>) -> Result<RawCase, MgifError> {
    for key in REQUIRED_KEYS {
        required(map, key)?;
    }
    let exam_date = required(map, "exam.date")?.to_string();
    if !is_valid_date(&exam_date) {
        return Err(malformed(format!("bad exam.date {exam_date:?}")));
    }
    let view = View::parse(required(map, "image.view")?);
    if !view.is_known() {
        return Err(malformed(format!("unknown view {view}")));
    }
    let laterality = Laterality::parse(required(map, "image.laterality")?);
    if !laterality.is_known() {
        return Err(malformed(format!("unknown laterality {laterality}")));
    }
    let bits: u8 = parse_num("image.bits", required(map, "image.bits")?)?;
    if bytes_per_sample(bits).is_none() {
        return Err(malformed(format!("unsupported bit depth {bits}")));
    }
    let image = ImageDescriptor {
        view,
        laterality,
        width: parse_num("image.width", required(map, "image.width")?)?,
        height: parse_num("image.height", required(map, "image.height")?)?,
        bits,
        acquisition: AcquisitionParams {
            kvp: parse_float("acq.kvp", required(map, "acq.kvp")?)?,
            mas: parse_float("acq.mas", required(map, "acq.mas")?)?,
            compression_n: parse_float("acq.compression_n", required(map, "acq.compression_n")?)?,
            thickness_mm: parse_float("acq.thickness_mm", required(map, "acq.thickness_mm")?)?,
        },
    };
    if image.width == 0 || image.height == 0 {
        return Err(malformed("image dimensions must be positive"));
    }
    let expected = image.blob_size();
    if expected != pixels.len() as u64 {
        return Err(MgifError::PixelSizeMismatch {
            expected,
            actual: pixels.len() as u64,
        });
    }
    let text = |_: &str, v: &str| -> Result<String, MgifError> { Ok(v.to_string()) };
    Ok(RawCase {
        identifying: Identifying {
            patient_name: required(map, "patient.name")?.to_string(),
            patient_id: required(map, "patient.id")?.to_string(),
            birth_year: parse_num("patient.birth_year", required(map, "patient.birth_year")?)?,
        },
        exam_date,
        clinical: ClinicalFields {
            hrt_use: optional(map, "patient.hrt", parse_bool)?,
            family_history: optional(map, "patient.family_history", parse_bool)?,
            clinical_history: optional(map, "patient.clinical_history", text)?,
            diet_code: optional(map, "patient.diet", text)?,
            parity: optional(map, "patient.parity", parse_num)?,
            height_cm: optional(map, "patient.height_cm", parse_float)?,
            weight_kg: optional(map, "patient.weight_kg", parse_float)?,
        },
        image,
        pixels,
    })
}

/// Header lines in canonical order: required keys first, then present optionals.
pub fn header_lines(case: &RawCase) -> Vec<(&'static str, String)> {
    let id = &case.identifying;
    let img = &case.image;
    let acq = &img.acquisition;
    let mut lines = vec![
        ("patient.name", id.patient_name.clone()),
        ("patient.id", id.patient_id.clone()),
        ("patient.birth_year", id.birth_year.to_string()),
        ("exam.date", case.exam_date.clone()),
        ("image.view", img.view.to_string()),
        ("image.laterality", img.laterality.to_string()),
        ("image.width", img.width.to_string()),
        ("image.height", img.height.to_string()),
        ("image.bits", img.bits.to_string()),
        ("acq.kvp", acq.kvp.to_string()),
        ("acq.mas", acq.mas.to_string()),
        ("acq.compression_n", acq.compression_n.to_string()),
        ("acq.thickness_mm", acq.thickness_mm.to_string()),
    ];
    let c = &case.clinical;
    let opts = [
        ("patient.hrt", c.hrt_use.map(|b| b.to_string())),
        ("patient.parity", c.parity.map(|p| p.to_string())),
        ("patient.height_cm", c.height_cm.map(|h| h.to_string())),
        ("patient.weight_kg", c.weight_kg.map(|w| w.to_string())),
        ("patient.family_history", c.family_history.map(|b| b.to_string())),
        ("patient.diet", c.diet_code.clone()),
        ("patient.clinical_history", c.clinical_history.clone()),
    ];
    lines.extend(opts.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
    lines
}

pub fn serialize_mgif(case: &RawCase) -> Result<Vec<u8>, MgifError> {
    let mut header = String::new();
    for (key, value) in header_lines(case) {
        if value.contains('\n') {
            return Err(malformed(format!("value for {key} contains a newline")));
        }
        header.push_str(key);
        header.push('=');
        header.push_str(&value);
        header.push('\n');
    }
    let header_len =
        u32::try_from(header.len()).map_err(|_| malformed("header longer than 4 GiB"))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + case.pixels.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&case.pixels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_input_is_bad_magic() {
        assert_eq!(parse_mgif(b"MGI"), Err(MgifError::BadMagic));
        assert_eq!(parse_mgif(b"XGIF\x01\0\0\0\0"), Err(MgifError::BadMagic));
    }

    fn header_bytes(header: &str, blob: &[u8], version: u8) -> Vec<u8> {
        let mut out = b"MGIF".to_vec();
        out.push(version);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(blob);
        out
    }

    const HEADER_2X2: &str = "patient.name=Jane Roe\npatient.id=P123\npatient.birth_year=1950\n\
exam.date=2004-05-17\nimage.view=CC\nimage.laterality=L\nimage.width=2\nimage.height=2\n\
image.bits=8\nacq.kvp=28\nacq.mas=63.5\nacq.compression_n=0\nacq.thickness_mm=45\n";

    #[test]
    fn pixel_size_mismatch() {
        let bytes = header_bytes(HEADER_2X2, &[1, 2, 3], 1);
        assert_eq!(
            parse_mgif(&bytes),
            Err(MgifError::PixelSizeMismatch { expected: 4, actual: 3 })
        );
    }

    #[test]
    fn version_checked() {
        let bytes = header_bytes(HEADER_2X2, &[0; 4], 2);
        assert_eq!(parse_mgif(&bytes), Err(MgifError::UnsupportedVersion(2)));
    }

    #[test]
    fn missing_key_named() {
        let header = HEADER_2X2.replace("acq.mas=63.5\n", "");
        let bytes = header_bytes(&header, &[0; 4], 1);
        assert_eq!(parse_mgif(&bytes), Err(MgifError::MissingKey("acq.mas".into())));
    }

    #[test]
    fn malformed_headers() {
        for header in [
            HEADER_2X2.trim_end_matches('\n').to_string(),
            format!("{HEADER_2X2}garbage\n"),
            format!("{HEADER_2X2}patient.id=again\n"),
            format!("{HEADER_2X2}patient.shoe_size=7\n"),
            HEADER_2X2.replace("2004-05-17", "2004-02-30"),
            HEADER_2X2.replace("image.view=CC", "image.view=AX"),
            HEADER_2X2.replace("image.bits=8", "image.bits=12"),
            HEADER_2X2.replace("acq.kvp=28", "acq.kvp=inf"),
        ] {
            let bytes = header_bytes(&header, &[0; 4], 1);
            assert!(
                matches!(parse_mgif(&bytes), Err(MgifError::MalformedHeader(_))),
                "{header:?}"
            );
        }
        let mut truncated = header_bytes(HEADER_2X2, &[0; 4], 1);
        truncated[5..9].copy_from_slice(&10_000u32.to_le_bytes());
        assert!(matches!(parse_mgif(&truncated), Err(MgifError::MalformedHeader(_))));
    }

    #[test]
    fn parses_minimal_header() {
        let case = parse_mgif(&header_bytes(HEADER_2X2, &[0, 50, 100, 255], 1)).unwrap();
        assert_eq!(case.identifying.patient_id, "P123");
        assert_eq!(case.image.acquisition.mas, 63.5);
        assert_eq!(case.clinical, ClinicalFields::default());
        assert_eq!(case.pixels, vec![0, 50, 100, 255]);
    }

    #[test]
    fn serializer_rejects_newlines() {
        let mut case = parse_mgif(&header_bytes(HEADER_2X2, &[0; 4], 1)).unwrap();
        case.clinical.clinical_history = Some("a\nb".into());
        assert!(serialize_mgif(&case).is_err());
    }

    #[test]
    fn date_validation() {
        assert!(is_valid_date("2004-02-29"));
        assert!(!is_valid_date("2003-02-29"));
        assert!(is_valid_date("2000-02-29"));
        assert!(!is_valid_date("1900-02-29"));
        assert!(!is_valid_date("2004-5-17"));
        assert!(!is_valid_date("2004-05-00"));
    }
}
