//! Ingest pipeline: parse an MGIF container, strip identifying fields,
//! derive pseudonyms and register the case with the local store.

mod anon;
pub mod mgif;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anon::{anonymize, image_lfn, pseudonym_for, AnonymizedCase, LinkEntry};
pub use mgif::{parse_mgif, serialize_mgif, MgifError, RawCase};

use crate::digest::sha256_hex;
use crate::model::{ModelError, ValidationReport};
use crate::store::{LocalStore, StoreError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Mgif(#[from] MgifError),
    #[error("domain error: {0}")]
    Domain(ModelError),
    #[error("invalid case: {}", .0.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(ValidationReport),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Per-node settings the pipeline needs.
#[derive(Debug, Clone)]
pub struct IngestContext<'a> {
    pub node_secret: &'a [u8],
    pub site_id: &'a str,
    pub now: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub lfn: String,
    pub guid: String,
    /// The blob was already registered here; nothing was written.
    pub duplicate: bool,
}

/// Anonymizes `raw` and persists it: blob, records, catalogue entry and the
/// link-map entry, in that order. Re-ingesting the same pixels is a no-op.
pub fn ingest_case(
    raw: &RawCase,
    ctx: &IngestContext<'_>,
    store: &mut LocalStore,
) -> Result<IngestOutcome, IngestError> {
    let (case, link) = anonymize(raw, ctx.node_secret, ctx.site_id, ctx.now)?;
    if let Ok(existing) = store.catalogue().lookup_guid(&case.image.guid) {
        return Ok(IngestOutcome {
            lfn: existing.lfn,
            guid: existing.guid,
            duplicate: true,
        });
    }
    let guid = store.put_blob(&raw.pixels)?;
    debug_assert_eq!(guid, case.image.guid);
    for record in case.records() {
        store.put_record(record)?;
    }
    let replica = store.local_replica(&guid);
    store.catalogue_mut().register(
        &case.image.lfn,
        &guid,
        raw.pixels.len() as u64,
        &sha256_hex(&raw.pixels),
        replica,
    )?;
    store.append_link(link)?;
    Ok(IngestOutcome {
        lfn: case.image.lfn,
        guid,
        duplicate: false,
    })
}

/// Parses and ingests one container.
pub fn ingest_bytes(
    bytes: &[u8],
    ctx: &IngestContext<'_>,
    store: &mut LocalStore,
) -> Result<IngestOutcome, IngestError> {
    let raw = parse_mgif(bytes)?;
    ingest_case(&raw, ctx, store)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::mgif::{ClinicalFields, Identifying, ImageDescriptor};
    use super::*;
    use crate::model::{AcquisitionParams, Laterality, View};

    // Built byte by byte outside this crate; see the expected values below.
    const GOLDEN: &[u8] = include_bytes!("../../tests/data/minimal.mgif");
    const GOLDEN_PSEUDONYM: &str = "410daed0dd93da08";
    const GOLDEN_EXAM: &str = "ex77e384c1852f";
    const GOLDEN_GUID: &str = "10e224f076e06aeced9dd138c1da0bbc";

    fn ctx() -> IngestContext<'static> {
        IngestContext {
            node_secret: b"udine-secret",
            site_id: "udine",
            now: 1_100_000_000,
        }
    }

    #[test]
    fn golden_file_parses_field_by_field() {
        assert_eq!(GOLDEN.len(), 370);
        let raw = parse_mgif(GOLDEN).unwrap();
        assert_eq!(
            raw.identifying,
            Identifying {
                patient_name: "Maria Rossi".into(),
                patient_id: "UD-0001".into(),
                birth_year: 1950,
            }
        );
        assert_eq!(raw.exam_date, "2004-05-17");
        assert_eq!(
            raw.clinical,
            ClinicalFields {
                hrt_use: Some(false),
                family_history: Some(true),
                clinical_history: None,
                diet_code: Some("med".into()),
                parity: Some(2),
                height_cm: Some(162.5),
                weight_kg: Some(61.0),
            }
        );
        assert_eq!(
            raw.image,
            ImageDescriptor {
                view: View::Cc,
                laterality: Laterality::Left,
                width: 2,
                height: 2,
                bits: 8,
                acquisition: AcquisitionParams {
                    kvp: 28.0,
                    mas: 63.5,
                    compression_n: 110.0,
                    thickness_mm: 52.5,
                },
            }
        );
        assert_eq!(raw.pixels, vec![0x10, 0x80, 0xC8, 0xFF]);
        assert_eq!(serialize_mgif(&raw).unwrap(), GOLDEN);
    }

    #[test]
    fn golden_pseudonym() {
        assert_eq!(pseudonym_for(b"s", "P123"), "f82f479ea4aaac00");
    }

    #[test]
    fn anonymized_golden_case() {
        let raw = parse_mgif(GOLDEN).unwrap();
        let (case, link) = anonymize(&raw, b"udine-secret", "udine", 7).unwrap();
        assert_eq!(case.patient.pseudonym_id, GOLDEN_PSEUDONYM);
        assert_eq!(case.patient.age_at_exam, 54);
        assert_eq!(case.exam.exam_id, GOLDEN_EXAM);
        assert_eq!(case.exam.exam_year_month, "2004-05");
        assert_eq!(case.image.guid, GOLDEN_GUID);
        assert_eq!(link.patient_id, "UD-0001");
        assert_eq!(link.patient_name, "Maria Rossi");
        let shared: String = case.records().iter().map(|r| r.to_json().to_string()).collect();
        for secret in ["Maria", "Rossi", "UD-0001", "2004-05-17", "1950"] {
            assert!(!shared.contains(secret), "{secret} leaked into {shared}");
        }
    }

    #[test]
    fn ingest_is_idempotent_and_lfn_follows_template() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LocalStore::open(dir.path(), "n-udine").unwrap();
        let first = ingest_bytes(GOLDEN, &ctx(), &mut store).unwrap();
        assert_eq!(
            first.lfn,
            format!("/mgvo/udine/{GOLDEN_PSEUDONYM}/{GOLDEN_EXAM}/LCC-{}.img", &GOLDEN_GUID[..8])
        );
        assert_eq!(first.guid, GOLDEN_GUID);
        assert!(!first.duplicate);
        let snapshot = store.snapshot();
        let second = ingest_bytes(GOLDEN, &ctx(), &mut store).unwrap();
        assert_eq!((second.lfn.as_str(), second.guid.as_str()), (first.lfn.as_str(), first.guid.as_str()));
        assert!(second.duplicate);
        assert_eq!(store.snapshot(), snapshot);
        assert_eq!(store.blob_count().unwrap(), 1);

        let mut raw = parse_mgif(GOLDEN).unwrap();
        raw.pixels[0] ^= 1;
        let other = ingest_case(&raw, &ctx(), &mut store).unwrap();
        assert_ne!(other.guid, first.guid);
    }

    #[test]
    fn link_map_stays_local() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LocalStore::open(dir.path(), "n").unwrap();
        ingest_bytes(GOLDEN, &ctx(), &mut store).unwrap();
        for file in ["meta.log", "catalogue.log"] {
            let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
            assert!(!text.contains("Maria Rossi") && !text.contains("UD-0001"), "{file}");
        }
        let links = std::fs::read_to_string(dir.path().join("linkmap.log")).unwrap();
        assert!(links.contains("UD-0001"));
    }

    #[test]
    fn no_pseudonym_collisions_over_many_ids() {
        let mut seen = HashSet::new();
        for i in 0..100_000u32 {
            assert!(seen.insert(pseudonym_for(b"node-secret", &format!("PID{i:07}"))));
        }
    }

    fn arb_case() -> impl Strategy<Value = RawCase> {
        let text = "[A-Za-z0-9 .,'-]{1,20}";
        (
            (text, text, 1900i64..2000, 2000u32..2010, 1u32..13, 1u32..29),
            (
                proptest::option::of(any::<bool>()),
                proptest::option::of(any::<bool>()),
                proptest::option::of("[a-z_]{1,10}"),
                proptest::option::of("[a-z_]{1,10}"),
                proptest::option::of(0i64..10),
                proptest::option::of(1400u32..1900),
                proptest::option::of(400u32..1200),
            ),
            (any::<bool>(), any::<bool>(), 1u32..6, 1u32..6, prop_oneof![Just(8u8), Just(16u8)]),
            (20u32..40, 10u32..200, 50u32..200, 20u32..90),
            any::<u64>(),
        )
            .prop_map(|(id, cl, img, acq, seed)| {
                let (name, pid, birth, y, m, d) = id;
                let (w, h, bits) = (img.2, img.3, img.4);
                let len = (w * h) as usize * if bits == 8 { 1 } else { 2 };
                let pixels = (0..len).map(|i| (seed >> (i % 8 * 8)) as u8 ^ i as u8).collect();
                RawCase {
                    identifying: Identifying {
                        patient_name: name,
                        patient_id: pid,
                        birth_year: birth,
                    },
                    exam_date: format!("{y}-{m:02}-{d:02}"),
                    clinical: ClinicalFields {
                        hrt_use: cl.0,
                        family_history: cl.1,
                        clinical_history: cl.2,
                        diet_code: cl.3,
                        parity: cl.4,
                        height_cm: cl.5.map(|v| v as f64 / 10.0),
                        weight_kg: cl.6.map(|v| v as f64 / 10.0),
                    },
                    image: ImageDescriptor {
                        view: if img.0 { View::Cc } else { View::Mlo },
                        laterality: if img.1 { Laterality::Left } else { Laterality::Right },
                        width: w,
                        height: h,
                        bits,
                        acquisition: AcquisitionParams {
                            kvp: acq.0 as f64,
                            mas: acq.1 as f64 / 2.0,
                            compression_n: acq.2 as f64,
                            thickness_mm: acq.3 as f64 + 0.25,
                        },
                    },
                    pixels,
                }
            })
    }

    proptest! {
        #[test]
        fn mgif_round_trip(case in arb_case()) {
            let bytes = serialize_mgif(&case).unwrap();
            prop_assert_eq!(parse_mgif(&bytes).unwrap(), case);
        }

        #[test]
        fn pseudonyms_are_deterministic(pid in "[A-Z0-9-]{1,16}") {
            prop_assert_eq!(pseudonym_for(b"k", &pid), pseudonym_for(b"k", &pid));
            prop_assert_ne!(pseudonym_for(b"k", &pid), pseudonym_for(b"other", &pid));
        }
    }
}
