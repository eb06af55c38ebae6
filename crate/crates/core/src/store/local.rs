use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::catalogue::{Catalogue, CatalogueEntry, Replica};
use super::log::JsonLog;
use super::StoreError;
use crate::collab::{CaseRef, SecondOpinionCase};
use crate::digest::sha256_hex;
use crate::ingest::LinkEntry;
use crate::model::{Exam, MammogramImage, PatientRecord, Record};

/// One line of `meta.log`. Later lines replace earlier ones with the same key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum MetaRecord {
    Patient(PatientRecord),
    Exam(Exam),
    Image(MammogramImage),
    Case(SecondOpinionCase),
    CaseRef(CaseRef),
}

impl From<Record> for MetaRecord {
    fn from(r: Record) -> Self {
        match r {
            Record::Patient(p) => MetaRecord::Patient(p),
            Record::Exam(e) => MetaRecord::Exam(e),
            Record::Image(i) => MetaRecord::Image(i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Integrity {
    Ok,
    Corrupt { expected: String, actual: String },
}

/// Every in-memory index, for comparing a live store with a replay.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreSnapshot {
    pub patients: BTreeMap<String, PatientRecord>,
    pub exams: BTreeMap<String, Exam>,
    pub images: BTreeMap<String, MammogramImage>,
    pub cases: BTreeMap<String, SecondOpinionCase>,
    pub case_refs: BTreeMap<String, CaseRef>,
    pub catalogue: Vec<CatalogueEntry>,
    pub links: Vec<LinkEntry>,
}

#[derive(Default)]
struct Indexes {
    patients: BTreeMap<String, PatientRecord>,
    exams: BTreeMap<String, Exam>,
    images: BTreeMap<String, MammogramImage>,
    image_by_guid: BTreeMap<String, String>,
    exams_by_patient: BTreeMap<String, BTreeSet<String>>,
    images_by_exam: BTreeMap<String, BTreeSet<String>>,
    cases: BTreeMap<String, SecondOpinionCase>,
    case_refs: BTreeMap<String, CaseRef>,
}

impl Indexes {
    fn apply(&mut self, record: MetaRecord) {
        match record {
            MetaRecord::Patient(p) => {
                self.patients.insert(p.pseudonym_id.clone(), p);
            }
            MetaRecord::Exam(e) => {
                if let Some(old) = self.exams.get(&e.exam_id) {
                    if let Some(set) = self.exams_by_patient.get_mut(&old.patient) {
                        set.remove(&e.exam_id);
                    }
                }
                self.exams_by_patient
                    .entry(e.patient.clone())
                    .or_default()
                    .insert(e.exam_id.clone());
                self.exams.insert(e.exam_id.clone(), e);
            }
            MetaRecord::Image(i) => {
                if let Some(old) = self.images.get(&i.image_id) {
                    if let Some(set) = self.images_by_exam.get_mut(&old.exam) {
                        set.remove(&i.image_id);
                    }
                    self.image_by_guid.remove(&old.guid);
                }
                self.images_by_exam
                    .entry(i.exam.clone())
                    .or_default()
                    .insert(i.image_id.clone());
                self.image_by_guid.insert(i.guid.clone(), i.image_id.clone());
                self.images.insert(i.image_id.clone(), i);
            }
            MetaRecord::Case(c) => {
                self.cases.insert(c.case_id.clone(), c);
            }
            MetaRecord::CaseRef(r) => {
                self.case_refs.insert(r.case_id.clone(), r);
            }
        }
    }
}

/// A Grid-box's persistent state. Single writer; wrap in a lock to share.
pub struct LocalStore {
    dir: PathBuf,
    node_id: String,
    meta: JsonLog,
    linkmap: JsonLog,
    links: Vec<LinkEntry>,
    catalogue: Catalogue,
    idx: Indexes,
}

impl LocalStore {
    /// Opens `dir`, creating the layout if needed, and replays every log.
    pub fn open(dir: &Path, node_id: &str) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.join("blobs"))?;
        let (meta, records) = JsonLog::open::<MetaRecord>(&dir.join("meta.log"), false)?;
        let (linkmap, links) = JsonLog::open::<LinkEntry>(&dir.join("linkmap.log"), true)?;
        let catalogue = Catalogue::open(&dir.join("catalogue.log"))?;
        let mut idx = Indexes::default();
        for r in records {
            idx.apply(r);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            node_id: node_id.to_string(),
            meta,
            linkmap,
            links,
            catalogue,
            idx,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    fn append(&mut self, record: MetaRecord) -> Result<(), StoreError> {
        self.meta.append(&record)?;
        self.idx.apply(record);
        Ok(())
    }

    pub fn put_record(&mut self, record: Record) -> Result<(), StoreError> {
        self.append(record.into())
    }

    pub fn put_case(&mut self, case: SecondOpinionCase) -> Result<(), StoreError> {
        self.append(MetaRecord::Case(case))
    }

    pub fn put_case_ref(&mut self, case_ref: CaseRef) -> Result<(), StoreError> {
        self.append(MetaRecord::CaseRef(case_ref))
    }

    pub fn append_link(&mut self, entry: LinkEntry) -> Result<(), StoreError> {
        self.linkmap.append(&entry)?;
        self.links.push(entry);
        Ok(())
    }

    pub fn links(&self) -> &[LinkEntry] {
        &self.links
    }

    pub fn patient(&self, pseudonym: &str) -> Option<&PatientRecord> {
        self.idx.patients.get(pseudonym)
    }

    pub fn exam(&self, exam_id: &str) -> Option<&Exam> {
        self.idx.exams.get(exam_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&MammogramImage> {
        self.idx.images.get(image_id)
    }

    pub fn image_by_guid(&self, guid: &str) -> Option<&MammogramImage> {
        self.idx
            .image_by_guid
            .get(guid)
            .and_then(|id| self.idx.images.get(id))
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.idx.patients.values()
    }

    pub fn exams(&self) -> impl Iterator<Item = &Exam> {
        self.idx.exams.values()
    }

    pub fn images(&self) -> impl Iterator<Item = &MammogramImage> {
        self.idx.images.values()
    }

    pub fn exams_of(&self, pseudonym: &str) -> impl Iterator<Item = &Exam> {
        self.idx
            .exams_by_patient
            .get(pseudonym)
            .into_iter()
            .flatten()
            .filter_map(|id| self.idx.exams.get(id))
    }

    pub fn images_of(&self, exam_id: &str) -> impl Iterator<Item = &MammogramImage> {
        self.idx
            .images_by_exam
            .get(exam_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.idx.images.get(id))
    }

    pub fn case(&self, case_id: &str) -> Option<&SecondOpinionCase> {
        self.idx.cases.get(case_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &SecondOpinionCase> {
        self.idx.cases.values()
    }

    pub fn case_refs(&self) -> impl Iterator<Item = &CaseRef> {
        self.idx.case_refs.values()
    }

    /// Write-through cache of a computed density on the local image record.
    pub fn set_density(&mut self, guid: &str, density: f64) -> Result<bool, StoreError> {
        let Some(mut image) = self.image_by_guid(guid).cloned() else {
            return Ok(false);
        };
        if image.density == Some(density) {
            return Ok(true);
        }
        image.density = Some(density);
        self.append(MetaRecord::Image(image))?;
        Ok(true)
    }

    // -- blobs --------------------------------------------------------------

    pub fn blob_relpath(guid: &str) -> String {
        format!("blobs/{guid}")
    }

    fn blob_path(&self, guid: &str) -> Result<PathBuf, StoreError> {
        if !crate::model::is_lower_hex(guid, 32) {
            return Err(StoreError::NotFound(guid.to_string()));
        }
        Ok(self.dir.join(Self::blob_relpath(guid)))
    }

    pub fn has_blob(&self, guid: &str) -> bool {
        self.blob_path(guid).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Stores `data` under its content address; storing the same bytes twice
    /// is a no-op.
    pub fn put_blob(&mut self, data: &[u8]) -> Result<String, StoreError> {
        let guid = crate::digest::guid_for(data);
        let path = self.blob_path(&guid)?;
        if path.is_file() {
            return Ok(guid);
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(guid)
    }

    pub fn get_blob(&self, guid: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.blob_path(guid)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(guid.to_string()),
            _ => StoreError::Io(e),
        })
    }

    pub fn blob_count(&self) -> Result<usize, StoreError> {
        Ok(fs::read_dir(self.dir.join("blobs"))?
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_none())
            .count())
    }

    // -- catalogue ----------------------------------------------------------

    pub fn catalogue(&self) -> &Catalogue {
        &self.catalogue
    }

    pub fn catalogue_mut(&mut self) -> &mut Catalogue {
        &mut self.catalogue
    }

    /// Replica descriptor for this node's copy of `guid`.
    pub fn local_replica(&self, guid: &str) -> Replica {
        Replica {
            node_id: self.node_id.clone(),
            physical_path: Self::blob_relpath(guid),
        }
    }

    /// Recomputes the checksum of the local copy of `guid`.
    pub fn verify(&self, guid: &str) -> Result<Integrity, StoreError> {
        let entry = self.catalogue.lookup_guid(guid)?;
        if !entry.replicas.iter().any(|r| r.node_id == self.node_id) {
            return Err(StoreError::NoLocalReplica(guid.to_string()));
        }
        let actual = match self.get_blob(guid) {
            Ok(data) => sha256_hex(&data),
            Err(StoreError::NotFound(_)) => String::from("missing"),
            Err(e) => return Err(e),
        };
        Ok(if actual == entry.checksum {
            Integrity::Ok
        } else {
            Integrity::Corrupt {
                expected: entry.checksum,
                actual,
            }
        })
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            patients: self.idx.patients.clone(),
            exams: self.idx.exams.clone(),
            images: self.idx.images.clone(),
            cases: self.idx.cases.clone(),
            case_refs: self.idx.case_refs.clone(),
            catalogue: self.catalogue.ls("/"),
            links: self.links.clone(),
        }
    }

    /// Forces every log to stable storage.
    pub fn sync(&self) -> Result<(), StoreError> {
        self.meta.sync()?;
        self.linkmap.sync()?;
        self.catalogue.sync()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_records;

    #[test]
    fn blob_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LocalStore::open(dir.path(), "n1").unwrap();
        let data: Vec<u8> = (0..1 << 20).map(|i: u32| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        let guid = store.put_blob(&data).unwrap();
        assert_eq!(store.get_blob(&guid).unwrap(), data);
        assert_eq!(store.put_blob(&data).unwrap(), guid);
        assert_eq!(store.blob_count().unwrap(), 1);
        assert!(matches!(store.get_blob(&"f".repeat(32)), Err(StoreError::NotFound(_))));
        assert!(matches!(store.get_blob("../meta.log"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn verify_detects_corruption_and_remote_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = LocalStore::open(dir.path(), "n1").unwrap();
        let guid = store.put_blob(b"pixels").unwrap();
        let sum = sha256_hex(b"pixels");
        let replica = Replica { node_id: "n1".into(), physical_path: LocalStore::blob_relpath(&guid) };
        store.catalogue_mut().register("/mgvo/s/a.img", &guid, 6, &sum, replica).unwrap();
        assert_eq!(store.verify(&guid).unwrap(), Integrity::Ok);
        let path = dir.path().join(LocalStore::blob_relpath(&guid));
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.verify(&guid).unwrap(), Integrity::Corrupt { .. }));

        let other = sha256_hex(b"elsewhere");
        let remote = Replica { node_id: "n2".into(), physical_path: "blobs/x".into() };
        store.catalogue_mut().register("/mgvo/s/b.img", &other[..32], 9, &other, remote).unwrap();
        assert!(matches!(store.verify(&other[..32]), Err(StoreError::NoLocalReplica(_))));
    }

    #[test]
    fn records_replay_with_last_write_winning() {
        let dir = tempfile::tempdir().unwrap();
        let (p, e, i) = sample_records();
        let before = {
            let mut store = LocalStore::open(dir.path(), "n1").unwrap();
            store.put_record(Record::Patient(p.clone())).unwrap();
            store.put_record(Record::Exam(e.clone())).unwrap();
            store.put_record(Record::Image(i.clone())).unwrap();
            assert!(store.set_density(&i.guid, 0.5).unwrap());
            assert!(!store.set_density(&"1".repeat(32), 0.5).unwrap());
            store.snapshot()
        };
        let store = LocalStore::open(dir.path(), "n1").unwrap();
        assert_eq!(store.snapshot(), before);
        assert_eq!(store.image_by_guid(&i.guid).unwrap().density, Some(0.5));
        assert_eq!(store.exams_of(&p.pseudonym_id).count(), 1);
        assert_eq!(store.images_of(&e.exam_id).count(), 1);
    }
}
