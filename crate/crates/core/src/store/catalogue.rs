//! Replica-aware file catalogue: logical filenames resolved to content GUIDs
//! and the nodes holding a copy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::log::JsonLog;
use super::StoreError;
use crate::model::is_lower_hex;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Replica {
    pub node_id: String,
    /// Relative to the holding node's data directory.
    pub physical_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueEntry {
    pub lfn: String,
    pub guid: String,
    pub size: u64,
    pub checksum: String,
    pub replicas: Vec<Replica>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum CatalogueOp {
    Register { entry: CatalogueEntry },
    AddReplica { guid: String, replica: Replica },
}

pub fn validate_lfn(lfn: &str) -> Result<(), StoreError> {
    let invalid = || StoreError::InvalidLfn(lfn.to_string());
    let rest = lfn.strip_prefix("/mgvo/").ok_or_else(invalid)?;
    if rest.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return Err(invalid());
    }
    Ok(())
}

pub struct Catalogue {
    log: JsonLog,
    by_lfn: BTreeMap<String, CatalogueEntry>,
    lfn_by_guid: BTreeMap<String, String>,
}

impl Catalogue {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let (log, ops) = JsonLog::open::<CatalogueOp>(path, false)?;
        let mut catalogue = Self {
            log,
            by_lfn: BTreeMap::new(),
            lfn_by_guid: BTreeMap::new(),
        };
        for op in ops {
            catalogue.apply(op);
        }
        Ok(catalogue)
    }

    fn apply(&mut self, op: CatalogueOp) {
        match op {
            CatalogueOp::Register { entry } => {
                self.lfn_by_guid.insert(entry.guid.clone(), entry.lfn.clone());
                self.by_lfn.insert(entry.lfn.clone(), entry);
            }
            CatalogueOp::AddReplica { guid, replica } => {
                if let Some(entry) = self
                    .lfn_by_guid
                    .get(&guid)
                    .and_then(|lfn| self.by_lfn.get_mut(lfn))
                {
                    if !entry.replicas.contains(&replica) {
                        entry.replicas.push(replica);
                    }
                }
            }
        }
    }

    /// Registers a new entry; an existing lfn with the same guid gains the replica.
    pub fn register(
        &mut self,
        lfn: &str,
        guid: &str,
        size: u64,
        checksum: &str,
        replica: Replica,
    ) -> Result<CatalogueEntry, StoreError> {
        validate_lfn(lfn)?;
        if !is_lower_hex(checksum, 64) || !is_lower_hex(guid, 32) || &checksum[..32] != guid {
            return Err(StoreError::InvalidEntry(format!(
                "guid {guid} is not the prefix of checksum {checksum}"
            )));
        }
        if let Some(existing) = self.by_lfn.get(lfn) {
            if existing.guid != guid {
                return Err(StoreError::LfnConflict(lfn.to_string()));
            }
            return self.add_replica(guid, &replica.node_id, &replica.physical_path);
        }
        if let Some(other) = self.lfn_by_guid.get(guid) {
            return Err(StoreError::GuidConflict {
                guid: guid.to_string(),
                lfn: other.clone(),
            });
        }
        let entry = CatalogueEntry {
            lfn: lfn.to_string(),
            guid: guid.to_string(),
            size,
            checksum: checksum.to_string(),
            replicas: vec![replica],
        };
        let op = CatalogueOp::Register { entry: entry.clone() };
        self.log.append(&op)?;
        self.apply(op);
        Ok(entry)
    }

    pub fn lookup(&self, lfn: &str) -> Result<CatalogueEntry, StoreError> {
        self.by_lfn
            .get(lfn)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(lfn.to_string()))
    }

    pub fn lookup_guid(&self, guid: &str) -> Result<CatalogueEntry, StoreError> {
        self.lfn_by_guid
            .get(guid)
            .and_then(|lfn| self.by_lfn.get(lfn))
            .cloned()
            .ok_or_else(|| StoreError::NotFound(guid.to_string()))
    }

    /// All replicas of `guid`, ordered by node id.
    pub fn whereis(&self, guid: &str) -> Result<Vec<Replica>, StoreError> {
        let mut replicas = self.lookup_guid(guid)?.replicas;
        replicas.sort();
        Ok(replicas)
    }

    pub fn add_replica(
        &mut self,
        guid: &str,
        node_id: &str,
        physical_path: &str,
    ) -> Result<CatalogueEntry, StoreError> {
        let entry = self.lookup_guid(guid)?;
        let replica = Replica {
            node_id: node_id.to_string(),
            physical_path: physical_path.to_string(),
        };
        if entry.replicas.contains(&replica) {
            return Ok(entry);
        }
        let op = CatalogueOp::AddReplica {
            guid: guid.to_string(),
            replica,
        };
        self.log.append(&op)?;
        self.apply(op);
        self.lookup_guid(guid)
    }

    /// Entries whose lfn starts with `prefix`, in lfn order.
    pub fn ls(&self, prefix: &str) -> Vec<CatalogueEntry> {
        self.by_lfn
            .range(prefix.to_string()..)
            .take_while(|(lfn, _)| lfn.starts_with(prefix))
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.by_lfn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_lfn.is_empty()
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.log.sync()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::sha256_hex;

    fn replica(node: &str) -> Replica {
        Replica {
            node_id: node.into(),
            physical_path: "blobs/x".into(),
        }
    }

    fn open(dir: &tempfile::TempDir) -> Catalogue {
        Catalogue::open(&dir.path().join("catalogue.log")).unwrap()
    }

    fn ids(content: &[u8]) -> (String, String) {
        let checksum = sha256_hex(content);
        (checksum[..32].to_string(), checksum)
    }

    #[test]
    fn register_lookup_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = open(&dir);
        let (guid, sum) = ids(b"a");
        let lfn = "/mgvo/udine/p/e/i.img";
        let entry = cat.register(lfn, &guid, 1, &sum, replica("n1")).unwrap();
        assert_eq!(cat.lookup(lfn).unwrap(), entry);
        let (guid2, sum2) = ids(b"b");
        assert!(matches!(
            cat.register(lfn, &guid2, 1, &sum2, replica("n1")),
            Err(StoreError::LfnConflict(_))
        ));
        assert!(matches!(
            cat.register("/mgvo/udine/other.img", &guid, 1, &sum, replica("n1")),
            Err(StoreError::GuidConflict { .. })
        ));
        let again = cat.register(lfn, &guid, 1, &sum, replica("n2")).unwrap();
        assert_eq!(again.replicas.len(), 2);
    }

    #[test]
    fn lfn_rules() {
        for bad in ["relative/path", "/other/x", "/mgvo/", "/mgvo//x", "/mgvo/a/../b", "/mgvo/a/"] {
            assert!(matches!(validate_lfn(bad), Err(StoreError::InvalidLfn(_))), "{bad}");
        }
        validate_lfn("/mgvo/a/b.img").unwrap();
    }

    #[test]
    fn guid_must_prefix_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = open(&dir);
        let (_, sum) = ids(b"a");
        let err = cat.register("/mgvo/a", &"0".repeat(32), 1, &sum, replica("n1"));
        assert!(matches!(err, Err(StoreError::InvalidEntry(_))));
    }

    #[test]
    fn unknown_lookups() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = open(&dir);
        assert!(matches!(cat.lookup("/mgvo/x"), Err(StoreError::NotFound(_))));
        assert!(matches!(cat.whereis("ab"), Err(StoreError::NotFound(_))));
        assert!(matches!(cat.add_replica("ab", "n", "p"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn replicas_sorted_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = open(&dir);
        let (guid, sum) = ids(b"a");
        cat.register("/mgvo/s/a.img", &guid, 1, &sum, replica("udine")).unwrap();
        assert_eq!(cat.whereis(&guid).unwrap().len(), 1);
        let once = cat.add_replica(&guid, "addenbrookes", "blobs/x").unwrap();
        let twice = cat.add_replica(&guid, "addenbrookes", "blobs/x").unwrap();
        assert_eq!(once, twice);
        let nodes: Vec<_> = cat.whereis(&guid).unwrap().into_iter().map(|r| r.node_id).collect();
        assert_eq!(nodes, vec!["addenbrookes", "udine"]);
        drop(cat);
        let cat = open(&dir);
        assert_eq!(cat.whereis(&guid).unwrap().len(), 2);
    }

    #[test]
    fn ls_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = open(&dir);
        for (i, site) in ["udine", "oxford", "udine"].iter().enumerate() {
            let (guid, sum) = ids(&[i as u8]);
            cat.register(&format!("/mgvo/{site}/{i}.img"), &guid, 1, &sum, replica("n")).unwrap();
        }
        assert_eq!(cat.ls("/mgvo/").len(), 3);
        let udine: Vec<_> = cat.ls("/mgvo/udine/").into_iter().map(|e| e.lfn).collect();
        assert_eq!(udine, vec!["/mgvo/udine/0.img", "/mgvo/udine/2.img"]);
        assert!(cat.ls("/mgvo/cern/").is_empty());
    }
}
