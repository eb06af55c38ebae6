//! Blind second-reading workflow.
//!
//! A case is opened by a clinician at the requesting site for an image owned
//! by some node, and advertised to a target site. One clinician from each
//! side annotates independently; nobody sees the other reading until both are
//! in. The case record lives at the image-owning node; this module is the
//! pure state machine, the node layer adds transport and role checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Mass,
    MicrocalcificationCluster,
    Benign,
    Malignant,
    Normal,
    Other,
}

impl Label {
    pub const ALL: [Label; 6] = [
        Label::Mass,
        Label::MicrocalcificationCluster,
        Label::Benign,
        Label::Malignant,
        Label::Normal,
        Label::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Mass => "mass",
            Label::MicrocalcificationCluster => "microcalcification_cluster",
            Label::Benign => "benign",
            Label::Malignant => "malignant",
            Label::Normal => "normal",
            Label::Other => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CollabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CollabError::InvalidAnnotation(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub case_id: String,
    pub guid: String,
    pub author: String,
    pub author_site: String,
    /// Polygon vertices in pixel coordinates.
    pub region: Vec<(u32, u32)>,
    pub label: Label,
    pub note: String,
    pub submitted_at: u64,
}

/// What a reader submits; the owning node fills in the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDraft {
    pub region: Vec<(u32, u32)>,
    pub label: Label,
    #[serde(default)]
    pub note: String,
}

/// Parses `"x,y;x,y;..."`.
pub fn parse_region(text: &str) -> Result<Vec<(u32, u32)>, CollabError> {
    let bad = || CollabError::InvalidAnnotation(format!("bad region {text:?}"));
    text.split(';')
        .map(|pair| {
            let (x, y) = pair.trim().split_once(',').ok_or_else(bad)?;
            Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Open,
    FirstSubmitted,
    BothSubmitted,
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOpinionCase {
    pub case_id: String,
    pub guid: String,
    pub lfn: String,
    pub image_width: u32,
    pub image_height: u32,
    pub requester: String,
    pub requester_site: String,
    pub target_site: String,
    pub owner_node: String,
    pub state: CaseState,
    pub annotations: Vec<Annotation>,
    pub created_at: u64,
}

/// Advertisement of a case held elsewhere, kept at target-site nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRef {
    pub case_id: String,
    pub lfn: String,
    pub requester: String,
    pub requester_site: String,
    pub target_site: String,
    pub owner_node: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub case_id: String,
    pub lfn: String,
    pub guid: String,
    pub annotations: Vec<Annotation>,
    pub agreement: bool,
    pub state: CaseState,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollabError {
    #[error("denied: {0}")]
    Denied(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("target site is the requester's own site")]
    SameSite,
    #[error("author has already annotated this case")]
    DuplicateAuthor,
    #[error("case no longer accepts annotations")]
    CaseClosed,
    #[error("both readings are not in yet")]
    NotReady,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
}

/// A clinician as seen by the owning node: subject plus the site the request
/// entered the federation from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reader<'a> {
    pub subject: &'a str,
    pub site: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Requester,
    Target,
}

impl SecondOpinionCase {
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        case_id: String,
        guid: String,
        lfn: String,
        (image_width, image_height): (u32, u32),
        requester: Reader<'_>,
        target_site: &str,
        owner_node: &str,
        now: u64,
    ) -> Result<Self, CollabError> {
        if requester.site == target_site {
            return Err(CollabError::SameSite);
        }
        Ok(Self {
            case_id,
            guid,
            lfn,
            image_width,
            image_height,
            requester: requester.subject.to_string(),
            requester_site: requester.site.to_string(),
            target_site: target_site.to_string(),
            owner_node: owner_node.to_string(),
            state: CaseState::Open,
            annotations: Vec::new(),
            created_at: now,
        })
    }

    pub fn case_ref(&self) -> CaseRef {
        CaseRef {
            case_id: self.case_id.clone(),
            lfn: self.lfn.clone(),
            requester: self.requester.clone(),
            requester_site: self.requester_site.clone(),
            target_site: self.target_site.clone(),
            owner_node: self.owner_node.clone(),
            created_at: self.created_at,
        }
    }

    fn slot_of(&self, reader: Reader<'_>) -> Option<Slot> {
        if reader.site == self.requester_site {
            return (reader.subject == self.requester).then_some(Slot::Requester);
        }
        if reader.site == self.target_site {
            let target_author = self
                .annotations
                .iter()
                .find(|a| a.author_site == self.target_site);
            return match target_author {
                Some(a) if a.author != reader.subject => None,
                _ => Some(Slot::Target),
            };
        }
        None
    }

    pub fn is_participant(&self, reader: Reader<'_>) -> bool {
        self.slot_of(reader).is_some()
    }

    fn has_submitted(&self, reader: Reader<'_>) -> bool {
        self.annotations
            .iter()
            .any(|a| a.author == reader.subject && a.author_site == reader.site)
    }

    fn check_draft(&self, draft: &AnnotationDraft) -> Result<(), CollabError> {
        if draft.region.len() < 3 {
            return Err(CollabError::InvalidAnnotation(
                "region needs at least 3 vertices".into(),
            ));
        }
        if let Some((x, y)) = draft
            .region
            .iter()
            .find(|(x, y)| *x >= self.image_width || *y >= self.image_height)
        {
            return Err(CollabError::InvalidAnnotation(format!(
                "vertex ({x},{y}) outside {}x{} image",
                self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    pub fn submit(
        &mut self,
        reader: Reader<'_>,
        draft: AnnotationDraft,
        annotation_id: String,
        now: u64,
    ) -> Result<&Self, CollabError> {
        if self.has_submitted(reader) {
            return Err(CollabError::DuplicateAuthor);
        }
        if !self.is_participant(reader) {
            return Err(CollabError::Denied(format!(
                "{} is not a reader of case {}",
                reader.subject, self.case_id
            )));
        }
        if self.state >= CaseState::BothSubmitted {
            return Err(CollabError::CaseClosed);
        }
        self.check_draft(&draft)?;
        self.annotations.push(Annotation {
            annotation_id,
            case_id: self.case_id.clone(),
            guid: self.guid.clone(),
            author: reader.subject.to_string(),
            author_site: reader.site.to_string(),
            region: draft.region,
            label: draft.label,
            note: draft.note,
            submitted_at: now,
        });
        self.state = match self.annotations.len() {
            1 => CaseState::FirstSubmitted,
            _ => CaseState::BothSubmitted,
        };
        Ok(self)
    }

    /// The case as `reader` may see it: other readings stay hidden until the
    /// reader has submitted and both readings are in.
    pub fn view(&self, reader: Reader<'_>) -> Result<SecondOpinionCase, CollabError> {
        if !self.is_participant(reader) {
            return Err(CollabError::Denied(format!(
                "{} is not a reader of case {}",
                reader.subject, self.case_id
            )));
        }
        let mut view = self.clone();
        if self.state < CaseState::BothSubmitted {
            view.annotations
                .retain(|a| a.author == reader.subject && a.author_site == reader.site);
        }
        Ok(view)
    }

    pub fn report(&mut self, reader: Reader<'_>) -> Result<CombinedReport, CollabError> {
        if !self.is_participant(reader) {
            return Err(CollabError::Denied(format!(
                "{} is not a reader of case {}",
                reader.subject, self.case_id
            )));
        }
        if self.state < CaseState::BothSubmitted {
            return Err(CollabError::NotReady);
        }
        self.state = CaseState::Reported;
        Ok(CombinedReport {
            case_id: self.case_id.clone(),
            lfn: self.lfn.clone(),
            guid: self.guid.clone(),
            agreement: self.annotations[0].label == self.annotations[1].label,
            annotations: self.annotations.clone(),
            state: self.state,
        })
    }
}
