//! VO credentials, the role policy matrix and field-level redaction.
//!
//! Tokens are HMAC-SHA-256 signatures, keyed by the central node's secret,
//! over the canonical body `subject|vo|role,role,...|expiry` (roles sorted).
//! On the wire a token is `base64("<body>\n<signature hex>")`.
//!
//! The whole access policy lives in three tables below ([`field_group`],
//! [`role_groups`], [`role_actions`]) so an alternative policy is a drop-in
//! change.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::analysis::AlgorithmId;
use crate::digest::{ct_eq, hmac_sha256_hex};
use crate::model::{FieldDef, Scope};

pub const VO_NAME: &str = "mgvo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    Clinician,
    Epidemiologist,
    Official,
    Researcher,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Clinician,
        Role::Researcher,
        Role::Epidemiologist,
        Role::Official,
        Role::Admin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Admin => "admin",
            Role::Clinician => "clinician",
            Role::Epidemiologist => "epidemiologist",
            Role::Official => "official",
            Role::Researcher => "researcher",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| TokenError::MalformedToken(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("a credential needs at least one role")]
    EmptyRoles,
    #[error("expiry is not in the future")]
    ExpiryInPast,
    #[error("subject may not be empty or contain '|' or newlines")]
    InvalidSubject,
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("token expired")]
    Expired,
    #[error("malformed token: {0}")]
    MalformedToken(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub subject: String,
    pub vo: String,
    pub roles: BTreeSet<Role>,
    pub expiry: u64,
    pub signature: String,
}

pub fn canonical_body(subject: &str, vo: &str, roles: &BTreeSet<Role>, expiry: u64) -> String {
    let mut names: Vec<&str> = roles.iter().map(|r| r.as_str()).collect();
    names.sort_unstable();
    format!("{subject}|{vo}|{}|{expiry}", names.join(","))
}

impl Credential {
    pub fn body(&self) -> String {
        canonical_body(&self.subject, &self.vo, &self.roles, self.expiry)
    }

    pub fn to_wire(&self) -> String {
        B64.encode(format!("{}\n{}", self.body(), self.signature))
    }

    pub fn from_wire(token: &str) -> Result<Self, TokenError> {
        let malformed = |m: &str| TokenError::MalformedToken(m.to_string());
        let raw = B64
            .decode(token.trim())
            .map_err(|_| malformed("not base64"))?;
        let text = String::from_utf8(raw).map_err(|_| malformed("not UTF-8"))?;
        let (body, signature) = text.split_once('\n').ok_or_else(|| malformed("no signature"))?;
        let parts: Vec<&str> = body.split('|').collect();
        let [subject, vo, roles, expiry] = parts[..] else {
            return Err(malformed("body needs four fields"));
        };
        let roles = roles
            .split(',')
            .filter(|r| !r.is_empty())
            .map(Role::from_str)
            .collect::<Result<BTreeSet<_>, _>>()?;
        Ok(Self {
            subject: subject.to_string(),
            vo: vo.to_string(),
            roles,
            expiry: expiry.parse().map_err(|_| malformed("bad expiry"))?,
            signature: signature.to_string(),
        })
    }

    pub fn identity(&self) -> Identity {
        Identity {
            subject: self.subject.clone(),
            vo: self.vo.clone(),
            roles: self.roles.clone(),
            expiry: self.expiry,
        }
    }
}

/// A verified requester.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub subject: String,
    pub vo: String,
    pub roles: BTreeSet<Role>,
    pub expiry: u64,
}

impl Identity {
    /// The role that decides row visibility when several are held: the most
    /// privileged data role wins.
    pub fn data_role(&self) -> Role {
        [Role::Clinician, Role::Researcher, Role::Epidemiologist, Role::Official]
            .into_iter()
            .find(|r| self.roles.contains(r))
            .unwrap_or(Role::Admin)
    }
}

pub fn issue_token(
    subject: &str,
    roles: &BTreeSet<Role>,
    expiry: u64,
    central_secret: &[u8],
    now: u64,
) -> Result<Credential, TokenError> {
    if subject.is_empty() || subject.contains(['|', '\n']) {
        return Err(TokenError::InvalidSubject);
    }
    if roles.is_empty() {
        return Err(TokenError::EmptyRoles);
    }
    if expiry <= now {
        return Err(TokenError::ExpiryInPast);
    }
    let body = canonical_body(subject, VO_NAME, roles, expiry);
    Ok(Credential {
        subject: subject.to_string(),
        vo: VO_NAME.to_string(),
        roles: roles.clone(),
        expiry,
        signature: hmac_sha256_hex(central_secret, body.as_bytes()),
    })
}

pub fn verify_credential(
    cred: &Credential,
    central_secret: &[u8],
    now: u64,
) -> Result<Identity, TokenError> {
    let expected = hmac_sha256_hex(central_secret, cred.body().as_bytes());
    if !ct_eq(&expected, &cred.signature) {
        return Err(TokenError::SignatureInvalid);
    }
    if cred.vo != VO_NAME {
        return Err(TokenError::MalformedToken(format!("foreign vo {:?}", cred.vo)));
    }
    if cred.roles.is_empty() {
        return Err(TokenError::MalformedToken("no roles".into()));
    }
    if now >= cred.expiry {
        return Err(TokenError::Expired);
    }
    Ok(cred.identity())
}

/// Verifies a token in wire form.
pub fn verify_token(token: &str, central_secret: &[u8], now: u64) -> Result<Identity, TokenError> {
    verify_credential(&Credential::from_wire(token)?, central_secret, now)
}

// ---------------------------------------------------------------------------
// Policy tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Query,
    CountQuery,
    FetchImage,
    ApplyAlgorithm(AlgorithmId),
    Annotate,
    SecondOpinion,
    /// Catalogue browsing and replica management.
    Catalogue,
    /// Node registration and other VO administration.
    VoAdmin,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::Query,
        Action::CountQuery,
        Action::FetchImage,
        Action::ApplyAlgorithm(AlgorithmId::Density),
        Action::ApplyAlgorithm(AlgorithmId::Cade),
        Action::Annotate,
        Action::SecondOpinion,
        Action::Catalogue,
        Action::VoAdmin,
    ];

    pub fn name(self) -> String {
        match self {
            Action::Query => "query".into(),
            Action::CountQuery => "count_query".into(),
            Action::FetchImage => "fetch_image".into(),
            Action::ApplyAlgorithm(a) => format!("apply_algorithm({a})"),
            Action::Annotate => "annotate".into(),
            Action::SecondOpinion => "second_opinion".into(),
            Action::Catalogue => "catalogue".into(),
            Action::VoAdmin => "vo_admin".into(),
        }
    }
}

/// Visibility classes of record fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldGroup {
    /// Re-identification data. Never leaves the owning node.
    Ident,
    /// Keys and geometry needed to address and merge rows.
    Struct,
    Clin,
    Epi,
}

pub fn field_group(scope: Scope, key: &str) -> FieldGroup {
    use FieldGroup::*;
    match (scope, key) {
        (Scope::Patient, "clinical_history" | "family_history" | "hrt_use" | "parity" | "diet_code") => Clin,
        (Scope::Patient, "age_at_exam" | "height_cm" | "weight_kg" | "site_id") => Epi,
        (Scope::Patient, "pseudonym_id") => Struct,
        (Scope::Exam, "site_id") => Epi,
        (Scope::Exam, "exam_id" | "patient" | "exam_year_month") => Struct,
        (Scope::Image, "view" | "laterality" | "density") => Epi,
        (
            Scope::Image,
            "image_id" | "exam" | "lfn" | "guid" | "width_px" | "height_px" | "bits_per_sample",
        ) => Struct,
        (Scope::Acq, _) => Epi,
        _ => Ident,
    }
}

pub fn role_groups(role: Role) -> &'static [FieldGroup] {
    use FieldGroup::*;
    match role {
        Role::Clinician => &[Struct, Clin, Epi],
        Role::Researcher | Role::Epidemiologist => &[Struct, Epi],
        Role::Official | Role::Admin => &[],
    }
}

pub fn role_actions(role: Role) -> &'static [Action] {
    use Action::*;
    use AlgorithmId::*;
    match role {
        Role::Clinician => &[
            Query,
            CountQuery,
            FetchImage,
            ApplyAlgorithm(Density),
            ApplyAlgorithm(Cade),
            Annotate,
            SecondOpinion,
            Catalogue,
        ],
        Role::Researcher | Role::Epidemiologist => &[Query, CountQuery, ApplyAlgorithm(Density)],
        Role::Official => &[CountQuery],
        Role::Admin => &[VoAdmin, Catalogue],
    }
}

/// Ages are coarsened to 5-year bands for these roles.
fn bands_age(role: Role) -> bool {
    matches!(role, Role::Researcher | Role::Epidemiologist)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

/// Deny-by-default lookup in the action matrix; any held role may grant.
pub fn authorize(identity: &Identity, action: Action) -> Decision {
    if identity
        .roles
        .iter()
        .any(|r| role_actions(*r).contains(&action))
    {
        Decision::Allow
    } else {
        Decision::Deny(format!("{} not granted", action.name()))
    }
}

pub fn visible(role: Role, scope: Scope, key: &str) -> bool {
    role_groups(role).contains(&field_group(scope, key))
}

/// Whether `role` may constrain a query on `field`. Count-only queries may
/// filter on any registered field since only an aggregate leaves the node.
pub fn may_filter(role: Role, field: &FieldDef, count_only: bool) -> bool {
    let group = field_group(field.scope, field.key);
    if group == FieldGroup::Ident {
        return false;
    }
    count_only || role_groups(role).contains(&group)
}

/// `"50-54"` style band with a lower bound that is a multiple of 5.
pub fn age_band(age: i64) -> String {
    let lower = age.div_euclid(5) * 5;
    format!("{lower}-{}", lower + 4)
}

fn row_scope(kind: &str) -> Option<Scope> {
    match kind {
        "patient" => Some(Scope::Patient),
        "exam" => Some(Scope::Exam),
        "image" => Some(Scope::Image),
        _ => None,
    }
}

/// Keeps only the fields of `row` that `role` may see, applying transforms.
pub fn redact(row: &Value, role: Role) -> Value {
    let Some(obj) = row.as_object() else {
        return Value::Object(Map::new());
    };
    let kind = obj.get("type").and_then(Value::as_str).unwrap_or("");
    if role_groups(role).is_empty() {
        // Aggregates are the only thing such roles receive.
        return if kind == "count" { row.clone() } else { Value::Object(Map::new()) };
    }
    let Some(scope) = row_scope(kind) else {
        return match kind {
            "count" | "derived" => row.clone(),
            _ => Value::Object(Map::new()),
        };
    };
    let mut out = Map::new();
    out.insert("type".into(), Value::String(kind.into()));
    for (key, value) in obj {
        if key == "type" {
            continue;
        }
        if scope == Scope::Image && key == "acquisition" {
            if let Some(acq) = value.as_object() {
                let kept: Map<String, Value> = acq
                    .iter()
                    .filter(|(k, _)| visible(role, Scope::Acq, k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                if !kept.is_empty() {
                    out.insert(key.clone(), Value::Object(kept));
                }
            }
            continue;
        }
        if !visible(role, scope, key) {
            continue;
        }
        let value = match (scope, key.as_str(), value.as_i64()) {
            (Scope::Patient, "age_at_exam", Some(age)) if bands_age(role) => {
                Value::String(age_band(age))
            }
            _ => value.clone(),
        };
        out.insert(key.clone(), value);
    }
    Value::Object(out)
}
