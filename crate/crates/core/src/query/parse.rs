//! Tokenizer and recursive-descent parser for the query language.
//!
//! ```text
//! query := "SELECT" entity "WHERE" conj [ "APPLY" ident "(" [params] ")" ] [ "COUNT" ]
//! conj  := atom { "AND" atom }
//! atom  := field op literal | field "BETWEEN" lit "AND" lit | field "IN" "(" lit {"," lit} ")"
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::QueryError;
use crate::analysis::{check_params, AlgorithmId};
use crate::model::{lookup_field, FieldDef, FieldType, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Patients,
    Exams,
    Images,
}

impl Entity {
    pub fn as_str(self) -> &'static str {
        match self {
            Entity::Patients => "patients",
            Entity::Exams => "exams",
            Entity::Images => "images",
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            Entity::Patients => Scope::Patient,
            Entity::Exams => Scope::Exam,
            Entity::Images => Scope::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Literal {
    Int(i64),
    Num(f64),
    Str(String),
    Bool(bool),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Num(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    write!(f, "{n:.1}")
                } else {
                    write!(f, "{n}")
                }
            }
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Bool(b) => f.write_str(if *b { "TRUE" } else { "FALSE" }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cond {
    Cmp(CmpOp, Literal),
    In(Vec<Literal>),
    Between(Literal, Literal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Qualified name, e.g. `image.view`.
    pub field: String,
    pub cond: Cond,
}

impl Atom {
    pub fn def(&self) -> &'static FieldDef {
        lookup_field(&self.field).expect("atoms are validated at parse time")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Apply {
    pub algorithm: AlgorithmId,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub entity: Entity,
    pub predicate: Vec<Atom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apply: Option<Apply>,
    #[serde(default)]
    pub count_only: bool,
}

impl QueryAst {
    /// Whether an algorithm must run over the selected images.
    pub fn is_complex(&self) -> bool {
        self.apply.is_some()
    }
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SELECT {} WHERE ", self.entity.as_str())?;
        for (i, a) in self.predicate.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            match &a.cond {
                Cond::Cmp(op, lit) => write!(f, "{} {} {lit}", a.field, op.symbol())?,
                Cond::Between(lo, hi) => write!(f, "{} BETWEEN {lo} AND {hi}", a.field)?,
                Cond::In(items) => {
                    let items: Vec<String> = items.iter().map(ToString::to_string).collect();
                    write!(f, "{} IN ({})", a.field, items.join(", "))?
                }
            }
        }
        if let Some(apply) = &self.apply {
            let params: Vec<String> = apply.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, " APPLY {}({})", apply.algorithm, params.join(", "))?;
        }
        if self.count_only {
            f.write_str(" COUNT")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Number(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    End,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |pos: usize, msg: &str| QueryError::Syntax {
        pos,
        message: msg.to_string(),
    };
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((start, Tok::Comma));
                i += 1;
            }
            b'=' => {
                out.push((start, Tok::Op("=")));
                i += 1;
            }
            b'!' if bytes.get(i + 1) == Some(&b'=') => {
                out.push((start, Tok::Op("!=")));
                i += 2;
            }
            b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                let op = match (c, eq) {
                    (b'<', true) => "<=",
                    (b'<', false) => "<",
                    (_, true) => ">=",
                    _ => ">",
                };
                out.push((start, Tok::Op(op)));
                i += if eq { 2 } else { 1 };
            }
            b'\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match text[i..].chars().next() {
                        None => return Err(err(start, "unterminated string")),
                        Some('\'') if bytes.get(i + 1) == Some(&b'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some('\'') => {
                            i += 1;
                            break;
                        }
                        Some(ch) => {
                            s.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            b'-' | b'0'..=b'9' => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let raw = &text[start..i];
                let valid = {
                    let digits = raw.strip_prefix('-').unwrap_or(raw);
                    let mut parts = digits.split('.');
                    let int = parts.next().unwrap_or("");
                    let frac = parts.next();
                    !int.is_empty()
                        && int.bytes().all(|b| b.is_ascii_digit())
                        && parts.next().is_none()
                        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
                };
                if !valid {
                    return Err(err(start, "malformed number"));
                }
                out.push((start, Tok::Number(raw.to_string())));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
                {
                    i += 1;
                }
                out.push((start, Tok::Word(text[start..i].to_string())));
            }
            _ => return Err(err(start, "unexpected character")),
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn next(&mut self) -> (usize, Tok) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, QueryError> {
        Err(QueryError::Syntax {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.is_keyword(kw) {
            self.next();
            Ok(())
        } else {
            self.syntax(format!("expected {kw}"))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), QueryError> {
        if *self.peek() == tok {
            self.next();
            Ok(())
        } else {
            self.syntax(format!("expected {what}"))
        }
    }

    fn query(&mut self) -> Result<QueryAst, QueryError> {
        self.keyword("SELECT")?;
        let entity = match self.peek() {
            Tok::Word(w) => match w.to_ascii_lowercase().as_str() {
                "patients" => Entity::Patients,
                "exams" => Entity::Exams,
                "images" => Entity::Images,
                _ => return self.syntax("expected patients, exams or images"),
            },
            _ => return self.syntax("expected entity"),
        };
        self.next();
        self.keyword("WHERE")?;
        let mut predicate = vec![self.atom()?];
        while self.is_keyword("AND") {
            self.next();
            predicate.push(self.atom()?);
        }
        let mut apply = None;
        if self.is_keyword("APPLY") {
            let apply_pos = self.pos();
            self.next();
            apply = Some(self.apply()?);
            if entity != Entity::Images {
                return Err(QueryError::Unsupported(format!(
                    "APPLY at position {apply_pos} requires SELECT images"
                )));
            }
        }
        let mut count_only = false;
        if self.is_keyword("COUNT") {
            self.next();
            count_only = true;
        }
        if *self.peek() != Tok::End {
            return self.syntax("unexpected trailing input");
        }
        if count_only && apply.is_some() {
            return Err(QueryError::Unsupported("COUNT cannot be combined with APPLY".into()));
        }
        Ok(QueryAst {
            entity,
            predicate,
            apply,
            count_only,
        })
    }

    fn atom(&mut self) -> Result<Atom, QueryError> {
        let name = match self.peek() {
            Tok::Word(w) if w.contains('.') => w.clone(),
            _ => return self.syntax("expected field"),
        };
        let def = lookup_field(&name).ok_or_else(|| QueryError::UnknownField(name.clone()))?;
        self.next();
        let cond = match self.next() {
            (_, Tok::Op(op)) => {
                let op = CmpOp::ALL.into_iter().find(|o| o.symbol() == op).expect("lexer ops");
                let lit = self.literal(def)?;
                if def.ty == FieldType::Bool && !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(QueryError::TypeMismatch(name));
                }
                Cond::Cmp(op, lit)
            }
            (_, Tok::Word(w)) if w.eq_ignore_ascii_case("BETWEEN") => {
                let lo = self.literal(def)?;
                self.keyword("AND")?;
                let hi = self.literal(def)?;
                if def.ty == FieldType::Bool {
                    return Err(QueryError::TypeMismatch(name));
                }
                Cond::Between(lo, hi)
            }
            (_, Tok::Word(w)) if w.eq_ignore_ascii_case("IN") => {
                self.expect(Tok::LParen, "(")?;
                let mut items = vec![self.literal(def)?];
                while *self.peek() == Tok::Comma {
                    self.next();
                    items.push(self.literal(def)?);
                }
                self.expect(Tok::RParen, ")")?;
                Cond::In(items)
            }
            (pos, _) => {
                return Err(QueryError::Syntax {
                    pos,
                    message: "expected operator".into(),
                })
            }
        };
        Ok(Atom { field: name, cond })
    }

    fn literal(&mut self, def: &FieldDef) -> Result<Literal, QueryError> {
        let mismatch = || QueryError::TypeMismatch(def.qualified());
        let lit = match self.peek().clone() {
            Tok::Str(s) => match def.ty {
                FieldType::Str => Literal::Str(s),
                _ => return Err(mismatch()),
            },
            Tok::Number(raw) => match def.ty {
                FieldType::Int if !raw.contains('.') => {
                    Literal::Int(raw.parse().map_err(|_| mismatch())?)
                }
                FieldType::Num => Literal::Num(raw.parse().map_err(|_| mismatch())?),
                _ => return Err(mismatch()),
            },
            Tok::Word(w) if w.eq_ignore_ascii_case("TRUE") || w.eq_ignore_ascii_case("FALSE") => {
                match def.ty {
                    FieldType::Bool => Literal::Bool(w.eq_ignore_ascii_case("TRUE")),
                    _ => return Err(mismatch()),
                }
            }
            _ => return self.syntax("expected literal"),
        };
        self.next();
        Ok(lit)
    }

    fn apply(&mut self) -> Result<Apply, QueryError> {
        let algorithm = match self.peek() {
            Tok::Word(w) => w
                .to_ascii_lowercase()
                .parse::<AlgorithmId>()
                .map_err(|_| QueryError::UnknownAlgorithm(w.clone()))?,
            _ => return self.syntax("expected algorithm name"),
        };
        self.next();
        self.expect(Tok::LParen, "(")?;
        let mut params = BTreeMap::new();
        if *self.peek() != Tok::RParen {
            loop {
                let key = match self.next() {
                    (_, Tok::Word(w)) => w,
                    (pos, _) => {
                        return Err(QueryError::Syntax {
                            pos,
                            message: "expected parameter name".into(),
                        })
                    }
                };
                self.expect(Tok::Op("="), "=")?;
                let value = match self.next() {
                    (_, Tok::Word(w) | Tok::Number(w) | Tok::Str(w)) => w,
                    (pos, _) => {
                        return Err(QueryError::Syntax {
                            pos,
                            message: "expected parameter value".into(),
                        })
                    }
                };
                params.insert(key, value);
                if *self.peek() == Tok::Comma {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, ")")?;
        check_params(algorithm, &params).map_err(|e| QueryError::InvalidParam(e.to_string()))?;
        Ok(Apply { algorithm, params })
    }
}

pub fn parse_query(text: &str) -> Result<QueryAst, QueryError> {
    let toks = lex(text)?;
    Parser { toks, at: 0 }.query()
}
