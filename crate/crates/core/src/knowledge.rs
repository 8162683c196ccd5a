//! Findings and reference documents injected into designer and writer
//! prompts. Raw material is either digested by the LLM or added verbatim.
//!
//! Stored as `knowledge/index` (YAML list of doc headers, insertion order)
//! plus one `knowledge/<doc_id>` text file per body.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::gateway::{Gateway, GatewayError, RoleName};

pub const INDEX_FILE: &str = "index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocOrigin {
    Digested,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub origin: DocOrigin,
    pub source_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocHeader {
    pub doc_id: String,
    pub title: String,
    pub origin: DocOrigin,
    #[serde(default)]
    pub source_note: String,
}

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("document id {0:?} already exists")]
    DuplicateId(String),
    #[error("document body is empty")]
    EmptyBody,
    #[error("raw document is empty")]
    EmptyRaw,
    #[error("digester returned an empty summary")]
    EmptyDigest,
    #[error("corrupt knowledge index {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("storage failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn parse_index(text: &str) -> Result<Vec<DocHeader>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let headers: Vec<DocHeader> = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
    for (i, h) in headers.iter().enumerate() {
        if !is_slug(&h.doc_id) {
            return Err(format!("entry {}: invalid doc id {:?}", i + 1, h.doc_id));
        }
        if headers[..i].iter().any(|o| o.doc_id == h.doc_id) {
            return Err(format!("entry {}: duplicate doc id {:?}", i + 1, h.doc_id));
        }
    }
    Ok(headers)
}

fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        && !s.starts_with('-')
        && s != INDEX_FILE
}

/// Lowercase ASCII slug of `title`; `doc` when nothing usable remains.
pub fn slugify(title: &str) -> String {
    let mut slug = String::new();
    for c in title.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    let mut slug: String = slug.trim_end_matches('-').chars().take(48).collect();
    while slug.ends_with('-') {
        slug.pop();
    }
    if slug.is_empty() || slug == INDEX_FILE {
        slug.insert_str(0, "doc");
    }
    slug
}

#[derive(Debug)]
pub struct KnowledgeBase {
    root: PathBuf,
    docs: Vec<KnowledgeDoc>,
}

impl KnowledgeBase {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, KnowledgeError> {
        let root = root.into();
        let index_path = root.join(INDEX_FILE);
        if !index_path.exists() {
            return Ok(Self { root, docs: Vec::new() });
        }
        let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
        let headers = parse_index(&text).map_err(|detail| KnowledgeError::Corrupt {
            path: index_path.clone(),
            detail,
        })?;
        let mut docs = Vec::with_capacity(headers.len());
        for h in headers {
            let path = root.join(&h.doc_id);
            let body = fs::read_to_string(&path).map_err(io_err(&path))?;
            docs.push(KnowledgeDoc {
                doc_id: h.doc_id,
                title: h.title,
                body,
                origin: h.origin,
                source_note: h.source_note,
            });
        }
        Ok(Self { root, docs })
    }

    pub fn list_docs(&self) -> &[KnowledgeDoc] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&KnowledgeDoc> {
        self.docs.iter().find(|d| d.doc_id == doc_id)
    }

    /// Documents for one generation's prompts. When the bodies exceed
    /// `budget_bytes`, the oldest documents are dropped first.
    pub fn snapshot(&self, budget_bytes: Option<usize>) -> Vec<KnowledgeDoc> {
        let Some(budget) = budget_bytes else {
            return self.docs.clone();
        };
        let mut used = 0usize;
        let mut keep_from = self.docs.len();
        for (i, doc) in self.docs.iter().enumerate().rev() {
            if used + doc.body.len() > budget {
                break;
            }
            used += doc.body.len();
            keep_from = i;
        }
        self.docs[keep_from..].to_vec()
    }

    /// Stores a document verbatim under the slug of its title.
    pub fn add_manual_doc(&mut self, title: &str, body: &str) -> Result<KnowledgeDoc, KnowledgeError> {
        self.add_manual_doc_with_note(title, body, "added manually")
    }

    pub fn add_manual_doc_with_note(
        &mut self,
        title: &str,
        body: &str,
        source_note: &str,
    ) -> Result<KnowledgeDoc, KnowledgeError> {
        if body.trim().is_empty() {
            return Err(KnowledgeError::EmptyBody);
        }
        let doc_id = slugify(title);
        if self.get(&doc_id).is_some() {
            return Err(KnowledgeError::DuplicateId(doc_id));
        }
        self.insert(KnowledgeDoc {
            doc_id,
            title: title.to_string(),
            body: body.to_string(),
            origin: DocOrigin::Manual,
            source_note: source_note.to_string(),
        })
    }

    /// Has the digester model condense `raw` to what matters for the task,
    /// and stores the result. Ids are made unique with a numeric suffix.
    pub fn digest_document(
        &mut self,
        gateway: &Gateway,
        title: &str,
        raw: &str,
        task_description: &str,
    ) -> Result<KnowledgeDoc, KnowledgeError> {
        if raw.trim().is_empty() {
            return Err(KnowledgeError::EmptyRaw);
        }
        let prompt = build_digest_prompt(title, raw, task_description);
        let summary = gateway.complete(RoleName::Digester, "digester", &prompt)?;
        if summary.trim().is_empty() {
            return Err(KnowledgeError::EmptyDigest);
        }
        let doc_id = self.unique_id(&slugify(title));
        self.insert(KnowledgeDoc {
            doc_id,
            title: title.to_string(),
            body: summary,
            origin: DocOrigin::Digested,
            source_note: format!("digested from {title} ({} bytes)", raw.len()),
        })
    }

    fn unique_id(&self, base: &str) -> String {
        if self.get(base).is_none() {
            return base.to_string();
        }
        (2..)
            .map(|n| format!("{base}-{n}"))
            .find(|id| self.get(id).is_none())
            .expect("unbounded suffix search")
    }

    fn insert(&mut self, doc: KnowledgeDoc) -> Result<KnowledgeDoc, KnowledgeError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let body_path = self.root.join(&doc.doc_id);
        write_atomic(&body_path, doc.body.as_bytes()).map_err(io_err(&body_path))?;
        self.docs.push(doc.clone());
        let index_path = self.root.join(INDEX_FILE);
        if let Err(e) = write_atomic(&index_path, render_index(&self.docs).as_bytes()) {
            self.docs.pop();
            return Err(io_err(&index_path)(e));
        }
        Ok(doc)
    }
}

fn render_index(docs: &[KnowledgeDoc]) -> String {
    let headers: Vec<DocHeader> = docs
        .iter()
        .map(|d| DocHeader {
            doc_id: d.doc_id.clone(),
            title: d.title.clone(),
            origin: d.origin,
            source_note: d.source_note.clone(),
        })
        .collect();
    serde_yaml::to_string(&headers).expect("headers serialize")
}

pub fn build_digest_prompt(title: &str, raw: &str, task_description: &str) -> String {
    format!(
        "You are helping an automated GPU kernel optimization system build its notes.\n\n\
         # Task the system is working on\n\n{task}\n\n\
         # Source document: {title}\n\n{raw}\n\n\
         # Instructions\n\n\
         Summarise the source document into a findings document for later use by the \
         system. Keep only guidance that is relevant to the task above: hardware facts, \
         programming techniques, pitfalls, and concrete code patterns. Omit everything \
         else. Be concise and precise.\n",
        task = task_description.trim(),
        raw = raw.trim_end(),
    )
}
