//! Document-structured bitext.
//!
//! One sentence pair per line as `source<TAB>target`; documents are
//! separated by one or more blank lines; lines starting with `#` are
//! comments. Tokens are separated by single spaces.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub sentences: Vec<(String, String)>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|(s, _)| s.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|(_, t)| t.as_str())
    }
}

pub fn parse_documents(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut current = Document::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            continue;
        }
        let mut parts = line.split('\t');
        let (src, tgt) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(t), None) => (s.trim(), t.trim()),
            (_, None, _) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected `source<TAB>target`, found no tab".into(),
                })
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "more than one tab".into(),
                })
            }
        };
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty source or target".into(),
            });
        }
        current.sentences.push((src.to_string(), tgt.to_string()));
    }
    if !current.is_empty() {
        docs.push(current);
    }
    Ok(docs)
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    parse_documents(&fs::read_to_string(path)?)
}

pub fn format_documents(docs: &[Document]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (s, t) in &doc.sentences {
            out.push_str(s);
            out.push('\t');
            out.push_str(t);
            out.push('\n');
        }
    }
    out
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, format_documents(docs))?;
    Ok(())
}
