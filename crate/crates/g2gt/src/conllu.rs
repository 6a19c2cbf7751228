//! CoNLL-U reading and writing.
//!
//! Only FORM, HEAD and DEPREL are modelled. Comment lines, multiword token
//! ranges (`3-4`) and empty nodes (`5.1`) are skipped on input; every other
//! column is written back as `_`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use g2gt_core::graph::DepTree;

use crate::error::{Error, Result};

const COLUMNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub forms: Vec<String>,
    pub tree: DepTree,
}

impl Sentence {
    pub fn new(forms: Vec<String>, tree: DepTree) -> Result<Self> {
        if forms.len() != tree.len() {
            return Err(Error::Data(format!(
                "{} forms for a tree over {} tokens",
                forms.len(),
                tree.len()
            )));
        }
        Ok(Sentence { forms, tree })
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }
}

pub type Corpus = Vec<Sentence>;

pub fn load_conllu(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_conllu(BufReader::new(file)).map_err(|e| match e {
        Error::Conllu { line, message } => Error::Data(format!("{}:{line}: {message}", path.display())),
        other => other,
    })
}

pub fn read_conllu<R: Read>(reader: R) -> Result<Corpus> {
    let mut corpus = Vec::new();
    let mut forms: Vec<String> = Vec::new();
    let mut heads: Vec<Option<usize>> = Vec::new();
    let mut deprels: Vec<String> = Vec::new();
    let mut start_line = 0;

    let mut flush = |forms: &mut Vec<String>,
                     heads: &mut Vec<Option<usize>>,
                     deprels: &mut Vec<String>,
                     line: usize|
     -> Result<()> {
        if forms.is_empty() {
            return Ok(());
        }
        let tree = DepTree::new(std::mem::take(heads), std::mem::take(deprels))
            .and_then(|t| t.validate(false).map(|_| t))
            .map_err(|e| Error::Conllu {
                line,
                message: e.to_string(),
            })?;
        corpus.push(Sentence {
            forms: std::mem::take(forms),
            tree,
        });
        Ok(())
    };

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Conllu {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut forms, &mut heads, &mut deprels, start_line)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != COLUMNS {
            return Err(Error::Conllu {
                line: lineno,
                message: format!("expected {COLUMNS} tab-separated columns, found {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id.parse().map_err(|_| Error::Conllu {
            line: lineno,
            message: format!("token id {id:?} is not an integer"),
        })?;
        if forms.is_empty() {
            start_line = lineno;
        }
        if id != forms.len() + 1 {
            return Err(Error::Conllu {
                line: lineno,
                message: format!("token id {id} out of sequence, expected {}", forms.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| Error::Conllu {
            line: lineno,
            message: format!("HEAD {:?} is not an integer", cols[6]),
        })?;
        forms.push(cols[1].to_string());
        heads.push(Some(head));
        deprels.push(cols[7].to_string());
    }
    flush(&mut forms, &mut heads, &mut deprels, start_line)?;
    Ok(corpus)
}

pub fn write_conllu<W: Write>(mut writer: W, corpus: &[Sentence]) -> std::io::Result<()> {
    for sentence in corpus {
        for (i, form) in sentence.forms.iter().enumerate() {
            let id = i + 1;
            let head = sentence
                .tree
                .head(id)
                .map_or_else(|| "_".to_string(), |h| h.to_string());
            let deprel = sentence.tree.deprel(id);
            let deprel = if deprel.is_empty() { "_" } else { deprel };
            writeln!(writer, "{id}\t{form}\t_\t_\t_\t_\t{head}\t{deprel}\t_\t_")?;
        }
        writeln!(writer)?;
    }
    writer.flush()
}

pub fn save_conllu(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_conllu(BufWriter::new(file), corpus).map_err(|e| Error::io(path, e))
}
