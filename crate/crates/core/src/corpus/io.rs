use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedConversation, Corpus, OntologyCounts, RelationAnnotation, SpanAnnotation, Task, TaskOntology, Utterance};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    format_version: u32,
    id: String,
    task: Task,
    ontology: OntologyCounts,
    utterances: Vec<Utterance>,
    spans: Vec<SpanAnnotation>,
    relations: Vec<RelationAnnotation>,
}

/// Writes one JSON record per line.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let counts = corpus.ontology.counts();
    for c in &corpus.conversations {
        let rec = Record {
            format_version: CORPUS_FORMAT_VERSION,
            id: c.id.clone(),
            task: c.task,
            ontology: counts,
            utterances: c.utterances.clone(),
            spans: c.spans.clone(),
            relations: c.relations.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path.as_ref())?;
    write_corpus(corpus, BufWriter::new(f))
}

/// Parses a corpus stream; `path` is only used in error messages.
pub fn parse_corpus<R: BufRead>(reader: R, path: &Path) -> Result<Corpus> {
    let mut ontology: Option<TaskOntology> = None;
    let mut conversations = Vec::new();
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        if rec.format_version != CORPUS_FORMAT_VERSION {
            return Err(perr(
                lineno,
                format!(
                    "format_version {} not supported (expected {CORPUS_FORMAT_VERSION})",
                    rec.format_version
                ),
            ));
        }
        let onto = TaskOntology::from_counts(rec.task, rec.ontology)
            .map_err(|e| perr(lineno, e.to_string()))?;
        match &ontology {
            None => ontology = Some(onto),
            Some(o) if *o != onto => {
                return Err(perr(lineno, "ontology differs from earlier records".into()));
            }
            Some(_) => {}
        }
        let conv = AnnotatedConversation {
            id: rec.id,
            task: rec.task,
            utterances: rec.utterances,
            spans: rec.spans,
            relations: rec.relations,
        };
        conv.validate(ontology.as_ref().expect("set above"))
            .map_err(|e| perr(lineno, e.to_string()))?;
        conversations.push(conv);
    }
    let ontology = ontology.ok_or_else(|| perr(0, "corpus file has no records".into()))?;
    Ok(Corpus {
        ontology,
        conversations,
    })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let f = File::open(path)?;
    parse_corpus(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn small() -> Corpus {
        generate_synthetic(&SynthConfig {
            n_conversations: 3,
            ..SynthConfig::desk(Task::Sx, 5)
        })
        .unwrap()
        .0
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = small();
        save_corpus(&c, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    fn first_line_json() -> serde_json::Value {
        let mut buf = Vec::new();
        write_corpus(&small(), &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        serde_json::from_str(&line).unwrap()
    }

    fn parse_value(v: &serde_json::Value) -> Result<Corpus> {
        let s = format!("{}\n", v);
        parse_corpus(s.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn span_beyond_tokens_names_conversation() {
        let mut v = first_line_json();
        let id = v["id"].as_str().unwrap().to_string();
        v["spans"][0]["end"] = serde_json::json!(100000);
        let err = parse_value(&v).unwrap_err().to_string();
        assert!(err.contains(&id) && err.contains("mem.jsonl:1"), "{err}");
    }

    #[test]
    fn relation_to_property_rejected() {
        let mut v = first_line_json();
        let spans = v["spans"].as_array().unwrap();
        let prop = spans.iter().position(|s| s["kind"] == "property").unwrap();
        v["relations"] = serde_json::json!([{"property": prop, "entity": prop}]);
        assert!(parse_value(&v).is_err());
    }

    #[test]
    fn version_and_syntax_errors_carry_line_numbers() {
        let mut v = first_line_json();
        v["format_version"] = serde_json::json!(99);
        let err = parse_value(&v).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("99"), "{err}");

        let text = format!("{}\n{{not json\n", first_line_json());
        let err = parse_corpus(text.as_bytes(), Path::new("x")).unwrap_err().to_string();
        assert!(err.starts_with("x:2:"), "{err}");

        let mut v = first_line_json();
        v.as_object_mut().unwrap().remove("format_version");
        assert!(parse_value(&v).is_err());
    }
}
