//! Plain-text transcripts with one `SPEAKER: utterance` line per turn.

use super::synth::lexicon_pos;
use super::{AnnotatedConversation, Speaker, Task, Token, Utterance};
use crate::encoder::KnowledgeGraph;
use crate::error::{Error, Result};

const PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Splits on whitespace and detaches leading and trailing punctuation marks.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in line.split_whitespace() {
        let body = raw.trim_end_matches(PUNCT);
        let (lead, core) = {
            let core = body.trim_start_matches(PUNCT);
            (&body[..body.len() - core.len()], core)
        };
        out.extend(lead.chars().map(String::from));
        if !core.is_empty() {
            out.push(core.to_string());
        }
        out.extend(raw[body.len()..].chars().map(String::from));
    }
    out
}

fn speaker(tag: &str) -> Speaker {
    match tag.trim().to_ascii_uppercase().as_str() {
        "DR" | "DOCTOR" => Speaker::Dr,
        "PT" | "PATIENT" => Speaker::Pt,
        _ => Speaker::Other,
    }
}

/// Reads an unannotated conversation; POS and KG features come from the lexicon and `kg`.
pub fn parse_transcript(text: &str, id: &str, task: Task, kg: &KnowledgeGraph) -> Result<AnnotatedConversation> {
    let mut utterances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (who, body) = match line.split_once(':') {
            Some((who, body)) if !who.contains(char::is_whitespace) => (speaker(who), body),
            _ => (Speaker::Other, line),
        };
        let tokens: Vec<Token> = tokenize(body)
            .into_iter()
            .map(|w| Token {
                pos: Some(lexicon_pos(&w, kg)),
                kg: kg.lookup(&w),
                text: w,
            })
            .collect();
        if tokens.is_empty() {
            return Err(Error::Parse {
                path: id.into(),
                line: i + 1,
                reason: "utterance has no tokens".into(),
            });
        }
        utterances.push(Utterance { speaker: who, tokens });
    }
    if utterances.is_empty() {
        return Err(Error::EmptyInput("transcript"));
    }
    Ok(AnnotatedConversation {
        id: id.to_string(),
        task,
        utterances,
        spans: vec![],
        relations: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_detached() {
        assert_eq!(tokenize("It hurts every morning."), ["It", "hurts", "every", "morning", "."]);
        assert_eq!(tokenize("I've been taking Ibuprofen. Twice a day."), [
            "I've", "been", "taking", "Ibuprofen", ".", "Twice", "a", "day", "."
        ]);
        assert_eq!(tokenize("(ok) ?!"), ["(ok)", "?", "!"]);
    }

    #[test]
    fn transcript_lines_become_utterances() {
        let kg = KnowledgeGraph::empty(2, vec!["t".into()]);
        let c = parse_transcript("DR: Any pain?\n\nPT: yes, a lot.\nnoise here", "x", Task::Sx, &kg).unwrap();
        assert_eq!(c.utterances.len(), 3);
        assert_eq!(c.utterances[0].speaker, Speaker::Dr);
        assert_eq!(c.utterances[1].speaker, Speaker::Pt);
        assert_eq!(c.utterances[2].speaker, Speaker::Other);
        assert_eq!(c.words(), ["any", "pain", "?", "yes", ",", "a", "lot", ".", "noise", "here"]);
        assert!(c.tokens().all(|t| t.pos.is_some()));
        assert!(parse_transcript("\n \n", "x", Task::Sx, &kg).is_err());
    }
}
