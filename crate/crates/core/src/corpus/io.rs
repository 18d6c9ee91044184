use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Dialogue, PersonaProfile, Speaker};
use crate::error::{Error, Result};

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_object(line_no: usize, line: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Parse {
            line: line_no,
            message: "record is not a JSON object".into(),
        }),
        Err(e) => Err(Error::Parse {
            line: line_no,
            message: e.to_string(),
        }),
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn required<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| schema(line, field, "missing required field"))
}

fn string_field(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String> {
    required(obj, line, field)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| schema(line, field, "expected a string"))
}

fn persona_field(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Option<PersonaProfile>> {
    let Some(value) = obj.get(field) else {
        return Ok(None);
    };
    if value.is_null() {
        return Ok(None);
    }
    let items = value
        .as_array()
        .ok_or_else(|| schema(line, field, "expected an array of strings"))?;
    let mut sentences = Vec::with_capacity(items.len());
    for item in items {
        let s = item
            .as_str()
            .ok_or_else(|| schema(line, field, "expected an array of strings"))?;
        sentences.push(s.to_string());
    }
    if sentences.is_empty() {
        return Ok(None);
    }
    PersonaProfile::new(sentences)
        .map(Some)
        .map_err(|e| schema(line, field, e.to_string()))
}

fn turns_field<F>(obj: &Map<String, Value>, line: usize, tag: &str, map_tag: F) -> Result<Vec<(Speaker, String)>>
where
    F: Fn(&str) -> Option<Speaker>,
{
    let turns = required(obj, line, "turns")?
        .as_array()
        .ok_or_else(|| schema(line, "turns", "expected an array"))?;
    let mut out = Vec::with_capacity(turns.len());
    for (i, turn) in turns.iter().enumerate() {
        let turn = turn
            .as_object()
            .ok_or_else(|| schema(line, "turns", format!("turn {i} is not an object")))?;
        let raw = turn
            .get(tag)
            .and_then(Value::as_str)
            .ok_or_else(|| schema(line, &format!("turns[{i}].{tag}"), "missing or not a string"))?;
        let speaker =
            map_tag(raw).ok_or_else(|| schema(line, &format!("turns[{i}].{tag}"), format!("unknown value `{raw}`")))?;
        let text = turn
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(line, &format!("turns[{i}].text"), "missing or not a string"))?;
        out.push((speaker, text.to_string()));
    }
    Ok(out)
}

fn build(line: usize, id: String, turns: Vec<(Speaker, String)>, a: Option<PersonaProfile>, b: Option<PersonaProfile>) -> Result<Dialogue> {
    Dialogue::from_turns(id, turns, a, b).map_err(|e| schema(line, "turns", e.to_string()))
}

/// Loads Persona-Chat-style JSONL:
/// `{"id", "persona_a": [..], "persona_b": [..], "turns": [{"speaker": "A"|"B", "text"}]}`.
pub fn load_persona_chat(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let obj = parse_object(line, &text)?;
        let id = string_field(&obj, line, "id")?;
        let persona_a = persona_field(&obj, line, "persona_a")?;
        let persona_b = persona_field(&obj, line, "persona_b")?;
        let turns = turns_field(&obj, line, "speaker", |s| match s {
            "A" => Some(Speaker::A),
            "B" => Some(Speaker::B),
            _ => None,
        })?;
        out.push(build(line, id, turns, persona_a, persona_b)?);
    }
    Ok(out)
}

/// Loads ESConv-style JSONL: `{"id", "turns": [{"role": "seeker"|"supporter", "text"}]}`.
///
/// Seekers become speaker A and supporters speaker B; no personas are attached.
pub fn load_esconv(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let obj = parse_object(line, &text)?;
        let id = string_field(&obj, line, "id")?;
        let turns = turns_field(&obj, line, "role", |s| match s {
            "seeker" => Some(Speaker::A),
            "supporter" => Some(Speaker::B),
            _ => None,
        })?;
        out.push(build(line, id, turns, None, None)?);
    }
    Ok(out)
}

fn write_jsonl(path: &Path, records: impl Iterator<Item = Value>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, &record).expect("JSON values always serialize");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_persona_chat(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let persona = |p: &Option<PersonaProfile>| p.as_ref().map(|p| p.sentences().to_vec()).unwrap_or_default();
    write_jsonl(
        path.as_ref(),
        dialogues.iter().map(|d| {
            json!({
                "id": d.id,
                "persona_a": persona(&d.persona_a),
                "persona_b": persona(&d.persona_b),
                "turns": d.utterances.iter().map(|u| json!({"speaker": u.speaker.as_str(), "text": u.text})).collect::<Vec<_>>(),
            })
        }),
    )
}

/// Writes dialogues in ESConv layout, dropping any persona annotations.
pub fn write_esconv(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let role = |s: Speaker| match s {
        Speaker::A => "seeker",
        Speaker::B => "supporter",
    };
    write_jsonl(
        path.as_ref(),
        dialogues.iter().map(|d| {
            json!({
                "id": d.id,
                "turns": d.utterances.iter().map(|u| json!({"role": role(u.speaker), "text": u.text})).collect::<Vec<_>>(),
            })
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn persona_chat_record() {
        let f = write(
            r#"{"id": "pc-0", "persona_a": ["I like tea.", "I have a cat."], "persona_b": [], "turns": [{"speaker": "A", "text": "hi"}, {"speaker": "B", "text": "hello"}]}"#,
        );
        let d = load_persona_chat(f.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].utterances.len(), 2);
        assert_eq!(d[0].persona_a.as_ref().unwrap().len(), 2);
        assert!(d[0].persona_b.is_none());
        assert_eq!(d[0].utterances[1].index, 2);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write("");
        assert!(load_persona_chat(f.path()).unwrap().is_empty());
    }

    #[test]
    fn empty_persona_sentence_is_schema_error() {
        let f = write(r#"{"id": "x", "persona_a": [""], "turns": [{"speaker": "A", "text": "hi"}]}"#);
        match load_persona_chat(f.path()) {
            Err(Error::Schema { field, line, .. }) => {
                assert_eq!(field, "persona_a");
                assert_eq!(line, 1);
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_line() {
        let f = write("{\"id\": \"a\", \"turns\": [{\"speaker\": \"A\", \"text\": \"x\"}]}\n{not json\n");
        match load_persona_chat(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_field() {
        let f = write(r#"{"persona_a": ["x"], "turns": []}"#);
        match load_persona_chat(f.path()) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "id"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn esconv_roles_map_to_speakers() {
        let f = write(
            r#"{"id": "es-0", "turns": [{"role": "seeker", "text": "a"}, {"role": "supporter", "text": "b"}, {"role": "seeker", "text": "c"}]}"#,
        );
        let d = load_esconv(f.path()).unwrap();
        let speakers: Vec<_> = d[0].utterances.iter().map(|u| u.speaker).collect();
        assert_eq!(speakers, vec![Speaker::A, Speaker::B, Speaker::A]);
        assert!(d[0].persona_a.is_none() && d[0].persona_b.is_none());
    }

    #[test]
    fn esconv_unknown_role() {
        let f = write(r#"{"id": "es-0", "turns": [{"role": "observer", "text": "a"}]}"#);
        assert!(matches!(load_esconv(f.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn esconv_ten_records() {
        let line = r#"{"id": "es", "turns": [{"role": "seeker", "text": "a"}, {"role": "supporter", "text": "b"}]}"#;
        let f = write(&format!("{}\n", vec![line; 10].join("\n")));
        let d = load_esconv(f.path()).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.iter().all(|d| d.persona_a.is_none()));
    }
}
