//! Story scripts: an ordered list of (scene, action) prompt pairs.
//!
//! Two JSON layouts are accepted. The canonical one names both prompts of a
//! segment explicitly:
//!
//! ```json
//! {"story_id":"nyc","segments":[{"scene":"...","action":"..."}]}
//! ```
//!
//! The flat layout lists prompts alternately (even positions are scenes, odd
//! positions are actions) and must have even length:
//!
//! ```json
//! {"story_id":"nyc","prompts":["scene 1","action 1","scene 2","action 2"]}
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    /// 1-based segment ordinal.
    pub index: usize,
    pub scene: String,
    pub action: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoryScript {
    pub story_id: String,
    pub pairs: Vec<PromptPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Error,
    Info,
}

/// A problem (or note) found in a script. `segment` is 0 for script-level
/// findings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub segment: usize,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "segment={} msg={}", self.segment, self.message)
    }
}

/// Result of [`validate_script`]. A script is valid iff `errors` is empty;
/// `notes` are informational only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScriptReport {
    pub errors: Vec<Diagnostic>,
    pub notes: Vec<Diagnostic>,
}

impl ScriptReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptDoc {
    story_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<SegmentDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompts: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    scene: String,
    action: String,
}

impl StoryScript {
    /// Builds a script from (scene, action) tuples, assigning indices 1..=n.
    /// No validation is performed.
    pub fn from_pairs<S, A>(story_id: impl Into<String>, pairs: impl IntoIterator<Item = (S, A)>) -> Self
    where
        S: Into<String>,
        A: Into<String>,
    {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (scene, action))| PromptPair {
                index: i + 1,
                scene: scene.into(),
                action: action.into(),
            })
            .collect();
        StoryScript {
            story_id: story_id.into(),
            pairs,
        }
    }

    /// Converts the flat alternating prompt list into pairs.
    pub fn from_flat(story_id: impl Into<String>, prompts: &[String]) -> Result<Self> {
        if prompts.len() % 2 != 0 {
            return Err(Error::Validation(vec![Diagnostic {
                segment: 0,
                severity: Severity::Error,
                message: format!("flat prompt list has odd length {}", prompts.len()),
            }]));
        }
        Ok(StoryScript::from_pairs(
            story_id,
            prompts
                .chunks_exact(2)
                .map(|c| (c[0].clone(), c[1].clone())),
        ))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, index: usize) -> Option<&PromptPair> {
        index.checked_sub(1).and_then(|i| self.pairs.get(i))
    }

    /// Canonical JSON (segments layout). `parse_script(to_json(s)) == s` for
    /// every valid script.
    pub fn to_json(&self) -> String {
        let doc = ScriptDoc {
            story_id: self.story_id.clone(),
            segments: Some(
                self.pairs
                    .iter()
                    .map(|p| SegmentDoc {
                        scene: p.scene.clone(),
                        action: p.action.clone(),
                    })
                    .collect(),
            ),
            prompts: None,
        };
        serde_json::to_string(&doc).expect("script serialization is infallible")
    }
}

fn is_blank(s: &str) -> bool {
    s.trim().is_empty()
}

/// Parses script JSON without checking the content invariants.
pub fn parse_script_unchecked(raw: &[u8]) -> Result<StoryScript> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        message: "input is not valid UTF-8".into(),
    })?;
    let doc: ScriptDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    match (doc.segments, doc.prompts) {
        (Some(segments), None) => Ok(StoryScript::from_pairs(
            doc.story_id,
            segments.into_iter().map(|s| (s.scene, s.action)),
        )),
        (None, Some(prompts)) => StoryScript::from_flat(doc.story_id, &prompts),
        (Some(_), Some(_)) => Err(Error::Parse {
            offset: 0,
            message: "script has both `segments` and `prompts`".into(),
        }),
        (None, None) => Err(Error::Parse {
            offset: 0,
            message: "script needs `segments` or `prompts`".into(),
        }),
    }
}

/// Parses and validates a script document.
pub fn parse_script(raw: &[u8]) -> Result<StoryScript> {
    let script = parse_script_unchecked(raw)?;
    let report = validate_script(&script);
    if report.is_valid() {
        Ok(script)
    } else {
        Err(Error::Validation(report.errors))
    }
}

pub fn validate_script(script: &StoryScript) -> ScriptReport {
    let mut report = ScriptReport::default();
    let mut error = |segment: usize, message: String| {
        report.errors.push(Diagnostic {
            segment,
            severity: Severity::Error,
            message,
        })
    };

    if is_blank(&script.story_id) {
        error(0, "empty story_id".into());
    }
    if script.pairs.is_empty() {
        error(0, "empty segment list".into());
    }
    for (pos, pair) in script.pairs.iter().enumerate() {
        let expected = pos + 1;
        if pair.index != expected {
            error(
                expected,
                format!("segment index {} does not match position {}", pair.index, expected),
            );
        }
        if is_blank(&pair.scene) {
            error(expected, "empty scene prompt".into());
        }
        if is_blank(&pair.action) {
            error(expected, "empty action prompt".into());
        }
    }

    for w in script.pairs.windows(2) {
        if w[0].scene == w[1].scene && w[0].action == w[1].action {
            report.notes.push(Diagnostic {
                segment: w[1].index,
                severity: Severity::Info,
                message: "identical adjacent pair".into(),
            });
        }
    }
    report
}

// serde_json reports 1-based line and byte column.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_pair() {
        let raw = br#"{"story_id":"nyc","segments":[{"scene":"Tom Cruise is inside of the subway train","action":"Tom Cruise is sitting"}]}"#;
        let s = parse_script(raw).unwrap();
        assert_eq!(s.story_id, "nyc");
        assert_eq!(s.len(), 1);
        assert_eq!(s.pairs[0].index, 1);
        assert_eq!(s.pairs[0].scene, "Tom Cruise is inside of the subway train");
        assert_eq!(s.pairs[0].action, "Tom Cruise is sitting");
    }

    #[test]
    fn empty_segment_list_is_rejected() {
        let err = parse_script(br#"{"story_id":"x","segments":[]}"#).unwrap_err();
        match err {
            Error::Validation(d) => {
                assert_eq!(d.len(), 1);
                assert_eq!(d[0].message, "empty segment list");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_prompt_names_segment() {
        let raw = br#"{"story_id":"x","segments":[{"scene":"a","action":"b"},{"scene":"c","action":"  "}]}"#;
        match parse_script(raw).unwrap_err() {
            Error::Validation(d) => {
                assert_eq!(d.len(), 1);
                assert_eq!(d[0].segment, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = b"{\"story_id\":\"x\",\n \"segments\": [}";
        match parse_script(raw).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 31),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let raw = b"{\"story_id\":\"\xff\"}";
        match parse_script(raw).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_form_converts() {
        let raw = br#"{"story_id":"f","prompts":["s1","a1","s2","a2"]}"#;
        let s = parse_script(raw).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.pairs[1].scene, "s2");
        assert_eq!(s.pairs[1].action, "a2");

        let odd = br#"{"story_id":"f","prompts":["s1","a1","s2"]}"#;
        assert!(matches!(parse_script(odd), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = br#"{"story_id":"f","segments":[{"scene":"a","action":"b","extra":1}]}"#;
        assert!(matches!(parse_script(raw), Err(Error::Parse { .. })));
    }

    #[test]
    fn validator_examples() {
        let ok = StoryScript::from_pairs("s", [("a", "b"), ("c", "d"), ("e", "f")]);
        assert_eq!(validate_script(&ok), ScriptReport::default());

        let blank = StoryScript::from_pairs("s", [("a", "b"), ("c", "\t"), ("e", "f")]);
        let r = validate_script(&blank);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].segment, 2);

        let dup = StoryScript::from_pairs("s", [("a", "b"), ("a", "b")]);
        let r = validate_script(&dup);
        assert!(r.errors.is_empty());
        assert_eq!(r.notes.len(), 1);
        assert_eq!(r.notes[0].message, "identical adjacent pair");
        assert_eq!(r.notes[0].severity, Severity::Info);
    }

    #[test]
    fn validator_catches_bad_indices_and_id() {
        let mut s = StoryScript::from_pairs(" ", [("a", "b"), ("c", "d")]);
        s.pairs[1].index = 5;
        let r = validate_script(&s);
        assert_eq!(r.errors.len(), 2);
        assert_eq!(r.errors[0].segment, 0);
        assert_eq!(r.errors[1].segment, 2);
    }

    #[test]
    fn diagnostic_line_format() {
        let d = Diagnostic {
            segment: 3,
            severity: Severity::Error,
            message: "empty action prompt".into(),
        };
        assert_eq!(d.to_string(), "segment=3 msg=empty action prompt");
    }
}
