//! Query annotation documents.
//!
//! ```json
//! {"version": "1.0",
//!  "videos": [{"video_id": "v0", "duration_sec": 256.0,
//!              "queries": [{"query_id": "q0", "text": "...", "start_sec": 3.5, "end_sec": 9.0}]}]}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::span::TimeSpan;

pub const ANNOTATION_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub video_id: String,
    pub query_id: String,
    pub text: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub duration_sec: f64,
}

impl QueryAnnotation {
    pub fn span(&self) -> Result<TimeSpan> {
        TimeSpan::seconds(self.start_sec, self.end_sec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Validation {
            query_id: self.query_id.clone(),
            message,
        };
        if !(self.duration_sec.is_finite() && self.duration_sec > 0.0) {
            return Err(bad(format!("video duration {} must be positive", self.duration_sec)));
        }
        if !(self.start_sec.is_finite() && self.end_sec.is_finite()) {
            return Err(bad("non-finite timestamps".into()));
        }
        if self.start_sec < 0.0 {
            return Err(bad(format!("start_sec {} is negative", self.start_sec)));
        }
        if self.start_sec > self.end_sec {
            return Err(bad(format!("start_sec {} exceeds end_sec {}", self.start_sec, self.end_sec)));
        }
        if self.end_sec > self.duration_sec {
            return Err(bad(format!(
                "end_sec {} exceeds video duration {}",
                self.end_sec, self.duration_sec
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    value: &'a Value,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn field(&self, name: &str) -> Result<Cursor<'a>> {
        let obj = self.value.as_object().ok_or_else(|| self.err("expected an object"))?;
        let value = obj.get(name).ok_or_else(|| self.err(format!("missing field `{name}`")))?;
        Ok(Cursor {
            value,
            path: format!("{}.{name}", self.path),
        })
    }

    fn items(&self) -> Result<Vec<Cursor<'a>>> {
        let arr = self.value.as_array().ok_or_else(|| self.err("expected an array"))?;
        Ok(arr
            .iter()
            .enumerate()
            .map(|(i, value)| Cursor {
                value,
                path: format!("{}[{i}]", self.path),
            })
            .collect())
    }

    fn string(&self) -> Result<String> {
        self.value
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err("expected a string"))
    }

    fn number(&self) -> Result<f64> {
        self.value.as_f64().ok_or_else(|| self.err("expected a number"))
    }
}

/// Parses and validates an annotation document, flattening it to one entry per query.
pub fn parse_annotations(text: &str) -> Result<Vec<QueryAnnotation>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: "$".into(),
        message: e.to_string(),
    })?;
    let root = Cursor {
        value: &root,
        path: "$".into(),
    };
    let version = root.field("version")?;
    if version.string()? != ANNOTATION_VERSION {
        return Err(version.err(format!("unsupported version, expected \"{ANNOTATION_VERSION}\"")));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for video in root.field("videos")?.items()? {
        let video_id = video.field("video_id")?.string()?;
        let duration_sec = video.field("duration_sec")?.number()?;
        for query in video.field("queries")?.items()? {
            let ann = QueryAnnotation {
                video_id: video_id.clone(),
                query_id: query.field("query_id")?.string()?,
                text: match query.value.get("text") {
                    None | Some(Value::Null) => String::new(),
                    Some(_) => query.field("text")?.string()?,
                },
                start_sec: query.field("start_sec")?.number()?,
                end_sec: query.field("end_sec")?.number()?,
                duration_sec,
            };
            ann.validate()?;
            if !seen.insert(ann.query_id.clone()) {
                return Err(Error::Validation {
                    query_id: ann.query_id,
                    message: "duplicate query_id".into(),
                });
            }
            out.push(ann);
        }
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<QueryAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

#[derive(Serialize)]
struct QueryOut<'a> {
    query_id: &'a str,
    text: &'a str,
    start_sec: f64,
    end_sec: f64,
}

#[derive(Serialize)]
struct VideoOut<'a> {
    video_id: &'a str,
    duration_sec: f64,
    queries: Vec<QueryOut<'a>>,
}

#[derive(Serialize)]
struct DocOut<'a> {
    version: &'a str,
    videos: Vec<VideoOut<'a>>,
}

/// Serializes annotations, grouping queries by video in order of first appearance.
pub fn format_annotations(annotations: &[QueryAnnotation]) -> Result<String> {
    let mut videos: Vec<VideoOut> = Vec::new();
    for a in annotations {
        a.validate()?;
        let q = QueryOut {
            query_id: &a.query_id,
            text: &a.text,
            start_sec: a.start_sec,
            end_sec: a.end_sec,
        };
        match videos.iter_mut().find(|v| v.video_id == a.video_id) {
            Some(v) => {
                if v.duration_sec != a.duration_sec {
                    return Err(Error::Validation {
                        query_id: a.query_id.clone(),
                        message: format!("conflicting durations for video `{}`", a.video_id),
                    });
                }
                v.queries.push(q)
            }
            None => videos.push(VideoOut {
                video_id: &a.video_id,
                duration_sec: a.duration_sec,
                queries: vec![q],
            }),
        }
    }
    Ok(serde_json::to_string_pretty(&DocOut {
        version: ANNOTATION_VERSION,
        videos,
    })?)
}

pub fn write_annotations(path: &Path, annotations: &[QueryAnnotation]) -> Result<()> {
    let text = format_annotations(annotations)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
