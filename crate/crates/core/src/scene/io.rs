//! Dataset export: one JSON record per line, UTF-8, coordinates with six
//! decimal places. Records are written by hand so identical scenes always
//! produce identical bytes; reading goes through serde_json and accepts any
//! spacing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use super::{BBox, QaPair, Scene, VisualObject};

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

fn esc(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

fn fmt_box(b: &BBox) -> String {
    format!("[{:.6},{:.6},{:.6},{:.6}]", b.x1, b.y1, b.x2, b.y2)
}

fn fmt_object(o: &VisualObject) -> String {
    format!(
        "{{\"tag\":{},\"box\":{},\"confidence\":{:.6}}}",
        esc(&o.tag),
        fmt_box(&o.bbox),
        o.confidence
    )
}

pub fn scene_to_line(scene: &Scene) -> String {
    let mut s = String::new();
    write!(s, "{{\"id\":{},\"caption\":{},\"objects\":[", esc(&scene.id), esc(&scene.caption)).unwrap();
    s.push_str(&scene.objects.iter().map(fmt_object).collect::<Vec<_>>().join(","));
    s.push_str("],\"distractors\":[");
    s.push_str(&scene.distractors.iter().map(fmt_object).collect::<Vec<_>>().join(","));
    s.push_str("],\"qa\":[");
    let qas: Vec<String> = scene
        .qa
        .iter()
        .map(|qa| {
            let mut q = format!("{{\"q\":{},\"a\":{}", esc(&qa.question), esc(&qa.answer));
            if let Some(b) = &qa.answer_box {
                write!(q, ",\"box\":{}", fmt_box(b)).unwrap();
            }
            q.push('}');
            q
        })
        .collect();
    s.push_str(&qas.join(","));
    s.push_str("]}");
    s
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneIoError> {
    let mut out = String::new();
    for scene in scenes {
        out.push_str(&scene_to_line(scene));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| SceneIoError::Io { path: path.display().to_string(), source })
}

fn parse_box(v: &Value, line: usize) -> Result<BBox, SceneIoError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "box must be a 4-element array".into() })?;
    let mut c = [0.0; 4];
    for (i, x) in arr.iter().enumerate() {
        c[i] = x
            .as_f64()
            .ok_or_else(|| SceneIoError::Malformed { line, msg: "box coordinate is not a number".into() })?;
    }
    Ok(BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] })
}

fn parse_object(v: &Value, line: usize) -> Result<VisualObject, SceneIoError> {
    let tag = v["tag"]
        .as_str()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "object missing tag".into() })?
        .to_string();
    let bbox = parse_box(&v["box"], line)?;
    let confidence = v["confidence"]
        .as_f64()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "object missing confidence".into() })?;
    Ok(VisualObject { tag, bbox, confidence })
}

pub fn scene_from_line(text: &str, line: usize) -> Result<Scene, SceneIoError> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| SceneIoError::Malformed { line, msg: format!("invalid json: {e}") })?;
    let id = v["id"]
        .as_str()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "missing id".into() })?
        .to_string();
    let caption = v["caption"]
        .as_str()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "missing caption".into() })?
        .to_string();
    let objects = v["objects"]
        .as_array()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "missing objects array".into() })?
        .iter()
        .map(|o| parse_object(o, line))
        .collect::<Result<Vec<_>, _>>()?;
    let distractors = match v.get("distractors") {
        Some(Value::Array(a)) => a.iter().map(|o| parse_object(o, line)).collect::<Result<Vec<_>, _>>()?,
        _ => Vec::new(),
    };
    let qa = v["qa"]
        .as_array()
        .ok_or_else(|| SceneIoError::Malformed { line, msg: "missing qa array".into() })?
        .iter()
        .map(|q| {
            let question = q["q"]
                .as_str()
                .ok_or_else(|| SceneIoError::Malformed { line, msg: "qa missing q".into() })?
                .to_string();
            let answer = q["a"]
                .as_str()
                .ok_or_else(|| SceneIoError::Malformed { line, msg: "qa missing a".into() })?
                .to_string();
            let answer_box = match q.get("box") {
                Some(b) => Some(parse_box(b, line)?),
                None => None,
            };
            Ok(QaPair { question, answer, answer_box })
        })
        .collect::<Result<Vec<_>, SceneIoError>>()?;
    Ok(Scene { id, objects, distractors, caption, qa })
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, SceneIoError> {
    let text = fs::read_to_string(path)
        .map_err(|source| SceneIoError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| scene_from_line(l, i + 1))
        .collect()
}
