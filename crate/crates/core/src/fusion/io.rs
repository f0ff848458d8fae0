//! Text format for a single condition bundle.
//!
//! ```text
//! # comment lines and blank lines are ignored
//! [speaker]
//! s_0,s_1,...,s_{d-1}          one row, d_model values
//! [content]
//! c_00,c_01,...                L rows, d_model values each
//! [pitch]
//! raw[,index]                  L rows: normalized log-F0, optional code index
//! ```
//!
//! The code index column must be present on every pitch row or on none.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::ConditionBundle;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Speaker,
    Content,
    Pitch,
}

fn parse_row(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|field| {
            field.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: {:?}", field.trim()),
            })
        })
        .collect()
}

pub fn parse_bundle(text: &str) -> Result<ConditionBundle> {
    let mut section = None;
    let mut speaker: Option<Vec<f64>> = None;
    let mut content: Vec<Vec<f64>> = Vec::new();
    let mut pitch: Vec<Vec<f64>> = Vec::new();
    let mut seen = [false; 3];

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            let s = match line {
                "[speaker]" => Section::Speaker,
                "[content]" => Section::Content,
                "[pitch]" => Section::Pitch,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown section {other}"),
                    })
                }
            };
            let slot = &mut seen[s as usize];
            if *slot {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate section {line}"),
                });
            }
            *slot = true;
            section = Some(s);
            continue;
        }
        let row = parse_row(line, line_no)?;
        match section {
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "data before the first section header".into(),
                })
            }
            Some(Section::Speaker) => {
                if speaker.replace(row).is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "speaker section must hold exactly one row".into(),
                    });
                }
            }
            Some(Section::Content) => content.push(row),
            Some(Section::Pitch) => {
                if row.is_empty() || row.len() > 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "pitch rows are `raw` or `raw,index`".into(),
                    });
                }
                pitch.push(row);
            }
        }
    }

    let speaker = speaker.ok_or_else(|| Error::Config("bundle is missing [speaker]".into()))?;
    if content.is_empty() {
        return Err(Error::Config("bundle is missing [content] rows".into()));
    }
    if pitch.is_empty() {
        return Err(Error::Config("bundle is missing [pitch] rows".into()));
    }
    let d = speaker.len();
    if let Some(bad) = content.iter().position(|r| r.len() != d) {
        return Err(Error::Config(format!(
            "content row {bad} has {} values, speaker has {d}",
            content[bad].len()
        )));
    }
    let with_index = pitch[0].len() == 2;
    if pitch.iter().any(|r| (r.len() == 2) != with_index) {
        return Err(Error::Config(
            "pitch index column must appear on all rows or none".into(),
        ));
    }

    let len = content.len();
    let content = Array2::from_shape_vec((len, d), content.into_iter().flatten().collect())
        .expect("rows checked");
    let pitch_raw: Array1<f64> = pitch.iter().map(|r| r[0]).collect();
    let pitch_quantized = if with_index {
        let mut idx = Vec::with_capacity(pitch.len());
        for r in &pitch {
            let v = r[1];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("pitch index {v} is not a non-negative integer")));
            }
            idx.push(v as usize);
        }
        Some(idx)
    } else {
        None
    };
    let bundle = ConditionBundle {
        speaker: Array1::from(speaker),
        content,
        pitch_raw,
        pitch_quantized,
        fused: None,
    };
    bundle.validate(d)?;
    Ok(bundle)
}

pub fn format_bundle(bundle: &ConditionBundle) -> String {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        it.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    };
    let mut out = String::from("# condition bundle\n[speaker]\n");
    out.push_str(&join(&mut bundle.speaker.iter().copied()));
    out.push_str("\n[content]\n");
    for row in bundle.content.rows() {
        out.push_str(&join(&mut row.iter().copied()));
        out.push('\n');
    }
    out.push_str("[pitch]\n");
    for (i, p) in bundle.pitch_raw.iter().enumerate() {
        match &bundle.pitch_quantized {
            Some(idx) => writeln!(out, "{p},{}", idx[i]).unwrap(),
            None => writeln!(out, "{p}").unwrap(),
        }
    }
    out
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ConditionBundle> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bundle(&text)
}

pub fn write_bundle(bundle: &ConditionBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_bundle(bundle)).map_err(|e| Error::io(path, e))
}
