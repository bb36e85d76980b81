//! Dataset container. A dataset directory holds an `index` file with one
//! record directory name per line. Each record directory contains `meta`
//! (key=value lines), `frames.stsr`, and optionally `fixations.txt`
//! (`frame x y` lines) and `importance.stsr`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::VideoRecord;
use crate::error::{Error, Result};
use crate::metrics::FixationSet;
use crate::tensor::Tensor;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.starts_with('.') || id.chars().any(|c| c == '/' || c == '\\' || c.is_whitespace()) {
        return Err(Error::Data(format!("record id '{id}' is not a valid directory name")));
    }
    Ok(())
}

pub fn write_record(dir: &Path, record: &VideoRecord) -> Result<()> {
    record.validate()?;
    check_id(&record.id)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let class = record.class.map_or("none".to_string(), |c| c.to_string());
    let meta = format!(
        "id={}\nframes={}\nheight={}\nwidth={}\nclass={class}\nfixations={}\nimportance={}\n",
        record.id,
        record.len(),
        record.height(),
        record.width(),
        yes_no(record.fixations.is_some()),
        yes_no(record.importance.is_some()),
    );
    write_text(&dir.join("meta"), &meta)?;
    record.frames.save(&dir.join("frames.stsr"))?;
    if let Some(fix) = &record.fixations {
        let mut text = String::new();
        for (t, pts) in fix.frames.iter().enumerate() {
            for (x, y) in pts {
                writeln!(text, "{t} {x} {y}").expect("writing to a String");
            }
        }
        write_text(&dir.join("fixations.txt"), &text)?;
    }
    if let Some(imp) = &record.importance {
        Tensor::new(vec![imp.len()], imp.clone())?.save(&dir.join("importance.stsr"))?;
    }
    Ok(())
}

struct Meta {
    id: String,
    frames: usize,
    height: usize,
    width: usize,
    class: Option<usize>,
    fixations: bool,
    importance: bool,
}

fn parse_meta(path: &Path) -> Result<Meta> {
    let text = read_text(path)?;
    let mut fields = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, Some(i + 1), "expected key=value"))?;
        if fields.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(Error::parse(path, Some(i + 1), format!("duplicate key '{k}'")));
        }
    }
    let mut take = |key: &str| -> Result<(usize, String)> {
        fields
            .remove(key)
            .ok_or_else(|| Error::parse(path, None, format!("missing key '{key}'")))
    };
    let num = |(line, v): (usize, String)| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::parse(path, Some(line), format!("expected an integer, got '{v}'")))
    };
    let flag = |(line, v): (usize, String)| -> Result<bool> {
        match v.as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            _ => Err(Error::parse(path, Some(line), format!("expected yes or no, got '{v}'"))),
        }
    };
    let id = take("id")?.1;
    let frames = num(take("frames")?)?;
    let height = num(take("height")?)?;
    let width = num(take("width")?)?;
    let (cline, cval) = take("class")?;
    let class = if cval == "none" { None } else { Some(num((cline, cval))?) };
    let fixations = flag(take("fixations")?)?;
    let importance = flag(take("importance")?)?;
    if let Some((k, (line, _))) = fields.into_iter().next() {
        return Err(Error::parse(path, Some(line), format!("unknown key '{k}'")));
    }
    Ok(Meta {
        id,
        frames,
        height,
        width,
        class,
        fixations,
        importance,
    })
}

fn parse_fixations(path: &Path, meta: &Meta) -> Result<FixationSet> {
    let text = read_text(path)?;
    let mut frames = vec![Vec::new(); meta.frames];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(path, Some(i + 1), msg);
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad("expected 'frame x y'".into()));
        }
        let vals: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad(format!("expected an integer, got '{p}'"))))
            .collect::<Result<_>>()?;
        let (t, x, y) = (vals[0], vals[1], vals[2]);
        if t >= meta.frames || x >= meta.width || y >= meta.height {
            return Err(bad(format!(
                "fixation (frame {t}, x {x}, y {y}) outside {} frames of {}x{}",
                meta.frames, meta.width, meta.height
            )));
        }
        frames[t].push((x, y));
    }
    FixationSet::new(meta.width, meta.height, frames)
}

pub fn read_record(dir: &Path) -> Result<VideoRecord> {
    let meta = parse_meta(&dir.join("meta"))?;
    let frames_path = dir.join("frames.stsr");
    let frames = Tensor::load(&frames_path)?;
    let expected = [3, meta.frames, meta.height, meta.width];
    if frames.shape() != expected {
        return Err(Error::parse(
            &frames_path,
            None,
            format!("shape {:?} does not match meta {:?}", frames.shape(), expected),
        ));
    }
    let fixations = if meta.fixations {
        Some(parse_fixations(&dir.join("fixations.txt"), &meta)?)
    } else {
        None
    };
    let importance = if meta.importance {
        let path = dir.join("importance.stsr");
        let t = Tensor::load(&path)?;
        if t.shape() != [meta.frames] {
            return Err(Error::parse(&path, None, format!("expected {} values, got shape {:?}", meta.frames, t.shape())));
        }
        Some(t.into_data())
    } else {
        None
    };
    let record = VideoRecord {
        id: meta.id,
        frames,
        fixations,
        class: meta.class,
        importance,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_dataset(dir: &Path, records: &[VideoRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for r in records {
        write_record(&dir.join(&r.id), r)?;
        index.push_str(&r.id);
        index.push('\n');
    }
    write_text(&dir.join("index"), &index)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoRecord>> {
    let index = read_text(&dir.join("index"))?;
    index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|id| {
            check_id(id)?;
            read_record(&dir.join(id))
        })
        .collect()
}
