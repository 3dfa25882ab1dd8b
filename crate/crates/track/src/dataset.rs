use std::fs;
use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::error::{io_err, Result, TrackError};
use crate::eval::SequenceRecord;
use crate::patch::Frame;
use crate::train::TrainSequence;

/// One benchmark sequence on disk: a directory holding an `img/` folder of
/// PNG frames in name order, a `groundtruth_rect.txt` with one `x,y,w,h`
/// line per frame, and an optional `att.txt` with comma-separated attribute
/// tags.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frame_paths: Vec<PathBuf>,
    pub boxes: Vec<BBox>,
    pub attributes: Vec<String>,
}

/// Parses one `x,y,w,h` line; fields may be separated by commas or tabs.
fn parse_box_line(line: &str) -> std::result::Result<BBox, String> {
    let fields: Vec<&str> = line
        .split([',', '\t'])
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, got {}", fields.len()));
    }
    let mut vals = [0.0f32; 4];
    for (v, f) in vals.iter_mut().zip(&fields) {
        *v = f
            .parse()
            .map_err(|_| format!("cannot parse '{f}' as a number"))?;
    }
    Ok(BBox::new(vals[0], vals[1], vals[2], vals[3]))
}

/// Reads a box list file: one box per line, blank lines ignored.
pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bbox = parse_box_line(line).map_err(|message| TrackError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(bbox);
    }
    Ok(out)
}

/// Writes a box list file in the same `x,y,w,h` format the readers accept,
/// one frame per line in shortest round-trip form.
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::with_capacity(boxes.len() * 24);
    for b in boxes {
        text.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

impl Sequence {
    pub fn load(dir: &Path) -> Result<Sequence> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let img_dir = dir.join("img");
        let entries = fs::read_dir(&img_dir).map_err(|e| io_err(&img_dir, e))?;
        let mut frame_paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&img_dir, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "png") {
                frame_paths.push(path);
            }
        }
        frame_paths.sort();
        let boxes = read_boxes(&dir.join("groundtruth_rect.txt"))?;
        if frame_paths.len() != boxes.len() {
            return Err(TrackError::Data(format!(
                "sequence {name}: frames={} gt={}",
                frame_paths.len(),
                boxes.len()
            )));
        }
        if frame_paths.is_empty() {
            return Err(TrackError::Data(format!("sequence {name} has no frames")));
        }
        let att_path = dir.join("att.txt");
        let attributes = match fs::read_to_string(&att_path) {
            Ok(text) => text
                .split([',', '\n'])
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&att_path, e)),
        };
        Ok(Sequence {
            name,
            frame_paths,
            boxes,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let path = &self.frame_paths[index];
        let frame_err = |source: std::io::Error| TrackError::Frame {
            index,
            path: path.clone(),
            source,
        };
        let image = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => frame_err(io),
            other => frame_err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                other.to_string(),
            )),
        })?;
        let rgb = image.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Frame::from_rgb8(w, h, rgb.as_raw())
    }

    /// Frames in order, decoded lazily.
    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.len()).map(|i| self.load_frame(i))
    }

    /// Decodes every frame up front for training.
    pub fn to_train(&self) -> Result<TrainSequence> {
        let frames = self.frames().collect::<Result<Vec<Frame>>>()?;
        Ok(TrainSequence {
            frames,
            boxes: self.boxes.clone(),
        })
    }

    /// Pairs the sequence with its results file, if present, for
    /// evaluation. `<results_dir>/<name>.txt` holds the tracker's boxes.
    pub fn to_record(&self, results_dir: &Path) -> Result<SequenceRecord> {
        let path = results_dir.join(format!("{}.txt", self.name));
        let pred = if path.exists() {
            Some(read_boxes(&path)?)
        } else {
            None
        };
        Ok(SequenceRecord {
            name: self.name.clone(),
            gt: self.boxes.clone(),
            attributes: self.attributes.clone(),
            pred,
        })
    }
}

/// Loads every sequence directory under the benchmark root, sorted by name.
pub fn load_benchmark(root: &Path) -> Result<Vec<Sequence>> {
    let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(TrackError::Data(format!(
            "no sequence directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| Sequence::load(d)).collect()
}
