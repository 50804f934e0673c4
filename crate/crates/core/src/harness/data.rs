//! Dataset layout, annotation parsing and few-shot subsampling.
//!
//! A dataset root holds `images/<stem>.png` and `annotations/gt_<stem>.txt`.
//! Each annotation line is `x1,y1,...,xk,yk,transcription`; the
//! transcription `###` marks a region to ignore.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::TextInstance;
use crate::encoders::Image;
use crate::error::{Error, Result};

pub const IGNORE_TAG: &str = "###";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub images_dir: PathBuf,
    pub annotations_dir: PathBuf,
    /// Annotation format tag; only `"icdar"` is understood.
    pub format: String,
    pub split: Split,
}

impl DatasetSpec {
    /// Spec for the standard layout under `root`.
    pub fn at(root: &Path, split: Split) -> Self {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        Self {
            name,
            images_dir: root.join("images"),
            annotations_dir: root.join("annotations"),
            format: "icdar".into(),
            split,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub instances: Vec<TextInstance>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parses one annotation file's text.
pub fn parse_annotations(text: &str, file: &Path) -> Result<Vec<TextInstance>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_start_matches('\u{feff}').trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            file: file.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        let (transcription, coords) = fields.split_last().expect("split yields one field");
        let coords = coords
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| err(format!("bad coordinate {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if coords.len() % 2 != 0 {
            return Err(err(format!("odd coordinate count {}", coords.len())));
        }
        if coords.len() < 6 {
            return Err(err(format!("polygon needs at least 3 points, got {}", coords.len() / 2)));
        }
        let ignore = transcription.trim() == IGNORE_TAG;
        let inst = TextInstance {
            polygon: coords.chunks(2).map(|c| [c[0], c[1]]).collect(),
            ignore,
            score: None,
            transcription: Some(transcription.trim().to_string()),
        };
        if !ignore && !inst.is_valid() {
            return Err(err("polygon is degenerate or self-intersecting".into()));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn format_annotations(instances: &[TextInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        for p in &inst.polygon {
            s.push_str(&format!("{},{},", p[0], p[1]));
        }
        let tag = if inst.ignore {
            IGNORE_TAG
        } else {
            inst.transcription.as_deref().unwrap_or("text")
        };
        s.push_str(tag);
        s.push('\n');
    }
    s
}

/// One polygon per line: rounded integer coordinates, then the score.
pub fn format_predictions(instances: &[TextInstance]) -> String {
    let mut s = String::new();
    for inst in instances {
        for p in &inst.polygon {
            s.push_str(&format!("{},{},", p[0].round() as i64, p[1].round() as i64));
        }
        s.push_str(&format!("{:.6}\n", inst.score.unwrap_or(1.0)));
    }
    s
}

/// Reads a prediction file written by [`format_predictions`].
pub fn parse_predictions(text: &str, file: &Path) -> Result<Vec<TextInstance>> {
    let mut out = parse_annotations(text, file)?;
    for (inst, line) in out.iter_mut().zip(text.lines().filter(|l| !l.trim().is_empty())) {
        let score = line.rsplit(',').next().unwrap_or("").trim();
        inst.score = Some(score.parse().map_err(|_| Error::Parse {
            file: file.to_path_buf(),
            line: 0,
            message: format!("bad score {score:?}"),
        })?);
        inst.transcription = None;
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Loads every `*.png` in `images_dir` (sorted by file name) with its annotation file.
pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.format != "icdar" {
        return Err(Error::InvalidConfig(format!("unknown dataset format {:?}", spec.format)));
    }
    if !spec.images_dir.is_dir() {
        return Err(Error::NotFound(spec.images_dir.clone()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&spec.images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for p in paths {
        let stem = p.file_stem().expect("png has a stem").to_string_lossy().into_owned();
        let ann = spec.annotations_dir.join(format!("gt_{stem}.txt"));
        if !ann.exists() {
            return Err(Error::NotFound(ann));
        }
        let instances = parse_annotations(&fs::read_to_string(&ann)?, &ann)?;
        samples.push(Sample {
            name: stem,
            image: load_image(&p)?,
            instances,
        });
    }
    Ok(Dataset {
        name: spec.name.clone(),
        samples,
    })
}

/// Number of images a ratio selects out of `n`.
pub fn fewshot_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("few-shot ratio {ratio} outside (0, 1]")));
    }
    // absorb representation error such as 0.57 * 100 = 56.99999999999999
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::InvalidConfig(format!("ratio {ratio} of {n} images selects nothing")));
    }
    Ok(k.min(n))
}

/// Uniform sample of `floor(ratio · N)` images without replacement, kept in
/// their original order. Ratio 1 returns the dataset unchanged.
pub fn subsample_fewshot(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    let k = fewshot_count(n, ratio)?;
    if k == n {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(Dataset {
        name: format!("{}@{ratio}", dataset.name),
        samples: picked.into_iter().map(|i| dataset.samples[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_lines() {
        let f = Path::new("gt.txt");
        let v = parse_annotations("10,10,100,10,100,40,10,40,hello\n", f).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].polygon.len(), 4);
        assert!(!v[0].ignore);
        let v = parse_annotations("\u{feff}10,10,100,10,100,40,10,40,###\n", f).unwrap();
        assert!(v[0].ignore);
        match parse_annotations("1,1,5,1,5,5,1,5,ok\n10,10,100,10,100,40,10,x\n", f) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("odd"), "{message}");
            }
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn prediction_round_trip() {
        let mut a = TextInstance::rect(1.0, 2.0, 30.0, 12.0);
        a.score = Some(0.75);
        let text = format_predictions(&[a.clone()]);
        assert_eq!(text, "1,2,30,2,30,12,1,12,0.750000\n");
        let back = parse_predictions(&text, Path::new("p")).unwrap();
        assert_eq!(back[0].polygon, a.polygon);
        assert_eq!(back[0].score, Some(0.75));
    }

    fn dummy(n: usize) -> Dataset {
        Dataset {
            name: "d".into(),
            samples: (0..n)
                .map(|i| Sample {
                    name: format!("{i:04}"),
                    image: Image::new(1, 1, vec![0.0; 3]).unwrap(),
                    instances: Vec::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn fewshot_counts_and_determinism() {
        let d = dummy(1000);
        assert_eq!(subsample_fewshot(&d, 0.1, 1).unwrap().len(), 100);
        let full = subsample_fewshot(&d, 1.0, 1).unwrap();
        assert!(full.samples.iter().zip(&d.samples).all(|(a, b)| a.name == b.name));
        let names = |x: &Dataset| x.samples.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
        let a = subsample_fewshot(&d, 0.3, 5).unwrap();
        assert_eq!(names(&a), names(&subsample_fewshot(&d, 0.3, 5).unwrap()));
        assert_ne!(names(&a), names(&subsample_fewshot(&d, 0.3, 6).unwrap()));
        assert!(subsample_fewshot(&dummy(5), 0.1, 0).is_err());
        assert!(subsample_fewshot(&d, 0.0, 0).is_err());
        assert_eq!(fewshot_count(100, 0.57).unwrap(), 57);
    }
}
