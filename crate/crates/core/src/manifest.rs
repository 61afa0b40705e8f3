//! Exam records and the manifest CSV that indexes a dataset directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_HEADER: &str = "exam_id,patient_id,split,age_band,density,left_benign,left_malignant,right_benign,right_malignant,left_biopsied,right_biopsied,left_occult,right_occult,birads,rcc_path,lcc_path,rmlo_path,lmlo_path";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn letter(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Side::Left),
            "R" => Ok(Side::Right),
            _ => Err(Error::InvalidArgument(format!("unknown side {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViewKind {
    Cc,
    Mlo,
}

/// The four standard screening views. Model inputs are always ordered
/// `ALL` = (L-CC, R-CC, L-MLO, R-MLO).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    LCc,
    RCc,
    LMlo,
    RMlo,
}

impl View {
    pub const ALL: [View; 4] = [View::LCc, View::RCc, View::LMlo, View::RMlo];

    pub fn side(self) -> Side {
        match self {
            View::LCc | View::LMlo => Side::Left,
            View::RCc | View::RMlo => Side::Right,
        }
    }

    pub fn kind(self) -> ViewKind {
        match self {
            View::LCc | View::RCc => ViewKind::Cc,
            View::LMlo | View::RMlo => ViewKind::Mlo,
        }
    }

    pub fn of(side: Side, kind: ViewKind) -> View {
        match (side, kind) {
            (Side::Left, ViewKind::Cc) => View::LCc,
            (Side::Right, ViewKind::Cc) => View::RCc,
            (Side::Left, ViewKind::Mlo) => View::LMlo,
            (Side::Right, ViewKind::Mlo) => View::RMlo,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lower-case token used in file names.
    pub fn token(self) -> &'static str {
        match self {
            View::LCc => "lcc",
            View::RCc => "rcc",
            View::LMlo => "lmlo",
            View::RMlo => "rmlo",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            View::LCc => "L-CC",
            View::RCc => "R-CC",
            View::LMlo => "L-MLO",
            View::RMlo => "R-MLO",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Finding {
    Benign,
    Malignant,
}

impl Finding {
    pub fn token(self) -> &'static str {
        match self {
            Finding::Benign => "benign",
            Finding::Malignant => "malignant",
        }
    }
}

macro_rules! token_enum {
    ($name:ident { $($var:ident => $tok:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$var => $tok),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tok => Ok($name::$var),)+
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_enum!(Split { Train => "train", Val => "val", Test => "test" });
token_enum!(AgeBand { Under40 => "<40", Forties => "40s", Fifties => "50s", Sixties => "60s", Over70 => "70+" });
token_enum!(Density { Fatty => "fatty", Scattered => "scattered", Heterogeneous => "heterogeneous", Extreme => "extreme" });

/// Per-breast ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BreastLabels {
    pub benign: bool,
    pub malignant: bool,
    pub biopsied: bool,
    pub occult: bool,
}

impl BreastLabels {
    pub fn has(&self, f: Finding) -> bool {
        match f {
            Finding::Benign => self.benign,
            Finding::Malignant => self.malignant,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient_id: String,
    pub split: Split,
    pub age_band: AgeBand,
    pub density: Density,
    /// Indexed by `Side::index`.
    pub breasts: [BreastLabels; 2],
    pub birads: u8,
    /// Image paths relative to the dataset root, indexed by `View::index`.
    pub paths: [String; 4],
}

impl ExamRecord {
    pub fn breast(&self, side: Side) -> &BreastLabels {
        &self.breasts[side.index()]
    }

    pub fn is_biopsied(&self) -> bool {
        self.breasts.iter().any(|b| b.biopsied)
    }

    /// Labels as (L-benign, L-malignant, R-benign, R-malignant).
    pub fn label_vector(&self) -> [f32; 4] {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        let (l, r) = (&self.breasts[0], &self.breasts[1]);
        [f(l.benign), f(l.malignant), f(r.benign), f(r.malignant)]
    }

    pub fn image_path(&self, root: &Path, view: View) -> PathBuf {
        root.join(&self.paths[view.index()])
    }

    pub fn load_view(&self, root: &Path, view: View) -> Result<Image> {
        Image::read_pgm(&self.image_path(root, view))
    }

    fn to_csv_row(&self) -> String {
        let b = |v: bool| if v { "1" } else { "0" };
        let (l, r) = (&self.breasts[0], &self.breasts[1]);
        let p = &self.paths;
        [
            self.exam_id.as_str(),
            &self.patient_id,
            self.split.token(),
            self.age_band.token(),
            self.density.token(),
            b(l.benign),
            b(l.malignant),
            b(r.benign),
            b(r.malignant),
            b(l.biopsied),
            b(r.biopsied),
            b(l.occult),
            b(r.occult),
            &self.birads.to_string(),
            &p[View::RCc.index()],
            &p[View::LCc.index()],
            &p[View::RMlo.index()],
            &p[View::LMlo.index()],
        ]
        .join(",")
    }

    fn from_csv_row(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::format(path, format!("line {lineno}: {what}"));
        if f.len() != 18 {
            return Err(bad(&format!("expected 18 fields, found {}", f.len())));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(&format!("bad flag {s:?}"))),
        };
        let birads: u8 = f[13].parse().map_err(|_| bad("bad birads"))?;
        if birads > 2 {
            return Err(bad("birads outside 0..=2"));
        }
        let mut paths: [String; 4] = Default::default();
        paths[View::RCc.index()] = f[14].to_string();
        paths[View::LCc.index()] = f[15].to_string();
        paths[View::RMlo.index()] = f[16].to_string();
        paths[View::LMlo.index()] = f[17].to_string();
        Ok(ExamRecord {
            exam_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            split: f[2].parse().map_err(|e: Error| bad(&e.to_string()))?,
            age_band: f[3].parse().map_err(|e: Error| bad(&e.to_string()))?,
            density: f[4].parse().map_err(|e: Error| bad(&e.to_string()))?,
            breasts: [
                BreastLabels {
                    benign: flag(f[5])?,
                    malignant: flag(f[6])?,
                    biopsied: flag(f[9])?,
                    occult: flag(f[11])?,
                },
                BreastLabels {
                    benign: flag(f[7])?,
                    malignant: flag(f[8])?,
                    biopsied: flag(f[10])?,
                    occult: flag(f[12])?,
                },
            ],
            birads,
            paths,
        })
    }
}

/// Relative path of a lesion mask; the file exists only for labeled,
/// non-occult breasts.
pub fn mask_rel_path(exam_id: &str, view: View, finding: Finding) -> String {
    format!("masks/{exam_id}_{}_{}.pgm", view.token(), finding.token())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub exams: Vec<ExamRecord>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.exams {
            s.push_str(&e.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(Error::format(path, "missing or wrong manifest header")),
        }
        let exams = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| ExamRecord::from_csv_row(l.trim_end(), path, i + 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { exams })
    }

    pub fn split(&self, split: Split) -> Vec<&ExamRecord> {
        self.exams.iter().filter(|e| e.split == split).collect()
    }

    pub fn get(&self, exam_id: &str) -> Option<&ExamRecord> {
        self.exams.iter().find(|e| e.exam_id == exam_id)
    }
}

/// Load one mask plane; a missing file means an empty mask.
pub fn load_mask(root: &Path, exam_id: &str, view: View, finding: Finding) -> Result<Option<Image>> {
    let p = root.join(mask_rel_path(exam_id, view, finding));
    if !p.exists() {
        return Ok(None);
    }
    Image::read_pgm(&p).map(Some)
}
