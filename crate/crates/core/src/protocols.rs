//! Dataset manifests and the four cross-condition evaluation protocols.
//!
//! Subjects are numbered per ethnicity. With `N` subjects per ethnicity the
//! train, valid and test ranges are `1..=2N/5`, `2N/5+1..=3N/5` and
//! `3N/5+1..=N` (1–200, 201–300, 301–500 for `N = 500`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Label;
use crate::Modality;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("line {line}: duplicate video path `{path}`")]
    DuplicatePath { line: u64, path: String },
    #[error("unknown sub-protocol `{0}`")]
    UnknownProtocol(String),
    #[error("sub-protocol {id}: {subset} subset is empty")]
    EmptySubset { id: SubProtocol, subset: Subset },
    #[error("manifest has no 2D entries")]
    NoSubjects,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ethnicity {
    /// Africa.
    A,
    /// Central Asia.
    C,
    /// East Asia.
    E,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 3] = [Ethnicity::A, Ethnicity::C, Ethnicity::E];

    pub fn tag(self) -> char {
        match self {
            Ethnicity::A => 'A',
            Ethnicity::C => 'C',
            Ethnicity::E => 'E',
        }
    }
}

impl FromStr for Ethnicity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Ethnicity::A),
            "C" | "c" => Ok(Ethnicity::C),
            "E" | "e" => Ok(Ethnicity::E),
            other => Err(format!("unknown ethnicity `{other}`")),
        }
    }
}

impl fmt::Display for Ethnicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackType {
    Real,
    PrintIndoor,
    PrintOutdoor,
    Replay,
    Mask3d,
    Silicagel,
}

impl AttackType {
    pub const ALL: [AttackType; 6] = [
        Self::Real,
        Self::PrintIndoor,
        Self::PrintOutdoor,
        Self::Replay,
        Self::Mask3d,
        Self::Silicagel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Real => "real",
            Self::PrintIndoor => "print_indoor",
            Self::PrintOutdoor => "print_outdoor",
            Self::Replay => "replay",
            Self::Mask3d => "mask3d",
            Self::Silicagel => "silicagel",
        }
    }

    pub fn label(self) -> Label {
        if self == Self::Real {
            Label::BonaFide
        } else {
            Label::Attack
        }
    }

    /// Attack instrument of a 2D attack.
    pub fn pai(self) -> Option<Pai> {
        match self {
            Self::PrintIndoor | Self::PrintOutdoor => Some(Pai::Print),
            Self::Replay => Some(Pai::Replay),
            _ => None,
        }
    }

    pub fn is_3d(self) -> bool {
        matches!(self, Self::Mask3d | Self::Silicagel)
    }
}

impl FromStr for AttackType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| format!("unknown attack type `{}`", s.trim()))
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pai {
    Print,
    Replay,
}

impl Pai {
    /// 2D samples of this instrument per subject and modality.
    pub fn samples_per_subject(self) -> usize {
        match self {
            Pai::Print => 2,
            Pai::Replay => 1,
        }
    }
}

/// Which collection an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Collection {
    TwoD,
    ThreeD,
}

impl Collection {
    pub fn as_str(self) -> &'static str {
        match self {
            Collection::TwoD => "2d",
            Collection::ThreeD => "3d",
        }
    }
}

impl FromStr for Collection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "2d" | "2D" => Ok(Collection::TwoD),
            "3d" | "3D" => Ok(Collection::ThreeD),
            other => Err(format!("unknown subset `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u32,
    /// `None` only for 3D-collection entries.
    pub ethnicity: Option<Ethnicity>,
    pub modality: Modality,
    pub attack_type: AttackType,
    pub collection: Collection,
    /// Recording index within the subject; modalities of one recording share it.
    pub sample: u32,
    pub path: String,
}

impl ManifestEntry {
    pub fn label(&self) -> Label {
        self.attack_type.label()
    }

    /// Key shared by the modalities of one recording.
    pub fn recording_key(&self) -> (Collection, Option<Ethnicity>, u32, u32) {
        (self.collection, self.ethnicity, self.subject_id, self.sample)
    }

    /// Stable video id, independent of modality.
    pub fn video_id(&self) -> String {
        let eth = self.ethnicity.map_or('X', Ethnicity::tag);
        format!("{}_{}_{:04}_{}_{}", self.collection.as_str(), eth, self.subject_id, self.sample, self.attack_type)
    }
}

pub const MANIFEST_HEADER: [&str; 7] = ["subject_id", "ethnicity", "modality", "attack_type", "subset", "sample", "path"];

fn row_err(line: u64, msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Row { line, msg: msg.into() }
}

/// Parses a manifest CSV with header; `#` lines are comments.
pub fn parse_manifest<R: Read>(input: R) -> Result<Vec<ManifestEntry>, ProtocolError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(row_err(1, format!("expected header `{}`", MANIFEST_HEADER.join(","))));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(row_err(line, format!("expected 7 fields, got {}", rec.len())));
        }
        let subject_id: u32 = rec[0].parse().map_err(|_| row_err(line, format!("bad subject id `{}`", &rec[0])))?;
        if subject_id == 0 {
            return Err(row_err(line, "subject ids start at 1"));
        }
        let collection: Collection = rec[4].parse().map_err(|m: String| row_err(line, m))?;
        let ethnicity = match (&rec[1], collection) {
            ("", Collection::ThreeD) => None,
            ("", Collection::TwoD) => return Err(row_err(line, "2D entries need an ethnicity")),
            (e, _) => Some(e.parse().map_err(|m: String| row_err(line, m))?),
        };
        let mut chars = rec[2].chars();
        let modality = match (chars.next().and_then(Modality::from_tag), chars.next()) {
            (Some(m), None) => m,
            _ => return Err(row_err(line, format!("unknown modality `{}`", &rec[2]))),
        };
        let attack_type: AttackType = rec[3].parse().map_err(|m: String| row_err(line, m))?;
        if attack_type.is_3d() != (collection == Collection::ThreeD) {
            return Err(row_err(line, format!("attack `{attack_type}` not allowed in subset {}", collection.as_str())));
        }
        let sample: u32 = rec[5].parse().map_err(|_| row_err(line, format!("bad sample index `{}`", &rec[5])))?;
        let path = rec[6].to_string();
        if path.is_empty() {
            return Err(row_err(line, "empty path"));
        }
        if !seen.insert(path.clone()) {
            return Err(ProtocolError::DuplicatePath { line, path });
        }
        out.push(ManifestEntry {
            subject_id,
            ethnicity,
            modality,
            attack_type,
            collection,
            sample,
            path,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ProtocolError> {
    parse_manifest(std::fs::File::open(path)?)
}

pub fn write_manifest<W: Write>(
    mut out: W,
    entries: &[ManifestEntry],
    comment: Option<&str>,
) -> Result<(), ProtocolError> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{}", MANIFEST_HEADER.join(","))?;
    for e in entries {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.subject_id,
            e.ethnicity.map(|x| x.tag().to_string()).unwrap_or_default(),
            e.modality.tag(),
            e.attack_type,
            e.collection.as_str(),
            e.sample,
            e.path
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubProtocol {
    pub protocol: u8,
    pub sub: u8,
}

impl SubProtocol {
    pub fn all() -> Vec<SubProtocol> {
        [(1, 3), (2, 2), (3, 3), (4, 3)]
            .into_iter()
            .flat_map(|(p, n)| (1..=n).map(move |s| SubProtocol { protocol: p, sub: s }))
            .collect()
    }

    pub fn of_protocol(protocol: u8) -> Vec<SubProtocol> {
        Self::all().into_iter().filter(|s| s.protocol == protocol).collect()
    }
}

impl fmt::Display for SubProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.protocol, self.sub)
    }
}

impl FromStr for SubProtocol {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ProtocolError::UnknownProtocol(s.to_string());
        let (p, n) = s.trim().split_once('_').ok_or_else(unknown)?;
        let id = SubProtocol {
            protocol: p.parse().map_err(|_| unknown())?,
            sub: n.parse().map_err(|_| unknown())?,
        };
        if Self::all().contains(&id) {
            Ok(id)
        } else {
            Err(unknown())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Train,
    Valid,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Valid, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Valid => "valid",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declared selection of one subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetFilter {
    pub ethnicities: Vec<Ethnicity>,
    pub modalities: Vec<Modality>,
    pub pais: Vec<Pai>,
    pub subjects: RangeInclusive<u32>,
    /// Append 3D-collection entries of the selected modalities.
    pub include_3d: bool,
}

impl SubsetFilter {
    pub fn accepts(&self, e: &ManifestEntry) -> bool {
        if !self.modalities.contains(&e.modality) {
            return false;
        }
        match e.collection {
            Collection::ThreeD => self.include_3d,
            Collection::TwoD => {
                e.ethnicity.is_some_and(|x| self.ethnicities.contains(&x))
                    && self.subjects.contains(&e.subject_id)
                    && e.attack_type.pai().map_or(true, |p| self.pais.contains(&p))
            }
        }
    }

    pub fn subject_count(&self) -> usize {
        self.subjects.clone().count()
    }

    /// 2D counts implied by the filter: subjects × samples × modalities.
    pub fn expected_2d(&self) -> Counts {
        let per = self.subject_count() * self.ethnicities.len() * self.modalities.len();
        let fake_samples: usize = self.pais.iter().map(|p| p.samples_per_subject()).sum();
        Counts {
            real: per,
            fake: per * fake_samples,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub real: usize,
    pub fake: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.real + self.fake
    }

    fn of<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> Self {
        let mut c = Counts::default();
        for e in entries {
            match e.label() {
                Label::BonaFide => c.real += 1,
                Label::Attack => c.fake += 1,
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub id: SubProtocol,
    pub subjects_per_ethnicity: u32,
    pub train: Vec<ManifestEntry>,
    pub valid: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub filters: [SubsetFilter; 3],
}

impl ProtocolSplit {
    pub fn subset(&self, s: Subset) -> &[ManifestEntry] {
        match s {
            Subset::Train => &self.train,
            Subset::Valid => &self.valid,
            Subset::Test => &self.test,
        }
    }

    pub fn subset_mut(&mut self, s: Subset) -> &mut Vec<ManifestEntry> {
        match s {
            Subset::Train => &mut self.train,
            Subset::Valid => &mut self.valid,
            Subset::Test => &mut self.test,
        }
    }

    pub fn filter(&self, s: Subset) -> &SubsetFilter {
        &self.filters[s as usize]
    }

    pub fn counts_2d(&self, s: Subset) -> Counts {
        Counts::of(self.subset(s).iter().filter(|e| e.collection == Collection::TwoD))
    }

    pub fn counts_3d(&self, s: Subset) -> Counts {
        Counts::of(self.subset(s).iter().filter(|e| e.collection == Collection::ThreeD))
    }
}

/// Subject ranges for `n` subjects per ethnicity.
pub fn subject_ranges(n: u32) -> [RangeInclusive<u32>; 3] {
    let (a, b) = (2 * n / 5, 3 * n / 5);
    [1..=a, a + 1..=b, b + 1..=n]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitOptions {
    pub include_3d: bool,
    /// Defaults to the largest 2D subject id in the manifest.
    pub subjects_per_ethnicity: Option<u32>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            include_3d: true,
            subjects_per_ethnicity: None,
        }
    }
}

fn others<T: Copy + PartialEq>(all: &[T], skip: T) -> Vec<T> {
    all.iter().copied().filter(|&x| x != skip).collect()
}

/// Filters of one sub-protocol for `n` subjects per ethnicity.
pub fn protocol_filters(id: SubProtocol, n: u32, include_3d: bool) -> Result<[SubsetFilter; 3], ProtocolError> {
    if !SubProtocol::all().contains(&id) {
        return Err(ProtocolError::UnknownProtocol(id.to_string()));
    }
    let k = id.sub as usize - 1;
    let all_eth = Ethnicity::ALL.to_vec();
    let all_mod = Modality::ALL.to_vec();
    let both = vec![Pai::Print, Pai::Replay];
    // (train/valid, test) selections
    let (eth, mods, pais) = match id.protocol {
        1 => (
            (vec![Ethnicity::ALL[k]], others(&Ethnicity::ALL, Ethnicity::ALL[k])),
            (all_mod.clone(), all_mod),
            (both.clone(), both),
        ),
        2 => {
            let (seen, unseen) = if k == 0 { (Pai::Print, Pai::Replay) } else { (Pai::Replay, Pai::Print) };
            ((all_eth.clone(), all_eth), (all_mod.clone(), all_mod), (vec![seen], vec![unseen]))
        }
        3 => (
            (all_eth.clone(), all_eth),
            (vec![Modality::ALL[k]], others(&Modality::ALL, Modality::ALL[k])),
            (both.clone(), both),
        ),
        _ => (
            (vec![Ethnicity::ALL[k]], others(&Ethnicity::ALL, Ethnicity::ALL[k])),
            (all_mod.clone(), all_mod),
            (vec![Pai::Replay], vec![Pai::Print]),
        ),
    };
    let [tr, va, te] = subject_ranges(n);
    let mk = |test: bool, subjects: RangeInclusive<u32>| SubsetFilter {
        ethnicities: if test { eth.1.clone() } else { eth.0.clone() },
        modalities: if test { mods.1.clone() } else { mods.0.clone() },
        pais: if test { pais.1.clone() } else { pais.0.clone() },
        subjects,
        include_3d: test && include_3d,
    };
    Ok([mk(false, tr), mk(false, va), mk(true, te)])
}

pub fn build_split(
    manifest: &[ManifestEntry],
    id: SubProtocol,
    opts: SplitOptions,
) -> Result<ProtocolSplit, ProtocolError> {
    let n = match opts.subjects_per_ethnicity {
        Some(n) => n,
        None => manifest
            .iter()
            .filter(|e| e.collection == Collection::TwoD)
            .map(|e| e.subject_id)
            .max()
            .ok_or(ProtocolError::NoSubjects)?,
    };
    let filters = protocol_filters(id, n, opts.include_3d)?;
    let pick = |f: &SubsetFilter| manifest.iter().filter(|e| f.accepts(e)).cloned().collect::<Vec<_>>();
    let split = ProtocolSplit {
        id,
        subjects_per_ethnicity: n,
        train: pick(&filters[0]),
        valid: pick(&filters[1]),
        test: pick(&filters[2]),
        filters,
    };
    for s in Subset::ALL {
        if split.subset(s).is_empty() {
            return Err(ProtocolError::EmptySubset { id, subset: s });
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: Subset,
    pub counts_2d: Counts,
    pub expected_2d: Counts,
    /// Reported only; the 3D composition of test sets is configurable.
    pub counts_3d: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub id: SubProtocol,
    pub subsets: Vec<SubsetReport>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks disjointness, filter conformity and 2D counts of a split.
pub fn validate_split(split: &ProtocolSplit) -> ValidationReport {
    let mut violations = Vec::new();
    let subjects = |s: Subset| -> BTreeSet<(Option<Ethnicity>, u32)> {
        split
            .subset(s)
            .iter()
            .filter(|e| e.collection == Collection::TwoD)
            .map(|e| (e.ethnicity, e.subject_id))
            .collect()
    };
    let sets: BTreeMap<Subset, _> = Subset::ALL.into_iter().map(|s| (s, subjects(s))).collect();
    for (a, b) in [(Subset::Train, Subset::Valid), (Subset::Train, Subset::Test), (Subset::Valid, Subset::Test)] {
        let shared: Vec<String> = sets[&a]
            .intersection(&sets[&b])
            .map(|(e, id)| format!("{}{id}", e.map_or('X', Ethnicity::tag)))
            .collect();
        if !shared.is_empty() {
            violations.push(format!("subjects in both {a} and {b}: {}", shared.join(" ")));
        }
    }
    let mut reports = Vec::new();
    for s in Subset::ALL {
        let f = split.filter(s);
        for e in split.subset(s) {
            if !f.accepts(e) {
                violations.push(format!("{s}: `{}` does not match the {} filter", e.path, split.id));
            }
        }
        let counts_2d = split.counts_2d(s);
        let expected_2d = f.expected_2d();
        if counts_2d != expected_2d {
            violations.push(format!(
                "{s}: 2D counts real {} fake {}, expected real {} fake {}",
                counts_2d.real, counts_2d.fake, expected_2d.real, expected_2d.fake
            ));
        }
        reports.push(SubsetReport {
            subset: s,
            counts_2d,
            expected_2d,
            counts_3d: split.counts_3d(s),
        });
    }
    ValidationReport {
        id: split.id,
        subsets: reports,
        violations,
    }
}
