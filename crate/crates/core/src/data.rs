//! Interaction logs: parsing, KC expansion, length filtering and student-level folds.
//!
//! Dense ids start at 1; id 0 is reserved for KCs and questions that were
//! not seen when the vocabulary was built.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN_ID: usize = 0;
pub const FLAT_HEADER: &str = "student_id,question_id,kc_ids,response,timestamp";

/// One response event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub question_id: usize,
    pub kc_ids: BTreeSet<usize>,
    /// 1 = correct, 0 = incorrect.
    pub response: u8,
    /// Ordinal position in the student's log.
    pub time_index: usize,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(question_id: usize, kc_ids: impl IntoIterator<Item = usize>, response: u8, time_index: usize) -> Result<Self> {
        let kc_ids: BTreeSet<usize> = kc_ids.into_iter().collect();
        if kc_ids.is_empty() {
            return Err(Error::Data(format!("question {question_id} has no KCs")));
        }
        if response > 1 {
            return Err(Error::Data(format!("response {response} is not binary")));
        }
        Ok(Self { question_id, kc_ids, response, time_index, timestamp: None })
    }

    /// The single KC of an expanded interaction (the smallest id otherwise).
    pub fn kc(&self) -> usize {
        *self.kc_ids.iter().next().expect("kc_ids is nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentSequence {
    pub student_id: usize,
    pub interactions: Vec<Interaction>,
}

impl StudentSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn responses(&self) -> Vec<u8> {
        self.interactions.iter().map(|i| i.response).collect()
    }

    pub fn with_responses(&self, responses: &[u8]) -> StudentSequence {
        let mut out = self.clone();
        for (it, &r) in out.interactions.iter_mut().zip(responses) {
            it.response = r;
        }
        out
    }
}

/// Bidirectional map between raw string ids and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary whose id 0 is the reserved unknown entry.
    pub fn with_unknown() -> Self {
        let mut v = Self::default();
        v.insert("<unk>");
        v
    }

    pub fn insert(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.names.len();
        self.names.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabs {
    pub students: Vocab,
    pub questions: Vocab,
    pub kcs: Vocab,
}

impl Vocabs {
    pub fn new() -> Self {
        Self { students: Vocab::default(), questions: Vocab::with_unknown(), kcs: Vocab::with_unknown() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub sequences: Vec<StudentSequence>,
    /// Table size for KC ids, including the reserved unknown id.
    pub num_kcs: usize,
    /// Table size for question ids, including the reserved unknown id.
    pub num_questions: usize,
    pub vocabs: Vocabs,
}

impl DatasetBundle {
    pub fn empty() -> Self {
        Self::from_vocabs(Vec::new(), Vocabs::new())
    }

    pub fn from_vocabs(sequences: Vec<StudentSequence>, vocabs: Vocabs) -> Self {
        Self { num_kcs: vocabs.kcs.len(), num_questions: vocabs.questions.len(), sequences, vocabs }
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(StudentSequence::len).sum()
    }

    pub fn student_ids(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut ids = Vec::new();
        for s in &self.sequences {
            if seen.insert(s.student_id) {
                ids.push(s.student_id);
            }
        }
        ids
    }

    pub fn sequences_of(&self, students: &[usize]) -> Vec<StudentSequence> {
        let set: BTreeSet<usize> = students.iter().copied().collect();
        self.sequences.iter().filter(|s| set.contains(&s.student_id)).cloned().collect()
    }

    /// Checks the id-range and response invariants.
    pub fn validate(&self) -> Result<()> {
        for s in &self.sequences {
            let mut last = 0;
            for it in &s.interactions {
                if it.response > 1 || it.kc_ids.is_empty() {
                    return Err(Error::Data(format!("invalid interaction for student {}", s.student_id)));
                }
                if it.question_id >= self.num_questions || it.kc_ids.iter().any(|&k| k >= self.num_kcs) {
                    return Err(Error::Lookup(format!("id out of range for student {}", s.student_id)));
                }
                if it.time_index < last {
                    return Err(Error::Data(format!("time order violated for student {}", s.student_id)));
                }
                last = it.time_index;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogFormat {
    /// Three rows per student: question ids, KC ids, responses.
    CsvGrouped,
    /// One interaction per line under [`FLAT_HEADER`].
    CsvFlat,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-grouped" | "grouped" => Ok(LogFormat::CsvGrouped),
            "csv-flat" | "flat" => Ok(LogFormat::CsvFlat),
            other => Err(Error::Config(format!("unknown log format `{other}`"))),
        }
    }
}

/// How raw ids are resolved while parsing.
enum IdMode<'a> {
    Extend(Vocabs),
    /// Resolve against a fixed vocabulary; unseen ids become [`UNKNOWN_ID`].
    Frozen(&'a Vocabs, Vocabs),
}

impl IdMode<'_> {
    fn question(&mut self, raw: &str) -> usize {
        match self {
            IdMode::Extend(v) => v.questions.insert(raw),
            IdMode::Frozen(v, _) => v.questions.get(raw).unwrap_or(UNKNOWN_ID),
        }
    }

    fn kc(&mut self, raw: &str) -> usize {
        match self {
            IdMode::Extend(v) => v.kcs.insert(raw),
            IdMode::Frozen(v, _) => v.kcs.get(raw).unwrap_or(UNKNOWN_ID),
        }
    }

    fn student(&mut self, raw: &str) -> usize {
        match self {
            IdMode::Extend(v) => v.students.insert(raw),
            IdMode::Frozen(_, own) => own.students.insert(raw),
        }
    }

    fn finish(self) -> Vocabs {
        match self {
            IdMode::Extend(v) => v,
            IdMode::Frozen(v, own) => Vocabs { students: own.students, ..v.clone() },
        }
    }
}

fn parse_response(tok: &str, line: usize) -> Result<u8> {
    match tok.trim() {
        "1" => Ok(1),
        "0" => Ok(0),
        other => Err(Error::Data(format!("line {line}: unknown response token `{other}`"))),
    }
}

fn parse_kcs(field: &str, line: usize, ids: &mut IdMode) -> Result<Vec<usize>> {
    let kcs: Vec<usize> = field.split('_').map(str::trim).filter(|s| !s.is_empty()).map(|s| ids.kc(s)).collect();
    if kcs.is_empty() {
        return Err(Error::Parse { line, msg: "empty kc_ids field".into() });
    }
    Ok(kcs)
}

/// Reads an interaction log, assigning dense ids in first-seen order.
pub fn parse_interaction_log(path: impl AsRef<Path>, format: LogFormat) -> Result<DatasetBundle> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_str(&text, format, IdMode::Extend(Vocabs::new()))
}

/// Reads a log against an existing vocabulary (e.g. a trained model's);
/// unseen KCs and questions map to [`UNKNOWN_ID`].
pub fn parse_interaction_log_with_vocab(path: impl AsRef<Path>, format: LogFormat, vocabs: &Vocabs) -> Result<DatasetBundle> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_str(&text, format, IdMode::Frozen(vocabs, Vocabs::new()))
}

pub fn parse_log_str(text: &str, format: LogFormat) -> Result<DatasetBundle> {
    parse_str(text, format, IdMode::Extend(Vocabs::new()))
}

fn records(text: &str, has_headers: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_str(text: &str, format: LogFormat, mut ids: IdMode) -> Result<DatasetBundle> {
    let mut order: Vec<usize> = Vec::new();
    let mut by_student: HashMap<usize, Vec<Interaction>> = HashMap::new();
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse { line, msg: e.to_string() }
    };
    match format {
        LogFormat::CsvFlat => {
            let mut rdr = records(text, true);
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                if rec.len() == 1 && rec[0].is_empty() {
                    continue;
                }
                if rec.len() < 4 || rec.len() > 5 {
                    return Err(Error::Parse { line, msg: format!("expected 5 fields, got {}", rec.len()) });
                }
                let student = ids.student(&rec[0]);
                let question = ids.question(&rec[1]);
                let kcs = parse_kcs(&rec[2], line, &mut ids)?;
                let response = parse_response(&rec[3], line)?;
                let timestamp = match rec.get(4) {
                    None | Some("") => None,
                    Some(t) => Some(t.parse::<i64>().map_err(|_| Error::Parse { line, msg: format!("bad timestamp `{t}`") })?),
                };
                let list = by_student.entry(student).or_insert_with(|| {
                    order.push(student);
                    Vec::new()
                });
                let mut it = Interaction::new(question, kcs, response, list.len())?;
                it.timestamp = timestamp;
                list.push(it);
            }
        }
        LogFormat::CsvGrouped => {
            let mut rdr = records(text, false);
            let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                if rec.iter().all(str::is_empty) {
                    continue;
                }
                rows.push((line, rec.iter().map(str::to_string).collect()));
            }
            if rows.len() % 3 != 0 {
                let line = rows.last().map(|r| r.0).unwrap_or(0);
                return Err(Error::Parse { line, msg: "incomplete question/KC/response block".into() });
            }
            for (block, chunk) in rows.chunks(3).enumerate() {
                let (line, qs) = &chunk[0];
                let (kline, ks) = &chunk[1];
                let (rline, rs) = &chunk[2];
                if qs.len() != ks.len() || qs.len() != rs.len() {
                    return Err(Error::Parse {
                        line: *line,
                        msg: format!("row lengths differ: {} questions, {} KCs, {} responses", qs.len(), ks.len(), rs.len()),
                    });
                }
                let student = ids.student(&format!("s{block}"));
                order.push(student);
                let mut list = Vec::with_capacity(qs.len());
                for t in 0..qs.len() {
                    let question = ids.question(&qs[t]);
                    let kcs = parse_kcs(&ks[t], *kline, &mut ids)?;
                    let response = parse_response(&rs[t], *rline)?;
                    list.push(Interaction::new(question, kcs, response, t)?);
                }
                by_student.insert(student, list);
            }
        }
    }
    let sequences = order
        .into_iter()
        .map(|sid| StudentSequence { student_id: sid, interactions: by_student.remove(&sid).unwrap_or_default() })
        .collect();
    Ok(DatasetBundle::from_vocabs(sequences, ids.finish()))
}

/// Writes a bundle in the flat CSV layout using raw ids from its vocabulary.
pub fn write_flat(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    write_flat_to(bundle, &mut out).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

pub fn write_flat_to(bundle: &DatasetBundle, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{FLAT_HEADER}")?;
    let v = &bundle.vocabs;
    for s in &bundle.sequences {
        let student = v.students.name(s.student_id).map(str::to_string).unwrap_or_else(|| s.student_id.to_string());
        for it in &s.interactions {
            let q = v.questions.name(it.question_id).unwrap_or("<unk>");
            let kcs: Vec<&str> = it.kc_ids.iter().map(|&k| v.kcs.name(k).unwrap_or("<unk>")).collect();
            let ts = it.timestamp.map(|t| t.to_string()).unwrap_or_default();
            writeln!(w, "{student},{q},{},{},{ts}", kcs.join("_"), it.response)?;
        }
    }
    Ok(())
}

/// Splits each multi-KC interaction into one interaction per KC, in ascending KC id order.
pub fn expand_by_kc(bundle: &DatasetBundle) -> DatasetBundle {
    let sequences = bundle
        .sequences
        .iter()
        .map(|s| StudentSequence {
            student_id: s.student_id,
            interactions: s
                .interactions
                .iter()
                .flat_map(|it| {
                    it.kc_ids.iter().map(move |&k| Interaction {
                        question_id: it.question_id,
                        kc_ids: BTreeSet::from([k]),
                        response: it.response,
                        time_index: it.time_index,
                        timestamp: it.timestamp,
                    })
                })
                .collect(),
        })
        .collect();
    DatasetBundle { sequences, ..bundle.clone() }
}

/// Drops sequences shorter than `min_len` and chunks long ones into pieces of
/// at most `max_len`; a trailing chunk survives only if it has `min_len` items.
pub fn preprocess_sequences(bundle: &DatasetBundle, min_len: usize, max_len: usize) -> Result<DatasetBundle> {
    if min_len == 0 || max_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("invalid length bounds min {min_len}, max {max_len}")));
    }
    let mut sequences = Vec::new();
    for s in &bundle.sequences {
        for chunk in s.interactions.chunks(max_len) {
            if chunk.len() >= min_len {
                sequences.push(StudentSequence { student_id: s.student_id, interactions: chunk.to_vec() });
            }
        }
    }
    Ok(DatasetBundle { sequences, ..bundle.clone() })
}

/// Held-out test students plus `k` disjoint cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Training students for fold `i` (every other fold).
    pub fn train_students(&self, i: usize) -> Vec<usize> {
        self.folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.iter().copied()).collect()
    }

    pub fn validation_students(&self, i: usize) -> &[usize] {
        &self.folds[i]
    }

    /// `(train, validation)` sequences for fold `i`.
    pub fn fold_sequences(&self, bundle: &DatasetBundle, i: usize) -> (Vec<StudentSequence>, Vec<StudentSequence>) {
        (bundle.sequences_of(&self.train_students(i)), bundle.sequences_of(&self.folds[i]))
    }

    pub fn test_sequences(&self, bundle: &DatasetBundle) -> Vec<StudentSequence> {
        bundle.sequences_of(&self.test)
    }
}

/// Student-level split: `round(test_fraction * n)` test students, the rest
/// dealt round-robin into `k` folds after a seeded shuffle.
pub fn split_folds(bundle: &DatasetBundle, test_fraction: f64, k: usize, seed: u64) -> Result<FoldPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut students = bundle.student_ids();
    let n_test = (test_fraction * students.len() as f64).round() as usize;
    if students.len() < k || students.len() - n_test < k {
        return Err(Error::Config(format!("{} students cannot fill {k} folds", students.len())));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let test = students[..n_test].to_vec();
    let mut folds = vec![Vec::new(); k];
    for (i, &s) in students[n_test..].iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(FoldPlan { test, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FIXTURE: &str = "\
student_id,question_id,kc_ids,response,timestamp
alice,q1,k1_k2,1,100
alice,q2,k3,0,101
alice,q3,k1_k3,1,102
bob,q1,k1_k2,0,200
bob,q4,k4,1,
bob,q2,k3,1,202
carol,q5,k2_k4,1,300
carol,q3,k1_k3,0,301
carol,q4,k4,1,302
carol,q6,k2,0,303
";

    fn seq(resps: &[u8]) -> StudentSequence {
        StudentSequence {
            student_id: 0,
            interactions: resps.iter().enumerate().map(|(t, &r)| Interaction::new(1, [1], r, t).unwrap()).collect(),
        }
    }

    #[test]
    fn parses_flat_fixture() {
        let b = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        assert_eq!(b.sequences.len(), 3);
        assert_eq!(b.num_interactions(), 10);
        assert_eq!(b.sequences.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 3, 4]);
        // four KCs and six questions plus the reserved id
        assert_eq!(b.num_kcs, 5);
        assert_eq!(b.num_questions, 7);
        assert_eq!(b.sequences[0].interactions[0].kc_ids.len(), 2);
        assert_eq!(b.sequences[1].interactions[1].timestamp, None);
        b.validate().unwrap();
    }

    #[test]
    fn dense_ids_are_first_seen_and_deterministic() {
        let a = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        let b = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vocabs.kcs.get("k1"), Some(1));
        assert_eq!(a.vocabs.kcs.get("k2"), Some(2));
        assert_eq!(a.vocabs.questions.get("q6"), Some(6));
    }

    #[test]
    fn empty_input_gives_empty_bundle() {
        let b = parse_log_str("", LogFormat::CsvFlat).unwrap();
        assert!(b.sequences.is_empty());
        let b = parse_log_str("", LogFormat::CsvGrouped).unwrap();
        assert!(b.sequences.is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "student_id,question_id,kc_ids,response,timestamp\na,q1,k1,1,5\na,q2\n";
        match parse_log_str(text, LogFormat::CsvFlat) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_response_token_is_data_error() {
        let text = "student_id,question_id,kc_ids,response,timestamp\na,q1,k1,yes,5\n";
        assert!(matches!(parse_log_str(text, LogFormat::CsvFlat), Err(Error::Data(_))));
    }

    #[test]
    fn parses_grouped_layout() {
        let text = "q1,q2,q3\nk1,k2_k3,k1\n1,0,1\n\nq2,q4\nk2,k4\n0,0\n";
        let b = parse_log_str(text, LogFormat::CsvGrouped).unwrap();
        assert_eq!(b.sequences.len(), 2);
        assert_eq!(b.sequences[0].interactions[1].kc_ids.len(), 2);
        assert_eq!(b.sequences[1].responses(), vec![0, 0]);
        let bad = "q1,q2\nk1\n1,0\n";
        assert!(matches!(parse_log_str(bad, LogFormat::CsvGrouped), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_log_str("q1\nk1\n", LogFormat::CsvGrouped), Err(Error::Parse { .. })));
    }

    #[test]
    fn flat_round_trip() {
        let b = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        let mut out = Vec::new();
        write_flat_to(&b, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, FIXTURE);
    }

    #[test]
    fn frozen_vocab_maps_unseen_to_unknown() {
        let train = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        std::fs::write(&path, "student_id,question_id,kc_ids,response,timestamp\nzed,q1,k1_k9,1,1\nzed,q77,k2,0,2\n").unwrap();
        let b = parse_interaction_log_with_vocab(&path, LogFormat::CsvFlat, &train.vocabs).unwrap();
        let s = &b.sequences[0];
        assert_eq!(s.interactions[0].kc_ids, BTreeSet::from([0, 1]));
        assert_eq!(s.interactions[1].question_id, UNKNOWN_ID);
        assert_eq!(b.num_kcs, train.num_kcs);
    }

    #[test]
    fn expansion_rule() {
        let it = Interaction::new(5, [7, 2], 1, 0).unwrap();
        let b = DatasetBundle {
            sequences: vec![StudentSequence { student_id: 0, interactions: vec![it] }],
            num_kcs: 8,
            num_questions: 6,
            vocabs: Vocabs::new(),
        };
        let e = expand_by_kc(&b);
        let got: Vec<(usize, usize, u8)> = e.sequences[0].interactions.iter().map(|i| (i.question_id, i.kc(), i.response)).collect();
        assert_eq!(got, vec![(5, 2, 1), (5, 7, 1)]);
    }

    #[test]
    fn expansion_counts_on_fixture() {
        let b = parse_log_str(FIXTURE, LogFormat::CsvFlat).unwrap();
        let e = expand_by_kc(&b);
        assert_eq!(e.num_interactions(), 15);
        let single = seq(&[1, 0, 1]);
        let sb = DatasetBundle::from_vocabs(vec![single.clone()], Vocabs::new());
        assert_eq!(expand_by_kc(&sb).sequences[0], single);
        // response totals per student are preserved with multiplicity
        for (s, x) in b.sequences.iter().zip(&e.sequences) {
            let want: usize = s.interactions.iter().map(|i| i.kc_ids.len() * i.response as usize).sum();
            let got: usize = x.interactions.iter().map(|i| i.response as usize).sum();
            assert_eq!(want, got);
        }
    }

    #[test]
    fn preprocessing_lengths() {
        let mk = |n: usize| StudentSequence {
            student_id: n,
            interactions: (0..n).map(|t| Interaction::new(1, [1], (t % 2) as u8, t).unwrap()).collect(),
        };
        let b = DatasetBundle::from_vocabs(vec![mk(2), mk(450), mk(3)], Vocabs::new());
        let p = preprocess_sequences(&b, 3, 200).unwrap();
        let lens: Vec<usize> = p.sequences.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![200, 200, 50, 3]);
        assert!(p.sequences[..3].iter().all(|s| s.student_id == 450));
        let p = preprocess_sequences(&DatasetBundle::from_vocabs(vec![mk(401)], Vocabs::new()), 3, 200).unwrap();
        assert_eq!(p.sequences.len(), 2, "a one-item tail is dropped");
    }

    fn students(n: usize) -> DatasetBundle {
        let seqs = (0..n).map(|i| StudentSequence { student_id: i, interactions: seq(&[1, 0, 1]).interactions }).collect();
        DatasetBundle::from_vocabs(seqs, Vocabs::new())
    }

    #[test]
    fn fold_sizes_and_determinism() {
        let b = students(100);
        let p = split_folds(&b, 0.2, 5, 42).unwrap();
        assert_eq!(p.test.len(), 20);
        assert!(p.folds.iter().all(|f| f.len() == 16));
        assert_eq!(p, split_folds(&b, 0.2, 5, 42).unwrap());
        assert_ne!(p, split_folds(&b, 0.2, 5, 43).unwrap());
    }

    #[test]
    fn folds_partition_students() {
        for n in [5usize, 7, 13, 31, 100] {
            for seed in 0..5 {
                let b = students(n);
                let p = split_folds(&b, 0.2, 3, seed).unwrap();
                let mut all: Vec<usize> = p.test.iter().chain(p.folds.iter().flatten()).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn too_few_students_is_config_error() {
        assert!(matches!(split_folds(&students(4), 0.2, 5, 1), Err(Error::Config(_))));
        assert!(matches!(split_folds(&students(40), 1.0, 5, 1), Err(Error::Config(_))));
    }
}
