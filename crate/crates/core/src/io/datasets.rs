//! Tab-separated dataset files, float matrices and label lists.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::evaluation::{RetrievalCorpus, RetrievalItem, SimilarityRecord};
use crate::training::Triplet;

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a whole file; the error message names the path.
pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Non-blank lines of a UTF-8 file with their one-based line numbers.
fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|b| **b == b'\n')
            .count();
        parse_error(path, line, "invalid UTF-8")
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l).to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn parse_number<T: FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("{what} {field:?} is not a number")))
}

fn check_field(text: &str) -> Result<&str> {
    if text.contains(['\t', '\n', '\r']) {
        return Err(contract(format!("field {text:?} contains a tab or line break")));
    }
    Ok(text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads `sentence1 TAB sentence2 TAB score [TAB condition]` lines.
pub fn load_pair_dataset(path: impl AsRef<Path>) -> Result<Vec<SimilarityRecord>> {
    let path = path.as_ref();
    content_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(parse_error(path, n, format!("expected 3 or 4 columns, found {}", cols.len())));
            }
            let gold: f64 = parse_number(path, n, cols[2], "score")?;
            if !gold.is_finite() {
                return Err(parse_error(path, n, "score must be finite"));
            }
            let mut record = SimilarityRecord::new(cols[0], cols[1], gold);
            if let Some(c) = cols.get(3) {
                record = record.with_condition(*c);
            }
            Ok(record)
        })
        .collect()
}

pub fn write_pair_dataset(path: impl AsRef<Path>, records: &[SimilarityRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        write!(out, "{}\t{}\t{}", check_field(&r.sentence_1)?, check_field(&r.sentence_2)?, r.gold).unwrap();
        if let Some(c) = &r.condition {
            write!(out, "\t{}", check_field(c)?).unwrap();
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Reads `anchor TAB positive TAB negative` lines. A line with only two
/// columns is a triplet without a hard negative. An empty file yields an
/// empty list and a warning.
pub fn load_triplet_dataset(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let triplets = content_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [a, p] => Ok(Triplet::pair(*a, *p)),
                [a, p, neg] => Ok(Triplet::new(*a, *p, *neg)),
                _ => Err(parse_error(path, n, format!("expected 3 columns, found {}", cols.len()))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if triplets.is_empty() {
        log::warn!("{} contains no triplets", path.display());
    }
    Ok(triplets)
}

pub fn write_triplet_dataset(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let mut out = String::new();
    for t in triplets {
        write!(out, "{}\t{}", check_field(&t.anchor)?, check_field(&t.positive)?).unwrap();
        if let Some(n) = &t.negative {
            write!(out, "\t{}", check_field(n)?).unwrap();
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// One sentence per non-blank line.
pub fn load_sentences(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(content_lines(path.as_ref())?.into_iter().map(|(_, l)| l).collect())
}

pub fn write_sentences(path: impl AsRef<Path>, sentences: &[String]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        if s.trim().is_empty() || s.contains(['\n', '\r']) {
            return Err(contract(format!("sentence {s:?} is blank or spans lines")));
        }
        out.push_str(s);
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Tab-separated float rows, all of the same length.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in content_lines(path)? {
        let row = line
            .split('\t')
            .map(|f| parse_number(path, n, f, "value"))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_error(path, n, format!("row has {} values, expected {}", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_matrix(path: impl AsRef<Path>, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// One non-negative integer class label per line.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    content_lines(path)?
        .into_iter()
        .map(|(n, l)| parse_number(path, n, &l, "label"))
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let out: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_text(path.as_ref(), &out)
}

/// Reads `group TAB caption` lines. Items take ids in file order and the
/// first caption of every group is its query.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<RetrievalCorpus> {
    let path = path.as_ref();
    let mut corpus = RetrievalCorpus::default();
    let mut first_of_group: std::collections::BTreeMap<String, usize> = Default::default();
    for (n, line) in content_lines(path)? {
        let Some((group, text)) = line.split_once('\t') else {
            return Err(parse_error(path, n, "expected `group<TAB>caption`"));
        };
        if text.contains('\t') {
            return Err(parse_error(path, n, "expected exactly 2 columns"));
        }
        let id = corpus.items.len();
        match first_of_group.get(group) {
            Some(q) => {
                corpus.groups.get_mut(q).expect("query registered").insert(id);
            }
            None => {
                first_of_group.insert(group.to_string(), id);
                corpus.groups.insert(id, Default::default());
            }
        }
        corpus.items.push(RetrievalItem {
            id,
            text: text.to_string(),
            embedding: Vec::new(),
        });
    }
    if let Some((q, _)) = corpus.groups.iter().find(|(_, refs)| refs.is_empty()) {
        return Err(parse_error(path, 0, format!("group of item {q} has no reference captions")));
    }
    Ok(corpus)
}

/// Writes a corpus whose groups each consist of a query followed by its
/// references; items outside any group are rejected.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &RetrievalCorpus) -> Result<()> {
    let mut out = String::new();
    let mut covered = 0;
    for (g, (q, refs)) in corpus.groups.iter().enumerate() {
        for id in std::iter::once(q).chain(refs) {
            writeln!(out, "g{g}\t{}", check_field(&corpus.item(*id)?.text)?).unwrap();
            covered += 1;
        }
    }
    if covered != corpus.len() {
        return Err(contract("every corpus item must belong to exactly one group"));
    }
    write_text(path.as_ref(), &out)
}

/// `dir/name`, creating `dir` when needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn file_with(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn pair_lines_parse() {
        let (_d, p) = file_with("a b\tc d\t3.5\n\n\na\tb\t5\tthe color\n");
        let records = load_pair_dataset(&p).unwrap();
        assert_eq!(records[0], SimilarityRecord::new("a b", "c d", 3.5));
        assert_eq!(records[1], SimilarityRecord::new("a", "b", 5.0).with_condition("the color"));
    }

    #[test]
    fn pair_errors_name_the_line() {
        let (_d, p) = file_with("a\tb\t1\n\nx\ty\tfive\n");
        match load_pair_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let (_d, p) = file_with("only one column\n");
        assert!(matches!(load_pair_dataset(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn pair_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        let records = vec![
            SimilarityRecord::new("first one", "second", 0.1 + 0.2),
            SimilarityRecord::new("x", "y", 5.0).with_condition("the place"),
            SimilarityRecord::new("ünïcode", "text", -1e-300),
        ];
        write_pair_dataset(&p, &records).unwrap();
        assert_eq!(load_pair_dataset(&p).unwrap(), records);
        assert!(write_pair_dataset(&p, &[SimilarityRecord::new("a\tb", "c", 1.0)]).is_err());
    }

    #[test]
    fn triplets_parse_and_round_trip() {
        let (_d, p) = file_with("a\tb\tc\n");
        assert_eq!(load_triplet_dataset(&p).unwrap(), vec![Triplet::new("a", "b", "c")]);
        let (_d, p) = file_with("");
        assert!(load_triplet_dataset(&p).unwrap().is_empty());
        let (_d, p) = file_with("a\tb\tc\td\n");
        assert!(load_triplet_dataset(&p).is_err());

        let dir = tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        let ts = vec![Triplet::new("one", "two", "three"), Triplet::pair("four", "five")];
        write_triplet_dataset(&p, &ts).unwrap();
        assert_eq!(load_triplet_dataset(&p).unwrap(), ts);
    }

    #[test]
    fn matrix_labels_and_sentences_round_trip() {
        let dir = tempdir().unwrap();
        let m = vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 0.0, f64::MAX]];
        write_matrix(dir.path().join("m.tsv"), &m).unwrap();
        assert_eq!(load_matrix(dir.path().join("m.tsv")).unwrap(), m);
        write_labels(dir.path().join("l.txt"), &[0, 3, 1]).unwrap();
        assert_eq!(load_labels(dir.path().join("l.txt")).unwrap(), vec![0, 3, 1]);
        let s = vec!["a cat".to_string(), "two dogs".to_string()];
        write_sentences(dir.path().join("s.txt"), &s).unwrap();
        assert_eq!(load_sentences(dir.path().join("s.txt")).unwrap(), s);

        let (_d, p) = file_with("1\t2\n3\n");
        assert!(matches!(load_matrix(&p), Err(Error::Parse { line: 2, .. })));
        let (_d, p) = file_with("1\n-1\n");
        assert!(load_labels(&p).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let g = crate::synth::TemplateGrammar::standard(3);
        let corpus = g.gen_retrieval_groups(4, 3).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        write_corpus(&p, &corpus).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), corpus);
        let (_d, p) = file_with("g\tlonely\n");
        assert!(load_corpus(&p).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert_eq!(load_pair_dataset("/nonexistent/x.tsv").unwrap_err().kind(), "io");
    }
}
