//! Data ingestion: CSV loading, ANOVA feature selection, TF-IDF matrices
//! for text corpora, and the heatmap statistic exported for plotting.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::blockstruct::ColumnGrouping;
use crate::error::{Error, Result};
use crate::stats::DataMatrix;

/// A tokenized document collection with an optional numeric label per
/// document. Tokens are stored as indices into the sorted vocabulary;
/// documents that end up empty after token filtering are dropped (together
/// with their label).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Vec<usize>>,
    pub ratings: Option<Vec<f64>>,
    pub vocabulary: Vec<String>,
}

impl Corpus {
    /// Tokenize raw texts: lowercase, split on non-alphanumeric boundaries,
    /// drop tokens shorter than two characters.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], ratings: Option<Vec<f64>>) -> Result<Self> {
        if let Some(r) = &ratings {
            if r.len() != texts.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} ratings for {} documents",
                    r.len(),
                    texts.len()
                )));
            }
        }
        let tokenized: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();

        let mut vocabulary: Vec<String> = tokenized
            .iter()
            .flatten()
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        vocabulary.sort();
        let index: std::collections::HashMap<&str, usize> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut documents = Vec::new();
        let mut kept_ratings = ratings.as_ref().map(|_| Vec::new());
        for (d, tokens) in tokenized.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            documents.push(tokens.iter().map(|t| index[t.as_str()]).collect());
            if let (Some(out), Some(r)) = (kept_ratings.as_mut(), ratings.as_ref()) {
                out.push(r[d]);
            }
        }
        if documents.is_empty() {
            return Err(Error::EmptyInput(
                "no documents survive tokenization".into(),
            ));
        }
        Ok(Self {
            documents,
            ratings: kept_ratings,
            vocabulary,
        })
    }

    pub fn n_documents(&self) -> usize {
        self.documents.len()
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Parse a rectangular numeric CSV. If `label_column` names a header column,
/// that column is returned separately as strings and excluded from the
/// matrix. Cell coordinates in errors are 0-based over the data body.
pub fn load_csv<P: AsRef<Path>>(
    path: P,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<(DataMatrix, Option<Vec<String>>)> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, has_header, label_column)
}

/// [`load_csv`] over any reader, mainly for tests.
pub fn load_csv_reader<R: Read>(
    reader: R,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<(DataMatrix, Option<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .from_reader(reader);

    let header: Option<Vec<String>> = if has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let label_idx = match (label_column, &header) {
        (None, _) => None,
        (Some(name), Some(h)) => Some(h.iter().position(|c| c == name).ok_or_else(|| {
            Error::InvalidArgument(format!("label column '{name}' not found in header"))
        })?),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "a label column requires a header".into(),
            ))
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len());
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_idx {
                labels.push(cell.trim().to_string());
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                row: i,
                col: j,
                message: format!("'{}' is not numeric", cell.trim()),
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("csv has no data rows".into()));
    }
    let p = rows[0].len();
    let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let col_names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != label_idx)
            .map(|(_, name)| name)
            .collect()
    });
    let data = DataMatrix::new(values, None, col_names)?;
    Ok((data, label_idx.map(|_| labels)))
}

/// Per-feature one-way ANOVA F statistics (between-group mean square over
/// within-group mean square) for integer class labels.
pub fn anova_f_statistics(data: &DataMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    let x = data.values();
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; c];
    for &l in labels {
        counts[l] += 1;
    }
    let classes = counts.iter().filter(|&&v| v > 0).count();
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "anova needs at least two label classes".into(),
        ));
    }
    let df_between = (classes - 1) as f64;
    let df_within = (n - classes) as f64;

    let mut fs = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut class_sum = vec![0.0f64; c];
        let mut total = 0.0;
        for i in 0..n {
            class_sum[labels[i]] += x[(i, j)];
            total += x[(i, j)];
        }
        let grand_mean = total / n as f64;
        let mut ss_between = 0.0;
        for g in 0..c {
            if counts[g] > 0 {
                let m = class_sum[g] / counts[g] as f64;
                ss_between += counts[g] as f64 * (m - grand_mean) * (m - grand_mean);
            }
        }
        let mut ss_within = 0.0;
        for i in 0..n {
            let m = class_sum[labels[i]] / counts[labels[i]] as f64;
            ss_within += (x[(i, j)] - m) * (x[(i, j)] - m);
        }
        let f = if ss_within <= 0.0 || df_within <= 0.0 {
            if ss_between <= 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (ss_between / df_between) / (ss_within / df_within)
        };
        fs.push(f);
    }
    Ok(fs)
}

/// Keep the k features with the largest ANOVA F statistic (ties to the
/// lower column index), preserving column order and names.
pub fn anova_select_k(data: &DataMatrix, labels: &[usize], k: usize) -> Result<DataMatrix> {
    if k == 0 || k > data.p() {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range for p={}",
            data.p()
        )));
    }
    let fs = anova_f_statistics(data, labels)?;
    let mut order: Vec<usize> = (0..fs.len()).collect();
    order.sort_by(|&a, &b| {
        fs[b].partial_cmp(&fs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    data.select_columns(&keep)
}

/// Map arbitrary ordered label values to dense class ids (sorted order).
pub fn class_ids<T: PartialOrd + Copy>(values: &[T]) -> Vec<usize> {
    let mut distinct: Vec<T> = Vec::new();
    for &v in values {
        if !distinct.iter().any(|d| *d == v) {
            distinct.push(v);
        }
    }
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values
        .iter()
        .map(|v| {
            distinct
                .iter()
                .position(|d| d == v)
                .expect("value collected above")
        })
        .collect()
}

/// Document-term matrix of tf-idf scores.
///
/// tf is the within-document relative frequency, idf the natural log of
/// N over the document frequency. The `top_tf` terms with the highest mean
/// term frequency are kept; `select_k = (k, ratings)` further filters to the
/// k terms most predictive of the rating by ANOVA F. Column names are the
/// surviving terms.
pub fn tfidf_matrix(
    corpus: &Corpus,
    top_tf: usize,
    select_k: Option<(usize, &[f64])>,
) -> Result<DataMatrix> {
    let n = corpus.n_documents();
    let v = corpus.vocabulary.len();
    if v == 0 || top_tf == 0 {
        return Err(Error::EmptyInput("empty vocabulary after filtering".into()));
    }

    let mut tf = DMatrix::<f64>::zeros(n, v);
    let mut df = vec![0usize; v];
    for (d, doc) in corpus.documents.iter().enumerate() {
        let len = doc.len() as f64;
        let mut seen = vec![false; v];
        for &t in doc {
            tf[(d, t)] += 1.0 / len;
            if !seen[t] {
                seen[t] = true;
                df[t] += 1;
            }
        }
    }

    // mean term frequency ranking; ties to the lower (lexicographic) index
    let mean_tf: Vec<f64> = (0..v).map(|t| tf.column(t).sum() / n as f64).collect();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        mean_tf[b]
            .partial_cmp(&mean_tf[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(top_tf.min(v)).collect();
    keep.sort_unstable();

    let values = DMatrix::from_fn(n, keep.len(), |d, c| {
        let t = keep[c];
        let idf = ((n as f64) / df[t] as f64).ln();
        tf[(d, t)] * idf
    });
    let names: Vec<String> = keep.iter().map(|&t| corpus.vocabulary[t].clone()).collect();
    let matrix = DataMatrix::new(values, None, Some(names))?;

    match select_k {
        None => Ok(matrix),
        Some((k, ratings)) => {
            if ratings.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} ratings for {n} documents",
                    ratings.len()
                )));
            }
            let labels = class_ids(ratings);
            anova_select_k(&matrix, &labels, k.min(matrix.p()))
        }
    }
}

/// One heatmap entry: how much more important column group A is for row
/// cluster B than on average, in percent. Cells without a defined value
/// (empty group, zero overall average, empty row cluster) carry a note
/// instead.
#[derive(Debug, Clone, Serialize)]
pub struct HeatmapCell {
    pub row_cluster: usize,
    pub column_group: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub terms: Vec<String>,
}

/// Average tf-idf inside (row cluster, column group) relative to the
/// column group's average over all rows, times 100.
pub fn heatmap_stat(
    tfidf: &DataMatrix,
    row_assignment: &[usize],
    groupings: &[ColumnGrouping],
) -> Result<Vec<HeatmapCell>> {
    let n = tfidf.n();
    if row_assignment.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} row labels for {} rows",
            row_assignment.len(),
            n
        )));
    }
    let g = groupings.len();
    if row_assignment.iter().any(|&b| b >= g) {
        return Err(Error::InvalidArgument(format!(
            "row cluster id out of range for {g} groupings"
        )));
    }
    let x = tfidf.values();
    let term_name = |j: usize| {
        tfidf
            .col_names()
            .map_or_else(|| format!("c{j}"), |names| names[j].clone())
    };

    let mut cells = Vec::new();
    for (b, grouping) in groupings.iter().enumerate() {
        if grouping.p() != tfidf.p() {
            return Err(Error::DimensionMismatch(format!(
                "grouping of row cluster {b} covers {} columns, matrix has {}",
                grouping.p(),
                tfidf.p()
            )));
        }
        let member_rows: Vec<usize> = (0..n).filter(|&i| row_assignment[i] == b).collect();
        for (a, cols) in grouping.groups().iter().enumerate() {
            let terms: Vec<String> = cols.iter().map(|&j| term_name(j)).collect();
            let mut cell = HeatmapCell {
                row_cluster: b,
                column_group: a,
                percent: None,
                note: None,
                terms,
            };
            if cols.is_empty() {
                cell.note = Some("empty column group".into());
            } else if member_rows.is_empty() {
                cell.note = Some("empty row cluster".into());
            } else {
                let overall: f64 = (0..n)
                    .flat_map(|i| cols.iter().map(move |&j| x[(i, j)]))
                    .sum::<f64>()
                    / (n * cols.len()) as f64;
                if overall == 0.0 {
                    cell.note = Some("zero average tf-idf over all rows".into());
                } else {
                    let inside: f64 = member_rows
                        .iter()
                        .flat_map(|&i| cols.iter().map(move |&j| x[(i, j)]))
                        .sum::<f64>()
                        / (member_rows.len() * cols.len()) as f64;
                    cell.percent = Some(100.0 * inside / overall);
                }
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// CSV emission of the heatmap table (one row per cell).
pub fn write_heatmap_csv<W: std::io::Write>(cells: &[HeatmapCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row_cluster", "column_group", "percent", "note", "terms"])?;
    for c in cells {
        w.write_record([
            c.row_cluster.to_string(),
            c.column_group.to_string(),
            c.percent.map_or(String::new(), |p| format!("{p}")),
            c.note.clone().unwrap_or_default(),
            c.terms.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn load_csv_plain_numeric() {
        let (data, labels) = load_csv_reader("1,2\n3,4\n5,6\n".as_bytes(), false, None).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.p(), 2);
        assert!(labels.is_none());
        assert_eq!(data.values()[(2, 1)], 6.0);
    }

    #[test]
    fn load_csv_header_and_label_column() {
        let text = "class,a,b\nx,1,2\ny,3,4\n";
        let (data, labels) = load_csv_reader(text.as_bytes(), true, Some("class")).unwrap();
        assert_eq!(data.p(), 2);
        assert_eq!(data.col_names().unwrap(), &["a", "b"]);
        assert_eq!(labels.unwrap(), vec!["x", "y"]);
    }

    #[test]
    fn load_csv_bad_cell_coordinates() {
        let text = "1,2\n3,4\n5,abc\n";
        let err = load_csv_reader(text.as_bytes(), false, None).unwrap_err();
        match err {
            Error::CsvCell { row, col, .. } => {
                assert_eq!((row, col), (2, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_csv_ragged_rows_error() {
        let text = "1,2\n3\n";
        assert!(load_csv_reader(text.as_bytes(), false, None).is_err());
    }

    #[test]
    fn anova_matches_hand_computation() {
        // two classes, three features
        let values = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 5.0, 2.0, //
                2.0, 5.0, 4.0, //
                8.0, 5.0, 3.0, //
                9.0, 5.0, 5.0,
            ],
        );
        let data = DataMatrix::from_values(values.clone()).unwrap();
        let labels = vec![0usize, 0, 1, 1];
        let fs = anova_f_statistics(&data, &labels).unwrap();

        // independent hand computation, feature by feature
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| values[(i, j)]).collect();
            let m0 = (col[0] + col[1]) / 2.0;
            let m1 = (col[2] + col[3]) / 2.0;
            let grand = col.iter().sum::<f64>() / 4.0;
            let ssb = 2.0 * (m0 - grand).powi(2) + 2.0 * (m1 - grand).powi(2);
            let ssw = (col[0] - m0).powi(2)
                + (col[1] - m0).powi(2)
                + (col[2] - m1).powi(2)
                + (col[3] - m1).powi(2);
            let expected = if ssw == 0.0 {
                if ssb == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (ssb / 1.0) / (ssw / 2.0)
            };
            if expected.is_finite() {
                assert_relative_eq!(fs[j], expected, epsilon = 1e-10);
            } else {
                assert!(fs[j].is_infinite());
            }
        }
        // feature 1 is constant across classes: F = 0, dropped first
        assert_eq!(fs[1], 0.0);
        let selected = anova_select_k(&data, &labels, 2).unwrap();
        assert_eq!(selected.p(), 2);
        // class indicator (feature 0) survives
        assert_eq!(selected.values()[(0, 0)], 1.0);
    }

    #[test]
    fn anova_indicator_feature_ranked_first() {
        // feature 0 = class indicator + tiny noise, feature 1 = junk
        let values = DMatrix::from_row_slice(
            6,
            2,
            &[
                0.001, 3.0, //
                -0.002, 1.0, //
                0.002, 2.0, //
                1.001, 2.5, //
                0.999, 0.5, //
                1.002, 1.5,
            ],
        );
        let data = DataMatrix::from_values(values).unwrap();
        let labels = vec![0usize, 0, 0, 1, 1, 1];
        let fs = anova_f_statistics(&data, &labels).unwrap();
        assert!(fs[0] > fs[1]);
        let selected = anova_select_k(&data, &labels, 1).unwrap();
        assert_eq!(selected.p(), 1);
    }

    #[test]
    fn anova_needs_two_classes() {
        let data =
            DataMatrix::from_values(DMatrix::from_row_slice(2, 1, &[1.0, 2.0])).unwrap();
        assert!(anova_f_statistics(&data, &[0, 0]).is_err());
    }

    #[test]
    fn corpus_tokenization_rules() {
        // the middle document dies entirely (all tokens shorter than 2)
        let corpus = Corpus::from_texts(&["The CAT, the hat!", "a I x", "dog dog"], None).unwrap();
        assert_eq!(corpus.n_documents(), 2);
        assert_eq!(corpus.vocabulary, vec!["cat", "dog", "hat", "the"]);
        // nothing survives at all
        assert!(Corpus::from_texts(&["a b c", "! ?"], None).is_err());
    }

    #[test]
    fn tfidf_matches_hand_computation() {
        let corpus = Corpus::from_texts(
            &["apple banana apple", "banana cherry", "apple cherry cherry dog"],
            None,
        )
        .unwrap();
        let m = tfidf_matrix(&corpus, 10, None).unwrap();
        assert_eq!(
            m.col_names().unwrap(),
            &["apple", "banana", "cherry", "dog"]
        );
        let idf2 = (3.0f64 / 2.0).ln();
        let idf1 = 3.0f64.ln();
        let expected = [
            [2.0 / 3.0 * idf2, 1.0 / 3.0 * idf2, 0.0, 0.0],
            [0.0, 1.0 / 2.0 * idf2, 1.0 / 2.0 * idf2, 0.0],
            [1.0 / 4.0 * idf2, 0.0, 2.0 / 4.0 * idf2, 1.0 / 4.0 * idf1],
        ];
        for i in 0..3 {
            for j in 0..4 {
                assert_relative_eq!(m.values()[(i, j)], expected[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tfidf_stop_word_column_is_zero() {
        let corpus = Corpus::from_texts(
            &["the apple", "the banana", "the cherry"],
            None,
        )
        .unwrap();
        let m = tfidf_matrix(&corpus, 10, None).unwrap();
        let the_col = m
            .col_names()
            .unwrap()
            .iter()
            .position(|t| t == "the")
            .unwrap();
        for i in 0..3 {
            assert_eq!(m.values()[(i, the_col)], 0.0);
        }
    }

    #[test]
    fn tfidf_single_document_all_zero() {
        let corpus = Corpus::from_texts(&["alpha beta gamma"], None).unwrap();
        let m = tfidf_matrix(&corpus, 10, None).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tfidf_top_tf_and_select_k_bound_columns() {
        let corpus = Corpus::from_texts(
            &[
                "alpha alpha beta gamma",
                "alpha beta beta delta",
                "gamma gamma delta epsilon",
                "epsilon epsilon alpha beta",
            ],
            Some(vec![1.0, 1.0, 5.0, 5.0]),
        )
        .unwrap();
        let m = tfidf_matrix(&corpus, 3, None).unwrap();
        assert_eq!(m.p(), 3);
        let ratings = corpus.ratings.clone().unwrap();
        let m2 = tfidf_matrix(&corpus, 3, Some((2, &ratings))).unwrap();
        assert_eq!(m2.p(), 2);
    }

    #[test]
    fn heatmap_single_row_cluster_is_100() {
        let values = DMatrix::from_row_slice(2, 3, &[0.5, 0.2, 0.1, 0.3, 0.6, 0.4]);
        let tfidf = DataMatrix::from_values(values).unwrap();
        let grouping = ColumnGrouping::new(vec![0, 0, 1], 2).unwrap();
        let cells = heatmap_stat(&tfidf, &[0, 0], &[grouping]).unwrap();
        for cell in cells {
            assert_relative_eq!(cell.percent.unwrap(), 100.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn heatmap_zero_average_group_omitted() {
        let values = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.0, 0.6]);
        let tfidf = DataMatrix::from_values(values).unwrap();
        let grouping = ColumnGrouping::new(vec![0, 1], 2).unwrap();
        let cells = heatmap_stat(&tfidf, &[0, 1], &[grouping.clone(), grouping]).unwrap();
        let zero_cells: Vec<_> = cells.iter().filter(|c| c.column_group == 0).collect();
        assert!(zero_cells.iter().all(|c| c.percent.is_none()));
        assert!(zero_cells.iter().all(|c| c.note.is_some()));
    }

    #[test]
    fn heatmap_two_cluster_hand_computation() {
        // rows 0,1 in cluster 0; row 2 in cluster 1; groups {0}, {1}
        let values = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 3.0, 2.0, 2.0, 4.0]);
        let tfidf = DataMatrix::from_values(values).unwrap();
        let grouping = ColumnGrouping::new(vec![0, 1], 2).unwrap();
        let cells =
            heatmap_stat(&tfidf, &[0, 0, 1], &[grouping.clone(), grouping]).unwrap();
        // cluster 0, column group {0}: inside mean (1+3)/2 = 2, overall (1+3+2)/3 = 2
        let c00 = cells
            .iter()
            .find(|c| c.row_cluster == 0 && c.column_group == 0)
            .unwrap();
        assert_relative_eq!(c00.percent.unwrap(), 100.0, epsilon = 1e-12);
        // cluster 1, column group {1}: inside 4, overall (0+2+4)/3 = 2 -> 200%
        let c11 = cells
            .iter()
            .find(|c| c.row_cluster == 1 && c.column_group == 1)
            .unwrap();
        assert_relative_eq!(c11.percent.unwrap(), 200.0, epsilon = 1e-12);
    }
}
