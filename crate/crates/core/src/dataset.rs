//! Long-format panel choice data.
//!
//! A [`ChoiceDataset`] is a validated, indexed view of rows of the form
//! `(individual, choice situation, alternative, chosen, attributes...)`.
//! Individuals are sorted by ID and situations by situation ID, so the
//! iteration order (and therefore the assignment of simulation draws) does
//! not depend on the row order of the input file. Rows inside a situation
//! keep their file order.
//!
//! The module also provides the wide → long reshape used to turn one row
//! per choice situation into one row per alternative.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while loading or validating choice data.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` not found in input header")]
    MissingColumn(String),
    #[error("row {row}: choice value `{value}` is not 0 or 1")]
    NonBinaryChoice { row: usize, value: String },
    #[error("row {row}: column `{col}` value `{value}` is not an integer")]
    NonIntegerValue {
        row: usize,
        col: String,
        value: String,
    },
    #[error("individual {id}, situation {cs}: more than one alternative is chosen")]
    MultipleChosen { id: i64, cs: i64 },
    #[error("individual {id}, situation {cs}: no alternative is chosen")]
    NoneChosen { id: i64, cs: i64 },
    #[error("individual {id}, situation {cs}: alternative {alt} appears more than once")]
    DuplicateAlternative { id: i64, cs: i64, alt: i64 },
    #[error("row {row}: attribute `{col}` is missing or not a finite number")]
    NonFiniteAttribute { row: usize, col: String },
    #[error("individual {id}, situation {cs}: fewer than two alternatives")]
    SituationTooSmall { id: i64, cs: i64 },
    #[error("row {row}: expected {expected} attribute values, found {found}")]
    AttributeCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset contains no rows")]
    Empty,
    #[error("wide column `{0}` not found in input header")]
    MissingStubColumn(String),
    #[error("{0}")]
    InconsistentAltCount(String),
    #[error("wide rows {first} and {second} share the same identifier values")]
    DuplicateWideRow { first: usize, second: usize },
    #[error("cluster variable varies within individual {0}")]
    ClusterVariesWithinIndividual(i64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One alternative (one long-format row) inside a choice situation.
#[derive(Clone, Debug, PartialEq)]
pub struct Alternative {
    /// Alternative label as it appears in the data.
    pub alternative_id: i64,
    /// Dense position of `alternative_id` in [`ChoiceDataset::alternative_labels`].
    pub alt_index: usize,
    pub attributes: Vec<f64>,
    pub chosen: bool,
    /// Zero-based data row in the source file (header excluded).
    pub row: usize,
    /// Auxiliary columns kept verbatim (cluster variables and the like).
    pub extras: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceSituation {
    pub situation_id: i64,
    pub alternatives: Vec<Alternative>,
}

impl ChoiceSituation {
    /// Position of the chosen alternative. Validated datasets always have one.
    pub fn chosen_index(&self) -> usize {
        self.alternatives
            .iter()
            .position(|a| a.chosen)
            .expect("validated situation has a chosen alternative")
    }

    pub fn len(&self) -> usize {
        self.alternatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alternatives.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndividualBlock {
    pub individual_id: i64,
    pub situations: Vec<ChoiceSituation>,
}

/// Names of the columns that make up a long-format file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongColumns {
    pub id: String,
    pub group: String,
    pub alternative: String,
    pub choice: String,
    pub attributes: Vec<String>,
    /// Extra columns carried along without interpretation.
    pub extras: Vec<String>,
}

impl LongColumns {
    pub fn new(
        id: impl Into<String>,
        group: impl Into<String>,
        alternative: impl Into<String>,
        choice: impl Into<String>,
        attributes: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            group: group.into(),
            alternative: alternative.into(),
            choice: choice.into(),
            attributes,
            extras: Vec::new(),
        }
    }

    pub fn with_extras(mut self, extras: Vec<String>) -> Self {
        self.extras = extras;
        self
    }
}

/// A single parsed long-format row, before grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct LongRow {
    pub id: i64,
    pub group: i64,
    pub alternative: i64,
    pub chosen: bool,
    pub attributes: Vec<f64>,
    pub extras: Vec<String>,
}

/// Validated panel of choice situations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    pub individuals: Vec<IndividualBlock>,
    pub attribute_names: Vec<String>,
    /// Distinct alternative labels, ascending.
    pub alternative_labels: Vec<i64>,
    pub extra_names: Vec<String>,
    /// Name of the individual identifier column, when loaded from a file.
    pub id_column: Option<String>,
}

impl ChoiceDataset {
    /// Groups and validates rows. Row order inside a situation is preserved;
    /// individuals and situations are sorted ascending by ID.
    pub fn from_rows(
        attribute_names: Vec<String>,
        extra_names: Vec<String>,
        rows: Vec<LongRow>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(DatasetError::Empty);
        }
        let labels: Vec<i64> = rows
            .iter()
            .map(|r| r.alternative)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut grouped: BTreeMap<i64, BTreeMap<i64, Vec<Alternative>>> = BTreeMap::new();
        for (row_idx, row) in rows.into_iter().enumerate() {
            if row.attributes.len() != attribute_names.len() {
                return Err(DatasetError::AttributeCount {
                    row: row_idx + 1,
                    expected: attribute_names.len(),
                    found: row.attributes.len(),
                });
            }
            if let Some(m) = row.attributes.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteAttribute {
                    row: row_idx + 1,
                    col: attribute_names[m].clone(),
                });
            }
            let alt_index = labels
                .binary_search(&row.alternative)
                .expect("label collected above");
            grouped
                .entry(row.id)
                .or_default()
                .entry(row.group)
                .or_default()
                .push(Alternative {
                    alternative_id: row.alternative,
                    alt_index,
                    attributes: row.attributes,
                    chosen: row.chosen,
                    row: row_idx,
                    extras: row.extras,
                });
        }

        let mut individuals = Vec::with_capacity(grouped.len());
        for (id, situations) in grouped {
            let mut block = IndividualBlock {
                individual_id: id,
                situations: Vec::with_capacity(situations.len()),
            };
            for (cs, alternatives) in situations {
                validate_situation(id, cs, &alternatives)?;
                block.situations.push(ChoiceSituation {
                    situation_id: cs,
                    alternatives,
                });
            }
            individuals.push(block);
        }

        Ok(Self {
            individuals,
            attribute_names,
            alternative_labels: labels,
            extra_names,
            id_column: None,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_situations(&self) -> usize {
        self.individuals.iter().map(|b| b.situations.len()).sum()
    }

    /// Total number of long-format rows.
    pub fn n_rows(&self) -> usize {
        self.situations().map(|s| s.alternatives.len()).sum()
    }

    pub fn situations(&self) -> impl Iterator<Item = &ChoiceSituation> {
        self.individuals.iter().flat_map(|b| b.situations.iter())
    }

    pub fn individual_ids(&self) -> Vec<i64> {
        self.individuals.iter().map(|b| b.individual_id).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|a| a == name)
    }
}

fn validate_situation(id: i64, cs: i64, alternatives: &[Alternative]) -> Result<()> {
    if alternatives.len() < 2 {
        return Err(DatasetError::SituationTooSmall { id, cs });
    }
    let mut seen = HashSet::with_capacity(alternatives.len());
    for alt in alternatives {
        if !seen.insert(alt.alternative_id) {
            return Err(DatasetError::DuplicateAlternative {
                id,
                cs,
                alt: alt.alternative_id,
            });
        }
    }
    match alternatives.iter().filter(|a| a.chosen).count() {
        0 => Err(DatasetError::NoneChosen { id, cs }),
        1 => Ok(()),
        _ => Err(DatasetError::MultipleChosen { id, cs }),
    }
}

fn column_position(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
}

fn parse_integer(raw: &str, row: usize, col: &str) -> Result<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(DatasetError::NonIntegerValue {
            row,
            col: col.to_string(),
            value: raw.to_string(),
        }),
    }
}

fn parse_choice(raw: &str, row: usize) -> Result<bool> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(DatasetError::NonBinaryChoice {
            row,
            value: raw.to_string(),
        }),
    }
}

/// Loads a long-format CSV file (comma separated, header row).
pub fn load_long_csv(path: impl AsRef<Path>, columns: &LongColumns) -> Result<ChoiceDataset> {
    let file = std::fs::File::open(path)?;
    read_long_csv(file, columns)
}

/// Same as [`load_long_csv`] for any reader.
pub fn read_long_csv<R: Read>(reader: R, columns: &LongColumns) -> Result<ChoiceDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_pos = column_position(&headers, &columns.id)?;
    let group_pos = column_position(&headers, &columns.group)?;
    let alt_pos = column_position(&headers, &columns.alternative)?;
    let choice_pos = column_position(&headers, &columns.choice)?;
    let attr_pos = columns
        .attributes
        .iter()
        .map(|c| column_position(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let extra_pos = columns
        .extras
        .iter()
        .map(|c| column_position(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |p: usize| record.get(p).unwrap_or("");
        let mut attributes = Vec::with_capacity(attr_pos.len());
        for (&p, name) in attr_pos.iter().zip(&columns.attributes) {
            let value = field(p)
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::NonFiniteAttribute {
                    row,
                    col: name.clone(),
                })?;
            attributes.push(value);
        }
        rows.push(LongRow {
            id: parse_integer(field(id_pos), row, &columns.id)?,
            group: parse_integer(field(group_pos), row, &columns.group)?,
            alternative: parse_integer(field(alt_pos), row, &columns.alternative)?,
            chosen: parse_choice(field(choice_pos), row)?,
            attributes,
            extras: extra_pos.iter().map(|&p| field(p).to_string()).collect(),
        });
    }
    let mut ds = ChoiceDataset::from_rows(columns.attributes.clone(), columns.extras.clone(), rows)?;
    ds.id_column = Some(columns.id.clone());
    Ok(ds)
}

/// How a wide file (one row per choice situation) maps onto long rows.
#[derive(Clone, Debug)]
pub struct WideLayout {
    /// `(long_name, wide_prefix)`: columns `prefix1 .. prefixJ` become `long_name`.
    pub stubs: Vec<(String, String)>,
    /// Columns that identify a wide row; copied to every long row.
    pub id_cols: Vec<String>,
    pub alt_count: usize,
    /// Wide column holding the chosen alternative number (1..J). Emitted
    /// in the long file as a 0/1 column of the same name.
    pub choice_col: Option<String>,
    /// Name of the emitted alternative column.
    pub alt_col: String,
}

impl WideLayout {
    pub fn new(stubs: Vec<(String, String)>, id_cols: Vec<String>, alt_count: usize) -> Self {
        Self {
            stubs,
            id_cols,
            alt_count,
            choice_col: None,
            alt_col: "altern".to_string(),
        }
    }

    pub fn with_choice(mut self, col: impl Into<String>) -> Self {
        self.choice_col = Some(col.into());
        self
    }
}

/// A table of raw CSV fields, as produced by the reshape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LongTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl LongTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.headers)?;
        for row in &self.rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

/// Reshapes a wide CSV file into long format.
pub fn reshape_wide_to_long(path: impl AsRef<Path>, layout: &WideLayout) -> Result<LongTable> {
    reshape_reader(std::fs::File::open(path)?, layout)
}

/// Reader-based variant of [`reshape_wide_to_long`].
///
/// Output columns: id columns, the alternative column, one column per stub,
/// the choice column (if any), then every remaining wide column unchanged.
/// Field values are copied as text, never reparsed.
pub fn reshape_reader<R: Read>(reader: R, layout: &WideLayout) -> Result<LongTable> {
    if layout.alt_count == 0 {
        return Err(DatasetError::InconsistentAltCount(
            "alternative count must be at least 1".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_pos = layout
        .id_cols
        .iter()
        .map(|c| column_position(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut consumed: HashSet<usize> = id_pos.iter().copied().collect();
    let mut stub_pos = Vec::with_capacity(layout.stubs.len());
    for (_, prefix) in &layout.stubs {
        let mut cols = Vec::with_capacity(layout.alt_count);
        for k in 1..=layout.alt_count {
            let name = format!("{prefix}{k}");
            let p = headers
                .iter()
                .position(|h| h == name)
                .ok_or(DatasetError::MissingStubColumn(name))?;
            consumed.insert(p);
            cols.push(p);
        }
        let extra = format!("{prefix}{}", layout.alt_count + 1);
        if headers.iter().any(|h| h == extra) {
            return Err(DatasetError::InconsistentAltCount(format!(
                "column `{extra}` exists but only {} alternatives were declared",
                layout.alt_count
            )));
        }
        stub_pos.push(cols);
    }
    let choice_pos = match &layout.choice_col {
        Some(c) => {
            let p = column_position(&headers, c)?;
            consumed.insert(p);
            Some(p)
        }
        None => None,
    };
    let passthrough: Vec<usize> = (0..headers.len()).filter(|p| !consumed.contains(p)).collect();

    let mut out_headers: Vec<String> = layout.id_cols.clone();
    out_headers.push(layout.alt_col.clone());
    out_headers.extend(layout.stubs.iter().map(|(long, _)| long.clone()));
    if let Some(c) = &layout.choice_col {
        out_headers.push(c.clone());
    }
    out_headers.extend(passthrough.iter().map(|&p| headers[p].to_string()));

    let mut seen_keys: HashMap<Vec<String>, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |p: usize| record.get(p).unwrap_or("").to_string();
        let key: Vec<String> = id_pos.iter().map(|&p| field(p)).collect();
        if let Some(first) = seen_keys.insert(key, row) {
            return Err(DatasetError::DuplicateWideRow { first, second: row });
        }
        let chosen_alt = match (choice_pos, &layout.choice_col) {
            (Some(p), Some(name)) => {
                let v = parse_integer(&field(p), row, name)?;
                if v < 1 || v as usize > layout.alt_count {
                    return Err(DatasetError::InconsistentAltCount(format!(
                        "row {row}: chosen alternative {v} outside 1..={}",
                        layout.alt_count
                    )));
                }
                Some(v as usize)
            }
            _ => None,
        };
        for k in 1..=layout.alt_count {
            let mut out: Vec<String> = id_pos.iter().map(|&p| field(p)).collect();
            out.push(k.to_string());
            out.extend(stub_pos.iter().map(|cols| field(cols[k - 1])));
            if let Some(c) = chosen_alt {
                out.push(if c == k { "1" } else { "0" }.to_string());
            }
            out.extend(passthrough.iter().map(|&p| field(p)));
            rows.push(out);
        }
    }
    Ok(LongTable {
        headers: out_headers,
        rows,
    })
}

/// Assignment of individuals (in dataset order) to clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    /// Cluster label of each individual.
    pub labels: Vec<String>,
    /// Dense cluster index of each individual, in order of first appearance.
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterMap {
    /// One cluster per individual.
    pub fn singletons(n_individuals: usize) -> Self {
        Self::from_labels((0..n_individuals).map(|i| i.to_string()).collect())
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let assignment: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = index.len();
                *index.entry(l.as_str()).or_insert(next)
            })
            .collect();
        let n_clusters = index.len();
        Self {
            labels,
            assignment,
            n_clusters,
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Maps each individual to its cluster. Without a column every individual
/// is its own cluster. The column may be the individual ID column, an
/// extra column or an attribute column, and must be constant within each
/// individual.
pub fn cluster_index(ds: &ChoiceDataset, cluster_col: Option<&str>) -> Result<ClusterMap> {
    let Some(col) = cluster_col else {
        return Ok(ClusterMap::from_labels(
            ds.individuals.iter().map(|b| b.individual_id.to_string()).collect(),
        ));
    };
    if ds.id_column.as_deref() == Some(col) {
        return cluster_index(ds, None);
    }
    let value_of: Box<dyn Fn(&Alternative) -> String> =
        if let Some(p) = ds.extra_names.iter().position(|e| e == col) {
            Box::new(move |a: &Alternative| a.extras[p].trim().to_string())
        } else if let Some(p) = ds.attribute_index(col) {
            Box::new(move |a: &Alternative| a.attributes[p].to_string())
        } else {
            return Err(DatasetError::MissingColumn(col.to_string()));
        };

    let mut labels = Vec::with_capacity(ds.n_individuals());
    for block in &ds.individuals {
        let mut rows = block.situations.iter().flat_map(|s| s.alternatives.iter());
        let first = value_of(rows.next().expect("validated individual has rows"));
        if rows.any(|a| value_of(a) != first) {
            return Err(DatasetError::ClusterVariesWithinIndividual(block.individual_id));
        }
        labels.push(first);
    }
    Ok(ClusterMap::from_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns() -> LongColumns {
        LongColumns::new(
            "id",
            "cs",
            "altern",
            "choice",
            vec!["tt".to_string(), "tc".to_string()],
        )
    }

    const TWELVE_ROWS: &str = "\
id,cs,altern,choice,tt,tc
2,1,1,0,10,2
2,1,2,1,15,3
2,1,3,0,20,4
1,2,1,1,11,2
1,2,2,0,16,3
1,2,3,0,21,1
1,1,1,0,12,5
1,1,2,0,13,4
1,1,3,1,14,3
2,2,1,0,30,1
2,2,2,0,25,2
2,2,3,1,20,3
";

    #[test]
    fn groups_twelve_rows() {
        let ds = read_long_csv(TWELVE_ROWS.as_bytes(), &columns()).unwrap();
        assert_eq!(ds.n_individuals(), 2);
        assert_eq!(ds.individual_ids(), vec![1, 2]);
        for block in &ds.individuals {
            assert_eq!(block.situations.len(), 2);
            assert_eq!(block.situations[0].situation_id, 1);
            assert_eq!(block.situations[1].situation_id, 2);
        }
        assert_eq!(ds.n_rows(), 12);
        assert_eq!(ds.alternative_labels, vec![1, 2, 3]);
        let s = &ds.individuals[0].situations[0];
        assert_eq!(s.chosen_index(), 2);
        assert_eq!(s.alternatives[0].attributes, vec![12.0, 5.0]);
        assert_eq!(s.alternatives[0].row, 6);
    }

    #[test]
    fn multiple_chosen_is_rejected() {
        let data = "id,cs,altern,choice,tt,tc\n1,1,1,1,1,1\n1,1,2,1,2,2\n";
        let err = read_long_csv(data.as_bytes(), &columns()).unwrap_err();
        assert!(matches!(err, DatasetError::MultipleChosen { id: 1, cs: 1 }));
    }

    #[test]
    fn none_chosen_is_rejected() {
        let data = "id,cs,altern,choice,tt,tc\n1,1,1,0,1,1\n1,1,2,0,2,2\n";
        let err = read_long_csv(data.as_bytes(), &columns()).unwrap_err();
        assert!(matches!(err, DatasetError::NoneChosen { id: 1, cs: 1 }));
    }

    #[test]
    fn empty_attribute_cell_is_rejected() {
        let data = "id,cs,altern,choice,tt,tc\n1,1,1,1,,1\n1,1,2,0,2,2\n";
        let err = read_long_csv(data.as_bytes(), &columns()).unwrap_err();
        match err {
            DatasetError::NonFiniteAttribute { row, col } => {
                assert_eq!(row, 1);
                assert_eq!(col, "tt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_invariant_violations() {
        let dup = "id,cs,altern,choice,tt,tc\n1,1,1,1,1,1\n1,1,1,0,2,2\n";
        assert!(matches!(
            read_long_csv(dup.as_bytes(), &columns()).unwrap_err(),
            DatasetError::DuplicateAlternative { alt: 1, .. }
        ));
        let small = "id,cs,altern,choice,tt,tc\n1,1,1,1,1,1\n";
        assert!(matches!(
            read_long_csv(small.as_bytes(), &columns()).unwrap_err(),
            DatasetError::SituationTooSmall { .. }
        ));
        let binary = "id,cs,altern,choice,tt,tc\n1,1,1,2,1,1\n1,1,2,0,2,2\n";
        assert!(matches!(
            read_long_csv(binary.as_bytes(), &columns()).unwrap_err(),
            DatasetError::NonBinaryChoice { row: 1, .. }
        ));
        let nan = "id,cs,altern,choice,tt,tc\n1,1,1,1,NaN,1\n1,1,2,0,2,2\n";
        assert!(matches!(
            read_long_csv(nan.as_bytes(), &columns()).unwrap_err(),
            DatasetError::NonFiniteAttribute { .. }
        ));
        let missing = "id,cs,alt,choice,tt,tc\n";
        assert!(matches!(
            read_long_csv(missing.as_bytes(), &columns()).unwrap_err(),
            DatasetError::MissingColumn(c) if c == "altern"
        ));
    }

    #[test]
    fn alternative_labels_need_not_be_contiguous() {
        let data = "id,cs,altern,choice,tt,tc\n1,1,10,1,1,1\n1,1,30,0,2,2\n1,2,30,1,1,1\n1,2,20,0,2,2\n";
        let ds = read_long_csv(data.as_bytes(), &columns()).unwrap();
        assert_eq!(ds.alternative_labels, vec![10, 20, 30]);
        let s = &ds.individuals[0].situations[1];
        assert_eq!(s.alternatives[0].alt_index, 2);
        assert_eq!(s.alternatives[1].alt_index, 1);
    }

    #[test]
    fn reshape_example_row() {
        let wide = "id,cs,tt1,tt2,tt3,tc1,tc2,tc3,choice\n7,1,10,15,20,2,3,4,2\n";
        let layout = WideLayout::new(
            vec![
                ("total_time".into(), "tt".into()),
                ("total_cost".into(), "tc".into()),
            ],
            vec!["id".into(), "cs".into()],
            3,
        )
        .with_choice("choice");
        let table = reshape_reader(wide.as_bytes(), &layout).unwrap();
        assert_eq!(
            table.headers,
            vec!["id", "cs", "altern", "total_time", "total_cost", "choice"]
        );
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[0], vec!["7", "1", "1", "10", "2", "0"]);
        assert_eq!(table.rows[1], vec!["7", "1", "2", "15", "3", "1"]);
        assert_eq!(table.rows[2], vec!["7", "1", "3", "20", "4", "0"]);
    }

    #[test]
    fn reshape_single_alternative_is_identity() {
        let wide = "id,x1,other\n1,0.125,a\n2,3.50,b\n";
        let layout = WideLayout::new(vec![("x".into(), "x".into())], vec!["id".into()], 1);
        let table = reshape_reader(wide.as_bytes(), &layout).unwrap();
        assert_eq!(table.headers, vec!["id", "altern", "x", "other"]);
        assert_eq!(table.rows, vec![vec!["1", "1", "0.125", "a"], vec!["2", "1", "3.50", "b"]]);
    }

    #[test]
    fn reshape_missing_stub_column() {
        let wide = "id,cs,tt1,tt2,choice\n1,1,10,15,1\n";
        let layout = WideLayout::new(vec![("total_time".into(), "tt".into())], vec!["id".into(), "cs".into()], 3);
        assert!(matches!(
            reshape_reader(wide.as_bytes(), &layout).unwrap_err(),
            DatasetError::MissingStubColumn(c) if c == "tt3"
        ));
    }

    #[test]
    fn reshape_rejects_out_of_range_choice_and_duplicates() {
        let layout = WideLayout::new(vec![("t".into(), "t".into())], vec!["id".into()], 2).with_choice("choice");
        let bad = "id,t1,t2,choice\n1,1,2,3\n";
        assert!(matches!(
            reshape_reader(bad.as_bytes(), &layout).unwrap_err(),
            DatasetError::InconsistentAltCount(_)
        ));
        let extra = "id,t1,t2,t3,choice\n1,1,2,3,1\n";
        assert!(matches!(
            reshape_reader(extra.as_bytes(), &layout).unwrap_err(),
            DatasetError::InconsistentAltCount(_)
        ));
        let dup = "id,t1,t2,choice\n1,1,2,1\n1,1,2,2\n";
        assert!(matches!(
            reshape_reader(dup.as_bytes(), &layout).unwrap_err(),
            DatasetError::DuplicateWideRow { first: 1, second: 2 }
        ));
    }

    fn five_individuals() -> ChoiceDataset {
        let mut data = String::from("id,cs,altern,choice,tt,tc,grp,const\n");
        for id in 1..=5 {
            for alt in 1..=2 {
                data.push_str(&format!("{id},1,{alt},{},1,2,{},7\n", (alt == 1) as u8, id % 2));
            }
        }
        read_long_csv(
            data.as_bytes(),
            &columns().with_extras(vec!["grp".into(), "const".into()]),
        )
        .unwrap()
    }

    #[test]
    fn cluster_defaults_and_identity() {
        let ds = five_individuals();
        let default = cluster_index(&ds, None).unwrap();
        assert_eq!(default.n_clusters, 5);
        assert_eq!(default.assignment, vec![0, 1, 2, 3, 4]);
        assert_eq!(cluster_index(&ds, Some("id")).unwrap(), default);
    }

    #[test]
    fn cluster_constant_column() {
        let ds = five_individuals();
        let map = cluster_index(&ds, Some("const")).unwrap();
        assert_eq!(map.n_clusters, 1);
        assert_eq!(map.assignment, vec![0; 5]);
        let parity = cluster_index(&ds, Some("grp")).unwrap();
        assert_eq!(parity.n_clusters, 2);
        assert_eq!(parity.labels, vec!["1", "0", "1", "0", "1"]);
    }

    #[test]
    fn cluster_must_be_constant_within_individual() {
        let data = "id,cs,altern,choice,tt,tc,g\n1,1,1,1,1,1,5\n1,1,2,0,2,2,6\n";
        let ds = read_long_csv(data.as_bytes(), &columns().with_extras(vec!["g".into()])).unwrap();
        assert!(matches!(
            cluster_index(&ds, Some("g")).unwrap_err(),
            DatasetError::ClusterVariesWithinIndividual(1)
        ));
        assert!(matches!(
            cluster_index(&ds, Some("nope")).unwrap_err(),
            DatasetError::MissingColumn(_)
        ));
    }
}
