//! Structured extraction of stage tables from raw model text, and repair
//! prompts for responses that cannot be used.
//!
//! The dialect is comma-delimited, double-quote quoted with doubled quotes as
//! escape, header row mandatory. Markdown pipe tables are normalized to this
//! dialect first. Surrounding prose is ignored: the first line whose fields
//! match the schema header (case-insensitive, whitespace-tolerant) starts the
//! table, and a blank line, a code fence, or a non-tabular line ends it.
//!
//! The per-stage column sets are a reconstruction: they carry what each
//! stage must hand to the next and to the final table, not a published
//! format.

use std::fmt;

use thiserror::Error;

use crate::domain::{Guideword, Severity};
use crate::stage::Stage;
use crate::templates::{estimate_tokens, RenderedPrompt};

const EXCERPT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Text,
    Integer,
    Severity,
    Guideword,
    Id,
}

impl ValueKind {
    fn allowed_values(self) -> Option<&'static str> {
        match self {
            ValueKind::Severity => Some("S0, S1, S2, S3"),
            ValueKind::Guideword => Some("Omission, Commission (optionally followed by a qualifier in parentheses)"),
            ValueKind::Integer => Some("a whole number"),
            ValueKind::Id => Some("an identifier such as HE001"),
            ValueKind::Text => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub kind: ValueKind,
    /// Text cells of a required column must be non-empty.
    pub required: bool,
}

impl Column {
    pub fn new(name: &str, kind: ValueKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            required: true,
        }
    }

    pub fn optional(name: &str, kind: ValueKind) -> Self {
        Self {
            required: false,
            ..Self::new(name, kind)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid schema for {stage}: {reason}")]
pub struct SchemaError {
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSchema {
    stage: Stage,
    columns: Vec<Column>,
    min_rows: usize,
    max_rows: Option<usize>,
}

impl StageSchema {
    pub fn new(
        stage: Stage,
        columns: Vec<Column>,
        min_rows: usize,
        max_rows: Option<usize>,
    ) -> Result<Self, SchemaError> {
        let err = |reason: String| SchemaError { stage, reason };
        if columns.is_empty() {
            return Err(err("no columns".into()));
        }
        for (i, c) in columns.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(err(format!("column {i} has an empty name")));
            }
            if columns[..i].iter().any(|p| normalize_name(&p.name) == normalize_name(&c.name)) {
                return Err(err(format!("duplicate column {:?}", c.name)));
            }
        }
        if let Some(max) = max_rows {
            if min_rows > max {
                return Err(err(format!("min_rows {min_rows} exceeds max_rows {max}")));
            }
        }
        Ok(Self {
            stage,
            columns,
            min_rows,
            max_rows,
        })
    }

    pub fn hazards() -> Self {
        Self::new(
            Stage::Hazards,
            vec![
                Column::new("Guideword", ValueKind::Guideword),
                Column::new("Malfunction", ValueKind::Text),
            ],
            1,
            None,
        )
        .unwrap()
    }

    /// Exactly `count` geometry rows.
    pub fn geometries(count: usize) -> Self {
        Self::new(
            Stage::Geometries,
            vec![
                Column::new("Lanes", ValueKind::Integer),
                Column::new("Road Shape", ValueKind::Text),
                Column::optional("Slope", ValueKind::Text),
                Column::optional("Features", ValueKind::Text),
            ],
            count,
            Some(count),
        )
        .unwrap()
    }

    /// Zero rows is a valid answer: no harm for this combination.
    pub fn expansion() -> Self {
        Self::new(
            Stage::Expansion,
            vec![
                Column::new("Detailed Scenario", ValueKind::Text),
                Column::optional("Agents", ValueKind::Text),
                Column::optional("Hazardous Event", ValueKind::Text),
            ],
            0,
            None,
        )
        .unwrap()
    }

    pub fn severity() -> Self {
        Self::new(
            Stage::Severity,
            vec![
                Column::new("Severity", ValueKind::Severity),
                Column::new("Rationale", ValueKind::Text),
            ],
            1,
            Some(1),
        )
        .unwrap()
    }

    pub fn safety_goal() -> Self {
        Self::new(
            Stage::SafetyGoal,
            vec![Column::new("Safety Goal", ValueKind::Text)],
            1,
            Some(1),
        )
        .unwrap()
    }

    pub fn cluster_select(count: usize) -> Self {
        Self::new(
            Stage::ClusterSelect,
            vec![Column::new("ID", ValueKind::Id)],
            count,
            Some(count),
        )
        .unwrap()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn min_rows(&self) -> usize {
        self.min_rows
    }

    pub fn max_rows(&self) -> Option<usize> {
        self.max_rows
    }

    /// The header line as the model must emit it.
    pub fn header_line(&self) -> String {
        self.columns
            .iter()
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn row_count_phrase(&self) -> String {
        match self.max_rows {
            Some(max) if max == self.min_rows => format!("exactly {max} data rows"),
            Some(max) => format!("between {} and {max} data rows", self.min_rows),
            None => format!("at least {} data rows", self.min_rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Text(String),
    Integer(i64),
    Severity(Severity),
    Guideword(Guideword),
    Id(String),
}

/// One parsed data row, cells in schema column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedRow {
    pub cells: Vec<Cell>,
}

impl TypedRow {
    /// Text of a text or id cell; other kinds are rendered.
    pub fn text(&self, index: usize) -> String {
        match &self.cells[index] {
            Cell::Text(s) | Cell::Id(s) => s.clone(),
            Cell::Integer(n) => n.to_string(),
            Cell::Severity(s) => s.to_string(),
            Cell::Guideword(g) => g.to_string(),
        }
    }

    pub fn integer(&self, index: usize) -> Option<i64> {
        match &self.cells[index] {
            Cell::Integer(n) => Some(*n),
            _ => None,
        }
    }

    pub fn severity(&self, index: usize) -> Option<Severity> {
        match &self.cells[index] {
            Cell::Severity(s) => Some(*s),
            _ => None,
        }
    }

    pub fn guideword(&self, index: usize) -> Option<&Guideword> {
        match &self.cells[index] {
            Cell::Guideword(g) => Some(g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureCode {
    NoTableFound,
    HeaderMismatch,
    BadCell,
    RowCount,
    Truncated,
}

impl FailureCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCode::NoTableFound => "no-table-found",
            FailureCode::HeaderMismatch => "header-mismatch",
            FailureCode::BadCell => "bad-cell",
            FailureCode::RowCount => "row-count",
            FailureCode::Truncated => "truncated",
        }
    }
}

impl fmt::Display for FailureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub code: FailureCode,
    pub detail: String,
    pub excerpt: String,
    /// What the model should have produced: header line, allowed tokens,
    /// valid ids or row count.
    pub expected: Option<String>,
}

impl ParseFailure {
    pub fn new(code: FailureCode, detail: impl Into<String>, excerpt: &str) -> Self {
        Self {
            code,
            detail: detail.into(),
            excerpt: clip(excerpt),
            expected: None,
        }
    }

    pub fn with_expected(mut self, expected: impl Into<String>) -> Self {
        self.expected = Some(expected.into());
        self
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

/// Either the typed rows or the reason they could not be extracted.
pub type ParseOutcome = Result<Vec<TypedRow>, ParseFailure>;

fn clip(text: &str) -> String {
    let text = text.trim();
    match text.char_indices().nth(EXCERPT_LIMIT) {
        Some((idx, _)) => format!("{}...", &text[..idx]),
        None => text.to_string(),
    }
}

fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Splits a markdown pipe-table line into trimmed cells. `\|` is a literal pipe.
fn split_pipe_row(line: &str) -> Vec<String> {
    let mut cells = vec![String::new()];
    let mut chars = line.trim().chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                chars.next();
                cells.last_mut().unwrap().push('|');
            }
            '|' => cells.push(String::new()),
            _ => cells.last_mut().unwrap().push(c),
        }
    }
    if cells.first().is_some_and(|c| c.trim().is_empty()) {
        cells.remove(0);
    }
    if cells.len() > 1 && cells.last().is_some_and(|c| c.trim().is_empty()) {
        cells.pop();
    }
    cells.into_iter().map(|c| c.trim().to_string()).collect()
}

fn is_pipe_separator(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            let inner = c.trim_start_matches(':').trim_end_matches(':');
            !inner.is_empty() && inner.chars().all(|ch| ch == '-')
        })
}

fn csv_quote(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) || cell.starts_with(' ') || cell.ends_with(' ') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Rewrites markdown pipe-table lines as CSV lines; other lines pass through.
fn normalize_text(raw: &str) -> String {
    let text = raw
        .replace('\u{feff}', "")
        .replace("\r\n", "\n")
        .replace('\r', "\n");
    let mut out = String::with_capacity(text.len());
    let mut in_quotes = false;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        if !in_quotes && body.trim_start().starts_with('|') {
            let cells = split_pipe_row(body);
            if !is_pipe_separator(&cells) {
                let row: Vec<String> = cells.iter().map(|c| csv_quote(c)).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            continue;
        }
        if body.matches('"').count() % 2 == 1 {
            in_quotes = !in_quotes;
        }
        out.push_str(line);
    }
    out
}

#[derive(Debug)]
struct RawRecord {
    fields: Vec<String>,
    /// Byte range of the record in the scanned text.
    start: usize,
    end: usize,
    unterminated_quote: bool,
    at_eof: bool,
}

/// Reads one CSV record starting at `start`. Lenient: whitespace around
/// quoted fields is dropped and stray characters after a closing quote are
/// kept as part of the field.
fn read_record(text: &str, start: usize) -> RawRecord {
    let bytes = text.as_bytes();
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut i = start;
    let mut unterminated_quote = false;
    let mut quoted = false;
    loop {
        // field start: skip leading spaces to look for an opening quote
        let mut j = i;
        while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t') {
            j += 1;
        }
        if j < bytes.len() && bytes[j] == b'"' && !quoted {
            quoted = true;
            i = j + 1;
            loop {
                match text[i..].find('"') {
                    None => {
                        field.push_str(&text[i..]);
                        i = bytes.len();
                        unterminated_quote = true;
                        break;
                    }
                    Some(off) => {
                        field.push_str(&text[i..i + off]);
                        i += off + 1;
                        if i < bytes.len() && bytes[i] == b'"' {
                            field.push('"');
                            i += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            if unterminated_quote {
                fields.push(field);
                return RawRecord {
                    fields,
                    start,
                    end: bytes.len(),
                    unterminated_quote,
                    at_eof: true,
                };
            }
        }
        // unquoted remainder of the field (or trailing junk after a quote)
        let rest = &text[i..];
        let stop = rest.find([',', '\n']).unwrap_or(rest.len());
        let tail = &rest[..stop];
        if quoted {
            if !tail.trim().is_empty() {
                field.push_str(tail.trim_end());
            }
        } else {
            field.push_str(tail);
        }
        i += stop;
        fields.push(std::mem::take(&mut field));
        quoted = false;
        if i >= bytes.len() {
            return RawRecord {
                fields,
                start,
                end: i,
                unterminated_quote,
                at_eof: true,
            };
        }
        if bytes[i] == b'\n' {
            return RawRecord {
                fields,
                start,
                end: i + 1,
                unterminated_quote,
                at_eof: i + 1 >= bytes.len(),
            };
        }
        // comma
        i += 1;
    }
}

/// Trims every field and drops empty trailing fields beyond `columns`
/// (a stray trailing comma).
fn trimmed_fields(record: &RawRecord, columns: usize) -> Vec<String> {
    let mut fields: Vec<String> = record.fields.iter().map(|f| f.trim().to_string()).collect();
    while fields.len() > columns.max(1) && fields.last().is_some_and(|f| f.is_empty()) {
        fields.pop();
    }
    fields
}

fn header_matches(fields: &[String], schema: &StageSchema) -> bool {
    fields.len() == schema.columns.len()
        && fields
            .iter()
            .zip(&schema.columns)
            .all(|(f, c)| normalize_name(f) == normalize_name(&c.name))
}

fn looks_like_header(fields: &[String], schema: &StageSchema) -> bool {
    let named = fields.iter().any(|f| {
        let f = normalize_name(f);
        schema.columns.iter().any(|c| normalize_name(&c.name) == f)
    });
    // Unnamed lines only count when every field reads like a column name:
    // short, no digits, no sentence punctuation. Otherwise a sentence with a
    // comma, or a header-less data row, would be reported as a bad header.
    let label_like = |f: &String| {
        let f = f.trim();
        !f.is_empty()
            && f.split_whitespace().count() <= 3
            && !f.chars().any(|c| c.is_ascii_digit())
            && !f.ends_with(['.', '!', '?', ':'])
    };
    named
        || (schema.columns.len() >= 2
            && fields.len() == schema.columns.len()
            && fields.iter().all(label_like))
}

/// Locates the first table whose header matches `schema`, parses its rows
/// and validates every cell. Never panics.
pub fn extract_table(raw_text: &str, schema: &StageSchema) -> ParseOutcome {
    let text = normalize_text(raw_text);
    let header_expected = schema.header_line();

    // header search, line by line
    let mut header_end = None;
    let mut drift: Option<String> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if body.matches('"').count() % 2 == 0 {
            let rec = read_record(body, 0);
            let fields = trimmed_fields(&rec, schema.columns.len());
            if header_matches(&fields, schema) {
                header_end = Some(offset + line.len());
                break;
            }
            if drift.is_none() && !body.trim().is_empty() && looks_like_header(&fields, schema) {
                drift = Some(body.to_string());
            }
        }
        offset += line.len();
    }
    let Some(mut pos) = header_end else {
        return Err(match drift {
            Some(line) => ParseFailure::new(
                FailureCode::HeaderMismatch,
                format!("table header does not match the expected header {header_expected}"),
                &line,
            )
            .with_expected(header_expected),
            None => ParseFailure::new(
                FailureCode::NoTableFound,
                format!("no CSV table with header {header_expected} found"),
                raw_text,
            )
            .with_expected(header_expected),
        });
    };

    let columns = schema.columns.len();
    let mut raw_rows: Vec<(Vec<String>, String)> = Vec::new();
    while pos < text.len() {
        let rec = read_record(&text, pos);
        let line = &text[rec.start..rec.end];
        if rec.unterminated_quote {
            return Err(ParseFailure::new(
                FailureCode::Truncated,
                format!("response ends inside a quoted field after {} complete rows", raw_rows.len()),
                line,
            ));
        }
        let fields = trimmed_fields(&rec, schema.columns.len());
        let blank = fields.len() == 1 && fields[0].is_empty();
        if blank || line.trim_start().starts_with("```") {
            break;
        }
        if fields.len() != columns {
            let rest_blank = text[rec.end..].trim().is_empty();
            if fields.len() < columns && (rec.at_eof || rest_blank) && (fields.len() > 1 || columns <= 2) {
                return Err(ParseFailure::new(
                    FailureCode::Truncated,
                    format!(
                        "last row has {} of {columns} fields; the response appears cut off",
                        fields.len()
                    ),
                    line,
                ));
            }
            if fields.len() == 1 && columns > 1 {
                // a prose line ends the table
                break;
            }
            return Err(ParseFailure::new(
                FailureCode::BadCell,
                format!(
                    "row {} has {} fields, expected {columns}; quote values containing commas",
                    raw_rows.len() + 1,
                    fields.len()
                ),
                line,
            ));
        }
        raw_rows.push((fields, line.to_string()));
        pos = rec.end;
    }

    let count = raw_rows.len();
    let too_few = count < schema.min_rows;
    let too_many = schema.max_rows.is_some_and(|max| count > max);
    if too_few || too_many {
        let excerpt = raw_rows
            .last()
            .map(|(_, l)| l.as_str())
            .unwrap_or(header_expected.as_str());
        return Err(ParseFailure::new(
            FailureCode::RowCount,
            format!("table has {count} data rows, expected {}", schema.row_count_phrase()),
            excerpt,
        )
        .with_expected(schema.row_count_phrase()));
    }

    raw_rows
        .iter()
        .enumerate()
        .map(|(r, (fields, line))| {
            let cells = fields
                .iter()
                .zip(&schema.columns)
                .map(|(value, column)| parse_cell(value, column, r + 1, line))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TypedRow { cells })
        })
        .collect()
}

fn parse_cell(value: &str, column: &Column, row: usize, line: &str) -> Result<Cell, ParseFailure> {
    let bad = |why: String| {
        let failure = ParseFailure::new(
            FailureCode::BadCell,
            format!("row {row}, column {}: {why}", column.name),
            line,
        );
        match column.kind.allowed_values() {
            Some(allowed) => failure.with_expected(format!("{}: {allowed}", column.name)),
            None => failure,
        }
    };
    if value.is_empty() {
        return if column.required {
            Err(bad("value is empty".into()))
        } else {
            Ok(Cell::Text(String::new()))
        };
    }
    match column.kind {
        ValueKind::Text => Ok(Cell::Text(value.to_string())),
        ValueKind::Integer => value
            .parse::<i64>()
            .map(Cell::Integer)
            .map_err(|_| bad(format!("{value:?} is not an integer"))),
        ValueKind::Severity => value
            .parse::<Severity>()
            .map(Cell::Severity)
            .map_err(|_| bad(format!("{value:?} is not a severity class"))),
        ValueKind::Guideword => value
            .parse::<Guideword>()
            .map(Cell::Guideword)
            .map_err(|_| bad(format!("{value:?} is not a guideword"))),
        ValueKind::Id => {
            let split = value.find(|c: char| c.is_ascii_digit()).unwrap_or(value.len());
            let (prefix, digits) = value.split_at(split);
            if !prefix.is_empty()
                && prefix.chars().all(|c| c.is_ascii_alphabetic())
                && !digits.is_empty()
                && digits.chars().all(|c| c.is_ascii_digit())
            {
                Ok(Cell::Id(value.to_ascii_uppercase()))
            } else {
                Err(bad(format!("{value:?} is not an identifier")))
            }
        }
    }
}

/// Writes rows as CSV under the schema header.
pub fn serialize_rows(schema: &StageSchema, rows: &[Vec<String>]) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer
        .write_record(schema.columns.iter().map(|c| c.name.as_str()))
        .expect("in-memory write");
    for row in rows {
        writer.write_record(row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Builds the follow-up prompt for a failed response: the original prompt,
/// what went wrong, the offending excerpt, and the response template again.
pub fn build_repair_prompt(original: &RenderedPrompt, failure: &ParseFailure) -> RenderedPrompt {
    let instruction = match failure.code {
        FailureCode::HeaderMismatch => format!(
            "The header line of the table must be exactly:\n{}",
            failure.expected.as_deref().unwrap_or_default()
        ),
        FailureCode::NoTableFound => format!(
            "Answer with a CSV table whose header line is exactly:\n{}",
            failure.expected.as_deref().unwrap_or_default()
        ),
        FailureCode::BadCell => match &failure.expected {
            Some(allowed) => format!("Allowed values for {allowed}."),
            _ => "Every row must contain one value per column. Enclose values that contain commas, double quotes or line breaks in double quotes, and double any quote inside them.".to_string(),
        },
        FailureCode::RowCount => format!(
            "The table must contain {}.",
            failure.expected.as_deref().unwrap_or("the requested number of rows")
        ),
        FailureCode::Truncated => "Your answer was cut off. Emit the complete table again in full, starting with the header line; do not continue the previous answer.".to_string(),
    };
    let text = format!(
        "{original}\n\n=== CORRECTION REQUIRED ===\nYour previous answer to this task could not be used.\nProblem ({code}): {detail}\nOffending part of your answer:\n\"\"\"\n{excerpt}\n\"\"\"\n{instruction}\nIdentify what caused this mistake and avoid it. Then answer the task again:\n{task}\n\nUse exactly this response template:\n{template}",
        original = original.text,
        code = failure.code,
        detail = failure.detail,
        excerpt = failure.excerpt,
        task = original.task,
        template = original.template,
    );
    RenderedPrompt {
        stage: original.stage,
        token_estimate: estimate_tokens(&text),
        text,
        task: original.task.clone(),
        template: original.template.clone(),
        bindings: original.bindings.clone(),
    }
}
