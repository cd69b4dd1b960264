//! XML rendering and parsing of result sets.
//!
//! ```text
//! <resultset query="Q-..." site="A" version="3" skipped="0"><record entity="image" id="I1" site="A"><field name="image.view">MLO</field></record></resultset>
//! ```
//!
//! No declaration, no whitespace between elements; an empty set is a
//! self-closing `<resultset .../>`.

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use crate::analyser::QueryId;
use crate::local::{ResultSet, Row};
use crate::model::{Entity, SiteId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum XmlError {
    #[error("malformed XML: {0}")]
    Syntax(String),
    #[error("unexpected XML structure: {0}")]
    Structure(String),
}

/// Escapes `& < > " '`, and tab, newline and carriage return as character
/// references so they survive attribute-value normalization.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

/// Header attributes of a `<resultset>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultHeader {
    pub query_id: QueryId,
    pub site_id: SiteId,
    pub version: u64,
    pub skipped: u64,
}

/// Renders rows in the order given.
pub fn write_resultset<'a>(header: &ResultHeader, rows: impl IntoIterator<Item = &'a Row>) -> String {
    let mut out = format!(
        "<resultset query=\"{}\" site=\"{}\" version=\"{}\" skipped=\"{}\"",
        header.query_id,
        escape(header.site_id.as_str()),
        header.version,
        header.skipped
    );
    let mut any = false;
    for row in rows {
        if !any {
            out.push('>');
            any = true;
        }
        out.push_str(&format!(
            "<record entity=\"{}\" id=\"{}\" site=\"{}\">",
            row.entity.name(),
            escape(&row.id),
            escape(row.site_id.as_str())
        ));
        for (name, value) in &row.fields {
            out.push_str(&format!("<field name=\"{}\">{}</field>", escape(name), escape(value)));
        }
        out.push_str("</record>");
    }
    if any {
        out.push_str("</resultset>");
    } else {
        out.push_str("/>");
    }
    out
}

pub fn to_xml(r: &ResultSet) -> String {
    let header = ResultHeader {
        query_id: r.query_id,
        site_id: r.site_id.clone(),
        version: r.source_version,
        skipped: r.skipped,
    };
    write_resultset(&header, &r.rows)
}

/// A parsed `<resultset>`: header plus rows in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResultSet {
    pub header: ResultHeader,
    pub rows: Vec<Row>,
}

impl ParsedResultSet {
    pub fn into_result_set(self) -> ResultSet {
        ResultSet {
            query_id: self.header.query_id,
            site_id: self.header.site_id,
            rows: self.rows,
            source_version: self.header.version,
            skipped: self.header.skipped,
        }
    }
}

fn syntax(e: impl std::fmt::Display) -> XmlError {
    XmlError::Syntax(e.to_string())
}

fn structure(msg: impl Into<String>) -> XmlError {
    XmlError::Structure(msg.into())
}

fn attr(e: &BytesStart<'_>, name: &str) -> Result<String, XmlError> {
    for a in e.attributes() {
        let a = a.map_err(syntax)?;
        if a.key.as_ref() == name {
            return Ok(a
                .normalized_value(XmlVersion::Implicit1_0)
                .map_err(syntax)?
                .into_owned());
        }
    }
    Err(structure(format!("<{}> lacks attribute `{name}`", e.name().as_ref())))
}

fn num(e: &BytesStart<'_>, name: &str) -> Result<u64, XmlError> {
    let v = attr(e, name)?;
    v.parse()
        .map_err(|_| structure(format!("attribute `{name}`=`{v}` is not a non-negative integer")))
}

fn header(e: &BytesStart<'_>) -> Result<ResultHeader, XmlError> {
    if e.name().as_ref() != "resultset" {
        return Err(structure("root element must be <resultset>"));
    }
    Ok(ResultHeader {
        query_id: attr(e, "query")?.parse().map_err(structure)?,
        site_id: SiteId::new(attr(e, "site")?),
        version: num(e, "version")?,
        skipped: num(e, "skipped")?,
    })
}

fn predefined(name: &str) -> Option<char> {
    Some(match name {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        _ => return None,
    })
}

/// Parses text produced by [`write_resultset`]; any equivalent well-formed
/// document (extra whitespace between elements, other escapes) is accepted.
pub fn parse_resultset(text: &str) -> Result<ParsedResultSet, XmlError> {
    let mut reader = Reader::from_str(text);
    let mut head: Option<ResultHeader> = None;
    let mut closed = false;
    let mut rows: Vec<Row> = Vec::new();
    let mut record: Option<Row> = None;
    let mut field: Option<(String, String)> = None;

    loop {
        let ev = reader.read_event().map_err(syntax)?;
        if closed && !matches!(ev, Event::Eof | Event::Comment(_)) {
            if let Event::Text(t) = &ev {
                if t.xml10_content().trim().is_empty() {
                    continue;
                }
            }
            return Err(structure("content after </resultset>"));
        }
        match ev {
            Event::Start(e) if head.is_none() => head = Some(header(&e)?),
            Event::Empty(e) if head.is_none() => {
                head = Some(header(&e)?);
                closed = true;
            }
            Event::Start(e) if e.name().as_ref() == "record" && record.is_none() => record = Some(record_row(&e)?),
            Event::Empty(e) if e.name().as_ref() == "record" && record.is_none() => rows.push(record_row(&e)?),
            Event::Start(e) if e.name().as_ref() == "field" && record.is_some() && field.is_none() => {
                field = Some((attr(&e, "name")?, String::new()));
            }
            Event::Empty(e) if e.name().as_ref() == "field" && record.is_some() && field.is_none() => {
                record
                    .as_mut()
                    .expect("checked")
                    .fields
                    .push((attr(&e, "name")?, String::new()));
            }
            Event::Start(e) | Event::Empty(e) => {
                return Err(structure(format!("unexpected element <{}>", e.name().as_ref())))
            }
            Event::Text(t) => match field.as_mut() {
                Some((_, value)) => value.push_str(&t.xml10_content()),
                None if t.xml10_content().trim().is_empty() => {}
                None => return Err(structure("text outside <field>")),
            },
            Event::CData(t) => match field.as_mut() {
                Some((_, value)) => value.push_str(&t.xml10_content()),
                None => return Err(structure("CDATA outside <field>")),
            },
            Event::GeneralRef(r) => {
                let c = match r.resolve_char_ref().map_err(syntax)? {
                    Some(c) => c,
                    None => {
                        let name = r.xml10_content();
                        predefined(&name).ok_or_else(|| syntax(format!("unknown entity &{name};")))?
                    }
                };
                match field.as_mut() {
                    Some((_, value)) => value.push(c),
                    None => return Err(structure("character data outside <field>")),
                }
            }
            Event::End(e) => match e.name().as_ref() {
                "field" => {
                    let f = field.take().ok_or_else(|| structure("stray </field>"))?;
                    record
                        .as_mut()
                        .ok_or_else(|| structure("</field> outside <record>"))?
                        .fields
                        .push(f);
                }
                "record" if field.is_none() => {
                    rows.push(record.take().ok_or_else(|| structure("stray </record>"))?);
                }
                "resultset" if record.is_none() => closed = true,
                other => return Err(structure(format!("unexpected </{}>", other))),
            },
            Event::Eof => break,
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(structure("DOCTYPE not allowed")),
        }
    }
    match head {
        Some(header) if closed => Ok(ParsedResultSet { header, rows }),
        Some(_) => Err(syntax("document ended inside <resultset>")),
        None => Err(structure("no <resultset> element")),
    }
}

fn record_row(e: &BytesStart<'_>) -> Result<Row, XmlError> {
    let entity = attr(e, "entity")?;
    Ok(Row {
        entity: Entity::from_name(&entity).ok_or_else(|| structure(format!("unknown record entity `{entity}`")))?,
        id: attr(e, "id")?,
        site_id: SiteId::new(attr(e, "site")?),
        fields: Vec::new(),
    })
}
