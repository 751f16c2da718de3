//! POI ingestion: OSM XML nodes, POI CSV files, and the feature to
//! activity-category mapping.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use crate::error::{Error, Result};

/// The ten activity categories, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Eating,
    Educational,
    Entertainment,
    Health,
    Outdoor,
    Residential,
    Shopping,
    Sporting,
    Traveling,
    Working,
}

pub const N_CATEGORIES: usize = 10;

impl Category {
    pub const ALL: [Category; N_CATEGORIES] = [
        Category::Eating,
        Category::Educational,
        Category::Entertainment,
        Category::Health,
        Category::Outdoor,
        Category::Residential,
        Category::Shopping,
        Category::Sporting,
        Category::Traveling,
        Category::Working,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Eating => "eating",
            Category::Educational => "educational",
            Category::Entertainment => "entertainment",
            Category::Health => "health",
            Category::Outdoor => "outdoor",
            Category::Residential => "residential",
            Category::Shopping => "shopping",
            Category::Sporting => "sporting",
            Category::Traveling => "traveling",
            Category::Working => "working",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown activity category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    /// `key:value`, lower case.
    pub feature: String,
}

/// Maps POI features onto activity categories with weight shares.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMapping {
    entries: BTreeMap<String, Vec<(Category, f64)>>,
}

const DEFAULT_MAPPING: &str = include_str!("../data/default_mapping.csv");

impl Default for CategoryMapping {
    fn default() -> Self {
        CategoryMapping::parse(DEFAULT_MAPPING).expect("bundled mapping is valid")
    }
}

impl CategoryMapping {
    /// Parses `feature,category,share` lines. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(Category, f64)>> = BTreeMap::new();
        let mut first_line: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Mapping {
                line: line_no,
                message,
            };
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", parts.len())));
            }
            let feature = parts[0].to_lowercase();
            if feature.is_empty() {
                return Err(err("empty feature".into()));
            }
            let category = Category::from_str(parts[1]).map_err(err)?;
            let share: f64 = parts[2]
                .parse()
                .map_err(|_| err(format!("share `{}` is not a number", parts[2])))?;
            if !(share > 0.0 && share <= 1.0) {
                return Err(err(format!("share {share} outside (0, 1]")));
            }
            let slot = entries.entry(feature.clone()).or_default();
            if slot.iter().any(|(c, _)| *c == category) {
                return Err(err(format!("duplicate category {category} for {feature}")));
            }
            slot.push((category, share));
            first_line.entry(feature).or_insert(line_no);
        }
        for (feature, shares) in &mut entries {
            shares.sort_by_key(|(c, _)| *c);
            let total: f64 = shares.iter().map(|(_, s)| s).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Mapping {
                    line: first_line[feature],
                    message: format!("shares of {feature} sum to {total}, not 1"),
                });
            }
        }
        Ok(CategoryMapping { entries })
    }

    pub fn from_entries(entries: BTreeMap<String, Vec<(Category, f64)>>) -> Result<Self> {
        let mut text = String::new();
        for (f, shares) in &entries {
            for (c, s) in shares {
                text.push_str(&format!("{f},{c},{s}\n"));
            }
        }
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# feature,category,share\n");
        for (f, shares) in &self.entries {
            for (c, s) in shares {
                out.push_str(&format!("{f},{c},{s}\n"));
            }
        }
        out
    }

    pub fn contains(&self, feature: &str) -> bool {
        self.entries.contains_key(feature)
    }

    pub fn shares(&self, feature: &str) -> Option<&[(Category, f64)]> {
        self.entries.get(feature).map(Vec::as_slice)
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Features that carry weight in `category`, with their share, in
    /// feature order.
    pub fn features_for(&self, category: Category) -> Vec<(&str, f64)> {
        self.entries
            .iter()
            .filter_map(|(f, shares)| {
                shares
                    .iter()
                    .find(|(c, _)| *c == category)
                    .map(|(_, s)| (f.as_str(), *s))
            })
            .collect()
    }
}

/// Tag keys that make a node a POI, in precedence order.
pub const RECOGNIZED_KEYS: [&str; 9] = [
    "amenity", "shop", "leisure", "tourism", "building", "landuse", "highway", "office", "sport",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OsmParse {
    pub records: Vec<PoiRecord>,
    /// Nodes without any recognized tag.
    pub skipped_untagged: usize,
    /// Tagged nodes with missing or unusable coordinates.
    pub skipped_invalid: usize,
}

impl OsmParse {
    pub fn skipped(&self) -> usize {
        self.skipped_untagged + self.skipped_invalid
    }
}

#[derive(Default)]
struct PendingNode {
    id: Option<String>,
    lat: Option<f64>,
    lon: Option<f64>,
    tags: Vec<(String, String)>,
}

fn line_at(text: &str, pos: u64) -> usize {
    let end = (pos as usize).min(text.len());
    text.as_bytes()[..end]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}

fn read_node_attrs(e: &BytesStart<'_>, text: &str, pos: u64) -> Result<PendingNode> {
    let mut node = PendingNode::default();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| Error::Xml {
            line: line_at(text, pos),
            message: err.to_string(),
        })?;
        let value = attr
            .unescape_value()
            .map_err(|err| Error::Xml {
                line: line_at(text, pos),
                message: err.to_string(),
            })?
            .into_owned();
        match attr.key.as_ref() {
            b"id" => node.id = Some(value),
            b"lat" => node.lat = value.trim().parse().ok().filter(|v: &f64| v.is_finite()),
            b"lon" => node.lon = value.trim().parse().ok().filter(|v: &f64| v.is_finite()),
            _ => {}
        }
    }
    Ok(node)
}

fn finish_node(node: PendingNode, out: &mut OsmParse) {
    let feature = RECOGNIZED_KEYS.iter().find_map(|key| {
        node.tags
            .iter()
            .find(|(k, v)| k == key && !v.trim().is_empty())
            .map(|(k, v)| format!("{}:{}", k, v.trim()).to_lowercase())
    });
    let Some(feature) = feature else {
        out.skipped_untagged += 1;
        return;
    };
    match (node.lat, node.lon) {
        (Some(lat), Some(lon)) => out.records.push(PoiRecord {
            id: node.id.unwrap_or_default(),
            lon,
            lat,
            feature,
        }),
        _ => out.skipped_invalid += 1,
    }
}

/// Extracts POIs from the `node` elements of an OSM XML document.
pub fn parse_osm_xml<R: Read>(mut stream: R) -> Result<OsmParse> {
    let mut text = String::new();
    stream.read_to_string(&mut text)?;
    let mut reader = Reader::from_str(&text);
    reader.config_mut().trim_text(true);

    let mut out = OsmParse::default();
    let mut current: Option<PendingNode> = None;
    let mut depth = 0usize;
    loop {
        let pos = reader.buffer_position();
        let event = reader.read_event().map_err(|err| Error::Xml {
            line: line_at(&text, reader.error_position()),
            message: err.to_string(),
        })?;
        match event {
            Event::Start(e) => {
                depth += 1;
                if e.name().as_ref() == b"node" {
                    current = Some(read_node_attrs(&e, &text, pos)?);
                }
            }
            Event::Empty(e) => match e.name().as_ref() {
                b"node" => finish_node(read_node_attrs(&e, &text, pos)?, &mut out),
                b"tag" => {
                    if let Some(node) = current.as_mut() {
                        let mut k = None;
                        let mut v = None;
                        for attr in e.attributes().flatten() {
                            let value = attr.unescape_value().map(|c| c.into_owned()).ok();
                            match attr.key.as_ref() {
                                b"k" => k = value,
                                b"v" => v = value,
                                _ => {}
                            }
                        }
                        if let (Some(k), Some(v)) = (k, v) {
                            node.tags.push((k.trim().to_lowercase(), v));
                        }
                    }
                }
                _ => {}
            },
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                if e.name().as_ref() == b"node" {
                    if let Some(node) = current.take() {
                        finish_node(node, &mut out);
                    }
                }
            }
            Event::Eof => {
                if depth > 0 {
                    return Err(Error::Xml {
                        line: line_at(&text, text.len() as u64),
                        message: "document ends inside an open element".into(),
                    });
                }
                break;
            }
            _ => {}
        }
    }
    Ok(out)
}

pub const POI_CSV_HEADER: [&str; 4] = ["id", "lon", "lat", "feature"];

/// Reads a `id,lon,lat,feature` CSV. Row numbers in errors are file lines.
pub fn parse_poi_csv<R: Read>(stream: R) -> Result<Vec<PoiRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(stream);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::Row {
            row: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Header {
                expected: POI_CSV_HEADER.join(","),
                found: String::new(),
            })
        }
    };
    if header.iter().map(str::trim).ne(POI_CSV_HEADER) {
        return Err(Error::Header {
            expected: POI_CSV_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| Error::Row { row, message };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let coord = |i: usize, name: &str| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{name} `{}` is not a finite number", &rec[i])))
        };
        let lon = coord(1, "lon")?;
        let lat = coord(2, "lat")?;
        let feature = rec[3].trim().to_lowercase();
        if feature.is_empty() {
            return Err(err("empty feature".into()));
        }
        out.push(PoiRecord {
            id: rec[0].to_string(),
            lon,
            lat,
            feature,
        });
    }
    Ok(out)
}

pub fn write_poi_csv<W: Write>(pois: &[PoiRecord], stream: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(stream);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(POI_CSV_HEADER).map_err(csv_err)?;
    for p in pois {
        w.write_record([
            p.id.as_str(),
            &p.lon.to_string(),
            &p.lat.to_string(),
            &p.feature,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the records whose feature is mapped, preserving order.
pub fn filter_relevant(pois: &[PoiRecord], mapping: &CategoryMapping) -> Vec<PoiRecord> {
    pois.iter()
        .filter(|p| mapping.contains(&p.feature))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_restaurant_node() {
        let xml = r#"<osm><node id="1" lat="45.46" lon="9.19"><tag k="amenity" v="restaurant"/></node></osm>"#;
        let got = parse_osm_xml(xml.as_bytes()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records[0].feature, "amenity:restaurant");
        assert_eq!(got.records[0].id, "1");
        assert_eq!((got.records[0].lon, got.records[0].lat), (9.19, 45.46));
    }

    #[test]
    fn name_only_node_is_skipped() {
        let xml = r#"<osm><node id="1" lat="45.46" lon="9.19"><tag k="name" v="X"/></node></osm>"#;
        let got = parse_osm_xml(xml.as_bytes()).unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.skipped(), 1);
    }

    #[test]
    fn key_precedence_and_case() {
        let xml = r#"<osm>
<node id="7" lat="1" lon="2">
  <tag k="shop" v="Bakery"/>
  <tag k="amenity" v="Cafe"/>
</node>
</osm>"#;
        let got = parse_osm_xml(xml.as_bytes()).unwrap();
        assert_eq!(got.records[0].feature, "amenity:cafe");
    }

    #[test]
    fn ways_and_missing_coordinates() {
        let xml = r#"<osm>
<node id="1" lon="9.1"><tag k="shop" v="clothes"/></node>
<way id="2"><nd ref="1"/><tag k="building" v="yes"/></way>
<node id="3" lat="1" lon="1"/>
</osm>"#;
        let got = parse_osm_xml(xml.as_bytes()).unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.skipped_invalid, 1);
        assert_eq!(got.skipped_untagged, 1);
    }

    #[test]
    fn malformed_xml_reports_line() {
        let xml = "<osm>\n<node id=\"1\" lat=\"1\" lon=\"1\">\n</way>\n</osm>";
        match parse_osm_xml(xml.as_bytes()) {
            Err(Error::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected XML error, got {other:?}"),
        }
        let truncated = "<osm>\n<node id=\"1\" lat=\"1\" lon=\"1\">\n";
        assert!(matches!(
            parse_osm_xml(truncated.as_bytes()),
            Err(Error::Xml { .. })
        ));
    }

    #[test]
    fn csv_empty_body() {
        assert!(parse_poi_csv("id,lon,lat,feature\n".as_bytes())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_rows_in_order() {
        let text = "id,lon,lat,feature\na,9.1,45.1,Amenity:Bar\nb,9.2,45.2,shop:clothes\nc,9.3,45.3,leisure:park\n";
        let got = parse_poi_csv(text.as_bytes()).unwrap();
        let ids: Vec<_> = got.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(got[0].feature, "amenity:bar");
    }

    #[test]
    fn csv_bad_latitude_names_row() {
        let text = "id,lon,lat,feature\na,9.1,abc,amenity:bar\n";
        match parse_poi_csv(text.as_bytes()) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn csv_wrong_header() {
        assert!(matches!(
            parse_poi_csv("id,lat,lon,feature\n".as_bytes()),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn default_mapping_is_balanced() {
        let m = CategoryMapping::default();
        assert!(m.len() >= 60);
        for c in Category::ALL {
            assert!(!m.features_for(c).is_empty(), "{c} has no features");
        }
        let cafe = m.shares("amenity:cafe").unwrap();
        assert_eq!(
            cafe,
            &[(Category::Eating, 0.7), (Category::Entertainment, 0.3)]
        );
    }

    #[test]
    fn mapping_rejects_bad_shares() {
        assert!(CategoryMapping::parse("a:b,eating,0.5\n").is_err());
        assert!(CategoryMapping::parse("a:b,cooking,1\n").is_err());
        let m = CategoryMapping::parse("# c\n\na:b,eating,0.25\na:b,working,0.75\n").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(CategoryMapping::parse(&m.to_text()).unwrap(), m);
    }

    fn poi(id: &str, feature: &str) -> PoiRecord {
        PoiRecord {
            id: id.into(),
            lon: 9.0,
            lat: 45.0,
            feature: feature.into(),
        }
    }

    #[test]
    fn filter_edge_cases() {
        let m = CategoryMapping::parse("a:x,eating,1\n").unwrap();
        let all = vec![poi("1", "a:x"), poi("2", "a:x")];
        assert_eq!(filter_relevant(&all, &m), all);
        let none = vec![poi("1", "b:y")];
        assert!(filter_relevant(&none, &m).is_empty());
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec(
            ("[a-z0-9]{1,6}", -180.0f64..180.0, -89.0f64..89.0, "[a-z]{1,5}:[a-z_]{1,8}"), 0..20)
        ) {
            let pois: Vec<PoiRecord> = rows.into_iter()
                .map(|(id, lon, lat, feature)| PoiRecord { id, lon, lat, feature })
                .collect();
            let mut buf = Vec::new();
            write_poi_csv(&pois, &mut buf).unwrap();
            prop_assert_eq!(parse_poi_csv(buf.as_slice()).unwrap(), pois);
        }

        #[test]
        fn filter_is_order_preserving_sublist(picks in proptest::collection::vec(0usize..4, 0..30)) {
            let m = CategoryMapping::parse("f:0,eating,1\nf:2,working,1\n").unwrap();
            let pois: Vec<_> = picks.iter().enumerate()
                .map(|(i, p)| poi(&i.to_string(), &format!("f:{p}"))).collect();
            let kept = filter_relevant(&pois, &m);
            let mut it = pois.iter();
            for k in &kept {
                prop_assert!(it.any(|p| p == k));
                prop_assert!(m.contains(&k.feature));
            }
            prop_assert_eq!(kept.len(), pois.iter().filter(|p| m.contains(&p.feature)).count());
        }
    }
}
