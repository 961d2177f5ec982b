//! VOC-XML (DIOR) and NWPU VHR-10 text annotation parsers.
//!
//! VOC coordinates are 1-indexed inclusive pixels; they become 0-indexed
//! corners by `x1 = xmin - 1`, `y1 = ymin - 1`, `x2 = xmax`, `y2 = ymax`.
//! NWPU coordinates are already corner coordinates and are kept as is.

use std::sync::OnceLock;

use regex::Regex;

use super::splits::DIOR_CLASSES;
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// NWPU VHR-10 categories; the file format numbers them from 1.
pub const NWPU_CLASSES: [&str; 10] = [
    "airplane",
    "ship",
    "storage tank",
    "baseball diamond",
    "tennis court",
    "basketball court",
    "ground track field",
    "harbor",
    "bridge",
    "vehicle",
];

#[derive(Clone, Debug, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub objects: Vec<VocObject>,
}

impl VocAnnotation {
    /// Maps object names onto `DIOR_CLASSES` ids, accepting the spellings
    /// used in the released DIOR files.
    pub fn dior_class_ids(&self) -> Result<Vec<usize>> {
        self.objects
            .iter()
            .map(|o| {
                dior_class(&o.name).ok_or_else(|| Error::Parse {
                    location: format!("object '{}'", o.name),
                    msg: "not a DIOR class".into(),
                })
            })
            .collect()
    }
}

pub fn dior_class(raw: &str) -> Option<usize> {
    let key: String = raw.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
    let canonical = match key.as_str() {
        "expresswayservicearea" => "service area",
        "expresswaytollstation" => "highway toll station",
        "groundtrackfield" => "track field",
        "harbor" => "port",
        "overpass" => "viaduct",
        "golffield" => "golf course",
        _ => {
            return DIOR_CLASSES
                .iter()
                .position(|c| c.replace(' ', "") == key);
        }
    };
    DIOR_CLASSES.iter().position(|c| *c == canonical)
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_of(node: roxmltree::Node, name: &str, path: &str) -> Result<String> {
    child(node, name)
        .and_then(|c| c.text())
        .map(|t| t.trim().to_string())
        .ok_or_else(|| Error::Parse {
            location: format!("{path}/{name}"),
            msg: "missing element".into(),
        })
}

fn number(node: roxmltree::Node, name: &str, path: &str) -> Result<f64> {
    let t = text_of(node, name, path)?;
    t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
        location: format!("{path}/{name}"),
        msg: format!("'{t}' is not a number"),
    })
}

pub fn parse_voc_xml(text: &str) -> Result<VocAnnotation> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Parse {
        location: "xml".into(),
        msg: e.to_string(),
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Parse {
            location: format!("/{}", root.tag_name().name()),
            msg: "root element must be <annotation>".into(),
        });
    }
    let size = child(root, "size");
    let dim = |name: &str| -> Result<Option<usize>> {
        match size {
            None => Ok(None),
            Some(s) => Ok(Some(number(s, name, "/annotation/size")? as usize)),
        }
    };
    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let path = format!("/annotation/object[{i}]");
        let name = text_of(obj, "name", &path)?;
        let bnd = child(obj, "bndbox").ok_or_else(|| Error::Parse {
            location: format!("{path}/bndbox"),
            msg: format!("missing element in object '{name}'"),
        })?;
        let bpath = format!("{path}/bndbox");
        let (xmin, ymin) = (number(bnd, "xmin", &bpath)?, number(bnd, "ymin", &bpath)?);
        let (xmax, ymax) = (number(bnd, "xmax", &bpath)?, number(bnd, "ymax", &bpath)?);
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::Parse {
                location: bpath,
                msg: format!("object '{name}' has xmax <= xmin or ymax <= ymin ({xmin},{ymin},{xmax},{ymax})"),
            });
        }
        let difficult = child(obj, "difficult").and_then(|d| d.text()).map(|t| t.trim() == "1").unwrap_or(false);
        objects.push(VocObject {
            name,
            bbox: BBox::raw(xmin - 1.0, ymin - 1.0, xmax, ymax),
            difficult,
        });
    }
    Ok(VocAnnotation {
        filename: child(root, "filename").and_then(|f| f.text()).map(|t| t.trim().to_string()),
        width: dim("width")?,
        height: dim("height")?,
        objects,
    })
}

fn nwpu_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let n = r"\s*(-?\d+(?:\.\d+)?)\s*";
        Regex::new(&format!(r"^\s*\({n},{n}\)\s*,\s*\({n},{n}\)\s*,\s*(\d+)\s*$")).unwrap()
    })
}

/// Returns `(box, class)` pairs with the 1-based class numbers of the file.
pub fn parse_nwpu(text: &str) -> Result<Vec<(BBox, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            location: format!("line {}", i + 1),
            msg,
        };
        let caps = nwpu_line()
            .captures(line)
            .ok_or_else(|| err(format!("expected '(x1,y1),(x2,y2),class', got '{}'", line.trim())))?;
        let v: Vec<f64> = (1..=4).map(|j| caps[j].parse().unwrap()).collect();
        let class: usize = caps[5].parse().map_err(|_| err("class out of range".into()))?;
        if v[2] <= v[0] {
            return Err(err(format!("x2 <= x1 ({} <= {})", v[2], v[0])));
        }
        if v[3] <= v[1] {
            return Err(err(format!("y2 <= y1 ({} <= {})", v[3], v[1])));
        }
        if class == 0 || class > NWPU_CLASSES.len() {
            return Err(err(format!("class {class} outside 1..={}", NWPU_CLASSES.len())));
        }
        out.push((BBox::raw(v[0], v[1], v[2], v[3]), class));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voc_one_object() {
        let xml = "<annotation><filename>a.jpg</filename><size><width>800</width><height>800</height></size>\
            <object><name>ship</name><bndbox><xmin>10</xmin><ymin>20</ymin><xmax>30</xmax><ymax>40</ymax></bndbox></object>\
            </annotation>";
        let a = parse_voc_xml(xml).unwrap();
        assert_eq!(a.objects[0].bbox.to_array(), [9.0, 19.0, 30.0, 40.0]);
        assert_eq!(a.width, Some(800));
        assert_eq!(a.dior_class_ids().unwrap(), vec![13]);
    }

    #[test]
    fn voc_empty_and_errors() {
        assert!(parse_voc_xml("<annotation></annotation>").unwrap().objects.is_empty());
        let bad = "<annotation><object><name>dam</name><bndbox><xmin>30</xmin><ymin>1</ymin><xmax>30</xmax><ymax>5</ymax></bndbox></object></annotation>";
        let e = parse_voc_xml(bad).unwrap_err().to_string();
        assert!(e.contains("dam"), "{e}");
        let missing = "<annotation><object><name>dam</name><bndbox><xmin>3</xmin></bndbox></object></annotation>";
        let e = parse_voc_xml(missing).unwrap_err().to_string();
        assert!(e.contains("/annotation/object[0]/bndbox/ymin"), "{e}");
    }

    #[test]
    fn dior_aliases() {
        assert_eq!(dior_class("Expressway-Service-area"), Some(7));
        assert_eq!(dior_class("groundtrackfield"), Some(10));
        assert_eq!(dior_class("baseballfield"), Some(2));
        assert_eq!(dior_class("harbor"), Some(11));
        assert_eq!(dior_class("submarine"), None);
    }

    #[test]
    fn nwpu_lines() {
        let b = parse_nwpu("(563,478),(630,573),1\n\n ( 1, 2 ) , (3,4) , 10 \n").unwrap();
        assert_eq!(b[0], (BBox::raw(563.0, 478.0, 630.0, 573.0), 1));
        assert_eq!(b[1].1, 10);
        assert!(parse_nwpu("\n  \n").unwrap().is_empty());
        let e = parse_nwpu("(0,0),(1,1),1\n(5,5),(4,9),2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("x2 <= x1"), "{e}");
        assert!(parse_nwpu("5,5,4,9,2").is_err());
    }
}
